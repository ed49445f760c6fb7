"""srfkit: sparse voxel radiance fields end to end.

Representation and serialization (`field`), cameras and rays (`cameras`),
differentiable volume rendering with compiled or NumPy kernels (`render`),
procedural ground-truth scenes (`scenes`), field fitting (`fitter`),
generation losses (`losses`), the sparse convolutional partial-to-whole
network (`network`, `training`), metrics and meshing (`metrics`,
`meshing`), and the CLI (`cli`).
"""

from .field import (
    NormalizationSpec,
    SparseRadianceField,
    densify,
    load_srf,
    new_srf,
    normalize,
    save_srf,
    sparsify,
)
from .cameras import (
    CameraIntrinsics,
    CameraView,
    RayBundle,
    Split,
    generate_rays,
    look_at,
    random_ood_views,
    random_sphere_views,
    spherical_rig,
)
from .render import (
    RenderConfig,
    RenderGradients,
    RenderOutput,
    backend_name,
    eval_sh,
    render_backward,
    render_image,
    render_rays,
    sample_trilinear,
)
from .scenes import AnalyticScene, ImageBuffer, RigSpec, emit_dataset, load_dataset, make_scene, trace_reference
from .fitter import FitConfig, FitReport, fit_partial, fit_srf, prune, tv_penalty, upsample
from .losses import (
    LossReport,
    LossWeights,
    QGaussianSpec,
    color_loss,
    density_loss,
    perceptual_loss,
    q_gaussian_sample,
    total_loss,
)
from .network import NetConfig, SparseTensor, SurfNet, TrainConfig, sparse_conv3d
from .training import OptimizerState, TrainSample, load_net, save_net, train
from .metrics import MetricReport, psnr, ssim, validation_accuracy
from .meshing import TriMesh, euler_characteristic, marching_cubes, save_obj, surface_area

__version__ = "0.1.0"
