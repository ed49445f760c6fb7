"""Compare the compiled render kernels against the pure-NumPy fallback.

Times forward rendering and the analytic backward pass on a synthetic field
at a few sizes, checking that both backends agree numerically. Run:

    python benchmarks/bench_render.py
"""

import time

import numpy as np

import srfkit.render as R
import srfkit.render._kernels_py as kernels_py
from srfkit.cameras import CameraIntrinsics, CameraView, generate_rays, look_at
from srfkit.field import SparseRadianceField
from srfkit.render import RenderConfig, render_backward, render_rays

try:
    import srfkit.render._kernels as kernels_c
except ImportError:
    kernels_c = None


def make_field(h, n, seed=0):
    rng = np.random.default_rng(seed)
    lin = rng.choice(h**3, size=n, replace=False)
    coords = np.stack(np.unravel_index(lin, (h, h, h)), axis=1)
    feats = np.zeros((n, 13))
    feats[:, 0] = rng.uniform(5, 200, n)
    feats[:, 1:] = rng.normal(0, 0.4, (n, 12))
    return SparseRadianceField.from_arrays(h, 12, coords, feats, dtype=np.float64)


def run_case(h, n_voxels, image_res, repeats=3):
    srf = make_field(h, n_voxels)
    intr = CameraIntrinsics(image_res, image_res, 1.2 * image_res)
    view = CameraView(pose=look_at((2.2, 0.7, 0.9)), intrinsics=intr)
    rays = generate_rays(view)
    cfg = RenderConfig()
    rng = np.random.default_rng(1)
    d_rgb = rng.normal(size=(len(rays), 3))

    results = {}
    backends = [("python", kernels_py)]
    if kernels_c is not None:
        backends.append(("compiled", kernels_c))
    outputs = {}
    for name, module in backends:
        saved = R._backend
        R._backend = module
        try:
            t0 = time.perf_counter()
            for _ in range(repeats):
                out = render_rays(srf, rays, cfg)
            fwd = (time.perf_counter() - t0) / repeats
            t0 = time.perf_counter()
            for _ in range(repeats):
                grads = render_backward(srf, rays, cfg, d_rgb)
            bwd = (time.perf_counter() - t0) / repeats
        finally:
            R._backend = saved
        results[name] = (fwd, bwd)
        outputs[name] = (out.rgb, grads.d_density)
    if len(outputs) == 2:
        rgb_diff = np.max(np.abs(outputs["python"][0] - outputs["compiled"][0]))
        grad_diff = np.max(np.abs(outputs["python"][1] - outputs["compiled"][1]))
        assert rgb_diff < 1e-9 and grad_diff < 1e-9, (rgb_diff, grad_diff)
    return results


def main():
    print(f"{'case':<28} {'backend':<10} {'forward':>10} {'backward':>10} {'speedup':>9}")
    for h, n, res in [(16, 800, 48), (32, 4000, 64), (64, 20000, 64)]:
        case = f"H={h} M={n} {res}x{res}"
        results = run_case(h, n, res)
        base = results.get("python")
        for name, (fwd, bwd) in results.items():
            speed = ""
            if name == "compiled" and base is not None:
                speed = f"x{base[0] / fwd:.1f}/x{base[1] / bwd:.1f}"
            print(f"{case:<28} {name:<10} {fwd * 1e3:9.1f}ms {bwd * 1e3:9.1f}ms {speed:>9}")
    if kernels_c is None:
        print("\ncompiled kernels not built; showing fallback only")


if __name__ == "__main__":
    main()
