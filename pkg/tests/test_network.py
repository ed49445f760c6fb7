import numpy as np
import pytest

from helpers import make_random_field

from srfkit.cameras import CameraIntrinsics, CameraView, look_at
from srfkit.errors import ConfigurationError, ContractError, FormatError
from srfkit.field import NormalizationSpec, SparseRadianceField, densify, new_srf
from srfkit.losses import LossWeights, QGaussianSpec, perceptual_loss, total_loss
from srfkit.network import (
    NetConfig,
    SparseTensor,
    SurfNet,
    TrainConfig,
    sparse_conv3d,
    upsample_conv,
)
from srfkit.render import RenderConfig
from srfkit.scenes import ImageBuffer
from srfkit.training import OptimizerState, TrainSample, load_net, save_net, train

H = 8


def _tensor(coords, feats):
    return SparseTensor(
        coords=np.asarray(coords, dtype=np.int64),
        features=np.asarray(feats, dtype=np.float64),
        stride=1,
        resolution=H,
    )


def _identity_kernel(c):
    w = np.zeros((27, c, c))
    w[13] = np.eye(c)  # offset (0, 0, 0) is the middle of the 27
    return w


# -- convolution --------------------------------------------------------------


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    coords = [(2, 2, 2), (3, 2, 2), (5, 6, 1)]
    feats = rng.normal(size=(3, 4))
    out = sparse_conv3d(_tensor(coords, feats), _identity_kernel(4), stride=1)
    # output support dilates, but features at the input coords are identical
    lookup = {tuple(c): i for i, c in enumerate(out.coords.tolist())}
    for c, f in zip(coords, feats):
        row = lookup[c]
        assert np.allclose(out.features[row], f)
    others = [i for i in range(out.num_sites)
              if tuple(out.coords[i].tolist()) not in set(coords)]
    assert np.allclose(out.features[others], 0.0)


def test_conv_single_voxel_expands_to_kernel_slices():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(27, 3, 2))
    f = rng.normal(size=(1, 3))
    out = sparse_conv3d(_tensor([(4, 4, 4)], f), w, stride=1)
    assert out.num_sites == 27
    offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]
    lookup = {tuple(c): i for i, c in enumerate(out.coords.tolist())}
    for oi, off in enumerate(offsets):
        # output at p gathers input at p + off; the input sits at (4,4,4)
        p = (4 - off[0], 4 - off[1], 4 - off[2])
        row = lookup[p]
        assert np.allclose(out.features[row], f[0] @ w[oi])


def test_conv_matches_dense_oracle():
    rng = np.random.default_rng(2)
    for stride in (1, 2):
        srf = make_random_field(rng, H, 3, 20, dtype=np.float64)
        x = _tensor(srf.coords, srf.features)
        w = rng.normal(size=(27, 4, 5))
        out = sparse_conv3d(x, w, stride=stride)
        dense = densify(srf).astype(np.float64)
        offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]
        for row, p in enumerate(out.coords.tolist()):
            expected = np.zeros(5)
            for oi, off in enumerate(offsets):
                q = (p[0] + off[0], p[1] + off[1], p[2] + off[2])
                if all(0 <= qi < H for qi in q):
                    expected += dense[q] @ w[oi]
            assert np.max(np.abs(out.features[row] - expected)) < 1e-5


def test_conv_stride2_support_on_even_lattice():
    rng = np.random.default_rng(3)
    srf = make_random_field(rng, H, 3, 15, dtype=np.float64)
    out = sparse_conv3d(_tensor(srf.coords, srf.features),
                        rng.normal(size=(27, 4, 2)), stride=2)
    assert np.all(out.coords % 2 == 0)
    assert out.stride == 2


def test_conv_weight_shape_contract():
    x = _tensor([(1, 1, 1)], np.ones((1, 4)))
    with pytest.raises(ContractError):
        sparse_conv3d(x, np.zeros((8, 4, 4)))
    with pytest.raises(ContractError):
        sparse_conv3d(x, np.zeros((27, 5, 4)))


def test_upsample_conv_children():
    rng = np.random.default_rng(4)
    x = SparseTensor(
        coords=np.array([[2, 2, 4]], dtype=np.int64),
        features=rng.normal(size=(1, 3)),
        stride=2,
        resolution=H,
    )
    w = rng.normal(size=(8, 3, 2))
    out = upsample_conv(x, w)
    assert out.stride == 1
    assert out.num_sites == 8
    offsets = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]
    lookup = {tuple(c): i for i, c in enumerate(out.coords.tolist())}
    for oi, off in enumerate(offsets):
        p = (2 + off[0], 2 + off[1], 4 + off[2])
        assert np.allclose(out.features[lookup[p]], x.features[0] @ w[oi])


# -- network forward ----------------------------------------------------------


def _partial(rng, n=6, h=H):
    lin = rng.choice(h**3, size=n, replace=False)
    coords = np.stack(np.unravel_index(lin, (h, h, h)), axis=1)
    feats = np.zeros((n, 4))
    feats[:, 0] = rng.uniform(1, 5, n)
    feats[:, 1:] = rng.uniform(0.1, 0.9, (n, 3))
    return SparseRadianceField.from_arrays(h, 3, coords, feats, dtype=np.float64)


def _net(seed=0, depth=2, channels=(3, 4)):
    return SurfNet(NetConfig(depth=depth, channels=channels),
                   NormalizationSpec(5.0, 1.0), seed=seed)


def test_forward_empty_partial():
    net = _net()
    out = net.forward(new_srf(H, 3))
    assert out.num_voxels == 0
    assert out.color_dim == 12


def test_forward_rejects_wide_input():
    net = _net()
    with pytest.raises(ContractError):
        net.forward(new_srf(H, 12))


def test_forward_deterministic():
    rng = np.random.default_rng(5)
    partial = _partial(rng)
    net = _net()
    a = net.forward(partial)
    b = net.forward(partial)
    assert a == b


def test_forward_support_contains_input():
    rng = np.random.default_rng(6)
    partial = _partial(rng)
    net = _net()
    out = net.forward(partial)
    out_keys = set(map(tuple, out.coords.tolist()))
    for c in partial.coords.tolist():
        assert tuple(c) in out_keys


def test_translation_covariance():
    rng = np.random.default_rng(7)
    h = 32
    # keep both supports clear of the grid bounds: the network's receptive
    # reach would otherwise clip asymmetrically
    base = np.array([(12, 13, 12), (13, 13, 12), (12, 14, 13)], dtype=np.int64)
    feats = np.zeros((3, 4))
    feats[:, 0] = rng.uniform(1, 3, 3)
    feats[:, 1:] = rng.uniform(0.2, 0.8, (3, 3))
    shift = np.array([4, 2, 4])  # multiple of the coarsest stride (depth 2)
    a = SparseRadianceField.from_arrays(h, 3, base, feats, dtype=np.float64)
    b = SparseRadianceField.from_arrays(h, 3, base + shift, feats, dtype=np.float64)
    net = SurfNet(NetConfig(depth=2, channels=(3, 4)), NormalizationSpec(5.0, 1.0))
    out_a = net.forward(a)
    out_b = net.forward(b)
    keys_a = {tuple(c): i for i, c in enumerate(out_a.coords.tolist())}
    keys_b = {tuple(c): i for i, c in enumerate(out_b.coords.tolist())}
    # interior supports shift identically
    shifted = {(c[0] + 4, c[1] + 2, c[2] + 4): i for c, i in keys_a.items()}
    assert set(shifted) == set(keys_b)
    for key, ia in shifted.items():
        assert np.max(np.abs(out_a.features[ia] - out_b.features[keys_b[key]])) < 1e-5


def test_backward_requires_forward():
    net = _net()
    with pytest.raises(ContractError):
        net.backward(np.zeros(1), np.zeros((1, 12)))


def test_backward_zero_gradients():
    rng = np.random.default_rng(8)
    partial = _partial(rng)
    net = _net()
    pred = net.forward(partial)
    grads = net.backward(np.zeros(pred.num_voxels), np.zeros((pred.num_voxels, 12)))
    for name, g in grads.items():
        assert not np.asarray(g).any(), name


def net_fd_setup(rng, depth=2, channels=(3, 4)):
    """Shared instance for full-network finite-difference checks."""
    partial = _partial(rng)
    gt = make_random_field(rng, H, 12, 12, density_range=(0.5, 3), dtype=np.float64)
    intr = CameraIntrinsics(8, 8, 9.6)
    views = [CameraView(pose=look_at(c), intrinsics=intr)
             for c in [(2.5, 0, 0.3), (0, 2.5, -0.4), (-1.8, 1.2, 1.0)]]
    targets = []
    for v in views:
        rgba = rng.uniform(0, 1, (8, 8, 4)).astype(np.float32)
        rgba[..., 3] = (rgba[..., 3] > 0.4).astype(np.float32)
        targets.append(ImageBuffer(8, 8, rgba))
    net = SurfNet(NetConfig(depth=depth, channels=channels),
                  NormalizationSpec(5.0, 1.0), seed=0)
    # fresh nets have exact-zero pre-activations on zero-filled skip rows,
    # which sit on ReLU kinks: move the biases off them
    for k, v in net.params.items():
        if k.endswith(".b"):
            net.params[k] = rng.normal(0.05, 0.1, v.shape).astype(np.float32)
    return net, partial, gt, views, targets


def run_net_fd_check(rng, net, partial, gt, views, targets, per_param=10,
                     h=2.0**-18, rel_tol=1e-3):
    """FD-check all parameter gradients against the training objective.

    The rendering term's objective freezes the predicted densities, matching
    the stop-gradient in its definition. Kink crossings (ReLU / L1 within h)
    are detected by one-sided disagreement and skipped. Returns
    (checked, failed, worst).
    """
    from srfkit.losses import color_loss, density_loss, q_gaussian_sample

    weights = LossWeights()
    qspec = QGaussianSpec(sigma=2.0, multiplier_k=5, seed=11)
    cfg = RenderConfig(stop_threshold=0.0)
    qcoords = q_gaussian_sample(H, qspec, 5 * partial.num_voxels,
                                np.random.default_rng(99))
    frozen_density = net.forward(partial).density.copy()

    def objective():
        pred = net.forward(partial)
        la, _ = density_loss(pred, gt, qcoords, weights.alpha_dense)
        lrho, _ = color_loss(pred, gt, weights.alpha_dense)
        feats = pred.features.copy()
        feats[:, 0] = frozen_density
        pfield = SparseRadianceField.from_arrays(
            pred.resolution, pred.color_dim, pred.coords, feats,
            validate=False, dtype=np.float64,
        )
        lr, _, _ = perceptual_loss(pfield, views, targets, cfg)
        return (weights.lambda_alpha * la + weights.lambda_rho * lrho
                + weights.lambda_r * lr)

    pred = net.forward(partial)
    la, g_alpha = density_loss(pred, gt, qcoords, weights.alpha_dense)
    lrho, g_rho = color_loss(pred, gt, weights.alpha_dense)
    lr, _, g_r = perceptual_loss(pred, views, targets, cfg)
    grads = net.backward(
        weights.lambda_alpha * g_alpha,
        weights.lambda_rho * g_rho + weights.lambda_r * g_r,
    )
    checked = failed = 0
    worst = 0.0
    for name in net.param_names():
        flat = net.params[name].reshape(-1)
        ana = np.asarray(grads[name]).reshape(-1)
        idx = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        for i in idx:
            if abs(ana[i]) <= 1e-6:
                continue
            orig = flat[i]
            flat[i] = orig + h
            p_plus = float(flat[i])  # exact float32 step actually taken
            lp = objective()
            flat[i] = orig - h
            p_minus = float(flat[i])
            lm = objective()
            flat[i] = orig
            l0 = objective()
            fwd = (lp - l0) / (p_plus - float(orig))
            bwd = (l0 - lm) / (float(orig) - p_minus)
            if abs(fwd - bwd) > 0.25 * max(abs(fwd), abs(bwd), 1e-12):
                continue
            num = (lp - lm) / (p_plus - p_minus)
            rel = abs(ana[i] - num) / abs(ana[i])
            worst = max(worst, rel)
            checked += 1
            if rel > rel_tol:
                failed += 1
    return checked, failed, worst


def test_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    net, partial, gt, views, targets = net_fd_setup(rng)
    checked, failed, worst = run_net_fd_check(rng, net, partial, gt, views, targets)
    assert checked >= 50
    assert failed == 0, f"worst rel err {worst}"


# -- training -----------------------------------------------------------------


def _train_setup(seed=0, h=H):
    rng = np.random.default_rng(seed)
    partial = _partial(rng, h=h)
    gt = make_random_field(rng, h, 12, 15, density_range=(2, 8), dtype=np.float64)
    intr = CameraIntrinsics(8, 8, 9.6)
    views = [CameraView(pose=look_at(c), intrinsics=intr)
             for c in [(2.5, 0, 0.3), (0, 2.5, -0.4), (-1.8, 1.2, 1.0),
                       (1.5, 1.5, -1.0)]]
    targets = []
    for v in views:
        rgba = rng.uniform(0, 1, (8, 8, 4)).astype(np.float32)
        rgba[..., 3] = (rgba[..., 3] > 0.3).astype(np.float32)
        targets.append(ImageBuffer(8, 8, rgba))
    sample = TrainSample(partial=partial, whole=gt, views=views, targets=targets)
    return [sample]


def test_train_zero_learning_rate_freezes():
    ds = _train_setup()
    net = _net()
    before = {k: v.copy() for k, v in net.params.items()}
    train(net, ds, TrainConfig(learning_rate=0.0, epochs=3, seed=0),
          qspec=QGaussianSpec(sigma=2.0, multiplier_k=2))
    for k, v in net.params.items():
        assert np.array_equal(before[k], v), k


def test_train_deterministic_history():
    ds = _train_setup()
    tcfg = TrainConfig(epochs=3, seed=5)
    qspec = QGaussianSpec(sigma=2.0, multiplier_k=2)
    net1 = _net(seed=1)
    h1 = train(net1, ds, tcfg, qspec=qspec)
    net2 = _net(seed=1)
    h2 = train(net2, ds, tcfg, qspec=qspec)
    assert h1 == h2
    for k in net1.params:
        assert np.array_equal(net1.params[k], net2.params[k])


def test_train_identical_samples_same_gradients():
    ds = _train_setup()
    sample = ds[0]
    rng = np.random.default_rng(0)
    net = _net()
    rep_kwargs = dict(
        weights=LossWeights(), qspec=QGaussianSpec(sigma=2.0, multiplier_k=2),
        input_coord_count=sample.partial.num_voxels,
        render_cfg=RenderConfig(),
    )
    pred = net.forward(sample.partial)
    rep = total_loss(pred, sample.whole, sample.views[:3], sample.targets[:3],
                     rng=np.random.default_rng(1), **rep_kwargs)
    g1 = net.backward(rep.d_density, rep.d_radiance)
    pred = net.forward(sample.partial)
    rep = total_loss(pred, sample.whole, sample.views[:3], sample.targets[:3],
                     rng=np.random.default_rng(1), **rep_kwargs)
    g2 = net.backward(rep.d_density, rep.d_radiance)
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


def test_train_loss_decreases():
    # coherent sample: targets rendered from the ground-truth whole field
    rng = np.random.default_rng(1)
    h = 16
    g = np.arange(h)
    ii, jj, kk = np.meshgrid(g, g, g, indexing="ij")
    ctr = (h - 1) / 2
    dist = np.sqrt((ii - ctr) ** 2 + (jj - ctr) ** 2 + (kk - ctr) ** 2)
    mask = dist <= 4
    coords = np.argwhere(mask)
    feats = np.zeros((coords.shape[0], 13))
    feats[:, 0] = 120.0
    feats[:, 1] = 1.6
    feats[:, 5] = 0.9
    feats[:, 9] = 0.5
    whole = SparseRadianceField.from_arrays(h, 12, coords, feats, dtype=np.float64)
    half = coords[coords[:, 0] >= ctr]
    pf = np.zeros((half.shape[0], 4))
    pf[:, 0] = 120.0
    pf[:, 1:] = 0.5
    partial = SparseRadianceField.from_arrays(h, 3, half, pf, dtype=np.float64)
    from srfkit.render import render_image

    intr = CameraIntrinsics(16, 16, 19.2)
    views = [CameraView(pose=look_at(c), intrinsics=intr)
             for c in [(2.5, 0, 0.3), (0, 2.5, -0.4), (-1.8, 1.2, 1.0),
                       (1.5, -1.5, 1.2)]]
    targets = [render_image(whole, v) for v in views]
    ds = [TrainSample(partial=partial, whole=whole, views=views, targets=targets)]
    net = SurfNet(NetConfig(depth=2, channels=(6, 8)),
                  NormalizationSpec(100.0, 2.0), seed=0)
    hist = train(net, ds, TrainConfig(epochs=25, seed=0),
                 qspec=QGaussianSpec(sigma=2.0, multiplier_k=6))
    assert hist[-1]["total"] < hist[0]["total"] / 1.5


def test_train_requires_data_and_matching_resolution():
    net = _net()
    with pytest.raises(ContractError):
        train(net, [], TrainConfig(epochs=1))
    ds = _train_setup()
    other = _train_setup(h=16)
    with pytest.raises(ContractError):
        train(net, ds + other, TrainConfig(epochs=1))


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_decay=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(loss_sampling="bad")


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    net = _net(seed=3)
    partial = _partial(rng)
    path = tmp_path / "net.snet"
    save_net(net, path)
    loaded, state = load_net(path)
    assert state is None
    for k in net.params:
        assert np.array_equal(net.params[k], loaded.params[k])
    assert net.forward(partial) == loaded.forward(partial)


def test_checkpoint_with_state_and_resume_bitwise(tmp_path):
    ds = _train_setup()
    qspec = QGaussianSpec(sigma=2.0, multiplier_k=2)
    tcfg4 = TrainConfig(epochs=4, seed=2)

    straight = _net(seed=4)
    hist_straight = train(straight, ds, tcfg4, qspec=qspec)

    resumed = _net(seed=4)
    state = OptimizerState.fresh(resumed)
    hist_a = train(resumed, ds, TrainConfig(epochs=2, seed=2), qspec=qspec,
                   state=state)
    path = tmp_path / "ckpt.snet"
    save_net(resumed, path, state)
    reloaded, state2 = load_net(path)
    hist_b = train(reloaded, ds, tcfg4, qspec=qspec, state=state2)

    assert hist_a + hist_b == hist_straight
    for k in straight.params:
        assert np.array_equal(straight.params[k], reloaded.params[k]), k


def test_checkpoint_truncated(tmp_path):
    net = _net()
    path = tmp_path / "net.snet"
    save_net(net, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        load_net(path)


def test_checkpoint_config_mismatch(tmp_path):
    net = _net()
    path = tmp_path / "net.snet"
    save_net(net, path)
    with pytest.raises(FormatError):
        load_net(path, config=NetConfig(depth=3, channels=(4, 5, 6)))


def test_net_config_validation():
    with pytest.raises(ConfigurationError):
        NetConfig(depth=0, channels=())
    with pytest.raises(ConfigurationError):
        NetConfig(depth=2, channels=(8,))
    with pytest.raises(ConfigurationError):
        NetConfig(kernel_size=5)
