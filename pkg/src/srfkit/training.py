"""Network training: AdamW with per-epoch exponential learning-rate decay,
deterministic batching, and bitwise-resumable checkpoints.

Optimizer state (first/second moments) is float32 like the parameters, so a
save/load round trip continues training with bit-identical arithmetic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ContractError, DegenerateFitError, FormatError
from .field import NormalizationSpec, normalize
from .losses import LossWeights, QGaussianSpec, total_loss
from .network import NetConfig, SurfNet
from .render import RenderConfig

_MAGIC = b"SNET"
_VERSION = 1
_ADAM_EPS = 1e-8


@dataclass
class TrainSample:
    """One supervision tuple: the partial input, its whole-field target, and
    posed images from which rendering-loss views are drawn."""

    partial: object  # SparseRadianceField, d=3
    whole: object  # SparseRadianceField, d=12, raw (unnormalized) units
    views: list
    targets: list


@dataclass
class OptimizerState:
    step: int = 0
    epoch: int = 0
    m: dict = dc_field(default_factory=dict)
    v: dict = dc_field(default_factory=dict)

    @classmethod
    def fresh(cls, net):
        return cls(
            step=0,
            epoch=0,
            m={k: np.zeros_like(p) for k, p in net.params.items()},
            v={k: np.zeros_like(p) for k, p in net.params.items()},
        )


def adamw_step(net, grads, state, lr, cfg):
    """Decoupled weight decay update; state and params stay float32."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name in sorted(net.params):
        g = np.asarray(grads[name], dtype=np.float64)
        m = cfg.beta1 * state.m[name].astype(np.float64) + (1 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name].astype(np.float64) + (1 - cfg.beta2) * g * g
        p = net.params[name].astype(np.float64)
        p -= lr * (m / bc1 / (np.sqrt(v / bc2) + _ADAM_EPS) + cfg.weight_decay * p)
        net.params[name] = p.astype(np.float32)
        state.m[name] = m.astype(np.float32)
        state.v[name] = v.astype(np.float32)


def train(
    net,
    dataset,
    tcfg,
    weights=None,
    qspec=None,
    render_cfg=None,
    state=None,
    on_epoch=None,
):
    """Train on (partial, whole, views, targets) samples; returns history.

    History holds one record per epoch with the mean of each loss term.
    Deterministic given (dataset order, configs, seed); resuming from a
    checkpointed state continues bitwise. Raises DegenerateFitError on a
    non-finite loss, identifying the epoch and step.
    """
    if not dataset:
        raise ContractError("training dataset must be nonempty")
    res = {s.whole.resolution for s in dataset} | {s.partial.resolution for s in dataset}
    if len(res) != 1:
        raise ContractError("all fields in the dataset must share one resolution")
    weights = weights or LossWeights()
    qspec = qspec or QGaussianSpec()
    render_cfg = render_cfg or RenderConfig()
    if state is None:
        state = OptimizerState.fresh(net)
    gt_normalized = [normalize(s.whole, net.normalization) for s in dataset]
    color_scale = net.normalization.color_scale
    density_scale = net.normalization.density_scale

    history = []
    for epoch in range(state.epoch, tcfg.epochs):
        lr = tcfg.learning_rate * tcfg.lr_decay**epoch
        rng = np.random.default_rng([tcfg.seed, epoch])
        order = rng.permutation(len(dataset))
        sums = {"l_alpha": 0.0, "l_rho": 0.0, "l_r": 0.0, "total": 0.0}
        n_seen = 0
        for start in range(0, len(order), tcfg.batch_size):
            batch = order[start : start + tcfg.batch_size]
            acc = None
            for si in batch:
                sample = dataset[si]
                n_views = min(tcfg.views_per_step, len(sample.views))
                pick = rng.choice(len(sample.views), size=n_views, replace=False)
                views = [sample.views[i] for i in pick]
                targets = [sample.targets[i] for i in pick]
                pred = net.forward(sample.partial)
                report = total_loss(
                    pred,
                    gt_normalized[si],
                    views,
                    targets,
                    weights,
                    qspec,
                    input_coord_count=sample.partial.num_voxels,
                    render_cfg=render_cfg,
                    color_scale=color_scale,
                    density_scale=density_scale,
                    rng=rng,
                    sampling=tcfg.loss_sampling,
                )
                if not np.isfinite(report.total):
                    raise DegenerateFitError(
                        f"non-finite loss at epoch {epoch} sample {int(si)}"
                    )
                grads = net.backward(report.d_density, report.d_radiance)
                if acc is None:
                    acc = grads
                else:
                    for k in acc:
                        acc[k] += grads[k]
                for k in sums:
                    sums[k] += getattr(report, k)
                n_seen += 1
            for k in acc:
                acc[k] /= len(batch)
            adamw_step(net, acc, state, lr, tcfg)
        record = {k: sums[k] / n_seen for k in sums}
        record["epoch"] = epoch
        record["lr"] = lr
        history.append(record)
        state.epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(epoch, record)
    return history


# -- checkpoints --------------------------------------------------------------
#
# Layout, little-endian:
#   "SNET" | u32 version | u32 json_len | config JSON
#   | u32 n_params | per param: u16 name_len, name utf8, u8 ndim, u32 dims...,
#     f32 data
#   | u8 has_state | if 1: u64 step, u32 epoch, then per param (same order):
#     f32 m data, f32 v data


def decode_prediction(pred, normalization):
    """De-normalize a network prediction into a render-ready field.

    Density logits scale by density_scale, radiance by color_scale, mapping
    the prediction back into the units of fitted fields.
    """
    from .field import SparseRadianceField

    feats = pred.features.copy()
    feats[:, 0] *= feats.dtype.type(normalization.density_scale)
    feats[:, 1:] *= feats.dtype.type(normalization.color_scale)
    return SparseRadianceField.from_arrays(
        pred.resolution, pred.color_dim, pred.coords, feats,
        validate=False, dtype=feats.dtype,
    )


def save_net(net, path, state=None):
    cfg = net.config
    meta = {
        "depth": cfg.depth,
        "channels": list(cfg.channels),
        "kernel_size": cfg.kernel_size,
        "in_channels": cfg.in_channels,
        "out_color_dim": cfg.out_color_dim,
        "normalization": {
            "density_scale": net.normalization.density_scale,
            "color_scale": net.normalization.color_scale,
        },
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    names = sorted(net.params)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = net.params[name]
            enc = name.encode()
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())
        if state is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<QI", state.step, state.epoch))
            for name in names:
                fh.write(state.m[name].astype("<f4").tobytes())
                fh.write(state.v[name].astype("<f4").tobytes())


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def load_net(path, config=None):
    """Rebuild a network (and optimizer state, when present) from disk.

    When `config` is given it must match the stored configuration exactly,
    otherwise a FormatError is raised.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw)
    if r.take(4, "magic") != _MAGIC:
        raise FormatError(f"bad magic, expected {_MAGIC!r}", 0)
    version, json_len = r.unpack("<II", "header")
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    meta = json.loads(r.take(json_len, "config"))
    stored_cfg = NetConfig(
        depth=meta["depth"],
        channels=tuple(meta["channels"]),
        kernel_size=meta["kernel_size"],
        in_channels=meta["in_channels"],
        out_color_dim=meta["out_color_dim"],
    )
    if config is not None and config != stored_cfg:
        raise FormatError(
            f"checkpoint config {stored_cfg} does not match requested {config}"
        )
    norm = NormalizationSpec(**meta["normalization"])
    net = SurfNet(config=stored_cfg, normalization=norm, seed=0)
    (n_params,) = r.unpack("<I", "parameter count")
    expected = set(net.params)
    names = []
    for _ in range(n_params):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode()
        (ndim,) = r.unpack("<B", "ndim")
        dims = r.unpack(f"<{ndim}I", "dims")
        if name not in expected:
            raise FormatError(f"unexpected parameter {name!r}", r.pos)
        if tuple(net.params[name].shape) != tuple(dims):
            raise FormatError(
                f"parameter {name!r} has shape {dims}, "
                f"expected {net.params[name].shape}",
                r.pos,
            )
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(count * 4, name), dtype="<f4")
        net.params[name] = data.reshape(dims).astype(np.float32)
        names.append(name)
    if set(names) != expected:
        raise FormatError("checkpoint is missing parameters")
    (has_state,) = r.unpack("<B", "state flag")
    state = None
    if has_state:
        step, epoch = r.unpack("<QI", "optimizer counters")
        state = OptimizerState(step=step, epoch=epoch)
        for name in names:
            n = net.params[name].size
            shape = net.params[name].shape
            m = np.frombuffer(r.take(n * 4, f"m[{name}]"), dtype="<f4")
            v = np.frombuffer(r.take(n * 4, f"v[{name}]"), dtype="<f4")
            state.m[name] = m.reshape(shape).astype(np.float32)
            state.v[name] = v.reshape(shape).astype(np.float32)
    if r.pos != len(raw):
        raise FormatError("trailing bytes after checkpoint payload", r.pos)
    return net, state
