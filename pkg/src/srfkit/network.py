"""Sparse 3D convolutional encoder-decoder turning partial fields into
whole fields.

U-shaped topology: a stride-1 stem, stride-2 downsampling convolutions, a
bottleneck, then transposed upsampling with zero-filled skip concatenation,
and two linear heads (density logit, radiance). Convolutions are
"generative": output sites are the stride-quantized union of input-site
neighborhoods, so the support can grow beyond the partial input, which is
what lets the network complete unseen geometry. The final support is the
decoder support united with the input support, and is never pruned.

All layers run on plain NumPy with an explicit tape for reverse-mode
gradients; parameters and optimizer state are float32 so checkpoints
round-trip bitwise.
"""

from __future__ import annotations

import numpy as np

from dataclasses import dataclass

from .errors import ConfigurationError, ContractError
from .field import NormalizationSpec, SparseRadianceField, normalize


@dataclass(frozen=True)
class NetConfig:
    depth: int = 3
    channels: tuple = (16, 32, 64)  # width per encoder level
    kernel_size: int = 3
    in_channels: int = 4  # density + RGB of the partial input
    out_color_dim: int = 12

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        channels = tuple(int(c) for c in self.channels)
        if len(channels) != self.depth:
            raise ConfigurationError("need one channel width per level")
        if self.kernel_size != 3:
            raise ConfigurationError("only 3^3 kernels are supported")
        object.__setattr__(self, "channels", channels)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-5
    lr_decay: float = 0.99  # exponential, per epoch
    epochs: int = 100
    batch_size: int = 1
    seed: int = 0
    views_per_step: int = 3  # rendered poses per rendering-loss evaluation
    loss_sampling: str = "qgaussian"  # or "uniform" (ablation baseline)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be nonnegative")
        if not 0 < self.lr_decay <= 1:
            raise ConfigurationError("lr_decay must be in (0, 1]")
        if self.loss_sampling not in ("qgaussian", "uniform"):
            raise ConfigurationError("loss_sampling must be qgaussian or uniform")


@dataclass
class SparseTensor:
    """Features on a sparse coordinate set at some stride level.

    Coordinates are in base-grid units and are multiples of `stride`.
    """

    coords: np.ndarray  # (N, 3) int64
    features: np.ndarray  # (N, C) float64
    stride: int
    resolution: int

    @property
    def num_sites(self):
        return self.coords.shape[0]


def _pack(coords, h):
    c = coords.astype(np.int64)
    return (c[:, 0] * h + c[:, 1]) * h + c[:, 2]


def _conv_offsets(step):
    """3^3 kernel offsets on the input lattice, fixed enumeration order."""
    return np.array(
        [
            (a, b, c)
            for a in (-step, 0, step)
            for b in (-step, 0, step)
            for c in (-step, 0, step)
        ],
        dtype=np.int64,
    )


def _child_offsets(step):
    return np.array(
        [(a, b, c) for a in (0, step) for b in (0, step) for c in (0, step)],
        dtype=np.int64,
    )


def _sorted_unique_coords(coords, h):
    keys = _pack(coords, h)
    uniq, index = np.unique(keys, return_index=True)
    return coords[index], uniq


class _ConvMaps:
    """Per-offset (output row, input row) gather pairs for one convolution.

    Output sites are all in-bounds lattice points p on the output stride
    such that p + offset hits an input site for some kernel offset.
    """

    def __init__(self, in_coords, h, offsets, out_stride):
        cand = []
        for off in offsets:
            p = in_coords - off
            ok = np.all((p >= 0) & (p < h), axis=1)
            if out_stride > 1:
                ok &= np.all(p % out_stride == 0, axis=1)
            cand.append(p[ok])
        cand = (
            np.concatenate(cand, axis=0) if cand else np.empty((0, 3), dtype=np.int64)
        )
        self.out_coords, out_keys = _sorted_unique_coords(cand, h)
        self.pairs = []
        in_rows_all = np.arange(in_coords.shape[0])
        for off in offsets:
            q = in_coords - off
            ok = np.all((q >= 0) & (q < h), axis=1)
            if out_stride > 1:
                ok &= np.all(q % out_stride == 0, axis=1)
            qk = _pack(q[ok], h)
            pos = np.searchsorted(out_keys, qk)
            if out_keys.size:
                pos = np.minimum(pos, out_keys.size - 1)
                hit = out_keys[pos] == qk
            else:
                hit = np.zeros(qk.shape[0], dtype=bool)
            self.pairs.append((pos[hit], in_rows_all[ok][hit]))


def sparse_conv3d(tensor, weights, bias=None, stride=1, tape=None, name=None):
    """Generalized sparse 3D convolution with a 3^3 kernel.

    `weights` has shape (27, C_in, C_out); output feature at site p is
    sum over offsets with a present input of W[offset] @ f(p + offset).
    """
    weights = np.asarray(weights)
    if weights.ndim != 3 or weights.shape[0] != 27:
        raise ContractError("conv weights must have shape (27, C_in, C_out)")
    if weights.shape[1] != tensor.features.shape[1]:
        raise ContractError(
            f"weight C_in {weights.shape[1]} != feature width "
            f"{tensor.features.shape[1]}"
        )
    offsets = _conv_offsets(tensor.stride)
    maps = _ConvMaps(tensor.coords, tensor.resolution, offsets, tensor.stride * stride)
    c_out = weights.shape[2]
    out_feats = np.zeros((maps.out_coords.shape[0], c_out), dtype=np.float64)
    w64 = weights.astype(np.float64)
    for oi, (out_rows, in_rows) in enumerate(maps.pairs):
        if out_rows.size:
            np.add.at(out_feats, out_rows, tensor.features[in_rows] @ w64[oi])
    if bias is not None:
        out_feats += np.asarray(bias, dtype=np.float64)
    out = SparseTensor(
        coords=maps.out_coords,
        features=out_feats,
        stride=tensor.stride * stride,
        resolution=tensor.resolution,
    )
    if tape is not None:
        tape.append(("conv", name, (tensor,), (maps, weights), out))
    return out


def upsample_conv(tensor, weights, bias=None, tape=None, name=None):
    """Transposed stride-2 convolution with a 2^3 kernel.

    Each input site proposes its 8 children on the next finer lattice; every
    child takes W[child offset] applied to its unique parent.
    """
    weights = np.asarray(weights)
    if weights.ndim != 3 or weights.shape[0] != 8:
        raise ContractError("upsample weights must have shape (8, C_in, C_out)")
    if tensor.stride % 2:
        raise ContractError("tensor stride must be even to upsample")
    t = tensor.stride // 2
    offsets = _child_offsets(t)
    h = tensor.resolution
    rows = np.arange(tensor.num_sites)
    chunks, parent_rows, off_ids = [], [], []
    for oi, off in enumerate(offsets):
        p = tensor.coords + off
        ok = np.all(p < h, axis=1)
        chunks.append(p[ok])
        parent_rows.append(rows[ok])
        off_ids.append(np.full(int(ok.sum()), oi))
    coords = np.concatenate(chunks) if chunks else np.empty((0, 3), dtype=np.int64)
    parents = np.concatenate(parent_rows) if parent_rows else np.empty(0, dtype=int)
    offs = np.concatenate(off_ids) if off_ids else np.empty(0, dtype=int)
    order = np.argsort(_pack(coords, h), kind="stable")
    coords, parents, offs = coords[order], parents[order], offs[order]
    c_out = weights.shape[2]
    out_feats = np.zeros((coords.shape[0], c_out), dtype=np.float64)
    w64 = weights.astype(np.float64)
    for oi in range(8):
        sel = offs == oi
        if np.any(sel):
            out_feats[sel] = tensor.features[parents[sel]] @ w64[oi]
    if bias is not None:
        out_feats += np.asarray(bias, dtype=np.float64)
    out = SparseTensor(coords=coords, features=out_feats, stride=t, resolution=h)
    if tape is not None:
        tape.append(("upconv", name, (tensor,), (parents, offs, weights), out))
    return out


def _reindex(tensor, target_coords, target_keys, tape=None):
    """Align features onto a target support, zero-filling absent sites."""
    h = tensor.resolution
    keys = _pack(tensor.coords, h)
    pos = np.searchsorted(target_keys, keys)
    if target_keys.size:
        pos = np.minimum(pos, target_keys.size - 1)
        hit = target_keys[pos] == keys
    else:
        hit = np.zeros(keys.shape[0], dtype=bool)
    out_feats = np.zeros((target_coords.shape[0], tensor.features.shape[1]))
    out_feats[pos[hit]] = tensor.features[hit]
    out = SparseTensor(
        coords=target_coords, features=out_feats, stride=tensor.stride, resolution=h
    )
    if tape is not None:
        tape.append(("reindex", None, (tensor,), (pos, hit), out))
    return out


def _relu(tensor, tape=None):
    out = SparseTensor(
        coords=tensor.coords,
        features=np.maximum(tensor.features, 0.0),
        stride=tensor.stride,
        resolution=tensor.resolution,
    )
    if tape is not None:
        tape.append(("relu", None, (tensor,), None, out))
    return out


def _concat(a, b, tape=None):
    out = SparseTensor(
        coords=a.coords,
        features=np.concatenate([a.features, b.features], axis=1),
        stride=a.stride,
        resolution=a.resolution,
    )
    if tape is not None:
        tape.append(("concat", None, (a, b), None, out))
    return out


class SurfNet:
    """Partial-to-whole field generator with explicit reverse-mode tape."""

    def __init__(self, config=None, normalization=None, seed=0):
        self.config = config or NetConfig()
        self.normalization = normalization or NormalizationSpec()
        self.params = {}
        self._tape = None
        self._final = None
        self._init_params(seed)

    def param_names(self):
        return sorted(self.params)

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        cfg = self.config
        ch = cfg.channels

        def conv_w(name, taps, c_in, c_out):
            std = np.sqrt(2.0 / (taps * c_in))
            self.params[name + ".w"] = rng.normal(0, std, (taps, c_in, c_out)).astype(
                np.float32
            )
            self.params[name + ".b"] = np.zeros(c_out, dtype=np.float32)

        conv_w("stem", 27, cfg.in_channels, ch[0])
        for lvl in range(1, cfg.depth):
            conv_w(f"down{lvl}", 27, ch[lvl - 1], ch[lvl])
        conv_w("mid", 27, ch[-1], ch[-1])
        for lvl in range(cfg.depth - 1, 0, -1):
            conv_w(f"up{lvl}", 8, ch[lvl], ch[lvl - 1])
            conv_w(f"fuse{lvl}", 27, 2 * ch[lvl - 1], ch[lvl - 1])
        self.params["head_density.w"] = rng.normal(0, 0.01, (ch[0], 1)).astype(
            np.float32
        )
        # start biased toward "empty" so early renders stay transparent
        self.params["head_density.b"] = np.full(1, -2.0, dtype=np.float32)
        self.params["head_radiance.w"] = rng.normal(
            0, 0.01, (ch[0], cfg.out_color_dim)
        ).astype(np.float32)
        self.params["head_radiance.b"] = np.zeros(cfg.out_color_dim, dtype=np.float32)

    def forward(self, partial):
        """Predicted whole field for a plain-RGB partial field.

        Output densities are logits (sigmoid gives occupancy probability;
        the renderer applies its own activation) and radiance stays in
        normalized units. The input is normalized internally.
        """
        if partial.color_dim != 3:
            raise ContractError("network input must be a d=3 partial field")
        cfg = self.config
        p = self.params
        norm = normalize(partial, self.normalization)
        x = SparseTensor(
            coords=norm.coords.astype(np.int64),
            features=norm.features.astype(np.float64),
            stride=1,
            resolution=partial.resolution,
        )
        tape = []
        enc = []
        x = _relu(sparse_conv3d(x, p["stem.w"], p["stem.b"], 1, tape, "stem"), tape)
        enc.append(x)
        for lvl in range(1, cfg.depth):
            x = _relu(
                sparse_conv3d(
                    x, p[f"down{lvl}.w"], p[f"down{lvl}.b"], 2, tape, f"down{lvl}"
                ),
                tape,
            )
            enc.append(x)
        x = _relu(sparse_conv3d(x, p["mid.w"], p["mid.b"], 1, tape, "mid"), tape)
        for lvl in range(cfg.depth - 1, 0, -1):
            x = upsample_conv(x, p[f"up{lvl}.w"], p[f"up{lvl}.b"], tape, f"up{lvl}")
            skip = enc[lvl - 1]
            union = np.concatenate([x.coords, skip.coords])
            union_coords, union_keys = _sorted_unique_coords(union, x.resolution)
            a = _reindex(x, union_coords, union_keys, tape)
            b = _reindex(skip, union_coords, union_keys, tape)
            cat = _concat(a, b, tape)
            x = _relu(
                sparse_conv3d(
                    cat, p[f"fuse{lvl}.w"], p[f"fuse{lvl}.b"], 1, tape, f"fuse{lvl}"
                ),
                tape,
            )
        # final support: decoder sites united with the raw input sites
        union = np.concatenate([x.coords, partial.coords.astype(np.int64)])
        out_coords, out_keys = _sorted_unique_coords(union, x.resolution)
        x = _reindex(x, out_coords, out_keys, tape)
        dens = x.features @ p["head_density.w"].astype(np.float64)
        dens += p["head_density.b"].astype(np.float64)
        rad = x.features @ p["head_radiance.w"].astype(np.float64)
        rad += p["head_radiance.b"].astype(np.float64)
        self._tape = tape
        self._final = x
        feats = np.concatenate([dens, rad], axis=1)
        return SparseRadianceField.from_arrays(
            partial.resolution,
            cfg.out_color_dim,
            out_coords.astype(np.int32),
            feats,
            validate=False,
            dtype=np.float64,
        )

    def backward(self, d_density, d_radiance):
        """Parameter gradients from loss gradients on the output field.

        Requires a preceding `forward` on this instance (the tape is
        consumed). Gradients accumulate per tensor, so branch points such as
        skip connections combine both paths.
        """
        if self._tape is None:
            raise ContractError("backward called before forward")
        tape, self._tape = self._tape, None
        x, self._final = self._final, None
        grads = {k: np.zeros(v.shape, dtype=np.float64) for k, v in self.params.items()}

        d_density = np.asarray(d_density, dtype=np.float64).reshape(-1, 1)
        d_radiance = np.asarray(d_radiance, dtype=np.float64)
        grads["head_density.w"] += x.features.T @ d_density
        grads["head_density.b"] += d_density.sum(axis=0)
        grads["head_radiance.w"] += x.features.T @ d_radiance
        grads["head_radiance.b"] += d_radiance.sum(axis=0)
        d_x = d_density @ self.params["head_density.w"].astype(np.float64).T
        d_x = d_x + d_radiance @ self.params["head_radiance.w"].astype(np.float64).T

        grad_of = {id(x): d_x}

        def take(t):
            return grad_of.pop(id(t), None)

        def give(t, g):
            key = id(t)
            if key in grad_of:
                grad_of[key] = grad_of[key] + g
            else:
                grad_of[key] = g

        for op, name, inputs, ctx, out in reversed(tape):
            g = take(out)
            if g is None:
                continue
            if op == "relu":
                give(inputs[0], g * (inputs[0].features > 0.0))
            elif op == "conv":
                maps, weights = ctx
                tin = inputs[0]
                d_in = np.zeros_like(tin.features)
                w64 = weights.astype(np.float64)
                d_w = grads[name + ".w"]
                for oi, (out_rows, in_rows) in enumerate(maps.pairs):
                    if out_rows.size:
                        go = g[out_rows]
                        d_w[oi] += tin.features[in_rows].T @ go
                        np.add.at(d_in, in_rows, go @ w64[oi].T)
                grads[name + ".b"] += g.sum(axis=0)
                give(tin, d_in)
            elif op == "upconv":
                parents, offs, weights = ctx
                tin = inputs[0]
                d_in = np.zeros_like(tin.features)
                w64 = weights.astype(np.float64)
                d_w = grads[name + ".w"]
                for oi in range(8):
                    sel = offs == oi
                    if np.any(sel):
                        go = g[sel]
                        d_w[oi] += tin.features[parents[sel]].T @ go
                        np.add.at(d_in, parents[sel], go @ w64[oi].T)
                grads[name + ".b"] += g.sum(axis=0)
                give(tin, d_in)
            elif op == "reindex":
                pos, hit = ctx
                tin = inputs[0]
                d_in = np.zeros_like(tin.features)
                d_in[hit] = g[pos[hit]]
                give(tin, d_in)
            elif op == "concat":
                a, b = inputs
                ca = a.features.shape[1]
                give(a, g[:, :ca])
                give(b, g[:, ca:])
            else:
                raise AssertionError(f"unknown tape op {op}")
        return grads
