"""Experiment configuration: one INI-style file covering every stage.

Sections map to the stage configs (scene, rig, render, fit, partial, net,
train, loss, qgaussian, normalization, run); any key can be overridden with
CLI flags. parse(serialize(config)) returns an equal config.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, replace

from .errors import ConfigurationError
from .field import NormalizationSpec
from .fitter import FitConfig
from .losses import LossWeights, QGaussianSpec
from .network import NetConfig, TrainConfig
from .render import RenderConfig
from .scenes import RigSpec, SCENE_KINDS


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "sphere"
    params: tuple = ()  # sorted (name, value) pairs

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ConfigurationError(
                f"unknown scene kind {self.kind!r}; choose from {SCENE_KINDS}"
            )
        object.__setattr__(self, "params", tuple(sorted(self.params)))

    def as_kwargs(self):
        return dict(self.params)


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    rig: RigSpec = field(default_factory=RigSpec)
    render: RenderConfig = field(default_factory=RenderConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    partial_fit: FitConfig = field(
        default_factory=lambda: FitConfig(
            iterations=1200, resolution_schedule=(16, 32), color_dim=3
        )
    )
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    # desk-scale spread: the grid-center Gaussian must cover desk objects
    qgaussian: QGaussianSpec = field(
        default_factory=lambda: QGaussianSpec(sigma=2.0, multiplier_k=40)
    )
    # desk-scale feature magnitudes (fitted densities ~1e2, SH coeffs ~2)
    normalization: NormalizationSpec = field(
        default_factory=lambda: NormalizationSpec(
            density_scale=100.0, color_scale=2.0
        )
    )
    seed: int = 0
    threads: int = 0  # 0 = leave worker pools at their defaults


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def serialize_config(cfg):
    """Render the configuration as INI text."""
    cp = configparser.ConfigParser()
    cp["scene"] = {"kind": cfg.scene.kind}
    for name, value in cfg.scene.params:
        cp["scene"][name] = _fmt(value)
    rig = cfg.rig
    cp["rig"] = {
        "train_views": _fmt(rig.train_views),
        "test_views": _fmt(rig.test_views),
        "ood_views": _fmt(rig.ood_views),
        "radius": _fmt(rig.radius),
        "ood_lo": _fmt(rig.ood_range[0]),
        "ood_hi": _fmt(rig.ood_range[1]),
        "width": _fmt(rig.width),
        "height": _fmt(rig.height),
        "focal": _fmt(rig.focal),
    }
    rnd = cfg.render
    cp["render"] = {
        "step_size": _fmt(rnd.step_size),
        "activation": rnd.sigma_activation,
        "background": _fmt(rnd.background),
        "stop_threshold": _fmt(rnd.stop_threshold),
    }
    for section, fc in (("fit", cfg.fit), ("partial", cfg.partial_fit)):
        cp[section] = {
            "iterations": _fmt(fc.iterations),
            "lr_density": _fmt(fc.learning_rate_density),
            "lr_color": _fmt(fc.learning_rate_color),
            "tv_density": _fmt(fc.tv_weight_density),
            "tv_color": _fmt(fc.tv_weight_color),
            "prune_threshold": _fmt(fc.prune_threshold),
            "rays_per_step": _fmt(fc.rays_per_step),
            "resolutions": _fmt(fc.resolution_schedule),
            "color_dim": _fmt(fc.color_dim),
        }
    net = cfg.net
    cp["net"] = {
        "depth": _fmt(net.depth),
        "channels": _fmt(net.channels),
        "kernel_size": _fmt(net.kernel_size),
        "in_channels": _fmt(net.in_channels),
        "out_color_dim": _fmt(net.out_color_dim),
    }
    tr = cfg.train
    cp["train"] = {
        "learning_rate": _fmt(tr.learning_rate),
        "beta1": _fmt(tr.beta1),
        "beta2": _fmt(tr.beta2),
        "weight_decay": _fmt(tr.weight_decay),
        "lr_decay": _fmt(tr.lr_decay),
        "epochs": _fmt(tr.epochs),
        "batch_size": _fmt(tr.batch_size),
        "views_per_step": _fmt(tr.views_per_step),
        "seed": _fmt(tr.seed),
    }
    lw = cfg.loss
    cp["loss"] = {
        "lambda_alpha": _fmt(lw.lambda_alpha),
        "lambda_rho": _fmt(lw.lambda_rho),
        "lambda_r": _fmt(lw.lambda_r),
        "alpha_dense": _fmt(lw.alpha_dense),
    }
    qs = cfg.qgaussian
    cp["qgaussian"] = {
        "sigma": _fmt(qs.sigma),
        "multiplier_k": _fmt(qs.multiplier_k),
        "seed": _fmt(qs.seed),
    }
    nm = cfg.normalization
    cp["normalization"] = {
        "density_scale": _fmt(nm.density_scale),
        "color_scale": _fmt(nm.color_scale),
    }
    cp["run"] = {"seed": _fmt(cfg.seed), "threads": _fmt(cfg.threads)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _floats(raw):
    return tuple(float(v) for v in raw.split(","))


def _ints(raw):
    return tuple(int(v) for v in raw.split(","))


def parse_config(text):
    """Inverse of serialize_config; unknown keys raise ConfigurationError."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"bad config syntax: {exc}") from exc
    cfg = ExperimentConfig()

    def section(name):
        return cp[name] if cp.has_section(name) else {}

    sc = dict(section("scene"))
    if sc:
        kind = sc.pop("kind", "sphere")
        params = tuple((k, float(v)) for k, v in sc.items())
        cfg = replace(cfg, scene=SceneSpec(kind=kind, params=params))
    rg = section("rig")
    if rg:
        cfg = replace(
            cfg,
            rig=RigSpec(
                train_views=int(rg.get("train_views", cfg.rig.train_views)),
                test_views=int(rg.get("test_views", cfg.rig.test_views)),
                ood_views=int(rg.get("ood_views", cfg.rig.ood_views)),
                radius=float(rg.get("radius", cfg.rig.radius)),
                ood_range=(
                    float(rg.get("ood_lo", cfg.rig.ood_range[0])),
                    float(rg.get("ood_hi", cfg.rig.ood_range[1])),
                ),
                width=int(rg.get("width", cfg.rig.width)),
                height=int(rg.get("height", cfg.rig.height)),
                focal=float(rg.get("focal", cfg.rig.focal)),
            ),
        )
    rd = section("render")
    if rd:
        cfg = replace(
            cfg,
            render=RenderConfig(
                step_size=float(rd.get("step_size", cfg.render.step_size)),
                sigma_activation=rd.get("activation", cfg.render.sigma_activation),
                background=_floats(rd.get("background", _fmt(cfg.render.background))),
                stop_threshold=float(
                    rd.get("stop_threshold", cfg.render.stop_threshold)
                ),
            ),
        )

    def fit_section(name, base):
        fs = section(name)
        if not fs:
            return base
        return FitConfig(
            iterations=int(fs.get("iterations", base.iterations)),
            learning_rate_density=float(
                fs.get("lr_density", base.learning_rate_density)
            ),
            learning_rate_color=float(fs.get("lr_color", base.learning_rate_color)),
            tv_weight_density=float(fs.get("tv_density", base.tv_weight_density)),
            tv_weight_color=float(fs.get("tv_color", base.tv_weight_color)),
            prune_threshold=float(fs.get("prune_threshold", base.prune_threshold)),
            rays_per_step=int(fs.get("rays_per_step", base.rays_per_step)),
            resolution_schedule=_ints(
                fs.get("resolutions", _fmt(base.resolution_schedule))
            ),
            color_dim=int(fs.get("color_dim", base.color_dim)),
            render=cfg.render,
        )

    cfg = replace(cfg, fit=fit_section("fit", cfg.fit))
    cfg = replace(cfg, partial_fit=fit_section("partial", cfg.partial_fit))
    nt = section("net")
    if nt:
        cfg = replace(
            cfg,
            net=NetConfig(
                depth=int(nt.get("depth", cfg.net.depth)),
                channels=_ints(nt.get("channels", _fmt(cfg.net.channels))),
                kernel_size=int(nt.get("kernel_size", cfg.net.kernel_size)),
                in_channels=int(nt.get("in_channels", cfg.net.in_channels)),
                out_color_dim=int(nt.get("out_color_dim", cfg.net.out_color_dim)),
            ),
        )
    tr = section("train")
    if tr:
        cfg = replace(
            cfg,
            train=TrainConfig(
                learning_rate=float(tr.get("learning_rate", cfg.train.learning_rate)),
                beta1=float(tr.get("beta1", cfg.train.beta1)),
                beta2=float(tr.get("beta2", cfg.train.beta2)),
                weight_decay=float(tr.get("weight_decay", cfg.train.weight_decay)),
                lr_decay=float(tr.get("lr_decay", cfg.train.lr_decay)),
                epochs=int(tr.get("epochs", cfg.train.epochs)),
                batch_size=int(tr.get("batch_size", cfg.train.batch_size)),
                views_per_step=int(tr.get("views_per_step", cfg.train.views_per_step)),
                seed=int(tr.get("seed", cfg.train.seed)),
            ),
        )
    lw = section("loss")
    if lw:
        cfg = replace(
            cfg,
            loss=LossWeights(
                lambda_alpha=float(lw.get("lambda_alpha", cfg.loss.lambda_alpha)),
                lambda_rho=float(lw.get("lambda_rho", cfg.loss.lambda_rho)),
                lambda_r=float(lw.get("lambda_r", cfg.loss.lambda_r)),
                alpha_dense=float(lw.get("alpha_dense", cfg.loss.alpha_dense)),
            ),
        )
    qs = section("qgaussian")
    if qs:
        cfg = replace(
            cfg,
            qgaussian=QGaussianSpec(
                sigma=float(qs.get("sigma", cfg.qgaussian.sigma)),
                multiplier_k=int(qs.get("multiplier_k", cfg.qgaussian.multiplier_k)),
                seed=int(qs.get("seed", cfg.qgaussian.seed)),
            ),
        )
    nm = section("normalization")
    if nm:
        cfg = replace(
            cfg,
            normalization=NormalizationSpec(
                density_scale=float(
                    nm.get("density_scale", cfg.normalization.density_scale)
                ),
                color_scale=float(nm.get("color_scale", cfg.normalization.color_scale)),
            ),
        )
    rn = section("run")
    if rn:
        cfg = replace(
            cfg,
            seed=int(rn.get("seed", cfg.seed)),
            threads=int(rn.get("threads", cfg.threads)),
        )
    return cfg


def load_config(path=None):
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        return parse_config(fh.read())


def resolve_threads(flag_value):
    """--threads flag, falling back to the SRFKIT_THREADS environment."""
    if flag_value is not None:
        return int(flag_value)
    env = os.environ.get("SRFKIT_THREADS")
    return int(env) if env else 0


def apply_thread_cap(n):
    """Cap BLAS-style worker pools. Render kernels are single-threaded, so
    this mainly constrains numpy's matmul pools on shared machines."""
    if n and n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)
