"""Command-line pipeline: generate, fit, train, render, eval, mesh.

Every command is reproducible: the same config and seed produce
hash-identical artifacts. Exit codes: 0 success, 1 runtime failure,
2 usage/configuration error.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import field as field_mod
from .cameras import CameraView, Split, look_at
from .config import (
    ExperimentConfig,
    apply_thread_cap,
    load_config,
    resolve_threads,
    serialize_config,
)
from .errors import ConfigurationError, SrfError
from .fitter import fit_partial, fit_srf
from .losses import LossWeights, QGaussianSpec
from .meshing import marching_cubes, save_obj
from .metrics import MetricReport, psnr, ssim, validation_accuracy
from .network import SurfNet
from .render import render_image
from .scenes import ImageBuffer, load_dataset, make_scene, emit_dataset, save_png
from .training import (
    TrainSample,
    OptimizerState,
    decode_prediction,
    load_net,
    save_net,
    train,
)

SCHEMA_VERSION = 1


def _cli_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigurationError as exc:
            click.echo(f"configuration error: {exc}", err=True)
            sys.exit(2)
        except (SrfError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _setup(config_path, threads):
    cfg = load_config(config_path)
    cap = resolve_threads(threads) or cfg.threads
    apply_thread_cap(cap)
    return cfg


def _write_json(path, payload):
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


@click.group()
def main():
    """Sparse voxel radiance field toolkit."""


@main.command()
@click.option("-c", "--config", "config_path", type=click.Path(exists=True))
@click.option("-o", "--out", required=True, type=click.Path())
@click.option("--scene", "scene_kind", default=None, help="override scene kind")
@click.option("--views", default=None, help="train/test/ood counts, e.g. 50/10/5")
@click.option("--resolution", default=None, type=int, help="square image size (<=400)")
@click.option("--seed", default=None, type=int)
@click.option("--threads", default=None, type=int)
@_cli_errors
def generate(config_path, out, scene_kind, views, resolution, seed, threads):
    """Emit a posed multi-view dataset for a procedural scene."""
    from dataclasses import replace

    cfg = _setup(config_path, threads)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    rig = cfg.rig
    if views:
        try:
            tr, te, oo = (int(v) for v in views.split("/"))
        except ValueError:
            raise ConfigurationError("--views must look like 50/10/5")
        rig = replace(rig, train_views=tr, test_views=te, ood_views=oo)
    if resolution:
        if not 8 <= resolution <= 400:
            raise ConfigurationError("--resolution must be in [8, 400]")
        rig = replace(
            rig, width=resolution, height=resolution, focal=1.2 * resolution
        )
    scene_spec = cfg.scene
    if scene_kind:
        from .config import SceneSpec

        scene_spec = SceneSpec(kind=scene_kind, params=cfg.scene.params)
    scene = make_scene(scene_spec.kind, **scene_spec.as_kwargs())
    out_dir = Path(out)
    manifest = emit_dataset(scene, rig, out_dir, seed=cfg.seed)
    (out_dir / "config.ini").write_text(serialize_config(cfg))
    click.echo(str(manifest))


def _train_split(manifest_path):
    views, images = load_dataset(manifest_path)
    train_idx = [i for i, v in enumerate(views) if v.split == Split.TRAIN]
    return views, images, train_idx


@main.command()
@click.option("-c", "--config", "config_path", type=click.Path(exists=True))
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--whole", "mode_whole", is_flag=True, help="fit from all train views")
@click.option("--partial", "partial_k", type=int, default=None,
              help="fit from k random train views (k in {1,3})")
@click.option("-o", "--out", required=True, type=click.Path())
@click.option("--report", "report_path", type=click.Path(), default=None)
@click.option("--seed", default=None, type=int)
@click.option("--threads", default=None, type=int)
@_cli_errors
def fit(config_path, dataset, mode_whole, partial_k, out, report_path, seed, threads):
    """Optimize a field from a dataset (whole or partial)."""
    if mode_whole == (partial_k is not None):
        raise click.UsageError("choose exactly one of --whole or --partial k")
    if partial_k is not None and partial_k not in (1, 3):
        raise click.UsageError("--partial takes 1 or 3 views")
    cfg = _setup(config_path, threads)
    run_seed = cfg.seed if seed is None else seed
    manifest = Path(dataset) / "manifest.json" if Path(dataset).is_dir() else Path(dataset)
    views, images, train_idx = _train_split(manifest)
    if mode_whole:
        tviews = [views[i] for i in train_idx]
        timgs = [images[i] for i in train_idx]
        srf, rep = fit_srf(tviews, timgs, cfg.fit, seed=run_seed)
        report = rep.as_dict()
    else:
        rng = np.random.default_rng([run_seed, 7])
        pick = rng.choice(len(train_idx), size=partial_k, replace=False)
        tviews = [views[train_idx[i]] for i in pick]
        timgs = [images[train_idx[i]] for i in pick]
        srf = fit_partial(tviews, timgs, cfg.partial_fit, seed=run_seed)
        report = {"input_views": [int(train_idx[i]) for i in pick]}
    field_mod.save_srf(srf, out)
    report.update({"seed": run_seed, "num_voxels": int(srf.num_voxels),
                   "resolution": srf.resolution, "color_dim": srf.color_dim})
    if report_path:
        _write_json(report_path, report)
    click.echo(out)


@main.command(name="train")
@click.option("-c", "--config", "config_path", type=click.Path(exists=True))
@click.option("--pair", "pairs", multiple=True, required=True,
              help="partial.srf:whole.srf (repeatable)")
@click.option("--dataset", required=True, type=click.Path(exists=True),
              help="dataset supplying posed images for the rendering loss")
@click.option("-o", "--out", required=True, type=click.Path())
@click.option("--history", "history_path", type=click.Path(), default=None)
@click.option("--resume", "resume_path", type=click.Path(exists=True), default=None)
@click.option("--epochs", default=None, type=int)
@click.option("--threads", default=None, type=int)
@_cli_errors
def train_cmd(config_path, pairs, dataset, out, history_path, resume_path, epochs,
              threads):
    """Train the partial-to-whole network on (partial, whole) field pairs."""
    from dataclasses import replace

    cfg = _setup(config_path, threads)
    tcfg = cfg.train if epochs is None else replace(cfg.train, epochs=epochs)
    manifest = Path(dataset) / "manifest.json" if Path(dataset).is_dir() else Path(dataset)
    views, images, train_idx = _train_split(manifest)
    tviews = [views[i] for i in train_idx]
    timgs = [images[i] for i in train_idx]
    samples = []
    for spec in pairs:
        try:
            partial_path, whole_path = spec.split(":")
        except ValueError:
            raise click.UsageError("--pair must look like partial.srf:whole.srf")
        samples.append(
            TrainSample(
                partial=field_mod.load_srf(partial_path),
                whole=field_mod.load_srf(whole_path),
                views=tviews,
                targets=timgs,
            )
        )
    if resume_path:
        net, state = load_net(resume_path)
        if state is None:
            raise ConfigurationError("checkpoint has no optimizer state to resume")
    else:
        net = SurfNet(cfg.net, cfg.normalization, seed=tcfg.seed)
        state = OptimizerState.fresh(net)
    history = train(
        net, samples, tcfg,
        weights=cfg.loss, qspec=cfg.qgaussian, render_cfg=cfg.render, state=state,
    )
    save_net(net, out, state)
    if history_path:
        _write_json(history_path, {"seed": tcfg.seed, "epochs": history})
    click.echo(out)


def _spiral_views(n, radius, intrinsics):
    views = []
    for i in range(n):
        azimuth = 2 * np.pi * i / n
        elevation = 0.45 * np.sin(2 * np.pi * i / n + 0.5)
        c = radius * np.array(
            [
                np.cos(azimuth) * np.cos(elevation),
                np.sin(azimuth) * np.cos(elevation),
                np.sin(elevation),
            ]
        )
        views.append(CameraView(pose=look_at(c), intrinsics=intrinsics))
    return views


@main.command()
@click.option("-c", "--config", "config_path", type=click.Path(exists=True))
@click.option("--srf", "srf_path", required=True, type=click.Path(exists=True))
@click.option("--spiral", "spiral_n", type=int, default=None,
              help="render n spiral frames")
@click.option("--dataset", type=click.Path(exists=True), default=None)
@click.option("--view-index", type=int, default=None,
              help="render one view from the dataset manifest")
@click.option("-o", "--out", required=True, type=click.Path())
@click.option("--threads", default=None, type=int)
@_cli_errors
def render(config_path, srf_path, spiral_n, dataset, view_index, out, threads):
    """Render a field to PNG frames."""
    cfg = _setup(config_path, threads)
    srf = field_mod.load_srf(srf_path)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if (spiral_n is None) == (view_index is None):
        raise click.UsageError("choose exactly one of --spiral or --view-index")
    if view_index is not None:
        if dataset is None:
            raise click.UsageError("--view-index needs --dataset")
        manifest = Path(dataset) / "manifest.json" if Path(dataset).is_dir() else Path(dataset)
        views, _ = load_dataset(manifest)
        if not 0 <= view_index < len(views):
            raise ConfigurationError(f"view index {view_index} out of range")
        frames = [views[view_index]]
    else:
        from .cameras import CameraIntrinsics

        intr = CameraIntrinsics(cfg.rig.width, cfg.rig.height, cfg.rig.focal)
        frames = _spiral_views(spiral_n, cfg.rig.radius, intr)
    for i, view in enumerate(frames):
        image = render_image(srf, view, cfg.render)
        save_png(image, out_dir / f"frame_{i:04d}.png")
    click.echo(str(out_dir))


def _split_metrics(srf, views, images, render_cfg, whole=None):
    pairs = []
    for v, img in zip(views, images):
        rendered = render_image(srf, v, render_cfg)
        pairs.append((psnr(rendered, img), ssim(rendered, img)))
    mean_psnr = float(np.mean([p for p, _ in pairs]))
    mean_ssim = float(np.mean([s for _, s in pairs]))
    acc = None
    if whole is not None:
        whole_pairs = [psnr(render_image(whole, v, render_cfg), img)
                       for v, img in zip(views, images)]
        acc = validation_accuracy(mean_psnr, float(np.mean(whole_pairs)))
    report = MetricReport(psnr=mean_psnr, ssim=mean_ssim, validation_accuracy=acc)
    out = report.as_dict()
    out["n_views"] = len(views)
    return out


@main.command(name="eval")
@click.option("-c", "--config", "config_path", type=click.Path(exists=True))
@click.option("--srf", "srf_path", type=click.Path(exists=True), default=None)
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--partial", "partial_path", type=click.Path(exists=True), default=None,
              help="partial field fed to the checkpoint network")
@click.option("--whole", "whole_path", type=click.Path(exists=True), default=None,
              help="whole-fit field for the validation-accuracy denominator")
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("-o", "--out", required=True, type=click.Path())
@click.option("--threads", default=None, type=int)
@_cli_errors
def eval_cmd(config_path, srf_path, checkpoint, partial_path, whole_path, dataset,
             out, threads):
    """Per-split PSNR/SSIM (and validation accuracy) for a field or network."""
    cfg = _setup(config_path, threads)
    if (srf_path is None) == (checkpoint is None):
        raise click.UsageError("choose exactly one of --srf or --checkpoint")
    if checkpoint is not None:
        if partial_path is None:
            raise click.UsageError("--checkpoint needs --partial")
        net, _ = load_net(checkpoint)
        srf = decode_prediction(
            net.forward(field_mod.load_srf(partial_path)), net.normalization
        )
    else:
        srf = field_mod.load_srf(srf_path)
    whole = field_mod.load_srf(whole_path) if whole_path else None
    manifest = Path(dataset) / "manifest.json" if Path(dataset).is_dir() else Path(dataset)
    views, images = load_dataset(manifest)
    payload = {"seed": cfg.seed}
    for split in (Split.TRAIN, Split.TEST, Split.OOD):
        idx = [i for i, v in enumerate(views) if v.split == split]
        if not idx:
            click.echo(f"warning: no {split.value} views in manifest", err=True)
            continue
        payload[split.value] = _split_metrics(
            srf,
            [views[i] for i in idx],
            [images[i] for i in idx],
            cfg.render,
            whole=whole,
        )
    _write_json(out, payload)
    click.echo(out)


@main.command()
@click.option("--srf", "srf_path", required=True, type=click.Path(exists=True))
@click.option("--iso", type=float, default=None,
              help="iso level; default is half the peak activated density")
@click.option("--activation", default="relu", type=click.Choice(["relu", "exp"]))
@click.option("-o", "--out", required=True, type=click.Path())
@_cli_errors
def mesh(srf_path, iso, activation, out):
    """Extract a triangle mesh from a field's density."""
    srf = field_mod.load_srf(srf_path)
    if iso is None:
        if srf.num_voxels:
            dens = srf.density.astype(np.float64)
            peak = float(np.max(np.maximum(dens, 0.0)) if activation == "relu"
                         else np.exp(dens).max())
            iso = 0.5 * peak if peak > 0 else 0.5
        else:
            iso = 0.5
    tri = marching_cubes(srf, iso, activation=activation)
    save_obj(tri, out)
    click.echo(f"{out} ({tri.num_vertices} vertices, {tri.num_triangles} triangles)")


if __name__ == "__main__":
    main()
