"""Command-line driver.

Exit codes: 0 success, 1 check failed, 2 bad input, 3 optimization failure.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys

import click
import jsonschema
import numpy as np

from . import demo as demo_mod
from . import engine, generator as gen, imageio
from .autodiff import Tensor
from .container import ContainerError
from .render import RenderConfig, render as render_maps, tile_render

EXIT_CHECK_FAILED = 1
EXIT_BAD_INPUT = 2
EXIT_OPTIM_FAILED = 3

_SETTINGS_PROPS = {
    "projection_iters": {"type": "integer", "minimum": 1},
    "projection_lr": {"type": "number", "exclusiveMinimum": 0},
    "transfer_iters": {"type": "integer", "minimum": 1},
    "transfer_lr": {"type": "number", "exclusiveMinimum": 0},
    "adam_beta1": {"type": "number"},
    "adam_beta2": {"type": "number"},
    "adam_eps": {"type": "number", "exclusiveMinimum": 0},
    "style_tap_weights": {
        "type": "object",
        "properties": {t: {"type": "number"} for t in engine.STYLE_TAPS},
        "additionalProperties": False,
    },
    "feature_tap_weight": {"type": "number"},
    "normal_l1_weight": {"type": "number"},
    "erosion_radius": {"type": "integer", "minimum": 0},
    "loss_kind": {"enum": list(engine.LOSS_KINDS)},
    "seed": {"type": "integer"},
    "extractor_seed": {"type": "integer"},
    "prior_mode": {"enum": ["latent", "dip"]},
    "fit_iters": {"type": "integer", "minimum": 1},
    "fit_lr": {"type": "number", "exclusiveMinimum": 0},
    "light_height": {"type": ["number", "null"]},
    "light_intensity": {"type": ["number", "null"]},
    "gamma": {"type": ["number", "null"]},
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": dict(_SETTINGS_PROPS, paths={
        "type": "object",
        "properties": {
            "pack": {"type": "string"}, "generator": {"type": "string"},
            "theta": {"type": "string"}, "out": {"type": "string"},
            "targets": {"type": "array", "items": {"type": "string"}},
            "rules": {"type": "array", "items": {"type": "string"}},
        },
        "additionalProperties": False,
    }),
    "additionalProperties": False,
}


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(path):
    if path is None:
        return {}, {}
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as exc:
        _fail(EXIT_BAD_INPUT, f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        _fail(EXIT_BAD_INPUT,
              f"config {path}: invalid JSON at line {exc.lineno}, column {exc.colno}: "
              f"{exc.msg}")
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "(top level)"
        _fail(EXIT_BAD_INPUT, f"config {path}: {exc.message} at {where}")
    paths = raw.pop("paths", {})
    return raw, paths


def _settings_from(config: dict, seed, loss) -> engine.OptimSettings:
    merged = dict(config)
    if seed is not None:
        merged["seed"] = seed
    if loss is not None:
        merged["loss_kind"] = loss
    try:
        return engine.OptimSettings.from_dict(merged)
    except (TypeError, ValueError) as exc:
        _fail(EXIT_BAD_INPUT, f"bad settings: {exc}")


def _write_report(report: engine.RunReport, path) -> None:
    with open(path, "w") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


@click.group()
def main():
    """Appearance transfer for tileable SVBRDF material packs."""


@main.command("init-generator")
@click.option("--out", required=True, type=click.Path())
@click.option("--resolution", default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--fit-pack", type=click.Path(), default=None,
              help="Fit the weights to this pack (frozen prior), then save.")
@click.option("--fit-iters", type=int, default=None,
              help="Override fit iterations (default from settings).")
@click.option("--fit-lr", type=float, default=None,
              help="Override fit learning rate (default from settings).")
@click.option("--config", "config_path", type=click.Path(), default=None)
def init_generator(out, resolution, seed, fit_pack, fit_iters, fit_lr, config_path):
    """Create (and optionally fit) a tileable generator weights file."""
    config, _ = _load_config(config_path)
    settings = _settings_from(config, seed, None)
    try:
        gcfg = gen.GeneratorConfig(resolution=resolution, seed=settings.seed)
    except ValueError as exc:
        _fail(EXIT_BAD_INPUT, str(exc))
    if fit_pack is None:
        weights = gen.init_weights(gcfg)
    else:
        try:
            maps = imageio.load_pack(fit_pack)
        except imageio.PackError as exc:
            _fail(EXIT_BAD_INPUT, str(exc))
        if maps.resolution != resolution:
            _fail(EXIT_BAD_INPUT,
                  f"pack resolution {maps.resolution} != --resolution {resolution}")
        overrides = {}
        if fit_iters is not None:
            overrides["fit_iters"] = fit_iters
        if fit_lr is not None:
            overrides["fit_lr"] = fit_lr
        fit_settings = dataclasses.replace(settings, **overrides)
        try:
            weights, _, report = engine.fit_weights(maps, gcfg, fit_settings)
        except engine.DivergenceError as exc:
            _fail(EXIT_OPTIM_FAILED, str(exc))
        _write_report(report, str(out) + ".report.json")
    gen.save_generator(weights, out)
    click.echo(f"wrote generator to {out}")


@main.command()
@click.option("--pack", required=True, type=click.Path())
@click.option("--generator", "generator_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
def project(pack, generator_path, out, config_path, seed):
    """Fit generator latents to a material pack; writes a theta checkpoint."""
    config, _ = _load_config(config_path)
    settings = _settings_from(config, seed, None)
    try:
        maps = imageio.load_pack(pack)
        weights = gen.load_generator(generator_path)
    except (imageio.PackError, ContainerError) as exc:
        _fail(EXIT_BAD_INPUT, str(exc))
    if weights.config.resolution != maps.resolution:
        _fail(EXIT_BAD_INPUT,
              f"generator resolution {weights.config.resolution} does not match "
              f"pack resolution {maps.resolution}")
    try:
        theta, report = engine.project(maps, weights, settings)
    except engine.DivergenceError as exc:
        if exc.report is not None:
            _write_report(exc.report, str(out) + ".report.json")
        _fail(EXIT_OPTIM_FAILED, str(exc))
    gen.save_checkpoint(weights, theta, out, extra={"seed": settings.seed})
    _write_report(report, str(out) + ".report.json")
    click.echo(f"wrote theta checkpoint to {out}")


def _parse_rule(text: str) -> engine.TransferRule:
    parts = text.split(":")
    if len(parts) != 3:
        _fail(EXIT_BAD_INPUT, f"rule '{text}' must be INPUT_LABEL:TARGET_INDEX:TARGET_LABEL")
    try:
        a, b, c = (int(p) for p in parts)
        return engine.TransferRule(a, b, c)
    except ValueError as exc:
        _fail(EXIT_BAD_INPUT, f"rule '{text}': {exc}")


@main.command()
@click.option("--theta", "theta_path", required=True, type=click.Path())
@click.option("--pack", required=True, type=click.Path())
@click.option("--target", "target_specs", multiple=True, required=True,
              help="IMG or IMG:LABELS; repeatable.")
@click.option("--rule", "rule_specs", multiple=True,
              help="INPUT_LABEL:TARGET_INDEX:TARGET_LABEL; default 0:0:0.")
@click.option("--out", required=True, type=click.Path())
@click.option("--loss", type=click.Choice(engine.LOSS_KINDS), default=None)
@click.option("--input-labels", type=click.Path(), default=None,
              help="Override the pack's labels.png.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
def transfer(theta_path, pack, target_specs, rule_specs, out, loss,
             input_labels, config_path, seed):
    """Transfer target appearance onto a projected material pack."""
    config, _ = _load_config(config_path)
    settings = _settings_from(config, seed, loss)
    try:
        maps = imageio.load_pack(pack)
        weights, theta, _ = gen.load_checkpoint(theta_path)
    except (imageio.PackError, ContainerError) as exc:
        _fail(EXIT_BAD_INPUT, str(exc))
    res = maps.resolution
    if weights.config.resolution != res:
        _fail(EXIT_BAD_INPUT,
              f"checkpoint resolution {weights.config.resolution} does not match "
              f"pack resolution {res}")

    labels_file = input_labels or os.path.join(pack, "labels.png")
    if input_labels or os.path.isfile(labels_file):
        try:
            in_labels = imageio.load_labels(labels_file, expect_size=res)
        except imageio.PackError as exc:
            _fail(EXIT_BAD_INPUT, str(exc))
    else:
        in_labels = np.zeros((res, res), np.uint8)

    targets = []
    for spec in target_specs:
        img_path, _, labels_path = spec.partition(":")
        try:
            image, labels = imageio.load_photo(img_path, working_res=res,
                                               labels_path=labels_path or None)
        except imageio.PackError as exc:
            _fail(EXIT_BAD_INPUT, str(exc))
        targets.append(engine.TargetSpec(Tensor(image), labels))

    rules = [_parse_rule(r) for r in rule_specs] or [engine.TransferRule(0, 0, 0)]

    try:
        theta_out, report = engine.transfer(theta, maps, in_labels, targets,
                                            rules, weights, settings)
    except engine.UnknownLabelError as exc:
        _fail(EXIT_BAD_INPUT, str(exc))
    except (engine.EmptyRegionError, engine.DivergenceError) as exc:
        _fail(EXIT_OPTIM_FAILED, str(exc))

    result = gen.synthesize(weights, theta_out)
    os.makedirs(out, exist_ok=True)
    imageio.save_pack(result, out)
    rc = settings.render_config()
    imageio.save_render(render_maps(result, rc), os.path.join(out, "render.png"))
    imageio.save_render(tile_render(result, rc, k=2), os.path.join(out, "tiled2x2.png"))
    gen.save_checkpoint(weights, theta_out, os.path.join(out, "theta.bin"),
                        extra={"seed": settings.seed})
    _write_report(report, os.path.join(out, "report.json"))
    click.echo(f"wrote transferred pack to {out}")


@main.command("render")
@click.option("--pack", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--tile", "tile_k", type=int, default=1, show_default=True)
@click.option("--light-height", type=float, default=None)
@click.option("--intensity", type=float, default=None)
@click.option("--gamma", type=float, default=None)
def render_cmd(pack, out, tile_k, light_height, intensity, gamma):
    """Render a material pack preview under the co-located point light."""
    try:
        maps = imageio.load_pack(pack)
    except imageio.PackError as exc:
        _fail(EXIT_BAD_INPUT, str(exc))
    kw = {}
    if light_height is not None:
        kw["light_height"] = light_height
    if intensity is not None:
        kw["light_intensity"] = intensity
    if gamma is not None:
        kw["gamma"] = gamma
    try:
        rc = RenderConfig(**kw)
    except ValueError as exc:
        _fail(EXIT_BAD_INPUT, str(exc))
    if tile_k < 1:
        _fail(EXIT_BAD_INPUT, f"--tile must be >= 1, got {tile_k}")
    image = render_maps(maps, rc) if tile_k == 1 else tile_render(maps, rc, k=tile_k)
    imageio.save_render(image, out)
    click.echo(f"wrote render to {out}")


@main.command("check-tileable")
@click.option("--pack", required=True, type=click.Path())
def check_tileable(pack):
    """Report the per-map seam metric; exit 1 if any map looks seamed."""
    try:
        maps = imageio.load_pack(pack)
    except imageio.PackError as exc:
        _fail(EXIT_BAD_INPUT, str(exc))
    failed = False
    for name in ("albedo", "normal_xy", "roughness", "specular"):
        metric = gen.seam_metric_channels(getattr(maps, name).data)
        status = "ok" if metric <= 0 else "SEAM"
        click.echo(f"{name:10s} seam metric {metric:+.6f}  {status}")
        failed = failed or metric > 0
    sys.exit(EXIT_CHECK_FAILED if failed else 0)


@main.command("make-demo")
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--resolution", type=int, default=64, show_default=True)
def make_demo(out, seed, resolution):
    """Write deterministic demo packs, targets and label maps."""
    paths = demo_mod.make_demo(out, seed=seed, resolution=resolution)
    for key, p in sorted(paths.items()):
        click.echo(f"{key}: {p}")


if __name__ == "__main__":
    main()
