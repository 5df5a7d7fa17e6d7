"""Acceptance suite: one test per criterion, printing a PASS line each.

Run with ``pytest tests/test_acceptance.py -v -s``.  The desk-scale
optimization scenarios (projection recovery, red-target transfer, self
target, two-region control, per-pixel baseline) are session fixtures shared
across criteria; the full suite takes roughly half an hour on two cores.
"""

import itertools
import json
import time

import numpy as np
import pytest
from click.testing import CliRunner

from matxfer import autodiff as ad
from matxfer import cli, demo, engine, features as ft, generator as gen, stats
from matxfer.render import MaterialMaps, render
from matxfer.rng import Stream, STREAM_INIT, STREAM_SUBSAMPLE
from fd import check_grads
from gradsweep import build_cases
from oracles import (energy_distance_reference, erode_reference,
                     render_reference, sorted_l1_reference)

RES = 64
GEN_SEED = 19
FIT_SEED = 101
RUN_SEED = 202
PROJ_GEN_SEED = 23
PROJ_THETA_SEED = 88
PROJ_RUN_SEED = 55


def ok(criterion: int, message: str) -> None:
    print(f"\n[criterion {criterion:2d}] PASS: {message}")


@pytest.fixture(scope="session")
def extractor():
    return engine.default_extractor(engine.OptimSettings())


@pytest.fixture(scope="session")
def gray_world(extractor):
    """Gray 64x64 pack projected into a seeded random generator prior.

    Preparation settings are not criterion-pinned; a gentler projection rate
    converges faster on the flat target than the recovery default.
    """
    gray = demo.gray_pack(RES)
    gcfg = gen.GeneratorConfig(resolution=RES, seed=GEN_SEED)
    weights = gen.init_weights(gcfg)
    settings = engine.OptimSettings(seed=FIT_SEED, projection_iters=400,
                                    projection_lr=0.02)
    theta0, _ = engine.project(gray, weights, settings, extractor=extractor)
    return {"maps": gray, "weights": weights, "theta0": theta0}


@pytest.fixture(scope="session")
def red_target():
    return engine.TargetSpec(ad.Tensor(demo.constant_target(demo.RED_TARGET, RES)))


@pytest.fixture(scope="session")
def blue_target():
    return engine.TargetSpec(ad.Tensor(demo.constant_target(demo.BLUE_TARGET, RES)))


@pytest.fixture(scope="session")
def red_run(gray_world, red_target, extractor):
    """Criterion 8/12 scenario: whole-image transfer toward saturated red."""
    settings = engine.OptimSettings(seed=RUN_SEED)
    theta, report = engine.transfer(
        gray_world["theta0"], gray_world["maps"], None, [red_target],
        [engine.TransferRule(0, 0, 0)], gray_world["weights"], settings,
        extractor=extractor)
    maps = gen.synthesize(gray_world["weights"], theta)
    return {"theta": theta, "report": report, "maps": maps}


@pytest.fixture(scope="session")
def self_run(gray_world, extractor):
    """Criterion 8 structure-preservation scenario: the target is the input's
    own render."""
    target = engine.TargetSpec(render(gray_world["maps"]).detach())
    settings = engine.OptimSettings(seed=RUN_SEED + 1)
    theta, report = engine.transfer(
        gray_world["theta0"], gray_world["maps"], None, [target],
        [engine.TransferRule(0, 0, 0)], gray_world["weights"], settings,
        extractor=extractor)
    maps = gen.synthesize(gray_world["weights"], theta)
    return {"theta": theta, "report": report, "maps": maps}


@pytest.fixture(scope="session")
def tworegion_run(gray_world, red_target, blue_target, extractor):
    """Criterion 9 scenario: left half from the red target, right from blue."""
    labels = demo.split_labels(RES)
    settings = engine.OptimSettings(seed=RUN_SEED + 2)
    rules = [engine.TransferRule(0, 0, 0), engine.TransferRule(1, 1, 0)]
    theta, report = engine.transfer(
        gray_world["theta0"], gray_world["maps"], labels,
        [red_target, blue_target], rules, gray_world["weights"], settings,
        extractor=extractor)
    maps = gen.synthesize(gray_world["weights"], theta)
    return {"theta": theta, "report": report, "maps": maps, "labels": labels}


@pytest.fixture(scope="session")
def perpixel_run(gray_world, red_target, extractor):
    """Criterion 12 baseline on the red-target scene."""
    settings = engine.OptimSettings(seed=RUN_SEED)
    maps, report = engine.per_pixel_transfer(
        gray_world["maps"], None, [red_target], [engine.TransferRule(0, 0, 0)],
        settings, extractor=extractor)
    return {"maps": maps, "report": report}


def test_criterion_1_autodiff_sweep():
    """Every primitive passes central FD checks: 20 instances, under 60 s."""
    t0 = time.perf_counter()
    checked = set()
    with ad.precision("float64"):
        for instance in range(20):
            rng = np.random.default_rng(5000 + instance)
            for name, fn, tensors in build_cases(rng):
                worst = check_grads(fn, tensors, rel_tol=1e-5)
                assert worst <= 1e-5
                checked.add(name)
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"sweep took {elapsed:.1f}s"
    ok(1, f"{len(checked)} primitives x 20 instances, rel err <= 1e-5, "
          f"{elapsed:.1f}s")


def test_criterion_2_renderer_oracle():
    """Vectorized render matches the scalar oracle; gradients match FD."""
    rng = np.random.default_rng(6000)
    with ad.precision("float64"):
        worst = 0.0
        for _ in range(50):
            n = 8
            maps = MaterialMaps(
                ad.Tensor(rng.uniform(0, 1, (3, n, n))),
                ad.Tensor(rng.uniform(-0.7, 0.7, (2, n, n))),
                ad.Tensor(rng.uniform(0.02, 1, (1, n, n))),
                ad.Tensor(rng.uniform(0, 1, (3, n, n))))
            got = render(maps).data
            want = render_reference(maps.albedo.data, maps.normal_xy.data,
                                    maps.roughness.data, maps.specular.data)
            worst = max(worst, float(np.abs(got - want).max()))
        assert worst <= 1e-6

        n = 4
        maps = MaterialMaps(
            ad.Tensor(rng.uniform(0.1, 0.9, (3, n, n)), requires_grad=True),
            ad.Tensor(rng.uniform(-0.6, 0.6, (2, n, n)), requires_grad=True),
            ad.Tensor(rng.uniform(0.1, 0.95, (1, n, n)), requires_grad=True),
            ad.Tensor(rng.uniform(0.05, 0.9, (3, n, n)), requires_grad=True))
        w = ad.Tensor(rng.uniform(0.1, 1.0, (3, n, n)))

        def fn(ts):
            m = MaterialMaps(ts[0], ts[1], ts[2], ts[3])
            return ad.sum_(ad.mul(render(m), w))
        check_grads(fn, [maps.albedo, maps.normal_xy, maps.roughness,
                         maps.specular], rel_tol=1e-4)
    ok(2, f"50 random 8x8 materials, max |diff| = {worst:.2e} <= 1e-6; "
          f"gradients within 1e-4 of FD")


def test_criterion_3_sliced_wasserstein_exactness():
    """Equal counts + one axis direction equals brute-force sorted L1."""
    axis = stats.ProjectionSet(np.array([[1.0]]))
    with ad.precision("float64"):
        hand = stats.sw_loss(
            stats.SampleSet(ad.Tensor([[1.0], [2.0], [3.0]])),
            stats.SampleSet(ad.Tensor([[0.0], [0.0], [0.0]])), axis)
        assert hand.item() == 2.0

        rng = np.random.default_rng(6100)
        worst = 0.0
        for _ in range(50):
            n = int(rng.integers(2, 40))
            u, v = rng.uniform(-3, 3, n), rng.uniform(-3, 3, n)
            got = stats.sw_loss(stats.SampleSet(ad.Tensor(u[:, None])),
                                stats.SampleSet(ad.Tensor(v[:, None])), axis).item()
            worst = max(worst, abs(got - sorted_l1_reference(u, v)))
        assert worst <= 1e-9
    ok(3, f"hand value u=[1,2,3] v=[0,0,0] -> 2 exactly; 50 random instances "
          f"within {worst:.1e} of brute force")


def test_criterion_4_resampling_estimator():
    """Mean of the subsampled estimator matches the exhaustive subset mean."""
    rng = np.random.default_rng(6200)
    u = rng.uniform(0, 2, 4)
    v = rng.uniform(0, 2, 12)
    su = np.sort(u)
    exhaustive = float(np.mean([
        np.abs(su - np.sort(np.asarray(sub))).mean()
        for sub in itertools.combinations(v, 4)]))
    axis = stats.ProjectionSet(np.array([[1.0]]))
    with ad.precision("float64"):
        draws = [
            stats.sw_loss(stats.SampleSet(ad.Tensor(u[:, None])),
                          stats.SampleSet(ad.Tensor(v[:, None])), axis,
                          rng=Stream(77, STREAM_SUBSAMPLE, it)).item()
            for it in range(2000)
        ]
    rel = abs(np.mean(draws) - exhaustive) / exhaustive
    assert rel < 0.03
    ok(4, f"2000 seeded draws mean {np.mean(draws):.6f} vs exhaustive "
          f"{exhaustive:.6f} (C(12,4) subsets), rel diff {rel:.3%} < 3%")


def test_criterion_5_cramer_oracle():
    """Sliced Cramer equals the O(n*m) energy-distance identity."""
    rng = np.random.default_rng(6300)
    axis = stats.ProjectionSet(np.array([[1.0]]))
    worst = 0.0
    with ad.precision("float64"):
        for _ in range(100):
            n, m = int(rng.integers(1, 65)), int(rng.integers(1, 65))
            u, v = rng.uniform(-2, 2, n), rng.uniform(-2, 2, m)
            got = stats.cramer_loss(stats.SampleSet(ad.Tensor(u[:, None])),
                                    stats.SampleSet(ad.Tensor(v[:, None])),
                                    axis).item()
            want = energy_distance_reference(list(u), list(v))
            worst = max(worst, abs(got - want))
        assert worst <= 1e-6
    ok(5, f"100 random unequal-count instances (n,m <= 64), max diff "
          f"{worst:.1e} <= 1e-6")


def test_criterion_6_tileability(red_run, self_run, tworegion_run):
    """Noise-shift equivariance at 256 squared; seam metric on samples and
    on every transferred output."""
    cfg = gen.GeneratorConfig(resolution=256, seed=31)
    weights = gen.init_weights(cfg)
    f = cfg.output_shift_factor
    worst = 0.0
    for i in range(10):
        theta = gen.sample_theta(cfg, Stream(7000 + i, STREAM_INIT, 0))
        dx, dy = (i % 4), ((i * 7 + 1) % 4)
        base = gen.synthesize(weights, theta)
        shifted = gen.synthesize(weights, gen.shift_theta(theta, dx, dy))
        for k, arr in base.arrays().items():
            want = np.roll(arr, (dy * f, dx * f), axis=(1, 2))
            worst = max(worst, float(np.abs(shifted.arrays()[k] - want).max()))
    assert worst <= 1e-5

    seams = []
    for i in range(20):
        theta = gen.sample_theta(cfg, Stream(7100 + i, STREAM_INIT, 0))
        seams.append(gen.seam_metric(gen.synthesize(weights, theta)))
    assert max(seams) <= 0.0

    transferred = {"red": red_run, "self": self_run, "two-region": tworegion_run}
    t_seams = {name: gen.seam_metric(run["maps"]) for name, run in transferred.items()}
    assert all(v <= 0.0 for v in t_seams.values()), t_seams
    ok(6, f"equivariance max err {worst:.2e} <= 1e-5 (10 pairs at 256^2); "
          f"seam metric <= 0 for 20 random latents (max {max(seams):+.4f}) and "
          f"all transferred outputs")


def test_criterion_7_projection_recovery(extractor):
    """A fresh-init projection recovers a generator sample to L1 <= 0.05."""
    cfg = gen.GeneratorConfig(resolution=RES, seed=PROJ_GEN_SEED)
    weights = gen.init_weights(cfg)
    theta_star = gen.sample_theta(cfg, Stream(PROJ_THETA_SEED, STREAM_INIT, 0))
    m0 = gen.synthesize(weights, theta_star).detached()

    settings = engine.OptimSettings(seed=PROJ_RUN_SEED)  # 1000 iters, lr 0.08
    t0 = time.perf_counter()
    theta, report = engine.project(m0, weights, settings, extractor=extractor)
    elapsed = time.perf_counter() - t0
    final = engine.plain_l1(gen.synthesize(weights, theta), m0)
    assert final <= 0.05, f"recovery L1 {final:.4f}"
    assert elapsed < 600.0, f"projection took {elapsed:.0f}s"
    ok(7, f"64x64 recovery L1 {final:.4f} <= 0.05 in "
          f"{report.iterations} iterations, {elapsed:.0f}s < 600s")


def _mean_chroma(img: np.ndarray) -> float:
    return float((img.max(axis=0) - img.min(axis=0)).mean())


def test_criterion_8_desk_transfer_efficacy(gray_world, red_run, self_run):
    """Style loss collapses toward the red target; self-target preserves maps."""
    style = red_run["report"].losses["style"]
    drop = 1.0 - min(style) / style[0]
    assert drop >= 0.80, f"style loss dropped only {drop:.1%}"

    img = render(red_run["maps"]).data
    chroma = _mean_chroma(img)
    target_chroma = max(demo.RED_TARGET) - min(demo.RED_TARGET)
    assert abs(chroma - target_chroma) <= 0.1

    start = gen.synthesize(gray_world["weights"], gray_world["theta0"])
    drift = engine.plain_l1(self_run["maps"], start)
    assert drift <= 0.05, f"self-target run moved maps by {drift:.4f}"
    ok(8, f"style drop {drop:.1%} >= 80%; render chroma {chroma:.3f} vs target "
          f"{target_chroma:.3f} (diff {abs(chroma - target_chroma):.3f} <= 0.1); "
          f"self-target drift {drift:.4f} <= 0.05 L1")


def _chromaticity(rgb: np.ndarray) -> np.ndarray:
    return rgb / max(float(rgb.sum()), 1e-9)


def test_transfer_trace_smoothed_non_increasing(red_run):
    """20-iteration window means of the transfer loss do not increase."""
    total = np.asarray(red_run["report"].losses["total"])
    windows = total[:len(total) - len(total) % 20].reshape(-1, 20).mean(axis=1)
    rises = np.diff(windows)
    assert rises.max() <= 1e-6, f"smoothed trace rose by {rises.max():.2e}"


def test_criterion_9_multi_target_spatial_control(tworegion_run):
    """Each half matches its own target; hue leakage across regions is small."""
    img = render(tworegion_run["maps"]).data
    labels = tworegion_run["labels"]
    targets = {0: np.array(demo.RED_TARGET), 1: np.array(demo.BLUE_TARGET)}
    means = {lbl: img[:, labels == lbl].mean(axis=1) for lbl in (0, 1)}

    worst_match = 0.0
    for lbl, mean in means.items():
        worst_match = max(worst_match, float(np.abs(mean - targets[lbl]).max()))
    assert worst_match <= 0.1, f"region mean off by {worst_match:.3f}"

    # contamination: hue drift from the own target toward the other target,
    # measured on brightness-normalized colors so light falloff cancels
    contam = 0.0
    for lbl, other in ((0, 1), (1, 0)):
        own, alt = _chromaticity(targets[lbl]), _chromaticity(targets[other])
        got = _chromaticity(means[lbl])
        axis = alt - own
        contam = max(contam, float(np.dot(got - own, axis) / np.dot(axis, axis)))
    assert contam < 0.05, f"cross-region contamination {contam:.3f}"
    ok(9, f"region means within {worst_match:.3f} <= 0.1 of assigned targets; "
          f"contamination {contam:.3f} < 0.05")


def test_criterion_10_erosion_contract():
    """Erosion matches the double-loop oracle; kernel-5 leaves a 508^2 core."""
    rng = np.random.default_rng(6400)
    for i in range(100):
        radius = int(rng.integers(0, 4))
        mask = rng.random((int(rng.integers(6, 24)), int(rng.integers(6, 24)))) < 0.6
        assert np.array_equal(stats.erode(mask, radius),
                              erode_reference(mask, radius)), (i, radius)

    full = np.ones((512, 512), bool)
    out = stats.erode(full, 2)
    assert out.sum() == 508 * 508
    assert out[2:-2, 2:-2].all()
    ok(10, "100 random masks match the morphological oracle; 5x5 kernel on a "
           "full 512^2 mask leaves exactly the 508^2 interior")


def test_criterion_11_determinism(tmp_path):
    """Fixed seeds give byte-identical theta checkpoints and output packs."""
    runner = CliRunner()
    assets = tmp_path / "assets"
    r = runner.invoke(cli.main, ["make-demo", "--out", str(assets), "--seed", "3",
                                 "--resolution", "32"])
    assert r.exit_code == 0, r.output
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"projection_iters": 15, "transfer_iters": 10,
                                  "seed": 77}))
    genfile = tmp_path / "gen.bin"
    r = runner.invoke(cli.main, ["init-generator", "--out", str(genfile),
                                 "--resolution", "32", "--seed", "4",
                                 "--fit-pack", str(assets / "gray"),
                                 "--fit-iters", "15", "--config", str(config)])
    assert r.exit_code == 0, r.output

    blobs = {"theta": [], "albedo": [], "render": []}
    for attempt in ("x", "y"):
        theta = tmp_path / f"theta_{attempt}.bin"
        r = runner.invoke(cli.main, ["project", "--pack", str(assets / "gray"),
                                     "--generator", str(genfile), "--out", str(theta),
                                     "--config", str(config)])
        assert r.exit_code == 0, r.output
        out = tmp_path / f"out_{attempt}"
        r = runner.invoke(cli.main, [
            "transfer", "--theta", str(theta), "--pack", str(assets / "gray"),
            "--target", str(assets / "targets" / "red.png"),
            "--out", str(out), "--config", str(config)])
        assert r.exit_code == 0, r.output
        blobs["theta"].append(theta.read_bytes())
        blobs["albedo"].append((out / "albedo.png").read_bytes())
        blobs["render"].append((out / "render.png").read_bytes())

    for name, pair in blobs.items():
        assert pair[0] == pair[1], f"{name} differs between identical runs"
    ok(11, "project and transfer outputs byte-identical across two seeded runs "
           "(theta checkpoint, albedo.png, render.png)")


def test_criterion_12_per_pixel_baseline(red_run, perpixel_run):
    """The pixel-space baseline stalls at a style loss well above the prior's."""
    prior_best = min(red_run["report"].losses["style"])
    pixel_best = min(perpixel_run["report"].losses["style"])
    ratio = pixel_best / prior_best
    assert ratio >= 2.0, f"per-pixel best style only {ratio:.2f}x the prior's"
    ok(12, f"per-pixel best style {pixel_best:.4f} vs prior {prior_best:.4f} "
           f"({ratio:.1f}x >= 2x), traces logged in paired reports")
