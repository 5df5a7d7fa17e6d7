"""Optimization engine: latent projection, appearance transfer, baselines.

Projection fits the generator latents so the synthesized maps reproduce an
input material (pixel L1 plus deep feature distance).  Transfer then moves
the latents so the rendered material's feature statistics match one or more
target photographs region-by-region, while a feature term anchored to the
input maps preserves their structure.

All stochastic choices draw from the documented counter streams, so runs
with equal seeds and settings are bit-reproducible (single-threaded tape;
BLAS-internal parallelism only).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import features as ft
from . import generator as gen
from . import stats
from .autodiff import Tensor
from .render import MaterialMaps, RenderConfig, render
from .rng import directions_stream, init_stream, subsample_stream

STYLE_TAPS = ("s1c1", "s2c1", "s3c1", "s4c1")
PROJECTION_FEATURE_TAPS = ("s1c2", "s2c2", "s3c2", "s4c2")
LOSS_KINDS = ("sw", "cramer", "gram")

UNLABELED = 255


class DivergenceError(RuntimeError):
    """Optimization diverged; carries the loss trace recorded so far."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class UnknownLabelError(ValueError):
    """A transfer rule references a label absent from the label map."""


class EmptyRegionError(RuntimeError):
    """A rule's region erodes to nothing at every tap."""


@dataclass(frozen=True)
class TransferRule:
    """Copy statistics from ``target_label`` of target ``target_index`` into
    ``input_label`` of the input maps."""

    input_label: int
    target_index: int
    target_label: int

    def __post_init__(self):
        if self.input_label == UNLABELED or self.target_label == UNLABELED:
            raise ValueError(f"rule {self.key()}: label {UNLABELED} is reserved for unlabeled")
        if self.target_index < 0:
            raise ValueError(f"rule {self.key()}: negative target index")

    def key(self) -> str:
        return f"{self.input_label}:{self.target_index}:{self.target_label}"


@dataclass
class TargetSpec:
    """A target photograph (display-space RGB in [0,1]) with optional labels."""

    image: Tensor
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.image.data.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"target image must be (3,H,W), got {self.image.shape}")
        h, w = self.image.shape[1], self.image.shape[2]
        if self.labels is None:
            self.labels = np.zeros((h, w), np.uint8)
        elif self.labels.shape != (h, w):
            raise ValueError(
                f"target label map {self.labels.shape} does not match image {h}x{w}")


@dataclass
class OptimSettings:
    projection_iters: int = 1000
    projection_lr: float = 0.08
    transfer_iters: int = 500
    transfer_lr: float = 0.02
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    style_tap_weights: dict = field(default_factory=lambda: {
        "s1c1": 5.0, "s2c1": 5.0, "s3c1": 5.0, "s4c1": 0.5})
    feature_tap_weight: float = 1.0
    normal_l1_weight: float = 5.0
    erosion_radius: int = 2
    loss_kind: str = "sw"
    seed: int = 0
    extractor_seed: int = 97
    prior_mode: str = "latent"
    fit_iters: int = 300
    fit_lr: float = 1e-4
    light_height: float | None = None
    light_intensity: float | None = None
    gamma: float | None = None

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got '{self.loss_kind}'")
        if self.prior_mode not in ("latent", "dip"):
            raise ValueError(f"prior_mode must be 'latent' or 'dip', got '{self.prior_mode}'")
        for name in ("projection_iters", "transfer_iters", "fit_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("projection_lr", "transfer_lr", "fit_lr", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.erosion_radius < 0:
            raise ValueError("erosion_radius must be >= 0")

    def render_config(self) -> RenderConfig:
        kw = {}
        if self.light_height is not None:
            kw["light_height"] = self.light_height
        if self.light_intensity is not None:
            kw["light_intensity"] = self.light_intensity
        if self.gamma is not None:
            kw["gamma"] = self.gamma
        return RenderConfig(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimSettings":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown settings keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunReport:
    """Loss traces plus enough context to reproduce the run."""

    kind: str
    seed: int
    iterations: int
    losses: dict
    settings: dict
    wall_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind, "seed": self.seed, "iterations": self.iterations,
            "losses": self.losses, "settings": self.settings,
            "extra": self.extra, "timings": {"wall_s": self.wall_s},
        }

    def deterministic_dict(self) -> dict:
        d = self.to_json_dict()
        d.pop("timings")
        return d


def adam_step(data: np.ndarray, grad: np.ndarray, state: dict,
              lr: float, beta1: float, beta2: float, eps: float) -> None:
    """Standard bias-corrected Adam update, in place."""
    state["t"] += 1
    t = state["t"]
    state["m"] = beta1 * state["m"] + (1.0 - beta1) * grad
    state["v"] = beta2 * state["v"] + (1.0 - beta2) * (grad * grad)
    m_hat = state["m"] / (1.0 - beta1 ** t)
    v_hat = state["v"] / (1.0 - beta2 ** t)
    data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = [
            {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            for p in self.params
        ]

    def step(self) -> None:
        for p, st in zip(self.params, self.state):
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, st, self.lr, self.beta1, self.beta2, self.eps)
            p.invalidate_cache()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def _map_l1(a: MaterialMaps, b: MaterialMaps, normal_weight: float) -> Tensor:
    """Per-map mean L1 sum with the normal channels up-weighted."""
    loss = ad.l1_distance(a.albedo, b.albedo)
    loss = ad.add(loss, ad.scale(ad.l1_distance(a.normal_xy, b.normal_xy), normal_weight))
    loss = ad.add(loss, ad.l1_distance(a.roughness, b.roughness))
    return ad.add(loss, ad.l1_distance(a.specular, b.specular))


def plain_l1(a: MaterialMaps, b: MaterialMaps) -> float:
    """Unweighted mean absolute difference over all nine channels."""
    total, count = 0.0, 0
    for k, arr in a.arrays().items():
        other = b.arrays()[k]
        total += np.abs(arr - other).sum()
        count += arr.size
    return float(total / count)


def default_extractor(settings: OptimSettings, dtype=None) -> ft.FeatureExtractor:
    return ft.init_random(settings.extractor_seed, dtype=dtype)


class _Trace:
    def __init__(self, names):
        self.values = {n: [] for n in names}
        self.values["best_total"] = []
        self.best = np.inf
        self.best_iteration = -1
        self._over = 0

    def record(self, **vals) -> bool:
        """Returns True when this iteration improved on the best total."""
        for k, v in vals.items():
            self.values[k].append(float(v))
        improved = vals["total"] < self.best
        if improved:
            self.best = float(vals["total"])
            self.best_iteration = len(self.values["total"]) - 1
        self.values["best_total"].append(self.best)
        return improved

    def diverged(self, factor=10.0, run=50) -> bool:
        tot = self.values["total"]
        if not tot:
            return False
        if not np.isfinite(tot[-1]):
            return True
        if tot[-1] > factor * max(tot[0], 1e-12):
            self._over += 1
        else:
            self._over = 0
        return self._over >= run


def project(maps: MaterialMaps, weights: gen.GeneratorWeights,
            settings: OptimSettings | None = None,
            extractor: ft.FeatureExtractor | None = None,
            theta0: gen.LatentTheta | None = None):
    """Fit latents so the generator reproduces ``maps``.

    Returns ``(theta, report)`` with the best-so-far latents.  In "dip"
    prior mode the generator weights are co-optimized in place.
    """
    settings = settings or OptimSettings()
    if weights.config.resolution != maps.resolution:
        raise ValueError(
            f"generator resolution {weights.config.resolution} != maps {maps.resolution}")
    extractor = extractor or default_extractor(settings)
    target = maps.detached()
    target_pyr = ft.extract_material(target, extractor, PROJECTION_FEATURE_TAPS)
    target_pyr = {t: target_pyr[t].detach() for t in PROJECTION_FEATURE_TAPS}

    theta = theta0.copy() if theta0 is not None else gen.init_theta(
        weights.config, init_stream(settings.seed), style_spread=0.0)
    theta.set_requires_grad(True)
    opts = [Adam(theta.tensors(), settings.projection_lr, settings.adam_beta1,
                 settings.adam_beta2, settings.adam_eps)]
    dip = settings.prior_mode == "dip"
    if dip:
        # weight coordinates move coherently when fitting a single image, so
        # they need a far smaller rate than the latents to avoid saturating
        # the output squashing
        weights.set_requires_grad(True)
        opts.append(Adam(weights.tensors(), settings.fit_lr, settings.adam_beta1,
                         settings.adam_beta2, settings.adam_eps))
    else:
        weights.set_requires_grad(False)

    trace = _Trace(("total", "l1", "feature"))
    best_theta = theta.copy()
    t0 = time.perf_counter()

    for _ in range(settings.projection_iters):
        synth = gen.synthesize(weights, theta)
        l1 = _map_l1(synth, target, settings.normal_l1_weight)
        pyr = ft.extract_material(synth, extractor, PROJECTION_FEATURE_TAPS)
        floss = stats.feature_loss(pyr, target_pyr, PROJECTION_FEATURE_TAPS, 1.0)
        total = ad.add(l1, floss)
        for opt in opts:
            opt.zero_grad()
        ad.backward(total)
        for opt in opts:
            opt.step()
        if trace.record(total=total.item(), l1=l1.item(), feature=floss.item()):
            best_theta = theta.copy()
        if trace.diverged():
            report = _report("project", settings, trace, t0)
            raise DivergenceError(
                f"projection diverged after {len(trace.values['total'])} iterations",
                report)

    theta.set_requires_grad(False)
    if dip:
        weights.set_requires_grad(False)
    best_theta.set_requires_grad(False)
    return best_theta, _report("project", settings, trace, t0)


def fit_weights(maps: MaterialMaps, config: gen.GeneratorConfig,
                settings: OptimSettings | None = None,
                extractor: ft.FeatureExtractor | None = None):
    """Obtain a frozen material prior by fitting fresh generator weights to
    ``maps`` (projection with weights co-optimized), then freezing them.

    The weights follow ``fit_lr`` while the latents follow the projection
    rate; see :func:`project`.  Returns ``(weights, theta, report)``.
    """
    import dataclasses
    settings = settings or OptimSettings()
    weights = gen.init_weights(config)
    dip_settings = dataclasses.replace(settings, prior_mode="dip",
                                       projection_iters=settings.fit_iters)
    theta, report = project(maps, weights, dip_settings, extractor)
    weights.set_requires_grad(False)
    report.extra["fitted"] = True
    return weights, theta, report


def _tap_masks(labels: np.ndarray, label: int, taps, radius: int) -> dict:
    out = {}
    for tap in taps:
        down = ft.downsample_labels(labels, tap)
        out[tap] = stats.erode(down == label, radius)
    return out


def _style_loss_for_rule(rule, tap, pyr, in_masks, target_sets, proj, sub_stream, kind):
    mask = in_masks[tap]
    target_set = target_sets.get(tap)
    if target_set is None or not mask.any():
        return None
    u = stats.gather(pyr[tap], mask)
    if kind == "sw":
        return stats.sw_loss(u, target_set, proj, rng=sub_stream)
    if kind == "cramer":
        return stats.cramer_loss(u, target_set, proj)
    return stats.gram_loss(u, target_set)


def _prepare_rules(input_labels, targets, rules, extractor, settings):
    """Validate rules and cache target-side sample sets per (rule, tap)."""
    target_pyrs = {}
    rule_ctx = []
    for rule in rules:
        if not np.any(input_labels == rule.input_label):
            raise UnknownLabelError(
                f"rule {rule.key()}: input label map has no pixels with label "
                f"{rule.input_label}")
        if rule.target_index >= len(targets):
            raise UnknownLabelError(
                f"rule {rule.key()}: target index {rule.target_index} out of range "
                f"({len(targets)} targets)")
        target = targets[rule.target_index]
        if not np.any(target.labels == rule.target_label):
            raise UnknownLabelError(
                f"rule {rule.key()}: target {rule.target_index} has no pixels with "
                f"label {rule.target_label}")

        if rule.target_index not in target_pyrs:
            pyr = ft.extract(target.image.detach(), extractor, STYLE_TAPS)
            target_pyrs[rule.target_index] = {t: pyr[t].detach() for t in STYLE_TAPS}

        in_masks = _tap_masks(input_labels, rule.input_label, STYLE_TAPS,
                              settings.erosion_radius)
        tgt_masks = _tap_masks(target.labels, rule.target_label, STYLE_TAPS,
                               settings.erosion_radius)
        target_sets = {}
        for tap in STYLE_TAPS:
            if tgt_masks[tap].any():
                target_sets[tap] = stats.gather(
                    target_pyrs[rule.target_index][tap], tgt_masks[tap])
        active = [t for t in STYLE_TAPS
                  if in_masks[t].any() and t in target_sets]
        if not active:
            raise EmptyRegionError(
                f"rule {rule.key()}: region is empty at every tap after erosion "
                f"(radius {settings.erosion_radius})")
        rule_ctx.append({"rule": rule, "in_masks": in_masks,
                         "target_sets": target_sets, "active": active})
    return rule_ctx


def _style_total(rule_ctx, pyr, iteration, settings, dtype):
    """Mean style loss over rules; identical rules share one evaluation."""
    dir_stream = directions_stream(settings.seed, iteration)
    sub_stream = subsample_stream(settings.seed, iteration)
    projections = {}
    needed = sorted({t for ctx in rule_ctx for t in ctx["active"]},
                    key=STYLE_TAPS.index)
    for tap in needed:
        projections[tap] = stats.sample_directions(dir_stream, ft.tap_channels(tap))

    by_key = {}
    total = None
    for ctx in rule_ctx:
        key = ctx["rule"].key()
        if key not in by_key:
            rule_loss = None
            for tap in ctx["active"]:
                loss = _style_loss_for_rule(
                    ctx["rule"], tap, pyr, ctx["in_masks"], ctx["target_sets"],
                    projections[tap], sub_stream, settings.loss_kind)
                if loss is None:
                    continue
                term = ad.scale(loss, float(settings.style_tap_weights[tap]))
                rule_loss = term if rule_loss is None else ad.add(rule_loss, term)
            if rule_loss is None:
                rule_loss = Tensor(np.zeros((), dtype=dtype), dtype=dtype)
            by_key[key] = rule_loss
        contribution = by_key[key]
        total = contribution if total is None else ad.add(total, contribution)
    return ad.scale(total, 1.0 / len(rule_ctx))


def transfer(theta: gen.LatentTheta, maps: MaterialMaps, input_labels: np.ndarray,
             targets, rules, weights: gen.GeneratorWeights,
             settings: OptimSettings | None = None,
             extractor: ft.FeatureExtractor | None = None):
    """Optimize latents so rendered statistics match the targets per rule.

    Returns ``(theta, report)`` with the best-so-far latents.
    """
    settings = settings or OptimSettings()
    extractor = extractor or default_extractor(settings)
    rules = list(rules) if rules else [TransferRule(0, 0, 0)]
    if input_labels is None:
        input_labels = np.zeros((maps.resolution, maps.resolution), np.uint8)
    if input_labels.shape != (maps.resolution, maps.resolution):
        raise ValueError(
            f"input label map {input_labels.shape} does not match maps "
            f"{maps.resolution}x{maps.resolution}")
    rc = settings.render_config()
    dtype = weights.base.data.dtype

    rule_ctx = _prepare_rules(input_labels, targets, rules, extractor, settings)
    m0 = maps.detached()
    m0_pyr = ft.extract_material(m0, extractor, ("s4c2",))
    m0_deep = m0_pyr["s4c2"].detach()

    theta = theta.copy()
    theta.set_requires_grad(True)
    opts = [Adam(theta.tensors(), settings.transfer_lr, settings.adam_beta1,
                 settings.adam_beta2, settings.adam_eps)]
    dip = settings.prior_mode == "dip"
    if dip:
        weights.set_requires_grad(True)
        opts.append(Adam(weights.tensors(), settings.fit_lr, settings.adam_beta1,
                         settings.adam_beta2, settings.adam_eps))
    else:
        weights.set_requires_grad(False)

    trace = _Trace(("total", "style", "feature"))
    best_theta = theta.copy()
    t0 = time.perf_counter()

    for iteration in range(settings.transfer_iters):
        synth = gen.synthesize(weights, theta)
        img = render(synth, rc)
        pyr = ft.extract(img, extractor, STYLE_TAPS)
        style = _style_total(rule_ctx, pyr, iteration, settings, dtype)
        deep = ft.extract_material(synth, extractor, ("s4c2",))["s4c2"]
        feat = ad.scale(ad.l1_distance(deep, m0_deep), settings.feature_tap_weight)
        total = ad.add(style, feat)
        for opt in opts:
            opt.zero_grad()
        ad.backward(total)
        for opt in opts:
            opt.step()
        if trace.record(total=total.item(), style=style.item(), feature=feat.item()):
            best_theta = theta.copy()
        if trace.diverged():
            report = _report("transfer", settings, trace, t0)
            raise DivergenceError(
                f"transfer diverged after {len(trace.values['total'])} iterations",
                report)

    theta.set_requires_grad(False)
    if dip:
        weights.set_requires_grad(False)
    best_theta.set_requires_grad(False)
    return best_theta, _report("transfer", settings, trace, t0)


def per_pixel_transfer(maps: MaterialMaps, input_labels: np.ndarray, targets, rules,
                       settings: OptimSettings | None = None,
                       extractor: ft.FeatureExtractor | None = None):
    """Baseline: the transfer objective optimized directly on map pixels.

    Divergence is recorded in the report rather than raised; this mode
    exists to reproduce the failure comparison against the generator prior.
    Returns ``(maps, report)``.
    """
    settings = settings or OptimSettings()
    extractor = extractor or default_extractor(settings)
    rules = list(rules) if rules else [TransferRule(0, 0, 0)]
    if input_labels is None:
        input_labels = np.zeros((maps.resolution, maps.resolution), np.uint8)
    rc = settings.render_config()
    dtype = maps.albedo.data.dtype

    rule_ctx = _prepare_rules(input_labels, targets, rules, extractor, settings)
    m0 = maps.detached()
    m0_deep = ft.extract_material(m0, extractor, ("s4c2",))["s4c2"].detach()

    params = [
        Tensor(maps.albedo.data.copy(), requires_grad=True, dtype=dtype),
        Tensor(maps.normal_xy.data.copy(), requires_grad=True, dtype=dtype),
        Tensor(maps.roughness.data.copy(), requires_grad=True, dtype=dtype),
        Tensor(maps.specular.data.copy(), requires_grad=True, dtype=dtype),
    ]

    def current() -> MaterialMaps:
        return MaterialMaps(
            ad.clamp(params[0], 0.0, 1.0), ad.clamp(params[1], -1.0, 1.0),
            ad.clamp(params[2], 0.0, 1.0), ad.clamp(params[3], 0.0, 1.0))

    opt = Adam(params, settings.transfer_lr, settings.adam_beta1,
               settings.adam_beta2, settings.adam_eps)
    trace = _Trace(("total", "style", "feature"))
    best = [p.data.copy() for p in params]
    diverged = False
    t0 = time.perf_counter()

    for iteration in range(settings.transfer_iters):
        m = current()
        img = render(m, rc)
        pyr = ft.extract(img, extractor, STYLE_TAPS)
        style = _style_total(rule_ctx, pyr, iteration, settings, dtype)
        deep = ft.extract_material(m, extractor, ("s4c2",))["s4c2"]
        feat = ad.scale(ad.l1_distance(deep, m0_deep), settings.feature_tap_weight)
        total = ad.add(style, feat)
        opt.zero_grad()
        ad.backward(total)
        opt.step()
        if trace.record(total=total.item(), style=style.item(), feature=feat.item()):
            best = [p.data.copy() for p in params]
        if trace.diverged():
            diverged = True

    out = MaterialMaps(
        Tensor(np.clip(best[0], 0.0, 1.0), dtype=dtype),
        Tensor(np.clip(best[1], -1.0, 1.0), dtype=dtype),
        Tensor(np.clip(best[2], 0.0, 1.0), dtype=dtype),
        Tensor(np.clip(best[3], 0.0, 1.0), dtype=dtype))
    report = _report("per-pixel-transfer", settings, trace, t0)
    report.extra["diverged"] = diverged
    return out, report


def _report(kind: str, settings: OptimSettings, trace: _Trace, t0: float) -> RunReport:
    return RunReport(
        kind=kind, seed=settings.seed,
        iterations=len(trace.values["total"]),
        losses=trace.values, settings=settings.to_dict(),
        wall_s=time.perf_counter() - t0,
        extra={"best_total": trace.best, "best_iteration": trace.best_iteration},
    )
