"""Synthetic experiments: trajectories, matcher comparisons, decoder runs, gradient checks.

A scenario samples ground-truth boxes in an image and simulates what a
multi-stage decoder would predict for them: tracking queries sit on their
ground truth with noise that shrinks from stage to stage, surplus queries
carry background-leaning scores on random boxes. Matching every stage
independently versus with momentum then shows how often a ground truth
changes its matched query between stages.
"""
import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _backend, rotgeom
from .decoder import (
    DecoderConfig,
    DecoderParams,
    IgaCache,
    IgaParams,
    QueryState,
    iga_backward,
    iga_forward,
    run_decoder,
)
from .errors import ConfigError
from .matching import CostWeights, GroundTruthSet, Predictions, stage_wise_match
from .mbm import MbmConfig, identity_shift_rate, momentum_match
from .tensorcore import LinearLayer, finite_diff_grad, make_rng, sinusoidal_pe

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1.0"
MATCHERS = ("stagewise", "mbm", "both")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-stage noise scales; each sequence has one entry per stage and never increases.

    position: center jitter as a fraction of the box side; size: log-scale
    jitter of the sides; angle: radians; score: logit jitter.
    """

    position: tuple = (0.6, 0.5, 0.4, 0.3, 0.2, 0.1)
    size: tuple = (0.3, 0.25, 0.2, 0.15, 0.1, 0.05)
    angle: tuple = (0.5, 0.4, 0.3, 0.2, 0.15, 0.1)
    score: tuple = (1.5, 1.2, 1.0, 0.8, 0.6, 0.4)

    def __post_init__(self):
        for name in ("position", "size", "angle", "score"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    def validate(self, stages):
        for name in ("position", "size", "angle", "score"):
            seq = getattr(self, name)
            if len(seq) != stages:
                raise ConfigError(f"noise.{name} has {len(seq)} entries for {stages} stages")
            if any(v < 0 or not np.isfinite(v) for v in seq):
                raise ConfigError(f"noise.{name} must be finite and >= 0")
            if any(b > a for a, b in zip(seq, seq[1:])):
                raise ConfigError(f"noise.{name} must be nonincreasing")

    @classmethod
    def constant(cls, stages, position=0.0, size=0.0, angle=0.0, score=0.0):
        return cls((position,) * stages, (size,) * stages, (angle,) * stages, (score,) * stages)


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    num_gts: int = 4
    num_queries: int = 8
    stages: int = 6
    num_classes: int = 5
    image_size: tuple = (64.0, 64.0)
    gt_size_range: tuple = (8.0, 20.0)
    max_aspect: float = 3.0
    queries_per_gt: int = 1
    logit_margin: float = 2.0
    noise: NoiseSchedule = NoiseSchedule()
    matcher: str = "both"
    mbm: MbmConfig = MbmConfig()
    weights: CostWeights = CostWeights()
    decoder: DecoderConfig = DecoderConfig()
    feature_size: tuple = (32, 32)

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(float(v) for v in self.image_size))
        object.__setattr__(self, "gt_size_range", tuple(float(v) for v in self.gt_size_range))
        object.__setattr__(self, "feature_size", tuple(int(v) for v in self.feature_size))
        self.validate()

    def validate(self):
        if self.num_gts < 0 or self.num_queries < 1 or self.stages < 1 or self.num_classes < 1:
            raise ConfigError("num_gts >= 0, num_queries >= 1, stages >= 1, num_classes >= 1 required")
        if self.queries_per_gt < 1:
            raise ConfigError("queries_per_gt must be >= 1")
        if self.num_gts * self.queries_per_gt > self.num_queries:
            raise ConfigError(
                f"{self.num_gts} gts x {self.queries_per_gt} tracking queries exceed {self.num_queries} queries"
            )
        if self.matcher not in MATCHERS:
            raise ConfigError(f"matcher must be one of {MATCHERS}, got {self.matcher!r}")
        lo, hi = self.gt_size_range
        if not 0 < lo <= hi:
            raise ConfigError("gt_size_range must satisfy 0 < min <= max")
        if self.max_aspect < 1.0:
            raise ConfigError("max_aspect must be >= 1")
        if len(self.image_size) != 2 or min(self.image_size) <= 0:
            raise ConfigError("image_size must be two positive extents")
        if len(self.feature_size) != 2 or min(self.feature_size) < 1:
            raise ConfigError("feature_size must be two positive extents")
        self.noise.validate(self.stages)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        nested = {"noise": NoiseSchedule, "weights": CostWeights, "decoder": DecoderConfig}
        for key, typ in nested.items():
            if key in data and isinstance(data[key], dict):
                data[key] = _build(typ, data[key], key)
        if "mbm" in data and isinstance(data["mbm"], dict):
            m = dict(data["mbm"])
            if isinstance(m.get("weights"), dict):
                m["weights"] = _build(CostWeights, m["weights"], "mbm.weights")
            data["mbm"] = _build(MbmConfig, m, "mbm")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def with_overrides(self, seed=None, matcher=None, alpha=None, fixed_eta=None):
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=int(seed))
        if matcher is not None:
            cfg = dataclasses.replace(cfg, matcher=matcher)
        if alpha is not None or fixed_eta is not None:
            m = cfg.mbm
            if alpha is not None:
                m = dataclasses.replace(m, alpha=float(alpha))
            if fixed_eta is not None:
                m = dataclasses.replace(m, fixed_eta=float(fixed_eta))
            cfg = dataclasses.replace(cfg, mbm=m)
        return cfg


def _build(typ, data, where):
    names = {f.name for f in dataclasses.fields(typ)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return typ(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path):
    """Read a JSON (default) or TOML (``.toml``) scenario file."""
    path = str(path)
    try:
        if path.endswith(".toml"):
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        else:
            with open(path) as fh:
                data = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return ScenarioConfig.from_dict(data)


def dump_config(cfg):
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


# ---------------------------------------------------------------- trajectories


def _sample_boxes(rng, n, cfg):
    w_img, h_img = cfg.image_size
    lo, hi = cfg.gt_size_range
    long_side = rng.uniform(lo, hi, n)
    aspect = rng.uniform(1.0, cfg.max_aspect, n)
    cx = rng.uniform(0.0, w_img, n)
    cy = rng.uniform(0.0, h_img, n)
    theta = rng.uniform(-0.5 * np.pi, 0.5 * np.pi, n)
    return np.stack([cx, cy, long_side, long_side / aspect, theta], axis=-1)


def _perturb(rng, boxes, pos, size, ang):
    n = boxes.shape[0]
    e = rng.standard_normal((n, 5))
    out = np.empty_like(boxes)
    out[:, 0] = boxes[:, 0] + pos * boxes[:, 2] * e[:, 0]
    out[:, 1] = boxes[:, 1] + pos * boxes[:, 3] * e[:, 1]
    out[:, 2] = boxes[:, 2] * np.exp(size * e[:, 2])
    out[:, 3] = boxes[:, 3] * np.exp(size * e[:, 3])
    out[:, 4] = rotgeom.normalize_angles(boxes[:, 4] + ang * e[:, 4])
    return out


def generate_trajectory(cfg):
    """Sample ground truth and per-stage predictions for ``cfg``.

    Query i < num_gts * queries_per_gt tracks ground truth ``i % num_gts``;
    the remaining queries are background-leaning distractors.
    """
    cfg.validate()
    rng = make_rng(cfg.seed)
    g, n, k = cfg.num_gts, cfg.num_queries, cfg.num_classes
    gt_boxes = _sample_boxes(rng, g, cfg)
    labels = rng.integers(0, k, g)
    gts = GroundTruthSet(labels=labels, boxes=gt_boxes)

    n_track = g * cfg.queries_per_gt
    track_of = np.arange(n_track) % g if g else np.zeros(0, dtype=np.int64)
    base_boxes = np.concatenate([gt_boxes[track_of], _sample_boxes(rng, n - n_track, cfg)])
    base_logits = np.zeros((n, k + 1))
    base_logits[np.arange(n_track), labels[track_of]] = cfg.logit_margin
    base_logits[n_track:, k] = cfg.logit_margin

    trajectory = []
    for s in range(cfg.stages):
        boxes = _perturb(rng, base_boxes, cfg.noise.position[s], cfg.noise.size[s], cfg.noise.angle[s])
        logits = base_logits + cfg.noise.score[s] * rng.standard_normal((n, k + 1))
        trajectory.append(Predictions(class_scores=logits, boxes=boxes))
    return gts, trajectory


# ---------------------------------------------------------------- matching experiments


def _matcher_report(assignments):
    return {
        "assignments": [a.to_triples() for a in assignments],
        "total_costs": [a.total_cost for a in assignments],
        "identity_shift_rate": identity_shift_rate(assignments) if len(assignments) >= 2 else None,
    }


def _selected(matcher):
    return ("stagewise", "mbm") if matcher == "both" else (matcher,)


def run_matchers(cfg, backend=None):
    """Assignments per matcher on the scenario trajectory, plus the trajectory itself."""
    gts, trajectory = generate_trajectory(cfg)
    out = {}
    for name in _selected(cfg.matcher):
        if name == "stagewise":
            out[name] = stage_wise_match(trajectory, gts, cfg.weights, cfg.image_size, backend)
        else:
            mcfg = dataclasses.replace(cfg.mbm, weights=cfg.weights)
            out[name], _ = momentum_match(trajectory, gts, mcfg, cfg.image_size, backend)
    return gts, trajectory, out


def run_experiment(cfg, backend=None):
    """Run the selected matchers on one seeded trajectory and build a report dict."""
    t0 = time.perf_counter()
    gts, _, results = run_matchers(cfg, backend)
    report = {
        "format_version": FORMAT_VERSION,
        "kind": "match",
        "config": cfg.to_dict(),
        "ground_truth": {"labels": gts.labels.tolist(), "boxes": gts.boxes.tolist()},
        "matchers": {name: _matcher_report(a) for name, a in results.items()},
    }
    report["runtime_seconds"] = time.perf_counter() - t0
    return report


def _shift_rates(cfg):
    _, _, results = run_matchers(cfg)
    return {name: identity_shift_rate(a) for name, a in results.items()}


def run_batch(cfg, seeds, jobs=1):
    """Identity-shift rates for many seeds; ``jobs > 1`` spreads seeds over processes."""
    cfgs = [dataclasses.replace(cfg, seed=int(s)) for s in seeds]
    t0 = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rates = list(pool.map(_shift_rates, cfgs))
    else:
        rates = [_shift_rates(c) for c in cfgs]
    per_seed = {str(c.seed): r for c, r in zip(cfgs, rates)}
    names = _selected(cfg.matcher)
    mean = {name: float(np.mean([per_seed[k][name] for k in sorted(per_seed)])) for name in names}
    return {
        "format_version": FORMAT_VERSION,
        "kind": "match-batch",
        "config": cfg.to_dict(),
        "seeds": per_seed,
        "mean_identity_shift_rate": mean,
        "runtime_seconds": time.perf_counter() - t0,
    }


# ---------------------------------------------------------------- decoder runs


def synthesize_decoder_inputs(cfg):
    """Seeded feature map [C, H, W] and initial query state inside it."""
    dcfg = cfg.decoder
    rng = make_rng(cfg.seed)
    h, w = cfg.feature_size
    features = rng.standard_normal((dcfg.channels, h, w))
    n = dcfg.num_queries
    side = rng.uniform(0.15, 0.4, (n, 2)) * np.array([w, h])
    boxes = np.column_stack(
        [
            rng.uniform(0.25 * w, 0.75 * w, n),
            rng.uniform(0.25 * h, 0.75 * h, n),
            side,
            rng.uniform(-0.5 * np.pi, 0.5 * np.pi, n),
        ]
    )
    init = QueryState(
        embeddings=rng.standard_normal((n, dcfg.channels)),
        boxes=boxes,
        class_scores=np.zeros((n, dcfg.num_classes + 1)),
    )
    return features, init


def run_decode(cfg, params=None, backend=None, include_embeddings=False):
    t0 = time.perf_counter()
    features, init = synthesize_decoder_inputs(cfg)
    if params is None:
        params = DecoderParams.init(cfg.decoder, cfg.seed)
    states = run_decoder(init, features, params, cfg.decoder, backend)
    stages = []
    for s, st in enumerate(states):
        entry = {
            "stage": s + 1,
            "boxes": st.boxes.tolist(),
            "class_probabilities": st.probabilities().tolist(),
            "embedding_norms": np.linalg.norm(st.embeddings, axis=1).tolist(),
        }
        if include_embeddings:
            entry["embeddings"] = st.embeddings.tolist()
        stages.append(entry)
    report = {
        "format_version": FORMAT_VERSION,
        "kind": "decode",
        "config": cfg.to_dict(),
        "backend": _backend.NAME if backend is None else backend,
        "stages": stages,
    }
    report["runtime_seconds"] = time.perf_counter() - t0
    return report, states, params


# ---------------------------------------------------------------- gradient checks

GRAD_TOL = 1e-4
GRAD_FLOOR = 1e-6
# central differences carry roughly eps * |f| / h of roundoff; groups whose true
# gradient vanishes are held to this absolute bound instead of a ratio of noise
NULL_ABS_TOL = 1e-8


def relative_error(analytic, numeric, floor=GRAD_FLOOR):
    """max|a - n| / max(|a|_inf, |n|_inf, floor)."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return abs_error(analytic, numeric) / max(_scale(analytic, numeric), floor)


def abs_error(analytic, numeric):
    return float(np.abs(np.asarray(analytic) - np.asarray(numeric)).max(initial=0.0))


def _scale(analytic, numeric):
    return max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))


def _with_array(params, key, value):
    name, part = key.split(".")
    layer = getattr(params, name)
    return dataclasses.replace(params, **{name: dataclasses.replace(layer, **{part: value})})


@dataclass(frozen=True)
class GradComparison:
    relative: float
    absolute: float
    scale: float

    @property
    def null(self):
        """True when both gradients are below the floor, i.e. the group has no gradient to compare."""
        return self.scale < GRAD_FLOOR


def gradcheck_draw(rng, channels=16, roi_size=3, h=1e-5, zero_filter=False):
    """One random IGA instance: per-group comparison of analytic vs central differences."""
    params = IgaParams.init(rng, channels, roi_size)
    if zero_filter:
        params = dataclasses.replace(params, filter_gen=LinearLayer.zeros(channels, channels * channels))
    q = rng.standard_normal(channels)
    R = rng.standard_normal((channels, roi_size, roi_size))
    P = sinusoidal_pe(roi_size, channels)
    probe = rng.standard_normal(channels)

    cache = IgaCache()
    iga_forward(q, R, P, params, cache)
    grads = iga_backward(probe, cache).named_arrays()

    def probe_of(**kw):
        return float(probe @ iga_forward(kw.get("q", q), kw.get("R", R), kw.get("P", P), kw.get("params", params)))

    numeric = {
        "q": finite_diff_grad(lambda x: probe_of(q=x), q, h),
        "R": finite_diff_grad(lambda x: probe_of(R=x), R, h),
        "P": finite_diff_grad(lambda x: probe_of(P=x), P, h),
    }
    for key in grads:
        if key in numeric:
            continue
        name, part = key.split(".")
        base = getattr(getattr(params, name), part)
        numeric[key] = finite_diff_grad(lambda x, key=key: probe_of(params=_with_array(params, key, x)), base, h)
    return {
        key: GradComparison(
            relative_error(grads[key], numeric[key]),
            abs_error(grads[key], numeric[key]),
            _scale(grads[key], numeric[key]),
        )
        for key in grads
    }


def run_gradcheck_suite(seed=0, draws=20, channels=16, roi_size=3, h=1e-5, zero_filter=False):
    """Worst gradient mismatch per parameter group over ``draws`` seeded instances.

    Groups with a gradient are scored by relative error against GRAD_TOL.
    Groups whose analytic and numeric gradients both stay under GRAD_FLOOR
    are listed under ``null_groups`` with their absolute error, which must
    stay under NULL_ABS_TOL.
    """
    t0 = time.perf_counter()
    rng = make_rng(seed)
    worst = {}
    null = {}
    for _ in range(draws):
        for key, cmp in gradcheck_draw(rng, channels, roi_size, h, zero_filter).items():
            if cmp.null:
                null[key] = max(null.get(key, 0.0), cmp.absolute)
            else:
                worst[key] = max(worst.get(key, 0.0), cmp.relative)
    overall = max(worst.values()) if worst else 0.0
    null_worst = max(null.values()) if null else 0.0
    report = {
        "format_version": FORMAT_VERSION,
        "kind": "gradcheck",
        "seed": int(seed),
        "draws": int(draws),
        "channels": int(channels),
        "roi_size": int(roi_size),
        "step": h,
        "zero_filter": bool(zero_filter),
        "max_relative_error": worst,
        "null_groups": null,
        "overall_max_relative_error": overall,
        "null_max_abs_error": null_worst,
        "tolerance": GRAD_TOL,
        "null_abs_tolerance": NULL_ABS_TOL,
        "passed": overall < GRAD_TOL and null_worst < NULL_ABS_TOL,
    }
    report["runtime_seconds"] = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------- output


def strip_runtime(report):
    """Copy of ``report`` without timing fields, for determinism comparisons."""
    if isinstance(report, dict):
        return {k: strip_runtime(v) for k, v in report.items() if k != "runtime_seconds"}
    if isinstance(report, list):
        return [strip_runtime(v) for v in report]
    return report


def to_json(report):
    return json.dumps(report, indent=2, sort_keys=True)


def to_csv(report):
    """Flat CSV summary of a report."""
    import csv
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    kind = report.get("kind")
    if kind == "match":
        writer.writerow(["matcher", "stage", "total_cost", "pairs", "identity_shift_rate"])
        for name, m in report["matchers"].items():
            for s, (cost, pairs) in enumerate(zip(m["total_costs"], m["assignments"])):
                writer.writerow([name, s + 1, repr(cost), " ".join(f"{q}:{g}" for q, g, _ in pairs),
                                 m["identity_shift_rate"]])
    elif kind == "match-batch":
        names = list(report["mean_identity_shift_rate"])
        writer.writerow(["seed"] + names)
        for seed, rates in report["seeds"].items():
            writer.writerow([seed] + [rates[n] for n in names])
        writer.writerow(["mean"] + [report["mean_identity_shift_rate"][n] for n in names])
    elif kind == "decode":
        writer.writerow(["stage", "query", "cx", "cy", "w", "h", "theta", "top_class", "top_prob"])
        for st in report["stages"]:
            for i, (box, probs) in enumerate(zip(st["boxes"], st["class_probabilities"])):
                top = int(np.argmax(probs))
                writer.writerow([st["stage"], i, *box, top, probs[top]])
    else:
        writer.writerow(["key", "value"])
        for key, value in _flatten(report):
            writer.writerow([key, value])
    return buf.getvalue()


def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _flatten(v, f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(obj, list) and obj and isinstance(obj[0], (dict, list)):
        for i, v in enumerate(obj):
            yield from _flatten(v, f"{prefix}.{i}")
    else:
        yield prefix, obj
