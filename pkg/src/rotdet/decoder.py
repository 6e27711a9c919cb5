"""Geometry-aware query decoder.

A decoding stage runs self-attention over the queries, pools rotated RoI
features at each query's previous box, applies the grouped dynamic
interaction layer and then the grouped geometry augmentation, passes the
result through a residual feed-forward block, and re-predicts boxes and
class logits.

Geometry augmentation for one query ``q`` [C] and pooled features
``R`` [C, K, K] with positional embedding ``P``::

    Rb   = reshape(R + P, [C, K*K])
    A    = softmax_over_rows((Wa Rb)^T (Wb Rb) / sqrt(C))    # columns sum to 1
    G    = Wg A                                               # [C, K*K]
    Ghat = reshape(filter_gen(q), [C, C]) @ G
    out  = out_proj(flatten(R + Ghat))

All functions accept a leading batch axis of queries and are written so
that each query's result depends only on its own row.
"""
from dataclasses import dataclass, field, fields, is_dataclass
from functools import partial

import numpy as np

from . import rotgeom
from .errors import ConfigError, DimensionError, UsageError
from .tensorcore import (
    AttentionParams,
    LinearLayer,
    linear_forward,
    make_rng,
    relu,
    self_attention,
    sinusoidal_pe,
    softmax,
)

DELTA_LOG_CLAMP = 4.0


@dataclass(frozen=True)
class DecoderConfig:
    stages: int = 6
    num_queries: int = 8
    channels: int = 32
    roi_size: int = 3
    groups: int = 8
    num_classes: int = 5
    sampling: int = 1
    ffn_hidden_mult: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("stages", "num_queries", "channels", "roi_size", "groups", "num_classes", "sampling"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.channels % self.groups:
            raise ConfigError(f"channels {self.channels} not divisible by groups {self.groups}")
        if self.channels % 4:
            raise ConfigError(f"channels {self.channels} not divisible by 4")
        if self.group_channels % 4:
            raise ConfigError(f"group width {self.group_channels} not divisible by 4")

    @property
    def group_channels(self):
        return self.channels // self.groups

    @classmethod
    def paper_scale(cls, num_classes=15):
        return cls(stages=6, num_queries=500, channels=256, roi_size=7, groups=8, num_classes=num_classes)


# ---------------------------------------------------------------- geometry augmentation


@dataclass(frozen=True)
class IgaParams:
    w_a: LinearLayer  # C -> C
    w_b: LinearLayer  # C -> C
    proj_g: LinearLayer  # K*K -> C, applied to each column of A
    filter_gen: LinearLayer  # C -> C*C
    out_proj: LinearLayer  # C*K*K -> C

    @classmethod
    def init(cls, rng, channels, roi_size):
        c, l = channels, roi_size * roi_size
        return cls(
            LinearLayer.init(rng, c, c),
            LinearLayer.init(rng, c, c),
            LinearLayer.init(rng, l, c),
            LinearLayer.init(rng, c, c * c),
            LinearLayer.init(rng, c * l, c),
        )

    @property
    def channels(self):
        return self.w_a.in_features

    @property
    def roi_cells(self):
        return self.proj_g.in_features


class IgaCache:
    """Forward intermediates kept for :func:`iga_backward`."""

    def __init__(self):
        self.valid = False

    def clear(self):
        self.__dict__.clear()
        self.valid = False


def _column_linear(layer, x):
    # apply layer to every column of x [..., in, L]
    return np.matmul(layer.weight, x) + layer.bias[:, None]


def build_correlation(r_bar, w_a, w_b):
    """Correlation matrix [.., L, L] of the flattened features ``r_bar`` [.., C, L].

    Softmax runs over the first matrix axis, so every column is a
    distribution over the L = K*K locations.
    """
    r_bar = np.asarray(r_bar, dtype=np.float64)
    if r_bar.ndim < 2 or r_bar.shape[-2] != w_a.in_features or r_bar.shape[-2] != w_b.in_features:
        raise DimensionError(f"features {r_bar.shape} do not match projection width {w_a.in_features}")
    c = r_bar.shape[-2]
    xa = _column_linear(w_a, r_bar)
    xb = _column_linear(w_b, r_bar)
    scores = np.matmul(np.swapaxes(xa, -1, -2), xb) / np.sqrt(c)
    return softmax(scores, axis=-2)


def _check_iga_shapes(q, R, P, params):
    c, l = params.channels, params.roi_cells
    if q.ndim != 2 or q.shape[1] != c:
        raise DimensionError(f"queries must be [N, {c}], got {q.shape}")
    if R.ndim != 4 or R.shape[0] != q.shape[0] or R.shape[1] != c or R.shape[2] * R.shape[3] != l:
        raise DimensionError(f"RoI features must be [N, {c}, K, K] with K*K={l}, got {R.shape}")
    if P.shape != R.shape[1:]:
        raise DimensionError(f"positional embedding {P.shape} does not match RoI shape {R.shape[1:]}")


def iga_forward_batch(q, R, P, params, cache=None):
    """Geometry augmentation for queries ``q`` [N, C] and RoIs ``R`` [N, C, K, K]."""
    q = np.asarray(q, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    _check_iga_shapes(q, R, P, params)
    n, c = q.shape
    l = params.roi_cells
    r_flat = R.reshape(n, c, l)
    r_bar = (R + P).reshape(n, c, l)
    xa = _column_linear(params.w_a, r_bar)
    xb = _column_linear(params.w_b, r_bar)
    scores = np.matmul(np.swapaxes(xa, -1, -2), xb) / np.sqrt(c)
    A = softmax(scores, axis=-2)
    G = _column_linear(params.proj_g, A)
    w_geo = linear_forward(q, params.filter_gen).reshape(n, c, c)
    g_hat = np.matmul(w_geo, G)
    fused = (r_flat + g_hat).reshape(n, c * l)
    out = linear_forward(fused, params.out_proj)
    if cache is not None:
        cache.clear()
        cache.__dict__.update(
            q=q, R=R, r_bar=r_bar, xa=xa, xb=xb, A=A, G=G, w_geo=w_geo, fused=fused, params=params
        )
        cache.valid = True
    return out


def iga_forward(q, R, P, params, cache=None):
    """Single-query form: ``q`` [C], ``R`` and ``P`` [C, K, K] -> [C]."""
    q = np.asarray(q, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if q.ndim != 1 or R.ndim != 3:
        raise DimensionError(f"expected q [C] and R [C, K, K], got {q.shape} and {R.shape}")
    return iga_forward_batch(q[None], R[None], P, params, cache)[0]


@dataclass
class IgaGrads:
    q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    w_a: LinearLayer
    w_b: LinearLayer
    proj_g: LinearLayer
    filter_gen: LinearLayer
    out_proj: LinearLayer

    def named_arrays(self):
        out = {"q": self.q, "R": self.R, "P": self.P}
        for name in ("w_a", "w_b", "proj_g", "filter_gen", "out_proj"):
            layer = getattr(self, name)
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        return out


def iga_backward(probe, cache):
    """Gradients of ``sum(probe * out)`` for the forward call that filled ``cache``.

    ``probe`` matches the forward output: [C] after :func:`iga_forward`,
    [N, C] after :func:`iga_forward_batch`. Parameter gradients are summed
    over the batch; input gradients keep the input shapes.
    """
    if cache is None or not getattr(cache, "valid", False):
        raise UsageError("iga_backward needs a cache filled by a forward call")
    q, R, params = cache.q, cache.R, cache.params
    n, c = q.shape
    l = params.roi_cells
    probe = np.asarray(probe, dtype=np.float64)
    single = probe.ndim == 1
    g_out = probe.reshape(n, c) if single else probe
    if g_out.shape != (n, c):
        raise DimensionError(f"probe shape {probe.shape} does not match forward output")

    d_out_w = g_out.T @ cache.fused
    d_out_b = g_out.sum(axis=0)
    d_fused = (g_out @ params.out_proj.weight).reshape(n, c, l)

    d_r = d_fused.copy()
    d_w_geo = np.matmul(d_fused, np.swapaxes(cache.G, -1, -2))
    d_G = np.matmul(np.swapaxes(cache.w_geo, -1, -2), d_fused)

    d_filter_out = d_w_geo.reshape(n, c * c)
    d_filter_w = d_filter_out.T @ q
    d_filter_b = d_filter_out.sum(axis=0)
    d_q = d_filter_out @ params.filter_gen.weight

    A = cache.A
    d_proj_w = np.einsum("ncl,nml->cm", d_G, A)
    d_proj_b = d_G.sum(axis=(0, 2))
    d_A = np.matmul(params.proj_g.weight.T, d_G)

    d_scores = A * (d_A - (A * d_A).sum(axis=-2, keepdims=True))
    scale = 1.0 / np.sqrt(c)
    d_xa = np.matmul(cache.xb, np.swapaxes(d_scores, -1, -2)) * scale
    d_xb = np.matmul(cache.xa, d_scores) * scale

    r_bar = cache.r_bar
    d_wa_w = np.einsum("ncl,nml->cm", d_xa, r_bar)
    d_wa_b = d_xa.sum(axis=(0, 2))
    d_wb_w = np.einsum("ncl,nml->cm", d_xb, r_bar)
    d_wb_b = d_xb.sum(axis=(0, 2))
    d_rbar = np.matmul(params.w_a.weight.T, d_xa) + np.matmul(params.w_b.weight.T, d_xb)

    d_R = (d_r + d_rbar).reshape(R.shape)
    d_P = d_rbar.sum(axis=0).reshape(R.shape[1:])
    if single:
        d_q = d_q[0]
        d_R = d_R[0]
    return IgaGrads(
        q=d_q,
        R=d_R,
        P=d_P,
        w_a=LinearLayer(d_wa_w, d_wa_b),
        w_b=LinearLayer(d_wb_w, d_wb_b),
        proj_g=LinearLayer(d_proj_w, d_proj_b),
        filter_gen=LinearLayer(d_filter_w, d_filter_b),
        out_proj=LinearLayer(d_out_w, d_out_b),
    )


# ---------------------------------------------------------------- dynamic interaction


@dataclass(frozen=True)
class DynamicParams:
    filter_gen: LinearLayer  # d -> 2*d*d, two d x d channel-mixing filters
    out_proj: LinearLayer  # d*K*K -> d

    @classmethod
    def init(cls, rng, channels, roi_size):
        d, l = channels, roi_size * roi_size
        return cls(LinearLayer.init(rng, d, 2 * d * d), LinearLayer.init(rng, d * l, d))

    @property
    def channels(self):
        return self.filter_gen.in_features


def dynamic_interactive_batch(q, R, params):
    """Query-generated 1x1 filters applied twice to the RoI features, then flattened and projected."""
    q = np.asarray(q, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    d = params.channels
    if q.ndim != 2 or q.shape[1] != d or R.ndim != 4 or R.shape[:2] != (q.shape[0], d):
        raise DimensionError(f"expected q [N, {d}] and R [N, {d}, K, K], got {q.shape} and {R.shape}")
    n = q.shape[0]
    l = R.shape[2] * R.shape[3]
    if params.out_proj.in_features != d * l:
        raise DimensionError(f"RoI grid {R.shape[2:]} does not match output projection")
    filters = linear_forward(q, params.filter_gen).reshape(n, 2, d, d)
    x = R.reshape(n, d, l)
    h1 = relu(np.matmul(filters[:, 0], x))
    h2 = relu(np.matmul(filters[:, 1], h1))
    return linear_forward(h2.reshape(n, d * l), params.out_proj)


def dynamic_interactive(q, R, params):
    """Single-query form: ``q`` [d], ``R`` [d, K, K] -> [d]."""
    q = np.asarray(q, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if q.ndim != 1 or R.ndim != 3:
        raise DimensionError(f"expected q [d] and R [d, K, K], got {q.shape} and {R.shape}")
    return dynamic_interactive_batch(q[None], R[None], params)[0]


# ---------------------------------------------------------------- multi-group


def multigroup_apply(op, Q, rois, group_params):
    """Split channels into ``len(group_params)`` equal groups, run ``op`` per group, concatenate.

    ``op(Q_m, R_m, params_m)`` receives the group's query columns [N, d]
    and RoI channels [N, d, K, K].
    """
    Q = np.asarray(Q, dtype=np.float64)
    rois = np.asarray(rois, dtype=np.float64)
    m = len(group_params)
    if m < 1:
        raise ConfigError("need at least one group")
    c = Q.shape[-1]
    if c % m:
        raise ConfigError(f"channels {c} not divisible by {m} groups")
    if rois.shape[:2] != Q.shape:
        raise DimensionError(f"queries {Q.shape} and RoIs {rois.shape} disagree")
    d = c // m
    outs = [op(Q[:, g * d:(g + 1) * d], rois[:, g * d:(g + 1) * d], group_params[g]) for g in range(m)]
    return np.concatenate(outs, axis=-1)


# ---------------------------------------------------------------- stage


@dataclass
class QueryState:
    embeddings: np.ndarray  # [N, C]
    boxes: np.ndarray  # [N, 5]
    class_scores: np.ndarray  # [N, K_cls + 1] logits, last column background

    @property
    def num_queries(self):
        return self.embeddings.shape[0]

    def box(self, i):
        return rotgeom.RotatedBox.from_array(self.boxes[i])

    def probabilities(self):
        return softmax(self.class_scores, axis=-1)


@dataclass(frozen=True)
class StageParams:
    attn: AttentionParams
    dynamic: tuple  # DynamicParams per group
    iga: tuple  # IgaParams per group
    ffn_in: LinearLayer
    ffn_out: LinearLayer
    cls_head: LinearLayer
    box_head: LinearLayer

    @classmethod
    def init(cls, rng, cfg):
        c, d, k = cfg.channels, cfg.group_channels, cfg.roi_size
        hidden = cfg.ffn_hidden_mult * c
        return cls(
            attn=AttentionParams.init(rng, c),
            dynamic=tuple(DynamicParams.init(rng, d, k) for _ in range(cfg.groups)),
            iga=tuple(IgaParams.init(rng, d, k) for _ in range(cfg.groups)),
            ffn_in=LinearLayer.init(rng, c, hidden),
            ffn_out=LinearLayer.init(rng, hidden, c),
            cls_head=LinearLayer.init(rng, c, cfg.num_classes + 1),
            box_head=LinearLayer.init(rng, c, 5),
        )


@dataclass(frozen=True)
class DecoderParams:
    stages: tuple = field(default_factory=tuple)

    @classmethod
    def init(cls, cfg, seed):
        rng = make_rng(seed)
        return cls(tuple(StageParams.init(rng, cfg) for _ in range(cfg.stages)))


def feed_forward(x, ffn_in, ffn_out):
    return x + linear_forward(relu(linear_forward(x, ffn_in)), ffn_out)


def apply_box_deltas(boxes, deltas):
    """Offsets (dcx/w, dcy/h, dlog w, dlog h, dtheta) applied to [N, 5] boxes."""
    boxes = np.asarray(boxes, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    out = np.empty_like(boxes)
    out[:, 0] = boxes[:, 0] + d[:, 0] * boxes[:, 2]
    out[:, 1] = boxes[:, 1] + d[:, 1] * boxes[:, 3]
    out[:, 2] = boxes[:, 2] * np.exp(np.clip(d[:, 2], -DELTA_LOG_CLAMP, DELTA_LOG_CLAMP))
    out[:, 3] = boxes[:, 3] * np.exp(np.clip(d[:, 3], -DELTA_LOG_CLAMP, DELTA_LOG_CLAMP))
    out[:, 4] = rotgeom.normalize_angles(boxes[:, 4] + d[:, 4])
    np.maximum(out[:, 2:4], rotgeom.MIN_SIDE, out=out[:, 2:4])
    return out


def decoder_stage(state, features, params, cfg, backend=None):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[0] != cfg.channels:
        raise DimensionError(f"feature map must be [{cfg.channels}, H, W], got {features.shape}")
    if state.embeddings.shape[1] != cfg.channels:
        raise DimensionError(f"query width {state.embeddings.shape[1]} != {cfg.channels}")
    q = self_attention(state.embeddings, params.attn)
    rois = rotgeom.rotated_roi_align_batch(features, state.boxes, cfg.roi_size, cfg.sampling, backend)
    q = multigroup_apply(dynamic_interactive_batch, q, rois, params.dynamic)
    pe = sinusoidal_pe(cfg.roi_size, cfg.group_channels)
    q = multigroup_apply(partial(_iga_op, pe=pe), q, rois, params.iga)
    q = feed_forward(q, params.ffn_in, params.ffn_out)
    boxes = apply_box_deltas(state.boxes, linear_forward(q, params.box_head))
    scores = linear_forward(q, params.cls_head)
    return QueryState(embeddings=q, boxes=boxes, class_scores=scores)


def _iga_op(q, R, params, pe):
    return iga_forward_batch(q, R, pe, params)


def run_decoder(init, features, params, cfg, backend=None):
    """Run every stage; returns the per-stage snapshots."""
    if len(params.stages) < 1:
        raise ConfigError("decoder needs at least one stage")
    states = []
    state = init
    for stage_params in params.stages:
        state = decoder_stage(state, features, stage_params, cfg, backend)
        states.append(state)
    return states


# ---------------------------------------------------------------- checkpoints


def flatten_params(obj, prefix=""):
    """Map dotted module paths (``stages.0.iga.3.filter_gen.weight``) to arrays."""
    out = {}
    if isinstance(obj, np.ndarray):
        out[prefix] = obj
    elif is_dataclass(obj):
        for f in fields(obj):
            out.update(flatten_params(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (tuple, list)):
        for i, item in enumerate(obj):
            out.update(flatten_params(item, f"{prefix}.{i}" if prefix else str(i)))
    else:
        raise TypeError(f"cannot flatten {type(obj).__name__} at {prefix!r}")
    return out


def _rebuild(template, flat, prefix=""):
    if isinstance(template, np.ndarray):
        arr = np.asarray(flat[prefix], dtype=np.float64)
        if arr.shape != template.shape:
            raise DimensionError(f"checkpoint entry {prefix} has shape {arr.shape}, expected {template.shape}")
        return arr
    if is_dataclass(template):
        kwargs = {
            f.name: _rebuild(getattr(template, f.name), flat, f"{prefix}.{f.name}" if prefix else f.name)
            for f in fields(template)
        }
        return type(template)(**kwargs)
    return type(template)(
        _rebuild(item, flat, f"{prefix}.{i}" if prefix else str(i)) for i, item in enumerate(template)
    )


def save_params(path, params):
    np.savez(path, **flatten_params(params))


def load_params(path, cfg):
    """Load a checkpoint written by :func:`save_params` for the decoder described by ``cfg``."""
    template = DecoderParams.init(cfg, 0)
    with np.load(path) as data:
        flat = {k: data[k] for k in data.files}
    missing = set(flatten_params(template)) - set(flat)
    if missing:
        raise UsageError(f"checkpoint is missing {len(missing)} entries, e.g. {sorted(missing)[0]}")
    return _rebuild(template, flat)
