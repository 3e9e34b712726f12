"""Window attention and anchored stripe attention over feature maps.

Public entry points take ``c x h x w`` (or ``b x c x h x w``) maps. The
``*_tokens`` variants work on ``(b, h*w, c)`` token tensors and are what the
transformer layer calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import ops
from ..tensor.core import DimensionError, Tensor, as_tensor
from .geometry import StripeSpec, WindowSpec, make_plan, relative_position_index, shift_mask
from .kernels import anchored_attention, check_measure, exact_attention


@dataclass(frozen=True)
class AnchorSpec:
    pool: str = "avg"
    down_factor: int = 4

    def __post_init__(self):
        if self.pool not in ("avg", "max"):
            raise ValueError(f"anchor pool must be avg or max, got {self.pool!r}")
        if self.down_factor < 1:
            raise ValueError("anchor down_factor must be >= 1")


def anchor_factors(group_shape, s):
    """Per-axis pooling factors ``(min(s, gh), min(s, gw))`` for a stripe."""
    gh, gw = group_shape
    fh, fw = min(s, gh), min(s, gw)
    if gh % fh or gw % fw:
        raise DimensionError(f"stripe {gh}x{gw} not divisible by anchor pooling {fh}x{fw}")
    return fh, fw


_recorders = []


class AttentionRecorder:
    """Collects per-block ``q, k, v, a`` arrays from stripe attention while active."""

    def __init__(self):
        self.blocks = []

    def __enter__(self):
        _recorders.append(self)
        return self

    def __exit__(self, *exc):
        _recorders.remove(self)
        return False


def _split_heads(t, heads):
    # (..., n, c) -> (..., heads, n, c/heads)
    *lead, n, c = t.shape
    t = ops.reshape(t, tuple(lead) + (n, heads, c // heads))
    k = len(lead)
    return ops.transpose(t, tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(t):
    *lead, heads, n, hd = t.shape
    k = len(lead)
    t = ops.transpose(t, tuple(range(k)) + (k + 1, k, k + 2))
    return ops.reshape(t, tuple(lead) + (n, heads * hd))


def _qkv(tokens, w, b, heads):
    c = w.shape[0]
    qkv = ops.linear(tokens, w, b)
    q = _split_heads(ops.getitem(qkv, (Ellipsis, slice(0, c))), heads)
    k = _split_heads(ops.getitem(qkv, (Ellipsis, slice(c, 2 * c))), heads)
    v = _split_heads(ops.getitem(qkv, (Ellipsis, slice(2 * c, 3 * c))), heads)
    return q, k, v


def _check_heads(c, heads):
    if heads < 1 or c % heads:
        raise ValueError(f"{heads} heads do not divide {c} channels")


def _to_tokens(fmap):
    fmap = as_tensor(fmap)
    single = fmap.ndim == 3
    x = fmap.data[None] if single else fmap.data
    if x.ndim != 4:
        raise DimensionError(f"expected c x h x w or b x c x h x w, got {fmap.shape}")
    t = ops.reshape(fmap, (x.shape[0], x.shape[1], -1))
    return ops.swap_last(t), x.shape, single


def _from_tokens(tokens, shape, single):
    b, c, h, w = shape
    out = ops.reshape(ops.swap_last(tokens), (b, c, h, w))
    return ops.reshape(out, (c, h, w)) if single else out


# window attention


def window_attention_tokens(x, h, w, spec, heads, params):
    """Multi-head exact attention inside (shifted) windows; no output projection."""
    c = x.shape[-1]
    _check_heads(c, heads)
    plan = make_plan(h, w, spec)
    b, g, n = x.shape[0], plan.n_groups, plan.group_size
    groups = ops.take(x, plan.gather_idx, axis=1)  # (b, g, n, c)
    q, k, v = _qkv(groups, params["w_qkv"], params["b_qkv"], heads)  # (b, g, heads, n, hd)
    table = params["rel_bias"]
    bias = ops.take(table, relative_position_index(spec.size), axis=0)  # (n, n, heads)
    bias = ops.transpose(bias, (2, 0, 1))  # (heads, n, n)
    if spec.shift:
        mask = shift_mask(plan, dtype=x.dtype)[:, None]  # (g, 1, n, n)
        bias = ops.add(bias, Tensor._wrap(mask))
    y = exact_attention(q, k, v, "dot", bias)
    y = ops.reshape(_merge_heads(y), (b, g * n, c))
    return ops.take(y, plan.merge_idx, axis=1)


def window_attention(fmap, spec, heads, params):
    x, shape, single = _to_tokens(fmap)
    y = window_attention_tokens(x, shape[2], shape[3], spec, heads, params)
    return _from_tokens(y, shape, single)


# anchors


def _anchors_from_groups(groups, group_shape, factors, pool, w, b):
    # groups: (..., n, c) laid out row-major over group_shape
    *lead, n, c = groups.shape
    gh, gw = group_shape
    fh, fw = factors
    grid = ops.reshape(groups, tuple(lead) + (gh, gw, c))
    pooled = ops.pool2d(grid, (fh, fw), pool, axes=(-3, -2))
    pooled = ops.reshape(pooled, tuple(lead) + ((gh // fh) * (gw // fw), c))
    return ops.linear(pooled, w, b)


def compute_anchors(x, spec, w, b=None):
    """Pool a ``c x h_s x w_s`` stripe by ``spec.down_factor`` and project to ``N_a x c`` anchors."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"compute_anchors expects c x h x w, got {x.shape}")
    c, hs, ws = x.shape
    factors = anchor_factors((hs, ws), spec.down_factor)
    tokens = ops.swap_last(ops.reshape(x, (c, hs * ws)))
    return _anchors_from_groups(tokens, (hs, ws), factors, spec.pool, w, b)


# anchored stripe attention


def stripe_attention_tokens(x, h, w, stripe, anchor, heads, measure, params):
    """Anchored attention inside stripes of a ``(b, h*w, c)`` token map."""
    check_measure(measure)
    c = x.shape[-1]
    _check_heads(c, heads)
    s = anchor.down_factor
    long_multiple = s
    plan = make_plan(h, w, stripe, long_multiple)
    gshape = plan.group_shape
    factors = anchor_factors(gshape, s)
    n_anchor = (gshape[0] // factors[0]) * (gshape[1] // factors[1])
    if n_anchor < heads:
        raise ValueError(f"{n_anchor} anchors per stripe is fewer than {heads} heads")
    b, g, n = x.shape[0], plan.n_groups, plan.group_size
    groups = ops.take(x, plan.gather_idx, axis=1)  # (b, g, n, c)
    q, k, v = _qkv(groups, params["w_qkv"], params["b_qkv"], heads)
    a = _anchors_from_groups(groups, gshape, factors, anchor.pool, params["w_anchor"], params["b_anchor"])
    a = _split_heads(a, heads)
    if _recorders:
        for rec in _recorders:
            rec.blocks.append(
                {"q": q.data.copy(), "k": k.data.copy(), "v": v.data.copy(), "a": a.data.copy(),
                 "stripe": stripe, "measure": measure}
            )
    y = anchored_attention(q, k, v, a, measure)
    y = ops.reshape(_merge_heads(y), (b, g * n, c))
    y = ops.take(y, plan.merge_idx, axis=1)
    return ops.linear(y, params["w_out"], params["b_out"])


def anchored_stripe_attention(fmap, stripe, anchor, heads, measure, params):
    x, shape, single = _to_tokens(fmap)
    y = stripe_attention_tokens(x, shape[2], shape[3], stripe, anchor, heads, measure, params)
    return _from_tokens(y, shape, single)


STRIPE_SCHEDULE = ("horizontal", "vertical", "horizontal", "vertical")


def stripe_for_layer(base, layer_index):
    """Cycle H, V, shifted H, shifted V by layer index."""
    mode = layer_index % 4
    shift = base.width // 2 if mode >= 2 else 0
    return StripeSpec(STRIPE_SCHEDULE[mode], base.width, shift)


def window_for_layer(base, layer_index):
    """Alternate unshifted / half-shifted windows by layer index."""
    return WindowSpec(base.size, base.size // 2 if layer_index % 2 else 0)


def init_window_params(rng, c, size, heads, dtype=np.float32, std=0.02):
    from ..init import trunc_normal

    return {
        "w_qkv": trunc_normal(rng, (c, 3 * c), std, dtype),
        "b_qkv": np.zeros(3 * c, dtype),
        "rel_bias": trunc_normal(rng, ((2 * size - 1) ** 2, heads), std, dtype),
    }


def init_stripe_params(rng, c, dtype=np.float32, std=0.02):
    from ..init import trunc_normal

    return {
        "w_qkv": trunc_normal(rng, (c, 3 * c), std, dtype),
        "b_qkv": np.zeros(3 * c, dtype),
        "w_anchor": trunc_normal(rng, (c, c), std, dtype),
        "b_anchor": np.zeros(c, dtype),
        "w_out": trunc_normal(rng, (c, c), std, dtype),
        "b_out": np.zeros(c, dtype),
    }
