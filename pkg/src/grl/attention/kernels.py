"""Exact and anchored attention, with flop and allocation instrumentation."""

from __future__ import annotations

import math
from contextlib import contextmanager

from ..tensor import ops
from ..tensor.core import DimensionError, as_tensor

MEASURES = ("dot", "negative_sq_euclidean")

_counters = []
_trackers = []


class FlopCounter:
    """Counts attention multiply-adds and softmax elements while active.

    ``macs`` covers the similarity contractions and map-times-value products;
    ``softmax`` counts map elements pushed through a softmax (one exp each).
    """

    def __init__(self):
        self.macs = 0
        self.softmax = 0

    @property
    def total(self):
        return self.macs + self.softmax

    def __enter__(self):
        _counters.append(self)
        return self

    def __exit__(self, *exc):
        _counters.remove(self)
        return False


class AllocationTracker:
    """Records the element count of every attention intermediate while active."""

    def __init__(self):
        self.records = []

    @property
    def largest(self):
        return max((n for _, _, n in self.records), default=0)

    def __enter__(self):
        _trackers.append(self)
        return self

    def __exit__(self, *exc):
        _trackers.remove(self)
        return False


def _batch(shape):
    n = 1
    for s in shape[:-2]:
        n *= s
    return n


def _count(macs=0, softmax=0):
    for c in _counters:
        c.macs += macs
        c.softmax += softmax


def _track(tag, t):
    if _trackers:
        # per attention instance: exclude leading batch/head axes
        shape = t.shape[-2:]
        for tr in _trackers:
            tr.records.append((tag, shape, shape[0] * shape[1]))


def check_measure(measure):
    if measure not in MEASURES:
        raise ValueError(f"unknown similarity measure {measure!r}; expected one of {MEASURES}")


def similarity_logits(q, k, measure="dot"):
    """``n_q x n_k`` logits: ``q k^T / sqrt(d)`` or ``-||q_i - k_j||^2 / sqrt(d)``."""
    q, k = as_tensor(q), as_tensor(k)
    check_measure(measure)
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise DimensionError(f"similarity: feature dims differ, {q.shape} vs {k.shape}")
    scale = 1.0 / math.sqrt(d)
    qk = ops.matmul(q, ops.swap_last(k))
    _count(macs=_batch(qk.shape) * q.shape[-2] * k.shape[-2] * d)
    if measure == "dot":
        return ops.mul(qk, scale)
    qn = ops.sum(ops.mul(q, q), axis=-1, keepdims=True)
    kn = ops.swap_last(ops.sum(ops.mul(k, k), axis=-1, keepdims=True))
    return ops.mul(ops.sub(ops.sub(ops.mul(qk, 2.0), qn), kn), scale)


def attention_map(q, k, measure="dot", bias=None):
    logits = similarity_logits(q, k, measure)
    if bias is not None:
        logits = ops.add(logits, bias)
    _track("logits", logits)
    m = ops.softmax_rows(logits)
    _count(softmax=m.size)
    _track("map", m)
    return m


def _apply(m, v):
    out = ops.matmul(m, v)
    _count(macs=_batch(out.shape) * m.shape[-2] * m.shape[-1] * v.shape[-1])
    return out


def exact_attention(q, k, v, measure="dot", bias=None):
    """``softmax(sim(q, k) [+ bias]) @ v``; batched over leading axes."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"exact_attention: K has {k.shape[-2]} rows, V has {v.shape[-2]}")
    return _apply(attention_map(q, k, measure, bias), v)


def anchored_attention(q, k, v, a, measure="dot"):
    """Anchor-mediated attention ``M_e @ (M_d @ v)``, evaluated right to left.

    ``M_d = softmax(sim(a, k))`` distills the values into ``N_a`` anchor
    features; ``M_e = softmax(sim(q, a))`` expands them back to ``N`` rows.
    No ``N x N`` array is ever formed.
    """
    q, k, v, a = as_tensor(q), as_tensor(k), as_tensor(v), as_tensor(a)
    n, na = k.shape[-2], a.shape[-2]
    if na > n:
        raise ValueError(f"anchored_attention: {na} anchors for {n} tokens; anchors must not outnumber tokens")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"anchored_attention: K has {k.shape[-2]} rows, V has {v.shape[-2]}")
    m_d = attention_map(a, k, measure)
    z = _apply(m_d, v)
    _track("z", z)
    m_e = attention_map(q, a, measure)
    return _apply(m_e, z)


def anchored_maps(q, k, a, measure="dot"):
    """The two factor maps ``(M_e, M_d)`` as arrays."""
    with _quiet():
        m_d = attention_map(a, k, measure).data
        m_e = attention_map(q, a, measure).data
    return m_e, m_d


@contextmanager
def _quiet():
    saved_c, saved_t = _counters[:], _trackers[:]
    _counters.clear()
    _trackers.clear()
    try:
        yield
    finally:
        _counters[:] = saved_c
        _trackers[:] = saved_t
