"""Exact vs. anchored attention maps: correlation, rank, complexity, heatmaps."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .attention import FlopCounter, anchored_attention, anchored_maps, attention_map, exact_attention
from .attention.kernels import _quiet
from .fileio import atomic_write_bytes, atomic_write_text
from .tensor import Tensor
from .tensor.core import DimensionError

MAX_TOKENS = 4096
CSV_HEADER = ["n", "na", "d", "pearson", "rank_ok", "row_sum_err", "flops_exact", "flops_anchored"]


@dataclass
class AttentionDiagnostics:
    exact_map: np.ndarray
    approx_map: np.ndarray
    pearson: float
    rank_bound_ok: bool
    max_row_sum_err: float
    degenerate: bool
    n: int
    na: int
    d: int

    def csv_row(self):
        rep = complexity_report(self.n, self.na, self.d)
        p = "nan" if math.isnan(self.pearson) else f"{self.pearson:.10f}"
        return [self.n, self.na, self.d, p, int(self.rank_bound_ok), f"{self.max_row_sum_err:.3e}",
                rep.flops_exact, rep.flops_anchored]


@dataclass(frozen=True)
class ComplexityReport:
    n: int
    na: int
    d: int
    flops_exact: int
    flops_anchored: int
    mem_exact: int
    mem_anchored: int


def _arr(x):
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def pearson(a, b):
    """Sample Pearson correlation of the flattened inputs; NaN if either has zero variance."""
    a, b = _arr(a).ravel(), _arr(b).ravel()
    if a.size != b.size:
        raise DimensionError(f"pearson: {a.size} vs {b.size} elements")
    if a.size < 2:
        raise DimensionError("pearson needs at least two elements")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(np.dot(da, da)), math.sqrt(np.dot(db, db))
    if sa <= 1e-12 * max(np.abs(a).max(), 1e-300) or sb <= 1e-12 * max(np.abs(b).max(), 1e-300):
        return float("nan")
    return float(min(1.0, max(-1.0, np.dot(da, db) / (sa * sb))))


def singular_values(m):
    # LAPACK gesdd; deterministic for a fixed input and thread count
    return np.linalg.svd(_arr(m), compute_uv=False)


def rank_check(m, na, rel_tol=1e-6):
    """True iff ``sigma[na] / sigma[0] < rel_tol`` (numerical rank at most ``na``)."""
    m = _arr(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"rank_check expects a square map, got {m.shape}")
    s = singular_values(m)
    if na >= s.size or s[0] == 0.0:
        return True
    return bool(s[na] / s[0] < rel_tol)


def complexity_report(n, na, d):
    """Closed-form counts: multiply-adds plus one unit per softmaxed map element."""
    if min(n, na, d) < 1:
        raise ValueError("n, na and d must be positive")
    return ComplexityReport(
        n, na, d,
        flops_exact=2 * n * n * d + n * n,
        flops_anchored=4 * n * na * d + 2 * n * na,
        mem_exact=n * n,
        mem_anchored=2 * n * na,
    )


def random_qkva(n, na, d, seed=0, scale=1.0):
    """Gaussian ``q, k, v`` and anchors made by averaging ``k`` over contiguous token groups."""
    rng = np.random.default_rng(seed)
    q = scale * rng.standard_normal((n, d))
    k = scale * rng.standard_normal((n, d))
    v = rng.standard_normal((n, d))
    bounds = np.linspace(0, n, na + 1).round().astype(int)
    a = np.stack([k[bounds[i] : bounds[i + 1]].mean(axis=0) for i in range(na)])
    return q, k, v, a


def instrumented_counts(n, na, d, seed=0, dtype=np.float64):
    """Run both kernels once under a :class:`FlopCounter`; returns (exact, anchored) totals."""
    q, k, v, a = (x.astype(dtype) for x in random_qkva(n, na, d, seed))
    with FlopCounter() as ce:
        exact_attention(q, k, v)
    with FlopCounter() as ca:
        anchored_attention(q, k, v, a)
    return ce.total, ca.total


def attention_maps(q, k, a, measure="dot", rel_tol=1e-6):
    """Materialize the exact map and the anchored product ``M_e @ M_d`` and compare them."""
    q, k, a = _arr(q), _arr(k), _arr(a)
    n, d = q.shape
    na = a.shape[0]
    if max(n, k.shape[0]) > MAX_TOKENS:
        raise ValueError(
            f"{max(n, k.shape[0])} tokens exceeds the {MAX_TOKENS}-token materialization guard; "
            "subsample the tokens before calling attention_maps"
        )
    with _quiet():
        exact = attention_map(q, k, measure).data
    m_e, m_d = anchored_maps(q, k, a, measure)
    approx = m_e @ m_d
    p = pearson(exact, approx)
    err = max(np.abs(mm.sum(axis=-1) - 1.0).max() for mm in (exact, m_e, m_d, approx))
    return AttentionDiagnostics(
        exact_map=exact, approx_map=approx, pearson=p, rank_bound_ok=rank_check(approx, na, rel_tol),
        max_row_sum_err=float(err), degenerate=math.isnan(p), n=n, na=na, d=d,
    )


def diagnostics_csv(rows, path=None):
    """Render diagnostics as CSV text (and write it atomically if ``path`` is given)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.csv_row())
    text = buf.getvalue()
    if path is not None:
        atomic_write_text(path, text)
    return text


def heatmap_bytes(m):
    """8-bit min-max normalized PGM (P5); a constant map renders as mid-gray 128."""
    m = _arr(m)
    if m.ndim != 2:
        raise DimensionError(f"heatmap needs a 2-D map, got {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("heatmap: non-finite values")
    lo, hi = m.min(), m.max()
    if hi > lo:
        pix = np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pix = np.full(m.shape, 128, np.uint8)
    h, w = m.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def dump_heatmap(m, path):
    atomic_write_bytes(path, heatmap_bytes(m))


def read_pgm(path):
    """Parse a binary PGM; returns ``(pixels, maxval)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pix = np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    if pix.size != w * h:
        raise ValueError("truncated PGM")
    return pix.reshape(h, w), maxval


def model_attention_diagnostics(model, img):
    """Diagnostics for every (layer, stripe, head) anchored block of ``model`` on ``img``.

    Returns a list of ``(layer_index, AttentionDiagnostics)``.
    """
    from .attention import AttentionRecorder
    from .tensor import no_grad

    with no_grad(), AttentionRecorder() as rec:
        model(img)
    out = []
    for layer, blk in enumerate(rec.blocks):
        q, k, a = blk["q"], blk["k"], blk["a"]
        lead = q.shape[:-2]
        for idx in np.ndindex(*lead):
            out.append((layer, attention_maps(q[idx], k[idx], a[idx], blk["measure"])))
    return out
