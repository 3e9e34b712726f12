"""Batch command-line front end.

Exit codes: 0 success, 2 usage error, 3 numeric failure (divergence).
``GRL_THREADS`` caps numba and BLAS threads; results do not depend on it.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import statistics
import sys
import time

import numpy as np

EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


def _limit_threads():
    n = os.environ.get("GRL_THREADS")
    if not n:
        return
    from ._accel import set_threads

    set_threads(int(n))
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(int(n))
    except ImportError:  # pragma: no cover
        pass


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _emit(text, out):
    from .fileio import atomic_write_text

    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


# bench

BENCH_HEADER = ["n", "na", "d", "flops_exact", "flops_anchored", "wall_exact_ms", "wall_anchored_ms"]


def _median_ms(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench_row(n, na, d, repeats=3, seed=0):
    from .attention import anchored_attention, exact_attention
    from .oracle import complexity_report, instrumented_counts, random_qkva
    from .tensor import no_grad

    rep = complexity_report(n, na, d)
    fe, fa = instrumented_counts(min(n, 512), min(na, 512), d, seed)  # counter sanity on a small instance
    ce = complexity_report(min(n, 512), min(na, 512), d)
    if (fe, fa) != (ce.flops_exact, ce.flops_anchored):
        raise RuntimeError("flop counter disagrees with closed form")
    q, k, v, a = (x.astype(np.float32) for x in random_qkva(n, na, d, seed))
    with no_grad():
        we = _median_ms(lambda: exact_attention(q, k, v), repeats)
        wa = _median_ms(lambda: anchored_attention(q, k, v, a), repeats)
    return [n, na, d, rep.flops_exact, rep.flops_anchored, f"{we:.3f}", f"{wa:.3f}"]


def cmd_bench(args):
    if args.repeats < 1 or args.d < 1 or not (args.n >= args.na >= 1):
        raise UsageError("need n >= na >= 1, d >= 1 and repeats >= 1")
    row = bench_row(args.n, args.na, args.d, args.repeats, args.seed)
    _emit(_csv_text(BENCH_HEADER, [row]), args.out)
    return 0


# oracle


def cmd_oracle(args):
    from .oracle import attention_maps, diagnostics_csv, dump_heatmap, random_qkva

    if args.d < 1 or not (args.n >= args.na >= 1):
        raise UsageError("need n >= na >= 1 and d >= 1")
    q, k, _, a = random_qkva(args.n, args.na, args.d, args.seed, args.scale)
    if args.degenerate:
        q = np.ones_like(q)
        k = np.ones_like(k)
        a = np.ones_like(a)
    diag = attention_maps(q, k, a, args.measure)
    sys.stdout.write(diagnostics_csv([diag]))
    if diag.degenerate:
        sys.stderr.write("pearson=nan,flag=degenerate\n")
    if args.heatmap_dir:
        dump_heatmap(diag.exact_map, os.path.join(args.heatmap_dir, "exact.pgm"))
        dump_heatmap(diag.approx_map, os.path.join(args.heatmap_dir, "approx.pgm"))
    return 0


# train / eval


def cmd_train(args):
    from .model import GRL
    from .train import load_run_config, train

    if not os.path.isfile(args.config):
        raise UsageError(f"config file not found: {args.config}")
    try:
        mcfg, tcfg = load_run_config(args.config)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    if args.iters is not None:
        tcfg = tcfg.__class__.from_dict({**tcfg.to_dict(), "iters": args.iters})
    model = GRL(mcfg, seed=args.init_seed if args.init_seed is not None else tcfg.seed)
    res = train(model, tcfg, out_dir=args.out)
    print(json.dumps({"best_psnr": res.best_psnr, "best_iter": res.best_iter, "input_psnr": res.input_psnr,
                      "final_psnr": res.final_psnr}))
    return 0


def cmd_eval(args):
    from .model import load_checkpoint
    from .train import TrainConfig, evaluate_model

    if not os.path.isfile(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model, meta = load_checkpoint(args.checkpoint)
    tcfg = TrainConfig.from_dict(meta.get("train", {"task": model.cfg.task}))
    if args.task and args.task != model.cfg.task:
        raise UsageError(f"checkpoint was trained for {model.cfg.task!r}, not {args.task!r}")
    if args.n is not None and args.n < 1:
        raise UsageError("--n must be positive")
    rep = evaluate_model(model, tcfg, args.n, args.seed)
    print(json.dumps(rep))
    return 0


# dump-attn


def cmd_dump_attn(args):
    from .model import load_checkpoint
    from .oracle import diagnostics_csv, dump_heatmap, model_attention_diagnostics
    from .train import TrainConfig, eval_set

    if not os.path.isfile(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model, meta = load_checkpoint(args.checkpoint)
    tcfg = TrainConfig.from_dict(meta.get("train", {"task": model.cfg.task}))
    x, _ = eval_set(tcfg, 1, args.seed)
    diags = model_attention_diagnostics(model, x)
    first = {}
    for layer, dg in diags:
        first.setdefault(layer, dg)
    for layer, dg in first.items():
        dump_heatmap(dg.exact_map, os.path.join(args.out_dir, f"layer{layer}_exact.pgm"))
        dump_heatmap(dg.approx_map, os.path.join(args.out_dir, f"layer{layer}_approx.pgm"))
    diagnostics_csv([dg for _, dg in diags], os.path.join(args.out_dir, "diagnostics.csv"))
    ps = [dg.pearson for _, dg in diags if not dg.degenerate]
    print(json.dumps({"blocks": len(diags), "pearson_mean": float(np.mean(ps)) if ps else math.nan,
                      "pearson_min": float(np.min(ps)) if ps else math.nan}))
    return 0


# ablate

ABLATIONS = {
    "measure": [("dot", {"measure": "dot"}), ("negative_sq_euclidean", {"measure": "negative_sq_euclidean"})],
    "anchor-proj": [("avg+linear", {"anchor": "avg"}), ("max+linear", {"anchor": "max"})],
}
ABLATE_HEADER = ["option", "psnr", "params"]


def run_ablation(axis, mcfg, tcfg):
    from .attention import AnchorSpec
    from .model import GRL
    from .train import train

    rows = []
    for label, change in ABLATIONS[axis]:
        if "anchor" in change:
            cfg = mcfg.replace(anchor=AnchorSpec(change["anchor"], mcfg.anchor.down_factor))
        else:
            cfg = mcfg.replace(measure=change["measure"])
        model = GRL(cfg, seed=tcfg.seed)
        res = train(model, tcfg)
        rows.append([label, f"{res.final_psnr:.9f}", model.num_parameters()])
    return rows


def cmd_ablate(args):
    from .model import GRLConfig
    from .train import TrainConfig, load_run_config

    if args.config:
        if not os.path.isfile(args.config):
            raise UsageError(f"config file not found: {args.config}")
        mcfg, tcfg = load_run_config(args.config)
    else:
        mcfg, tcfg = GRLConfig(), TrainConfig()
    if args.iters is not None:
        tcfg = TrainConfig.from_dict({**tcfg.to_dict(), "iters": args.iters})
    rows = run_ablation(args.axis, mcfg, tcfg)
    _emit(_csv_text(ABLATE_HEADER, rows), args.out)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="grl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("bench", help="exact vs anchored attention: counted flops and wall time")
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--na", type=int, required=True)
    b.add_argument("--d", type=int, default=32)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    o = sub.add_parser("oracle", help="exact vs anchored attention-map diagnostics")
    o.add_argument("--n", type=int, default=64)
    o.add_argument("--na", type=int, default=8)
    o.add_argument("--d", type=int, default=8)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--scale", type=float, default=1.0, help="std of the random queries and keys")
    o.add_argument("--measure", choices=["dot", "negative_sq_euclidean"], default="dot")
    o.add_argument("--degenerate", action="store_true", help="use constant queries/keys")
    o.add_argument("--heatmap-dir")
    o.set_defaults(func=cmd_oracle)

    t = sub.add_parser("train", help="train GRL-micro from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int)
    t.add_argument("--init-seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="held-out PSNR of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--seed", type=int, help="eval seed (default: the one used during training)")
    e.add_argument("--n", type=int, help="patch count (default: the one used during training)")
    e.add_argument("--task")
    e.set_defaults(func=cmd_eval)

    dmp = sub.add_parser("dump-attn", help="heatmaps and diagnostics of a checkpoint's stripe attention")
    dmp.add_argument("--checkpoint", required=True)
    dmp.add_argument("--out-dir", required=True)
    dmp.add_argument("--seed", type=int, default=0)
    dmp.set_defaults(func=cmd_dump_attn)

    a = sub.add_parser("ablate", help="train once per option of an ablation axis")
    a.add_argument("--axis", choices=sorted(ABLATIONS), required=True)
    a.add_argument("--out")
    a.add_argument("--config")
    a.add_argument("--iters", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _limit_threads()
    from .tensor.core import NumericError

    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"grl {args.command}: {exc}\n")
        return EXIT_USAGE
    except NumericError as exc:
        sys.stderr.write(f"grl {args.command}: numeric failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
