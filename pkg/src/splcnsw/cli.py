"""Command-line front end and benchmark harness.

Every subcommand prints one JSON document on stdout, except ``bench`` which
can also write CSV.  Exit status is 0 on success, 1 when a pipeline fails
(a JSON error record goes to stderr) and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import core, market, oracle, rounding, stable

PIPELINES = ("exact", "market", "stable")
BENCH_VERSION = "splcnsw-bench v1"
BENCH_COLUMNS = (
    "instance",
    "seed",
    "n",
    "m",
    "K",
    "pipeline",
    "status",
    "nsw_product",
    "geometric_mean",
    "bound_kind",
    "bound_geometric_mean",
    "ratio_to_bound",
    "opt_geometric_mean",
    "ratio_to_opt",
    "error",
)


class UsageError(Exception):
    pass


def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


# -- pipelines --------------------------------------------------------------------


def _exact(inst, options):
    x, opt = oracle.solve_exact(inst, options.get("limit", oracle.DEFAULT_LIMIT))
    w = core.nsw(inst, x)
    return {"allocation": x, "welfare": w, "bound_kind": "exact", "bound_gm": w.geometric_mean, "normalized": inst}


def _market(inst, options):
    res = rounding.market_round(inst, phases=options.get("phases"))
    w = core.nsw(res.normalized, res.allocation)
    return {
        "allocation": res.allocation,
        "welfare": core.nsw(inst, res.allocation),
        "normalized_welfare": w,
        "bound_kind": "upper_bound",
        "bound_gm": res.bound.geometric_mean,
        "normalized": res.normalized,
        "prices": res.equilibrium.p,
        "flagged": res.flagged,
    }


def _stable(inst, options):
    sol = stable.solve_relaxation(inst, tol=options.get("tol", 1e-5), max_iter=options.get("max_iter", 500))
    trials, seed = options.get("trials", 1000), options.get("seed", 0)
    mean, se, best, _ = stable.best_sample(inst, sol.x, trials, seed)
    return {
        "allocation": best,
        "welfare": core.nsw(inst, best),
        "expected_product": mean,
        "stderr": se,
        "bound_kind": "relaxation",
        "bound_gm": math.exp(sol.value / inst.n),
        "normalized": inst,
        "relaxation_value": sol.value,
        "converged": sol.converged,
    }


_RUNNERS = {"exact": _exact, "market": _market, "stable": _stable}


def run_pipeline(instance, pipeline: str, options: dict | None = None, *, instance_id=None) -> dict:
    """Run one pipeline end to end and return a report record.

    ``instance`` is a path or an :class:`~splcnsw.core.Instance`.  The ratio
    compares the pipeline with the exact optimum on the same (normalized)
    instance when the oracle can solve it, and is ``None`` otherwise.
    """
    if pipeline not in _RUNNERS:
        raise UsageError(f"unknown pipeline {pipeline!r}; choose from {', '.join(PIPELINES)}")
    options = dict(options or {})
    if not isinstance(instance, core.Instance):
        instance_id = instance_id or Path(instance).stem
        instance = core.load_instance(instance)
    start = time.perf_counter()
    out = _RUNNERS[pipeline](instance, options)
    wall = time.perf_counter() - start
    norm = out["normalized"]
    mine = core.nsw(norm, out["allocation"]).geometric_mean
    opt_gm = None
    if oracle.search_space_size(instance) <= options.get("limit", oracle.DEFAULT_LIMIT):
        xo, _ = oracle.solve_exact(instance, options.get("limit", oracle.DEFAULT_LIMIT))
        opt_gm = core.nsw(norm, xo).geometric_mean
    ratio = mine / opt_gm if opt_gm else None
    bound = out["bound_gm"]
    return {
        "instance": instance_id,
        "pipeline": pipeline,
        "nsw_product": _num(out["welfare"].product),
        "geometric_mean": _num(out["welfare"].geometric_mean),
        "bound_kind": out["bound_kind"],
        "bound_geometric_mean": _num(bound),
        "ratio_to_bound": _num(mine / bound) if bound else None,
        "opt_geometric_mean": _num(opt_gm),
        "ratio": _num(ratio),
        "wall_time": wall,
        "seed": options.get("seed"),
        "parameters": {k: v for k, v in options.items() if k != "seed"},
        "allocation": out["allocation"].to_nested(),
    }


# -- bench --------------------------------------------------------------------------


def parse_sizes(text: str):
    sizes = []
    for cell in text.split(","):
        try:
            n, m = (int(v) for v in cell.lower().split("x"))
        except ValueError:
            raise UsageError(f"bad size cell {cell!r}; expected NxM") from None
        if n < 1 or m < 1:
            raise UsageError(f"bad size cell {cell!r}")
        sizes.append((n, m))
    return sizes


def bench_instances(seed: int, count: int, sizes, k_range=(1, 3)):
    """Deterministic instances: ``count`` per size cell, each with positive optimum."""
    out = []
    for c, (n, m) in enumerate(sizes):
        for t in range(count):
            ss = np.random.SeedSequence([seed, c, t])
            for attempt in range(100):
                sub = int(ss.generate_state(1, dtype=np.uint32)[0]) + attempt
                inst = core.generate(sub, n, m, k_range)
                if core.positive_welfare_possible(inst):
                    break
            out.append((f"{n}x{m}-{t}", sub, inst))
    return out


def _bench_rows(job):
    name, sub, inst, pipelines, options = job
    rows = []
    opt_gm = None
    if oracle.search_space_size(inst) <= options.get("limit", oracle.DEFAULT_LIMIT):
        xo, _ = oracle.solve_exact(inst, options.get("limit", oracle.DEFAULT_LIMIT))
        opt_gm = core.nsw(inst, xo).geometric_mean
    for pipe in pipelines:
        row = {"instance": name, "seed": sub, "n": inst.n, "m": inst.m, "K": inst.K, "pipeline": pipe}
        if pipe == "exact" and opt_gm is None:
            row.update(status="skipped", error=f"search space {oracle.search_space_size(inst)} over the oracle limit")
            rows.append(row)
            continue
        try:
            out = _RUNNERS[pipe](inst, dict(options, seed=sub))
            norm = out["normalized"]
            mine = core.nsw(norm, out["allocation"]).geometric_mean
            w = out["welfare"]
            row.update(status="ok", nsw_product=w.product, geometric_mean=w.geometric_mean,
                       bound_kind=out["bound_kind"], bound_geometric_mean=out["bound_gm"],
                       ratio_to_bound=mine / out["bound_gm"] if out["bound_gm"] else None)
            if opt_gm is not None:
                # the market ratio is taken on its normalized instance, where opt scales alike
                opt_here = opt_gm if norm is inst else core.nsw(norm, xo).geometric_mean
                row.update(opt_geometric_mean=opt_here, ratio_to_opt=mine / opt_here if opt_here else None)
        except Exception as exc:  # recorded per row, the run goes on
            row.update(status="error", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    return rows


def bench(seed: int, count: int, sizes, pipelines=PIPELINES, options=None, workers: int | None = None):
    """Rows of the benchmark, one per (instance, pipeline), in a fixed order."""
    options = dict(options or {})
    jobs = [(name, sub, inst, tuple(pipelines), options) for name, sub, inst in bench_instances(seed, count, sizes)]
    if workers is None:
        workers = thread_cap()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_bench_rows, jobs))
    else:
        chunks = [_bench_rows(j) for j in jobs]
    rows = [r for chunk in chunks for r in chunk]
    order = {p: k for k, p in enumerate(PIPELINES)}
    rows.sort(key=lambda r: (r["n"], r["m"], int(r["instance"].rsplit("-", 1)[1]), order[r["pipeline"]]))
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if not math.isfinite(v) else repr(v)
    return str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(f"# {BENCH_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in BENCH_COLUMNS])
    return buf.getvalue()


def thread_cap() -> int:
    raw = os.environ.get("NSW_SPLC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"NSW_SPLC_THREADS must be an integer, got {raw!r}") from None


# -- subcommands ----------------------------------------------------------------------


def _emit(doc, out=None):
    text = json.dumps(doc, indent=1, allow_nan=False) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)


def _equilibrium_doc(inst, eq, violations):
    return {
        "kind": "equilibrium",
        "p": eq.p.tolist(),
        "b": eq.b.tolist(),
        "x": eq.x.to_nested(),
        "base": [[bi[a].tolist() for bi in eq.base] for a in range(inst.n)],
        "extra": [[qi[a].tolist() for qi in eq.extra] for a in range(inst.n)],
        "delta": eq.delta,
        "eps_eq": eq.eps_eq(inst),
        "phases": eq.phases,
        "events": eq.iterations,
        "violations": [str(v) for v in violations],
    }


def cmd_gen(args):
    inst = core.generate(args.seed, args.n, args.m, (args.k_min, args.k_max), zero_prob=args.zero_prob)
    doc = core.instance_to_dict(inst)
    _emit(doc, args.out)


def cmd_validate(args):
    inst = core.load_instance(args.instance)  # raises InvalidInstance on bad data
    _emit({"valid": True, "n": inst.n, "m": inst.m, "k": list(inst.k),
           "positive_welfare_possible": core.positive_welfare_possible(inst)})


def cmd_solve_exact(args):
    inst = core.load_instance(args.instance)
    x, opt = oracle.solve_exact(inst, args.limit)
    w = core.nsw(inst, x)
    _emit({"kind": "allocation", "x": x.to_nested(), "nsw_product": opt, "geometric_mean": w.geometric_mean},
          args.out)


def cmd_market_eq(args):
    inst = core.load_instance(args.instance)
    trace = []
    eq = market.scaling_algorithm(inst, args.phases, trace=trace)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8", newline="\n") as fh:
            for rec in trace:
                fh.write(json.dumps(rec) + "\n")
    violations = market.verify_equilibrium(inst, eq.p, eq.x, eq.b, eq.spending, eq.eps_eq(inst))
    _emit(_equilibrium_doc(inst, eq, violations), args.out)
    return 1 if violations else 0


def cmd_market_round(args):
    inst = core.load_instance(args.instance)
    trace = [] if args.trace else None
    eq = market.scaling_algorithm(inst, args.phases, trace=trace)
    res = rounding.market_round(inst, eq)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8", newline="\n") as fh:
            for rec in trace:
                fh.write(json.dumps(rec) + "\n")
    w = core.nsw(res.normalized, res.allocation)
    _emit({
        "kind": "allocation",
        "x": res.allocation.to_nested(),
        "nsw": {"product": _num(core.nsw(inst, res.allocation).product),
                "geometric_mean": _num(core.nsw(inst, res.allocation).geometric_mean)},
        "upper_bound": {"product": _num(res.bound.product), "geometric_mean": _num(res.bound.geometric_mean)},
        "ratio": _num(w.geometric_mean / res.bound.geometric_mean),
        "flagged": res.flagged,
    }, args.out)


def cmd_stable_relax(args):
    inst = core.load_instance(args.instance)
    sol = stable.solve_relaxation(inst, tol=args.tol, max_iter=args.max_iter)
    _emit({"kind": "allocation", "x": sol.x.to_nested(), "value": sol.value, "bound_product": _num(math.exp(sol.value)),
           "alpha": sol.alpha.tolist(), "y": sol.y.tolist(), "z": sol.z.tolist(),
           "iterations": sol.iterations, "converged": sol.converged}, args.out)


def cmd_stable_round(args):
    inst = core.load_instance(args.instance)
    x = core.load_allocation(args.x)
    problems = core.check_feasible(inst, x)
    if problems:
        raise core.InvalidInstance(problems)
    mean, se, best, prod = stable.best_sample(inst, x, args.trials, args.seed)
    _emit({"kind": "allocation", "x": best.to_nested(), "mean_product": mean, "stderr": _num(se),
           "best_product": prod, "trials": args.trials, "seed": args.seed}, args.out)


def cmd_verify(args):
    inst = core.load_instance(args.instance)
    doc = core.load_report(args.result)
    if doc.get("kind") == "equilibrium":
        x = core.Allocation.from_nested(doc["x"])
        base = tuple(np.array([doc["base"][a][i] for a in range(inst.n)]) for i in range(inst.m))
        extra = tuple(np.array([doc["extra"][a][i] for a in range(inst.n)]) for i in range(inst.m))
        eps = args.eps if args.eps is not None else doc.get("eps_eq", core.EPS_NUM)
        v = market.verify_equilibrium(inst, doc["p"], x, doc["b"], (base, extra), eps)
        _emit({"ok": not v, "eps": eps, "violations": [
            {"condition": e.condition, "index": list(e.index), "magnitude": e.magnitude} for e in v]})
        return 0 if not v else 1
    if "x" not in doc:
        raise core.FormatError(f"{args.result}: neither an equilibrium nor an allocation")
    x = core.Allocation.from_nested(doc["x"])
    problems = core.check_feasible(inst, x)
    w = core.nsw(inst, x)
    _emit({"ok": not problems, "violations": problems, "integral": x.integral,
           "nsw_product": _num(w.product), "geometric_mean": _num(w.geometric_mean)})
    return 0 if not problems else 1


def cmd_bench(args):
    sizes = parse_sizes(args.sizes)
    pipelines = tuple(args.pipelines.split(",")) if args.pipelines else PIPELINES
    for p in pipelines:
        if p not in PIPELINES:
            raise UsageError(f"unknown pipeline {p!r}; choose from {', '.join(PIPELINES)}")
    rows = bench(args.seed, args.count, sizes, pipelines, {"trials": args.trials, "limit": args.limit})
    if args.format == "csv":
        text = rows_to_csv(rows)
    else:
        text = json.dumps({"version": BENCH_VERSION, "seed": args.seed, "rows": rows}, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)


def cmd_run(args):
    opts = {"seed": args.seed, "trials": args.trials}
    _emit(run_pipeline(args.instance, args.pipeline, opts))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splcnsw", description="Nash social welfare for SPLC utilities.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a random instance")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--k-min", type=int, default=1)
    p.add_argument("--k-max", type=int, default=3)
    p.add_argument("--zero-prob", type=float, default=0.0)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("validate", help="check an instance file")
    p.add_argument("instance")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("solve-exact", help="brute-force optimum")
    p.add_argument("instance")
    p.add_argument("--limit", type=int, default=oracle.DEFAULT_LIMIT)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_solve_exact)

    p = sub.add_parser("market-eq", help="spending-restricted equilibrium")
    p.add_argument("instance")
    p.add_argument("--phases", type=int)
    p.add_argument("--trace", help="write one JSON event record per line")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_market_eq)

    p = sub.add_parser("market-round", help="equilibrium plus rounding")
    p.add_argument("instance")
    p.add_argument("--phases", type=int)
    p.add_argument("--trace", help="write one JSON event record per line")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_market_round)

    p = sub.add_parser("stable-relax", help="solve the stable-polynomial relaxation")
    p.add_argument("instance")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_stable_relax)

    p = sub.add_parser("stable-round", help="independent-sampling rounding of a fractional x")
    p.add_argument("instance")
    p.add_argument("--x", required=True, help="allocation file, e.g. the output of stable-relax")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_stable_round)

    p = sub.add_parser("verify", help="check an equilibrium or allocation file")
    p.add_argument("instance")
    p.add_argument("result")
    p.add_argument("--eps", type=float)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("run", help="run one pipeline and print its report")
    p.add_argument("instance")
    p.add_argument("pipeline")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=1000)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="benchmark all pipelines on generated instances")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=3)
    p.add_argument("--sizes", default="2x2,3x3")
    p.add_argument("--pipelines", help="comma-separated subset of exact,market,stable")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--limit", type=int, default=oracle.DEFAULT_LIMIT, help="oracle state limit for the ratio columns")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    try:
        return int(args.func(args) or 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"error": "usage", "message": str(exc)}) + "\n")
        return 2
    except Exception as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
