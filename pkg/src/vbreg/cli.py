"""Command-line front end: simulate, fit, select-k, compare.

Exit codes: 0 success, 1 engine or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import chlrm, data, diagnostics, lrm

log = logging.getLogger("vbreg")

USAGE_ERROR = 2
ENGINE_ERROR = 1


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def read_config(path) -> dict:
    """Flat ``key = value`` file; '#' starts a comment. Keys may use '-' or '_'."""
    out = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def parse_k_range(text: str) -> list[int]:
    try:
        if ":" in text:
            lo, hi = (int(s) for s in text.split(":"))
            ks = list(range(lo, hi + 1))
        else:
            ks = [int(s) for s in text.split(",")]
    except ValueError:
        raise UsageError(f"bad K range {text!r}; use lo:hi or a comma list") from None
    if not ks or min(ks) < 1:
        raise UsageError(f"K range {text!r} must contain integers >= 1")
    return ks


def resolve_data(spec: str, schema: str | None) -> data.GroupedDataset:
    if spec in data.BUNDLED or spec in data.EXTERNAL:
        path, default_schema = data.named_dataset(spec)
        return data.load_csv(path, data.DatasetSchema.parse(schema or default_schema))
    if schema is None:
        raise UsageError("--schema is required for CSV input, e.g. 'y ~ x1 + x2 | group'")
    return data.load_csv(spec, data.DatasetSchema.parse(schema))


def write_trace(path: Path, values) -> None:
    with open(path, "w") as fh:
        fh.write("iteration\tvalue\n")
        for i, v in enumerate(values):
            fh.write(f"{i}\t{v!r}\n")


def write_matrix(path: Path, mat, labels) -> None:
    with open(path, "w") as fh:
        fh.write("," + ",".join(labels) + "\n")
        for lab, row in zip(labels, mat):
            fh.write(lab + "," + ",".join(f"{v:.6f}" for v in row) + "\n")


def format_table(rows: list[dict], cols: list[str]) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.3f}"
        return "" if v is None else str(v)

    cells = [[fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _spec_from_args(args) -> data.SimulationSpec:
    name = args.spec
    if name == "bench-chlrm":
        return data.bench_chlrm_spec(args.seed)
    if name.startswith("bench-lrm-"):
        try:
            _, _, n, p = name.split("-")
            return data.bench_lrm_spec(int(n), int(p), args.seed)
        except ValueError:
            raise UsageError(f"expected bench-lrm-<n>-<p>, got {name!r}") from None
    if not os.path.exists(name):
        raise UsageError(f"unknown spec {name!r}: not a named scenario or a file")
    kv = read_config(name)
    try:
        beta = [[float(x) for x in row.split(",")] for row in kv["beta"].split(";")]
        sig = [float(x) for x in kv["sigma_sq"].split(",")]
        omega = [float(x) for x in kv["omega"].split(",")] if "omega" in kv else None
        return data.SimulationSpec(kv.get("model", "chlrm"), beta, sig, m=int(kv.get("m", 1)),
                                   n_j=int(kv.get("n_j", 100)), omega=omega,
                                   seed=int(kv.get("seed", args.seed)))
    except KeyError as e:
        raise UsageError(f"spec file misses key {e}") from None


def cmd_simulate(args) -> int:
    try:
        spec = _spec_from_args(args)
    except data.DataError as e:
        raise UsageError(str(e)) from None
    ds, truth = data.simulate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.save_csv(ds, out / "data.csv")
    (out / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    print(f"wrote {ds.N} rows in {ds.m} groups to {out / 'data.csv'}")
    print(f"schema: {data.schema_for(ds)}")
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _validate_fit(args):
    if args.model == "lrm" and args.method == "svi":
        raise UsageError("SVI is only defined for the chlrm model")
    if args.samples <= args.burn_in:
        raise UsageError("--samples must exceed --burn-in")
    if args.method == "svi" and not 0.5 < args.chi <= 1.0:
        raise UsageError(f"--chi must lie in (0.5, 1], got {args.chi}")
    if args.k is not None and args.k < 1:
        raise UsageError("--k must be at least 1")


def _settings(args) -> str:
    if args.method == "mcmc":
        return f"samples={args.samples} burn_in={args.burn_in} thin={args.thin}"
    if args.method == "vi":
        return f"tol={args.tol:g} restarts={args.restarts}"
    return f"minibatch={args.minibatch} chi={args.chi:g} tau={args.tau:g} iters={args.max_iter}"


def run_fit(args, ds: data.GroupedDataset):
    """Run one engine; returns (report, saved object, trace, extra outputs)."""
    t0 = time.perf_counter()
    extra = {}
    if args.model == "lrm":
        d = ds.single_group() if ds.m > 1 else ds
        prior = lrm.zellner_prior(d) if args.prior == "zellner" else lrm.unit_info_prior(d)
        if args.method == "mcmc":
            obj = lrm.lrm_gibbs(d, prior, args.samples, args.burn_in, args.thin, args.seed)
            runtime = time.perf_counter() - t0
            draws, trace = obj, obj.log_joint
        else:
            obj = lrm.lrm_cavi(d, prior, args.max_iter, args.tol)
            runtime = time.perf_counter() - t0
            draws, trace = lrm.lrm_sample_variational(obj, args.draws, args.seed), obj.elbo_trace
            extra["elbo"] = obj.elbo_trace[-1]
            extra["iterations"] = len(obj.elbo_trace)
        report = diagnostics.evaluate("lrm", draws, d, args.method, runtime, args.draws, args.reps,
                                      args.seed, settings=_settings(args), **extra)
        return report, obj, trace, {}

    K = args.k or 3
    prior = chlrm.chlrm_default_prior(ds, K)
    if args.method == "mcmc":
        obj = chlrm.chlrm_gibbs(ds, prior, args.samples, args.burn_in, args.thin, args.seed)
        runtime = time.perf_counter() - t0
        draws, trace = obj, obj.log_joint
    elif args.method == "vi":
        obj = chlrm.chlrm_cavi(ds, prior, args.max_iter, args.tol, args.restarts, args.seed)
        runtime = time.perf_counter() - t0
        draws, trace = chlrm.chlrm_sample_variational(obj, args.draws, args.seed), obj.elbo_trace
    else:
        cfg = chlrm.SviConfig(args.minibatch or ds.m, args.tau, args.chi, args.max_iter, args.seed)
        try:
            cfg.validate(ds.m)
        except ValueError as e:
            raise UsageError(str(e)) from None
        obj = chlrm.chlrm_svi(ds, prior, cfg)
        runtime = time.perf_counter() - t0
        draws, trace = chlrm.chlrm_sample_variational(obj, args.draws, args.seed), obj.elbo_trace
    if args.method != "mcmc":
        extra["elbo"] = obj.elbo_trace[-1]
        extra["iterations"] = obj.n_iter
    report = diagnostics.evaluate("chlrm", draws, ds, args.method, runtime, args.draws, args.reps,
                                  args.seed, settings=_settings(args), **extra)
    if args.method != "mcmc":
        report.cocluster = diagnostics.cocluster_matrix(obj.rho)
    return report, obj, trace, {"draws": draws}


def cmd_fit(args) -> int:
    _validate_fit(args)
    ds = resolve_data(args.data, args.schema)
    report, obj, trace, _ = run_fit(args, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.save_draws(out / ("draws.bin" if args.method == "mcmc" else "state.bin"), obj)
    (out / "report.json").write_text(json.dumps(report.flat(), indent=1, sort_keys=True) + "\n")
    write_trace(out / "trace.txt", trace)
    if report.cocluster is not None:
        write_matrix(out / "cocluster.csv", report.cocluster, ds.labels)
    if report.k_posterior is not None:
        with open(out / "kappa.csv", "w") as fh:
            fh.write("kappa,probability\n")
            for i, v in enumerate(report.k_posterior):
                fh.write(f"{i},{v:.6f}\n")
    print(format_table([report.flat()], ["model", "method", "settings", "waic", "dic", "mse", "r2", "runtime_sec"]))
    if report.ppp:
        print()
        print(format_table([report.ppp], list(report.ppp)))
    return 0


# ---------------------------------------------------------------------------
# select-k
# ---------------------------------------------------------------------------

def cmd_select_k(args) -> int:
    ks = parse_k_range(args.k_range)
    ds = resolve_data(args.data, args.schema)
    base = chlrm.chlrm_default_prior(ds, 1)
    rows = []
    for K in ks:
        pr = base.with_K(K)
        if args.method == "svi":
            cfg = chlrm.SviConfig(args.minibatch or ds.m, args.tau, args.chi, args.max_iter, args.seed)
            st = chlrm.chlrm_svi(ds, pr, cfg, restarts=args.restarts)
        else:
            st = chlrm.chlrm_cavi(ds, pr, args.max_iter, args.tol, args.restarts, args.seed)
        rows.append({"K": K, "elbo": st.elbo_trace[-1],
                     "occupied": int(np.unique(chlrm.hard_partition(st)).size)})
    best = max(rows, key=lambda r: r["elbo"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "elbo_by_k.csv", "w") as fh:
        fh.write("K,elbo,occupied\n")
        for r in rows:
            fh.write(f"{r['K']},{r['elbo']!r},{r['occupied']}\n")
    print(format_table(rows, ["K", "elbo", "occupied"]))
    print(f"\nELBO maximised at K = {best['K']}")
    if args.mcmc:
        K = max(ks)
        dr = chlrm.chlrm_gibbs(ds, base.with_K(K), args.samples, args.burn_in, args.thin, args.seed,
                               trace=False)
        kp = diagnostics.k_posterior(dr.gamma, K)
        with open(out / "kappa.csv", "w") as fh:
            fh.write("kappa,probability\n")
            for i, v in enumerate(kp):
                fh.write(f"{i},{v:.6f}\n")
        print(f"posterior mode of nonempty clusters with K = {K}: {int(np.argmax(kp))}")
    return 0


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

COMPARE_COLS = ["method", "settings", "waic", "dic", "mse", "r2", "runtime_sec"]


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        raise UsageError("compare needs at least two reports")
    reports = []
    for p in args.reports:
        try:
            reports.append(json.loads(Path(p).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read report {p}: {e}") from None
    datasets = {r.get("dataset") for r in reports}
    if len(datasets) > 1:
        print("WARNING: reports come from different datasets; rows are not comparable")
        print()
    print(format_table(reports, COMPARE_COLS))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(",".join(COMPARE_COLS) + "\n")
            for r in reports:
                fh.write(",".join(str(r.get(c, "")) for c in COMPARE_COLS) + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="flat key = value file; command-line flags take precedence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("-v", "--verbose", action="store_true")


def _engine(p):
    p.add_argument("--data", required=True, help="CSV path, bundled name (iris) or farms (path from $FARMS_CSV)")
    p.add_argument("--schema", help="formula 'response ~ x1 + x2 | group'")
    p.add_argument("--samples", type=int, default=11000)
    p.add_argument("--burn-in", type=int, default=None)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--minibatch", type=int, default=None)
    p.add_argument("--chi", type=float, default=0.7)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--restarts", type=int, default=5)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vbreg", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a dataset")
    _common(p)
    p.add_argument("--spec", required=True, help="bench-chlrm, bench-lrm-<n>-<p>, or a key = value spec file")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one model with one method")
    _common(p)
    _engine(p)
    p.add_argument("--model", choices=["lrm", "chlrm"], required=True)
    p.add_argument("--method", choices=["mcmc", "vi", "svi"], required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--prior", choices=["unit", "zellner"], default="unit")
    p.add_argument("--draws", type=int, default=1000, help="draws used for the criteria")
    p.add_argument("--reps", type=int, default=1000, help="ppp replications (0 disables)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select-k", help="ELBO as a function of K")
    _common(p)
    _engine(p)
    p.add_argument("--k-range", required=True, help="lo:hi or comma list")
    p.add_argument("--method", choices=["vi", "svi"], default="vi")
    p.add_argument("--mcmc", action="store_true", help="also run MCMC at the largest K and report kappa")
    p.set_defaults(func=cmd_select_k)

    p = sub.add_parser("compare", help="tabulate several report.json files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", default=None, help="optional CSV copy of the table")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_compare)
    return ap


def parse_args(argv=None) -> argparse.Namespace:
    argv = sys.argv[1:] if argv is None else list(argv)
    ap = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    choices = ap._subparsers._group_actions[0].choices
    if known.config and known.command in choices:
        try:
            cfg = read_config(known.config)
        except OSError as e:
            ap.error(f"cannot read config: {e}")
        sub = choices[known.command]
        actions = {a.dest: a for a in sub._actions}
        typed = {}
        for k, v in cfg.items():
            if k not in actions or k in ("config", "help"):
                raise UsageError(f"unknown config key {k!r}")
            act = actions[k]
            if act.nargs == 0:
                typed[k] = v.lower() in ("1", "true", "yes")
            else:
                typed[k] = act.type(v) if act.type else v
                if act.choices is not None and typed[k] not in act.choices:
                    raise UsageError(f"config {k} = {v!r} not one of {sorted(act.choices)}")
            act.required = False
        sub.set_defaults(**typed)
    args = ap.parse_args(argv)
    if getattr(args, "samples", None) is not None and args.burn_in is None:
        args.burn_in = args.samples // 10
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(f"vbreg: usage error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"vbreg: usage error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (data.DataError, data.StoreError, OSError, ValueError, np.linalg.LinAlgError,
            lrm.ElboDecreaseError) as e:
        print(f"vbreg: error: {e}", file=sys.stderr)
        return ENGINE_ERROR


if __name__ == "__main__":
    sys.exit(main())
