"""``glcascade`` command line: generate, simulate, infer, experiment, diagnose.

Exit codes: 0 success, 2 usage or config error, 3 unreadable/invalid data,
4 numerical failure.  Every command writes a JSON manifest next to its
output listing the files it wrote.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
from dataclasses import replace
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .cascades import (
    CascadeModel,
    DomainError,
    TraceFormatError,
    batch_simulate,
    derive_seed,
    measurements_by_node,
    read_traces,
    write_traces,
)
from .config import ConfigError, config_to_dict, load_config
from .diagnostics import gram_matrix, hessian_concentration, lf_constants, re_estimate
from .evaluation import GENERATORS, GraphSpec, default_jobs, run_experiment, write_bundle
from .graph import MODEL_KINDS, GraphFormatError, ParameterError, read_graph, write_graph
from .recovery import ESTIMATORS, LambdaRule, NegLogLikelihood, NumericalError, SolverConfig, infer_graph

log = logging.getLogger("glcascade")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument types


def _positive_int(raw: str) -> int:
    v = int(raw)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {raw}")
    return v


def _nonneg_int(raw: str) -> int:
    v = int(raw)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {raw}")
    return v


def _unit_prob(raw: str) -> float:
    v = float(raw)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {raw}")
    return v


def _estimator(raw: str) -> str:
    v = raw.replace("-", "_")
    if v not in ESTIMATORS:
        raise argparse.ArgumentTypeError(f"unknown estimator {raw!r} (choose from sparse-mle, mle, greedy, lasso)")
    return v


def _int_list(raw: str) -> list[int]:
    try:
        out = [int(v) for v in raw.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of integers: {raw!r}") from None
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("need one or more positive integers")
    return out


def _model_args(p: argparse.ArgumentParser, required: bool = False):
    p.add_argument("--model", choices=MODEL_KINDS, required=required, help="cascade model")
    p.add_argument("--epsilon", type=float, default=1.0, help="CICE rate (default 1)")
    p.add_argument("--threshold", type=float, default=0.0, help="logistic offset (default 0)")
    p.add_argument("--horizon", type=_positive_int, default=None, help="voter horizon in steps")


def _model_from(args, kind: str) -> CascadeModel:
    return CascadeModel(kind, args.epsilon, args.threshold, args.horizon)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glcascade", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"glcascade {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a weighted graph")
    p.add_argument("--kind", choices=GENERATORS, required=True)
    p.add_argument("--nodes", type=_positive_int, required=True)
    p.add_argument("--k", type=_positive_int, help="attachment (ba/hk) or neighbour (ws) count")
    p.add_argument("--edges-target", type=_nonneg_int, help="directed edge target (sets k, or kronecker edges)")
    p.add_argument("--beta", type=float, default=0.1, help="WS rewiring probability")
    p.add_argument("--p-triad", type=float, default=0.5, help="HK triad-closure probability")
    p.add_argument("--model", choices=MODEL_KINDS, default="ic")
    p.add_argument("--wlow", type=float, default=0.2)
    p.add_argument("--whigh", type=float, default=0.7)
    p.add_argument("--weak-prob", type=float, default=0.0, help="probability of a weak edge per non-edge")
    p.add_argument("--weak-low", type=float, default=0.0)
    p.add_argument("--weak-high", type=float, default=0.1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default="graph.tsv")

    p = sub.add_parser("simulate", help="simulate cascades on a graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--n", type=_positive_int, required=True, help="number of cascades")
    p.add_argument("--p-init", type=_unit_prob, default=0.05)
    p.add_argument("--seed", type=int, required=True)
    _model_args(p)
    p.add_argument("--out", default="traces.jsonl")

    p = sub.add_parser("infer", help="estimate the graph from traces")
    p.add_argument("--traces", required=True)
    p.add_argument("--estimator", type=_estimator, default="sparse_mle")
    p.add_argument("--lambda", dest="lam", type=float, help="fixed l1 weight")
    p.add_argument("--alpha", type=float, help="theorem rule: lambda = 2 sqrt(log m / (alpha n^(1-delta)))")
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--lambda-scale", type=float, default=1.0, help="multiplier on the theorem rule")
    p.add_argument("--eta", type=float, default=0.1, help="support threshold")
    p.add_argument("--max-parents", type=_positive_int, help="greedy: stop after this many parents")
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--max-iterations", type=_positive_int, default=5000)
    _model_args(p)
    p.add_argument("--out", default="estimate.tsv")

    p = sub.add_parser("experiment", help="run a config-driven factorial experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--seed", type=int, help="override the config's master_seed")
    p.add_argument("--jobs", type=_positive_int, default=None, help="worker processes (default: all CPUs)")
    p.add_argument("--timing", action="store_true", help="record wall times (outputs stop being byte-stable)")

    p = sub.add_parser("diagnose", help="restricted-eigenvalue, link-constant and concentration reports")
    p.add_argument("--graph", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--node", type=int, action="append", required=True, help="target node (repeatable)")
    p.add_argument("--re-samples", type=_nonneg_int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--concentration", type=_int_list, help="n grid for the Hessian concentration study")
    p.add_argument("--trials", type=_positive_int, default=10)
    p.add_argument("--p-init", type=_unit_prob, default=0.05)
    p.add_argument("--out", default="diagnostics", help="output directory")
    return parser


# ---------------------------------------------------------------------------
# manifests


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc) if epoch else dt.datetime.now(dt.timezone.utc)
    return when.replace(microsecond=0).isoformat()


def write_manifest(path: Path, command: str, config: dict, seed, files) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "master_seed": seed,
        "files": [str(f) for f in files],
        "version": __version__,
        "timestamp": _timestamp(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose",)}


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    if args.kind == "kronecker":
        if args.edges_target is None:
            raise UsageError("--edges-target is required for kronecker graphs")
    elif args.k is None and args.edges_target is None:
        raise UsageError("give --k or --edges-target")
    spec = GraphSpec(
        name="cli", kind=args.kind, nodes=args.nodes, k=args.k if args.kind != "kronecker" else None,
        edges=args.edges_target, beta=args.beta, p_triad=args.p_triad, weight_low=args.wlow,
        weight_high=args.whigh, weak_prob=args.weak_prob, weak_low=args.weak_low, weak_high=args.weak_high,
    )
    topology = spec.topology(derive_seed(args.seed, 0))
    graph = spec.weighted(topology, CascadeModel(args.model), derive_seed(args.seed, 1))
    out = Path(args.out)
    write_graph(graph, out)
    write_manifest(Path(f"{out}.manifest.json"), "generate", _echo(args), args.seed, [out])
    log.info("wrote %s: %d nodes, %d edges", out, graph.num_nodes, len(graph))
    return EXIT_OK


def cmd_simulate(args) -> int:
    graph = read_graph(args.graph)
    kind = args.model or graph.model
    if kind != graph.model and "voter" in (kind, graph.model):
        raise UsageError(f"--model {kind} does not match the {graph.model} graph weights")
    model = _model_from(args, kind)
    traces = batch_simulate(graph, model, args.n, args.p_init, args.seed)
    out = Path(args.out)
    write_traces(traces, out)
    write_manifest(Path(f"{out}.manifest.json"), "simulate", _echo(args), args.seed, [out])
    log.info("wrote %d cascades to %s", len(traces), out)
    return EXIT_OK


def cmd_infer(args) -> int:
    traces = read_traces(args.traces)
    if not traces:
        raise TraceFormatError("trace file is empty")
    kind = traces[0].model
    if args.model is not None and args.model != kind:
        raise UsageError(f"--model {args.model} but the traces were generated by the {kind} model")
    model = _model_from(args, kind)
    rule = None
    if args.estimator in ("sparse_mle", "lasso"):
        if args.lam is not None and args.alpha is not None:
            raise UsageError("give either --lambda or --alpha, not both")
        if args.lam is not None:
            rule = LambdaRule("fixed", args.lam)
        elif args.alpha is not None:
            rule = LambdaRule("theorem", alpha=args.alpha, delta=args.delta, scale=args.lambda_scale)
        else:
            raise UsageError(f"--estimator {args.estimator.replace('_', '-')} needs --lambda or --alpha")
    config = SolverConfig(tolerance=args.tolerance, max_iterations=args.max_iterations)
    est = infer_graph(traces, model, config, args.eta, args.estimator, rule,
                      num_nodes=traces[0].num_nodes, max_parents=args.max_parents)
    out = Path(args.out)
    write_graph(est.to_graph(), out)
    sidecar = Path(f"{out}.nodes.jsonl")
    lines = []
    for i in range(traces[0].num_nodes):
        if i in est.results:
            rec = {"estimator": args.estimator, **est.results[i].sidecar()}
        else:
            rec = {"estimator": args.estimator, "node": i, "skipped": est.skipped.get(i, "not estimated")}
        lines.append(json.dumps(rec, sort_keys=True))
    sidecar.write_text("\n".join(lines) + "\n")
    write_manifest(Path(f"{out}.manifest.json"), "infer", _echo(args), None, [out, sidecar])
    failed = [i for i, why in est.skipped.items() if why.startswith("numerical")]
    if failed:
        log.error("numerical failure on nodes %s", failed)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_experiment(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, master_seed=args.seed)
    if args.timing:
        config = replace(config, timing=True)
    jobs = args.jobs or default_jobs()
    out = Path(args.out)
    rows = run_experiment(config, None, jobs)
    files = write_bundle(rows, config, out)
    failed = sum(1 for r in rows if r.error)
    if failed:
        log.warning("%d cells failed; see results.csv", failed)
    write_manifest(out / "manifest.json", "experiment",
                   {"config_file": str(args.config), "config": config_to_dict(config)},
                   config.master_seed, [f.relative_to(out) for f in files])
    return EXIT_OK


def cmd_diagnose(args) -> int:
    graph = read_graph(args.graph)
    traces = read_traces(args.traces)
    if not traces:
        raise TraceFormatError("trace file is empty")
    if traces[0].num_nodes != graph.num_nodes:
        raise UsageError(f"graph has {graph.num_nodes} nodes but traces have {traces[0].num_nodes}")
    for i in args.node:
        if not 0 <= i < graph.num_nodes:
            raise UsageError(f"--node {i} out of range [0, {graph.num_nodes})")
    model = CascadeModel(traces[0].model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ms = measurements_by_node(traces, args.node)

    re_rows, lf_rows = [], []
    for i in args.node:
        support = graph.parents(i)
        theta = graph.column(i)
        data = ms[i]
        if data.n == 0 or not support:
            re_rows.append([i, "", " ".join(map(str, support)), data.n, "", "", args.re_samples])
            continue
        for name, mat in (("gram", gram_matrix(data)), ("hessian", NegLogLikelihood(data, model).hessian(theta))):
            r = re_estimate(mat, support, args.re_samples, args.seed)
            re_rows.append([i, name, " ".join(map(str, r.support)), data.n, f"{r.gamma_upper:.10g}",
                            f"{r.gamma_sampled:.10g}", r.num_samples])
        try:
            lf = lf_constants(model, data, theta)
            lf_rows.append([i, data.n, lf.num_used, f"{lf.alpha_lf:.10g}", f"{lf.alpha_lf2:.10g}"])
        except DomainError as exc:
            log.warning("node %d: %s", i, exc)
            lf_rows.append([i, data.n, 0, "", ""])

    files = [out / "re.csv", out / "lf.csv"]
    _write_csv(files[0], ("node", "matrix", "support", "n", "gamma_upper", "gamma_sampled", "num_samples"), re_rows)
    _write_csv(files[1], ("node", "n", "n_used", "alpha_lf", "alpha_lf2"), lf_rows)
    if args.concentration:
        for i in args.node:
            rep = hessian_concentration(graph, model, i, args.concentration, args.trials, args.seed,
                                        args.p_init, re_samples=min(args.re_samples, 500))
            path = out / f"concentration_node{i}.csv"
            path.write_text(rep.to_csv())
            files.append(path)
    write_manifest(out / "manifest.json", "diagnose", _echo(args), args.seed, [f.relative_to(out) for f in files])
    return EXIT_OK


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


COMMANDS = {
    "generate": cmd_generate,
    "simulate": cmd_simulate,
    "infer": cmd_infer,
    "experiment": cmd_experiment,
    "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ParameterError) as exc:
        print(f"glcascade {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphFormatError, TraceFormatError, DomainError, OSError) as exc:
        print(f"glcascade {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"glcascade {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
