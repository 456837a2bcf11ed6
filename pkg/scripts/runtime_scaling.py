"""Wall time of the per-node solves against the number of cascades.

The simulation and measurement pooling are excluded; only infer_graph is timed.

    python scripts/runtime_scaling.py --n 500,1000,2000,4000 --repeats 5
"""

import argparse
import statistics
import time

from glcascade.cascades import batch_simulate, measurements_by_node
from glcascade.graph import assign_weights, generate_barabasi_albert
from glcascade.recovery import ESTIMATORS, LambdaRule, SolverConfig, infer_graph


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--nodes", type=int, default=100)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--n", default="500,1000,2000,4000")
    p.add_argument("--estimator", choices=ESTIMATORS, default="sparse_mle")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--p-init", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    grid = sorted(int(v) for v in args.n.split(","))
    g = assign_weights(generate_barabasi_albert(args.nodes, args.k, seed=args.seed), "ic", 0.2, 0.7, seed=args.seed)
    traces = batch_simulate(g, "ic", grid[-1], args.p_init, seed=args.seed + 1)
    rule = LambdaRule("theorem", alpha=0.2, scale=0.01)
    prev = None
    print(f"{'n':>6} {'measurements':>13} {'median s':>9} {'ratio':>6}")
    for n in grid:
        ms = measurements_by_node(traces[:n])
        times = []
        for _ in range(args.repeats):
            start = time.perf_counter()
            infer_graph(traces[:n], "ic", SolverConfig(tolerance=1e-6), 0.1, args.estimator, rule, measurements=ms)
            times.append(time.perf_counter() - start)
        med = statistics.median(times)
        ratio = f"{med / prev:.2f}" if prev else ""
        print(f"{n:6d} {sum(m.n for m in ms.values()):13d} {med:9.3f} {ratio:>6}")
        prev = med


if __name__ == "__main__":
    main()
