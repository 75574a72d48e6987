"""Run the synthetic benchmark and print one line per gate.

    python scripts/run_benchmark.py [--out report.csv] [--epochs N] [--seed S]
"""
import argparse
import dataclasses

from mmformer.benchmark import BenchmarkConfig, run_benchmark, write_report


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="benchmark.csv")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=None, help="default: budgeted schedule")
    ap.add_argument("--trend-seeds", type=int, default=5)
    a = ap.parse_args()
    cfg = BenchmarkConfig(seed=a.seed, trend_seeds=a.trend_seeds)
    if a.epochs is not None:
        # stretch the drops with the schedule, keeping their relative position
        drops = tuple(round(e * a.epochs / cfg.epochs) for e in cfg.lr_drops)
        cfg = dataclasses.replace(cfg, epochs=a.epochs, lr_drops=drops)
    res = run_benchmark(cfg)
    write_report(a.out, res["rows"])
    print(f"(a) order-3 {res['order3']:.3f} vs order-1 {res['order1']:.3f}: {'PASS' if res['gate_a'] else 'FAIL'}")
    print(f"(b) two-branch {res['headline']:.3f} >= 0.90: {'PASS' if res['gate_b'] else 'FAIL'}")
    print(f"(c) two-branch vs baseline {res['baseline']:.3f}: {'PASS' if res['gate_c'] else 'FAIL'}")
    print(f"(d) medians {res['median']}: {'holds' if res['trend_ok'] else 'does not hold'}")
    print(f"total {res['seconds']:.0f}s; report in {a.out}")


if __name__ == "__main__":
    main()
