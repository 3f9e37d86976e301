#!/usr/bin/env python3
"""Plot the accuracy time series from a train run's metrics.csv.

The tool itself never plots; this sample script shows how to read the flat
metrics CSV. Usage:

    python docs/plot_metrics.py out/metrics.csv accuracy.png
"""
import csv
import sys
from collections import defaultdict


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__)
        return 2
    metrics_path, out_path = sys.argv[1], sys.argv[2]

    series = defaultdict(list)
    with open(metrics_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["metric"] == "accuracy" and row["split"] == "global_test":
                series["global"].append((int(row["round"]), float(row["value"])))
            elif row["metric"] == "group_accuracy":
                series[row["class"]].append((int(row["round"]), float(row["value"])))

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib is not installed; printing the series instead")
        for name, points in series.items():
            print(name, points)
        return 0

    fig, ax = plt.subplots(figsize=(7, 4))
    for name, points in sorted(series.items()):
        rounds, values = zip(*sorted(points))
        ax.plot(rounds, values, marker="o", label=name)
    ax.set_xlabel("round")
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    print(f"wrote {out_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
