"""Per-token endpoint scatter (ground truth vs generated) with the KL estimate in each title.

    python3 scripts/plot_kl.py --pred runs/desk/pred --data runs/desk/test.bin --out kl.png

Needs matplotlib (``pip install .[plots]``).
"""

import argparse
import math

import numpy as np

from trajdiff.pipeline import kl_diagnostic, read_predictions
from trajdiff.scenario_gen import load_dataset

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--pred", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--bins", type=int, default=32)
    ap.add_argument("--out", default="kl.png")
    args = ap.parse_args()

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ds = load_dataset(args.data)
    stored = read_predictions(args.pred)
    records = kl_diagnostic(stored, ds, args.bins)
    cols = min(4, len(records))
    rows = math.ceil(len(records) / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.8 * rows), squeeze=False)
    for ax, rec in zip(axes.ravel(), records):
        mine = [sp for sp in stored if sp.token == rec.token]
        gen = np.concatenate([sp.samples[:, :, -1] for sp in mine])
        gt = np.array([ds.Y[sp.index][:, -1] for sp in mine])
        ax.scatter(gen[:, 0], gen[:, 1], s=3, alpha=0.3, label="generated")
        ax.scatter(gt[:, 0], gt[:, 1], s=6, c="k", label="ground truth")
        ax.set_title(f"token {rec.token} (n={rec.n_q}) KL={rec.kl:.2f}", fontsize=8)
    for ax in axes.ravel()[len(records):]:
        ax.axis("off")
    axes[0, 0].legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")
