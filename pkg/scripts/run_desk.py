"""Desk-scale experiment: generate, train, predict, evaluate and run the KL diagnostic.

    python3 scripts/run_desk.py --out runs/desk [--config configs/desk.cfg] [--count 150]
"""

import argparse
import json
import sys
from pathlib import Path

from trajdiff.cli import main

REPO = Path(__file__).resolve().parents[1]


def run(argv):
    code = main(argv)
    if code:
        sys.exit(f"{argv[0]} failed with exit code {code}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--config", default=str(REPO / "configs" / "desk.cfg"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--count", type=int, default=150, help="held-out scenarios to predict")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    c, s = ["--config", args.config], ["--seed", str(args.seed)]
    run(["gen-data", *c, *s, "--out", str(out / "train.bin")])
    run(["gen-data", *c, "--seed", str(args.seed + 1), "--out", str(out / "test.bin")])
    run(["train-context", *c, *s, "--data", str(out / "train.bin"), "--out", str(out / "context.ckpt")])
    run(["train-diffusion", *c, *s, "--data", str(out / "train.bin"), "--context", str(out / "context.ckpt"),
         "--out", str(out / "denoiser.ckpt")])
    run(["predict", *c, *s, "--data", str(out / "test.bin"), "--context", str(out / "context.ckpt"),
         "--model", str(out / "denoiser.ckpt"), "--count", str(args.count), "--out", str(out / "pred")])
    run(["evaluate", "--pred", str(out / "pred"), "--data", str(out / "test.bin"), "--out", str(out / "report.csv")])
    run(["diag-kl", "--pred", str(out / "pred"), "--out", str(out / "kl.csv")])

    summary = json.loads((out / "report.csv.json").read_text())
    print(f"{summary['n']} scenarios")
    print(f"{'':8s} {'ADE':>7s} {'FDE':>7s} {'ADE_ml':>7s} {'minADE':>7s}")
    for name, r in [("all", summary["overall"]), *summary["by_label"].items()]:
        print(f"{name:8s} {r['ade_mean']:7.3f} {r['fde_mean']:7.3f} {r['ade_ml']:7.3f} {r['min_ade_k']:7.3f}")
    cv = summary["constant_velocity"]
    print(f"{'CV':8s} {cv['ade']:7.3f} {cv['fde']:7.3f}")
