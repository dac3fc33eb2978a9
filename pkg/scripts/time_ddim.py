"""Wall-clock and denoiser-call counts of guided DDIM sampling versus step count.

    python3 scripts/time_ddim.py --model runs/desk/denoiser.ckpt
"""

import argparse
import time

import numpy as np

from trajdiff.denoiser import MLPDenoiser, sample_controls
from trajdiff.guidance import GuidanceConfig
from trajdiff.pipeline import schedule_of

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--model", required=True)
    ap.add_argument("--steps", default="10,50,100,250,1000")
    ap.add_argument("--samples", type=int, default=9)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    den = MLPDenoiser.load(args.model)
    s = schedule_of(den)
    g = GuidanceConfig()
    base = None
    print(f"{'S':>6s} {'calls':>7s} {'seconds':>9s} {'vs S=first':>10s}")
    for S in (int(v) for v in args.steps.split(",")):
        best = float("inf")
        for _ in range(args.repeats):
            before = den.n_evals
            t0 = time.perf_counter()
            sample_controls(den, s, 1, 0.0, g, S, args.samples, np.random.default_rng(0))
            best = min(best, time.perf_counter() - t0)
            calls = den.n_evals - before
        base = base or best
        print(f"{S:6d} {calls:7d} {best:9.4f} {best / base:10.1f}")
