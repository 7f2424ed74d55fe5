"""Monte-Carlo consistency study of the filter on simulated data.

Runs the filter on independently seeded datasets from a perturbed start and
reports the average NEES of the final 15-dim error state against the two-sided
95% chi-square interval, plus per-block averages and the average over time.

    python scripts/nees_monte_carlo.py --family circle --duration 2 --runs 50
"""

import argparse
import time

import numpy as np
from scipy.stats import chi2

from vinkit import config, pipeline, sim
from vinkit.imu import NoiseParams
from vinkit.metrics import nees_value

BLOCKS = ("position", "attitude", "velocity", "gyro bias", "accel bias")


def run_once(family, duration, seed, args):
    noise = NoiseParams(args.sigma_g, args.sigma_a, args.sigma_bg, args.sigma_ba)
    sc = sim.Scenario(trajectory=sim.AnalyticTrajectory(family=family), noise=noise, pixel_noise=args.pixel_noise,
                      seed=seed, duration=duration, n_landmarks=args.landmarks)
    ds = pipeline.Dataset.from_sim(sim.generate(sc))
    cfg = config.RunConfig(estimator="filter", perturb_initial=True, seed=seed, iterated=args.iterated)
    res = pipeline.run_estimator(ds, cfg)
    R, t = pipeline.ground_start_frame(ds.groundtruth[0])
    rows = []
    for ns, est, P in zip(res.timestamps_ns, res.states, res.covariances):
        i = int(np.searchsorted(ds.groundtruth_ns, ns))
        err = pipeline.transform_state(ds.groundtruth[i], R, t).boxminus(est)
        rows.append([nees_value(err, P)] + [nees_value(err[b:b + 3], P[b:b + 3, b:b + 3]) for b in range(0, 15, 3)])
    return np.array(rows)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--family", default="circle", choices=sim.FAMILIES)
    ap.add_argument("--duration", type=float, default=2.0)
    ap.add_argument("--runs", type=int, default=50)
    ap.add_argument("--first-seed", type=int, default=1000)
    ap.add_argument("--landmarks", type=int, default=400)
    ap.add_argument("--pixel-noise", type=float, default=1.0)
    ap.add_argument("--sigma-g", type=float, default=1e-3)
    ap.add_argument("--sigma-a", type=float, default=1e-2)
    ap.add_argument("--sigma-bg", type=float, default=1e-5)
    ap.add_argument("--sigma-ba", type=float, default=1e-4)
    ap.add_argument("--iterated", action="store_true", help="use the iterated update")
    args = ap.parse_args(argv)

    start = time.perf_counter()
    runs = [run_once(args.family, args.duration, args.first_seed + k, args) for k in range(args.runs)]
    final = np.array([r[-1] for r in runs])
    lo, hi = chi2.ppf([0.025, 0.975], 15 * args.runs) / args.runs
    avg = final[:, 0].mean()
    print(f"final NEES {avg:.2f}  95% interval [{lo:.2f}, {hi:.2f}]  {'inside' if lo <= avg <= hi else 'outside'}")
    for name, value in zip(BLOCKS, final[:, 1:].mean(axis=0)):
        print(f"  {name:<11s} {value:6.2f}  (expected 3)")
    steps = min(len(r) for r in runs)
    over_time = np.mean([r[:steps, 0] for r in runs], axis=0)
    print("average over frames:", " ".join(f"{v:.1f}" for v in over_time[::max(1, steps // 10)]))
    print(f"{args.runs} runs in {time.perf_counter() - start:.1f} s")


if __name__ == "__main__":
    main()
