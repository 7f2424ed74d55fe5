"""Zero-noise sweep: both estimators on every trajectory family must track truth.

    python scripts/zero_noise_sweep.py --duration 10
"""

import argparse
import time

from vinkit import config, pipeline, sim
from vinkit.imu import NoiseParams


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--families", nargs="+", default=list(sim.FAMILIES), choices=sim.FAMILIES)
    ap.add_argument("--estimators", nargs="+", default=["filter", "smoother"], choices=["filter", "smoother"])
    ap.add_argument("--duration", type=float, default=10.0)
    args = ap.parse_args(argv)

    quiet = NoiseParams(0.0, 0.0, 0.0, 0.0)
    print(f"{'family':<14s} {'estimator':<9s} {'ATE [m]':>10s} {'seconds':>8s}")
    for family in args.families:
        sc = sim.Scenario(trajectory=sim.AnalyticTrajectory(family=family), noise=quiet, pixel_noise=0.0, duration=args.duration)
        ds = pipeline.Dataset.from_sim(sim.generate(sc))
        for est in args.estimators:
            start = time.perf_counter()
            res = pipeline.run_estimator(ds, config.RunConfig(estimator=est))
            m, _ = pipeline.evaluate(res.timestamps_ns, res.states, ds.groundtruth_ns, ds.groundtruth, config.EvalConfig())
            print(f"{family:<14s} {est:<9s} {m['ate_rmse_m']:10.2e} {time.perf_counter() - start:8.1f}", flush=True)


if __name__ == "__main__":
    main()
