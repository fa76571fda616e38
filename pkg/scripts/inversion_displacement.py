"""How far off can the attacker's light guess be before template inversion stops working?

For each displacement (fraction of image width) the leaked norm map is
re-rendered under shifted lights and fed through the verifier's calibrated
camera pipeline. Prints mean Pearson agreement with the true map and the
acceptance rate at the given threshold.
"""
import argparse
import csv
import sys

import numpy as np

from papertrust.attacks import displaced_lights, invert_template
from papertrust.features import Pipeline
from papertrust.optics import AcquisitionPlan, plan_environments
from papertrust.pufmetrics import pearson
from papertrust.surface import SurfaceParams, generate_surface


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--threshold", type=float, default=0.8)
    args = ap.parse_args()

    plan = AcquisitionPlan(mode="camera")
    envs = plan_environments(plan, args.size, args.size)
    pipe = Pipeline(environments=envs)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["displacement_fraction", "mean_pearson", "acceptance_rate"])
    for frac in (0.0, 0.05, 0.1, 0.25, 0.5, 1.0):
        scores = []
        for seed in range(args.seeds):
            nm = generate_surface(SurfaceParams(args.size, args.size, 3.0, 0.2, seed=seed))
            est = pipe.norm_map(invert_template(nm, displaced_lights(envs, frac * args.size), plan))
            scores.append(pearson(np.concatenate([est.nx.ravel(), est.ny.ravel()]),
                                  np.concatenate([nm.nx.ravel(), nm.ny.ravel()])))
        rate = float(np.mean([s >= args.threshold for s in scores]))
        w.writerow([frac, f"{np.mean(scores):.4f}", f"{rate:.2f}"])


if __name__ == "__main__":
    main()
