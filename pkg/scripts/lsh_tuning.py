"""LSH recall against an exhaustive scan for several band layouts."""
import argparse
import csv
import sys

import numpy as np

from papertrust.authcore import TemplateStore
from papertrust.features import PufResponse


def recall(bands, bits, n_templates, flip_frac, trials, seed):
    rng = np.random.default_rng(seed)
    out = []
    for t in range(trials):
        store = TemplateStore("lsh", lsh_bands=bands, lsh_bits=bits, lsh_seed=t)
        refs = [PufResponse(rng.integers(0, 2, 2048)) for _ in range(n_templates)]
        for i, r in enumerate(refs):
            store.register(f"t{i}", r)
        hits = 0
        for r in refs:
            b = r.bits.copy()
            b[rng.choice(2048, int(flip_frac * 2048), replace=False)] ^= 1
            truth = store.exhaustive_search(PufResponse(b), 1)[0][0].product_id
            got = store.search_similar(PufResponse(b), 1)
            hits += bool(got) and got[0][0].product_id == truth
        out.append(hits / n_templates)
    return float(np.mean(out)), float(np.min(out))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--templates", type=int, default=100)
    ap.add_argument("--flip", type=float, default=0.10)
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["bands", "bits_per_band", "mean_recall", "min_recall"])
    for bands, bits in ((8, 12), (16, 12), (16, 16), (32, 16), (32, 20)):
        mean, worst = recall(bands, bits, args.templates, args.flip, args.trials, args.seed)
        w.writerow([bands, bits, f"{mean:.3f}", f"{worst:.3f}"])


if __name__ == "__main__":
    main()
