"""Run one desk attack end to end and print the headline numbers.

    python scripts/run_desk_attack.py --seed 0 --target cnn-a --ft-level NoAdapt --out runs/attack
"""

import argparse
import json

import torch

from invlab.core import DataCondition
from invlab.pipeline import ReconConfig, StageCache, default_manifest, run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target", default="cnn-a", help="pool id, or '<pool id>-bn' for an out-of-pool target")
    p.add_argument("--ft-level", default="NoAdapt")
    p.add_argument("--condition", default=DataCondition.SAME_PREPROCESSING.value,
                   choices=[c.value for c in DataCondition])
    p.add_argument("--mode", default="attack", choices=["attack", "autoencoder"])
    p.add_argument("--out", default="runs/attack")
    p.add_argument("--cache", default="runs/cache")
    args = p.parse_args()
    torch.set_num_threads(1)

    in_pool = not args.target.endswith("-bn")
    manifest = default_manifest(f"{args.target}-{args.ft_level}-s{args.seed}", args.condition, args.ft_level,
                                args.target, in_pool, args.seed, args.out, recon=ReconConfig(mode=args.mode))
    manifest.write(f"{args.out}.manifest.json")
    report, _ = run_experiment(manifest, StageCache(args.cache))
    summary = {
        "phi_hat": report.extra["phi_hat"],
        "phi_hat_fraction_true": report.extra["phi_hat_fraction_true"],
        "median_dssim": report.median_dssim,
        "mean_image_median_dssim": report.extra["mean_image_median_dssim"],
        "identification": report.identification_accuracy,
        "chance": report.chance,
        "tar": {m: r.tar for m, r in report.verification.items()},
        "ensemble": report.extra["ensemble"],
    }
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
