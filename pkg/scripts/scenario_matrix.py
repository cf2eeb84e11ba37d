"""Write manifests for a conditions x FT-levels grid and tabulate the attack results.

    python scripts/scenario_matrix.py --levels NoAdapt FT1 FT2 --out runs/matrix
"""

import argparse
from pathlib import Path

import torch

from invlab.core import DataCondition
from invlab.pipeline import StageCache, default_manifest, run_experiment, scenario_matrix


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--conditions", nargs="+", default=[c.value for c in DataCondition])
    p.add_argument("--levels", nargs="+", default=["NoAdapt", "FT1", "FT2"])
    p.add_argument("--target", default="cnn-a")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/matrix")
    p.add_argument("--cache", default="runs/cache")
    args = p.parse_args()
    torch.set_num_threads(1)

    out = Path(args.out)
    (out / "manifests").mkdir(parents=True, exist_ok=True)
    manifests = []
    for cond in args.conditions:
        for level in args.levels:
            name = f"{cond}-{level}-{args.target}"
            m = default_manifest(name, cond, level, args.target, True, args.seed, str(out / "runs" / name))
            m.write(out / "manifests" / f"{name}.json")
            manifests.append(m)
    cache = StageCache(args.cache)
    rows = scenario_matrix(manifests, out, lambda m: run_experiment(m, cache)[0])
    for r in rows:
        print(f"{r['condition']:<18} {r['ft_level']:<8} phi_hat={r['phi_hat']:<6} "
              f"DSSIM={r['median_dssim']:.4f} ident={r['identification']:.3f} "
              f"TAR(img/subj)={r['tar_same_image']:.3f}/{r['tar_same_subject']:.3f}")


if __name__ == "__main__":
    main()
