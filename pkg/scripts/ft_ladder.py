"""Embedding displacement along the desk fine-tuning ladder.

    python scripts/ft_ladder.py --model cnn-a --seeds 0 1 2
"""

import argparse
import warnings

import torch

from invlab.core import FTLevel
from invlab.dataio import Pipeline, synthetic_faces
from invlab.desk import ft_dataset_size, ft_ladder, pool_specs
from invlab.zoo import embedding_displacement, fine_tune, train_extractor


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--model", default="cnn-a")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--top", default="FT5", help="highest ladder level to run")
    args = p.parse_args()
    torch.set_num_threads(1)

    spec = {s.model_id: s for s in pool_specs()}[args.model]
    source = train_extractor(spec, synthetic_faces(0, range(50), range(20), Pipeline.A, 64), seed=0, epochs=8)
    ft_data = synthetic_faces(2, range(100), range(10), Pipeline.A, 64)
    probes = synthetic_faces(3, range(100), range(5), Pipeline.A, 64)
    ladder = ft_ladder()
    levels = [l for l in list(FTLevel)[1:] if int(l) <= int(FTLevel.parse(args.top))]
    for seed in args.seeds:
        cells = []
        for level in levels:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                adapted = fine_tune(source, ft_data[:ft_dataset_size(level)], ladder[level], seed=seed)
            disp = embedding_displacement(source, adapted, probes, "emb")
            cells.append(f"{level.label}={disp:.1f} (val {adapted.meta['val_acc']:.2f})")
        print(f"seed {seed}: " + "  ".join(cells), flush=True)


if __name__ == "__main__":
    main()
