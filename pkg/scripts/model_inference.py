"""Model-inference experiment: attribute embeddings to the pool model that produced them.

Trains the desk pool, embeds probe images with every model and reports the
auxiliary classifier's held-out accuracy next to the shuffled-label control.

    python scripts/model_inference.py --subjects 500 --samples 20
"""

import argparse
import json
import time

import torch

from invlab.core import EmbeddingBatch
from invlab.dataio import Pipeline, synthetic_faces
from invlab.desk import pool_specs
from invlab.inference import AuxiliaryClassifierSpec, train_auxiliary_classifier
from invlab.pipeline import train_pool


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--subjects", type=int, default=500)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    torch.set_num_threads(1)

    t0 = time.time()
    pretrain = synthetic_faces(0, range(50), range(20), Pipeline.A, 64)
    pool = train_pool(pool_specs(), pretrain, args.epochs, args.seed * 100)
    probes = synthetic_faces(5, range(args.subjects), range(args.samples), Pipeline.A, 64)
    ids = [s.subject_id for s in probes]
    batches = [EmbeddingBatch(h.embed(probes, "emb"), mid, "emb", ids) for mid, h in pool.items()]
    spec = AuxiliaryClassifierSpec(128, tuple((mid, "emb") for mid in pool), seed=args.seed)
    real = train_auxiliary_classifier(batches, spec)
    control = train_auxiliary_classifier(batches, spec, shuffle_labels=True)
    print(json.dumps({"models": list(pool), "embeddings_per_model": len(probes),
                      "heldout_accuracy": real.heldout_accuracy, "shuffled_control": control.heldout_accuracy,
                      "chance": 1 / len(pool), "seconds": round(time.time() - t0)}, indent=2))


if __name__ == "__main__":
    main()
