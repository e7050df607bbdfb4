"""Where the proposals go: class histogram of a synthetic corpus and what each sampler draws from it.

    python3 demos/imbalance_tour.py [--scenes 50] [--top-k 100]
"""
import argparse

import numpy as np

from vrdlab.data_io import SyntheticConfig, generate_synthetic, stats_report
from vrdlab.pipeline import prepare_scene
from vrdlab.proposals import ProposalClass
from vrdlab.sampling import SamplerConfig, Strategy, assign_weights, sample_batch


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scenes", type=int, default=50)
    ap.add_argument("--top-k", type=int, default=100)
    args = ap.parse_args()

    scenes = generate_synthetic(SyntheticConfig(scenes=args.scenes, seed=0))
    agg = stats_report(scenes, args.top_k)["aggregate"]
    print(f"{agg['num_proposals']} proposals over {args.scenes} scenes, positive ratio {agg['pos_ratio']:.2e}")
    for name, n in agg["counts"].items():
        print(f"  {name:5s} {n:8d}")

    # pick the first scene with all six classes and see what each sampler hands the loss
    labels = next(lab for lab in (prepare_scene(s, args.top_k).labels for s in scenes)
                  if len(np.unique(lab)) == 6)
    print("\nbatch composition, 20k draws of 64 from one scene")
    print("strategy      " + " ".join(f"{c.name:>6s}" for c in ProposalClass))
    for strategy in Strategy:
        if strategy is Strategy.OHEM:
            continue  # needs per-proposal losses
        pw = assign_weights(labels, strategy)
        cfg = SamplerConfig(strategy, batch_size=64, seed=0)
        idx = np.concatenate([sample_batch(pw, cfg, stream=k) for k in range(20_000 // 64)])
        freq = np.bincount(labels[idx], minlength=6) / len(idx)
        print(f"{strategy.value:13s} " + " ".join(f"{f:6.3f}" for f in freq))


if __name__ == "__main__":
    main()
