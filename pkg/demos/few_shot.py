"""Few-shot protein classification: K-NN on fused latents vs supervised baselines.

    python demos/few_shot.py --quick
"""

import argparse

from latentfuse.eval import ALL_METHODS, fewshot_protocol
from latentfuse.mvae import MvaeModel, TrainConfig, train
from latentfuse.protein_synth import make_toy_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    n_samples, epochs, n_seeds = (2000, 40, 2) if args.quick else (10_000, 200, 5)
    data, _, _ = make_toy_dataset(args.seed, n_samples=n_samples)
    model = MvaeModel([data.signal_dim] * 2, seed=args.seed)
    train(model, data, TrainConfig(epochs=epochs, seed=args.seed))

    shots = (1, 5, 10)
    f1 = fewshot_protocol(model, data, shots, n_seeds, seed=args.seed).mean_f1()
    print("method".ljust(14) + "".join(f"{s}-shot".rjust(9) for s in shots))
    for m in ALL_METHODS:
        print(m.ljust(14) + "".join(f"{f1[(m, s)]:9.3f}" for s in shots))


if __name__ == "__main__":
    main()
