#!/usr/bin/env python3
"""Train the micro preset with and without the token-labeling term and
compare held-out accuracy, class-only vs fused inference."""

import argparse
import time

from demansia.model import PRESETS, make_model
from demansia.token_labeling import synth_dense_dataset
from demansia.training import TrainConfig, evaluate, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--n-train", type=int, default=2048)
    ap.add_argument("--n-eval", type=int, default=512)
    args = ap.parse_args()

    cfg = PRESETS["micro"]
    train_set = synth_dense_dataset(args.seed + 100, args.n_train, cfg.image_size, cfg.n_classes)
    eval_set = synth_dense_dataset(args.seed + 101, args.n_eval, cfg.image_size, cfg.n_classes)

    results = {}
    for beta in (0.5, 0.0):
        model = make_model(cfg, seed=args.seed)
        tc = TrainConfig(batch_size=8, epochs=args.epochs, seed=args.seed, beta=beta,
                         n_train=args.n_train, n_eval=args.n_eval)
        t0 = time.perf_counter()
        train(model, train_set, eval_set, tc, log=lambda s, b=beta: print(f"beta={b} {s}", flush=True))
        wall = time.perf_counter() - t0
        cls1, _, _ = evaluate(model, eval_set, use_fusion=False)
        fus1, _, _ = evaluate(model, eval_set, use_fusion=True)
        results[beta] = (cls1, fus1, wall)
        print(f"beta={beta}: class-only {cls1:.4f}  fused {fus1:.4f}  ({wall:.0f}s)")

    b5, b0 = results[0.5], results[0.0]
    print("\nheld-out top-1 summary")
    print(f"  beta=0.5: class {b5[0]:.4f}  fused {b5[1]:.4f}")
    print(f"  beta=0.0: class {b0[0]:.4f}  fused {b0[1]:.4f}")
    print(f"  token labeling gain (best vs best): {max(b5[:2]) - max(b0[:2]):+.4f}")


if __name__ == "__main__":
    main()
