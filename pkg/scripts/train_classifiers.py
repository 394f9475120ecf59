"""Train every (dataset, arch) classifier and print top-1 train/test accuracy.

Usage: python scripts/train_classifiers.py --data-root data --out weights
Weights land in <out>/<dataset>_<arch>.ecw, the layout ``ecoba eval`` reads.
Datasets whose IDX files are missing are reported and skipped.
"""

import argparse
import time
from pathlib import Path

from ecoba.dataset import DATASETS, load_dataset
from ecoba.model import ARCHS, TrainConfig, accuracy, build, save_weights, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-root", type=Path, default=Path("data"))
    ap.add_argument("--out", type=Path, default=Path("weights"))
    ap.add_argument("--datasets", default=",".join(sorted(DATASETS)))
    ap.add_argument("--archs", default=",".join(ARCHS))
    ap.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = TrainConfig(epochs=args.epochs, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    print("dataset,arch,params,train_acc,test_acc,seconds")
    for name in args.datasets.split(","):
        try:
            split = load_dataset(name, args.data_root, seed=args.seed)
        except FileNotFoundError as exc:
            print(f"# skipping {name}: {exc}")
            continue
        for arch in args.archs.split(","):
            t0 = time.perf_counter()
            model = build(arch, split.class_count, cfg.seed, (1,) + split.image_shape)
            path = args.out / f"{name}_{arch}.ecw"
            with open(path.with_suffix(".log"), "w") as fh:
                train(model, split, cfg, fh)
            save_weights(model, path)
            print(f"{name},{arch},{model.param_count()},"
                  f"{accuracy(model, split.train_x, split.train_y):.4f},"
                  f"{accuracy(model, split.test_x, split.test_y):.4f},"
                  f"{time.perf_counter() - t0:.0f}", flush=True)


if __name__ == "__main__":
    main()
