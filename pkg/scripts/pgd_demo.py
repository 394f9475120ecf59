"""Binarization as a defense against PGD, swept over the L-inf budget.

Usage: python scripts/pgd_demo.py --gray-weights g.ecw --binary-weights b.ecw
Missing weight files are trained first (mlp2, default settings). For each
budget the script attacks the grayscale classifier until ``--samples`` attacks
succeed and reports how often the binary classifier, fed the thresholded
adversarial image, still predicts the true label.
"""

import argparse
from pathlib import Path

from ecoba.dataset import load_dataset
from ecoba.model import TrainConfig, build, load_weights, save_weights, train
from ecoba.pgd import PgdConfig, binarization_defense_rate, select_pgd_samples


def get_model(path: Path, split):
    if path.is_file():
        return load_weights(path)
    model = build("mlp2", split.class_count, 0, (1,) + split.image_shape)
    train(model, split, TrainConfig())
    path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(model, path)
    return model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-root", type=Path, default=Path("data"))
    ap.add_argument("--gray-weights", type=Path, default=Path("weights/mnist_mlp2_gray.ecw"))
    ap.add_argument("--binary-weights", type=Path, default=Path("weights/mnist_mlp2.ecw"))
    ap.add_argument("--samples", type=int, default=200)
    ap.add_argument("--epsilons", default="0.05,0.1,0.2,0.3,0.4,0.5,0.6")
    ap.add_argument("--alpha", type=float, default=0.05)
    ap.add_argument("--steps", type=int, default=20)
    args = ap.parse_args()

    gray = load_dataset("mnist", args.data_root, grayscale=True)
    binary = load_dataset("mnist", args.data_root)
    m_gray, m_bin = get_model(args.gray_weights, gray), get_model(args.binary_weights, binary)
    idx = select_pgd_samples(m_gray, m_bin, gray.test_x, gray.test_y, 0.5)
    x, y = gray.test_x[idx], gray.test_y[idx]
    print("epsilon,attacked,fooled,restoration_rate,crossed")
    for eps in (float(e) for e in args.epsilons.split(",")):
        cfg = PgdConfig(eps, min(args.alpha, eps), args.steps)
        stats, _, _ = binarization_defense_rate(m_gray, m_bin, x, y, cfg, limit=args.samples)
        print(f"{eps:g},{stats.attacked},{stats.fooled},{stats.restoration_rate:.3f},{stats.crossed}",
              flush=True)


if __name__ == "__main__":
    main()
