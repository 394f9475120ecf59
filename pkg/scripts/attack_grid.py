"""Mean success step of AP, EP and ECoBA for every trained classifier.

Usage: python scripts/attack_grid.py --weights-dir weights --out results
Reads <weights-dir>/<dataset>_<arch>.ecw (see train_classifiers.py), writes the
per-cell summary/curve CSVs under <out>/<dataset>/<arch>/ and prints a grid of
mean success steps with success rates in parentheses.
"""

import argparse
from pathlib import Path

from ecoba.dataset import load_dataset
from ecoba.experiment import ExperimentConfig, emit_report, run_experiment
from ecoba.model import load_weights

METHODS = ("ap", "ep", "ecoba")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-root", type=Path, default=Path("data"))
    ap.add_argument("--weights-dir", type=Path, default=Path("weights"))
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--samples", type=int, default=100)
    ap.add_argument("--k-max", type=int, default=50)
    ap.add_argument("--mode", choices=("static", "rescore"), default="static")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print("arch,dataset," + ",".join(METHODS))
    for path in sorted(args.weights_dir.glob("*.ecw")):
        name, arch = path.stem.rsplit("_", 1)
        split = load_dataset(name, args.data_root, seed=args.seed)
        cfg = ExperimentConfig(name, arch, METHODS, args.samples, args.k_max, args.seed, args.mode)
        report = run_experiment(cfg, load_weights(path), split)
        emit_report(report, args.out / name / arch)
        cells = []
        for m in METHODS:
            s = report.summary(m)
            cells.append(f"{s.mean_success_step:.2f} ({s.success_rate:.2f})")
        print(f"{arch},{name}," + ",".join(cells), flush=True)


if __name__ == "__main__":
    main()
