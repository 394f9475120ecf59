"""Command line entry point: ``ecoba train | attack | eval | demo-pgd``.

Options may also come from a ``key=value`` file passed with ``--config``
(keys are flag names, ``k-max`` or ``k_max``); flags given on the command
line win. Exit status: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .attack import METHODS, MODES, TRACE_HEADER, run_attack, trace_rows
from .dataset import DATASETS, binarize, load_dataset
from .experiment import (CURVE_HEADER, SUMMARY_HEADER, ExperimentConfig, curve_rows,
                         interpolation_strip, run_experiment, select_samples, summary_rows,
                         write_csv)
from .images import write_image
from .model import ARCHS, TrainConfig, accuracy, build, load_weights, save_weights, train
from .pgd import PgdConfig, binarization_defense_rate, pgd_attack, select_pgd_samples

log = logging.getLogger("ecoba")

DEFAULT_SEED = 0


class UsageError(Exception):
    pass


def _csv_list(choices):
    def parse(text):
        items = [t.strip() for t in text.split(",") if t.strip()]
        bad = [t for t in items if t not in choices]
        if bad:
            raise argparse.ArgumentTypeError(f"invalid choice(s) {bad}; choose from {list(choices)}")
        return items
    return parse


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _common(p, out_help):
    p.add_argument("--config", type=Path, help="key=value option file; flags override it")
    p.add_argument("--data-root", type=Path, default=Path("data"),
                   help="directory holding <dataset>/ IDX files (default: data)")
    p.add_argument("--out", type=Path, required=True, help=out_help)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"default {DEFAULT_SEED}")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker cap for per-sample parallelism (default: all cores)")
    p.add_argument("--threshold", type=float, default=0.5, help="binarization threshold")
    p.add_argument("-v", "--verbose", action="store_true")


def _train_opts(p):
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--batch-size", type=int, default=d.batch_size)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecoba", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier and write ECW1 weights")
    _common(p, "weight file to write; the epoch log goes next to it as <name>.log")
    p.add_argument("--dataset", choices=sorted(DATASETS), default="mnist")
    p.add_argument("--model", choices=ARCHS, default="mlp2")
    p.add_argument("--grayscale", action="store_true", help="train on unthresholded images")
    _train_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack test samples and write traces")
    _common(p, "output directory")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--dataset", choices=sorted(DATASETS), default="mnist")
    p.add_argument("--method", choices=METHODS, default="ecoba")
    p.add_argument("--mode", choices=MODES, default="static")
    p.add_argument("--k-max", type=int, default=30)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--samples", type=int, default=10,
                   help="attack the first N correctly classified test samples")
    g.add_argument("--index", type=_int_list, help="comma-separated test-split indices")
    p.add_argument("--images", action="store_true", help="dump adversarial images at k-max")
    p.add_argument("--strip", type=_int_list, metavar="K,K,...",
                   help="write AP/ECoBA/EP interpolation strips at these k")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="run the attack grid and write summary/curve CSVs")
    _common(p, "output directory")
    p.add_argument("--weights-dir", type=Path, required=True,
                   help="directory with <dataset>_<arch>.ecw files")
    p.add_argument("--datasets", type=_csv_list(sorted(DATASETS)), default=sorted(DATASETS))
    p.add_argument("--archs", type=_csv_list(ARCHS), default=list(ARCHS))
    p.add_argument("--methods", type=_csv_list(METHODS), default=list(METHODS))
    p.add_argument("--mode", choices=MODES, default="static")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--k-max", type=int, default=30)
    p.add_argument("--train-missing", action="store_true",
                   help="train (and save) any missing weight file with default settings")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("demo-pgd", help="PGD on a grayscale model vs binarization")
    _common(p, "output directory")
    p.add_argument("--gray-weights", type=Path, help="grayscale mlp2 (trained if absent)")
    p.add_argument("--binary-weights", type=Path, help="binary mlp2 (trained if absent)")
    p.add_argument("--samples", type=int, default=200, help="PGD-successful samples to count")
    p.add_argument("--epsilon", type=float, default=0.2, help="sub-threshold budget")
    p.add_argument("--super-epsilon", type=float, default=0.6, help="super-threshold budget")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--panels", type=int, default=3, help="samples to dump as five-panel sets")
    _train_opts(p)
    p.set_defaults(func=cmd_demo_pgd)
    parser.subcommands = sub.choices
    return parser


def _read_config(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    values = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (t.strip() for t in line.split("=", 1))
        values[key.replace("_", "-")] = value
    return values


def parse_args(argv):
    parser = make_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    sub = parser.subcommands.get(argv[0]) if argv else None
    if known.config is None or sub is None:
        return parser.parse_args(argv)
    # config values go before the command-line flags so the flags win
    flags = {opt: a for a in sub._actions for opt in a.option_strings}
    extra = []
    for key, value in _read_config(known.config).items():
        action = flags.get(f"--{key}")
        if action is None or key == "config":
            raise UsageError(f"{known.config}: unknown option {key!r}")
        if action.nargs == 0:
            if value.lower() in ("1", "true", "yes", "on"):
                extra.append(f"--{key}")
        else:
            extra += [f"--{key}", value]
    return parser.parse_args(argv[:1] + extra + argv[1:])


def _require_dir(path: Path, what: str):
    if not path.is_dir():
        raise UsageError(f"{what} not found: {path}")


def _require_file(path: Path, what: str):
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")


def _dataset(args, name, grayscale=False):
    _require_dir(args.data_root, "dataset root")
    return load_dataset(name, args.data_root, args.threshold, args.seed, grayscale)


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(args.lr, args.momentum, args.batch_size, args.epochs, args.seed)


def _fit(arch, split, cfg, weights_path: Path):
    model = build(arch, split.class_count, cfg.seed, (1,) + split.image_shape)
    weights_path.parent.mkdir(parents=True, exist_ok=True)
    with open(weights_path.with_suffix(".log"), "w") as fh:
        train(model, split, cfg, fh)
    save_weights(model, weights_path)
    return model


def cmd_train(args) -> int:
    _require_dir(args.data_root, "dataset root")
    cfg = _train_cfg(args)
    split = _dataset(args, args.dataset, args.grayscale)
    model = _fit(args.model, split, cfg, args.out)
    print(f"{args.dataset} {args.model}: train_acc {accuracy(model, split.train_x, split.train_y):.4f} "
          f"test_acc {accuracy(model, split.test_x, split.test_y):.4f} -> {args.out}")
    return 0


def cmd_attack(args) -> int:
    _require_file(args.weights, "weight file")
    if args.k_max < 0:
        raise UsageError("--k-max must be >= 0")
    model = load_weights(args.weights)
    split = _dataset(args, args.dataset)
    if args.index is not None:
        bad = [i for i in args.index if not 0 <= i < len(split.test_x)]
        if bad:
            raise UsageError(f"sample index out of range [0, {len(split.test_x)}): {bad}")
        samples = [split.test_sample(i) for i in args.index]
    else:
        samples = select_samples(model, split, args.samples, args.seed)
    out = args.out / split.name / model.arch_id / args.method
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        trace = run_attack(model, s.image, s.label, args.k_max, args.method, args.mode)
        write_csv(out / f"trace_{s.index}.csv", TRACE_HEADER, trace_rows(trace, s.index))
        if args.images:
            write_image(out / f"adv_{s.index}_k{args.k_max:03d}_pred{trace.step_at(args.k_max).predicted}",
                        trace.image_at(args.k_max))
        if args.strip:
            strip_dir = args.out / split.name / model.arch_id / "strips" / f"sample_{s.index}"
            for method in ("ap", "ecoba", "ep"):
                interpolation_strip(model, s.image, s.label, method, args.strip, strip_dir, args.mode)
        succ = trace.success_step
        print(f"sample {s.index} label {s.label}: success_step {succ if succ is not None else '-'} "
              f"queries {trace.queries}")
    return 0


def cmd_eval(args) -> int:
    _require_dir(args.data_root, "dataset root")
    if not args.train_missing:
        _require_dir(args.weights_dir, "weights directory")
        for name in args.datasets:
            for arch in args.archs:
                _require_file(args.weights_dir / f"{name}_{arch}.ecw", "weight file")
    summary, table = [], []
    for name in args.datasets:
        split = _dataset(args, name)
        for arch in args.archs:
            path = args.weights_dir / f"{name}_{arch}.ecw"
            if path.is_file():
                model = load_weights(path)
            else:
                log.info("training missing %s", path)
                model = _fit(arch, split, TrainConfig(seed=args.seed), path)
            cfg = ExperimentConfig(name, arch, tuple(args.methods), args.samples, args.k_max,
                                   args.seed, args.mode, args.threads)
            report = run_experiment(cfg, model, split)
            cell = args.out / name / arch
            rows = summary_rows(report)
            write_csv(cell / "summary.csv", SUMMARY_HEADER, rows)
            write_csv(cell / "curves.csv", CURVE_HEADER, curve_rows(report))
            summary += rows
            steps = {m: report.summary(m).mean_success_step for m in args.methods}
            table.append(f"{arch},{name}," + ",".join(
                "nan" if np.isnan(steps[m]) else f"{steps[m]:.2f}" for m in args.methods))
            for r in rows:
                print(r)
    write_csv(args.out / "summary.csv", SUMMARY_HEADER, summary)
    write_csv(args.out / "grid.csv", "arch,dataset," + ",".join(args.methods), table)
    return 0


PANELS = ("original", "adv_sub", "adv_super", "bin_sub", "bin_super")
DEFENSE_HEADER = ("regime,epsilon,attacked,fooled,restored,restoration_rate,"
                  "crossed,restoration_rate_crossed,restoration_rate_uncrossed")


def _gray_and_binary_models(args, gray, binary):
    cfg = _train_cfg(args)
    models = []
    for path, split, default in ((args.gray_weights, gray, "mnist_mlp2_gray.ecw"),
                                 (args.binary_weights, binary, "mnist_mlp2.ecw")):
        if path is not None and path.is_file():
            models.append(load_weights(path))
        else:
            path = path or args.out / default
            log.info("training %s", path)
            models.append(_fit("mlp2", split, cfg, path))
    return models


def cmd_demo_pgd(args) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    # the step may not exceed the budget; epsilon 0 is the no-op attack
    sub_alpha = min(args.alpha, args.epsilon) if args.epsilon > 0 else args.alpha
    try:
        sub = PgdConfig(args.epsilon, sub_alpha, args.steps)
        sup = PgdConfig(args.super_epsilon, args.alpha, args.steps)
    except ValueError as exc:
        raise UsageError(str(exc))
    gray = _dataset(args, "mnist", grayscale=True)
    binary = _dataset(args, "mnist")
    m_gray, m_bin = _gray_and_binary_models(args, gray, binary)
    idx = select_pgd_samples(m_gray, m_bin, gray.test_x, gray.test_y, args.threshold)
    x, y = gray.test_x[idx], gray.test_y[idx]
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for regime, cfg in (("sub", sub), ("super", sup)):
        stats, _, _ = binarization_defense_rate(m_gray, m_bin, x, y, cfg, args.threshold, args.samples)
        rows.append(f"{regime},{cfg.epsilon},{stats.attacked},{stats.fooled},{stats.restored},"
                    f"{stats.restoration_rate:.6f},{stats.crossed},"
                    f"{stats.restoration_rate_crossed:.6f},{stats.restoration_rate_uncrossed:.6f}")
        print(f"{regime}-threshold (epsilon={cfg.epsilon}): PGD fooled {stats.fooled}/{stats.attacked}, "
              f"binarization restored {stats.restoration_rate:.3f}")
    write_csv(args.out / "defense.csv", DEFENSE_HEADER, rows)
    for i in range(min(args.panels, len(x))):
        adv_sub = pgd_attack(m_gray, x[i], y[i], sub)
        adv_sup = pgd_attack(m_gray, x[i], y[i], sup)
        panel_dir = args.out / f"sample_{int(gray.test_ids[idx[i]])}"
        panel_dir.mkdir(parents=True, exist_ok=True)
        imgs = (x[i], adv_sub, adv_sup, binarize(adv_sub, args.threshold),
                binarize(adv_sup, args.threshold))
        for name, img in zip(PANELS, imgs):
            write_image(panel_dir / name, img)
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"ecoba: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ecoba: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"ecoba: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
