"""Command-line entry point: ``advrobust {train,attack,defend,eval,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import serialize
from .attack import AttackConfig, fgsm_batch, save_adversarial
from .data import Normalization
from .defense import AdvTrainConfig, adversarial_fit
from .model import load_model, save_model
from .pipeline import DATASETS, SynthSpec, class_names, load_split, new_model
from .report import (
    accuracy, dump_image_pair, export_report, format_table,
    read_reports, robustness_report,
)
from .serialize import atomic_write_bytes
from .train import TrainConfig, fit

log = logging.getLogger("advrobust")


class UsageError(Exception):
    """Bad invocation: exit status 2."""


def _epsilon(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid epsilon {text!r}") from None
    if not v >= 0 or v == float("inf"):
        raise argparse.ArgumentTypeError(f"epsilon must be a finite non-negative number, got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value file; explicit flags override it")
    p.add_argument("--dataset", choices=DATASETS, default="synth", help="dataset name")
    p.add_argument("--data-dir", metavar="DIR", help="directory holding the dataset files")
    p.add_argument("--seed", type=int, default=0, help="seed for initialization, shuffling and dropout")
    p.add_argument("--out", metavar="PATH", help="primary output file")
    p.add_argument("--train-limit", type=_positive_int, metavar="N", help="use a seeded subset of N training samples")
    p.add_argument("--test-limit", type=_positive_int, metavar="N", help="evaluate on a seeded subset of N test samples")
    p.add_argument("--synth-n", type=_positive_int, default=SynthSpec.n_train, help="synthetic training samples")
    p.add_argument("--synth-classes", type=_positive_int, default=SynthSpec.classes, help="synthetic class count")
    p.add_argument("--synth-separation", type=float, default=SynthSpec.separation,
                   help="synthetic template separation in noise standard deviations")
    p.add_argument("--synth-size", type=_positive_int, default=SynthSpec.size, help="synthetic image side length")
    p.add_argument("--synth-channels", type=_positive_int, default=SynthSpec.channels, help="synthetic channels")
    p.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic dataset")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=10, help="training epochs")
    p.add_argument("--batch", type=_positive_int, default=64, help="minibatch size")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate")
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam", help="optimizer")
    p.add_argument("--patience", type=int, default=5, help="early-stopping patience (0 disables)")
    p.add_argument("--val-frac", type=float, default=0.1, help="fraction of training data held out for validation")
    p.add_argument("--history", metavar="PATH", help="write the per-epoch history as CSV")


def _add_attack_flags(p: argparse.ArgumentParser, epsilon_default: Optional[float] = None) -> None:
    p.add_argument("--epsilon", type=_epsilon, default=epsilon_default, required=epsilon_default is None,
                   help="FGSM perturbation size in normalized pixel units")
    p.add_argument("--dump-images", metavar="DIR", help="write clean/adversarial image pairs here")
    p.add_argument("--dump-count", type=int, default=4, help="number of image pairs to dump")
    p.add_argument("--no-clip", action="store_true", help="do not clip adversarial pixels to the valid range")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advrobust", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a CNN and save it")
    _add_shared(p)
    _add_train_flags(p)

    p = sub.add_parser("attack", help="FGSM-attack a saved model and write a robustness report")
    _add_shared(p)
    p.add_argument("--model", required=True, metavar="PATH", help="plainly trained model file")
    p.add_argument("--defended", metavar="PATH", help="adversarially trained model to re-attack")
    _add_attack_flags(p)
    p.add_argument("--save-adv", metavar="PATH", help="export the adversarial test set (tensor block format)")

    p = sub.add_parser("defend", help="adversarially train and save the robust model")
    _add_shared(p)
    _add_train_flags(p)
    _add_attack_flags(p, epsilon_default=0.1)
    p.add_argument("--model", metavar="PATH", help="model whose architecture (and weights, with --finetune) to use")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--from-scratch", dest="finetune", action="store_false", help="re-initialize parameters (default)")
    mode.add_argument("--finetune", dest="finetune", action="store_true", help="continue from the given model's weights")
    p.add_argument("--eval-epsilon", type=_epsilon, help="epsilon for the optional report (defaults to --epsilon)")
    p.add_argument("--report", metavar="PATH", help="also attack the result on the test split and write a report")

    p = sub.add_parser("eval", help="clean test accuracy of a saved model")
    _add_shared(p)
    p.add_argument("--model", required=True, metavar="PATH", help="model file")

    p = sub.add_parser("report", help="merge report files into one table")
    p.add_argument("--config", metavar="PATH", help="key = value file; explicit flags override it")
    p.add_argument("inputs", nargs="+", metavar="REPORT", help="CSV or JSON report files")
    p.add_argument("--out", metavar="PATH", help="merged output (.csv or .json)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser.subcommands = sub.choices
    return parser


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _config_path(argv: Sequence[str]) -> Optional[str]:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _parse(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` become defaults that flags override."""
    config = _config_path(argv)
    command = next((t for t in argv if t in parser.subcommands), None)
    if config and command:
        if not Path(config).is_file():
            raise UsageError(f"config file {config} not found")
        subparser = parser.subcommands[command]
        by_dest = {a.dest: a for a in subparser._actions}
        defaults = {}
        for key, raw in read_config_file(config).items():
            action = by_dest.get(key)
            if action is None or key in ("help", "config"):
                raise UsageError(f"{config}: unknown key {key!r}")
            try:
                if action.nargs == 0:
                    flag = raw.lower() in ("1", "true", "yes", "on")
                    defaults[key] = flag if action.const is not False else not flag
                else:
                    defaults[key] = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{config}: bad value for {key}: {exc}") from None
            if action.choices and defaults[key] not in action.choices:
                raise UsageError(f"{config}: {key} must be one of {list(action.choices)}")
            action.required = False
        subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _synth(args) -> SynthSpec:
    return SynthSpec(n_train=args.synth_n, n_test=max(args.synth_n // 2, args.synth_classes),
                     channels=args.synth_channels, size=args.synth_size, classes=args.synth_classes,
                     separation=args.synth_separation, seed=args.data_seed)


def _require_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} {path} does not exist")
    return path


def _check_data_dir(args) -> None:
    if args.dataset != "synth":
        if not args.data_dir:
            raise UsageError(f"--data-dir is required for dataset {args.dataset}")
        if not Path(args.data_dir).is_dir():
            raise UsageError(f"data directory {args.data_dir} does not exist")


def _train_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch, optimizer=args.optimizer,
                       seed=args.seed, patience=args.patience, val_fraction=args.val_frac)


def _test_split(args, norm: Normalization):
    return load_split(args.dataset, args.data_dir, "test", norm, args.test_limit, args.seed, _synth(args))


def _write_report(report, path) -> None:
    fmt = "json" if str(path).endswith(".json") else "csv"
    export_report(report, fmt, path)


def cmd_train(args) -> int:
    if not args.out:
        raise UsageError("--out is required")
    _check_data_dir(args)
    train = load_split(args.dataset, args.data_dir, "train", None, args.train_limit, args.seed, _synth(args))
    model = new_model(train, args.seed)
    model, history = fit(model, train, _train_config(args))
    if args.history:
        history.to_csv(args.history)
    save_model(model, args.out)
    print(f"trained {args.dataset}: {len(history)} epochs, train accuracy {accuracy(model, train):.4f}")
    return 0


def _dump(args, model, test, batch, norm) -> None:
    out = Path(args.dump_images)
    out.mkdir(parents=True, exist_ok=True)
    names = class_names(args.dataset, test.num_classes)
    flipped = np.flatnonzero(batch.flipped)
    order = list(flipped) + [i for i in range(len(test)) if not batch.flipped[i]]
    for i in order[:args.dump_count]:
        dump_image_pair(test.images[i], batch.x_adv[i], int(batch.clean_pred[i]), int(batch.adv_pred[i]),
                        names, out / f"{args.dataset}_{i:05d}", norm, int(test.labels[i]))


def cmd_attack(args) -> int:
    model = load_model(_require_file(args.model, "--model"))
    defended = load_model(_require_file(args.defended, "--defended")) if args.defended else None
    _check_data_dir(args)
    norm = Normalization.from_dict(model.config.normalization)
    test = _test_split(args, norm)
    report = robustness_report(model, defended, test, args.epsilon, args.dataset,
                               clip=not args.no_clip, seed=args.seed)
    if args.dump_images or args.save_adv:
        batch = fgsm_batch(model, test, AttackConfig.for_data(args.epsilon, test, not args.no_clip))
        if args.dump_images:
            _dump(args, model, test, batch, norm)
        if args.save_adv:
            save_adversarial(args.save_adv, batch, args.epsilon, test.labels)
    if args.out:
        _write_report(report, args.out)
    print(report.summary())
    return 0


def cmd_defend(args) -> int:
    if not args.out:
        raise UsageError("--out is required")
    base = load_model(_require_file(args.model, "--model")) if args.model else None
    _check_data_dir(args)
    norm = Normalization.from_dict(base.config.normalization) if base else None
    train = load_split(args.dataset, args.data_dir, "train", norm, args.train_limit, args.seed, _synth(args))
    if base is None:
        base = new_model(train, args.seed)
    cfg = AdvTrainConfig(base=_train_config(args), epsilon=args.epsilon,
                         clip=None if args.no_clip else train.normalization.valid_range(),
                         from_scratch=not args.finetune)
    model, history = adversarial_fit(base, train, cfg)
    report = None
    if args.report:
        # the base model, when given, is the undefended reference in the report
        test = _test_split(args, train.normalization)
        eps = args.eval_epsilon if args.eval_epsilon is not None else args.epsilon
        if args.model:
            report = robustness_report(load_model(args.model), model, test, eps, args.dataset,
                                       clip=not args.no_clip, seed=args.seed)
        else:
            report = robustness_report(model, None, test, eps, args.dataset,
                                       clip=not args.no_clip, seed=args.seed)
    if args.history:
        history.to_csv(args.history)
    if report is not None:
        _write_report(report, args.report)
        print(report.summary())
    save_model(model, args.out)
    print(f"adversarially trained {args.dataset} at eps={args.epsilon:g}: {len(history)} epochs")
    return 0


def cmd_eval(args) -> int:
    model = load_model(_require_file(args.model, "--model"))
    _check_data_dir(args)
    test = _test_split(args, Normalization.from_dict(model.config.normalization))
    acc = accuracy(model, test)
    if args.out:
        atomic_write_bytes(args.out, json.dumps({"dataset": args.dataset, "clean_acc": acc,
                                                 "n_evaluated": len(test), "seed": args.seed}).encode())
    print(f"{args.dataset} clean accuracy {acc:.4f} ({100 * acc:.2f}%) on {len(test)} samples")
    return 0


def cmd_report(args) -> int:
    reports = []
    for path in args.inputs:
        reports.extend(read_reports(_require_file(path, "report")))
    if args.out:
        _write_report(reports, args.out)
    print(format_table(reports))
    return 0


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "defend": cmd_defend,
            "eval": cmd_eval, "report": cmd_report}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"advrobust: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"advrobust {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, serialize.FormatError) as exc:
        print(f"advrobust {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
