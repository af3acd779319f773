"""
The `capsattack` command line.

Commands register themselves on the module-level `cli` with the `command()`
decorator; the argument parser is assembled from the registry when `main` runs.
Exit codes: 0 on success, 2 on usage or configuration errors, 1 on any other
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from datetime import datetime, timezone
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from capsattack import __version__
from capsattack.analysis import (
    affine_eval,
    bench_attack_time,
    perturbation_norms,
    rate_report,
    transfer_eval,
    vote_agreement_histogram,
)
from capsattack.attacks import run_attacks
from capsattack.checkpoint import load_checkpoint, save_checkpoint
from capsattack.config import AttackConfig, DataConfig, TrainConfig
from capsattack.data import Splits, load_adversarial_set, load_splits, save_adversarial_set
from capsattack.enums import AtMode, AttackFamily, ClassSelector, LossKind, ModelKind, Precision, TargetHead, TwoStageSchedule
from capsattack.errors import CalibrationError, CapsAttackError, ConfigError, OutputExistsError
from capsattack.models import build_model
from capsattack.reconstruction import benign_errors, calibrate_threshold, detect
from capsattack.training import evaluate, train
from capsattack.utils import dump_json, get_capsattack_filepath, setup_logging

__all__ = ("Command", "CommandLine", "RunManifest", "cli", "main")

logger = logging.getLogger(__name__)

Argument = Tuple[Tuple[str, ...], Dict[str, Any]]


def _choices(enum) -> List[str]:
    return [member.value for member in enum]


COMMON: List[Argument] = [
    (("--dataset",), {"default": "synthetic", "help": "'synthetic' or a directory of IDX files"}),
    (("--out",), {"required": True, "help": "output directory"}),
    (("--seed",), {"type": int, "default": 0, "help": "base seed of the run"}),
    (("--data-seed",), {"type": int, "default": 0, "help": "seed of the synthetic dataset"}),
    (("--config",), {"help": "JSON file with 'data', 'training' and 'attack' sections"}),
    (("--force",), {"action": "store_true", "help": "write into an existing output directory"}),
    (("--jobs",), {"type": int, "default": 1, "help": "attack worker threads"}),
    (("-v", "--verbose"), {"action": "count", "default": 0}),
    (("-q", "--quiet"), {"action": "count", "default": 0}),
]

MODEL = [(("--model",), {"required": True, "help": "checkpoint file"})]

SPLIT = [
    (("--split",), {"choices": ["train", "validation", "test"], "default": "test"}),
    (("--limit",), {"type": int, "help": "use only the first N examples of the split"}),
]

ATTACK: List[Argument] = [
    (("--attack",), {"choices": _choices(AttackFamily), "help": "attack family"}),
    (("--target",), {"choices": _choices(TargetHead), "help": "head the loss is computed on"}),
    (("--eps",), {"type": float, "help": "l-infinity radius"}),
    (("--alpha",), {"type": float, "help": "step size"}),
    (("--iters",), {"type": int, "help": "number of steps"}),
    (("--mu",), {"type": float, "help": "momentum decay of mim"}),
    (("--targeted",), {"help": "target class index or 'random'"}),
    (("--detection-aware",), {"action": "store_true", "help": "add the reconstruction-error stage"}),
    (("--beta",), {"type": float, "help": "balance of the two detection-aware stages"}),
    (("--schedule",), {"choices": _choices(TwoStageSchedule)}),
    (("--recon-ascent",), {"action": "store_const", "const": True, "default": None}),
    (("--random-start",), {"dest": "random_start", "action": "store_const", "const": True, "default": None}),
    (("--no-random-start",), {"dest": "random_start", "action": "store_const", "const": False}),
    (("--batch-size",), {"type": int, "help": "examples perturbed together"}),
]

ATTACK_FLAGS = {
    "family": "attack",
    "target_head": "target",
    "epsilon": "eps",
    "alpha": "alpha",
    "iterations": "iters",
    "momentum_decay": "mu",
    "targeted": "targeted",
    "beta": "beta",
    "schedule": "schedule",
    "recon_ascent": "recon_ascent",
    "random_start": "random_start",
    "batch_size": "batch_size",
}

TRAIN: List[Argument] = [
    (("--kind",), {"choices": _choices(ModelKind), "default": ModelKind.capsnet.value}),
    (("--arch",), {"default": "toy", "help": "architecture preset"}),
    (("--recon",), {"default": "toy", "help": "reconstruction preset or 'none'"}),
    (("--preset",), {"default": "desk", "help": "training schedule preset"}),
    (("--precision",), {"choices": _choices(Precision), "default": Precision.single.value}),
    (("--epochs",), {"type": int}),
    (("--batch-size",), {"type": int}),
    (("--lr",), {"type": float}),
    (("--loss",), {"choices": _choices(LossKind)}),
    (("--at-mode",), {"choices": _choices(AtMode)}),
    (("--at-iters",), {"type": int}),
    (("--at-eps",), {"type": float}),
    (("--votes-weight",), {"type": float}),
]

TRAIN_FLAGS = {
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "lr",
    "loss": "loss",
    "at_mode": "at_mode",
    "at_iterations": "at_iters",
    "at_epsilon": "at_eps",
    "votes_weight": "votes_weight",
}


class Command:
    """A registered subcommand: its name, handler and the arguments it accepts."""

    def __init__(self, name: str, func: Callable[[argparse.Namespace, "RunManifest"], None], help: Optional[str], arguments: Sequence[Argument]) -> None:
        self.name = name
        self.func = func
        self.help = help
        self.arguments = list(arguments)

    def __repr__(self):
        return f"<capsattack.Command {self.name}>"

    @property
    def path(self) -> List[str]:
        return self.name.split()


class RunManifest:
    """
    Everything needed to repeat a run: the command, its argv, the resolved
    configuration, the seed, the package version and the files written.
    """

    def __init__(self, command: str, argv: Sequence[str], seed: int, out: str) -> None:
        self.command = command
        self.argv = list(argv)
        self.seed = seed
        self.out = out
        self.config: Dict[str, Any] = {}
        self.outputs: List[str] = []

    def output(self, name: str) -> str:
        """
        Reserve `name` inside the output directory and return its path. The
        directory is created on the first reservation, so a run refused before
        writing anything leaves nothing behind.
        """
        os.makedirs(self.out, exist_ok=True)
        if name not in self.outputs:
            self.outputs.append(name)
        return os.path.join(self.out, name)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "argv": self.argv,
            "seed": self.seed,
            "config": self.config,
            "outputs": sorted(self.outputs),
            "version": __version__,
            "git": git_stamp(),
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }

    def write(self) -> None:
        os.makedirs(self.out, exist_ok=True)
        dump_json(self, os.path.join(self.out, "manifest.json"))


def git_stamp() -> Optional[str]:
    try:
        result = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=get_capsattack_filepath(""),
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    if result.returncode != 0:
        return None
    return result.stdout.strip() or None


class CommandLine:
    def __init__(self, prog: str) -> None:
        self.prog = prog
        self.commands: List[Command] = []

    def register_command(self, func, name: Optional[str] = None, help: Optional[str] = None, arguments: Sequence[Argument] = ()) -> None:
        """
        Register a command. Usually the command() decorator is used instead.

        Args:
            func:
                Called with the parsed arguments and the run manifest.
            name:
                Words of the command, e.g. "analyze votes". Defaults to the function name.
            help:
                One line shown by --help.
            arguments:
                (flags, keyword arguments) pairs passed to `add_argument`.
        """
        name = func.__name__.replace("_", "-") if name is None else name
        if any(command.name == name for command in self.commands):
            raise ConfigError(f"command {name!r} is already registered")
        self.commands.append(Command(name, func, help, arguments))

    def command(self, name: Optional[str] = None, help: Optional[str] = None, arguments: Sequence[Argument] = ()):
        """A decorator for registering commands."""

        def decorator(func):
            self.register_command(func, name, help, arguments)
            return func

        return decorator

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(prog=self.prog, description="Attacks on capsule networks and their analysis.")
        parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
        root = parser.add_subparsers(dest="command", required=True)
        groups: Dict[str, argparse._SubParsersAction] = {}

        for command in self.commands:
            words = command.path
            subparsers = root
            for depth, word in enumerate(words[:-1]):
                key = " ".join(words[: depth + 1])
                if key not in groups:
                    group = subparsers.add_parser(word, help=f"{word} subcommands")
                    groups[key] = group.add_subparsers(dest=f"{key.replace(' ', '_')}_command", required=True)
                subparsers = groups[key]
            sub = subparsers.add_parser(words[-1], help=command.help)
            for flags, kwargs in command.arguments:
                sub.add_argument(*flags, **kwargs)
            sub.set_defaults(handler=command)
        return parser

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        argv = list(sys.argv[1:] if argv is None else argv)
        parser = self.build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            return int(e.code or 0)

        setup_logging(args.verbose - args.quiet)
        command: Command = args.handler
        try:
            manifest = RunManifest(command.name, argv, args.seed, args.out)
            check_output(args.out, args.force)
            command.func(args, manifest)
            manifest.write()
        except (ConfigError, OutputExistsError) as e:
            logger.error("%s", e)
            return 2
        except (CapsAttackError, OSError) as e:
            logger.error("%s", e)
            return 1
        return 0


def check_output(out: str, force: bool) -> None:
    if os.path.exists(out) and not force:
        raise OutputExistsError(f"output directory {out} exists, pass --force to reuse it")


def read_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            values = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return values


def _merge(base: dict, args: argparse.Namespace, flags: Dict[str, str]) -> dict:
    values = dict(base)
    for key, attr in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            values[key] = value
    return values


def resolve_attack(args: argparse.Namespace, file_config: dict) -> AttackConfig:
    values = _merge(file_config.get("attack", {}), args, ATTACK_FLAGS)
    values["seed"] = args.seed
    return AttackConfig.from_dict(values)


def resolve_data(args: argparse.Namespace, file_config: dict) -> DataConfig:
    values = DataConfig.preset().to_dict()
    values.update(file_config.get("data", {}))
    values["source"] = args.dataset
    return DataConfig.from_dict(values)


def load_data(args: argparse.Namespace, file_config: dict, manifest: RunManifest) -> Splits:
    config = resolve_data(args, file_config)
    manifest.config["data"] = config.to_dict()
    manifest.config["data_seed"] = args.data_seed
    return load_splits(config, args.data_seed)


def select(args: argparse.Namespace, splits: Splits):
    return splits[args.split].head(args.limit)


def calibrated_threshold(model, splits: Splits, percentile: float = 0.95, correct_only: bool = False):
    errors = benign_errors(model, splits.validation.images, splits.validation.labels, correct_only=correct_only)
    return calibrate_threshold(errors, percentile)


cli = CommandLine("capsattack")


@cli.command(name="train", help="train a model and save its checkpoint", arguments=COMMON + TRAIN)
def train_command(args: argparse.Namespace, manifest: RunManifest) -> None:
    file_config = read_config_file(args.config)
    splits = load_data(args, file_config, manifest)

    overrides = _merge(file_config.get("training", {}), args, TRAIN_FLAGS)
    overrides["seed"] = args.seed
    config = TrainConfig.preset(args.preset, **overrides)
    recon = None if args.recon == "none" else args.recon
    model = build_model(args.kind, args.arch, recon, seed=args.seed, precision=args.precision)
    manifest.config.update({"training": config.to_dict(), "model": model.describe(), "precision": args.precision})

    train(model, splits.train, config, test=splits.test, metrics_path=manifest.output("metrics.jsonl"))
    save_checkpoint(model, manifest.output("model.caps"))
    dump_json(evaluate(model, splits.test), manifest.output("evaluation.json"))


@cli.command(help="attack a split and save the adversarial set", arguments=COMMON + MODEL + SPLIT + ATTACK)
def attack(args: argparse.Namespace, manifest: RunManifest) -> None:
    file_config = read_config_file(args.config)
    splits = load_data(args, file_config, manifest)
    model = load_checkpoint(args.model)
    config = resolve_attack(args, file_config)
    manifest.config.update({"attack": config.to_dict(), "detection_aware": args.detection_aware, "model": args.model})

    theta = calibrated_threshold(model, splits) if model.recon is not None else None
    if args.detection_aware and theta is None:
        raise ConfigError("--detection-aware needs a model with a reconstruction network")
    dataset = select(args, splits)
    results = run_attacks(
        model,
        dataset.images,
        dataset.labels,
        config,
        theta=theta,
        detection_aware=args.detection_aware,
        jobs=args.jobs,
    )
    save_adversarial_set(results, manifest.output("adversarial"))

    rates: Dict[str, Any] = {"count": len(results), "success_rate": float(np.mean([r.success for r in results])) if results else 0.0}
    if theta is not None:
        rates.update(rate_report(results).to_dict())
        rates["theta"] = theta.theta
    dump_json(rates, manifest.output("rates.json"))

    successful = [r.delta for r in results if r.success]
    if successful:
        dump_json(perturbation_norms(successful), manifest.output("norms.json"))


@cli.command(name="detect-eval", help="calibrate the reconstruction-error detector", arguments=COMMON + MODEL + [
    (("--percentile",), {"type": float, "default": 0.95}),
])
def detect_eval(args: argparse.Namespace, manifest: RunManifest) -> None:
    file_config = read_config_file(args.config)
    splits = load_data(args, file_config, manifest)
    model = load_checkpoint(args.model)
    manifest.config.update({"percentile": args.percentile, "model": args.model})

    threshold = calibrated_threshold(model, splits, args.percentile)
    try:
        sensitivity = calibrated_threshold(model, splits, args.percentile, correct_only=True)
    except CalibrationError:
        logger.warning("no correctly classified validation images, skipping the correct-only threshold")
        sensitivity = None
    validation = detect(splits.validation.images, model, threshold)
    test = detect(splits.test.images, model, threshold)
    dump_json(threshold, manifest.output("threshold.json"))
    dump_json(
        {
            "theta": threshold.theta,
            "validation_flag_rate": validation.flag_rate,
            "test_flag_rate": test.flag_rate,
            "correct_only_theta": None if sensitivity is None else sensitivity.theta,
            "correct_only_count": 0 if sensitivity is None else sensitivity.sample_count,
        },
        manifest.output("detection.json"),
    )


@cli.command(name="analyze votes", help="vote-agreement histogram", arguments=COMMON + MODEL + SPLIT + [
    (("--adv",), {"help": "adversarial set directory; clean split when omitted"}),
    (("--selector",), {"choices": _choices(ClassSelector), "default": ClassSelector.ground_truth.value}),
    (("--successful-only",), {"action": "store_true"}),
])
def analyze_votes(args: argparse.Namespace, manifest: RunManifest) -> None:
    model = load_checkpoint(args.model)
    manifest.config.update({"selector": args.selector, "adv": args.adv, "model": args.model, "successful_only": args.successful_only})
    if args.adv is not None:
        adversarial = load_adversarial_set(args.adv)
        if args.successful_only:
            adversarial = adversarial.successful()
        images, labels = adversarial.adversarial, adversarial.labels
    else:
        dataset = select(args, load_data(args, read_config_file(args.config), manifest))
        images, labels = dataset.images, dataset.labels

    histogram = vote_agreement_histogram(model, images, labels, args.selector)
    histogram.to_csv(manifest.output("histogram.csv"))
    dump_json(histogram, manifest.output("summary.json"))


@cli.command(name="analyze norms", help="l0, l1 and l2 norms of successful perturbations", arguments=COMMON + [
    (("--adv",), {"required": True}),
])
def analyze_norms(args: argparse.Namespace, manifest: RunManifest) -> None:
    manifest.config["adv"] = args.adv
    adversarial = load_adversarial_set(args.adv).successful()
    dump_json(perturbation_norms(adversarial.deltas), manifest.output("norms.json"))


@cli.command(name="analyze transfer", help="transfer success rate on another model", arguments=COMMON + MODEL + [
    (("--adv",), {"required": True}),
])
def analyze_transfer(args: argparse.Namespace, manifest: RunManifest) -> None:
    manifest.config.update({"adv": args.adv, "model": args.model})
    adversarial = load_adversarial_set(args.adv)
    report = transfer_eval(adversarial.adversarial, adversarial.labels, adversarial.success, load_checkpoint(args.model))
    dump_json(report, manifest.output("transfer.json"))


@cli.command(name="analyze affine", help="accuracy on translated and rotated inputs", arguments=COMMON + MODEL + SPLIT + ATTACK + [
    (("--translate",), {"type": int, "default": 2}),
    (("--rotate",), {"type": float, "default": 30.0}),
    (("--clean-only",), {"action": "store_true"}),
])
def analyze_affine(args: argparse.Namespace, manifest: RunManifest) -> None:
    file_config = read_config_file(args.config)
    dataset = select(args, load_data(args, file_config, manifest))
    model = load_checkpoint(args.model)
    config = None if args.clean_only else resolve_attack(args, file_config)
    manifest.config.update(
        {"translate": args.translate, "rotate": args.rotate, "attack": None if config is None else config.to_dict(), "model": args.model}
    )
    evaluation = affine_eval(model, dataset, args.translate, args.rotate, config, seed=args.seed, jobs=args.jobs)
    dump_json(evaluation, manifest.output("affine.json"))


@cli.command(help="time attacks per adversarial example", arguments=COMMON + MODEL + SPLIT + ATTACK)
def bench(args: argparse.Namespace, manifest: RunManifest) -> None:
    file_config = read_config_file(args.config)
    dataset = select(args, load_data(args, file_config, manifest))
    model = load_checkpoint(args.model)
    config = resolve_attack(args, file_config)
    manifest.config.update({"attack": config.to_dict(), "model": args.model})
    dump_json(bench_attack_time(model, config, dataset.images, dataset.labels), manifest.output("timing.json"))


def main(argv: Optional[Sequence[str]] = None) -> int:
    return cli.run(argv)


if __name__ == "__main__":
    sys.exit(main())
