"""
Command-line driver: ``saprlab {train,attack,sweep,eval}``.

Exit codes: 0 ok, 1 usage, 2 configuration, 3 I/O or file format,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .attacks import AdversarialExample, attack_dataset, budget_violations
from .config import ExperimentConfig, load_config
from .data import Dataset, generate_synthetic_dataset, load_idx_dataset
from .errors import CheckpointError, ConfigError, FormatError, NumericError
from .evaluation import (
    emit_report,
    export_image,
    format_table,
    p_sweep,
    perturbation_image,
    sweep_csv,
    transfer_success_rate,
)
from .models import build_model
from .train import evaluate_accuracy, load_checkpoint, save_checkpoint, train_model

log = logging.getLogger("saprlab")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    if d.kind == "idx":
        return load_idx_dataset(d.idx_images, d.idx_labels, d.image_size, d.channels, d.num_classes,
                                d.test_fraction, cfg.seed)
    return generate_synthetic_dataset(d.num_classes, d.per_class, d.image_size, cfg.seed, d.channels,
                                      d.test_fraction, d.noise, tuple(d.contrast))


def _out_dir(cfg, override):
    out = Path(override or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config_echo(cfg, out: Path):
    (out / "config.json").write_text(cfg.to_json())


def _load_models(cfg: ExperimentConfig, ckpt_dir: Path, names):
    models = {}
    for name in names:
        arch, _ = cfg.model_spec(name)
        models[name] = load_checkpoint(ckpt_dir / f"{name}.ckpt", expected_arch=arch)
    return models


def select_attack_images(cfg: ExperimentConfig, white_box, dataset: Dataset):
    """Clean-correct test images for the white-box model, in dataset order."""
    test = dataset.test
    ids = np.flatnonzero(dataset.split == "test")
    correct = white_box.predict(test.images) == test.labels
    keep = np.flatnonzero(correct)[: cfg.attack.num_images]
    return test.images[keep], test.labels[keep], ids[keep]


def _seed_offset(name: str) -> int:
    return sum(ord(c) for c in name)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, out: Path, args) -> int:
    dataset = build_dataset(cfg)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    rows = ["model,epoch,loss,accuracy"]
    summary = {}
    for name in cfg.model:
        arch, spec = cfg.model_spec(name)
        model = build_model(arch, spec, seed=cfg.seed + _seed_offset(name))
        ts = cfg.train_spec(name)
        history = train_model(model, dataset.train, ts.epochs, ts.lr, cfg.seed, ts.batch_size, ts.momentum,
                              ts.weight_decay, ts.grad_clip, ts.ema)
        rows.extend(f"{name},{h.epoch},{h.loss:.10g},{h.accuracy:.10g}" for h in history)
        save_checkpoint(model, ckpt_dir / f"{name}.ckpt")
        summary[name] = {"test_accuracy": evaluate_accuracy(model, dataset.test)}
        log.info("%s: test accuracy %.4f", name, summary[name]["test_accuracy"])
    (out / "train_log.csv").write_text("\n".join(rows) + "\n")
    (out / "train_summary.json").write_text(json.dumps({"seed": cfg.seed, "models": summary,
                                                        "config": cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    _write_config_echo(cfg, out)
    return EXIT_OK


def _save_examples(path: Path, examples):
    np.savez(
        path,
        image_id=np.array([e.image_id for e in examples], dtype=np.int64),
        x=np.stack([e.x for e in examples]) if examples else np.zeros((0,)),
        x_adv=np.stack([e.x_adv for e in examples]) if examples else np.zeros((0,)),
        label=np.array([e.label for e in examples], dtype=np.int64),
        clean_prediction=np.array([e.clean_prediction for e in examples], dtype=np.int64),
        prediction=np.array([e.prediction for e in examples], dtype=np.int64),
        budget_violations=np.array([e.budget_violations for e in examples], dtype=np.int64),
    )


def load_examples(path) -> list:
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    with data:
        return [
            AdversarialExample(int(i), x, xa, int(y), int(c), int(p), int(v))
            for i, x, xa, y, c, p, v in zip(data["image_id"], data["x"], data["x_adv"], data["label"],
                                            data["clean_prediction"], data["prediction"],
                                            data["budget_violations"])
        ]


def cmd_attack(cfg: ExperimentConfig, out: Path, args) -> int:
    ckpt_dir = Path(args.checkpoints) if args.checkpoints else out / "checkpoints"
    models = _load_models(cfg, ckpt_dir, [cfg.white_box] + cfg.target_names)
    white_box = models[cfg.white_box]
    dataset = build_dataset(cfg)
    images, labels, ids = select_attack_images(cfg, white_box, dataset)
    acfg = cfg.attack_config()
    examples = attack_dataset(images, labels, white_box, acfg, ids, chunk_size=cfg.attack.chunk_size,
                              workers=args.workers, debug=cfg.attack.debug)
    adv_dir = out / "adversarial"
    adv_dir.mkdir(exist_ok=True)
    _save_examples(adv_dir / "examples.npz", examples)
    _write_config_echo(cfg, adv_dir)
    if cfg.eval.export_images:
        for ex in examples:
            export_image(ex.x_adv, adv_dir / f"{ex.image_id:05d}_adv.ppm")
            export_image(perturbation_image(ex.delta), adv_dir / f"{ex.image_id:05d}_delta.ppm")
    targets = {n: models[n] for n in cfg.target_names}
    report = transfer_success_rate(examples, targets, acfg.label, cfg.to_dict(), cfg.seed, cfg.eval.ms_ssim)
    emit_report(report, out / "report")
    violations = sum(budget_violations(e.x_adv, e.x, acfg.epsilon) for e in examples)
    if violations or any(e.budget_violations for e in examples):
        raise NumericError(f"{violations} adversarial examples violate the perturbation budget")
    _write_config_echo(cfg, out)
    print((out / "report.txt").read_text(), end="")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, out: Path, args) -> int:
    ckpt_dir = Path(args.checkpoints) if args.checkpoints else out / "checkpoints"
    models = _load_models(cfg, ckpt_dir, [cfg.white_box] + cfg.target_names)
    white_box = models[cfg.white_box]
    dataset = build_dataset(cfg)
    images, labels, ids = select_attack_images(cfg, white_box, dataset)
    targets = {n: models[n] for n in cfg.target_names}
    records = p_sweep(cfg.eval.p_grid, cfg.attack_config(), white_box, targets, images, labels, ids,
                      chunk_size=cfg.attack.chunk_size, workers=args.workers)
    (out / "sweep.csv").write_text(sweep_csv(records))
    payload = {"seed": cfg.seed, "config": cfg.to_dict(),
               "records": [r.__dict__ for r in records]}
    (out / "sweep.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write_config_echo(cfg, out)
    print((out / "sweep.csv").read_text(), end="")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, out: Path, args) -> int:
    ckpt_dir = Path(args.checkpoints) if args.checkpoints else out / "checkpoints"
    adv_dir = Path(args.adversarial) if args.adversarial else out / "adversarial"
    examples = load_examples(adv_dir / "examples.npz")
    targets = _load_models(cfg, ckpt_dir, cfg.target_names)
    report = transfer_success_rate(examples, targets, cfg.attack_config().label, cfg.to_dict(), cfg.seed,
                                   cfg.eval.ms_ssim)
    emit_report(report, Path(args.report) if args.report else out / "eval_report")
    print(format_table([report]), end="")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "sweep": cmd_sweep, "eval": cmd_eval}


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="saprlab", description="Patch-restructuring transfer attacks on a desk-scale ViT.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    helps = {
        "train": "train the white-box ViT and the transfer targets",
        "attack": "craft adversarial examples and score their transfer",
        "sweep": "sweep the restructuring threshold over eval.p_grid",
        "eval": "re-score saved adversarial examples against the targets",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("config", help="experiment config (JSON)")
        p.add_argument("--output-dir", help="override output_dir from the config")
        p.add_argument("--seed", type=int, help="override the global seed")
        if name != "train":
            p.add_argument("--checkpoints", help="checkpoint directory (default: <output_dir>/checkpoints)")
        if name in ("attack", "sweep"):
            p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                           help="parallel attack worker processes (default: available cores)")
        if name == "eval":
            p.add_argument("--adversarial", help="directory holding examples.npz")
            p.add_argument("--report", help="report path prefix (default: <output_dir>/eval_report)")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = _out_dir(cfg, args.output_dir)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"saprlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError, CheckpointError) as exc:
        print(f"saprlab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"saprlab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
