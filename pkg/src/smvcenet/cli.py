"""Command-line entry point.

    smvcenet train --config F [--override k=v ...]
    smvcenet eval --config F --checkpoint P
    smvcenet domain-eval --config F --checkpoint P --target-root D --class-map M
    smvcenet predict --image I --checkpoint P --out O
    smvcenet synth --out D --n N --size S --classes K --seed X

Exit status: 0 success, 1 user error, 2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import subprocess
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from PIL import Image

from . import __version__
from .checkpoint import Checkpoint, check_compatible, load_checkpoint, save_checkpoint
from .config import Config, from_dict, parse_config
from .data import generate_synthetic_dataset, image_to_tensor, load_dataset
from .errors import ConfigError, InvariantViolation, LoadError, UserError
from .fileio import atomic_write_bytes, atomic_write_text
from .train import (DomainEvalConfig, evaluate_fold, make_model, make_optimizer,
                    run_domain_adaptation, train)

log = logging.getLogger("smvcenet")


def version_string() -> str:
    """``git describe``-style version, falling back to the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def set_determinism(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled)


def log_run_header(cfg: Config, model) -> dict:
    header = {
        "config_hash": cfg.hash,
        "seed": cfg["seed"],
        "version": version_string(),
        "parameters": model.parameter_counts(),
    }
    log.info("run %s", json.dumps(header, sort_keys=True))
    return header


def append_jsonl(path: Path, records: List[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    existing = path.read_text() if path.exists() else ""
    text = existing + "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    atomic_write_text(path, text)


def model_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    cfg = from_dict(ckpt.config)
    model = make_model(cfg.model_config(), cfg["seed"], load_backbone_weights=False)
    check_compatible(model, ckpt)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model, cfg, ckpt


# --- commands ---------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = parse_config(args.config, args.override)
    if not cfg["data.root"]:
        raise ConfigError("data.root is required for training", "data.root")
    set_determinism(cfg["deterministic"])
    out_dir = Path(cfg["output.dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(cfg["data.root"])
    tcfg = cfg.train_config()
    model = make_model(cfg.model_config(), cfg["seed"])
    log_run_header(cfg, model)
    atomic_write_text(out_dir / "manifest.json",
                      json.dumps(model.parameter_manifest(), sort_keys=True, indent=1))

    def on_checkpoint(iteration, optimizer):
        ckpt = Checkpoint(model.state_dict(), cfg.as_dict(), cfg.hash, iteration, optimizer.state_dict())
        save_checkpoint(out_dir / f"checkpoint-{iteration:06d}.ckpt", ckpt)
        log.info("checkpoint at iteration %d", iteration)

    optimizer = make_optimizer(model, tcfg)
    result = train(model, dataset, tcfg, optimizer, on_checkpoint=on_checkpoint)
    if not result.audit_clean(tcfg.fold):
        raise InvariantViolation("training sampled a test-class episode")
    audit = "".join(json.dumps({"iteration": it, "class": c, "image": i}) + "\n"
                    for it, c, i in result.audit)
    atomic_write_text(out_dir / "audit.jsonl", audit)
    atomic_write_text(out_dir / "losses.json", json.dumps(result.losses))
    save_checkpoint(out_dir / "checkpoint.ckpt",
                    Checkpoint(model.state_dict(), cfg.as_dict(), cfg.hash, result.iterations,
                               optimizer.state_dict()))
    print(json.dumps({"iterations": result.iterations, "final_loss": result.losses[-1] if result.losses else None,
                      "checkpoint": str(out_dir / "checkpoint.ckpt")}))
    return 0


def _eval_config(args):
    model, ckpt_cfg, _ = model_from_checkpoint(args.checkpoint)
    cfg = parse_config(args.config, args.override)
    if cfg.model_config() != ckpt_cfg.model_config():
        raise ConfigError("config describes a different architecture than the checkpoint")
    if not cfg["data.root"]:
        raise ConfigError("data.root is required", "data.root")
    set_determinism(cfg["deterministic"])
    log_run_header(cfg, model)
    return model, cfg


def cmd_eval(args) -> int:
    model, cfg = _eval_config(args)
    dataset = load_dataset(cfg["data.root"])
    report = evaluate_fold(model, dataset, cfg.fold(), args.split, cfg["eval.n_episodes"], cfg["eval.seed"])
    record = report.to_record(cfg["eval.seed"], cfg.hash)
    append_jsonl(cfg.metrics_path(), [record])
    print(json.dumps(record, sort_keys=True))
    return 0


def load_class_map(path) -> dict:
    """JSON object ``{"<source class id>": <target class id>, ...}``."""
    try:
        raw = json.loads(Path(path).read_text())
        return {int(k): int(v) for k, v in raw.items()}
    except (OSError, ValueError, AttributeError, TypeError) as exc:
        raise ConfigError(f"bad class map {path}: {exc}") from exc


def cmd_domain_eval(args) -> int:
    model, cfg = _eval_config(args)
    source = load_dataset(cfg["data.root"])
    target = load_dataset(args.target_root)
    dcfg = DomainEvalConfig(cfg.train_config(), cfg["eval.n_episodes"], cfg["eval.seed"], run_training=False)
    reports = run_domain_adaptation(model, source, target, load_class_map(args.class_map), dcfg)
    records = [r.to_record(cfg["eval.seed"], cfg.hash) for r in reports]
    append_jsonl(cfg.metrics_path(), records)
    for r in records:
        print(json.dumps(r, sort_keys=True))
    return 0


def cmd_predict(args) -> int:
    model, cfg, _ = model_from_checkpoint(args.checkpoint)
    set_determinism(cfg["deterministic"])
    try:
        with Image.open(args.image) as im:
            image = np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise LoadError(f"cannot read image {args.image}: {exc}") from exc
    pred = model.predict(image_to_tensor(image))
    mask = pred.mask[0].numpy().astype(np.uint8) * 255
    buf = io.BytesIO()
    Image.fromarray(mask, mode="L").save(buf, format="PNG")
    atomic_write_bytes(args.out, buf.getvalue())
    return 0


def cmd_synth(args) -> int:
    handle = generate_synthetic_dataset(args.out, args.n, args.size, args.classes, args.seed, args.domain)
    print(json.dumps({"root": str(handle.root_path), "n_images": len(handle.index),
                      "n_classes": handle.n_total_classes}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smvcenet", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True)
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("train", help="episodic training on the fold's train classes")
    with_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class mIoU on a fold split")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("domain-eval", help="source and target test-split reports")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target-root", required=True)
    p.add_argument("--class-map", required=True)
    p.set_defaults(func=cmd_domain_eval)

    p = sub.add_parser("predict", help="write a 0/255 mask for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domain", choices=("A", "B"), default="A")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UserError as exc:
        log.error("%s", exc)
        return 1
    except InvariantViolation as exc:
        log.error("internal invariant violated: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
