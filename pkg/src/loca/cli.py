"""Command-line entry point.

Commands: pretrain, eval, probe, inspect, dump-config. Exit codes are
stable: 0 success, 1 configuration error, 2 runtime error. The
LOCA_THREADS environment variable caps data-worker parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datagen, evaluate, trainer, viz
from .config import RunConfig, parse_config
from .errors import ConfigError, LocaError
from .logio import write_metrics

__all__ = ["main", "entrypoint", "write_metrics"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loca",
        description="Location-aware self-supervised pretraining, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=str, default=None, help="key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--preset", choices=("desk", "paper"), default=None)
        p.add_argument("--eta", type=float, default=None, help="reference masking ratio")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--checkpoint", type=str, default=None)
        p.add_argument("--structured-mask", type=str, default=None, metavar="BOOL")
        p.add_argument("--queries", type=int, default=None, help="query views per reference")
        p.add_argument("--k", type=int, default=None, help="number of prototypes")
        p.add_argument("--corpus-size", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--eval-interval", type=int, default=None)
        p.add_argument("--eval-pairs", type=int, default=None)
        p.add_argument("--checkpoint-interval", type=int, default=None)
        p.add_argument("--force", action="store_true", help="ignore checkpoint hash mismatch")

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    add_common(p)
    p.add_argument("--resume", type=str, default=None, help="checkpoint to resume from")
    p.add_argument("--max-steps", type=int, default=0, help="truncate the run (testing)")

    for name, desc in (
        ("eval", "position accuracy and prototype entropy on held-out pairs"),
        ("probe", "frozen-feature linear segmentation probe"),
        ("inspect", "export prediction visualization panels"),
    ):
        p = sub.add_parser(name, help=desc)
        add_common(p)

    p = sub.add_parser("dump-config", help="print the resolved config with provenance")
    add_common(p)
    return parser


def _flags_from_args(args: argparse.Namespace) -> dict:
    mapping = {
        "seed": args.seed,
        "preset": args.preset,
        "eta": args.eta,
        "epochs": args.epochs,
        "out_dir": args.out,
        "checkpoint": args.checkpoint,
        "structured_mask": args.structured_mask,
        "queries": args.queries,
        "k": args.k,
        "corpus_size": getattr(args, "corpus_size", None),
        "batch_size": getattr(args, "batch_size", None),
        "eval_interval": getattr(args, "eval_interval", None),
        "eval_pairs": getattr(args, "eval_pairs", None),
        "checkpoint_interval": getattr(args, "checkpoint_interval", None),
        "resume": getattr(args, "resume", None),
    }
    if args.force:
        mapping["force_load"] = True
    return mapping


def _threads() -> int:
    raw = os.environ.get("LOCA_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"LOCA_THREADS must be an integer, got {raw!r}") from None


def _load_corpus(cfg: RunConfig) -> tuple[list, list]:
    """(train, held-out) images; synthetic scenes unless data_dir is set."""
    if cfg.data_dir:
        images = datagen.load_image_directory(cfg.data_dir)
        if not images:
            raise ConfigError(f"no usable images in {cfg.data_dir}")
        return images[0::2], images[1::2]
    corpus = datagen.build_corpus(cfg.corpus_size, cfg.corpus_seed, cfg.scene_spec())
    train, held = datagen.split_by_parity(corpus)
    return train, held


def _pixels(images: list) -> list[np.ndarray]:
    return [im.pixels if isinstance(im, datagen.LabeledImage) else im for im in images]


def _require_checkpoint(cfg: RunConfig) -> Path:
    if not cfg.checkpoint:
        raise ConfigError("this command needs --checkpoint PATH")
    path = Path(cfg.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return path


def _eval_model(cfg: RunConfig, path: Path):
    state = trainer.load_checkpoint(
        path, cfg.vit_config(), expected_hash=cfg.config_hash(), force=cfg.force_load
    )
    return trainer.eval_params(state), state


def _held_out_pairs(cfg: RunConfig, held: list, n_pairs: int):
    return evaluate.make_eval_pairs(
        _pixels(held), n_pairs, cfg.vit_config(), cfg.augment_config(),
        cfg.eta, cfg.structured_mask, seed=cfg.seed,
    )


def cmd_pretrain(cfg: RunConfig, resume: str | None, max_steps: int) -> int:
    train, held = _load_corpus(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    pairs = _held_out_pairs(cfg, held, cfg.eval_pairs) if cfg.eval_interval else None

    def eval_fn(state, step):
        params = trainer.eval_params(state)
        acc, loss = evaluate.position_eval(params, pairs)
        return {"pos_accuracy": acc, "loss_position": loss}

    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume else "w"
    with open(metrics_path, mode) as stream:
        trainer.run_pretraining(
            cfg.train_config(),
            cfg.vit_config(),
            cfg.augment_config(),
            _pixels(train),
            out_dir=out_dir,
            cfg_hash=cfg.config_hash(),
            resume_from=resume or None,
            threads=_threads(),
            emit=lambda rec: write_metrics(stream, rec),
            eval_interval=cfg.eval_interval,
            eval_fn=eval_fn if cfg.eval_interval else None,
            checkpoint_interval=cfg.checkpoint_interval,
            max_steps=max_steps,
        )
    print(f"pretraining done; outputs in {out_dir}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    path = _require_checkpoint(cfg)
    params, _ = _eval_model(cfg, path)
    _, held = _load_corpus(cfg)
    pairs = _held_out_pairs(cfg, held, cfg.eval_pairs)
    acc, loss = evaluate.position_eval(params, pairs)
    entropy = evaluate.mean_prediction_entropy(params, pairs, cfg.tau_student)
    report = {
        "pos_accuracy": acc,
        "pos_loss": loss,
        "entropy": entropy,
        "chance": 1.0 / cfg.vit_config().num_positions,
        "n_pairs": len(pairs),
        "eta": cfg.eta,
    }
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))
    return 0


def cmd_probe(cfg: RunConfig) -> int:
    if cfg.data_dir:
        raise ConfigError("the probe needs the labeled synthetic corpus (unset data_dir)")
    path = _require_checkpoint(cfg)
    params, _ = _eval_model(cfg, path)
    corpus = datagen.build_corpus(cfg.corpus_size, cfg.corpus_seed, cfg.scene_spec())
    train, held = datagen.split_by_parity(corpus)
    probe_cfg = evaluate.ProbeConfig(epochs=cfg.probe_epochs, lr=cfg.probe_lr, seed=cfg.seed)
    encode = evaluate.default_encode_fn(params, cfg.vit_config())
    result = evaluate.linear_probe_segmentation(encode, train, held, probe_cfg)
    report = {
        "miou": result.miou,
        "per_class_iou": result.per_class_iou,
        "confusion": result.confusion.tolist(),
    }
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "probe.json").write_text(json.dumps(report, indent=2))
    print(json.dumps({"miou": result.miou, "per_class_iou": result.per_class_iou}, indent=2))
    return 0


def cmd_inspect(cfg: RunConfig) -> int:
    from . import model as M
    from .augment import token_vectors
    from .tensor import Tensor

    path = _require_checkpoint(cfg)
    params, _ = _eval_model(cfg, path)
    _, held = _load_corpus(cfg)
    pairs = _held_out_pairs(cfg, held, cfg.inspect_panels)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    infos = []
    for i, pair in enumerate(pairs):
        z_ref = M.encode_view(
            params, token_vectors(pair.reference), pair.reference.grid,
            pair.reference.kept_tokens,
        )
        z_q = M.encode_view(
            params, token_vectors(pair.query), pair.query.grid, pair.query.kept_tokens
        )
        if pair.plan.n_visible:
            g = M.cross_attend(
                params, z_q, Tensor(z_ref.data[pair.plan.visible]), pair.plan.visible
            )
        else:
            g = M.cross_attend(params, z_q, None)
        logits = M.position_logits(params, g)
        panel, info = viz.render_inspection_panel(
            pair.query, pair.reference, pair.corr, logits.data, pair.plan
        )
        viz.save_panel(out_dir / f"inspect_{i:03d}.png", panel)
        info["panel"] = f"inspect_{i:03d}.png"
        infos.append(info)
    (out_dir / "inspect.json").write_text(json.dumps(infos, indent=2))
    print(f"wrote {len(pairs)} panel(s) to {out_dir}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config, _flags_from_args(args))
        if args.command == "dump-config":
            print(cfg.dump())
            return 0
        if args.command == "pretrain":
            return cmd_pretrain(cfg, cfg.resume or None, args.max_steps)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "probe":
            return cmd_probe(cfg)
        if args.command == "inspect":
            return cmd_inspect(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (LocaError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
