"""Run configuration: defaults, config-file parsing, flag overrides,
per-key provenance, and the config hash stamped into checkpoints.

Config files are plain ``key = value`` lines; ``#`` starts a comment.
Flags override file values, which override defaults. Unknown keys are
rejected by name.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .augment import AugmentConfig
from .datagen import SceneSpec
from .errors import ConfigError
from .model import ViTConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class Preset:
    canvas: int
    ref_size: int
    query_size: int
    patch_size: int
    embed_dim: int
    depth: int
    num_heads: int
    mlp_ratio: int
    proj_dim: int
    prototypes: int


PRESETS = {
    "desk": Preset(
        canvas=96, ref_size=64, query_size=32, patch_size=8,
        embed_dim=64, depth=4, num_heads=4, mlp_ratio=4, proj_dim=64, prototypes=256,
    ),
    "paper": Preset(
        canvas=256, ref_size=224, query_size=96, patch_size=16,
        embed_dim=768, depth=12, num_heads=12, mlp_ratio=4, proj_dim=256, prototypes=4096,
    ),
}


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default, validator or None)
_SCHEMA: dict[str, tuple] = {
    "preset": (str, "desk", lambda v: v in PRESETS or f"must be one of {sorted(PRESETS)}"),
    "seed": (int, 0, None),
    "epochs": (int, 5, lambda v: v >= 1 or "must be >= 1"),
    "warmup_epochs": (float, 0.0, lambda v: v >= 0 or "must be >= 0"),
    "batch_size": (int, 8, lambda v: v >= 1 or "must be >= 1"),
    "base_lr": (float, 1e-3, lambda v: v > 0 or "must be > 0"),
    "weight_decay": (float, 0.1, lambda v: v >= 0 or "must be >= 0"),
    "ema_momentum_start": (float, 0.996, lambda v: 0 <= v <= 1 or "must be in [0, 1]"),
    "queries": (int, 4, lambda v: v >= 1 or "must be >= 1"),
    "eta": (float, 0.8, lambda v: 0 <= v <= 1 or "must be in [0, 1]"),
    "structured_mask": (_bool, True, None),
    "tau_teacher": (float, 0.05, lambda v: v > 0 or "must be > 0"),
    "tau_student": (float, 0.1, lambda v: v > 0 or "must be > 0"),
    "sinkhorn_iters": (int, 3, lambda v: v >= 1 or "must be >= 1"),
    "sinkhorn_enabled": (_bool, True, None),
    "lambda_memax": (float, 1.0, lambda v: v >= 0 or "must be >= 0"),
    "k": (int, 0, lambda v: v == 0 or v >= 2 or "must be >= 2 (or 0 for the preset default)"),
    "query_keep_ratio": (float, 0.75, lambda v: 0 < v <= 1 or "must be in (0, 1]"),
    "corpus_size": (int, 64, lambda v: v >= 1 or "must be >= 1"),
    "corpus_seed": (int, 100, None),
    "data_dir": (str, "", None),
    "out_dir": (str, "runs/loca", None),
    "checkpoint": (str, "", None),
    "resume": (str, "", None),
    "force_load": (_bool, False, None),
    "eval_interval": (int, 0, lambda v: v >= 0 or "must be >= 0"),
    "eval_pairs": (int, 100, lambda v: v >= 1 or "must be >= 1"),
    "checkpoint_interval": (int, 0, lambda v: v >= 0 or "must be >= 0"),
    "probe_epochs": (int, 40, lambda v: v >= 1 or "must be >= 1"),
    "probe_lr": (float, 0.05, lambda v: v > 0 or "must be > 0"),
    "inspect_panels": (int, 4, lambda v: v >= 1 or "must be >= 1"),
}

# keys that change training semantics; these feed the checkpoint hash
_HASHED_KEYS = [
    "preset", "seed", "epochs", "warmup_epochs", "batch_size", "base_lr",
    "weight_decay", "ema_momentum_start", "queries", "eta", "structured_mask",
    "tau_teacher", "tau_student", "sinkhorn_iters", "sinkhorn_enabled",
    "lambda_memax", "k", "query_keep_ratio", "corpus_size", "corpus_seed",
    "data_dir",
]


@dataclass
class RunConfig:
    values: dict[str, Any]
    provenance: dict[str, str]

    def __getattr__(self, key: str):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    @property
    def preset_spec(self) -> Preset:
        return PRESETS[self.values["preset"]]

    @property
    def num_prototypes(self) -> int:
        return self.values["k"] or self.preset_spec.prototypes

    def vit_config(self) -> ViTConfig:
        p = self.preset_spec
        grid = p.ref_size // p.patch_size
        return ViTConfig(
            patch_size=p.patch_size,
            embed_dim=p.embed_dim,
            depth=p.depth,
            num_heads=p.num_heads,
            mlp_ratio=p.mlp_ratio,
            ref_grid=(grid, grid),
            proj_dim=p.proj_dim,
            num_prototypes=self.num_prototypes,
        )

    def augment_config(self) -> AugmentConfig:
        p = self.preset_spec
        return AugmentConfig(
            ref_size=(p.ref_size, p.ref_size),
            query_size=(p.query_size, p.query_size),
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            base_lr=v["base_lr"],
            warmup_epochs=v["warmup_epochs"],
            total_epochs=v["epochs"],
            batch_size=v["batch_size"],
            weight_decay=v["weight_decay"],
            ema_momentum_start=v["ema_momentum_start"],
            queries_per_reference=v["queries"],
            eta=v["eta"],
            structured_mask=v["structured_mask"],
            tau_teacher=v["tau_teacher"],
            tau_student=v["tau_student"],
            sinkhorn_iters=v["sinkhorn_iters"],
            sinkhorn_enabled=v["sinkhorn_enabled"],
            lambda_memax=v["lambda_memax"],
            query_keep_ratio=v["query_keep_ratio"],
            seed=v["seed"],
        )

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(canvas=self.preset_spec.canvas)

    def config_hash(self) -> bytes:
        payload = {k: self.values[k] for k in _HASHED_KEYS}
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).digest()

    def dump(self) -> str:
        lines = []
        for key in _SCHEMA:
            lines.append(
                json.dumps(
                    {"key": key, "value": self.values[key], "source": self.provenance[key]}
                )
            )
        return "\n".join(lines)


def _coerce(key: str, raw: Any) -> Any:
    parser, _, validator = _SCHEMA[key]
    if isinstance(raw, str):
        try:
            value = parser(raw)
        except ValueError as e:
            raise ConfigError(f"config key {key!r}: {e}") from None
    else:
        value = raw
        if parser in (int, float) and isinstance(raw, (int, float)):
            value = parser(raw)
        elif parser is _bool and not isinstance(raw, bool):
            raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")
    if validator is not None:
        verdict = validator(value)
        if verdict is not True:
            raise ConfigError(f"config key {key!r}: {verdict}")
    return value


def read_config_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def parse_config(path: str | Path | None = None, flags: dict[str, Any] | None = None) -> RunConfig:
    """Resolve defaults <- file <- flags, recording provenance per key."""
    values = {k: spec[1] for k, spec in _SCHEMA.items()}
    provenance = {k: "default" for k in _SCHEMA}
    if path:
        for key, raw in read_config_file(path).items():
            values[key] = _coerce(key, raw)
            provenance[key] = "file"
    for key, raw in (flags or {}).items():
        if raw is None:
            continue
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
        provenance[key] = "flag"
    return RunConfig(values, provenance)
