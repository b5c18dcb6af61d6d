"""Optimization loop: AdamW with decoupled decay, cosine schedules,
EMA teacher updates, deterministic batching, and checkpointing.

Determinism contract: every random draw for sample i of epoch e comes
from a stream seeded by (seed, e, i), and batch order by (seed, e), so
runs are bit-identical regardless of data-worker parallelism and can
resume mid-run exactly.
"""

from __future__ import annotations

import concurrent.futures
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import checkpoint as ckpt
from . import model as M
from . import objective as O
from . import tensor as T
from .augment import AugmentConfig, View, drop_query_tokens, render_view, sample_view_record, token_vectors
from .correspond import Correspondence, correspondence_nearest
from .errors import ConfigError, ContractError
from .tensor import Tensor

# domain tags for derived seed streams
_BATCH_TAG = 0xB0
_SAMPLE_TAG = 0x5A


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    warmup_epochs: float = 0.0
    total_epochs: int = 5
    batch_size: int = 8
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    ema_momentum_start: float = 0.996
    queries_per_reference: int = 4
    eta: float = 0.8
    structured_mask: bool = True
    tau_teacher: float = 0.05
    tau_student: float = 0.1
    sinkhorn_iters: int = 3
    sinkhorn_enabled: bool = True
    lambda_memax: float = 1.0
    query_keep_ratio: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs >= self.total_epochs:
            raise ConfigError(
                f"warmup_epochs {self.warmup_epochs} must be < total_epochs {self.total_epochs}"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.ema_momentum_start <= 1.0):
            raise ConfigError(f"ema_momentum_start outside [0, 1]: {self.ema_momentum_start}")


def cosine_value(step: int, total_steps: int, warmup_steps: int, start: float, end: float) -> float:
    """Linear 0 -> start over warmup, then cosine start -> end."""
    if total_steps <= 0:
        raise ConfigError("schedule needs total_steps > 0")
    if step < warmup_steps:
        return start * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    t = min((step - warmup_steps) / span, 1.0)
    return start + (end - start) * 0.5 * (1.0 - math.cos(math.pi * t))


@dataclass
class AdamState:
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: M.ModelParams,
    state: AdamState,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    decay_filter: Optional[Callable[[str, Tensor], bool]] = None,
) -> None:
    """Decoupled AdamW update in place; prototypes are re-normalized.

    Parameters without a gradient this step keep decaying their moments.
    ``decay_filter`` limits which tensors receive weight decay (default:
    all of them).
    """
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.tensors.items():
        if not p.requires_grad:
            continue
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.isfinite(g).all():
            raise ContractError(f"non-finite gradient in parameter {name}")
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay and (decay_filter is None or decay_filter(name, p)):
            update = update + weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype)
    params.normalize_prototypes()


def ema_update(teacher: M.ModelParams, student: M.ModelParams, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student over the shared subset."""
    if not (0.0 <= m <= 1.0):
        raise ContractError(f"ema momentum outside [0, 1]: {m}")
    if m == 1.0:
        return
    for name in teacher.ema_names():
        t = teacher[name].data
        s = student[name].data
        if t.shape != s.shape:
            raise ContractError(f"ema shape mismatch for {name}: {t.shape} vs {s.shape}")
        if m == 0.0:
            np.copyto(t, s)
        else:
            t *= m
            t += (1.0 - m) * s


def _decay_matrices_only(name: str, p: Tensor) -> bool:
    return p.data.ndim >= 2


@dataclass
class PreparedSample:
    reference: View
    queries: list[tuple[View, Correspondence, O.MaskPlan]]


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, _SAMPLE_TAG, epoch, index)))


def prepare_sample(
    image: np.ndarray,
    rng: np.random.Generator,
    cfg: TrainConfig,
    vit: M.ViTConfig,
    aug: AugmentConfig,
) -> PreparedSample:
    """One reference view plus the query views supervised by it.

    The first query uses random token dropping, the rest focal dropping;
    each query gets its own reference mask plan.
    """
    ref = render_view(image, sample_view_record("reference", rng, aug), vit.patch_size)
    queries = []
    for qi in range(cfg.queries_per_reference):
        view = render_view(image, sample_view_record("query", rng, aug), vit.patch_size)
        mode = "random" if qi == 0 else "focal"
        view = drop_query_tokens(view, mode, cfg.query_keep_ratio, rng)
        corr = correspondence_nearest(view, ref)
        plan = O.mask_reference(vit.num_positions, cfg.eta, cfg.structured_mask, rng)
        queries.append((view, corr, plan))
    return PreparedSample(ref, queries)


@dataclass
class TrainState:
    student: M.ModelParams
    teacher: M.ModelParams
    opt: AdamState
    step: int = 0


def init_train_state(cfg: TrainConfig, vit: M.ViTConfig) -> TrainState:
    student = M.init_params(vit, np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x1717))))
    teacher = student.copy(requires_grad=False)
    return TrainState(student, teacher, AdamState())


def eval_params(state: TrainState) -> M.ModelParams:
    """Momentum-branch weights for evaluation, with the student's
    cross-attention block and position head (those live student-side)."""
    tensors = {}
    for name in state.teacher.names():
        src = state.teacher if name in set(state.teacher.ema_names()) else state.student
        tensors[name] = Tensor(src[name].data.copy(), requires_grad=False)
    return M.ModelParams(state.teacher.cfg, tensors)


def _teacher_reference_pass(
    teacher: M.ModelParams, sample: PreparedSample, cfg: TrainConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Reference tokens through the momentum branch: encoder output for
    cross-attention keys/values, raw prototype assignments for labels."""
    ref = sample.reference
    z_ref = M.encode_view(teacher, token_vectors(ref), ref.grid, ref.kept_tokens)
    z_proj = M.project_features(teacher, z_ref)
    labels = O.assign_teacher_labels(z_proj.data, teacher["prototypes"].data, cfg.tau_teacher)
    return z_ref.data, labels


def train_step(
    batch: list[np.ndarray],
    state: TrainState,
    cfg: TrainConfig,
    vit: M.ViTConfig,
    aug: AugmentConfig,
    schedules: tuple[float, float],
    epoch: int,
    sample_indices: list[int],
    pool: Optional[concurrent.futures.Executor] = None,
) -> dict:
    """One optimization step over a batch of images.

    Returns the metrics record; a batch whose every query has empty
    omega is skipped (no parameter update) and flagged.
    """
    lr, momentum = schedules

    def prep(args):
        idx, image = args
        return prepare_sample(image, sample_rng(cfg.seed, epoch, idx), cfg, vit, aug)

    items = list(zip(sample_indices, batch))
    prepared = list(pool.map(prep, items)) if pool is not None else [prep(i) for i in items]

    ref_feats = []
    raw_labels = []
    for sample in prepared:
        z_ref, labels = _teacher_reference_pass(state.teacher, sample, cfg)
        ref_feats.append(z_ref)
        raw_labels.append(labels)

    if cfg.sinkhorn_enabled:
        stacked = np.concatenate(raw_labels, axis=0)
        balanced = O.sinkhorn_normalize(stacked, cfg.sinkhorn_iters)
        n_ref = vit.num_positions
        labels_per_sample = [balanced[i * n_ref : (i + 1) * n_ref] for i in range(len(prepared))]
    else:
        labels_per_sample = raw_labels

    terms: list[O.QueryTerm] = []
    with T.Tape() as tape:
        for sample, z_ref, labels in zip(prepared, ref_feats, labels_per_sample):
            for view, corr, plan in sample.queries:
                z_q = M.encode_view(state.student, token_vectors(view), view.grid, view.kept_tokens)
                z_proj = M.project_features(state.student, z_q)
                c_logits = M.prototype_logits(state.student, z_proj, cfg.tau_student)
                c_loss, probs = O.cluster_loss(c_logits, labels, corr)

                if plan.n_visible:
                    g = M.cross_attend(
                        state.student, z_q, Tensor(z_ref[plan.visible]), plan.visible
                    )
                else:
                    g = M.cross_attend(state.student, z_q, None)
                p_logits = M.position_logits(state.student, g)
                p_loss = O.position_loss(p_logits, corr)

                rows = corr.omega_rows
                n_correct = int(
                    (p_logits.data[rows].argmax(axis=1) == corr.targets).sum()
                ) if rows.size else 0
                terms.append(
                    O.QueryTerm(
                        cluster=c_loss,
                        position=p_loss,
                        probs=probs,
                        n_omega=int(rows.size),
                        n_correct=n_correct,
                        n_tokens=len(view.kept_tokens),
                    )
                )
        breakdown = O.total_loss(terms, cfg.lambda_memax)

    record = {
        "step": state.step,
        "epoch": epoch,
        "event": "step",
        "lr": lr,
        "momentum": momentum,
        "skipped": breakdown is None,
    }
    if breakdown is None:
        for key in ("loss", "loss_cluster", "loss_position", "loss_memax",
                    "pos_accuracy", "entropy", "omega_mean"):
            record[key] = None
        state.step += 1
        return record

    state.student.zero_grads()
    T.backward(tape, breakdown.total)
    adamw_step(
        state.student,
        state.opt,
        lr,
        cfg.weight_decay,
        cfg.betas,
        cfg.adam_eps,
        decay_filter=_decay_matrices_only,
    )
    ema_update(state.teacher, state.student, momentum)
    state.teacher.normalize_prototypes()
    state.step += 1

    for key in ("loss", "loss_cluster", "loss_position", "loss_memax",
                "pos_accuracy", "entropy", "omega_mean"):
        record[key] = breakdown.metrics[key]
    return record


def steps_per_epoch(corpus_size: int, batch_size: int) -> int:
    """Full batches only; a trailing partial batch is dropped."""
    return corpus_size // batch_size


def epoch_order(seed: int, epoch: int, corpus_size: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((seed, _BATCH_TAG, epoch)))
    return rng.permutation(corpus_size)


def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {"meta.step": np.array([state.step], dtype=np.int64)}
    out["meta.opt_step"] = np.array([state.opt.step], dtype=np.int64)
    for name, t in state.student.tensors.items():
        out[f"student.{name}"] = t.data
    for name, t in state.teacher.tensors.items():
        out[f"teacher.{name}"] = t.data
    for name, (m, v) in state.opt.moments.items():
        out[f"opt.m.{name}"] = m
        out[f"opt.v.{name}"] = v
    return out


def save_checkpoint(path, state: TrainState, cfg_hash: bytes) -> None:
    ckpt.save_tensors(path, state_tensors(state), cfg_hash)


def load_checkpoint(path, vit: M.ViTConfig, expected_hash: bytes | None = None, force: bool = False) -> TrainState:
    tensors, _ = ckpt.load_tensors(path, expected_hash=expected_hash, force=force)
    student_t = {}
    teacher_t = {}
    opt = AdamState(step=int(tensors["meta.opt_step"][0]))
    for name, arr in tensors.items():
        if name.startswith("student."):
            student_t[name[len("student."):]] = Tensor(arr, requires_grad=True)
        elif name.startswith("teacher."):
            teacher_t[name[len("teacher."):]] = Tensor(arr, requires_grad=False)
    for name in student_t:
        m = tensors.get(f"opt.m.{name}")
        v = tensors.get(f"opt.v.{name}")
        if m is not None and v is not None:
            opt.moments[name] = (m.copy(), v.copy())
    state = TrainState(
        M.ModelParams(vit, student_t),
        M.ModelParams(vit, teacher_t),
        opt,
        step=int(tensors["meta.step"][0]),
    )
    return state


def run_pretraining(
    cfg: TrainConfig,
    vit: M.ViTConfig,
    aug: AugmentConfig,
    corpus: list[np.ndarray],
    out_dir: str | Path | None = None,
    cfg_hash: bytes = b"\x00" * 32,
    resume_from: str | Path | None = None,
    threads: int = 1,
    emit: Optional[Callable[[dict], None]] = None,
    eval_interval: int = 0,
    eval_fn: Optional[Callable[[TrainState, int], dict]] = None,
    checkpoint_interval: int = 0,
    max_steps: int = 0,
) -> TrainState:
    """Epoch loop with seeded shuffling, periodic eval hooks, and
    checkpoints at the configured interval and at the end.

    Resuming from a mid-run checkpoint replays the schedule and data
    order from the recorded global step, reproducing the uninterrupted
    run bit-exactly. ``max_steps`` > 0 truncates the run (for tests).
    """
    if not corpus:
        raise ConfigError("corpus is empty")
    per_epoch = steps_per_epoch(len(corpus), cfg.batch_size)
    if per_epoch == 0:
        raise ConfigError(
            f"batch_size {cfg.batch_size} larger than corpus of {len(corpus)} images"
        )
    total_steps = per_epoch * cfg.total_epochs
    warmup_steps = int(round(cfg.warmup_epochs * per_epoch))

    if resume_from is not None:
        state = load_checkpoint(resume_from, vit, expected_hash=cfg_hash)
    else:
        state = init_train_state(cfg, vit)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    pool = (
        concurrent.futures.ThreadPoolExecutor(max_workers=threads)
        if threads > 1
        else None
    )
    try:
        stop = total_steps if max_steps <= 0 else min(total_steps, state.step + max_steps)
        while state.step < stop:
            epoch = state.step // per_epoch
            order = epoch_order(cfg.seed, epoch, len(corpus))
            offset = state.step % per_epoch
            for b in range(offset, per_epoch):
                if state.step >= stop:
                    break
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                batch = [corpus[i] for i in idx]
                lr = cosine_value(state.step, total_steps, warmup_steps, cfg.base_lr, 0.0)
                momentum = cosine_value(state.step, total_steps, 0, cfg.ema_momentum_start, 1.0)
                record = train_step(
                    batch, state, cfg, vit, aug, (lr, momentum), epoch,
                    [int(i) for i in idx], pool,
                )
                if emit:
                    emit(record)
                if eval_interval and eval_fn and state.step % eval_interval == 0:
                    ev = {"step": state.step, "epoch": epoch, "event": "eval",
                          "lr": None, "momentum": None, "skipped": False,
                          "loss": None, "loss_cluster": None, "loss_position": None,
                          "loss_memax": None, "pos_accuracy": None, "entropy": None,
                          "omega_mean": None}
                    ev.update(eval_fn(state, state.step))
                    if emit:
                        emit(ev)
                if (
                    out_dir is not None
                    and checkpoint_interval
                    and state.step % checkpoint_interval == 0
                    and state.step < total_steps
                ):
                    save_checkpoint(out_dir / f"checkpoint_{state.step:07d}.loca", state, cfg_hash)
    finally:
        if pool is not None:
            pool.shutdown()

    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint_final.loca", state, cfg_hash)
    return state
