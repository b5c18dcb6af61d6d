"""Vision transformer encoder, projection head, cross-attention block,
prototypes, and position classifier.

Token matrices are (tokens, features). The positional table lives at
reference-grid resolution and is bilinearly interpolated for query
grids; interpolation is a fixed linear map, so it is expressed as a
matmul and stays differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int
    embed_dim: int
    depth: int
    num_heads: int
    mlp_ratio: int
    ref_grid: tuple[int, int]
    proj_dim: int
    num_prototypes: int

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def num_positions(self) -> int:
        return self.ref_grid[0] * self.ref_grid[1]

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_input_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    """Normal(0, std) resampled into [-2, 2] sigma."""
    out = rng.standard_normal(shape)
    for _ in range(16):
        bad = np.abs(out) > 2.0
        if not bad.any():
            break
        out[bad] = rng.standard_normal(int(bad.sum()))
    return (np.clip(out, -2.0, 2.0) * std).astype(np.float32)


class ModelParams:
    """Named parameter tensors for one branch (student or teacher).

    The EMA-shared subset covers the encoder, projection head, and
    prototypes; the cross-attention block and position classifier are
    trained on the student only.
    """

    def __init__(self, cfg: ViTConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def ema_names(self) -> list[str]:
        head = ("xattn.", "pos_head.")
        return [n for n in self.tensors if not n.startswith(head)]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self, requires_grad: bool) -> "ModelParams":
        return ModelParams(
            self.cfg,
            {n: Tensor(t.data.copy(), requires_grad=requires_grad) for n, t in self.tensors.items()},
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.cfg,
            {n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for n, t in self.tensors.items()},
        )

    def normalize_prototypes(self) -> None:
        q = self.tensors["prototypes"].data
        norms = np.sqrt((q * q).sum(axis=1, keepdims=True))
        q /= np.maximum(norms, 1e-12)

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def init_params(cfg: ViTConfig, rng: np.random.Generator) -> ModelParams:
    """Truncated-normal weights (std 0.02), zero biases, unit LN gains,
    with two departures that matter at this scale:

    * residual-branch output projections (attention ``wo``, MLP ``w2``)
      start at zero, so every block is the identity at initialization.
      Otherwise near-uniform attention piles a shared mean component
      onto all tokens and the encoder output loses the token-to-token
      contrast that query/reference matching depends on.
    * the cross-attention block starts as a content-addressed lookup:
      identity q/k/v maps, so its scores are cosine similarities of the
      (normalized) token features from the first step.
    """
    d = cfg.embed_dim
    hidden = cfg.mlp_ratio * d
    t: dict[str, Tensor] = {}

    def w(name, shape):
        t[name] = Tensor(_trunc_normal(rng, shape), requires_grad=True)

    def zeros(name, shape):
        t[name] = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def ones(name, shape):
        t[name] = Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    def eye(name):
        t[name] = Tensor(np.eye(d, dtype=np.float32), requires_grad=True)

    w("patch_embed.w", (cfg.patch_input_dim, d))
    zeros("patch_embed.b", (d,))
    w("pos_embed", (cfg.num_positions, d))

    def block(prefix):
        ones(f"{prefix}.ln1.g", (d,))
        zeros(f"{prefix}.ln1.b", (d,))
        for nm in ("wq", "wk", "wv"):
            w(f"{prefix}.attn.{nm}", (d, d))
        zeros(f"{prefix}.attn.wo", (d, d))
        # no key bias: softmax cancels a constant shift of the keys
        for nm in ("bq", "bv", "bo"):
            zeros(f"{prefix}.attn.{nm}", (d,))
        ones(f"{prefix}.ln2.g", (d,))
        zeros(f"{prefix}.ln2.b", (d,))
        w(f"{prefix}.mlp.w1", (d, hidden))
        zeros(f"{prefix}.mlp.b1", (hidden,))
        zeros(f"{prefix}.mlp.w2", (hidden, d))
        zeros(f"{prefix}.mlp.b2", (d,))

    for i in range(cfg.depth):
        block(f"block{i}")
    ones("final_ln.g", (d,))
    zeros("final_ln.b", (d,))

    w("proj.w1", (d, d))
    zeros("proj.b1", (d,))
    w("proj.w2", (d, cfg.proj_dim))
    zeros("proj.b2", (cfg.proj_dim,))

    w("prototypes", (cfg.num_prototypes, cfg.proj_dim))

    block("xattn")
    for nm in ("wq", "wk", "wv", "wo"):
        eye(f"xattn.attn.{nm}")
    ones("xattn.lnkv.g", (d,))
    zeros("xattn.lnkv.b", (d,))
    w("xattn.placeholder", (1, d))
    w("pos_head.w", (d, cfg.num_positions))

    params = ModelParams(cfg, t)
    params.normalize_prototypes()
    return params


def interpolation_matrix(src_grid: tuple[int, int], dst_grid: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling as a (dst_tokens, src_tokens) weight matrix.

    Half-pixel-centered: a target equal to the source grid yields the
    identity, and a 1x1 target averages the 2x2 center neighborhood.
    """
    if dst_grid[0] < 1 or dst_grid[1] < 1:
        raise ConfigError(f"target grid must be at least 1x1, got {dst_grid}")
    sr, sc = src_grid
    dr, dc = dst_grid
    mat = np.zeros((dr * dc, sr * sc), dtype=np.float32)

    def axis_weights(n_dst, n_src):
        pos = (np.arange(n_dst) + 0.5) * n_src / n_dst - 0.5
        pos = np.clip(pos, 0.0, n_src - 1.0)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_src - 1)
        f = pos - i0
        return i0, i1, f

    r0, r1, fr = axis_weights(dr, sr)
    c0, c1, fc = axis_weights(dc, sc)
    for i in range(dr):
        for j in range(dc):
            k = i * dc + j
            mat[k, r0[i] * sc + c0[j]] += (1 - fr[i]) * (1 - fc[j])
            mat[k, r0[i] * sc + c1[j]] += (1 - fr[i]) * fc[j]
            mat[k, r1[i] * sc + c0[j]] += fr[i] * (1 - fc[j])
            mat[k, r1[i] * sc + c1[j]] += fr[i] * fc[j]
    return mat


def interpolate_pos_embed(params: ModelParams, target_grid: tuple[int, int]) -> Tensor:
    """Positional rows for an arbitrary grid, as a differentiable map of
    the reference-resolution table."""
    table = params["pos_embed"]
    if tuple(target_grid) == tuple(params.cfg.ref_grid):
        return table
    mat = interpolation_matrix(params.cfg.ref_grid, target_grid)
    return T.matmul(Tensor(mat.astype(table.dtype)), table)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    n, d = x.shape
    return T.transpose(T.reshape(x, (n, n_heads, d // n_heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, h * dh))


def _attention(params: ModelParams, prefix: str, q_in: Tensor, kv_in: Tensor) -> Tensor:
    cfg = params.cfg
    q = _split_heads(_linear(q_in, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), cfg.num_heads)
    k = _split_heads(T.matmul(kv_in, params[f"{prefix}.wk"]), cfg.num_heads)
    v = _split_heads(_linear(kv_in, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), cfg.num_heads)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(cfg.head_dim))
    attn = T.softmax_rows(scores)
    out = _merge_heads(T.matmul(attn, v))
    return _linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _mlp(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    h = T.gelu(_linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return _linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _block(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    h = T.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = T.add(x, _attention(params, f"{prefix}.attn", h, h))
    h = T.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return T.add(x, _mlp(params, f"{prefix}.mlp", h))


def encode_view(
    params: ModelParams,
    patch_vecs: np.ndarray,
    grid: tuple[int, int],
    kept_tokens: np.ndarray,
) -> Tensor:
    """Pre-norm ViT over the kept tokens of one view.

    ``patch_vecs`` holds the flattened pixels of exactly the kept
    tokens, in kept order; positional embeddings are added at the kept
    positions only. No class token: every output row is a patch token.
    """
    if len(kept_tokens) == 0:
        raise ContractError("encode_view: kept_tokens is empty")
    if patch_vecs.shape != (len(kept_tokens), params.cfg.patch_input_dim):
        raise ContractError(
            f"encode_view: patch matrix {patch_vecs.shape} does not match "
            f"{len(kept_tokens)} kept tokens of width {params.cfg.patch_input_dim}"
        )
    dtype = params["patch_embed.w"].dtype
    x = _linear(Tensor(patch_vecs.astype(dtype)), params["patch_embed.w"], params["patch_embed.b"])
    pos = interpolate_pos_embed(params, grid)
    x = T.add(x, T.take_rows(pos, kept_tokens))
    for i in range(params.cfg.depth):
        x = _block(params, f"block{i}", x)
    return T.layer_norm(x, params["final_ln.g"], params["final_ln.b"])


def project_features(params: ModelParams, z: Tensor) -> Tensor:
    """Two-layer GELU MLP onto the unit sphere of the clustering space."""
    h = T.gelu(_linear(z, params["proj.w1"], params["proj.b1"]))
    h = _linear(h, params["proj.w2"], params["proj.b2"])
    return T.l2_normalize_rows(h)


@lru_cache(maxsize=8)
def sine_position_table(grid: tuple[int, int], dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal position codes (rows*cols, dim), unit-scale.

    The first half of the channels encodes the row, the second half the
    column, the standard recipe for spatial cross-attention keys.
    """
    rows, cols = grid

    def axis(n, dims):
        pos = np.arange(n, dtype=np.float64)
        div = np.exp(np.arange(0, dims, 2) * (-math.log(100.0) / dims))
        enc = np.zeros((n, dims))
        enc[:, 0::2] = np.sin(pos[:, None] * div)
        enc[:, 1::2] = np.cos(pos[:, None] * div[: enc[:, 1::2].shape[1]])
        return enc

    half = dim // 2
    re = axis(rows, half)
    ce = axis(cols, dim - half)
    out = np.empty((rows * cols, dim), dtype=np.float32)
    for i in range(rows):
        for j in range(cols):
            out[i * cols + j] = np.concatenate([re[i], ce[j]])
    return out


def cross_attend(
    params: ModelParams,
    z_q: Tensor,
    z_ref_visible: Tensor | None,
    visible_ids: np.ndarray | None = None,
) -> Tensor:
    """Single cross-attention block: queries from the query tokens, keys
    and values from the visible reference tokens.

    When ``visible_ids`` is given, fixed sinusoidal codes of those grid
    cells are added to the key/value inputs, the usual way decoder-style
    cross-attention exposes spatial identity. Each column carries its
    identity in its own vector, so the block stays invariant to column
    order. With a fully masked reference, a learned placeholder token
    stands in for the key/value set so the block stays total.
    """
    if z_ref_visible is not None and z_ref_visible.shape[0] == 0:
        raise ContractError("cross_attend: empty visible reference; pass None to use the placeholder")
    if z_ref_visible is None:
        kv = params["xattn.placeholder"]
    elif visible_ids is not None:
        table = sine_position_table(params.cfg.ref_grid, params.cfg.embed_dim)
        codes = Tensor(table[np.asarray(visible_ids, dtype=np.int64)].astype(np.dtype(z_ref_visible.dtype)))
        kv = T.add(z_ref_visible, codes)
    else:
        kv = z_ref_visible
    q_in = T.layer_norm(z_q, params["xattn.ln1.g"], params["xattn.ln1.b"])
    kv_in = T.layer_norm(kv, params["xattn.lnkv.g"], params["xattn.lnkv.b"])
    x = T.add(z_q, _attention(params, "xattn.attn", q_in, kv_in))
    h = T.layer_norm(x, params["xattn.ln2.g"], params["xattn.ln2.b"])
    return T.add(x, _mlp(params, "xattn.mlp", h))


def position_logits(params: ModelParams, g: Tensor) -> Tensor:
    """(queries, reference positions) classification logits."""
    return T.matmul(g, params["pos_head.w"])


def prototype_logits(params: ModelParams, z_proj: Tensor, temperature: float) -> Tensor:
    """Cosine similarities to the prototypes, sharpened by temperature."""
    if temperature <= 0:
        raise ConfigError(f"prototype temperature must be positive, got {temperature}")
    return T.scale(T.matmul(z_proj, T.transpose(params["prototypes"])), 1.0 / temperature)
