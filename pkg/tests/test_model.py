import numpy as np
import pytest

from loca import model as M
from loca import tensor as T
from loca.errors import ConfigError, ContractError
from loca.tensor import Tensor

DESK = M.ViTConfig(
    patch_size=8, embed_dim=64, depth=4, num_heads=4, mlp_ratio=4,
    ref_grid=(8, 8), proj_dim=64, num_prototypes=256,
)
TINY = M.ViTConfig(
    patch_size=4, embed_dim=16, depth=2, num_heads=2, mlp_ratio=2,
    ref_grid=(3, 3), proj_dim=8, num_prototypes=12,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def test_init_is_deterministic():
    a = M.init_params(DESK, rng(7))
    b = M.init_params(DESK, rng(7))
    for name in a.names():
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_parameter_count_matches_closed_form():
    params = M.init_params(DESK, rng(0))
    d, hid, k = 64, 256, 256
    n_pos, in_dim, proj = 64, 8 * 8 * 3, 64
    # attention: four d x d maps with biases on q, v, o only (no key bias)
    block = 2 * d + 4 * d * d + 3 * d + 2 * d + d * hid + hid + hid * d + d
    expected = (
        in_dim * d + d          # patch embed
        + n_pos * d             # positional table
        + 4 * block             # encoder blocks
        + 2 * d                 # final layer norm
        + d * d + d + d * proj + proj  # projection MLP
        + k * proj              # prototypes
        + block + 2 * d + d     # cross-attention block + kv norm + placeholder
        + d * n_pos             # position classifier
    )
    assert params.n_parameters() == expected


def test_prototypes_unit_norm():
    params = M.init_params(DESK, rng(1))
    norms = np.linalg.norm(params["prototypes"].data, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-6)


def test_config_validation():
    with pytest.raises(ConfigError):
        M.ViTConfig(8, 65, 4, 4, 4, (8, 8), 64, 256)


def test_interpolation_identity():
    params = M.init_params(TINY, rng(2))
    out = M.interpolate_pos_embed(params, (3, 3))
    np.testing.assert_array_equal(out.data, params["pos_embed"].data)


def test_interpolation_2x2_to_1x1_is_corner_mean():
    mat = M.interpolation_matrix((2, 2), (1, 1))
    np.testing.assert_allclose(mat, np.full((1, 4), 0.25))


def test_interpolation_stays_in_convex_hull():
    mat = M.interpolation_matrix((14, 14), (6, 6))
    assert mat.shape == (36, 196)
    np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-6)
    assert (mat >= 0).all()
    # downsample then upsample differs from the original (lossy)
    table = rng(3).normal(size=(196, 5)).astype(np.float32)
    down = mat @ table
    back = M.interpolation_matrix((6, 6), (14, 14)) @ down
    assert not np.allclose(back, table)
    # each interpolated vector lies inside the per-coordinate range
    assert (down.min(axis=0) >= table.min(axis=0) - 1e-6).all()
    assert (down.max(axis=0) <= table.max(axis=0) + 1e-6).all()


def test_encode_shapes_for_kept_subsets():
    params = M.init_params(TINY, rng(4))
    vecs = rng(5).uniform(0, 1, size=(5, TINY.patch_input_dim)).astype(np.float32)
    kept = np.array([0, 2, 4, 6, 8])
    z = M.encode_view(params, vecs, (3, 3), kept)
    assert z.shape == (5, 16)


def test_encode_empty_kept_rejected():
    params = M.init_params(TINY, rng(4))
    with pytest.raises(ContractError):
        M.encode_view(params, np.zeros((0, TINY.patch_input_dim)), (3, 3), np.array([], dtype=int))


def test_encode_permutation_equivariance():
    params = M.init_params(TINY, rng(6))
    vecs = rng(7).uniform(0, 1, size=(6, TINY.patch_input_dim)).astype(np.float32)
    kept = np.array([0, 1, 3, 5, 7, 8])
    z = M.encode_view(params, vecs, (3, 3), kept)
    perm = np.array([4, 2, 0, 5, 1, 3])
    z_perm = M.encode_view(params, vecs[perm], (3, 3), kept[perm])
    np.testing.assert_allclose(z_perm.data, z.data[perm], atol=1e-5)


def test_depth_zero_subset_matches_full_columns():
    cfg = M.ViTConfig(4, 16, 0, 2, 2, (3, 3), 8, 12)
    params = M.init_params(cfg, rng(8))
    vecs = rng(9).uniform(0, 1, size=(9, cfg.patch_input_dim)).astype(np.float32)
    full = M.encode_view(params, vecs, (3, 3), np.arange(9))
    subset = np.array([1, 4, 6])
    part = M.encode_view(params, vecs[subset], (3, 3), subset)
    np.testing.assert_allclose(part.data, full.data[subset], atol=1e-6)


def test_projection_rows_unit_norm():
    params = M.init_params(TINY, rng(10))
    z = Tensor(rng(11).normal(size=(7, 16)).astype(np.float32))
    out = M.project_features(params, z)
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-6)
    assert out.shape == (7, 8)


def test_cross_attend_single_token_gets_full_attention():
    params = M.init_params(TINY, rng(12))
    z_q = Tensor(rng(13).normal(size=(4, 16)).astype(np.float32))
    one = Tensor(rng(14).normal(size=(1, 16)).astype(np.float32))
    g = M.cross_attend(params, z_q, one)
    # with a single key, attention output equals the residual path plus
    # the block applied to that one token, independent of scores
    two = Tensor(np.repeat(one.data, 2, axis=0))
    g2 = M.cross_attend(params, z_q, two)
    np.testing.assert_allclose(g.data, g2.data, atol=1e-5)
    assert g.shape == (4, 16)


def test_cross_attend_key_order_invariance():
    params = M.init_params(TINY, rng(15))
    z_q = Tensor(rng(16).normal(size=(5, 16)).astype(np.float32))
    ref = rng(17).normal(size=(6, 16)).astype(np.float32)
    out = M.cross_attend(params, z_q, Tensor(ref))
    perm = np.array([3, 0, 5, 1, 4, 2])
    out_perm = M.cross_attend(params, z_q, Tensor(ref[perm]))
    np.testing.assert_allclose(out.data, out_perm.data, atol=1e-5)


def test_cross_attend_placeholder_path():
    params = M.init_params(TINY, rng(18))
    z_q = Tensor(rng(19).normal(size=(3, 16)).astype(np.float32))
    g = M.cross_attend(params, z_q, None)
    assert g.shape == (3, 16)
    with pytest.raises(ContractError):
        M.cross_attend(params, z_q, Tensor(np.zeros((0, 16), dtype=np.float32)))


def test_position_logits_shape_and_uniform_loss():
    params = M.init_params(TINY, rng(20))
    params.tensors["pos_head.w"] = Tensor(np.zeros((16, 9), dtype=np.float32), requires_grad=True)
    g = Tensor(rng(21).normal(size=(4, 16)).astype(np.float32))
    logits = M.position_logits(params, g)
    assert logits.shape == (4, 9)
    loss = T.cross_entropy_from_logits(logits, np.array([0, 1, 2, 3]))
    assert abs(loss.item() - np.log(9)) < 1e-6


def test_forward_is_deterministic():
    params = M.init_params(TINY, rng(22))
    vecs = rng(23).uniform(0, 1, size=(9, TINY.patch_input_dim)).astype(np.float32)
    a = M.encode_view(params, vecs, (3, 3), np.arange(9)).data
    b = M.encode_view(params, vecs, (3, 3), np.arange(9)).data
    np.testing.assert_array_equal(a, b)


def test_encoder_gradient_check():
    cfg = M.ViTConfig(4, 8, 2, 2, 2, (2, 2), 4, 6)
    params = M.init_params(cfg, rng(24)).astype(np.float64)
    vecs = rng(25).uniform(0, 1, size=(4, cfg.patch_input_dim))
    weights = rng(26).normal(size=(4, 8))

    results = {}
    for name in ("patch_embed.w", "block0.attn.wq", "block1.mlp.w1", "pos_embed", "final_ln.g"):
        base = params[name].data.copy()

        def f(t, name=name, base=base):
            params.tensors[name] = t
            z = M.encode_view(params, vecs, (2, 2), np.arange(4))
            params.tensors[name] = Tensor(base, requires_grad=True, dtype=np.float64)
            return T.sum_all(T.mul(z, Tensor(weights, dtype=np.float64)))

        coords = rng(27).choice(base.size, size=min(20, base.size), replace=False)
        results[name] = T.finite_difference_check(f, Tensor(base, dtype=np.float64), coords=coords)
    assert all(v < 1e-3 for v in results.values()), results


def test_projection_and_cross_attention_gradient_check():
    cfg = M.ViTConfig(4, 8, 1, 2, 2, (2, 2), 4, 6)
    params = M.init_params(cfg, rng(28)).astype(np.float64)
    z_q = rng(29).normal(size=(3, 8))
    z_ref = rng(30).normal(size=(5, 8))
    weights = rng(31).normal(size=(3, 8))

    def f_xattn(t):
        g = M.cross_attend(params, Tensor(z_q, dtype=np.float64), t)
        return T.sum_all(T.mul(g, Tensor(weights, dtype=np.float64)))

    assert T.finite_difference_check(f_xattn, Tensor(z_ref, dtype=np.float64)) < 1e-3

    w_proj = rng(32).normal(size=(3, 4))

    def f_proj(t):
        out = M.project_features(params, t)
        return T.sum_all(T.mul(out, Tensor(w_proj, dtype=np.float64)))

    assert T.finite_difference_check(f_proj, Tensor(z_q, dtype=np.float64)) < 1e-3
