import numpy as np
import pytest

from loca import datagen, evaluate as E, model as M, trainer as TR
from loca.augment import View, identity_record, render_view
from loca.config import parse_config
from loca.errors import ContractError, DegenerateInputError


def desk_cfg(**flags):
    base = {"corpus_size": 8}
    base.update(flags)
    return parse_config(flags=base)


def held_out(cfg, n=4):
    corpus = datagen.build_corpus(cfg.corpus_size, cfg.corpus_seed, cfg.scene_spec())
    return [im.pixels for im in corpus[1::2]][:n], corpus


def test_compute_miou_diagonal():
    res = E.compute_miou(np.diag([5, 3, 2]))
    assert res.per_class_iou == [1.0, 1.0, 1.0]
    assert res.miou == 1.0


def test_compute_miou_hand_case():
    res = E.compute_miou(np.array([[5, 5], [5, 5]]))
    np.testing.assert_allclose(res.per_class_iou, [1 / 3, 1 / 3])
    assert abs(res.miou - 1 / 3) < 1e-12


def test_compute_miou_excludes_absent_class():
    conf = np.array([[10, 0, 0], [0, 5, 0], [0, 0, 0]])
    res = E.compute_miou(conf)
    assert res.per_class_iou[2] is None
    assert res.miou == 1.0


def test_compute_miou_relabel_equivariance():
    rng = np.random.default_rng(0)
    conf = rng.integers(0, 20, size=(4, 4))
    perm = np.array([2, 0, 3, 1])
    base = E.compute_miou(conf)
    permuted = E.compute_miou(conf[np.ix_(perm, perm)])
    np.testing.assert_allclose(
        [base.per_class_iou[p] for p in perm], permuted.per_class_iou
    )


def test_compute_miou_rejects_empty():
    with pytest.raises(ContractError):
        E.compute_miou(np.zeros((0, 0)))


def test_eval_pairs_deterministic():
    cfg = desk_cfg()
    images, _ = held_out(cfg)
    a = E.make_eval_pairs(images, 5, cfg.vit_config(), cfg.augment_config(), 0.8, True, seed=1)
    b = E.make_eval_pairs(images, 5, cfg.vit_config(), cfg.augment_config(), 0.8, True, seed=1)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.query.pixels, y.query.pixels)
        np.testing.assert_array_equal(x.corr.h, y.corr.h)
        np.testing.assert_array_equal(x.plan.visible, y.plan.visible)


def test_position_accuracy_partition_invariance():
    cfg = desk_cfg()
    images, _ = held_out(cfg)
    pairs = E.make_eval_pairs(images, 6, cfg.vit_config(), cfg.augment_config(), 0.8, True, seed=2)
    state = TR.init_train_state(cfg.train_config(), cfg.vit_config())
    params = TR.eval_params(state)

    def weighted(parts):
        num = den = 0
        for part in parts:
            if not part:
                continue
            acc, _ = E.position_eval(params, part)
            n = sum(len(p.corr) for p in part)
            num += acc * n
            den += n
        return num / den

    full = E.position_accuracy(params, pairs)
    split = weighted([pairs[:2], pairs[2:5], pairs[5:]])
    assert abs(full - split) < 1e-9


def test_position_eval_errors_on_empty_omega():
    cfg = desk_cfg()
    images, _ = held_out(cfg)
    pairs = E.make_eval_pairs(images, 2, cfg.vit_config(), cfg.augment_config(), 0.8, True, seed=3)
    for p in pairs:
        p.corr.h[:] = -1
    state = TR.init_train_state(cfg.train_config(), cfg.vit_config())
    with pytest.raises(DegenerateInputError):
        E.position_eval(TR.eval_params(state), pairs)


def test_forced_onehot_logits_give_full_accuracy():
    # oracle-style upper bound: if the position head is rigged so that
    # token j scores highest at its own target, accuracy is 100%
    cfg = desk_cfg()
    images, _ = held_out(cfg)
    vit = cfg.vit_config()
    pairs = E.make_eval_pairs(images, 3, vit, cfg.augment_config(), 0.0, True, seed=4)
    correct = total = 0
    for pair in pairs:
        rows = pair.corr.omega_rows
        logits = np.zeros((len(pair.query.kept_tokens), vit.num_positions))
        logits[rows, pair.corr.targets] = 10.0
        correct += int((logits[rows].argmax(axis=1) == pair.corr.targets).sum())
        total += rows.size
    assert total > 0 and correct == total


def test_mean_prediction_entropy_bounds():
    cfg = desk_cfg()
    images, _ = held_out(cfg)
    pairs = E.make_eval_pairs(images, 4, cfg.vit_config(), cfg.augment_config(), 0.8, True, seed=5)
    state = TR.init_train_state(cfg.train_config(), cfg.vit_config())
    h = E.mean_prediction_entropy(TR.eval_params(state), pairs, tau_student=0.1)
    assert 0.0 <= h <= np.log(cfg.num_prototypes) + 1e-9


def test_entropy_of_uniform_and_collapsed_predictions():
    k = 4096
    p_uniform = np.full(k, 1.0 / k)
    h_uniform = float(-(p_uniform * np.log(p_uniform)).sum())
    assert abs(h_uniform - np.log(4096)) < 1e-9  # ~8.3178
    p_onehot = np.zeros(k)
    p_onehot[0] = 1.0
    h0 = float(-(p_onehot[p_onehot > 0] * np.log(p_onehot[p_onehot > 0])).sum())
    assert h0 == 0.0
    p2 = np.array([0.5, 0.5])
    assert abs(float(-(p2 * np.log(p2)).sum()) - np.log(2)) < 1e-12


def test_patch_majority_labels_identity_view():
    labels = np.zeros((64, 64), dtype=np.int64)
    labels[:32, :] = 3  # top half class 3
    pixels = np.zeros((64, 64, 3), dtype=np.float32)
    view = View(pixels, identity_record((64, 64)), 8, np.arange(64))
    pooled = E.patch_majority_labels(labels, view)
    assert pooled.shape == (64,)
    np.testing.assert_array_equal(pooled[:32], 3)
    np.testing.assert_array_equal(pooled[32:], 0)


def test_probe_background_only_case():
    rng = np.random.default_rng(1)
    ims = [
        datagen.LabeledImage(
            rng.uniform(0, 1, (64, 64, 3)).astype(np.float32),
            np.zeros((64, 64), dtype=np.int64),
            5,
        )
        for _ in range(4)
    ]

    def encode(image):
        view = render_view(image, identity_record((64, 64)), 8)
        return np.ones((64, 4), dtype=np.float32), view

    res = E.linear_probe_segmentation(encode, ims[:2], ims[2:], E.ProbeConfig(epochs=5))
    assert res.per_class_iou[0] == 1.0
    assert all(x is None for x in res.per_class_iou[1:])
    assert res.miou == 1.0


def test_probe_perfect_features_reach_full_miou():
    spec = datagen.SceneSpec(canvas=64)
    corpus = datagen.build_corpus(8, 5, spec)
    train, evals = datagen.split_by_parity(corpus)

    def oracle_encode(image):
        # look up the labeled image by pixel identity and emit one-hot
        # class features per patch: a linearly separable upper bound
        view = render_view(image, identity_record((64, 64)), 8)
        for im in corpus:
            if np.array_equal(im.pixels, image):
                labels = E.patch_majority_labels(im.labels, view)
                feats = np.zeros((64, spec.class_count), dtype=np.float32)
                feats[np.arange(64), labels] = 1.0
                return feats, view
        raise AssertionError("unknown image")

    res = E.linear_probe_segmentation(oracle_encode, train, evals, E.ProbeConfig(epochs=60, lr=0.2))
    assert res.miou == 1.0
