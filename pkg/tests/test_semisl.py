import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptany.nnkit import Batch, build_model
from adaptany.semisl import (LabeledSet, SemiConfig, UnlabeledSet,
                             build_semisl_inputs, fixmatch_step, mixmatch_step,
                             mixup, sharpen, train_semisl)
from adaptany.splitter import pseudo_label, split_by_category_mean

SHAPE = (16, 16, 3)


def _model(seed=0, categories=4):
    return build_model(categories, SHAPE, seed)


def _images(n, seed=0):
    return np.random.default_rng(seed).random((n,) + SHAPE)


def test_config_validation():
    with pytest.raises(ValueError):
        SemiConfig(method="pseudotag")
    with pytest.raises(ValueError):
        SemiConfig(sharpen_T=0.0)
    with pytest.raises(ValueError):
        SemiConfig(fixmatch_tau=0.0)
    with pytest.raises(ValueError):
        SemiConfig(k_augment=0)


def test_sharpen_identity_at_T_one():
    p = np.array([[0.2, 0.3, 0.5]])
    np.testing.assert_allclose(sharpen(p, 1.0), p)


def test_sharpen_uniform_is_fixed_point():
    p = np.array([[0.5, 0.5]])
    np.testing.assert_allclose(sharpen(p, 0.5), p)


def test_sharpen_hand_value():
    # [0.8, 0.2] at T=0.5: squares are [0.64, 0.04], normalized 16/17, 1/17
    out = sharpen(np.array([[0.8, 0.2]]), 0.5)
    np.testing.assert_allclose(out, [[16 / 17, 1 / 17]])


def test_sharpen_rejects_unnormalized():
    with pytest.raises(ValueError):
        sharpen(np.array([[0.5, 0.6]]), 0.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6),
       st.floats(0.05, 1.0))
def test_sharpen_properties(weights, T):
    p = np.array(weights) / np.sum(weights)
    out = sharpen(p[None, :], T)
    assert out.sum() == pytest.approx(1.0)
    assert np.all(out >= 0)
    # sharpening never moves the argmax
    assert int(np.argmax(out)) == int(np.argmax(p))
    # mass on the argmax never decreases for T <= 1
    assert out[0, np.argmax(p)] >= p[np.argmax(p)] - 1e-12


def test_mixup_lambda_max_rule():
    x1, x2 = np.array([1.0]), np.array([0.0])
    y1, y2 = np.array([1.0]), np.array([0.0])
    # lambda_raw 0.2 is flipped to 0.8: result stays close to first input
    xm, ym = mixup(x1, y1, x2, y2, 0.2)
    np.testing.assert_allclose(xm, [0.8])
    np.testing.assert_allclose(ym, [0.8])


def test_mixup_endpoints():
    x1, x2 = np.array([3.0]), np.array([7.0])
    y1, y2 = np.array([1.0]), np.array([0.0])
    for raw in (0.0, 1.0):
        xm, ym = mixup(x1, y1, x2, y2, raw)
        np.testing.assert_allclose(xm, x1)
        np.testing.assert_allclose(ym, y1)


def test_mixup_pixel_arithmetic():
    x1 = np.full((2, 2), 1.0)
    x2 = np.zeros((2, 2))
    y1 = np.array([1.0, 0.0])
    y2 = np.array([0.0, 1.0])
    xm, ym = mixup(x1, y1, x2, y2, 0.6)
    np.testing.assert_allclose(xm, np.full((2, 2), 0.6))
    np.testing.assert_allclose(ym, [0.6, 0.4])


def test_mixup_shape_mismatch():
    with pytest.raises(ValueError):
        mixup(np.zeros(3), np.zeros(2), np.zeros(4), np.zeros(2), 0.5)


def test_mixmatch_step_components():
    model = _model()
    lb = Batch(images=_images(6, 1), labels=np.array([0, 1, 2, 3, 0, 1]))
    ub = Batch(images=_images(4, 2))
    cfg = SemiConfig(method="mixmatch")
    total, comps = mixmatch_step(model, lb, ub, cfg, lambda_u=0.5, seed=3)
    assert comps["sup"] >= 0 and comps["unsup"] >= 0
    assert float(total.detach()) == pytest.approx(
        comps["sup"] + 0.5 * comps["unsup"])


def test_mixmatch_lambda_zero_ignores_unlabeled_loss():
    model = _model()
    lb = Batch(images=_images(6, 1), labels=np.array([0, 1, 2, 3, 0, 1]))
    ub = Batch(images=_images(4, 2))
    cfg = SemiConfig(method="mixmatch")
    total, comps = mixmatch_step(model, lb, ub, cfg, lambda_u=0.0, seed=3)
    assert float(total.detach()) == pytest.approx(comps["sup"])


def test_mixmatch_no_unlabeled_is_supervised_only():
    model = _model()
    lb = Batch(images=_images(6, 1), labels=np.array([0, 1, 2, 3, 0, 1]))
    cfg = SemiConfig(method="mixmatch")
    total, comps = mixmatch_step(model, lb, None, cfg, lambda_u=1.0, seed=3)
    assert comps["unsup"] == 0.0
    assert float(total.detach()) == pytest.approx(comps["sup"])


def test_fixmatch_tau_one_masks_almost_everything():
    model = _model()
    lb = Batch(images=_images(4, 1), labels=np.array([0, 1, 2, 3]))
    ub = Batch(images=_images(8, 2))
    cfg = SemiConfig(method="fixmatch", fixmatch_tau=1.0)
    _, comps = fixmatch_step(model, lb, ub, cfg, lambda_u=1.0, seed=3)
    # a fresh model's max softmax over 4 categories is far below 1.0
    assert comps["retained"] == 0
    assert comps["unsup"] == 0.0


def test_fixmatch_mask_monotone_in_tau():
    model = _model()
    lb = Batch(images=_images(4, 1), labels=np.array([0, 1, 2, 3]))
    ub = Batch(images=_images(16, 2))
    retained = []
    for tau in (0.05, 0.3, 0.6, 0.95):
        cfg = SemiConfig(method="fixmatch", fixmatch_tau=tau)
        _, comps = fixmatch_step(model, lb, ub, cfg, lambda_u=1.0, seed=3)
        retained.append(comps["retained"])
    assert retained == sorted(retained, reverse=True)
    assert retained[0] == 16  # tau below chance level keeps everything


def test_fixmatch_hand_masked_ce():
    # freeze targets: two unlabeled samples, one masked out, and verify the
    # unsup term equals mean(mask * CE) computed by hand
    model = _model()
    lb = Batch(images=_images(2, 1), labels=np.array([0, 1]))
    ub = Batch(images=_images(2, 2))
    cfg = SemiConfig(method="fixmatch")
    pseudo = np.array([1, 3])
    mask = np.array([True, False])
    total, comps = fixmatch_step(model, lb, ub, cfg, lambda_u=1.0, seed=5,
                                 targets=(pseudo, mask))
    from adaptany.nnkit import augment_strong
    import torch.nn.functional as F
    strong = augment_strong(ub, __import__("adaptany.nnkit", fromlist=["derive_seed"]).derive_seed(5, "strong"))
    model.net.train()
    _, logits = model.net(strong.to_tensor(), head="main")
    ce = F.cross_entropy(logits, torch.from_numpy(pseudo), reduction="none")
    expected = float((ce[0] * 1.0 + ce[1] * 0.0).detach()) / 2.0
    assert comps["unsup"] == pytest.approx(expected)
    assert comps["retained"] == 1


def test_build_semisl_inputs_uses_frozen_pseudo_labels(small_target):
    model = build_model(4, small_target.image_shape, 0)
    table = pseudo_label(model, small_target, "ck")
    part = split_by_category_mean(table)
    labeled, unlabeled = build_semisl_inputs(small_target, part)
    assert len(labeled.images) == len(part.confident_ids)
    assert len(unlabeled.images) == len(part.unconfident_ids)
    # labels come from the table, not from the manifest's ground truth
    by_id = {r.sample_id: i for i, r in enumerate(small_target.records)}
    conf_records = [r for r in small_target.records
                    if r.sample_id in part.confident_ids]
    for rec, lab in zip(conf_records, labeled.labels):
        assert lab == table.entries[rec.sample_id][0]


def test_train_semisl_requires_confident_samples():
    model = _model()
    labeled = LabeledSet(images=np.zeros((0,) + SHAPE),
                         labels=np.zeros(0, dtype=np.int64))
    unlabeled = UnlabeledSet(images=_images(4))
    with pytest.raises(ValueError):
        train_semisl(model, labeled, unlabeled, SemiConfig(epochs=1))


def test_train_semisl_rejects_out_of_range_pseudo_labels():
    model = _model(categories=2)
    labeled = LabeledSet(images=_images(4), labels=np.array([0, 1, 2, 1]))
    unlabeled = UnlabeledSet(images=np.zeros((0,) + SHAPE))
    with pytest.raises(ValueError):
        train_semisl(model, labeled, unlabeled, SemiConfig(epochs=1))


def test_train_semisl_does_not_mutate_init():
    init = _model()
    before = [p.clone() for p in init.net.parameters()]
    labeled = LabeledSet(images=_images(8, 1),
                         labels=np.array([0, 1, 2, 3, 0, 1, 2, 3]))
    unlabeled = UnlabeledSet(images=_images(6, 2))
    cfg = SemiConfig(method="mixmatch", epochs=1, batch_size=8, seed=0)
    trained, report = train_semisl(init, labeled, unlabeled, cfg)
    for p, b in zip(init.net.parameters(), before):
        assert torch.equal(p, b)
    assert trained.stage_tag == "stage3"
    assert report.stage_tag == "stage3"


@pytest.mark.parametrize("method", ["mixmatch", "fixmatch"])
def test_train_semisl_deterministic(method):
    labeled = LabeledSet(images=_images(8, 1),
                         labels=np.array([0, 1, 2, 3, 0, 1, 2, 3]))
    unlabeled = UnlabeledSet(images=_images(6, 2))
    cfg = SemiConfig(method=method, epochs=2, batch_size=8, seed=4)
    m1, r1 = train_semisl(_model(1), labeled, unlabeled, cfg)
    m2, r2 = train_semisl(_model(1), labeled, unlabeled, cfg)
    assert r1.losses == r2.losses
    for p1, p2 in zip(m1.net.parameters(), m2.net.parameters()):
        assert torch.equal(p1, p2)


def test_train_semisl_ramp_reaches_full_weight():
    labeled = LabeledSet(images=_images(8, 1),
                         labels=np.array([0, 1, 2, 3, 0, 1, 2, 3]))
    unlabeled = UnlabeledSet(images=_images(6, 2))
    seen = []
    import adaptany.semisl as mod
    orig = mod.mixmatch_step

    def spy(*args, **kwargs):
        seen.append(args[4])
        return orig(*args, **kwargs)

    mod.mixmatch_step = spy
    try:
        cfg = SemiConfig(method="mixmatch", epochs=3, batch_size=2, seed=0,
                         unlabeled_weight=2.0)
        train_semisl(_model(), labeled, unlabeled, cfg)
    finally:
        mod.mixmatch_step = orig
    assert seen[0] < seen[-1]
    assert seen[-1] == pytest.approx(2.0)
    third = max(1, int(len(seen) / 3))
    assert all(w == pytest.approx(2.0) for w in seen[third:])
