import numpy as np
import pytest
import torch
import torch.nn.functional as F

from adaptany.nnkit import (Batch, NonFiniteError, augment_strong,
                            augment_weak, build_model, forward, grad_check,
                            load_checkpoint, save_checkpoint, sgd_step,
                            softmax)

SHAPE = (16, 16, 3)


def _batch(n=4, shape=SHAPE, seed=0, labeled=True):
    r = np.random.default_rng(seed)
    return Batch(images=r.random((n,) + shape),
                 labels=r.integers(0, 4, n) if labeled else None)


def test_forward_shapes():
    model = build_model(10, SHAPE, 0)
    _, logits = forward(model, _batch(4))
    assert logits.shape == (4, 10)


def test_forward_deterministic():
    model = build_model(4, SHAPE, 0)
    b = _batch()
    _, l1 = forward(model, b)
    _, l2 = forward(model, b)
    assert np.array_equal(l1, l2)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        Batch(images=np.zeros((0, 16, 16, 3)))


def test_forward_unknown_head():
    model = build_model(4, SHAPE, 0)
    with pytest.raises(KeyError):
        forward(model, _batch(), head="nope")


def test_softmax_rows_normalized():
    r = np.random.default_rng(1)
    probs = softmax(r.normal(0, 5, (20, 7)))
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_grad_check_quadratic():
    # analytic gradient of 0.5*||theta||^2 is theta exactly
    lin = torch.nn.Linear(5, 3).double()

    def loss_fn():
        return 0.5 * sum((p ** 2).sum() for p in lin.parameters())

    assert grad_check(loss_fn, lin, probe_count=10) <= 1e-6


def test_grad_check_cross_entropy_small_model():
    model = build_model(4, SHAPE, 3)
    b = _batch(6, seed=3)
    x, y = b.to_tensor(), torch.from_numpy(b.labels)
    model.net.train()

    def loss_fn():
        _, logits = model.net(x)
        return F.cross_entropy(logits, y)

    assert grad_check(loss_fn, model.net, probe_count=30, epsilon=1e-4,
                      seed=1) <= 1e-3


def test_grad_check_nonfinite_loss():
    lin = torch.nn.Linear(2, 1).double()

    def loss_fn():
        return lin.weight.sum() * float("nan")

    with pytest.raises(NonFiniteError):
        grad_check(loss_fn, lin)


def test_sgd_step_hand_arithmetic():
    theta, _ = sgd_step(np.array([1.0, 1.0]), np.array([1.0, -1.0]),
                        lr=0.1, momentum=0.0, weight_decay=0.0)
    np.testing.assert_allclose(theta, [0.9, 1.1])


def test_sgd_step_zero_lr():
    theta, _ = sgd_step(np.array([1.0, 2.0]), np.array([3.0, 4.0]), lr=0.0)
    np.testing.assert_allclose(theta, [1.0, 2.0])


def test_sgd_step_rejects_nan():
    with pytest.raises(NonFiniteError):
        sgd_step(np.array([1.0]), np.array([float("nan")]), lr=0.1)


def test_sgd_step_momentum_accumulates():
    theta = np.array([0.0])
    g = np.array([1.0])
    theta, v = sgd_step(theta, g, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(theta, [-0.1])
    theta, v = sgd_step(theta, g, velocity=v, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(theta, [-0.1 - 0.1 * 1.9])


def test_augment_deterministic():
    b = _batch(8, seed=5)
    a1 = augment_weak(b, 42)
    a2 = augment_weak(b, 42)
    assert np.array_equal(a1.images, a2.images)
    s1 = augment_strong(b, 42)
    s2 = augment_strong(b, 42)
    assert np.array_equal(s1.images, s2.images)


def test_augment_preserves_labels_and_size():
    b = _batch(8, seed=5)
    for fn in (augment_weak, augment_strong):
        out = fn(b, 7)
        assert out.images.shape == b.images.shape
        assert np.array_equal(out.labels, b.labels)


def test_weak_bounded_by_flip_and_shift():
    # every weakly augmented image equals some flip + <=2px shift of the input
    b = _batch(4, seed=9)
    out = augment_weak(b, 11)
    from adaptany.nnkit import _shift2d
    for i in range(b.size):
        candidates = []
        for flip in (False, True):
            img = b.images[i][:, ::-1, :] if flip else b.images[i]
            for dy in range(-2, 3):
                for dx in range(-2, 3):
                    candidates.append(_shift2d(img, dy, dx))
        assert any(np.array_equal(out.images[i], c) for c in candidates)


def test_strong_changes_more_than_weak():
    diffs_w, diffs_s = [], []
    for seed in range(100):
        b = _batch(4, seed=seed)
        diffs_w.append(np.abs(augment_weak(b, seed).images - b.images).mean())
        diffs_s.append(np.abs(augment_strong(b, seed).images - b.images).mean())
    assert np.mean(diffs_s) > np.mean(diffs_w)


def test_checkpoint_roundtrip(tmp_path):
    model = build_model(4, SHAPE, 0, head_names=("h1", "h2"))
    model.stage_tag = "stage2"
    save_checkpoint(model, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")
    assert loaded.stage_tag == "stage2"
    assert loaded.head_names == ["h1", "h2"]
    b = _batch()
    for head in ("h1", "h2"):
        _, l1 = forward(model, b, head=head)
        _, l2 = forward(loaded, b, head=head)
        np.testing.assert_array_equal(l1, l2)


def test_checkpoint_bytes_deterministic(tmp_path):
    model = build_model(4, SHAPE, 0)
    save_checkpoint(model, tmp_path / "a")
    save_checkpoint(model, tmp_path / "b")
    for name in ("meta.json", "extractor.npy", "head_main.npy"):
        assert (tmp_path / "a" / name).read_bytes() == \
               (tmp_path / "b" / name).read_bytes()


def test_build_model_seeded():
    m1 = build_model(4, SHAPE, 7)
    m2 = build_model(4, SHAPE, 7)
    b = _batch()
    _, l1 = forward(m1, b)
    _, l2 = forward(m2, b)
    np.testing.assert_array_equal(l1, l2)
