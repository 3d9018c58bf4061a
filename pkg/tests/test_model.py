"""Toy victim model: gradients, training, checkpoints."""

import numpy as np
import pytest

from reapkit import model, render, signs


def _crop_dataset(classes):
    data = []
    for name in classes:
        data.append((signs.canonical_sign(name), signs.class_index(name)))
    # one background example
    data.append((np.full((64, 64, 3), 0.3),
                 signs.class_index(signs.BACKGROUND_CLASS)))
    return data


def test_forward_output_shape_and_softmax():
    m = model.ToyModel.init(0)
    out = m.forward(np.zeros((64, 64, 3)))
    assert out.logits.shape == (signs.NUM_CLASSES,)
    assert out.confidence.sum() == pytest.approx(1.0)
    assert (out.confidence >= 0).all()


def test_input_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    m = model.ToyModel.init(0)
    crop = rng.uniform(size=(64, 64, 3))
    upstream = rng.normal(size=signs.NUM_CLASSES)
    g = model.toy_input_grad(m, crop, upstream)
    eps = 1e-6
    for _ in range(20):
        i, j, c = rng.integers(0, 64), rng.integers(0, 64), rng.integers(0, 3)
        hi = crop.copy()
        hi[i, j, c] += eps
        lo = crop.copy()
        lo[i, j, c] -= eps
        fd = np.dot(upstream, m.forward(hi).logits - m.forward(lo).logits) / (2 * eps)
        assert g[i, j, c] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_param_grads_match_finite_differences():
    rng = np.random.default_rng(1)
    m = model.ToyModel.init(0)
    crop = rng.uniform(size=(64, 64, 3))
    label = 3
    _, grads = m.loss_and_grads(crop, label)
    eps = 1e-6
    for name in ("w1", "b2", "wf", "bf"):
        arr = m.params[name]
        idx = tuple(rng.integers(0, s) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + eps
        hi, _ = m.loss_and_grads(crop, label)
        arr[idx] = orig - eps
        lo, _ = m.loss_and_grads(crop, label)
        arr[idx] = orig
        assert grads[name][idx] == pytest.approx((hi - lo) / (2 * eps),
                                                 rel=1e-4, abs=1e-8)


def test_train_toy_fits_separable_canonical_crops():
    data = _crop_dataset(["circle", "octagon", "square", "triangle"])
    m = model.train_toy(data, epochs=200, seed=0)
    assert model.accuracy(m, data) == 1.0


def test_train_toy_deterministic():
    data = _crop_dataset(["circle", "square"])
    a = model.train_toy(data, epochs=20, seed=0)
    b = model.train_toy(data, epochs=20, seed=0)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_train_toy_empty_raises():
    with pytest.raises(ValueError):
        model.train_toy([])


def test_adv_train_zero_steps_reduces_to_plain_training():
    from reapkit import attack
    data = _crop_dataset(["circle", "square"])
    plain = model.train_toy(data, epochs=10, seed=0)
    cfg = attack.AttackConfig(step_size=0.05)
    adv = model.adv_train_toy(data, cfg, epochs=10, seed=0,
                              attack_steps=0, patch_px=0)
    for k in plain.params:
        assert np.allclose(plain.params[k], adv.params[k])


def test_decide_detection_threshold_rule():
    out = model.ModelOutput(np.zeros(signs.NUM_CLASSES))
    uniform = 1.0 / signs.NUM_CLASSES
    assert model.decide_detection(out, uniform, "circle")
    assert not model.decide_detection(out, uniform + 1e-9, "circle")
    with pytest.raises(ValueError):
        model.decide_detection(out, 1.5, "circle")


def test_checkpoint_roundtrip_exact(tmp_path):
    m = model.ToyModel.init(7)
    path = tmp_path / "m.bin"
    model.save_model(m, path)
    back = model.load_model(path)
    for k in m.params:
        assert np.array_equal(m.params[k], back.params[k])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        model.load_model(path)
