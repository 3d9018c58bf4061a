"""Desk-scale victim model: a tiny sign classifier with manual backprop.

Detection here is crop-level: each annotated sign yields a 64x64 crop via
its geometric transform and is classified independently into one of the 11
sign classes or background.  The architecture is two 3x3 convolutions with
ReLU and 4x4 average pooling, followed by a linear head:

    64x64x3 -> conv3x3(8) -> relu -> avgpool4 -> conv3x3(16) -> relu
            -> avgpool4 -> flatten(256) -> linear -> 12 logits

Forward and backward passes are written out by hand (im2col) so the model
provides exact input gradients for attack optimization.  Training is plain
full-batch gradient descent with a fixed step, deterministic given a seed.

Checkpoint format (``save_model``/``load_model``): little-endian binary with
magic ``RPKT``, a format version, and a shapes header followed by float64
parameter data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import signs

CROP_SIZE = 64
_C1, _C2 = 8, 16
_POOL = 4
_FEAT = (CROP_SIZE // _POOL // _POOL) ** 2 * _C2  # 4*4*16 = 256

CHECKPOINT_MAGIC = b"RPKT"
CHECKPOINT_VERSION = 1

_PARAM_ORDER = ("w1", "b1", "w2", "b2", "wf", "bf")


@dataclass(frozen=True)
class ModelOutput:
    logits: np.ndarray  # (NUM_CLASSES,)

    @property
    def confidence(self) -> np.ndarray:
        z = self.logits - self.logits.max()
        e = np.exp(z)
        return e / e.sum()


def _im2col(x: np.ndarray, k: int = 3):
    """(H, W, C) -> (H*W, k*k*C) patches with zero padding, stride 1."""
    h, w, c = x.shape
    pad = np.zeros((h + 2, w + 2, c))
    pad[1:-1, 1:-1] = x
    cols = np.empty((h, w, k * k * c))
    for dy in range(k):
        for dx in range(k):
            cols[:, :, (dy * k + dx) * c:(dy * k + dx + 1) * c] = \
                pad[dy:dy + h, dx:dx + w]
    return cols.reshape(h * w, k * k * c)


def _col2im(cols: np.ndarray, shape, k: int = 3):
    """Adjoint of _im2col: scatter column gradients back to image layout."""
    h, w, c = shape
    cols = cols.reshape(h, w, k * k * c)
    pad = np.zeros((h + 2, w + 2, c))
    for dy in range(k):
        for dx in range(k):
            pad[dy:dy + h, dx:dx + w] += \
                cols[:, :, (dy * k + dx) * c:(dy * k + dx + 1) * c]
    return pad[1:-1, 1:-1]


def _avgpool(x: np.ndarray, s: int = _POOL):
    h, w, c = x.shape
    return x.reshape(h // s, s, w // s, s, c).mean(axis=(1, 3))


def _avgpool_grad(g: np.ndarray, s: int = _POOL):
    h, w, c = g.shape
    out = np.repeat(np.repeat(g, s, axis=0), s, axis=1)
    return out / (s * s)


class ToyModel:
    """Two-conv classifier over the sign classes plus background."""

    def __init__(self, params: dict):
        self.params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        assert set(self.params) == set(_PARAM_ORDER)

    @classmethod
    def init(cls, seed: int = 0) -> "ToyModel":
        rng = np.random.default_rng(seed)
        def he(shape, fan_in):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        return cls({
            "w1": he((3 * 3 * 3, _C1), 27),
            "b1": np.zeros(_C1),
            "w2": he((3 * 3 * _C1, _C2), 9 * _C1),
            "b2": np.zeros(_C2),
            "wf": he((_FEAT, signs.NUM_CLASSES), _FEAT),
            "bf": np.zeros(signs.NUM_CLASSES),
        })

    def _forward_cached(self, crop: np.ndarray):
        p = self.params
        # Center the input; [0,1] crops are otherwise all-positive, which
        # conditions the first conv layer badly under plain GD.
        crop = crop - 0.5
        cols1 = _im2col(crop)
        z1 = (cols1 @ p["w1"] + p["b1"]).reshape(CROP_SIZE, CROP_SIZE, _C1)
        a1 = np.maximum(z1, 0.0)
        p1 = _avgpool(a1)
        cols2 = _im2col(p1)
        h2 = CROP_SIZE // _POOL
        z2 = (cols2 @ p["w2"] + p["b2"]).reshape(h2, h2, _C2)
        a2 = np.maximum(z2, 0.0)
        p2 = _avgpool(a2)
        feat = p2.ravel()
        logits = feat @ p["wf"] + p["bf"]
        return logits, (crop, cols1, z1, p1, cols2, z2, p2, feat)

    def forward(self, crop: np.ndarray) -> ModelOutput:
        crop = np.asarray(crop, dtype=float)
        logits, _ = self._forward_cached(crop)
        return ModelOutput(logits)

    def _backward(self, cache, upstream: np.ndarray, want_params: bool):
        """Shared backward pass; returns (input_grad, param_grads or None)."""
        p = self.params
        crop, cols1, z1, p1, cols2, z2, p2, feat = cache
        grads = {} if want_params else None
        if want_params:
            grads["wf"] = np.outer(feat, upstream)
            grads["bf"] = upstream.copy()
        g_feat = p["wf"] @ upstream
        g_p2 = g_feat.reshape(p2.shape)
        g_a2 = _avgpool_grad(g_p2)
        g_z2 = g_a2 * (z2 > 0)
        g_flat2 = g_z2.reshape(-1, _C2)
        if want_params:
            grads["w2"] = cols2.T @ g_flat2
            grads["b2"] = g_flat2.sum(axis=0)
        g_cols2 = g_flat2 @ p["w2"].T
        g_p1 = _col2im(g_cols2, p1.shape)
        g_a1 = _avgpool_grad(g_p1)
        g_z1 = g_a1 * (z1 > 0)
        g_flat1 = g_z1.reshape(-1, _C1)
        if want_params:
            grads["w1"] = cols1.T @ g_flat1
            grads["b1"] = g_flat1.sum(axis=0)
        g_cols1 = g_flat1 @ p["w1"].T
        g_crop = _col2im(g_cols1, crop.shape)
        return g_crop, grads

    def input_grad(self, crop: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        """Gradient of upstream . logits with respect to the crop pixels."""
        crop = np.asarray(crop, dtype=float)
        _, cache = self._forward_cached(crop)
        g, _ = self._backward(cache, np.asarray(upstream, dtype=float), False)
        return g

    def loss_and_grads(self, crop: np.ndarray, label: int):
        """Softmax cross-entropy loss and parameter gradients for one crop."""
        logits, cache = self._forward_cached(np.asarray(crop, dtype=float))
        z = logits - logits.max()
        logp = z - np.log(np.exp(z).sum())
        loss = -logp[label]
        g_logits = np.exp(logp)
        g_logits[label] -= 1.0
        _, grads = self._backward(cache, g_logits, True)
        return loss, grads

    def copy(self) -> "ToyModel":
        return ToyModel({k: v.copy() for k, v in self.params.items()})


def toy_forward(model: ToyModel, crop: np.ndarray) -> ModelOutput:
    return model.forward(crop)


def toy_input_grad(model: ToyModel, crop: np.ndarray,
                   upstream: np.ndarray) -> np.ndarray:
    return model.input_grad(crop, upstream)


def decide_detection(out: ModelOutput, threshold: float, class_name: str) -> bool:
    """Detected iff the class confidence reaches the threshold (>= rule)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return bool(out.confidence[signs.class_index(class_name)] >= threshold)


def train_toy(dataset, epochs: int = 200, seed: int = 0,
              step: float = 0.5) -> ToyModel:
    """Plain full-batch gradient descent; deterministic given the seed.

    ``dataset`` is a sequence of (crop, label) pairs with at least one
    example per class present.
    """
    labels = {lab for _, lab in dataset}
    if not labels:
        raise ValueError("empty training set")
    model = ToyModel.init(seed)
    n = len(dataset)
    for _ in range(epochs):
        total = {k: np.zeros_like(v) for k, v in model.params.items()}
        for crop, label in dataset:
            _, grads = model.loss_and_grads(crop, label)
            for k in total:
                total[k] += grads[k]
        for k in model.params:
            model.params[k] -= step * total[k] / n
    return model


def accuracy(model: ToyModel, dataset) -> float:
    correct = sum(int(np.argmax(model.forward(c).logits) == l)
                  for c, l in dataset)
    return correct / len(dataset)


def adv_train_toy(dataset, attack_config, epochs: int = 20, seed: int = 0,
                  step: float = 0.5, attack_steps: int = 5,
                  patch_px: int = 12) -> ToyModel:
    """Adversarial training with per-example patch caching.

    Each epoch, every crop receives a square per-instance patch optimized
    for a few PGD steps starting from the patch cached for that example in
    the previous epoch, pasted at a uniformly random location; the cache is
    then updated.  With zero attack steps and an all-zero mask this reduces
    to plain training.
    """
    model = ToyModel.init(seed)
    rng = np.random.default_rng(seed + 1)
    n = len(dataset)
    cache = [np.full((patch_px, patch_px, 3), 0.5) for _ in range(n)]
    for _ in range(epochs):
        total = {k: np.zeros_like(v) for k, v in model.params.items()}
        for idx, (crop, label) in enumerate(dataset):
            crop = np.asarray(crop, dtype=float)
            y = int(rng.integers(0, CROP_SIZE - patch_px + 1))
            x = int(rng.integers(0, CROP_SIZE - patch_px + 1))
            patch = cache[idx].copy()
            for _ in range(attack_steps):
                adv = crop.copy()
                adv[y:y + patch_px, x:x + patch_px] = patch
                # Ascend the cross-entropy: upstream = softmax - onehot.
                up = model.forward(adv).confidence
                up[label] -= 1.0
                g = model.input_grad(adv, up)[y:y + patch_px, x:x + patch_px]
                patch = np.clip(patch + attack_config.step_size * np.sign(g),
                                0.0, 1.0)
            cache[idx] = patch
            adv = crop.copy()
            adv[y:y + patch_px, x:x + patch_px] = patch
            _, grads = model.loss_and_grads(adv, label)
            for k in total:
                total[k] += grads[k]
        for k in model.params:
            model.params[k] -= step * total[k] / n
    return model


def save_model(model: ToyModel, path) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(_PARAM_ORDER)))
        for name in _PARAM_ORDER:
            arr = np.ascontiguousarray(model.params[name], dtype="<f8")
            enc = name.encode()
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_model(path) -> ToyModel:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a model checkpoint")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * size), dtype="<f8")
            params[name] = data.reshape(shape).copy()
    return ToyModel(params)
