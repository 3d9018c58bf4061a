"""Patch optimization: RP2/DPatch losses, EoT, PGD and Adam, TV penalty.

The attack loop is: sample an EoT perturbation, composite the patch onto a
training scene, pull the object's crop, run the victim model, and backprop
the attack loss through the model input gradient, the crop warp, and the
compositing chain back to the patch pixels.  Per-class mode shares one
patch across all objects of a class; per-instance mode optimizes a patch
for a single object.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry, model as model_mod, render, relight, signs
from .errors import NoTargetObjects

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class EotConfig:
    """Expectation-over-transformation sampling ranges."""

    rotation_max_deg: float = 15.0
    jitter_strength: float = 0.0
    noise_strength: float = 0.0
    samples_per_step: int = 1

    def __post_init__(self):
        if self.rotation_max_deg < 0 or self.jitter_strength < 0 \
                or self.noise_strength < 0:
            raise ValueError("EoT strengths must be nonnegative")
        if self.samples_per_step < 1:
            raise ValueError("need at least one EoT sample per step")


@dataclass(frozen=True)
class AttackConfig:
    algorithm: str = "dpatch"  # rp2 | dpatch
    optimizer: str = "pgd"  # pgd | adam
    step_size: float = None  # default by optimizer/mode
    iterations: int = None
    lambda_lowfreq: float = 1e-5
    mode: str = "per-class"  # per-class | per-instance
    train_images: int = 5
    patch_size: str = "small"
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("rp2", "dpatch"):
            raise ValueError(f"unknown attack algorithm {self.algorithm!r}")
        if self.optimizer not in ("pgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mode not in ("per-class", "per-instance"):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.step_size is None:
            if self.mode == "per-instance":
                step = 0.02
            else:
                step = 0.01 if self.optimizer == "pgd" else 0.1
            object.__setattr__(self, "step_size", step)
        if self.iterations is None:
            object.__setattr__(
                self, "iterations",
                100 if self.mode == "per-instance" else 1000)
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.iterations < 0:
            raise ValueError("iteration count must be nonnegative")

    def digest(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Losses (all <= 0; the attacker minimizes them).

def rp2_loss(out: model_mod.ModelOutput, true_class: int) -> float:
    """Untargeted margin loss -max(0, logit_true - max_other)."""
    logits = out.logits
    others = np.delete(logits, true_class)
    margin = logits[true_class] - others.max()
    return -max(0.0, float(margin))


def rp2_loss_grad(out: model_mod.ModelOutput, true_class: int) -> np.ndarray:
    """d rp2_loss / d logits."""
    logits = out.logits
    g = np.zeros_like(logits)
    others = np.delete(logits, true_class)
    margin = logits[true_class] - others.max()
    if margin > 0:
        rival = int(np.argmax(np.where(
            np.arange(len(logits)) == true_class, -np.inf, logits)))
        g[true_class] = -1.0
        g[rival] = 1.0
    return g


def dpatch_loss(out: model_mod.ModelOutput, true_class: int) -> float:
    """Negated training loss: log-probability of the true class (<= 0)."""
    z = out.logits - out.logits.max()
    logp = z - math.log(np.exp(z).sum())
    return float(logp[true_class])


def dpatch_loss_grad(out: model_mod.ModelOutput, true_class: int) -> np.ndarray:
    p = out.confidence
    g = -p
    g[true_class] += 1.0
    return g


_LOSSES = {"rp2": (rp2_loss, rp2_loss_grad),
           "dpatch": (dpatch_loss, dpatch_loss_grad)}


def lowfreq_penalty(patch: np.ndarray, lam: float = 1e-5) -> float:
    """Squared total variation: adjacent-pixel squared differences."""
    patch = np.asarray(patch, dtype=float)
    dh = np.diff(patch, axis=1)
    dv = np.diff(patch, axis=0)
    return lam * float((dh * dh).sum() + (dv * dv).sum())


def lowfreq_penalty_grad(patch: np.ndarray, lam: float = 1e-5) -> np.ndarray:
    patch = np.asarray(patch, dtype=float)
    g = np.zeros_like(patch)
    dh = np.diff(patch, axis=1)
    dv = np.diff(patch, axis=0)
    g[:, 1:] += 2.0 * dh
    g[:, :-1] -= 2.0 * dh
    g[1:, :] += 2.0 * dv
    g[:-1, :] -= 2.0 * dv
    return lam * g


# ---------------------------------------------------------------------------
# EoT sampling.

@dataclass(frozen=True)
class EotSample:
    rotation_deg: float = 0.0
    contrast: float = 1.0
    brightness: float = 1.0
    noise: np.ndarray = None  # patch-shaped additive noise or None

    def rotate_transform(self, tf: geometry.GeometricTransform
                         ) -> geometry.GeometricTransform:
        """Compose an in-canvas rotation about the canvas center onto tf."""
        if self.rotation_deg == 0.0:
            return tf
        a = math.radians(self.rotation_deg)
        c = (signs.CANVAS_SIZE - 1) / 2.0
        cos, sin = math.cos(a), math.sin(a)
        rot = np.array([
            [cos, -sin, c - cos * c + sin * c],
            [sin, cos, c - sin * c - cos * c],
            [0.0, 0.0, 1.0],
        ])
        return geometry.GeometricTransform(tf.kind, tf.matrix @ rot)

    def perturb_patch(self, pixels: np.ndarray):
        """Apply jitter + noise; returns (perturbed, gradient mask * scale)."""
        pre = self.contrast * (pixels - 0.5) + 0.5 * self.brightness
        if self.noise is not None:
            pre = pre + self.noise
        out = np.clip(pre, 0.0, 1.0)
        live = (pre >= 0.0) & (pre <= 1.0)
        return out, live * self.contrast


def sample_eot(cfg: EotConfig, rng: np.random.Generator,
               patch_shape=None) -> EotSample:
    rot = float(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)) \
        if cfg.rotation_max_deg > 0 else 0.0
    s = cfg.jitter_strength
    contrast = float(rng.uniform(1 - s, 1 + s)) if s > 0 else 1.0
    brightness = float(rng.uniform(1 - s, 1 + s)) if s > 0 else 1.0
    noise = None
    if cfg.noise_strength > 0 and patch_shape is not None:
        noise = rng.uniform(-cfg.noise_strength, cfg.noise_strength,
                            patch_shape)
    return EotSample(rot, contrast, brightness, noise)


# ---------------------------------------------------------------------------
# Optimizer steps.

def pgd_step(patch: np.ndarray, grad: np.ndarray, step: float) -> np.ndarray:
    """Signed-gradient descent step projected to [0, 1]."""
    return np.clip(patch - step * np.sign(grad), 0.0, 1.0)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_step(state: AdamState, patch: np.ndarray, grad: np.ndarray,
              step: float):
    """Standard Adam descent step with bias correction, projected to [0,1]."""
    state.t += 1
    state.m = ADAM_BETA1 * state.m + (1 - ADAM_BETA1) * grad
    state.v = ADAM_BETA2 * state.v + (1 - ADAM_BETA2) * grad * grad
    mhat = state.m / (1 - ADAM_BETA1 ** state.t)
    vhat = state.v / (1 - ADAM_BETA2 ** state.t)
    patch = np.clip(patch - step * mhat / (np.sqrt(vhat) + ADAM_EPS), 0.0, 1.0)
    return state, patch


# ---------------------------------------------------------------------------
# Attack loop.

def _class_objects(scenes, class_name):
    pairs = [(scene, obj) for scene in scenes for obj in scene.objects
             if obj.class_name == class_name]
    if not pairs:
        raise NoTargetObjects(f"no object of class {class_name!r} in scenes")
    return pairs


def _attack_gradient(scene, obj, patch, pixels, victim, loss_fn, grad_fn,
                     true_idx, eot_sample):
    """One loss evaluation + exact gradient with respect to patch pixels."""
    perturbed, jitter_grad = eot_sample.perturb_patch(pixels)
    obj_rot = replace(obj, transform=eot_sample.rotate_transform(obj.transform))
    spec = render.PatchSpec(perturbed, patch.mask, patch.placement,
                            patch.physical_size)
    composed = render.compose(scene, spec, obj_rot)
    crop = render.extract_crop(composed, obj_rot.transform)
    out = victim.forward(crop)
    loss = loss_fn(out, true_idx)
    g_crop = victim.input_grad(crop, grad_fn(out, true_idx))
    g_scene = render.extract_crop_vjp(g_crop, composed.shape, obj_rot.transform)
    g_pixels = render.compose_vjp(scene, spec, obj_rot, g_scene)
    return loss, g_pixels * jitter_grad


def generate_patch(scenes, class_name: str, cfg: AttackConfig,
                   eot: EotConfig, victim: model_mod.ToyModel):
    """Optimize one patch for a class; returns (PatchSpec, loss_trace).

    Each iteration draws one training object and ``eot.samples_per_step``
    EoT perturbations, averages the gradients, and takes one optimizer
    step.  Deterministic given cfg.seed.
    """
    pairs = _class_objects(scenes, class_name)
    loss_fn, grad_fn = _LOSSES[cfg.algorithm]
    true_idx = signs.class_index(class_name)
    patch = render.make_patch(class_name, cfg.patch_size)
    pixels = patch.pixels.copy()
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros(pixels.shape)
    trace = []
    for _ in range(cfg.iterations):
        scene, obj = pairs[int(rng.integers(0, len(pairs)))]
        total_loss = 0.0
        total_grad = np.zeros_like(pixels)
        for _ in range(eot.samples_per_step):
            es = sample_eot(eot, rng, pixels.shape)
            loss, grad = _attack_gradient(scene, obj, patch, pixels, victim,
                                          loss_fn, grad_fn, true_idx, es)
            total_loss += loss
            total_grad += grad
        n = eot.samples_per_step
        total_loss = total_loss / n + lowfreq_penalty(pixels, cfg.lambda_lowfreq)
        total_grad = total_grad / n + lowfreq_penalty_grad(pixels,
                                                           cfg.lambda_lowfreq)
        trace.append(total_loss)
        if cfg.optimizer == "pgd":
            pixels = pgd_step(pixels, total_grad, cfg.step_size)
        else:
            state, pixels = adam_step(state, pixels, total_grad, cfg.step_size)
    final = render.PatchSpec(pixels, patch.mask, patch.placement,
                             patch.physical_size)
    return final, trace


def generate_instance_patches(scenes, class_name: str, cfg: AttackConfig,
                              eot: EotConfig, victim: model_mod.ToyModel):
    """Per-instance mode: one patch per object, keyed by object_id."""
    if cfg.mode != "per-instance":
        cfg = AttackConfig(algorithm=cfg.algorithm, optimizer=cfg.optimizer,
                           lambda_lowfreq=cfg.lambda_lowfreq,
                           mode="per-instance", patch_size=cfg.patch_size,
                           seed=cfg.seed)
    patches = {}
    for i, (scene, obj) in enumerate(_class_objects(scenes, class_name)):
        one = render.RenderScene(scene.image, [obj], scene.scene_id)
        icfg = replace(cfg, seed=cfg.seed + 7919 * (i + 1))
        patch, _ = generate_patch([one], class_name, icfg, eot, victim)
        patches[obj.object_id] = patch
    return patches


# ---------------------------------------------------------------------------
# Patch artifact IO: PNG pixels + sidecar JSON metadata.

def save_patch(patch: render.PatchSpec, png_path, class_name: str,
               cfg: AttackConfig = None) -> None:
    from PIL import Image
    arr = np.round(np.asarray(patch.pixels) * 255).astype(np.uint8)
    Image.fromarray(arr).save(png_path)
    meta = {
        "class": class_name,
        "placement": [int(v) for v in patch.placement],
        "physical_size_in": [float(v) for v in patch.physical_size],
        "mask": np.asarray(patch.mask).astype(int).tolist(),
        "config_digest": cfg.digest() if cfg is not None else None,
    }
    with open(str(png_path) + ".json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_patch(png_path) -> render.PatchSpec:
    from PIL import Image
    arr = np.asarray(Image.open(png_path).convert("RGB"), dtype=float) / 255.0
    with open(str(png_path) + ".json") as f:
        meta = json.load(f)
    return render.PatchSpec(arr, np.array(meta["mask"], dtype=float),
                            tuple(meta["placement"]),
                            tuple(meta["physical_size_in"]))


def _ablate_object(obj: render.RenderObject, relight_override: str,
                   geo_override: str, canonical_kp=None):
    """Apply evaluation/generation ablations to a render object.

    ``relight_override`` "none" strips the photometric transform;
    ``geo_override`` re-estimates the geometric transform with a weaker
    model from the object's (canonical keypoint, scene keypoint) pairs.
    """
    out = obj
    if relight_override == "none":
        out = replace(out, relight_params=relight.RelightParams())
    if geo_override and geo_override != out.transform.kind:
        kp = canonical_kp
        if kp is None:
            kp = signs.SIGN_CLASSES[obj.class_name].keypoints()
        scene_pts = geometry.warp_points(kp, obj.transform)
        tf = geometry.estimate_transform(kp, scene_pts, geo_override)
        out = replace(out, transform=tf)
    return out


def ablate_scenes(scenes, relight_override: str = "", geo_override: str = ""):
    """Scenes with every object run through _ablate_object."""
    if not relight_override and not geo_override:
        return list(scenes)
    out = []
    for scene in scenes:
        objs = [_ablate_object(o, relight_override, geo_override)
                for o in scene.objects]
        out.append(render.RenderScene(scene.image, objs, scene.scene_id))
    return out


def evaluate_scenes(scenes, patches, victim: model_mod.ToyModel,
                    threshold: float = 0.5):
    """Clean/patched EvalRecords for every object in the scenes.

    ``patches`` maps class name -> PatchSpec (per-class) or object id ->
    PatchSpec (per-instance); per-object lookup wins.  Pass an empty dict
    for a clean-only pass.
    """
    from . import metrics
    records = []
    for scene in scenes:
        for obj in scene.objects:
            clean_cls, clean_conf = classify_object(scene.image, obj, victim,
                                                    threshold)
            patch = patches.get(obj.object_id, patches.get(obj.class_name))
            if patch is not None:
                patched_img = render.compose(scene, patch, obj)
            else:
                patched_img = scene.image
            pat_cls, pat_conf = classify_object(patched_img, obj, victim,
                                                threshold)
            records.append(metrics.EvalRecord(
                sign_id=obj.object_id, class_name=obj.class_name,
                clean_detected=clean_cls == obj.class_name,
                patched_detected_as=pat_cls,
                clean_confidence=clean_conf,
                patched_confidence=pat_conf))
    return records


# ---------------------------------------------------------------------------
# Random-placement synthetic benchmark.

def _random_background(rng: np.random.Generator, size: int = 128) -> np.ndarray:
    """Smooth random background (low-frequency noise)."""
    coarse = rng.uniform(0.1, 0.9, (8, 8, 3))
    reps = size // 8
    img = np.repeat(np.repeat(coarse, reps, axis=0), reps, axis=1)
    return np.clip(img + rng.normal(0, 0.02, img.shape), 0.0, 1.0)


def synthetic_scene(class_name: str, rng: np.random.Generator,
                    size: int = 128, rotation_max_deg: float = 15.0):
    """Canonical sign at a random location/rotation on a random background.

    Returns a RenderScene whose image already contains the (un-patched)
    sign, with one RenderObject describing the placement.
    """
    bg = _random_background(rng, size)
    scale = float(rng.uniform(0.8, 1.2))
    ang = math.radians(float(rng.uniform(0.0, rotation_max_deg)))
    extent = signs.CANVAS_SIZE * scale * 1.5
    tx = float(rng.uniform(0, max(1.0, size - extent)))
    ty = float(rng.uniform(0, max(1.0, size - extent)))
    cos, sin = math.cos(ang), math.sin(ang)
    mat = np.array([
        [scale * cos, -scale * sin, tx + extent / 2 - 32 * scale],
        [scale * sin, scale * cos, ty + extent / 2 - 32 * scale],
        [0.0, 0.0, 1.0],
    ])
    tf = geometry.GeometricTransform("affine", mat)
    obj = render.RenderObject(f"syn-{rng.integers(1 << 31)}", class_name, tf)
    sign_img = signs.canonical_sign(class_name)
    mask = signs.canonical_mask(class_name).astype(float)
    spec = render.PatchSpec(sign_img, mask, (0, 0))
    scene = render.RenderScene(bg, [obj])
    composed = render.compose(scene, spec, obj)
    return render.RenderScene(composed, [obj])


def classify_object(image: np.ndarray, obj: render.RenderObject,
                    victim: model_mod.ToyModel, threshold: float):
    """(detected_class_name or None, confidence of the true class)."""
    crop = render.extract_crop(image, obj.transform)
    out = victim.forward(crop)
    conf = out.confidence
    top = int(np.argmax(conf))
    true_conf = float(conf[signs.class_index(obj.class_name)])
    if top == signs.class_index(signs.BACKGROUND_CLASS) \
            or conf[top] < threshold:
        return None, true_conf
    return signs.CLASS_NAMES[top], true_conf


def synthetic_benchmark(class_name: str, n_backgrounds: int,
                        cfg: AttackConfig, eot: EotConfig,
                        victim: model_mod.ToyModel,
                        rng: np.random.Generator,
                        patch: render.PatchSpec = None,
                        threshold: float = 0.5):
    """Evaluate clean vs patched detection on random synthetic placements.

    Returns a list of metrics.EvalRecord.
    """
    from . import metrics
    records = []
    for _ in range(n_backgrounds):
        scene = synthetic_scene(class_name, rng,
                                rotation_max_deg=eot.rotation_max_deg)
        obj = scene.objects[0]
        clean_cls, clean_conf = classify_object(scene.image, obj, victim,
                                                threshold)
        if patch is not None:
            patched_img = render.compose(scene, patch, obj)
        else:
            patched_img = scene.image
        pat_cls, pat_conf = classify_object(patched_img, obj, victim,
                                            threshold)
        records.append(metrics.EvalRecord(
            sign_id=obj.object_id,
            class_name=class_name,
            clean_detected=clean_cls == class_name,
            patched_detected_as=pat_cls,
            clean_confidence=clean_conf,
            patched_confidence=pat_conf,
        ))
    return records
