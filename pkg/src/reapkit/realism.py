"""Realism-test harness: corner RMSE and pixel RMSE of render methods.

Each sample is a pair of photographs of the same sign, one with a printed
patch and one without, plus hand-annotated sign keypoints and groundtruth
patch corners.  ``corner_rmse`` scores a geometric method by mapping the
digital patch corners through the transform estimated from the sign
keypoints; ``pixel_rmse`` scores a relighting method by warping the real
patch into the canonical frame with the groundtruth transform and
comparing pixel values.  ``sweep`` evaluates the full method grid.

Physical photo pairs are not required: ``make_synthetic_sample`` generates
samples with a known transform, known photometric distortion, and sensor
noise, and the same directory layout (paired PNGs + JSON keypoints) accepts
real photos.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import geometry, relight, render, signs

GEO_METHODS = ("perspective", "affine", "translate-scale")
TRIM_GRID = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2)
DEGREE_GRID = (0, 1, 2, 3)
PERCENTILE_GRID = (0.0, 0.05, 0.1, 0.2, 0.3)


@dataclass
class RealismSample:
    """One photo pair with annotations; see module docstring."""

    class_name: str
    image_without_patch: np.ndarray
    image_with_patch: np.ndarray
    sign_keypoints: geometry.KeypointSet  # hand-annotated, canonical paired
    patch_corner_gt: np.ndarray  # (4, 2) scene coordinates
    digital_patch: render.PatchSpec
    sample_id: str = ""

    def __post_init__(self):
        self.patch_corner_gt = np.asarray(self.patch_corner_gt, dtype=float)
        if self.image_without_patch.shape != self.image_with_patch.shape:
            raise ValueError("photo pair must share dimensions")
        if self.patch_corner_gt.shape != (4, 2):
            raise ValueError("need 4 groundtruth patch corners")


def patch_corners_canonical(patch: render.PatchSpec) -> np.ndarray:
    """Patch corner coordinates on the canonical canvas (CCW from top-left)."""
    h, w = patch.pixels.shape[:2]
    x, y = patch.placement
    return np.array([[x - 0.5, y - 0.5], [x + w - 0.5, y - 0.5],
                     [x + w - 0.5, y + h - 0.5], [x - 0.5, y + h - 0.5]])


def gt_transform(sample: RealismSample) -> geometry.GeometricTransform:
    """Groundtruth canonical->scene map from the annotated patch corners."""
    return geometry.estimate_transform(
        patch_corners_canonical(sample.digital_patch),
        sample.patch_corner_gt, "perspective")


def corner_rmse(sample: RealismSample, method: str = "perspective") -> float:
    """RMS Euclidean corner error of the method's estimated transform."""
    kp = sample.sign_keypoints
    tf = geometry.estimate_transform(kp.canonical, kp.points, method)
    mapped = geometry.warp_points(patch_corners_canonical(sample.digital_patch),
                                  tf)
    d2 = ((mapped - sample.patch_corner_gt) ** 2).sum(axis=1)
    return float(np.sqrt(d2.mean()))


def _canonical_real_sign(sample: RealismSample) -> np.ndarray:
    """The un-patched photo pulled back to the canonical sign frame."""
    kp = sample.sign_keypoints
    tf = geometry.estimate_transform(kp.canonical, kp.points, "perspective")
    return render.extract_crop(sample.image_without_patch, tf)


def fit_sample_relight(sample: RealismSample, method: str = "percentile",
                       space: str = "rgb", p: float = 0.2, k: int = 1,
                       trim_p: float = 0.0) -> relight.RelightParams:
    """Fit a relighting transform on the sign pixels of a sample."""
    if method == "none":
        return relight.RelightParams()
    mask = signs.canonical_mask(sample.class_name)
    real = _canonical_real_sign(sample)
    if method == "percentile":
        return relight.fit_percentile(relight.pooled_rgb_values(real, mask), p)
    digital = signs.canonical_sign(sample.class_name)
    pairs = relight.make_pixel_pairs(digital, real, mask, space)
    if method == "polynomial":
        sample_pairs = pairs[1] if space == "hsv" else pairs
        return relight.fit_polynomial(sample_pairs, k, trim_p, space)
    if method == "color-transfer":
        chans = pairs if space == "hsv" else [pairs]
        return relight.fit_color_transfer(chans, space)
    raise ValueError(f"unknown relight method {method!r}")


def pixel_rmse(sample: RealismSample,
               params: relight.RelightParams) -> float:
    """RMSE between the relit digital patch and the real patch pixels.

    The real patch is pulled into the canonical frame with the groundtruth
    geometric transform so only photometric error is measured.
    """
    tf = gt_transform(sample)
    canon = render.extract_crop(sample.image_with_patch, tf)
    patch = sample.digital_patch
    real = patch.from_canvas(canon)
    relit = relight.apply_relight(patch.pixels, params)
    m = patch.mask > 0
    diff = (relit - real)[m]
    return float(np.sqrt((diff * diff).mean()))


def sweep(samples, geo_methods=GEO_METHODS, percentile_grid=PERCENTILE_GRID,
          degree_grid=DEGREE_GRID, trim_grid=(0.0,), spaces=("rgb",)):
    """Mean +/- std RMSE per method cell over the sample set.

    Returns {"corner": {method: cell}, "pixel": {label: cell}} with each
    cell a dict {mean, std, n}.  Pass empty grids to skip axes.
    """
    samples = list(samples)

    def cell(values):
        v = np.asarray(values, dtype=float)
        return {"mean": float(v.mean()), "std": float(v.std(ddof=1))
                if len(v) > 1 else 0.0, "n": len(v)}

    report = {"corner": {}, "pixel": {}}
    for method in geo_methods:
        report["corner"][method] = cell([corner_rmse(s, method)
                                         for s in samples])
    if samples:
        report["pixel"]["none"] = cell([
            pixel_rmse(s, relight.RelightParams()) for s in samples])
    for p in percentile_grid:
        label = f"percentile p={p:g}"
        report["pixel"][label] = cell([
            pixel_rmse(s, fit_sample_relight(s, "percentile", p=p))
            for s in samples])
    from .errors import EmptyInput, RankDeficient
    for space in spaces:
        for k in degree_grid:
            for trim in trim_grid:
                label = f"polynomial {space} k={k} trim={trim:g}"
                values = []
                for s in samples:
                    try:
                        params = fit_sample_relight(
                            s, "polynomial", space=space, k=k, trim_p=trim)
                    except (RankDeficient, EmptyInput):
                        # Flat digital signals cannot support this degree.
                        values = None
                        break
                    values.append(pixel_rmse(s, params))
                report["pixel"][label] = cell(values) if values else None
    return report


def format_table(report: dict) -> str:
    """Aligned-text rendering of a sweep report."""
    lines = []
    for section in ("corner", "pixel"):
        cells = report.get(section, {})
        if not cells:
            continue
        lines.append(f"{section} RMSE")
        width = max(len(k) for k in cells)
        for label, c in cells.items():
            if c is None:
                lines.append(f"  {label:<{width}}  (fit unavailable)")
            else:
                lines.append(f"  {label:<{width}}  "
                             f"{c['mean']:8.4f} +/- {c['std']:.4f}  (n={c['n']})")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Synthetic sample generation.

def _random_perspective(rng: np.random.Generator, size: int,
                        tilt: float = 0.06):
    """Canonical->scene perspective: placement plus corner perturbation."""
    scale = float(rng.uniform(1.0, 1.4))
    margin = signs.CANVAS_SIZE * scale * 1.3
    tx = float(rng.uniform(4, max(5.0, size - margin)))
    ty = float(rng.uniform(4, max(5.0, size - margin)))
    c = signs.CANVAS_SIZE - 1
    src = np.array([[0.0, 0.0], [c, 0.0], [c, c], [0.0, c]])
    dst = src * scale + np.array([tx, ty])
    dst = dst + rng.normal(0.0, tilt * signs.CANVAS_SIZE * scale, dst.shape)
    return geometry.estimate_transform(src, dst, "perspective")


def make_synthetic_sample(class_name: str, rng: np.random.Generator,
                          size: int = 160, noise_sigma: float = 0.01,
                          alpha_range=(0.45, 0.8), beta_range=(0.05, 0.15),
                          tilt: float = 0.06, patch_size: str = "small"):
    """Generate a photo pair with known transform and relighting.

    Returns (RealismSample, truth) where truth holds the generating
    transform and RelightParams.
    """
    tf = _random_perspective(rng, size, tilt)
    alpha = float(rng.uniform(*alpha_range))
    beta = float(rng.uniform(*beta_range))
    params = relight.RelightParams(method="percentile", alpha=alpha, beta=beta)
    bg = np.clip(rng.uniform(0.2, 0.8, (1, 1, 3))
                 + rng.normal(0, 0.03, (size, size, 3)), 0, 1)
    sign_img = signs.canonical_sign(class_name)
    mask = signs.canonical_mask(class_name).astype(float)
    sign_spec = render.PatchSpec(sign_img, mask, (0, 0))
    obj = render.RenderObject("synthetic", class_name, tf, params)
    without = render.compose(render.RenderScene(bg, [obj]), sign_spec, obj)

    patch = render.make_patch(class_name, patch_size)
    checker = np.indices(patch.pixels.shape[:2]).sum(axis=0) % 2
    pix = np.stack([0.2 + 0.6 * checker] * 3, axis=-1)
    pix[..., 0] = 0.8 - 0.6 * checker
    patch = render.PatchSpec(pix, patch.mask, patch.placement,
                             patch.physical_size)
    with_patch = render.compose(render.RenderScene(without, [obj]), patch, obj)

    without = np.clip(without + rng.normal(0, noise_sigma, without.shape), 0, 1)
    with_patch = np.clip(with_patch + rng.normal(0, noise_sigma,
                                                 with_patch.shape), 0, 1)

    cls = signs.SIGN_CLASSES[class_name]
    canonical_kp = cls.keypoints()
    kp_scene = geometry.warp_points(canonical_kp, tf)
    kp = geometry.KeypointSet(kp_scene, canonical_kp)
    corners = geometry.warp_points(patch_corners_canonical(patch), tf)
    sample = RealismSample(class_name, without, with_patch, kp, corners,
                           patch)
    return sample, {"transform": tf, "relight": params}


def annotate_keypoint_noise(sample: RealismSample, rng: np.random.Generator,
                            sigma: float = 0.5) -> RealismSample:
    """Simulate hand-annotation jitter on the sign keypoints."""
    kp = sample.sign_keypoints
    noisy = geometry.KeypointSet(
        kp.points + rng.normal(0.0, sigma, kp.points.shape), kp.canonical)
    return RealismSample(sample.class_name, sample.image_without_patch,
                         sample.image_with_patch, noisy,
                         sample.patch_corner_gt, sample.digital_patch,
                         sample.sample_id)


# ---------------------------------------------------------------------------
# On-disk layout: <root>/<id>_plain.png, <id>_patched.png, <id>.json

def save_sample(sample: RealismSample, root, sample_id: str) -> None:
    from PIL import Image
    os.makedirs(root, exist_ok=True)
    for suffix, img in (("plain", sample.image_without_patch),
                        ("patched", sample.image_with_patch)):
        arr = np.round(img * 255).astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(root, f"{sample_id}_{suffix}.png"))
    patch = sample.digital_patch
    meta = {
        "class": sample.class_name,
        "sign_keypoints": sample.sign_keypoints.points.tolist(),
        "sign_keypoints_canonical": sample.sign_keypoints.canonical.tolist(),
        "patch_corners": sample.patch_corner_gt.tolist(),
        "patch_pixels": patch.pixels.tolist(),
        "patch_mask": patch.mask.tolist(),
        "patch_placement": list(patch.placement),
        "patch_physical_size": list(patch.physical_size),
    }
    with open(os.path.join(root, f"{sample_id}.json"), "w") as f:
        json.dump(meta, f)


def load_sample(root, sample_id: str) -> RealismSample:
    from PIL import Image
    imgs = {}
    for suffix in ("plain", "patched"):
        path = os.path.join(root, f"{sample_id}_{suffix}.png")
        imgs[suffix] = np.asarray(Image.open(path).convert("RGB"),
                                  dtype=float) / 255.0
    with open(os.path.join(root, f"{sample_id}.json")) as f:
        meta = json.load(f)
    kp = geometry.KeypointSet(np.array(meta["sign_keypoints"]),
                              np.array(meta["sign_keypoints_canonical"]))
    patch = render.PatchSpec(np.array(meta["patch_pixels"]),
                             np.array(meta["patch_mask"]),
                             tuple(meta["patch_placement"]),
                             tuple(meta["patch_physical_size"]))
    return RealismSample(meta["class"], imgs["plain"], imgs["patched"], kp,
                         np.array(meta["patch_corners"]), patch, sample_id)


def list_samples(root):
    ids = sorted(f[:-5] for f in os.listdir(root)
                 if f.endswith(".json") and not f.endswith("_plain.json"))
    return [load_sample(root, sid) for sid in ids]
