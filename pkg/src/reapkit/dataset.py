"""Annotation table and dataset directory IO.

A dataset root contains ``images/``, ``masks/`` (8-bit PNGs; masks are
single-channel, nonzero = sign), and ``annotations.csv``.  The CSV starts
with a version line, then a column header, then one row per annotated
sign.  Floats are serialized with 9 significant digits so save/load round
trips are lossless at the precision we care about.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry, relight, render, signs
from .errors import (EmptyMask, MissingImage, MissingMask, ParseError,
                     ReapkitError, SchemaVersionMismatch)

SCHEMA_VERSION = 1
_VERSION_PREFIX = "# reapkit annotations schema="
_COLUMNS = ("image_id", "sign_id", "class", "keypoints", "relight_method",
            "relight_space", "alpha", "beta", "coeffs", "transfer",
            "mask_file", "verified", "note")


def _fmt(x: float) -> str:
    return f"{float(x):.9g}"


def _family_keypoint_count(class_name: str) -> int:
    return signs.SIGN_CLASSES[class_name].n_keypoints


@dataclass
class AnnotationRow:
    image_id: str
    sign_id: str
    class_name: str
    keypoints: np.ndarray  # (n, 2) scene coordinates
    relight_params: relight.RelightParams = field(
        default_factory=relight.RelightParams)
    mask_file: str = ""
    verified: bool = False
    note: str = ""

    def __post_init__(self):
        if self.class_name not in signs.SIGN_CLASSES:
            raise ValueError(f"unknown class {self.class_name!r}")
        self.keypoints = np.asarray(self.keypoints, dtype=float)
        if self.keypoints.ndim != 2 or self.keypoints.shape[1] != 2:
            raise ValueError("keypoints must be (n, 2)")
        expect = _family_keypoint_count(self.class_name)
        if len(self.keypoints) != expect:
            raise ValueError(
                f"class {self.class_name!r} needs {expect} keypoints, "
                f"got {len(self.keypoints)}")

    def transform(self) -> geometry.GeometricTransform:
        canonical = signs.SIGN_CLASSES[self.class_name].keypoints()
        return geometry.estimate_transform(canonical, self.keypoints, "auto")


def save_annotations(rows, path) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"{_VERSION_PREFIX}{SCHEMA_VERSION}\n")
        writer = csv.writer(f)
        writer.writerow(_COLUMNS)
        for row in rows:
            p = row.relight_params
            writer.writerow([
                row.image_id, row.sign_id, row.class_name,
                " ".join(_fmt(v) for v in row.keypoints.ravel()),
                p.method, p.space, _fmt(p.alpha), _fmt(p.beta),
                " ".join(_fmt(c) for c in p.coeffs),
                " ".join(_fmt(v) for ch in p.transfer for v in ch),
                row.mask_file, "1" if row.verified else "0", row.note,
            ])


def _parse_row(ln: int, rec: dict) -> AnnotationRow:
    try:
        kp_flat = [float(v) for v in rec["keypoints"].split()]
        if len(kp_flat) % 2:
            raise ValueError("odd keypoint coordinate count")
        kp = np.array(kp_flat, dtype=float).reshape(-1, 2)
        coeffs = tuple(float(v) for v in rec["coeffs"].split())
        tvals = [float(v) for v in rec["transfer"].split()]
        if len(tvals) % 4:
            raise ValueError("transfer moments must come in groups of 4")
        transfer = tuple(tuple(tvals[i:i + 4]) for i in range(0, len(tvals), 4))
        params = relight.RelightParams(
            method=rec["relight_method"], space=rec["relight_space"],
            alpha=float(rec["alpha"]), beta=float(rec["beta"]),
            coeffs=coeffs, transfer=transfer)
        if rec["verified"] not in ("0", "1"):
            raise ValueError(f"verified must be 0 or 1, got {rec['verified']!r}")
        return AnnotationRow(
            image_id=rec["image_id"], sign_id=rec["sign_id"],
            class_name=rec["class"], keypoints=kp, relight_params=params,
            mask_file=rec["mask_file"], verified=rec["verified"] == "1",
            note=rec["note"])
    except ParseError:
        raise
    except (ValueError, KeyError) as exc:
        raise ParseError(ln, str(exc)) from exc


def load_annotations(path):
    with open(path, newline="") as f:
        first = f.readline().rstrip("\n")
        if not first.startswith(_VERSION_PREFIX):
            raise ParseError(1, "missing schema version line")
        try:
            version = int(first[len(_VERSION_PREFIX):])
        except ValueError as exc:
            raise ParseError(1, "unreadable schema version") from exc
        if version != SCHEMA_VERSION:
            raise SchemaVersionMismatch(
                f"schema version {version}, supported {SCHEMA_VERSION}")
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise ParseError(2, "missing column header") from exc
        if tuple(header) != _COLUMNS:
            raise ParseError(2, f"unexpected columns {header}")
        rows = []
        for ln, fields in enumerate(reader, start=3):
            if not fields:
                continue
            if len(fields) != len(_COLUMNS):
                raise ParseError(ln, f"expected {len(_COLUMNS)} fields, "
                                 f"got {len(fields)}")
            rows.append(_parse_row(ln, dict(zip(_COLUMNS, fields))))
    return rows


# ---------------------------------------------------------------------------
# Image/mask IO.

def load_image(path) -> np.ndarray:
    from PIL import Image
    if not os.path.isfile(path):
        raise MissingImage(str(path))
    try:
        img = Image.open(path).convert("RGB")
    except OSError as exc:
        raise MissingImage(f"{path}: {exc}") from exc
    return np.asarray(img, dtype=float) / 255.0


def save_image(img: np.ndarray, path) -> None:
    from PIL import Image
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_mask(path) -> np.ndarray:
    from PIL import Image
    if not os.path.isfile(path):
        raise MissingMask(str(path))
    try:
        img = Image.open(path).convert("L")
    except OSError as exc:
        raise MissingMask(f"{path}: {exc}") from exc
    return np.asarray(img) > 0


def save_mask(mask: np.ndarray, path) -> None:
    from PIL import Image
    arr = (np.asarray(mask, dtype=bool) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def dataset_paths(root):
    return (os.path.join(root, "images"), os.path.join(root, "masks"),
            os.path.join(root, "annotations.csv"))


def build_scene(image_id: str, annotations, root) -> render.RenderScene:
    """Assemble a RenderScene for one image from its annotation rows."""
    images_dir, masks_dir, _ = dataset_paths(root)
    image = load_image(os.path.join(images_dir, f"{image_id}.png"))
    objects = []
    for row in annotations:
        if row.image_id != image_id:
            continue
        if row.mask_file:
            mask_path = os.path.join(masks_dir, row.mask_file)
            if not os.path.isfile(mask_path):
                raise MissingMask(mask_path)
        objects.append(render.RenderObject(
            row.sign_id, row.class_name, row.transform(), row.relight_params))
    return render.RenderScene(image, objects, scene_id=image_id)


def load_scenes(root):
    """All scenes of a dataset root, ordered by image id."""
    _, _, ann_path = dataset_paths(root)
    rows = load_annotations(ann_path)
    image_ids = sorted({r.image_id for r in rows})
    return [build_scene(iid, rows, root) for iid in image_ids], rows


# ---------------------------------------------------------------------------
# Automatic annotation.

def annotate_auto(image_id: str, image: np.ndarray, masks):
    """Candidate annotations from masks and class hints.

    ``masks`` is a sequence of (sign_id, mask, class_hint, mask_file).
    Rows failing cross-verification come back with verified=False; empty
    or degenerate masks are skipped and reported in the diagnostics list.

    Returns (rows, diagnostics).
    """
    rows, diagnostics = [], []
    for sign_id, mask, hint, mask_file in masks:
        mask = np.asarray(mask, dtype=bool)
        try:
            if not mask.any():
                raise EmptyMask(f"sign {sign_id}: empty mask")
            kp, verified = geometry.extract_keypoints(mask, hint)
            params = relight.fit_percentile(
                relight.pooled_rgb_values(image, mask))
        except ReapkitError as exc:
            diagnostics.append(f"{sign_id}: {exc}")
            continue
        rows.append(AnnotationRow(
            image_id=image_id, sign_id=sign_id, class_name=hint,
            keypoints=kp.points, relight_params=params, mask_file=mask_file,
            verified=verified,
            note="" if verified else "shape family mismatch"))
    return rows, diagnostics


# ---------------------------------------------------------------------------
# Synthetic dataset generation (known groundtruth for tests and demos).

def _random_transform(class_name: str, rng: np.random.Generator, size: int,
                      tilt: float, kind: str):
    """Random canonical->scene transform of the requested kind.

    Circles get axis-aligned translate-scale maps: a circle's mask does not
    determine rotation or shear, so only those transforms are recoverable
    from keypoints.
    """
    scale = float(rng.uniform(1.0, 1.4))
    margin = signs.CANVAS_SIZE * scale * 1.35
    tx = float(rng.uniform(4, max(5.0, size - margin)))
    ty = float(rng.uniform(4, max(5.0, size - margin)))
    c = signs.CANVAS_SIZE - 1
    src = np.array([[0.0, 0.0], [c, 0.0], [c, c], [0.0, c]])
    if signs.SIGN_CLASSES[class_name].family == "circle" \
            or kind == "translate-scale":
        sy = scale * float(rng.uniform(0.9, 1.1))
        mat = np.array([[scale, 0.0, tx], [0.0, sy, ty], [0.0, 0.0, 1.0]])
        return geometry.GeometricTransform("translate-scale", mat)
    dst = src * scale + np.array([tx, ty])
    dst = dst + rng.normal(0.0, tilt * signs.CANVAS_SIZE * scale, dst.shape)
    return geometry.estimate_transform(src, dst, "perspective")


def make_synthetic_dataset(root, classes, per_class: int, seed: int = 0,
                           size: int = 160, noise_sigma: float = 0.01,
                           alpha_range=(0.45, 0.8), beta_range=(0.05, 0.15),
                           tilt: float = 0.04, geo_kind: str = "perspective",
                           apply_relight: bool = True):
    """Write a synthetic dataset under ``root``; returns the truth list.

    Each image holds one sign with a known transform and (optionally) a
    known percentile relighting.  Truth entries carry the generating
    parameters and groundtruth keypoints for recovery tests.
    """
    images_dir, masks_dir, ann_path = dataset_paths(root)
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows, truths = [], []
    idx = 0
    for class_name in classes:
        for _ in range(per_class):
            image_id = f"img{idx:05d}"
            sign_id = f"{image_id}-s0"
            tf = _random_transform(class_name, rng, size, tilt, geo_kind)
            if apply_relight:
                alpha = float(rng.uniform(*alpha_range))
                beta = float(rng.uniform(*beta_range))
            else:
                alpha, beta = 1.0, 0.0
            params = relight.RelightParams(method="percentile",
                                           alpha=alpha, beta=beta)
            bg = np.clip(rng.uniform(0.25, 0.75, (1, 1, 3))
                         + rng.normal(0, 0.03, (size, size, 3)), 0, 1)
            sign_spec = render.PatchSpec(
                signs.canonical_sign(class_name),
                signs.canonical_mask(class_name).astype(float), (0, 0))
            obj = render.RenderObject(sign_id, class_name, tf, params)
            image = render.compose(render.RenderScene(bg, [obj]), sign_spec,
                                   obj)
            image = np.clip(image + rng.normal(0, noise_sigma, image.shape),
                            0, 1)
            mask = geometry.warp_image(
                signs.canonical_mask(class_name).astype(float), tf,
                image.shape[:2]) > 0.5
            mask_file = f"{sign_id}.png"
            save_image(image, os.path.join(images_dir, f"{image_id}.png"))
            save_mask(mask, os.path.join(masks_dir, mask_file))
            cls = signs.SIGN_CLASSES[class_name]
            kp_truth = geometry.warp_points(cls.keypoints(), tf)
            rows.append(AnnotationRow(
                image_id=image_id, sign_id=sign_id, class_name=class_name,
                keypoints=kp_truth, relight_params=params,
                mask_file=mask_file, verified=True, note="groundtruth"))
            truths.append({"image_id": image_id, "sign_id": sign_id,
                           "class": class_name, "transform": tf,
                           "relight": params, "keypoints": kp_truth})
            idx += 1
    save_annotations(rows, ann_path)
    return truths
