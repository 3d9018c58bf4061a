"""Differentiable compositing of adversarial patches into scenes.

The final image follows

    X' = t_g(M) * t_g(t_l(P)) + (1 - t_g(M)) * X

where t_l is the photometric (relighting) transform, t_g the geometric warp
applied identically to the patch and its mask, and the blend uses the
fractional (bilinearly interpolated) warped mask.  Values are clipped to
[0, 1] after each stage.  ``compose_vjp`` provides the exact adjoint with
respect to the patch pixels for gradient-based attacks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry, relight, signs


@dataclass
class PatchSpec:
    """A patch and its binary mask, positioned on the canonical sign canvas.

    ``placement`` is the (x, y) offset of the patch's top-left pixel within
    the 64x64 canonical canvas.  ``physical_size`` is (height, width) in
    inches, recorded for provenance.
    """

    pixels: np.ndarray  # (h, w, 3) in [0, 1]
    mask: np.ndarray = None  # (h, w) in {0, 1}; default all ones
    placement: tuple = None  # (x, y); default centered
    physical_size: tuple = (10.0, 10.0)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("patch pixels must be (h, w, 3)")
        h, w = self.pixels.shape[:2]
        if self.mask is None:
            self.mask = np.ones((h, w))
        self.mask = np.asarray(self.mask, dtype=float)
        if self.mask.shape != (h, w):
            raise ValueError("mask shape must match patch pixels")
        if self.placement is None:
            self.placement = ((signs.CANVAS_SIZE - w) // 2,
                              (signs.CANVAS_SIZE - h) // 2)
        x, y = self.placement
        if x < 0 or y < 0 or x + w > signs.CANVAS_SIZE or y + h > signs.CANVAS_SIZE:
            raise ValueError("patch does not fit inside the canonical canvas")
        if min(self.physical_size) <= 0:
            raise ValueError("physical size must be positive")

    def on_canvas(self, pixels: np.ndarray = None):
        """Place the patch (or substitute pixels) and mask on a 64x64 canvas."""
        if pixels is None:
            pixels = self.pixels
        h, w = self.pixels.shape[:2]
        x, y = self.placement
        canvas = np.zeros((signs.CANVAS_SIZE, signs.CANVAS_SIZE, 3))
        mcanvas = np.zeros((signs.CANVAS_SIZE, signs.CANVAS_SIZE))
        canvas[y:y + h, x:x + w] = pixels
        mcanvas[y:y + h, x:x + w] = self.mask
        return canvas, mcanvas

    def from_canvas(self, canvas: np.ndarray) -> np.ndarray:
        """Extract the patch-shaped region back out of a canvas-shaped array."""
        h, w = self.pixels.shape[:2]
        x, y = self.placement
        return canvas[y:y + h, x:x + w]


def make_patch(class_name: str, size: str = "small",
               init: float = 0.5) -> PatchSpec:
    """Constant-initialized patch sized in inches for the given sign class.

    ``size`` is one of small (10x10"), medium (10x20"), or large (two
    stacked 10x20" pieces with a gap between them).
    """
    hin, win = signs.PATCH_SIZES[size]
    cls = signs.SIGN_CLASSES[class_name]
    h = signs.patch_size_px(class_name, hin)
    w = signs.patch_size_px(class_name, win)
    w = min(w, signs.CANVAS_SIZE)
    if size == "large":
        gap = max(2, signs.CANVAS_SIZE // 2 - h - 2)
        gap = min(gap, signs.CANVAS_SIZE - 2 * h)
        if gap < 0:
            raise ValueError("large patch pieces do not fit the canvas")
        total_h = 2 * h + gap
        pixels = np.full((total_h, w, 3), init)
        mask = np.ones((total_h, w))
        mask[h:h + gap] = 0.0
    else:
        total_h = min(h, signs.CANVAS_SIZE)
        pixels = np.full((total_h, w, 3), init)
        mask = np.ones((total_h, w))
    return PatchSpec(pixels, mask, physical_size=(hin, win))


@dataclass
class RenderObject:
    """One annotated sign instance inside a scene."""

    object_id: str
    class_name: str
    transform: geometry.GeometricTransform  # canonical canvas -> scene
    relight_params: relight.RelightParams = field(
        default_factory=relight.RelightParams)

    def __post_init__(self):
        if self.class_name not in signs.SIGN_CLASSES:
            raise ValueError(f"unknown sign class {self.class_name!r}")


@dataclass
class RenderScene:
    """A scene image plus the render objects annotated inside it."""

    image: np.ndarray  # (H, W, 3) in [0, 1]
    objects: list = field(default_factory=list)
    scene_id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=float)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError("scene image must be (H, W, 3)")


def _warped_window(tf: geometry.GeometricTransform, scene_shape,
                   margin: float = 2.0):
    """Scene-window (x0, y0, x1, y1) covering the warped canonical canvas.

    Returns None when the warp lands entirely outside the scene.  Keeping
    the compose cost proportional to this window (not the scene area) is
    what makes rendering large scenes cheap.
    """
    c = signs.CANVAS_SIZE - 0.5
    corners = np.array([[-0.5, -0.5], [c, -0.5], [c, c], [-0.5, c]])
    warped = geometry.warp_points(corners, tf)
    h, w = scene_shape[:2]
    x0 = int(np.floor(warped[:, 0].min() - margin))
    y0 = int(np.floor(warped[:, 1].min() - margin))
    x1 = int(np.ceil(warped[:, 0].max() + margin)) + 1
    y1 = int(np.ceil(warped[:, 1].max() + margin)) + 1
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(w, x1), min(h, y1)
    if x0 >= x1 or y0 >= y1:
        return None
    return x0, y0, x1, y1


def compose(scene: RenderScene, patch: PatchSpec, obj: RenderObject) -> np.ndarray:
    """Render one patch onto one object; returns a new scene-sized image."""
    out = scene.image.copy()
    window = _warped_window(obj.transform, scene.image.shape)
    if window is None:
        return out
    x0, y0, x1, y1 = window
    relit = relight.apply_relight(patch.pixels, obj.relight_params)
    canvas, mcanvas = patch.on_canvas(relit)
    size = (y1 - y0, x1 - x0)
    wp = geometry.warp_image(canvas, obj.transform, size, offset=(x0, y0))
    wm = geometry.warp_image(mcanvas, obj.transform, size, offset=(x0, y0))
    region = out[y0:y1, x0:x1]
    out[y0:y1, x0:x1] = np.clip(
        wm[..., None] * wp + (1.0 - wm[..., None]) * region, 0.0, 1.0)
    return out


def compose_vjp(scene: RenderScene, patch: PatchSpec, obj: RenderObject,
                upstream: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss with respect to the patch pixels.

    ``upstream`` is the loss gradient with respect to the composed image.
    The chain is blend (scale by the warped mask), warp (bilinear adjoint
    scatter), and relight (method-specific derivative); clipping passes
    gradients through inside (0, 1) and zeroes them at saturated pixels.
    """
    upstream = np.asarray(upstream, dtype=float)
    window = _warped_window(obj.transform, scene.image.shape)
    if window is None:
        return np.zeros_like(patch.pixels)
    x0, y0, x1, y1 = window
    size = (y1 - y0, x1 - x0)
    wm = geometry.warp_image(patch.on_canvas()[1], obj.transform, size,
                             offset=(x0, y0))
    g_wp = upstream[y0:y1, x0:x1] * wm[..., None]
    g_canvas = geometry.warp_image_vjp(
        g_wp, (signs.CANVAS_SIZE, signs.CANVAS_SIZE, 3), obj.transform,
        offset=(x0, y0))
    g_relit = patch.from_canvas(g_canvas)
    return relight.apply_relight_vjp(patch.pixels, obj.relight_params, g_relit)


def render_all(scene: RenderScene, per_class_patches: dict) -> np.ndarray:
    """Composite each object's class patch in annotation order."""
    out = scene.image
    current = RenderScene(out, scene.objects, scene.scene_id)
    for obj in scene.objects:
        patch = per_class_patches.get(obj.class_name)
        if patch is None:
            continue
        out = compose(current, patch, obj)
        current = RenderScene(out, scene.objects, scene.scene_id)
    return out if out is not scene.image else scene.image.copy()


def extract_crop(image: np.ndarray, tf: geometry.GeometricTransform,
                 size: int = signs.CANVAS_SIZE) -> np.ndarray:
    """Pull an object back into the canonical frame: crop(u) = image(t_g(u))."""
    return geometry.warp_image(image, tf.inverse(), (size, size))


def extract_crop_vjp(upstream: np.ndarray, image_shape,
                     tf: geometry.GeometricTransform) -> np.ndarray:
    """Adjoint of extract_crop with respect to the scene image."""
    return geometry.warp_image_vjp(upstream, image_shape, tf.inverse())
