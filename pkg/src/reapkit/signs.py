"""Sign class registry: canonical polygons, physical dimensions, templates.

Canonical coordinates live on a 64x64 canvas with pixel centers at integer
coordinates (0..63), origin top-left, y down.  Every non-"other" class
carries a canonical polygon (counter-clockwise by positive shoelace area),
the indices of its transform keypoints, and a physical width/height in mm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CANVAS_SIZE = 64

# Canvas extent used by the canonical polygons (small margin keeps the
# rasterized shapes fully inside the canvas).
_LO = 2.0
_HI = 61.0
_MID = (_LO + _HI) / 2.0

# Regular-octagon corner inset for a flat-top octagon of width (_HI - _LO).
_OCT_T = (_HI - _LO) * (1.0 - 1.0 / (1.0 + np.sqrt(2.0))) / 2.0


@dataclass(frozen=True)
class SignClass:
    name: str
    family: str  # circle | triangle | triangle-down | quad | pentagon | octagon | other
    width_mm: float
    height_mm: float
    polygon: np.ndarray = field(repr=False)  # (n, 2) canonical vertices, CCW
    keypoint_indices: tuple  # indices into polygon used as transform keypoints
    colors: tuple = ((1.0, 1.0, 1.0), (0.0, 0.0, 0.0))  # (background, glyph)

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoint_indices)

    def keypoints(self) -> np.ndarray:
        """Canonical transform keypoints, ordered."""
        return self.polygon[list(self.keypoint_indices)].copy()


def _poly(*pts) -> np.ndarray:
    return np.array(pts, dtype=float)


# Circle keypoints are the axis endpoints (left, right, top, bottom); the
# "polygon" holds those four points directly.
_CIRCLE_KP = _poly((_LO, _MID), (_HI, _MID), (_MID, _LO), (_MID, _HI))

_TRIANGLE = _poly((_MID, _LO), (_LO, _HI), (_HI, _HI))
_TRIANGLE_DOWN = _poly((_MID, _HI), (_HI, _LO), (_LO, _LO))
_DIAMOND = _poly((_MID, _LO), (_HI, _MID), (_MID, _HI), (_LO, _MID))
_SQUARE = _poly((_LO, _LO), (_HI, _LO), (_HI, _HI), (_LO, _HI))
# Point-up pentagon with vertical sides and a flat bottom.
_PENTAGON = _poly((_MID, _LO), (_HI, 26.0), (_HI, _HI), (_LO, _HI), (_LO, 26.0))
_OCTAGON = _poly(
    (_LO + _OCT_T, _LO),
    (_HI - _OCT_T, _LO),
    (_HI, _LO + _OCT_T),
    (_HI, _HI - _OCT_T),
    (_HI - _OCT_T, _HI),
    (_LO + _OCT_T, _HI),
    (_LO, _HI - _OCT_T),
    (_LO, _LO + _OCT_T),
)

# Physical dimensions follow the US DOT expressway sizing per class.
SIGN_CLASSES = {
    c.name: c
    for c in [
        SignClass("circle", "circle", 750, 750, _CIRCLE_KP, (0, 1, 2, 3),
                  colors=((1.0, 0.0, 0.0), (1.0, 1.0, 1.0))),
        SignClass("triangle", "triangle", 900, 789, _TRIANGLE, (0, 1, 2),
                  colors=((1.0, 1.0, 0.0), (0.0, 0.0, 0.0))),
        SignClass("upside-down-triangle", "triangle-down", 1220, 1072,
                  _TRIANGLE_DOWN, (0, 1, 2),
                  colors=((1.0, 0.0, 1.0), (0.0, 0.0, 0.0))),
        SignClass("diamond-s", "quad", 600, 600, _DIAMOND, (0, 1, 2, 3),
                  colors=((0.0, 1.0, 0.0), (1.0, 1.0, 1.0))),
        SignClass("diamond-l", "quad", 915, 915, _DIAMOND, (0, 1, 2, 3),
                  colors=((0.0, 1.0, 1.0), (1.0, 0.0, 0.0))),
        SignClass("square", "quad", 600, 600, _SQUARE, (0, 1, 2, 3),
                  colors=((0.0, 0.0, 1.0), (1.0, 1.0, 1.0))),
        SignClass("rect-s", "quad", 458, 610, _SQUARE, (0, 1, 2, 3),
                  colors=((0.0, 1.0, 0.0), (1.0, 1.0, 0.0))),
        SignClass("rect-m", "quad", 762, 915, _SQUARE, (0, 1, 2, 3),
                  colors=((0.0, 1.0, 1.0), (0.0, 0.0, 0.0))),
        SignClass("rect-l", "quad", 915, 1220, _SQUARE, (0, 1, 2, 3),
                  colors=((0.0, 0.0, 1.0), (1.0, 1.0, 0.0))),
        SignClass("pentagon", "pentagon", 915, 915, _PENTAGON, (1, 2, 3, 4),
                  colors=((1.0, 1.0, 0.0), (1.0, 0.0, 0.0))),
        SignClass("octagon", "octagon", 915, 915, _OCTAGON, (0, 1, 4, 5),
                  colors=((1.0, 0.0, 0.0), (1.0, 1.0, 0.0))),
    ]
}

CLASS_NAMES = list(SIGN_CLASSES)  # 11 sign classes; "other"/background is index 11
BACKGROUND_CLASS = "other"
NUM_CLASSES = len(CLASS_NAMES) + 1


def class_index(name: str) -> int:
    if name == BACKGROUND_CLASS:
        return len(CLASS_NAMES)
    return CLASS_NAMES.index(name)


def _point_in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Vectorized even-odd point-in-polygon test."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        crosses = (y0 <= py) != (y1 <= py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xint)
    return inside


def canonical_mask(name: str, size: int = CANVAS_SIZE) -> np.ndarray:
    """Boolean occupancy of the sign shape on the canonical canvas."""
    cls = SIGN_CLASSES[name]
    ys, xs = np.mgrid[0:size, 0:size]
    xs = xs.astype(float)
    ys = ys.astype(float)
    if cls.family == "circle":
        r = (_HI - _LO) / 2.0
        return (xs - _MID) ** 2 + (ys - _MID) ** 2 <= r * r
    return _point_in_polygon(xs, ys, cls.polygon)


def canonical_sign(name: str, size: int = CANVAS_SIZE) -> np.ndarray:
    """Flat-color canonical sign image, one per class, on a black canvas.

    Each sign is a saturated background color with a contrasting central
    glyph so that in-mask pixel values include both 0.0 and 1.0 in well
    over 20% of the channel samples (the percentile relight fit at p=0.2
    then recovers an applied affine exactly).  A thin mid-gray ring gives
    the per-pixel channel maximum more than one level, keeping polynomial
    photometric fits well-posed.
    """
    cls = SIGN_CLASSES[name]
    mask = canonical_mask(name, size)
    img = np.zeros((size, size, 3), dtype=float)
    img[mask] = cls.colors[0]
    ys, xs = np.mgrid[0:size, 0:size]
    cx = cy = (size - 1) / 2.0
    r2 = (xs - cx) ** 2 + (ys - cy) ** 2
    ring = (r2 >= (0.28 * size) ** 2) & (r2 <= (0.33 * size) ** 2) & mask
    img[ring] = (0.5, 0.5, 0.5)
    # Central glyph: a disc covering roughly a fifth of the sign.
    glyph = (r2 <= (0.21 * size) ** 2) & mask
    img[glyph] = cls.colors[1]
    return img


def patch_size_px(name: str, inches: float, canvas: int = CANVAS_SIZE) -> int:
    """Convert a physical patch dimension in inches to canonical pixels.

    The canonical canvas spans the sign's physical width, so
    pixels = inches * 25.4 / width_mm * canvas, rounded to nearest.
    """
    cls = SIGN_CLASSES[name]
    return max(1, int(round(inches * 25.4 / cls.width_mm * canvas)))


# Patch size taxonomy in inches (height, width).
PATCH_SIZES = {
    "small": (10.0, 10.0),
    "medium": (10.0, 20.0),
    "large": (10.0, 20.0),  # rendered as two stacked 10x20 pieces
}
