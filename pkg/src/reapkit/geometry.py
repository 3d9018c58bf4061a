"""Mask-to-keypoint extraction and geometric transforms.

Coordinate convention: pixel centers at integer coordinates, origin at the
top-left, x right, y down.  Polygons are ordered counter-clockwise, meaning
positive shoelace area of the (x, y) vertex sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import (
    Degenerate,
    DegenerateConfiguration,
    DivisionByZero,
    EmptyMask,
    FitFailure,
)
from .signs import SIGN_CLASSES, SignClass

# Normalized ellipse residual below which a shape can count as circular.
# Calibrated on rasterized shapes: discs of radius >= 8 px measure below
# 0.002 while squares measure near 0.014 and pentagons near 0.012.
CIRCLE_RESIDUAL_THRESHOLD = 0.008
# The ellipse must also beat the best polygon model by this factor margin
# (an octagon model fits an octagon far better than the ellipse does).
CIRCLE_MODEL_MARGIN = 2.0
# Normalized polygon-fit residual below which a vertex count is accepted.
POLYGON_RESIDUAL_THRESHOLD = 0.01

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass(frozen=True)
class KeypointSet:
    """Ordered sign keypoints with their canonical counterparts."""

    points: np.ndarray  # (n, 2), n in {3, 4}
    canonical: np.ndarray  # (n, 2) canonical-canvas correspondences

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.shape[0] not in (3, 4):
            raise ValueError(f"keypoint count must be 3 or 4, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("keypoints must be finite")


@dataclass(frozen=True)
class GeometricTransform:
    """3x3 projective map from canonical coordinates to scene pixels."""

    kind: str  # translate-scale | affine | perspective
    matrix: np.ndarray  # (3, 3), H[2,2] == 1

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("matrix must be 3x3")
        if abs(np.linalg.det(m)) < 1e-12:
            raise DegenerateConfiguration("transform matrix is singular")

    def inverse(self) -> "GeometricTransform":
        inv = np.linalg.inv(self.matrix)
        if abs(inv[2, 2]) < 1e-12:
            raise DegenerateConfiguration("inverse has vanishing scale")
        return GeometricTransform(self.kind, inv / inv[2, 2])


def identity_transform() -> GeometricTransform:
    return GeometricTransform("translate-scale", np.eye(3))


def polygon_area(pts: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise order."""
    pts = np.asarray(pts, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_perimeter(pts: np.ndarray) -> float:
    pts = np.asarray(pts, dtype=float)
    return float(np.sum(np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)))


# ---------------------------------------------------------------------------
# Contour tracing


def trace_contour(mask: np.ndarray) -> np.ndarray:
    """Boundary polygon of the largest 4-connected component of a mask.

    The boundary runs along pixel edges: a single set pixel at (x, y) yields
    the square with corners (x -/+ 0.5, y -/+ 0.5).  Output is closed
    (implicitly), counter-clockwise, with collinear runs collapsed.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("mask has no set pixel")
    labels, n = ndimage.label(mask, structure=_FOUR_CONN)
    if n > 1:
        counts = np.bincount(labels.ravel())
        counts[0] = 0
        mask = labels == int(np.argmax(counts))

    ys, xs = np.nonzero(mask)
    h, w = mask.shape

    def is_set(x, y):
        return 0 <= x < w and 0 <= y < h and mask[y, x]

    # Directed boundary edges between pixel-corner points, oriented so the
    # closed chain has positive shoelace area.  Corner coordinates are stored
    # doubled as integers to keep dict keys exact.
    edges: dict[tuple, list] = {}
    for x, y in zip(xs.tolist(), ys.tolist()):
        x2, y2 = 2 * x, 2 * y
        if not is_set(x, y - 1):  # top edge, walk +x
            edges.setdefault((x2 - 1, y2 - 1), []).append((x2 + 1, y2 - 1))
        if not is_set(x + 1, y):  # right edge, walk +y
            edges.setdefault((x2 + 1, y2 - 1), []).append((x2 + 1, y2 + 1))
        if not is_set(x, y + 1):  # bottom edge, walk -x
            edges.setdefault((x2 + 1, y2 + 1), []).append((x2 - 1, y2 + 1))
        if not is_set(x - 1, y):  # left edge, walk -y
            edges.setdefault((x2 - 1, y2 + 1), []).append((x2 - 1, y2 - 1))

    start = min(edges)
    chain = [start]
    prev = None
    cur = start
    while True:
        outs = edges[cur]
        if len(outs) == 1 or prev is None:
            nxt = outs[0]
        else:
            # Pinch point: prefer the sharpest left turn relative to the
            # incoming direction so the outer boundary stays simple.
            din = (cur[0] - prev[0], cur[1] - prev[1])

            def turn(p):
                return din[0] * (p[1] - cur[1]) - din[1] * (p[0] - cur[0])

            nxt = max(outs, key=turn)
        outs.remove(nxt)
        if nxt == start:
            break
        chain.append(nxt)
        prev, cur = cur, nxt

    pts = np.array(chain, dtype=float) / 2.0
    # Collapse collinear runs (all segments are axis-aligned unit steps).
    keep = []
    n_pts = len(pts)
    for i in range(n_pts):
        a = pts[i - 1]
        b = pts[i]
        c = pts[(i + 1) % n_pts]
        if abs((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])) > 1e-9:
            keep.append(i)
    pts = pts[keep]
    if polygon_area(pts) < 0:
        pts = pts[::-1]
    return pts


# ---------------------------------------------------------------------------
# Convex hull


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counter-clockwise, no collinear triples."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) < 3:
        raise Degenerate("need at least 3 distinct points")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:
        raise Degenerate("all points are collinear")
    if polygon_area(hull) < 0:
        hull = hull[::-1]
    return hull


# ---------------------------------------------------------------------------
# Ellipse fitting


@dataclass(frozen=True)
class EllipseFit:
    center: np.ndarray  # (2,)
    axes: tuple  # (a, b) semi-axes, a >= b
    angle: float  # radians, direction of the major axis
    residual: float  # mean point-to-ellipse distance / input perimeter


def _point_to_ellipse_distance(pts: np.ndarray, a: float, b: float) -> np.ndarray:
    """Distance from points (in the ellipse frame) to the ellipse boundary.

    Coarse angular scan followed by ternary refinement of the squared
    distance; accurate to ~1e-10 for points near the boundary.
    """
    pts = np.asarray(pts, dtype=float)
    theta = np.linspace(0, 2 * np.pi, 257)[:-1]
    ex = a * np.cos(theta)
    ey = b * np.sin(theta)
    d2 = (pts[:, None, 0] - ex[None, :]) ** 2 + (pts[:, None, 1] - ey[None, :]) ** 2
    best = np.argmin(d2, axis=1)
    step = theta[1] - theta[0]
    lo = theta[best] - step
    hi = theta[best] + step
    for _ in range(60):
        m1 = lo + (hi - lo) / 3
        m2 = hi - (hi - lo) / 3

        def sq(t):
            return (pts[:, 0] - a * np.cos(t)) ** 2 + (pts[:, 1] - b * np.sin(t)) ** 2

        worse = sq(m1) > sq(m2)
        lo = np.where(worse, m1, lo)
        hi = np.where(worse, hi, m2)
    t = (lo + hi) / 2
    return np.sqrt((pts[:, 0] - a * np.cos(t)) ** 2 + (pts[:, 1] - b * np.sin(t)) ** 2)


def fit_ellipse(points: np.ndarray) -> EllipseFit:
    """Direct algebraic least-squares ellipse fit (Halir-Flusser variant).

    The residual is the mean geometric point-to-ellipse distance divided by
    the perimeter of the input point sequence, so it is scale free.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < 5:
        raise Degenerate("need at least 5 points for an ellipse")
    mean = pts.mean(axis=0)
    x = pts[:, 0] - mean[0]
    y = pts[:, 1] - mean[1]

    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError as exc:
        raise Degenerate("points do not determine an ellipse") from exc
    m = s1 + s2 @ t
    m = np.array([m[2] / 2, -m[1], m[0] / 2])
    w, v = np.linalg.eig(m)
    cond = 4 * v[0] * v[2] - v[1] ** 2
    good = np.where(np.isreal(w) & (cond > 0))[0]
    if len(good) == 0:
        raise Degenerate("no elliptical solution")
    a1 = np.real(v[:, good[0]])
    a2 = t @ a1
    A, B, C = a1
    D, E, F = a2
    # Normalize the conic sign so the interior evaluates negative; the
    # axis-selection comparison below depends on it.
    if A + C < 0:
        A, B, C, D, E, F = -A, -B, -C, -D, -E, -F

    # Conic to geometric parameters (still in centered coordinates).
    den = B * B - 4 * A * C
    if abs(den) < 1e-300:
        raise Degenerate("degenerate conic")
    cx = (2 * C * D - B * E) / den
    cy = (2 * A * E - B * D) / den
    num = 2 * (A * E * E + C * D * D + F * B * B - B * D * E - 4 * A * C * F)
    s = np.sqrt((A - C) ** 2 + B * B)
    a_sq = num * ((A + C) + s) / (den * den)
    b_sq = num * ((A + C) - s) / (den * den)
    if a_sq < 0 and b_sq < 0:
        a_sq, b_sq = -a_sq, -b_sq  # eigenvector sign is arbitrary
    if not (np.isfinite(a_sq) and np.isfinite(b_sq)) or a_sq <= 0 or b_sq <= 0:
        raise Degenerate("conic is not an ellipse")
    a_axis = float(np.sqrt(max(a_sq, b_sq)))
    b_axis = float(np.sqrt(min(a_sq, b_sq)))
    # Principal axis direction; pick the one carrying the major axis (the
    # smaller quadratic-form coefficient).
    angle = 0.5 * np.arctan2(B, A - C)
    coef_along = (A + C) / 2 + (A - C) / 2 * np.cos(2 * angle) + B / 2 * np.sin(2 * angle)
    coef_across = (A + C) - coef_along
    if coef_along > coef_across:
        angle += np.pi / 2
    angle = float(angle % np.pi)

    center = np.array([cx + mean[0], cy + mean[1]])
    # Residual: rotate points into the ellipse frame, measure distance.
    ca, sa = np.cos(angle), np.sin(angle)
    rel = pts - center
    frame = np.column_stack([rel[:, 0] * ca + rel[:, 1] * sa,
                             -rel[:, 0] * sa + rel[:, 1] * ca])
    dists = _point_to_ellipse_distance(frame, a_axis, b_axis)
    residual = float(dists.mean() / max(polygon_perimeter(pts), 1e-12))
    return EllipseFit(center, (a_axis, b_axis), angle, residual)


# ---------------------------------------------------------------------------
# Polygon simplification


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return float(np.linalg.norm(p - a))
    t = np.clip(float((p - a) @ ab) / denom, 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def _points_to_polygon_distance(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    out = np.empty(len(pts))
    segs = [(poly[i], poly[(i + 1) % len(poly)]) for i in range(len(poly))]
    for i, p in enumerate(pts):
        out[i] = min(_point_segment_distance(p, a, b) for a, b in segs)
    return out


def _tls_line(pts: np.ndarray):
    """Total-least-squares line through points: (point_on_line, direction)."""
    mean = pts.mean(axis=0)
    if len(pts) == 1:
        return mean, None
    u, s, vt = np.linalg.svd(pts - mean)
    return mean, vt[0]


def _line_intersection(p1, d1, p2, d2):
    cross = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(cross) < 1e-9:
        return None
    t = ((p2[0] - p1[0]) * d2[1] - (p2[1] - p1[1]) * d2[0]) / cross
    return p1 + t * d1


def fit_polygon(hull: np.ndarray, target_vertex_count: int) -> np.ndarray:
    """Simplify a convex polygon to exactly ``target_vertex_count`` vertices.

    Dominant vertices are chosen by farthest-point insertion, then each side
    is refined by intersecting total-least-squares lines fitted to the hull
    points along it.  Raises FitFailure when the simplified polygon strays
    too far from the hull.
    """
    if target_vertex_count not in (3, 4, 5, 8):
        raise ValueError("target vertex count must be one of 3, 4, 5, 8")
    pts = np.asarray(hull, dtype=float)
    m = len(pts)
    if m < target_vertex_count:
        raise FitFailure(
            f"hull has {m} points, fewer than target {target_vertex_count}")

    # Farthest-pair seed.
    d2 = np.sum((pts[:, None] - pts[None, :]) ** 2, axis=2)
    i0, i1 = np.unravel_index(np.argmax(d2), d2.shape)
    chosen = sorted([int(i0), int(i1)])
    while len(chosen) < target_vertex_count:
        best_dist, best_idx = -1.0, None
        for k in range(len(chosen)):
            a = chosen[k]
            b = chosen[(k + 1) % len(chosen)]
            idxs = range(a + 1, b) if b > a else list(range(a + 1, m)) + list(range(0, b))
            for j in idxs:
                dist = _point_segment_distance(pts[j], pts[a], pts[b])
                if dist > best_dist:
                    best_dist, best_idx = dist, j
        if best_idx is None:
            raise FitFailure("no remaining points to promote to a vertex")
        chosen = sorted(chosen + [best_idx])

    # Side refinement: fit a line to each side's run of hull points.
    n = target_vertex_count
    lines = []
    for k in range(n):
        a = chosen[k]
        b = chosen[(k + 1) % n]
        idxs = list(range(a, b + 1)) if b > a else list(range(a, m)) + list(range(0, b + 1))
        side = pts[idxs]
        if len(side) >= 4:
            side = side[1:-1]  # rounded corners pull the line fit off
        p0, d = _tls_line(side)
        if d is None:
            d = pts[b] - pts[a]
            d = d / max(np.linalg.norm(d), 1e-12)
        lines.append((p0, d))

    refined = []
    for k in range(n):
        p_prev, d_prev = lines[k - 1]
        p_cur, d_cur = lines[k]
        inter = _line_intersection(p_prev, d_prev, p_cur, d_cur)
        refined.append(inter if inter is not None else pts[chosen[k]])
    poly = np.array(refined)
    if polygon_area(poly) < 0:
        poly = poly[::-1]

    tol = max(2.0, 0.02 * polygon_perimeter(pts))
    if _points_to_polygon_distance(pts, poly).max() > tol:
        raise FitFailure("simplified polygon does not stay near the hull")

    # Deterministic start: topmost vertex, ties broken by x.
    start = int(np.lexsort((poly[:, 0], poly[:, 1]))[0])
    return np.roll(poly, -start, axis=0)


def densify_polygon(poly: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Resample a closed polygon boundary at roughly unit spacing.

    Convex-hull vertices alone under-constrain the ellipse/polygon model
    comparison; fits act on the densified boundary instead.
    """
    poly = np.asarray(poly, dtype=float)
    out = []
    n = len(poly)
    for i in range(n):
        a = poly[i]
        b = poly[(i + 1) % n]
        steps = max(1, int(np.ceil(np.linalg.norm(b - a) / spacing)))
        for k in range(steps):
            out.append(a + (b - a) * (k / steps))
    return np.array(out)


def match_canonical(poly: np.ndarray, canonical: np.ndarray) -> np.ndarray:
    """Reorder ``poly`` so vertex k corresponds to ``canonical[k]``.

    Both polygons are centroid-normalized; all cyclic shifts plus the
    reflected traversal are scored by total squared distance.
    """
    poly = np.asarray(poly, dtype=float)
    canon = np.asarray(canonical, dtype=float)
    n = len(poly)
    if len(canon) != n:
        raise ValueError("vertex counts differ")

    def normalize(p):
        q = p - p.mean(axis=0)
        scale = np.sqrt(np.mean(np.sum(q * q, axis=1)))
        return q / max(scale, 1e-12)

    pn = normalize(poly)
    cn = normalize(canon)
    best_cost, best_order = np.inf, None
    for refl in (False, True):
        seq = pn[::-1] if refl else pn
        idx = np.arange(n)[::-1] if refl else np.arange(n)
        for shift in range(n):
            rolled = np.roll(seq, -shift, axis=0)
            cost = float(np.sum((rolled - cn) ** 2))
            if cost < best_cost:
                best_cost = cost
                best_order = np.roll(idx, -shift)
    return poly[best_order]


# ---------------------------------------------------------------------------
# Keypoint extraction


_FAMILY_VERTEX_COUNT = {"triangle": 3, "triangle-down": 3, "quad": 4,
                        "pentagon": 5, "octagon": 8}
_FAMILY_REPRESENTATIVE = {"circle": "circle", "triangle": "triangle",
                          "triangle-down": "upside-down-triangle",
                          "quad": "square", "pentagon": "pentagon",
                          "octagon": "octagon"}


def _triangle_family(vertices: np.ndarray) -> str:
    ys = np.sort(vertices[:, 1])
    return "triangle" if (ys[1] - ys[0]) > (ys[2] - ys[1]) else "triangle-down"


def _infer_family(contour: np.ndarray, hull: np.ndarray):
    """Shape family implied by the mask alone, plus fitted artifacts.

    The hull boundary is densified and both an ellipse and polygons of each
    plausible vertex count are fitted to it; the family comes from comparing
    the normalized residuals (circle only when the ellipse both clears the
    circularity threshold and beats every polygon model).
    """
    dense = densify_polygon(hull)
    perim = max(polygon_perimeter(hull), 1e-12)

    ellipse = None
    if len(dense) >= 5:
        try:
            ellipse = fit_ellipse(dense)
        except Degenerate:
            ellipse = None

    fits = {}
    for n in (3, 4, 5, 8):
        if len(dense) < n:
            continue
        try:
            poly = fit_polygon(dense, n)
        except FitFailure:
            continue
        fits[n] = (float(_points_to_polygon_distance(dense, poly).mean() / perim),
                   poly)

    best_poly_res = min((r for r, _ in fits.values()), default=np.inf)
    if (ellipse is not None
            and ellipse.residual < CIRCLE_RESIDUAL_THRESHOLD
            and ellipse.residual <= CIRCLE_MODEL_MARGIN * best_poly_res):
        return "circle", ellipse, None

    def family_of(n, poly):
        return _triangle_family(poly) if n == 3 else \
            {4: "quad", 5: "pentagon", 8: "octagon"}[n]

    for n in (3, 4, 5, 8):  # parsimony: smallest adequate vertex count
        if n in fits and fits[n][0] < POLYGON_RESIDUAL_THRESHOLD:
            return family_of(n, fits[n][1]), ellipse, fits[n][1]
    if not fits:
        raise Degenerate("could not fit any polygon to the hull")
    n = min(fits, key=lambda k: fits[k][0])
    return family_of(n, fits[n][1]), ellipse, fits[n][1]


def _circle_keypoints(ellipse: EllipseFit) -> np.ndarray:
    a, b = ellipse.axes
    angle = ellipse.angle
    # Near-circular fits have an arbitrary axis direction; snap to the axes.
    if abs(a - b) < 0.75:
        angle = 0.0
    u = np.array([np.cos(angle), np.sin(angle)])  # major axis, radius a
    v = np.array([-np.sin(angle), np.cos(angle)])  # minor axis, radius b
    # Pick whichever axis is more horizontal for the left/right pair so the
    # ordering is stable regardless of which axis is the major one.
    if abs(u[0]) >= abs(v[0]):
        horiz, rh, vert, rv = u, a, v, b
    else:
        horiz, rh, vert, rv = v, b, u, a
    if horiz[0] < 0:
        horiz = -horiz
    if vert[1] < 0:
        vert = -vert
    c = ellipse.center
    # Ordered left, right, top, bottom.
    return np.array([c - rh * horiz, c + rh * horiz,
                     c - rv * vert, c + rv * vert])


def extract_keypoints(mask: np.ndarray, hint: str):
    """Keypoints for a sign mask plus a cross-verification flag.

    ``verified`` is False when the shape family inferred from the mask
    disagrees with the classifier's candidate class; such annotations are
    queued for human review.
    """
    if hint not in SIGN_CLASSES:
        raise ValueError(f"unknown sign class {hint!r}")
    contour = trace_contour(mask)
    hull = convex_hull(contour)
    family, ellipse, poly = _infer_family(contour, hull)

    hint_cls: SignClass = SIGN_CLASSES[hint]
    verified = family == hint_cls.family
    cls = hint_cls if verified else SIGN_CLASSES[_FAMILY_REPRESENTATIVE[family]]

    if family == "circle":
        points = _circle_keypoints(ellipse)
        canonical = cls.keypoints()
    else:
        n = _FAMILY_VERTEX_COUNT[family]
        if poly is None:
            poly = fit_polygon(hull, n)
        matched = match_canonical(poly, cls.polygon)
        points = matched[list(cls.keypoint_indices)]
        canonical = cls.keypoints()
    return KeypointSet(points, canonical), verified


# ---------------------------------------------------------------------------
# Transform estimation


def _normalization(pts: np.ndarray) -> np.ndarray:
    """Isotropic conditioning transform: centroid 0, mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.mean(np.linalg.norm(pts - c, axis=1))
    s = np.sqrt(2.0) / max(d, 1e-12)
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _check_general_position(pts: np.ndarray):
    n = len(pts)
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-12)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                area = abs(polygon_area(pts[[i, j, k]]))
                if area < 1e-9 * scale * scale:
                    raise DegenerateConfiguration(
                        f"points {i},{j},{k} are collinear")


def estimate_transform(src, dst, kind: str = "auto") -> GeometricTransform:
    """Estimate the geometric transform mapping src keypoints to dst.

    With kind="auto", 4 correspondences give a perspective matrix via the
    normalized direct linear transform and 3 give the exact affine map.
    Explicit kinds ("perspective", "affine", "translate-scale") support the
    method-comparison harness; non-exact cases are least squares.
    """
    src_pts = np.asarray(getattr(src, "points", src), dtype=float)
    dst_pts = np.asarray(getattr(dst, "points", dst), dtype=float)
    if src_pts.shape != dst_pts.shape:
        raise ValueError("point counts differ")
    n = len(src_pts)
    if kind == "auto":
        kind = "perspective" if n >= 4 else "affine"

    if kind == "perspective":
        if n < 4:
            raise DegenerateConfiguration("perspective needs 4 correspondences")
        _check_general_position(src_pts)
        ts = _normalization(src_pts)
        td = _normalization(dst_pts)
        s = (ts @ np.column_stack([src_pts, np.ones(n)]).T).T
        d = (td @ np.column_stack([dst_pts, np.ones(n)]).T).T
        rows = []
        for (x, y, _), (u, v, _) in zip(s, d):
            rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
            rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
        _, _, vt = np.linalg.svd(np.array(rows))
        hn = vt[-1].reshape(3, 3)
        h = np.linalg.inv(td) @ hn @ ts
        if abs(h[2, 2]) < 1e-12:
            raise DegenerateConfiguration("vanishing projective scale")
        return GeometricTransform("perspective", h / h[2, 2])

    if kind == "affine":
        if n < 3:
            raise DegenerateConfiguration("affine needs 3 correspondences")
        if n == 3:
            _check_general_position(src_pts)
        a = np.column_stack([src_pts, np.ones(n)])
        coef, _, rank, _ = np.linalg.lstsq(a, dst_pts, rcond=None)
        if rank < 3:
            raise DegenerateConfiguration("rank-deficient affine system")
        h = np.eye(3)
        h[0, :] = coef[:, 0]
        h[1, :] = coef[:, 1]
        return GeometricTransform("affine", h)

    if kind == "translate-scale":
        vx = np.var(src_pts[:, 0])
        vy = np.var(src_pts[:, 1])
        if vx < 1e-12 or vy < 1e-12:
            raise DegenerateConfiguration("no spread along an axis")
        sx = float(np.cov(src_pts[:, 0], dst_pts[:, 0], bias=True)[0, 1] / vx)
        sy = float(np.cov(src_pts[:, 1], dst_pts[:, 1], bias=True)[0, 1] / vy)
        tx = float(dst_pts[:, 0].mean() - sx * src_pts[:, 0].mean())
        ty = float(dst_pts[:, 1].mean() - sy * src_pts[:, 1].mean())
        h = np.array([[sx, 0, tx], [0, sy, ty], [0, 0, 1.0]])
        return GeometricTransform("translate-scale", h)

    raise ValueError(f"unknown transform kind {kind!r}")


def warp_points(pts: np.ndarray, tf: GeometricTransform) -> np.ndarray:
    """Apply the projective map to (n, 2) points."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    hom = np.column_stack([pts, np.ones(len(pts))]) @ tf.matrix.T
    w = hom[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise DivisionByZero("point maps to the line at infinity")
    return hom[:, :2] / w[:, None]


# ---------------------------------------------------------------------------
# Image warping


def _bilinear_weights(src_x: np.ndarray, src_y: np.ndarray, h: int, w: int):
    """Corner indices, weights, and validity for bilinear sampling."""
    x0 = np.floor(src_x).astype(int)
    y0 = np.floor(src_y).astype(int)
    fx = src_x - x0
    fy = src_y - y0
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            corners.append((np.clip(xi, 0, w - 1), np.clip(yi, 0, h - 1),
                            wgt * valid))
    return corners


def _source_coords(tf: GeometricTransform, out_h: int, out_w: int,
                   offset=(0.0, 0.0)):
    inv = tf.inverse().matrix
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    xs = xs.astype(float) + offset[0]
    ys = ys.astype(float) + offset[1]
    denom = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
    src_x = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / denom
    src_y = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / denom
    return src_x, src_y


def warp_image(img: np.ndarray, tf: GeometricTransform, out_size,
               offset=(0.0, 0.0)) -> np.ndarray:
    """Inverse-mapped bilinear warp; zero outside, output clipped to [0, 1].

    ``out_size`` is (height, width); ``offset`` shifts the output window so
    a warp can be evaluated on a sub-region of the destination plane.
    Works for 2-D masks and (H, W, C) images alike.
    """
    img = np.asarray(img, dtype=float)
    out_h, out_w = out_size
    src_x, src_y = _source_coords(tf, out_h, out_w, offset)
    h, w = img.shape[:2]
    corners = _bilinear_weights(src_x, src_y, h, w)
    if img.ndim == 2:
        out = np.zeros((out_h, out_w))
        for xi, yi, wgt in corners:
            out += wgt * img[yi, xi]
    else:
        out = np.zeros((out_h, out_w, img.shape[2]))
        for xi, yi, wgt in corners:
            out += wgt[..., None] * img[yi, xi]
    return np.clip(out, 0.0, 1.0)


def warp_image_vjp(upstream: np.ndarray, img_shape, tf: GeometricTransform,
                   offset=(0.0, 0.0)) -> np.ndarray:
    """Adjoint of warp_image with respect to the source image.

    Scatters each output gradient back onto the four sampled source pixels
    with the same bilinear weights.  The output clip is handled by the
    caller (gradients through saturated pixels are zeroed there).
    """
    upstream = np.asarray(upstream, dtype=float)
    out_h, out_w = upstream.shape[:2]
    src_x, src_y = _source_coords(tf, out_h, out_w, offset)
    h, w = img_shape[:2]
    corners = _bilinear_weights(src_x, src_y, h, w)
    grad = np.zeros(img_shape)
    if upstream.ndim == 2:
        for xi, yi, wgt in corners:
            np.add.at(grad, (yi.ravel(), xi.ravel()), (wgt * upstream).ravel())
    else:
        c = upstream.shape[2]
        for xi, yi, wgt in corners:
            np.add.at(grad, (yi.ravel(), xi.ravel()),
                      (wgt[..., None] * upstream).reshape(-1, c))
    return grad
