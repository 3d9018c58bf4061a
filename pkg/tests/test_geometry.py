"""Shape analysis, transform fitting, and differentiable warping."""

import numpy as np
import pytest

from reapkit import errors, geometry, signs


def _rect_mask(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


# ---------------------------------------------------------------- polygons

def test_polygon_area_unit_square():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    assert geometry.polygon_area(sq) == pytest.approx(1.0)


def test_polygon_area_matches_shoelace_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = rng.integers(3, 9)
        ang = np.sort(rng.uniform(0, 2 * np.pi, n))
        r = rng.uniform(1.0, 5.0, n)
        pts = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
        x, y = pts[:, 0], pts[:, 1]
        oracle = 0.5 * abs(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
        assert abs(geometry.polygon_area(pts)) == pytest.approx(oracle)


def test_polygon_perimeter_triangle():
    tri = np.array([[0, 0], [3, 0], [3, 4]], dtype=float)
    assert geometry.polygon_perimeter(tri) == pytest.approx(12.0)


def test_densify_polygon_spacing():
    sq = np.array([[0, 0], [10, 0], [10, 10], [0, 10]], dtype=float)
    dense = geometry.densify_polygon(sq, spacing=1.0)
    assert len(dense) >= 40
    # every densified point lies on the square's boundary
    on_edge = (np.isclose(dense[:, 0], 0) | np.isclose(dense[:, 0], 10)
               | np.isclose(dense[:, 1], 0) | np.isclose(dense[:, 1], 10))
    assert on_edge.all()


def test_convex_hull_recovers_extremes():
    rng = np.random.default_rng(0)
    inner = rng.uniform(1, 9, size=(200, 2))
    corners = np.array([[0, 0], [10, 0], [10, 10], [0, 10]], dtype=float)
    hull = geometry.convex_hull(np.vstack([inner, corners]))
    assert len(hull) == 4
    got = {tuple(p) for p in np.round(hull, 6)}
    assert got == {(0, 0), (10, 0), (10, 10), (0, 10)}


def test_trace_contour_rectangle():
    mask = _rect_mask(32, 32, 5, 20, 8, 25)
    contour = geometry.trace_contour(mask)
    # contour runs along the half-pixel outer edge of the filled region
    assert contour[:, 0].min() == pytest.approx(7.5)
    assert contour[:, 0].max() == pytest.approx(24.5)
    assert contour[:, 1].min() == pytest.approx(4.5)
    assert contour[:, 1].max() == pytest.approx(19.5)


def test_trace_contour_empty_mask_raises():
    with pytest.raises(errors.EmptyMask):
        geometry.trace_contour(np.zeros((8, 8), dtype=bool))


# ------------------------------------------------------------ ellipse fit

def test_fit_ellipse_exact_circle():
    ang = np.linspace(0, 2 * np.pi, 60, endpoint=False)
    pts = np.stack([10 + 4 * np.cos(ang), 20 + 4 * np.sin(ang)], axis=1)
    fit = geometry.fit_ellipse(pts)
    assert fit.center == pytest.approx((10, 20), abs=1e-6)
    assert sorted(fit.axes) == pytest.approx([4, 4], abs=1e-6)
    assert fit.residual < 1e-8


def test_fit_ellipse_rotated_ellipse():
    ang = np.linspace(0, 2 * np.pi, 80, endpoint=False)
    a, b, th = 6.0, 3.0, 0.7
    x = a * np.cos(ang)
    y = b * np.sin(ang)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    pts = np.stack([x, y], axis=1) @ rot.T + np.array([5.0, -2.0])
    fit = geometry.fit_ellipse(pts)
    assert sorted(fit.axes) == pytest.approx([3.0, 6.0], abs=1e-6)
    assert fit.residual < 1e-8


def test_fit_ellipse_collinear_raises():
    pts = np.stack([np.arange(10.0), 2 * np.arange(10.0)], axis=1)
    with pytest.raises(errors.Degenerate):
        geometry.fit_ellipse(pts)


# ----------------------------------------------------- polygon fit / match

def test_fit_polygon_square_from_dense_hull():
    sq = np.array([[0, 0], [20, 0], [20, 20], [0, 20]], dtype=float)
    dense = geometry.densify_polygon(sq, spacing=0.5)
    hull = geometry.convex_hull(dense)
    poly = geometry.fit_polygon(hull, 4)
    assert len(poly) == 4
    got = sorted(tuple(np.round(p, 4)) for p in poly)
    assert got == sorted([(0, 0), (20, 0), (20, 20), (0, 20)])


def test_match_canonical_cyclic_alignment():
    canon = signs.SIGN_CLASSES["square"].polygon
    rolled = np.roll(canon, 2, axis=0)
    aligned = geometry.match_canonical(rolled, canon)
    assert np.allclose(aligned, canon)


# ------------------------------------------------------ keypoint extraction

@pytest.mark.parametrize("name", signs.CLASS_NAMES)
def test_extract_keypoints_canonical_masks(name):
    mask = signs.canonical_mask(name)
    kp, verified = geometry.extract_keypoints(mask, name)
    assert verified
    expect = signs.SIGN_CLASSES[name].keypoints()
    err = np.linalg.norm(kp.points - expect, axis=1)
    assert err.max() < 1.5  # rasterization error only


def test_extract_keypoints_flags_wrong_hint():
    mask = signs.canonical_mask("triangle")
    _, verified = geometry.extract_keypoints(mask, "octagon")
    assert not verified


# ------------------------------------------------------ transform fitting

def _random_points(rng, n):
    return rng.uniform(0, 60, size=(n, 2))


def test_estimate_translate_scale_exact():
    src = np.array([[0, 0], [10, 0], [10, 10], [0, 10]], dtype=float)
    dst = src * 2.5 + np.array([7.0, -3.0])
    tf = geometry.estimate_transform(src, dst, kind="translate-scale")
    assert tf.kind == "translate-scale"
    assert np.allclose(geometry.warp_points(src, tf), dst, atol=1e-9)


def test_estimate_affine_exact():
    rng = np.random.default_rng(1)
    A = np.array([[1.2, 0.3], [-0.1, 0.9]])
    t = np.array([4.0, 5.0])
    src = _random_points(rng, 6)
    dst = src @ A.T + t
    tf = geometry.estimate_transform(src, dst, kind="affine")
    assert np.allclose(geometry.warp_points(src, tf), dst, atol=1e-8)


def test_estimate_perspective_exact():
    H = np.array([[1.1, 0.08, 3.0],
                  [-0.05, 0.95, 7.0],
                  [8e-4, -5e-4, 1.0]])
    src = np.array([[0, 0], [60, 0], [60, 60], [0, 60], [30, 10]], dtype=float)
    ones = np.hstack([src, np.ones((len(src), 1))])
    mapped = ones @ H.T
    dst = mapped[:, :2] / mapped[:, 2:]
    tf = geometry.estimate_transform(src, dst, kind="perspective")
    assert np.allclose(geometry.warp_points(src, tf), dst, atol=1e-7)


def test_estimate_transform_auto_prefers_minimal_points():
    src = np.array([[0, 0], [10, 0], [10, 10], [0, 10]], dtype=float)
    dst = src + 5.0
    tf = geometry.estimate_transform(src[:3], dst[:3], kind="auto")
    assert np.allclose(geometry.warp_points(src, tf), dst, atol=1e-8)


def test_estimate_transform_degenerate_raises():
    src = np.array([[0, 0], [1, 1], [2, 2], [3, 3]], dtype=float)
    with pytest.raises(errors.Degenerate):
        geometry.estimate_transform(src, src, kind="perspective")


def test_transform_inverse_roundtrip():
    H = np.array([[1.1, 0.05, 3.0], [0.02, 0.9, -2.0], [4e-4, 1e-4, 1.0]])
    tf = geometry.GeometricTransform("perspective", H)
    pts = np.random.default_rng(2).uniform(0, 50, (20, 2))
    back = geometry.warp_points(geometry.warp_points(pts, tf), tf.inverse())
    assert np.allclose(back, pts, atol=1e-8)


# ------------------------------------------------------------ image warping

def test_warp_image_identity():
    rng = np.random.default_rng(4)
    img = rng.uniform(size=(16, 16, 3))
    out = geometry.warp_image(img, geometry.identity_transform(), (16, 16))
    assert np.allclose(out, img)


def test_warp_image_integer_translation():
    rng = np.random.default_rng(5)
    img = rng.uniform(size=(20, 20, 3))
    M = np.array([[1, 0, 3], [0, 1, 2], [0, 0, 1]], dtype=float)
    out = geometry.warp_image(img, geometry.GeometricTransform("affine", M),
                              (20, 20))
    assert np.allclose(out[2:, 3:], img[:-2, :-3])
    assert np.allclose(out[:2], 0.0)  # out-of-source pixels are zero


def test_warp_image_vjp_is_adjoint():
    """<W x, u> must equal <x, W^T u> for the bilinear warp."""
    rng = np.random.default_rng(6)
    img = rng.uniform(size=(12, 12, 3))
    M = np.array([[0.9, 0.2, 1.5], [-0.1, 1.1, 0.7], [1e-3, 0, 1]])
    tf = geometry.GeometricTransform("perspective", M)
    out = geometry.warp_image(img, tf, (14, 14))
    u = rng.normal(size=out.shape)
    g = geometry.warp_image_vjp(u, img.shape, tf)
    assert np.vdot(out, u) == pytest.approx(np.vdot(img, g), rel=1e-10)


def test_warp_image_vjp_offset_adjoint():
    rng = np.random.default_rng(7)
    img = rng.uniform(size=(10, 10, 3))
    M = np.array([[1.2, 0.0, 4.0], [0.1, 0.8, 2.0], [0, 0, 1.0]])
    tf = geometry.GeometricTransform("affine", M)
    out = geometry.warp_image(img, tf, (12, 12), offset=(3, 2))
    u = rng.normal(size=out.shape)
    g = geometry.warp_image_vjp(u, img.shape, tf, offset=(3, 2))
    assert np.vdot(out, u) == pytest.approx(np.vdot(img, g), rel=1e-10)
