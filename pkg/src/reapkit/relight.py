"""Photometric ("relighting") transforms between digital and real sign pixels.

Supports four methods:

* ``none`` -- identity.
* ``percentile`` -- affine map alpha*P + beta where beta is the p-th
  percentile of the real sign's pixel values (all RGB channels pooled) and
  alpha is the (1-p)-th minus the p-th percentile.
* ``polynomial`` -- degree-k least-squares fit on paired digital/real scalar
  signals, with optional residual-rank trimming and a single refit.
* ``color-transfer`` -- mean/std matching of the lighting channel(s) in HSV
  or LAB.

Percentiles use the linear-interpolation convention.  All applications clip
to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, RankDeficient, ZeroVariance

DEFAULT_PERCENTILE = 0.2

_METHODS = ("none", "percentile", "polynomial", "color-transfer")
_SPACES = ("rgb", "hsv", "lab")


@dataclass(frozen=True)
class RelightParams:
    """Parameters of a fitted photometric transform.

    Only the fields of the active method are meaningful: (alpha, beta) for
    percentile, coeffs for polynomial, transfer moments for color-transfer.
    """

    method: str = "none"
    space: str = "rgb"
    alpha: float = 1.0
    beta: float = 0.0
    coeffs: tuple = ()
    # Per affected channel: (src_mean, src_std, dst_mean, dst_std).
    transfer: tuple = ()

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"unknown relight method {self.method!r}")
        if self.space not in _SPACES:
            raise ValueError(f"unknown color space {self.space!r}")
        if self.method == "percentile" and self.alpha < 0:
            raise ValueError("percentile relight requires alpha >= 0")
        if self.method == "polynomial" and not 1 <= len(self.coeffs) <= 4:
            raise ValueError("polynomial degree must be in 0..3")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "space": self.space,
            "alpha": float(self.alpha),
            "beta": float(self.beta),
            "coeffs": [float(c) for c in self.coeffs],
            "transfer": [[float(v) for v in ch] for ch in self.transfer],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RelightParams":
        return cls(
            method=d.get("method", "none"),
            space=d.get("space", "rgb"),
            alpha=float(d.get("alpha", 1.0)),
            beta=float(d.get("beta", 0.0)),
            coeffs=tuple(d.get("coeffs", ())),
            transfer=tuple(tuple(ch) for ch in d.get("transfer", ())),
        )


@dataclass(frozen=True)
class PixelPairSample:
    """Paired digital/real scalar pixel values (same pixel, same channel)."""

    digital: np.ndarray
    real: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.digital, dtype=float).ravel()
        r = np.asarray(self.real, dtype=float).ravel()
        if d.size == 0:
            raise EmptyInput("pixel pair sample is empty")
        if d.shape != r.shape:
            raise ValueError("digital/real length mismatch")
        object.__setattr__(self, "digital", d)
        object.__setattr__(self, "real", r)

    def __len__(self) -> int:
        return self.digital.size


def fit_percentile(real_values, p: float = DEFAULT_PERCENTILE) -> RelightParams:
    """Fit (alpha, beta) from the real sign's pooled RGB pixel values.

    beta = Q_p(values), alpha = Q_{1-p}(values) - Q_p(values).
    """
    if not 0 <= p < 0.5:
        raise ValueError("p must lie in [0, 0.5)")
    v = np.asarray(real_values, dtype=float).ravel()
    if v.size == 0:
        raise EmptyInput("no pixel values to fit")
    lo, hi = np.quantile(v, [p, 1.0 - p])
    return RelightParams(method="percentile", space="rgb",
                         alpha=float(hi - lo), beta=float(lo))


def _polyfit_pairs(x: np.ndarray, y: np.ndarray, k: int) -> np.ndarray:
    """Least-squares polynomial coefficients theta_0..theta_k (low first)."""
    vand = np.vander(x, k + 1, increasing=True)
    if np.linalg.matrix_rank(vand) < k + 1:
        raise RankDeficient("polynomial design matrix is singular")
    coeffs, *_ = np.linalg.lstsq(vand, y, rcond=None)
    return coeffs


def fit_polynomial(sample: PixelPairSample, k: int = 1, trim_p: float = 0.0,
                   space: str = "rgb") -> RelightParams:
    """Degree-k least-squares fit y ~= sum theta_j x^j over pixel pairs.

    With trim_p > 0, an initial untrimmed fit ranks the pairs by residual;
    a fraction trim_p is cut off each tail (largest positive and most
    negative residuals) and the fit is redone once on the survivors.
    """
    if k not in (0, 1, 2, 3):
        raise ValueError("degree must be in 0..3")
    if not 0 <= trim_p < 0.5:
        raise ValueError("trim fraction must lie in [0, 0.5)")
    x, y = sample.digital, sample.real
    if len(sample) <= k:
        raise EmptyInput("need more pairs than polynomial degree")
    coeffs = _polyfit_pairs(x, y, k)
    if trim_p > 0:
        resid = y - np.polyval(coeffs[::-1], x)
        order = np.argsort(resid, kind="stable")
        cut = int(round(trim_p * len(x)))
        keep = order[cut:len(x) - cut] if cut > 0 else order
        if keep.size <= k:
            raise EmptyInput("trimming left too few pairs")
        coeffs = _polyfit_pairs(x[keep], y[keep], k)
    return RelightParams(method="polynomial", space=space,
                         coeffs=tuple(float(c) for c in coeffs))


def fit_color_transfer(sample_per_channel, space: str = "lab") -> RelightParams:
    """Mean/std matching on the lighting channel(s).

    ``sample_per_channel`` is a list of PixelPairSample, one per affected
    channel: (L,) for lab, (S, V) for hsv.  The stored moments standardize
    the digital channel and rescale it to the real channel's statistics.
    """
    if space not in ("hsv", "lab"):
        raise ValueError("color transfer operates in hsv or lab")
    moments = []
    for ch in sample_per_channel:
        if len(ch) < 2:
            raise EmptyInput("need at least two pairs per channel")
        sm, ss = float(np.mean(ch.digital)), float(np.std(ch.digital))
        dm, ds = float(np.mean(ch.real)), float(np.std(ch.real))
        if ss == 0.0:
            raise ZeroVariance("source channel has zero standard deviation")
        moments.append((sm, ss, dm, ds))
    return RelightParams(method="color-transfer", space=space,
                         transfer=tuple(moments))


# ---------------------------------------------------------------------------
# Color conversions (vectorized; LAB under D65, sRGB companding).

_XYZ_FROM_RGB = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_RGB_FROM_XYZ = np.linalg.inv(_XYZ_FROM_RGB)
_D65 = np.array([0.95047, 1.0, 1.08883])


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """RGB in [0,1] -> HSV with H in [0,1) (fraction of a turn)."""
    img = np.asarray(img, dtype=float)
    mx = img.max(axis=-1)
    mn = img.min(axis=-1)
    c = mx - mn
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    h = np.zeros_like(mx)
    with np.errstate(divide="ignore", invalid="ignore"):
        hr = ((g - b) / c) % 6.0
        hg = (b - r) / c + 2.0
        hb = (r - g) / c + 4.0
    nz = c > 0
    h[nz & (mx == r)] = hr[nz & (mx == r)]
    h[nz & (mx == g) & (mx != r)] = hg[nz & (mx == g) & (mx != r)]
    h[nz & (mx == b) & (mx != r) & (mx != g)] = hb[nz & (mx == b) & (mx != r) & (mx != g)]
    h = h / 6.0
    s = np.where(mx > 0, c / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    h, s, v = img[..., 0], img[..., 1], img[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    # One row per sextant, columns r/g/b.
    table = np.stack([
        np.stack([v, t, p], axis=-1),
        np.stack([q, v, p], axis=-1),
        np.stack([p, v, t], axis=-1),
        np.stack([p, q, v], axis=-1),
        np.stack([t, p, v], axis=-1),
        np.stack([v, p, q], axis=-1),
    ], axis=0)
    return np.take_along_axis(table, i[None, ..., None], axis=0)[0]


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1.0 / 2.4) - 0.055)


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] -> CIELAB (L in [0,100]) under D65."""
    lin = _srgb_to_linear(np.asarray(img, dtype=float))
    xyz = lin @ _XYZ_FROM_RGB.T
    r = xyz / _D65
    eps = (6.0 / 29.0) ** 3
    f = np.where(r > eps, np.cbrt(r), r / (3.0 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    l = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([l, a, b], axis=-1)


def lab_to_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    l, a, b = img[..., 0], img[..., 1], img[..., 2]
    fy = (l + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    delta = 6.0 / 29.0
    r = np.where(f > delta, f ** 3, 3.0 * delta * delta * (f - 4.0 / 29.0))
    xyz = r * _D65
    lin = xyz @ _RGB_FROM_XYZ.T
    return np.clip(_linear_to_srgb(lin), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Application.

def _poly_eval(coeffs, x):
    return np.polyval(list(coeffs)[::-1], x)


def _apply_poly_rgb(patch: np.ndarray, coeffs) -> np.ndarray:
    # The fit was done on the per-pixel channel maximum; apply the fitted
    # scalar gain multiplicatively so hue is preserved.
    s = patch.max(axis=-1)
    target = _poly_eval(coeffs, s)
    gain = np.where(s > 1e-8, target / np.where(s > 1e-8, s, 1.0), 0.0)
    out = patch * gain[..., None]
    # Pixels that are exactly black carry no hue; give them the fitted
    # target value directly (matches the k=0 "constant offset" case).
    out[s <= 1e-8] = np.clip(target[s <= 1e-8, None], 0.0, 1.0)
    return out


def apply_relight(patch: np.ndarray, params: RelightParams) -> np.ndarray:
    """Apply a fitted photometric transform to an image, clipping to [0,1]."""
    patch = np.asarray(patch, dtype=float)
    if params.method == "none":
        return patch.copy()
    if params.method == "percentile":
        return np.clip(params.alpha * patch + params.beta, 0.0, 1.0)
    if params.method == "polynomial":
        if params.space == "rgb":
            return np.clip(_apply_poly_rgb(patch, params.coeffs), 0.0, 1.0)
        if params.space == "hsv":
            hsv = rgb_to_hsv(patch)
            hsv[..., 1] = np.clip(_poly_eval(params.coeffs, hsv[..., 1]), 0, 1)
            hsv[..., 2] = np.clip(_poly_eval(params.coeffs, hsv[..., 2]), 0, 1)
            return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
        lab = rgb_to_lab(patch)
        lab[..., 0] = np.clip(_poly_eval(params.coeffs, lab[..., 0] / 100.0) * 100.0,
                              0.0, 100.0)
        return np.clip(lab_to_rgb(lab), 0.0, 1.0)
    # color-transfer
    if params.space == "lab":
        lab = rgb_to_lab(patch)
        (sm, ss, dm, ds), = params.transfer
        lab[..., 0] = np.clip((lab[..., 0] - sm) / ss * ds + dm, 0.0, 100.0)
        return np.clip(lab_to_rgb(lab), 0.0, 1.0)
    hsv = rgb_to_hsv(patch)
    for ch, (sm, ss, dm, ds) in zip((1, 2), params.transfer):
        hsv[..., ch] = np.clip((hsv[..., ch] - sm) / ss * ds + dm, 0.0, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def apply_relight_vjp(patch: np.ndarray, params: RelightParams,
                      upstream: np.ndarray) -> np.ndarray:
    """Gradient of apply_relight with respect to the patch pixels.

    Clipping uses the projection convention: zero gradient where the
    pre-clip value saturates outside [0,1].  HSV/LAB methods route through
    non-differentiable channel logic and are not supported here; attacks
    use the RGB-space methods.
    """
    patch = np.asarray(patch, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    if params.method == "none":
        return upstream.copy()
    if params.method == "percentile":
        pre = params.alpha * patch + params.beta
        live = (pre >= 0.0) & (pre <= 1.0)
        return np.where(live, params.alpha * upstream, 0.0)
    if params.method == "polynomial" and params.space == "rgb":
        s = patch.max(axis=-1)
        target = _poly_eval(params.coeffs, s)
        deriv_coeffs = [j * c for j, c in enumerate(params.coeffs)][1:] or [0.0]
        tprime = np.polyval(deriv_coeffs[::-1], s)
        safe = s > 1e-8
        gain = np.where(safe, target / np.where(safe, s, 1.0), 0.0)
        # d(gain)/ds = (t'(s)s - t(s)) / s^2
        dgain = np.where(safe, (tprime * s - target) / np.where(safe, s * s, 1.0), 0.0)
        pre = patch * gain[..., None]
        live = (pre >= 0.0) & (pre <= 1.0)
        g = np.where(live, upstream, 0.0)
        grad = g * gain[..., None]
        # Extra term through s = max channel: only the argmax channel moves s.
        argmax = patch.argmax(axis=-1)
        extra = (g * patch).sum(axis=-1) * dgain
        idx = np.indices(argmax.shape)
        grad[(*idx, argmax)] += extra
        grad[~safe] = 0.0
        return grad
    raise NotImplementedError(
        f"gradient of relight method {params.method!r} in space "
        f"{params.space!r} is not supported")


def pooled_rgb_values(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """All three RGB channel values of the masked pixels, flattened."""
    image = np.asarray(image, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    vals = image[mask]
    if vals.size == 0:
        raise EmptyInput("mask selects no pixels")
    return vals.ravel()


def make_pixel_pairs(digital: np.ndarray, real: np.ndarray, mask: np.ndarray,
                     space: str = "rgb"):
    """Build the scalar pair sample(s) used by the polynomial/transfer fits.

    Returns a single PixelPairSample for rgb (per-pixel channel maximum)
    and lab (L/100), and a tuple (S, V) of samples for hsv.
    """
    digital = np.asarray(digital, dtype=float)
    real = np.asarray(real, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyInput("mask selects no pixels")
    if space == "rgb":
        return PixelPairSample(digital[mask].max(axis=-1), real[mask].max(axis=-1))
    if space == "hsv":
        dh = rgb_to_hsv(digital)[mask]
        rh = rgb_to_hsv(real)[mask]
        return (PixelPairSample(dh[:, 1], rh[:, 1]),
                PixelPairSample(dh[:, 2], rh[:, 2]))
    if space == "lab":
        dl = rgb_to_lab(digital)[mask][:, 0] / 100.0
        rl = rgb_to_lab(real)[mask][:, 0] / 100.0
        return PixelPairSample(dl, rl)
    raise ValueError(f"unknown color space {space!r}")
