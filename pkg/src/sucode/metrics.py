"""Full-reference (PSNR, SSIM) and no-reference (UCIQE, UIQM) image metrics.

All metrics take float RGB arrays in [0, 1].

PSNR uses peak 1.0 and caps at 100 dB (the zero-MSE convention).  SSIM runs
on BT.601 luminance with the canonical 11x11 Gaussian window (sigma 1.5),
K1=0.01, K2=0.03, valid-window reduction.

UCIQE = 0.4680 * sigma_chroma + 0.2745 * luma_contrast + 0.2576 * mean_sat
computed in CIELAB with L, a, b normalized to [0,1] / [-1,1]; luma contrast
is the 99th minus 1st luminance quantile and saturation is chroma / (L+1e-6).
The values reported by enhancement papers are this quantity times 100; the
`scaled` flag applies that display factor, unscaled is canonical.

UIQM = 0.0282 * UICM + 0.2953 * UISM + 3.5753 * UIConM with
UICM  : asymmetric alpha-trimmed (0.1, 0.1) color statistics of RG / YB,
        -0.0268 * sqrt(mu_RG^2 + mu_YB^2) + 0.1586 * sqrt(var_RG + var_YB)
UISM  : Sobel-edge-weighted EME over 8x8 blocks, BT.601 channel weights
UIConM: log-contrast (t/b) * log(t/b) over 8x8 blocks of luminance.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from .data import load_image
from .errors import EvalEmptyError, SampleInvalid, ShapeError

PSNR_CAP_DB = 100.0

UCIQE_COEFFS = (0.4680, 0.2745, 0.2576)
UIQM_COEFFS = (0.0282, 0.2953, 3.5753)
_BLOCK = 8
_LUMA = (0.299, 0.587, 0.114)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    _check_pair(a, b)
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB)


def _luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return _LUMA[0] * img[..., 0] + _LUMA[1] * img[..., 1] + _LUMA[2] * img[..., 2]


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    _check_pair(a, b)
    x = _luminance(a)
    y = _luminance(b)
    if min(x.shape) < 11:
        raise ShapeError(f"image {x.shape} smaller than the 11x11 SSIM window")
    window = _gaussian_window()
    k1, k2, peak = 0.01, 0.03, 1.0
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2

    mu_x = signal.convolve2d(x, window, mode="valid")
    mu_y = signal.convolve2d(y, window, mode="valid")
    xx = signal.convolve2d(x * x, window, mode="valid") - mu_x ** 2
    yy = signal.convolve2d(y * y, window, mode="valid") - mu_y ** 2
    xy = signal.convolve2d(x * y, window, mode="valid") - mu_x * mu_y

    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


# sRGB (D65) -> XYZ; white point taken as the matrix row sums so that pure
# gray maps to exactly zero chroma
_RGB2XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_WHITE = _RGB2XYZ.sum(axis=1)


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] -> CIELAB (L in [0,100], a/b roughly in [-128,128])."""
    rgb = np.asarray(img, dtype=np.float64)
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB2XYZ.T / _WHITE
    eps = (6.0 / 29.0) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz),
                 xyz / (3.0 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def uciqe(img: np.ndarray, scaled: bool = False) -> float:
    lab = rgb_to_lab(img)
    lum = lab[..., 0] / 100.0
    a = lab[..., 1] / 128.0
    b = lab[..., 2] / 128.0
    chroma = np.sqrt(a ** 2 + b ** 2)
    sigma_chroma = float(np.std(chroma))
    contrast = float(np.quantile(lum, 0.99) - np.quantile(lum, 0.01))
    saturation = float(np.mean(chroma / (lum + 1e-6)))
    c1, c2, c3 = UCIQE_COEFFS
    value = c1 * sigma_chroma + c2 * contrast + c3 * saturation
    return value * 100.0 if scaled else value


def _alpha_trimmed_mean(x: np.ndarray, alpha_l: float = 0.1,
                        alpha_r: float = 0.1) -> float:
    xs = np.sort(x.ravel())
    k = xs.size
    lo = int(np.ceil(alpha_l * k))
    hi = k - int(np.floor(alpha_r * k))
    return float(np.mean(xs[lo:hi]))


def _uicm(img: np.ndarray) -> float:
    rg = img[..., 0].astype(np.float64) - img[..., 1]
    yb = 0.5 * (img[..., 0].astype(np.float64) + img[..., 1]) - img[..., 2]
    mu_rg = _alpha_trimmed_mean(rg)
    mu_yb = _alpha_trimmed_mean(yb)
    var_rg = float(np.mean((rg - mu_rg) ** 2))
    var_yb = float(np.mean((yb - mu_yb) ** 2))
    return (-0.0268 * np.sqrt(mu_rg ** 2 + mu_yb ** 2)
            + 0.1586 * np.sqrt(var_rg + var_yb))


def _sobel_magnitude(channel: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(channel, axis=0, mode="reflect")
    gy = ndimage.sobel(channel, axis=1, mode="reflect")
    return np.hypot(gx, gy)


def _eme(channel: np.ndarray, block: int = _BLOCK) -> float:
    h, w = channel.shape
    k1, k2 = h // block, w // block
    if k1 == 0 or k2 == 0:
        return 0.0
    total = 0.0
    for i in range(k1):
        for j in range(k2):
            patch = channel[i * block:(i + 1) * block, j * block:(j + 1) * block]
            lo, hi = float(patch.min()), float(patch.max())
            if lo <= 0.0 or hi <= 0.0:
                continue
            total += np.log(hi / lo)
    return 2.0 / (k1 * k2) * total


def _uism(img: np.ndarray) -> float:
    value = 0.0
    for ch, weight in enumerate(_LUMA):
        channel = img[..., ch].astype(np.float64)
        edge = _sobel_magnitude(channel) * channel
        value += weight * _eme(edge)
    return value


def _uiconm(img: np.ndarray, block: int = _BLOCK) -> float:
    gray = _luminance(img)
    h, w = gray.shape
    k1, k2 = h // block, w // block
    if k1 == 0 or k2 == 0:
        return 0.0
    total = 0.0
    for i in range(k1):
        for j in range(k2):
            patch = gray[i * block:(i + 1) * block, j * block:(j + 1) * block]
            lo, hi = float(patch.min()), float(patch.max())
            top, bot = hi - lo, hi + lo
            if top <= 0.0 or bot <= 0.0:
                continue
            total += (top / bot) * np.log(top / bot)
    return -1.0 / (k1 * k2) * total


def uiqm(img: np.ndarray) -> float:
    c1, c2, c3 = UIQM_COEFFS
    return c1 * _uicm(img) + c2 * _uism(img) + c3 * _uiconm(img)


@dataclass
class EvalRow:
    id: str
    psnr: float | None = None
    ssim: float | None = None
    uciqe: float = 0.0
    uiqm: float = 0.0


@dataclass
class EvalReport:
    rows: list[EvalRow]
    has_reference: bool

    def aggregate(self) -> EvalRow:
        mean = EvalRow(id="mean", uciqe=float(np.mean([r.uciqe for r in self.rows])),
                       uiqm=float(np.mean([r.uiqm for r in self.rows])))
        if self.has_reference:
            mean.psnr = float(np.mean([r.psnr for r in self.rows]))
            mean.ssim = float(np.mean([r.ssim for r in self.rows]))
        return mean

    def _columns(self) -> list[str]:
        if self.has_reference:
            return ["id", "psnr", "ssim", "uciqe", "uiqm"]
        return ["id", "uciqe", "uiqm"]

    def to_csv(self) -> str:
        cols = self._columns()
        lines = [",".join(cols)]
        for row in self.rows + [self.aggregate()]:
            cells = [row.id] + [f"{getattr(row, c):.6f}" for c in cols[1:]]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        cols = self._columns()[1:]
        payload = {
            "rows": [
                {"id": r.id, **{c: getattr(r, c) for c in cols}} for r in self.rows
            ],
            "mean": {c: getattr(self.aggregate(), c) for c in cols},
        }
        return json.dumps(payload, indent=2)


def evaluate_dataset(pred_dir: str, ref_dir: str | None = None) -> EvalReport:
    """Score every prediction; reference columns only when refs are given."""
    if not os.path.isdir(pred_dir):
        raise EvalEmptyError(f"{pred_dir} is not a directory")
    names = sorted(n for n in os.listdir(pred_dir) if n.endswith(".png"))
    if not names:
        raise EvalEmptyError(f"no .png files under {pred_dir}")
    rows = []
    for name in names:
        pred = load_image(os.path.join(pred_dir, name))
        row = EvalRow(id=os.path.splitext(name)[0],
                      uciqe=uciqe(pred), uiqm=uiqm(pred))
        if ref_dir is not None:
            ref_path = os.path.join(ref_dir, name)
            if not os.path.isfile(ref_path):
                raise SampleInvalid(f"missing reference for {name}")
            ref = load_image(ref_path)
            row.psnr = psnr(pred, ref)
            row.ssim = ssim(pred, ref)
        rows.append(row)
    return EvalReport(rows=rows, has_reference=ref_dir is not None)
