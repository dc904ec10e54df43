"""Image and mask helpers: bilinear resampling, PNG I/O and quality metrics.

Images are float64 arrays of shape (H, W, 3) with values in [0, 1]; masks are
(H, W) arrays in [0, 1] where "foreground" means ``mask > 0.5``.  Metrics work
on the 0-255 scale used throughout the harmonization literature.
"""

import struct

import numpy as np
from PIL import Image as PILImage

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2


def check_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image has a zero dimension")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def check_mask(mask, shape=None):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 3 and mask.shape[2] == 1:
        mask = mask[..., 0]
    if mask.ndim != 2:
        raise ValueError(f"expected an (H, W) mask, got shape {mask.shape}")
    if shape is not None and mask.shape != tuple(shape[:2]):
        raise ValueError(f"mask shape {mask.shape} does not match image {tuple(shape[:2])}")
    return mask


# ------------------------------------------------------------------ resizing

def _axis_taps(n_in, n_out, pos):
    """Two-tap bilinear sampling along one axis (pixel centres, edge clamped)."""
    src = (pos + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def sample_resized(img, out_h, out_w, rows, cols):
    """Values of ``resize_bilinear(img, out_h, out_w)`` at the given output pixels only.

    ``img`` may be (H, W) or (H, W, C); ``rows``/``cols`` are equal-length
    integer arrays.  Only the requested pixels are computed, so sampling a
    handful of positions from a huge image costs nothing proportional to it.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("cannot resize an image with a zero dimension")
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be at least 1x1")
    y0, y1, fy = _axis_taps(h, out_h, np.asarray(rows, dtype=np.float64))
    x0, x1, fx = _axis_taps(w, out_w, np.asarray(cols, dtype=np.float64))
    if img.ndim == 3:
        fy = fy[:, None]
        fx = fx[:, None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize with the align-corners-false (pixel centre) convention.

    Works for (H, W) and (H, W, C) arrays.  No antialiasing is applied when
    shrinking; a resize to the same size returns an exact copy.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("cannot resize an image with a zero dimension")
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be at least 1x1")
    if (out_h, out_w) == img.shape[:2]:
        return img.copy()
    rows, cols = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    flat = sample_resized(img, out_h, out_w, rows.ravel(), cols.ravel())
    return flat.reshape((out_h, out_w) + img.shape[2:])


# ---------------------------------------------------------------------- I/O

def _png_bit_depth(path):
    with open(path, "rb") as fh:
        head = fh.read(29)
    if len(head) < 29 or head[:8] != b"\x89PNG\r\n\x1a\n" or head[12:16] != b"IHDR":
        return None
    return struct.unpack(">B", head[24:25])[0]


def load_png(path):
    """Load an 8-bit PNG as ``(image, alpha_mask_or_None)``.

    Grayscale inputs are replicated to three channels; an alpha channel, if
    present, is returned as the mask.
    """
    try:
        depth = _png_bit_depth(path)
        pil = PILImage.open(path)
        pil.load()
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if depth is not None and depth > 8:
        raise ValueError(f"{path}: unsupported bit depth {depth}")
    if pil.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
        raise ValueError(f"{path}: unsupported bit depth (mode {pil.mode})")
    alpha = None
    if pil.mode in ("RGBA", "LA") or (pil.mode == "P" and "transparency" in pil.info):
        rgba = np.asarray(pil.convert("RGBA"), dtype=np.float64) / 255.0
        img, alpha = rgba[..., :3], rgba[..., 3]
    else:
        img = np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(img), alpha


def load_mask(path):
    """Load a mask PNG: the alpha channel if present, else the luminance/first channel."""
    img, alpha = load_png(path)
    if alpha is not None:
        return alpha
    return img[..., 0].copy()


def quantize(img):
    """Clamp to [0, 1] and quantize to 8 bits with round-half-up."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def save_png(img, path):
    arr = np.asarray(img)
    if arr.ndim == 2:
        PILImage.fromarray(quantize(arr), mode="L").save(path)
    else:
        PILImage.fromarray(quantize(check_image(arr)), mode="RGB").save(path)


# ------------------------------------------------------------------ metrics

def _sq_err(a, b):
    a = check_image(a)
    b = check_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = (a - b) * 255.0
    return (d * d).reshape(-1, 3)


def mse(a, b):
    return float(_sq_err(a, b).reshape(-1).mean())


def fmse(a, b, mask):
    err = _sq_err(a, b)
    fg = (check_mask(mask, np.shape(a)) > 0.5).reshape(-1)
    if not fg.any():
        raise ValueError("fMSE needs at least one foreground pixel")
    return float(err[fg].reshape(-1).mean())


def psnr_from_mse(value, cap=PSNR_CAP):
    if value <= 0.0:
        return float(cap)
    return float(min(cap, 10.0 * np.log10(255.0 ** 2 / value)))


def psnr(a, b, cap=PSNR_CAP):
    return psnr_from_mse(mse(a, b), cap)


def _gaussian_taps(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(plane, taps):
    k = len(taps)
    rows = np.lib.stride_tricks.sliding_window_view(plane, k, axis=0) @ taps
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ taps


def ssim(a, b):
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    a = check_image(a) * 255.0
    b = check_image(b) * 255.0
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    taps = _gaussian_taps()
    scores = []
    for ch in range(3):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, taps), _filter_valid(y, taps)
        sxx = _filter_valid(x * x, taps) - mx * mx
        syy = _filter_valid(y * y, taps) - my * my
        sxy = _filter_valid(x * y, taps) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def metric_report(pred, target, mask=None):
    report = {"mse": mse(pred, target), "psnr": psnr(pred, target)}
    if mask is not None and np.any(check_mask(mask) > 0.5):
        report["fmse"] = fmse(pred, target, mask)
    if min(np.shape(pred)[:2]) >= SSIM_WINDOW:
        report["ssim"] = ssim(pred, target)
    return report
