"""Image I/O, pixel<->tensor conversion, synthetic degradations and PSNR.

Images are (H, W, 3) uint8 arrays.  All degradations are deterministic given
(spec, seed) and are applied in float with a final round + clip back to u8.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError

PSNR_IDENTICAL = 99.0  # sentinel for a zero-MSE pair

# ITU-T81 Annex K luminance quantization table, row major.
_BASE_QUANT = np.array(
    [
        16, 11, 10, 16, 24, 40, 51, 61,
        12, 12, 14, 19, 26, 58, 60, 55,
        14, 13, 16, 24, 40, 57, 69, 56,
        14, 17, 22, 29, 51, 87, 80, 62,
        18, 22, 37, 56, 68, 109, 103, 77,
        24, 35, 55, 64, 81, 104, 113, 92,
        49, 64, 78, 87, 103, 121, 120, 101,
        72, 92, 95, 98, 112, 100, 103, 99,
    ],
    dtype=np.int64,
).reshape(8, 8)


def image_u8(arr) -> np.ndarray:
    img = np.asarray(arr)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ShapeError(f"images are (H, W, 3) uint8, got {img.shape} {img.dtype}")
    return img


@dataclass
class DegradationSpec:
    """One synthetic degradation: gaussian_noise(std) | gaussian_blur(sigma)
    | dct_quantize(quality)."""

    kind: str
    param: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian_noise", "gaussian_blur", "dct_quantize", "none"):
            raise DataError(f"unknown degradation kind {self.kind!r}")
        if self.kind == "dct_quantize" and not 1 <= self.param <= 100:
            raise DataError("dct_quantize quality must be in [1, 100]")
        if self.kind in ("gaussian_noise", "gaussian_blur") and self.param < 0:
            raise DataError(f"{self.kind} intensity must be >= 0")


def apply_degradation(img: np.ndarray, spec: DegradationSpec, index: int = 0) -> np.ndarray:
    """Degrade one image; `index` selects an independent per-image noise stream."""
    img = image_u8(img)
    if spec.kind == "none":
        return img.copy()
    if spec.kind == "gaussian_noise":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((spec.seed, index))))
        return add_gaussian_noise(img, spec.param, rng)
    if spec.kind == "gaussian_blur":
        return gaussian_blur(img, spec.param)
    return dct_quantize(img, int(spec.param))


def add_gaussian_noise(img: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    """Per-pixel i.i.d. normal noise in 8-bit units, rounded and clipped."""
    img = image_u8(img)
    if std < 0:
        raise DataError("noise std must be >= 0")
    if std == 0:
        return img.copy()
    noisy = img.astype(np.float64) + rng.normal(0.0, std, size=img.shape)
    return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-d Gaussian taps with radius ceil(3*sigma)."""
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur_f64(plane: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur of one float plane, reflect edge handling."""
    if sigma == 0:
        return plane.astype(np.float64).copy()
    k = gaussian_kernel(sigma)
    r = (len(k) - 1) // 2
    out = plane.astype(np.float64)
    for axis in (0, 1):
        moved = np.moveaxis(out, axis, 0)
        padded = np.pad(moved, [(r, r)] + [(0, 0)] * (moved.ndim - 1), mode="reflect")
        acc = np.zeros_like(moved)
        for i, kv in enumerate(k):
            acc += kv * padded[i:i + moved.shape[0]]
        out = np.moveaxis(acc, 0, axis)
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    img = image_u8(img)
    if sigma < 0:
        raise DataError("blur sigma must be >= 0")
    if sigma == 0:
        return img.copy()
    out = gaussian_blur_f64(img.astype(np.float64), sigma)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def quant_table(quality: int) -> np.ndarray:
    """Luminance table scaled by the libjpeg quality rule."""
    if not 1 <= quality <= 100:
        raise DataError("quality must be in [1, 100]")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    q = (_BASE_QUANT * scale + 50) // 100
    return np.clip(q, 1, 255).astype(np.float64)


_DCT_BASIS = None


def _dct_basis() -> np.ndarray:
    global _DCT_BASIS
    if _DCT_BASIS is None:
        d = np.zeros((8, 8), dtype=np.float64)
        for u in range(8):
            cu = 1.0 / math.sqrt(2.0) if u == 0 else 1.0
            for x in range(8):
                d[u, x] = 0.5 * cu * math.cos((2 * x + 1) * u * math.pi / 16.0)
        _DCT_BASIS = d
    return _DCT_BASIS


def dct_quantize(img: np.ndarray, quality: int) -> np.ndarray:
    """Blockwise 8x8 DCT quantization artifacts (no codec, no subsampling).

    Mimics the lossy part of JPEG: level shift, per-block DCT, division by
    the quality-scaled luminance table with rounding, dequantization and
    inverse DCT, independently per channel.
    """
    img = image_u8(img)
    q = quant_table(quality)
    d = _dct_basis()
    h, w, _ = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = img.astype(np.float64) - 128.0
    if ph or pw:
        x = np.pad(x, ((0, ph), (0, pw), (0, 0)), mode="edge")
    hh, ww = x.shape[:2]
    blocks = x.transpose(2, 0, 1).reshape(3, hh // 8, 8, ww // 8, 8)
    blocks = blocks.transpose(0, 1, 3, 2, 4).reshape(-1, 8, 8)
    coef = np.einsum("ux,nxy,vy->nuv", d, blocks, d, optimize=True)
    coef = np.rint(coef / q) * q
    rec = np.einsum("xu,nuv,yv->nxy", d.T, coef, d.T, optimize=True)
    rec = rec.reshape(3, hh // 8, ww // 8, 8, 8).transpose(0, 1, 3, 2, 4)
    rec = rec.reshape(3, hh, ww).transpose(1, 2, 0)[:h, :w]
    return np.clip(np.rint(rec + 128.0), 0, 255).astype(np.uint8)


# ---- metrics ---------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(255^2 / MSE) over all RGB channels of two u8 images."""
    a, b = image_u8(a), image_u8(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr needs matching shapes, got {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(255.0 ** 2 / mse)


def psnr_float(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """PSNR of two float arrays (used by analytic, unclipped checks)."""
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak ** 2 / mse)


# ---- pixel <-> tensor ------------------------------------------------


def to_unit_tensor(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(H, W, 3) u8 -> (3, H, W) float in [-1, 1] via v/127.5 - 1."""
    img = image_u8(img)
    return np.ascontiguousarray(
        img.transpose(2, 0, 1).astype(dtype) / dtype(127.5) - dtype(1.0)
    )


def from_unit_tensor(t: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [-1, 1] -> (H, W, 3) u8 with round + clip."""
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ShapeError("from_unit_tensor expects a single image")
        t = t[0]
    if t.ndim != 3 or t.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W), got {t.shape}")
    v = (np.asarray(t, np.float64) + 1.0) * 127.5
    return np.clip(np.rint(v), 0, 255).astype(np.uint8).transpose(1, 2, 0)


# ---- PPM (P6) --------------------------------------------------------


def ppm_write(path: str, img: np.ndarray):
    img = image_u8(img)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def ppm_read(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def fail(msg):
        raise DataError(f"{path}: {msg} (byte offset {pos})")

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            fail("truncated header")
        return data[start:pos]

    if token() != b"P6":
        fail("not a P6 PPM")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError:
        fail("malformed header integer")
    if maxval != 255:
        fail(f"unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    payload = data[pos:pos + need]
    if len(payload) != need:
        fail(f"payload truncated: need {need} bytes, have {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def load_folder(folder: str, limit: int | None = None) -> list[np.ndarray]:
    """All .ppm images in a folder, sorted by filename."""
    if not os.path.isdir(folder):
        raise DataError(f"not a directory: {folder}")
    names = sorted(n for n in os.listdir(folder) if n.endswith(".ppm"))
    if limit is not None:
        names = names[:limit]
    if not names:
        raise DataError(f"no .ppm images in {folder}")
    return [ppm_read(os.path.join(folder, n)) for n in names]


def list_ppm(folder: str) -> list[str]:
    if not os.path.isdir(folder):
        raise DataError(f"not a directory: {folder}")
    return sorted(n for n in os.listdir(folder) if n.endswith(".ppm"))


# ---- geometry --------------------------------------------------------


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    img = image_u8(img)
    h, w, _ = img.shape
    if h < size or w < size:
        raise DataError(f"image {h}x{w} smaller than crop {size}")
    y, x = (h - size) // 2, (w - size) // 2
    return img[y:y + size, x:x + size].copy()


def bilinear_resize(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Bilinear resize of a u8 image (align-corners-false convention)."""
    img = image_u8(img)
    h, w, _ = img.shape
    if (h, w) == (oh, ow):
        return img.copy()
    ys = (np.arange(oh, dtype=np.float64) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow, dtype=np.float64) + 0.5) * w / ow - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    p = img.astype(np.float64)
    top = p[y0][:, x0] * (1 - fx) + p[y0][:, x1] * fx
    bot = p[y1][:, x0] * (1 - fx) + p[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# ---- synthetic clean images -----------------------------------------


def synthetic_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """A smooth random texture patch spanning the full 8-bit range.

    Octaves of bilinearly upsampled value noise plus a color cast; contrast
    is stretched so the pixel distribution resembles a natural photo crop
    (significant mass near both ends of the range).
    """
    acc = np.zeros((size, size), dtype=np.float64)
    amp, cell = 1.0, size
    while cell >= 4:
        g = rng.standard_normal((max(2, size // cell) + 1,) * 2)
        gi = _upsample_bilinear(g, size)
        acc += amp * gi
        amp *= 0.55
        cell //= 2
    acc -= acc.mean()
    acc /= max(acc.std(), 1e-9)
    # gentle S-curve, then push toward the ends of the range
    lum = np.tanh(0.8 * acc)
    lum = (lum - lum.min()) / max(lum.max() - lum.min(), 1e-9)
    cast = rng.uniform(-0.18, 0.18, size=3)
    gain = rng.uniform(0.9, 1.2)
    img = np.empty((size, size, 3), dtype=np.float64)
    for c in range(3):
        chan = (lum - 0.5) * gain + 0.5 + cast[c]
        img[:, :, c] = chan
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _upsample_bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    gh, gw = grid.shape
    ys = np.linspace(0, gh - 1, size)
    xs = np.linspace(0, gw - 1, size)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bot = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def make_texture_corpus(folder: str, count: int, size: int, seed: int,
                        prefix: str = "tex") -> list[str]:
    """Write `count` deterministic texture patches as PPM files."""
    os.makedirs(folder, exist_ok=True)
    paths = []
    for i in range(count):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, i))))
        img = synthetic_texture(size, rng)
        path = os.path.join(folder, f"{prefix}_{i:04d}.ppm")
        ppm_write(path, img)
        paths.append(path)
    return paths
