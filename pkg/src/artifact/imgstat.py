"""Raster primitives: color conversion, masked statistics, small-kernel convolution.

Images are plain float64 numpy arrays with values in [0, 1]: shape ``(H, W)``
for gray and ``(H, W, 3)`` for RGB. Masks are boolean arrays of shape ``(H, W)``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import EmptyRegion, InvalidInput

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

# sRGB primaries, D65 white
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
D65_WHITE = _RGB_TO_XYZ.sum(axis=1)

LAPLACIAN_4 = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def as_image(img, channels: int | None = None) -> np.ndarray:
    """Validate and convert ``img`` to a float64 image array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        nch = 1
    elif arr.ndim == 3 and arr.shape[2] == 3:
        nch = 3
    else:
        raise InvalidInput(f"expected (H, W) or (H, W, 3) image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInput("image must be at least 1x1")
    if channels is not None and nch != channels:
        raise InvalidInput(f"expected {channels}-channel image, got {nch}")
    if not np.all((arr >= 0.0) & (arr <= 1.0)):
        raise InvalidInput("image values must lie in [0, 1]")
    return arr


def as_mask(mask, shape: tuple[int, int] | None = None) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise InvalidInput(f"mask must be 2-D, got shape {m.shape}")
    if shape is not None and m.shape != tuple(shape[:2]):
        raise InvalidInput(f"mask shape {m.shape} does not match image {tuple(shape[:2])}")
    return m


def as_kernel(k) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise InvalidInput(f"kernel must be square with odd side, got {k.shape}")
    return k


def rgb_to_gray(img) -> np.ndarray:
    arr = as_image(img, channels=3)
    return np.clip(arr @ GRAY_WEIGHTS, 0.0, 1.0)


def to_gray(img) -> np.ndarray:
    """Gray view of either a gray or an RGB image."""
    arr = as_image(img)
    return arr if arr.ndim == 2 else rgb_to_gray(arr)


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _lab_f(t: np.ndarray) -> np.ndarray:
    delta = 6.0 / 29.0
    return np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)


def rgb_to_lab(img) -> np.ndarray:
    """Convert an sRGB image to CIELAB (D65). Returns an ``(H, W, 3)`` array of L, a, b."""
    arr = as_image(img, channels=3)
    xyz = _srgb_to_linear(arr) @ _RGB_TO_XYZ.T
    f = _lab_f(xyz / D65_WHITE)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([np.clip(L, 0.0, 100.0), a, b], axis=-1)


def convolve2d(img, kernel) -> np.ndarray:
    """Correlate a gray image with an odd square kernel using replicate borders.

    ``out[y, x] = sum_{dy, dx} k[dy, dx] * img[clamp(y + dy - c), clamp(x + dx - c)]``.
    The result is not clamped.
    """
    field = np.asarray(img, dtype=np.float64)
    if field.ndim != 2:
        raise InvalidInput("convolve2d expects a single-channel field")
    k = as_kernel(kernel)
    c = k.shape[0] // 2
    padded = np.pad(field, c, mode="edge")
    h, w = field.shape
    out = np.zeros_like(field)
    for dy in range(k.shape[0]):
        for dx in range(k.shape[1]):
            if k[dy, dx] != 0.0:
                out += k[dy, dx] * padded[dy:dy + h, dx:dx + w]
    return out


def masked_moments(field, mask) -> tuple[float, float]:
    """Mean and population variance of ``field`` over the true pixels of ``mask``."""
    field = np.asarray(field, dtype=np.float64)
    m = as_mask(mask, field.shape)
    vals = field[m]
    if vals.size == 0:
        raise EmptyRegion("mask has no true pixels")
    mean = vals.mean()
    return float(mean), float(np.mean((vals - mean) ** 2))


def bounding_box(mask) -> tuple[slice, slice]:
    m = as_mask(mask)
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise EmptyRegion("mask has no true pixels")
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge-clamped
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    mat = np.zeros((n_out, n_in))
    mat[np.arange(n_out), lo] += 1.0 - frac
    mat[np.arange(n_out), hi] += frac
    return mat


def resize_bilinear(patch, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel sample centres and clamped edges."""
    patch = np.asarray(patch, dtype=np.float64)
    return _interp_matrix(patch.shape[0], out_h) @ patch @ _interp_matrix(patch.shape[1], out_w).T


# --- binary PNM I/O -------------------------------------------------------

def _read_pnm(path, magic: bytes) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidInput(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != magic:
        raise InvalidInput(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise InvalidInput(f"{path}: malformed header") from exc
    if maxval != 255:
        raise InvalidInput(f"{path}: maxval must be 255, got {maxval}")
    nch = 3 if magic == b"P6" else 1
    count = width * height * nch
    raw = np.frombuffer(data, dtype=np.uint8, count=count, offset=pos) if len(data) - pos >= count else None
    if raw is None:
        raise InvalidInput(f"{path}: truncated pixel data")
    shape = (height, width, 3) if nch == 3 else (height, width)
    return raw.reshape(shape)


def load_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5").astype(np.float64) / 255.0


def load_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6").astype(np.float64) / 255.0


def load_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P6":
        return load_ppm(path)
    if magic == b"P5":
        return load_pgm(path)
    raise InvalidInput(f"{path}: unsupported image format {magic!r}")


def load_mask(path) -> np.ndarray:
    return _read_pnm(path, b"P5") != 0


def save_pnm(path, img) -> None:
    """Write a gray (P5) or RGB (P6) image, quantizing [0, 1] to 8 bits."""
    arr = as_image(img)
    q = np.rint(arr * 255.0).astype(np.uint8)
    magic = b"P6" if arr.ndim == 3 else b"P5"
    header = b"%s\n%d %d\n255\n" % (magic, arr.shape[1], arr.shape[0])
    Path(path).write_bytes(header + q.tobytes())


def save_mask(path, mask) -> None:
    m = as_mask(mask)
    header = b"P5\n%d %d\n255\n" % (m.shape[1], m.shape[0])
    Path(path).write_bytes(header + (m.astype(np.uint8) * 255).tobytes())
