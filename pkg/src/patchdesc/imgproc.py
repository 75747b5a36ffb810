"""Pixel-level preprocessing: image I/O, CLAHE, blurring, homography warps.

Images are 2-D float32 arrays of shape (height, width) with intensities in
[0, 1]; 8-bit files are scaled on load and quantized round-half-up on save.
Homographies are 3x3 float64 matrices with h[2][2] normalized to 1 whenever
it is nonzero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError, GeometryError, ParameterError
from .util import dequantize_u8, quantize_u8

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
HIST_BINS = 256


def as_gray(img: np.ndarray) -> np.ndarray:
    """Validate and return an image as a 2-D float32 array in [0, 1]."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ParameterError(f"expected a 2-D image, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ParameterError("image contains non-finite intensities")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ParameterError("intensities must lie in [0, 1]")
    return arr


# ---------------------------------------------------------------------------
# I/O

def load_image(path: str) -> np.ndarray:
    """Load an 8-bit PNG or binary PGM (P5) as a grayscale image.

    Color inputs are converted to luma with weights (0.299, 0.587, 0.114).

    Raises:
        OSError: unreadable file.
        FormatError: unsupported bit depth or malformed contents.
    """
    if str(path).lower().endswith(".pgm"):
        return _load_pgm(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "F"):
                raise FormatError(f"unsupported bit depth (mode {mode}) in {path}")
            if mode in ("1", "LA"):
                im = im.convert("L")
            elif mode == "P":
                im = im.convert("RGB")
            arr = np.asarray(im)
    except UnidentifiedImageError as exc:
        raise FormatError(f"not a recognized image file: {path}") from exc
    if arr.ndim == 2:
        return dequantize_u8(arr)
    rgb = arr[..., :3].astype(np.float64) / 255.0
    gray = rgb @ np.asarray(LUMA_WEIGHTS, dtype=np.float64)
    return np.clip(gray, 0.0, 1.0).astype(np.float32)


def _load_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            ch = data[pos:pos + 1]
            if ch == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"truncated PGM header in {path}")
        return data[start:pos]

    magic = next_token()
    if magic != b"P5":
        raise FormatError(f"expected binary PGM magic P5, got {magic!r} in {path}")
    try:
        width, height, maxval = (int(next_token()) for _ in range(3))
    except ValueError as exc:
        raise FormatError(f"non-numeric PGM header field in {path}") from exc
    if width < 1 or height < 1:
        raise FormatError(f"bad PGM dimensions {width}x{height} in {path}")
    if maxval != 255:
        raise FormatError(f"unsupported bit depth (maxval {maxval}) in {path}")
    pos += 1  # single whitespace byte separates header from raster
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise FormatError(f"truncated PGM raster in {path}")
    return dequantize_u8(np.frombuffer(raster, dtype=np.uint8).reshape(height, width))


def save_image(img: np.ndarray, path: str) -> None:
    """Write an image as 8-bit PNG or binary PGM, chosen by extension."""
    arr = as_gray(img)
    raw = quantize_u8(arr)
    name = str(path).lower()
    if name.endswith(".pgm"):
        header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(raw.tobytes())
    elif name.endswith(".png"):
        Image.fromarray(raw, mode="L").save(path, format="PNG")
    else:
        raise ParameterError(f"unsupported image extension: {path}")


def read_homographies(path: str) -> list[np.ndarray]:
    """Read homographies: 9 whitespace-separated decimals per line, row-major."""
    mats = []
    with open(path, "r", encoding="ascii") as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 9:
                raise FormatError(f"{path}:{ln}: expected 9 values, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise FormatError(f"{path}:{ln}: non-numeric value") from exc
            mats.append(np.asarray(vals, dtype=np.float64).reshape(3, 3))
    return mats


def write_homographies(mats, path: str) -> None:
    """Write homographies, one row-major 3x3 matrix per line."""
    with open(path, "w", encoding="ascii") as fh:
        for h in mats:
            m = np.asarray(h, dtype=np.float64).reshape(3, 3)
            fh.write(" ".join(f"{v:.17g}" for v in m.ravel()) + "\n")


# ---------------------------------------------------------------------------
# CLAHE

def clahe(img: np.ndarray, clip_limit: float = 2.0, tiles: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    Per-tile histograms (256 bins) are clipped at clip_limit times the
    uniform level, the excess is redistributed uniformly, and each pixel is
    mapped by bilinear interpolation between the mappings of the four
    nearest tile centers. Images whose sides the grid does not divide are
    edge-padded and cropped back. A tile whose histogram occupies a single
    bin has no contrast to equalize and keeps its values unchanged.

    Args:
        img: grayscale image.
        clip_limit: histogram clip factor, >= 1.
        tiles: grid as (rows, cols).

    Returns:
        Equalized image, same shape, values in [0, 1].
    """
    arr = as_gray(img)
    ty, tx = int(tiles[0]), int(tiles[1])
    if ty < 1 or tx < 1:
        raise ParameterError(f"tile grid must be positive, got {tiles}")
    if clip_limit < 1.0:
        raise ParameterError(f"clip_limit must be >= 1, got {clip_limit}")
    h, w = arr.shape
    if h < ty or w < tx:
        raise ParameterError(f"image {w}x{h} smaller than tile grid {tx}x{ty}")

    th = (h + ty - 1) // ty
    tw = (w + tx - 1) // tx
    ph, pw = ty * th, tx * tw
    padded = np.pad(arr, ((0, ph - h), (0, pw - w)), mode="edge") if (ph, pw) != (h, w) else arr

    bins = quantize_u8(padded).astype(np.intp)
    npix = th * tw
    clip = clip_limit * npix / HIST_BINS

    luts = np.empty((ty, tx, HIST_BINS), dtype=np.float64)
    identity = np.zeros((ty, tx), dtype=bool)
    for r in range(ty):
        for c in range(tx):
            hist = np.bincount(
                bins[r * th:(r + 1) * th, c * tw:(c + 1) * tw].ravel(),
                minlength=HIST_BINS,
            ).astype(np.float64)
            if np.count_nonzero(hist) <= 1:
                identity[r, c] = True
                luts[r, c] = np.arange(HIST_BINS, dtype=np.float64) / 255.0
                continue
            excess = np.maximum(hist - clip, 0.0).sum()
            clipped = np.minimum(hist, clip) + excess / HIST_BINS
            luts[r, c] = np.cumsum(clipped) / npix

    if identity.all():
        return arr.copy()

    r0, r1, fy = _center_interp(np.arange(ph), ty, th)
    c0, c1, fx = _center_interp(np.arange(pw), tx, tw)
    r0g, r1g = r0[:, None], r1[:, None]
    c0g, c1g = c0[None, :], c1[None, :]
    fyg, fxg = fy[:, None], fx[None, :]

    m00 = luts[r0g, c0g, bins]
    m01 = luts[r0g, c1g, bins]
    m10 = luts[r1g, c0g, bins]
    m11 = luts[r1g, c1g, bins]
    out = ((1 - fyg) * ((1 - fxg) * m00 + fxg * m01)
           + fyg * ((1 - fxg) * m10 + fxg * m11))
    return np.clip(out[:h, :w], 0.0, 1.0).astype(np.float32)


def _center_interp(coords: np.ndarray, n_tiles: int, tile: int):
    """Neighbor tile indices and blend weight along one axis.

    Tile centers sit at r*tile + (tile-1)/2; pixels beyond the outermost
    centers clamp to the edge tile's mapping.
    """
    centers = np.arange(n_tiles) * tile + (tile - 1) / 2.0
    hi = np.searchsorted(centers, coords, side="left")
    lo = hi - 1
    lo = np.clip(lo, 0, n_tiles - 1)
    hi = np.clip(hi, 0, n_tiles - 1)
    span = centers[hi] - centers[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(span > 0, (coords - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, np.clip(frac, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Blurring

def box_blur(img: np.ndarray, k: int) -> np.ndarray:
    """Normalized k-by-k mean filter with clamp-to-border replication.

    Even k anchors at index floor(k/2): the window spans offsets
    -floor(k/2) .. k-1-floor(k/2) around each pixel.
    """
    arr = as_gray(img)
    k = int(k)
    if k < 1:
        raise ParameterError(f"kernel side must be >= 1, got {k}")
    h, w = arr.shape
    if k > min(h, w):
        raise ParameterError(f"kernel {k} exceeds image side min({w},{h})")
    if k == 1:
        return arr.copy()
    a = k // 2
    padded = np.pad(arr, ((a, k - 1 - a), (a, k - 1 - a)), mode="edge").astype(np.float64)
    ii = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(padded, axis=0), axis=1, out=ii[1:, 1:])
    sums = ii[k:, k:] - ii[:-k, k:] - ii[k:, :-k] + ii[:-k, :-k]
    return np.clip(sums / (k * k), 0.0, 1.0).astype(np.float32)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian filter (radius 3*sigma) with edge replication."""
    arr = as_gray(img)
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    out = arr.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        for i, kv in enumerate(kernel):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(i, i + out.shape[axis])
            acc += kv * padded[tuple(sl)]
        out = acc
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Homographies

def check_homography(h: np.ndarray) -> np.ndarray:
    """Validate a 3x3 homography and return it canonicalized (h22 == 1)."""
    m = np.asarray(h, dtype=np.float64)
    if m.shape != (3, 3):
        raise ParameterError(f"homography must be 3x3, got {m.shape}")
    det = np.linalg.det(m)
    if not np.isfinite(det) or abs(det) <= 1e-12:
        raise GeometryError("homography is singular or nearly singular")
    if m[2, 2] != 0.0 and m[2, 2] != 1.0:
        m = m / m[2, 2]
    return m


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Map 2-D points through a homography with perspective divide.

    Args:
        h: 3x3 matrix.
        pts: point (2,) or array of points (..., 2), as (x, y).

    Returns:
        Mapped points, same shape as pts, float64.

    Raises:
        GeometryError: the projective denominator vanishes at some point.
    """
    m = np.asarray(h, dtype=np.float64)
    p = np.asarray(pts, dtype=np.float64)
    single = p.ndim == 1
    p2 = np.atleast_2d(p)
    denom = m[2, 0] * p2[..., 0] + m[2, 1] * p2[..., 1] + m[2, 2]
    if np.any(np.abs(denom) < 1e-12):
        raise GeometryError("projective denominator vanishes")
    x = (m[0, 0] * p2[..., 0] + m[0, 1] * p2[..., 1] + m[0, 2]) / denom
    y = (m[1, 0] * p2[..., 0] + m[1, 1] * p2[..., 1] + m[1, 2]) / denom
    out = np.stack([x, y], axis=-1)
    return out[0] if single else out


def warp(img: np.ndarray, h: np.ndarray, out_width: int, out_height: int,
         fill: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Warp an image by a homography using inverse bilinear mapping.

    Each output pixel (x, y) samples the source at H^-1 (x, y). Samples
    whose continuous source coordinates fall outside [0, W-1] x [0, H-1]
    take the fill value and are marked invalid in the mask.

    Returns:
        (warped, mask): float32 image of shape (out_height, out_width) and
        a boolean validity mask of the same shape.
    """
    arr = as_gray(img)
    m = check_homography(h)
    hinv = np.linalg.inv(m)
    sh, sw = arr.shape
    xs = np.arange(int(out_width), dtype=np.float64)
    ys = np.arange(int(out_height), dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    denom = hinv[2, 0] * gx + hinv[2, 1] * gy + hinv[2, 2]
    ok = np.abs(denom) > 1e-12
    safe = np.where(ok, denom, 1.0)
    sx = (hinv[0, 0] * gx + hinv[0, 1] * gy + hinv[0, 2]) / safe
    sy = (hinv[1, 0] * gx + hinv[1, 1] * gy + hinv[1, 2]) / safe
    valid = ok & (sx >= 0.0) & (sx <= sw - 1.0) & (sy >= 0.0) & (sy <= sh - 1.0)
    out = bilinear_sample(arr, sx, sy)
    out[~valid] = np.float32(fill)
    return out, valid


def bilinear_sample(arr: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Bilinearly sample arr at continuous (sx, sy); coordinates are clipped."""
    sh, sw = arr.shape
    cx = np.clip(sx, 0.0, sw - 1.0)
    cy = np.clip(sy, 0.0, sh - 1.0)
    x0 = np.floor(cx).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    x1 = np.minimum(x0 + 1, sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    fx = (cx - x0).astype(np.float32)
    fy = (cy - y0).astype(np.float32)
    top = (1 - fx) * arr[y0, x0] + fx * arr[y0, x1]
    bot = (1 - fx) * arr[y1, x0] + fx * arr[y1, x1]
    return ((1 - fy) * top + fy * bot).astype(np.float32)


@dataclass(frozen=True)
class TransformRanges:
    """Which factors random_homography draws, and from which ranges."""
    rotation: bool = True
    scale: bool = True
    translation: bool = True
    angles_deg: tuple[float, ...] = (5.0, 10.0, 15.0)
    scale_factors: tuple[float, ...] = (0.9, 0.95, 1.05, 1.1, 1.15)
    max_shift: float = 8.0


def random_homography(rng: np.random.Generator, center: tuple[float, float],
                      ranges: TransformRanges = TransformRanges()) -> np.ndarray:
    """Draw a random similarity-style homography T*S*R about a center point.

    Rotation angle comes from ranges.angles_deg with a random sign, scale
    from ranges.scale_factors, and translation components uniformly from
    [-max_shift, +max_shift]; each factor is drawn only if enabled, in the
    order rotation, scale, translation.
    """
    if ranges.rotation and len(ranges.angles_deg) == 0:
        raise ParameterError("angles_deg must be non-empty when rotation is enabled")
    if ranges.scale and len(ranges.scale_factors) == 0:
        raise ParameterError("scale_factors must be non-empty when scale is enabled")
    theta = 0.0
    factor = 1.0
    shift = (0.0, 0.0)
    if ranges.rotation:
        mag = float(ranges.angles_deg[rng.integers(len(ranges.angles_deg))])
        sign = 1.0 if rng.integers(2) == 1 else -1.0
        theta = math.radians(sign * mag)
    if ranges.scale:
        factor = float(ranges.scale_factors[rng.integers(len(ranges.scale_factors))])
    if ranges.translation:
        shift = tuple(rng.uniform(-ranges.max_shift, ranges.max_shift, size=2))

    cx, cy = float(center[0]), float(center[1])
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rot = np.array([[cos_t, -sin_t, 0.0], [sin_t, cos_t, 0.0], [0.0, 0.0, 1.0]])
    scl = np.diag([factor, factor, 1.0])
    to_origin = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    back = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    trans = np.array([[1.0, 0.0, shift[0]], [0.0, 1.0, shift[1]], [0.0, 0.0, 1.0]])
    h = trans @ back @ scl @ rot @ to_origin
    return h / h[2, 2]
