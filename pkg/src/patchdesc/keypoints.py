"""Harris key-point detection and key-point file exchange.

One built-in detector keeps the pipeline self-contained; external detector
outputs can be plugged in through the CSV format instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError
from .imgproc import as_gray

KEYPOINT_HEADER = "x,y,response,scale"


@dataclass(frozen=True)
class KeyPoint:
    """Sub-pixel image location with detection strength."""
    x: float
    y: float
    response: float
    scale: float = 1.0


def kps_xy(kps) -> np.ndarray:
    """Stack key-point coordinates into an (n, 2) float64 array of (x, y)."""
    if len(kps) == 0:
        return np.zeros((0, 2), dtype=np.float64)
    return np.asarray([[kp.x, kp.y] for kp in kps], dtype=np.float64)


def _box3(a: np.ndarray) -> np.ndarray:
    """3x3 box smoothing with edge replication, no range clamping."""
    p = np.pad(a, 1, mode="edge")
    return (p[:-2, :-2] + p[:-2, 1:-1] + p[:-2, 2:]
            + p[1:-1, :-2] + p[1:-1, 1:-1] + p[1:-1, 2:]
            + p[2:, :-2] + p[2:, 1:-1] + p[2:, 2:]) / 9.0


def harris_response(img: np.ndarray, k: float = 0.04) -> np.ndarray:
    """Harris corner response R = det(M) - k*trace(M)^2 per pixel.

    M is the structure tensor of Sobel gradients smoothed with a 3x3 box.
    """
    arr = as_gray(img).astype(np.float64)
    p = np.pad(arr, 1, mode="edge")
    ix = ((p[:-2, 2:] - p[:-2, :-2]) + 2.0 * (p[1:-1, 2:] - p[1:-1, :-2])
          + (p[2:, 2:] - p[2:, :-2]))
    iy = ((p[2:, :-2] - p[:-2, :-2]) + 2.0 * (p[2:, 1:-1] - p[:-2, 1:-1])
          + (p[2:, 2:] - p[:-2, 2:]))
    a = _box3(ix * ix)
    b = _box3(iy * iy)
    c = _box3(ix * iy)
    trace = a + b
    return (a * b - c * c) - k * trace * trace


def detect_harris(img: np.ndarray, max_n: int = 200, k: float = 0.04,
                  nms_radius: int = 4, valid_mask=None) -> list[KeyPoint]:
    """Detect Harris corners with greedy non-maximum suppression.

    Candidates are pixels with positive response, visited in order of
    (-response, y, x); a candidate is kept iff no already-kept point lies
    within nms_radius in Chebyshev distance. Returns at most max_n points
    sorted by descending response. Deterministic for identical inputs.

    Args:
        img: Grayscale image.
        max_n: Maximum number of key-points returned.
        k: Harris corner coefficient.
        nms_radius: Chebyshev suppression radius in pixels.
        valid_mask: Optional boolean image of the same shape; pixels
            where it is False never become candidates.  Warped images
            need this so the artificial content/void boundary does not
            flood the ranking with spurious corners.
    """
    arr = as_gray(img)
    h, w = arr.shape
    if h < 32 or w < 32:
        raise ParameterError(f"image {w}x{h} too small for detection (needs >= 32x32)")
    if max_n < 0 or nms_radius < 0:
        raise ParameterError("max_n and nms_radius must be non-negative")
    resp = harris_response(arr, k=k)
    if valid_mask is not None:
        valid_mask = np.asarray(valid_mask, dtype=bool)
        if valid_mask.shape != arr.shape:
            raise ParameterError(
                f"valid_mask shape {valid_mask.shape} != image shape {arr.shape}")
        resp = np.where(valid_mask, resp, 0.0)
    ys, xs = np.nonzero(resp > 0.0)
    if ys.size == 0 or max_n == 0:
        return []
    rs = resp[ys, xs]
    order = np.lexsort((xs, ys, -rs))
    ys, xs, rs = ys[order], xs[order], rs[order]

    suppressed = np.zeros((h, w), dtype=bool)
    out: list[KeyPoint] = []
    r = int(nms_radius)
    for y, x, resp_v in zip(ys, xs, rs):
        if suppressed[y, x]:
            continue
        out.append(KeyPoint(float(x), float(y), float(resp_v)))
        if len(out) >= max_n:
            break
        suppressed[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1] = True
    return out


def filter_border(kps, width: int, height: int, margin: int = 64) -> list[KeyPoint]:
    """Keep key-points at least margin pixels away from every image border."""
    if margin < 0:
        raise ParameterError(f"margin must be >= 0, got {margin}")
    return [kp for kp in kps
            if margin <= kp.x < width - margin and margin <= kp.y < height - margin]


def write_keypoints(kps, path: str) -> None:
    """Write key-points as CSV with header x,y,response,scale (6 decimals)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(KEYPOINT_HEADER + "\n")
        for kp in kps:
            fh.write(f"{kp.x:.6f},{kp.y:.6f},{kp.response:.6f},{kp.scale:.6f}\n")


def read_keypoints(path: str) -> list[KeyPoint]:
    """Read key-points from CSV with header x,y,response,scale.

    Raises:
        FormatError: missing/odd header or malformed row, naming the line.
    """
    out: list[KeyPoint] = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != KEYPOINT_HEADER:
            raise FormatError(f"{path}:1: expected header '{KEYPOINT_HEADER}', got '{header}'")
        for ln, line in enumerate(fh, 2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != 4:
                raise FormatError(f"{path}:{ln}: expected 4 fields, got {len(parts)}")
            try:
                x, y, resp, scale = (float(p) for p in parts)
            except ValueError as exc:
                raise FormatError(f"{path}:{ln}: non-numeric field") from exc
            if resp < 0:
                raise FormatError(f"{path}:{ln}: negative response")
            out.append(KeyPoint(x, y, resp, scale))
    return out
