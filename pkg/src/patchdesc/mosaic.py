"""Robust homography estimation and panorama compositing.

Pairwise homographies come from a Hartley-normalized direct linear
transform wrapped in RANSAC; consecutive-frame models are chained into
global transforms and frames are composited onto a shared canvas with
feather blending.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, NumericalError, ParameterError
from .imgproc import apply_homography, as_gray, check_homography, warp
from .util import make_rng

_COND_LIMIT = 1e12


@dataclass(eq=False)
class Panorama:
    """A composited canvas plus the transforms that placed each frame.

    Attributes:
        canvas: Blended grayscale panorama.
        homographies: Per-frame global homographies into reference-frame
            coordinates (h33 = 1).
        origin: (x, y) of the canvas's top-left corner in reference-frame
            coordinates; canvas pixel (u, v) sits at reference point
            (u + x, v + y).
        coverage: Boolean mask of canvas pixels touched by any frame.
    """

    canvas: np.ndarray
    homographies: list
    origin: tuple
    coverage: np.ndarray = field(default=None)


def _as_points(pts, name):
    arr = np.asarray(pts, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ParameterError(f"{name} must be (n, 2), got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ParameterError(f"{name} contains non-finite coordinates")
    return arr


def _hartley_normalize(pts):
    # translate centroid to origin, scale RMS radius to sqrt(2)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    rms = np.sqrt((centered ** 2).sum(axis=1).mean())
    if rms < 1e-12:
        raise GeometryError("degenerate correspondences: all points coincide")
    s = np.sqrt(2.0) / rms
    t = np.array([[s, 0.0, -s * centroid[0]],
                  [0.0, s, -s * centroid[1]],
                  [0.0, 0.0, 1.0]])
    return centered * s, t


def _has_collinear_triple(pts):
    # pts are Hartley-normalized (O(1) magnitude), so the tolerance is
    # effectively relative
    n = pts.shape[0]
    for i in range(n - 2):
        for j in range(i + 1, n - 1):
            for k in range(j + 1, n):
                ab = pts[j] - pts[i]
                ac = pts[k] - pts[i]
                if abs(ab[0] * ac[1] - ab[1] * ac[0]) <= 1e-8:
                    return True
    return False


def estimate_homography_dlt(src_pts, dst_pts):
    """Fit a homography to point correspondences by the normalized DLT.

    Args:
        src_pts: (n, 2) source points, n >= 4.
        dst_pts: (n, 2) matching target points.

    Returns:
        ndarray: 3x3 homography with h33 = 1 mapping src to dst.

    Raises:
        ParameterError: On malformed input or fewer than 4 points.
        GeometryError: On a degenerate configuration (for example three
            collinear source points among four).
    """
    src = _as_points(src_pts, "src_pts")
    dst = _as_points(dst_pts, "dst_pts")
    if src.shape != dst.shape:
        raise ParameterError(
            f"point counts differ: {src.shape[0]} vs {dst.shape[0]}")
    n = src.shape[0]
    if n < 4:
        raise ParameterError(f"homography needs >= 4 correspondences, got {n}")
    ns, ts = _hartley_normalize(src)
    nd, td = _hartley_normalize(dst)
    if n == 4:
        # a minimal sample needs all points in general position; with
        # three collinear the algebraic null vector is not a valid fit
        if _has_collinear_triple(ns) or _has_collinear_triple(nd):
            raise GeometryError(
                "degenerate minimal sample: three points are collinear")
    a = np.zeros((2 * n, 9))
    x, y = ns[:, 0], ns[:, 1]
    u, v = nd[:, 0], nd[:, 1]
    a[0::2, 0] = -x
    a[0::2, 1] = -y
    a[0::2, 2] = -1.0
    a[0::2, 6] = u * x
    a[0::2, 7] = u * y
    a[0::2, 8] = u
    a[1::2, 3] = -x
    a[1::2, 4] = -y
    a[1::2, 5] = -1.0
    a[1::2, 6] = v * x
    a[1::2, 7] = v * y
    a[1::2, 8] = v
    _, sing, vt = np.linalg.svd(a)
    # a unique null direction requires the second-smallest singular value
    # to stay well above zero
    if sing[-2] < 1e-12 or sing[0] / sing[-2] > _COND_LIMIT:
        raise GeometryError(
            "degenerate correspondence configuration (rank-deficient "
            "system)")
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ h_norm @ ts
    return check_homography(h)


def ransac_homography(src_pts, dst_pts, iters=2000, inlier_px=3.0, seed=0):
    """Estimate a homography robustly from noisy correspondences.

    Seeded minimal 4-point samples vote by inlier count (reprojection
    error <= ``inlier_px``); ties prefer the lower mean inlier error; the
    winning consensus set is refit by DLT.  With exactly 4 input points
    the exact fit is returned and the consensus floor is waived.

    Args:
        src_pts: (n, 2) source points, n >= 4.
        dst_pts: (n, 2) matching target points.
        iters: Number of minimal samples to draw.
        inlier_px: Inlier reprojection threshold in pixels.
        seed: Seed for the sampling stream.

    Returns:
        tuple: (3x3 homography, boolean inlier mask of length n).

    Raises:
        ParameterError: On malformed input or fewer than 4 points.
        NumericalError: If the best consensus is below max(10, 10% of n).
        GeometryError: If the 4-point input is degenerate.
    """
    src = _as_points(src_pts, "src_pts")
    dst = _as_points(dst_pts, "dst_pts")
    if src.shape != dst.shape:
        raise ParameterError(
            f"point counts differ: {src.shape[0]} vs {dst.shape[0]}")
    n = src.shape[0]
    if n < 4:
        raise ParameterError(f"RANSAC needs >= 4 correspondences, got {n}")
    if n == 4:
        h = estimate_homography_dlt(src, dst)
        return h, np.ones(4, dtype=bool)

    rng = make_rng(seed)
    best_count = 0
    best_mean = np.inf
    best_mask = None
    for _ in range(iters):
        pick = rng.choice(n, size=4, replace=False)
        try:
            h = estimate_homography_dlt(src[pick], dst[pick])
            proj = apply_homography(h, src)
        except GeometryError:
            continue
        err = np.linalg.norm(proj - dst, axis=1)
        mask = err <= inlier_px
        count = int(mask.sum())
        if count < 4:
            continue
        mean_err = float(err[mask].mean())
        if count > best_count or (count == best_count
                                  and mean_err < best_mean):
            best_count = count
            best_mean = mean_err
            best_mask = mask
    floor = max(10, int(np.ceil(0.1 * n)))
    if best_mask is None or best_count < floor:
        raise NumericalError(
            f"no RANSAC consensus: best inlier count {best_count} of {n} "
            f"(needed {floor})")
    h = estimate_homography_dlt(src[best_mask], dst[best_mask])
    return h, best_mask


def _feather_weights(height, width):
    # distance to the nearest border plus one, so edges still contribute
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    wx = np.minimum(xs + 1.0, width - xs)
    wy = np.minimum(ys + 1.0, height - ys)
    return np.minimum(wy[:, None], wx[None, :])


def chain_homographies(pairwise, reference):
    """Chain consecutive pairwise models into global transforms.

    Args:
        pairwise: List of 3x3 homographies where element k maps frame k
            coordinates to frame k+1 coordinates.
        reference: Index of the frame whose coordinates define the
            panorama space.

    Returns:
        list: Per-frame 3x3 global homographies (h33 = 1) mapping each
        frame into reference-frame coordinates.
    """
    n = len(pairwise) + 1
    if not 0 <= reference < n:
        raise ParameterError(
            f"reference index {reference} out of range for {n} frames")
    globals_ = [None] * n
    globals_[reference] = np.eye(3)
    for i in range(reference + 1, n):
        step = np.linalg.inv(np.asarray(pairwise[i - 1], dtype=np.float64))
        globals_[i] = check_homography(globals_[i - 1] @ step)
    for i in range(reference - 1, -1, -1):
        step = np.asarray(pairwise[i], dtype=np.float64)
        globals_[i] = check_homography(globals_[i + 1] @ step)
    return globals_


def compose_panorama(frames, correspondences, reference=0, blend="feather",
                     iters=2000, inlier_px=3.0, seed=0, threads=1):
    """Composite consecutive frames into a panorama.

    Args:
        frames: List of grayscale frames.
        correspondences: List of (src_pts, dst_pts) pairs, one per
            consecutive frame pair, where src_pts lie in frame k and
            dst_pts in frame k+1.
        reference: Frame whose coordinates define the panorama space.
        blend: "feather" for border-distance weighting, "overwrite" for
            last-frame-wins.
        iters: RANSAC iterations per pair.
        inlier_px: RANSAC inlier threshold.
        seed: Seed for the RANSAC sampling streams.
        threads: Worker threads for the pairwise registration stage;
            each pair has its own seeded stream, so the result never
            depends on the worker count.

    Returns:
        Panorama: Canvas, per-frame global homographies, canvas origin,
        and coverage mask.

    Raises:
        ParameterError: On bad inputs or an unknown blend mode.
        NumericalError: If any pairwise registration fails; the message
            names the failing pair (lowest index first when several
            fail).
    """
    frames = [as_gray(f) for f in frames]
    if not frames:
        raise ParameterError("compose_panorama requires at least one frame")
    if len(correspondences) != len(frames) - 1:
        raise ParameterError(
            f"{len(frames)} frames need {len(frames) - 1} correspondence "
            f"sets, got {len(correspondences)}")
    if blend not in ("feather", "overwrite"):
        raise ParameterError(f"unknown blend mode {blend!r}")
    if threads < 1:
        raise ParameterError(f"threads must be >= 1, got {threads}")

    def register(k):
        src, dst = correspondences[k]
        try:
            h, _ = ransac_homography(src, dst, iters=iters,
                                     inlier_px=inlier_px,
                                     seed=make_rng(seed, k).integers(2 ** 31))
            return h, None
        except (NumericalError, GeometryError) as e:
            return None, e

    n_pairs = len(correspondences)
    if threads == 1:
        results = [register(k) for k in range(n_pairs)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(register, range(n_pairs)))
    pairwise = []
    for k, (h, err) in enumerate(results):
        if err is not None:
            raise NumericalError(
                f"pairwise registration failed for frames ({k}, {k + 1}): "
                f"{err}") from err
        pairwise.append(h)
    globals_ = chain_homographies(pairwise, reference)

    corners_all = []
    for frame, g in zip(frames, globals_):
        fh, fw = frame.shape
        corners = np.array([[0.0, 0.0], [fw - 1.0, 0.0],
                            [fw - 1.0, fh - 1.0], [0.0, fh - 1.0]])
        corners_all.append(apply_homography(g, corners))
    pts = np.vstack(corners_all)
    # snap near-integer projections so estimation roundoff cannot grow
    # the canvas by a phantom row or column
    rounded = np.round(pts)
    pts = np.where(np.abs(pts - rounded) < 1e-6, rounded, pts)
    min_x = float(np.floor(pts[:, 0].min()))
    min_y = float(np.floor(pts[:, 1].min()))
    max_x = float(np.ceil(pts[:, 0].max()))
    max_y = float(np.ceil(pts[:, 1].max()))
    cw = int(max_x - min_x) + 1
    ch = int(max_y - min_y) + 1
    shift = np.array([[1.0, 0.0, -min_x], [0.0, 1.0, -min_y],
                      [0.0, 0.0, 1.0]])

    acc = np.zeros((ch, cw), dtype=np.float64)
    wsum = np.zeros((ch, cw), dtype=np.float64)
    coverage = np.zeros((ch, cw), dtype=bool)
    for frame, g in zip(frames, globals_):
        full = shift @ g
        warped, mask = warp(frame, full, out_width=cw, out_height=ch)
        if blend == "feather":
            weights = _feather_weights(*frame.shape)
            # resample the frame's feather profile through the same warp
            wmap, _ = warp((weights / weights.max()).astype(np.float64),
                           full, out_width=cw, out_height=ch)
            wmap = np.where(mask, np.maximum(wmap, 1e-6), 0.0)
            acc += warped.astype(np.float64) * wmap
            wsum += wmap
        else:
            acc = np.where(mask, warped, acc)
            wsum = np.where(mask, 1.0, wsum)
        coverage |= mask.astype(bool)
    if blend == "feather":
        canvas = np.where(wsum > 0, acc / np.maximum(wsum, 1e-12), 0.0)
    else:
        canvas = acc
    return Panorama(canvas=canvas.astype(np.float32),
                    homographies=[check_homography(g) for g in globals_],
                    origin=(min_x, min_y), coverage=coverage)
