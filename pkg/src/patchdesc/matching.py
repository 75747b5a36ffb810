"""Key-point description, nearest-neighbor matching, and evaluation.

Bridges the descriptor network and the geometry toolkit: extracts
descriptors for detected key-points, matches them by nearest-neighbor
search on the unit sphere, scores matches against a ground-truth
homography, and runs the viewpoint / scale / blur robustness sweeps.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError
from .imgproc import (apply_homography, as_gray, box_blur, check_homography,
                      clahe, warp)
from .keypoints import detect_harris, filter_border, kps_xy
from .model import PATCH_SIZE, preprocess_patch
from .mosaic import estimate_homography_dlt
from .triplets import HALF, crop_patch
from .util import make_rng

MATCH_HEADER = "i,j,distance"
EVAL_HEADER = "n_keypoints,n_matches,n_correct,precision,recall,matching_score,pe"
SWEEP_HEADER = "mode,frame_id,condition,precision,recall,matching_score"

SCALE_FACTORS = (0.9, 0.95, 1.0, 1.05, 1.1, 1.15)
BLUR_KERNELS = (3, 5, 10, 15)
SWEEP_MODES = ("viewpoint", "scale", "blur")


@dataclass(frozen=True)
class MatchPair:
    """One nearest-neighbor match between descriptor sets.

    Attributes:
        i: Index into the source key-point list.
        j: Index into the target key-point list.
        distance: Euclidean embedding distance, in [0, 2] for unit
            descriptors.
    """

    i: int
    j: int
    distance: float


@dataclass(frozen=True)
class EvalReport:
    """Match-quality summary for one image pair.

    matching_score is stored as precision * (n_matches / n_keypoints) so
    the identity between the three ratios holds exactly in floating
    point; mathematically it equals n_correct / n_keypoints.
    """

    n_keypoints: int
    n_matches: int
    n_correct: int
    precision: float
    recall: float
    matching_score: float
    pe: float


@dataclass(frozen=True)
class SweepConfig:
    """Knobs for the robustness sweeps.

    Attributes:
        max_kp: Detection cap per image.
        pe: Projection-error threshold in pixels.
        corner_shift: Max corner perturbation for viewpoint homographies.
        n_viewpoint: Random viewpoint transforms per frame.
        scale_factors: Scaling factors about the image center.
        blur_kernels: Box-blur kernel sides applied to the target frame.
        enhance: Apply local contrast equalization before detection,
            matching the training-pair pipeline.
        harris_k: Harris response constant.
        nms_radius: Detection non-max-suppression radius.
        batch: Descriptor forward-pass chunk size.
        mutual: Keep only mutual nearest-neighbor matches; trades
            match count for precision.
    """

    max_kp: int = 200
    pe: float = 5.0
    corner_shift: float = 15.0
    n_viewpoint: int = 10
    scale_factors: tuple = SCALE_FACTORS
    blur_kernels: tuple = BLUR_KERNELS
    enhance: bool = True
    harris_k: float = 0.04
    nms_radius: int = 4
    batch: int = 256
    mutual: bool = False


def describe(img, kps, net, batch=256):
    """Extract descriptors for key-points whose patch fits the image.

    Key-points closer than 64 px to a border are dropped; the rest are
    cropped to 128x128, standardized, and pushed through the network in
    eval mode.

    Args:
        img: Grayscale image.
        kps: Detected key-points.
        net: Trained DescriptorNet.
        batch: Forward-pass chunk size.

    Returns:
        tuple: (descriptors, kept) where descriptors is (k, 128) float32
        aligned row-for-row with the kept key-point list.  All points
        filtered yields an empty (0, 128) array, not an error.
    """
    arr = as_gray(img)
    h, w = arr.shape
    kept = filter_border(kps, w, h, margin=HALF)
    if not kept:
        return np.zeros((0, 128), dtype=np.float32), []
    if batch < 1:
        raise ParameterError(f"batch must be >= 1, got {batch}")
    patches = np.stack([crop_patch(arr, (kp.x, kp.y), size=PATCH_SIZE)
                        for kp in kept])
    out = []
    for lo in range(0, len(kept), batch):
        x = preprocess_patch(patches[lo:lo + batch])
        out.append(net.forward(x, train=False))
    return np.concatenate(out, axis=0).astype(np.float32), kept


def _check_desc(d, name):
    arr = np.asarray(d, dtype=np.float64)
    if arr.ndim != 2:
        raise ParameterError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] and not np.isfinite(arr).all():
        raise ParameterError(f"{name} contains non-finite values")
    return arr


def match_nn(desc_s, desc_t, mutual=False, max_dist=None):
    """Match each source descriptor to its nearest target descriptor.

    Args:
        desc_s: (n, d) source descriptors.
        desc_t: (m, d) target descriptors.
        mutual: Keep only pairs that are mutually nearest.
        max_dist: If set, drop matches with distance above it.

    Returns:
        list: MatchPair per retained source descriptor, the argmin over
        target distances with ties resolved to the smallest index.
        Either set empty yields an empty list.
    """
    s = _check_desc(desc_s, "desc_s")
    t = _check_desc(desc_t, "desc_t")
    if s.shape[0] == 0 or t.shape[0] == 0:
        return []
    if s.shape[1] != t.shape[1]:
        raise ParameterError(
            f"descriptor widths differ: {s.shape[1]} vs {t.shape[1]}")
    sq = (s ** 2).sum(axis=1)[:, None] + (t ** 2).sum(axis=1)[None, :] \
        - 2.0 * (s @ t.T)
    dist = np.sqrt(np.clip(sq, 0.0, None))
    nearest = np.argmin(dist, axis=1)
    keep = np.ones(s.shape[0], dtype=bool)
    if mutual:
        back = np.argmin(dist, axis=0)
        keep &= back[nearest] == np.arange(s.shape[0])
    d_best = dist[np.arange(s.shape[0]), nearest]
    if max_dist is not None:
        keep &= d_best <= max_dist
    return [MatchPair(int(i), int(nearest[i]), float(d_best[i]))
            for i in np.flatnonzero(keep)]


def _points(kps):
    if isinstance(kps, np.ndarray):
        return np.asarray(kps, dtype=np.float64).reshape(-1, 2)
    return kps_xy(kps)


def _correctness(matches, pts_s, pts_t, h_gt, pe):
    proj = apply_homography(h_gt, pts_s) if len(pts_s) else pts_s
    flags = np.zeros(len(matches), dtype=bool)
    for n, m in enumerate(matches):
        if not 0 <= m.i < len(pts_s) or not 0 <= m.j < len(pts_t):
            raise ParameterError(
                f"match ({m.i}, {m.j}) out of range for "
                f"{len(pts_s)} source / {len(pts_t)} target key-points")
        flags[n] = np.linalg.norm(proj[m.i] - pts_t[m.j]) <= pe
    n_corr = 0
    if len(pts_s) and len(pts_t):
        gap = np.linalg.norm(proj[:, None, :] - pts_t[None, :, :], axis=2)
        n_corr = int((gap.min(axis=1) <= pe).sum())
    return flags, n_corr


def score_matches(matches, kps_s, kps_t, h_gt, pe=5.0, n_keypoints=None):
    """Score matches against a ground-truth homography.

    A match (i, j) is correct iff the Euclidean gap between the
    projected source key-point and the matched target key-point is at
    most ``pe`` (inclusive).  Recall divides by the number of source
    key-points whose projection has at least one target key-point within
    ``pe``; each source point counts once.

    Args:
        matches: MatchPair list.
        kps_s: Source key-points (list or (n, 2) array).
        kps_t: Target key-points.
        h_gt: Ground-truth source-to-target homography.
        pe: Projection-error threshold in pixels.
        n_keypoints: Matching-score denominator; defaults to the number
            of source key-points.

    Returns:
        EvalReport: All ratios are 0 when their denominator is 0.
    """
    pts_s = _points(kps_s)
    pts_t = _points(kps_t)
    h = check_homography(h_gt)
    if pe < 0:
        raise ParameterError(f"pe must be >= 0, got {pe}")
    flags, n_corr = _correctness(matches, pts_s, pts_t, h, pe)
    n_correct = int(flags.sum())
    n_matches = len(matches)
    n_kp = len(pts_s) if n_keypoints is None else int(n_keypoints)
    precision = n_correct / n_matches if n_matches else 0.0
    recall = n_correct / n_corr if n_corr else 0.0
    score = precision * (n_matches / n_kp) if n_kp else 0.0
    return EvalReport(n_keypoints=n_kp, n_matches=n_matches,
                      n_correct=n_correct, precision=precision,
                      recall=recall, matching_score=score, pe=float(pe))


def pr_curve(matches, kps_s, kps_t, h_gt, pe=5.0, thresholds=None):
    """Sweep the match-distance acceptance threshold.

    Args:
        matches: Non-empty MatchPair list.
        kps_s: Source key-points.
        kps_t: Target key-points.
        h_gt: Ground-truth homography.
        pe: Projection-error threshold.
        thresholds: Optional explicit thresholds; defaults to the sorted
            unique match distances.

    Returns:
        list: (threshold, precision, recall) triples with monotonically
        increasing thresholds.  An empty retained set scores precision 0
        and recall 0 by convention; the recall denominator is fixed by
        the full key-point sets.
    """
    if not matches:
        raise ParameterError("pr_curve requires at least one match")
    pts_s = _points(kps_s)
    pts_t = _points(kps_t)
    h = check_homography(h_gt)
    flags, n_corr = _correctness(matches, pts_s, pts_t, h, pe)
    dists = np.array([m.distance for m in matches])
    order = np.argsort(dists, kind="stable")
    sorted_d = dists[order]
    correct_cum = np.cumsum(flags[order])
    if thresholds is None:
        thresholds = np.unique(sorted_d)
    else:
        thresholds = np.sort(np.asarray(thresholds, dtype=np.float64))
    curve = []
    for t in thresholds:
        # retained set = matches with distance <= t
        k = int(np.searchsorted(sorted_d, t, side="right"))
        n_correct = int(correct_cum[k - 1]) if k else 0
        precision = n_correct / k if k else 0.0
        recall = n_correct / n_corr if n_corr else 0.0
        curve.append((float(t), precision, recall))
    return curve


# ---------------------------------------------------------------------------
# pairwise evaluation


def _window_ok(pts, width, height, mask_integral=None):
    """Check that each point's 128x128 crop window is fully usable."""
    tl_x = np.floor(pts[:, 0] + 0.5).astype(np.int64) - HALF
    tl_y = np.floor(pts[:, 1] + 0.5).astype(np.int64) - HALF
    ok = ((pts[:, 0] >= HALF) & (pts[:, 0] < width - HALF)
          & (pts[:, 1] >= HALF) & (pts[:, 1] < height - HALF))
    if mask_integral is not None:
        x0 = np.clip(tl_x, 0, width - PATCH_SIZE)
        y0 = np.clip(tl_y, 0, height - PATCH_SIZE)
        ii = mask_integral
        bad = (ii[y0 + PATCH_SIZE, x0 + PATCH_SIZE] - ii[y0, x0 + PATCH_SIZE]
               - ii[y0 + PATCH_SIZE, x0] + ii[y0, x0])
        ok &= bad == 0
    return ok


def _invalid_integral(mask):
    if mask is None:
        return None
    inv = (~np.asarray(mask, dtype=bool)).astype(np.int64)
    ii = np.zeros((inv.shape[0] + 1, inv.shape[1] + 1), dtype=np.int64)
    ii[1:, 1:] = inv.cumsum(axis=0).cumsum(axis=1)
    return ii


def _window_ok_map(mask):
    """Per-pixel flag: the 128x128 crop window here is fully valid.

    Border pixels whose window leaves the image are False, matching the
    describe() margin, so detection restricted by this map only proposes
    key-points that will survive description and the mask filter.
    """
    ii = _invalid_integral(mask)
    h, w = np.asarray(mask).shape
    ok = np.zeros((h, w), dtype=bool)
    if h < PATCH_SIZE or w < PATCH_SIZE:
        return ok
    # integer centers c have window [c - HALF, c + HALF); the sum below
    # counts invalid pixels inside the window with top-left (i, j)
    bad = (ii[PATCH_SIZE:, PATCH_SIZE:] - ii[:-PATCH_SIZE, PATCH_SIZE:]
           - ii[PATCH_SIZE:, :-PATCH_SIZE] + ii[:-PATCH_SIZE, :-PATCH_SIZE])
    # centers allowed by the border margin: HALF <= c < size - HALF
    ok[HALF:h - HALF, HALF:w - HALF] = bad[:h - 2 * HALF, :w - 2 * HALF] == 0
    return ok


def evaluate_pair(src, dst, h_gt, net, cfg=None, target_mask=None,
                  restrict_shared=False):
    """Run the detect-describe-match-score pipeline on one image pair.

    Args:
        src: Source grayscale image.
        dst: Target grayscale image.
        h_gt: Ground-truth source-to-target homography.
        net: Trained DescriptorNet.
        cfg: SweepConfig providing detector and scoring knobs.
        target_mask: Optional validity mask for dst (from warping);
            target detection is restricted to pixels whose full patch
            window is valid, so boundary artifacts neither rank nor
            survive description.
        restrict_shared: Drop source key-points whose ground-truth
            projection cannot be described in the target (outside the
            border margin or over invalid pixels) before matching.  The
            matching-score denominator still counts them.

    Returns:
        EvalReport: Scored at cfg.pe with n_keypoints equal to the
        number of described source key-points.
    """
    cfg = cfg or SweepConfig()
    src = as_gray(src)
    dst = as_gray(dst)
    h = check_homography(h_gt)
    kps_s = detect_harris(src, max_n=cfg.max_kp, k=cfg.harris_k,
                          nms_radius=cfg.nms_radius)
    # restricting detection (rather than post-filtering) keeps the
    # target budget spent on describable corners instead of the warp's
    # content/void boundary
    valid = None if target_mask is None else _window_ok_map(target_mask)
    kps_t = detect_harris(dst, max_n=cfg.max_kp, k=cfg.harris_k,
                          nms_radius=cfg.nms_radius, valid_mask=valid)
    integral = _invalid_integral(target_mask)
    if integral is not None and kps_t:
        th, tw = dst.shape
        ok = _window_ok(kps_xy(kps_t), tw, th, integral)
        kps_t = [kp for kp, good in zip(kps_t, ok) if good]
    desc_s, kept_s = describe(src, kps_s, net, batch=cfg.batch)
    desc_t, kept_t = describe(dst, kps_t, net, batch=cfg.batch)
    if len(kept_s) == 0 or len(kept_t) == 0:
        return EvalReport(n_keypoints=len(kept_s), n_matches=0, n_correct=0,
                          precision=0.0, recall=0.0, matching_score=0.0,
                          pe=float(cfg.pe))
    if restrict_shared:
        th, tw = dst.shape
        proj = apply_homography(h, kps_xy(kept_s))
        feasible = np.flatnonzero(_window_ok(proj, tw, th, integral))
    else:
        feasible = np.arange(len(kept_s))
    matches = match_nn(desc_s[feasible], desc_t, mutual=cfg.mutual)
    matches = [MatchPair(int(feasible[m.i]), m.j, m.distance)
               for m in matches]
    return score_matches(matches, kept_s, kept_t, h, pe=cfg.pe,
                         n_keypoints=len(kept_s))


# ---------------------------------------------------------------------------
# robustness sweeps


def viewpoint_homography(rng, width, height, max_shift=15.0):
    """Sample a random homography by perturbing the four image corners.

    Each corner moves by an independent uniform offset in
    [-max_shift, max_shift] per axis; the homography is the exact DLT
    fit to the four corner correspondences.
    """
    if max_shift < 0:
        raise ParameterError(f"max_shift must be >= 0, got {max_shift}")
    corners = np.array([[0.0, 0.0], [width - 1.0, 0.0],
                        [width - 1.0, height - 1.0], [0.0, height - 1.0]])
    shifted = corners + rng.uniform(-max_shift, max_shift, size=(4, 2))
    return estimate_homography_dlt(corners, shifted)


def scale_homography(factor, width, height):
    """Scaling about the image center as a homography."""
    if factor <= 0:
        raise ParameterError(f"scale factor must be > 0, got {factor}")
    cx, cy = (width - 1.0) / 2.0, (height - 1.0) / 2.0
    return np.array([[factor, 0.0, cx * (1.0 - factor)],
                     [0.0, factor, cy * (1.0 - factor)],
                     [0.0, 0.0, 1.0]])


def _sweep_conditions(frame, fid, mode, cfg, seed):
    """Yield (condition label, target image, target mask, H) tuples."""
    fh, fw = frame.shape
    if mode == "viewpoint":
        for t in range(cfg.n_viewpoint):
            h = viewpoint_homography(make_rng(seed, fid, t), fw, fh,
                                     max_shift=cfg.corner_shift)
            target, mask = warp(frame, h, out_width=fw, out_height=fh)
            yield f"t{t}", target, mask, h
    elif mode == "scale":
        for factor in cfg.scale_factors:
            h = scale_homography(factor, fw, fh)
            target, mask = warp(frame, h, out_width=fw, out_height=fh)
            yield str(factor), target, mask, h
    elif mode == "blur":
        for k in cfg.blur_kernels:
            yield str(k), box_blur(frame, k), None, np.eye(3)
    else:
        raise ParameterError(
            f"mode must be one of {SWEEP_MODES}, got {mode!r}")


def sweep_means(rows):
    """Per-condition (mean precision, mean recall) over sweep rows.

    Conditions keep their first-appearance order in the returned dict.
    """
    means = {}
    for label in dict.fromkeys(r[2] for r in rows):
        sub = [r for r in rows if r[2] == label]
        means[label] = (float(np.mean([r[3] for r in sub])),
                        float(np.mean([r[4] for r in sub])))
    return means


def robustness_sweep(frames, net, mode, cfg=None, seed=0, frame_ids=None):
    """Evaluate matching robustness across a family of distortions.

    For every frame and condition the target image is the distorted
    frame; both sides run detect-describe-match-score at PE = cfg.pe.

    Args:
        frames: Non-empty list of grayscale frames.
        net: Trained DescriptorNet.
        mode: "viewpoint", "scale", or "blur".
        cfg: SweepConfig; defaults apply when omitted.
        seed: Seed for the viewpoint transform streams.
        frame_ids: Optional per-frame ids aligned with ``frames``; they
            key the viewpoint random streams and the output rows, so a
            partitioned run over frame subsets reproduces the full run
            row for row.  Defaults to positional indices.

    Returns:
        tuple: (rows, means) where rows is one (mode, frame_id,
        condition, precision, recall, matching_score) tuple per
        frame-condition pair in deterministic order and means maps each
        condition label to its (mean precision, mean recall).
    """
    cfg = cfg or SweepConfig()
    if mode not in SWEEP_MODES:
        raise ParameterError(f"mode must be one of {SWEEP_MODES}, got {mode!r}")
    if len(frames) == 0:
        raise ParameterError("robustness_sweep requires at least one frame")
    if frame_ids is None:
        frame_ids = range(len(frames))
    frame_ids = [int(f) for f in frame_ids]
    if len(frame_ids) != len(frames):
        raise ParameterError(
            f"{len(frames)} frames but {len(frame_ids)} frame_ids")
    rows = []
    for fid, raw in zip(frame_ids, frames):
        frame = clahe(as_gray(raw)) if cfg.enhance else as_gray(raw)
        for label, target, mask, h in _sweep_conditions(frame, fid, mode,
                                                        cfg, seed):
            rep = evaluate_pair(frame, target, h, net, cfg=cfg,
                                target_mask=mask)
            rows.append((mode, fid, label, rep.precision, rep.recall,
                         rep.matching_score))
    return rows, sweep_means(rows)


# ---------------------------------------------------------------------------
# CSV I/O


def write_matches_csv(matches, path):
    """Write matches as CSV rows (i, j, distance) with full precision."""
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(MATCH_HEADER + "\n")
        for m in matches:
            fh.write(f"{m.i},{m.j},{m.distance!r}\n")


def read_matches_csv(path):
    """Read a match CSV written by write_matches_csv."""
    matches = []
    with open(path, "r", encoding="ascii", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MATCH_HEADER.split(","):
            raise FormatError(f"bad match CSV header in {path}: {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 fields")
            try:
                matches.append(MatchPair(int(row[0]), int(row[1]),
                                         float(row[2])))
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from e
    return matches


def write_eval_csv(report, path):
    """Write an EvalReport as a one-row CSV with named columns."""
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(EVAL_HEADER + "\n")
        fh.write(f"{report.n_keypoints},{report.n_matches},"
                 f"{report.n_correct},{report.precision!r},"
                 f"{report.recall!r},{report.matching_score!r},"
                 f"{report.pe!r}\n")


def write_sweep_csv(rows, path):
    """Write robustness-sweep rows with round-trip float precision."""
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(SWEEP_HEADER + "\n")
        for mode, fid, label, precision, recall, score in rows:
            fh.write(f"{mode},{fid},{label},{precision!r},{recall!r},"
                     f"{score!r}\n")


def read_sweep_csv(path):
    """Read a sweep CSV back into row tuples."""
    rows = []
    with open(path, "r", encoding="ascii", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SWEEP_HEADER.split(","):
            raise FormatError(f"bad sweep CSV header in {path}: {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise FormatError(f"{path}:{lineno}: expected 6 fields")
            try:
                rows.append((row[0], int(row[1]), row[2], float(row[3]),
                             float(row[4]), float(row[5])))
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from e
    return rows
