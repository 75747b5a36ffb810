"""Self-supervised training-data factory.

Anchor patches are cropped around detected key-points; positives are made
by warping the whole frame with a random small homography centered on the
key-point and cropping at the mapped location.  Negatives are not stored:
they are mined inside each training batch.  Also provides a deterministic
synthetic-frame generator for desk-scale runs and a binary pair archive.
"""

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .binio import ByteReader, ByteWriter
from .errors import FormatError, GeometryError, ParameterError
from .imgproc import (TransformRanges, apply_homography, as_gray, clahe,
                      random_homography, warp)
from .keypoints import KeyPoint, detect_harris, filter_border
from .util import make_rng, quantize_u8

PATCH = 128
HALF = PATCH // 2
DATASET_MAGIC = b"SSLPAIR1"

# per pair: frame_id u32 + kp 4xf32 + H 9xf64 + two byte patches
PAIR_BYTES = 4 + 16 + 72 + 2 * PATCH * PATCH


@dataclass(eq=False)
class PatchPair:
    """One anchor/positive training pair.

    Attributes:
        anchor: 128x128 uint8 patch from the source frame.
        positive: 128x128 uint8 patch from the warped frame.
        frame_id: Index of the source frame.
        kp: Key-point the anchor is centered on.
        h: Homography that produced the positive.
    """

    anchor: np.ndarray
    positive: np.ndarray
    frame_id: int
    kp: KeyPoint
    h: np.ndarray


@dataclass(eq=False)
class PairDataset:
    """A list of patch pairs plus the configuration that produced them."""

    pairs: list
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pairs)


def crop_patch(img, center, size=PATCH):
    """Crop a square patch centered on a sub-pixel point.

    The window's top-left corner is round(center) - size // 2, with
    round-half-up rounding.

    Args:
        img: 2-D grayscale image.
        center: (x, y) patch center.
        size: Side length in pixels.

    Returns:
        ndarray: A size x size copy of the window.

    Raises:
        GeometryError: If the window is not fully inside the image.
    """
    img = as_gray(img)
    h, w = img.shape
    cx, cy = float(center[0]), float(center[1])
    x0 = int(np.floor(cx + 0.5)) - size // 2
    y0 = int(np.floor(cy + 0.5)) - size // 2
    if x0 < 0 or y0 < 0 or x0 + size > w or y0 + size > h:
        raise GeometryError(
            f"crop window {size}x{size} at top-left ({x0}, {y0}) exceeds "
            f"image bounds {w}x{h}")
    return img[y0:y0 + size, x0:x0 + size].copy()


def make_positive(frame, kp, h):
    """Synthesize the positive patch for a key-point under a homography.

    The whole frame is warped by ``h`` and the patch is cropped at the
    mapped key-point, so the patch interior never contains crop-boundary
    fill.

    Args:
        frame: 2-D grayscale source frame.
        kp: KeyPoint in the source frame.
        h: 3x3 homography mapping source to warped coordinates.

    Returns:
        ndarray: 128x128 float patch from the warped frame.

    Raises:
        GeometryError: If the mapped key-point fails the border filter in
            the warped frame or the patch window touches fill pixels.
    """
    frame = as_gray(frame)
    fh, fw = frame.shape
    target = apply_homography(h, np.array([[kp.x, kp.y]], dtype=np.float64))[0]
    tx, ty = float(target[0]), float(target[1])
    if not (HALF <= tx < fw - HALF and HALF <= ty < fh - HALF):
        raise GeometryError(
            f"warped key-point ({tx:.2f}, {ty:.2f}) is within {HALF} px of "
            f"the warped frame border")
    # warping only the crop window is the full-frame warp restricted to it:
    # shift the output grid by the window origin inside the homography
    x0 = int(np.floor(tx + 0.5)) - HALF
    y0 = int(np.floor(ty + 0.5)) - HALF
    shift = np.array([[1.0, 0.0, -x0], [0.0, 1.0, -y0], [0.0, 0.0, 1.0]])
    patch, mask = warp(frame, shift @ np.asarray(h, dtype=np.float64),
                       out_width=PATCH, out_height=PATCH)
    if not mask.all():
        raise GeometryError("positive patch window contains warp fill pixels")
    return patch


def _draw_factors(rng):
    # each transform factor on with probability 1/2, at least one on
    while True:
        bits = rng.random(3) < 0.5
        if bits.any():
            return bool(bits[0]), bool(bits[1]), bool(bits[2])


def _frame_pairs(frame_id, frame, base, per_kp, max_kp, seed, harris_k,
                 nms_radius, margin, clip_limit, tiles):
    """Pairs and rejection count for one frame; stream keyed by frame_id."""
    g = as_gray(frame)
    enhanced = clahe(g, clip_limit=clip_limit, tiles=tiles)
    fh, fw = enhanced.shape
    kps = detect_harris(enhanced, max_n=max_kp, k=harris_k,
                        nms_radius=nms_radius)
    kps = filter_border(kps, fw, fh, margin=margin)
    rng = make_rng(seed, frame_id)
    pairs = []
    rejected = 0
    for kp in kps:
        anchor = quantize_u8(crop_patch(enhanced, (kp.x, kp.y)))
        seen = set()
        for _ in range(per_kp):
            # discrete angle/scale pools can repeat a homography for
            # the same key-point; redraw so pair keys stay unique
            h = None
            for _attempt in range(20):
                rot, scl, trn = _draw_factors(rng)
                r = dataclasses.replace(base, rotation=rot, scale=scl,
                                        translation=trn)
                cand = random_homography(rng, center=(kp.x, kp.y),
                                         ranges=r)
                key = cand.tobytes()
                if key not in seen:
                    seen.add(key)
                    h = cand
                    break
            if h is None:
                rejected += 1
                continue
            try:
                positive = make_positive(enhanced, kp, h)
            except GeometryError:
                rejected += 1
                continue
            pairs.append(PatchPair(anchor=anchor,
                                   positive=quantize_u8(positive),
                                   frame_id=frame_id, kp=kp, h=h))
    return pairs, rejected


def generate_pairs(frames, ranges=None, per_kp=2, max_kp=200, seed=0,
                   harris_k=0.04, nms_radius=4, margin=HALF,
                   clip_limit=2.0, tiles=(8, 8), threads=1):
    """Build a pair dataset from raw frames.

    Per frame: grayscale, CLAHE, Harris detection, border filtering; then
    each kept key-point gets ``per_kp`` random homographies (rotation,
    scale, translation about the key-point, each factor enabled with
    probability 1/2, at least one enabled) and one positive per accepted
    homography.  Patches are stored at 8-bit depth.  Each frame uses its
    own seeded random stream, so output does not depend on evaluation
    order or on the worker count.

    Args:
        frames: List of 2-D grayscale frames.
        ranges: TransformRanges supplying the magnitude pools; defaults
            to the standard small-transform ranges.
        per_kp: Homographies sampled per kept key-point.
        max_kp: Per-frame detection cap.
        seed: Master seed for all random draws.
        harris_k: Harris corner constant.
        nms_radius: Detection non-max-suppression radius.
        margin: Border margin for key-point filtering.
        clip_limit: CLAHE clip limit.
        tiles: CLAHE tile grid.
        threads: Worker threads for per-frame generation; results are
            reassembled in frame order, so output is identical for any
            value.

    Returns:
        PairDataset: Pairs plus a provenance snapshot including the
        rejection count.

    Raises:
        ParameterError: If no frames are given or zero pairs survive.
    """
    frames = list(frames)
    if not frames:
        raise ParameterError("generate_pairs requires at least one frame")
    if per_kp < 1:
        raise ParameterError("per_kp must be >= 1")
    if threads < 1:
        raise ParameterError(f"threads must be >= 1, got {threads}")
    base = ranges if ranges is not None else TransformRanges()

    def work(fid):
        return _frame_pairs(fid, frames[fid], base, per_kp, max_kp, seed,
                            harris_k, nms_radius, margin, clip_limit, tiles)

    if threads == 1:
        results = [work(fid) for fid in range(len(frames))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(len(frames))))
    pairs = []
    rejected = 0
    for frame_pairs, frame_rejected in results:
        pairs.extend(frame_pairs)
        rejected += frame_rejected
    if not pairs:
        raise ParameterError(
            f"generate_pairs produced zero pairs ({rejected} rejected)")
    provenance = {
        "seed": str(seed),
        "per_kp": str(per_kp),
        "max_kp": str(max_kp),
        "margin": str(margin),
        "harris_k": repr(harris_k),
        "nms_radius": str(nms_radius),
        "clip_limit": repr(clip_limit),
        "tiles": f"{tiles[0]}x{tiles[1]}",
        "angles_deg": ",".join(repr(a) for a in base.angles_deg),
        "scale_factors": ",".join(repr(s) for s in base.scale_factors),
        "max_shift": repr(base.max_shift),
        "n_frames": str(len(frames)),
        "rejected": str(rejected),
    }
    return PairDataset(pairs=pairs, provenance=provenance)


def _value_noise(rng, height, width, cell):
    # bilinear interpolation of a coarse random lattice
    gh = height // cell + 2
    gw = width // cell + 2
    lattice = rng.random((gh, gw))
    ys = np.arange(height) / cell
    xs = np.arange(width) / cell
    y0 = ys.astype(np.int64)
    x0 = xs.astype(np.int64)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = lattice[np.ix_(y0, x0)]
    tr = lattice[np.ix_(y0, x0 + 1)]
    bl = lattice[np.ix_(y0 + 1, x0)]
    br = lattice[np.ix_(y0 + 1, x0 + 1)]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return top + (bot - top) * fy


def synth_frames(n, width=720, height=576, seed=0):
    """Generate deterministic weakly-textured synthetic frames.

    Frames are multi-octave value noise with a few low-contrast blobs and
    a radial vignette, mimicking grayscale endoscopic video texture.

    Args:
        n: Number of frames, >= 1.
        width: Frame width in pixels.
        height: Frame height in pixels.
        seed: Master seed; frame i depends only on (seed, i).

    Returns:
        list: float32 (height, width) images with values in [0, 1].

    Raises:
        ParameterError: If n < 1 or the size is not positive.
    """
    if n < 1:
        raise ParameterError("frames must be >= 1")
    if width < 1 or height < 1:
        raise ParameterError(f"frame size {width}x{height} must be positive")
    frames = []
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    r2 = ((yy - cy) / max(cy, 1.0)) ** 2 + ((xx - cx) / max(cx, 1.0)) ** 2
    vignette = 1.0 - 0.35 * np.clip(r2, 0.0, 1.0)
    for i in range(n):
        rng = make_rng(seed, i)
        img = np.zeros((height, width), dtype=np.float64)
        amp_total = 0.0
        for octave, cell in enumerate((64, 32, 16, 8)):
            amp = 0.5 ** octave
            img += amp * _value_noise(rng, height, width, cell)
            amp_total += amp
        img /= amp_total
        lo, hi = img.min(), img.max()
        img = (img - lo) / max(hi - lo, 1e-9)
        img = 0.2 + 0.6 * img
        for _ in range(10):
            bx = rng.uniform(0, width)
            by = rng.uniform(0, height)
            sigma = rng.uniform(20.0, 60.0)
            amp = rng.uniform(-0.08, 0.08)
            img += amp * np.exp(-(((xx - bx) ** 2 + (yy - by) ** 2)
                                  / (2.0 * sigma * sigma)))
        img *= vignette
        frames.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    return frames


def save_dataset(ds, path):
    """Write a pair dataset to a binary archive.

    Layout: magic "SSLPAIR1", u32 pair count, then per pair frame_id u32,
    key-point (x, y, response, scale) as 4 f32, homography as 9 f64, and
    the anchor and positive patches as raw bytes; trailing CRC32.

    Args:
        ds: PairDataset to serialize.
        path: Destination file path.
    """
    w = ByteWriter()
    w.raw(DATASET_MAGIC)
    w.u32(len(ds.pairs))
    for p in ds.pairs:
        w.u32(int(p.frame_id))
        w.f32s(np.array([p.kp.x, p.kp.y, p.kp.response, p.kp.scale],
                        dtype=np.float32))
        w.f64s(np.asarray(p.h, dtype=np.float64).reshape(9))
        w.raw(np.ascontiguousarray(p.anchor, dtype=np.uint8).tobytes())
        w.raw(np.ascontiguousarray(p.positive, dtype=np.uint8).tobytes())
    with open(path, "wb") as f:
        f.write(w.finish())


def load_dataset(path):
    """Read a pair dataset archive written by ``save_dataset``.

    Args:
        path: Archive file path.

    Returns:
        PairDataset: Pairs with an empty provenance snapshot (provenance
        travels in the sidecar written by the CLI, not the archive).

    Raises:
        FormatError: On bad magic, truncation, or CRC mismatch.
    """
    with open(path, "rb") as f:
        data = f.read()
    r = ByteReader(data, source=path)
    magic = r.raw(8)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    count = r.u32()
    pairs = []
    for _ in range(count):
        frame_id = r.u32()
        kx, ky, resp, scale = (float(v) for v in r.f32s(4))
        h = r.f64s(9).reshape(3, 3)
        anchor = np.frombuffer(r.raw(PATCH * PATCH),
                               dtype=np.uint8).reshape(PATCH, PATCH).copy()
        positive = np.frombuffer(r.raw(PATCH * PATCH),
                                 dtype=np.uint8).reshape(PATCH, PATCH).copy()
        pairs.append(PatchPair(anchor=anchor, positive=positive,
                               frame_id=frame_id,
                               kp=KeyPoint(kx, ky, resp, scale), h=h))
    r.check_crc()
    return PairDataset(pairs=pairs, provenance={})
