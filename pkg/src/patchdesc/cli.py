"""Command-line pipeline from data synthesis to panorama stitching.

Subcommands cover the full workflow: synth-data, gen-pairs, train,
match, eval, sweep, mosaic, plot.  Every stage reads and writes plain
files (PNG, CSV, binary archives, SVG), so external detectors,
descriptors, or match sets can be substituted at any point.  Each run
writes a ``<subcommand>.provenance`` sidecar (version, command, flags,
no clocks) into the output directory, so artifacts stay reproducible
and reruns with one seed are byte-identical.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
failure.
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .errors import (FormatError, GeometryError, NumericalError,
                     ParameterError)
from .imgproc import (clahe, load_image, read_homographies, save_image,
                      write_homographies)
from .keypoints import detect_harris, kps_xy, read_keypoints, write_keypoints
from .matching import (SWEEP_HEADER, SweepConfig, describe, match_nn,
                       pr_curve, read_matches_csv, read_sweep_csv,
                       robustness_sweep, score_matches, sweep_means,
                       write_eval_csv, write_matches_csv, write_sweep_csv)
from .model import load_checkpoint
from .mosaic import compose_panorama
from .trainer import TrainConfig, train
from .triplets import generate_pairs, load_dataset, save_dataset, synth_frames

ENV_PREFIX = "PATCHDESC_"
PR_HEADER = "threshold,precision,recall"
_IMAGE_EXTS = (".png", ".pgm")
_SERIES_COLORS = ("#1f77b4", "#d62728", "#2ca02c")


# ---------------------------------------------------------------------------
# small shared helpers


def _parse_bool(text, context):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise FormatError(f"{context}: {text!r} is not a boolean")


def _env_default(name, cast, fallback):
    """Default for a global flag, overridable via PATCHDESC_<NAME>."""
    raw = os.environ.get(ENV_PREFIX + name)
    if raw is None:
        return fallback
    try:
        if cast is bool:
            return _parse_bool(raw, ENV_PREFIX + name)
        return cast(raw)
    except (ValueError, FormatError) as e:
        raise ParameterError(
            f"environment override {ENV_PREFIX}{name}={raw!r} is invalid: "
            f"{e}") from e


def _say(args, message):
    if not args.quiet:
        print(message)


def _effective_threads(args):
    # deterministic mode forces single-threaded ordered execution
    if args.deterministic:
        return 1
    return max(1, args.threads)


def _format_flag_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_provenance(args, out_dir, extra=None):
    """Reproducibility sidecar: version, command, and flags, no clocks.

    The output path itself is omitted so reruns into different
    directories stay byte-identical.
    """
    skip = {"func", "command", "out"}
    lines = [f"version = {__version__}", f"command = {args.command}"]
    for key in sorted(vars(args)):
        if key in skip:
            continue
        lines.append(f"{key} = {_format_flag_value(getattr(args, key))}")
    for key in sorted(extra or {}):
        lines.append(f"{key} = {extra[key]}")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{args.command}.provenance")
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_frame_dir(path):
    """Load every PNG/PGM in a directory, sorted by file name."""
    if not os.path.isdir(path):
        raise FormatError(f"frame directory not found: {path}")
    names = sorted(n for n in os.listdir(path)
                   if n.lower().endswith(_IMAGE_EXTS))
    if not names:
        raise FormatError(f"no frames (*.png, *.pgm) found in {path}")
    return [load_image(os.path.join(path, n)) for n in names], names


def _read_single_homography(path):
    mats = read_homographies(path)
    if not mats:
        raise FormatError(f"no homography found in {path}")
    return mats[0]


def read_config(path):
    """Parse a line-oriented ``key = value`` config file.

    '#' starts a comment; blank lines are ignored.

    Raises:
        FormatError: On a line without '=', naming the line.
    """
    out = {}
    with open(path, "r", encoding="ascii") as fh:
        for ln, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise FormatError(f"{path}:{ln}: expected key = value")
            key, value = body.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _train_config(raw, args):
    """Coerce config-file strings into a TrainConfig, CLI flags filling
    the gaps."""
    defaults = TrainConfig()
    kw = {"seed": args.seed, "deterministic": args.deterministic}
    for key, value in raw.items():
        if not hasattr(defaults, key):
            raise FormatError(f"unknown training config key {key!r}")
        current = getattr(defaults, key)
        try:
            if isinstance(current, bool):
                kw[key] = _parse_bool(value, f"config key {key!r}")
            elif isinstance(current, int):
                kw[key] = int(value)
            elif isinstance(current, float):
                kw[key] = float(value)
            else:
                kw[key] = value
        except ValueError as e:
            raise FormatError(f"config key {key!r}: {e}") from e
    kw["deterministic"] = kw["deterministic"] or args.deterministic
    kw["checkpoint_path"] = args.out
    if "log_path" not in raw:
        kw["log_path"] = os.path.splitext(args.out)[0] + "_log.csv"
    return TrainConfig(**kw)


def _out_dir(path):
    return os.path.dirname(os.path.abspath(path))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args):
    if args.frames < 1:
        raise ParameterError("frames must be >= 1")
    try:
        w_str, h_str = args.size.lower().split("x")
        width, height = int(w_str), int(h_str)
    except ValueError as e:
        raise ParameterError(
            f"size must look like 720x576, got {args.size!r}") from e
    if width < 32 or height < 32:
        raise ParameterError(f"size must be at least 32x32, got {args.size}")
    frames = synth_frames(args.frames, width=width, height=height,
                          seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    for i, frame in enumerate(frames):
        save_image(frame, os.path.join(args.out, f"frame_{i:04d}.png"))
    _write_provenance(args, args.out)
    _say(args, f"wrote {len(frames)} {width}x{height} frames to {args.out}")
    return 0


def cmd_gen_pairs(args):
    frames, _ = _load_frame_dir(args.frames)
    ds = generate_pairs(frames, per_kp=args.per_kp, max_kp=args.max_kp,
                        seed=args.seed, threads=_effective_threads(args))
    save_dataset(ds, args.out)
    _write_provenance(args, _out_dir(args.out))
    _say(args, f"pairs={len(ds)} rejected={ds.provenance['rejected']}")
    return 0


def cmd_train(args):
    ds = load_dataset(args.pairs)
    raw = read_config(args.config) if args.config else {}
    cfg = _train_config(raw, args)
    net, records = train(ds, cfg)
    _write_provenance(args, _out_dir(args.out),
                      extra={f"config.{k}": _format_flag_value(getattr(cfg, k))
                             for k in vars(cfg)})
    summary = [r for r in records if r.epoch_mean_loss is not None]
    if summary:
        last = summary[-1]
        _say(args, f"epochs={cfg.epochs} final_mean_loss="
                   f"{last.epoch_mean_loss:.4f} val_precision="
                   f"{last.val_precision:.4f} val_matching_score="
                   f"{last.val_matching_score:.4f}")
    else:
        _say(args, f"epochs={cfg.epochs} (no training steps)")
    _say(args, f"checkpoint: {cfg.checkpoint_path}\nlog: {cfg.log_path}")
    return 0


def _detect_and_describe(img, net, args, kp_csv=None):
    enhanced = clahe(img) if args.enhance else img
    if kp_csv:
        kps = read_keypoints(kp_csv)
    else:
        kps = detect_harris(enhanced, max_n=args.max_kp)
    return describe(enhanced, kps, net)


def cmd_match(args):
    net = load_checkpoint(args.model)
    img_a = load_image(args.image_a)
    img_b = load_image(args.image_b)
    desc_a, kept_a = _detect_and_describe(img_a, net, args, args.kp_a)
    desc_b, kept_b = _detect_and_describe(img_b, net, args, args.kp_b)
    matches = match_nn(desc_a, desc_b, mutual=args.mutual,
                       max_dist=args.max_dist)
    stem = args.out[:-4] if args.out.lower().endswith(".csv") else args.out
    write_matches_csv(matches, args.out)
    # match indices refer to these kept key-point lists
    write_keypoints(kept_a, stem + "_kps_a.csv")
    write_keypoints(kept_b, stem + "_kps_b.csv")
    _write_provenance(args, _out_dir(args.out))
    _say(args, f"{len(matches)} matches from {len(kept_a)} x {len(kept_b)} "
               f"key-points")
    return 0


def cmd_eval(args):
    matches = read_matches_csv(args.matches)
    kps_a = read_keypoints(args.kp_a)
    kps_b = read_keypoints(args.kp_b)
    h = _read_single_homography(args.homography)
    report = score_matches(matches, kps_a, kps_b, h, pe=args.pe)
    write_eval_csv(report, args.out)
    if args.pr_out:
        if not matches:
            raise ParameterError(
                "cannot compute a precision-recall curve without matches")
        curve = pr_curve(matches, kps_a, kps_b, h, pe=args.pe)
        with open(args.pr_out, "w", encoding="ascii", newline="") as fh:
            fh.write(PR_HEADER + "\n")
            for t, p, r in curve:
                fh.write(f"{t!r},{p!r},{r!r}\n")
    _write_provenance(args, _out_dir(args.out))
    _say(args, f"precision={report.precision:.4f} recall={report.recall:.4f} "
               f"matching_score={report.matching_score:.4f} pe={report.pe}")
    return 0


def cmd_sweep(args):
    frames, _ = _load_frame_dir(args.frames)
    cfg = SweepConfig(max_kp=args.max_kp, pe=args.pe,
                      corner_shift=args.corner_shift, enhance=args.enhance,
                      mutual=args.mutual)
    threads = min(_effective_threads(args), len(frames))
    if threads == 1:
        net = load_checkpoint(args.model)
        rows, means = robustness_sweep(frames, net, args.mode, cfg=cfg,
                                       seed=args.seed)
    else:
        chunks = [c.tolist() for c in
                  np.array_split(np.arange(len(frames)), threads)]

        def work(chunk):
            # per-worker network: forward passes reuse internal buffers
            local = load_checkpoint(args.model)
            sub, _ = robustness_sweep([frames[i] for i in chunk], local,
                                      args.mode, cfg=cfg, seed=args.seed,
                                      frame_ids=chunk)
            return sub

        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
        rows = [row for part in parts for row in part]
        means = sweep_means(rows)
    write_sweep_csv(rows, args.out)
    _write_provenance(args, _out_dir(args.out))
    for label, (mp, mr) in means.items():
        _say(args, f"{args.mode} {label}: mean precision {mp:.4f}, "
                   f"mean recall {mr:.4f}")
    return 0


def cmd_mosaic(args):
    frames, _ = _load_frame_dir(args.frames)
    if len(frames) < 2:
        raise ParameterError("mosaic needs at least 2 frames")
    net = load_checkpoint(args.model)
    descs, kepts = [], []
    for frame in frames:
        enhanced = clahe(frame) if args.enhance else frame
        kps = detect_harris(enhanced, max_n=args.max_kp)
        desc, kept = describe(enhanced, kps, net)
        descs.append(desc)
        kepts.append(kps_xy(kept) if kept else np.zeros((0, 2)))
    correspondences = []
    for k in range(len(frames) - 1):
        matches = match_nn(descs[k], descs[k + 1], mutual=True)
        if len(matches) < 4:
            raise NumericalError(
                f"only {len(matches)} matches between frames ({k}, {k + 1});"
                f" registration needs >= 4")
        src = kepts[k][[m.i for m in matches]]
        dst = kepts[k + 1][[m.j for m in matches]]
        correspondences.append((src, dst))
    pano = compose_panorama(frames, correspondences,
                            reference=args.reference, blend=args.blend,
                            iters=args.iters, inlier_px=args.inlier_px,
                            seed=args.seed, threads=_effective_threads(args))
    os.makedirs(args.out, exist_ok=True)
    save_image(np.clip(pano.canvas, 0.0, 1.0),
               os.path.join(args.out, "panorama.png"))
    write_homographies(pano.homographies,
                       os.path.join(args.out, "homographies.txt"))
    _write_provenance(args, args.out)
    ch, cw = pano.canvas.shape
    _say(args, f"panorama {cw}x{ch}, coverage "
               f"{float(pano.coverage.mean()):.3f}, origin {pano.origin}")
    return 0


# ---------------------------------------------------------------------------
# plotting (hand-emitted SVG; CSVs stay the source of truth)


def _svg_header(width, height, title):
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}" '
            f'font-family="sans-serif" font-size="12">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" '
            f'font-size="14">{title}</text>']


def _svg_series(lines, xs, ys, color, series):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"'
                 f' points="{pts}"/>')
    for x, y in zip(xs, ys):
        lines.append(f'<circle class="{series}" cx="{x:.2f}" cy="{y:.2f}" '
                     f'r="3" fill="{color}"/>')


def _plot_svg(x_labels, x_title, series, title):
    """Build an SVG line chart.

    Args:
        x_labels: Tick label per x position.
        x_title: X-axis caption (from the CSV header).
        series: Dict name -> y-value list on a [0, 1] axis.
        title: Chart title.

    Returns:
        str: Complete SVG document.
    """
    width, height = 640, 400
    left, right, top, bottom = 60.0, 150.0, 40.0, 50.0
    px = width - left - right
    py = height - top - bottom
    n = len(x_labels)
    xs = [left + (px / 2 if n == 1 else i * px / (n - 1)) for i in range(n)]

    def ypix(v):
        return top + (1.0 - v) * py

    lines = _svg_header(width, height, title)
    # frame and gridlines at quarter steps
    for q in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = ypix(q)
        lines.append(f'<line x1="{left:.1f}" y1="{y:.1f}" '
                     f'x2="{left + px:.1f}" y2="{y:.1f}" stroke="#ddd"/>')
        lines.append(f'<text x="{left - 8:.1f}" y="{y + 4:.1f}" '
                     f'text-anchor="end">{q:g}</text>')
    lines.append(f'<line x1="{left:.1f}" y1="{top:.1f}" x2="{left:.1f}" '
                 f'y2="{top + py:.1f}" stroke="black"/>')
    lines.append(f'<line x1="{left:.1f}" y1="{top + py:.1f}" '
                 f'x2="{left + px:.1f}" y2="{top + py:.1f}" stroke="black"/>')
    for x, label in zip(xs, x_labels):
        lines.append(f'<text x="{x:.1f}" y="{top + py + 16:.1f}" '
                     f'text-anchor="middle">{label}</text>')
    lines.append(f'<text x="{left + px / 2:.1f}" y="{height - 12:.1f}" '
                 f'text-anchor="middle">{x_title}</text>')
    for i, (name, ys) in enumerate(series.items()):
        color = _SERIES_COLORS[i % len(_SERIES_COLORS)]
        _svg_series(lines, xs, [ypix(v) for v in ys], color, name)
        ly = top + 14 * i
        lines.append(f'<rect x="{left + px + 12:.1f}" y="{ly - 8:.1f}" '
                     f'width="10" height="10" fill="{color}"/>')
        lines.append(f'<text x="{left + px + 26:.1f}" y="{ly + 1:.1f}">'
                     f'{name}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_plot(args):
    with open(args.input, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
    title = args.title or os.path.basename(args.input)
    if header == SWEEP_HEADER:
        rows = read_sweep_csv(args.input)
        if not rows:
            raise FormatError(f"{args.input} has no data rows")
        labels = list(dict.fromkeys(r[2] for r in rows))
        series = {}
        for i, name in enumerate(("precision", "recall", "matching_score")):
            series[name] = [float(np.mean([r[3 + i] for r in rows
                                           if r[2] == label]))
                            for label in labels]
        svg = _plot_svg(labels, "condition", series, title)
    elif header == PR_HEADER:
        rows = []
        with open(args.input, "r", encoding="ascii") as fh:
            next(fh)
            for ln, line in enumerate(fh, 2):
                if not line.strip():
                    continue
                parts = line.strip().split(",")
                if len(parts) != 3:
                    raise FormatError(
                        f"{args.input}:{ln}: expected 3 fields")
                try:
                    rows.append(tuple(float(p) for p in parts))
                except ValueError as e:
                    raise FormatError(f"{args.input}:{ln}: {e}") from e
        if not rows:
            raise FormatError(f"{args.input} has no data rows")
        labels = [f"{t:.3g}" for t, _, _ in rows]
        series = {"precision": [p for _, p, _ in rows],
                  "recall": [r for _, _, r in rows]}
        svg = _plot_svg(labels, "threshold", series, title)
    else:
        raise FormatError(
            f"unsupported CSV header for plotting: {header!r}")
    with open(args.out, "w", encoding="ascii", newline="") as fh:
        fh.write(svg)
    _write_provenance(args, _out_dir(args.out))
    _say(args, f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser assembly


def build_parser():
    """Build the argument parser; global flag defaults honor PATCHDESC_*
    environment overrides."""
    seed_default = _env_default("SEED", int, 0)
    threads_default = _env_default("THREADS", int, 1)
    det_default = _env_default("DETERMINISTIC", bool, False)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=seed_default,
                        help="master random seed (default: %(default)s)")
    common.add_argument("--threads", type=int, default=threads_default,
                        help="worker thread bound for parallel stages "
                             "(default: %(default)s)")
    common.add_argument("--deterministic", action="store_true",
                        default=det_default,
                        help="single-threaded ordered execution and "
                             "clock-free logs (default: %(default)s)")
    common.add_argument("--quiet", action="store_true",
                        help="suppress progress output")

    parser = argparse.ArgumentParser(
        prog="patchdesc",
        description="Self-supervised local feature descriptor toolkit.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    p = sub.add_parser("synth-data", parents=[common],
                       help="generate synthetic grayscale frames as PNGs")
    p.add_argument("--frames", type=int, default=20,
                   help="number of frames (default: %(default)s)")
    p.add_argument("--size", default="720x576",
                   help="frame size as WxH (default: %(default)s)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("gen-pairs", parents=[common],
                       help="build an anchor/positive patch-pair archive "
                            "from frames")
    p.add_argument("--frames", required=True, help="frame directory")
    p.add_argument("--out", required=True, help="output pair archive path")
    p.add_argument("--per-kp", type=int, default=2,
                   help="positives per key-point (default: %(default)s)")
    p.add_argument("--max-kp", type=int, default=200,
                   help="detections per frame (default: %(default)s)")
    p.set_defaults(func=cmd_gen_pairs)

    p = sub.add_parser("train", parents=[common],
                       help="train the descriptor network on a pair archive")
    p.add_argument("--pairs", required=True, help="pair archive path")
    p.add_argument("--config",
                   help="key = value training config file ('#' comments)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", parents=[common],
                       help="match key-points between two images")
    p.add_argument("--image-a", required=True, help="source image")
    p.add_argument("--image-b", required=True, help="target image")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--out", required=True,
                   help="match CSV path; kept key-point CSVs are written "
                        "alongside")
    p.add_argument("--kp-a", help="external source key-point CSV")
    p.add_argument("--kp-b", help="external target key-point CSV")
    p.add_argument("--max-kp", type=int, default=200,
                   help="detections per image (default: %(default)s)")
    p.add_argument("--mutual", action="store_true",
                   help="keep mutual nearest neighbors only")
    p.add_argument("--max-dist", type=float, default=None,
                   help="drop matches with embedding distance above this")
    p.add_argument("--no-enhance", dest="enhance", action="store_false",
                   help="skip local contrast equalization")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", parents=[common],
                       help="score a match CSV against a ground-truth "
                            "homography")
    p.add_argument("--matches", required=True, help="match CSV path")
    p.add_argument("--kp-a", required=True, help="source key-point CSV")
    p.add_argument("--kp-b", required=True, help="target key-point CSV")
    p.add_argument("--homography", required=True,
                   help="ground-truth homography file (9 values per line)")
    p.add_argument("--pe", type=float, default=5.0,
                   help="projection-error threshold in px "
                        "(default: %(default)s)")
    p.add_argument("--out", required=True, help="evaluation CSV path")
    p.add_argument("--pr-out",
                   help="also write a threshold,precision,recall CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common],
                       help="run a viewpoint/scale/blur robustness sweep")
    p.add_argument("--frames", required=True, help="frame directory")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--mode", required=True,
                   choices=("viewpoint", "scale", "blur"))
    p.add_argument("--out", required=True, help="sweep CSV path")
    p.add_argument("--max-kp", type=int, default=200,
                   help="detections per image (default: %(default)s)")
    p.add_argument("--pe", type=float, default=5.0,
                   help="projection-error threshold (default: %(default)s)")
    p.add_argument("--corner-shift", type=float, default=15.0,
                   help="viewpoint corner perturbation in px "
                        "(default: %(default)s)")
    p.add_argument("--mutual", action="store_true",
                   help="keep mutual nearest neighbors only")
    p.add_argument("--no-enhance", dest="enhance", action="store_false",
                   help="skip local contrast equalization")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("mosaic", parents=[common],
                       help="stitch a frame directory into a panorama")
    p.add_argument("--frames", required=True, help="frame directory")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--reference", type=int, default=0,
                   help="frame whose coordinates anchor the canvas "
                        "(default: %(default)s)")
    p.add_argument("--blend", choices=("feather", "overwrite"),
                   default="feather",
                   help="compositing mode (default: %(default)s)")
    p.add_argument("--iters", type=int, default=2000,
                   help="RANSAC iterations per pair (default: %(default)s)")
    p.add_argument("--inlier-px", type=float, default=3.0,
                   help="RANSAC inlier threshold (default: %(default)s)")
    p.add_argument("--max-kp", type=int, default=200,
                   help="detections per frame (default: %(default)s)")
    p.add_argument("--no-enhance", dest="enhance", action="store_false",
                   help="skip local contrast equalization")
    p.set_defaults(func=cmd_mosaic)

    p = sub.add_parser("plot", parents=[common],
                       help="render a sweep or precision-recall CSV as SVG")
    p.add_argument("--input", required=True, help="sweep or PR CSV path")
    p.add_argument("--out", required=True, help="SVG output path")
    p.add_argument("--title", help="chart title (default: input file name)")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None):
    """CLI entry point; returns the process exit code."""
    try:
        parser = build_parser()
    except ParameterError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 0 for --help/--version and 2 for usage errors;
        # usage failures are exit code 1 here
        code = e.code if isinstance(e.code, int) else 1
        return 0 if code == 0 else 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except ParameterError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NumericalError, GeometryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
