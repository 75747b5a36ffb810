"""Small shared helpers: quantization, seeded RNG, allocator tuning."""

from __future__ import annotations

import ctypes
import ctypes.util
import sys

import numpy as np

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator() -> bool:
    """Keep large numpy buffers on the malloc heap for fast reuse.

    By default glibc serves multi-megabyte allocations with mmap and
    returns them to the kernel on free, so every training step pays page
    faults for the same scratch tensors. Raising the mmap threshold lets
    freed blocks be reused directly. No-op on non-glibc platforms.

    Returns:
        bool: True if the allocator accepted both settings.
    """
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30) == 1
        ok = libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30) == 1 and ok
        return ok
    except (OSError, AttributeError):
        return False


def quantize_u8(img: np.ndarray) -> np.ndarray:
    """Quantize [0,1] intensities to uint8 with round-half-up."""
    x = np.asarray(img, dtype=np.float64)
    return np.clip(np.floor(x * 255.0 + 0.5), 0, 255).astype(np.uint8)


def dequantize_u8(raw: np.ndarray) -> np.ndarray:
    """Map uint8 samples back to [0,1] float32 intensities."""
    return np.asarray(raw, dtype=np.float32) / np.float32(255.0)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Build a generator keyed by a base seed plus optional stream indices.

    Distinct streams (e.g. per-frame, per-pair) get statistically
    independent generators while staying reproducible from one seed.
    """
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])
