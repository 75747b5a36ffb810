"""Minimal tensor math with explicit reverse-mode gradients.

Exactly the layers the descriptor network needs: 2-D convolution, batch
normalization, ReLU, L2 normalization, and classical-momentum SGD. Layers
are written as small classes with forward/backward methods rather than a
general autodiff graph: the architecture is a fixed 7-layer chain, and
explicit backward keeps the core small and auditable.

Tensors are plain numpy arrays. Layers accept activations in NCHW (the
default) or channel-major CNHW. Internally both run the same channel-major
kernels: with the batch axis inside the channel axis, one GEMM per block
covers all samples, im2col gathers are plain slice copies, and the GEMM
output is already in the layout the next layer wants, so the descriptor
net (which selects CNHW) runs transpose-free end to end. Storage is
32-bit; every layer accepts dtype=float64 for gradient-check runs. All
reductions are single-threaded numpy and therefore deterministic in
index order.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.linalg.blas import dgemm, sgemm

from .errors import ParameterError

# im2col chunk sizing: bound each chunk's column buffer so large batches
# never materialize the full gathered tensor at once while the merged
# GEMM still sees a wide inner dimension.
_CHUNK_TARGET_BYTES = 64 << 20

_LAYOUTS = ("nchw", "cnhw")

_GEMMS = {np.dtype(np.float32): sgemm, np.dtype(np.float64): dgemm}


def _check_layout(layout: str) -> str:
    if layout not in _LAYOUTS:
        raise ParameterError(f"layout must be one of {_LAYOUTS}, got {layout!r}")
    return layout


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather conv windows of a padded CNHW block into (c*kh*kw, n*oh*ow).

    Row (c, i, j) holds tap (i, j) of channel c for every sample and
    output position; with channel-major input every tap is a contiguous
    slice copy, no axis permutation.
    """
    c, n = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(c * kh * kw, n * oh * ow)


def _col2im_add(dcols: np.ndarray, dxp: np.ndarray, kh: int, kw: int,
                stride: int, oh: int, ow: int) -> None:
    """Scatter-add column gradients back onto the padded CNHW gradient."""
    c, n = dxp.shape[:2]
    d6 = dcols.reshape(c, kh, kw, n, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dst = dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            dst += d6[:, i, j]


class ConvLayer:
    """2-D cross-correlation (no kernel flip) with zero padding.

    Weights have shape (out_ch, in_ch, kh, kw); He-uniform fan-in init,
    zero bias. Forward uses chunked im2col plus one merged GEMM per chunk;
    the final 8x8 valid-padding layer reduces to a single dense GEMM. With
    cache_cols=True the forward keeps each chunk's column buffer so the
    next backward skips the re-gather (costs memory, saves a pass).
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int | tuple[int, int],
                 stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 layout: str = "nchw"):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if min(in_ch, out_ch, kh, kw, stride) < 1 or padding < 0:
            raise ParameterError("conv dimensions must be positive, padding >= 0")
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kh, self.kw = int(kh), int(kw)
        self.stride, self.padding = int(stride), int(padding)
        self.dtype = np.dtype(dtype)
        self.layout = _check_layout(layout)
        self.cache_cols = False
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = math.sqrt(6.0 / (in_ch * kh * kw))
        self.weights = rng.uniform(-bound, bound,
                                   (out_ch, in_ch, kh, kw)).astype(self.dtype)
        self.bias = np.zeros(out_ch, dtype=self.dtype)
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self._xp: np.ndarray | None = None
        self._dims: tuple | None = None
        self._cols: list[np.ndarray] | None = None
        self._bufs: dict = {}

    def _get(self, name: str, shape: tuple) -> np.ndarray:
        """Persistent named scratch buffer; starts zeroed when (re)created.

        Reusing these across calls avoids repeated large allocations and
        keeps padding ghost cells zero once written, since every call
        overwrites exactly the same interior region.
        """
        b = self._bufs.get(name)
        if b is None or b.shape != shape:
            b = np.zeros(shape, dtype=self.dtype)
            self._bufs[name] = b
        return b

    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]

    def grads(self) -> list[np.ndarray]:
        return [self.grad_weights, self.grad_bias]

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kh) // self.stride + 1
        ow = (w + 2 * self.padding - self.kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ParameterError(
                f"conv output extent {oh}x{ow} < 1 for input {h}x{w}, "
                f"kernel {self.kh}x{self.kw}, stride {self.stride}, padding {self.padding}")
        return oh, ow

    def _check(self, x: np.ndarray) -> None:
        ch_axis = 1 if self.layout == "nchw" else 0
        if x.ndim != 4 or x.shape[ch_axis] != self.in_ch:
            raise ParameterError(
                f"shape mismatch: input {tuple(x.shape)} vs weights "
                f"{tuple(self.weights.shape)} ({self.layout.upper()} with "
                f"{self.in_ch} channels expected)")

    def _chunk(self, oh: int, ow: int) -> int:
        ckk = self.in_ch * self.kh * self.kw
        return max(1, _CHUNK_TARGET_BYTES // (ckk * oh * ow * self.dtype.itemsize))

    def _dense(self, h: int, w: int) -> bool:
        return (self.padding == 0 and self.stride == 1
                and self.kh == h and self.kw == w)

    def _path(self, h: int, w: int) -> str:
        """Pick the compute scheme for this geometry.

        3x3/pad-1 convolutions avoid im2col entirely: a spatial shift by
        (i, j) is a constant offset i*Wp+j in the flattened padded grid,
        so each kernel tap is one GEMM on a contiguous slice, accumulated
        in place (BLAS beta=1). Stride 2 first splits the grid into the
        four row/column parity phases, where the same identity holds on
        quarter planes. Everything else falls back to im2col.
        """
        if self._dense(h, w):
            return "dense"
        if (self.kh == 3 and self.kw == 3 and self.padding == 1
                and self.dtype in _GEMMS):
            if self.stride == 1:
                return "shift1"
            if self.stride == 2 and h % 2 == 0 and w % 2 == 0:
                return "shift2"
        return "im2col"

    def _taps_f(self) -> list[np.ndarray]:
        """The 9 kernel taps as (in_ch, out_ch) Fortran-order matrices."""
        return [np.asfortranarray(self.weights[:, :, i, j].T)
                for i in range(3) for j in range(3)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check(x)
        x = np.asarray(x, dtype=self.dtype)
        xc = x.transpose(1, 0, 2, 3) if self.layout == "nchw" else x
        c, n, h, w = xc.shape
        oh, ow = self.out_size(h, w)
        self._dims = (n, h, w)
        self._cols = None
        path = self._path(h, w)
        if path == "dense":
            out = self._fwd_dense(xc, n)
        elif path == "shift1":
            out = self._fwd_shift1(xc, n, h, w)
        elif path == "shift2":
            out = self._fwd_shift2(xc, n, h, w)
        else:
            out = self._fwd_im2col(xc, n, h, w, oh, ow)
        if self.layout == "nchw":
            return np.ascontiguousarray(out.transpose(1, 0, 2, 3))
        return out

    def backward(self, dout: np.ndarray, need_dx: bool = True) -> np.ndarray | None:
        if self._xp is None:
            raise ParameterError("backward called before forward")
        dout = np.asarray(dout, dtype=self.dtype)
        if self.layout == "nchw":
            dc = np.ascontiguousarray(dout.transpose(1, 0, 2, 3))
        else:
            dc = np.ascontiguousarray(dout)
        n, h, w = self._dims
        self.grad_bias = dc.sum(axis=(1, 2, 3))
        path = self._path(h, w)
        if path == "dense":
            dxc = self._bwd_dense(dc, n, h, w, need_dx)
        elif path == "shift1":
            dxc = self._bwd_shift1(dc, n, h, w, need_dx)
        elif path == "shift2":
            dxc = self._bwd_shift2(dc, n, h, w, need_dx)
        else:
            dxc = self._bwd_im2col(dc, n, h, w, need_dx)
        if dxc is None:
            return None
        return dxc.transpose(1, 0, 2, 3) if self.layout == "nchw" else dxc

    # -- dense: the kernel covers the whole input, one plain GEMM

    def _fwd_dense(self, xc: np.ndarray, n: int) -> np.ndarray:
        # flatten each sample to a (c*kh*kw) column, matching wmat rows
        xd = np.ascontiguousarray(xc.transpose(0, 2, 3, 1)).reshape(-1, n)
        self._xp = xd
        out2 = self.weights.reshape(self.out_ch, -1) @ xd
        out2 += self.bias[:, None]
        return out2.reshape(self.out_ch, n, 1, 1)

    def _bwd_dense(self, dc, n, h, w, need_dx):
        d2 = dc.reshape(self.out_ch, n)
        xd = self._xp
        self.grad_weights = (d2 @ xd.T).reshape(self.weights.shape)
        if not need_dx:
            return None
        dxd = self.weights.reshape(self.out_ch, -1).T @ d2
        return np.ascontiguousarray(
            dxd.reshape(self.in_ch, h, w, n).transpose(0, 3, 1, 2))

    # -- shift1: stride-1 3x3 pad-1, tap GEMMs on the flat padded grid

    def _fwd_shift1(self, xc, n, h, w):
        gemm = _GEMMS[self.dtype]
        itm = self.dtype.itemsize
        hp, wp = h + 2, w + 2
        t = n * hp * wp
        xpt = self._get("xpt", (t, self.in_ch))
        xpt.reshape(n, hp, wp, self.in_ch)[:, 1:1 + h, 1:1 + w] = \
            xc.transpose(1, 2, 3, 0)
        # output position (s, y, x) lives at flat index s*hp*wp + y*wp + x;
        # tap (i, j) reads the slice shifted by i*wp + j
        tout = t - 2 * wp - 2
        r = self._get("fwd_r", (self.out_ch, tout))
        for k, wf in enumerate(self._taps_f()):
            d = (k // 3) * wp + k % 3
            gemm(1.0, xpt[d:d + tout].T, wf, beta=0.0 if k == 0 else 1.0,
                 c=r.T, overwrite_c=1, trans_a=1)
        r += self.bias[:, None]
        self._xp = xpt
        return as_strided(r, (self.out_ch, n, h, w),
                          (tout * itm, hp * wp * itm, wp * itm, itm))

    def _bwd_shift1(self, dc, n, h, w, need_dx):
        gemm = _GEMMS[self.dtype]
        hp, wp = h + 2, w + 2
        t = n * hp * wp
        tout = t - 2 * wp - 2
        xpt = self._xp
        dwt = self._get("dwt", (t, self.out_ch))
        dwt.reshape(n, hp, wp, self.out_ch)[:, 0:h, 0:w] = dc.transpose(1, 2, 3, 0)
        dw4 = np.empty_like(self.weights)
        for k in range(9):
            d = (k // 3) * wp + k % 3
            g = gemm(1.0, xpt[d:d + tout].T, dwt[:tout].T, trans_b=1)
            dw4[:, :, k // 3, k % 3] = g.T
        self.grad_weights = dw4
        if not need_dx:
            return None
        # tap 0 covers rows [0, tout) with beta=0, so only the tail needs
        # explicit zeroing before the other taps accumulate
        dxpt = self._get("dxpt", (t, self.in_ch))
        dxpt[tout:] = 0
        for k, wf in enumerate(self._taps_f()):
            d = (k // 3) * wp + k % 3
            gemm(1.0, wf, dwt[:tout].T, beta=0.0 if k == 0 else 1.0,
                 c=dxpt[d:d + tout].T, overwrite_c=1)
        dxv = dxpt.reshape(n, hp, wp, self.in_ch)[:, 1:1 + h, 1:1 + w]
        dx = self._get("bwd_dx", (self.in_ch, n, h, w))
        dx[...] = dxv.transpose(3, 0, 1, 2)
        return dx

    # -- shift2: stride-2 3x3 pad-1 on even extents; split the padded grid
    # into row/column parity phases, then tap GEMMs as in shift1

    def _split_shift2(self, h, w):
        qh, qw = (h + 2) // 2, (w + 2) // 2
        return qh, qw, h // 2, w // 2

    def _fwd_shift2(self, xc, n, h, w):
        gemm = _GEMMS[self.dtype]
        itm = self.dtype.itemsize
        qh, qw, oh, ow = self._split_shift2(h, w)
        tq = n * qh * qw
        phases = {}
        for a in (0, 1):
            for b in (0, 1):
                ph = self._get(f"ph{a}{b}", (tq, self.in_ch))
                ph.reshape(n, qh, qw, self.in_ch)[
                    :, 1 - a:1 - a + oh, 1 - b:1 - b + ow] = \
                    xc[:, :, 1 - a::2, 1 - b::2].transpose(1, 2, 3, 0)
                phases[a, b] = ph
        toutq = tq - qw - 1
        r = self._get("fwd_r", (self.out_ch, toutq))
        for k, wf in enumerate(self._taps_f()):
            i, j = k // 3, k % 3
            d = (i // 2) * qw + j // 2
            gemm(1.0, phases[i % 2, j % 2][d:d + toutq].T, wf,
                 beta=0.0 if k == 0 else 1.0, c=r.T, overwrite_c=1, trans_a=1)
        r += self.bias[:, None]
        self._xp = phases
        return as_strided(r, (self.out_ch, n, oh, ow),
                          (toutq * itm, qh * qw * itm, qw * itm, itm))

    def _bwd_shift2(self, dc, n, h, w, need_dx):
        gemm = _GEMMS[self.dtype]
        qh, qw, oh, ow = self._split_shift2(h, w)
        tq = n * qh * qw
        toutq = tq - qw - 1
        phases = self._xp
        dwt = self._get("dwt", (tq, self.out_ch))
        dwt.reshape(n, qh, qw, self.out_ch)[:, 0:oh, 0:ow] = dc.transpose(1, 2, 3, 0)
        if self.in_ch == 1:
            # single input channel: stack the 9 shifted activation rows and
            # take one GEMM instead of nine passes over the big dwt panel
            a9 = np.empty((9, toutq), dtype=self.dtype)
            for k in range(9):
                i, j = k // 3, k % 3
                d = (i // 2) * qw + j // 2
                a9[k] = phases[i % 2, j % 2][d:d + toutq, 0]
            g9 = gemm(1.0, a9.T, dwt[:toutq].T, trans_a=1, trans_b=1)
            self.grad_weights = np.ascontiguousarray(
                g9.T.reshape(self.out_ch, 1, 3, 3))
        else:
            dw4 = np.empty_like(self.weights)
            for k in range(9):
                i, j = k // 3, k % 3
                d = (i // 2) * qw + j // 2
                g = gemm(1.0, phases[i % 2, j % 2][d:d + toutq].T,
                         dwt[:toutq].T, trans_b=1)
                dw4[:, :, i, j] = g.T
            self.grad_weights = dw4
        if not need_dx:
            return None
        taps = self._taps_f()
        # taps 0, 1, 3, 4 are the first to hit their parity phase and all
        # have shift 0, so they write [0, toutq) with beta=0 and only the
        # tails need explicit zeroing
        dps = {ab: self._get(f"dp{ab[0]}{ab[1]}", (tq, self.in_ch))
               for ab in phases}
        for dp in dps.values():
            dp[toutq:] = 0
        for k in range(9):
            i, j = k // 3, k % 3
            d = (i // 2) * qw + j // 2
            gemm(1.0, taps[k], dwt[:toutq].T,
                 beta=0.0 if k in (0, 1, 3, 4) else 1.0,
                 c=dps[i % 2, j % 2][d:d + toutq].T, overwrite_c=1)
        dx = self._get("bwd_dx", (self.in_ch, n, h, w))
        for (a, b), dp in dps.items():
            dv = dp.reshape(n, qh, qw, self.in_ch)[
                :, 1 - a:1 - a + oh, 1 - b:1 - b + ow]
            dx[:, :, 1 - a::2, 1 - b::2] = dv.transpose(3, 0, 1, 2)
        return dx

    # -- im2col fallback for every other geometry

    def _fwd_im2col(self, xc, n, h, w, oh, ow):
        p = self.padding
        if p:
            xp = np.zeros((self.in_ch, n, h + 2 * p, w + 2 * p), dtype=self.dtype)
            xp[:, :, p:p + h, p:p + w] = xc
        else:
            xp = np.ascontiguousarray(xc)
        self._xp = xp
        wmat = self.weights.reshape(self.out_ch, -1)
        out = np.empty((self.out_ch, n, oh, ow), dtype=self.dtype)
        chunk = self._chunk(oh, ow)
        keep = [] if self.cache_cols else None
        for c0 in range(0, n, chunk):
            c1 = min(c0 + chunk, n)
            cols = _im2col(xp[:, c0:c1], self.kh, self.kw, self.stride, oh, ow)
            if keep is not None:
                keep.append(cols)
            out[:, c0:c1] = (wmat @ cols).reshape(self.out_ch, c1 - c0, oh, ow)
        self._cols = keep
        out += self.bias.reshape(-1, 1, 1, 1)
        return out

    def _bwd_im2col(self, dc, n, h, w, need_dx):
        oh, ow = self.out_size(h, w)
        p = self.padding
        xp = self._xp
        wmat = self.weights.reshape(self.out_ch, -1)
        dmat = dc.reshape(self.out_ch, -1)
        dw = np.zeros((self.out_ch, wmat.shape[1]), dtype=self.dtype)
        dxp = np.zeros_like(xp) if need_dx else None
        per = oh * ow
        chunk = self._chunk(oh, ow)
        cached = self._cols
        self._cols = None
        for k, c0 in enumerate(range(0, n, chunk)):
            c1 = min(c0 + chunk, n)
            if cached is not None:
                cols = cached[k]
                cached[k] = None
            else:
                cols = _im2col(xp[:, c0:c1], self.kh, self.kw, self.stride, oh, ow)
            dslice = dmat[:, c0 * per:c1 * per]
            dw += dslice @ cols.T
            if need_dx:
                dcols = wmat.T @ dslice
                _col2im_add(dcols, dxp[:, c0:c1], self.kh, self.kw, self.stride, oh, ow)
        self.grad_weights = dw.reshape(self.weights.shape)
        if not need_dx:
            return None
        return np.ascontiguousarray(dxp[:, :, p:p + h, p:p + w]) if p else dxp


class BatchNormLayer:
    """Per-channel batch normalization over NCHW or CNHW activations.

    Train mode normalizes by batch statistics (biased variance) and updates
    running stats as running <- (1-momentum)*running + momentum*batch; eval
    mode normalizes by the running statistics.

    With inplace_grad=True backward writes dx into the incoming gradient
    buffer, which is only safe when the caller owns that buffer.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32, layout: str = "nchw",
                 inplace_grad: bool = False):
        self.channels = int(channels)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.dtype = np.dtype(dtype)
        self.layout = _check_layout(layout)
        self.inplace_grad = bool(inplace_grad)
        self.gamma = np.ones(channels, dtype=self.dtype)
        self.beta = np.zeros(channels, dtype=self.dtype)
        self.running_mean = np.zeros(channels, dtype=self.dtype)
        self.running_var = np.ones(channels, dtype=self.dtype)
        self.grad_gamma = np.zeros_like(self.gamma)
        self.grad_beta = np.zeros_like(self.beta)
        self._cache = None

    def params(self) -> list[np.ndarray]:
        return [self.gamma, self.beta]

    def grads(self) -> list[np.ndarray]:
        return [self.grad_gamma, self.grad_beta]

    def _cshape(self) -> tuple[int, int, int, int]:
        if self.layout == "nchw":
            return (1, self.channels, 1, 1)
        return (self.channels, 1, 1, 1)

    def _sig(self) -> str:
        return "nchw" if self.layout == "nchw" else "cnhw"

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        ch_axis = 1 if self.layout == "nchw" else 0
        if x.ndim != 4 or x.shape[ch_axis] != self.channels:
            raise ParameterError(
                f"shape mismatch: input {tuple(x.shape)} vs {self.channels} channels")
        x = np.asarray(x, dtype=self.dtype)
        cshape = self._cshape()
        sig = self._sig()
        if train:
            if x.shape[1 - ch_axis] < 2:
                raise ParameterError("batchnorm train mode needs batch size >= 2")
            cnt = x.size // self.channels
            # batch stats from one fused pass each: mean = E[x] and
            # biased var = E[x^2] - mean^2; einsum reduces strided conv
            # output views without materializing a contiguous copy
            mean = np.einsum(f"{sig}->c", x) / cnt
            var = np.einsum(f"{sig},{sig}->c", x, x) / cnt - mean * mean
            inv_std = (1.0 / np.sqrt(var + self.eps)).astype(self.dtype)
            mean = mean.astype(self.dtype)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(self.dtype)
            self._cache = (x, mean, inv_std, True)
        else:
            inv_std = (1.0 / np.sqrt(self.running_var + self.eps)).astype(self.dtype)
            mean = self.running_mean
            self._cache = (x, mean, inv_std, False)
        # one fused affine pass: y = x*a + b with a = gamma/std and
        # b = beta - mean*a, equal to gamma*xhat + beta
        a = self.gamma * inv_std
        b = self.beta - mean * a
        out = np.multiply(x, a.reshape(cshape))
        out += b.reshape(cshape)
        return out

    def backward(self, dout: np.ndarray, need_dx: bool = True) -> np.ndarray | None:
        if self._cache is None:
            raise ParameterError("backward called before forward")
        x, mean, inv_std, trained = self._cache
        dout = np.asarray(dout, dtype=self.dtype)
        cshape = self._cshape()
        sig = self._sig()
        # grad_gamma = sum(dout*xhat) = inv_std*(sum(dout*x) - mean*sum(dout))
        self.grad_beta = np.einsum(f"{sig}->c", dout)
        sxd = np.einsum(f"{sig},{sig}->c", dout, x)
        self.grad_gamma = (sxd - mean * self.grad_beta) * inv_std
        if not need_dx:
            return None
        a = self.gamma * inv_std
        sink = dout if self.inplace_grad and dout.flags.writeable else None
        if not trained:
            return np.multiply(dout, a.reshape(cshape), out=sink)
        n_per_ch = dout.size // self.channels
        # dx = a*(dout - sum(dxhat)/n - xhat*sum(dxhat*xhat)/n), dxhat =
        # gamma*dout; expanding xhat makes it affine in x: the x term has
        # coefficient -a*inv_std*grad_gamma/n and the rest is per channel
        c1 = a * inv_std * self.grad_gamma / n_per_ch
        c0 = (a * (inv_std * self.grad_gamma * mean - self.grad_beta)
              / n_per_ch)
        dx = np.multiply(dout, a.reshape(cshape), out=sink)
        dx -= np.multiply(x, c1.reshape(cshape))
        dx += c0.reshape(cshape)
        return dx


class ReluLayer:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0.

    With inplace=True both passes mutate their argument, which is only
    safe when the caller owns those buffers (the descriptor net does:
    batchnorm hands over a fresh output and caches its input, not it).
    """

    def __init__(self, inplace: bool = False):
        self.inplace = bool(inplace)
        self._out = None

    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        zero = x.dtype.type(0)
        out = np.maximum(x, zero, out=x) if self.inplace else np.maximum(x, zero)
        self._out = out
        return out

    def backward(self, dout: np.ndarray, need_dx: bool = True) -> np.ndarray | None:
        if self._out is None:
            raise ParameterError("backward called before forward")
        if not need_dx:
            return None
        mask = self._out > 0
        if self.inplace:
            return np.multiply(dout, mask, out=dout)
        return dout * mask


class L2NormalizeLayer:
    """Row-wise L2 normalization of a (batch, dim) matrix."""

    def __init__(self, eps: float = 1e-8):
        self.eps = float(eps)
        self._cache = None

    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2:
            raise ParameterError(f"expected (batch, dim) matrix, got shape {x.shape}")
        norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
        denom = np.maximum(norms, x.dtype.type(self.eps))
        y = x / denom
        self._cache = (y, denom, norms > self.eps)
        return y

    def backward(self, dout: np.ndarray, need_dx: bool = True) -> np.ndarray | None:
        if self._cache is None:
            raise ParameterError("backward called before forward")
        if not need_dx:
            return None
        y, denom, live = self._cache
        proj = (dout * y).sum(axis=1, keepdims=True)
        # rows at/below eps have constant denominator: plain scaling
        return np.where(live, (dout - y * proj) / denom, dout / denom)


def sgd_momentum_step(params: list[np.ndarray], grads: list[np.ndarray],
                      state: list[np.ndarray] | None = None,
                      lr: float = 0.001, momentum: float = 0.9) -> list[np.ndarray]:
    """Classical momentum update: v <- momentum*v - lr*g; w <- w + v.

    Mutates params in place. Pass state=None on the first step to get
    zero-initialized velocity buffers; returns the updated state.
    """
    if state is None:
        state = [np.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(state)):
        raise ParameterError("params, grads, and state must have equal length")
    for w, g, v in zip(params, grads, state):
        if w.shape != g.shape or w.shape != v.shape:
            raise ParameterError(
                f"shape mismatch in sgd step: param {w.shape}, grad {g.shape}, "
                f"velocity {v.shape}")
        v *= w.dtype.type(momentum)
        v -= w.dtype.type(lr) * g
        w += v
    return state


def grad_check(loss_fn, x: np.ndarray, analytic: np.ndarray, h: float = 1e-3,
               max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Compare an analytic gradient against central finite differences.

    Args:
        loss_fn: maps a tensor (same shape as x) to a float loss.
        x: evaluation point; perturbed copies are passed to loss_fn.
        analytic: backprop gradient of the loss at x, same shape as x.
        h: half step for the central difference.
        max_coords: if set, check a random sample of coordinates instead
            of all of them (for large tensors).
        rng: generator for the coordinate sample.

    Returns:
        Maximum relative error, with denominator max(|a|, |b|, 1e-8).
    """
    if analytic.shape != x.shape:
        raise ParameterError(
            f"gradient shape {analytic.shape} != input shape {x.shape}")
    flat = x.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = rng.choice(flat.size, size=max_coords, replace=False)
    worst = 0.0
    ana = analytic.reshape(-1)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        hi = float(loss_fn(x))
        flat[i] = orig - h
        lo = float(loss_fn(x))
        flat[i] = orig
        num = (hi - lo) / (2.0 * h)
        err = abs(num - ana[i]) / max(abs(num), abs(ana[i]), 1e-8)
        worst = max(worst, float(err))
    return worst
