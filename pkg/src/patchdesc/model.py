"""The descriptor network: 128x128 patch -> 128-D unit-norm descriptor.

Seven conv layers (filters 16,16,32,64,128,128,128; 3x3 kernels except a
final 8x8; padding 1 except 0 on the last; strides 2,1,2,1,2,2,1), each
followed by batch normalization, with ReLU after layers 1-6 only, then
flatten and L2 normalization. Spatial chain on 128x128 input:
64, 64, 32, 32, 16, 8, 1.

The stride schedule uses four stride-2 layers so the pre-final map is 8x8;
it alternates downsampling with feature mixing. Explicit L2 normalization
makes the training distance sqrt(2 - 2*a.b) a true metric. Checkpoint
format version 1 implies He-uniform fan-in init of conv weights.
"""

from __future__ import annotations

import numpy as np

from .binio import ByteReader, ByteWriter
from .errors import FormatError, ParameterError
from .nn_core import BatchNormLayer, ConvLayer, L2NormalizeLayer, ReluLayer

PATCH_SIZE = 128
DESCRIPTOR_DIM = 128

FILTERS = (16, 16, 32, 64, 128, 128, 128)
KERNELS = (3, 3, 3, 3, 3, 3, 8)
PADDINGS = (1, 1, 1, 1, 1, 1, 0)
STRIDES = (2, 1, 2, 1, 2, 2, 1)

CHECKPOINT_MAGIC = b"SSLDESC1"
CHECKPOINT_VERSION = 1


def preprocess_patch(patch: np.ndarray) -> np.ndarray:
    """Standardize a patch: subtract its mean, divide by max(std, 1e-6).

    Invariant under positive affine intensity changes; a constant patch
    maps to zeros. Works on a single patch (H, W) or a batch (B, H, W).
    """
    arr = np.asarray(patch, dtype=np.float32)
    axes = tuple(range(arr.ndim - 2, arr.ndim))
    mean = arr.mean(axis=axes, keepdims=True)
    std = arr.std(axis=axes, keepdims=True)
    return (arr - mean) / np.maximum(std, np.float32(1e-6))


class DescriptorNet:
    """The 7-layer convolutional descriptor with explicit backward."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.convs: list[ConvLayer] = []
        self.bns: list[BatchNormLayer] = []
        in_ch = 1
        # channel-major activations end to end: each conv's GEMM output is
        # already in the next layer's layout, so no transposes in the chain
        for out_ch, k, pad, stride in zip(FILTERS, KERNELS, PADDINGS, STRIDES):
            self.convs.append(ConvLayer(in_ch, out_ch, k, stride=stride,
                                        padding=pad, rng=rng, dtype=dtype,
                                        layout="cnhw"))
            self.bns.append(BatchNormLayer(out_ch, dtype=dtype, layout="cnhw",
                                           inplace_grad=True))
            in_ch = out_ch
        # in-place is safe here: batchnorm hands over a fresh buffer and
        # caches its input, and conv pads into a copy before its GEMM
        self.relus = [ReluLayer(inplace=True) for _ in range(6)]
        self.l2 = L2NormalizeLayer()

    # -- forward / backward

    def forward(self, patches: np.ndarray, train: bool = False) -> np.ndarray:
        """Map standardized patches (B, 128, 128) to descriptors (B, 128)."""
        x = np.asarray(patches, dtype=self.dtype)
        if x.ndim == 3:
            x = x[:, None, :, :]
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (PATCH_SIZE, PATCH_SIZE):
            raise ParameterError(
                f"expected patches (B, {PATCH_SIZE}, {PATCH_SIZE}), got {tuple(patches.shape)}")
        if train and x.shape[0] < 2:
            raise ParameterError("train-mode forward needs batch size >= 2")
        n = x.shape[0]
        # (B, 1, H, W) -> (1, B, H, W) is free: the channel extent is 1
        x = x.transpose(1, 0, 2, 3)
        for i in range(7):
            self.convs[i].cache_cols = train
            x = self.convs[i].forward(x)
            x = self.bns[i].forward(x, train=train)
            if i < 6:
                x = self.relus[i].forward(x)
        flat = np.ascontiguousarray(x.reshape(FILTERS[-1], n).T)
        return self.l2.forward(flat)

    def backward(self, dout: np.ndarray) -> None:
        """Backpropagate loss gradients (B, 128) into all parameter grads."""
        g = self.l2.backward(np.asarray(dout, dtype=self.dtype))
        g = np.ascontiguousarray(g.T).reshape(FILTERS[-1], g.shape[0], 1, 1)
        for i in range(6, -1, -1):
            if i < 6:
                g = self.relus[i].backward(g)
            g = self.bns[i].backward(g)
            g = self.convs[i].backward(g, need_dx=i > 0)

    # -- parameter access

    def params(self) -> list[np.ndarray]:
        out = []
        for conv, bn in zip(self.convs, self.bns):
            out += conv.params() + bn.params()
        return out

    def grads(self) -> list[np.ndarray]:
        out = []
        for conv, bn in zip(self.convs, self.bns):
            out += conv.grads() + bn.grads()
        return out

    def state_arrays(self) -> list[np.ndarray]:
        """All persistent arrays: weights, biases, BN params and stats."""
        out = []
        for conv, bn in zip(self.convs, self.bns):
            out += [conv.weights, conv.bias, bn.gamma, bn.beta,
                    bn.running_mean, bn.running_var]
        return out

    def count_parameters(self) -> int:
        return sum(a.size for a in self.state_arrays())


# ---------------------------------------------------------------------------
# Checkpoint persistence

def save_checkpoint(net: DescriptorNet, path: str) -> None:
    """Write a bit-exact checkpoint (magic SSLDESC1, trailing CRC32)."""
    w = ByteWriter()
    w.raw(CHECKPOINT_MAGIC)
    w.u32(CHECKPOINT_VERSION)
    for s in STRIDES:
        w.u32(s)
    for i, (conv, bn) in enumerate(zip(net.convs, net.bns), 1):
        name = f"conv{i}".encode("utf-8")
        w.u32(len(name))
        w.raw(name)
        w.u32(conv.weights.ndim)
        for ext in conv.weights.shape:
            w.u32(ext)
        w.f32s(conv.weights)
        for arr in (conv.bias, bn.gamma, bn.beta, bn.running_mean, bn.running_var):
            w.u32(arr.size)
            w.f32s(arr)
    with open(path, "wb") as fh:
        fh.write(w.finish())


def load_checkpoint(path: str) -> DescriptorNet:
    """Read a checkpoint written by save_checkpoint.

    Raises:
        FormatError: wrong magic/version, shape mismatch, truncation (with
            byte offset), or CRC mismatch.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    r = ByteReader(data, source=str(path))
    magic = r.raw(8)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    strides = tuple(r.u32() for _ in range(7))
    if strides != STRIDES:
        raise FormatError(f"{path}: stride schedule {strides} != {STRIDES}")
    net = DescriptorNet()
    for i, (conv, bn) in enumerate(zip(net.convs, net.bns), 1):
        nlen = r.u32()
        name = r.raw(nlen).decode("utf-8")
        if name != f"conv{i}":
            raise FormatError(f"{path}: layer {i} named {name!r} at byte {r.offset}")
        rank = r.u32()
        if rank != 4:
            raise FormatError(f"{path}: layer {i} weight rank {rank} at byte {r.offset}")
        shape = tuple(r.u32() for _ in range(4))
        if shape != conv.weights.shape:
            raise FormatError(
                f"{path}: layer {i} weight shape {shape} != {conv.weights.shape}")
        conv.weights = r.f32s(int(np.prod(shape))).reshape(shape)
        arrays = []
        for expect in (conv.bias, bn.gamma, bn.beta, bn.running_mean, bn.running_var):
            count = r.u32()
            if count != expect.size:
                raise FormatError(
                    f"{path}: layer {i} vector length {count} != {expect.size} "
                    f"at byte {r.offset}")
            arrays.append(r.f32s(count))
        conv.bias, bn.gamma, bn.beta, bn.running_mean, bn.running_var = arrays
    r.check_crc()
    return net


def expected_parameter_count() -> int:
    """Closed-form parameter count: sum of out*in*kh*kw + out + 4*out."""
    total = 0
    in_ch = 1
    for out_ch, k in zip(FILTERS, KERNELS):
        total += out_ch * in_ch * k * k + out_ch + 4 * out_ch
        in_ch = out_ch
    return total
