"""The patch classifier network: 9 conv blocks, 2 FC layers, softmax.

Layer plan for a [N, 1, 51, 51] input batch:

    3 x (conv3x3 + batchnorm + relu), 32 channels
    maxpool 2x2                       -> 25 x 25
    3 x (conv3x3 + batchnorm + relu), 64 channels
    maxpool 2x2                       -> 12 x 12
    3 x (conv3x3 + batchnorm + relu), 128 channels
    global average pool               -> 128
    dense 128 -> 512, dropout 0.5, dense 512 -> 5, softmax

Checkpoint files are versioned little-endian binaries storing every array
(trainable parameters and batch-norm running statistics) as float32, keyed by
name, plus an architecture fingerprint and training metadata.  Byte layout is
documented in ``CHECKPOINT_LAYOUT``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .errors import (
    CorruptCheckpointError,
    FingerprintMismatchError,
    ShapeError,
    VersionMismatchError,
)

NUM_CLASSES = 5
PATCH_SIZE = 51
CHANNEL_PLAN = (32, 32, 32, 64, 64, 64, 128, 128, 128)
POOL_AFTER_BLOCKS = (3, 6)  # 1-based block indices
FC1_UNITS = 512
DROPOUT_RATIO = 0.5

CHECKPOINT_MAGIC = b"OCTPLQCK"
CHECKPOINT_VERSION = 1

CHECKPOINT_LAYOUT = """\
Checkpoint byte layout (all integers little-endian):
  magic               8 bytes  'OCTPLQCK'
  version             uint32
  fingerprint        32 bytes  sha256 of the architecture description string
  iteration           uint64
  best_val_accuracy   float64
  seed                uint64
  array_count         uint32
  array_count records of:
    name_length       uint16
    name              utf-8 bytes
    ndim              uint8
    dims              uint32 x ndim
    data              float32 x prod(dims), row-major
No trailing bytes are permitted.
"""


@dataclass
class Param:
    """A trainable array paired with its gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)


class ConvBlock:
    """conv3x3 (same padding) + batch normalization + ReLU."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype):
        fan_in = in_ch * 9
        std = np.sqrt(2.0 / fan_in)
        self.weight = Param((rng.normal(0.0, std, (out_ch, in_ch, 3, 3))).astype(dtype))
        self.bias = Param(np.zeros(out_ch, dtype=dtype))
        self.gamma = Param(np.ones(out_ch, dtype=dtype))
        self.beta = Param(np.zeros(out_ch, dtype=dtype))
        self.running_mean = np.zeros(out_ch, dtype=dtype)
        self.running_var = np.ones(out_ch, dtype=dtype)
        self.in_ch = in_ch
        self.out_ch = out_ch

    def forward(self, x, mode):
        z, conv_cache = layers.conv2d_forward(x, self.weight.value, self.bias.value)
        z, bn_cache = layers.batchnorm_forward(
            z, self.gamma.value, self.beta.value,
            self.running_mean, self.running_var, mode,
        )
        y, relu_cache = layers.relu_forward(z)
        return y, (conv_cache, bn_cache, relu_cache)

    def backward(self, dy, cache):
        conv_cache, bn_cache, relu_cache = cache
        dz = layers.relu_backward(dy, relu_cache)
        dz, dgamma, dbeta = layers.batchnorm_backward(dz, bn_cache)
        dx, dweight, dbias = layers.conv2d_backward(dz, conv_cache)
        self.weight.grad += dweight
        self.bias.grad += dbias
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class PlaqueNet:
    """Fixed-topology 5-class patch classifier.

    Build via :func:`build_plaquenet`; the constructor only allocates arrays.
    """

    def __init__(self, seed: int, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        rng = np.random.Generator(np.random.PCG64(self.seed))
        self.blocks: list[ConvBlock] = []
        in_ch = 1
        for out_ch in CHANNEL_PLAN:
            self.blocks.append(ConvBlock(in_ch, out_ch, rng, self.dtype))
            in_ch = out_ch
        fc_in = CHANNEL_PLAN[-1]
        self.fc1_weight = Param(
            rng.normal(0.0, np.sqrt(2.0 / fc_in), (FC1_UNITS, fc_in)).astype(self.dtype)
        )
        self.fc1_bias = Param(np.zeros(FC1_UNITS, dtype=self.dtype))
        self.fc2_weight = Param(
            rng.normal(0.0, np.sqrt(2.0 / FC1_UNITS), (NUM_CLASSES, FC1_UNITS)).astype(self.dtype)
        )
        self.fc2_bias = Param(np.zeros(NUM_CLASSES, dtype=self.dtype))
        self._caches = None
        self.last_trace: list[tuple[str, tuple]] = []

    # ---- parameter bookkeeping -------------------------------------------

    def named_params(self):
        """Yield (name, Param) for every trainable array, in a fixed order."""
        for i, b in enumerate(self.blocks, start=1):
            yield f"block{i}.conv.weight", b.weight
            yield f"block{i}.conv.bias", b.bias
            yield f"block{i}.bn.gamma", b.gamma
            yield f"block{i}.bn.beta", b.beta
        yield "fc1.weight", self.fc1_weight
        yield "fc1.bias", self.fc1_bias
        yield "fc2.weight", self.fc2_weight
        yield "fc2.bias", self.fc2_bias

    def named_stats(self):
        """Yield (name, array) for non-trainable running statistics."""
        for i, b in enumerate(self.blocks, start=1):
            yield f"block{i}.bn.running_mean", b.running_mean
            yield f"block{i}.bn.running_var", b.running_var

    def zero_grads(self):
        for _, p in self.named_params():
            p.grad[...] = 0

    # ---- forward / backward ----------------------------------------------

    def forward(
        self,
        x: np.ndarray,
        mode: str = "inference",
        dropout_rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Map [N, 1, H, W] patches to [N, 5] class probabilities."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected [N,1,H,W] input, got {x.shape}")
        if mode == "train" and dropout_rng is None:
            raise ValueError("train-mode forward requires a dropout rng")
        caches = []
        trace = [("input", x.shape)]
        for i, block in enumerate(self.blocks, start=1):
            x, cache = block.forward(x, mode)
            caches.append(("block", block, cache))
            trace.append((f"block{i}", x.shape))
            if i in POOL_AFTER_BLOCKS:
                x, cache = layers.maxpool2x2_forward(x)
                caches.append(("maxpool", None, cache))
                trace.append((f"pool{i}", x.shape))
        x, cache = layers.global_avg_pool_forward(x)
        caches.append(("gap", None, cache))
        trace.append(("global_pool", x.shape))
        x, cache = layers.dense_forward(x, self.fc1_weight.value, self.fc1_bias.value)
        caches.append(("fc1", None, cache))
        x, cache = layers.dropout_forward(x, DROPOUT_RATIO, mode, dropout_rng)
        caches.append(("dropout", None, cache))
        logits, cache = layers.dense_forward(x, self.fc2_weight.value, self.fc2_bias.value)
        caches.append(("fc2", None, cache))
        trace.append(("logits", logits.shape))
        probs = layers.softmax(logits)
        self._caches = caches
        self.last_trace = trace
        return probs

    def backward(self, dlogits: np.ndarray):
        """Backpropagate a gradient w.r.t. the pre-softmax logits.

        Accumulates into every Param's ``grad``; requires a preceding forward.
        """
        if self._caches is None:
            raise RuntimeError("backward called without a saved forward pass")
        grad = dlogits
        for kind, block, cache in reversed(self._caches):
            if kind == "block":
                grad = block.backward(grad, cache)
            elif kind == "maxpool":
                grad = layers.maxpool2x2_backward(grad, cache)
            elif kind == "gap":
                grad = layers.global_avg_pool_backward(grad, cache)
            elif kind == "fc1":
                dx, dw, db = layers.dense_backward(grad, cache)
                self.fc1_weight.grad += dw
                self.fc1_bias.grad += db
                grad = dx
            elif kind == "dropout":
                grad = layers.dropout_backward(grad, cache)
            elif kind == "fc2":
                dx, dw, db = layers.dense_backward(grad, cache)
                self.fc2_weight.grad += dw
                self.fc2_bias.grad += db
                grad = dx
        self._caches = None
        return grad

    # ---- identity ----------------------------------------------------------

    @staticmethod
    def architecture_description() -> str:
        parts = []
        in_ch = 1
        for i, out_ch in enumerate(CHANNEL_PLAN, start=1):
            parts.append(f"conv3x3:{in_ch}->{out_ch}+bn+relu")
            if i in POOL_AFTER_BLOCKS:
                parts.append("maxpool2x2")
            in_ch = out_ch
        parts.append("gap")
        parts.append(f"dense:{CHANNEL_PLAN[-1]}->{FC1_UNITS}")
        parts.append(f"dropout:{DROPOUT_RATIO}")
        parts.append(f"dense:{FC1_UNITS}->{NUM_CLASSES}")
        parts.append("softmax")
        return "|".join(parts)

    @classmethod
    def fingerprint(cls) -> bytes:
        return hashlib.sha256(cls.architecture_description().encode()).digest()


def build_plaquenet(seed: int, dtype=np.float32) -> PlaqueNet:
    """Build the fixed architecture with seeded initialization."""
    return PlaqueNet(seed, dtype)


def count_trainable_params(net: PlaqueNet) -> int:
    """Total size of all trainable arrays (running statistics excluded)."""
    return sum(p.value.size for _, p in net.named_params())


# ---- checkpoints -----------------------------------------------------------


def save_checkpoint(net: PlaqueNet, metadata: dict, path) -> None:
    """Write the network to ``path``.

    ``metadata`` keys: iteration (int), best_val_accuracy (float), seed (int);
    missing keys default to 0.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    chunks.append(net.fingerprint())
    chunks.append(
        struct.pack(
            "<QdQ",
            int(metadata.get("iteration", 0)),
            float(metadata.get("best_val_accuracy", 0.0)),
            int(metadata.get("seed", 0)),
        )
    )
    arrays = [(name, p.value) for name, p in net.named_params()]
    arrays += list(net.named_stats())
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[PlaqueNet, dict]:
    """Load a checkpoint; returns (network, metadata)."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError("bad magic; not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {version}, supported {CHECKPOINT_VERSION}"
        )
    fingerprint = r.take(32)
    if fingerprint != PlaqueNet.fingerprint():
        raise FingerprintMismatchError(
            "checkpoint was written for a different architecture"
        )
    iteration, best_acc, seed = r.unpack("<QdQ")
    (array_count,) = r.unpack("<I")
    arrays = {}
    for _ in range(array_count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        data = np.frombuffer(
            r.take(4 * int(np.prod(shape, dtype=np.int64))), dtype="<f4"
        ).reshape(shape)
        arrays[name] = data
    if r.pos != len(r.data):
        raise CorruptCheckpointError(
            f"{len(r.data) - r.pos} trailing bytes after last array"
        )

    net = PlaqueNet(seed=int(seed), dtype=np.float32)
    expected = dict(net.named_params())
    stats = dict(net.named_stats())
    wanted = set(expected) | set(stats)
    if wanted != set(arrays):
        raise CorruptCheckpointError("checkpoint array names do not match the model")
    for name, p in expected.items():
        if arrays[name].shape != p.value.shape:
            raise CorruptCheckpointError(f"array {name} has shape {arrays[name].shape}")
        p.value[...] = arrays[name]
    for name, arr in stats.items():
        arr[...] = arrays[name]
    metadata = {
        "iteration": iteration,
        "best_val_accuracy": best_acc,
        "seed": int(seed),
    }
    return net, metadata
