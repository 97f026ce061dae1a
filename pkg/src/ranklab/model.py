"""Embedding networks mapping images onto the unit hypersphere.

Two architectures are provided:

``c2f2``  conv(32, 5x5) -> relu -> pool2 -> conv(64, 5x5) -> relu -> pool2
          -> dense(1024) -> relu -> dense(D) -> l2-normalize
``mlp``   flatten -> dense(256) -> relu -> dense(D) -> l2-normalize
"""

from __future__ import annotations

import hashlib
import io
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, FormatError
from .tensor import Tensor

ARCHS = ("c2f2", "mlp")
CHECKPOINT_MAGIC = b"RANKLAB\x00"
CHECKPOINT_VERSION = 1


def _conv_out(n, k):
    return n - k + 1


def c2f2_shapes(D, input_shape=(1, 28, 28)):
    """Parameter shapes of C2F2, derived from the layer arithmetic."""
    c, h, w = input_shape
    h1, w1 = _conv_out(h, 5) // 2, _conv_out(w, 5) // 2
    h2, w2 = _conv_out(h1, 5) // 2, _conv_out(w1, 5) // 2
    if min(h1, w1) < 5 or min(h2, w2) < 1:
        raise DimensionError(f"input {input_shape} too small for C2F2")
    flat = 64 * h2 * w2
    return {
        "conv1.weight": (32, c, 5, 5), "conv1.bias": (32,),
        "conv2.weight": (64, 32, 5, 5), "conv2.bias": (64,),
        "fc1.weight": (flat, 1024), "fc1.bias": (1024,),
        "fc2.weight": (1024, D), "fc2.bias": (D,),
    }


def mlp_shapes(D, input_shape=(1, 28, 28), hidden=256):
    flat = int(np.prod(input_shape))
    return {
        "fc1.weight": (flat, hidden), "fc1.bias": (hidden,),
        "fc2.weight": (hidden, D), "fc2.bias": (D,),
    }


def _kaiming_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class EmbeddingModel:
    def __init__(self, arch, D, input_shape, params):
        if arch not in ARCHS:
            raise ContractError(f"unknown architecture {arch!r}; choose from {ARCHS}")
        self.arch = arch
        self.D = int(D)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.params = params  # ordered: declaration order is insertion order

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    @property
    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def copy(self):
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return EmbeddingModel(self.arch, self.D, self.input_shape, params)

    @contextmanager
    def frozen(self):
        """Treat parameters as constants (input-gradient-only passes)."""
        flags = [p.requires_grad for p in self.params.values()]
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(self.params.values(), flags):
                p.requires_grad = f

    def forward(self, x):
        """Embed a batch ``(N, C, H, W)``; returns an ``(N, D)`` tensor of unit rows."""
        x = T.as_tensor(x)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"model expects inputs of shape {self.input_shape}, got {tuple(x.shape[1:])}")
        p = self.params
        if self.arch == "c2f2":
            h = T.conv2d(x, p["conv1.weight"]) + p["conv1.bias"].reshape(1, -1, 1, 1)
            h = T.maxpool2d(T.relu(h), 2)
            h = T.conv2d(h, p["conv2.weight"]) + p["conv2.bias"].reshape(1, -1, 1, 1)
            h = T.maxpool2d(T.relu(h), 2)
            h = h.reshape(h.shape[0], -1)
        else:
            h = x.reshape(x.shape[0], -1)
        h = T.relu(h @ p["fc1.weight"] + p["fc1.bias"])
        h = h @ p["fc2.weight"] + p["fc2.bias"]
        return T.l2_normalize(h, axis=-1)

    __call__ = forward

    def embed(self, images, chunk=512):
        """Embeddings as a plain array, without building a gradient graph."""
        images = np.asarray(images, dtype=np.float64)
        with self.frozen():
            out = [self.forward(images[i:i + chunk]).data for i in range(0, len(images), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.D))

    # --- checkpoints -------------------------------------------------
    def to_bytes(self, metadata=""):
        buf = io.BytesIO()
        arch = self.arch.encode("ascii")
        meta = metadata.encode("utf-8")
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<IH", CHECKPOINT_VERSION, len(arch)))
        buf.write(arch)
        buf.write(struct.pack("<I3I", self.D, *self.input_shape))
        buf.write(struct.pack("<H", len(meta)))
        buf.write(meta)
        buf.write(struct.pack("<I", len(self.params)))
        for name, p in self.params.items():
            nb = name.encode("ascii")
            buf.write(struct.pack("<HB", len(nb), p.ndim))
            buf.write(nb)
            buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
            buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return buf.getvalue()

    def save(self, path, metadata=""):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(metadata))

    def fingerprint(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]


def checkpoint_from_bytes(raw):
    """Parse checkpoint bytes; returns ``(model, metadata)``."""
    pos = 0

    def need(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError("checkpoint truncated", pos)
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if need(8) != CHECKPOINT_MAGIC:
        raise FormatError("not a ranklab checkpoint (bad magic)", 0)
    version, alen = struct.unpack("<IH", need(6))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    arch = need(alen).decode("ascii", "replace")
    if arch not in ARCHS:
        raise FormatError(f"unknown architecture tag {arch!r}", 14)
    D, c, h, w = struct.unpack("<I3I", need(16))
    (mlen,) = struct.unpack("<H", need(2))
    metadata = need(mlen).decode("utf-8")
    (count,) = struct.unpack("<I", need(4))
    expected = (c2f2_shapes if arch == "c2f2" else mlp_shapes)(D, (c, h, w))
    if count != len(expected):
        raise FormatError(f"checkpoint holds {count} tensors, {arch} needs {len(expected)}", pos - 4)
    params = {}
    for want_name, want_shape in expected.items():
        at = pos
        nlen, ndim = struct.unpack("<HB", need(3))
        name = need(nlen).decode("ascii", "replace")
        shape = struct.unpack(f"<{ndim}I", need(4 * ndim))
        if name != want_name or tuple(shape) != tuple(want_shape):
            raise FormatError(f"tensor {name}{shape} does not match {want_name}{want_shape}", at)
        n = int(np.prod(shape))
        data = np.frombuffer(need(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Tensor(data, requires_grad=True)
    if pos != len(raw):
        raise FormatError("trailing bytes after checkpoint", pos)
    return EmbeddingModel(arch, D, (c, h, w), params), metadata


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def build(arch, D, input_shape=(1, 28, 28), seed=0):
    """Fresh model with Kaiming-uniform (fan-in) weights and zero biases."""
    if D < 2:
        raise ContractError("embedding dimension D must be >= 2")
    if arch == "c2f2":
        shapes = c2f2_shapes(D, input_shape)
    elif arch == "mlp":
        shapes = mlp_shapes(D, input_shape)
    else:
        raise ContractError(f"unknown architecture {arch!r}; choose from {ARCHS}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        data = np.zeros(shape) if name.endswith("bias") else _kaiming_uniform(rng, shape)
        params[name] = Tensor(data, requires_grad=True)
    return EmbeddingModel(arch, D, input_shape, params)


def c2f2(D, input_shape=(1, 28, 28), seed=0):
    return build("c2f2", D, input_shape, seed)


def mlp(D, input_shape=(1, 28, 28), seed=0):
    return build("mlp", D, input_shape, seed)


# --- optimiser -------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def sgd_adam_step(model, grads, lr, state):
    """One Adam update with constant learning rate ``lr``.

    ``grads`` lists one array per parameter in declaration order; pass
    ``None`` to read each parameter's ``.grad``.
    """
    params = model.parameters()
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params) or any(g is None for g in grads):
        missing = [n for (n, p), g in zip(model.named_parameters(), grads) if g is None]
        raise ContractError(f"missing gradient for parameters {missing}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
