"""Dense feed-forward network engine.

Hand-rolled MLPs (ReLU hidden layers, identity output) with exact
backpropagation, an adaptive-moment optimizer with a two-phase learning
rate schedule, soft target updates, state normalization, and a binary
model-file format.  Parameters live in one flat vector per network;
weights and biases are reshaped views into it, which keeps optimizer and
target-update passes to a handful of vectorized operations.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from typing import Iterable, Optional, Sequence

import numpy as np


class NonFiniteGradientError(RuntimeError):
    """Raised when an optimizer step receives NaN or infinite gradients."""


class Grads:
    """Per-parameter gradients for one Mlp, backed by a flat vector."""

    def __init__(self, layer_sizes: Sequence[int], dtype, flat: Optional[np.ndarray] = None):
        n = sum((a + 1) * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))
        self.flat = np.empty(n, dtype=dtype) if flat is None else flat
        self.weights, self.biases = _views(self.flat, layer_sizes)


def _views(flat: np.ndarray, layer_sizes: Sequence[int]):
    weights, biases, offset = [], [], 0
    for a, b in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(flat[offset : offset + a * b].reshape(a, b))
        offset += a * b
        biases.append(flat[offset : offset + b])
        offset += b
    return weights, biases


class Mlp:
    """Fully-connected network: ReLU hidden activations, identity output.

    The ReLU subgradient at exactly 0 is taken to be 0.
    """

    def __init__(self, layer_sizes: Sequence[int], flat: np.ndarray):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output layer sizes")
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self._flat = flat
        self.weights, self.biases = _views(flat, self.layer_sizes)
        if not np.all(np.isfinite(flat)):
            raise ValueError("network parameters must be finite")

    @classmethod
    def create(cls, layer_sizes: Sequence[int], rng: np.random.Generator, dtype=np.float64) -> "Mlp":
        """Initialize weights uniform in +-1/sqrt(fan_in), biases zero."""
        n = sum((a + 1) * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))
        flat = np.zeros(n, dtype=dtype)
        net = cls(layer_sizes, flat)
        for W in net.weights:
            bound = 1.0 / np.sqrt(W.shape[0])
            W[...] = rng.uniform(-bound, bound, size=W.shape).astype(dtype)
        return net

    @property
    def dtype(self):
        return self._flat.dtype

    @property
    def n_params(self) -> int:
        return self._flat.size

    @property
    def flat_params(self) -> np.ndarray:
        return self._flat

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self._flat.copy())

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the network on a single input vector or a batch."""
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 1
        a = x.reshape(1, -1) if single else x
        if a.shape[1] != self.layer_sizes[0]:
            raise ValueError(
                f"input has {a.shape[1]} features, network expects {self.layer_sizes[0]}"
            )
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ W + b
            if i < last:
                np.maximum(a, 0.0, out=a)
        return a[0] if single else a

    def forward_cached(self, x: np.ndarray):
        """Batch forward pass returning (output, activations) for backward."""
        a = np.asarray(x, dtype=self.dtype)
        acts = [a]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ W + b
            if i < last:
                np.maximum(a, 0.0, out=a)
            acts.append(a)
        return acts[-1], acts

    def backward_cached(self, acts: list, grad_out: np.ndarray, need_input_grad: bool = True) -> tuple:
        """Backpropagate `grad_out` through cached activations.

        Returns (Grads, input gradient).  Gradients are exact partial
        derivatives of the forward output contracted with `grad_out`.
        With `need_input_grad=False` the returned input gradient is None
        (skips one matmul; training updates never use it).
        """
        grads = Grads(self.layer_sizes, self.dtype)
        g = np.asarray(grad_out, dtype=self.dtype)
        for i in range(len(self.weights) - 1, -1, -1):
            np.matmul(acts[i].T, g, out=grads.weights[i])
            g.sum(axis=0, out=grads.biases[i])
            if i == 0 and not need_input_grad:
                return grads, None
            g = g @ self.weights[i].T
            if i > 0:
                g *= acts[i] > 0
        return grads, g

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> tuple:
        """Forward + backward for a single input vector or a batch."""
        x = np.asarray(x, dtype=self.dtype)
        g = np.asarray(grad_out, dtype=self.dtype)
        single = x.ndim == 1
        if single:
            x = x.reshape(1, -1)
            g = g.reshape(1, -1)
        _, acts = self.forward_cached(x)
        grads, gin = self.backward_cached(acts, g)
        return grads, (gin[0] if single else gin)


class Adam:
    """Adaptive-moment optimizer with an optional learning-rate switch.

    The learning rate is `lr` until the optimizer's own step counter
    reaches `switch_step`, then `lr_after`.
    """

    def __init__(
        self,
        net: Mlp,
        lr: float,
        *,
        lr_after: Optional[float] = None,
        switch_step: Optional[int] = None,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.lr = float(lr)
        self.lr_after = float(lr_after) if lr_after is not None else None
        self.switch_step = int(switch_step) if switch_step is not None else None
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = np.zeros(net.n_params, dtype=net.dtype)
        self.v = np.zeros(net.n_params, dtype=net.dtype)
        self._buf = np.empty(net.n_params, dtype=net.dtype)
        self._buf2 = np.empty(net.n_params, dtype=net.dtype)

    @property
    def current_lr(self) -> float:
        if self.switch_step is not None and self.lr_after is not None and self.t >= self.switch_step:
            return self.lr_after
        return self.lr

    def step(self, net: Mlp, grads: Grads, context: str = "") -> None:
        g = grads.flat
        # sum-based check: any NaN/inf in g makes the total non-finite
        if not np.isfinite(float(g.sum())):
            raise NonFiniteGradientError(
                f"non-finite gradients{f' in {context}' if context else ''}; step rejected"
            )
        lr = self.current_lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        buf, buf2 = self._buf, self._buf2
        # m <- b1*m + (1-b1)*g ; v <- b2*v + (1-b2)*g^2   (in place, no temps)
        np.subtract(g, self.m, out=buf)
        buf *= 1.0 - b1
        self.m += buf
        np.multiply(g, g, out=buf)
        buf -= self.v
        buf *= 1.0 - b2
        self.v += buf
        # bias-corrected update with the corrections folded into scalars:
        # lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
        #   = (lr*s2/(1-b1^t)) * m / (sqrt(v) + eps*s2),  s2 = sqrt(1-b2^t)
        s2 = np.sqrt(1.0 - b2**self.t)
        np.sqrt(self.v, out=buf2)
        buf2 += self.eps * s2
        np.divide(self.m, buf2, out=buf)
        buf *= lr * s2 / (1.0 - b1**self.t)
        net.flat_params[...] -= buf


def soft_update(target: Mlp, source: Mlp, tau: float) -> Mlp:
    """Blend target parameters toward source: t <- tau*s + (1-tau)*t."""
    if target.layer_sizes != source.layer_sizes:
        raise ValueError("soft_update requires identical architectures")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    t = target.flat_params
    t *= 1.0 - tau
    t += tau * source.flat_params
    return target


@dataclasses.dataclass
class Normalizer:
    """Per-dimension shift/scale of state variables to zero mean, unit std."""

    mean: np.ndarray
    std: np.ndarray

    STD_FLOOR = 1e-6

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, samples: np.ndarray) -> "Normalizer":
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] < 2:
            raise ValueError("fit requires a 2-D array with at least 2 samples")
        mean = samples.mean(axis=0)
        std = np.maximum(samples.std(axis=0), cls.STD_FLOOR)
        return cls(mean, std)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# ---------------------------------------------------------------------------
# Model files
#
# Layout: 8-byte little-endian unsigned header length, then that many bytes
# of UTF-8 JSON, then the parameter blob as little-endian float64.  The blob
# concatenates each network's flat parameter vector in the header's listed
# order; within a network, layers appear in order as row-major weight matrix
# (fan_in x fan_out) followed by bias vector.  The header records each
# network's runtime dtype so loading restores bitwise-identical parameters.
# ---------------------------------------------------------------------------

MODEL_FORMAT = "llql-model-v1"


@dataclasses.dataclass
class ModelFile:
    nets: dict
    normalizer: Optional[Normalizer]
    meta: dict


def save_model(path, nets: dict, normalizer: Optional[Normalizer] = None, meta: Optional[dict] = None) -> None:
    header = {
        "format": MODEL_FORMAT,
        "nets": [
            {"name": name, "layer_sizes": list(net.layer_sizes), "dtype": np.dtype(net.dtype).name}
            for name, net in nets.items()
        ],
        "normalizer": normalizer.to_dict() if normalizer is not None else None,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = np.concatenate([net.flat_params.astype(np.float64) for net in nets.values()])
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blob.astype("<f8").tobytes())


def load_model(path) -> ModelFile:
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format") != MODEL_FORMAT:
            raise ValueError(f"{path}: not a {MODEL_FORMAT} file")
        blob = np.frombuffer(fh.read(), dtype="<f8")
    nets = {}
    offset = 0
    for entry in header["nets"]:
        sizes = entry["layer_sizes"]
        n = sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))
        flat = blob[offset : offset + n].astype(entry["dtype"])
        offset += n
        nets[entry["name"]] = Mlp(sizes, flat)
    normalizer = Normalizer.from_dict(header["normalizer"]) if header["normalizer"] else None
    return ModelFile(nets=nets, normalizer=normalizer, meta=header["meta"])
