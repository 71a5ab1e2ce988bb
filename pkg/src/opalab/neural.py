"""Small dense-network toolkit: layers with hand-written backward passes, masked softmax, Adam.

Arrays are row-major with the batch on the first axis; a dense layer computes
``act(x @ W + b)`` with ``W`` of shape ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class TrainingError(FloatingPointError):
    """Non-finite values reached an update."""


ACTIVATIONS = ("relu", "sigmoid", "identity")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def activate(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * pre))
    if kind == "identity":
        return pre
    raise ValueError(f"unknown activation {kind!r}")


def activate_backward(pre: np.ndarray, out: np.ndarray, grad: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return grad * (pre > 0)
    if kind == "sigmoid":
        return grad * out * (1.0 - out)
    return grad


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ValueError("bias length must equal the layer's output width")

    @classmethod
    def init(cls, rng: np.random.Generator, fan_in: int, fan_out: int, activation: str = "identity",
             dtype=np.float64) -> "DenseLayer":
        return cls(glorot(rng, fan_in, fan_out, dtype), np.zeros(fan_out, dtype=dtype), activation)


def dense_forward(layer: DenseLayer, x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Returns the activation and the cache needed by :func:`dense_backward`."""
    if x.shape[-1] != layer.weight.shape[0]:
        raise ValueError(f"input width {x.shape[-1]} != layer fan-in {layer.weight.shape[0]}")
    pre = x @ layer.weight + layer.bias
    out = activate(pre, layer.activation)
    return out, (x, pre, out)


def dense_backward(layer: DenseLayer, cache: tuple, grad_out: np.ndarray):
    """``(grad_weight, grad_bias, grad_input)`` for a batch of rows."""
    x, pre, out = cache
    g = activate_backward(pre, out, grad_out, layer.activation)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    return x2.T @ g2, g2.sum(axis=0), g @ layer.weight.T


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("masked_softmax needs at least one unmasked entry per row")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-probabilities; masked entries are ``-inf``."""
    mask = np.asarray(mask, dtype=bool)
    z = np.where(mask, logits, -np.inf)
    top = z.max(axis=-1, keepdims=True)
    lse = top + np.log(np.where(mask, np.exp(z - top), 0.0).sum(axis=-1, keepdims=True))
    return np.where(mask, logits - lse, -np.inf)


def masked_softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logits; zero wherever ``probs`` is zero (masked)."""
    inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam descent step, applied to ``params`` in place."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], config: dict) -> None:
    """``npz`` archive of named tensors plus a JSON block describing the network."""
    meta = json.dumps({"version": CHECKPOINT_VERSION, "config": config})
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(meta), **{f"p:{k}": v for k, v in params.items()})


def load_checkpoint(path: str | Path, expected: dict[str, np.ndarray] | None = None):
    """Returns ``(params, config)``; with ``expected``, names and shapes must match exactly."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = {k[2:]: data[k].copy() for k in data.files if k.startswith("p:")}
    if expected is not None:
        if set(params) != set(expected):
            raise ValueError(f"checkpoint tensors {sorted(set(params) ^ set(expected))} do not match")
        for k, v in expected.items():
            if params[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {params[k].shape} vs {v.shape}")
    return params, meta["config"]
