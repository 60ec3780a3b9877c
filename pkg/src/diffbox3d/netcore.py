"""Minimal dense neural-network substrate.

Float64 parameter stores, MLP forward/backward with an explicit activation
tape, decoupled-weight-decay Adam, EMA, and a bit-exact binary checkpoint
format. No autodiff graph: topologies are fixed and small enough that a hand
tape keeps the numerics auditable (and cheap to gradient-check).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"DBX3D\x00"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named flat float64 arrays with a shape manifest."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        if arrays:
            for name, arr in arrays.items():
                self[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, arr: np.ndarray) -> None:
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in parameter {name!r}")
        self._arrays[name] = arr

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def names(self) -> list[str]:
        return list(self._arrays)

    def manifest(self) -> dict[str, tuple[int, ...]]:
        return {name: arr.shape for name, arr in self._arrays.items()}

    def clone(self) -> "ParamStore":
        return ParamStore({name: arr.copy() for name, arr in self._arrays.items()})

    def zeros_like(self) -> "ParamStore":
        return ParamStore({name: np.zeros_like(arr) for name, arr in self._arrays.items()})

    def items(self):
        return self._arrays.items()

    def n_params(self) -> int:
        return sum(arr.size for arr in self._arrays.values())

    def same_manifest(self, other: "ParamStore") -> bool:
        return self.manifest() == other.manifest()

    def save(self, path) -> None:
        """Versioned manifest + little-endian flat float64 arrays."""
        header = {
            "version": CHECKPOINT_VERSION,
            "dtype": "<f8",
            "entries": [{"name": n, "shape": list(a.shape)} for n, a in self._arrays.items()],
        }
        header_bytes = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(header_bytes)))
            fh.write(header_bytes)
            for arr in self._arrays.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a diffbox3d checkpoint")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode())
            if header["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
            store = cls()
            for entry in header["entries"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                raw = fh.read(count * 8)
                if len(raw) != count * 8:
                    raise ValueError(f"{path}: truncated checkpoint at entry {entry['name']!r}")
                store[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        return store


# ---------------------------------------------------------------------------
# MLP with explicit tape
# ---------------------------------------------------------------------------


def init_mlp(
    store: ParamStore, prefix: str, sizes: list[int], rng: np.random.Generator
) -> None:
    """He-initialized affine layers named {prefix}.w{i} / {prefix}.b{i}."""
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = np.sqrt(2.0 / fan_in)
        store[f"{prefix}.w{i}"] = rng.normal(0.0, std, size=(fan_in, fan_out))
        store[f"{prefix}.b{i}"] = np.zeros(fan_out)


def mlp_layer_count(store: ParamStore, prefix: str) -> int:
    n = 0
    while f"{prefix}.w{n}" in store:
        n += 1
    if n == 0:
        raise KeyError(f"no layers found under prefix {prefix!r}")
    return n


@dataclass
class MlpTape:
    """Per-layer inputs and pre-activations from a forward pass."""

    prefix: str
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)


def mlp_forward(store: ParamStore, prefix: str, x: np.ndarray) -> tuple[np.ndarray, MlpTape]:
    """Affine layers with ReLU between hidden layers; last layer is linear."""
    x = np.asarray(x, dtype=np.float64)
    n_layers = mlp_layer_count(store, prefix)
    if x.shape[-1] != store[f"{prefix}.w0"].shape[0]:
        raise ValueError(
            f"input width {x.shape[-1]} does not match layer 0 fan-in "
            f"{store[f'{prefix}.w0'].shape[0]}"
        )
    tape = MlpTape(prefix=prefix)
    h = x
    for i in range(n_layers):
        tape.inputs.append(h)
        z = h @ store[f"{prefix}.w{i}"] + store[f"{prefix}.b{i}"]
        tape.preacts.append(z)
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
    return h, tape


def mlp_backward(
    store: ParamStore, tape: MlpTape, output_grad: np.ndarray, grads: ParamStore
) -> np.ndarray:
    """Exact gradients for a taped forward pass.

    Accumulates parameter gradients into `grads` (which must share the store's
    manifest for the touched entries) and returns the gradient w.r.t. the
    input.
    """
    n_layers = len(tape.inputs)
    g = np.asarray(output_grad, dtype=np.float64)
    prefix = tape.prefix
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            g = g * (tape.preacts[i] > 0)
        x = tape.inputs[i]
        if g.shape[:-1] != x.shape[:-1]:
            raise ValueError("stale tape: output_grad shape does not match forward pass")
        w_name, b_name = f"{prefix}.w{i}", f"{prefix}.b{i}"
        gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        grads[w_name] = grads[w_name] + gw if w_name in grads else gw
        grads[b_name] = grads[b_name] + gb if b_name in grads else gb
        g = g @ store[w_name].T
    return g


# ---------------------------------------------------------------------------
# AdamW and EMA
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    """AdamW moments and hyperparameters for one ParamStore."""

    m: ParamStore
    v: ParamStore
    step: int = 0
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params: ParamStore, **kwargs) -> "OptimState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), **kwargs)


def adamw_step(params: ParamStore, grads: ParamStore, state: OptimState) -> None:
    """Standard decoupled-weight-decay Adam update, in place."""
    if not params.same_manifest(state.m):
        raise ValueError("optimizer state manifest does not match params")
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name] if name in grads else np.zeros_like(p)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        params[name] = p - state.lr * (update + state.weight_decay * p)


def ema_update(teacher: ParamStore, student: ParamStore, decay: float) -> None:
    """teacher <- decay * teacher + (1 - decay) * student, elementwise."""
    if not teacher.same_manifest(student):
        raise ValueError("teacher/student manifests differ")
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must be in [0, 1], got {decay}")
    for name, t in teacher.items():
        teacher[name] = decay * t + (1.0 - decay) * student[name]
