"""Parameter storage, the Adam update, and checkpoint serialization."""

from __future__ import annotations

import json
import struct

import numpy as np

from .graph import ContractError, Node

CHECKPOINT_MAGIC = b"NDIF"
CHECKPOINT_VERSION = 1


class Parameter:
    """A named, trainable array. Updates replace ``value`` (no in-place
    mutation), so nodes created from an earlier graph stay valid."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class ParamStore:
    """Named parameters plus per-parameter Adam moment accumulators."""

    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.nan_skips = 0

    def register(self, name: str, value) -> Parameter:
        if name in self.params:
            raise ContractError(f"parameter {name!r} already registered")
        p = Parameter(name, value)
        self.params[name] = p
        self.m[name] = np.zeros_like(p.value)
        self.v[name] = np.zeros_like(p.value)
        return p

    def node(self, name: str) -> Node:
        p = self.params[name]
        return Node(p.value, requires_grad=True, param=p)

    def values(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        for name, val in values.items():
            p = self.params[name]
            val = np.asarray(val, dtype=np.float64)
            if val.shape != p.value.shape:
                raise ContractError(
                    f"shape mismatch for {name!r}: {val.shape} vs {p.value.shape}"
                )
            p.value = val.copy()

    def reset_moments(self):
        for name, p in self.params.items():
            self.m[name] = np.zeros_like(p.value)
            self.v[name] = np.zeros_like(p.value)
        self.t = 0

    # -- checkpointing ------------------------------------------------

    def save(self, path, fmt: str = "binary"):
        manifest = [(name, list(p.value.shape)) for name, p in self.params.items()]
        if fmt == "binary":
            header = json.dumps(
                {"format_version": CHECKPOINT_VERSION, "params": manifest}
            ).encode("utf-8")
            with open(path, "wb") as fh:
                fh.write(CHECKPOINT_MAGIC)
                fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
                fh.write(header)
                for name, _ in manifest:
                    fh.write(self.params[name].value.astype("<f8").tobytes(order="C"))
        elif fmt == "json":
            payload = {
                "format_version": CHECKPOINT_VERSION,
                "params": {
                    name: {"shape": list(p.value.shape), "data": p.value.tolist()}
                    for name, p in self.params.items()
                },
            }
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(payload, fh)
        else:
            raise ContractError(f"unknown checkpoint format {fmt!r}")

    def load(self, path):
        with open(path, "rb") as fh:
            head = fh.read(4)
            if head == CHECKPOINT_MAGIC:
                version, hlen = struct.unpack("<II", fh.read(8))
                if version != CHECKPOINT_VERSION:
                    raise ContractError(f"unsupported checkpoint version {version}")
                manifest = json.loads(fh.read(hlen).decode("utf-8"))["params"]
                for name, shape in manifest:
                    count = int(np.prod(shape)) if shape else 1
                    buf = fh.read(count * 8)
                    arr = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
                    self.load_values({name: arr})
                return
        payload = json.loads(open(path, "r", encoding="utf-8").read())
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise ContractError("unsupported checkpoint version")
        for name, entry in payload["params"].items():
            arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            self.load_values({name: arr})


def grad_map(param_grads: dict, store: ParamStore) -> dict[str, np.ndarray]:
    """Name-keyed gradients for a store; unreachable parameters get zeros."""
    out = {}
    for name, p in store.params.items():
        g = param_grads.get(p)
        out[name] = np.zeros_like(p.value) if g is None else np.asarray(g)
    return out


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Adaptive-moment update with bias correction.

    A non-finite gradient anywhere skips the whole step and bumps the
    store's ``nan_skips`` diagnostic counter instead of poisoning the
    parameters.
    """
    if lr <= 0:
        raise ContractError(f"adam_step requires lr > 0, got {lr}")
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            store.nan_skips += 1
            return
    store.t += 1
    t = store.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = store.params[name]
        g = np.asarray(g, dtype=np.float64)
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * (g * g)
        m_hat = store.m[name] / c1
        v_hat = store.v[name] / c2
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
