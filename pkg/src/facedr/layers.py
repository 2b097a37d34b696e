"""Chebyshev graph convolution and dense layers with hand-written backward passes.

Activations are batched: graph features are (B, n, F), dense features are
(B, F). Every forward returns a tape holding what its backward needs; a tape
can be consumed once.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LEAK = 0.1


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


@dataclass
class Tape:
    data: dict = field(default_factory=dict)
    used: bool = False

    def consume(self) -> dict:
        if self.used:
            raise TapeError("backward already called for this forward pass")
        self.used = True
        return self.data


def apply_sparse(L, X):
    """L @ X for every batch entry of X (B, n, F)."""
    B, n, F = X.shape
    flat = np.ascontiguousarray(X.transpose(1, 0, 2)).reshape(n, B * F)
    return np.asarray(L @ flat).reshape(n, B, F).transpose(1, 0, 2)


@dataclass(eq=False)
class ChebConvLayer:
    theta: np.ndarray  # K x F_in x F_out
    bias: np.ndarray | None  # F_out

    @property
    def K(self) -> int:
        return self.theta.shape[0]

    @property
    def f_in(self) -> int:
        return self.theta.shape[1]

    @property
    def f_out(self) -> int:
        return self.theta.shape[2]

    @classmethod
    def init(cls, rng, K, f_in, f_out, bias=True, dtype=np.float64):
        lim = np.sqrt(6.0 / (f_in * K + f_out))
        theta = rng.uniform(-lim, lim, (K, f_in, f_out)).astype(dtype)
        return cls(theta, np.zeros(f_out, dtype=dtype) if bias else None)


@dataclass(eq=False)
class DenseLayer:
    weight: np.ndarray  # F_in x F_out
    bias: np.ndarray  # F_out

    @classmethod
    def init(cls, rng, f_in, f_out, dtype=np.float64):
        lim = np.sqrt(6.0 / (f_in + f_out))
        return cls(rng.uniform(-lim, lim, (f_in, f_out)).astype(dtype), np.zeros(f_out, dtype=dtype))


def cheb_forward(layer: ChebConvLayer, X, Ltilde):
    """Y = sum_k T_k(Ltilde) X Theta_k + bias, with the Chebyshev recurrence on X."""
    X = np.asarray(X)
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None]
    if X.shape[-1] != layer.f_in:
        raise ShapeError(f"expected {layer.f_in} input channels, got {X.shape[-1]}")
    if Ltilde.shape != (X.shape[1], X.shape[1]):
        raise ShapeError(f"Laplacian {Ltilde.shape} does not match {X.shape[1]} vertices")
    basis = [X]
    if layer.K > 1:
        basis.append(apply_sparse(Ltilde, X))
    for _ in range(2, layer.K):
        basis.append(2.0 * apply_sparse(Ltilde, basis[-1]) - basis[-2])
    Y = sum(Xk @ layer.theta[k] for k, Xk in enumerate(basis))
    if layer.bias is not None:
        Y = Y + layer.bias
    tape = Tape({"basis": basis, "layer": layer, "L": Ltilde, "squeeze": squeeze})
    return (Y[0] if squeeze else Y), tape


def cheb_backward(tape: Tape, dY):
    """Returns (dX, dTheta, dBias); dBias is None for bias-free layers."""
    t = tape.consume()
    layer, basis, L = t["layer"], t["basis"], t["L"]
    dY = np.asarray(dY)
    if t["squeeze"]:
        dY = dY[None]
    dtheta = np.stack([np.tensordot(Xk, dY, axes=([0, 1], [0, 1])) for Xk in basis])
    dbias = dY.sum(axis=(0, 1)) if layer.bias is not None else None
    # adjoint of the recurrence; Ltilde is symmetric
    g = [dY @ layer.theta[k].T for k in range(layer.K)]
    for k in range(layer.K - 1, 1, -1):
        g[k - 1] = g[k - 1] + 2.0 * apply_sparse(L, g[k])
        g[k - 2] = g[k - 2] - g[k]
    dX = g[0] + apply_sparse(L, g[1]) if layer.K > 1 else g[0]
    return (dX[0] if t["squeeze"] else dX), dtheta, dbias


def dense_forward(layer: DenseLayer, X):
    X = np.asarray(X)
    if X.shape[-1] != layer.weight.shape[0]:
        raise ShapeError(f"expected {layer.weight.shape[0]} inputs, got {X.shape[-1]}")
    return X @ layer.weight + layer.bias, Tape({"X": X, "layer": layer})


def dense_backward(tape: Tape, dY):
    t = tape.consume()
    X, layer = t["X"], t["layer"]
    X2 = X.reshape(-1, X.shape[-1])
    dY2 = dY.reshape(-1, dY.shape[-1])
    return dY @ layer.weight.T, X2.T @ dY2, dY2.sum(axis=0)


def activation_forward(X, slope=LEAK):
    X = np.asarray(X)
    # slope where X <= 0, one elsewhere; reused as the local derivative
    factor = (X > 0).astype(X.dtype)
    factor *= 1.0 - slope
    factor += slope
    return X * factor, Tape({"factor": factor})


def activation_backward(tape: Tape, dY):
    return dY * tape.consume()["factor"]


def save_tensors(path_json, path_bin, tensors: dict, config: dict) -> None:
    """JSON manifest plus one contiguous little-endian float32 blob."""
    entries = []
    offset = 0
    with open(path_bin, "wb") as fh:
        for name, arr in tensors.items():
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
            fh.write(buf)
            offset += len(buf)
    manifest = {"tensors": entries, "config": config}
    Path(path_json).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_tensors(path_json, path_bin, dtype=np.float64):
    manifest = json.loads(Path(path_json).read_text())
    blob = Path(path_bin).read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).astype(dtype)
    return tensors, manifest["config"]
