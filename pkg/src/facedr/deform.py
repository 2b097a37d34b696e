"""Per-vertex deformation representation (DR) relative to a reference mesh.

Each vertex carries a 9-vector: the axis-angle log of the rotation part of its
deformation gradient followed by the six upper-triangle entries of the
symmetric scale/shear part. Decoding solves the cotangent-weighted
least-squares system for positions with a cached sparse factorization.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import Mesh, MeshError, cotangent_weights

FEATURE_DIM = 9
GRAM_EPS = 1e-2
REST_ROW = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0])
_SYM_IDX = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


class FeatureMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DRFeature:
    values: np.ndarray
    reference_id: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != FEATURE_DIM:
            raise FeatureMismatch(f"DR feature must be n x 9, got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return len(self.values)


def skew(v):
    v = np.asarray(v)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rotation_exp(v):
    """Axis-angle vector(s) -> rotation matrix(ces) via Rodrigues' formula."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)[..., None, None]
    k = skew(v)
    small = theta < 1e-6
    t = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(t)) / t**2)
    return np.eye(3) + a * k + b * (k @ k)


def rotation_log(R):
    """Rotation matrix(ces) -> axis-angle vector(s) with norm in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    w = 0.5 * np.stack([R[..., 2, 1] - R[..., 1, 2],
                        R[..., 0, 2] - R[..., 2, 0],
                        R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    s = np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)
    safe = np.where(s > 0, s, 1.0)
    scale = np.where(theta < 1e-6, 1.0 + theta**2 / 6.0, theta / safe)
    out = w * scale[..., None]

    near_pi = theta > np.pi - 1e-2
    if np.any(near_pi):
        idx = np.flatnonzero(near_pi.ravel())
        Rf = R.reshape(-1, 3, 3)
        wf = w.reshape(-1, 3)
        tf = theta.ravel()
        of = out.reshape(-1, 3)
        for i in idx:
            sym = 0.5 * (Rf[i] + Rf[i].T) - np.cos(tf[i]) * np.eye(3)
            col = int(np.argmax(np.diag(sym)))
            axis = sym[:, col] / np.linalg.norm(sym[:, col])
            if axis @ wf[i] < 0:
                axis = -axis
            of[i] = tf[i] * axis
        out = of.reshape(out.shape)
    return out


def polar_decompose(T):
    """T = R S with det(R) = +1 and S symmetric (reflections folded into S)."""
    T = np.asarray(T, dtype=np.float64)
    U, sig, Vt = np.linalg.svd(T)
    d = np.sign(np.linalg.det(U @ Vt))
    d = np.where(d == 0, 1.0, d)
    D = np.ones(T.shape[:-2] + (3,))
    D[..., 2] = d
    R = (U * D[..., None, :]) @ Vt
    V = np.swapaxes(Vt, -1, -2)
    S = (V * (D * sig)[..., None, :]) @ Vt
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    return R, S


def pack_features(log_r, S) -> np.ndarray:
    cols = [S[..., i, j] for i, j in _SYM_IDX]
    return np.concatenate([log_r, np.stack(cols, axis=-1)], axis=-1)


def unpack_features(values):
    values = np.asarray(values)
    S = np.empty(values.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(_SYM_IDX):
        S[..., i, j] = values[..., 3 + k]
        S[..., j, i] = values[..., 3 + k]
    return rotation_exp(values[..., :3]), S


class ReferenceFrame:
    """Reference mesh with cached cotangent weights, Gram matrices and decode factorization."""

    def __init__(self, mesh: Mesh):
        if mesh.n == 0 or not mesh.is_connected:
            raise MeshError("reference mesh must be non-empty and connected")
        self.mesh = mesh
        self.reference_id = mesh.content_hash()
        self.weights = cotangent_weights(mesh)
        e = self.weights.edges
        # directed edge list: both orientations of every undirected edge
        self._src = np.concatenate([e[:, 0], e[:, 1]])
        self._dst = np.concatenate([e[:, 1], e[:, 0]])
        self._c = np.concatenate([self.weights.values, self.weights.values])
        self._d = mesh.vertices[self._src] - mesh.vertices[self._dst]
        gram = self._accumulate(self._d, self._d)
        for i in np.flatnonzero(np.trace(gram, axis1=1, axis2=2) <= 0):
            raise MeshError(f"vertex {i} has an all-zero 1-ring")
        self._eps = GRAM_EPS * np.trace(gram, axis1=1, axis2=2)
        self._ring = np.trace(gram, axis1=1, axis2=2)
        self._normals = mesh.vertex_normals()
        gram = gram + self._eps[:, None, None] * np.einsum("ni,nj->nij", self._normals, self._normals)
        self._gram_inv = np.linalg.inv(gram)
        self.rest_values = np.tile(REST_ROW, (mesh.n, 1))

    def _accumulate(self, a, b):
        out = np.zeros((self.mesh.n, 3, 3))
        np.add.at(out, self._src, self._c[:, None, None] * np.einsum("ei,ej->eij", a, b))
        return out

    @cached_property
    def _solver(self):
        w = self.weights.matrix()
        lap = sp.diags(np.asarray(w.sum(axis=1)).ravel()) - w
        # vertex 0 is pinned at the origin to fix translation; the centroid is restored after solving
        return splu(sp.csc_matrix(lap[1:, 1:]))

    def rest_feature(self) -> DRFeature:
        return DRFeature(self.rest_values.copy(), self.reference_id)

    def check(self, mesh: Mesh):
        if not self.mesh.same_connectivity(mesh):
            raise MeshError("mesh connectivity does not match the reference")

    def deformation_gradients(self, deformed: Mesh) -> np.ndarray:
        self.check(deformed)
        dd = deformed.vertices[self._src] - deformed.vertices[self._dst]
        cross = self._accumulate(dd, self._d)
        ring = np.trace(self._accumulate(dd, dd), axis1=1, axis2=2)
        if np.any(ring <= 0):
            raise MeshError(f"vertex {int(np.argmax(ring <= 0))} has an all-zero deformed 1-ring")
        n_def = deformed.vertex_normals() * np.sqrt(ring / self._ring)[:, None]
        cross = cross + self._eps[:, None, None] * np.einsum("ni,nj->nij", n_def, self._normals)
        return cross @ self._gram_inv

    def encode(self, deformed: Mesh) -> DRFeature:
        R, S = polar_decompose(self.deformation_gradients(deformed))
        return DRFeature(pack_features(rotation_log(R), S), self.reference_id)

    def decode(self, feature: DRFeature) -> Mesh:
        if feature.reference_id != self.reference_id:
            raise FeatureMismatch("feature was encoded against a different reference mesh")
        if feature.n != self.mesh.n:
            raise FeatureMismatch(f"feature has {feature.n} rows, reference has {self.mesh.n}")
        R, S = unpack_features(feature.values)
        T = R @ S
        return self.mesh.with_vertices(self.solve_positions(T))

    def solve_positions(self, T) -> np.ndarray:
        """Minimize sum_i sum_j c_ij |(p_i - p_j) - T_i d_ij|^2 with centroid pinned to the reference."""
        solver = self._solver
        # b_k = 1/2 sum_j c_kj (T_k + T_j) d_kj
        td = np.einsum("eij,ej->ei", T[self._src] + T[self._dst], self._d)
        b = np.zeros((self.mesh.n, 3))
        np.add.at(b, self._src, 0.5 * self._c[:, None] * td)
        p = np.zeros((self.mesh.n, 3))
        p[1:] = solver.solve(np.ascontiguousarray(b[1:]))
        p += self.mesh.vertices.mean(axis=0) - p.mean(axis=0)
        return p

    def energy(self, positions, T) -> float:
        pd = positions[self._src] - positions[self._dst]
        r = pd - np.einsum("eij,ej->ei", T[self._src], self._d)
        return float(np.sum(self._c * np.einsum("ei,ei->e", r, r)))


def deformation_gradients(ref: ReferenceFrame, deformed: Mesh) -> np.ndarray:
    return ref.deformation_gradients(deformed)


def dr_encode(ref: ReferenceFrame, deformed: Mesh) -> DRFeature:
    return ref.encode(deformed)


def dr_decode(ref: ReferenceFrame, feature: DRFeature) -> Mesh:
    return ref.decode(feature)


def write_drf(feature: DRFeature, path) -> None:
    header = {"magic": "DRF1", "n": feature.n, "d": FEATURE_DIM, "dtype": "f32", "ref": feature.reference_id}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(feature.values, dtype="<f4").tobytes())


def read_drf(path) -> DRFeature:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("magic") != "DRF1" or header.get("d") != FEATURE_DIM or header.get("dtype") != "f32":
            raise FeatureMismatch(f"{path}: not a DRF1 file")
        n = int(header["n"])
        blob = fh.read()
    if len(blob) != n * FEATURE_DIM * 4:
        raise FeatureMismatch(f"{path}: expected {n * FEATURE_DIM * 4} payload bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4").reshape(n, FEATURE_DIM).astype(np.float64)
    return DRFeature(values, header["ref"])

