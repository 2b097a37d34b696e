"""Triangle meshes, OBJ I/O and the graph operators built on them."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

COT_FLOOR = 1e-8


class MeshError(ValueError):
    pass


class ObjParseError(MeshError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class Mesh:
    """Vertex positions (n x 3, millimeters) and CCW triangle faces (m x 3)."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        n = len(v)
        if len(f):
            if f.min() < 0 or f.max() >= n:
                raise MeshError(f"face index out of range for {n} vertices")
            degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if degenerate.any():
                raise MeshError(f"degenerate face {int(np.argmax(degenerate))}: repeated vertex index")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.faces)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges (i < j), sorted."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        return adjacency_from_edges(self.edges, self.n)

    @cached_property
    def neighbors(self) -> list[np.ndarray]:
        a = self.adjacency
        return [a.indices[a.indptr[i]:a.indptr[i + 1]] for i in range(self.n)]

    @property
    def is_connected(self) -> bool:
        if self.n == 0:
            return False
        ncomp, _ = connected_components(self.adjacency, directed=False)
        return ncomp == 1

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        cr = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cr, axis=1)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted unit vertex normals (CCW faces point outward)."""
        v = self.vertices
        f = self.faces
        cr = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        nrm = np.zeros_like(v)
        for k in range(3):
            np.add.at(nrm, f[:, k], cr)
        length = np.linalg.norm(nrm, axis=1, keepdims=True)
        return nrm / np.where(length > 0, length, 1.0)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.faces, dtype="<i8").tobytes())
        return h.hexdigest()

    def same_connectivity(self, other: "Mesh") -> bool:
        return self.n == other.n and np.array_equal(self.faces, other.faces)


def adjacency_from_edges(edges, n) -> sp.csr_matrix:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    a = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    a.data[:] = 1.0
    a.setdiag(0)
    a.eliminate_zeros()
    return a


def load_obj(path) -> Mesh:
    """Read the `v`/`f` subset of Wavefront OBJ. Normals and texture coords are skipped."""
    verts = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ObjParseError(path, lineno, "vertex needs three coordinates")
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise ObjParseError(path, lineno, f"bad vertex coordinate in {s!r}") from None
            elif tag == "f":
                if len(parts) != 4:
                    raise ObjParseError(path, lineno, f"non-triangle face with {len(parts) - 1} vertices")
                try:
                    idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                except ValueError:
                    raise ObjParseError(path, lineno, f"bad face index in {s!r}") from None
                faces.append((lineno, idx))
            elif tag in ("vn", "vt", "s", "o", "g", "usemtl", "mtllib"):
                continue
            else:
                raise ObjParseError(path, lineno, f"unsupported record {tag!r}")
    n = len(verts)
    out = []
    for lineno, idx in faces:
        idx = [i - 1 if i > 0 else n + i for i in idx]
        if any(i < 0 or i >= n for i in idx):
            raise ObjParseError(path, lineno, f"face index out of range (n={n})")
        if len(set(idx)) != 3:
            raise ObjParseError(path, lineno, "degenerate face")
        out.append(idx)
    return Mesh(np.array(verts).reshape(-1, 3), np.array(out, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: Mesh, path) -> None:
    if mesh.n == 0:
        raise MeshError("empty mesh")
    lines = [f"# {mesh.n} vertices, {len(mesh.faces)} faces (millimeters)"]
    lines += ["v %.17g %.17g %.17g" % tuple(p) for p in mesh.vertices]
    lines += ["f %d %d %d" % tuple(f + 1) for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class CotanWeights:
    """Symmetric cotangent edge weights, one value per undirected edge (i < j)."""

    edges: np.ndarray
    values: np.ndarray
    n: int

    def matrix(self) -> sp.csr_matrix:
        e = self.edges
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        vals = np.concatenate([self.values, self.values])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))


def cotangent_weights(mesh: Mesh) -> CotanWeights:
    """c_ij = max(1/2 (cot a + cot b), 1e-8); boundary edges keep their single term."""
    v = mesh.vertices
    f = mesh.faces
    areas2 = 2.0 * mesh.face_areas()
    scale = np.max(np.abs(v)) if len(v) else 1.0
    bad = np.flatnonzero(areas2 <= 1e-14 * max(scale, 1.0) ** 2)
    if len(bad):
        raise MeshError(f"zero-area face {int(bad[0])} {f[bad[0]].tolist()}: cotangent undefined")
    lo, hi, half_cot = [], [], []
    for k in range(3):
        a, b, c = f[:, k], f[:, (k + 1) % 3], f[:, (k + 2) % 3]
        # angle at a, opposite edge (b, c)
        cot = np.einsum("ij,ij->i", v[b] - v[a], v[c] - v[a]) / areas2
        lo.append(np.minimum(b, c))
        hi.append(np.maximum(b, c))
        half_cot.append(0.5 * cot)
    acc = sp.coo_matrix(
        (np.concatenate(half_cot), (np.concatenate(lo), np.concatenate(hi))), shape=(mesh.n, mesh.n)
    ).tocsr()
    acc.sum_duplicates()
    acc = acc.tocoo()
    order = np.lexsort((acc.col, acc.row))
    edges = np.stack([acc.row[order], acc.col[order]], axis=1).astype(np.int64)
    return CotanWeights(edges, np.maximum(acc.data[order], COT_FLOOR), mesh.n)


def _as_adjacency(graph) -> sp.csr_matrix:
    if isinstance(graph, Mesh):
        return graph.adjacency
    a = sp.csr_matrix(graph, dtype=np.float64)
    if a.shape[0] != a.shape[1]:
        raise MeshError("adjacency must be square")
    return a


def normalized_laplacian(graph) -> sp.csr_matrix:
    """L = I - D^-1/2 A D^-1/2 for a mesh or an adjacency matrix."""
    a = _as_adjacency(graph)
    deg = np.asarray(a.sum(axis=1)).ravel()
    if np.any(deg <= 0):
        raise MeshError(f"isolated vertex {int(np.argmax(deg <= 0))}")
    dinv = sp.diags(1.0 / np.sqrt(deg))
    lap = sp.identity(a.shape[0], format="csr") - dinv @ a @ dinv
    lap = 0.5 * (lap + lap.T)
    return sp.csr_matrix(lap)


def scaled_laplacian(lap, lambda_max: float = 2.0) -> sp.csr_matrix:
    """2 L / lambda_max - I; spectrum lies in [-1, 1] when lambda_max bounds L."""
    if not lambda_max > 0:
        raise MeshError(f"lambda_max must be positive, got {lambda_max}")
    lap = sp.csr_matrix(lap)
    return sp.csr_matrix((2.0 / lambda_max) * lap - sp.identity(lap.shape[0], format="csr"))


def estimate_lambda_max(lap, iters: int = 50, tol: float = 1e-6, seed: int = 0) -> float:
    """Power-iteration estimate of the largest eigenvalue of a symmetric PSD matrix."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(lap.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = lap @ x
        new = float(x @ y)
        norm = np.linalg.norm(y)
        if norm == 0:
            return 0.0
        x = y / norm
        if abs(new - lam) <= tol * max(abs(new), 1.0):
            lam = new
            break
        lam = new
    return lam
