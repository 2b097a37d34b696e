"""Reconstruction and decomposition error measures on meshes with shared connectivity."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh, MeshError


def _positions(m):
    return m.vertices if isinstance(m, Mesh) else np.asarray(m, dtype=np.float64)


def e_avd(a, b) -> float:
    """Average vertex distance (mm)."""
    pa, pb = _positions(a), _positions(b)
    if pa.shape != pb.shape:
        raise MeshError(f"vertex count mismatch: {len(pa)} vs {len(pb)}")
    return float(np.mean(np.linalg.norm(pa - pb, axis=1)))


def e_sed(original: Mesh, recon: Mesh) -> float:
    """Spatial edge difference: mean over vertices of the length-weighted spread of relative edge change."""
    if not original.same_connectivity(recon):
        raise MeshError("meshes do not share connectivity")
    e = original.edges
    ref_len = np.linalg.norm(original.vertices[e[:, 0]] - original.vertices[e[:, 1]], axis=1)
    if np.any(ref_len <= 0):
        raise MeshError(f"zero-length edge {e[int(np.argmin(ref_len))].tolist()} in the original mesh")
    new_len = np.linalg.norm(recon.vertices[e[:, 0]] - recon.vertices[e[:, 1]], axis=1)
    ed = np.abs((ref_len - new_len) / ref_len)
    n = original.n
    # every undirected edge belongs to the 1-ring of both endpoints
    idx = np.concatenate([e[:, 0], e[:, 1]])
    w = np.concatenate([ref_len, ref_len])
    ed2 = np.concatenate([ed, ed])
    wsum = np.bincount(idx, w, n)
    mean = np.bincount(idx, w * ed2, n) / wsum
    var = np.bincount(idx, w * (ed2 - mean[idx]) ** 2, n) / wsum
    return float(np.mean(np.sqrt(np.maximum(var, 0.0))))


def decomposition_std(meshes) -> float:
    """Mean over vertices of the positional standard deviation across a set of meshes."""
    meshes = list(meshes)
    if len(meshes) < 2:
        raise ValueError("need at least two meshes")
    pos = [_positions(m) for m in meshes]
    if any(p.shape != pos[0].shape for p in pos):
        raise MeshError("meshes differ in vertex count")
    # centering on the first mesh first keeps identical inputs exactly at zero
    P = np.stack(pos) - pos[0]
    dev = P - P.mean(axis=0)
    return float(np.mean(np.sqrt(np.mean(np.sum(dev**2, axis=2), axis=0))))


@dataclass
class MetricReport:
    name: str
    ids: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def add(self, mesh_id, value):
        self.ids.append(str(mesh_id))
        self.values.append(float(value))

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else float("nan")

    @property
    def median(self) -> float:
        return float(np.median(self.values)) if self.values else float("nan")

    def rows(self):
        out = [(self.name, i, v) for i, v in zip(self.ids, self.values)]
        out.append((self.name, "mean", self.mean))
        out.append((self.name, "median", self.median))
        return out


def write_reports(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "mesh_id", "value"])
        for rep in reports:
            for name, mid, value in rep.rows():
                w.writerow([name, mid, repr(float(value))])


def read_reports(path) -> dict:
    """Inverse of write_reports; summary rows are recomputed from the per-mesh rows, not trusted."""
    reports = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["mesh_id"] in ("mean", "median"):
                continue
            reports.setdefault(row["metric"], MetricReport(row["metric"])).add(row["mesh_id"], float(row["value"]))
    return reports
