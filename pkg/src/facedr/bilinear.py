"""Bilinear identity x expression tensor model: truncated HOSVD core plus ALS fitting."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as nn
from .mesh import Mesh, MeshError


RCOND = 1e-10  # relative singular-value cutoff for the subproblem solves
RANK_TOL = 1e-13  # mode directions below this fraction of the top singular value are dropped


class SingularSubproblem(np.linalg.LinAlgError):
    pass


@dataclass(eq=False)
class CoreTensor:
    core: np.ndarray  # 3n x k_id x k_exp
    id_coeffs: np.ndarray  # I x k_id, one row per corpus identity
    exp_coeffs: np.ndarray  # E x k_exp, one row per corpus expression
    faces: np.ndarray
    neutral: int = 0

    @property
    def k_id(self) -> int:
        return self.core.shape[1]

    @property
    def k_exp(self) -> int:
        return self.core.shape[2]

    @property
    def n(self) -> int:
        return self.core.shape[0] // 3


@dataclass
class BilinearFit:
    alpha_id: np.ndarray
    alpha_exp: np.ndarray
    residual: float
    iterations: int
    history: list = field(default_factory=list)


def _grid_tensor(grid) -> np.ndarray:
    rows = [list(r) for r in grid]
    if not rows or not rows[0]:
        raise ValueError("empty mesh grid")
    E = len(rows[0])
    if any(len(r) != E for r in rows):
        raise ValueError("incomplete identity x expression grid")
    faces = rows[0][0].faces
    for r in rows:
        for m in r:
            if not np.array_equal(m.faces, faces):
                raise MeshError("grid meshes do not share connectivity")
    return np.array([[m.vertices.ravel() for m in r] for r in rows]).transpose(2, 0, 1)


def _mode_basis(unfolded, k, label):
    if k < 1 or k > unfolded.shape[0]:
        raise ValueError(f"k_{label}={k} outside [1, {unfolded.shape[0]}] for the {label} mode")
    U, s, _ = np.linalg.svd(unfolded, full_matrices=False)
    # directions at round-off level carry no shape, only ill-conditioning for the fit
    rank = max(1, int(np.sum(s > RANK_TOL * s[0])))
    return U[:, :min(k, rank)]


def build_core(grid, k_id=50, k_exp=25) -> CoreTensor:
    """grid[i][e] is the mesh of identity i with expression e (expression 0 neutral)."""
    T = _grid_tensor(grid)  # 3n x I x E
    d, I, E = T.shape
    U_id = _mode_basis(T.transpose(1, 0, 2).reshape(I, -1), k_id, "id")
    U_exp = _mode_basis(T.transpose(2, 0, 1).reshape(E, -1), k_exp, "exp")
    core = np.einsum("die,ia,eb->dab", T, U_id, U_exp)
    return CoreTensor(core, U_id, U_exp, np.array(grid[0][0].faces))


def clip_ranks(I, E, k_id=50, k_exp=25):
    return min(k_id, I), min(k_exp, E)


def contract(core: CoreTensor, alpha_id, alpha_exp) -> np.ndarray:
    alpha_id = np.asarray(alpha_id, dtype=np.float64)
    alpha_exp = np.asarray(alpha_exp, dtype=np.float64)
    if alpha_id.shape != (core.k_id,) or alpha_exp.shape != (core.k_exp,):
        raise ValueError(f"coefficient shapes {alpha_id.shape}, {alpha_exp.shape} do not match core "
                         f"({core.k_id}, {core.k_exp})")
    return np.einsum("dab,a,b->d", core.core, alpha_id, alpha_exp)


def bilinear_reconstruct(core: CoreTensor, alpha_id, alpha_exp) -> Mesh:
    return Mesh(contract(core, alpha_id, alpha_exp).reshape(-1, 3), core.faces)


def _solve(A, x, label):
    if not np.all(np.isfinite(A)):
        raise SingularSubproblem(f"{label} subproblem has non-finite entries")
    # minimum-norm solution; weak modes make the system rank deficient without harming the fit
    coef, _, rank, _ = np.linalg.lstsq(A, x, rcond=RCOND)
    if rank == 0:
        raise SingularSubproblem(f"{label} subproblem is degenerate (the core slice is zero)")
    return coef


def _rms(core, x, a_id, a_exp):
    r = x - contract(core, a_id, a_exp)
    return float(np.sqrt(np.sum(r * r) / (len(x) // 3)))


def _gauge(core: CoreTensor, a_exp) -> float:
    """Scale that fixes the scale exchange between the two factors.

    The leading expression mode carries the overall face shape and its coefficient
    is nearly constant across the training rows, so it is pinned to the row mean.
    """
    target = float(np.mean(core.exp_coeffs[:, 0]))
    lead = float(a_exp[0])
    norm = float(np.linalg.norm(a_exp))
    if norm == 0.0:
        return 1.0
    if abs(lead) < 1e-3 * norm or target == 0.0:
        # fit has left the leading mode; fall back to a unit-norm exp factor
        return norm
    return lead / target


def als_fit(core: CoreTensor, mesh: Mesh, max_iter: int = 100, tol: float = 1e-6, init_exp=None) -> BilinearFit:
    """Alternate exact least-squares solves for the identity and expression coefficients.

    The residual is the root-mean-square vertex distance (mm) after each full sweep.
    """
    if mesh.n != core.n or not np.array_equal(mesh.faces, core.faces):
        raise MeshError("mesh connectivity does not match the core")
    x = mesh.vertices.ravel()
    a_exp = core.exp_coeffs.mean(axis=0) if init_exp is None else np.array(init_exp, dtype=np.float64)
    a_id = _solve(np.einsum("dab,b->da", core.core, a_exp), x, "identity")
    current = _rms(core, x, a_id, a_exp)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        # each half-step is an exact minimization in exact arithmetic; the guard keeps
        # round-off in badly scaled subproblems from ever raising the residual
        for which in ("expression", "identity"):
            if which == "expression":
                cand = (a_id, _solve(np.einsum("dab,a->db", core.core, a_id), x, which))
            else:
                cand = (_solve(np.einsum("dab,b->da", core.core, a_exp), x, which), a_exp)
            r = _rms(core, x, *cand)
            if r <= current:
                (a_id, a_exp), current = cand, r
        scale = _gauge(core, a_exp)
        a_exp = a_exp / scale
        a_id = a_id * scale
        history.append(current)
        if current <= 1e-12:
            break
        if len(history) > 1 and history[-2] - current <= tol * max(history[-2], 1e-300):
            break
    return BilinearFit(a_id, a_exp, history[-1], it, history)


def bilinear_transfer(core: CoreTensor, source: Mesh, target: Mesh, **kw) -> Mesh:
    fs = als_fit(core, source, **kw)
    ft = als_fit(core, target, **kw)
    return bilinear_reconstruct(core, ft.alpha_id, fs.alpha_exp)


def bilinear_decompose(core: CoreTensor, mesh: Mesh, **kw):
    """(identity mesh, expression-on-mean-face mesh, fit) for one input."""
    fit = als_fit(core, mesh, **kw)
    ident = bilinear_reconstruct(core, fit.alpha_id, core.exp_coeffs[core.neutral])
    expr = bilinear_reconstruct(core, core.id_coeffs.mean(axis=0), fit.alpha_exp)
    return ident, expr, fit


def save_core(core: CoreTensor, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = {"kind": "bilinear_core", "k_id": core.k_id, "k_exp": core.k_exp, "neutral": core.neutral,
           "faces": core.faces.tolist()}
    tensors = {"core": core.core, "id_coeffs": core.id_coeffs, "exp_coeffs": core.exp_coeffs}
    nn.save_tensors(out / "model.json", out / "model.bin", tensors, cfg)
    return out / "model.json"


def load_core(path) -> CoreTensor:
    p = Path(path)
    if p.is_dir():
        p = p / "model.json"
    cfg = json.loads(p.read_text())["config"]
    if cfg.get("kind") != "bilinear_core":
        raise ValueError(f"{p} is not a bilinear core file")
    t, cfg = nn.load_tensors(p, p.with_suffix(".bin"))
    return CoreTensor(t["core"], t["id_coeffs"], t["exp_coeffs"], np.array(cfg["faces"], dtype=np.int64),
                      cfg["neutral"])
