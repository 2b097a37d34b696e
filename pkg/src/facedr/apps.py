"""Mesh-level uses of a trained model: decomposition, expression transfer, latent interpolation."""
from __future__ import annotations

from fractions import Fraction

import numpy as np

from .deform import ReferenceFrame
from .mesh import Mesh, MeshError
from .network import Model


def _codes(model: Model, ref: ReferenceFrame, mesh: Mesh):
    if not ref.mesh.same_connectivity(mesh):
        raise MeshError("mesh connectivity does not match the model reference")
    return model.latent_codes(ref.encode(mesh))


def reconstruct_mesh(model: Model, ref: ReferenceFrame, mesh: Mesh) -> Mesh:
    z_id, z_exp = _codes(model, ref, mesh)
    return ref.decode(model.generate(z_id, z_exp))


def decompose(model: Model, ref: ReferenceFrame, mesh: Mesh):
    """(identity mesh, expression mesh on the mean face, full reconstruction)."""
    z_id, z_exp = _codes(model, ref, mesh)
    ident = ref.decode(model.decode_identity(z_id))
    expr = ref.decode(model.decode_expression(z_exp))
    return ident, expr, ref.decode(model.generate(z_id, z_exp))


def transfer_expression(model: Model, ref: ReferenceFrame, source: Mesh, target: Mesh) -> Mesh:
    """Target's identity code combined with the source's expression code."""
    _, z_exp = _codes(model, ref, source)
    z_id, _ = _codes(model, ref, target)
    return ref.decode(model.generate(z_id, z_exp))


def interpolation_steps(stride: float) -> np.ndarray:
    frac = Fraction(stride).limit_denominator(10**6)
    if not 0 < frac <= 1 or (1 / frac).denominator != 1 or abs(float(frac) - stride) > 1e-12:
        raise ValueError(f"stride {stride} must divide 1 evenly")
    return np.linspace(0.0, 1.0, int(1 / frac) + 1)


def interpolate_latent(model: Model, ref: ReferenceFrame, m0: Mesh, m1: Mesh, stride: float = 0.25):
    """Grid of meshes: the identity code steps from m0 to m1 along one axis, the expression code along the other.

    Returns a list of (t_id, t_exp, mesh).
    """
    ts = interpolation_steps(stride)
    id0, exp0 = _codes(model, ref, m0)
    id1, exp1 = _codes(model, ref, m1)
    out = []
    for a in ts:
        z_id = (1 - a) * id0 + a * id1
        for b in ts:
            z_exp = (1 - b) * exp0 + b * exp1
            out.append((float(a), float(b), ref.decode(model.generate(z_id, z_exp))))
    return out
