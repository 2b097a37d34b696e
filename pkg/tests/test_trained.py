"""Behaviour of the model trained by the session fixture."""
import numpy as np
import pytest

from facedr.apps import interpolate_latent, reconstruct_mesh, transfer_expression
from facedr.deform import DRFeature
from facedr.metrics import e_avd
from facedr.network import decode_branch, encode_branch, fuse


@pytest.fixture(scope="module")
def parts(trained):
    m, c, ref = trained.model, trained.corpus, trained.ref
    rest = DRFeature(ref.rest_values, ref.reference_id)
    return m, c, ref, rest


def branch_training_error(m, c, ref, branch):
    errs = []
    for i in c.train_ids:
        for e in (0, 3, 7):
            z_id, z_exp = m.latent_codes(ref.encode(c.mesh(i, e)))
            if branch == "id":
                out, target = m.decode_identity(z_id), ref.encode(c.identity_mesh(i))
            else:
                out, target = m.decode_expression(z_exp), ref.encode(c.expression_meshes[e])
            errs.append(np.mean(np.abs(out.values - target.values)))
    return float(np.mean(errs))


@pytest.mark.parametrize("branch", ["id", "exp"])
def test_rest_feature_autoencodes(parts, branch):
    m, c, ref, rest = parts
    mu, _ = encode_branch(m, branch, rest)
    err = np.mean(np.abs(decode_branch(m, branch, mu).values - rest.values))
    assert err < 3 * branch_training_error(m, c, ref, branch)


@pytest.mark.parametrize("branch", ["id", "exp"])
def test_decoder_is_sensitive_to_each_latent(parts, branch):
    m, _, _, _ = parts
    k = m.latent[branch]
    base = decode_branch(m, branch, np.zeros(k)).values
    for j in range(k):
        z = np.zeros(k)
        z[j] = 1.0
        assert np.max(np.abs(decode_branch(m, branch, z).values - base)) > 1e-6


def test_fusing_neutral_parts_gives_neutral(parts):
    m, c, ref, rest = parts
    scale = np.mean([np.mean(np.abs(ref.encode(c.expression_meshes[e]).values - rest.values))
                     for e in range(1, c.spec.expressions)])
    assert np.mean(np.abs(fuse(m, rest, rest).values - rest.values)) < 0.25 * scale


def test_self_transfer_is_reconstruction(parts):
    m, c, ref, _ = parts
    M = c.mesh(c.test_ids[0], 4)
    out = transfer_expression(m, ref, M, M)
    assert np.max(np.abs(out.vertices - reconstruct_mesh(m, ref, M).vertices)) < 1e-9


def test_neutral_source_recovers_target_identity(parts):
    m, c, ref, _ = parts
    for i in c.train_ids[:4]:
        target = c.mesh(i, 4)
        out = transfer_expression(m, ref, c.mesh(c.train_ids[-1], 0), target)
        assert e_avd(out, c.identity_mesh(i)) < e_avd(target, c.identity_mesh(i))


def test_transfer_and_interpolation_are_pure(parts):
    m, c, ref, _ = parts
    a, b = c.mesh(0, 2), c.mesh(c.test_ids[1], 8)
    assert transfer_expression(m, ref, a, b).vertices.tobytes() == transfer_expression(m, ref, a, b).vertices.tobytes()
    g1 = interpolate_latent(m, ref, a, b, 0.5)
    g2 = interpolate_latent(m, ref, a, b, 0.5)
    assert all(x[2].vertices.tobytes() == y[2].vertices.tobytes() for x, y in zip(g1, g2))


@pytest.fixture(scope="module")
def grid(parts):
    m, c, ref, _ = parts
    return interpolate_latent(m, ref, c.mesh(0, 0), c.mesh(c.test_ids[0], 6), 0.25)


def test_interpolation_grid_size(grid):
    assert len(grid) == 25
    assert sorted({t for t, _, _ in grid}) == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_interpolation_corners(parts, grid):
    m, c, ref, _ = parts
    m0, m1 = c.mesh(0, 0), c.mesh(c.test_ids[0], 6)
    corners = {(t_id, t_exp): mesh for t_id, t_exp, mesh in grid if t_id in (0, 1) and t_exp in (0, 1)}
    assert len(corners) == 4
    tol = 1e-9
    assert np.max(np.abs(corners[0, 0].vertices - reconstruct_mesh(m, ref, m0).vertices)) < tol
    assert np.max(np.abs(corners[1, 1].vertices - reconstruct_mesh(m, ref, m1).vertices)) < tol
    # mixed corners: identity of one, expression of the other
    assert np.max(np.abs(corners[0, 1].vertices - transfer_expression(m, ref, m1, m0).vertices)) < tol
    assert np.max(np.abs(corners[1, 0].vertices - transfer_expression(m, ref, m0, m1).vertices)) < tol


def test_interpolation_midpoint_continuity(grid):
    by = {(a, b): mesh for a, b, mesh in grid}
    start, end, mid = by[0.0, 0.0], by[1.0, 1.0], by[0.5, 0.5]
    half = e_avd(start, end) / 2
    assert e_avd(mid, start) < 1.5 * half
    assert e_avd(mid, end) < 1.5 * half
