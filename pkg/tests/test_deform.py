import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facedr.deform import (FEATURE_DIM, GRAM_EPS, REST_ROW, DRFeature, FeatureMismatch, ReferenceFrame,
                           deformation_gradients, dr_decode, dr_encode, polar_decompose, read_drf,
                           rotation_exp, rotation_log, unpack_features, write_drf)
from facedr.mesh import Mesh, MeshError, cotangent_weights
from facedr.metrics import e_avd
from facedr.synth import CorpusSpec, generate

from meshes import grid_patch, icosphere, random_fan, random_rotation


@pytest.fixture(scope="module")
def corpus():
    return generate(CorpusSpec(n_vertices=256, identities=6, expressions=12, held_out=1))


@pytest.fixture(scope="module")
def ref(corpus):
    return ReferenceFrame(corpus.reference)


# -- rotations and polar decomposition -------------------------------------------

def test_rotation_log_identity():
    assert np.array_equal(rotation_log(np.eye(3)), np.zeros(3))


def test_rotation_log_quarter_turn_z():
    R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.allclose(rotation_log(R), [0, 0, np.pi / 2], atol=1e-15)


def test_rotation_roundtrip_sweep():
    rng = np.random.default_rng(1)
    axes = rng.standard_normal((1000, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    theta = rng.uniform(0, np.pi, 1000)
    theta[:5] = [1e-9, 1e-12, 0.0, np.pi - 1e-6, np.pi - 1e-9]
    R = rotation_exp(axes * theta[:, None])
    back = rotation_exp(rotation_log(R))
    assert np.max(np.abs(back - R)) < 1e-7
    assert np.all(np.linalg.norm(rotation_log(R), axis=1) <= np.pi + 1e-12)


def test_rotation_log_recovers_vector_away_from_pi():
    rng = np.random.default_rng(2)
    v = rng.standard_normal((200, 3))
    v *= rng.uniform(0, 3.0, (200, 1)) / np.linalg.norm(v, axis=1, keepdims=True)
    assert np.allclose(rotation_log(rotation_exp(v)), v, atol=1e-9)


def test_polar_identity_and_scale():
    R, S = polar_decompose(np.eye(3))
    assert np.allclose(R, np.eye(3)) and np.allclose(S, np.eye(3))
    R, S = polar_decompose(2 * np.eye(3))
    assert np.allclose(R, np.eye(3)) and np.allclose(S, 2 * np.eye(3))


def test_polar_constructed():
    rng = np.random.default_rng(3)
    for _ in range(50):
        R0, R1 = random_rotation(rng), random_rotation(rng)
        T = R0 @ np.diag([1.0, 2.0, 3.0]) @ R0.T @ R1
        R, S = polar_decompose(T)
        assert np.linalg.norm(R @ S - T) < 1e-10
        assert np.allclose(S, S.T, atol=1e-14)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=9, max_size=9))
def test_polar_properties(entries):
    T = np.array(entries).reshape(3, 3)
    R, S = polar_decompose(T)
    assert np.linalg.norm(R @ S - T) < 1e-10 * max(1.0, np.linalg.norm(T))
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-10)
    assert np.linalg.det(R) > 0
    assert np.array_equal(S, S.T)


def test_polar_reflection_folded_into_s():
    T = np.diag([1.0, 2.0, -0.5])
    R, S = polar_decompose(T)
    assert np.allclose(R, np.eye(3))
    assert np.allclose(S, T)


# -- deformation gradients ------------------------------------------------------------

def test_gradients_identity_deformation(ref):
    T = deformation_gradients(ref, ref.mesh)
    assert np.max(np.abs(T - np.eye(3))) < 1e-5


def test_gradients_rotation(ref):
    R0 = random_rotation(np.random.default_rng(4))
    T = deformation_gradients(ref, ref.mesh.with_vertices(ref.mesh.vertices @ R0.T))
    assert np.max(np.abs(T - R0)) < 1e-5


def _oracle_gradient(ref_mesh, deformed, i):
    """Weighted least squares for one vertex, assembled row by row from scratch."""
    w = cotangent_weights(ref_mesh)
    rows_a, rows_b = [], []
    ring = 0.0
    ring_def = 0.0
    for (a, b), c in zip(w.edges, w.values):
        if i not in (a, b):
            continue
        j = b if a == i else a
        d = ref_mesh.vertices[i] - ref_mesh.vertices[j]
        dd = deformed.vertices[i] - deformed.vertices[j]
        rows_a.append(np.sqrt(c) * d)
        rows_b.append(np.sqrt(c) * dd)
        ring += c * d @ d
        ring_def += c * dd @ dd
    n = ref_mesh.vertex_normals()[i]
    n_def = deformed.vertex_normals()[i] * np.sqrt(ring_def / ring)
    lam = np.sqrt(GRAM_EPS * ring)
    A = np.vstack(rows_a + [lam * n])
    B = np.vstack(rows_b + [lam * n_def])
    sol, *_ = np.linalg.lstsq(A, B, rcond=None)
    return sol.T


@pytest.mark.parametrize("seed", range(6))
def test_gradients_match_dense_least_squares(seed):
    rng = np.random.default_rng(seed)
    m = random_fan(rng)
    deformed = m.with_vertices(m.vertices @ (np.eye(3) + 0.3 * rng.standard_normal((3, 3))).T
                               + 0.05 * rng.standard_normal(m.vertices.shape))
    rf = ReferenceFrame(m)
    T = deformation_gradients(rf, deformed)
    assert np.linalg.norm(T[0] - _oracle_gradient(m, deformed, 0)) < 1e-8


def test_gradients_connectivity_mismatch(ref):
    other = grid_patch(16)
    with pytest.raises(MeshError, match="connectivity"):
        deformation_gradients(ref, other)


def test_collapsed_ring_rejected(ref):
    v = ref.mesh.vertices.copy()
    v[:] = v[0]
    with pytest.raises(MeshError, match="all-zero"):
        deformation_gradients(ref, ref.mesh.with_vertices(v))


def test_reference_must_be_connected():
    v = np.vstack([np.eye(3), np.eye(3) + 5])
    with pytest.raises(MeshError, match="connected"):
        ReferenceFrame(Mesh(v, [[0, 1, 2], [3, 4, 5]]))


# -- encode / decode ------------------------------------------------------------------

def test_encode_reference_is_rest(ref):
    f = dr_encode(ref, ref.mesh)
    assert f.values.shape == (ref.mesh.n, FEATURE_DIM)
    assert np.max(np.abs(f.values - REST_ROW)) < 1e-5
    assert f.reference_id == ref.mesh.content_hash()


@settings(max_examples=20, deadline=None)
@given(t=st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_encode_translation_invariant(corpus, ref, t):
    m = corpus.mesh(1, 3)
    a = dr_encode(ref, m).values
    b = dr_encode(ref, m.with_vertices(m.vertices + np.array(t))).values
    # edge differences of translated float coordinates carry round-off
    assert np.max(np.abs(a - b)) < 1e-9


def test_rotation_logs_canonical(corpus, ref):
    for i in range(corpus.spec.identities):
        for e in range(corpus.spec.expressions):
            f = dr_encode(ref, corpus.mesh(i, e)).values
            assert np.all(np.linalg.norm(f[:, :3], axis=1) <= np.pi)


def test_decode_rest_gives_reference(ref):
    out = dr_decode(ref, ref.rest_feature())
    assert np.max(np.linalg.norm(out.vertices - ref.mesh.vertices, axis=1)) < 1e-8


def test_decode_rotated_reference(ref):
    R0 = random_rotation(np.random.default_rng(5))
    rotated = ref.mesh.vertices @ R0.T
    out = dr_decode(ref, dr_encode(ref, ref.mesh.with_vertices(rotated))).vertices
    out = out - out.mean(0) + rotated.mean(0)
    assert np.max(np.linalg.norm(out - rotated, axis=1)) < 1e-6


def test_decode_centroid_gauge(corpus, ref):
    out = dr_decode(ref, dr_encode(ref, corpus.mesh(2, 7)))
    assert np.max(np.abs(out.vertices.mean(0) - ref.mesh.vertices.mean(0))) < 1e-10


def test_decode_is_energy_minimizer(corpus, ref):
    m = corpus.mesh(3, 4)
    f = dr_encode(ref, m)
    R, S = unpack_features(f.values)
    T = R @ S
    out = dr_decode(ref, f)
    assert ref.energy(out.vertices, T) <= ref.energy(m.vertices, T) + 1e-9
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert ref.energy(out.vertices, T) <= ref.energy(out.vertices + 1e-3 * rng.standard_normal(out.vertices.shape), T)


def test_roundtrip_error_small(corpus, ref):
    diag = ref.mesh.bbox_diagonal()
    errs = [e_avd(dr_decode(ref, dr_encode(ref, corpus.mesh(i, e))), corpus.mesh(i, e))
            for i in range(corpus.spec.identities) for e in range(0, 12, 3)]
    assert np.mean(errs) < 1e-3 * diag


def test_similarity_reencode_is_exact(ref):
    rng = np.random.default_rng(6)
    m = ref.mesh.with_vertices(1.3 * ref.mesh.vertices @ random_rotation(rng).T + 5.0)
    f = dr_encode(ref, m)
    again = dr_encode(ref, dr_decode(ref, f))
    assert np.max(np.abs(again.values - f.values)) < 1e-9


def test_reencode_drift_small_relative_to_deformation(corpus, ref):
    # measured worst case over this corpus is about 0.16
    for i in range(corpus.spec.identities):
        for e in range(1, corpus.spec.expressions):
            f = dr_encode(ref, corpus.mesh(i, e))
            again = dr_encode(ref, dr_decode(ref, f))
            size = np.mean(np.abs(f.values - ref.rest_values))
            assert np.mean(np.abs(again.values - f.values)) < 0.25 * size


@pytest.mark.xfail(strict=True, reason="decode is a least-squares projection, not an exact inverse; "
                                        "re-encoding differs by up to ~1e-2 near strongly bent regions")
def test_reencode_within_1e4_per_entry(corpus, ref):
    f = dr_encode(ref, corpus.mesh(1, 5))
    again = dr_encode(ref, dr_decode(ref, f))
    assert np.max(np.abs(again.values - f.values)) < 1e-4


def test_decode_rejects_foreign_feature(ref):
    f = DRFeature(ref.rest_values, "not-this-mesh")
    with pytest.raises(FeatureMismatch):
        dr_decode(ref, f)
    with pytest.raises(FeatureMismatch):
        dr_decode(ref, DRFeature(np.tile(REST_ROW, (3, 1)), ref.reference_id))


def test_feature_shape_checked():
    with pytest.raises(FeatureMismatch):
        DRFeature(np.zeros((4, 8)), "x")


def test_decode_on_icosphere_closed_surface():
    m = icosphere(2, radius=50.0)
    rf = ReferenceFrame(m)
    v = m.vertices * np.array([1.2, 0.9, 1.0])
    out = dr_decode(rf, dr_encode(rf, m.with_vertices(v)))
    assert e_avd(out, m.with_vertices(v)) < 1e-3 * m.bbox_diagonal()


# -- DRF files ---------------------------------------------------------------------

def test_drf_roundtrip(tmp_path, corpus, ref):
    f = dr_encode(ref, corpus.mesh(0, 2))
    write_drf(f, tmp_path / "f.drf")
    back = read_drf(tmp_path / "f.drf")
    assert back.reference_id == f.reference_id
    assert np.array_equal(back.values, f.values.astype(np.float32).astype(np.float64))
    header = (tmp_path / "f.drf").read_bytes().split(b"\n", 1)[0]
    assert b'"magic": "DRF1"' in header and b'"d": 9' in header


def test_drf_truncated(tmp_path, ref):
    write_drf(ref.rest_feature(), tmp_path / "f.drf")
    data = (tmp_path / "f.drf").read_bytes()
    (tmp_path / "g.drf").write_bytes(data[:-4])
    with pytest.raises(FeatureMismatch, match="payload"):
        read_drf(tmp_path / "g.drf")
    (tmp_path / "h.drf").write_bytes(b'{"magic": "XXXX"}\n')
    with pytest.raises(FeatureMismatch):
        read_drf(tmp_path / "h.drf")
