import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facedr.bilinear import (BilinearFit, CoreTensor, als_fit, bilinear_decompose, bilinear_reconstruct,
                             bilinear_transfer, build_core, clip_ranks, contract, load_core, save_core)
from facedr.mesh import Mesh, MeshError
from facedr.metrics import e_avd
from facedr.synth import CorpusSpec, generate

from meshes import icosphere


@pytest.fixture(scope="module")
def corpus():
    return generate(CorpusSpec(n_vertices=256))


@pytest.fixture(scope="module")
def grid(corpus):
    return [corpus.meshes[i] for i in corpus.train_ids]


@pytest.fixture(scope="module")
def core(grid):
    return build_core(grid, *clip_ranks(len(grid), len(grid[0])))


@pytest.fixture(scope="module")
def compact(grid, corpus):
    # identity rank equal to the generator's identity dimension; few expression modes keep fits well posed
    return build_core(grid, corpus.spec.identity_modes, 4)


def grid_error(core, grid):
    worst = 0.0
    for i, row in enumerate(grid):
        for e, m in enumerate(row):
            rec = bilinear_reconstruct(core, core.id_coeffs[i], core.exp_coeffs[e])
            worst = max(worst, np.max(np.abs(rec.vertices - m.vertices)))
    return worst


def test_rank_one_exact():
    base = icosphere(1, radius=50.0)
    a, b = np.array([1.0, 2.0, 0.5]), np.array([1.0, -0.3])
    grid = [[base.with_vertices(ai * bj * base.vertices) for bj in b] for ai in a]
    core = build_core(grid, 1, 1)
    assert grid_error(core, grid) < 1e-8


def test_full_rank_exact(grid):
    core = build_core(grid, len(grid), len(grid[0]))
    assert grid_error(core, grid) < 1e-8


def dense_hosvd_error(grid, k_id, k_exp):
    """Independent construction: mode bases from eigenvectors of the mode Gram matrices."""
    I, E = len(grid), len(grid[0])
    X = np.zeros((I, E, grid[0][0].n * 3))
    for i in range(I):
        for e in range(E):
            X[i, e] = grid[i][e].vertices.reshape(-1)
    Gi = np.einsum("aed,bed->ab", X, X)
    Ge = np.einsum("iad,ibd->ab", X, X)
    Ui = np.linalg.eigh(Gi)[1][:, ::-1][:, :k_id]
    Ue = np.linalg.eigh(Ge)[1][:, ::-1][:, :k_exp]
    Pi, Pe = Ui @ Ui.T, Ue @ Ue.T
    approx = np.einsum("ab,ce,bed->acd", Pi, Pe, X)
    return np.linalg.norm(approx - X) / np.linalg.norm(X)


def tensor_error(core, grid):
    num = den = 0.0
    for i, row in enumerate(grid):
        for e, m in enumerate(row):
            rec = bilinear_reconstruct(core, core.id_coeffs[i], core.exp_coeffs[e])
            num += np.sum((rec.vertices - m.vertices) ** 2)
            den += np.sum(m.vertices**2)
    return np.sqrt(num / den)


def test_dense_hosvd_oracle(grid, core):
    assert abs(tensor_error(core, grid) - dense_hosvd_error(grid, 14, 12)) < 1e-10
    small = build_core(grid, 5, 3)
    assert abs(tensor_error(small, grid) - dense_hosvd_error(grid, 5, 3)) < 1e-10


def test_default_ranks_clip_to_grid():
    assert clip_ranks(14, 12) == (14, 12)
    assert clip_ranks(100, 40) == (50, 25)


def test_rank_beyond_mode_size_rejected(grid):
    with pytest.raises(ValueError):
        build_core(grid, 15, 3)
    with pytest.raises(ValueError):
        build_core(grid, 3, 0)


def test_incomplete_grid_rejected(grid):
    with pytest.raises(ValueError):
        build_core([grid[0], grid[1][:5]], 1, 1)


def test_connectivity_mismatch_rejected(grid):
    other = icosphere(1)
    with pytest.raises(MeshError):
        build_core([[grid[0][0], grid[0][1]], [grid[1][0], other]], 1, 1)


def test_truncation_consistency(grid):
    prev = np.inf
    for k in [(1, 1), (2, 2), (4, 3), (8, 5), (14, 12)]:
        err = tensor_error(build_core(grid, *k), grid)
        assert err <= prev + 1e-12
        prev = err
    prev = np.inf
    for k_exp in range(1, 13):
        err = tensor_error(build_core(grid, 6, k_exp), grid)
        assert err <= prev + 1e-12
        prev = err


def test_basis_selection(core):
    a = np.zeros(core.k_id)
    b = np.zeros(core.k_exp)
    a[0] = b[0] = 1.0
    assert np.array_equal(contract(core, a, b), core.core[:, 0, 0])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_bilinearity(core, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, core.k_id))
    g, h = rng.standard_normal((2, core.k_exp))
    s = float(np.max(np.abs(core.core)))
    assert np.max(np.abs(contract(core, a + b, g) - contract(core, a, g) - contract(core, b, g))) < 1e-10 * s
    assert np.max(np.abs(contract(core, a, g + h) - contract(core, a, g) - contract(core, a, h))) < 1e-10 * s


def test_coefficient_shape_checked(core):
    with pytest.raises(ValueError):
        contract(core, np.zeros(core.k_id + 1), np.zeros(core.k_exp))


# -- fitting -----------------------------------------------------------------------

def planted(core, seed):
    rng = np.random.default_rng(seed)
    a = rng.dirichlet(np.ones(len(core.id_coeffs))) @ core.id_coeffs
    b = rng.dirichlet(np.ones(len(core.exp_coeffs))) @ core.exp_coeffs
    return a, b, bilinear_reconstruct(core, a, b)


@pytest.mark.parametrize("seed", range(10))
def test_planted_recovery(core, seed):
    _, _, mesh = planted(core, seed)
    fit = als_fit(core, mesh, max_iter=1000)
    rec = bilinear_reconstruct(core, fit.alpha_id, fit.alpha_exp)
    assert np.max(np.linalg.norm(rec.vertices - mesh.vertices, axis=1)) < 1e-6


def test_planted_initialization_is_fixed_point(core):
    a, b, mesh = planted(core, 99)
    fit = als_fit(core, mesh, init_exp=b)
    assert fit.iterations == 1
    assert fit.residual < 1e-9


@pytest.mark.parametrize("which", ["core", "compact"])
def test_residual_monotone_on_held_out(corpus, which, request):
    core = request.getfixturevalue(which)
    for i in corpus.test_ids:
        for e in range(corpus.spec.expressions):
            h = als_fit(core, corpus.mesh(i, e)).history
            assert all(b <= a + 1e-12 for a, b in zip(h, h[1:]))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_residual_monotone_on_noisy_meshes(core, corpus, seed):
    rng = np.random.default_rng(seed)
    m = corpus.mesh(int(rng.integers(16)), int(rng.integers(12)))
    noisy = m.with_vertices(m.vertices + rng.normal(scale=rng.uniform(0.01, 3.0), size=m.vertices.shape))
    h = als_fit(core, noisy, max_iter=30).history
    assert all(b <= a + 1e-12 for a, b in zip(h, h[1:]))


def test_residual_is_rms_distance(core, corpus):
    m = corpus.mesh(corpus.test_ids[0], 4)
    fit = als_fit(core, m)
    rec = bilinear_reconstruct(core, fit.alpha_id, fit.alpha_exp)
    assert fit.residual == pytest.approx(np.sqrt(np.mean(np.sum((rec.vertices - m.vertices) ** 2, 1))), rel=1e-9)
    assert isinstance(fit, BilinearFit) and len(fit.history) == fit.iterations


def test_held_out_below_truncation_floor(corpus, grid, compact):
    # the floor is the worst training-grid reconstruction error of the truncated core
    core = compact
    floor = max(e_avd(bilinear_reconstruct(core, core.id_coeffs[i], core.exp_coeffs[e]), grid[i][e])
                for i in range(len(grid)) for e in range(len(grid[0])))
    for i in corpus.test_ids:
        for e in range(corpus.spec.expressions):
            fit = als_fit(core, corpus.mesh(i, e))
            assert e_avd(bilinear_reconstruct(core, fit.alpha_id, fit.alpha_exp), corpus.mesh(i, e)) < floor


def test_fit_connectivity_mismatch(core):
    with pytest.raises(MeshError):
        als_fit(core, icosphere(1))


def test_transfer_self_and_neutral(compact, corpus):
    core = compact
    t = corpus.mesh(corpus.test_ids[0], 5)
    fit = als_fit(core, t)
    same = bilinear_transfer(core, t, t)
    assert e_avd(same, t) <= fit.residual + 1e-9
    neutral_src = corpus.mesh(corpus.test_ids[1], 0)
    out = bilinear_transfer(core, neutral_src, t)
    target_neutral = bilinear_reconstruct(core, fit.alpha_id, core.exp_coeffs[0])
    src_fit = als_fit(core, neutral_src)
    assert e_avd(out, target_neutral) < 0.5
    # the fitted neutral expression is parallel to the corpus neutral row (scale exchange aside)
    cos = src_fit.alpha_exp @ core.exp_coeffs[0] / (np.linalg.norm(src_fit.alpha_exp) * np.linalg.norm(core.exp_coeffs[0]))
    assert abs(cos) > 0.99


def test_decompose_outputs(compact, corpus):
    i = corpus.test_ids[0]
    truth = corpus.identity_mesh(i)
    ident, expr, fit = bilinear_decompose(compact, corpus.mesh(i, 0))
    assert ident.n == expr.n == truth.n
    assert e_avd(ident, truth) < 1.5 * fit.residual
    # jaw-open input: the identity estimate is closer to the neutral face than the input is
    ident, _, _ = bilinear_decompose(compact, corpus.mesh(i, 1))
    assert e_avd(ident, truth) < 0.6 * e_avd(corpus.mesh(i, 1), truth)


def test_save_load_roundtrip(core, tmp_path):
    path = save_core(core, tmp_path / "core")
    back = load_core(path)
    assert isinstance(back, CoreTensor)
    assert (back.k_id, back.k_exp, back.neutral) == (core.k_id, core.k_exp, core.neutral)
    assert np.array_equal(back.faces, core.faces)
    assert np.allclose(back.core, core.core, rtol=1e-6, atol=1e-6 * np.abs(core.core).max())


def test_load_rejects_other_kinds(tmp_path):
    from facedr.layers import save_tensors

    save_tensors(tmp_path / "model.json", tmp_path / "model.bin", {"x": np.zeros(2)}, {"kind": "facedr_model"})
    with pytest.raises(ValueError):
        load_core(tmp_path)


def test_rejects_non_mesh_grid():
    with pytest.raises(ValueError):
        build_core([], 1, 1)
    m = Mesh(np.eye(3), [[0, 1, 2]])
    assert build_core([[m]], 1, 1).n == 3
