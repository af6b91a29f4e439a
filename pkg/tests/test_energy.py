import numpy as np
import pytest

from tetsolve import energy as en
from tetsolve.energy import (BarrierParams, FeasibilityError, MaterialParams,
                             barrier_energy_grad_hess, deformation_gradient,
                             element_energy_grad_hess, inertia_energy_grad_hess,
                             project_psd, snh_piola, snh_psi)
from tetsolve.primitives import single_tet

MAT = MaterialParams(mu=3e5, lam=5e5, density=1000.0)


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# ------------------------------------------------------------ kinematics
def test_deformation_gradient_rest(reference_tet):
    pos = reference_tet.rest_positions[reference_tet.tets[0]]
    f = deformation_gradient(pos, reference_tet.dm_inv[0])
    assert np.allclose(f, np.eye(3))


def test_deformation_gradient_rotation(reference_tet, rng):
    r = random_rotation(rng)
    pos = reference_tet.rest_positions[reference_tet.tets[0]] @ r.T
    f = deformation_gradient(pos, reference_tet.dm_inv[0])
    assert np.allclose(f, r, atol=1e-12)


def test_deformation_gradient_uniform_scale(reference_tet):
    pos = 2.0 * reference_tet.rest_positions[reference_tet.tets[0]]
    f = deformation_gradient(pos, reference_tet.dm_inv[0])
    assert np.allclose(f, 2.0 * np.eye(3))


# --------------------------------------------------------------- elastic
def test_rest_state_is_calibrated():
    assert snh_psi(np.eye(3), MAT.mu, MAT.lam) == pytest.approx(0.0, abs=1e-9)
    assert np.abs(snh_piola(np.eye(3), MAT.mu, MAT.lam)).max() < 1e-8


def test_snh_gradient_matches_finite_differences(rng):
    f = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
    p = snh_piola(f, MAT.mu, MAT.lam)
    eps = 1e-5
    fd = np.zeros((3, 3))
    for r in range(3):
        for c in range(3):
            fp = f.copy(); fp[r, c] += eps
            fm = f.copy(); fm[r, c] -= eps
            fd[r, c] = (snh_psi(fp, MAT.mu, MAT.lam)
                        - snh_psi(fm, MAT.mu, MAT.lam)) / (2 * eps)
    assert np.abs(p - fd).max() / np.abs(fd).max() < 1e-4


def test_element_hessian_matches_fd_of_gradient(reference_tet, rng):
    tet = reference_tet
    pos = tet.rest_positions[tet.tets[0]] + 0.2 * rng.standard_normal((4, 3))
    vol = tet.rest_volumes[0]
    dmi = tet.dm_inv[0]
    der = element_energy_grad_hess(pos, dmi, MAT, vol)
    eps = 1e-5
    fd = np.zeros((12, 12))
    for i in range(12):
        pp = pos.copy(); pp.flat[i] += eps
        pm = pos.copy(); pm.flat[i] -= eps
        gp = element_energy_grad_hess(pp, dmi, MAT, vol).gradient
        gm = element_energy_grad_hess(pm, dmi, MAT, vol).gradient
        fd[:, i] = (gp - gm) / (2 * eps)
    assert np.abs(der.hessian - fd).max() / np.abs(fd).max() < 1e-3
    assert np.abs(der.hessian - der.hessian.T).max() <= 1e-12 * np.abs(der.hessian).max()


def test_rotation_invariance(rng):
    f = np.eye(3) + 0.2 * rng.standard_normal((3, 3))
    base = snh_psi(f, MAT.mu, MAT.lam)
    for _ in range(5):
        r = random_rotation(rng)
        assert snh_psi(r @ f, MAT.mu, MAT.lam) == pytest.approx(base, abs=1e-10 * abs(base))
    r = random_rotation(rng)
    assert snh_psi(r, MAT.mu, MAT.lam) == pytest.approx(0.0, abs=1e-9)
    assert np.abs(snh_piola(r, MAT.mu, MAT.lam)).max() < 1e-7


# ---------------------------------------------------------------- psd
def test_spd_projection_idempotent_and_preserving(rng):
    a = rng.standard_normal((12, 12))
    sym = 0.5 * (a + a.T)
    proj = project_psd(sym)
    assert np.linalg.eigvalsh(proj).min() >= -1e-12
    again = project_psd(proj)
    assert np.abs(again - proj).max() < 1e-10 * max(np.abs(proj).max(), 1.0)
    psd = sym @ sym.T  # positive semidefinite by construction
    assert np.abs(project_psd(psd) - psd).max() < 1e-10 * np.abs(psd).max()


# --------------------------------------------------------------- inertia
def test_inertia_zero_at_target():
    e, g, _ = inertia_energy_grad_hess(np.ones(3), np.ones(3), 2.0, 0.1)
    assert e == 0.0 and np.all(g == 0.0)


def test_inertia_unit_case():
    e, g, h = inertia_energy_grad_hess(np.array([1.0, 0, 0]), np.zeros(3), 1.0, 1.0)
    assert e == pytest.approx(0.5)
    assert np.allclose(g, [1.0, 0, 0])
    assert np.allclose(h, np.eye(3))


def test_inertia_h_scaling():
    _, _, h1 = inertia_energy_grad_hess(np.ones(3), np.zeros(3), 1.0, 0.5)
    _, _, h2 = inertia_energy_grad_hess(np.ones(3), np.zeros(3), 1.0, 1.0)
    assert np.allclose(h2, h1 / 4.0)


# --------------------------------------------------------------- barrier
def test_barrier_zero_at_dhat():
    bp = BarrierParams(dhat=0.3, kappa=7.0)
    assert barrier_energy_grad_hess(0.3, bp) == (0.0, 0.0, 0.0)
    assert barrier_energy_grad_hess(0.5, bp) == (0.0, 0.0, 0.0)


def test_barrier_value():
    bp = BarrierParams(dhat=1.0, kappa=1.0)
    b, _, _ = barrier_energy_grad_hess(0.5, bp)
    assert b == pytest.approx(-0.25 * np.log(0.5))  # 0.173287
    assert b == pytest.approx(0.17328679513998632)


def test_barrier_derivatives_match_fd():
    bp = BarrierParams(dhat=0.2, kappa=3.0)
    d = 0.3 * bp.dhat
    eps = 1e-8
    bp1 = barrier_energy_grad_hess(d + eps, bp)
    bm1 = barrier_energy_grad_hess(d - eps, bp)
    _, db, ddb = barrier_energy_grad_hess(d, bp)
    assert abs((bp1[0] - bm1[0]) / (2 * eps) - db) / abs(db) < 1e-6
    assert abs((bp1[1] - bm1[1]) / (2 * eps) - ddb) / abs(ddb) < 1e-6


def test_barrier_c2_at_activation():
    bp = BarrierParams(dhat=0.1, kappa=100.0)
    scale = bp.kappa * bp.dhat ** 2
    for side in (1 - 1e-6, 1 + 1e-6):
        b, db, ddb = barrier_energy_grad_hess(bp.dhat * side, bp)
        assert abs(b) < 1e-9 * scale
        assert abs(db) < 1e-4 * scale / bp.dhat
        assert abs(ddb) < 1e-3 * scale / bp.dhat ** 2


def test_barrier_infeasible_raises():
    bp = BarrierParams(dhat=0.1, kappa=1.0)
    with pytest.raises(FeasibilityError):
        barrier_energy_grad_hess(0.0, bp)
    with pytest.raises(FeasibilityError):
        barrier_energy_grad_hess(-0.5, bp)


# ------------------------------------------------------------- batching
def test_batch_matches_scalar(reference_tet, rng):
    tet = reference_tet
    ne = 7
    pos = tet.rest_positions[tet.tets[0]][None] \
        + 0.1 * rng.standard_normal((ne, 4, 3))
    dmi = np.repeat(tet.dm_inv, ne, axis=0)
    vol = np.full(ne, tet.rest_volumes[0])
    mu = np.full(ne, MAT.mu)
    lam = np.full(ne, MAT.lam)
    e, g, h = en.snh_batch(pos, dmi, vol, mu, lam)
    for k in range(ne):
        der = element_energy_grad_hess(pos[k], dmi[k], MAT, vol[k])
        assert e[k] == pytest.approx(der.energy, rel=1e-12)
        assert np.allclose(g[k], der.gradient, rtol=1e-12, atol=1e-12)
        assert np.allclose(h[k], der.hessian, rtol=1e-12, atol=1e-9)
