"""Per-stencil energies: stable Neo-Hookean elasticity, inertia, log barrier.

All elastic routines are batched over a leading element axis. The
deformation-gradient convention stacks columns, ``vec(F)[3j + r] = F[r, j]``,
and element DOFs are vertex-major (x0,y0,z0, x1,...). Energies are calibrated
so the rest configuration has zero energy and zero gradient.
"""

from dataclasses import dataclass

import numpy as np


class FeasibilityError(Exception):
    """A barrier pair reached non-positive distance."""


@dataclass(frozen=True)
class MaterialParams:
    mu: float  # Lame shear modulus (Pa)
    lam: float  # Lame first parameter (Pa)
    density: float  # kg/m^3

    def __post_init__(self):
        if self.mu <= 0 or self.lam < 0 or self.density <= 0:
            raise ValueError(f"invalid material: mu={self.mu}, lam={self.lam}, "
                             f"density={self.density}")

    @staticmethod
    def from_young_poisson(young: float, poisson: float, density: float) -> "MaterialParams":
        mu = young / (2.0 * (1.0 + poisson))
        lam = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
        return MaterialParams(mu=mu, lam=lam, density=density)


@dataclass(frozen=True)
class BarrierParams:
    dhat: float  # activation distance (m)
    kappa: float  # stiffness multiplier

    def __post_init__(self):
        if self.dhat <= 0 or self.kappa <= 0:
            raise ValueError(f"invalid barrier: dhat={self.dhat}, kappa={self.kappa}")


@dataclass
class ElementDerivatives:
    energy: float
    gradient: np.ndarray  # (12,)
    hessian: np.ndarray  # (12, 12)


def deformation_gradient(positions: np.ndarray, dm_inv: np.ndarray) -> np.ndarray:
    """F = Ds * dm_inv, batched: positions (..., 4, 3), dm_inv (..., 3, 3)."""
    positions = np.asarray(positions, dtype=np.float64)
    ds = np.stack((positions[..., 1, :] - positions[..., 0, :],
                   positions[..., 2, :] - positions[..., 0, :],
                   positions[..., 3, :] - positions[..., 0, :]), axis=-1)
    return ds @ dm_inv


def _snh_coeffs(mu, lam):
    # Reparameterization of Smith-style stable Neo-Hookean so that small-strain
    # behavior matches the input Lame pair and the rest gradient vanishes.
    mu_s = 4.0 * np.asarray(mu, dtype=np.float64) / 3.0
    lam_s = np.asarray(lam, dtype=np.float64) + 5.0 * np.asarray(mu, dtype=np.float64) / 6.0
    alpha = 1.0 + 0.75 * mu_s / lam_s
    return mu_s, lam_s, alpha


def _cofactor(F):
    c = np.empty_like(F)
    c[..., :, 0] = np.cross(F[..., :, 1], F[..., :, 2])
    c[..., :, 1] = np.cross(F[..., :, 2], F[..., :, 0])
    c[..., :, 2] = np.cross(F[..., :, 0], F[..., :, 1])
    return c


def snh_psi(F: np.ndarray, mu, lam) -> np.ndarray:
    """Energy density, zero at F = identity; batched over leading axes."""
    mu_s, lam_s, alpha = _snh_coeffs(mu, lam)
    ic = np.einsum("...ij,...ij->...", F, F)
    j = np.linalg.det(F)
    psi0 = -0.5 * mu_s * np.log(4.0) + 0.5 * lam_s * (1.0 - alpha) ** 2
    return (0.5 * mu_s * (ic - 3.0) - 0.5 * mu_s * np.log(ic + 1.0)
            + 0.5 * lam_s * (j - alpha) ** 2 - psi0)


def snh_piola(F: np.ndarray, mu, lam) -> np.ndarray:
    """First Piola-Kirchhoff stress dPsi/dF, batched."""
    mu_s, lam_s, alpha = _snh_coeffs(mu, lam)
    ic = np.einsum("...ij,...ij->...", F, F)
    j = np.linalg.det(F)
    cof = _cofactor(F)
    t1 = (mu_s * (1.0 - 1.0 / (ic + 1.0)))[..., None, None] * F
    t2 = (lam_s * (j - alpha))[..., None, None] * cof
    return t1 + t2


def _cross_matrix(v):
    """Skew matrices [v]x for v (..., 3)."""
    z = np.zeros(v.shape[:-1], dtype=v.dtype)
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], axis=-1),
        np.stack([v[..., 2], z, -v[..., 0]], axis=-1),
        np.stack([-v[..., 1], v[..., 0], z], axis=-1),
    ], axis=-2)


def snh_hessian9(F: np.ndarray, mu, lam) -> np.ndarray:
    """d2Psi/dF2 as (..., 9, 9) in column-stacked vec convention."""
    F = np.asarray(F, dtype=np.float64)
    mu_s, lam_s, alpha = _snh_coeffs(mu, lam)
    mu_s = np.broadcast_to(np.asarray(mu_s), F.shape[:-2])
    lam_s = np.broadcast_to(np.asarray(lam_s), F.shape[:-2])
    alpha = np.broadcast_to(np.asarray(alpha), F.shape[:-2])
    ic = np.einsum("...ij,...ij->...", F, F)
    j = np.linalg.det(F)
    cof = _cofactor(F)
    fvec = np.swapaxes(F, -1, -2).reshape(F.shape[:-2] + (9,))
    gvec = np.swapaxes(cof, -1, -2).reshape(F.shape[:-2] + (9,))

    h = np.zeros(F.shape[:-2] + (9, 9))
    diag = mu_s * (1.0 - 1.0 / (ic + 1.0))
    idx = np.arange(9)
    h[..., idx, idx] = diag[..., None]
    h += (2.0 * mu_s / (ic + 1.0) ** 2)[..., None, None] * fvec[..., :, None] * fvec[..., None, :]
    h += lam_s[..., None, None] * gvec[..., :, None] * gvec[..., None, :]

    # Volume-Hessian term: block skew structure of d cof(F) / dF.
    f0x = _cross_matrix(F[..., :, 0])
    f1x = _cross_matrix(F[..., :, 1])
    f2x = _cross_matrix(F[..., :, 2])
    scale = (lam_s * (j - alpha))[..., None, None]
    h[..., 0:3, 3:6] += scale * -f2x
    h[..., 0:3, 6:9] += scale * f1x
    h[..., 3:6, 0:3] += scale * f2x
    h[..., 3:6, 6:9] += scale * -f0x
    h[..., 6:9, 0:3] += scale * -f1x
    h[..., 6:9, 3:6] += scale * f0x
    return h


def project_psd(h: np.ndarray) -> np.ndarray:
    """Eigen-clamp symmetric matrices (..., n, n) to the PSD cone."""
    sym = 0.5 * (h + np.swapaxes(h, -1, -2))
    w, v = np.linalg.eigh(sym)
    w = np.maximum(w, 0.0)
    return (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)


def element_weights(dm_inv: np.ndarray) -> np.ndarray:
    """Per-element chain-rule weights W (..., 4, 3): dF[:, j]/dx_m = W[m, j] * I."""
    w = np.empty(dm_inv.shape[:-2] + (4, 3))
    w[..., 0, :] = -dm_inv.sum(axis=-2)
    w[..., 1:4, :] = dm_inv
    return w


def element_energy_grad_hess(positions, dm_inv, params: MaterialParams, volume,
                             project_spd: bool = False) -> ElementDerivatives:
    """Single-element elastic energy, 12-gradient, and 12x12 Hessian."""
    e, g, h = snh_batch(np.asarray(positions)[None], np.asarray(dm_inv)[None],
                        np.asarray([volume]), np.asarray([params.mu]),
                        np.asarray([params.lam]), project_spd=project_spd)
    return ElementDerivatives(energy=float(e[0]), gradient=g[0], hessian=h[0])


def snh_batch(positions, dm_inv, volumes, mu, lam, project_spd=False,
              with_hessian=True):
    """Batched elastic energy/gradient/Hessian over elements.

    positions (ne, 4, 3), dm_inv (ne, 3, 3), volumes/mu/lam (ne,).
    Returns (energy (ne,), gradient (ne, 12), hessian (ne, 12, 12) or None).
    """
    F = deformation_gradient(positions, dm_inv)
    energy = volumes * snh_psi(F, mu, lam)
    p = snh_piola(F, mu, lam)
    w = element_weights(dm_inv)
    grad = volumes[:, None] * np.einsum("emj,erj->emr", w, p).reshape(-1, 12)
    if not with_hessian:
        return energy, grad, None
    h9 = snh_hessian9(F, mu, lam)
    h9b = h9.reshape(-1, 3, 3, 3, 3)  # [j, r, k, s]
    h12 = np.einsum("emj,ejrks,enk->emrns", w, h9b, w).reshape(-1, 12, 12)
    h12 *= volumes[:, None, None]
    if project_spd:
        h12 = project_psd(h12)
    return energy, grad, h12


def snh_energy_only(positions, dm_inv, volumes, mu, lam):
    F = deformation_gradient(positions, dm_inv)
    return volumes * snh_psi(F, mu, lam)


def inertia_energy_grad_hess(x_j, z_j, m_j: float, h: float):
    """Per-vertex inertia: energy, 3-gradient, 3x3 Hessian."""
    diff = np.asarray(x_j, dtype=np.float64) - np.asarray(z_j, dtype=np.float64)
    c = m_j / h ** 2
    energy = 0.5 * c * float(diff @ diff)
    return energy, c * diff, c * np.eye(3)


def barrier_energy_grad_hess(d: float, params: BarrierParams):
    """Scaled log barrier B(d) and its first/second d-derivatives.

    Exactly zero (C2-continuously) for d >= dhat; raises for d <= 0 because
    feasibility must be preserved by step filtering upstream.
    """
    if d <= 0.0:
        raise FeasibilityError(f"barrier distance {d} <= 0")
    dhat, kappa = params.dhat, params.kappa
    if d >= dhat:
        return 0.0, 0.0, 0.0
    gap = d - dhat
    ln = np.log(d / dhat)
    b = -kappa * gap * gap * ln
    db = -kappa * (2.0 * gap * ln + gap * gap / d)
    ddb = -kappa * (2.0 * ln + 4.0 * gap / d - gap * gap / (d * d))
    return float(b), float(db), float(ddb)
