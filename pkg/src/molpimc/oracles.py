"""Independent reference values: harmonic-oscillator closed forms and a
brute-force partial-wave Coulomb density matrix.

Everything here is deliberately slow and simple; it backs the frozen test
fixtures and is never called from the sampling code.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sl
from scipy.special import eval_legendre, ive


# -- harmonic oscillator ------------------------------------------------------

@dataclass(frozen=True)
class SHOReference:
    m: float
    omega: float
    beta: float

    def __post_init__(self):
        if not (self.m > 0 and self.omega > 0 and self.beta > 0):
            raise ValueError("m, omega and beta must all be positive")

    @property
    def occupation(self):
        return 1.0 / math.expm1(self.omega * self.beta)


def sho_g_tau(ref: SHOReference, tau):
    """-<x(tau) x(0)> for a thermal oscillator, 0 <= tau <= beta."""
    tau = np.asarray(tau, dtype=float)
    n = ref.occupation
    w = ref.omega
    return -((n + 1) * np.exp(-w * tau) + n * np.exp(w * tau)) / (2 * ref.m * w)


def matsubara_frequencies(beta, n):
    return 2 * np.pi * np.asarray(n, dtype=float) / beta


def sho_g_matsubara(ref: SHOReference, n, convention="beta"):
    """Transform of sho_g_tau at bosonic frequency index n.

    convention "beta" carries the 1/beta prefactor, "none" omits it.
    """
    wn = matsubara_frequencies(ref.beta, n)
    g = -(1.0 / ref.m) / (wn ** 2 + ref.omega ** 2)
    if convention == "beta":
        return g / ref.beta
    if convention == "none":
        return g
    raise ValueError(f"unknown convention {convention!r}")


def sho_alpha(ref: SHOReference, charge=1.0):
    return charge ** 2 / (ref.m * ref.omega ** 2)


def sho_energy(ref: SHOReference):
    x = ref.beta * ref.omega / 2
    return ref.omega / 2 / math.tanh(x)


def sho_x2(ref: SHOReference):
    return 1.0 / (2 * ref.m * ref.omega * math.tanh(ref.beta * ref.omega / 2))


def _normal_modes(n_slices):
    k = np.arange(n_slices)
    return 2.0 - 2.0 * np.cos(2 * np.pi * k / n_slices)


def discretized_sho_variance(ref: SHOReference, delta_tau):
    """Exact per-dimension <x^2> of the N-slice primitive-action oscillator chain."""
    n = int(round(ref.beta / delta_tau))
    a = _normal_modes(n)
    lam = ref.m * (a / delta_tau + delta_tau * ref.omega ** 2)
    return float(np.sum(1.0 / lam) / n)


def discretized_sho_energy(ref: SHOReference, delta_tau):
    """Exact per-dimension energy -d ln Z_N / d beta of the primitive chain at fixed N."""
    n = int(round(ref.beta / delta_tau))
    a = _normal_modes(n)
    e = delta_tau * ref.omega ** 2
    return float(np.sum(e / (a + delta_tau * e)) / n)


def discretized_sho_centroid_variance(ref: SHOReference, delta_tau):
    """beta <xbar^2> of the chain; equals 1/(m omega^2) for any N."""
    return 1.0 / (ref.m * ref.omega ** 2)


def free_bead_centroid_variance(m, beta, n_slices):
    """Per-dimension variance of one bead about the centroid of a free closed path."""
    return beta * (1.0 - 1.0 / n_slices ** 2) / (12.0 * m)


# -- Coulomb partial-wave oracle ------------------------------------------------

class OracleConvergenceError(RuntimeError):
    pass


@lru_cache(maxsize=2)
def _radial_dvr(mu, z, ell, h, n_pts):
    """Sinc-DVR eigenpairs of the radial Hamiltonian on r_i = i h, i = 1..n_pts."""
    i = np.arange(1, n_pts + 1, dtype=float)
    d = i[:, None] - i[None, :]
    s = i[:, None] + i[None, :]
    with np.errstate(divide="ignore"):
        T = (-1.0) ** np.abs(d) * (2.0 / d ** 2 - 2.0 / s ** 2)
    T[np.diag_indices(n_pts)] = np.pi ** 2 / 3 - 1.0 / (2 * i ** 2)
    T /= 2 * mu * h * h
    r = i * h
    H = T + np.diag(z / r + ell * (ell + 1) / (2 * mu * r * r))
    E, C = sl.eigh(H)
    return r, E, C / math.sqrt(h)


def _sinc_basis(rq, r, h):
    rq = np.atleast_1d(rq)
    return np.sinc((rq[:, None] - r[None, :]) / h) - np.sinc((rq[:, None] + r[None, :]) / h)


def radial_channel_kernel(mu, z, ell, tau, r1, r2, h, r_box):
    """Radial Bloch kernel g_l(r1, r2; tau) by eigendecomposition (no 1/(4 pi r r') factor)."""
    n_pts = int(math.ceil(r_box / h))
    r, E, C = _radial_dvr(float(mu), float(z), int(ell), float(h), n_pts)
    b1 = _sinc_basis(r1, r, h) @ C
    b2 = _sinc_basis(r2, r, h) @ C
    e0 = E.min()
    w = np.exp(-tau * (E - e0))
    return np.sum(b1 * w * b2, axis=1) * math.exp(-tau * e0)


def free_density_matrix(mu, tau, r, r_prime):
    d2 = np.sum((np.asarray(r, float) - np.asarray(r_prime, float)) ** 2, axis=-1)
    return (2 * np.pi * tau / mu) ** -1.5 * np.exp(-mu * d2 / (2 * tau))


def _pair_rho(mu, z, tau, r, rp, h, r_box, ell_cap, tol):
    a = np.linalg.norm(r, axis=-1)
    b = np.linalg.norm(rp, axis=-1)
    cos = np.clip(np.sum(r * rp, axis=-1) / (a * b), -1.0, 1.0)
    x = mu * a * b / tau
    total = np.zeros_like(a)
    for ell in range(ell_cap + 1):
        g = radial_channel_kernel(mu, z, ell, tau, a, b, h, r_box)
        term = (2 * ell + 1) * g * eval_legendre(ell, cos) / (4 * np.pi * a * b)
        total += term
        # free-channel weight bounds the remaining terms
        wfree = (2 * ell + 1) * np.sqrt(np.pi / (2 * x)) * ive(ell + 0.5, x)
        if ell > 2 and np.all(wfree < tol):
            return total
    raise OracleConvergenceError(f"partial-wave sum not converged by l = {ell_cap}")


def oracle_pair_density_matrix(mu, z, tau, r, r_prime, h=0.005, r_box=None, ell_cap=400,
                               tol=1e-15, richardson=True, mesh_tol=1e-5):
    """Relative-coordinate pair density matrix rho(r, r'; tau) by explicit partial waves.

    Each channel is diagonalized on a sinc-DVR mesh. With ``richardson`` the
    result is computed on meshes h and h/sqrt(2) and extrapolated in h^2; the
    two raw values must agree to ``mesh_tol`` relative, otherwise
    OracleConvergenceError is raised. Far off-diagonal points, where
    rho/rho_diag drops below ~1e-4, lose accuracy to round-off in the
    eigen-expansion and fail that check.
    """
    r = np.atleast_2d(np.asarray(r, dtype=float))
    rp = np.atleast_2d(np.asarray(r_prime, dtype=float))
    if not tau > 0:
        raise ValueError("tau must be positive")
    if r_box is None:
        rmax = max(np.linalg.norm(r, axis=-1).max(), np.linalg.norm(rp, axis=-1).max())
        r_box = rmax + 14 * math.sqrt(tau / mu) + 1.0
    rho1 = _pair_rho(mu, z, tau, r, rp, h, r_box, ell_cap, tol)
    if not richardson:
        return rho1
    h2 = h / math.sqrt(2.0)
    rho2 = _pair_rho(mu, z, tau, r, rp, h2, r_box, ell_cap, tol)
    rel = np.max(np.abs(rho1 / rho2 - 1.0))
    if rel > mesh_tol:
        raise OracleConvergenceError(f"mesh self-convergence {rel:.2e} > {mesh_tol}")
    return 2 * rho2 - rho1


def oracle_pair_action(mu, z, tau, r, r_prime, **kw):
    """u = -ln(rho_pair / rho_free) from the partial-wave oracle."""
    rho = oracle_pair_density_matrix(mu, z, tau, r, r_prime, **kw)
    return -np.log(rho / free_density_matrix(mu, tau, np.atleast_2d(r), np.atleast_2d(r_prime)))


def oracle_du_dtau(mu, z, tau, r, r_prime, eps=0.05, **kw):
    up = oracle_pair_action(mu, z, tau * (1 + eps), r, r_prime, **kw)
    um = oracle_pair_action(mu, z, tau * (1 - eps), r, r_prime, **kw)
    return (up - um) / (2 * eps * tau)


def hydrogen_ground_state_limit(tau, r, r_prime):
    """e^{tau/2} psi_0(r) psi_0(r') for the 1s state, mu = 1, z = -1."""
    a = np.linalg.norm(np.atleast_2d(r), axis=-1)
    b = np.linalg.norm(np.atleast_2d(r_prime), axis=-1)
    return np.exp(0.5 * tau) * np.exp(-a - b) / np.pi
