"""Physical properties from correlators and estimator traces.

Spectra follow the Green's-function sign: G(i w_n) = -int e^{i w_n tau} <dA(tau) dA(0)>,
optionally divided by beta (convention "beta"). The harmonic-oscillator model is

  G(i w_n) = -c / (m (w_n^2 + w^2)),   c = 1/beta ("beta") or 1 ("none").
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .estimators import EstimatorTrace, jackknife
from .greens import CorrelationAccumulator, MatsubaraSpectrum, matsubara_transform
from .model import HARTREE_TO_WAVENUMBER, SystemSpec, validate_spec, with_fixed_positions


class AnalysisError(ValueError):
    pass


@dataclass
class FrequencyResult:
    omega_fit: float
    omega_fit_error: float
    omega_zero_mode: float
    omega_zero_mode_error: float
    omega_linewidth: float
    omega_linewidth_error: float
    n_fit: int = 0
    linewidth_bracket: tuple = ()

    def as_dict(self):
        d = {k: getattr(self, k) for k in ("omega_fit", "omega_fit_error", "omega_zero_mode",
                                           "omega_zero_mode_error", "omega_linewidth",
                                           "omega_linewidth_error", "n_fit")}
        d["linewidth_bracket"] = list(self.linewidth_bracket)
        d["units"] = "Ha"
        d["omega_fit_wavenumber"] = self.omega_fit * HARTREE_TO_WAVENUMBER
        return d


def _prefactor(spectrum: MatsubaraSpectrum):
    if spectrum.convention == "beta":
        return 1.0 / spectrum.beta
    if spectrum.convention == "none":
        return 1.0
    raise AnalysisError(f"unknown convention {spectrum.convention!r}")


def sho_lorentzian(omega_n, omega, m, beta, convention="beta"):
    c = 1.0 / beta if convention == "beta" else 1.0
    return -c / (m * (np.asarray(omega_n) ** 2 + omega ** 2))


def _real_values(spectrum):
    v = np.asarray(spectrum.values)
    if v.ndim != 1:
        raise AnalysisError("expected a single-component spectrum; use spectrum.component(k)")
    e = None if spectrum.errors is None else np.real(np.asarray(spectrum.errors, dtype=complex))
    return v.real, e


def frequency_from_zero_mode(spectrum: MatsubaraSpectrum, m):
    """w = sqrt(-c / (m G(0))); returns (w, error)."""
    g, e = _real_values(spectrum)
    g0 = g[0]
    if not g0 < 0:
        raise AnalysisError(f"G(0) = {g0:.3e} is not negative: mean not subtracted or data too noisy")
    w = math.sqrt(-_prefactor(spectrum) / (m * g0))
    err = 0.5 * w * abs(e[0] / g0) if e is not None and np.isfinite(e[0]) else float("nan")
    return w, err


def linewidth_frequency(spectrum: MatsubaraSpectrum):
    """Half width at half maximum of |G(i w_n)|; returns (w, error, (w_lo, w_hi)).

    1/|G| is interpolated linearly in w_n^2 between the two frequencies that
    bracket the half-maximum point, which is exact for the oscillator model.
    The error propagates the statistical errors of the three values used.
    """
    g, e = _real_values(spectrum)
    a = np.abs(g)
    half = 0.5 * a[0]
    below = np.flatnonzero(a[1:] <= half)
    if a[0] == 0 or below.size == 0:
        raise AnalysisError("half maximum lies outside the sampled frequency range")
    n = below[0] + 1
    w = np.asarray(spectrum.omega)

    def hw(a0, a_lo, a_hi):
        y0, y1 = 1.0 / a_lo, 1.0 / a_hi
        target = 2.0 / a0
        x0, x1 = w[n - 1] ** 2, w[n] ** 2
        return math.sqrt(x0 + (target - y0) * (x1 - x0) / (y1 - y0))

    val = hw(a[0], a[n - 1], a[n])
    err = float("nan")
    if e is not None and np.all(np.isfinite(e[[0, n - 1, n]])):
        idx = sorted({0, n - 1, n})
        var = 0.0
        for k in idx:
            step = 1e-6 * a[k] if a[k] else 1e-12
            b = a.copy()
            b[k] += step
            d = (hw(b[0], b[n - 1], b[n]) - val) / step
            var += (d * e[k]) ** 2
        err = math.sqrt(var)
    return val, err, (float(w[n - 1]), float(w[n]))


def fit_sho_frequency(spectrum: MatsubaraSpectrum, m, n_fit=None):
    """Weighted least-squares fit of the oscillator model with w the only free parameter.

    Returns (w, error, n_fit). By default every n with w_n <= 3 w0 is used,
    where w0 comes from the zero mode (at least two points).
    """
    g, e = _real_values(spectrum)
    c = _prefactor(spectrum)
    w0, _ = frequency_from_zero_mode(spectrum, m)
    omega_n = np.asarray(spectrum.omega)
    if n_fit is None:
        n_fit = max(int(np.sum(omega_n <= 3 * w0)), 2)
    n_fit = min(n_fit, len(g))
    x, y = omega_n[:n_fit], g[:n_fit]
    if e is not None and np.all(np.isfinite(e[:n_fit])) and np.all(e[:n_fit] > 0):
        sig, weighted = e[:n_fit], True
    else:
        sig, weighted = np.full(n_fit, max(np.abs(y).max(), 1e-300)), False

    def resid(p):
        return (-c / (m * (x ** 2 + p[0] ** 2)) - y) / sig

    sol = least_squares(resid, [w0], x_scale=[w0], xtol=1e-15, ftol=1e-15, gtol=1e-15)
    if not sol.success or not sol.x[0] > 0:
        raise AnalysisError(f"oscillator fit did not converge: {sol.message}")
    w = abs(float(sol.x[0]))
    J = sol.jac
    jtj = float((J.T @ J).item())
    if jtj <= 0:
        raise AnalysisError("degenerate fit: zero sensitivity to the frequency")
    var = 1.0 / jtj
    if not weighted:
        dof = max(n_fit - 1, 1)
        var *= 2 * sol.cost / dof
    return w, math.sqrt(var), n_fit


def analyze_frequency(spectrum: MatsubaraSpectrum, m, n_fit=None) -> FrequencyResult:
    wf, ef, nf = fit_sho_frequency(spectrum, m, n_fit)
    wz, ez = frequency_from_zero_mode(spectrum, m)
    wl, el, br = linewidth_frequency(spectrum)
    return FrequencyResult(wf, ef, wz, ez, wl, el, nf, br)


def spectrum_from_correlator(acc: CorrelationAccumulator, component=0, n_max=None,
                             convention="beta", method="endpoint"):
    """Connected, sign-flipped spectrum of one accumulator pair with jackknife errors."""
    from .greens import to_matsubara
    n_max = n_max if n_max is not None else min(acc.n_bins // 2 - 1, 64)
    return to_matsubara(acc, n_max, convention, connected=True, negate=True,
                        method=method).component(component)


# -- bond length ------------------------------------------------------------------

def bond_length_from_correlator(acc: CorrelationAccumulator, component=0):
    """Raw correlator at tau = beta/2 (about <D>^2) and at tau = 0 (<D^2>), with block errors.

    Returns ((value_half, error_half), (value_zero, error_zero)).
    """
    v = np.asarray(acc.values)[component]
    err = np.asarray(acc.errors)[component]
    M = v.shape[0]
    if M % 2 == 0:
        half, half_err = v[M // 2], err[M // 2]
    else:
        k = M // 2
        half = 0.5 * (v[k] + v[k + 1])
        b = np.array(acc.block_values)[:, component]
        cb = 0.5 * (b[:, k] + b[:, k + 1])
        half_err = cb.std(ddof=1) / math.sqrt(len(cb)) if len(cb) > 1 else float("nan")
    return (float(half), float(half_err)), (float(v[0]), float(err[0]))


# -- polarizability ---------------------------------------------------------------

@dataclass
class PolarizabilityResult:
    mean: float
    mean_error: float
    perpendicular: float | None = None
    perpendicular_error: float | None = None
    parallel: float | None = None
    parallel_error: float | None = None
    tensor: list = field(default_factory=list)

    def as_dict(self):
        d = dict(self.__dict__)
        d["units"] = "bohr^3"
        return d


def _alpha_tensor(vals, obs, acc: CorrelationAccumulator):
    g = acc.connected_from(vals, obs)
    a = matsubara_transform(g, acc.beta, 0, "none", "endpoint")[:, 0].real
    return a.reshape(3, 3)


def static_polarizability_from_correlator(acc: CorrelationAccumulator, mode="isotropic",
                                          fixed_geometry=False, ndim=3) -> PolarizabilityResult:
    """alpha_{mu nu} = int_0^beta <dP_mu(tau) dP_nu(0)> dtau (positive sign), jackknife errors.

    mode "anisotropic" reports alpha_perp (mean of xx, yy) and alpha_par (zz)
    for a molecule held on the z axis; "isotropic" reports only the trace mean
    over the first ``ndim`` axes.
    """
    if acc.n_obs != 3 or len(acc.pairs) != 9:
        raise AnalysisError("a dipole accumulator with all nine component pairs is required")
    if mode not in ("isotropic", "anisotropic"):
        raise AnalysisError(f"unknown polarizability mode {mode!r}")
    if mode == "anisotropic" and not fixed_geometry:
        raise AnalysisError("anisotropic decomposition needs a fixed-geometry run")
    if ndim not in (1, 2, 3) or (mode == "anisotropic" and ndim != 3):
        raise AnalysisError(f"polarizability mode {mode!r} is not defined for ndim = {ndim}")
    vb, ob = acc.blocks()
    nb = len(vb)
    flat = np.concatenate([vb.reshape(nb, -1), ob], axis=1)
    nv = vb[0].size

    def f(x):
        t = _alpha_tensor(x[:nv].reshape(vb.shape[1:]), x[nv:], acc)
        perp = 0.5 * (t[0, 0] + t[1, 1])
        return np.array([np.trace(t[:ndim, :ndim]) / ndim, perp, t[2, 2]])

    if nb >= 2:
        est, err = jackknife(flat, f)
    else:
        est, err = f(flat.mean(axis=0)), np.full(3, np.nan)
    tensor = _alpha_tensor(vb.mean(axis=0), ob.mean(axis=0), acc)
    res = PolarizabilityResult(float(est[0]), float(err[0]), tensor=tensor.tolist())
    if mode == "anisotropic":
        res.perpendicular, res.perpendicular_error = float(est[1]), float(err[1])
        res.parallel, res.parallel_error = float(est[2]), float(err[2])
    return res


def polarizability_from_field(trace: EstimatorTrace, field_vector):
    """Finite-field alpha_mu = <P_mu> / E_mu along each axis with a nonzero field."""
    E = np.asarray(field_vector, dtype=float)
    axes = np.flatnonzero(E != 0)
    if axes.size == 0:
        raise AnalysisError("finite-field polarizability needs a nonzero field")
    mean, err = np.atleast_1d(trace.mean), np.atleast_1d(trace.stderr)
    return {int(k): (float(mean[k] / E[k]), float(err[k] / abs(E[k]))) for k in axes}


def linear_response_consistent(a_full, a_half, n_sigma=3.0):
    """Finite-field linearity check between runs at field E and E/2."""
    (v1, e1), (v2, e2) = a_full, a_half
    return abs(v1 - v2) <= n_sigma * math.hypot(e1, e2)


# -- rotational populations ---------------------------------------------------------

def rotational_populations(beta, b_wavenumber, j_max=None, tail=1e-8):
    """Normalized (2J+1) exp(-beta B J(J+1)) for J = 0..j_max; B in cm^-1, beta in 1/Ha."""
    B = b_wavenumber / HARTREE_TO_WAVENUMBER
    if j_max is None:
        j_max = 0
        while (2 * j_max + 3) * math.exp(-beta * B * (j_max + 1) * (j_max + 2)) > tail or j_max < 2:
            j_max += 1
    J = np.arange(j_max + 1)
    logw = np.log(2 * J + 1) - beta * B * J * (J + 1)
    w = np.exp(logw - logw.max())
    return w / w.sum()


# -- Born-Oppenheimer scan ----------------------------------------------------------

def dedupe_separations(separations):
    seen, out = set(), []
    for d in separations:
        key = round(float(d), 10)
        if key in seen:
            warnings.warn(f"duplicate separation {d} dropped", stacklevel=2)
            continue
        seen.add(key)
        out.append(float(d))
    return out


def scan_bo_surface(separations, template: SystemSpec, tables, nucleus="p", run_kwargs=None,
                    progress=None):
    """Fixed-nuclei virial energies along the bond axis; returns [(D, E, error)].

    ``tables`` maps table keys to loaded tables and is shared by every point.
    """
    from .action import build_action_context
    from .sampler import run_simulation
    seps = dedupe_separations(separations)
    out = []
    for d in seps:
        spec = with_fixed_positions(template, nucleus, [(0.0, 0.0, -0.5 * d), (0.0, 0.0, 0.5 * d)])
        vspec = validate_spec(spec)
        ctx = build_action_context(vspec, tables)
        res = run_simulation(vspec, ctx, **(run_kwargs or {}))
        tr = res.trace("virial_energy")
        out.append((d, float(tr.mean), float(tr.stderr)))
        if progress:
            progress(d, out[-1])
    return out
