"""Per-configuration estimators and block statistics.

Energies (Ha) for a path of N slices, time step dtau, d = ndim and P mobile particles:

  E_T = 1/N sum_n [ d P / (2 dtau) - sum_i m_i |dr_i|^2 / (2 dtau^2) + sum_pairs du/dtau + <phi> ]
  E_V = d P / (2 beta) + 1/N sum_n [ sum_pairs du/dtau + <phi> ] + 1/(2 beta) sum_{i,n} xi_i(n).grad_{i,n} U

where xi is the bead offset from the particle's path centroid and U the
non-kinetic action. Fixed particles have xi = 0.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import coulomb_action as ca
from .action import BARE_PAIR, NO_PAIR, ActionContext, external_phi, kernel_args
from .model import PathConfiguration

# layout of the scalar output vector of measure_kernel
I_ET, I_EV, I_PX, I_PY, I_PZ, I_D, I_D2 = range(7)
N_SCALARS = 7

UNITS = {"thermodynamic_energy": "Ha", "virial_energy": "Ha",
         "polarization": "e*bohr", "separation": "bohr", "separation_squared": "bohr^2"}


@njit(cache=True, nogil=True)
def measure_kernel(beads, ndim, sep_a, sep_b, out, dipole_series, sep_series,
                   dtau, masses, charges, mobile, omegas, field, pair_index, zprod, coef, meta, diag):
    N = beads.shape[0]
    P = beads.shape[1]
    beta = N * dtau
    cent = np.zeros((P, 3))
    for n in range(N):
        for i in range(P):
            for c in range(3):
                cent[i, c] += beads[n, i, c]
    cent /= N
    n_mob = 0
    for i in range(P):
        if mobile[i]:
            n_mob += 1

    ra = np.empty(3)
    rb = np.empty(3)
    ga = np.empty(3)
    gb = np.empty(3)
    kin = 0.0
    pot = 0.0  # du/dtau and phi, summed over links
    vir = 0.0  # sum xi . grad U
    for n in range(N):
        m = n - 1 if n > 0 else N - 1
        for i in range(P):
            if mobile[i]:
                d2 = 0.0
                for c in range(3):
                    d = beads[n, i, c] - beads[m, i, c]
                    d2 += d * d
                kin += masses[i] * d2 / (2.0 * dtau * dtau)
            ph = external_phi(i, beads[n, i], charges, masses, omegas, field)
            pot += ph
            if mobile[i]:
                # grad of dtau * phi at bead (n, i)
                for c in range(3):
                    g = -charges[i] * field[c]
                    if omegas[i] > 0.0:
                        g += masses[i] * omegas[i] ** 2 * beads[n, i, c]
                    vir += dtau * g * (beads[n, i, c] - cent[i, c])
        for i in range(P):
            for j in range(i + 1, P):
                tix = pair_index[i, j]
                if tix == NO_PAIR:
                    continue
                for c in range(3):
                    ra[c] = beads[m, i, c] - beads[m, j, c]
                    rb[c] = beads[n, i, c] - beads[n, j, c]
                if tix == BARE_PAIR:
                    a = math.sqrt(ra[0] ** 2 + ra[1] ** 2 + ra[2] ** 2)
                    b = math.sqrt(rb[0] ** 2 + rb[1] ** 2 + rb[2] ** 2)
                    pot += 0.5 * zprod[i, j] * (1.0 / a + 1.0 / b)
                    continue
                pot += ca.pair_eval(coef[tix], meta[tix], ra, rb, 1, diag)
                ca.pair_eval_grad(coef[tix], meta[tix], ra, rb, ga, gb, diag)
                for c in range(3):
                    xa = 0.0
                    xb = 0.0
                    if mobile[i]:
                        xa += beads[m, i, c] - cent[i, c]
                        xb += beads[n, i, c] - cent[i, c]
                    if mobile[j]:
                        xa -= beads[m, j, c] - cent[j, c]
                        xb -= beads[n, j, c] - cent[j, c]
                    vir += xa * ga[c] + xb * gb[c]
        # per-slice observables
        for c in range(3):
            s = 0.0
            for i in range(P):
                s += charges[i] * beads[n, i, c]
            dipole_series[n, c] = s
        if sep_a >= 0:
            d2 = 0.0
            for c in range(3):
                d = beads[n, sep_a, c] - beads[n, sep_b, c]
                d2 += d * d
            sep_series[n] = math.sqrt(d2)
    out[I_ET] = ndim * n_mob / (2.0 * dtau) + (pot - kin) / N
    out[I_EV] = ndim * n_mob / (2.0 * beta) + pot / N + vir / (2.0 * beta)
    for c in range(3):
        s = 0.0
        for n in range(N):
            s += dipole_series[n, c]
        out[I_PX + c] = s / N
    if sep_a >= 0:
        s = 0.0
        s2 = 0.0
        for n in range(N):
            s += sep_series[n]
            s2 += sep_series[n] ** 2
        out[I_D] = s / N
        out[I_D2] = s2 / N
    else:
        out[I_D] = 0.0
        out[I_D2] = 0.0


def measure(config: PathConfiguration, ctx: ActionContext, sep_pair=None, diag=None):
    """All scalar estimators plus the per-slice dipole and separation series."""
    N = config.n_slices
    out = np.zeros(N_SCALARS)
    dip = np.zeros((N, 3))
    sep = np.zeros(N)
    a, b = sep_pair if sep_pair is not None else (-1, -1)
    if diag is None:
        diag = np.zeros(1, dtype=np.int64)
    measure_kernel(config.beads, ctx.vspec.spec.ndim, a, b, out, dip, sep,
                   *kernel_args(ctx), diag)
    return out, dip, sep


def thermodynamic_energy(config, ctx) -> float:
    return float(measure(config, ctx)[0][I_ET])


def virial_energy(config, ctx) -> float:
    return float(measure(config, ctx)[0][I_EV])


def polarization(config, ctx) -> np.ndarray:
    return measure(config, ctx)[0][I_PX:I_PZ + 1].copy()


def separation_moments(config: PathConfiguration, pair):
    a, b = pair
    d = np.linalg.norm(config.beads[:, a, :] - config.beads[:, b, :], axis=-1)
    return float(d.mean()), float((d * d).mean())


# -- block statistics -------------------------------------------------------------

def block_mean_error(values):
    """Mean and standard error of the mean over blocks (first axis)."""
    v = np.asarray(values, dtype=float)
    if v.shape[0] < 2:
        raise ValueError("need at least two blocks for an error bar")
    return v.mean(axis=0), v.std(axis=0, ddof=1) / math.sqrt(v.shape[0])


def jackknife(blocks, func):
    """Delete-one-block jackknife of func(mean over blocks); returns (estimate, error)."""
    b = np.asarray(blocks, dtype=float)
    n = b.shape[0]
    if n < 2:
        raise ValueError("need at least two blocks for a jackknife")
    total = b.sum(axis=0)
    full = np.asarray(func(total / n), dtype=float)
    reps = np.array([func((total - b[k]) / (n - 1)) for k in range(n)], dtype=float)
    mean_rep = reps.mean(axis=0)
    err = np.sqrt((n - 1) / n * np.sum((reps - mean_rep) ** 2, axis=0))
    return full, err


def lag1_autocorrelation(values):
    v = np.asarray(values, dtype=float)
    if v.shape[0] < 3:
        return 0.0
    d = v - v.mean(axis=0)
    den = np.sum(d * d, axis=0)
    num = np.sum(d[1:] * d[:-1], axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(np.max(r))


AUTOCORR_LIMIT = 0.1


@dataclass
class EstimatorTrace:
    name: str
    block_means: list = field(default_factory=list)
    units: str = ""

    def add(self, value):
        self.block_means.append(np.asarray(value, dtype=float))

    @property
    def count(self):
        return len(self.block_means)

    @property
    def values(self):
        return np.array(self.block_means)

    @property
    def mean(self):
        return self.values.mean(axis=0)

    @property
    def stderr(self):
        return block_mean_error(self.values)[1]

    def autocorrelation(self):
        return lag1_autocorrelation(self.values)

    def check_autocorrelation(self):
        r = self.autocorrelation()
        if r > AUTOCORR_LIMIT:
            warnings.warn(f"{self.name}: lag-1 autocorrelation of block means {r:.2f} > "
                          f"{AUTOCORR_LIMIT}; error bar likely underestimated", stacklevel=2)
        return r

    def summary(self):
        out = {"name": self.name, "units": self.units or UNITS.get(self.name, ""),
               "blocks": self.count, "mean": np.atleast_1d(self.mean).tolist()}
        if self.count >= 2:
            out["error"] = np.atleast_1d(self.stderr).tolist()
            out["lag1_autocorrelation"] = self.autocorrelation()
        return out

    @staticmethod
    def merge(traces, name=None):
        """Concatenate block means of several chains (merged mean = block-weighted mean)."""
        traces = list(traces)
        out = EstimatorTrace(name or traces[0].name, units=traces[0].units)
        for t in traces:
            out.block_means.extend(t.block_means)
        return out
