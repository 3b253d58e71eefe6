"""Imaginary-time correlators on the slice grid and their Matsubara transforms.

Accumulators hold raw positive products <A(tau) B(0)>; the minus sign of the
Green's-function convention is applied only when a spectrum is produced.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import bernoulli

DIPOLE_LABELS = tuple(f"P{a}P{b}" for a in "xyz" for b in "xyz")


class CorrelationAccumulator:
    """Block-averaged circular correlations of per-slice observable series.

    ``pairs`` lists (a, b) column indices into the series passed to
    :meth:`accumulate`; bin k of pair (a, b) holds (1/N) sum_j A(j + k s) B(j)
    for stride s = N / n_bins.
    """

    def __init__(self, name, n_slices, beta, pairs, labels=None, n_bins=None, n_obs=None):
        self.name = name
        self.n_slices = int(n_slices)
        self.beta = float(beta)
        self.pairs = [tuple(p) for p in pairs]
        self.labels = tuple(labels or [f"{a}{b}" for a, b in self.pairs])
        self.n_bins = int(n_bins or n_slices)
        if self.n_slices % self.n_bins:
            raise ValueError("n_bins must divide the slice count")
        self.stride = self.n_slices // self.n_bins
        self.n_obs = int(n_obs if n_obs is not None else 1 + max(max(p) for p in self.pairs))
        self._sum = np.zeros((len(self.pairs), self.n_bins))
        self._obs = np.zeros(self.n_obs)
        self._count = 0
        self.block_values = []
        self.block_obs = []

    @property
    def bin_width(self):
        return self.beta / self.n_bins

    @property
    def tau(self):
        return np.arange(self.n_bins) * self.bin_width

    def accumulate(self, series):
        """Add one configuration; ``series`` is (N, n_obs) (or (N,) for one observable)."""
        s = np.asarray(series, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        N = self.n_slices
        F = np.fft.rfft(s, axis=0)
        for k, (a, b) in enumerate(self.pairs):
            c = np.fft.irfft(F[:, a] * np.conj(F[:, b]), n=N) / N
            self._sum[k] += c[::self.stride]
        self._obs += s.mean(axis=0)
        self._count += 1

    def end_block(self):
        if self._count == 0:
            raise ValueError(f"{self.name}: empty block")
        self.block_values.append(self._sum / self._count)
        self.block_obs.append(self._obs / self._count)
        self._sum = np.zeros_like(self._sum)
        self._obs = np.zeros_like(self._obs)
        self._count = 0

    def add_block(self, values, obs):
        self.block_values.append(np.asarray(values, dtype=float))
        self.block_obs.append(np.asarray(obs, dtype=float))

    @property
    def n_blocks(self):
        return len(self.block_values)

    @property
    def values(self):
        """Mean raw correlator, shape (n_pairs, n_bins)."""
        return np.mean(self.block_values, axis=0)

    @property
    def errors(self):
        b = np.array(self.block_values)
        if len(b) < 2:
            return np.full(b.shape[1:], np.nan)
        return b.std(axis=0, ddof=1) / math.sqrt(len(b))

    @property
    def obs_mean(self):
        return np.mean(self.block_obs, axis=0)

    def connected_from(self, values, obs):
        """values - <A><B> for each pair, from given block-averaged inputs."""
        sub = np.array([obs[a] * obs[b] for a, b in self.pairs])
        return values - sub[:, None]

    def connected(self):
        return self.connected_from(self.values, self.obs_mean)

    def blocks(self):
        return np.array(self.block_values), np.array(self.block_obs)

    def copy_empty(self):
        return CorrelationAccumulator(self.name, self.n_slices, self.beta, self.pairs, self.labels,
                                      self.n_bins, self.n_obs)

    @staticmethod
    def merge(accs):
        accs = list(accs)
        out = accs[0].copy_empty()
        for a in accs:
            for v, o in zip(a.block_values, a.block_obs):
                out.add_block(v, o)
        return out

    def to_columns(self, component=0, connected=False):
        """(tau, value, error) columns for one pair."""
        v = self.connected()[component] if connected else self.values[component]
        return np.column_stack([self.tau, v, self.errors[component]])


def separation_accumulator(n_slices, beta, n_bins=None):
    return CorrelationAccumulator("separation", n_slices, beta, [(0, 0)], ["DD"], n_bins, 1)


def dipole_accumulator(n_slices, beta, n_bins=None):
    pairs = [(a, b) for a in range(3) for b in range(3)]
    return CorrelationAccumulator("dipole", n_slices, beta, pairs, DIPOLE_LABELS, n_bins, 3)


# -- transforms -----------------------------------------------------------------------

@lru_cache(maxsize=32)
def _one_sided_weights(n_pts, max_order):
    """w[j, k]: j-th derivative at x = 0 from samples at x = 0, 1, ..., n_pts-1 (unit spacing)."""
    x = np.arange(n_pts, dtype=float)
    V = np.vander(x, n_pts, increasing=True).T  # V[p, k] = x_k^p
    out = np.zeros((max_order + 1, n_pts))
    for j in range(max_order + 1):
        rhs = np.zeros(n_pts)
        rhs[j] = math.factorial(j)
        out[j] = np.linalg.solve(V, rhs)
    return out


EM_TERMS = 4  # Euler-Maclaurin correction terms h^2 .. h^8


def matsubara_transform(g, beta, n_max, convention="beta", method="endpoint"):
    """int_0^beta e^{i omega_n tau} g(tau) dtau for n = 0..n_max.

    ``g`` holds samples at tau_k = k beta / M, k = 0..M-1, along the last axis;
    g(beta) = g(0) by periodicity. "trapezoid" is the plain periodic rule,
    exact only for band-limited g. "endpoint" subtracts the Euler-Maclaurin
    terms generated by the derivative jumps of g at tau = 0, estimated from
    one-sided difference stencils on each side, so the kink of a bosonic
    correlator at tau = 0 costs O(h^10) instead of O(h^2).
    With convention "beta" the result is divided by beta.
    """
    g = np.asarray(g)
    M = g.shape[-1]
    if n_max >= M / 2:
        raise ValueError(f"n_max = {n_max} must be below the Nyquist index {M / 2:g}")
    if convention not in ("beta", "none"):
        raise ValueError(f"unknown convention {convention!r}")
    h = beta / M
    n = np.arange(n_max + 1)
    # sum_{k=0}^{M-1} g_k e^{+i 2 pi n k / M}
    dft = (np.fft.ifft(g, axis=-1) * M)[..., : n_max + 1]
    out = h * dft
    if method == "endpoint":
        top = 2 * EM_TERMS - 1
        n_pts = top + 3
        if M < 2 * n_pts:
            raise ValueError(f"endpoint corrections need at least {2 * n_pts} bins")
        w = _one_sided_weights(n_pts, top)
        right = g[..., :n_pts]  # tau = 0, h, 2h, ...
        left = g[..., (M - np.arange(n_pts)) % M]  # tau = beta, beta - h, ...
        d0 = np.einsum("jk,...k->...j", w, right)
        # stencil on the mirrored axis gives (-1)^j times the derivative at beta
        sgn = (-1.0) ** np.arange(top + 1)
        db = np.einsum("jk,...k->...j", w, left) * sgn
        jump = (db - d0) / h ** np.arange(top + 1)  # [g^(j)] = g^(j)(beta-) - g^(j)(0+)
        iw = 1j * 2 * np.pi * n / beta
        corr = 0.0
        for k in range(1, EM_TERMS + 1):
            m = 2 * k - 1
            b2k = bernoulli(2 * k)[-1]
            fm = 0.0
            for j in range(1, m + 1):
                fm = fm + math.comb(m, j) * iw ** (m - j) * jump[..., j:j + 1]
            corr = corr + b2k / math.factorial(2 * k) * h ** (2 * k) * fm
        out = out - corr
    elif method != "trapezoid":
        raise ValueError(f"unknown method {method!r}")
    if convention == "beta":
        out = out / beta
    return out


@dataclass
class MatsubaraSpectrum:
    n: np.ndarray
    omega: np.ndarray
    values: np.ndarray  # complex, shape (..., len(n))
    beta: float
    convention: str
    errors: np.ndarray | None = None
    labels: tuple = field(default_factory=tuple)

    def component(self, k):
        err = None if self.errors is None else self.errors[k]
        return MatsubaraSpectrum(self.n, self.omega, self.values[k], self.beta, self.convention,
                                 err, (self.labels[k],) if self.labels else ())

    def to_columns(self, k=None):
        v = self.values if k is None else self.values[k]
        e = self.errors if (k is None or self.errors is None) else self.errors[k]
        if e is None:
            e = np.full(v.shape, np.nan)
        return np.column_stack([self.n, self.omega, v.real, v.imag, np.real(e)])


def spectrum_from_values(g_tau, beta, n_max, convention="beta", negate=True, method="endpoint"):
    g = -np.asarray(g_tau) if negate else np.asarray(g_tau)
    vals = matsubara_transform(g, beta, n_max, convention, method)
    n = np.arange(n_max + 1)
    return MatsubaraSpectrum(n, 2 * np.pi * n / beta, vals, beta, convention)


def to_matsubara(acc: CorrelationAccumulator, n_max, convention="beta", connected=True,
                 negate=True, method="endpoint") -> MatsubaraSpectrum:
    """Transform every pair of an accumulator; errors by delete-one-block jackknife.

    ``negate`` applies the Green's-function minus sign G = -<A(tau) B(0)>.
    """
    vals_b, obs_b = acc.blocks()
    nb = len(vals_b)

    def spec_of(vals, obs):
        g = acc.connected_from(vals, obs) if connected else vals
        if negate:
            g = -g
        return matsubara_transform(g, acc.beta, n_max, convention, method)

    full = spec_of(vals_b.mean(axis=0), obs_b.mean(axis=0))
    errors = None
    if nb >= 2:
        tv, to = vals_b.sum(axis=0), obs_b.sum(axis=0)
        reps = np.array([spec_of((tv - vals_b[k]) / (nb - 1), (to - obs_b[k]) / (nb - 1))
                         for k in range(nb)])
        m = reps.mean(axis=0)
        errors = np.sqrt((nb - 1) / nb * np.sum(np.abs(reps - m) ** 2, axis=0))
    n = np.arange(n_max + 1)
    return MatsubaraSpectrum(n, 2 * np.pi * n / acc.beta, full, acc.beta, convention, errors,
                             acc.labels)
