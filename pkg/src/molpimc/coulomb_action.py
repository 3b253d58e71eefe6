"""Tabulated two-body Coulomb action u(r, r'; dtau).

Each radial channel of the relative-coordinate density matrix is built by
repeated squaring from a short-time kernel, the channels are summed along the
collinear line, and the resulting u(q, s) is stored on a (log q, s / s_cap(q))
grid as bicubic Hermite coefficients for fast evaluation inside numba kernels.

    q = (|r| + |r'|) / 2        s = |r - r'|
    s_cap(q) = ((2q)^-4 + s_max^-4)^(-1/4)      (s <= 2q always holds)
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.interpolate import RectBivariateSpline
from scipy.special import ive

from .model import PairActionSettings

FORMAT_VERSION = 1
MAGIC = b"MOLPIMC-PAIR-ACTION\n"

BAND_EXTRA_WIDTHS = 3.0  # band = s_widths + this many thermal widths
MESH_FACTOR = 0.5  # radial mesh spacing in units of the current thermal width
MESH_MAX = 0.02  # never coarsen the radial mesh beyond this (bohr)
LEAK_TOL = 1e-6
L_TOL = 1e-4
# above this reduced mass the thermal width is far below the Coulomb length and the
# partial-wave sum needs thousands of channels; the end-point kernel is used directly
HEAVY_MU = 50.0

# meta layout (float64 vector per table)
M_X0, M_DX, M_NQ, M_NS, M_QMIN, M_QMAX, M_SMAX, M_DTAU, M_Z, M_MU = range(10)
N_META = 10


class TabulationError(RuntimeError):
    """Raised when the squaring mesh leaks probability or the partial-wave sum does not converge."""


@dataclass
class PairActionTable:
    mu: float
    z: float
    delta_tau: float
    settings: PairActionSettings
    coef: np.ndarray  # (2, 4, n_q, n_s): [u, du/dtau] x [f, f_x, f_t, f_xt]
    build_info: dict = field(default_factory=dict)
    diagnostics: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))

    @property
    def s_max(self):
        return self.settings.s_widths * math.sqrt(self.delta_tau / self.mu)

    @property
    def meta(self):
        st = self.settings
        x0, x1 = math.log(st.q_min), math.log(st.q_max)
        m = np.zeros(N_META)
        m[M_X0] = x0
        m[M_DX] = (x1 - x0) / (st.n_q - 1)
        m[M_NQ] = st.n_q
        m[M_NS] = st.n_s
        m[M_QMIN] = st.q_min
        m[M_QMAX] = st.q_max
        m[M_SMAX] = self.s_max
        m[M_DTAU] = self.delta_tau
        m[M_Z] = self.z
        m[M_MU] = self.mu
        return m

    @property
    def q_nodes(self):
        st = self.settings
        return np.exp(np.linspace(math.log(st.q_min), math.log(st.q_max), st.n_q))

    @property
    def t_nodes(self):
        return np.linspace(0.0, 1.0, self.settings.n_s)

    @property
    def u_values(self):
        return self.coef[0, 0]

    @property
    def du_dtau_values(self):
        return self.coef[1, 0]

    def s_nodes(self, q):
        return s_cap(q, self.s_max)[..., None] * self.t_nodes


def s_cap(q, s_max):
    q = np.asarray(q, dtype=float)
    return ((2 * q) ** -4 + s_max ** -4) ** -0.25


# -- radial channel kernels ----------------------------------------------------

def log_free_channel(mu, ell, tau, r1, r2):
    """log of the free radial kernel 4 pi r r' rho0_ell(r, r'; tau)."""
    x = mu * r1 * r2 / tau
    with np.errstate(divide="ignore", invalid="ignore"):
        return (np.log(4 * np.pi * r1 * r2) + 1.5 * np.log(mu / (2 * np.pi * tau))
                - mu * (r1 - r2) ** 2 / (2 * tau)
                + 0.5 * np.log(np.pi / (2 * x)) + np.log(ive(ell + 0.5, x)))


def channel_weights(x, ell_max):
    """(2l+1) sqrt(pi/2x) I_{l+1/2}(x) e^-x for l = 0..ell_max; these sum to 1 over all l."""
    x = np.asarray(x, dtype=float)
    ells = np.arange(ell_max + 1).reshape((-1,) + (1,) * x.ndim)
    return (2 * ells + 1) * np.sqrt(np.pi / (2 * x)) * ive(ells + 0.5, x)


def short_time_action(z, mu, tau, r1, r2):
    """Starting kernel: path-averaged z/r along the straight radial path plus
    the leading tau^2 curvature correction."""
    with np.errstate(divide="ignore", invalid="ignore"):
        d = r1 - r2
        near = np.abs(d) <= 1e-9 * np.maximum(r1, r2)
        avg = np.where(near, 1.0 / r1, (np.log(r1) - np.log(r2)) / np.where(near, 1.0, d))
        curv = (r1 + r2) / (r1 * r1 * r2 * r2)
    return tau * z * avg + tau * tau / (12 * mu) * z * curv


@njit(cache=True, nogil=True)
def _band_square(A, h, Bn):
    """rho(2tau)[i, j] = sum_k w_k rho[i, k] rho[k, j] on a banded symmetric matrix.

    A[i, b] holds rho(r_i, r_{i+b-B}); node 0 (r = 0) is identically zero.
    """
    M, W = A.shape
    B = (W - 1) // 2
    C = np.zeros((M, 2 * Bn + 1))
    for i in range(1, M):
        for bo in range(2 * Bn + 1):
            j = i + bo - Bn
            if j < 1 or j >= M:
                continue
            if j < i:
                C[i, bo] = C[j, i - j + Bn]
                continue
            klo = max(1, j - B)
            khi = min(M - 1, i + B)
            acc = 0.0
            for k in range(klo, khi + 1):
                wk = h if k < M - 1 else 0.5 * h
                acc += wk * A[i, k - i + B] * A[k, j - k + B]
            C[i, bo] = acc
    return C


@njit(cache=True, nogil=True)
def _band_lookup(U, B, i, j):
    return U[i, j - i + B]


@njit(cache=True, nogil=True)
def _lagrange4(t):
    # cubic Lagrange weights on nodes -1, 0, 1, 2
    w0 = -t * (t - 1.0) * (t - 2.0) / 6.0
    w1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0
    w2 = -(t + 1.0) * t * (t - 2.0) / 2.0
    w3 = (t + 1.0) * t * (t - 1.0) / 6.0
    return w0, w1, w2, w3


@njit(cache=True, nogil=True)
def _interp_band(U, h, r1, r2):
    """Local bicubic Lagrange interpolation of the banded surface U at (r1, r2), r1 >= r2."""
    M, W = U.shape
    B = (W - 1) // 2
    out = np.empty(r1.size)
    for n in range(r1.size):
        fi = r1[n] / h
        fj = r2[n] / h
        i0 = min(max(int(math.floor(fi)), 2), M - 3)
        j0 = min(max(int(math.floor(fj)), 2), M - 3)
        wi = _lagrange4(fi - i0)
        wj = _lagrange4(fj - j0)
        acc = 0.0
        for a in range(4):
            ii = i0 - 1 + a
            for b in range(4):
                jj = j0 - 1 + b
                off = jj - ii
                if off < -B or off > B:
                    acc = np.nan
                else:
                    acc += wi[a] * wj[b] * U[ii, off + B]
        out[n] = acc
    return out


def _square_channel(mu, z, ell, tau_final, k, r_extent, band_widths, mesh_factor, mesh_max):
    """Channel action u_l(r_i, r_j; tau_final) on a banded radial mesh.

    Returns (U, h) with U[i, b] = u_l(r_i, r_{i+b-B}), NaN where undefined.
    """
    tau = tau_final / 2 ** k
    h = mesh_factor * math.sqrt(tau / mu)
    M = int(math.ceil(r_extent / h)) + 1
    B = int(math.ceil(band_widths * math.sqrt(tau / mu) / h))
    r = np.arange(M) * h
    off = np.arange(-B, B + 1)
    I = np.arange(M)[:, None]
    J = I + off[None, :]
    valid = (J >= 1) & (J < M) & (I >= 1)
    r1 = np.broadcast_to(r[:, None], J.shape)
    r2 = np.where(valid, J, 1) * h
    with np.errstate(over="ignore", invalid="ignore"):
        A = np.exp(log_free_channel(mu, ell, tau, r1, r2) - short_time_action(z, mu, tau, r1, r2))
    A[~valid | ~np.isfinite(A)] = 0.0
    for _ in range(k):
        tau *= 2
        Bn = int(math.ceil(band_widths * math.sqrt(tau / mu) / h))
        A = _band_square(A, h, Bn)
        rows = A[1:-1]
        peak = rows.max(axis=1)
        ok = peak > 0
        edge = np.maximum(rows[ok, 0], rows[ok, -1]) / peak[ok]
        if edge.size and edge.max() > LEAK_TOL:
            raise TabulationError(
                f"band leakage {edge.max():.2e} > {LEAK_TOL} (l={ell}, tau={tau:g})")
        if 2 * h <= mesh_factor * math.sqrt(tau / mu) and 2 * h <= mesh_max:
            B2 = Bn // 2
            A = np.ascontiguousarray(A[::2, Bn - 2 * B2: Bn + 2 * B2 + 1: 2])
            h *= 2
    M, W = A.shape
    B = (W - 1) // 2
    r = np.arange(M) * h
    J = np.arange(M)[:, None] + np.arange(-B, B + 1)[None, :]
    valid = (J >= 1) & (J < M) & (np.arange(M)[:, None] >= 1)
    r1 = np.broadcast_to(r[:, None], J.shape)
    r2 = np.where(valid, J, 1) * h
    with np.errstate(divide="ignore", invalid="ignore"):
        U = log_free_channel(mu, ell, tau, r1, r2) - np.log(A)
    U[~valid | ~np.isfinite(U)] = np.nan
    return U, h


def _collinear_action(mu, z, tau, r1, r2, settings, k, band_widths):
    """u(r1, r2) for collinear points r1 >= r2 > 0 by a partial-wave sum with a tail term.

    The tail l > l_max reuses u_{l_max}. Returns (u, estimated truncation error).
    """
    L = settings.l_max
    L_check = L - max(L // 4, 1)
    r_extent = float(np.max(r1)) + (band_widths + 4) * math.sqrt(tau / mu)
    x = mu * r1 * r2 / tau
    w = channel_weights(x, L)
    acc = np.zeros_like(r1)
    acc_check = None
    u_prev = None
    u_check_last = None
    for ell in range(L + 1):
        U, h = _square_channel(mu, z, ell, tau, k, r_extent, band_widths, MESH_FACTOR, MESH_MAX)
        u_ell = _interp_band(U, h, r1, r2)
        if u_prev is not None:
            bad = ~np.isfinite(u_ell)
            u_ell[bad] = u_prev[bad]
        elif not np.all(np.isfinite(u_ell)):
            raise TabulationError("s-wave channel undefined on part of the grid")
        acc += w[ell] * np.exp(-u_ell)
        u_prev = u_ell
        if ell == L_check:
            acc_check = acc.copy()
            u_check_last = u_ell.copy()
    wsum = w.sum(axis=0)
    wsum_check = w[:L_check + 1].sum(axis=0)
    tail = np.clip(1.0 - wsum, 0.0, None)
    tail_check = np.clip(1.0 - wsum_check, 0.0, None)
    u = -np.log(acc + tail * np.exp(-u_prev))
    u_chk = -np.log(acc_check + tail_check * np.exp(-u_check_last))
    return u, np.abs(u - u_chk)


def _table_points(q, t, s_max):
    s = s_cap(q, s_max)[:, None] * t[None, :]
    r1 = q[:, None] + s / 2
    r2 = q[:, None] - s / 2
    return r1, r2


def _spline_coefficients(x, t, f):
    """Node values and derivatives (f, f_x, f_t, f_xt) from a C2 bicubic spline.

    The spline is fitted on t mirrored to [-1, 1] so that f is even in s.
    """
    tt = np.concatenate([-t[:0:-1], t])
    ff = np.concatenate([f[:, :0:-1], f], axis=1)
    spl = RectBivariateSpline(x, tt, ff, kx=3, ky=3, s=0)
    out = np.empty((4,) + f.shape)
    out[0] = f
    out[1] = spl(x, t, dx=1, dy=0)
    out[2] = spl(x, t, dx=0, dy=1)
    out[3] = spl(x, t, dx=1, dy=1)
    out[2][:, 0] = 0.0
    out[3][:, 0] = 0.0
    return out


def tabulate_pair_action(mu, z, delta_tau, settings: PairActionSettings | None = None,
                         squarings=None, progress=None) -> PairActionTable:
    """Build the pair-action table for reduced mass ``mu`` and charge product ``z``."""
    st = settings or PairActionSettings()
    k = st.squarings if squarings is None else squarings
    if not mu > 0 or not delta_tau > 0:
        raise ValueError("mu and delta_tau must be positive")
    if k < 6:
        raise ValueError("at least 6 squarings required")
    if st.s_widths < 6:
        raise ValueError("s grid must reach six thermal widths")
    s_max = st.s_widths * math.sqrt(delta_tau / mu)
    x = np.linspace(math.log(st.q_min), math.log(st.q_max), st.n_q)
    q = np.exp(x)
    t = np.linspace(0.0, 1.0, st.n_s)
    info = {"squarings": k, "l_max": st.l_max, "epsilon": st.epsilon,
            "mesh_factor": MESH_FACTOR, "mesh_max": MESH_MAX}
    coef = np.zeros((2, 4, st.n_q, st.n_s))
    if z == 0:
        return PairActionTable(float(mu), 0.0, float(delta_tau), st, coef, dict(info, l_error=0.0))

    r1, r2 = _table_points(q, t, s_max)
    if mu > HEAVY_MU:
        info["method"] = "end-point"
        u0 = short_time_action(z, mu, delta_tau, r1, r2)
        up = short_time_action(z, mu, delta_tau * (1 + st.epsilon), r1, r2)
        um = short_time_action(z, mu, delta_tau * (1 - st.epsilon), r1, r2)
        info["l_error"] = 0.0
        du = (up - um) / (2 * st.epsilon * delta_tau)
        coef[0] = _spline_coefficients(x, t, u0)
        coef[1] = _spline_coefficients(x, t, du)
        return PairActionTable(float(mu), float(z), float(delta_tau), st, coef, info)
    info["method"] = "squaring"
    band = st.s_widths * math.sqrt(1 + st.epsilon) + BAND_EXTRA_WIDTHS
    us, errs = [], []
    for scale in (1.0, 1.0 + st.epsilon, 1.0 - st.epsilon):
        if progress:
            progress(f"tau = {delta_tau * scale:g}")
        u, err = _collinear_action(mu, z, delta_tau * scale, r1.ravel(), r2.ravel(), st, k, band)
        us.append(u.reshape(r1.shape))
        errs.append(err.reshape(r1.shape))
    u0, up, um = us
    scale = np.maximum(np.abs(u0), delta_tau * abs(z) / st.q_max)
    rel = (errs[0] / scale).max()
    info["l_error"] = float(rel)
    if rel > L_TOL:
        raise TabulationError(f"partial-wave sum not converged: relative tail change {rel:.2e} > {L_TOL}")
    du = (up - um) / (2 * st.epsilon * delta_tau)
    coef[0] = _spline_coefficients(x, t, u0)
    coef[1] = _spline_coefficients(x, t, du)
    return PairActionTable(float(mu), float(z), float(delta_tau), st, coef, info)


# -- evaluation ------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _hermite(p):
    p2 = p * p
    p3 = p2 * p
    return (2 * p3 - 3 * p2 + 1, p3 - 2 * p2 + p, -2 * p3 + 3 * p2, p3 - p2,
            6 * p2 - 6 * p, 3 * p2 - 4 * p + 1, -6 * p2 + 6 * p, 3 * p2 - 2 * p)


@njit(cache=True, nogil=True)
def _bicubic(c, ix, it, p, w, dx, dt):
    """Value and (d/dx, d/dt) of a bicubic Hermite patch; c is (4, n_q, n_s)."""
    a0, a1, a2, a3, da0, da1, da2, da3 = _hermite(p)
    b0, b1, b2, b3, db0, db1, db2, db3 = _hermite(w)
    f = 0.0
    fx = 0.0
    ft = 0.0
    for ca in range(2):
        if ca == 0:
            A0, A1, D0, D1 = a0, a1, da0, da1
        else:
            A0, A1, D0, D1 = a2, a3, da2, da3
        for cb in range(2):
            if cb == 0:
                B0, B1, E0, E1 = b0, b1, db0, db1
            else:
                B0, B1, E0, E1 = b2, b3, db2, db3
            i = ix + ca
            j = it + cb
            v = c[0, i, j]
            vx = c[1, i, j] * dx
            vt = c[2, i, j] * dt
            vxt = c[3, i, j] * dx * dt
            f += A0 * B0 * v + A1 * B0 * vx + A0 * B1 * vt + A1 * B1 * vxt
            fx += D0 * B0 * v + D1 * B0 * vx + D0 * B1 * vt + D1 * B1 * vxt
            ft += A0 * E0 * v + A1 * E0 * vx + A0 * E1 * vt + A1 * E1 * vxt
    return f, fx / dx, ft / dt


@njit(cache=True, nogil=True)
def pair_eval(coef, meta, ra, rb, which, diag):
    """Table surface ``which`` (0 = u, 1 = du/dtau) at relative coordinates ra, rb.

    ``diag[0]`` counts out-of-grid queries.
    """
    return _pair_core(coef, meta, ra, rb, which, False, ra, rb, diag)


@njit(cache=True, nogil=True)
def pair_eval_grad(coef, meta, ra, rb, grad_a, grad_b, diag):
    """u at (ra, rb) with its gradients written into grad_a and grad_b."""
    return _pair_core(coef, meta, ra, rb, 0, True, grad_a, grad_b, diag)


@njit(cache=True, nogil=True)
def _pair_core(coef, meta, ra, rb, which, want_grad, grad_a, grad_b, diag):
    a = math.sqrt(ra[0] * ra[0] + ra[1] * ra[1] + ra[2] * ra[2])
    b = math.sqrt(rb[0] * rb[0] + rb[1] * rb[1] + rb[2] * rb[2])
    d0 = ra[0] - rb[0]
    d1 = ra[1] - rb[1]
    d2 = ra[2] - rb[2]
    s = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    q = 0.5 * (a + b)
    z = meta[M_Z]
    if want_grad:
        for c in range(3):
            grad_a[c] = 0.0
            grad_b[c] = 0.0
    if z == 0.0:
        return 0.0
    if q > meta[M_QMAX]:
        # primitive end-point rule outside the table
        diag[0] += 1
        if which == 0:
            val = meta[M_DTAU] * z * 0.5 * (1.0 / a + 1.0 / b)
            if want_grad:
                ga = -meta[M_DTAU] * z * 0.5 / (a * a * a)
                gb = -meta[M_DTAU] * z * 0.5 / (b * b * b)
                for c in range(3):
                    grad_a[c] = ga * ra[c]
                    grad_b[c] = gb * rb[c]
            return val
        val = z * 0.5 * (1.0 / a + 1.0 / b)
        if want_grad:
            ga = -z * 0.5 / (a * a * a)
            gb = -z * 0.5 / (b * b * b)
            for c in range(3):
                grad_a[c] = ga * ra[c]
                grad_b[c] = gb * rb[c]
        return val
    clamped_q = False
    if q < meta[M_QMIN]:
        diag[0] += 1
        q = meta[M_QMIN]
        clamped_q = True
    smax = meta[M_SMAX]
    inv4 = (2.0 * q) ** -4 + smax ** -4
    cap = inv4 ** -0.25
    clamped_s = False
    if s > cap:
        diag[0] += 1
        s_eff = cap
        clamped_s = True
    else:
        s_eff = s
    nq = int(meta[M_NQ])
    ns = int(meta[M_NS])
    dx = meta[M_DX]
    dt = 1.0 / (ns - 1)
    fx_ = (math.log(q) - meta[M_X0]) / dx
    ix = min(max(int(fx_), 0), nq - 2)
    p = fx_ - ix
    tt = s_eff / cap
    ft_ = tt / dt
    it = min(max(int(ft_), 0), ns - 2)
    w = ft_ - it
    f, f_x, f_t = _bicubic(coef[which], ix, it, p, w, dx, dt)
    if want_grad:
        # chain rule through x = log q and t = s / s_cap(q)
        dcap_dq = 2.0 * (cap / (2.0 * q)) ** 5
        f_s = 0.0 if clamped_s else f_t / cap
        f_q = 0.0 if clamped_q else f_x / q - f_t * tt / cap * dcap_dq
        if clamped_s and not clamped_q:
            # t pinned at 1: s_eff follows s_cap(q)
            f_q = f_x / q
        for c in range(3):
            ha = ra[c] / a if a > 0 else 0.0
            hb = rb[c] / b if b > 0 else 0.0
            dd = (ra[c] - rb[c]) / s if s > 0 else 0.0
            grad_a[c] = 0.5 * f_q * ha + f_s * dd
            grad_b[c] = 0.5 * f_q * hb - f_s * dd
    return f


def _vec(r):
    v = np.zeros(3)
    r = np.asarray(r, dtype=float).ravel()
    v[:r.size] = r
    return v


def evaluate_u(table: PairActionTable, r, r_prime) -> float:
    return pair_eval(table.coef, table.meta, _vec(r), _vec(r_prime), 0, table.diagnostics)


def evaluate_du_dtau(table: PairActionTable, r, r_prime) -> float:
    return pair_eval(table.coef, table.meta, _vec(r), _vec(r_prime), 1, table.diagnostics)


def evaluate_gradient(table: PairActionTable, r, r_prime):
    ga, gb = np.zeros(3), np.zeros(3)
    pair_eval_grad(table.coef, table.meta, _vec(r), _vec(r_prime), ga, gb, table.diagnostics)
    return ga, gb


# -- file format -------------------------------------------------------------------
# MAGIC, 8-byte little-endian header length, JSON header, zero padding to a
# 64-byte boundary, then the float64 coefficient array in C order.

def save_table(table: PairActionTable, path) -> Path:
    from dataclasses import asdict
    header = {
        "format_version": FORMAT_VERSION,
        "mu": table.mu, "z": table.z, "delta_tau": table.delta_tau,
        "settings": asdict(table.settings) | {"tables_dir": None},
        "build": table.build_info,
        "shape": list(table.coef.shape), "dtype": "<f8",
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    pre = MAGIC + len(hdr).to_bytes(8, "little") + hdr
    pad = (-len(pre)) % 64
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(pre + b"\0" * pad)
        fh.write(np.ascontiguousarray(table.coef, dtype="<f8").tobytes())
    return path


def read_header(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a pair-action table")
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n))
    offset = len(MAGIC) + 8 + n
    offset += (-offset) % 64
    return header, offset


def load_table(path, mmap=True) -> PairActionTable:
    header, offset = read_header(path)
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
    shape = tuple(header["shape"])
    if mmap:
        coef = np.memmap(path, dtype="<f8", mode="r", offset=offset, shape=shape)
    else:
        coef = np.fromfile(path, dtype="<f8", offset=offset).reshape(shape)
    st = PairActionSettings(**header["settings"])
    return PairActionTable(header["mu"], header["z"], header["delta_tau"], st,
                           np.asarray(coef), header.get("build", {}))


def table_filename(name_a, name_b, mu, z, delta_tau):
    return f"pair_{name_a}-{name_b}_mu{mu:.6g}_z{z:+g}_dt{delta_tau:g}.tbl"
