"""Link action of the discretized path integral and local action differences.

Link n joins slice n-1 to slice n (cyclic). Its action is

    sum_i m_i |r_i(n) - r_i(n-1)|^2 / (2 dtau)                (mobile i only)
  + sum_{i<j} u_ij(r_ij(n-1), r_ij(n))                          (pair action)
  + dtau/2 sum_i [phi_i(r_i(n-1)) + phi_i(r_i(n))]             (external terms)

with phi_i(x) = -q_i E.x + m_i w_i^2 |x|^2 / 2. Pairs with two fixed members
use the bare Coulomb term; pairs with zero charge product are skipped.
"""
from __future__ import annotations

import math
from collections import namedtuple
from pathlib import Path

import numpy as np
from numba import njit

from . import coulomb_action as ca
from .model import PathConfiguration, ValidatedSpec

NO_PAIR = -1
BARE_PAIR = -2

ActionContext = namedtuple("ActionContext", [
    "vspec", "tables", "table_keys",
    "dtau", "masses", "charges", "mobile", "omegas", "field", "lam",
    "pair_index", "zprod", "coef", "meta",
])


class MissingTableError(LookupError):
    pass


def pair_requirements(vspec: ValidatedSpec):
    """Tables needed by this system as {key: (name_a, name_b, mu, z)}.

    A pair with one fixed member uses the mobile particle's own mass, since the
    fixed particle acts as an infinitely heavy centre.
    """
    spec = vspec.spec
    names = [spec.species[k].name for k in vspec.species_of_particle]
    need = {}
    P = vspec.n_particles
    for i in range(P):
        for j in range(i + 1, P):
            z = vspec.charges[i] * vspec.charges[j]
            if z == 0 or not (vspec.mobile[i] or vspec.mobile[j]):
                continue
            mi, mj = vspec.masses[i], vspec.masses[j]
            if vspec.mobile[i] and vspec.mobile[j]:
                mu = mi * mj / (mi + mj)
            else:
                mu = mi if vspec.mobile[i] else mj
            a, b = sorted((names[i], names[j]))
            key = ca.table_filename(a, b, mu, z, vspec.delta_tau)
            need[key] = (a, b, float(mu), float(z))
    return need


def build_action_context(vspec: ValidatedSpec, tables=None, field=None) -> ActionContext:
    """Pack the spec and its pair tables into flat arrays for the numba kernels.

    ``tables`` maps requirement keys (see :func:`pair_requirements`) to tables.
    """
    tables = dict(tables or {})
    need = pair_requirements(vspec)
    missing = [k for k in need if k not in tables]
    if missing:
        raise MissingTableError(f"missing pair-action tables: {missing}")
    keys = sorted(need)
    for k in keys:
        t = tables[k]
        _, _, mu, z = need[k]
        if abs(t.delta_tau - vspec.delta_tau) > 1e-12 * vspec.delta_tau:
            raise MissingTableError(f"{k}: table time step {t.delta_tau} != {vspec.delta_tau}")
        if abs(t.mu - mu) > 1e-9 * mu or t.z != z:
            raise MissingTableError(f"{k}: table (mu={t.mu}, z={t.z}) does not match ({mu}, {z})")
    P = vspec.n_particles
    spec = vspec.spec
    names = [spec.species[k].name for k in vspec.species_of_particle]
    index = np.full((P, P), NO_PAIR, dtype=np.int64)
    zprod = np.zeros((P, P))
    for i in range(P):
        for j in range(P):
            if i == j:
                continue
            z = vspec.charges[i] * vspec.charges[j]
            zprod[i, j] = z
            if z == 0:
                continue
            if not (vspec.mobile[i] or vspec.mobile[j]):
                index[i, j] = BARE_PAIR
                continue
            mi, mj = vspec.masses[i], vspec.masses[j]
            if vspec.mobile[i] and vspec.mobile[j]:
                mu = mi * mj / (mi + mj)
            else:
                mu = mi if vspec.mobile[i] else mj
            a, b = sorted((names[i], names[j]))
            index[i, j] = keys.index(ca.table_filename(a, b, mu, z, vspec.delta_tau))
    if keys:
        coef = np.stack([np.asarray(tables[k].coef) for k in keys])
        meta = np.stack([tables[k].meta for k in keys])
    else:
        coef = np.zeros((1, 2, 4, 2, 2))
        meta = np.zeros((1, ca.N_META))
    fld = np.asarray(spec.electric_field if field is None else field, dtype=float)
    return ActionContext(
        vspec=vspec, tables=[tables[k] for k in keys], table_keys=keys,
        dtau=float(vspec.delta_tau), masses=vspec.masses.copy(), charges=vspec.charges.copy(),
        mobile=vspec.mobile.copy(), omegas=vspec.omegas.copy(), field=fld,
        lam=1.0 / (2.0 * vspec.masses), pair_index=index, zprod=zprod, coef=coef, meta=meta)


def kernel_args(ctx: ActionContext):
    """The array bundle every numba kernel takes, in a fixed order."""
    return (ctx.dtau, ctx.masses, ctx.charges, ctx.mobile, ctx.omegas, ctx.field,
            ctx.pair_index, ctx.zprod, ctx.coef, ctx.meta)


def load_tables(vspec: ValidatedSpec, directory):
    directory = Path(directory)
    out = {}
    for key in pair_requirements(vspec):
        path = directory / key
        if not path.exists():
            raise MissingTableError(f"pair-action table {path} not found")
        out[key] = ca.load_table(path)
    return out


# -- numba kernels ---------------------------------------------------------------

@njit(cache=True, nogil=True)
def pair_term(which, tix, z, ra, rb, dtau, coef, meta, diag):
    """u (which = 0) or du/dtau (which = 1) for relative coordinates ra -> rb."""
    if tix >= 0:
        return ca.pair_eval(coef[tix], meta[tix], ra, rb, which, diag)
    if tix == BARE_PAIR:
        a = math.sqrt(ra[0] ** 2 + ra[1] ** 2 + ra[2] ** 2)
        b = math.sqrt(rb[0] ** 2 + rb[1] ** 2 + rb[2] ** 2)
        v = 0.5 * z * (1.0 / a + 1.0 / b)
        return v * dtau if which == 0 else v
    return 0.0


@njit(cache=True, nogil=True)
def external_phi(i, x, charges, masses, omegas, field):
    e = -charges[i] * (field[0] * x[0] + field[1] * x[1] + field[2] * x[2])
    if omegas[i] > 0.0:
        e += 0.5 * masses[i] * omegas[i] ** 2 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2])
    return e


@njit(cache=True, nogil=True)
def link_terms(prev, nxt, in_set, dtau, masses, charges, mobile, omegas, field,
               pair_index, zprod, coef, meta, diag):
    """Action of one link restricted to particles in ``in_set``.

    prev and nxt are (P, 3) bead arrays at slices n-1 and n. Pairs count once
    if at least one member is in the set.
    """
    P = prev.shape[0]
    ra = np.empty(3)
    rb = np.empty(3)
    tot = 0.0
    for i in range(P):
        if not in_set[i]:
            continue
        if mobile[i]:
            d2 = 0.0
            for c in range(3):
                d = nxt[i, c] - prev[i, c]
                d2 += d * d
            tot += masses[i] * d2 / (2.0 * dtau)
        tot += 0.5 * dtau * (external_phi(i, prev[i], charges, masses, omegas, field)
                             + external_phi(i, nxt[i], charges, masses, omegas, field))
    for i in range(P):
        for j in range(i + 1, P):
            if not (in_set[i] or in_set[j]):
                continue
            tix = pair_index[i, j]
            if tix == NO_PAIR:
                continue
            for c in range(3):
                ra[c] = prev[i, c] - prev[j, c]
                rb[c] = nxt[i, c] - nxt[j, c]
            tot += pair_term(0, tix, zprod[i, j], ra, rb, dtau, coef, meta, diag)
    return tot


@njit(cache=True, nogil=True)
def total_action_kernel(beads, dtau, masses, charges, mobile, omegas, field,
                        pair_index, zprod, coef, meta, diag):
    N = beads.shape[0]
    all_set = np.ones(beads.shape[1], dtype=np.bool_)
    tot = 0.0
    for n in range(N):
        tot += link_terms(beads[n - 1], beads[n], all_set, dtau, masses, charges, mobile, omegas,
                          field, pair_index, zprod, coef, meta, diag)
    return tot


@njit(cache=True, nogil=True)
def segment_difference_kernel(beads, start, new_segment, in_set, dtau, masses, charges, mobile,
                              omegas, field, pair_index, zprod, coef, meta, diag):
    """U(new) - U(old) when slices start..start+K-1 (cyclic) of the particles in
    ``in_set`` are replaced by ``new_segment`` (K, P, 3); other particles' rows are ignored."""
    N = beads.shape[0]
    K = new_segment.shape[0]
    P = beads.shape[1]
    old_prev = np.empty((P, 3))
    old_next = np.empty((P, 3))
    new_prev = np.empty((P, 3))
    new_next = np.empty((P, 3))
    diff = 0.0
    for l in range(K + 1):
        # link joining slice start+l-1 and start+l
        sp = (start + l - 1) % N
        sn = (start + l) % N
        for i in range(P):
            for c in range(3):
                old_prev[i, c] = beads[sp, i, c]
                old_next[i, c] = beads[sn, i, c]
                new_prev[i, c] = beads[sp, i, c]
                new_next[i, c] = beads[sn, i, c]
            if in_set[i]:
                if l >= 1:
                    for c in range(3):
                        new_prev[i, c] = new_segment[l - 1, i, c]
                if l < K:
                    for c in range(3):
                        new_next[i, c] = new_segment[l, i, c]
        diff += link_terms(new_prev, new_next, in_set, dtau, masses, charges, mobile, omegas, field,
                           pair_index, zprod, coef, meta, diag)
        diff -= link_terms(old_prev, old_next, in_set, dtau, masses, charges, mobile, omegas, field,
                           pair_index, zprod, coef, meta, diag)
    return diff


@njit(cache=True, nogil=True)
def bead_potential(beads, n, i, dtau, masses, charges, mobile, omegas, field,
                   pair_index, zprod, coef, meta, diag):
    """Diagonal inter-action of particle i at slice n: sum_j u_ij(r, r) + dtau phi_i."""
    P = beads.shape[1]
    r = np.empty(3)
    tot = dtau * external_phi(i, beads[n, i], charges, masses, omegas, field)
    for j in range(P):
        if j == i:
            continue
        tix = pair_index[i, j]
        if tix == NO_PAIR:
            continue
        for c in range(3):
            r[c] = beads[n, i, c] - beads[n, j, c]
        tot += pair_term(0, tix, zprod[i, j], r, r, dtau, coef, meta, diag)
    return tot


@njit(cache=True, nogil=True)
def particle_link_potential(beads, n, i, dtau, masses, charges, mobile, omegas, field,
                            pair_index, zprod, coef, meta, diag):
    """Exact non-kinetic action of particle i on link (n-1, n)."""
    N = beads.shape[0]
    P = beads.shape[1]
    m = (n - 1) % N
    ra = np.empty(3)
    rb = np.empty(3)
    tot = 0.5 * dtau * (external_phi(i, beads[m, i], charges, masses, omegas, field)
                        + external_phi(i, beads[n, i], charges, masses, omegas, field))
    for j in range(P):
        if j == i:
            continue
        tix = pair_index[i, j]
        if tix == NO_PAIR:
            continue
        for c in range(3):
            ra[c] = beads[m, i, c] - beads[m, j, c]
            rb[c] = beads[n, i, c] - beads[n, j, c]
        tot += pair_term(0, tix, zprod[i, j], ra, rb, dtau, coef, meta, diag)
    return tot


# -- python-level API ------------------------------------------------------------

def _diag():
    return np.zeros(1, dtype=np.int64)


def kinetic_link_action(ctx: ActionContext, bead_a, bead_b, particle) -> float:
    if not ctx.mobile[particle]:
        return 0.0
    d = np.asarray(bead_b, float) - np.asarray(bead_a, float)
    return float(ctx.masses[particle] * np.dot(d, d) / (2 * ctx.dtau))


def field_link_action(ctx: ActionContext, bead, particle) -> float:
    """-dtau q_i E.r_i for one bead (the external field term only)."""
    return float(-ctx.dtau * ctx.charges[particle] * np.dot(ctx.field, np.asarray(bead, float)))


def _set_mask(ctx, particles):
    mask = np.zeros(len(ctx.masses), dtype=np.bool_)
    mask[list(particles)] = True
    return mask


def link_action(ctx: ActionContext, config: PathConfiguration, n, particles=None) -> float:
    """Action of link (n-1, n) for the particle set (all particles by default)."""
    P = config.n_particles
    mask = _set_mask(ctx, range(P) if particles is None else particles)
    b = config.beads
    return link_terms(b[(n - 1) % b.shape[0]], b[n % b.shape[0]], mask, *kernel_args(ctx), _diag())


def total_action(ctx: ActionContext, config: PathConfiguration) -> float:
    return total_action_kernel(config.beads, *kernel_args(ctx), _diag())


def action_difference(ctx: ActionContext, config: PathConfiguration, particles, start,
                      new_beads) -> float:
    """U(new) - U(old) for replacing slices start, start+1, ... (cyclic) of ``particles``.

    ``new_beads`` has shape (K, len(particles), 3).
    """
    particles = list(particles)
    new_beads = np.asarray(new_beads, dtype=float)
    K = new_beads.shape[0]
    seg = np.zeros((K, config.n_particles, 3))
    seg[:, particles, :] = new_beads
    return segment_difference_kernel(config.beads, int(start) % config.n_slices, seg,
                                     _set_mask(ctx, particles), *kernel_args(ctx), _diag())
