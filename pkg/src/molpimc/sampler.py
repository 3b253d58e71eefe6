"""Metropolis sampling of closed paths: staged bisection and rigid displacement.

All random numbers of a sweep are drawn up front from the chain's Philox
stream and handed to the numba kernels, so a chain's trajectory depends only
on (seed, chain index) and the generator state can be checkpointed exactly.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .action import (ActionContext, NO_PAIR, external_phi, kernel_args, pair_term)
from .estimators import N_SCALARS, EstimatorTrace, I_D, I_D2, I_EV, I_ET, I_PX, I_PZ, measure_kernel
from .greens import CorrelationAccumulator, dipole_accumulator, separation_accumulator
from .model import PathConfiguration, ValidatedSpec, build_initial_configuration, spec_to_dict

MAX_LEVELS = 16
# equilibration block b bisects with at most WARMUP_LEVELS + b levels: from the
# collapsed classical start, long windows are almost never accepted
WARMUP_LEVELS = 3
# stats rows: bisection attempts by level, accepts by level, [displace attempts, accepts]
S_BIS_ATT, S_BIS_ACC, S_DISP = 0, 1, 2


class CheckpointMismatch(RuntimeError):
    pass


# -- kernels -----------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _bead_pot_at(beads, n, i, x, dtau, masses, charges, mobile, omegas, field,
                 pair_index, zprod, coef, meta, diag):
    """Diagonal inter-action of particle i placed at x on slice n."""
    P = beads.shape[1]
    r = np.empty(3)
    tot = dtau * external_phi(i, x, charges, masses, omegas, field)
    for j in range(P):
        if j == i:
            continue
        tix = pair_index[i, j]
        if tix == NO_PAIR:
            continue
        for c in range(3):
            r[c] = x[c] - beads[n, j, c]
        tot += pair_term(0, tix, zprod[i, j], r, r, dtau, coef, meta, diag)
    return tot


@njit(cache=True, nogil=True)
def _link_pot_at(beads, m, n, i, xm, xn, dtau, masses, charges, mobile, omegas, field,
                 pair_index, zprod, coef, meta, diag):
    """Non-kinetic action of particle i on link (m, n) with its beads at xm, xn."""
    P = beads.shape[1]
    ra = np.empty(3)
    rb = np.empty(3)
    tot = 0.5 * dtau * (external_phi(i, xm, charges, masses, omegas, field)
                        + external_phi(i, xn, charges, masses, omegas, field))
    for j in range(P):
        if j == i:
            continue
        tix = pair_index[i, j]
        if tix == NO_PAIR:
            continue
        for c in range(3):
            ra[c] = xm[c] - beads[m, j, c]
            rb[c] = xn[c] - beads[n, j, c]
        tot += pair_term(0, tix, zprod[i, j], ra, rb, dtau, coef, meta, diag)
    return tot


@njit(cache=True, nogil=True)
def bisection_kernel(beads, i, L, start, normals, unif, ndim, stats,
                     dtau, masses, charges, mobile, omegas, field, pair_index, zprod, coef, meta, diag):
    """One staged bisection of particle i over slices start .. start + 2^L (cyclic).

    ``normals`` is (2^L - 1, 3) standard normals and ``unif`` (L,) uniforms.
    Beads are written only when every level accepts.
    """
    N = beads.shape[0]
    W = 1 << L
    old = np.empty((W + 1, 3))
    new = np.empty((W + 1, 3))
    for o in range(W + 1):
        s = (start + o) % N
        for c in range(3):
            old[o, c] = beads[s, i, c]
            new[o, c] = beads[s, i, c]
    k = 0
    du_prev = 0.0
    for l in range(L, 0, -1):
        d = 1 << (l - 1)
        sigma = math.sqrt(d * dtau / (2.0 * masses[i]))
        for o in range(d, W, 2 * d):
            for c in range(3):
                mid = 0.5 * (new[o - d, c] + new[o + d, c])
                if c < ndim:
                    mid += sigma * normals[k, c]
                new[o, c] = mid
            k += 1
        du = 0.0
        if l > 1:
            for o in range(d, W, d):
                s = (start + o) % N
                du += d * (_bead_pot_at(beads, s, i, new[o], dtau, masses, charges, mobile, omegas,
                                        field, pair_index, zprod, coef, meta, diag)
                           - _bead_pot_at(beads, s, i, old[o], dtau, masses, charges, mobile, omegas,
                                          field, pair_index, zprod, coef, meta, diag))
        else:
            for o in range(1, W + 1):
                sm = (start + o - 1) % N
                sn = (start + o) % N
                du += (_link_pot_at(beads, sm, sn, i, new[o - 1], new[o], dtau, masses, charges,
                                    mobile, omegas, field, pair_index, zprod, coef, meta, diag)
                       - _link_pot_at(beads, sm, sn, i, old[o - 1], old[o], dtau, masses, charges,
                                      mobile, omegas, field, pair_index, zprod, coef, meta, diag))
        stats[S_BIS_ATT, l - 1] += 1
        x = du - du_prev
        if x > 0.0 and unif[l - 1] >= math.exp(-x):
            return False
        stats[S_BIS_ACC, l - 1] += 1
        du_prev = du
    for o in range(1, W):
        s = (start + o) % N
        for c in range(3):
            beads[s, i, c] = new[o, c]
    return True


@njit(cache=True, nogil=True)
def displace_kernel(beads, i, delta, u, stats,
                    dtau, masses, charges, mobile, omegas, field, pair_index, zprod, coef, meta, diag):
    """Rigid shift of every bead of particle i by ``delta``; kinetic action is unchanged."""
    N = beads.shape[0]
    xm_new = np.empty(3)
    xn_new = np.empty(3)
    du = 0.0
    for n in range(N):
        m = n - 1 if n > 0 else N - 1
        for c in range(3):
            xm_new[c] = beads[m, i, c] + delta[c]
            xn_new[c] = beads[n, i, c] + delta[c]
        du += (_link_pot_at(beads, m, n, i, xm_new, xn_new, dtau, masses, charges, mobile, omegas,
                            field, pair_index, zprod, coef, meta, diag)
               - _link_pot_at(beads, m, n, i, beads[m, i], beads[n, i], dtau, masses, charges,
                              mobile, omegas, field, pair_index, zprod, coef, meta, diag))
    stats[S_DISP, 0] += 1
    if du > 0.0 and u >= math.exp(-du):
        return False
    stats[S_DISP, 1] += 1
    for n in range(N):
        for c in range(3):
            beads[n, i, c] += delta[c]
    return True


@njit(cache=True, nogil=True)
def sweep_kernel(beads, particles, levels, n_attempts, starts, normals, unif_b,
                 disp_u, disp_vec, disp_acc, steps, p_disp, ndim, stats,
                 dtau, masses, charges, mobile, omegas, field, pair_index, zprod, coef, meta, diag):
    a = 0
    kn = 0
    ku = 0
    for pi in range(particles.shape[0]):
        i = particles[pi]
        L = levels[pi]
        W = 1 << L
        for _ in range(n_attempts[pi]):
            bisection_kernel(beads, i, L, starts[a], normals[kn:kn + W - 1], unif_b[ku:ku + L],
                             ndim, stats, dtau, masses, charges, mobile, omegas, field,
                             pair_index, zprod, coef, meta, diag)
            a += 1
            kn += W - 1
            ku += L
        if disp_u[pi] < p_disp:
            delta = np.zeros(3)
            for c in range(ndim):
                delta[c] = steps[pi] * disp_vec[pi, c]
            displace_kernel(beads, i, delta, disp_acc[pi], stats, dtau, masses, charges, mobile,
                            omegas, field, pair_index, zprod, coef, meta, diag)


# -- chain state --------------------------------------------------------------------

def chain_rng(seed, chain):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(chain),))))


@dataclass
class ChainState:
    chain: int
    config: PathConfiguration
    rng: np.random.Generator
    stats: np.ndarray = field(default_factory=lambda: np.zeros((3, MAX_LEVELS), dtype=np.int64))
    block_index: int = 0
    diag: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))

    def acceptance(self):
        att, acc = self.stats[S_BIS_ATT], self.stats[S_BIS_ACC]
        with np.errstate(invalid="ignore", divide="ignore"):
            lv = np.where(att > 0, acc / np.maximum(att, 1), np.nan)
        d_att, d_acc = self.stats[S_DISP, :2]
        return {"bisection_by_level": [float(x) for x in lv if not np.isnan(x)],
                "displace": float(d_acc / d_att) if d_att else float("nan")}


def new_chain(vspec: ValidatedSpec, chain: int, seed=None) -> ChainState:
    seed = vspec.spec.sampling.rng_seed if seed is None else seed
    rng = chain_rng(seed, chain)
    return ChainState(chain, build_initial_configuration(vspec, rng), rng)


class _SweepPlan:
    """Per-particle move parameters and the random-number layout of one sweep."""

    def __init__(self, vspec: ValidatedSpec, level_cap=None):
        spec = vspec.spec
        s = spec.sampling
        names = [spec.species[k].name for k in vspec.species_of_particle]
        self.particles = np.flatnonzero(vspec.mobile).astype(np.int64)
        self.levels = np.array([s.levels_for(names[i]) for i in self.particles], dtype=np.int64)
        if level_cap is not None:
            self.levels = np.minimum(self.levels, max(int(level_cap), 1))
        self.steps = np.array([s.step_for(names[i]) for i in self.particles], dtype=float)
        N = vspec.n_slices
        self.n_attempts = np.array([max(N >> int(L), 1) for L in self.levels], dtype=np.int64)
        self.n_normals = int(np.sum(self.n_attempts * ((1 << self.levels) - 1)))
        self.n_unif = int(np.sum(self.n_attempts * self.levels))
        self.n_slices = N
        self.p_disp = float(s.displace_move_probability)
        self.ndim = spec.ndim

    def draw(self, rng):
        P = len(self.particles)
        starts = rng.integers(0, self.n_slices, size=int(self.n_attempts.sum()))
        normals = rng.standard_normal((self.n_normals, 3))
        unif_b = rng.random(self.n_unif)
        disp_u = rng.random(P)
        disp_vec = rng.uniform(-1.0, 1.0, size=(P, 3))
        disp_acc = rng.random(P)
        return starts, normals, unif_b, disp_u, disp_vec, disp_acc


def sweep(state: ChainState, ctx: ActionContext, plan: _SweepPlan | None = None):
    plan = plan or _SweepPlan(ctx.vspec)
    if len(plan.particles) == 0:
        return
    starts, normals, unif_b, disp_u, disp_vec, disp_acc = plan.draw(state.rng)
    sweep_kernel(state.config.beads, plan.particles, plan.levels, plan.n_attempts, starts, normals,
                 unif_b, disp_u, disp_vec, disp_acc, plan.steps, plan.p_disp, plan.ndim,
                 state.stats, *kernel_args(ctx), state.diag)


def bisection_move(state: ChainState, ctx: ActionContext, particle: int, levels: int) -> bool:
    """One bisection attempt on a random window; returns whether it was accepted."""
    N = state.config.n_slices
    if not ctx.mobile[particle]:
        raise ValueError("fixed particles cannot be moved")
    if (1 << levels) > N:
        raise ValueError("window 2^L must not exceed the path length")
    start = int(state.rng.integers(0, N))
    normals = state.rng.standard_normal(((1 << levels) - 1, 3))
    unif = state.rng.random(levels)
    return bool(bisection_kernel(state.config.beads, particle, levels, start, normals, unif,
                                 ctx.vspec.spec.ndim, state.stats, *kernel_args(ctx), state.diag))


def displace_move(state: ChainState, ctx: ActionContext, particle: int, step=None) -> bool:
    if not ctx.mobile[particle]:
        raise ValueError("fixed particles cannot be moved")
    ndim = ctx.vspec.spec.ndim
    if step is None:
        name = ctx.vspec.spec.species[ctx.vspec.species_of_particle[particle]].name
        step = ctx.vspec.spec.sampling.step_for(name)
    delta = np.zeros(3)
    delta[:ndim] = step * state.rng.uniform(-1.0, 1.0, size=ndim)
    u = state.rng.random()
    return bool(displace_kernel(state.config.beads, particle, delta, u, state.stats,
                                *kernel_args(ctx), state.diag))


# -- blocks and runs ----------------------------------------------------------------

@dataclass
class BlockResult:
    chain: int
    index: int
    n_sweeps: int
    scalars: np.ndarray | None  # block mean of the measure_kernel output vector
    correlators: dict  # name -> (values, observable means)
    stats: np.ndarray


def _make_accumulators(vspec: ValidatedSpec):
    out = vspec.spec.outputs
    N, beta = vspec.n_slices, vspec.beta
    accs = {}
    if "separation" in out.correlators:
        accs["separation"] = separation_accumulator(N, beta, out.tau_bins)
    if "dipole" in out.correlators:
        accs["dipole"] = dipole_accumulator(N, beta, out.tau_bins)
    return accs


def _sep_indices(vspec: ValidatedSpec):
    pair = vspec.spec.outputs.separation_pair
    if pair is None:
        return -1, -1
    return vspec.particle_index(pair[0]), vspec.particle_index(pair[1])


def run_block(state: ChainState, ctx: ActionContext, n_sweeps=None, measure=True,
              accumulators=None, level_cap=None) -> BlockResult:
    """Run one block of sweeps, measuring after every sweep."""
    vspec = ctx.vspec
    n_sweeps = vspec.spec.sampling.sweeps_per_block if n_sweeps is None else n_sweeps
    if n_sweeps < 1:
        raise ValueError("a block needs at least one sweep")
    plan = _SweepPlan(vspec, level_cap)
    accs = _make_accumulators(vspec) if accumulators is None else accumulators
    sa, sb = _sep_indices(vspec)
    N = vspec.n_slices
    out = np.zeros(N_SCALARS)
    dip = np.zeros((N, 3))
    sep = np.zeros(N)
    total = np.zeros(N_SCALARS)
    stats0 = state.stats.copy()
    for _ in range(n_sweeps):
        sweep(state, ctx, plan)
        if measure:
            measure_kernel(state.config.beads, vspec.spec.ndim, sa, sb, out, dip, sep,
                           *kernel_args(ctx), state.diag)
            total += out
            if "separation" in accs:
                accs["separation"].accumulate(sep)
            if "dipole" in accs:
                accs["dipole"].accumulate(dip)
    corr = {}
    for name, acc in accs.items():
        if measure:
            acc.end_block()
            corr[name] = (acc.block_values[-1], acc.block_obs[-1])
    res = BlockResult(state.chain, state.block_index, n_sweeps,
                      total / n_sweeps if measure else None, corr, state.stats - stats0)
    state.block_index += 1
    return res


@dataclass
class SimulationResult:
    vspec: ValidatedSpec
    blocks: list  # BlockResult per chain, post-equilibration, chain-major order
    chains: list  # final ChainState per chain
    n_equilibration: int

    def scalar_blocks(self):
        return np.array([b.scalars for b in self.blocks])

    def trace(self, name):
        col = {"thermodynamic_energy": I_ET, "virial_energy": I_EV,
               "separation": I_D, "separation_squared": I_D2}
        sb = self.scalar_blocks()
        t = EstimatorTrace(name)
        if name == "polarization":
            for v in sb[:, I_PX:I_PZ + 1]:
                t.add(v)
        else:
            for v in sb[:, col[name]]:
                t.add(v)
        return t

    def accumulator(self, name):
        accs = _make_accumulators(self.vspec)
        acc = accs[name]
        for b in self.blocks:
            v, o = b.correlators[name]
            acc.add_block(v, o)
        return acc

    def acceptance(self):
        st = sum(c.stats for c in self.chains)
        tmp = ChainState(0, None, None, st)
        return tmp.acceptance()

    def diagnostics(self):
        return int(sum(int(c.diag[0]) for c in self.chains))


def spec_hash(vspec: ValidatedSpec):
    d = spec_to_dict(vspec.spec)
    d["pair_action"].pop("tables_dir", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _rng_state_json(rng):
    st = rng.bit_generator.state

    def conv(x):
        if isinstance(x, np.ndarray):
            return {"__array__": x.tolist(), "dtype": str(x.dtype)}
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        return x
    return json.dumps(conv(st))


def _rng_from_json(text):
    def conv(x):
        if isinstance(x, dict):
            if "__array__" in x:
                return np.array(x["__array__"], dtype=x["dtype"])
            return {k: conv(v) for k, v in x.items()}
        return x
    st = conv(json.loads(text))
    bg = np.random.Philox()
    bg.state = st
    return np.random.Generator(bg)


def save_checkpoint(path, state: ChainState, blocks, vspec: ValidatedSpec):
    arrays = {
        "beads": state.config.beads, "stats": state.stats, "diag": state.diag,
        "meta": np.array(json.dumps({"chain": state.chain, "block_index": state.block_index,
                                     "spec_hash": spec_hash(vspec),
                                     "rng": _rng_state_json(state.rng),
                                     "n_blocks": len(blocks),
                                     "correlators": sorted(blocks[0].correlators) if blocks else []})),
    }
    for k, b in enumerate(blocks):
        arrays[f"b{k}_scalars"] = b.scalars
        arrays[f"b{k}_stats"] = b.stats
        arrays[f"b{k}_info"] = np.array([b.index, b.n_sweeps])
        for name, (v, o) in b.correlators.items():
            arrays[f"b{k}_c_{name}_v"] = v
            arrays[f"b{k}_c_{name}_o"] = o
    tmp = Path(str(path) + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_checkpoint(path, vspec: ValidatedSpec):
    with np.load(path) as f:
        meta = json.loads(str(f["meta"]))
        if meta["spec_hash"] != spec_hash(vspec):
            raise CheckpointMismatch(f"{path}: checkpoint belongs to a different configuration")
        cfg = PathConfiguration(f["beads"].copy(), vspec.species_of_particle.copy())
        if cfg.beads.shape != (vspec.n_slices, vspec.n_particles, 3):
            raise CheckpointMismatch(f"{path}: bead array shape does not match the configuration")
        state = ChainState(meta["chain"], cfg, _rng_from_json(meta["rng"]), f["stats"].copy(),
                           meta["block_index"], f["diag"].copy())
        blocks = []
        for k in range(meta["n_blocks"]):
            idx, ns = f[f"b{k}_info"]
            corr = {name: (f[f"b{k}_c_{name}_v"].copy(), f[f"b{k}_c_{name}_o"].copy())
                    for name in meta["correlators"]}
            blocks.append(BlockResult(state.chain, int(idx), int(ns), f[f"b{k}_scalars"].copy(), corr,
                                      f[f"b{k}_stats"].copy()))
    return state, blocks


def run_chain(vspec: ValidatedSpec, ctx: ActionContext, chain: int, seed=None,
              checkpoint=None, resume=False, stop_after=None, progress=None):
    """Run (or resume) one chain through all its blocks. Returns (state, blocks)."""
    s = vspec.spec.sampling
    if resume and checkpoint is not None and Path(checkpoint).exists():
        state, blocks = load_checkpoint(checkpoint, vspec)
    else:
        state, blocks = new_chain(vspec, chain, seed), []
    n_eq = int(s.equilibration_fraction * s.n_blocks)
    accs = _make_accumulators(vspec)
    done = 0
    while state.block_index < s.n_blocks:
        if stop_after is not None and done >= stop_after:
            break
        is_eq = state.block_index < n_eq
        cap = WARMUP_LEVELS + state.block_index if is_eq else None
        res = run_block(state, ctx, accumulators=accs, level_cap=cap)
        if not is_eq:
            blocks.append(res)
        done += 1
        if checkpoint is not None:
            save_checkpoint(checkpoint, state, blocks, vspec)
        if progress:
            progress(chain, state.block_index, s.n_blocks)
    return state, blocks


def run_simulation(vspec: ValidatedSpec, ctx: ActionContext, n_threads=1, seed=None,
                   checkpoint_dir=None, resume=False, stop_after=None, progress=None) -> SimulationResult:
    """Run all chains (concurrently when n_threads > 1) and merge them in chain order."""
    s = vspec.spec.sampling
    from .action import pair_requirements
    if set(pair_requirements(vspec)) - set(ctx.table_keys):
        raise LookupError("pair-action table missing for a charged pair")

    def one(chain):
        cp = None if checkpoint_dir is None else Path(checkpoint_dir) / f"chain{chain:03d}.ckpt.npz"
        return run_chain(vspec, ctx, chain, seed, cp, resume, stop_after, progress)

    chains = range(s.n_chains)
    if n_threads > 1 and s.n_chains > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as ex:
            outs = list(ex.map(one, chains))
    else:
        outs = [one(c) for c in chains]
    blocks = [b for _, bl in outs for b in bl]
    return SimulationResult(vspec, blocks, [st for st, _ in outs],
                            int(s.equilibration_fraction * s.n_blocks))
