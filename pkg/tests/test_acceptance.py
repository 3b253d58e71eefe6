"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Criteria 1-5 are fast; 6-8 are desk-scale physics runs (marked slow);
9-11 replicate long H2 runs and only execute with MOLPIMC_EXTENDED=1.
"""
import dataclasses
import math
import os
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from molpimc import analysis as an
from molpimc import coulomb_action as ca
from molpimc.action import (action_difference, build_action_context, load_tables, pair_requirements,
                            total_action)
from molpimc.cli import tabulate_all
from molpimc.greens import MatsubaraSpectrum, matsubara_transform
from molpimc.model import PROTON_MASS, build_initial_configuration, load_config, validate_spec
from molpimc.oracles import (SHOReference, free_bead_centroid_variance, sho_energy,
                             sho_g_matsubara, sho_g_tau)
from molpimc.sampler import _SweepPlan, new_chain, run_simulation, sweep

from conftest import ACCEPTANCE_LINES, free_spec, h2_fixed_spec, hydrogen_spec, sho_spec

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
EXTENDED = os.environ.get("MOLPIMC_EXTENDED") == "1"
extended = pytest.mark.skipif(not EXTENDED, reason="set MOLPIMC_EXTENDED=1 for overnight runs")


def report(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def within(value, target, sigma, n=3.0):
    return abs(value - target) <= n * sigma


# -- fast suite -----------------------------------------------------------------

def test_criterion_1_transform_round_trip():
    ref = SHOReference(1.0, 1.0, 10.0)
    M = 200
    g = sho_g_tau(ref, np.arange(M) * ref.beta / M)
    n = np.arange(21)
    got = matsubara_transform(g, ref.beta, 20, "beta")
    rel = float(np.max(np.abs(got.real / sho_g_matsubara(ref, n, "beta") - 1)))
    report(1, "Matsubara transform of the oscillator correlator", rel <= 1e-6,
           f"max relative deviation {rel:.2e} for n <= 20 on 200 bins (limit 1e-6)")


def test_criterion_2_pair_action_oracle(ep_table, oracle_values):
    block = oracle_values["coulomb_e_p"]
    worst_u = worst_du = 0.0
    for p in block["points"]:
        r, rp = np.array([p["r"], 0.0, 0.0]), np.array([p["r_prime"], 0.0, 0.0])
        worst_u = max(worst_u, abs(ca.evaluate_u(ep_table, r, rp) / p["u"] - 1))
        worst_du = max(worst_du, abs(ca.evaluate_du_dtau(ep_table, r, rp) / p["du_dtau"] - 1))
    zero = ca.tabulate_pair_action(1.0, 0.0, 0.05)
    zero_ok = not np.any(zero.u_values) and not np.any(zero.du_dtau_values)
    ok = worst_u <= 1e-4 and worst_du <= 1e-4 and zero_ok and len(block["points"]) == 20
    report(2, "e-p pair action vs partial-wave oracle", ok,
           f"max rel dev u {worst_u:.2e}, du/dtau {worst_du:.2e} at {len(block['points'])} points "
           f"(limit 1e-4); z = 0 table identically zero: {zero_ok}")


def test_criterion_3_gradients_and_action_differences(ep_table, ee_table):
    rng = np.random.default_rng(33)
    h = 1e-6
    worst_g = 0.0
    for _ in range(100):
        r = rng.normal(size=3)
        r *= rng.uniform(0.3, 3.0) / np.linalg.norm(r)
        rp = r + 0.2 * rng.normal(size=3)
        ga, gb = ca.evaluate_gradient(ep_table, r, rp)
        for g, which in ((ga, 0), (gb, 1)):
            fd = np.zeros(3)
            for c in range(3):
                d = np.zeros(3)
                d[c] = h
                plus = (r + d, rp) if which == 0 else (r, rp + d)
                minus = (r - d, rp) if which == 0 else (r, rp - d)
                fd[c] = (ca.evaluate_u(ep_table, *plus) - ca.evaluate_u(ep_table, *minus)) / (2 * h)
            worst_g = max(worst_g, np.linalg.norm(g - fd) / np.linalg.norm(fd))

    v = validate_spec(h2_fixed_spec(d=1.4))
    tables = {k: (ee_table if a == "e" and b == "e" else ep_table)
              for k, (a, b, mu, z) in pair_requirements(v).items()}
    ctx = build_action_context(v, tables, field=(0.003, 0.0, 0.01))
    cfg = build_initial_configuration(v, rng)
    cfg.beads[:, 2:] += 0.6 * rng.normal(size=cfg.beads[:, 2:].shape)
    N = v.n_slices
    worst_d = 0.0
    for _ in range(1000):
        parts = [2] if rng.random() < 0.5 else [2, 3]
        K = int(rng.integers(1, 20))
        start = int(rng.integers(0, N))
        new = np.array([cfg.beads[(start + k) % N, parts] + 0.2 * rng.normal(size=(len(parts), 3))
                        for k in range(K)])
        d = action_difference(ctx, cfg, parts, start, new)
        trial = cfg.copy()
        for k in range(K):
            trial.beads[(start + k) % N, parts] = new[k]
        worst_d = max(worst_d, abs(d - (total_action(ctx, trial) - total_action(ctx, cfg))))
        if rng.random() < 0.3:
            cfg = trial
    report(3, "pair gradient and incremental action", worst_g <= 1e-6 and worst_d <= 1e-10,
           f"gradient rel dev {worst_g:.2e} (limit 1e-6); action difference abs dev {worst_d:.2e} "
           f"over 1000 proposals (limit 1e-10)")


def test_criterion_4_free_particle():
    beta, N = 1.0, 32
    v = validate_spec(free_spec(beta=beta, dtau=beta / N, bisection_levels=4))
    ctx = build_action_context(v, {})
    state = new_chain(v, 0, seed=404)
    plan = _SweepPlan(v)
    for _ in range(500):
        sweep(state, ctx, plan)
    xs = []
    # KS assumes independent draws; 20 sweeps separate snapshots by well over
    # the autocorrelation time of the slowest path mode
    while len(xs) < 100_000:
        for _ in range(20):
            sweep(state, ctx, plan)
        b = state.config.beads[:, 0]
        j = int(state.rng.integers(N))
        xs.extend(b[j] - b.mean(axis=0))
    sd = math.sqrt(free_bead_centroid_variance(1.0, beta, N))
    p = stats.kstest(np.array(xs[:100_000]) / sd, "norm").pvalue

    ev = validate_spec(free_spec(beta=beta, dtau=beta / N, bisection_levels=4,
                                 sweeps_per_block=2000, n_blocks=22))
    res = run_simulation(ev, build_action_context(ev, {}), seed=405)
    et, vt = res.trace("thermodynamic_energy"), res.trace("virial_energy")
    exact = 1.5 / beta
    ok = p > 0.01 and within(et.mean, exact, et.stderr) and within(vt.mean, exact, vt.stderr)
    report(4, "free-particle exactness", ok,
           f"KS p = {p:.3f} on 1e5 samples (needs > 0.01); E_T = {et.mean:.4f}({et.stderr:.4f}), "
           f"E_V = {vt.mean:.5f}({vt.stderr:.5f}) vs {exact}")


def test_criterion_5_frequency_methods():
    worst = 0.0
    for m, w, beta in ((1.0, 1.0, 10.0), (1.0, 2.0, 10.0), (PROTON_MASS / 2, 0.01866, 200.0)):
        n = np.arange(41)
        sp = MatsubaraSpectrum(n, 2 * np.pi * n / beta,
                               sho_g_matsubara(SHOReference(m, w, beta), n, "beta").astype(complex),
                               beta, "beta")
        res = an.analyze_frequency(sp, m)
        for got in (res.omega_fit, res.omega_zero_mode, res.omega_linewidth):
            worst = max(worst, abs(got / w - 1))
    exact = []
    for w in (1.0, 2.0):
        g0 = -1.0 / (10.0 * w * w)
        sp = MatsubaraSpectrum(np.arange(1), np.zeros(1), np.array([g0 + 0j]), 10.0, "beta")
        exact.append(an.frequency_from_zero_mode(sp, 1.0)[0])
    ok = worst <= 1e-6 and exact == [1.0, 2.0]
    report(5, "frequency extraction consistency", ok,
           f"max rel spread of fit/zero-mode/linewidth {worst:.2e} (limit 1e-6); "
           f"zero-mode gives {exact} for omega = 1, 2")


# -- desk-scale physics ------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_oscillator():
    lines, ok = [], True
    for w, target in ((0.5, 4.0), (1.0, 1.0), (2.0, 0.25)):
        v = validate_spec(sho_spec(omega=w, sweeps_per_block=2000, n_blocks=33))
        res = run_simulation(v, build_action_context(v, {}), seed=600 + int(4 * w))
        a = an.static_polarizability_from_correlator(res.accumulator("dipole"), ndim=1)
        good = within(a.mean, target, a.mean_error) and a.mean_error <= 0.06
        ok &= good
        lines.append(f"alpha(omega={w}) = {a.mean:.3f}({a.mean_error:.3f})")
        if w == 1.0:
            ev = res.trace("virial_energy")
            exact = sho_energy(SHOReference(1.0, 1.0, 10.0))
            good = within(ev.mean, exact, ev.stderr) and ev.stderr <= 0.002
            ok &= good
            lines.insert(0, f"E_V = {ev.mean:.5f}({ev.stderr:.5f}) vs {exact:.6f}")
    report(6, "oscillator energy and polarizabilities", ok, "; ".join(lines))


@pytest.mark.slow
def test_criterion_7_hydrogen_atom(ep_table):
    v = validate_spec(hydrogen_spec(sweeps_per_block=5000, n_blocks=34))
    key = next(iter(pair_requirements(v)))
    res = run_simulation(v, build_action_context(v, {key: ep_table}), seed=700)
    ev = res.trace("virial_energy")
    a = an.static_polarizability_from_correlator(res.accumulator("dipole"))
    ok_e = within(ev.mean, -0.5, ev.stderr) and ev.stderr <= 0.003
    ok_a = within(a.mean, 4.5, a.mean_error) and a.mean_error <= 0.05
    # open space: at kT = 0.05 Ha the electron can thermally ionize; report how
    # many blocks look unbound (mean E_V > 0) without excluding them
    unbound = int(np.sum(ev.values > 0))
    report(7, "hydrogen atom energy and polarizability", ok_e and ok_a,
           f"E_V = {ev.mean:.4f}({ev.stderr:.4f}) vs -0.500 (sigma <= 0.003); "
           f"alpha = {a.mean:.3f}({a.mean_error:.3f}) vs 4.5 (sigma <= 0.05); "
           f"{unbound} of {ev.count} blocks unbound")


@pytest.mark.slow
def test_criterion_8_bo_scan(ep_table, ee_table):
    template = validate_spec(h2_fixed_spec(sweeps_per_block=1000, n_blocks=22)).spec
    tables = {}
    for k, (a, b, mu, z) in pair_requirements(validate_spec(template)).items():
        tables[k] = ee_table if a == "e" and b == "e" else ep_table
    rows = an.scan_bo_surface([1.0, 1.4, 2.0], template, tables, run_kwargs={"seed": 800})
    E = {d: (e, s) for d, e, s in rows}
    gap = lambda a, b: (E[b][0] - E[a][0]) / math.hypot(E[a][1], E[b][1])
    g10, g20 = gap(1.4, 1.0), gap(1.4, 2.0)
    ok = g10 > 3 and g20 > 3
    report(8, "Born-Oppenheimer scan minimum near 1.4 bohr", ok,
           ", ".join(f"E({d}) = {e:.4f}({s:.4f})" for d, e, s in rows)
           + f"; E(1.0)-E(1.4) = {g10:.1f} sigma, E(2.0)-E(1.4) = {g20:.1f} sigma")


# -- extended suite ---------------------------------------------------------------

def _extended_run(config_name, table_dir, beta=None, **sampling):
    spec = load_config(CONFIGS / config_name)
    if beta is not None:
        spec = dataclasses.replace(spec, beta=beta)
    if sampling:
        spec = dataclasses.replace(spec, sampling=dataclasses.replace(spec.sampling, **sampling))
    v = validate_spec(spec)
    d = table_dir / "extended"
    tabulate_all(v, d)
    return v, run_simulation(v, build_action_context(v, load_tables(v, d)))


@extended
@pytest.mark.extended
def test_criterion_9_h2_vibrational_frequency(table_dir):
    v, res = _extended_run("h2.yaml", table_dir)
    acc = res.accumulator("separation")
    sp = an.spectrum_from_correlator(acc, 0, 40, "beta")
    fr = an.analyze_frequency(sp, PROTON_MASS / 2)
    ok = (within(fr.omega_fit, 0.01866, math.hypot(fr.omega_fit_error, 5e-5))
          and abs(fr.omega_linewidth - 0.01867) <= 2 * np.pi / v.beta)
    report(9, "H2 vibrational frequency at beta = 200", ok,
           f"fit {fr.omega_fit:.5f}({fr.omega_fit_error:.5f}) vs 0.01866(5); "
           f"linewidth {fr.omega_linewidth:.5f} vs 0.01867 within grid spacing {2 * np.pi / v.beta:.4f}")


@extended
@pytest.mark.extended
def test_criterion_10_h2_bond_length(table_dir):
    v, res = _extended_run("h2.yaml", table_dir)
    (gh, gh_e), (g0, g0_e) = an.bond_length_from_correlator(res.accumulator("separation"))
    d, d2 = res.trace("separation"), res.trace("separation_squared")
    checks = [("G(beta/2)", gh, gh_e, 2.076, 0.001), ("G(0)", g0, g0_e, 2.097, 0.001),
              ("<D>^2", d.mean ** 2, 2 * abs(d.mean) * d.stderr, 2.070, 0.004),
              ("<D^2>", d2.mean, d2.stderr, 2.101, 0.005)]
    ok = all(within(x, t, math.hypot(e, te)) for _, x, e, t, te in checks)
    report(10, "H2 bond-length correlator at beta = 200", ok,
           "; ".join(f"{n} = {x:.4f}({e:.4f}) vs {t}({te})" for n, x, e, t, te in checks))


@extended
@pytest.mark.extended
def test_criterion_11_h2_polarizability(table_dir):
    v, res = _extended_run("h2_fixed.yaml", table_dir, beta=200.0, sweeps_per_block=1000, n_blocks=60)
    a = an.static_polarizability_from_correlator(res.accumulator("dipole"), "anisotropic", True)
    checks = [("alpha_perp", a.perpendicular, a.perpendicular_error, 4.56, 0.17),
              ("alpha_par", a.parallel, a.parallel_error, 6.40, 0.15),
              ("mean alpha", a.mean, a.mean_error, 5.38, 0.18)]
    ok = all(within(x, t, math.hypot(e, te)) for _, x, e, t, te in checks)
    report(11, "H2 polarizability with fixed protons (beta = 200 surrogate)", ok,
           "; ".join(f"{n} = {x:.3f}({e:.3f}) vs {t}({te})" for n, x, e, t, te in checks))


def test_extended_suite_status():
    if not EXTENDED:
        for n in (9, 10, 11):
            ACCEPTANCE_LINES.append(f"[SKIP] criterion {n}: extended suite, set MOLPIMC_EXTENDED=1")
