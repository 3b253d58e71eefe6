import numpy as np
import pytest

from molpimc import coulomb_action as ca
from molpimc.action import (MissingTableError, action_difference, build_action_context,
                            field_link_action, kinetic_link_action, link_action, load_tables,
                            pair_requirements, total_action)
from molpimc.model import (PROTON_MASS, PathConfiguration, SpeciesSpec, SystemSpec,
                           build_initial_configuration, validate_spec)

from conftest import h2_fixed_spec, hydrogen_spec, sho_spec


def h2_mobile_spec():
    return SystemSpec(species=(SpeciesSpec("p", PROTON_MASS, 1.0, 2), SpeciesSpec("e", 1.0, -1.0, 2)),
                      beta=2.0, delta_tau=0.05)


def test_pair_requirements_enumeration():
    need = pair_requirements(validate_spec(h2_mobile_spec()))
    got = sorted((a, b, round(mu, 5), z) for a, b, mu, z in need.values())
    assert got == [("e", "e", 0.5, 1.0), ("e", "p", 0.99946, -1.0), ("p", "p", 918.07634, 1.0)]
    fixed = pair_requirements(validate_spec(h2_fixed_spec()))
    assert sorted((a, b, mu, z) for a, b, mu, z in fixed.values()) == [
        ("e", "e", 0.5, 1.0), ("e", "p", 1.0, -1.0)]
    neutral = SystemSpec(species=(SpeciesSpec("a", 1.0, 0.0, 2),), beta=1.0, delta_tau=0.1)
    assert pair_requirements(validate_spec(neutral)) == {}


def test_missing_and_mismatched_tables(ep_table, tmp_path):
    v = validate_spec(hydrogen_spec())
    with pytest.raises(MissingTableError):
        build_action_context(v, {})
    with pytest.raises(MissingTableError):
        load_tables(v, tmp_path)
    key = next(iter(pair_requirements(v)))
    other = validate_spec(hydrogen_spec(dtau=0.04))
    with pytest.raises(MissingTableError):
        build_action_context(other, {next(iter(pair_requirements(other))): ep_table})
    ctx = build_action_context(v, {key: ep_table})
    assert ctx.table_keys == [key]
    assert np.allclose(ctx.lam, 1 / (2 * v.masses))


def test_link_pieces():
    v = validate_spec(sho_spec(ndim=3))
    ctx = build_action_context(v, {}, field=(0.0, 0.0, 0.02))
    assert kinetic_link_action(ctx, [0, 0, 0], [0.1, 0.2, 0.0], 0) == pytest.approx(0.05 / 0.1)
    assert field_link_action(ctx, [0, 0, 2.0], 0) == pytest.approx(-0.05 * 0.02 * 2.0)
    beads = np.zeros((200, 1, 3))
    beads[1, 0] = [0.1, 0.0, 0.3]
    cfg = PathConfiguration(beads, v.species_of_particle)
    phi = lambda x: -0.02 * x[2] + 0.5 * np.dot(x, x)
    expect = 0.05 / 2 * (phi(beads[0, 0]) + phi(beads[1, 0])) + \
        1.0 * 0.1 / (2 * 0.05)
    assert link_action(ctx, cfg, 1) == pytest.approx(expect, rel=1e-12)


def test_bare_coulomb_between_fixed_particles(ee_table, ep_table):
    v = validate_spec(h2_fixed_spec(d=1.4))
    tables = {k: (ee_table if a == "e" and b == "e" else ep_table)
              for k, (a, b, mu, z) in pair_requirements(v).items()}
    ctx = build_action_context(v, tables)
    cfg = build_initial_configuration(v, np.random.default_rng(0))
    assert np.isfinite(total_action(ctx, cfg))
    # terms free of electrons reduce to the bare proton pair, dtau / D on every link
    pp = link_action(ctx, cfg, 3) - link_action(ctx, cfg, 3, particles=[2, 3])
    assert pp == pytest.approx(0.05 / 1.4, rel=1e-10)


@pytest.fixture(scope="module")
def h2_context(ee_table, ep_table):
    v = validate_spec(h2_fixed_spec(d=1.4))
    tables = {k: (ee_table if a == "e" and b == "e" else ep_table)
              for k, (a, b, mu, z) in pair_requirements(v).items()}
    return v, build_action_context(v, tables, field=(0.003, 0.0, 0.01))


def test_action_difference_matches_recomputation(h2_context):
    v, ctx = h2_context
    rng = np.random.default_rng(5)
    cfg = build_initial_configuration(v, rng)
    cfg.beads[:, 2:] += 0.6 * rng.normal(size=cfg.beads[:, 2:].shape)
    N = v.n_slices
    worst = 0.0
    for _ in range(1000):
        parts = [2] if rng.random() < 0.5 else [2, 3]
        K = int(rng.integers(1, 20))
        start = int(rng.integers(0, N))
        new = np.empty((K, len(parts), 3))
        for k in range(K):
            new[k] = cfg.beads[(start + k) % N, parts] + 0.2 * rng.normal(size=(len(parts), 3))
        d = action_difference(ctx, cfg, parts, start, new)
        trial = cfg.copy()
        for k in range(K):
            trial.beads[(start + k) % N, parts] = new[k]
        full = total_action(ctx, trial) - total_action(ctx, cfg)
        worst = max(worst, abs(d - full))
        if rng.random() < 0.3:
            cfg = trial
    assert worst <= 1e-10
