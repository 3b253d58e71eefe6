import math

import numpy as np
import pytest

from molpimc import coulomb_action as ca
from molpimc.model import PairActionSettings


def collinear(a, b):
    return np.array([a, 0.0, 0.0]), np.array([b, 0.0, 0.0])


def test_channel_weights_sum_to_one():
    x = np.array([0.01, 1.0, 30.0])
    w = ca.channel_weights(x, 400)
    assert np.allclose(w.sum(axis=0), 1.0, atol=1e-12)


def test_s_cap_limits():
    assert ca.s_cap(1e-3, 2.0) == pytest.approx(2e-3, rel=1e-6)
    assert ca.s_cap(1e3, 2.0) == pytest.approx(2.0, rel=1e-6)


def test_zero_charge_table_vanishes():
    t = ca.tabulate_pair_action(1.0, 0.0, 0.05)
    assert not np.any(t.u_values) and not np.any(t.du_dtau_values)
    r, rp = np.array([0.3, 0.1, 0.0]), np.array([0.2, -0.4, 0.1])
    assert ca.evaluate_u(t, r, rp) == 0.0
    assert ca.evaluate_du_dtau(t, r, rp) == 0.0
    ga, gb = ca.evaluate_gradient(t, r, rp)
    assert not np.any(ga) and not np.any(gb)


def test_argument_checks():
    with pytest.raises(ValueError):
        ca.tabulate_pair_action(0.0, 1.0, 0.05)
    with pytest.raises(ValueError):
        ca.tabulate_pair_action(1.0, 1.0, 0.05, squarings=5)


def test_grid_covers_six_thermal_widths(ep_table):
    assert ep_table.s_max >= 6 * math.sqrt(ep_table.delta_tau / ep_table.mu)
    assert ep_table.q_nodes[-1] == pytest.approx(10.0)


def test_oracle_agreement(ep_table, oracle_values):
    block = oracle_values["coulomb_e_p"]
    assert block["delta_tau"] == ep_table.delta_tau
    for p in block["points"]:
        r, rp = collinear(p["r"], p["r_prime"])
        u = ca.evaluate_u(ep_table, r, rp)
        du = ca.evaluate_du_dtau(ep_table, r, rp)
        assert abs(u / p["u"] - 1) <= 1e-4, p
        assert abs(du / p["du_dtau"] - 1) <= 1e-4, p


def test_symmetry(ep_table, rng):
    for _ in range(200):
        r, rp = rng.normal(size=3), rng.normal(size=3)
        assert ca.evaluate_u(ep_table, r, rp) == ca.evaluate_u(ep_table, rp, r)
        assert ca.evaluate_du_dtau(ep_table, r, rp) == ca.evaluate_du_dtau(ep_table, rp, r)


def test_classical_limit(ep_table):
    width = math.sqrt(ep_table.delta_tau / ep_table.mu)
    for q in np.linspace(20 * width, 9.5, 12):
        u = ca.evaluate_u(ep_table, *collinear(q, q))
        assert abs(u - ep_table.delta_tau * ep_table.z / q) <= 1e-3 * abs(u)
    du = ca.evaluate_du_dtau(ep_table, *collinear(9.0, 9.0))
    assert du == pytest.approx(-1 / 9.0, rel=1e-3)


def test_gradient_matches_finite_differences(ep_table, rng):
    h = 1e-6
    worst = 0.0
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
                args_p = (r + d, rp) if which == 0 else (r, rp + d)
                args_m = (r - d, rp) if which == 0 else (r, rp - d)
                fd[c] = (ca.evaluate_u(ep_table, *args_p) - ca.evaluate_u(ep_table, *args_m)) / (2 * h)
            worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    assert worst <= 1e-6


def test_gradient_radial_at_zero_displacement(ep_table):
    r = np.array([0.3, -0.5, 0.8])
    ga, gb = ca.evaluate_gradient(ep_table, r, r)
    g = ga + gb
    assert np.linalg.norm(np.cross(g, r)) <= 1e-12 * np.linalg.norm(g) * np.linalg.norm(r)


def test_out_of_grid_fallback(ep_table):
    diag = np.zeros(1, dtype=np.int64)
    ra, rb = np.array([15.0, 0, 0]), np.array([14.0, 1.0, 0])
    u = ca.pair_eval(np.asarray(ep_table.coef), ep_table.meta, ra, rb, 0, diag)
    prim = 0.5 * ep_table.delta_tau * ep_table.z * (1 / 15.0 + 1 / np.linalg.norm(rb))
    assert u == pytest.approx(prim, rel=1e-14)
    assert diag[0] == 1


def test_heavy_pair_uses_end_point_kernel():
    t = ca.tabulate_pair_action(918.076, 1.0, 0.01)
    assert t.build_info["method"] == "end-point"
    u = ca.evaluate_u(t, *collinear(1.4, 1.4))
    assert u == pytest.approx(0.01 / 1.4, rel=1e-6)


def test_file_round_trip_is_deterministic(tmp_path):
    st = PairActionSettings(n_q=64, n_s=16)
    t1 = ca.tabulate_pair_action(918.076, 1.0, 0.05, st)
    t2 = ca.tabulate_pair_action(918.076, 1.0, 0.05, st)
    p1, p2 = ca.save_table(t1, tmp_path / "a.tbl"), ca.save_table(t2, tmp_path / "b.tbl")
    assert p1.read_bytes() == p2.read_bytes()
    hdr, _ = ca.read_header(p1)
    assert hdr["format_version"] == ca.FORMAT_VERSION
    assert hdr["mu"] == 918.076 and hdr["z"] == 1.0 and hdr["delta_tau"] == 0.05
    back = ca.load_table(p1)
    assert np.array_equal(np.asarray(back.coef), t1.coef)
    r, rp = collinear(1.3, 1.35)
    assert ca.evaluate_u(back, r, rp) == ca.evaluate_u(t1, r, rp)


def test_table_filename():
    assert ca.table_filename("e", "p", 1.0, -1.0, 0.05) == "pair_e-p_mu1_z-1_dt0.05.tbl"


@pytest.mark.slow
def test_squaring_consistency():
    """k squarings from tau0 and k + 1 from tau0 / 2 agree on interior points."""
    st = PairActionSettings()
    q = np.array([0.4, 0.8, 1.5, 2.5])
    r1, r2 = q + 0.05, q - 0.05
    band = st.s_widths + ca.BAND_EXTRA_WIDTHS
    u10, _ = ca._collinear_action(1.0, -1.0, 0.05, r1, r2, st, 10, band)
    u11, _ = ca._collinear_action(1.0, -1.0, 0.05, r1, r2, st, 11, band)
    assert np.max(np.abs(u11 / u10 - 1)) <= 1e-5
