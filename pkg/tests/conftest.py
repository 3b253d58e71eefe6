import json
from pathlib import Path

import numpy as np
import pytest

from molpimc.coulomb_action import (FORMAT_VERSION, load_table, save_table, tabulate_pair_action,
                                    table_filename)
from molpimc.model import (PROTON_MASS, OutputSettings, SamplerSettings, SpeciesSpec, SystemSpec,
                           validate_spec)

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def oracle_values():
    return json.loads((FIXTURES / "oracle_values.json").read_text())


@pytest.fixture(scope="session")
def table_dir(request):
    """Pair-action tables are expensive to build; keep them in the pytest cache."""
    return Path(request.config.cache.mkdir(f"molpimc_tables_v{FORMAT_VERSION}"))


def _cached_table(directory, a, b, mu, z, dtau):
    path = directory / table_filename(a, b, mu, z, dtau)
    if not path.exists():
        save_table(tabulate_pair_action(mu, z, dtau), path)
    return load_table(path)


@pytest.fixture(scope="session")
def ep_table(table_dir):
    """Electron-proton table at dtau = 0.05 with a fixed (infinitely heavy) proton."""
    return _cached_table(table_dir, "e", "p", 1.0, -1.0, 0.05)


@pytest.fixture(scope="session")
def ee_table(table_dir):
    return _cached_table(table_dir, "e", "e", 0.5, 1.0, 0.05)


def hydrogen_spec(beta=20.0, dtau=0.05, field=(0.0, 0.0, 0.0), **sampling):
    kw = dict(bisection_levels=6, sweeps_per_block=200, n_blocks=10, displace_step=0.4,
              displace_move_probability=1.0)
    kw.update(sampling)
    return SystemSpec(
        species=(SpeciesSpec("p", PROTON_MASS, 1.0, 1, fixed_positions=((0.0, 0.0, 0.0),)),
                 SpeciesSpec("e", 1.0, -1.0, 1)),
        beta=beta, delta_tau=dtau, electric_field=tuple(field),
        sampling=SamplerSettings(**kw),
        outputs=OutputSettings(estimators=("thermodynamic_energy", "virial_energy", "polarization"),
                               correlators=("dipole",)))


def h2_fixed_spec(d=1.4, beta=20.0, dtau=0.05, **sampling):
    kw = dict(bisection_levels=6, sweeps_per_block=200, n_blocks=10, displace_step=0.4,
              displace_move_probability=1.0)
    kw.update(sampling)
    return SystemSpec(
        species=(SpeciesSpec("p", PROTON_MASS, 1.0, 2,
                             fixed_positions=((0.0, 0.0, -d / 2), (0.0, 0.0, d / 2))),
                 SpeciesSpec("e", 1.0, -1.0, 2,
                             start_positions=((0.3, 0.0, -d / 2), (-0.3, 0.0, d / 2)))),
        beta=beta, delta_tau=dtau, sampling=SamplerSettings(**kw),
        outputs=OutputSettings(estimators=("thermodynamic_energy", "virial_energy")))


def sho_spec(omega=1.0, beta=10.0, dtau=0.05, ndim=1, charge=1.0, **sampling):
    kw = dict(bisection_levels=6, sweeps_per_block=500, n_blocks=10, displace_step=1.5,
              displace_move_probability=1.0)
    kw.update(sampling)
    return SystemSpec(
        species=(SpeciesSpec("x", 1.0, charge, 1, harmonic_omega=omega),),
        beta=beta, delta_tau=dtau, ndim=ndim, sampling=SamplerSettings(**kw),
        outputs=OutputSettings(estimators=("thermodynamic_energy", "virial_energy", "polarization"),
                               correlators=("dipole",)))


def free_spec(beta=1.0, dtau=1.0 / 16, ndim=3, **sampling):
    kw = dict(bisection_levels=3, sweeps_per_block=100, n_blocks=10, displace_step=0.5,
              displace_move_probability=0.5)
    kw.update(sampling)
    return SystemSpec(species=(SpeciesSpec("f", 1.0, 0.0, 1),), beta=beta, delta_tau=dtau,
                      ndim=ndim, sampling=SamplerSettings(**kw))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def validated(spec):
    return validate_spec(spec)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
