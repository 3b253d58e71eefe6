"""Domain types, unit conventions and the YAML configuration schema.

All quantities are in Hartree atomic units (hbar = e = m_e = 1): energies in
Ha, lengths in bohr, imaginary time in 1/Ha, fields in Ha/(e bohr).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

HARTREE_TO_KELVIN = 315775.02
HARTREE_TO_WAVENUMBER = 219474.63  # cm^-1 per Ha
PROTON_MASS = 1836.152672  # electron masses

KNOWN_ESTIMATORS = ("thermodynamic_energy", "virial_energy", "polarization", "separation")
KNOWN_CORRELATORS = ("separation", "dipole")


class SpecError(ValueError):
    """Invalid simulation specification; ``problems`` holds (field path, message) pairs."""

    def __init__(self, problems):
        self.problems = list(problems)
        msg = "; ".join(f"{path}: {text}" for path, text in self.problems)
        super().__init__(msg)


@dataclass(frozen=True)
class SpeciesSpec:
    name: str
    mass: float
    charge: float
    count: int = 1
    fixed_positions: tuple | None = None
    start_positions: tuple | None = None
    harmonic_omega: float = 0.0  # external 1/2 m w^2 r^2 confinement, 0 = none


@dataclass(frozen=True)
class SamplerSettings:
    bisection_levels: int = 3
    sweeps_per_block: int = 100
    n_blocks: int = 20
    n_chains: int = 1
    rng_seed: int = 0
    displace_move_probability: float = 0.5
    displace_step: float = 0.3
    equilibration_fraction: float = 0.2
    # per-species overrides, stored as sorted (name, value) tuples so the spec stays hashable
    species_levels: tuple = ()
    species_steps: tuple = ()

    def levels_for(self, name):
        return dict(self.species_levels).get(name, self.bisection_levels)

    def step_for(self, name):
        return dict(self.species_steps).get(name, self.displace_step)


@dataclass(frozen=True)
class OutputSettings:
    estimators: tuple = ("thermodynamic_energy", "virial_energy")
    correlators: tuple = ()
    separation_pair: tuple | None = None  # two particle labels, e.g. ("p0", "p1")
    tau_bins: int | None = None  # coarsened correlator grid; None = one bin per slice


@dataclass(frozen=True)
class PairActionSettings:
    squarings: int = 10
    l_max: int = 40
    n_q: int = 512
    n_s: int = 64
    q_min: float = 0.005
    q_max: float = 10.0
    s_widths: float = 8.0
    epsilon: float = 0.05
    tables_dir: str | None = None


@dataclass(frozen=True)
class SystemSpec:
    species: tuple
    beta: float
    delta_tau: float
    electric_field: tuple = (0.0, 0.0, 0.0)
    sampling: SamplerSettings = field(default_factory=SamplerSettings)
    outputs: OutputSettings = field(default_factory=OutputSettings)
    ndim: int = 3
    pair_action: PairActionSettings = field(default_factory=PairActionSettings)


@dataclass(frozen=True)
class ValidatedSpec:
    """A checked :class:`SystemSpec` with per-particle arrays attached."""

    spec: SystemSpec
    n_slices: int
    delta_tau: float
    labels: tuple
    species_of_particle: np.ndarray
    masses: np.ndarray
    charges: np.ndarray
    mobile: np.ndarray
    omegas: np.ndarray
    reduced_masses: dict

    @property
    def beta(self):
        return self.spec.beta

    @property
    def n_particles(self):
        return len(self.labels)

    def particle_index(self, label):
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown particle label {label!r}; have {self.labels}") from None


@dataclass
class PathConfiguration:
    """Closed imaginary-time paths: ``beads[n, i]`` is particle i on slice n (cyclic in n)."""

    beads: np.ndarray
    species_of_particle: np.ndarray

    @property
    def n_slices(self):
        return self.beads.shape[0]

    @property
    def n_particles(self):
        return self.beads.shape[1]

    def copy(self):
        return PathConfiguration(self.beads.copy(), self.species_of_particle.copy())


def slice_count(beta, delta_tau):
    """Number of slices N with N * delta_tau == beta; raises SpecError otherwise."""
    ratio = beta / delta_tau
    n = int(round(ratio))
    if n < 2 or abs(ratio - n) > 1e-9 * max(n, 1):
        raise SpecError([("delta_tau", f"beta/delta_tau = {ratio!r} is not an integer >= 2")])
    return n


def validate_spec(spec: SystemSpec) -> ValidatedSpec:
    problems = []
    if not spec.beta > 0:
        problems.append(("beta", "must be > 0"))
    if not spec.delta_tau > 0:
        problems.append(("delta_tau", "must be > 0"))
    n = None
    if not problems:
        try:
            n = slice_count(spec.beta, spec.delta_tau)
        except SpecError as exc:
            problems.extend(exc.problems)
    if spec.ndim not in (1, 2, 3):
        problems.append(("ndim", "must be 1, 2 or 3"))
    if len(spec.electric_field) != 3:
        problems.append(("electric_field", "must be a 3-vector"))
    if not spec.species:
        problems.append(("species", "at least one species required"))

    names = [sp.name for sp in spec.species]
    if len(set(names)) != len(names):
        problems.append(("species", "species names must be unique"))
    for k, sp in enumerate(spec.species):
        path = f"species[{k}]"
        if not sp.mass > 0:
            problems.append((f"{path}.mass", "must be > 0"))
        if int(sp.count) != sp.count or sp.count < 1:
            problems.append((f"{path}.count", "must be a positive integer"))
        if sp.fixed_positions is not None and len(sp.fixed_positions) != sp.count:
            problems.append((f"{path}.fixed_positions",
                             f"has {len(sp.fixed_positions)} entries, count is {sp.count}"))
        if sp.start_positions is not None and len(sp.start_positions) != sp.count:
            problems.append((f"{path}.start_positions",
                             f"has {len(sp.start_positions)} entries, count is {sp.count}"))
        if sp.harmonic_omega < 0:
            problems.append((f"{path}.harmonic_omega", "must be >= 0"))
        if spec.ndim < 3 and sp.charge != 0 and any(
                o.charge != 0 for o in spec.species if o is not sp or sp.count > 1):
            problems.append((f"{path}.charge", "Coulomb pairs need ndim = 3"))

    s = spec.sampling
    if s.bisection_levels < 1:
        problems.append(("sampling.bisection_levels", "must be >= 1"))
    if n is not None:
        for name, lv in [(None, s.bisection_levels)] + list(s.species_levels):
            if 2 ** lv >= n:
                where = "sampling.bisection_levels" if name is None else f"sampling.species_levels.{name}"
                problems.append((where, f"2^{lv} must be < N = {n}"))
    if s.sweeps_per_block < 1:
        problems.append(("sampling.sweeps_per_block", "must be >= 1"))
    if s.n_blocks < 1:
        problems.append(("sampling.n_blocks", "must be >= 1"))
    if s.n_chains < 1:
        problems.append(("sampling.n_chains", "must be >= 1"))
    if not 0.0 <= s.displace_move_probability <= 1.0:
        problems.append(("sampling.displace_move_probability", "must lie in [0, 1]"))
    if not 0.0 <= s.equilibration_fraction < 1.0:
        problems.append(("sampling.equilibration_fraction", "must lie in [0, 1)"))

    out = spec.outputs
    for e in out.estimators:
        if e not in KNOWN_ESTIMATORS:
            problems.append(("outputs.estimators", f"unknown estimator {e!r}"))
    for c in out.correlators:
        if c not in KNOWN_CORRELATORS:
            problems.append(("outputs.correlators", f"unknown correlator {c!r}"))
    if n is not None and out.tau_bins is not None:
        if out.tau_bins < 2 or n % out.tau_bins:
            problems.append(("outputs.tau_bins", f"must be >= 2 and divide N = {n}"))

    pa = spec.pair_action
    if pa.squarings < 6:
        problems.append(("pair_action.squarings", "must be >= 6"))
    if not 0 < pa.q_min < pa.q_max:
        problems.append(("pair_action", "need 0 < q_min < q_max"))
    if pa.s_widths < 6:
        problems.append(("pair_action.s_widths", "must be >= 6 thermal widths"))

    if problems:
        raise SpecError(problems)

    labels, sp_idx, masses, charges, mobile, omegas = [], [], [], [], [], []
    for k, sp in enumerate(spec.species):
        for c in range(sp.count):
            labels.append(f"{sp.name}{c}")
            sp_idx.append(k)
            masses.append(float(sp.mass))
            charges.append(float(sp.charge))
            mobile.append(sp.fixed_positions is None)
            omegas.append(float(sp.harmonic_omega))
    if ("separation" in out.estimators or "separation" in out.correlators):
        if out.separation_pair is None or len(out.separation_pair) != 2:
            raise SpecError([("outputs.separation_pair", "two particle labels required")])
        for lab in out.separation_pair:
            if lab not in labels:
                raise SpecError([("outputs.separation_pair", f"unknown particle {lab!r}")])

    reduced = {}
    for a, sa in enumerate(spec.species):
        for b, sb in enumerate(spec.species):
            if b < a:
                continue
            reduced[tuple(sorted((sa.name, sb.name)))] = sa.mass * sb.mass / (sa.mass + sb.mass)

    return ValidatedSpec(
        spec=spec, n_slices=n, delta_tau=spec.beta / n, labels=tuple(labels),
        species_of_particle=np.array(sp_idx, dtype=np.int64),
        masses=np.array(masses), charges=np.array(charges),
        mobile=np.array(mobile, dtype=np.bool_), omegas=np.array(omegas),
        reduced_masses=reduced)


def build_initial_configuration(vspec: ValidatedSpec, rng, spread=0.5) -> PathConfiguration:
    """Classical start: every particle's beads collapsed onto one point.

    Fixed particles sit at their fixed positions. Mobile particles use their
    start positions when given; otherwise charged particles that have Coulomb
    partners get a random offset of up to ``spread`` bohr per axis, and the rest
    start at the origin.
    """
    spec = vspec.spec
    n, p = vspec.n_slices, vspec.n_particles
    beads = np.zeros((n, p, 3))
    charged = vspec.charges != 0
    idx = 0
    for sp in spec.species:
        for c in range(sp.count):
            if sp.fixed_positions is not None:
                pos = np.asarray(sp.fixed_positions[c], dtype=float)
            elif sp.start_positions is not None:
                pos = np.asarray(sp.start_positions[c], dtype=float)
            elif charged[idx] and charged.sum() > 1:
                pos = np.zeros(3)
                pos[:spec.ndim] = rng.uniform(-spread, spread, size=spec.ndim)
            else:
                pos = np.zeros(3)
            beads[:, idx, :] = pos
            idx += 1
    return PathConfiguration(beads, vspec.species_of_particle.copy())


def temperature_of(spec) -> float:
    """Temperature in kelvin for a (validated) spec."""
    beta = spec.beta
    return HARTREE_TO_KELVIN / beta


# -- configuration file --------------------------------------------------------

def _tuplify(v):
    if isinstance(v, (list, tuple)):
        return tuple(_tuplify(x) for x in v)
    return v


def spec_from_dict(d: dict[str, Any]) -> SystemSpec:
    try:
        system = d["system"]
        species = tuple(
            SpeciesSpec(
                name=str(s["name"]), mass=float(s["mass"]), charge=float(s.get("charge", 0.0)),
                count=int(s.get("count", 1)),
                fixed_positions=_tuplify(s.get("fixed_positions")),
                start_positions=_tuplify(s.get("start_positions")),
                harmonic_omega=float(s.get("harmonic_omega", 0.0)))
            for s in d["species"])
        sam = dict(d.get("sampler", {}))
        sam["species_levels"] = tuple(sorted((sam.get("species_levels") or {}).items()))
        sam["species_steps"] = tuple(sorted((sam.get("species_steps") or {}).items()))
        outs = dict(d.get("outputs", {}))
        for key in ("estimators", "correlators", "separation_pair"):
            if outs.get(key) is not None:
                outs[key] = tuple(outs[key])
        return SystemSpec(
            species=species,
            beta=float(system["beta"]),
            delta_tau=float(system["delta_tau"]),
            electric_field=tuple(float(x) for x in system.get("electric_field", (0.0, 0.0, 0.0))),
            ndim=int(system.get("ndim", 3)),
            sampling=SamplerSettings(**sam),
            outputs=OutputSettings(**outs),
            pair_action=PairActionSettings(**d.get("pair_action", {})),
        )
    except (KeyError, TypeError) as exc:
        raise SpecError([("config", f"malformed configuration: {exc}")]) from exc


def _listify(v):
    if isinstance(v, tuple):
        return [_listify(x) for x in v]
    return v


def spec_to_dict(spec: SystemSpec) -> dict[str, Any]:
    species = []
    for s in spec.species:
        entry = {"name": s.name, "mass": s.mass, "charge": s.charge, "count": s.count}
        if s.fixed_positions is not None:
            entry["fixed_positions"] = _listify(s.fixed_positions)
        if s.start_positions is not None:
            entry["start_positions"] = _listify(s.start_positions)
        if s.harmonic_omega:
            entry["harmonic_omega"] = s.harmonic_omega
        species.append(entry)
    sam = asdict(spec.sampling)
    sam["species_levels"] = dict(spec.sampling.species_levels)
    sam["species_steps"] = dict(spec.sampling.species_steps)
    outs = {k: _listify(v) for k, v in asdict(spec.outputs).items()}
    return {
        "system": {"beta": spec.beta, "delta_tau": spec.delta_tau,
                   "electric_field": list(spec.electric_field), "ndim": spec.ndim},
        "species": species,
        "sampler": sam,
        "outputs": outs,
        "pair_action": asdict(spec.pair_action),
    }


def load_config(path) -> SystemSpec:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SpecError([("config", f"YAML parse error: {exc}")]) from exc
    if not isinstance(data, dict):
        raise SpecError([("config", "top level must be a mapping")])
    return spec_from_dict(data)


def dump_config(spec: SystemSpec, path=None) -> str:
    text = yaml.safe_dump(spec_to_dict(spec), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def with_fixed_positions(spec: SystemSpec, name: str, positions) -> SystemSpec:
    """Copy of ``spec`` with species ``name`` pinned at ``positions``."""
    species = tuple(
        replace(s, fixed_positions=_tuplify([list(map(float, p)) for p in positions]))
        if s.name == name else s
        for s in spec.species)
    return replace(spec, species=species)


def thermal_width(mu, tau):
    return math.sqrt(tau / mu)
