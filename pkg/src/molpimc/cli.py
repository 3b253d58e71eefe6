"""Command-line driver: tabulate, run, analyze, scan.

Exit codes: 2 configuration error, 3 tabulation convergence failure,
4 missing pair-action table, 5 checkpoint mismatch, 6 missing correlators.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from .action import MissingTableError, build_action_context, load_tables, pair_requirements
from .coulomb_action import TabulationError, save_table, tabulate_pair_action
from .estimators import UNITS, EstimatorTrace
from .greens import CorrelationAccumulator, to_matsubara
from .model import (SpecError, ValidatedSpec, dump_config, load_config, validate_spec)
from .sampler import CheckpointMismatch, SimulationResult, _make_accumulators, run_simulation, spec_hash

log = logging.getLogger("molpimc")

EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_TABLE, EXIT_CHECKPOINT, EXIT_CORRELATORS = 2, 3, 4, 5, 6

SPECTRUM_CONVENTION = {"separation": "beta", "dipole": "none"}
CORRELATOR_UNITS = {"separation": "bohr^2", "dipole": "(e*bohr)^2"}
N_MAX_DEFAULT = 64


class MissingCorrelators(LookupError):
    pass


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    seed: int
    n_chains: int
    threads: int
    command: str
    started: float = 0.0
    finished: float = 0.0
    files: list = field(default_factory=list)

    def add(self, root, path):
        path = Path(path)
        self.files.append({"path": str(path.relative_to(root)), "sha256": sha256_file(path)})

    def write(self, root):
        d = dict(self.__dict__)
        d["wall_seconds"] = self.finished - self.started
        p = Path(root) / "manifest.json"
        p.write_text(json.dumps(d, indent=2) + "\n")
        return p


# -- helpers -----------------------------------------------------------------------

def _load_spec(path, seed=None) -> ValidatedSpec:
    spec = load_config(path)
    if seed is not None:
        spec = replace(spec, sampling=replace(spec.sampling, rng_seed=int(seed)))
    return validate_spec(spec)


def _tables_dir(vspec: ValidatedSpec, args, config_path=None):
    if getattr(args, "tables_dir", None):
        return Path(args.tables_dir)
    d = vspec.spec.pair_action.tables_dir
    if d:
        p = Path(d)
        if not p.is_absolute() and config_path is not None:
            p = Path(config_path).parent / p
        return p
    return Path("tables")


def tabulate_all(vspec: ValidatedSpec, directory, force=False, progress=None):
    """Build (or reuse) every table the system needs; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for key, (a, b, mu, z) in sorted(pair_requirements(vspec).items()):
        path = directory / key
        if path.exists() and not force:
            log.info("reusing %s", path)
        else:
            log.info("tabulating %s-%s pair (mu = %g, z = %g)", a, b, mu, z)
            t = tabulate_pair_action(mu, z, vspec.delta_tau, vspec.spec.pair_action, progress=progress)
            save_table(t, path)
        paths.append(path)
    return paths


def _obtain_tables(vspec, args, config_path):
    d = _tables_dir(vspec, args, config_path)
    if getattr(args, "auto_tabulate", False):
        tabulate_all(vspec, d)
    return load_tables(vspec, d)


def _fmt(x):
    return repr(float(x))


def _write_columns(path, header, rows):
    with open(path, "w") as f:
        f.write("# " + header + "\n")
        for r in rows:
            f.write(" ".join(_fmt(v) for v in r) + "\n")


def _trace_rows(result: SimulationResult, col):
    rows = []
    for b in result.blocks:
        v = np.atleast_1d(b.scalars[col])
        rows.append([b.index, b.chain, *v])
    return rows


def write_run_outputs(result: SimulationResult, out, manifest: RunManifest):
    from .estimators import I_D, I_D2, I_EV, I_ET, I_PX, I_PZ
    out = Path(out)
    vspec = result.vspec
    requested = set(vspec.spec.outputs.estimators)
    summary = {"estimators": {}, "acceptance": result.acceptance(),
               "out_of_grid_queries": result.diagnostics(),
               "n_equilibration_blocks": result.n_equilibration,
               "beta": vspec.beta, "delta_tau": vspec.delta_tau, "n_slices": vspec.n_slices}
    cols = {"thermodynamic_energy": (I_ET, "Ha"), "virial_energy": (I_EV, "Ha"),
            "polarization": (slice(I_PX, I_PZ + 1), "e*bohr"),
            "separation": (I_D, "bohr"), "separation_squared": (I_D2, "bohr^2")}
    names = [n for n in cols if n in requested or (n == "separation_squared" and "separation" in requested)]
    for name in names:
        col, unit = cols[name]
        vals = "value_x value_y value_z" if name == "polarization" else "value"
        p = out / f"trace_{name}.dat"
        _write_columns(p, f"block chain {vals} [{unit}]", _trace_rows(result, col))
        manifest.add(out, p)
        if len(result.blocks) >= 2:
            tr = result.trace(name)
            tr.units = unit
            tr.check_autocorrelation()
            summary["estimators"][name] = tr.summary()
    for name in vspec.spec.outputs.correlators:
        acc = result.accumulator(name)
        vb, ob = acc.blocks()
        p = out / f"corr_{name}.dat"
        hdr = "tau [1/Ha] " + " ".join(f"{lab} err_{lab}" for lab in acc.labels) + \
            f" [{CORRELATOR_UNITS[name]}]"
        rows = [[t, *[x for k in range(len(acc.pairs)) for x in (acc.values[k, j], acc.errors[k, j])]]
                for j, t in enumerate(acc.tau)]
        _write_columns(p, hdr, rows)
        manifest.add(out, p)
        pb = out / f"corr_{name}_blocks.dat"
        _write_columns(pb, f"one row per block: {len(acc.pairs)}x{acc.n_bins} raw correlator values "
                           f"then {acc.n_obs} observable means [{CORRELATOR_UNITS[name]}]",
                       [np.concatenate([v.ravel(), o]) for v, o in zip(vb, ob)])
        manifest.add(out, pb)
        if acc.n_blocks >= 2 and acc.n_bins >= 4:
            conv = SPECTRUM_CONVENTION[name]
            n_max = min(N_MAX_DEFAULT, acc.n_bins // 2 - 1)
            method = "endpoint" if acc.n_bins >= 24 else "trapezoid"
            sp = to_matsubara(acc, n_max, conv, connected=True, negate=True, method=method)
            ps = out / f"spectrum_{name}.dat"
            hdr = "n omega_n [Ha] " + " ".join(f"Re_{lab} Im_{lab} err_{lab}" for lab in acc.labels)
            rows = [[n, w, *[x for k in range(len(acc.pairs))
                             for x in (sp.values[k, j].real, sp.values[k, j].imag, sp.errors[k, j])]]
                    for j, (n, w) in enumerate(zip(sp.n, sp.omega))]
            _write_columns(ps, hdr + f" (connected, G = -<dA dB>, convention {conv})", rows)
            manifest.add(out, ps)
    p = out / "summary.json"
    p.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    manifest.add(out, p)
    return summary


def read_accumulator(run_dir, vspec: ValidatedSpec, name) -> CorrelationAccumulator:
    p = Path(run_dir) / f"corr_{name}_blocks.dat"
    if not p.exists():
        raise MissingCorrelators(f"{p} not found")
    acc = _make_accumulators(vspec)[name]
    data = np.atleast_2d(np.loadtxt(p))
    nv = len(acc.pairs) * acc.n_bins
    for row in data:
        acc.add_block(row[:nv].reshape(len(acc.pairs), acc.n_bins), row[nv:])
    return acc


def _read_trace(run_dir, name):
    p = Path(run_dir) / f"trace_{name}.dat"
    if not p.exists():
        return None
    data = np.atleast_2d(np.loadtxt(p))
    tr = EstimatorTrace(name, units=UNITS.get(name, ""))
    for row in data:
        v = row[2:]
        tr.add(v if v.size > 1 else v[0])
    return tr


# -- subcommands ----------------------------------------------------------------------

def cmd_tabulate(args):
    vspec = _load_spec(args.config)
    d = _tables_dir(vspec, args, args.config)
    manifest = RunManifest(spec_hash(vspec), __version__, vspec.spec.sampling.rng_seed,
                           vspec.spec.sampling.n_chains, 1, "tabulate", time.time())
    paths = tabulate_all(vspec, d, force=args.force, progress=lambda m: log.info(m))
    for p in paths:
        manifest.add(d, p)
    manifest.finished = time.time()
    manifest.write(d)
    for p in paths:
        print(p)
    return 0


def _run_one(vspec, ctx, out, args, label):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(spec_hash(vspec), __version__, vspec.spec.sampling.rng_seed,
                           vspec.spec.sampling.n_chains, args.threads, label, time.time())
    cfg = out / "config.yaml"
    dump_config(vspec.spec, cfg)
    manifest.add(out, cfg)
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)

    def progress(chain, block, total):
        log.info("chain %d: block %d/%d", chain, block, total)

    res = run_simulation(vspec, ctx, n_threads=args.threads, checkpoint_dir=ckpt, resume=args.resume,
                         stop_after=args.stop_after_blocks, progress=progress)
    complete = all(c.block_index >= vspec.spec.sampling.n_blocks for c in res.chains)
    summary = None
    if complete:
        summary = write_run_outputs(res, out, manifest)
    else:
        log.warning("run interrupted before completion; resume with --resume")
    manifest.finished = time.time()
    manifest.write(out)
    return summary


def cmd_run(args):
    vspec = _load_spec(args.config, args.seed_override)
    tables = _obtain_tables(vspec, args, args.config)
    ctx = build_action_context(vspec, tables)
    summary = _run_one(vspec, ctx, args.out, args, "run")
    field_vec = np.asarray(vspec.spec.electric_field)
    if (summary is not None and not args.no_half_field and np.any(field_vec != 0)
            and "polarization" in vspec.spec.outputs.estimators):
        half = replace(vspec.spec, electric_field=tuple(0.5 * field_vec))
        hv = validate_spec(half)
        _run_one(hv, build_action_context(hv, tables), Path(args.out) / "half_field", args, "run")
    if summary is not None:
        print(json.dumps(summary["estimators"], indent=2, sort_keys=True))
    return 0


def _separation_mass(vspec: ValidatedSpec):
    a, b = (vspec.particle_index(x) for x in vspec.spec.outputs.separation_pair)
    ma, mb = vspec.masses[a], vspec.masses[b]
    if vspec.mobile[a] and vspec.mobile[b]:
        return ma * mb / (ma + mb)
    return ma if vspec.mobile[a] else mb


def analyze_run(run_dir, n_max=None, n_fit=None, require=()):
    run_dir = Path(run_dir)
    cfg = run_dir / "config.yaml"
    if not cfg.exists():
        raise MissingCorrelators(f"{run_dir} holds no completed run")
    vspec = validate_spec(load_config(cfg))
    spec = vspec.spec
    report = {"beta": vspec.beta, "delta_tau": vspec.delta_tau, "estimators": {}}
    for name in ("thermodynamic_energy", "virial_energy", "polarization", "separation",
                 "separation_squared"):
        tr = _read_trace(run_dir, name)
        if tr is not None and tr.count >= 2:
            report["estimators"][name] = tr.summary()
    present = {c for c in spec.outputs.correlators if (run_dir / f"corr_{c}_blocks.dat").exists()}
    needs = {"frequency": None, "bond_length": "separation", "polarizability": "dipole"}
    for prop in require:
        c = needs[prop]
        if c is not None and c not in present:
            raise MissingCorrelators(f"property {prop!r} needs the {c} correlator")
        if c is None and not present:
            raise MissingCorrelators(f"property {prop!r} needs a correlator")
    if not present and not report["estimators"]:
        raise MissingCorrelators(f"{run_dir} holds no correlators or traces")

    def nmax_for(acc):
        return min(n_max or N_MAX_DEFAULT, acc.n_bins // 2 - 1)

    if "separation" in present and spec.outputs.separation_pair is not None:
        acc = read_accumulator(run_dir, vspec, "separation")
        (h, he), (z0, ze) = an.bond_length_from_correlator(acc)
        report["bond_length"] = {"G_half_beta": h, "G_half_beta_error": he, "G_zero": z0,
                                 "G_zero_error": ze, "units": "bohr^2"}
        sp = an.spectrum_from_correlator(acc, 0, nmax_for(acc), "beta")
        try:
            report["frequency"] = an.analyze_frequency(sp, _separation_mass(vspec), n_fit).as_dict()
        except an.AnalysisError as exc:
            report["frequency_error"] = str(exc)
    if "dipole" in present:
        acc = read_accumulator(run_dir, vspec, "dipole")
        fixed = any(s.fixed_positions is not None for s in spec.species)
        mode = "anisotropic" if fixed and spec.ndim == 3 else "isotropic"
        report["polarizability"] = an.static_polarizability_from_correlator(
            acc, mode, fixed, spec.ndim).as_dict()
        charged_mobile = np.flatnonzero(vspec.mobile & (vspec.charges != 0))
        if len(charged_mobile) == 1 and "frequency" not in report:
            i = charged_mobile[0]
            m_eff = vspec.masses[i] / vspec.charges[i] ** 2
            comps = [0, 4, 8][:spec.ndim]
            spf = to_matsubara(acc, nmax_for(acc), "beta", connected=True, negate=True)
            mean = np.mean([spf.values[k] for k in comps], axis=0)
            err = np.sqrt(np.mean([np.abs(spf.errors[k]) ** 2 for k in comps], axis=0) / len(comps))
            one = replace(spf.component(0), values=mean, errors=err, labels=("dipole",))
            try:
                report["frequency"] = an.analyze_frequency(one, m_eff, n_fit).as_dict()
            except an.AnalysisError as exc:
                report["frequency_error"] = str(exc)
    if "polarization" in report["estimators"] and any(spec.electric_field):
        tr = _read_trace(run_dir, "polarization")
        ff = {str(k): v for k, v in an.polarizability_from_field(tr, spec.electric_field).items()}
        report["finite_field_polarizability"] = ff
        half_dir = run_dir / "half_field"
        htr = _read_trace(half_dir, "polarization")
        if htr is not None and htr.count >= 2:
            hspec = load_config(half_dir / "config.yaml")
            hf = an.polarizability_from_field(htr, hspec.electric_field)
            report["half_field_polarizability"] = {str(k): v for k, v in hf.items()}
            report["linear_response_consistent"] = all(
                an.linear_response_consistent(ff[str(k)], hf[k]) for k in hf)
    for prop in require:
        if prop not in report:
            raise MissingCorrelators(f"property {prop!r} could not be produced")
    return report


def cmd_analyze(args):
    report = analyze_run(args.run_dir, args.n_max, args.n_fit, args.require or ())
    text = json.dumps(report, indent=2, sort_keys=True, default=float)
    p = Path(args.run_dir) / "analysis.json"
    p.write_text(text + "\n")
    print(text)
    return 0


def cmd_scan(args):
    vspec = _load_spec(args.config, args.seed_override)
    tables = _obtain_tables(vspec, args, args.config)
    seps = an.dedupe_separations(args.separations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(spec_hash(vspec), __version__, vspec.spec.sampling.rng_seed,
                           vspec.spec.sampling.n_chains, args.threads, "scan", time.time())
    cfg = out / "config.yaml"
    dump_config(vspec.spec, cfg)
    manifest.add(out, cfg)
    rows = an.scan_bo_surface(seps, vspec.spec, tables, args.nucleus,
                              {"n_threads": args.threads},
                              progress=lambda d, r: log.info("D = %g: E = %.6f +- %.6f", *r))
    p = out / "scan.dat"
    _write_columns(p, "D [bohr] E_V [Ha] error [Ha]", rows)
    manifest.add(out, p)
    manifest.finished = time.time()
    manifest.write(out)
    for d, e, s in rows:
        print(f"{d:8.4f} {e: .6f} {s:.6f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="molpimc", description="Path-integral Monte Carlo for small molecules")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", required=True, help="YAML system configuration")
        sp.add_argument("--tables-dir", help="pair-action table directory (overrides the config)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for chains")
        if seed:
            sp.add_argument("--seed-override", type=int, help="replace the configured RNG seed")
            sp.add_argument("--auto-tabulate", action="store_true",
                            help="build missing pair-action tables before running")

    t = sub.add_parser("tabulate", help="build pair-action tables")
    common(t, seed=False)
    t.add_argument("--force", action="store_true", help="rebuild existing tables")
    t.set_defaults(func=cmd_tabulate)

    r = sub.add_parser("run", help="run a simulation")
    common(r)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--resume", action="store_true", help="continue from checkpoints")
    r.add_argument("--no-half-field", action="store_true",
                   help="skip the half-field linearity run of finite-field jobs")
    r.add_argument("--stop-after-blocks", type=int, default=None, help=argparse.SUPPRESS)
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="extract properties from a run directory")
    a.add_argument("run_dir")
    a.add_argument("--n-max", type=int, default=None, help="highest Matsubara index")
    a.add_argument("--n-fit", type=int, default=None, help="points used in the oscillator fit")
    a.add_argument("--require", nargs="*", choices=("frequency", "bond_length", "polarizability"),
                   help="fail with exit code 6 unless these properties can be produced")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("scan", help="fixed-nuclei energy scan")
    common(s)
    s.add_argument("--separations", type=float, nargs="+", required=True, help="bohr")
    s.add_argument("--nucleus", default="p", help="species pinned on the z axis")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_scan)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SpecError as exc:
        for path, msg in exc.problems:
            print(f"config error: {path}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except TabulationError as exc:
        print(f"tabulation failed: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except MissingTableError as exc:
        print(f"missing table: {exc}", file=sys.stderr)
        return EXIT_TABLE
    except CheckpointMismatch as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except MissingCorrelators as exc:
        print(f"missing correlators: {exc}", file=sys.stderr)
        return EXIT_CORRELATORS
    except OSError as exc:
        if isinstance(exc, FileNotFoundError) and getattr(args, "config", None) and \
                not Path(args.config).exists():
            print(f"config error: {args.config}: file not found", file=sys.stderr)
            return EXIT_CONFIG
        raise


if __name__ == "__main__":
    sys.exit(main())
