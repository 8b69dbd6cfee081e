"""Command-line experiment driver.

Subcommands: run, sweep, table3, recovery-curve, audit. Configuration is one
JSON document; command-line flags override its fields.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .cme import SeedLog
from .core_model import AdversaryTrace, CacheGeometry, LevelSpec
from .crash_audit import (
    AuditReport, GroundTruth, Simulator, audit_confidentiality, audit_pad_uniqueness, audit_persistence,
    expected_outcome,
)
from .eadr import EadrModel
from .metrics import (
    RECOVERY_SIZES_MIB, EnergyTable, LatencyTable, energy_crash_flush, full_dirty_bytes, recovery_curve,
)
from .schemes import DEFAULT_KEY, SCHEME_IDS, IncompatibleModel, SystemConfig, check_compatible, scheme_id
from .workloads import DEFAULT_ARENA, KINDS, TXN_SIZES, TxnSpec, dump_trace, load_trace, multicore_trace

CSV_FIELDS = ("scheme", "model", "workload", "txn_size", "cores", "crash_point", "cycles", "energy_mj",
              "recovery_s", "violations")
MODEL_IDS = tuple(m.value for m in EadrModel)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    schemes: list = field(default_factory=lambda: ["sepencr"])
    models: list = field(default_factory=lambda: ["write-only"])
    workloads: list = field(default_factory=lambda: ["array"])
    txn_sizes: list = field(default_factory=lambda: [64])
    cores: list = field(default_factory=lambda: [1])
    n_txns: int = 1000
    ops: Optional[int] = None
    crash: str = "none"
    rng_seed: int = 1
    value_seed: int = 2
    arena_bytes: int = DEFAULT_ARENA
    key: str = DEFAULT_KEY
    geometry: dict = field(default_factory=dict)
    latency: dict = field(default_factory=dict)
    energy: dict = field(default_factory=dict)
    expect_leak: bool = False
    output: Optional[str] = None
    save_traces: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in names:
                raise ConfigError(f"unknown config field {k!r}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        for k in ("output", "save_traces"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> None:
        for name in ("schemes", "models", "workloads", "txn_sizes", "cores"):
            v = getattr(self, name)
            if isinstance(v, (str, int)):
                v = [v]
                setattr(self, name, v)
            if not v:
                raise ConfigError(f"{name}: must not be empty")
        try:
            self.schemes = [scheme_id(s) for s in self.schemes]
        except ValueError as e:
            raise ConfigError(f"schemes: {e}") from None
        try:
            self.models = [EadrModel.parse(m).value for m in self.models]
        except ValueError as e:
            raise ConfigError(f"models: {e}") from None
        for w in self.workloads:
            if w not in KINDS:
                raise ConfigError(f"workloads: unknown workload {w!r}; expected one of {', '.join(KINDS)}")
        for t in self.txn_sizes:
            if not isinstance(t, int) or t <= 0 or t % 64:
                raise ConfigError(f"txn_sizes: {t!r} is not a positive multiple of 64")
        geom = self.build_geometry()
        for c in self.cores:
            if not isinstance(c, int) or not 1 <= c <= geom.cores:
                raise ConfigError(f"cores: {c!r} outside 1..{geom.cores}")
        if self.n_txns < 0:
            raise ConfigError("n_txns: must be non-negative")
        if self.ops is not None and self.ops < 0:
            raise ConfigError("ops: must be non-negative")
        parse_crash(self.crash)
        try:
            bytes.fromhex(self.key)
            if len(bytes.fromhex(self.key)) != 16:
                raise ValueError
        except ValueError:
            raise ConfigError("key: must be 32 hex digits") from None
        self.build_latencies()
        self.build_energies()

    def build_geometry(self) -> CacheGeometry:
        g = dict(self.geometry)
        unknown = set(g) - {"cores", "scale", "levels"}
        if unknown:
            raise ConfigError(f"geometry: unknown field {sorted(unknown)[0]!r}")
        try:
            base = CacheGeometry()
            if "levels" in g:
                levels = tuple(LevelSpec(lv["name"], int(lv["capacity"]), int(lv["assoc"]),
                                         bool(lv.get("private", False))) for lv in g["levels"])
                base = CacheGeometry(levels, base.cores)
            if "cores" in g:
                base = CacheGeometry(base.levels, int(g["cores"]))
            if "scale" in g:
                base = base.scaled(float(g["scale"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"geometry: {e}") from None
        return base

    def build_latencies(self) -> LatencyTable:
        return _override(LatencyTable, self.latency, "latency")

    def build_energies(self) -> EnergyTable:
        return _override(EnergyTable, self.energy, "energy")

    def system(self) -> SystemConfig:
        return SystemConfig(geometry=self.build_geometry(), key=self.key)


def _override(cls, values: dict, what: str):
    names = {f.name for f in dataclasses.fields(cls)}
    for k in values:
        if k not in names:
            raise ConfigError(f"{what}.{k}: unknown field")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{what}: {e}") from None


def parse_crash(spec: str, n_ops: Optional[int] = None) -> list:
    """``none`` -> [None]; ``step:a,b`` -> [a, b]; ``sweep:k`` -> k evenly spaced points; ``sweep:all``."""
    spec = str(spec).strip()
    if spec == "none":
        return [None]
    kind, _, arg = spec.partition(":")
    if kind == "step":
        try:
            pts = [int(x) for x in arg.split(",")]
        except ValueError:
            raise ConfigError(f"crash: bad step list {arg!r}") from None
        if any(p < 0 for p in pts):
            raise ConfigError("crash: steps must be non-negative")
        if n_ops is not None and any(p > n_ops for p in pts):
            raise ConfigError(f"crash: step beyond trace length {n_ops}")
        return pts
    if kind == "sweep":
        if arg == "all":
            return list(range(n_ops + 1)) if n_ops is not None else []
        try:
            k = int(arg)
        except ValueError:
            raise ConfigError(f"crash: bad sweep count {arg!r}") from None
        if k < 1:
            raise ConfigError("crash: sweep count must be at least 1")
        if n_ops is None:
            return []
        return [round((i + 1) * n_ops / (k + 1)) for i in range(k)]
    raise ConfigError(f"crash: expected none, step:K or sweep:K, got {spec!r}")


def validate_pairs(schemes: Sequence[str], models: Sequence[str], drop: bool = False) -> list:
    """All (scheme, model) pairs; incompatible ones raise, or are dropped when ``drop``."""
    out = []
    for s in schemes:
        for m in models:
            try:
                check_compatible(s, m)
            except IncompatibleModel:
                if not drop:
                    raise
                print(f"skipping {s} x {m}: incompatible", file=sys.stderr)
                continue
            out.append((s, m))
    return out


@dataclass
class CellResult:
    row: dict
    report: AuditReport
    expected: dict
    failed: bool


def run_cell(cfg: ExperimentConfig, scheme: str, model: str, workload: str, txn: int, cores: int,
             crash_point: Optional[int], ops=None, trace_dir: Optional[str] = None) -> CellResult:
    if ops is None:
        ops = build_ops(cfg, workload, txn, cores)
    system = cfg.system()
    sim = Simulator(scheme, model, system, cfg.build_latencies(), cfg.build_energies())
    if crash_point is not None:
        sim.run(ops, crash_point)
        sim.crash(recover=True)
    sim.run(ops)
    sim.persistence.extend(audit_persistence({}, sim.truth.current, sim.scheme.peek))
    stats = sim.finish()
    report = sim.report()
    expected = expected_outcome(scheme, model)
    failed = ((expected["confidential"] and not report.confidential)
              or (expected["unique_pads"] and not report.unique_pads)
              or (expected["persistent"] and not report.persistent))
    if cfg.expect_leak and report.confidential:
        failed = True
    violations = (len(report.confidentiality_violations) + len(report.duplicate_seeds)
                  + len(report.persistence_mismatches))
    row = {
        "scheme": scheme, "model": model, "workload": workload, "txn_size": txn, "cores": cores,
        "crash_point": "none" if crash_point is None else crash_point,
        "cycles": stats.total_cycles, "energy_mj": f"{stats.crash_energy_mj:.6f}",
        "recovery_s": f"{stats.recovery_seconds:.9f}", "violations": violations,
    }
    if trace_dir:
        os.makedirs(trace_dir, exist_ok=True)
        stem = os.path.join(trace_dir, cell_name(row))
        with open(stem + ".ops.txt", "w") as fh:
            dump_trace(ops, fh)
        with open(stem + ".bus.jsonl", "w") as fh:
            for r in sim.scheme.trace.to_records():
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        sim.scheme.log.export(stem + ".seeds.txt", "encrypt")
    return CellResult(row, report, expected, failed)


def cell_name(row: dict) -> str:
    return "{scheme}_{model}_{workload}_{txn_size}_{cores}_{crash_point}".format(**row)


def build_ops(cfg: ExperimentConfig, workload: str, txn: int, cores: int):
    spec = TxnSpec(txn_size=txn, n_txns=cfg.n_txns, rng_seed=cfg.rng_seed, value_seed=cfg.value_seed,
                   arena_bytes=cfg.arena_bytes)
    return multicore_trace(workload, spec, cores, cfg.ops)


def run_experiment(cfg: ExperimentConfig, drop_incompatible: bool = False, out=None) -> tuple:
    """Run every matrix cell; returns (csv text, audit dicts, any_failed)."""
    pairs = validate_pairs(cfg.schemes, cfg.models, drop=drop_incompatible)
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.hash()}\n")
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    audits = []
    any_failed = False
    for workload in cfg.workloads:
        for txn in cfg.txn_sizes:
            for cores in cfg.cores:
                ops = build_ops(cfg, workload, txn, cores)
                points = parse_crash(cfg.crash, len(ops))
                for scheme, model in pairs:
                    for cp in points:
                        res = run_cell(cfg, scheme, model, workload, txn, cores, cp, ops, cfg.save_traces)
                        writer.writerow(res.row)
                        audit = res.report.to_dict()
                        audit.update(cell=res.row, expected=res.expected, expectation_failed=res.failed,
                                     config_hash=cfg.hash())
                        audits.append(audit)
                        any_failed |= res.failed
    return buf.getvalue(), audits, any_failed


def write_outputs(cfg: ExperimentConfig, text: str, audits: list) -> None:
    if cfg.output is None:
        sys.stdout.write(text)
        return
    with open(cfg.output, "w") as fh:
        fh.write(text)
    with open(os.path.splitext(cfg.output)[0] + ".audit.json", "w") as fh:
        json.dump({"config_hash": cfg.hash(), "cells": audits}, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- table 3 / fig 10


TABLE3_SCHEMES = ("baseline", "sepencr", "bbe")


def table3_rows(geometry: CacheGeometry = CacheGeometry(), energies: EnergyTable = EnergyTable(),
                zero_dirty: bool = False) -> list:
    rows = []
    for s in TABLE3_SCHEMES:
        dirty = [0] * len(geometry.levels) if zero_dirty else full_dirty_bytes(s, geometry)
        rows.append({"scheme": s, "flushed_bytes": sum(dirty),
                     "energy_mj": energy_crash_flush(s, geometry, dirty, energies)})
    return rows


def table3_csv(cfg: ExperimentConfig, zero_dirty: bool = False) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.hash()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "flushed_bytes", "energy_mj"])
    for r in table3_rows(cfg.build_geometry(), cfg.build_energies(), zero_dirty):
        w.writerow([r["scheme"], r["flushed_bytes"], f"{r['energy_mj']:.4f}"])
    return buf.getvalue()


def recovery_csv(sizes: Sequence[int] = RECOVERY_SIZES_MIB) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cache_mib", "bbe_s", "sepencr_s"])
    for r in recovery_curve(sizes):
        w.writerow([r["cache_mib"], f"{r['bbe_s']:.7f}", f"{r['sepencr_s']:.7f}"])
    return buf.getvalue()


# ---------------------------------------------------------------- audit


def audit_saved(ops_path: str, bus_path: str, seeds_path: Optional[str] = None) -> AuditReport:
    with open(ops_path) as fh:
        ops = load_trace(fh)
    with open(bus_path) as fh:
        trace = AdversaryTrace.from_records(json.loads(line) for line in fh if line.strip())
    truth = GroundTruth.replay(ops)
    dups = audit_pad_uniqueness(SeedLog.load(seeds_path)) if seeds_path else []
    return AuditReport(audit_confidentiality(trace, truth), dups, [])


# ---------------------------------------------------------------- argument parsing


def _csv_list(conv=str):
    def parse(text):
        return [conv(x) for x in text.split(",") if x]
    return parse


def _add_matrix_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--scheme", dest="schemes", type=_csv_list(), help=f"comma list of {', '.join(SCHEME_IDS)}")
    p.add_argument("--model", dest="models", type=_csv_list(), help=f"comma list of {', '.join(MODEL_IDS)}")
    p.add_argument("--workload", dest="workloads", type=_csv_list(), help=f"comma list of {', '.join(KINDS)}")
    p.add_argument("--txn", dest="txn_sizes", type=_csv_list(int), help="transaction sizes in bytes")
    p.add_argument("--cores", type=_csv_list(int))
    p.add_argument("--n-txns", dest="n_txns", type=int)
    p.add_argument("--ops", type=int, help="truncate each trace to this many ops")
    p.add_argument("--crash", help="none | step:K[,K...] | sweep:K | sweep:all")
    p.add_argument("--seed", dest="rng_seed", type=int)
    p.add_argument("--value-seed", dest="value_seed", type=int)
    p.add_argument("--arena", dest="arena_bytes", type=int, help="per-core arena in bytes")
    p.add_argument("--key", help="AES-128 key as 32 hex digits")
    p.add_argument("--expect-leak", dest="expect_leak", action="store_true", default=None,
                   help="fail unless a confidentiality violation is observed")
    p.add_argument("-o", "--output", help="CSV path; the JSON audit goes next to it")
    p.add_argument("--save-traces", dest="save_traces", help="directory for op, bus and seed traces per cell")


def load_config(args: argparse.Namespace, defaults: Optional[dict] = None) -> ExperimentConfig:
    d = dict(defaults or {})
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                d.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"config: {e}") from None
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for k, v in vars(args).items():
        if k in names and v is not None:
            d[k] = v
    return ExperimentConfig.from_dict(d)


SWEEP_DEFAULTS = {
    "schemes": list(SCHEME_IDS), "models": list(MODEL_IDS), "workloads": list(KINDS),
    "txn_sizes": list(TXN_SIZES), "cores": [1, 2, 4, 8], "n_txns": 200, "ops": 2000,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eadrsim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run a scheme x model x workload matrix")
    _add_matrix_args(r)
    s = sub.add_parser("sweep", help="full matrix; incompatible pairs are skipped")
    _add_matrix_args(s)
    t = sub.add_parser("table3", help="crash-flush energy per scheme")
    t.add_argument("--config")
    t.add_argument("--geometry-scale", type=float)
    t.add_argument("--zero-dirty", action="store_true")
    t.add_argument("-o", "--output")
    c = sub.add_parser("recovery-curve", help="recovery time over data-cache sizes")
    c.add_argument("--sizes", type=_csv_list(int), default=list(RECOVERY_SIZES_MIB), help="MiB")
    c.add_argument("-o", "--output")
    a = sub.add_parser("audit", help="re-run the auditors on saved traces")
    a.add_argument("--ops", required=True, help="op trace (text format)")
    a.add_argument("--bus", required=True, help="bus trace (JSON lines)")
    a.add_argument("--seeds", help="encryption seed log (hex lines)")
    a.add_argument("--expect-leak", action="store_true")
    return p


def _emit(text: str, path: Optional[str]) -> None:
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.cmd in ("run", "sweep"):
            cfg = load_config(args, SWEEP_DEFAULTS if args.cmd == "sweep" else None)
            text, audits, failed = run_experiment(cfg, drop_incompatible=args.cmd == "sweep")
            write_outputs(cfg, text, audits)
            return 1 if failed else 0
        if args.cmd == "table3":
            d = {}
            if args.config:
                with open(args.config) as fh:
                    d = json.load(fh)
                d = {k: v for k, v in d.items() if k in ("geometry", "energy", "key")}
            cfg = ExperimentConfig.from_dict(d)
            if args.geometry_scale is not None:
                cfg.geometry = dict(cfg.geometry, scale=args.geometry_scale)
                cfg.validate()
            _emit(table3_csv(cfg, args.zero_dirty), args.output)
            return 0
        if args.cmd == "recovery-curve":
            _emit(recovery_csv(args.sizes), args.output)
            return 0
        if args.cmd == "audit":
            report = audit_saved(args.ops, args.bus, args.seeds)
            print(report.to_json())
            ok = report.unique_pads and (report.confidential != args.expect_leak)
            return 0 if ok else 1
    except IncompatibleModel as e:
        print(f"eadrsim: compatibility error: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"eadrsim: invalid config: {e}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
