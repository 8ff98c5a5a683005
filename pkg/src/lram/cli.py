"""Command-line front end: config parsing, subcommand dispatch, CSV emission.

Subcommands: ``spde`` (mean-field estimation), ``socp`` (tracking control),
``compress`` (factorize an ensemble), ``diagnose`` (spectral diagnostics).
Configuration is a flat key-value text file, one ``key = value`` per line;
command-line flags override file values, which override documented defaults.
Every emitted CSV has a header row, a fixed column order, and full-precision
(round-trip safe) numbers, so identical manifests produce byte-identical
CSVs.  Wall-clock timings and output digests live in ``manifest.txt``, which
is the only non-deterministic artifact.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(a partial manifest with the error annotation is still written).
"""

from __future__ import annotations

import argparse
import glob as globmod
import hashlib
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, fem, lowrank, numerics, perturbed, socp, spde
from .errors import (
    ConfigError,
    ConfigParseError,
    ConfigRangeError,
    LramError,
    UnknownKeyError,
)

# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float_list(text: str) -> tuple[float, ...]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    return tuple(float(t) for t in items)


@dataclass(frozen=True)
class Option:
    parse: object
    default: object
    check: object = None
    message: str = ""


def _schema_common():
    return {
        "seed": Option(int, 1234, lambda v: v >= 0, "seed must be >= 0"),
        "threads": Option(int, 1, lambda v: v >= 1, "threads must be >= 1"),
        "out_dir": Option(str, "out"),
    }


def _schema_field_sampling():
    return {
        "h": Option(float, 0.1, lambda v: 0.0 < v < 1.0, "h must lie in (0, 1)"),
        "samples": Option(int, 100, lambda v: v >= 1, "samples must be >= 1"),
        "epsilon": Option(float, 0.2, lambda v: v >= 0.0, "epsilon must be >= 0"),
        "distribution": Option(str, "normal", lambda v: v in fem.DISTRIBUTIONS,
                               f"distribution must be one of {fem.DISTRIBUTIONS}"),
        "tau": Option(float, 0.88, lambda v: 0.0 < v <= 1.0, "tau must lie in (0, 1]"),
    }


def schema_spde():
    schema = _schema_common() | _schema_field_sampling()
    schema.update({
        "method": Option(str, "smw", lambda v: v in spde.METHODS,
                         f"method must be one of {spde.METHODS}"),
        "neumann_order": Option(int, 4, lambda v: v >= 0, "neumann_order must be >= 0"),
        "reference": Option(_parse_bool, True),
        "force_neumann": Option(_parse_bool, False),
        "export_samples": Option(_parse_bool, False),
        "sample_conditions": Option(_parse_bool, False),
        "tau_scan": Option(_parse_float_list, ()),
    })
    return schema


def schema_socp():
    schema = _schema_common() | _schema_field_sampling()
    schema["samples"] = Option(int, 50, lambda v: v >= 1, "samples must be >= 1")
    schema["distribution"] = Option(str, "uniform", lambda v: v in fem.DISTRIBUTIONS,
                                    f"distribution must be one of {fem.DISTRIBUTIONS}")
    schema.update({
        "method": Option(str, "newton", lambda v: v in socp.METHODS,
                         f"method must be one of {socp.METHODS}"),
        "compare_methods": Option(_parse_bool, False),
        "beta": Option(float, 1e-4, lambda v: v > 0.0, "beta must be > 0"),
        "grad_tol": Option(float, 1e-3, lambda v: v > 0.0, "grad_tol must be > 0"),
        "max_iters": Option(int, 5000, lambda v: v >= 1, "max_iters must be >= 1"),
        "wolfe_c1": Option(float, 1e-4, lambda v: v > 0.0, "wolfe_c1 must be > 0"),
        "wolfe_c2": Option(float, 0.9, lambda v: v < 1.0, "wolfe_c2 must be < 1"),
        "ls_max_trials": Option(int, 50, lambda v: v >= 1, "ls_max_trials must be >= 1"),
        "sgd_batch": Option(int, 1, lambda v: v >= 1, "sgd_batch must be >= 1"),
        "sgd_decay": Option(float, 20.0, lambda v: v > 0.0, "sgd_decay must be > 0"),
        "sgd_check_every": Option(int, 10, lambda v: v >= 1, "sgd_check_every must be >= 1"),
        "tr_radius0": Option(float, 1.0, lambda v: v > 0.0, "tr_radius0 must be > 0"),
        "tr_radius_max": Option(float, 1e6, lambda v: v > 0.0, "tr_radius_max must be > 0"),
        "desired": Option(str, "sin-pi", lambda v: v in socp.DESIRED_STATES,
                          f"desired must be one of {socp.DESIRED_STATES}"),
        "desired_amplitude": Option(float, 10.0),
        "desired_mode": Option(str, "interpolant", lambda v: v in socp.DESIRED_MODES,
                               f"desired_mode must be one of {socp.DESIRED_MODES}"),
        "control_init": Option(float, 0.0),
    })
    return schema


def schema_compress():
    schema = _schema_common() | _schema_field_sampling()
    schema["samples"] = Option(int, 20, lambda v: v >= 1, "samples must be >= 1")
    schema.update({
        "input": Option(str, ""),
        "export_mm": Option(_parse_bool, False),
    })
    return schema


def schema_diagnose():
    schema = _schema_common() | _schema_field_sampling()
    schema["samples"] = Option(int, 20, lambda v: v >= 1, "samples must be >= 1")
    schema.update({
        "input": Option(str, ""),
        "sample_conditions": Option(_parse_bool, False),
    })
    return schema


SCHEMAS = {
    "spde": schema_spde,
    "socp": schema_socp,
    "compress": schema_compress,
    "diagnose": schema_diagnose,
}


def parse_config(schema: dict, path=None, overrides=None) -> dict:
    """Resolve a configuration: defaults, then file values, then overrides."""
    resolved = {key: opt.default for key, opt in schema.items()}

    def apply(key: str, text: str, line=None):
        if key not in schema:
            raise UnknownKeyError(f"unknown key {key!r}")
        opt = schema[key]
        try:
            value = opt.parse(text.strip())
        except ValueError as exc:
            raise ConfigParseError(f"bad value for {key!r}: {exc}", line=line) from exc
        if opt.check is not None and not opt.check(value):
            raise ConfigRangeError(opt.message or f"value out of range for {key!r}")
        resolved[key] = value

    if path is not None:
        text = Path(path).read_text()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            stripped = raw.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigParseError("expected 'key = value'", line=lineno)
            key, _, value = stripped.partition("=")
            apply(key.strip(), value, line=lineno)

    for key, text in (overrides or {}).items():
        apply(key, text)
    return resolved


# ---------------------------------------------------------------------------
# deterministic CSV and manifest emission
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _sha256(path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def write_manifest(out_dir: Path, subcommand: str, resolved: dict,
                   timings: dict, outputs: list, error: str | None = None) -> None:
    lines = [
        f"tool_version = {__version__}",
        f"subcommand = {subcommand}",
    ]
    for key in sorted(resolved):
        value = resolved[key]
        if isinstance(value, tuple):
            value = ",".join(_fmt(v) for v in value)
        lines.append(f"{key} = {_fmt(value)}")
    for phase in sorted(timings):
        lines.append(f"timing.{phase} = {timings[phase]:.6f}")
    for name in outputs:
        lines.append(f"sha256.{name} = {_sha256(out_dir / name)}")
    if error is not None:
        lines.append(f"error = {error}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _spde_config(cfg: dict) -> spde.SpdeRunConfig:
    return spde.SpdeRunConfig(
        h=cfg["h"], num_samples=cfg["samples"], ratio=cfg["tau"],
        epsilon=cfg["epsilon"], distribution=cfg["distribution"],
        master_seed=cfg["seed"], method=cfg["method"],
        neumann_order=cfg["neumann_order"], compute_reference=cfg["reference"],
        sample_conditions=cfg["sample_conditions"], force_neumann=cfg["force_neumann"],
        out_dir=cfg["out_dir"],
    )


def cmd_spde(out_dir: Path, cfg: dict) -> tuple[list, dict]:
    outputs = []
    timings: dict[str, float] = {}
    if cfg["tau_scan"]:
        t0 = time.perf_counter()
        result = spde.tau_scan(_spde_config(cfg), cfg["tau_scan"])
        timings["scan"] = time.perf_counter() - t0
        write_csv(out_dir / "errors_vs_tau.csv",
                  ["tau", "rank", "err_l2", "rmsre"], result.rows)
        outputs.append("errors_vs_tau.csv")
        write_csv(out_dir / "energy.csv", ["rank", "energy"], result.energy_curve)
        outputs.append("energy.csv")
        return outputs, timings

    report = spde.run_spde(_spde_config(cfg))
    timings.update(report.timings)
    write_csv(
        out_dir / "report.csv",
        ["nodes", "samples", "rank", "tau", "epsilon", "method",
         "err_l2", "rmsre", "k_star", "tau_star", "cond_base"],
        [[
            report.qoi.shape[0], cfg["samples"],
            -1 if report.rank is None else report.rank,
            cfg["tau"], cfg["epsilon"], cfg["method"],
            float("nan") if report.err_l2 is None else report.err_l2,
            float("nan") if report.rmsre is None else report.rmsre,
            report.k_star, report.tau_star, report.cond_base,
        ]],
    )
    outputs.append("report.csv")
    perturbed.solution_to_csv(report.solution, out_dir / "qoi.csv",
                              include_samples=cfg["export_samples"])
    outputs.append("qoi.csv")
    write_csv(out_dir / "energy.csv", ["rank", "energy"], report.energy_curve)
    outputs.append("energy.csv")
    if cfg["sample_conditions"]:
        write_csv(out_dir / "sample_conditions.csv", ["sample", "cond"],
                  list(enumerate(report.sample_conditions)))
        outputs.append("sample_conditions.csv")
    return outputs, timings


def _socp_config(cfg: dict) -> socp.SocpRunConfig:
    return socp.SocpRunConfig(
        h=cfg["h"], num_samples=cfg["samples"], ratio=cfg["tau"],
        epsilon=cfg["epsilon"], distribution=cfg["distribution"],
        master_seed=cfg["seed"], beta=cfg["beta"], desired=cfg["desired"],
        desired_amplitude=cfg["desired_amplitude"], desired_mode=cfg["desired_mode"],
        control_init=cfg["control_init"],
    )


def _optimizer_spec(cfg: dict, method: str) -> socp.OptimizerSpec:
    return socp.OptimizerSpec(
        method=method, grad_tol=cfg["grad_tol"], max_iters=cfg["max_iters"],
        wolfe_c1=cfg["wolfe_c1"], wolfe_c2=cfg["wolfe_c2"],
        ls_max_trials=cfg["ls_max_trials"], sgd_batch=cfg["sgd_batch"],
        sgd_decay=cfg["sgd_decay"], sgd_check_every=cfg["sgd_check_every"],
        tr_radius0=cfg["tr_radius0"], tr_radius_max=cfg["tr_radius_max"],
        seed=cfg["seed"],
    )


def cmd_socp(out_dir: Path, cfg: dict) -> tuple[list, dict]:
    outputs = []
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    _, _, _, problem = socp.build_control_problem(_socp_config(cfg))
    timings["build"] = time.perf_counter() - t0
    control0 = np.full(problem.dim, cfg["control_init"])

    methods = list(socp.METHODS) if cfg["compare_methods"] else [cfg["method"]]
    results = {}
    for method in methods:
        t0 = time.perf_counter()
        results[method] = socp.optimize(problem, _optimizer_spec(cfg, method), control0)
        timings[f"optimize.{method}"] = time.perf_counter() - t0

    if cfg["compare_methods"]:
        rows = []
        for method in methods:
            res = results[method]
            err = fem.mass_norm(problem.mass, res.state_mean - problem.desired_nodal)
            rows.append([
                method, res.iterations, res.converged, res.objective_initial,
                res.objective_final, res.objective_final / res.objective_initial,
                err, res.grad_norm_final,
            ])
        write_csv(out_dir / "methods.csv",
                  ["method", "iterations", "converged", "objective_initial",
                   "objective_final", "ratio", "error", "grad_norm_final"], rows)
        outputs.append("methods.csv")
        # wall-clock comparison lives outside the deterministic CSV set
        with open(out_dir / "methods_timing.txt", "w", newline="\n") as fh:
            for method in methods:
                fh.write(f"{method} = {timings[f'optimize.{method}']:.6f}\n")

    primary = results[cfg["method"]]
    write_csv(out_dir / "socp_history.csv",
              ["iteration", "objective", "grad_norm", "step"],
              [[i + 1, *row] for i, row in enumerate(primary.history)])
    outputs.append("socp_history.csv")
    write_csv(out_dir / "control.csv", ["node", "value"],
              list(enumerate(primary.control)))
    outputs.append("control.csv")
    write_csv(out_dir / "state_mean.csv", ["node", "value"],
              list(enumerate(primary.state_mean)))
    outputs.append("state_mean.csv")
    return outputs, timings


def _load_ensemble(cfg: dict):
    """Ensemble from MatrixMarket files when ``input`` is set, else from the FEM pipeline."""
    if cfg["input"]:
        paths = sorted(globmod.glob(cfg["input"]))
        if not paths:
            raise ConfigRangeError(f"input pattern {cfg['input']!r} matches no files")
        return [numerics.load_matrix_market(p) for p in paths], None
    run_cfg = spde.SpdeRunConfig(
        h=cfg["h"], num_samples=cfg["samples"], ratio=cfg["tau"],
        epsilon=cfg["epsilon"], distribution=cfg["distribution"],
        master_seed=cfg["seed"], compute_reference=False,
    )
    _, system = spde.build_spde_system(run_cfg)
    return system.perturbations, system.base


def cmd_compress(out_dir: Path, cfg: dict) -> tuple[list, dict]:
    outputs = []
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    ensemble, _ = _load_ensemble(cfg)
    timings["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    factors = lowrank.compress(ensemble, cfg["tau"])
    err = lowrank.rmsre(ensemble, factors)
    timings["compress"] = time.perf_counter() - t0

    lowrank.save_factors(out_dir / "factors.bin", factors)
    outputs.append("factors.bin")
    write_csv(out_dir / "factors.csv",
              ["dim", "rank", "samples", "tau", "rmsre", "compression_ratio",
               "stored_scalars"],
              [[factors.dim, factors.rank, factors.num_samples, cfg["tau"], err,
                lowrank.compression_ratio(factors.dim, factors.rank, factors.num_samples),
                factors.stored_scalars]])
    outputs.append("factors.csv")
    if cfg["export_mm"]:
        written = lowrank.factors_to_matrix_market(out_dir / "factors_mm", factors)
        for p in written:
            outputs.append(str(Path(p).relative_to(out_dir)))
    return outputs, timings


def cmd_diagnose(out_dir: Path, cfg: dict) -> tuple[list, dict]:
    outputs = []
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    ensemble, base = _load_ensemble(cfg)
    curve = lowrank.energy_ratio(ensemble)
    k_star, tau_star = spde.critical_tau(ensemble)
    gram = lowrank.ensemble_gram(ensemble)
    eigenvalues = numerics.sym_eig_topk(gram, min(20, gram.shape[0])).values
    timings["diagnose"] = time.perf_counter() - t0

    write_csv(out_dir / "energy.csv", ["rank", "energy"], curve)
    outputs.append("energy.csv")
    write_csv(out_dir / "eigenvalues.csv", ["index", "eigenvalue"],
              list(enumerate(eigenvalues, start=1)))
    outputs.append("eigenvalues.csv")
    cond_base = float("nan") if base is None else numerics.condition_estimate(base)
    write_csv(out_dir / "diagnose.csv",
              ["dim", "samples", "k_star", "tau_star", "cond_base"],
              [[ensemble[0].shape[0], len(ensemble), k_star, tau_star, cond_base]])
    outputs.append("diagnose.csv")
    if cfg["sample_conditions"]:
        conds = [(m, numerics.condition_estimate(a)) for m, a in enumerate(ensemble)]
        write_csv(out_dir / "sample_conditions.csv", ["sample", "cond"], conds)
        outputs.append("sample_conditions.csv")
    return outputs, timings


COMMANDS = {
    "spde": cmd_spde,
    "socp": cmd_socp,
    "compress": cmd_compress,
    "diagnose": cmd_diagnose,
}


# ---------------------------------------------------------------------------
# argument parsing and entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common_flags(parser):
    parser.add_argument("--config", help="flat key=value configuration file")
    parser.add_argument("--seed", help="master seed")
    parser.add_argument("--threads", help="worker count forwarded to modules")
    parser.add_argument("--out-dir", dest="out_dir", help="output directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lram", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p_spde = sub.add_parser("spde", help="estimate the mean field of the random-diffusion problem")
    _add_common_flags(p_spde)
    for flag, key in [("--h", "h"), ("--samples", "samples"), ("--tau", "tau"),
                      ("--epsilon", "epsilon"), ("--distribution", "distribution"),
                      ("--method", "method"), ("--neumann-order", "neumann_order"),
                      ("--tau-scan", "tau_scan")]:
        p_spde.add_argument(flag, dest=key)
    p_spde.add_argument("--no-reference", dest="reference", action="store_const", const="false")
    p_spde.add_argument("--export-samples", dest="export_samples",
                        action="store_const", const="true")
    p_spde.add_argument("--sample-conditions", dest="sample_conditions",
                        action="store_const", const="true")
    p_spde.add_argument("--force-neumann", dest="force_neumann",
                        action="store_const", const="true")

    p_socp = sub.add_parser("socp", help="solve the tracking control problem")
    _add_common_flags(p_socp)
    for flag, key in [("--h", "h"), ("--samples", "samples"), ("--tau", "tau"),
                      ("--epsilon", "epsilon"), ("--distribution", "distribution"),
                      ("--method", "method"), ("--beta", "beta"),
                      ("--grad-tol", "grad_tol"), ("--max-iters", "max_iters"),
                      ("--desired", "desired"),
                      ("--desired-amplitude", "desired_amplitude"),
                      ("--desired-mode", "desired_mode"),
                      ("--control-init", "control_init")]:
        p_socp.add_argument(flag, dest=key)
    p_socp.add_argument("--compare-methods", dest="compare_methods",
                        action="store_const", const="true")

    p_compress = sub.add_parser("compress", help="factorize an ensemble into shared-basis form")
    _add_common_flags(p_compress)
    for flag, key in [("--input", "input"), ("--tau", "tau"), ("--h", "h"),
                      ("--samples", "samples"), ("--epsilon", "epsilon"),
                      ("--distribution", "distribution")]:
        p_compress.add_argument(flag, dest=key)
    p_compress.add_argument("--export-mm", dest="export_mm",
                            action="store_const", const="true")

    p_diag = sub.add_parser("diagnose", help="spectral diagnostics of an ensemble")
    _add_common_flags(p_diag)
    for flag, key in [("--input", "input"), ("--h", "h"), ("--samples", "samples"),
                      ("--epsilon", "epsilon"), ("--distribution", "distribution"),
                      ("--tau", "tau")]:
        p_diag.add_argument(flag, dest=key)
    p_diag.add_argument("--sample-conditions", dest="sample_conditions",
                        action="store_const", const="true")
    return parser


def _collect_overrides(args, schema) -> dict:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigParseError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    for key in schema:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    return overrides


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    schema = SCHEMAS[args.subcommand]()
    try:
        overrides = _collect_overrides(args, schema)
        cfg = parse_config(schema, path=args.config, overrides=overrides)
    except ConfigError as exc:
        print(f"lram: configuration error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"lram: cannot read config: {exc}", file=sys.stderr)
        return 1

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        outputs, timings = COMMANDS[args.subcommand](out_dir, cfg)
    except ConfigError as exc:
        print(f"lram: configuration error: {exc}", file=sys.stderr)
        return 1
    except LramError as exc:
        write_manifest(out_dir, args.subcommand, cfg, {}, [],
                       error=f"{type(exc).__name__}: {exc}")
        print(f"lram: numerical failure: {exc}", file=sys.stderr)
        return 2
    write_manifest(out_dir, args.subcommand, cfg, timings, outputs)
    return 0


def console_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_entry()
