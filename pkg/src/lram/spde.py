"""End-to-end Monte-Carlo driver for the random-diffusion Poisson problem.

Samples per-element diffusion fields, assembles the perturbed stiffness
ensemble, compresses it, solves all samples through the chosen route, and
averages into the mean-field estimate.  When a reference is requested the
direct per-sample solve consumes the identical sampled fields, so the
reported gap isolates the compression error.  Also hosts the critical
reduction-ratio diagnostics and a Monte-Carlo convergence study.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import fem, lowrank, numerics, perturbed
from .errors import ConfigRangeError, ZeroEnsembleError

#: Energy level treated as "everything captured" when locating the critical rank.
CRITICAL_ENERGY_TOL = 1e-12

METHODS = ("smw", "neumann", "direct")


@dataclass(frozen=True)
class SpdeRunConfig:
    """Inputs of one mean-field estimation run (all defaults overridable)."""

    h: float = 0.1
    num_samples: int = 100
    ratio: float = 0.88
    epsilon: float = 0.2
    distribution: str = "normal"
    master_seed: int = 1234
    method: str = "smw"
    neumann_order: int = 4
    compute_reference: bool = True
    sample_conditions: bool = False
    force_neumann: bool = False
    out_dir: str | None = None

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigRangeError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.num_samples < 1:
            raise ConfigRangeError(f"num_samples must be >= 1, got {self.num_samples}")
        if self.method not in METHODS:
            raise ConfigRangeError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.neumann_order < 0:
            raise ConfigRangeError("neumann_order must be >= 0")


@dataclass(frozen=True, eq=False)
class SpdeReport:
    """Outputs and diagnostics of one run."""

    qoi: np.ndarray
    qoi_reference: np.ndarray | None
    err_l2: float | None
    rmsre: float | None
    energy_curve: list[tuple[int, float]]
    rank: int | None
    k_star: int
    tau_star: float
    cond_base: float
    sample_conditions: tuple[float, ...] | None
    solution: perturbed.EnsembleSolution
    timings: dict[str, float]


def build_spde_system(cfg: SpdeRunConfig):
    """Mesh, sample fields, and assemble; shared by the run and scan paths."""
    mesh = fem.structured_mesh(cfg.h)
    fields = fem.sample_fields(mesh, cfg.num_samples, cfg.epsilon,
                               cfg.distribution, cfg.master_seed)
    system = fem.assemble(mesh, fields, lambda x, y: 1.0)
    return mesh, system


def critical_tau(ensemble) -> tuple[int, float]:
    """Smallest rank whose energy ratio reaches 1, and the matching ratio.

    The returned rank is the numerical rank of the accumulated Gram matrix;
    compressing at or above it reconstructs the ensemble exactly.
    """
    curve = lowrank.energy_ratio(ensemble)
    n = len(curve)
    for k, e_k in curve:
        if e_k >= 1.0 - CRITICAL_ENERGY_TOL:
            return k, k / n
    return n, 1.0


def _solve(cfg: SpdeRunConfig, ensemble, factors):
    if cfg.method == "smw":
        return perturbed.solve_smw(ensemble, factors)
    if cfg.method == "neumann":
        return perturbed.solve_neumann(ensemble, factors, cfg.neumann_order,
                                       force=cfg.force_neumann)
    return perturbed.solve_direct(ensemble)


def run_spde(cfg: SpdeRunConfig) -> SpdeReport:
    """Execute the full pipeline and return the mean-field report.

    Two runs with identical configs produce bitwise-identical vectors: the
    sampling is keyed per (seed, sample) and every reduction uses a fixed
    order.
    """
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    mesh, system = build_spde_system(cfg)
    timings["assemble"] = time.perf_counter() - t0

    ensemble = perturbed.PerturbedEnsemble(
        base=system.base, perturbations=system.perturbations, rhs=system.load
    )

    t0 = time.perf_counter()
    factors = None
    rmsre_value = None
    if cfg.method != "direct":
        factors = lowrank.compress(system.perturbations, cfg.ratio)
        rmsre_value = lowrank.rmsre(system.perturbations, factors)
    timings["compress"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    solution = _solve(cfg, ensemble, factors)
    timings["solve"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    reference = None
    err = None
    if cfg.compute_reference:
        if cfg.method == "direct":
            reference = solution
        else:
            reference = perturbed.solve_direct(ensemble)
        err = float(np.linalg.norm(reference.qoi - solution.qoi))
    timings["reference"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        energy_curve = lowrank.energy_ratio(system.perturbations)
        k_star, tau_star = critical_tau(system.perturbations)
    except ZeroEnsembleError:
        energy_curve = []
        k_star, tau_star = 0, 0.0
    cond_base = numerics.condition_estimate(system.base)
    sample_conds = None
    if cfg.sample_conditions:
        sample_conds = tuple(
            numerics.condition_estimate(p) for p in system.perturbations
        )
    timings["diagnostics"] = time.perf_counter() - t0

    return SpdeReport(
        qoi=solution.qoi,
        qoi_reference=None if reference is None else reference.qoi,
        err_l2=err,
        rmsre=rmsre_value,
        energy_curve=energy_curve,
        rank=None if factors is None else factors.rank,
        k_star=k_star,
        tau_star=tau_star,
        cond_base=cond_base,
        sample_conditions=sample_conds,
        solution=solution,
        timings=timings,
    )


@dataclass(frozen=True, eq=False)
class ScanResult:
    """Error-versus-ratio scan sharing one sampled ensemble and one reference."""

    rows: list[tuple[float, int, float, float]]  # (ratio, rank, err_l2, rmsre)
    energy_curve: list[tuple[int, float]]
    k_star: int
    tau_star: float


def tau_scan(cfg: SpdeRunConfig, ratios) -> ScanResult:
    """Solve at several reduction ratios against one shared direct reference."""
    _, system = build_spde_system(cfg)
    ensemble = perturbed.PerturbedEnsemble(
        base=system.base, perturbations=system.perturbations, rhs=system.load
    )
    reference = perturbed.solve_direct(ensemble)
    energy_curve = lowrank.energy_ratio(system.perturbations)
    k_star, tau_star = critical_tau(system.perturbations)

    rows = []
    for ratio in ratios:
        factors = lowrank.compress(system.perturbations, ratio)
        run_cfg = replace(cfg, ratio=ratio)
        solution = _solve(run_cfg, ensemble, factors)
        err = float(np.linalg.norm(reference.qoi - solution.qoi))
        rows.append((float(ratio), factors.rank, err,
                     lowrank.rmsre(system.perturbations, factors)))
    return ScanResult(rows=rows, energy_curve=energy_curve,
                      k_star=k_star, tau_star=tau_star)


def rank_scan(cfg: SpdeRunConfig, ranks) -> ScanResult:
    """Like ``tau_scan`` but at explicit ranks (used around the critical rank)."""
    _, system = build_spde_system(cfg)
    ensemble = perturbed.PerturbedEnsemble(
        base=system.base, perturbations=system.perturbations, rhs=system.load
    )
    reference = perturbed.solve_direct(ensemble)
    energy_curve = lowrank.energy_ratio(system.perturbations)
    k_star, tau_star = critical_tau(system.perturbations)

    rows = []
    for rank in ranks:
        factors = lowrank.compress_rank(system.perturbations, int(rank))
        solution = _solve(replace(cfg, method="smw"), ensemble, factors)
        err = float(np.linalg.norm(reference.qoi - solution.qoi))
        rows.append((factors.ratio, factors.rank, err,
                     lowrank.rmsre(system.perturbations, factors)))
    return ScanResult(rows=rows, energy_curve=energy_curve,
                      k_star=k_star, tau_star=tau_star)


@dataclass(frozen=True, eq=False)
class McStudy:
    """Monte-Carlo error decay against a same-stream high-sample reference."""

    points: list[tuple[int, float]]   # (num_samples, mean error over repetitions)
    slope: float                      # fitted log-log slope
    errors: np.ndarray                # (repetitions, len(m_list)) raw errors


def mc_convergence_study(cfg: SpdeRunConfig, m_list, repetitions: int = 10,
                         reference_factor: int = 4) -> McStudy:
    """Errors of the sample mean at increasing sample counts.

    For each repetition, one stream of per-sample solutions is generated and
    the mean over the first M entries is compared (in the mass-weighted norm)
    with the mean over the full stream of ``reference_factor * max(m_list)``
    entries.  Requesting M equal to the reference count therefore gives an
    exact zero.  The slope is fitted on the repetition-averaged errors.
    """
    m_list = [int(m) for m in m_list]
    if sorted(m_list) != m_list:
        raise ConfigRangeError("m_list must be ascending")
    m_ref = reference_factor * max(m_list)

    mesh = fem.structured_mesh(cfg.h)
    errors = np.zeros((repetitions, len(m_list)))
    for rep in range(repetitions):
        seed = cfg.master_seed + 7919 * rep
        fields = fem.sample_fields(mesh, m_ref, cfg.epsilon, cfg.distribution, seed)
        system = fem.assemble(mesh, fields, lambda x, y: 1.0)
        ensemble = perturbed.PerturbedEnsemble(
            base=system.base, perturbations=system.perturbations, rhs=system.load
        )
        solution = perturbed.solve_direct(ensemble)
        stacked = np.stack(solution.samples, axis=0)
        reference = stacked.mean(axis=0)
        for j, m in enumerate(m_list):
            mean_m = stacked[:m].mean(axis=0)
            errors[rep, j] = fem.mass_norm(system.mass, mean_m - reference)

    mean_errors = errors.mean(axis=0)
    slope = float(np.polyfit(np.log(m_list), np.log(np.maximum(mean_errors, 1e-300)), 1)[0])
    points = [(m, float(e)) for m, e in zip(m_list, mean_errors)]
    return McStudy(points=points, slope=slope, errors=errors)
