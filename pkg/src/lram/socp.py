"""Discretize-then-optimize solver for the tracking control problem.

The state equation is eliminated through per-sample solution operators built
from the compressed ensemble, leaving an unconstrained quadratic in the
control:

    J(f) = (1/M) sum_m 1/2 (S_m f - target)' Phi (S_m f - target)
           + beta/2 f' Phi f

with S_m f = (I - B Y_m C_m) base^-1 Phi f, where B = base^-1 basis and
Y_m = (I_k + C_m B)^-1 acts through a cached k-by-k factorization.  Gradient
and Hessian are exact; the Hessian is constant in f and is cached after the
first assembly.  Five interchangeable minimizers are provided: steepest
descent, single-sample stochastic gradient, Newton, BFGS, and a dogleg trust
region, the first four with a weak-Wolfe line search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import fem, lowrank, numerics, perturbed, spde
from .errors import (
    ConfigRangeError,
    DimensionMismatchError,
    HessianTooLargeError,
    LineSearchError,
    SingularCapacitanceError,
)

METHODS = ("sdm", "sgd", "newton", "bfgs", "trm")
DESIRED_STATES = ("sin-pi", "sin-2pi", "sin-2pi-sq")
DESIRED_MODES = ("interpolant", "projection")

#: Dense Hessian assembly is refused above this dimension.
HESSIAN_MAX_DIM = 5000


def desired_state_function(name: str, amplitude: float = 1.0):
    """Named desired-state presets evaluated as callables of (x, y)."""
    if name == "sin-pi":
        return lambda x, y: amplitude * np.sin(np.pi * x) * np.sin(np.pi * y)
    if name == "sin-2pi":
        return lambda x, y: amplitude * np.sin(2.0 * np.pi * x) * np.sin(2.0 * np.pi * y)
    if name == "sin-2pi-sq":
        return lambda x, y: amplitude * np.sin(2.0 * np.pi * x) ** 2
    raise ConfigRangeError(f"desired state must be one of {DESIRED_STATES}, got {name!r}")


class SampleStateOperator:
    """Action of one sample's control-to-state map and of its transpose.

    Applications are sequenced solves and small products; the N-by-N operator
    is only densified on request.  Read-only after construction.
    """

    def __init__(self, core, cap_lu, coeffs):
        self._core = core
        self._cap_lu = cap_lu
        self._coeffs = coeffs

    @property
    def dim(self) -> int:
        return self._coeffs.shape[1]

    def apply(self, control: np.ndarray) -> np.ndarray:
        core = self._core
        state = core.fact.solve(core.mass @ control)
        reduced = sla.lu_solve(self._cap_lu, self._coeffs @ state, check_finite=False)
        return state - core.basis_solved @ reduced

    def apply_t(self, vec: np.ndarray) -> np.ndarray:
        core = self._core
        reduced = sla.lu_solve(self._cap_lu, core.basis_solved.T @ vec, trans=1,
                               check_finite=False)
        adjusted = vec - self._coeffs.T @ reduced
        return core.mass @ core.fact.solve(adjusted)

    def to_dense(self) -> np.ndarray:
        core = self._core
        response = core.mean_response()
        reduced = sla.lu_solve(self._cap_lu, self._coeffs @ response, check_finite=False)
        return response - core.basis_solved @ reduced


class DenseStateOperator:
    """State operator given as an explicit matrix; for small or constructed problems."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def apply(self, control: np.ndarray) -> np.ndarray:
        return self.matrix @ control

    def apply_t(self, vec: np.ndarray) -> np.ndarray:
        return self.matrix.T @ vec

    def to_dense(self) -> np.ndarray:
        return self.matrix.copy()


class _SolverCore:
    """Pieces shared by every sample operator of one problem."""

    def __init__(self, fact, basis_solved, mass):
        self.fact = fact
        self.basis_solved = basis_solved
        self.mass = mass
        self._mean_response = None

    def mean_response(self) -> np.ndarray:
        # dense base^-1 Phi, built on first use and shared by all samples
        if self._mean_response is None:
            self._mean_response = self.fact.solve(numerics.to_dense(self.mass))
        return self._mean_response


@dataclass(eq=False)
class ReducedControlProblem:
    """Reduced objective data: mass matrix, sample operators, targets, penalty."""

    mass: object
    operators: list
    desired_nodal: np.ndarray
    desired_proj: np.ndarray
    beta: float
    rank: int
    desired_mode: str = "interpolant"
    _hessian_cache: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.beta <= 0.0:
            raise ConfigRangeError(f"penalty beta must be > 0, got {self.beta}")
        if self.desired_mode not in DESIRED_MODES:
            raise ConfigRangeError(
                f"desired_mode must be one of {DESIRED_MODES}, got {self.desired_mode!r}"
            )

    @property
    def dim(self) -> int:
        return self.desired_nodal.shape[0]

    @property
    def num_samples(self) -> int:
        return len(self.operators)

    @property
    def target(self) -> np.ndarray:
        if self.desired_mode == "interpolant":
            return self.desired_nodal
        return self.desired_proj


def build_reduced_problem(assembled: fem.AssembledSystem, factors: lowrank.LowRankFactors,
                          desired_state, beta: float,
                          desired_mode: str = "interpolant") -> ReducedControlProblem:
    """Assemble the reduced problem from one FEM system and its factors.

    ``desired_state`` is a callable of (x, y).  Its nodal interpolant enters
    the state mismatch by default; the mass-weighted projection of that
    interpolant is kept alongside for the gradient pairing and for the
    alternative ``projection`` mismatch convention.
    """
    if factors.basis.shape[0] != assembled.base.shape[0]:
        raise DimensionMismatchError("factors do not match the assembled system")
    fact = numerics.factorize_spd(assembled.base)
    basis_solved = fact.solve(factors.basis)
    core = _SolverCore(fact, basis_solved, assembled.mass)

    eye_k = np.eye(factors.rank)
    operators = []
    for m, coeffs in enumerate(factors.coeffs):
        update = eye_k + coeffs @ basis_solved
        try:
            cap_lu = sla.lu_factor(update, check_finite=False)
        except sla.LinAlgError as exc:
            raise SingularCapacitanceError(m) from exc
        if not np.all(np.isfinite(cap_lu[0])) or np.any(np.diag(cap_lu[0]) == 0.0):
            raise SingularCapacitanceError(m, cond=float(np.linalg.cond(update)))
        operators.append(SampleStateOperator(core, cap_lu, coeffs))

    coords = assembled.node_coords
    desired_nodal = np.array([float(desired_state(x, y)) for x, y in coords])
    desired_proj = assembled.mass @ desired_nodal
    return ReducedControlProblem(
        mass=assembled.mass,
        operators=operators,
        desired_nodal=desired_nodal,
        desired_proj=desired_proj,
        beta=float(beta),
        rank=factors.rank,
        desired_mode=desired_mode,
    )


def objective(problem: ReducedControlProblem, control: np.ndarray) -> float:
    """Mean tracking misfit plus the mass-weighted control penalty."""
    control = np.asarray(control, dtype=float)
    if control.shape[0] != problem.dim:
        raise DimensionMismatchError("control length does not match the problem")
    target = problem.target
    total = 0.0
    for op in problem.operators:
        diff = op.apply(control) - target
        total += 0.5 * float(diff @ (problem.mass @ diff))
    total /= problem.num_samples
    total += 0.5 * problem.beta * float(control @ (problem.mass @ control))
    return total


def gradient(problem: ReducedControlProblem, control: np.ndarray) -> np.ndarray:
    """Exact gradient via the transposed operator sequence."""
    control = np.asarray(control, dtype=float)
    if control.shape[0] != problem.dim:
        raise DimensionMismatchError("control length does not match the problem")
    target = problem.target
    grad = np.zeros(problem.dim)
    for op in problem.operators:
        diff = op.apply(control) - target
        grad += op.apply_t(problem.mass @ diff)
    grad /= problem.num_samples
    grad += problem.beta * (problem.mass @ control)
    return grad


def sample_gradient(problem: ReducedControlProblem, control: np.ndarray,
                    indices) -> np.ndarray:
    """Gradient restricted to a batch of sample indices (full penalty term)."""
    control = np.asarray(control, dtype=float)
    target = problem.target
    grad = np.zeros(problem.dim)
    for m in indices:
        op = problem.operators[m]
        diff = op.apply(control) - target
        grad += op.apply_t(problem.mass @ diff)
    grad /= len(indices)
    grad += problem.beta * (problem.mass @ control)
    return grad


def sample_objective(problem: ReducedControlProblem, control: np.ndarray,
                     indices) -> float:
    control = np.asarray(control, dtype=float)
    target = problem.target
    total = 0.0
    for m in indices:
        op = problem.operators[m]
        diff = op.apply(control) - target
        total += 0.5 * float(diff @ (problem.mass @ diff))
    total /= len(indices)
    total += 0.5 * problem.beta * float(control @ (problem.mass @ control))
    return total


def hessian(problem: ReducedControlProblem) -> np.ndarray:
    """Dense Hessian; constant in the control, assembled once and cached.

    Repeated calls return copies of the same cached array, so the result is
    bitwise identical regardless of the control context.
    """
    if problem.dim > HESSIAN_MAX_DIM:
        raise HessianTooLargeError(
            f"dim {problem.dim} exceeds {HESSIAN_MAX_DIM}; use operator products instead"
        )
    if problem._hessian_cache is None:
        mass_dense = numerics.to_dense(problem.mass)
        acc = np.zeros((problem.dim, problem.dim))
        for op in problem.operators:
            dense_op = op.to_dense()
            acc += dense_op.T @ (mass_dense @ dense_op)
        acc /= problem.num_samples
        acc += problem.beta * mass_dense
        problem._hessian_cache = 0.5 * (acc + acc.T)
    return problem._hessian_cache.copy()


def state_mean(problem: ReducedControlProblem, control: np.ndarray) -> np.ndarray:
    states = [op.apply(control) for op in problem.operators]
    return np.mean(np.stack(states, axis=0), axis=0)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerSpec:
    """Method choice and stopping/step-control parameters."""

    method: str = "newton"
    grad_tol: float = 1e-3
    max_iters: int = 5000
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    ls_max_trials: int = 50
    sgd_batch: int = 1
    sgd_decay: float = 20.0
    sgd_check_every: int = 10
    tr_radius0: float = 1.0
    tr_radius_max: float = 1e6
    tr_expand: float = 2.0
    tr_shrink: float = 0.25
    tr_accept: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigRangeError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 < self.wolfe_c1 < self.wolfe_c2 < 1.0:
            raise ConfigRangeError("need 0 < c1 < c2 < 1 for the Wolfe conditions")
        if self.grad_tol <= 0.0:
            raise ConfigRangeError("grad_tol must be > 0")
        if self.max_iters < 1:
            raise ConfigRangeError("max_iters must be >= 1")
        if self.sgd_batch < 1 or self.sgd_check_every < 1:
            raise ConfigRangeError("sgd_batch and sgd_check_every must be >= 1")


@dataclass(frozen=True, eq=False)
class SocpResult:
    """Optimizer outcome with a full per-iteration trace."""

    control: np.ndarray
    state_mean: np.ndarray
    objective_initial: float
    objective_final: float
    grad_norm_final: float
    iterations: int
    history: list[tuple[float, float, float]]  # (objective, grad norm, step size)
    converged: bool
    status: str
    method: str


def wolfe_line_search(value_and_grad, x, direction, fx, gx, c1=1e-4, c2=0.9,
                      max_trials=50):
    """Weak-Wolfe step by expansion and bisection.

    Returns (step, value, gradient) at the accepted point or raises
    ``LineSearchError`` once the trial budget is spent.
    """
    slope = float(gx @ direction)
    if slope >= 0.0:
        raise LineSearchError("search direction is not a descent direction")
    lo, hi = 0.0, math.inf
    t = 1.0
    for _ in range(max_trials):
        fx_t, gx_t = value_and_grad(x + t * direction)
        if fx_t > fx + c1 * t * slope:
            hi = t
        elif float(gx_t @ direction) < c2 * slope:
            lo = t
        else:
            return t, fx_t, gx_t
        t = 2.0 * lo if hi == math.inf else 0.5 * (lo + hi)
    raise LineSearchError(f"no acceptable step within {max_trials} trials")


def _result(problem, method, control, j0, history, iterations, converged, status):
    grad_norm = float(np.linalg.norm(gradient(problem, control)))
    return SocpResult(
        control=control,
        state_mean=state_mean(problem, control),
        objective_initial=j0,
        objective_final=objective(problem, control),
        grad_norm_final=grad_norm,
        iterations=iterations,
        history=history,
        converged=converged,
        status=status,
        method=method,
    )


def _line_search_descent(problem, spec, control0, direction_state):
    """Shared loop for the Wolfe-based methods.

    ``direction_state`` supplies the descent direction and may carry state
    between iterations (BFGS memory, factored Hessian).
    """
    def value_and_grad(x):
        return objective(problem, x), gradient(problem, x)

    x = np.array(control0, dtype=float)
    fx, gx = value_and_grad(x)
    j0 = fx
    if not np.isfinite(fx):
        raise ConfigRangeError("objective is not finite at the initial control")
    history: list[tuple[float, float, float]] = []
    best = (fx, x.copy())
    for it in range(spec.max_iters):
        gnorm = float(np.linalg.norm(gx))
        if gnorm <= spec.grad_tol:
            return _result(problem, spec.method, x, j0, history, it, True, "converged")
        direction = direction_state.direction(gx)
        step, fx_new, gx_new = wolfe_line_search(
            value_and_grad, x, direction, fx, gx,
            c1=spec.wolfe_c1, c2=spec.wolfe_c2, max_trials=spec.ls_max_trials,
        )
        x_new = x + step * direction
        direction_state.update(x_new - x, gx_new - gx)
        x, fx, gx = x_new, fx_new, gx_new
        history.append((fx, float(np.linalg.norm(gx)), step))
        if fx < best[0]:
            best = (fx, x.copy())
    if float(np.linalg.norm(gx)) <= spec.grad_tol:
        return _result(problem, spec.method, x, j0, history, spec.max_iters, True,
                       "converged")
    return _result(problem, spec.method, best[1], j0, history, spec.max_iters, False,
                   "max-iterations")


class _SteepestDirection:
    def direction(self, grad):
        return -grad

    def update(self, step_vec, grad_diff):
        pass


class _NewtonDirection:
    def __init__(self, problem):
        self._factor = sla.cho_factor(hessian(problem), lower=True)

    def direction(self, grad):
        return -sla.cho_solve(self._factor, grad)

    def update(self, step_vec, grad_diff):
        pass


class _BfgsDirection:
    def __init__(self, dim):
        self._inv = np.eye(dim)
        self._first = True

    def direction(self, grad):
        return -self._inv @ grad

    def update(self, s, y):
        sy = float(s @ y)
        if sy <= 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            return
        if self._first:
            self._inv *= sy / float(y @ y)
            self._first = False
        rho = 1.0 / sy
        v = self._inv @ y
        self._inv -= rho * (np.outer(s, v) + np.outer(v, s))
        self._inv += rho * rho * (float(y @ v) + sy) * np.outer(s, s)


def _dogleg_step(grad, hess, newton_step, radius):
    if np.linalg.norm(newton_step) <= radius:
        return newton_step
    g_norm2 = float(grad @ grad)
    curvature = float(grad @ (hess @ grad))
    cauchy = -(g_norm2 / curvature) * grad
    c_norm = np.linalg.norm(cauchy)
    if c_norm >= radius:
        return -(radius / math.sqrt(g_norm2)) * grad
    d = newton_step - cauchy
    a = float(d @ d)
    b = 2.0 * float(cauchy @ d)
    c = float(cauchy @ cauchy) - radius * radius
    t = (-b + math.sqrt(max(b * b - 4.0 * a * c, 0.0))) / (2.0 * a)
    return cauchy + t * d


def _optimize_trm(problem, spec, control0):
    hess = hessian(problem)
    factor = sla.cho_factor(hess, lower=True)
    x = np.array(control0, dtype=float)
    fx = objective(problem, x)
    gx = gradient(problem, x)
    j0 = fx
    radius = spec.tr_radius0
    history: list[tuple[float, float, float]] = []
    best = (fx, x.copy())
    for it in range(spec.max_iters):
        gnorm = float(np.linalg.norm(gx))
        if gnorm <= spec.grad_tol:
            return _result(problem, "trm", x, j0, history, it, True, "converged")
        newton_step = -sla.cho_solve(factor, gx)
        step_vec = _dogleg_step(gx, hess, newton_step, radius)
        predicted = -(float(gx @ step_vec) + 0.5 * float(step_vec @ (hess @ step_vec)))
        fx_trial = objective(problem, x + step_vec)
        ratio = (fx - fx_trial) / max(predicted, 1e-300)
        step_norm = float(np.linalg.norm(step_vec))
        if ratio < 0.25:
            radius *= spec.tr_shrink
        elif ratio > 0.75 and step_norm >= radius * (1.0 - 1e-12):
            radius = min(spec.tr_expand * radius, spec.tr_radius_max)
        if ratio > spec.tr_accept:
            x = x + step_vec
            fx = fx_trial
            gx = gradient(problem, x)
            history.append((fx, float(np.linalg.norm(gx)), step_norm))
        else:
            history.append((fx, gnorm, 0.0))
        if fx < best[0]:
            best = (fx, x.copy())
    if float(np.linalg.norm(gx)) <= spec.grad_tol:
        return _result(problem, "trm", x, j0, history, spec.max_iters, True, "converged")
    return _result(problem, "trm", best[1], j0, history, spec.max_iters, False,
                   "max-iterations")


def _sgd_initial_step(problem, spec, x, indices):
    """Largest power-of-two step whose batch move satisfies the Armijo test.

    Doubling from 1.0 matters here: mass-weighted objectives have tiny
    curvature, so useful steps can be orders of magnitude above 1.
    """
    gb = sample_gradient(problem, x, indices)
    jb = sample_objective(problem, x, indices)
    slope = -float(gb @ gb)

    def armijo(t):
        return sample_objective(problem, x - t * gb, indices) <= jb + spec.wolfe_c1 * t * slope

    t = 1.0
    if armijo(t):
        for _ in range(spec.ls_max_trials):
            if not armijo(2.0 * t):
                break
            t *= 2.0
        return t
    for _ in range(spec.ls_max_trials):
        t *= 0.5
        if armijo(t):
            return t
    raise LineSearchError("no Armijo step for the first stochastic batch")


def _optimize_sgd(problem, spec, control0):
    rng = np.random.default_rng(spec.seed)
    x = np.array(control0, dtype=float)
    j0 = objective(problem, x)
    history: list[tuple[float, float, float]] = []
    m = problem.num_samples

    first_batch = rng.integers(0, m, size=spec.sgd_batch)
    step0 = _sgd_initial_step(problem, spec, x, first_batch)
    best = (j0, x.copy())
    iterations = 0
    for k in range(spec.max_iters):
        step = step0 / (1.0 + k / spec.sgd_decay)
        batch = rng.integers(0, m, size=spec.sgd_batch)
        x = x - step * sample_gradient(problem, x, batch)
        iterations = k + 1
        fx = objective(problem, x)
        gnorm = float(np.linalg.norm(gradient(problem, x)))
        history.append((fx, gnorm, step))
        if fx < best[0]:
            best = (fx, x.copy())
        # termination consults the full gradient only at the check cadence
        if iterations % spec.sgd_check_every == 0 and gnorm <= spec.grad_tol:
            return _result(problem, "sgd", x, j0, history, iterations, True, "converged")
    gnorm = float(np.linalg.norm(gradient(problem, x)))
    if gnorm <= spec.grad_tol:
        return _result(problem, "sgd", x, j0, history, iterations, True, "converged")
    return _result(problem, "sgd", best[1], j0, history, iterations, False,
                   "max-iterations")


def optimize(problem: ReducedControlProblem, spec: OptimizerSpec,
             control0) -> SocpResult:
    """Minimize the reduced objective with the method selected in ``spec``."""
    control0 = np.asarray(control0, dtype=float)
    if control0.shape[0] != problem.dim:
        raise DimensionMismatchError("initial control length does not match the problem")
    if spec.method == "sdm":
        return _line_search_descent(problem, spec, control0, _SteepestDirection())
    if spec.method == "newton":
        return _line_search_descent(problem, spec, control0, _NewtonDirection(problem))
    if spec.method == "bfgs":
        return _line_search_descent(problem, spec, control0, _BfgsDirection(problem.dim))
    if spec.method == "trm":
        return _optimize_trm(problem, spec, control0)
    return _optimize_sgd(problem, spec, control0)


# ---------------------------------------------------------------------------
# end-to-end driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SocpRunConfig:
    """Inputs of one control-problem build (mesh, sampling, targets, penalty)."""

    h: float = 0.1
    num_samples: int = 50
    ratio: float = 0.88
    epsilon: float = 0.2
    distribution: str = "uniform"
    master_seed: int = 1234
    beta: float = 1e-4
    desired: str = "sin-pi"
    desired_amplitude: float = 10.0
    desired_mode: str = "interpolant"
    control_init: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigRangeError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.beta <= 0.0:
            raise ConfigRangeError("beta must be > 0")
        if self.desired not in DESIRED_STATES:
            raise ConfigRangeError(
                f"desired must be one of {DESIRED_STATES}, got {self.desired!r}"
            )


def build_control_problem(cfg: SocpRunConfig):
    """Mesh, sample, assemble, compress, and build the reduced problem."""
    spde_cfg = spde.SpdeRunConfig(
        h=cfg.h, num_samples=cfg.num_samples, ratio=cfg.ratio, epsilon=cfg.epsilon,
        distribution=cfg.distribution, master_seed=cfg.master_seed,
        compute_reference=False,
    )
    mesh, system = spde.build_spde_system(spde_cfg)
    factors = lowrank.compress(system.perturbations, cfg.ratio)
    target = desired_state_function(cfg.desired, cfg.desired_amplitude)
    problem = build_reduced_problem(system, factors, target, cfg.beta,
                                    desired_mode=cfg.desired_mode)
    return mesh, system, factors, problem


def run_socp(cfg: SocpRunConfig, spec: OptimizerSpec) -> tuple[ReducedControlProblem, SocpResult]:
    """Build the problem and minimize it with one method."""
    _, _, _, problem = build_control_problem(cfg)
    control0 = np.full(problem.dim, cfg.control_init)
    return problem, optimize(problem, spec, control0)
