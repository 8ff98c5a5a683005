import numpy as np
import pytest
import scipy.sparse as sp

from lram import fem, lowrank, numerics, socp, spde
from lram.errors import (
    ConfigRangeError,
    DimensionMismatchError,
    HessianTooLargeError,
    LineSearchError,
)

from oracles import rand_spd


def fem_problem(h=0.25, num_samples=4, epsilon=0.2, ratio=1.0, seed=3,
                desired="sin-pi", amplitude=10.0, beta=1e-4, mode="interpolant"):
    cfg = socp.SocpRunConfig(h=h, num_samples=num_samples, ratio=ratio,
                             epsilon=epsilon, master_seed=seed, beta=beta,
                             desired=desired, desired_amplitude=amplitude,
                             desired_mode=mode)
    _, system, factors, problem = socp.build_control_problem(cfg)
    return system, factors, problem


def synthetic_problem(rng, n=8, m=3, beta=0.5):
    """Constructed instance with explicit dense operators and SPD mass."""
    mass = sp.csr_array(rand_spd(rng, n, shift=1.0) / n)
    ops = [socp.DenseStateOperator(rng.standard_normal((n, n))) for _ in range(m)]
    target = rng.standard_normal(n)
    return socp.ReducedControlProblem(
        mass=mass, operators=ops, desired_nodal=target,
        desired_proj=mass @ target, beta=beta, rank=n,
    )


# ---------------------------------------------------------------------------
# state operators
# ---------------------------------------------------------------------------


def test_zero_perturbations_reduce_to_mean_response():
    system, factors, problem = fem_problem(epsilon=0.0)
    fact = numerics.factorize_spd(system.base)
    rng = np.random.default_rng(0)
    f = rng.standard_normal(problem.dim)
    expected = fact.solve(system.mass @ f)
    for op in problem.operators:
        assert np.allclose(op.apply(f), expected, atol=1e-12)


def test_operator_matches_dense_oracle():
    system, factors, problem = fem_problem(h=1 / 3, num_samples=3)
    n = system.base.shape[0]
    base_inv = np.linalg.inv(system.base.toarray())
    mass = system.mass.toarray()
    rng = np.random.default_rng(1)
    f = rng.standard_normal(n)
    g = rng.standard_normal(n)
    for m, op in enumerate(problem.operators):
        coeffs = factors.coeffs[m]
        update = np.eye(factors.rank) + coeffs @ base_inv @ factors.basis
        z = (np.eye(n) - base_inv @ factors.basis @ np.linalg.inv(update) @ coeffs) \
            @ base_inv @ mass
        assert np.allclose(op.apply(f), z @ f, atol=1e-9 * np.linalg.norm(z @ f))
        assert np.allclose(op.apply_t(g), z.T @ g, atol=1e-9 * np.linalg.norm(z.T @ g))
        assert np.allclose(op.to_dense(), z, atol=1e-10)


def test_operator_linearity():
    _, _, problem = fem_problem()
    rng = np.random.default_rng(2)
    f = rng.standard_normal(problem.dim)
    g = rng.standard_normal(problem.dim)
    for op in problem.operators:
        lhs = op.apply(2.5 * f + g)
        rhs = 2.5 * op.apply(f) + op.apply(g)
        assert np.allclose(lhs, rhs, atol=1e-12 * max(np.linalg.norm(rhs), 1.0))


# ---------------------------------------------------------------------------
# objective / gradient / hessian
# ---------------------------------------------------------------------------


def test_objective_zero_control_zero_target():
    _, _, problem = fem_problem(amplitude=0.0)
    assert socp.objective(problem, np.zeros(problem.dim)) == 0.0
    assert np.allclose(socp.gradient(problem, np.zeros(problem.dim)), 0.0, atol=1e-16)


def test_objective_penalty_term_alone():
    # target chosen equal to the produced state, so only the penalty survives
    rng = np.random.default_rng(3)
    n = 6
    mass = sp.csr_array(rand_spd(rng, n, shift=1.0) / n)
    z = rng.standard_normal((n, n))
    f = rng.standard_normal(n)
    target = z @ f
    problem = socp.ReducedControlProblem(
        mass=mass, operators=[socp.DenseStateOperator(z)], desired_nodal=target,
        desired_proj=mass @ target, beta=0.3, rank=n,
    )
    expected = 0.5 * 0.3 * float(f @ (mass @ f))
    assert socp.objective(problem, f) == pytest.approx(expected, rel=1e-12)


def test_objective_matches_summation_oracle():
    rng = np.random.default_rng(4)
    problem = synthetic_problem(rng)
    f = rng.standard_normal(problem.dim)
    mass = problem.mass.toarray()
    total = 0.0
    for op in problem.operators:
        diff = op.matrix @ f - problem.desired_nodal
        total += 0.5 * diff @ mass @ diff
    total /= len(problem.operators)
    total += 0.5 * problem.beta * f @ mass @ f
    assert socp.objective(problem, f) == pytest.approx(total, rel=1e-12)


def test_gradient_vanishes_at_dense_normal_equations_solution():
    rng = np.random.default_rng(5)
    problem = synthetic_problem(rng)
    mass = problem.mass.toarray()
    h = np.zeros((problem.dim, problem.dim))
    rhs = np.zeros(problem.dim)
    for op in problem.operators:
        h += op.matrix.T @ mass @ op.matrix
        rhs += op.matrix.T @ mass @ problem.desired_nodal
    h /= len(problem.operators)
    rhs /= len(problem.operators)
    h += problem.beta * mass
    f_star = np.linalg.solve(h, rhs)
    grad = socp.gradient(problem, f_star)
    assert np.linalg.norm(grad) <= 1e-10 * max(np.linalg.norm(rhs), 1.0)


@pytest.mark.parametrize("mode", ["interpolant", "projection"])
def test_gradient_matches_central_differences(mode):
    _, _, problem = fem_problem(mode=mode)
    rng = np.random.default_rng(6)
    f = rng.standard_normal(problem.dim)
    grad = socp.gradient(problem, f)
    step = 1e-6
    for _ in range(10):
        d = rng.standard_normal(problem.dim)
        d /= np.linalg.norm(d)
        fd = (socp.objective(problem, f + step * d)
              - socp.objective(problem, f - step * d)) / (2.0 * step)
        assert fd == pytest.approx(float(grad @ d), rel=1e-5)


def test_hessian_identity_instance():
    problem = socp.ReducedControlProblem(
        mass=sp.eye_array(4).tocsr(), operators=[socp.DenseStateOperator(np.eye(4))],
        desired_nodal=np.zeros(4), desired_proj=np.zeros(4), beta=1.0, rank=4,
    )
    assert np.allclose(socp.hessian(problem), 2.0 * np.eye(4), atol=1e-15)


def test_hessian_spd_and_quadratic_expansion():
    _, _, problem = fem_problem()
    h = socp.hessian(problem)
    np.linalg.cholesky(h)  # raises if not SPD
    rng = np.random.default_rng(7)
    f = rng.standard_normal(problem.dim)
    j0 = socp.objective(problem, np.zeros(problem.dim))
    g0 = socp.gradient(problem, np.zeros(problem.dim))
    expansion = j0 + g0 @ f + 0.5 * f @ (h @ f)
    actual = socp.objective(problem, f)
    assert actual == pytest.approx(expansion, abs=1e-10 * max(1.0, abs(actual)))


def test_hessian_constant_and_bitwise_identical():
    _, _, problem = fem_problem()
    h1 = socp.hessian(problem)
    socp.objective(problem, np.ones(problem.dim))  # unrelated evaluation in between
    h2 = socp.hessian(problem)
    assert np.array_equal(h1, h2)


def test_hessian_size_guard():
    problem = socp.ReducedControlProblem(
        mass=sp.eye_array(6000).tocsr(),
        operators=[socp.DenseStateOperator(np.eye(2))],
        desired_nodal=np.zeros(6000), desired_proj=np.zeros(6000),
        beta=1.0, rank=2,
    )
    with pytest.raises(HessianTooLargeError):
        socp.hessian(problem)


def test_dimension_checks():
    _, _, problem = fem_problem()
    with pytest.raises(DimensionMismatchError):
        socp.objective(problem, np.zeros(problem.dim + 1))
    with pytest.raises(DimensionMismatchError):
        socp.gradient(problem, np.zeros(3))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def test_newton_single_iteration_exact_quadratic():
    _, _, problem = fem_problem()
    spec = socp.OptimizerSpec(method="newton", grad_tol=1e-10)
    res = socp.optimize(problem, spec, np.zeros(problem.dim))
    assert res.converged
    assert res.iterations == 1
    assert res.grad_norm_final <= 1e-10


def test_all_methods_converge_and_newton_fewest():
    _, _, problem = fem_problem(h=0.25, num_samples=8, ratio=0.88)
    f0 = np.zeros(problem.dim)
    results = {}
    for method in ("sdm", "sgd", "newton", "bfgs", "trm"):
        res = socp.optimize(problem, socp.OptimizerSpec(method=method), f0)
        assert res.converged, method
        assert res.grad_norm_final <= 1e-3
        assert res.objective_final <= res.objective_initial
        results[method] = res
    newton_iters = results["newton"].iterations
    for other in ("sdm", "bfgs", "trm"):
        assert newton_iters < results[other].iterations


def test_methods_agree_at_matched_tolerance():
    # At grad tolerance 1e-3 the beta-dominated soft modes still admit a few
    # percent of control spread, so cross-method agreement is asserted at a
    # tolerance tight enough to pin the minimizer.
    _, _, problem = fem_problem(h=0.25, num_samples=8, ratio=0.88)
    f0 = np.zeros(problem.dim)
    newton = socp.optimize(problem, socp.OptimizerSpec(method="newton"), f0)
    scale = np.linalg.norm(newton.control)
    for method in ("sdm", "bfgs", "trm"):
        res = socp.optimize(
            problem, socp.OptimizerSpec(method=method, grad_tol=1e-6, max_iters=20_000), f0
        )
        assert np.linalg.norm(res.control - newton.control) <= 1e-2 * scale, method
    # stochastic iterates keep wandering in the soft modes, which barely move
    # the state; agreement for the stochastic method is therefore asserted on
    # the mean state it produces
    sgd = socp.optimize(
        problem, socp.OptimizerSpec(method="sgd", grad_tol=2e-4, max_iters=20_000), f0
    )
    state_scale = np.linalg.norm(newton.state_mean)
    assert np.linalg.norm(sgd.state_mean - newton.state_mean) <= 5e-2 * state_scale


def test_wolfe_methods_strictly_decrease():
    _, _, problem = fem_problem(h=0.25, num_samples=6)
    f0 = np.zeros(problem.dim)
    for method in ("sdm", "newton", "bfgs"):
        res = socp.optimize(problem, socp.OptimizerSpec(method=method), f0)
        values = [res.objective_initial] + [row[0] for row in res.history]
        assert all(a > b for a, b in zip(values, values[1:])), method


def test_newton_optimality_via_normal_equations():
    _, _, problem = fem_problem()
    res = socp.optimize(
        problem, socp.OptimizerSpec(method="newton", grad_tol=1e-10),
        np.zeros(problem.dim),
    )
    h = socp.hessian(problem)
    mass = problem.mass
    rhs = np.zeros(problem.dim)
    for op in problem.operators:
        rhs += op.apply_t(mass @ problem.target)
    rhs /= problem.num_samples
    assert np.linalg.norm(h @ res.control - rhs) <= 1e-6 * np.linalg.norm(rhs)


def test_ratio_bounded_and_stable_across_ratios():
    # the objective ratio stays small and does not deteriorate as the
    # reduction ratio grows toward exact reconstruction
    ratios = []
    for tau in (0.4, 0.6, 0.8, 1.0):
        _, _, problem = fem_problem(h=0.25, num_samples=8, ratio=tau)
        res = socp.optimize(problem, socp.OptimizerSpec(method="newton"),
                            np.zeros(problem.dim))
        ratios.append(res.objective_final / res.objective_initial)
    assert all(r <= 0.25 for r in ratios)
    for a, b in zip(ratios, ratios[1:]):
        assert b <= a * 1.05 + 1e-12


def test_line_search_rejects_ascent_direction():
    _, _, problem = fem_problem()
    f = np.zeros(problem.dim)
    g = socp.gradient(problem, f)

    def value_and_grad(x):
        return socp.objective(problem, x), socp.gradient(problem, x)

    with pytest.raises(LineSearchError):
        socp.wolfe_line_search(value_and_grad, f, +g,
                               socp.objective(problem, f), g)


def test_sgd_deterministic_given_seed():
    _, _, problem = fem_problem(h=0.25, num_samples=6)
    f0 = np.zeros(problem.dim)
    a = socp.optimize(problem, socp.OptimizerSpec(method="sgd", seed=5), f0)
    b = socp.optimize(problem, socp.OptimizerSpec(method="sgd", seed=5), f0)
    assert np.array_equal(a.control, b.control)


def test_max_iters_flagged_with_best_iterate():
    _, _, problem = fem_problem(h=0.25, num_samples=4)
    res = socp.optimize(
        problem,
        socp.OptimizerSpec(method="sdm", grad_tol=1e-12, max_iters=3),
        np.zeros(problem.dim),
    )
    assert not res.converged
    assert res.status == "max-iterations"
    assert res.iterations == 3
    assert res.objective_final <= res.objective_initial


def test_spec_validation():
    with pytest.raises(ConfigRangeError):
        socp.OptimizerSpec(method="adam")
    with pytest.raises(ConfigRangeError):
        socp.OptimizerSpec(wolfe_c1=0.5, wolfe_c2=0.4)
    with pytest.raises(ConfigRangeError):
        socp.OptimizerSpec(grad_tol=0.0)
    with pytest.raises(ConfigRangeError):
        socp.SocpRunConfig(beta=0.0)
    with pytest.raises(ConfigRangeError):
        socp.desired_state_function("plateau")


def test_desired_mode_exposes_both_pairings():
    _, _, interp = fem_problem(mode="interpolant")
    _, _, proj = fem_problem(mode="projection")
    f = np.ones(interp.dim)
    assert socp.objective(interp, f) != socp.objective(proj, f)
    # both are self-consistent quadratics with the analytic gradient
    for problem in (interp, proj):
        g = socp.gradient(problem, f)
        step = 1e-6
        rng = np.random.default_rng(8)
        d = rng.standard_normal(problem.dim)
        d /= np.linalg.norm(d)
        fd = (socp.objective(problem, f + step * d)
              - socp.objective(problem, f - step * d)) / (2.0 * step)
        assert fd == pytest.approx(float(g @ d), rel=1e-5)


def test_run_socp_end_to_end():
    cfg = socp.SocpRunConfig(h=0.25, num_samples=6)
    problem, res = socp.run_socp(cfg, socp.OptimizerSpec(method="newton"))
    assert res.converged
    assert res.state_mean.shape == (problem.dim,)
    # tracking actually improves on the zero control
    err0 = fem.mass_norm(problem.mass, problem.desired_nodal)
    err = fem.mass_norm(problem.mass, res.state_mean - problem.desired_nodal)
    assert err < err0
