import numpy as np
import pytest

from dwrnn import fem
from dwrnn.fem import (FeFunction, GoalFunctional, build_space, evaluate_at_points,
                       goal_value, interpolate_to_enriched, restrict,
                       solve_adjoint_fem, solve_primal_poisson,
                       solve_primal_semilinear)
from dwrnn.mesh import new_uniform, refine, uniform_refine


def seven_cell_mesh():
    return refine(new_uniform(2), [(1, 0, 0)])


def sin2(pts):
    return np.sin(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 1])


def l2_error(u, exact):
    wq = u.space.quad_weights()
    uq = fem.fe_values_at_quad(u)
    eq = exact(u.space.quad_points().reshape(-1, 2)).reshape(uq.shape)
    return float(np.sqrt(np.sum(wq * (uq - eq) ** 2)))


# ---------------------------------------------------------------- spaces

def test_dof_counts_uniform():
    assert build_space(new_uniform(2), 1).n_dofs == 9
    assert build_space(new_uniform(2), 2).n_dofs == 25
    for k in (1, 4, 8):
        m = new_uniform(k)
        assert build_space(m, 1).n_dofs == (k + 1) ** 2
        assert build_space(m, 2).n_dofs == (2 * k + 1) ** 2


def test_dof_count_after_five_uniform_refinements():
    m = new_uniform(2)
    for _ in range(5):
        m = uniform_refine(m)
    assert build_space(m, 1).n_dofs == 4225


def test_hanging_constraints_q1_hand_count():
    sp = build_space(seven_cell_mesh(), 1)
    assert sp.n_dofs == 14
    assert len(sp.constraints) == 2
    for slave, combo in sp.constraints.items():
        weights = sorted(w for _, w in combo)
        assert weights == [0.5, 0.5]
        # the hanging midpoint is the mean of its edge endpoints
        sx, sy = sp.dof_coords[slave]
        mx = np.mean([sp.dof_coords[m] for m, _ in combo], axis=0)
        assert np.allclose((sx, sy), mx, atol=1e-15)


def test_hanging_constraints_q2():
    sp = build_space(seven_cell_mesh(), 2)
    assert len(sp.constraints) == 4
    for slave, combo in sp.constraints.items():
        weights = sorted(w for _, w in combo)
        assert np.allclose(weights, [-0.125, 0.375, 0.75], atol=1e-15)
        assert abs(sum(w for _, w in combo) - 1.0) < 1e-15


def test_constraint_weights_sum_to_one_everywhere():
    m = refine(seven_cell_mesh(), [(2, 1, 1)])
    for degree in (1, 2):
        sp = build_space(m, degree)
        for combo in sp.constraints.values():
            assert abs(sum(w for _, w in combo) - 1.0) < 1e-14


def test_boundary_dofs_lie_on_boundary():
    sp = build_space(seven_cell_mesh(), 2)
    xy = sp.dof_coords[sp.boundary_dofs]
    on = (xy == 0.0) | (xy == 1.0)
    assert np.all(on.any(axis=1))
    # and nothing else does
    others = np.setdiff1d(np.arange(sp.n_dofs), sp.boundary_dofs)
    xy2 = sp.dof_coords[others]
    assert not np.any((xy2 == 0.0) | (xy2 == 1.0))


def test_dof_enumeration_deterministic():
    a = build_space(seven_cell_mesh(), 2)
    b = build_space(seven_cell_mesh(), 2)
    assert np.array_equal(a.dof_coords, b.dof_coords)
    assert np.array_equal(a.cell_dofs, b.cell_dofs)


def test_build_space_rejects_bad_degree():
    with pytest.raises(ValueError):
        build_space(new_uniform(2), 3)


# ---------------------------------------------------------------- poisson

def test_poisson_zero_source():
    u = solve_primal_poisson(build_space(new_uniform(4), 1), 0.0)
    assert np.max(np.abs(u.coeffs)) == 0.0


def test_poisson_2x2_center_value_exact():
    # one interior dof: stiffness 8/3, load 1/4, hence u_c = 3/32
    sp = build_space(new_uniform(2), 1)
    u = solve_primal_poisson(sp, 1.0)
    center = np.flatnonzero((sp.dof_coords == 0.5).all(axis=1))[0]
    assert abs(u.coeffs[center] - 3.0 / 32.0) < 1e-14
    assert abs(goal_value(GoalFunctional.mean(), u) - 3.0 / 128.0) < 1e-15


def test_poisson_manufactured_second_order():
    errs = []
    for k in (4, 8, 16):
        sp = build_space(new_uniform(k), 1)
        u = solve_primal_poisson(sp, lambda p: 2 * np.pi ** 2 * sin2(p))
        errs.append(np.max(np.abs(u.coeffs - sin2(sp.dof_coords))))
    for e0, e1 in zip(errs, errs[1:]):
        assert 3.5 < e0 / e1 < 4.6


def test_poisson_on_hanging_mesh_galerkin_orthogonality():
    m = refine(seven_cell_mesh(), [(2, 1, 1)])
    sp = build_space(m, 1)
    u = solve_primal_poisson(sp, 1.0)
    A = fem.stiffness_matrix(sp)
    b = fem.load_vector(sp, fem.field_at_quad(sp, 1.0))
    resid = sp.prolongation.T @ (b - A @ u.coeffs)
    assert np.max(np.abs(resid)) < 1e-10


def test_stiffness_symmetry():
    sp = build_space(refine(seven_cell_mesh(), [(2, 1, 1)]), 2)
    A = fem.stiffness_matrix(sp)
    Ar = (sp.prolongation.T @ A @ sp.prolongation).tocsr()
    assert abs(Ar - Ar.T).max() < 1e-13


def test_mean_goal_monotone_toward_fine_reference():
    ref_mesh = new_uniform(2)
    for _ in range(6):
        ref_mesh = uniform_refine(ref_mesh)
    u_ref = solve_primal_poisson(build_space(ref_mesh, 2), 1.0)
    j_ref = goal_value(GoalFunctional.mean(), u_ref)
    values = []
    for k in (2, 4, 8, 16):
        u = solve_primal_poisson(build_space(new_uniform(k), 1), 1.0)
        values.append(goal_value(GoalFunctional.mean(), u))
    assert all(v1 > v0 for v0, v1 in zip(values, values[1:]))
    assert all(v < j_ref for v in values)


# ---------------------------------------------------------------- semilinear

def test_semilinear_zero_source():
    u = solve_primal_semilinear(build_space(new_uniform(4), 1), 0.0, 50.0)
    assert np.max(np.abs(u.coeffs)) == 0.0
    assert u.newton_iterations <= 1


def test_semilinear_manufactured_second_order():
    gamma = 50.0

    def f(p):
        return 2 * np.pi ** 2 * sin2(p) + gamma * sin2(p) ** 2

    errs = []
    for k in (4, 8, 16):
        sp = build_space(new_uniform(k), 1)
        u = solve_primal_semilinear(sp, f, gamma)
        errs.append(np.max(np.abs(u.coeffs - sin2(sp.dof_coords))))
    for e0, e1 in zip(errs, errs[1:]):
        assert 3.4 < e0 / e1 < 4.7


def test_semilinear_newton_quadratic_tail():
    sp = build_space(new_uniform(8), 1)
    u = solve_primal_semilinear(sp, 1.0, 50.0)
    inc = u.newton_increment_norms
    assert u.newton_iterations <= 8
    # once increments are small the contraction is quadratic:
    # ratio d_{k+1} / d_k^2 stays bounded
    for d0, d1 in zip(inc, inc[1:]):
        if d0 < 1e-3:
            assert d1 / d0 ** 2 < 100.0


def test_semilinear_rejects_nonpositive_gamma():
    with pytest.raises(ValueError):
        solve_primal_semilinear(build_space(new_uniform(2), 1), 1.0, 0.0)


# ---------------------------------------------------------------- transfers

def test_interpolate_constant_and_linear():
    m = seven_cell_mesh()
    sp1, sp2 = build_space(m, 1), build_space(m, 2)
    one = FeFunction(sp1, np.ones(sp1.n_dofs))
    assert np.allclose(interpolate_to_enriched(one, sp2).coeffs, 1.0, atol=1e-15)
    ux = FeFunction(sp1, sp1.dof_coords[:, 0].copy())
    u2 = interpolate_to_enriched(ux, sp2)
    assert np.allclose(u2.coeffs, sp2.dof_coords[:, 0], atol=1e-14)


def test_interpolate_reproduces_q1_at_random_points():
    m = refine(seven_cell_mesh(), [(2, 1, 1)])
    sp1, sp2 = build_space(m, 1), build_space(m, 2)
    rng = np.random.default_rng(7)
    coeffs = rng.standard_normal(sp1.n_dofs)
    sp1.apply_constraints(coeffs)
    u = FeFunction(sp1, coeffs)
    u2 = interpolate_to_enriched(u, sp2)
    pts = rng.uniform(0, 1, size=(100, 2))
    assert np.max(np.abs(u.evaluate(pts) - u2.evaluate(pts))) < 1e-13


def test_restrict_roundtrip_identity():
    m = refine(seven_cell_mesh(), [(2, 1, 1)])
    sp1, sp2 = build_space(m, 1), build_space(m, 2)
    rng = np.random.default_rng(3)
    coeffs = rng.standard_normal(sp1.n_dofs)
    sp1.apply_constraints(coeffs)
    u = FeFunction(sp1, coeffs)
    back = restrict(interpolate_to_enriched(u, sp2), sp1)
    assert np.max(np.abs(back.coeffs - u.coeffs)) < 1e-13


def test_restrict_bubble_center_value():
    m = new_uniform(2)
    sp1, sp2 = build_space(m, 1), build_space(m, 2)
    bub = sp2.dof_coords[:, 0] * (1 - sp2.dof_coords[:, 0]) \
        * sp2.dof_coords[:, 1] * (1 - sp2.dof_coords[:, 1])
    z1 = restrict(FeFunction(sp2, bub), sp1)
    center = np.flatnonzero((sp1.dof_coords == 0.5).all(axis=1))[0]
    assert abs(z1.coeffs[center] - 1.0 / 16.0) < 1e-15


def test_transfer_mesh_mismatch_rejected():
    sp1 = build_space(new_uniform(2), 1)
    sp2 = build_space(new_uniform(4), 2)
    u = FeFunction(sp1, np.zeros(sp1.n_dofs))
    with pytest.raises(ValueError):
        interpolate_to_enriched(u, sp2)
    z = FeFunction(sp2, np.zeros(sp2.n_dofs))
    with pytest.raises(ValueError):
        restrict(z, sp1)


# ---------------------------------------------------------------- evaluation

def test_evaluate_constant_and_linear():
    sp = build_space(seven_cell_mesh(), 1)
    one = FeFunction(sp, np.ones(sp.n_dofs))
    for v, g in evaluate_at_points(one, [(0.3, 0.7), (0.0, 0.0), (1.0, 0.5)]):
        assert abs(v - 1.0) < 1e-15
        assert np.allclose(g, 0.0, atol=1e-14)
    ux = FeFunction(sp, sp.dof_coords[:, 0].copy())
    for v, g in evaluate_at_points(ux, [(0.3, 0.7), (0.6, 0.1)]):
        assert np.allclose(g, (1.0, 0.0), atol=1e-13)


def test_evaluate_outside_domain_rejected():
    sp = build_space(new_uniform(2), 1)
    u = FeFunction(sp, np.zeros(sp.n_dofs))
    with pytest.raises(ValueError):
        u.evaluate([(1.2, 0.5)])


def test_evaluate_matches_bilinear_formula():
    # independent oracle: locate the cell geometrically and apply the
    # tensor-product interpolation formula directly
    m = refine(seven_cell_mesh(), [(2, 1, 1)])
    sp = build_space(m, 1)
    rng = np.random.default_rng(11)
    coeffs = rng.standard_normal(sp.n_dofs)
    sp.apply_constraints(coeffs)
    u = FeFunction(sp, coeffs)
    pts = rng.uniform(0.001, 0.999, size=(100, 2))
    vals = u.evaluate(pts)
    for (x, y), got in zip(pts, vals):
        for c, (level, ix, iy) in enumerate(m.active):
            h = 2.0 ** (-level)
            if ix * h <= x <= (ix + 1) * h and iy * h <= y <= (iy + 1) * h:
                xi, eta = (x - ix * h) / h, (y - iy * h) / h
                c00, c10, c01, c11 = coeffs[sp.cell_dofs[c]]
                want = ((1 - xi) * (1 - eta) * c00 + xi * (1 - eta) * c10
                        + (1 - xi) * eta * c01 + xi * eta * c11)
                assert abs(got - want) < 1e-13
                break


def test_continuity_across_hanging_edge():
    m = seven_cell_mesh()
    for degree in (1, 2):
        sp = build_space(m, degree)
        rng = np.random.default_rng(5)
        coeffs = rng.standard_normal(sp.n_dofs)
        sp.apply_constraints(coeffs)
        u = FeFunction(sp, coeffs)
        # hanging edge x = 0.5, y in (0, 0.5): approach from both sides
        for y in (0.1, 0.33, 0.4):
            left = u.evaluate([(0.5 - 1e-11, y)])[0]
            right = u.evaluate([(0.5 + 1e-11, y)])[0]
            assert abs(left - right) < 1e-9  # lipschitz * 1e-11 plus roundoff
        on_edge = u.evaluate([(0.5, 0.25), (0.5, 0.125)])
        left = u.evaluate([(0.5 - 1e-13, 0.25), (0.5 - 1e-13, 0.125)])
        assert np.allclose(on_edge, left, atol=1e-12)


# ---------------------------------------------------------------- goals

def test_goal_values_simple():
    sp = build_space(new_uniform(4), 1)
    one = FeFunction(sp, np.ones(sp.n_dofs))
    two = FeFunction(sp, np.full(sp.n_dofs, 2.0))
    assert abs(goal_value(GoalFunctional.mean(), one) - 1.0) < 1e-14
    assert abs(goal_value(GoalFunctional.mean_squared(), two) - 4.0) < 1e-14


def test_regional_mean_of_x():
    # (1/|D|) * int_D x dA = 16 * (1/32) * (1/4) = 1/8
    sp = build_space(new_uniform(4), 1)
    ux = FeFunction(sp, sp.dof_coords[:, 0].copy())
    assert abs(goal_value(GoalFunctional.regional_mean(), ux) - 0.125) < 1e-14


def test_regional_mean_rejects_straddling_cells():
    sp = build_space(new_uniform(2), 1)
    u = FeFunction(sp, np.ones(sp.n_dofs))
    with pytest.raises(ValueError):
        goal_value(GoalFunctional.regional_mean(), u)


# ---------------------------------------------------------------- adjoint

class _Problem:
    def __init__(self, reaction, rhs):
        self.reaction = reaction
        self.rhs = rhs


def test_adjoint_mean_value_equals_primal_with_unit_source():
    sp2 = build_space(new_uniform(4), 2)
    z = solve_adjoint_fem(sp2, _Problem(None, fem.as_field(1.0)))
    u = solve_primal_poisson(sp2, 1.0)
    assert np.max(np.abs(z.coeffs - u.coeffs)) < 1e-12


def test_adjoint_manufactured_reaction_third_order():
    def rhs(p):
        return (2 * np.pi ** 2 + 1.0) * sin2(p)

    errs = []
    for k in (4, 8, 16):
        sp2 = build_space(new_uniform(k), 2)
        z = solve_adjoint_fem(sp2, _Problem(fem.as_field(1.0), rhs))
        errs.append(l2_error(z, sin2))
    for e0, e1 in zip(errs, errs[1:]):
        assert 6.0 < e0 / e1 < 10.0


def test_adjoint_requires_degree_two():
    sp1 = build_space(new_uniform(2), 1)
    with pytest.raises(ValueError):
        solve_adjoint_fem(sp1, _Problem(None, fem.as_field(1.0)))
