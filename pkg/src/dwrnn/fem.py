"""Q1/Q2 Lagrange finite elements on adaptive quadrilateral meshes.

Provides the finite element spaces with hanging-node constraints, sparse
assembly and solution of the primal problems (Poisson and the semilinear
equation -lap(u) + gamma*u^2 = f), the enriched-space adjoint solver, the
Q1 <-> Q2 transfer operators, point evaluation, and goal-functional
evaluation.

Conventions
-----------
* Scalar fields are callables mapping an (m, 2) array of points to an (m,)
  array of values; ``as_field`` also accepts plain numbers.
* All cells use the same tensor Gauss 3x3 quadrature rule, exact for the
  Q2 stiffness terms and the quadratic nonlinearity.
* Homogeneous Dirichlet conditions are imposed by constraining boundary
  dofs to zero before solving.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh

__all__ = [
    "FeSpace", "FeFunction", "ScaledField", "GoalFunctional", "Poisson",
    "Semilinear", "NonConvergence", "as_field", "build_space",
    "solve_primal_poisson", "solve_primal_semilinear", "solve_adjoint_fem",
    "interpolate_to_enriched", "restrict", "evaluate_at_points", "goal_value",
]


class NonConvergence(RuntimeError):
    """Newton iteration failed to reach the residual tolerance."""


# ------------------------------------------------------------------ fields

def as_field(f):
    """Normalize a number, callable, or FE function into a point field."""
    if isinstance(f, FeFunction):
        return f.evaluate
    if callable(f):
        return f
    c = float(f)
    return lambda pts: np.full(len(pts), c)


def indicator_box(corner=(0.25, 0.25), scale=1.0):
    """Field: scale on the closed box [0, corner_x] x [0, corner_y], else 0."""
    cx, cy = corner

    def f(pts):
        inside = (pts[:, 0] <= cx) & (pts[:, 1] <= cy)
        return np.where(inside, scale, 0.0)

    return f


# ------------------------------------------------ reference elements, quadrature

# Gauss-Legendre 3 points on [0, 1]
_GP = np.array([0.5 - 0.5 * np.sqrt(0.6), 0.5, 0.5 + 0.5 * np.sqrt(0.6)])
_GW = np.array([5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0])

QUAD_REF = np.array([(x, y) for y in _GP for x in _GP])         # (9, 2)
QUAD_W = np.array([wy * wx for wy in _GW for wx in _GW])        # (9,)
N_QUAD = 9


def _lagrange_1d(degree, t):
    """Values and derivatives of the 1D Lagrange basis at points t."""
    t = np.asarray(t, dtype=float)
    if degree == 1:
        vals = np.stack([1.0 - t, t])
        ders = np.stack([np.full_like(t, -1.0), np.full_like(t, 1.0)])
    elif degree == 2:
        vals = np.stack([(1.0 - t) * (1.0 - 2.0 * t), 4.0 * t * (1.0 - t),
                         t * (2.0 * t - 1.0)])
        ders = np.stack([4.0 * t - 3.0, 4.0 - 8.0 * t, 4.0 * t - 1.0])
    else:
        raise ValueError(f"unsupported degree {degree}")
    return vals, ders


def _local_nodes(degree):
    """Reference coordinates of the (degree+1)^2 local nodes, y-major."""
    t = np.linspace(0.0, 1.0, degree + 1)
    return np.array([(x, y) for y in t for x in t])


def shape_values(degree, pts):
    """Tensor-product shapes at reference points: (n_loc, n_pts)."""
    pts = np.atleast_2d(pts)
    vx, _ = _lagrange_1d(degree, pts[:, 0])
    vy, _ = _lagrange_1d(degree, pts[:, 1])
    n1 = degree + 1
    out = np.empty((n1 * n1, len(pts)))
    for b in range(n1):
        for a in range(n1):
            out[b * n1 + a] = vx[a] * vy[b]
    return out


def shape_gradients(degree, pts):
    """Reference gradients of the shapes at reference points: (n_loc, n_pts, 2)."""
    pts = np.atleast_2d(pts)
    vx, dx = _lagrange_1d(degree, pts[:, 0])
    vy, dy = _lagrange_1d(degree, pts[:, 1])
    n1 = degree + 1
    out = np.empty((n1 * n1, len(pts), 2))
    for b in range(n1):
        for a in range(n1):
            out[b * n1 + a, :, 0] = dx[a] * vy[b]
            out[b * n1 + a, :, 1] = vx[a] * dy[b]
    return out


# cached per degree: shapes at the quadrature points
_SHAPE_Q = {p: shape_values(p, QUAD_REF) for p in (1, 2)}
_GRAD_Q = {p: shape_gradients(p, QUAD_REF) for p in (1, 2)}


# ------------------------------------------------------------------ FeSpace

@dataclass(frozen=True)
class FeSpace:
    """Q1 or Q2 Lagrange space on a mesh, with hanging-node constraints.

    ``constraints`` maps each constrained (hanging) dof to the weighted
    combination of unconstrained master dofs that determines its value.
    ``prolongation`` is the sparse map from free dofs (unconstrained and
    not on the Dirichlet boundary) to the full dof vector.
    """

    mesh: Mesh
    degree: int
    n_dofs: int
    dof_coords: np.ndarray                 # (n_dofs, 2)
    constraints: dict                      # dof -> tuple((master, weight), ...)
    cell_dofs: np.ndarray                  # (n_cells, (degree+1)^2)
    boundary_dofs: np.ndarray              # sorted indices on the boundary
    free_dofs: np.ndarray
    prolongation: sp.csr_matrix = field(repr=False, default=None)
    cell_h: np.ndarray = field(repr=False, default=None)       # (n_cells,)
    cell_origin: np.ndarray = field(repr=False, default=None)  # (n_cells, 2)

    @property
    def n_cells(self) -> int:
        return len(self.cell_dofs)

    def quad_points(self) -> np.ndarray:
        """Physical quadrature points, shape (n_cells, 9, 2)."""
        return (self.cell_origin[:, None, :]
                + self.cell_h[:, None, None] * QUAD_REF[None, :, :])

    def quad_weights(self) -> np.ndarray:
        """Quadrature weights including the cell Jacobian, (n_cells, 9)."""
        return self.cell_h[:, None] ** 2 * QUAD_W[None, :]

    def apply_constraints(self, coeffs: np.ndarray) -> None:
        """Overwrite constrained entries with their master combination."""
        for s, combo in self.constraints.items():
            coeffs[s] = sum(w * coeffs[m] for m, w in combo)


def build_space(mesh: Mesh, degree: int) -> FeSpace:
    """Enumerate dofs cell by cell and build the constraint structure."""
    if degree not in (1, 2):
        raise ValueError(f"degree must be 1 or 2, got {degree}")
    p = degree
    n1 = p + 1
    lmax = mesh.max_level
    denom = p << lmax  # dof coordinates are nx/denom with integer nx

    index_of = {}
    coords = []
    cell_dofs = np.empty((mesh.n_active, n1 * n1), dtype=np.int64)
    cell_h = np.empty(mesh.n_active)
    cell_origin = np.empty((mesh.n_active, 2))
    for c, (level, ix, iy) in enumerate(mesh.active):
        shift = lmax - level
        cell_h[c] = 2.0 ** (-level)
        cell_origin[c] = (ix * cell_h[c], iy * cell_h[c])
        for b in range(n1):
            ny = ((iy * p + b) << shift)
            for a in range(n1):
                nx = ((ix * p + a) << shift)
                key = (nx, ny)
                idx = index_of.get(key)
                if idx is None:
                    idx = len(coords)
                    index_of[key] = idx
                    coords.append(key)
                cell_dofs[c, b * n1 + a] = idx

    coords = np.array(coords, dtype=np.int64)
    dof_coords = coords / denom
    n_dofs = len(coords)

    constraints = _hanging_constraints(mesh, p, cell_dofs, index_of, lmax)

    on_boundary = ((coords[:, 0] == 0) | (coords[:, 0] == denom)
                   | (coords[:, 1] == 0) | (coords[:, 1] == denom))
    boundary_dofs = np.flatnonzero(on_boundary)
    for s in constraints:
        assert not on_boundary[s], "hanging node on the Dirichlet boundary"

    is_free = ~on_boundary
    for s in constraints:
        is_free[s] = False
    free_dofs = np.flatnonzero(is_free)

    col_of = -np.ones(n_dofs, dtype=np.int64)
    col_of[free_dofs] = np.arange(len(free_dofs))
    rows, cols, vals = [], [], []
    for i in free_dofs:
        rows.append(i)
        cols.append(col_of[i])
        vals.append(1.0)
    for s, combo in constraints.items():
        for m, w in combo:
            if col_of[m] >= 0:
                rows.append(s)
                cols.append(col_of[m])
                vals.append(w)
    prolongation = sp.csr_matrix((vals, (rows, cols)),
                                 shape=(n_dofs, len(free_dofs)))

    return FeSpace(mesh=mesh, degree=degree, n_dofs=n_dofs,
                   dof_coords=dof_coords, constraints=constraints,
                   cell_dofs=cell_dofs, boundary_dofs=boundary_dofs,
                   free_dofs=free_dofs, prolongation=prolongation,
                   cell_h=cell_h, cell_origin=cell_origin)


# Per direction: neighbor offset and the axis along which the edge runs
# (east/west edges run along y, north/south along x).
_EDGE_TABLE = {
    "east": ((1, 0), 1),
    "west": ((-1, 0), 1),
    "north": ((0, 1), 0),
    "south": ((0, -1), 0),
}


def _edge_locals(p, direction):
    """Local node indices along an edge of the fine cell and of the coarse
    neighbor's matching edge, ordered by increasing edge coordinate."""
    n1 = p + 1
    if direction == "east":
        fine = [b * n1 + p for b in range(n1)]
        coarse = [b * n1 + 0 for b in range(n1)]
    elif direction == "west":
        fine = [b * n1 + 0 for b in range(n1)]
        coarse = [b * n1 + p for b in range(n1)]
    elif direction == "north":
        fine = [p * n1 + a for a in range(n1)]
        coarse = [0 * n1 + a for a in range(n1)]
    else:  # south
        fine = [0 * n1 + a for a in range(n1)]
        coarse = [p * n1 + a for a in range(n1)]
    return fine, coarse


def _hanging_constraints(mesh, p, cell_dofs, index_of, lmax):
    raw = {}
    cell_index = {key: c for c, key in enumerate(mesh.active)}
    for c, (level, ix, iy) in enumerate(mesh.active):
        n = 1 << level
        for direction, ((di, dj), run_axis) in _EDGE_TABLE.items():
            ni, nj = ix + di, iy + dj
            if not (0 <= ni < n and 0 <= nj < n):
                continue
            anc = mesh.active_ancestor((level, ni, nj))
            if anc is None or anc[0] == level:
                continue  # finer neighbor handles it / conforming edge
            assert anc[0] == level - 1, "mesh is not 1-irregular"
            coarse_c = cell_index[anc]
            # which half of the coarse edge this cell's edge covers
            r = (iy if run_axis == 1 else ix) & 1
            fine_loc, coarse_loc = _edge_locals(p, direction)
            coarse_edge_dofs = [cell_dofs[coarse_c, k] for k in coarse_loc]
            lag, _ = _lagrange_1d(p, [(r + b / p) / 2.0 for b in range(p + 1)])
            for b in range(p + 1):
                t = (r + b / p) / 2.0
                if (t * p) == int(t * p):
                    continue  # coincides with a coarse node
                slave = int(cell_dofs[c, fine_loc[b]])
                combo = tuple((int(coarse_edge_dofs[k]), float(lag[k, b]))
                              for k in range(p + 1) if lag[k, b] != 0.0)
                raw[slave] = combo
    return _resolve_transitive(raw)


def _resolve_transitive(raw):
    """Expand constraint chains so every master is unconstrained."""
    resolved = {}
    for slave, combo in raw.items():
        for _ in range(64):
            if not any(m in raw for m, _w in combo):
                break
            acc = {}
            for m, w in combo:
                if m in raw:
                    for mm, ww in raw[m]:
                        acc[mm] = acc.get(mm, 0.0) + w * ww
                else:
                    acc[m] = acc.get(m, 0.0) + w
            combo = tuple(acc.items())
        else:
            raise RuntimeError("constraint chain did not terminate")
        resolved[slave] = combo
    return resolved


# ------------------------------------------------------------------ assembly

# keep per-chunk triplet arrays below ~3e7 entries
_ASSEMBLY_CHUNK_ENTRIES = 30_000_000


def _cell_chunks(n_cells, n_loc):
    step = max(1, _ASSEMBLY_CHUNK_ENTRIES // (n_loc * n_loc))
    for start in range(0, n_cells, step):
        yield start, min(n_cells, start + step)


def stiffness_matrix(space: FeSpace) -> sp.csr_matrix:
    """Assemble (grad u, grad v); the local matrix is level-independent."""
    grads = _GRAD_Q[space.degree]                      # (nloc, 9, 2)
    k_loc = np.einsum("q,aqd,bqd->ab", QUAD_W, grads, grads)
    n_loc = k_loc.shape[0]
    mat = None
    for lo, hi in _cell_chunks(space.n_cells, n_loc):
        dofs = space.cell_dofs[lo:hi]
        nc = hi - lo
        rows = np.repeat(dofs, n_loc, axis=1).ravel()
        cols = np.tile(dofs, (1, n_loc)).ravel()
        vals = np.broadcast_to(k_loc.ravel(), (nc, n_loc * n_loc)).ravel()
        part = sp.csr_matrix((vals, (rows, cols)),
                             shape=(space.n_dofs, space.n_dofs))
        mat = part if mat is None else mat + part
    return mat


def weighted_mass_matrix(space: FeSpace, weight_q: np.ndarray) -> sp.csr_matrix:
    """Assemble (w u, v) with weight values given per (cell, quad point)."""
    shapes = _SHAPE_Q[space.degree]                    # (nloc, 9)
    n_loc = shapes.shape[0]
    wq = space.quad_weights()
    mat = None
    for lo, hi in _cell_chunks(space.n_cells, n_loc):
        dofs = space.cell_dofs[lo:hi]
        local = np.einsum("cq,aq,bq->cab", wq[lo:hi] * weight_q[lo:hi],
                          shapes, shapes)
        rows = np.repeat(dofs, n_loc, axis=1).ravel()
        cols = np.tile(dofs, (1, n_loc)).ravel()
        part = sp.csr_matrix((local.ravel(), (rows, cols)),
                             shape=(space.n_dofs, space.n_dofs))
        mat = part if mat is None else mat + part
    return mat


def load_vector(space: FeSpace, values_q: np.ndarray) -> np.ndarray:
    """Assemble (g, v) with integrand values per (cell, quad point)."""
    shapes = _SHAPE_Q[space.degree]
    local = np.einsum("cq,aq->ca", space.quad_weights() * values_q, shapes)
    b = np.zeros(space.n_dofs)
    np.add.at(b, space.cell_dofs, local)
    return b


def field_at_quad(space: FeSpace, f) -> np.ndarray:
    """Evaluate a field at all quadrature points, shape (n_cells, 9).

    FE functions (and scaled FE functions) on the same mesh are evaluated
    cellwise, bypassing point location.
    """
    if isinstance(f, FeFunction) and f.space.mesh.active == space.mesh.active:
        return f.coeffs[f.space.cell_dofs] @ _SHAPE_Q[f.space.degree]
    if isinstance(f, ScaledField):
        return f.scale * field_at_quad(space, f.base)
    pts = space.quad_points().reshape(-1, 2)
    return as_field(f)(pts).reshape(space.n_cells, N_QUAD)


def fe_values_at_quad(u: "FeFunction") -> np.ndarray:
    """Values of a finite element function at its own quadrature points."""
    return u.coeffs[u.space.cell_dofs] @ _SHAPE_Q[u.space.degree]


def fe_gradients_at_quad(u: "FeFunction") -> np.ndarray:
    """Gradients at the quadrature points, shape (n_cells, 9, 2)."""
    local = u.coeffs[u.space.cell_dofs]                # (ncells, nloc)
    g = np.einsum("ca,aqd->cqd", local, _GRAD_Q[u.space.degree])
    return g / u.space.cell_h[:, None, None]


# ------------------------------------------------------------------ solvers

_DIRECT_DOF_LIMIT = 60_000


def _solve_spd(A: sp.csr_matrix, b: np.ndarray) -> np.ndarray:
    """Solve the reduced SPD system to backward error <= 1e-12.

    The residual is measured relative to |A|*|x| + |b| (normwise backward
    error), the sharpest criterion double precision supports uniformly in
    the problem size.
    """
    n = A.shape[0]
    if n == 0:
        return np.zeros(0)
    if n <= _DIRECT_DOF_LIMIT:
        x = spla.splu(A.tocsc()).solve(b)
    else:
        import pyamg

        ml = pyamg.ruge_stuben_solver(A)
        x = ml.solve(b, tol=1e-12, accel="cg", maxiter=400)
        for _ in range(3):
            r = b - A @ x
            if np.linalg.norm(r) <= 1e-13 * max(np.linalg.norm(b), 1e-300):
                break
            x = x + ml.solve(r, tol=1e-12, accel="cg", maxiter=200)
    anorm = abs(A).sum(axis=1).max()  # infinity norm
    scale = anorm * np.linalg.norm(x) + np.linalg.norm(b)
    res = np.linalg.norm(A @ x - b)
    if res > 1e-12 * max(scale, 1e-300):
        raise RuntimeError(
            f"linear solve stalled: backward error {res / scale:.2e}")
    return x


def _reduce(space, A, b):
    P = space.prolongation
    return (P.T @ A @ P).tocsr(), P.T @ b


def solve_primal_poisson(space: FeSpace, f) -> "FeFunction":
    """Galerkin solution of -lap(u) = f with zero Dirichlet values."""
    A = stiffness_matrix(space)
    b = load_vector(space, field_at_quad(space, f))
    Ar, br = _reduce(space, A, b)
    u_red = _solve_spd(Ar, br)
    coeffs = space.prolongation @ u_red
    return FeFunction(space, coeffs)


def solve_primal_semilinear(space: FeSpace, f, gamma: float) -> "FeFunction":
    """Newton solution of -lap(u) + gamma*u^2 = f, starting from zero.

    Raises NonConvergence if the reduced residual does not drop below
    1e-10 within 20 iterations.  The returned function carries the
    iteration count and increment norms as attributes.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    A = stiffness_matrix(space)
    b = load_vector(space, field_at_quad(space, f))
    P = space.prolongation
    shapes = _SHAPE_Q[space.degree]
    wq = space.quad_weights()

    coeffs = np.zeros(space.n_dofs)
    increments = []
    n_iter = 0
    for it in range(21):
        uq = coeffs[space.cell_dofs] @ shapes
        nl = np.zeros(space.n_dofs)
        np.add.at(nl, space.cell_dofs,
                  np.einsum("cq,aq->ca", wq * (gamma * uq ** 2), shapes))
        r = P.T @ (A @ coeffs + nl - b)
        if np.linalg.norm(r) <= 1e-10:
            n_iter = it
            break
        if it == 20:
            raise NonConvergence(
                "Newton did not reach 1e-10 in 20 iterations")
        J = A + weighted_mass_matrix(space, 2.0 * gamma * uq)
        delta = _solve_spd((P.T @ J @ P).tocsr(), -r)
        increments.append(float(np.linalg.norm(delta)))
        coeffs = coeffs + P @ delta
    u = FeFunction(space, coeffs)
    u.newton_iterations = n_iter
    u.newton_increment_norms = increments
    return u


def solve_adjoint_fem(space2: FeSpace, problem) -> "FeFunction":
    """Solve (grad z, grad psi) + (c z, psi) = (r, psi) in the enriched space.

    ``problem`` provides the reaction field ``c`` (may be None for zero)
    and the right-hand side field ``rhs``.
    """
    if space2.degree != 2:
        raise ValueError("adjoint reference solve requires a degree-2 space")
    A = stiffness_matrix(space2)
    reaction = getattr(problem, "reaction", None)
    if reaction is not None:
        A = A + weighted_mass_matrix(space2, field_at_quad(space2, reaction))
    b = load_vector(space2, field_at_quad(space2, problem.rhs))
    Ar, br = _reduce(space2, A, b)
    z_red = _solve_spd(Ar, br)
    return FeFunction(space2, space2.prolongation @ z_red)


# ------------------------------------------------------------------ functions

class FeFunction:
    """A finite element function: a space plus its coefficient vector."""

    def __init__(self, space: FeSpace, coeffs: np.ndarray):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (space.n_dofs,):
            raise ValueError("coefficient vector length does not match space")
        self.space = space
        self.coeffs = coeffs

    def evaluate(self, pts) -> np.ndarray:
        vals, _ = _evaluate(self, pts, want_grad=False)
        return vals

    def evaluate_with_gradient(self, pts):
        return _evaluate(self, pts, want_grad=True)


@dataclass(frozen=True)
class ScaledField:
    """A finite element function scaled by a constant, usable as a field."""

    scale: float
    base: FeFunction

    def __call__(self, pts) -> np.ndarray:
        return self.scale * self.base.evaluate(pts)


def _owner_cell(mesh: Mesh, x: float, y: float):
    """Active cell containing (x, y); ties resolved by iteration order."""
    best = None
    for level in range(mesh.max_level + 1):
        scale = float(1 << level)
        cand_x = _axis_candidates(x, scale)
        cand_y = _axis_candidates(y, scale)
        for ix in cand_x:
            for iy in cand_y:
                key = (level, ix, iy)
                if mesh.is_active(key) and (best is None or key < best):
                    best = key
    return best


def _axis_candidates(x, scale):
    k = x * scale
    i = int(np.floor(k))
    cands = []
    if i <= scale - 1:
        cands.append(max(i, 0))
    if k == i and i - 1 >= 0:
        cands.append(i - 1)
    return cands


def _evaluate(u: FeFunction, pts, want_grad: bool):
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    space = u.space
    mesh = space.mesh
    cell_index = {key: c for c, key in enumerate(mesh.active)}
    vals = np.empty(len(pts))
    grads = np.empty((len(pts), 2)) if want_grad else None
    for k, (x, y) in enumerate(pts):
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ValueError(f"point ({x}, {y}) outside the closed unit square")
        key = _owner_cell(mesh, x, y)
        c = cell_index[key]
        h = space.cell_h[c]
        ref = np.array([[(x - space.cell_origin[c, 0]) / h,
                         (y - space.cell_origin[c, 1]) / h]])
        local = u.coeffs[space.cell_dofs[c]]
        vals[k] = local @ shape_values(space.degree, ref)[:, 0]
        if want_grad:
            g = shape_gradients(space.degree, ref)[:, 0, :]
            grads[k] = (local @ g) / h
    return vals, grads


def evaluate_at_points(u: FeFunction, pts):
    """Evaluate value and gradient at each point.

    Points on cell interfaces are resolved by the owning active cell with
    the lowest iteration index.  Points outside the closed unit square are
    rejected.
    """
    vals, grads = u.evaluate_with_gradient(pts)
    return [(float(v), g.copy()) for v, g in zip(vals, grads)]


# ------------------------------------------------------------------ transfers

def _check_same_mesh(a: FeSpace, b: FeSpace):
    if a.mesh.active != b.mesh.active:
        raise ValueError("spaces live on different meshes")


def interpolate_to_enriched(u: FeFunction, space2: FeSpace) -> FeFunction:
    """Embed a Q1 function into Q2 on the same mesh by nodal evaluation.

    The embedding is exact: the Q1 function is reproduced everywhere.
    """
    if u.space.degree != 1 or space2.degree != 2:
        raise ValueError("interpolate_to_enriched maps Q1 to Q2")
    _check_same_mesh(u.space, space2)
    transfer = shape_values(1, _local_nodes(2))        # (4, 9)
    local_vals = u.coeffs[u.space.cell_dofs] @ transfer
    coeffs = np.empty(space2.n_dofs)
    coeffs[space2.cell_dofs] = local_vals
    space2.apply_constraints(coeffs)
    return FeFunction(space2, coeffs)


def restrict(z: FeFunction, space1: FeSpace) -> FeFunction:
    """Interpolate a Q2 function onto Q1 nodes of the same mesh.

    Unconstrained Q1 nodes take the Q2 point values; hanging nodes are then
    set from their constraints so the result is conforming.
    """
    if z.space.degree != 2 or space1.degree != 1:
        raise ValueError("restrict maps Q2 to Q1")
    _check_same_mesh(z.space, space1)
    transfer = shape_values(2, _local_nodes(1))        # (9, 4)
    local_vals = z.coeffs[z.space.cell_dofs] @ transfer
    coeffs = np.empty(space1.n_dofs)
    coeffs[space1.cell_dofs] = local_vals
    space1.apply_constraints(coeffs)
    return FeFunction(space1, coeffs)


# ------------------------------------------------------------------ goals

@dataclass(frozen=True)
class GoalFunctional:
    """Quantity of interest: mean value, regional mean, or mean square.

    The regional mean averages over D = [0, corner_x] x [0, corner_y]
    (1/|D| = 16 for the default quarter box); meshes whose cells straddle
    the boundary of D are rejected.
    """

    kind: str
    corner: tuple = (0.25, 0.25)

    @staticmethod
    def mean():
        return GoalFunctional("mean")

    @staticmethod
    def regional_mean():
        return GoalFunctional("regional_mean")

    @staticmethod
    def mean_squared():
        return GoalFunctional("mean_squared")

    @property
    def is_linear(self) -> bool:
        return self.kind in ("mean", "regional_mean")


def regional_cell_mask(mesh: Mesh, corner=(0.25, 0.25)) -> np.ndarray:
    """Boolean mask of active cells inside the regional box.

    Exact integer test; raises if any cell straddles the box boundary.
    """
    num_x, num_y = (round(corner[0] * 4), round(corner[1] * 4))
    assert (num_x / 4, num_y / 4) == tuple(corner), "box corner must be quarters"
    mask = np.zeros(len(mesh.active), dtype=bool)
    for c, (level, ix, iy) in enumerate(mesh.active):
        # cell edges in units of 2^-(level+2); box edge at num * 2^level / 4
        bx = num_x << level
        by = num_y << level
        inter_x = max(0, min(4 * ix + 4, bx) - 4 * ix)
        inter_y = max(0, min(4 * iy + 4, by) - 4 * iy)
        area = inter_x * inter_y
        if area == 16:
            mask[c] = True
        elif area != 0:
            raise ValueError(
                f"cell {(level, ix, iy)} straddles the regional box boundary")
    return mask


def goal_value(goal: GoalFunctional, u: FeFunction) -> float:
    """Evaluate the goal functional by the shared 3x3 Gauss rule."""
    wq = u.space.quad_weights()
    uq = fe_values_at_quad(u)
    if goal.kind == "mean":
        return float(np.sum(wq * uq))
    if goal.kind == "mean_squared":
        return float(np.sum(wq * uq ** 2))
    if goal.kind == "regional_mean":
        mask = regional_cell_mask(u.space.mesh, goal.corner)
        area = goal.corner[0] * goal.corner[1]
        return float(np.sum(wq[mask] * uq[mask]) / area)
    raise ValueError(f"unknown goal functional kind {goal.kind!r}")


# ------------------------------------------------------------------ PDEs

@dataclass(frozen=True)
class Poisson:
    """-lap(u) = f with homogeneous Dirichlet data."""

    f: object = 1.0

    @property
    def gamma(self) -> float:
        return 0.0

    def solve(self, space: FeSpace) -> FeFunction:
        return solve_primal_poisson(space, self.f)


@dataclass(frozen=True)
class Semilinear:
    """-lap(u) + gamma*u^2 = f with homogeneous Dirichlet data."""

    f: object = 1.0
    gamma: float = 50.0

    def solve(self, space: FeSpace) -> FeFunction:
        return solve_primal_semilinear(space, self.f, self.gamma)
