"""Collocation training of adjoint networks on the strong-form residual.

The adjoint problem is the linear strong form -lap(z) + c(x) z = r(x) with
homogeneous Dirichlet data satisfied exactly by the boundary ansatz.  The
loss is the mean squared residual over a set of interior collocation
points.  Training runs full-batch L-BFGS with a strong Wolfe line search,
one outer iteration per epoch; a burst of Adam steps takes over when the
loss plateaus away from a stationary point, and training restarts from a
fresh seeded network when the loss explodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import fem
from .neural import BoundaryAnsatz, _ansatz_parts_t, init_mlp

__all__ = [
    "AdjointStrongForm", "TrainConfig", "CollocationSet",
    "RestartLimitExceeded", "adjoint_strong_form", "loss", "train",
]

ADAM_BETAS = (0.9, 0.999)
GRAD_NORM_SADDLE = 1e-4  # plateau with a gradient above this means a saddle


class RestartLimitExceeded(RuntimeError):
    """Training diverged repeatedly; callers should fall back to FEM."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass(frozen=True)
class AdjointStrongForm:
    """Descriptor of the linear adjoint PDE -lap(z) + reaction*z = rhs.

    ``reaction`` is None for pure Poisson adjoints.  Both entries are point
    fields (numbers, callables, or scaled FE functions).
    """

    reaction: object
    rhs: object


def adjoint_strong_form(pde, goal, u2=None) -> AdjointStrongForm:
    """Assemble the adjoint strong form from the PDE and goal functional.

    ``u2`` is the enriched primal solution; it is required whenever the PDE
    or the goal is nonlinear (reaction 2*gamma*u2, rhs 2*u2/|Omega|).
    """
    if isinstance(pde, fem.Semilinear):
        if u2 is None:
            raise ValueError("semilinear adjoint needs the enriched primal")
        reaction = fem.ScaledField(2.0 * pde.gamma, u2)
    else:
        reaction = None

    if goal.kind == "mean":
        rhs = 1.0
    elif goal.kind == "regional_mean":
        area = goal.corner[0] * goal.corner[1]
        rhs = fem.indicator_box(goal.corner, scale=1.0 / area)
    elif goal.kind == "mean_squared":
        if u2 is None:
            raise ValueError("mean-squared adjoint needs the enriched primal")
        rhs = fem.ScaledField(2.0, u2)
    else:
        raise ValueError(f"unknown goal functional kind {goal.kind!r}")
    return AdjointStrongForm(reaction=reaction, rhs=rhs)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 400
    stop_tol: float = 1e-8
    patience: int = 5
    seed: int = 0
    lbfgs_history: int = 10
    adam_lr: float = 1e-3
    adam_burst: int = 50
    restart_limit: int = 5

    def __post_init__(self):
        if min(self.max_epochs, self.patience, self.lbfgs_history,
               self.adam_burst, self.restart_limit) < 1:
            raise ValueError("counts in the training config must be >= 1")
        if self.stop_tol <= 0 or self.adam_lr <= 0:
            raise ValueError("tolerances and rates must be positive")


@dataclass(frozen=True)
class CollocationSet:
    """Interior points where the strong-form residual is sampled.

    Boundary points carry no information (the ansatz satisfies the boundary
    condition exactly) and are dropped by the constructors.
    """

    points: np.ndarray
    provenance: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
            raise ValueError("collocation set must be a nonempty (n, 2) array")
        if not np.all((pts > 0.0) & (pts < 1.0)):
            raise ValueError("collocation points must be strictly interior")

    def __len__(self) -> int:
        return len(self.points)

    @staticmethod
    def from_dof_coords(space: fem.FeSpace) -> "CollocationSet":
        pts = space.dof_coords
        interior = np.all((pts > 0.0) & (pts < 1.0), axis=1)
        return CollocationSet(pts[interior].copy(),
                              f"dof_coords(degree={space.degree})")

    @staticmethod
    def uniform_random(n: int, seed: int) -> "CollocationSet":
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0.0, 1.0, size=(n, 2))
        interior = np.all((pts > 0.0) & (pts < 1.0), axis=1)
        return CollocationSet(pts[interior], f"uniform_random({n}, seed={seed})")


class _ResidualLoss:
    """Mean squared strong-form residual with frozen coefficient samples."""

    def __init__(self, a: BoundaryAnsatz, p: AdjointStrongForm,
                 pts: CollocationSet):
        if len(pts) == 0:
            raise ValueError("empty collocation set")
        self.ansatz = a
        self.x = torch.as_tensor(pts.points)
        self.c = (None if p.reaction is None else
                  torch.as_tensor(fem.as_field(p.reaction)(pts.points)))
        self.r = torch.as_tensor(fem.as_field(p.rhs)(pts.points))
        if a.g_tilde is not None:
            self.gv = torch.as_tensor(a.g_tilde.value(pts.points))
            self.gl = torch.as_tensor(a.g_tilde.laplacian(pts.points))
        else:
            self.gv = self.gl = None

    def __call__(self) -> torch.Tensor:
        value, laplacian = _ansatz_parts_t(self.ansatz, self.x)
        if self.gv is not None:
            value = value + self.gv
            laplacian = laplacian + self.gl
        residual = -laplacian - self.r
        if self.c is not None:
            residual = residual + self.c * value
        return (residual * residual).mean()


def loss(a: BoundaryAnsatz, p: AdjointStrongForm, pts: CollocationSet) -> float:
    """Mean of squared residuals N(z(x_i), x_i) over the collocation set."""
    with torch.no_grad():
        return float(_ResidualLoss(a, p, pts)())


def _snapshot(net):
    return [p.detach().clone() for p in net.parameters()]


def _load_snapshot(net, snap):
    with torch.no_grad():
        for p, q in zip(net.parameters(), snap):
            p.copy_(q)


def _grad_norm(lossfn, net) -> float:
    net.zero_grad()
    lossfn().backward()
    total = 0.0
    for p in net.parameters():
        if p.grad is not None:
            total += float((p.grad ** 2).sum())
    return total ** 0.5


def train(a: BoundaryAnsatz, p: AdjointStrongForm, pts: CollocationSet,
          cfg: TrainConfig, epoch_callback=None):
    """Minimize the residual loss; returns (ansatz, history).

    The ansatz is left holding the parameters with the lowest loss observed.
    ``history`` records one (epoch, loss, phase) tuple per epoch with phase
    lbfgs, adam, or restart.  Termination: the loss improved by less than
    ``stop_tol`` over the last ``patience`` epochs at a near-zero gradient,
    or the epoch budget ran out; repeated explosions raise
    RestartLimitExceeded.  ``epoch_callback(epoch, net)`` is a test hook
    invoked before each epoch.
    """
    torch.set_num_threads(1)  # keeps reductions bit-reproducible
    lossfn = _ResidualLoss(a, p, pts)
    net = a.net

    def new_lbfgs():
        return torch.optim.LBFGS(
            net.parameters(), max_iter=1, history_size=cfg.lbfgs_history,
            line_search_fn="strong_wolfe")

    opt = new_lbfgs()
    mode = "lbfgs"
    adam_left = 0
    history = []
    best_global = float("inf")
    best_state = None
    best_run = float("inf")
    run_track = []  # best-so-far within the current run/phase window
    restarts = 0

    epoch = 0
    while epoch < cfg.max_epochs:
        if epoch_callback is not None:
            epoch_callback(epoch, net)

        if mode == "lbfgs":
            def closure():
                opt.zero_grad()
                value = lossfn()
                value.backward()
                return value

            opt.step(closure)
        else:
            opt.zero_grad()
            value = lossfn()
            value.backward()
            opt.step()
            adam_left -= 1

        with torch.no_grad():
            cur = float(lossfn())

        exploded = (not np.isfinite(cur)) or (np.isfinite(best_run)
                                              and cur > 10.0 * best_run)
        if exploded:
            history.append((epoch, cur, "restart"))
            epoch += 1
            restarts += 1
            if restarts > cfg.restart_limit:
                raise RestartLimitExceeded(
                    f"training diverged {restarts} times", history=history)
            _load_snapshot(net, _snapshot(
                init_mlp(net.layer_sizes, cfg.seed + 7919 * restarts)))
            opt = new_lbfgs()
            mode = "lbfgs"
            best_run = float("inf")
            run_track = []
            continue

        history.append((epoch, cur, mode))
        epoch += 1
        if cur < best_global:
            best_global = cur
            best_state = _snapshot(net)
        best_run = min(best_run, cur)
        run_track.append(best_run)

        if mode == "adam":
            if adam_left <= 0:
                opt = new_lbfgs()
                mode = "lbfgs"
                run_track = []
            continue

        if (len(run_track) > cfg.patience
                and run_track[-1 - cfg.patience] - run_track[-1] < cfg.stop_tol):
            if _grad_norm(lossfn, net) > GRAD_NORM_SADDLE:
                # stuck at a saddle: take an Adam burst, then resume L-BFGS
                opt = torch.optim.Adam(net.parameters(), lr=cfg.adam_lr,
                                       betas=ADAM_BETAS)
                mode = "adam"
                adam_left = cfg.adam_burst
                run_track = []
            else:
                break

    if best_state is not None:
        _load_snapshot(net, best_state)
    return a, history
