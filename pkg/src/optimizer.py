import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, solveh_banded

from .scene import ATTACH, DETACH, AttachmentEvent, Configuration, Scene

logger = logging.getLogger(__name__)

COST = "cost"
EQ = "eq"
INEQ = "ineq"


class NumericalFailureError(RuntimeError):
    def __init__(self, feature_name, time_index, message="non-finite value"):
        super().__init__(f"{message} in feature '{feature_name}' at t={time_index}")
        self.feature_name = feature_name
        self.time_index = time_index


@dataclass
class Feature:
    """
    A k-order residual over the states x_{t-k:t}.

    eval receives the k+1 flat state vectors, oldest first. jac, when given,
    returns the dim x (k+1)*n Jacobian analytically.
    """
    name: str
    kind: str
    order: int
    time_index: int
    dim: int
    eval: Callable[[Sequence[np.ndarray]], np.ndarray]
    jac: Optional[Callable[[Sequence[np.ndarray]], np.ndarray]] = None


@dataclass
class SolverSettings:
    eps_h: float = 1e-3
    eps_g: float = 1e-3
    step_tol: float = 1e-4
    mu0: float = 1.0
    mu_growth: float = 10.0
    mu_max: float = 1e6
    max_outer: int = 8
    max_inner: int = 100
    damping: float = 1e-2
    fd_step: float = 1e-6
    # weight of the contact-proximity cost
    proximity_weight: float = 1.0

    def __post_init__(self):
        for name in ("eps_h", "eps_g", "step_tol", "mu0", "mu_max", "damping", "fd_step", "proximity_weight"):
            if not getattr(self, name) > 0:
                raise ValueError(f"solver setting '{name}' must be positive")
        if not self.mu_growth > 1:
            raise ValueError("solver setting 'mu_growth' must be greater than 1")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("solver iteration limits must be at least 1")


@dataclass
class TrajectoryProblem:
    scene: Scene
    horizon: int
    steps_per_phase: int
    features: List[Feature]
    switches: List[AttachmentEvent]
    init: Configuration
    initial_states: Optional[List[Configuration]] = None
    free_objects: Sequence[str] = ()

    def validate(self):
        T = self.horizon
        if T < 0:
            raise ValueError(f"horizon must be non-negative, got {T}")
        for feature in self.features:
            if not 0 <= feature.time_index <= T:
                raise ValueError(f"feature '{feature.name}' time index {feature.time_index} outside [0, {T}]")
            if feature.order > feature.time_index:
                raise ValueError(f"feature '{feature.name}' of order {feature.order} placed at t={feature.time_index}")
            if feature.kind not in (COST, EQ, INEQ):
                raise ValueError(f"feature '{feature.name}' has unknown kind '{feature.kind}'")
        for event in self.switches:
            if not 0 < event.time_index <= T:
                raise ValueError(f"switch time index {event.time_index} outside (0, {T}]")
        if self.initial_states is not None and len(self.initial_states) != T + 1:
            raise ValueError("initial_states must hold horizon + 1 configurations")


@dataclass(frozen=True)
class Violation:
    feature: str
    kind: str
    time_index: int
    violation: float


@dataclass
class Trajectory:
    states: List[Configuration]
    vectors: np.ndarray
    switch_events: List[AttachmentEvent]
    feasible: bool
    max_eq_violation: float
    max_ineq_violation: float
    cost: float
    violations: List[Violation] = field(default_factory=list)
    history: List[dict] = field(default_factory=list)
    tolerances: tuple = (1e-3, 1e-3)

    @property
    def horizon(self):
        return len(self.states) - 1

    @property
    def velocities(self):
        return np.diff(self.vectors, n=1, axis=0)

    @property
    def accelerations(self):
        return np.diff(self.vectors, n=2, axis=0)


def finite_difference_coefficients(order):
    """
    Backward-difference weights over x_{t-k:t}, oldest first.
    """
    return [(-1) ** (order - i) * math.comb(order, i) for i in range(order + 1)]


def _split(stacked, n, count):
    return [stacked[i * n:(i + 1) * n] for i in range(count)]


def jacobian(feature, states, step=1e-6, columns=None):
    """
    Jacobian of a feature with respect to its stacked states.

    Uses the feature's analytic Jacobian when it has one, central finite
    differences otherwise.

    Args:
        feature (Feature): The feature to differentiate.
        states (list): The k+1 flat state vectors x_{t-k:t}.
        step (float): Finite-difference step.
        columns (list, optional): Stacked indices to differentiate; all when None.

    Returns:
        np.ndarray: dim x len(columns) matrix.
    """
    n = len(states[0])
    count = len(states)
    if feature.jac is not None:
        full = np.asarray(feature.jac(states), dtype=float).reshape(feature.dim, n * count)
        result = full if columns is None else full[:, columns]
    else:
        stacked = np.concatenate(states).astype(float)
        cols = range(n * count) if columns is None else columns
        result = np.empty((feature.dim, len(cols)))
        for j, c in enumerate(cols):
            original = stacked[c]
            stacked[c] = original + step
            plus = np.asarray(feature.eval(_split(stacked, n, count)), dtype=float)
            stacked[c] = original - step
            minus = np.asarray(feature.eval(_split(stacked, n, count)), dtype=float)
            stacked[c] = original
            result[:, j] = (plus - minus) / (2.0 * step)
    if not np.all(np.isfinite(result)):
        raise NumericalFailureError(feature.name, feature.time_index, "non-finite Jacobian")
    return result


def _merit(rows):
    return float(sum(row @ row for row in rows))


def _violation(kind, residual):
    if kind == EQ:
        return float(np.max(np.abs(residual))) if residual.size else 0.0
    return float(np.max(np.maximum(residual, 0.0))) if residual.size else 0.0


def feasibility_report(trajectory):
    """
    Constraint features whose violation exceeds the solver tolerance.

    Args:
        trajectory (Trajectory): A solved trajectory.

    Returns:
        list: Violation entries sorted by decreasing violation.
    """
    eps_h, eps_g = trajectory.tolerances
    above = [
        v for v in trajectory.violations
        if v.violation > (eps_h if v.kind == EQ else eps_g)
    ]
    return sorted(above, key=lambda v: (-v.violation, v.feature, v.time_index))


class _Layout:
    """
    Maps free (timestep, dimension) pairs of the state matrix onto the decision vector.
    """

    def __init__(self, problem):
        scene = problem.scene
        T = problem.horizon
        n = scene.dim
        free = np.zeros((T + 1, n), dtype=bool)
        first = 0 if T == 0 else 1
        free[first:, :scene.n_joints] = True

        attach_times = {}
        detach_times = {}
        for event in problem.switches:
            if event.type == ATTACH:
                attach_times[event.child_id] = event.time_index
            elif event.type == DETACH:
                detach_times[event.child_id] = event.time_index

        for obj_id in scene.object_ids:
            if obj_id in scene.attachments:
                continue
            cols = scene.object_slice(obj_id)
            if obj_id in problem.free_objects:
                free[first:, cols] = True
            elif obj_id in attach_times:
                end = detach_times.get(obj_id, T + 1)
                for t in range(attach_times[obj_id] + 1, min(end, T + 1)):
                    free[t, cols] = True

        self.free = free
        self.n = n
        self.index = -np.ones((T + 1, n), dtype=int)
        self.index[free] = np.arange(int(free.sum()))
        self.size = int(free.sum())


def _dense_from_banded(ab):
    """
    Symmetric dense matrix from upper banded storage, for the fallback solve.
    """
    u = ab.shape[0] - 1
    size = ab.shape[1]
    dense = np.zeros((size, size))
    for k in range(u + 1):
        cols = np.arange(k, size)
        dense[cols - k, cols] = ab[u - k, k:]
        dense[cols, cols - k] = ab[u - k, k:]
    return dense


def _solve_banded_system(ab, rhs):
    try:
        return solveh_banded(ab, rhs, lower=False, check_finite=False)
    except (LinAlgError, ValueError):
        return np.linalg.lstsq(_dense_from_banded(ab), rhs, rcond=None)[0]


class _Solver:
    def __init__(self, problem, settings):
        self.problem = problem
        self.settings = settings
        self.layout = _Layout(problem)
        scene = problem.scene
        T = problem.horizon
        if problem.initial_states is not None:
            rows = [scene.pack(c) for c in problem.initial_states]
        else:
            rows = [scene.pack(problem.init)] * (T + 1)
        self.X = np.array(rows, dtype=float)
        self.X[0] = scene.pack(problem.init)
        theta_cols = [scene.n_joints + 3 * i + 2 for i in range(len(scene.object_ids))]
        if theta_cols:
            self.X[:, theta_cols] = np.unwrap(self.X[:, theta_cols], axis=0)

        n = self.layout.n
        self.entries = []
        bandwidth = 0
        for feature in problem.features:
            t0 = feature.time_index - feature.order
            local_cols = []
            global_vars = []
            for s in range(feature.order + 1):
                for d in range(n):
                    idx = self.layout.index[t0 + s, d]
                    if idx >= 0:
                        local_cols.append(s * n + d)
                        global_vars.append(idx)
            if global_vars:
                bandwidth = max(bandwidth, max(global_vars) - min(global_vars))
            self.entries.append((feature, t0, np.array(local_cols, dtype=int), np.array(global_vars, dtype=int)))
        self.bandwidth = bandwidth
        self.lam = [np.zeros(f.dim) for f in problem.features]

    def _states(self, X, t0, order):
        return [X[t0 + s] for s in range(order + 1)]

    def residuals(self, X):
        values = []
        for feature, t0, _, _ in self.entries:
            r = np.asarray(feature.eval(self._states(X, t0, feature.order)), dtype=float).reshape(-1)
            if r.shape[0] != feature.dim or not np.all(np.isfinite(r)):
                raise NumericalFailureError(feature.name, feature.time_index, "non-finite or mis-sized residual")
            values.append(r)
        return values

    def merit_terms(self, values, mu):
        rows = []
        for (feature, _, _, _), r, lam in zip(self.entries, values, self.lam):
            if feature.kind == COST:
                rows.append(r)
            elif feature.kind == EQ:
                rows.append(math.sqrt(mu) * (r + lam / (2.0 * mu)))
            else:
                rows.append(math.sqrt(mu) * np.maximum(0.0, r + lam / (2.0 * mu)))
        return rows

    def normal_equations(self, X, values, rows, mu):
        """
        Gauss-Newton system J^T J, J^T r in upper banded storage.

        Each feature only touches the decision variables of its k+1 states, so
        its block is scattered straight into the band.
        """
        size = self.layout.size
        u = min(self.bandwidth, size - 1)
        ab = np.zeros((u + 1, size))
        g = np.zeros(size)
        for (feature, t0, local_cols, global_vars), r, row, lam in zip(self.entries, values, rows, self.lam):
            if not local_cols.size:
                continue
            J = jacobian(feature, self._states(X, t0, feature.order), self.settings.fd_step, local_cols)
            if feature.kind == EQ:
                J = math.sqrt(mu) * J
            elif feature.kind == INEQ:
                active = (r + lam / (2.0 * mu)) > 0.0
                J = math.sqrt(mu) * J * active[:, None]
            np.add.at(g, global_vars, J.T @ row)
            i, j = np.triu_indices(global_vars.size)
            # global_vars ascend, so gi <= gj
            np.add.at(ab, (u + global_vars[i] - global_vars[j], global_vars[j]), (J.T @ J)[i, j])
        return ab, g

    def step(self, X, delta):
        X_new = X.copy()
        X_new[self.layout.free] += delta
        return X_new

    def inner(self, mu):
        settings = self.settings
        values = self.residuals(self.X)
        rows = self.merit_terms(values, mu)
        merit = _merit(rows)
        if self.layout.size == 0:
            return 0, merit
        ab, g = self.normal_equations(self.X, values, rows, mu)
        damping = 0.0
        accepted = 0
        for _ in range(settings.max_inner):
            if damping == 0.0 and not np.all(ab[-1] > 0.0):
                damping = settings.damping
            system = ab
            if damping > 0.0:
                system = ab.copy()
                system[-1] += damping
            delta = _solve_banded_system(system, -g)
            if not np.all(np.isfinite(delta)) or np.max(np.abs(delta)) < settings.step_tol:
                break
            X_new = self.step(self.X, delta)
            values_new = self.residuals(X_new)
            rows_new = self.merit_terms(values_new, mu)
            merit_new = _merit(rows_new)
            if merit_new <= merit:
                self.X, values, rows = X_new, values_new, rows_new
                improvement = merit - merit_new
                merit = merit_new
                accepted += 1
                damping = 0.0 if damping <= settings.damping else damping / 10.0
                if improvement <= 1e-14 * (1.0 + merit):
                    break
                ab, g = self.normal_equations(self.X, values, rows, mu)
            else:
                damping = settings.damping if damping == 0.0 else damping * 10.0
                if damping > 1e10:
                    break
        return accepted, merit

    def violations(self, values):
        result = []
        for (feature, _, local_cols, _), r in zip(self.entries, values):
            if feature.kind == COST or local_cols.size == 0:
                continue
            result.append(Violation(feature.name, feature.kind, feature.time_index, _violation(feature.kind, r)))
        return result

    def run(self):
        settings = self.settings
        mu = settings.mu0
        previous = math.inf
        history = []
        for outer in range(settings.max_outer):
            steps, merit = self.inner(mu)
            values = self.residuals(self.X)
            table = self.violations(values)
            max_eq = max((v.violation for v in table if v.kind == EQ), default=0.0)
            max_ineq = max((v.violation for v in table if v.kind == INEQ), default=0.0)
            cost = sum(float(r @ r) for (f, _, _, _), r in zip(self.entries, values) if f.kind == COST)
            entry = {
                "outer": outer, "steps": steps, "merit": merit, "cost": cost,
                "max_eq": max_eq, "max_ineq": max_ineq, "mu": mu,
            }
            history.append(entry)
            logger.debug("Solver iteration", extra=entry)
            if max_eq <= settings.eps_h and max_ineq <= settings.eps_g:
                break
            for i, ((feature, _, _, _), r) in enumerate(zip(self.entries, values)):
                if feature.kind == EQ:
                    self.lam[i] = self.lam[i] + 2.0 * mu * r
                elif feature.kind == INEQ:
                    self.lam[i] = np.maximum(0.0, self.lam[i] + 2.0 * mu * r)
            violation = max(max_eq, max_ineq)
            # grow the penalty unless the violation at least halved
            if violation >= 0.5 * previous:
                mu = min(mu * settings.mu_growth, settings.mu_max)
            previous = violation
        return history, table, max_eq, max_ineq, cost


def solve(problem, settings=None):
    """
    Solves a k-order trajectory problem with an augmented Lagrangian around damped Gauss-Newton.

    Args:
        problem (TrajectoryProblem): Features, horizon and start configuration.
        settings (SolverSettings, optional): Tolerances and iteration limits.

    Returns:
        Trajectory: The best trajectory found with its feasibility verdict.
    """
    settings = settings or SolverSettings()
    problem.validate()
    solver = _Solver(problem, settings)
    history, table, max_eq, max_ineq, cost = solver.run()
    scene = problem.scene
    states = [scene.sync(scene.unpack(row)) for row in solver.X]
    feasible = max_eq <= settings.eps_h and max_ineq <= settings.eps_g
    logger.debug(
        "Solved trajectory problem",
        extra={"horizon": problem.horizon, "feasible": feasible, "cost": cost, "max_eq": max_eq, "max_ineq": max_ineq},
    )
    return Trajectory(
        states=states,
        vectors=solver.X.copy(),
        switch_events=list(problem.switches),
        feasible=feasible,
        max_eq_violation=max_eq,
        max_ineq_violation=max_ineq,
        cost=cost,
        violations=table,
        history=history,
        tolerances=(settings.eps_h, settings.eps_g),
    )
