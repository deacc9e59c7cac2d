"""
Regularized primal-dual voltage regulation.

The iterate z stacks (p, q, mu_lo, mu_hi) over the phase-expanded index.
One step is

    p      <- proj(p - eps (2 cp (p - p0) - C0'(P0) + R^T (mu_hi - mu_lo)))
    q      <- proj(q - eps (2 cq (q - q0) + X^T (mu_hi - mu_lo)))
    mu_lo  <- max(0, mu_lo + eps_d (v_lower - v - eta mu_lo))
    mu_hi  <- max(0, mu_hi + eps_d (v - v_upper - eta mu_hi))

followed by a refresh of v and P0, from the linear model or from the
nonlinear sweep in feedback mode.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import pandas as pd

from .config import SolverConfig
from .errors import CurvatureUnavailable, DimensionError, StepsizeWarning
from .feeder import Box, FeederCase, QuadraticCost, phase_label
from .powerflow import linear_voltages, nonlinear_solve, substation_power
from .projection import FeasibleSets
from .sensitivity import SensitivityPack, build_sensitivity
from .utils import dump_json

logger = logging.getLogger(__name__)

# Nodes without a device keep a fixed zero injection.
FIXED_ZERO = Box(0.0, 0.0, 0.0, 0.0)
UNIT_COST = QuadraticCost()

STATUS_CONVERGED = "converged"
STATUS_MAX_ITERS = "max_iters"
STATUS_DIVERGED = "diverged"

POWER_ITERATION_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class DeviceBlock:
    """Per-coordinate cost, bound and voltage-limit data for a set of phase-expanded coordinates."""

    cp: np.ndarray
    cq: np.ndarray
    p_nom: np.ndarray
    q_nom: np.ndarray
    sets: FeasibleSets
    v_lower: np.ndarray
    v_upper: np.ndarray

    def take(self, idx) -> DeviceBlock:
        idx = np.asarray(idx, dtype=np.int64)
        return DeviceBlock(
            cp=self.cp[idx],
            cq=self.cq[idx],
            p_nom=self.p_nom[idx],
            q_nom=self.q_nom[idx],
            sets=self.sets.take(idx),
            v_lower=self.v_lower[idx],
            v_upper=self.v_upper[idx],
        )

    def cost(self, p, q) -> float:
        return float(np.sum(self.cp * (p - self.p_nom) ** 2 + self.cq * (q - self.q_nom) ** 2))


@dataclass(eq=False)
class OpfProblem:
    """Everything one solve needs: the case, its sensitivities and the vectorized device data."""

    case: FeederCase
    pack: Optional[SensitivityPack]
    config: SolverConfig
    block: DeviceBlock
    controllable: np.ndarray

    @property
    def feeder(self):
        return self.case.feeder

    @property
    def substation_cost(self):
        return self.case.substation_cost

    @property
    def n(self) -> int:
        return self.case.feeder.n_xi


def build_problem(
    case: FeederCase,
    config: SolverConfig,
    pack: Optional[SensitivityPack] = None,
    sensitivities: bool = True,
) -> OpfProblem:
    """
    Vectorize the case's devices over the phase-expanded index.

    With sensitivities=False no dense matrices are built; such a problem can
    drive the hierarchical coupling steps but not a linear-mode solve.
    """
    feeder = case.feeder
    if pack is None and sensitivities:
        pack = build_sensitivity(feeder)
    if pack is not None and pack.n != feeder.n_xi:
        raise DimensionError(f"Sensitivities cover {pack.n} coordinates, the feeder has {feeder.n_xi}")
    sets, costs, controllable = [], [], []
    for key in feeder.xi_index:
        device = case.device_at.get(key)
        sets.append(device.feasible if device else FIXED_ZERO)
        costs.append(device.cost if device else UNIT_COST)
        controllable.append(device is not None)
    n = feeder.n_xi
    block = DeviceBlock(
        cp=np.array([c.cp for c in costs], dtype=float),
        cq=np.array([c.cq for c in costs], dtype=float),
        p_nom=np.array([c.p0 for c in costs], dtype=float),
        q_nom=np.array([c.q0 for c in costs], dtype=float),
        sets=FeasibleSets.from_sets(sets),
        v_lower=np.full(n, config.v_lower),
        v_upper=np.full(n, config.v_upper),
    )
    return OpfProblem(case=case, pack=pack, config=config, block=block, controllable=np.array(controllable))


########################################
# STATE
########################################


@dataclass(frozen=True, eq=False)
class DualState:
    mu_lo: np.ndarray
    mu_hi: np.ndarray


@dataclass(frozen=True, eq=False)
class IterateState:
    """One iterate plus the voltages and substation power it produces."""

    p: np.ndarray
    q: np.ndarray
    mu_lo: np.ndarray
    mu_hi: np.ndarray
    v: np.ndarray
    P0: float
    iteration: int = 0

    @property
    def duals(self) -> DualState:
        return DualState(self.mu_lo, self.mu_hi)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.p, self.q, self.mu_lo, self.mu_hi])


def split_stacked(z, n: int):
    z = np.asarray(z, dtype=float)
    if z.shape != (4 * n,):
        raise DimensionError(f"Expected a stacked vector of length {4 * n}, got shape {z.shape}")
    return z[:n], z[n : 2 * n], z[2 * n : 3 * n], z[3 * n :]


def refresh(problem: OpfProblem, p, q) -> tuple[np.ndarray, float]:
    """Voltages and substation power for the given injections."""
    if problem.config.feedback:
        state, _ = nonlinear_solve(
            problem.feeder,
            p,
            q,
            tol=problem.config.sweep_tol,
            max_iters=problem.config.sweep_max_iters,
        )
        return state.v, state.P0
    if problem.pack is None:
        raise DimensionError("Linear mode needs sensitivities; build the problem with sensitivities=True")
    return linear_voltages(problem.pack, p, q), substation_power(problem.feeder, p)


def make_state(problem: OpfProblem, p, q, mu_lo, mu_hi, iteration: int = 0) -> IterateState:
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    v, P0 = refresh(problem, p, q)
    return IterateState(
        p=p,
        q=q,
        mu_lo=np.asarray(mu_lo, dtype=float),
        mu_hi=np.asarray(mu_hi, dtype=float),
        v=v,
        P0=P0,
        iteration=iteration,
    )


def initial_state(problem: OpfProblem, rng: Optional[np.random.Generator] = None) -> IterateState:
    """
    Start from the projected nominal injections with zero duals, or from a
    random point when a generator is given: primal points drawn inside each
    device's box (the disk radius stands in for unbounded q) and projected,
    duals drawn in [0, 1).
    """
    block, n = problem.block, problem.n
    if rng is None:
        p, q = block.sets.project(block.p_nom, block.q_nom)
        return make_state(problem, p, q, np.zeros(n), np.zeros(n))
    sets = block.sets
    r = sets.radius
    p_lo, p_hi = np.maximum(sets.p_lo, -r), np.minimum(sets.p_hi, r)
    q_lo, q_hi = np.maximum(sets.q_lo, -r), np.minimum(sets.q_hi, r)
    p = p_lo + (p_hi - p_lo) * rng.random(n)
    q = q_lo + (q_hi - q_lo) * rng.random(n)
    p, q = sets.project(p, q)
    return make_state(problem, p, q, rng.random(n), rng.random(n))


########################################
# OPERATOR AND STEP
########################################


def cost_gradients(block: DeviceBlock, p, q) -> tuple[np.ndarray, np.ndarray]:
    return 2.0 * block.cp * (p - block.p_nom), 2.0 * block.cq * (q - block.q_nom)


def local_update(block: DeviceBlock, p, q, mu_lo, mu_hi, v, alpha, beta, dC0: float, config: SolverConfig):
    """
    The per-coordinate projected step, given the couplings alpha = R^T d and
    beta = X^T d (d = mu_hi - mu_lo) and the substation cost slope.

    Works on any subset of coordinates, which is how nodes of the
    hierarchical engine apply it to their own phases.
    """
    grad_p, grad_q = cost_gradients(block, p, q)
    p_new, q_new = block.sets.project(
        p - config.eps * (grad_p - dC0 + alpha),
        q - config.eps * (grad_q + beta),
    )
    eps_d, eta = config.eps_dual, config.eta
    mu_lo_new = np.maximum(0.0, mu_lo + eps_d * (block.v_lower - v - eta * mu_lo))
    mu_hi_new = np.maximum(0.0, mu_hi + eps_d * (v - block.v_upper - eta * mu_hi))
    return p_new, q_new, mu_lo_new, mu_hi_new


def gradient_operator_T(state: IterateState, problem: OpfProblem) -> np.ndarray:
    """T(z) at the state, using the state's own v and P0 (oracle values in feedback mode)."""
    block, pack, eta = problem.block, problem.pack, problem.config.eta
    n = problem.n
    for name in ("p", "q", "mu_lo", "mu_hi", "v"):
        if np.shape(getattr(state, name)) != (n,):
            raise DimensionError(f"State field {name} must have length {n}")
    d = state.mu_hi - state.mu_lo
    grad_p, grad_q = cost_gradients(block, state.p, state.q)
    dC0 = problem.substation_cost.derivative(state.P0)
    return np.concatenate(
        [
            grad_p - dC0 + pack.R.T @ d,
            grad_q + pack.X.T @ d,
            -(block.v_lower - state.v - eta * state.mu_lo),
            -(state.v - block.v_upper - eta * state.mu_hi),
        ]
    )


def operator_at(problem: OpfProblem, z) -> np.ndarray:
    """T evaluated at a stacked vector, refreshing v and P0 from its injections."""
    p, q, mu_lo, mu_hi = split_stacked(z, problem.n)
    return gradient_operator_T(make_state(problem, p, q, mu_lo, mu_hi), problem)


def primal_dual_step(state: IterateState, problem: OpfProblem) -> IterateState:
    d = state.mu_hi - state.mu_lo
    alpha = problem.pack.R.T @ d
    beta = problem.pack.X.T @ d
    dC0 = problem.substation_cost.derivative(state.P0)
    p, q, mu_lo, mu_hi = local_update(
        problem.block, state.p, state.q, state.mu_lo, state.mu_hi, state.v, alpha, beta, dC0, problem.config
    )
    return make_state(problem, p, q, mu_lo, mu_hi, iteration=state.iteration + 1)


def lagrangian(problem: OpfProblem, state: IterateState) -> float:
    """L_eta = sum C + C0(P0) + mu_lo.(v_lower - v) + mu_hi.(v - v_upper) - eta/2 |mu|^2."""
    block = problem.block
    return float(
        block.cost(state.p, state.q)
        + problem.substation_cost.value(state.P0)
        + state.mu_lo @ (block.v_lower - state.v)
        + state.mu_hi @ (state.v - block.v_upper)
        - 0.5 * problem.config.eta * (state.mu_lo @ state.mu_lo + state.mu_hi @ state.mu_hi)
    )


def total_cost(problem: OpfProblem, state: IterateState) -> float:
    """Device costs plus the substation cost, without the dual terms."""
    return problem.block.cost(state.p, state.q) + float(problem.substation_cost.value(state.P0))


def voltage_violation(problem: OpfProblem, v) -> tuple[float, float]:
    """(largest under-voltage, largest over-voltage), both >= 0, in p.u.^2."""
    block = problem.block
    under = float(np.max(block.v_lower - v, initial=0.0))
    over = float(np.max(v - block.v_upper, initial=0.0))
    return max(under, 0.0), max(over, 0.0)


########################################
# CENTRALIZED SOLVE
########################################


@dataclass
class TrajectoryRow:
    iter: int
    step_norm: float
    P0: float
    max_undervolt: float
    max_overvolt: float
    lagrangian: float


TRAJECTORY_COLUMNS = ["iter", "step_norm", "P0", "max_undervolt", "max_overvolt", "lagrangian"]


@dataclass
class SolveResult:
    final: IterateState
    status: str
    trajectory: list[TrajectoryRow] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    states: list[IterateState] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return self.final.iteration

    @property
    def p0_series(self) -> np.ndarray:
        return np.array([row.P0 for row in self.trajectory])


def should_stop(dP0: float, step_inf: float, config: SolverConfig) -> bool:
    """Both the substation power and the iterate have stopped moving."""
    return abs(dP0) < config.sigma and step_inf < config.sigma_z


def is_diverging(step_norm: float, config: SolverConfig) -> bool:
    return not math.isfinite(step_norm) or step_norm > config.divergence_limit


class IterationMonitor:
    """
    Records the trajectory and decides the run status from consecutive iterates.

    Shared by the centralized and hierarchical engines so both produce the
    same rows for the same iterates.
    """

    def __init__(self, problem: OpfProblem, record_states: bool = False):
        self.problem = problem
        self.record_states = record_states
        self.trajectory: list[TrajectoryRow] = []
        self.states: list[IterateState] = []
        self.status: Optional[str] = None

    def observe(self, previous: IterateState, current: IterateState, stop: Optional[bool] = None) -> bool:
        """Log the transition; return True when the run is over. `stop` overrides the stopping rule."""
        with np.errstate(all="ignore"):
            step = current.stacked() - previous.stacked()
            step_norm = float(np.linalg.norm(step))
            step_inf = float(np.max(np.abs(step), initial=0.0))
        under, over = voltage_violation(self.problem, current.v)
        self.trajectory.append(
            TrajectoryRow(
                iter=current.iteration,
                step_norm=step_norm,
                P0=current.P0,
                max_undervolt=under,
                max_overvolt=over,
                lagrangian=lagrangian(self.problem, current),
            )
        )
        if self.record_states:
            self.states.append(current)
        logger.debug(f"iter {current.iteration}: step {step_norm:.3e}, P0 {current.P0:.9f}")
        if is_diverging(step_norm, self.problem.config):
            self.status = STATUS_DIVERGED
            return True
        if stop is None:
            stop = should_stop(current.P0 - previous.P0, step_inf, self.problem.config)
        if stop:
            self.status = STATUS_CONVERGED
            return True
        return False

    def result(self, final: IterateState, warning_messages: list[str]) -> SolveResult:
        return SolveResult(
            final=final,
            status=self.status or STATUS_MAX_ITERS,
            trajectory=self.trajectory,
            warnings=list(warning_messages),
            states=self.states,
        )


def check_stepsize(problem: OpfProblem) -> list[str]:
    """Warn (and return the messages) when the largest stepsize is not below 2M/L^2.

    The dual block moves with eps * eps_dual_mult, so a multiplier above one
    tightens the check.
    """
    if not problem.config.check_stepsize:
        return []
    constants = estimate_constants(problem)
    largest = max(problem.config.eps, problem.config.eps_dual)
    if largest < constants.stepsize_bound:
        return []
    message = (
        f"Stepsize {largest:g} (eps={problem.config.eps:g}, eps_dual_mult={problem.config.eps_dual_mult:g}) "
        f"is not below 2M/L^2 = {constants.stepsize_bound:.6g} "
        f"(M={constants.M:.6g}, L={constants.L:.6g}); convergence is not guaranteed"
    )
    logger.warning(message)
    warnings.warn(message, StepsizeWarning, stacklevel=3)
    return [message]


def solve_centralized(
    problem: OpfProblem,
    initial: Optional[IterateState] = None,
    record_states: bool = False,
    callback: Optional[Callable[[IterateState], None]] = None,
) -> SolveResult:
    """
    Iterate the primal-dual step until the stopping rule holds, the run
    diverges, or max_iters is reached.
    """
    config = problem.config
    warning_messages = check_stepsize(problem)
    state = initial_state(problem) if initial is None else initial
    monitor = IterationMonitor(problem, record_states=record_states)
    logger.info(f"Centralized solve: {problem.n} coordinates, eps={config.eps:g}, mode={config.mode}")
    for _ in range(config.max_iters):
        previous, state = state, primal_dual_step(state, problem)
        if callback is not None:
            callback(state)
        if monitor.observe(previous, state):
            break
    result = monitor.result(state, warning_messages)
    logger.info(f"Centralized solve finished: {result.status} after {result.iterations} iterations")
    return result


########################################
# CONVERGENCE CONSTANTS
########################################


@dataclass(frozen=True)
class ConvergenceConstants:
    """Strong monotonicity M and Lipschitz L of T, with the stepsize they allow."""

    M: float
    L: float

    @property
    def stepsize_bound(self) -> float:
        return 2.0 * self.M / self.L**2

    def contraction(self, eps: float) -> float:
        """Delta = 1 + eps^2 L^2 - 2 eps M; below 1 exactly when eps < 2M/L^2."""
        return 1.0 + eps**2 * self.L**2 - 2.0 * eps * self.M

    def feedback_radius(self, eps: float, rho: float) -> float:
        """Limiting squared distance rho / (2M/eps - L^2) of feedback-mode iterates."""
        denominator = 2.0 * self.M / eps - self.L**2
        return rho / denominator if denominator > 0 else math.inf

    def feedback_distance_bound(self, eps: float, rho: float) -> float:
        """
        Squared distance (eps sqrt(rho) / (1 - sqrt(Delta)))^2 that feedback-mode
        iterates started at the linear-model saddle never exceed, when every
        step's squared operator mismatch is at most rho. Never below
        feedback_radius(eps, rho).
        """
        delta = self.contraction(eps)
        if not 0 <= delta < 1:
            return math.inf
        return (eps * math.sqrt(rho) / (1.0 - math.sqrt(delta))) ** 2


def _jacobian_products(problem: OpfProblem, hp, hq):
    R, X = problem.pack.R, problem.pack.X
    two_alpha = 2.0 * problem.substation_cost.alpha
    eta = problem.config.eta
    n = problem.n

    def apply(x):
        p, q, lo, hi = x[:n], x[n : 2 * n], x[2 * n : 3 * n], x[3 * n :]
        d = hi - lo
        flow = R @ p + X @ q
        return np.concatenate([hp * p + two_alpha * p.sum() + R.T @ d, hq * q + X.T @ d, flow + eta * lo, eta * hi - flow])

    def apply_transpose(y):
        yp, yq, yl, yh = y[:n], y[n : 2 * n], y[2 * n : 3 * n], y[3 * n :]
        e = yl - yh
        flow = R @ yp + X @ yq
        return np.concatenate([hp * yp + two_alpha * yp.sum() + R.T @ e, hq * yq + X.T @ e, eta * yl - flow, flow + eta * yh])

    return apply, apply_transpose


def estimate_constants(
    problem: OpfProblem,
    tol: float = POWER_ITERATION_TOL,
    max_iters: int = 10000,
    seed: int = 0,
) -> ConvergenceConstants:
    """
    M is the smallest curvature of the symmetric part of T: the cost
    curvatures 2cp, 2cq and the regularizer eta. The substation cost only
    adds a positive semidefinite term, so it leaves M unchanged.

    L is the largest singular value of the Jacobian of T, found by power
    iteration on J^T J without forming J.
    """
    hp, hq = 2.0 * problem.block.cp, 2.0 * problem.block.cq
    curvatures = np.concatenate([hp, hq])
    if not np.all(np.isfinite(curvatures)) or np.any(curvatures <= 0):
        raise CurvatureUnavailable("Every cost needs a finite, strictly positive curvature")
    M = float(min(curvatures.min(), problem.config.eta))

    apply, apply_transpose = _jacobian_products(problem, hp, hq)
    x = np.random.default_rng(seed).standard_normal(4 * problem.n)
    x /= np.linalg.norm(x)
    sigma2 = 0.0
    for _ in range(max_iters):
        y = apply_transpose(apply(x))
        estimate = float(np.linalg.norm(y))
        if estimate == 0.0:
            break
        x = y / estimate
        if abs(estimate - sigma2) <= tol * estimate:
            sigma2 = estimate
            break
        sigma2 = estimate
    L = math.sqrt(sigma2)
    if M > L * (1.0 + 1e-6):
        raise CurvatureUnavailable(f"Estimated M={M:g} exceeds L={L:g}; the curvature data is inconsistent")
    logger.debug(f"Convergence constants: M={M:.6g}, L={L:.6g}")
    return ConvergenceConstants(M=M, L=L)


def stepsize_for_accuracy(constants: ConvergenceConstants, rho: float, radius: float) -> float:
    """The eps whose feedback-mode limiting squared distance equals `radius`: 2M r / (rho + L^2 r)."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    return 2.0 * constants.M * radius / (rho + constants.L**2 * radius)


########################################
# ARTIFACTS
########################################


def trajectory_frame(result: SolveResult) -> pd.DataFrame:
    return pd.DataFrame([vars(row) for row in result.trajectory], columns=TRAJECTORY_COLUMNS)


def write_trajectory_csv(result: SolveResult, path):
    trajectory_frame(result).to_csv(path, index=False, float_format="%.17g")


def final_state_dict(problem: OpfProblem, state: IterateState) -> dict:
    """(node.phase) -> {p, q, mu_lo, mu_hi, v}."""
    feeder = problem.feeder
    out = {}
    for k, (node, phase) in enumerate(feeder.xi_index):
        out[f"{feeder.node_ids[node]}.{phase_label(phase)}"] = {
            "p": float(state.p[k]),
            "q": float(state.q[k]),
            "mu_lo": float(state.mu_lo[k]),
            "mu_hi": float(state.mu_hi[k]),
            "v": float(state.v[k]),
        }
    return out


def write_final_state(problem: OpfProblem, state: IterateState, path):
    dump_json(final_state_dict(problem, state), path)


def summary_dict(problem: OpfProblem, result: SolveResult) -> dict:
    under, over = voltage_violation(problem, result.final.v)
    return {
        "iters": result.iterations,
        "status": result.status,
        "final_cost": total_cost(problem, result.final),
        "max_violation": max(under, over),
        "P0": result.final.P0,
    }
