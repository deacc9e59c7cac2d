"""
Linear model evaluation and the nonlinear radial power-flow oracle.

The oracle is a backward/forward sweep over complex phase voltages with
constant-power injections. Voltages are carried as drops from the slack
phasors, V = V0 - D, so a no-load feeder returns the slack voltages exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import DimensionError, NoConvergence
from .feeder import Feeder, phase_label
from .sensitivity import OMEGA_POWERS, ROTATION, SensitivityPack

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 100


@dataclass(frozen=True, eq=False)
class PowerState:
    """Phase-expanded injections, squared voltage magnitudes and substation power."""

    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    P0: float
    iterations: int = 0


@dataclass(frozen=True, eq=False)
class BranchState:
    """
    Flows on the line into `to_node`, one entry per line phase.

    S is the complex power leaving the sending end, ell the squared current
    magnitude and loss the per-phase series loss (zJ)^phi conj(J^phi).
    v_from holds the squared sending-end voltages.
    """

    from_node: int
    to_node: int
    phases: tuple[int, ...]
    S: np.ndarray
    ell: np.ndarray
    loss: np.ndarray
    v_from: np.ndarray


def _check_length(feeder_or_pack, *vectors):
    n = feeder_or_pack.n_xi if isinstance(feeder_or_pack, Feeder) else feeder_or_pack.n
    for vector in vectors:
        if np.shape(vector) != (n,):
            raise DimensionError(f"Expected a vector of length {n}, got shape {np.shape(vector)}")


def linear_voltages(pack: SensitivityPack, p, q, v_tilde=None) -> np.ndarray:
    """v = R p + X q + v_tilde."""
    v_tilde = pack.v_tilde if v_tilde is None else np.asarray(v_tilde, dtype=float)
    _check_length(pack, p, q, v_tilde)
    return pack.R @ np.asarray(p, dtype=float) + pack.X @ np.asarray(q, dtype=float) + v_tilde


def substation_power(feeder: Feeder, p) -> float:
    """P0 = -sum of inelastic injections - sum of controllable injections."""
    _check_length(feeder, p)
    return float(-feeder.inelastic_total - np.sum(p))


def _injections(feeder: Feeder, p, q) -> tuple[np.ndarray, np.ndarray]:
    s = np.zeros((feeder.n_nodes, 3), dtype=complex)
    s[feeder.xi_nodes, feeder.xi_phases] = np.asarray(p, dtype=float) + 1j * np.asarray(q, dtype=float)
    mask = np.zeros((feeder.n_nodes, 3), dtype=bool)
    for node, phases in enumerate(feeder.node_phases):
        mask[node, list(phases)] = True
    return s, mask


def _slack_phasors(feeder: Feeder) -> np.ndarray:
    """Slack voltages rotated by 0, -2pi/3 and +2pi/3 for phases a, b, c."""
    return np.sqrt(feeder.slack_voltage2) * np.array(OMEGA_POWERS)


def _backward(feeder: Feeder, s, mask, V) -> np.ndarray:
    """Currents into every node from its parent line; row 0 is the total leaving the slack."""
    J = np.zeros((feeder.n_nodes, 3), dtype=complex)
    for node in reversed(feeder.preorder[1:]):
        m = mask[node]
        J[node, m] -= np.conj(s[node, m] / V[node, m])
        J[feeder.parent[node]] += J[node]
    return J


def nonlinear_solve(
    feeder: Feeder,
    p,
    q,
    losses: bool = True,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> tuple[PowerState, list[BranchState]]:
    """
    Solve the radial power flow for the given injections.

    With losses=False the sweep drops the series losses and reduces to the
    lossless recursion of the linear model. Raises NoConvergence when the
    voltage update does not fall below `tol` within `max_iters` sweeps.
    """
    _check_length(feeder, p, q)
    if not losses:
        return _lossless_solve(feeder, p, q)

    s, mask = _injections(feeder, p, q)
    V0 = _slack_phasors(feeder)
    z = {node: feeder.line_into[node].full_matrix() for node in feeder.preorder[1:]}
    D = np.zeros((feeder.n_nodes, 3), dtype=complex)
    V = np.where(mask, V0[None, :], 0.0)

    with np.errstate(all="ignore"):
        for iteration in range(1, max_iters + 1):
            J = _backward(feeder, s, mask, V)
            D_new = np.zeros_like(D)
            for node in feeder.preorder[1:]:
                D_new[node] = np.where(mask[node], D_new[feeder.parent[node]] + z[node] @ J[node], 0.0)
            V_new = np.where(mask, V0[None, :] - D_new, 0.0)
            change = np.abs(V_new - V).max()
            D, V = D_new, V_new
            if not np.isfinite(change):
                raise NoConvergence(f"Power flow diverged after {iteration} sweeps (non-finite voltages)")
            if change < tol:
                break
        else:
            raise NoConvergence(f"Power flow did not converge in {max_iters} sweeps (last change {change:.3e})")

        J = _backward(feeder, s, mask, V)

    nodes, phases = feeder.xi_nodes, feeder.xi_phases
    drop = D[nodes, phases]
    slack = V0[phases]
    # |V0 - D|^2 with |V0|^2 taken from the declared slack value
    v = feeder.slack_voltage2[phases] - 2.0 * (np.conj(slack) * drop).real + np.abs(drop) ** 2
    P0 = float(-feeder.inelastic_total + (V0 * np.conj(J[0])).real.sum())

    branches = []
    for node in feeder.preorder[1:]:
        line = feeder.line_into[node]
        idx = list(line.phases)
        current = J[node, idx]
        sending = V[line.from_node, idx]
        branches.append(
            BranchState(
                from_node=line.from_node,
                to_node=node,
                phases=line.phases,
                S=sending * np.conj(current),
                ell=np.abs(current) ** 2,
                loss=(z[node] @ J[node])[idx] * np.conj(current),
                v_from=np.abs(sending) ** 2,
            )
        )
    branches.sort(key=lambda b: b.to_node)
    state = PowerState(p=np.asarray(p, dtype=float), q=np.asarray(q, dtype=float), v=v, P0=P0, iterations=iteration)
    logger.debug(f"Power flow converged in {iteration} sweeps")
    return state, branches


def _lossless_solve(feeder: Feeder, p, q):
    s, mask = _injections(feeder, p, q)
    downstream = s.copy()
    for node in reversed(feeder.preorder[1:]):
        downstream[feeder.parent[node]] += downstream[node]
    v = np.zeros((feeder.n_nodes, 3))
    v[0] = feeder.slack_voltage2
    branches = []
    for node in feeder.preorder[1:]:
        line = feeder.line_into[node]
        weight = np.conj(line.full_matrix()) * ROTATION
        below = downstream[node]
        update = 2.0 * weight.real @ below.real - 2.0 * weight.imag @ below.imag
        v[node] = np.where(mask[node], v[line.from_node] + update, 0.0)
        idx = list(line.phases)
        flow = -below[idx]
        v_from = v[line.from_node, idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            ell = np.where(v_from > 0, np.abs(flow) ** 2 / v_from, 0.0)
        branches.append(
            BranchState(
                from_node=line.from_node,
                to_node=node,
                phases=line.phases,
                S=flow,
                ell=ell,
                loss=np.zeros(len(idx), dtype=complex),
                v_from=v_from,
            )
        )
    branches.sort(key=lambda b: b.to_node)
    state = PowerState(
        p=np.asarray(p, dtype=float),
        q=np.asarray(q, dtype=float),
        v=v[feeder.xi_nodes, feeder.xi_phases],
        P0=substation_power(feeder, p),
    )
    return state, branches


def power_balance_residual(feeder: Feeder, branches: list[BranchState], p, q) -> float:
    """
    Largest mismatch of: inflow - loss = outflows - injection, over all nodes and phases.
    """
    s, _ = _injections(feeder, p, q)
    received = np.zeros((feeder.n_nodes, 3), dtype=complex)
    sent = np.zeros((feeder.n_nodes, 3), dtype=complex)
    for branch in branches:
        idx = list(branch.phases)
        received[branch.to_node, idx] += branch.S - branch.loss
        sent[branch.from_node, idx] += branch.S
    residual = received - sent + s
    residual[0] = 0.0
    return float(np.abs(residual).max(initial=0.0))


def model_discrepancy(feeder: Feeder, pack: SensitivityPack, p, q, **sweep_options) -> tuple[float, float]:
    """Sampled linearization error: (||v - v_hat||_2, |P0 - P0_hat|) at one operating point."""
    state, _ = nonlinear_solve(feeder, p, q, **sweep_options)
    v_lin = linear_voltages(pack, p, q)
    return float(np.linalg.norm(v_lin - state.v)), abs(substation_power(feeder, p) - state.P0)


def write_flows_csv(feeder: Feeder, branches: list[BranchState], path):
    rows = []
    for branch in branches:
        name = f"{feeder.node_ids[branch.from_node]}->{feeder.node_ids[branch.to_node]}"
        for k, phase in enumerate(branch.phases):
            rows.append(
                {
                    "line": name,
                    "phase": phase_label(phase),
                    "P": branch.S[k].real,
                    "Q": branch.S[k].imag,
                    "ell": branch.ell[k],
                }
            )
    frame = pd.DataFrame(rows, columns=["line", "phase", "P", "Q", "ell"])
    frame.to_csv(path, index=False, float_format="%.17g")
