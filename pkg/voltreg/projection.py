"""
Euclidean projection onto device feasible sets.

Every set is written as a box intersected with a disk centred at the origin
(an infinite radius for plain boxes, infinite q bounds for inverter and
storage sets). The projection onto such an intersection is one of: the point
itself, its projection onto the box, its projection onto the disk, or a point
where the circle crosses a box edge. The closest feasible candidate wins;
exact distance ties go to the larger q.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feeder import Device, FeasibleSet

FEASIBILITY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class FeasibleSets:
    """Box-and-disk bounds for a vector of (p, q) coordinates."""

    p_lo: np.ndarray
    p_hi: np.ndarray
    q_lo: np.ndarray
    q_hi: np.ndarray
    radius: np.ndarray

    @classmethod
    def from_sets(cls, sets: list[FeasibleSet]) -> FeasibleSets:
        bounds = np.array([s.box_disk() for s in sets], dtype=float).reshape(-1, 5)
        return cls(*(bounds[:, k].copy() for k in range(5)))

    def take(self, idx) -> FeasibleSets:
        return FeasibleSets(self.p_lo[idx], self.p_hi[idx], self.q_lo[idx], self.q_hi[idx], self.radius[idx])

    def contains(self, p, q, tol: float = 1e-9) -> np.ndarray:
        p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
        return (
            (p >= self.p_lo - tol)
            & (p <= self.p_hi + tol)
            & (q >= self.q_lo - tol)
            & (q <= self.q_hi + tol)
            & (p * p + q * q <= self.radius**2 + tol)
        )

    def project(self, p, q) -> tuple[np.ndarray, np.ndarray]:
        return project_box_disk(p, q, self.p_lo, self.p_hi, self.q_lo, self.q_hi, self.radius)


def _feasible(p, q, p_lo, p_hi, q_lo, q_hi, radius):
    tol = FEASIBILITY_TOL
    scale = np.where(np.isfinite(radius), radius * radius, 0.0)
    return (
        np.isfinite(p)
        & np.isfinite(q)
        & (p >= p_lo - tol)
        & (p <= p_hi + tol)
        & (q >= q_lo - tol)
        & (q <= q_hi + tol)
        & (p * p + q * q <= radius * radius + tol * (1.0 + scale))
    )


def project_box_disk(p, q, p_lo, p_hi, q_lo, q_hi, radius) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    r2 = radius * radius

    with np.errstate(invalid="ignore", divide="ignore"):
        norm = np.hypot(p, q)
        shrink = np.where(norm > radius, radius / norm, 1.0)
        candidates = [
            (p, q),
            (np.clip(p, p_lo, p_hi), np.clip(q, q_lo, q_hi)),
            (p * shrink, q * shrink),
        ]
        # circle crossings of the four box edges
        for edge in (p_lo, p_hi):
            other = np.sqrt(r2 - edge * edge)
            candidates.append((edge, other))
            candidates.append((edge, -other))
        for edge in (q_lo, q_hi):
            other = np.sqrt(r2 - edge * edge)
            candidates.append((other, edge))
            candidates.append((-other, edge))

        best_p = np.full(p.shape, np.nan)
        best_q = np.full(p.shape, np.nan)
        best_d = np.full(p.shape, np.inf)
        for cand_p, cand_q in candidates:
            cand_p = np.broadcast_to(cand_p, p.shape)
            cand_q = np.broadcast_to(cand_q, p.shape)
            ok = _feasible(cand_p, cand_q, p_lo, p_hi, q_lo, q_hi, radius)
            dist = np.where(ok, (cand_p - p) ** 2 + (cand_q - q) ** 2, np.inf)
            better = ok & ((dist < best_d) | ((dist == best_d) & (cand_q > best_q)))
            best_p = np.where(better, cand_p, best_p)
            best_q = np.where(better, cand_q, best_q)
            best_d = np.where(better, dist, best_d)

    # candidates may overshoot a bound by rounding; land exactly inside the box
    return np.clip(best_p, p_lo, p_hi), np.clip(best_q, q_lo, q_hi)


def project_feasible(device: Device, p: float, q: float) -> tuple[float, float]:
    """Project one (p, q) point onto a device's feasible set."""
    bounds = [np.array([value]) for value in device.feasible.box_disk()]
    p_new, q_new = project_box_disk(np.array([p]), np.array([q]), *bounds)
    return float(p_new[0]), float(q_new[0])
