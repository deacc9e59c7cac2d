"""Builders for small hand-checkable feeders."""

from voltreg.feeder import Box, Device, Feeder, FeederCase, Line, QuadraticCost, SubstationCost


def make_feeder(parents, z=0.1 + 0.1j, phases=(0,), slack_v2=1.0, inelastic=()):
    """A feeder whose node k (k >= 1) hangs off parents[k - 1]; z is a scalar or one value per line."""
    zs = list(z) if isinstance(z, (list, tuple)) else [z] * len(parents)
    dim = len(phases)
    lines = tuple(
        Line(
            from_node=parent,
            to_node=k,
            phases=tuple(phases),
            z=tuple(tuple(zs[k - 1] if r == c else 0j for c in range(dim)) for r in range(dim)),
        )
        for k, parent in enumerate(parents, start=1)
    )
    return Feeder(
        node_ids=tuple(str(k) for k in range(len(parents) + 1)),
        node_phases=(tuple(phases),) * (len(parents) + 1),
        lines=lines,
        slack_v2=tuple((phase, slack_v2) for phase in phases),
        inelastic=tuple(inelastic),
    )


def make_case(feeder, devices=(), alpha=0.0, clusters=None):
    return FeederCase(feeder=feeder, devices=tuple(devices), substation_cost=SubstationCost(alpha=alpha), clusters=clusters)


def load_device(node, p0, phase=0, p_min=-0.3, q_lim=0.2, cp=1.0, cq=1.0):
    return Device(
        node=node,
        phase=phase,
        feasible=Box(p_min=p_min, p_max=0.0, q_min=-q_lim, q_max=q_lim),
        cost=QuadraticCost(cp=cp, cq=cq, p0=p0, q0=0.0),
    )


