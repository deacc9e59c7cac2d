"""Exceptions raised by voltreg."""


class VoltregError(Exception):
    """Base class for every error raised by this package."""


class InputError(VoltregError):
    """Bad input: the CLI maps these to exit code 1."""


class ParseError(InputError):
    """A feeder, partition or config file could not be parsed."""


class TopologyError(InputError):
    """The line set is not a tree rooted at the slack node."""


class PhaseError(InputError):
    """A phase set is inconsistent with the line or node it belongs to."""


class UnknownNode(InputError):
    """A node id or index does not exist (or is the slack where not allowed)."""


class DimensionError(InputError):
    """Vector or matrix dimensions do not match the phase-expanded index."""


class ConfigError(InputError):
    """A solver setting is unknown or out of range."""


class PartitionError(InputError):
    """A partition failed validation."""


class InfeasibleK(InputError):
    """The topology cannot hold K disjoint subtrees."""


class DeviceError(InputError):
    """A device has an empty feasible set or a non-convex cost."""


class NoConvergence(VoltregError):
    """The nonlinear sweep did not reach its tolerance."""


class CurvatureUnavailable(VoltregError):
    """A cost has no usable curvature bound."""


class BarrierTimeout(VoltregError):
    """A superstep barrier was not reached within the simulated timeout."""


class MissingMember(VoltregError):
    """An RC did not receive every member dual before aggregating."""


class MissingAggregate(VoltregError):
    """The CC did not receive every aggregate or unclustered dual."""


class MissingCoupling(VoltregError):
    """An RC or node did not receive its coupling message."""


class ScopeError(VoltregError):
    """An impedance table was read outside the scope it was built for."""


class StepsizeWarning(UserWarning):
    """The stepsize violates the contraction condition eps < 2M/L^2."""
