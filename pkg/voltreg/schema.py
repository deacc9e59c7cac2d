"""
Pydantic models for the feeder description file.

The models only check the shape of the document. Topology, phase and
feasibility checks happen in voltreg.feeder once ids are resolved.
"""

from __future__ import annotations

from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, field_validator

PHASE_NAMES = "abc"


def parse_phase(value) -> int:
    """Map 'a'/'b'/'c' (or 0/1/2) to the phase integer."""
    if isinstance(value, bool):
        raise ValueError(f"not a phase: {value!r}")
    if isinstance(value, int):
        if value in (0, 1, 2):
            return value
        raise ValueError(f"phase index out of range: {value}")
    if isinstance(value, str) and value in ("0", "1", "2"):
        return int(value)
    if isinstance(value, str) and len(value) == 1 and value.lower() in PHASE_NAMES:
        return PHASE_NAMES.index(value.lower())
    raise ValueError(f"not a phase: {value!r}")


def parse_phase_set(value) -> tuple[int, ...]:
    """Accept "abc", ["a", "c"] or [0, 2]; return sorted unique phase integers."""
    if isinstance(value, str):
        items = list(value.replace(",", "").replace(" ", ""))
    elif isinstance(value, (list, tuple)):
        items = list(value)
    else:
        raise ValueError(f"not a phase set: {value!r}")
    phases = tuple(sorted({parse_phase(item) for item in items}))
    if not phases:
        raise ValueError("phase set must not be empty")
    return phases


def parse_complex(value) -> complex:
    """Accept [re, im], a bare number, or null (zero)."""
    if value is None:
        return 0j
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return complex(value)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    raise ValueError(f"not a complex [re, im] pair: {value!r}")


NodeId = Annotated[str, BeforeValidator(str)]
Phase = Annotated[int, BeforeValidator(parse_phase)]
PhaseSetField = Annotated[tuple[int, ...], BeforeValidator(parse_phase_set)]
ComplexField = Annotated[complex, BeforeValidator(parse_complex)]


class FileModel(BaseModel):
    """Common settings: unknown fields are ignored for forward compatibility."""

    model_config = ConfigDict(extra="ignore", populate_by_name=True, frozen=True)


class BoxSpec(FileModel):
    kind: Literal["box"]
    p_min: float
    p_max: float
    q_min: float
    q_max: float


class PvSpec(FileModel):
    kind: Literal["pv"]
    p_av: float
    capacity: float


class StorageSpec(FileModel):
    kind: Literal["storage"]
    p_min: float
    p_max: float
    capacity: float


SetSpec = Annotated[Union[BoxSpec, PvSpec, StorageSpec], Field(discriminator="kind")]


class CostSpec(FileModel):
    cp: float = 1.0
    cq: float = 1.0
    p0: float = 0.0
    q0: float = 0.0


class DeviceSpec(FileModel):
    node: NodeId
    phase: Phase
    feasible: SetSpec = Field(alias="set")
    cost: CostSpec = CostSpec()


class NodeSpec(FileModel):
    id: NodeId
    phases: PhaseSetField = (0,)


class LineSpec(FileModel):
    from_node: NodeId = Field(alias="from")
    to_node: NodeId = Field(alias="to")
    phases: Optional[PhaseSetField] = None
    z: Optional[list[list[ComplexField]]] = None
    z_diag: Optional[list[ComplexField]] = None


class SubstationCostSpec(FileModel):
    alpha: float = 0.0
    p0_target: float = 0.0


class ClusterSpec(FileModel):
    root: NodeId
    members: Optional[list[NodeId]] = None


class FeederFile(FileModel):
    base_mva: float = 1.0
    slack: Optional[NodeId] = None
    slack_v2: dict[str, float]
    nodes: list[NodeSpec]
    lines: list[LineSpec]
    devices: list[DeviceSpec] = []
    inelastic: dict[str, float] = {}
    substation_cost: SubstationCostSpec = SubstationCostSpec()
    clusters: Optional[list[ClusterSpec]] = None

    @field_validator("slack_v2", "inelastic")
    @classmethod
    def _phase_keys(cls, value):
        for key in value:
            parse_phase(key)
        return value
