"""
Electrode geometry, relaxation grids and multipole records
"""
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from models.errors import GeometryError

# Label codes stored in PotentialGrid.labels
FREE_NODE = 0
DOMAIN_BOUNDARY = -1


@dataclass(frozen=True)
class TrapGeometry:
    """Cylindrically symmetric electrode stack, all lengths in metres.

    Dimensions other than tip_gap and the radial electrode distance are
    estimates of the drawing, not measured values.
    """
    inner_electrode_inner_radius: float = 90e-6
    inner_electrode_outer_radius: float = 150e-6
    outer_electrode_inner_radius: float = 250e-6
    outer_electrode_outer_radius: float = 400e-6
    tip_gap: float = 350e-6
    fibre_recess: float = 10e-6
    radial_electrode_distance: float = 1.0e-3
    radial_electrode_radius: float = 250e-6
    domain_radius: float = 1.2e-3
    domain_half_height: float = 1.2e-3
    outer_electrode_setback: float = 50e-6

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value > 0:
                raise GeometryError(f"{name} must be strictly positive, got {value}")
        if self.inner_electrode_outer_radius <= self.inner_electrode_inner_radius:
            raise GeometryError("inner electrode outer radius must exceed its inner radius")
        if self.outer_electrode_outer_radius <= self.outer_electrode_inner_radius:
            raise GeometryError("outer electrode outer radius must exceed its inner radius")
        if self.outer_electrode_inner_radius <= self.inner_electrode_outer_radius:
            raise GeometryError("outer electrode must enclose the inner electrode")
        if self.domain_radius <= self.outer_electrode_outer_radius:
            raise GeometryError("domain radius must enclose the outer electrode")
        if self.domain_half_height <= self.tip_gap / 2 + self.outer_electrode_setback:
            raise GeometryError("domain half height must reach beyond the electrode tips")

    @property
    def ion_electrode_distance(self) -> float:
        return self.tip_gap / 2


@dataclass
class PotentialGrid:
    """Axisymmetric (r, z) node grid.

    values[i, j] is the potential at r = i*spacing, z = (j - center_index)*spacing.
    Nodes flagged in boundary_mask are Dirichlet and never change during
    relaxation; every other node on the grid edge is treated as a mirror
    (Neumann) node.
    """
    spacing: float
    extent: Tuple[int, int]
    values: np.ndarray
    boundary_mask: np.ndarray
    labels: np.ndarray
    electrodes: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        shape = tuple(self.extent)
        if self.values.shape != shape or self.boundary_mask.shape != shape or self.labels.shape != shape:
            raise GeometryError(f"grid arrays must all have shape {shape}")
        if shape[1] % 2 == 0:
            raise GeometryError("axial node count must be odd so z=0 lies on a node")

    @classmethod
    def empty(cls, spacing: float, extent: Tuple[int, int]) -> "PotentialGrid":
        """All-free grid at 0 V"""
        nr, nz = extent
        return cls(
            spacing=spacing,
            extent=(nr, nz),
            values=np.zeros((nr, nz)),
            boundary_mask=np.zeros((nr, nz), dtype=bool),
            labels=np.full((nr, nz), FREE_NODE, dtype=np.int16),
        )

    @property
    def center_index(self) -> int:
        return (self.extent[1] - 1) // 2

    def coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        """Meshes of r and z (m), indexed like values"""
        nr, nz = self.extent
        r = np.arange(nr) * self.spacing
        z = (np.arange(nz) - self.center_index) * self.spacing
        return np.meshgrid(r, z, indexing="ij")

    def with_values(self, values: np.ndarray) -> "PotentialGrid":
        return PotentialGrid(
            spacing=self.spacing,
            extent=self.extent,
            values=np.array(values, dtype=float),
            boundary_mask=self.boundary_mask.copy(),
            labels=self.labels.copy(),
            electrodes=dict(self.electrodes),
        )

    def with_dirichlet(self, region: np.ndarray, value: float, label: Optional[str] = None) -> "PotentialGrid":
        """Copy with region pinned to value, optionally registered as a named electrode"""
        grid = self.with_values(self.values)
        grid.boundary_mask[region] = True
        grid.values[region] = value
        if label is None:
            grid.labels[region] = DOMAIN_BOUNDARY
        else:
            code = grid.electrodes.setdefault(label, max(grid.electrodes.values(), default=0) + 1)
            grid.labels[region] = code
        return grid

    def electrode_mask(self, label: str) -> np.ndarray:
        if label not in self.electrodes:
            raise GeometryError(f"unknown electrode '{label}', grid has {sorted(self.electrodes)}")
        return self.labels == self.electrodes[label]


@dataclass(frozen=True)
class MultipoleEntry:
    """Unit-voltage expansion phi ~ a0 + b.r + 1/2 r^T Q r about the trap centre"""
    a0: float
    b: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float).reshape(3)
        Q = np.asarray(self.Q, dtype=float).reshape(3, 3)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "Q", Q)
        scale = max(np.abs(Q).max(), 1e-300)
        if np.abs(Q - Q.T).max() > 1e-9 * scale:
            raise GeometryError("quadrupole tensor must be symmetric")
        if abs(np.trace(Q)) > 1e-9 * scale:
            raise GeometryError(f"quadrupole tensor must be traceless, trace={np.trace(Q):.3e}")

    def potential(self, r: np.ndarray) -> float:
        r = np.asarray(r, dtype=float)
        return float(self.a0 + self.b @ r + 0.5 * r @ self.Q @ r)

    def to_dict(self) -> dict:
        return {"a0": self.a0, "b": self.b.tolist(), "Q": self.Q.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "MultipoleEntry":
        return cls(a0=float(data["a0"]), b=np.array(data["b"]), Q=np.array(data["Q"]))


MultipoleBasis = Dict[str, MultipoleEntry]


@dataclass(frozen=True)
class MultipoleFit:
    """Extracted entry plus fit diagnostics"""
    entry: MultipoleEntry
    residual_rms: float
    node_count: int
    higher_order: Dict[int, float]
    trace_ratio: float
