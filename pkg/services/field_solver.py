"""
Field Solver Service - axisymmetric Laplace relaxation and multipole extraction
"""
import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from models.errors import ConfigurationError, ConvergenceError, GeometryError
from models.fields import (
    MultipoleEntry,
    MultipoleFit,
    PotentialGrid,
    TrapGeometry,
)

logger = logging.getLogger(__name__)

SOLVED_ELECTRODES = ("outer_pair", "inner_upper", "inner_lower")
DEFAULT_TOLERANCE = 1e-8
MAX_SWEEPS = 1_000_000
_CHECK_EVERY = 10


def build_axisymmetric_grid(geometry: TrapGeometry, spacing: float) -> PotentialGrid:
    """
    Rasterize the electrode stack onto an (r, z) grid

    Args:
        geometry: electrode dimensions
        spacing: node spacing in metres, at most tip_gap/20

    Returns:
        PotentialGrid with electrodes and the 0 V domain edge as Dirichlet nodes
    """
    if spacing <= 0 or spacing > geometry.tip_gap / 20 * (1 + 1e-12):
        raise GeometryError(
            f"grid too coarse: spacing {spacing * 1e6:.3g} um must not exceed "
            f"tip_gap/20 = {geometry.tip_gap / 20 * 1e6:.3g} um"
        )

    nr = int(round(geometry.domain_radius / spacing)) + 1
    nz = 2 * int(round(geometry.domain_half_height / spacing)) + 1
    grid = PotentialGrid.empty(spacing, (nr, nz))
    r, z = grid.coordinates()
    eps = 1e-9 * spacing

    edge = np.zeros((nr, nz), dtype=bool)
    edge[-1, :] = True
    edge[:, 0] = True
    edge[:, -1] = True
    grid = grid.with_dirichlet(edge, 0.0)

    for label, region in electrode_regions(geometry, r, z, eps).items():
        grid = grid.with_dirichlet(region, 0.0, label)

    logger.info(
        f"Built {nr}x{nz} grid at {spacing * 1e6:.2f} um, "
        f"{int(grid.boundary_mask.sum())} Dirichlet nodes"
    )
    return grid


def electrode_regions(geometry: TrapGeometry, r: np.ndarray, z: np.ndarray, eps: float) -> Dict[str, np.ndarray]:
    """Boolean node masks of the solid electrode bodies"""
    half_gap = geometry.tip_gap / 2
    ii = geometry.inner_electrode_inner_radius
    io = geometry.inner_electrode_outer_radius
    oi = geometry.outer_electrode_inner_radius
    oo = geometry.outer_electrode_outer_radius

    tube = (r >= ii - eps) & (r <= io + eps)
    # fibre jacket sits inside the tube, recessed behind the tip
    jacket = r < ii - eps
    recess = half_gap + geometry.fibre_recess

    inner_upper = (tube & (z >= half_gap - eps)) | (jacket & (z >= recess - eps))
    inner_lower = (tube & (z <= -half_gap + eps)) | (jacket & (z <= -recess + eps))
    outer_tip = half_gap + geometry.outer_electrode_setback
    outer_pair = (r >= oi - eps) & (r <= oo + eps) & (np.abs(z) >= outer_tip - eps)
    return {"outer_pair": outer_pair, "inner_upper": inner_upper, "inner_lower": inner_lower}


def _stencil(nr: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    i = np.arange(nr, dtype=float)
    inv = 1.0 / (2.0 * np.maximum(i, 1.0))
    up = (1.0 + inv) / 4.0
    down = (1.0 - inv) / 4.0
    # axis node: 6 phi0 = 4 phi1 + phi(j+1) + phi(j-1)
    up[0], down[0] = 4.0 / 6.0, 0.0
    axial = np.full(nr, 0.25)
    axial[0] = 1.0 / 6.0
    return up[:, None], down[:, None], axial[:, None]


def _neighbour_average(phi: np.ndarray, up: np.ndarray, down: np.ndarray, axial: np.ndarray) -> np.ndarray:
    padded = np.pad(phi, 1, mode="reflect")
    return (
        up * padded[2:, 1:-1]
        + down * padded[:-2, 1:-1]
        + axial * (padded[1:-1, 2:] + padded[1:-1, :-2])
    )


def laplace_residual(grid: PotentialGrid) -> float:
    """Largest Gauss-Seidel correction over free nodes, relative to max |phi|"""
    up, down, axial = _stencil(grid.extent[0])
    free = ~grid.boundary_mask
    if not free.any():
        return 0.0
    scale = np.abs(grid.values).max()
    if scale == 0:
        return 0.0
    target = _neighbour_average(grid.values, up, down, axial)
    return float(np.abs(target - grid.values)[free].max() / scale)


def optimal_omega(extent: Sequence[int]) -> float:
    return 2.0 / (1.0 + np.pi / max(extent))


def solve_dirichlet(
    grid: PotentialGrid,
    tolerance: float = DEFAULT_TOLERANCE,
    max_sweeps: int = MAX_SWEEPS,
    omega: Optional[float] = None,
) -> PotentialGrid:
    """
    Relax free nodes with red-black SOR, holding Dirichlet values fixed

    Args:
        grid: grid whose Dirichlet nodes already carry their voltages
        tolerance: stop once the relative residual drops below this
        max_sweeps: sweep cap
        omega: relaxation factor, optimal for the grid size when omitted

    Returns:
        New grid with the relaxed potential
    """
    if not 0 < tolerance < 1:
        raise ConfigurationError(f"tolerance must lie in (0, 1), got {tolerance}", ["tolerance"])
    nr, nz = grid.extent
    if nr < 3 or nz < 3:
        raise GeometryError("grid needs at least 3 nodes per axis")

    omega = optimal_omega(grid.extent) if omega is None else omega
    up, down, axial = _stencil(nr)
    phi = np.array(grid.values, dtype=float)
    free = ~grid.boundary_mask
    scale = np.abs(phi[grid.boundary_mask]).max() if grid.boundary_mask.any() else 0.0
    if scale == 0:
        return grid.with_values(np.zeros_like(phi))

    ii, jj = np.indices(phi.shape)
    colours = [free & ((ii + jj) % 2 == 0), free & ((ii + jj) % 2 == 1)]

    residual = np.inf
    for sweep in range(1, max_sweeps + 1):
        for colour in colours:
            target = _neighbour_average(phi, up, down, axial)
            phi[colour] += omega * (target[colour] - phi[colour])
        if sweep % _CHECK_EVERY == 0 or sweep == max_sweeps:
            target = _neighbour_average(phi, up, down, axial)
            residual = float(np.abs(target - phi)[free].max() / scale) if free.any() else 0.0
            if sweep % 1000 == 0:
                logger.debug(f"SOR sweep {sweep}: residual {residual:.3e}")
            if residual < tolerance:
                logger.info(f"SOR converged after {sweep} sweeps (residual {residual:.2e})")
                return grid.with_values(phi)

    raise ConvergenceError(
        f"SOR did not converge within {max_sweeps} sweeps (residual {residual:.3e})",
        residual=residual,
        iterations=max_sweeps,
    )


def solve_basis_potential(
    grid: PotentialGrid,
    electrode: str,
    tolerance: float = DEFAULT_TOLERANCE,
    max_sweeps: int = MAX_SWEEPS,
) -> PotentialGrid:
    """Unit-voltage solve: chosen electrode at 1 V, every other Dirichlet node at 0 V"""
    mask = grid.electrode_mask(electrode)
    values = np.zeros(grid.extent)
    values[mask] = 1.0
    logger.info(f"Solving unit basis for '{electrode}'")
    return solve_dirichlet(grid.with_values(values), tolerance, max_sweeps)


def zonal_harmonics(u: np.ndarray, s: np.ndarray, max_degree: int) -> np.ndarray:
    """Axisymmetric solid harmonics in scaled axial (u) and radial (s) coordinates"""
    columns = [
        np.ones_like(u),
        u,
        u**2 - 0.5 * s**2,
        u**3 - 1.5 * u * s**2,
        u**4 - 3.0 * u**2 * s**2 + 0.375 * s**4,
    ]
    return np.column_stack(columns[: max_degree + 1])


def extract_multipoles(
    field: PotentialGrid,
    center: Sequence[float] = (0.0, 0.0, 0.0),
    fit_radius: float = 50e-6,
    max_degree: int = 4,
) -> MultipoleFit:
    """
    Least-squares fit of zonal harmonics to the nodes inside a ball

    Args:
        field: solved potential
        center: expansion point (x, y, z); must lie on the symmetry axis
        fit_radius: ball radius in metres
        max_degree: 2 or 4

    Returns:
        MultipoleFit whose entry carries a0, b and Q; degree 3 and 4 terms
        are diagnostics only
    """
    if max_degree not in (2, 4):
        raise ConfigurationError(f"max_degree must be 2 or 4, got {max_degree}", ["max_degree"])
    x0, y0, z0 = (float(c) for c in center)
    if abs(x0) > 0 or abs(y0) > 0:
        raise GeometryError("axisymmetric fields can only be expanded about a point on the axis")

    r, z = field.coordinates()
    r_max = r[-1, 0]
    if fit_radius <= 0 or fit_radius > r_max or z0 - fit_radius < z[0, 0] or z0 + fit_radius > z[0, -1]:
        raise GeometryError(f"fit ball of radius {fit_radius * 1e6:.3g} um does not fit inside the grid")

    dz = z - z0
    ball = r**2 + dz**2 <= fit_radius**2 * (1 + 1e-12)
    if (ball & field.boundary_mask).any():
        raise GeometryError("fit ball encloses Dirichlet nodes; reduce fit_radius")

    u = dz[ball] / fit_radius
    s = r[ball] / fit_radius
    phi = field.values[ball]
    design = zonal_harmonics(u, s, max_degree)
    if phi.size <= design.shape[1]:
        raise GeometryError(f"only {phi.size} nodes inside the fit ball")

    coeffs, *_ = np.linalg.lstsq(design, phi, rcond=None)
    residual_rms = float(np.sqrt(np.mean((design @ coeffs - phi) ** 2)))

    c2 = coeffs[2] / fit_radius**2
    entry = MultipoleEntry(
        a0=float(coeffs[0]),
        b=np.array([0.0, 0.0, coeffs[1] / fit_radius]),
        Q=np.diag([-c2, -c2, 2.0 * c2]),
    )
    higher = {n: float(coeffs[n] / fit_radius**n) for n in range(3, max_degree + 1)}

    # unconstrained quadratic as an independent Laplace check
    free_cols = [np.ones_like(u), u, u**2, s**2] + [design[:, n] for n in range(3, max_degree + 1)]
    d, *_ = np.linalg.lstsq(np.column_stack(free_cols), phi, rcond=None)
    hzz, hrr = 2.0 * d[2], 2.0 * d[3]
    norm = np.sqrt(hzz**2 + 2.0 * hrr**2)
    trace_ratio = float(abs(hzz + 2.0 * hrr) / norm) if norm > 0 else 0.0

    logger.debug(f"Multipole fit: {phi.size} nodes, rms {residual_rms:.3e} V, trace ratio {trace_ratio:.2e}")
    return MultipoleFit(
        entry=entry,
        residual_rms=residual_rms,
        node_count=int(phi.size),
        higher_order=higher,
        trace_ratio=trace_ratio,
    )


def solve_basis_set(
    geometry: TrapGeometry,
    spacing: float,
    tolerance: float = DEFAULT_TOLERANCE,
    fit_radius: float = 50e-6,
    max_degree: int = 4,
    electrodes: Sequence[str] = SOLVED_ELECTRODES,
) -> Tuple[Dict[str, MultipoleFit], Dict[str, PotentialGrid]]:
    """Solve and expand every cylindrically symmetric electrode"""
    grid = build_axisymmetric_grid(geometry, spacing)
    fits, fields = {}, {}
    for label in electrodes:
        fields[label] = solve_basis_potential(grid, label, tolerance)
        fits[label] = extract_multipoles(fields[label], (0.0, 0.0, 0.0), fit_radius, max_degree)
        entry = fits[label].entry
        logger.info(
            f"{label}: a0={entry.a0:.4f}, b_z={entry.b[2]:.4e} V/m, Q_zz={entry.Q[2, 2]:.4e} V/m^2"
        )
    return fits, fields
