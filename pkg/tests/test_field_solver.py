import numpy as np
import pytest

from models.errors import ConfigurationError, GeometryError
from models.fields import MultipoleEntry, PotentialGrid, TrapGeometry
from services.field_solver import (
    build_axisymmetric_grid,
    extract_multipoles,
    laplace_residual,
    solve_basis_potential,
    solve_basis_set,
    solve_dirichlet,
)


def _coaxial_grid(spacing: float, inner_v: float = 1.0, outer_v: float = 0.0) -> PotentialGrid:
    """Infinite coaxial cylinders at r = 1 and r = 4 (mirror planes at both z edges)"""
    nr = int(round(4.0 / spacing)) + 1
    grid = PotentialGrid.empty(spacing, (nr, 5))
    r, _ = grid.coordinates()
    eps = 1e-9 * spacing
    grid = grid.with_dirichlet(r <= 1.0 + eps, inner_v, "inner")
    return grid.with_dirichlet(r >= 4.0 - eps, outer_v, "outer")


def _coaxial_error(spacing: float) -> float:
    solved = solve_dirichlet(_coaxial_grid(spacing), tolerance=1e-12)
    r, _ = solved.coordinates()
    exact = np.log(4.0 / np.maximum(r, 1.0)) / np.log(4.0)
    free = ~solved.boundary_mask
    return float(np.abs(solved.values - exact)[free].max())


def test_coaxial_capacitor_matches_log_profile_with_second_order_convergence() -> None:
    coarse = _coaxial_error(0.1)
    fine = _coaxial_error(0.05)

    assert coarse < 1e-2
    assert 1.8 <= np.log2(coarse / fine) <= 2.2


def test_relaxed_field_satisfies_laplace_residual() -> None:
    solved = solve_dirichlet(_coaxial_grid(0.1), tolerance=1e-9)

    assert laplace_residual(solved) <= 1e-9


def test_superposition_of_boundary_solutions() -> None:
    inner_only = solve_dirichlet(_coaxial_grid(0.1, 1.0, 0.0), tolerance=1e-11)
    outer_only = solve_dirichlet(_coaxial_grid(0.1, 0.0, 2.0), tolerance=1e-11)
    both = solve_dirichlet(_coaxial_grid(0.1, 1.0, 2.0), tolerance=1e-11)

    assert np.allclose(inner_only.values + outer_only.values, both.values, atol=1e-7)


def test_unit_basis_drives_only_the_chosen_electrode() -> None:
    grid = _coaxial_grid(0.1, inner_v=5.0, outer_v=3.0)

    basis = solve_basis_potential(grid, "inner", tolerance=1e-12)
    reference = solve_dirichlet(_coaxial_grid(0.1, inner_v=1.0, outer_v=0.0), tolerance=1e-12)

    assert np.all(basis.values[grid.electrode_mask("inner")] == 1.0)
    assert np.all(basis.values[grid.electrode_mask("outer")] == 0.0)
    assert np.allclose(basis.values, reference.values, atol=1e-9)


def test_dirichlet_nodes_never_change() -> None:
    grid = _coaxial_grid(0.1)
    solved = solve_dirichlet(grid, tolerance=1e-8)

    assert np.array_equal(solved.values[grid.boundary_mask], grid.values[grid.boundary_mask])


def test_solver_rejects_bad_tolerance() -> None:
    with pytest.raises(ConfigurationError):
        solve_dirichlet(_coaxial_grid(0.1), tolerance=1.5)


def test_grid_resolves_the_tip_gap() -> None:
    geometry = TrapGeometry()
    grid = build_axisymmetric_grid(geometry, 10e-6)
    _, z = grid.coordinates()
    in_gap = np.abs(z[0]) <= geometry.tip_gap / 2

    assert np.count_nonzero(in_gap) >= 35
    assert not grid.boundary_mask[0, np.abs(z[0]) < geometry.tip_gap / 2].any()
    assert set(grid.electrodes) == {"outer_pair", "inner_upper", "inner_lower"}


def _census(geometry: TrapGeometry, spacing: float) -> dict:
    """Electrode node counts from a node-by-node pass over the geometry"""
    nr = int(round(geometry.domain_radius / spacing)) + 1
    nz = 2 * int(round(geometry.domain_half_height / spacing)) + 1
    half_gap, tol = geometry.tip_gap / 2, 1e-6 * spacing
    counts = {"outer_pair": 0, "inner_upper": 0, "inner_lower": 0}
    for i in range(nr):
        r = i * spacing
        for j in range(nz):
            z = (j - (nz - 1) // 2) * spacing
            if i == nr - 1 or j in (0, nz - 1):
                continue
            in_tube = geometry.inner_electrode_inner_radius - tol <= r <= geometry.inner_electrode_outer_radius + tol
            in_bore = r < geometry.inner_electrode_inner_radius - tol
            for label, sign in (("inner_upper", 1.0), ("inner_lower", -1.0)):
                zs = sign * z
                if (in_tube and zs >= half_gap - tol) or (in_bore and zs >= half_gap + geometry.fibre_recess - tol):
                    counts[label] += 1
            in_ring = geometry.outer_electrode_inner_radius - tol <= r <= geometry.outer_electrode_outer_radius + tol
            if in_ring and abs(z) >= half_gap + geometry.outer_electrode_setback - tol:
                counts["outer_pair"] += 1
    return counts


def test_electrode_masks_match_an_independent_census() -> None:
    geometry = TrapGeometry()
    grid = build_axisymmetric_grid(geometry, 10e-6)
    interior = np.ones(grid.extent, dtype=bool)
    interior[-1, :] = interior[:, 0] = interior[:, -1] = False

    expected = _census(geometry, 10e-6)

    for label, count in expected.items():
        assert np.count_nonzero(grid.electrode_mask(label) & interior) == count
    assert expected["inner_upper"] == expected["inner_lower"] > 0


def test_uniform_boundary_gives_uniform_interior() -> None:
    solved = solve_dirichlet(_coaxial_grid(0.1, inner_v=1.0, outer_v=1.0), tolerance=1e-12)

    assert np.allclose(solved.values, 1.0, rtol=0, atol=1e-10)


def test_grid_coarser_than_a_twentieth_of_the_gap_is_rejected() -> None:
    with pytest.raises(GeometryError):
        build_axisymmetric_grid(TrapGeometry(), 20e-6)


def test_geometry_rejects_overlapping_electrodes() -> None:
    with pytest.raises(GeometryError):
        TrapGeometry(outer_electrode_inner_radius=120e-6)


def test_multipole_fit_recovers_manufactured_harmonics() -> None:
    grid = PotentialGrid.empty(1e-6, (81, 161))
    r, z = grid.coordinates()
    a0, b, c, d = 0.3, 2.0e3, 4.0e7, 1.0e11
    values = a0 + b * z + c * (z**2 - 0.5 * r**2) + d * (z**3 - 1.5 * z * r**2)

    fit = extract_multipoles(grid.with_values(values), fit_radius=50e-6, max_degree=4)

    assert fit.entry.a0 == pytest.approx(a0, rel=1e-9)
    assert fit.entry.b[2] == pytest.approx(b, rel=1e-9)
    assert fit.entry.Q[2, 2] == pytest.approx(2 * c, rel=1e-9)
    assert fit.entry.Q[0, 0] == pytest.approx(-c, rel=1e-9)
    assert np.trace(fit.entry.Q) == pytest.approx(0.0, abs=1e-9 * c)
    assert fit.higher_order[3] == pytest.approx(d, rel=1e-6)
    assert fit.trace_ratio < 1e-8
    assert fit.residual_rms < 1e-9


def test_multipole_fit_ball_must_avoid_dirichlet_nodes() -> None:
    grid = PotentialGrid.empty(1e-6, (81, 161))
    r, z = grid.coordinates()
    grid = grid.with_dirichlet((r < 3e-6) & (np.abs(z) < 3e-6), 0.0, "pin")

    with pytest.raises(GeometryError):
        extract_multipoles(grid, fit_radius=20e-6)


def test_multipole_entry_must_be_traceless() -> None:
    with pytest.raises(GeometryError):
        MultipoleEntry(a0=0.0, b=np.zeros(3), Q=np.eye(3))


@pytest.mark.slow
def test_solved_basis_has_mirror_symmetric_inner_electrodes() -> None:
    fits, fields = solve_basis_set(TrapGeometry(), 10e-6, tolerance=1e-6, fit_radius=50e-6)
    outer = fits["outer_pair"].entry
    upper = fits["inner_upper"].entry
    lower = fits["inner_lower"].entry

    assert abs(outer.b[2]) < 1e-2 * abs(outer.Q[2, 2]) * 50e-6
    assert upper.b[2] > 0
    assert lower.b[2] == pytest.approx(-upper.b[2], rel=1e-2)
    assert lower.Q[2, 2] == pytest.approx(upper.Q[2, 2], rel=1e-2)
    assert 0 < outer.a0 < 1
    for label, field in fields.items():
        mask = field.electrode_mask(label)
        assert np.all(field.values[mask] == 1.0)
