"""Monotonicity-based shape reconstruction for electrode impedance data."""
from .fem import (
    Conductivity,
    CurrentBasis,
    MeasurementMatrix,
    assemble_cem_system,
    measurement_matrix,
    sensitivity_tensor,
    solve_cem,
)
from .mesh import (
    build_electrode_layout,
    build_extended_electrodes,
    build_hex_test_sets,
    disk_mesh_for_electrodes,
    generate_disk_mesh,
)

__version__ = "0.1.0"
