"""Procedural CSG shapes, analytic SDF oracles, scanning, and meshing."""

from .csg import (
    Box,
    CappedCylinder,
    CsgShape,
    Difference,
    Intersection,
    Sphere,
    Union,
    eval_sdf,
    make_vehicle,
    sample_surface,
    uniform_in_sphere,
)
from .dataset import Scan, ShapeRecord, load_dataset, save_dataset
from .marching import TriangleMesh, VoxelGrid, marching_cubes, watertight_audit
from .meshio import load_obj, save_obj
from .sampling import (
    PointCloud,
    ScanConfig,
    ring_viewpoints,
    sample_training_points,
    symmetrize,
    virtual_scan,
)

__all__ = [
    "Box",
    "CappedCylinder",
    "CsgShape",
    "Difference",
    "Intersection",
    "PointCloud",
    "Scan",
    "ScanConfig",
    "ShapeRecord",
    "Sphere",
    "TriangleMesh",
    "Union",
    "VoxelGrid",
    "eval_sdf",
    "load_dataset",
    "load_obj",
    "make_vehicle",
    "marching_cubes",
    "ring_viewpoints",
    "sample_surface",
    "sample_training_points",
    "save_dataset",
    "save_obj",
    "symmetrize",
    "uniform_in_sphere",
    "virtual_scan",
    "watertight_audit",
]
