"""Cone-beam projection model and detector coordinate conventions.

Coordinate system (see docs/coordinates.md):

* Patient/isocenter frame: x lateral, y superior-inferior (longitudinal),
  z vertical (anterior-posterior), millimetres, origin at the isocenter.
* Detector frame: (u, v) in mm with origin at the detector center, u lateral,
  v longitudinal; +v maps to decreasing row index.
* Fractional pixel (col, row): (u, v) = (0, 0) sits at
  ((cols - 1) / 2, (rows - 1) / 2).

A point p at gantry angle phi projects to

    u = SID * (x*cos(phi) - z*sin(phi)) / (SAD - x*sin(phi) - z*cos(phi))
    v = SID * y / (SAD - x*sin(phi) - z*cos(phi))

The denominator must stay above DENOM_FLOOR_MM; at or below it the point is
at/behind the source and the projection is degenerate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError

# Denominator floor (mm) below which a projection is treated as degenerate.
DENOM_FLOOR_MM = 1.0

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class AcquisitionGeometry:
    """Flat-panel cone-beam acquisition parameters.

    sad: source-to-axis distance in mm.
    sid: source-to-imager distance in mm; sid > sad.
    detector_cols / detector_rows: panel size in pixels.
    pixel_pitch: detector pixel size in mm.
    """

    sad: float
    sid: float
    detector_cols: int
    detector_rows: int
    pixel_pitch: float

    def __post_init__(self):
        if not (self.sad > 0.0):
            raise ValueError(f"sad must be positive, got {self.sad}")
        if not (self.sid > self.sad):
            raise ValueError(f"sid must exceed sad, got sid={self.sid} sad={self.sad}")
        if self.detector_cols <= 0 or self.detector_rows <= 0:
            raise ValueError("detector dimensions must be positive")
        if not (self.pixel_pitch > 0.0):
            raise ValueError(f"pixel_pitch must be positive, got {self.pixel_pitch}")

    @property
    def magnification(self) -> float:
        return self.sid / self.sad


#: Default clinical acquisition: SAD 1000 mm, SID 1536 mm, 512x512 panel, 0.8 mm pixels.
DEFAULT_GEOMETRY = AcquisitionGeometry(
    sad=1000.0, sid=1536.0, detector_cols=512, detector_rows=512, pixel_pitch=0.8
)


@dataclass(frozen=True)
class Point3:
    """Isocenter-frame 3D point (mm)."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError(f"non-finite point ({self.x}, {self.y}, {self.z})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    def distance_to(self, other: "Point3") -> float:
        return math.dist((self.x, self.y, self.z), (other.x, other.y, other.z))


@dataclass(frozen=True)
class DetectorPoint:
    """Detector-plane point (mm), origin at the detector center."""

    u: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise ValueError(f"non-finite detector point ({self.u}, {self.v})")


@dataclass(frozen=True)
class GantryAngle:
    """Gantry angle stored in radians, normalized to [0, 2*pi)."""

    phi: float

    def __post_init__(self):
        if not math.isfinite(self.phi):
            raise ValueError("non-finite gantry angle")
        object.__setattr__(self, "phi", self.phi % TWO_PI)

    @classmethod
    def from_degrees(cls, deg: float) -> "GantryAngle":
        return cls(math.radians(deg))

    @property
    def degrees(self) -> float:
        return math.degrees(self.phi)


def projection_denominator(x, z, phi, geom: AcquisitionGeometry):
    """SAD - x*sin(phi) - z*cos(phi); works on scalars or arrays."""
    return geom.sad - x * np.sin(phi) - z * np.cos(phi)


def project_point(p: Point3, phi: GantryAngle, geom: AcquisitionGeometry) -> DetectorPoint:
    """Project an isocenter-frame point onto the detector at gantry angle phi."""
    s, c = math.sin(phi.phi), math.cos(phi.phi)
    denom = geom.sad - p.x * s - p.z * c
    if denom <= DENOM_FLOOR_MM:
        raise GeometryError(
            f"degenerate projection: denominator {denom:.3f} mm <= {DENOM_FLOOR_MM} mm "
            f"for point ({p.x}, {p.y}, {p.z}) at phi={phi.degrees:.2f} deg"
        )
    u = geom.sid * (p.x * c - p.z * s) / denom
    v = geom.sid * p.y / denom
    return DetectorPoint(u=u, v=v)


def project_points(
    x: np.ndarray, y: np.ndarray, z: np.ndarray, phi_rad: float, geom: AcquisitionGeometry
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of coordinate arrays at a single gantry angle.

    Returns (u, v) arrays in detector mm. Raises GeometryError if any point
    falls at or behind the source.
    """
    s, c = math.sin(phi_rad), math.cos(phi_rad)
    denom = geom.sad - x * s - z * c
    if np.any(denom <= DENOM_FLOOR_MM):
        raise GeometryError("degenerate projection: some points at or behind the source")
    u = geom.sid * (x * c - z * s) / denom
    v = geom.sid * y / denom
    return u, v


def detector_mm_to_pixel(d: DetectorPoint, geom: AcquisitionGeometry) -> tuple[float, float]:
    """Map detector mm to fractional (col, row); no bounds clamping."""
    col = (geom.detector_cols - 1) / 2.0 + d.u / geom.pixel_pitch
    row = (geom.detector_rows - 1) / 2.0 - d.v / geom.pixel_pitch
    return col, row


def pixel_to_detector_mm(col: float, row: float, geom: AcquisitionGeometry) -> DetectorPoint:
    """Exact inverse of detector_mm_to_pixel."""
    u = (col - (geom.detector_cols - 1) / 2.0) * geom.pixel_pitch
    v = ((geom.detector_rows - 1) / 2.0 - row) * geom.pixel_pitch
    return DetectorPoint(u=u, v=v)


def mm_to_pixel_arrays(
    u: np.ndarray, v: np.ndarray, geom: AcquisitionGeometry
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized detector_mm_to_pixel for coordinate arrays."""
    col = (geom.detector_cols - 1) / 2.0 + u / geom.pixel_pitch
    row = (geom.detector_rows - 1) / 2.0 - v / geom.pixel_pitch
    return col, row
