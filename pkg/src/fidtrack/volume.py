"""Marker probability volume: back-projected accumulation, thresholding,
clustering, and matching of cluster centroids to the planned markers.

The volume is a cube centered on the mean of the planned marker positions,
with side equal to the longest extent of their bounding box (clamped below by
min_side) and subdivided into n voxels per axis. Each frame's normalized
gradient image is sampled at the projection of every voxel center and summed
into the voxel. Thresholding keeps voxels within lambda_frac of the volume
maximum; flood fill (iterative depth-first search over 6-connected neighbors)
groups the survivors into clusters whose unweighted centroid positions are
matched to the plan by exhaustive pairing.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import PipelineError
from .geometry import AcquisitionGeometry, Point3, mm_to_pixel_arrays, project_points
from .gradients import DEFAULT_MU, ProbabilityImage, gradient, normalize
from .ingest import MarkerPlan, ScanSet

DEFAULT_N_VOXELS = 50
DEFAULT_LAMBDA_FRAC = 0.70
DEFAULT_MIN_SIDE_MM = 20.0

# Maximum marker count for exhaustive pairing (M! assignments).
MAX_MARKERS_EXHAUSTIVE = 8


@dataclass
class VoxelCube:
    center: Point3
    side: float  # mm
    n: int  # voxels per axis
    values: np.ndarray  # (n, n, n) float64, axis order (x, y, z)
    _coords: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError(f"cube side must be positive, got {self.side}")
        if self.n < 2:
            raise ValueError(f"cube must have at least 2 voxels per axis, got {self.n}")
        if self.values.shape != (self.n, self.n, self.n):
            raise ValueError("values shape does not match n")

    @property
    def spacing(self) -> float:
        return self.side / self.n

    def axis_centers(self, axis: int) -> np.ndarray:
        c = (self.center.x, self.center.y, self.center.z)[axis]
        h = self.spacing
        return c - self.side / 2.0 + (np.arange(self.n) + 0.5) * h

    def voxel_center(self, i: int, j: int, k: int) -> Point3:
        return Point3(
            float(self.axis_centers(0)[i]),
            float(self.axis_centers(1)[j]),
            float(self.axis_centers(2)[k]),
        )

    def flat_coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flattened (x, y, z) coordinates of all voxel centers, cached."""
        if self._coords is None:
            xs, ys, zs = (self.axis_centers(a) for a in range(3))
            gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
            self._coords = (gx.ravel(), gy.ravel(), gz.ravel())
        return self._coords


@dataclass
class Cluster:
    voxel_indices: list[tuple[int, int, int]]
    centroid: Point3
    total_probability: float


@dataclass
class RefinedMarkers:
    positions: list[Point3]  # aligned with the plan's marker order
    match_cost: float  # summed pairing distance, mm
    breath_hold: str | None = None


def build_cube(
    plan: MarkerPlan,
    n: int = DEFAULT_N_VOXELS,
    min_side: float = DEFAULT_MIN_SIDE_MM,
) -> VoxelCube:
    """Zeroed cube centered on the plan's mean position, sized by the plan bounding box."""
    pts = np.array([[p.x, p.y, p.z] for p in plan.markers], dtype=float)
    center = pts.mean(axis=0)
    extent = float((pts.max(axis=0) - pts.min(axis=0)).max())
    side = max(extent, float(min_side))
    return VoxelCube(
        center=Point3(*center),
        side=side,
        n=int(n),
        values=np.zeros((n, n, n), dtype=np.float64),
    )


def _bilinear_sample(img: np.ndarray, row: np.ndarray, col: np.ndarray) -> np.ndarray:
    """Bilinear sample with zero outside the image bounds."""
    rows, cols = img.shape
    out = np.zeros(row.shape, dtype=np.float64)
    inside = (row >= 0.0) & (row <= rows - 1) & (col >= 0.0) & (col <= cols - 1)
    if not np.any(inside):
        return out
    r = row[inside]
    c = col[inside]
    r0 = np.clip(np.floor(r).astype(np.intp), 0, rows - 2)
    c0 = np.clip(np.floor(c).astype(np.intp), 0, cols - 2)
    fr = r - r0
    fc = c - c0
    v00 = img[r0, c0]
    v01 = img[r0, c0 + 1]
    v10 = img[r0 + 1, c0]
    v11 = img[r0 + 1, c0 + 1]
    out[inside] = (
        v00 * (1 - fr) * (1 - fc)
        + v01 * (1 - fr) * fc
        + v10 * fr * (1 - fc)
        + v11 * fr * fc
    )
    return out


def accumulate(
    cube: VoxelCube, p: ProbabilityImage, phi_rad: float, geom: AcquisitionGeometry
) -> VoxelCube:
    """Add one frame's probability image, sampled at each voxel's projection.

    Projections landing outside the detector contribute zero. Mutates and
    returns the cube.
    """
    if p.values.shape != (geom.detector_rows, geom.detector_cols):
        raise ValueError("probability image does not match the detector dimensions")
    x, y, z = cube.flat_coords()
    u, v = project_points(x, y, z, phi_rad, geom)
    col, row = mm_to_pixel_arrays(u, v, geom)
    sampled = _bilinear_sample(p.values, row, col)
    cube.values += sampled.reshape(cube.n, cube.n, cube.n)
    return cube


def threshold_volume(cube: VoxelCube, lambda_frac: float = DEFAULT_LAMBDA_FRAC) -> VoxelCube:
    """Zero voxels below lambda_frac of the volume maximum (new cube returned)."""
    if not (0.0 < lambda_frac <= 1.0):
        raise ValueError(f"lambda_frac must be in (0, 1], got {lambda_frac}")
    peak = float(cube.values.max())
    if peak <= 0.0:
        raise PipelineError("no marker evidence: probability volume is empty")
    values = cube.values.copy()
    values[values < lambda_frac * peak] = 0.0
    return VoxelCube(center=cube.center, side=cube.side, n=cube.n, values=values)


_NEIGHBORS6 = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def find_clusters(cube: VoxelCube) -> list[Cluster]:
    """Maximal 6-connected components of nonzero voxels, largest total probability first.

    Uses an explicit stack (the volume can be 50^3; recursion would be unsafe).
    Centroids are unweighted means of the member voxel centers.
    """
    vals = cube.values
    n = cube.n
    visited = np.zeros(vals.shape, dtype=bool)
    xs, ys, zs = (cube.axis_centers(a) for a in range(3))
    clusters: list[Cluster] = []
    nz = np.argwhere(vals > 0.0)
    for seed in map(tuple, nz):
        if visited[seed]:
            continue
        stack = [seed]
        visited[seed] = True
        members: list[tuple[int, int, int]] = []
        total = 0.0
        while stack:
            i, j, k = stack.pop()
            members.append((i, j, k))
            total += float(vals[i, j, k])
            for di, dj, dk in _NEIGHBORS6:
                ni, nj, nk = i + di, j + dj, k + dk
                if 0 <= ni < n and 0 <= nj < n and 0 <= nk < n:
                    if vals[ni, nj, nk] > 0.0 and not visited[ni, nj, nk]:
                        visited[ni, nj, nk] = True
                        stack.append((ni, nj, nk))
        idx = np.array(members)
        centroid = Point3(
            float(xs[idx[:, 0]].mean()),
            float(ys[idx[:, 1]].mean()),
            float(zs[idx[:, 2]].mean()),
        )
        clusters.append(Cluster(voxel_indices=members, centroid=centroid, total_probability=total))
    clusters.sort(key=lambda c: -c.total_probability)
    return clusters


def match_clusters(clusters: list[Cluster], plan: MarkerPlan) -> RefinedMarkers:
    """Match cluster centroids to planned markers, minimizing the summed distance.

    Keeps the len(plan) largest clusters by total probability when there are
    extras; enumerates every pairing (plan sizes above MAX_MARKERS_EXHAUSTIVE
    are rejected).
    """
    m = len(plan)
    if m > MAX_MARKERS_EXHAUSTIVE:
        raise PipelineError(
            f"too many markers for exhaustive matching ({m} > {MAX_MARKERS_EXHAUSTIVE})"
        )
    if len(clusters) < m:
        raise PipelineError(
            f"marker not found in volume: {len(clusters)} clusters for {m} planned markers"
        )
    kept = clusters[:m]
    plan_pts = np.array([[p.x, p.y, p.z] for p in plan.markers])
    cent_pts = np.array([[c.centroid.x, c.centroid.y, c.centroid.z] for c in kept])
    # dist[i, k]: distance from cluster i to planned marker k
    dist = np.sqrt(((cent_pts[:, None, :] - plan_pts[None, :, :]) ** 2).sum(axis=2))
    best_cost = np.inf
    best_perm = None
    for perm in itertools.permutations(range(m)):
        cost = sum(dist[perm[k], k] for k in range(m))
        if cost < best_cost:
            best_cost = cost
            best_perm = perm
    positions = [kept[best_perm[k]].centroid for k in range(m)]
    return RefinedMarkers(positions=positions, match_cost=float(best_cost))


def refine_markers(
    scan: ScanSet,
    plan: MarkerPlan,
    breath_hold: str,
    *,
    mu: float = DEFAULT_MU,
    lambda_frac: float = DEFAULT_LAMBDA_FRAC,
    n_voxels: int = DEFAULT_N_VOXELS,
    min_side: float = DEFAULT_MIN_SIDE_MM,
) -> RefinedMarkers:
    """Full refinement for one breath-hold: cube, per-frame accumulation,
    threshold, clustering, and matching."""
    frames = scan.frames_for(breath_hold)
    if not frames:
        raise PipelineError(f"breath-hold {breath_hold!r} has no frames in scan {scan.scan_id!r}")
    cube = build_cube(plan, n=n_voxels, min_side=min_side)
    for frame in frames:
        p = normalize(gradient(frame, mu=mu))
        accumulate(cube, p, frame.phi.phi, scan.geometry)
    thresholded = threshold_volume(cube, lambda_frac=lambda_frac)
    clusters = find_clusters(thresholded)
    refined = match_clusters(clusters, plan)
    refined.breath_hold = breath_hold
    return refined


def dump_volume(cube: VoxelCube, raw_path, manifest_path) -> None:
    """Raw float32 little-endian dump plus a JSON sidecar for external viewers."""
    import json

    np.asarray(cube.values, dtype="<f4").tofile(raw_path)
    sidecar = {
        "center_mm": [cube.center.x, cube.center.y, cube.center.z],
        "side_mm": cube.side,
        "n": cube.n,
        "dtype": "f32le",
        "axis_order": "xyz",
    }
    with open(manifest_path, "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
