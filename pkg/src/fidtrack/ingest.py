"""Loading and saving projection scans and marker plans.

Storage format: one little-endian unsigned-16-bit raw file per scan (frames
concatenated row-major) plus a JSON manifest. Field names in the manifest and
the marker plan are normative:

manifest:
    { "scan_id", "geometry": {"sad_mm", "sid_mm", "cols", "rows",
      "pixel_pitch_mm"}, "pixel_file", "pixel_dtype": "u16le",
      "frames": [{"index", "angle_deg", "breath_hold": "BH1"|"BH2", "t_sec"?}] }

marker plan:
    { "markers": [{"id", "x_mm", "y_mm", "z_mm"}] }

Breath-hold membership comes from the manifest; it is never inferred from
the projections themselves.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .geometry import AcquisitionGeometry, GantryAngle, Point3

log = logging.getLogger(__name__)

BH_LABELS = ("BH1", "BH2")
PIXEL_DTYPE = "u16le"


@dataclass
class ProjectionFrame:
    index: int
    phi: GantryAngle
    pixels: np.ndarray  # uint16, (rows, cols)
    breath_hold: str
    t_sec: float | None = None


@dataclass
class ScanSet:
    geometry: AcquisitionGeometry
    frames: list[ProjectionFrame]
    scan_id: str
    breath_hold_windows: dict[str, tuple[int, int]] = field(default_factory=dict)

    def labels(self) -> list[str]:
        return [lb for lb in BH_LABELS if lb in self.breath_hold_windows]

    def frames_for(self, breath_hold: str) -> list[ProjectionFrame]:
        return [f for f in self.frames if f.breath_hold == breath_hold]


@dataclass
class MarkerPlan:
    marker_ids: list[str]
    markers: list[Point3]

    def __post_init__(self):
        if len(self.markers) < 1:
            raise InputError("marker plan must contain at least one marker")
        if len(self.marker_ids) != len(self.markers):
            raise InputError("marker ids and positions differ in length")
        if len(set(self.marker_ids)) != len(self.marker_ids):
            raise InputError("duplicate marker ids in plan")

    def __len__(self) -> int:
        return len(self.markers)


def _windows_from_labels(indices: list[int], labels: list[str]) -> dict[str, tuple[int, int]]:
    windows: dict[str, tuple[int, int]] = {}
    for lb in sorted(set(labels)):
        if lb not in BH_LABELS:
            raise InputError(f"unknown breath-hold label {lb!r} (expected one of {BH_LABELS})")
        span = [i for i, l in zip(indices, labels) if l == lb]
        windows[lb] = (min(span), max(span))
    if len(windows) == 2:
        lo1, hi1 = windows["BH1"]
        lo2, hi2 = windows["BH2"]
        if not hi1 < lo2:
            raise InputError(
                f"breath-hold windows overlap or are out of order: BH1=({lo1},{hi1}) BH2=({lo2},{hi2})"
            )
    return windows


def load_scan(manifest_path) -> ScanSet:
    """Load a projection scan from its manifest; see the module docstring for the schema."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise InputError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"manifest is not valid JSON: {exc}") from exc

    try:
        g = doc["geometry"]
        geometry = AcquisitionGeometry(
            sad=float(g["sad_mm"]),
            sid=float(g["sid_mm"]),
            detector_cols=int(g["cols"]),
            detector_rows=int(g["rows"]),
            pixel_pitch=float(g["pixel_pitch_mm"]),
        )
        scan_id = str(doc["scan_id"])
        pixel_file = manifest_path.parent / doc["pixel_file"]
        pixel_dtype = doc["pixel_dtype"]
        frame_records = doc["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed manifest: {exc}") from exc

    if pixel_dtype != PIXEL_DTYPE:
        raise InputError(f"unsupported pixel_dtype {pixel_dtype!r} (expected {PIXEL_DTYPE!r})")
    if not frame_records:
        raise InputError("empty scan: manifest declares no frames")
    if not pixel_file.is_file():
        raise InputError(f"pixel file not found: {pixel_file}")

    rows, cols = geometry.detector_rows, geometry.detector_cols
    n_frames = len(frame_records)
    expected = n_frames * rows * cols * 2
    actual = pixel_file.stat().st_size
    if actual != expected:
        raise InputError(
            f"pixel file size mismatch: {actual} bytes, expected {expected} "
            f"({n_frames} frames of {rows}x{cols} u16)"
        )
    stack = np.fromfile(pixel_file, dtype="<u2").reshape(n_frames, rows, cols)

    indices, labels, frames = [], [], []
    for pos, rec in enumerate(frame_records):
        try:
            idx = int(rec["index"])
            angle = float(rec["angle_deg"])
            bh = str(rec["breath_hold"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed frame record {pos}: {exc}") from exc
        t_sec = float(rec["t_sec"]) if "t_sec" in rec and rec["t_sec"] is not None else None
        if indices and idx <= indices[-1]:
            raise InputError(f"frame indices must be strictly increasing (at record {pos})")
        indices.append(idx)
        labels.append(bh)
        frames.append(
            ProjectionFrame(
                index=idx,
                phi=GantryAngle.from_degrees(angle),
                pixels=stack[pos],
                breath_hold=bh,
                t_sec=t_sec,
            )
        )

    windows = _windows_from_labels(indices, labels)

    for lb in windows:
        angles = [f.phi.degrees for f in frames if f.breath_hold == lb]
        diffs = np.diff(angles)
        if len(diffs) and not (np.all(diffs >= 0) or np.all(diffs <= 0)):
            log.warning("non-monotone gantry angles within %s of scan %s", lb, scan_id)

    return ScanSet(geometry=geometry, frames=frames, scan_id=scan_id, breath_hold_windows=windows)


def save_scan(
    out_dir,
    scan_id: str,
    geometry: AcquisitionGeometry,
    frames: list[ProjectionFrame],
    pixel_file_name: str = "frames.u16",
    manifest_name: str = "manifest.json",
) -> Path:
    """Write the raw pixel file + manifest for a scan; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stack = np.stack([f.pixels for f in frames]).astype("<u2")
    (out_dir / pixel_file_name).write_bytes(stack.tobytes())
    records = []
    for f in frames:
        rec = {"index": f.index, "angle_deg": f.phi.degrees, "breath_hold": f.breath_hold}
        if f.t_sec is not None:
            rec["t_sec"] = f.t_sec
        records.append(rec)
    doc = {
        "scan_id": scan_id,
        "geometry": {
            "sad_mm": geometry.sad,
            "sid_mm": geometry.sid,
            "cols": geometry.detector_cols,
            "rows": geometry.detector_rows,
            "pixel_pitch_mm": geometry.pixel_pitch,
        },
        "pixel_file": pixel_file_name,
        "pixel_dtype": PIXEL_DTYPE,
        "frames": records,
    }
    manifest_path = out_dir / manifest_name
    manifest_path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return manifest_path


def load_marker_plan(path) -> MarkerPlan:
    """Load planned marker positions (isocenter frame, mm)."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"marker plan not found: {path}")
    try:
        doc = json.loads(path.read_text())
        records = doc["markers"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"malformed marker plan: {exc}") from exc
    if not records:
        raise InputError("marker plan is empty")
    ids, points = [], []
    for pos, rec in enumerate(records):
        try:
            ids.append(str(rec["id"]))
            points.append(Point3(float(rec["x_mm"]), float(rec["y_mm"]), float(rec["z_mm"])))
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed marker record {pos}: {exc}") from exc
        except ValueError as exc:
            raise InputError(f"bad coordinate in marker record {pos}: {exc}") from exc
    return MarkerPlan(marker_ids=ids, markers=points)


def save_marker_plan(path, plan: MarkerPlan) -> Path:
    path = Path(path)
    doc = {
        "markers": [
            {"id": mid, "x_mm": p.x, "y_mm": p.y, "z_mm": p.z}
            for mid, p in zip(plan.marker_ids, plan.markers)
        ]
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path
