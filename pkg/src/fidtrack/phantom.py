"""Synthetic projection-stack generator with exact ground truth.

Scenes are fully declarative (JSON-serializable): marker motion is a base
position plus a per-breath-hold offset and a linear drift across the hold,
so static, migrated, stepped, and drifting markers are all expressible.
Markers are splatted as Gaussian blobs (optionally as short capsules) at
their projected detector positions on top of a low-frequency background
field whose gradients stay below the default suppression threshold; optional
distractors and saturation-patch occlusions exercise the failure paths.

Rendering is deterministic: the per-frame noise generator is seeded with
scene_seed XOR frame_index, so frames may be rendered in any order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .geometry import (
    DEFAULT_GEOMETRY,
    AcquisitionGeometry,
    GantryAngle,
    Point3,
    detector_mm_to_pixel,
    project_point,
)
from .ingest import MarkerPlan, ProjectionFrame, ScanSet, save_marker_plan, save_scan

DEFAULT_ARCS = {"BH1": (98.0, 165.0), "BH2": (32.0, 101.0)}
DEFAULT_FRAMES_PER_BH = 100
DEFAULT_BLOB_AMPLITUDE = 3000.0
DEFAULT_BLOB_SIGMA_PX = 1.2
DEFAULT_BACKGROUND_BASE = 1000.0
DEFAULT_BACKGROUND_AMPLITUDE = 400.0
DEFAULT_SECONDS_PER_FRAME = 0.11


@dataclass
class MarkerMotion:
    """Trajectory model: base + bh_offset[bh] + bh_drift[bh] * s, s in [-1/2, +1/2]."""

    marker_id: str
    base: tuple[float, float, float]
    bh_offset: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    bh_drift: dict[str, tuple[float, float, float]] = field(default_factory=dict)

    def position(self, breath_hold: str, s: float) -> Point3:
        off = self.bh_offset.get(breath_hold, (0.0, 0.0, 0.0))
        drift = self.bh_drift.get(breath_hold, (0.0, 0.0, 0.0))
        return Point3(
            self.base[0] + off[0] + drift[0] * s,
            self.base[1] + off[1] + drift[1] * s,
            self.base[2] + off[2] + drift[2] * s,
        )


@dataclass
class Occlusion:
    """Saturation patch painted over one marker's projection on one frame."""

    frame_index: int
    marker_id: str
    half_px: int = 40


@dataclass
class PhantomScene:
    name: str
    markers: list[MarkerMotion]
    plan_positions: list[tuple[float, float, float]] | None = None  # defaults to bases
    geometry: AcquisitionGeometry = DEFAULT_GEOMETRY
    frames_per_bh: int = DEFAULT_FRAMES_PER_BH
    arcs: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_ARCS))
    seed: int = 20240501
    noise_sigma: float = 0.0
    background_base: float = DEFAULT_BACKGROUND_BASE
    background_amplitude: float = DEFAULT_BACKGROUND_AMPLITUDE
    blob_amplitude: float = DEFAULT_BLOB_AMPLITUDE
    blob_sigma_px: float = DEFAULT_BLOB_SIGMA_PX
    marker_length_mm: float = 0.0  # > 0 renders an oriented capsule instead of a point blob
    marker_axis: tuple[float, float, float] = (0.0, 1.0, 0.0)
    distractors: list[tuple[tuple[float, float, float], float]] = field(default_factory=list)
    occlusions: list[Occlusion] = field(default_factory=list)

    def plan(self) -> MarkerPlan:
        positions = self.plan_positions or [m.base for m in self.markers]
        return MarkerPlan(
            marker_ids=[m.marker_id for m in self.markers],
            markers=[Point3(*p) for p in positions],
        )

    def to_dict(self) -> dict:
        g = self.geometry
        return {
            "name": self.name,
            "geometry": {
                "sad_mm": g.sad,
                "sid_mm": g.sid,
                "cols": g.detector_cols,
                "rows": g.detector_rows,
                "pixel_pitch_mm": g.pixel_pitch,
            },
            "frames_per_bh": self.frames_per_bh,
            "arcs": {k: list(v) for k, v in self.arcs.items()},
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
            "background_base": self.background_base,
            "background_amplitude": self.background_amplitude,
            "blob_amplitude": self.blob_amplitude,
            "blob_sigma_px": self.blob_sigma_px,
            "marker_length_mm": self.marker_length_mm,
            "marker_axis": list(self.marker_axis),
            "markers": [
                {
                    "id": m.marker_id,
                    "base": list(m.base),
                    "bh_offset": {k: list(v) for k, v in m.bh_offset.items()},
                    "bh_drift": {k: list(v) for k, v in m.bh_drift.items()},
                }
                for m in self.markers
            ],
            "plan_positions": [list(p) for p in self.plan_positions] if self.plan_positions else None,
            "distractors": [[list(pos), scale] for pos, scale in self.distractors],
            "occlusions": [
                {"frame_index": o.frame_index, "marker_id": o.marker_id, "half_px": o.half_px}
                for o in self.occlusions
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomScene":
        try:
            g = doc.get("geometry")
            geometry = (
                AcquisitionGeometry(
                    sad=float(g["sad_mm"]),
                    sid=float(g["sid_mm"]),
                    detector_cols=int(g["cols"]),
                    detector_rows=int(g["rows"]),
                    pixel_pitch=float(g["pixel_pitch_mm"]),
                )
                if g
                else DEFAULT_GEOMETRY
            )
            markers = [
                MarkerMotion(
                    marker_id=str(m["id"]),
                    base=tuple(m["base"]),
                    bh_offset={k: tuple(v) for k, v in m.get("bh_offset", {}).items()},
                    bh_drift={k: tuple(v) for k, v in m.get("bh_drift", {}).items()},
                )
                for m in doc["markers"]
            ]
            plan = doc.get("plan_positions")
            return cls(
                name=str(doc["name"]),
                markers=markers,
                plan_positions=[tuple(p) for p in plan] if plan else None,
                geometry=geometry,
                frames_per_bh=int(doc.get("frames_per_bh", DEFAULT_FRAMES_PER_BH)),
                arcs={k: tuple(v) for k, v in doc.get("arcs", DEFAULT_ARCS).items()},
                seed=int(doc.get("seed", 20240501)),
                noise_sigma=float(doc.get("noise_sigma", 0.0)),
                background_base=float(doc.get("background_base", DEFAULT_BACKGROUND_BASE)),
                background_amplitude=float(
                    doc.get("background_amplitude", DEFAULT_BACKGROUND_AMPLITUDE)
                ),
                blob_amplitude=float(doc.get("blob_amplitude", DEFAULT_BLOB_AMPLITUDE)),
                blob_sigma_px=float(doc.get("blob_sigma_px", DEFAULT_BLOB_SIGMA_PX)),
                marker_length_mm=float(doc.get("marker_length_mm", 0.0)),
                marker_axis=tuple(doc.get("marker_axis", (0.0, 1.0, 0.0))),
                distractors=[(tuple(pos), float(scale)) for pos, scale in doc.get("distractors", [])],
                occlusions=[
                    Occlusion(
                        frame_index=int(o["frame_index"]),
                        marker_id=str(o["marker_id"]),
                        half_px=int(o.get("half_px", 40)),
                    )
                    for o in doc.get("occlusions", [])
                ],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed scene description: {exc}") from exc


@dataclass
class MarkerTruth:
    position: Point3
    u_mm: float
    v_mm: float
    on_detector: bool


@dataclass
class FrameTruth:
    index: int
    angle_deg: float
    breath_hold: str
    markers: dict[str, MarkerTruth]


@dataclass
class GroundTruth:
    scan_id: str
    frames: list[FrameTruth]
    bh_stats: dict[str, dict[str, dict[str, float]]]  # label -> marker_id -> stats

    def to_dict(self) -> dict:
        return {
            "scan_id": self.scan_id,
            "frames": [
                {
                    "index": f.index,
                    "angle_deg": f.angle_deg,
                    "breath_hold": f.breath_hold,
                    "markers": {
                        mid: {
                            "x_mm": t.position.x,
                            "y_mm": t.position.y,
                            "z_mm": t.position.z,
                            "u_mm": t.u_mm,
                            "v_mm": t.v_mm,
                            "on_detector": t.on_detector,
                        }
                        for mid, t in f.markers.items()
                    },
                }
                for f in self.frames
            ],
            "bh_stats": self.bh_stats,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GroundTruth":
        frames = [
            FrameTruth(
                index=int(f["index"]),
                angle_deg=float(f["angle_deg"]),
                breath_hold=str(f["breath_hold"]),
                markers={
                    mid: MarkerTruth(
                        position=Point3(float(t["x_mm"]), float(t["y_mm"]), float(t["z_mm"])),
                        u_mm=float(t["u_mm"]),
                        v_mm=float(t["v_mm"]),
                        on_detector=bool(t["on_detector"]),
                    )
                    for mid, t in f["markers"].items()
                },
            )
            for f in doc["frames"]
        ]
        return cls(scan_id=str(doc["scan_id"]), frames=frames, bh_stats=doc["bh_stats"])


def _splat_gaussian(img: np.ndarray, col: float, row: float, amplitude: float, sigma: float):
    """Add a Gaussian blob centered at fractional pixel (col, row); 5-sigma support."""
    rows, cols = img.shape
    reach = 5.0 * sigma
    r0 = max(int(math.floor(row - reach)), 0)
    r1 = min(int(math.ceil(row + reach)) + 1, rows)
    c0 = max(int(math.floor(col - reach)), 0)
    c1 = min(int(math.ceil(col + reach)) + 1, cols)
    if r0 >= r1 or c0 >= c1:
        return
    rr = np.arange(r0, r1, dtype=float)[:, None]
    cc = np.arange(c0, c1, dtype=float)[None, :]
    img[r0:r1, c0:c1] += amplitude * np.exp(
        -((rr - row) ** 2 + (cc - col) ** 2) / (2.0 * sigma * sigma)
    )


def _splat_object(
    img: np.ndarray,
    scene: PhantomScene,
    position: Point3,
    phi: GantryAngle,
    amplitude: float,
) -> tuple[float, float, bool]:
    """Splat one marker/distractor; returns its exact projection (u, v, on_detector)."""
    geom = scene.geometry
    d = project_point(position, phi, geom)
    col, row = detector_mm_to_pixel(d, geom)
    on = 0.0 <= col <= geom.detector_cols - 1 and 0.0 <= row <= geom.detector_rows - 1
    if scene.marker_length_mm > 0.0:
        axis = np.array(scene.marker_axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        n_samples = 9
        for t in np.linspace(-0.5, 0.5, n_samples):
            p = Point3(
                position.x + axis[0] * scene.marker_length_mm * t,
                position.y + axis[1] * scene.marker_length_mm * t,
                position.z + axis[2] * scene.marker_length_mm * t,
            )
            ds = project_point(p, phi, geom)
            cs, rs = detector_mm_to_pixel(ds, geom)
            _splat_gaussian(img, cs, rs, amplitude / n_samples, scene.blob_sigma_px)
    else:
        _splat_gaussian(img, col, row, amplitude, scene.blob_sigma_px)
    return d.u, d.v, on


def _background(scene: PhantomScene, phi_rad: float) -> np.ndarray:
    """Low-frequency cosine bias field; phase drifts smoothly with gantry angle."""
    rows, cols = scene.geometry.detector_rows, scene.geometry.detector_cols
    rr = np.arange(rows, dtype=float)[:, None] / rows
    cc = np.arange(cols, dtype=float)[None, :] / cols
    cycles = 1.5
    field2d = np.cos(2.0 * math.pi * (cycles * cc) + 0.5 * phi_rad) * np.cos(
        2.0 * math.pi * (cycles * rr) + 0.3
    )
    return scene.background_base + scene.background_amplitude * field2d


def _frame_schedule(scene: PhantomScene) -> list[tuple[int, str, float, float]]:
    """(index, breath_hold, angle_deg, s) per frame; s is the within-hold ramp in [-1/2, 1/2]."""
    schedule = []
    index = 0
    n = scene.frames_per_bh
    for label in ("BH1", "BH2"):
        if label not in scene.arcs:
            continue
        a0, a1 = scene.arcs[label]
        angles = np.linspace(a0, a1, n)
        for i in range(n):
            s = (i / (n - 1) - 0.5) if n > 1 else 0.0
            schedule.append((index, label, float(angles[i]), s))
            index += 1
    return schedule


def render(scene: PhantomScene) -> tuple[ScanSet, GroundTruth]:
    """Render every frame and record exact ground truth (projections are analytic)."""
    geom = scene.geometry
    schedule = _frame_schedule(scene)
    frames: list[ProjectionFrame] = []
    truths: list[FrameTruth] = []
    occl = {(o.frame_index, o.marker_id): o for o in scene.occlusions}

    for index, label, angle_deg, s in schedule:
        phi = GantryAngle.from_degrees(angle_deg)
        img = _background(scene, phi.phi)
        marker_truth: dict[str, MarkerTruth] = {}
        for m in scene.markers:
            pos = m.position(label, s)
            u, v, on = _splat_object(img, scene, pos, phi, scene.blob_amplitude)
            marker_truth[m.marker_id] = MarkerTruth(position=pos, u_mm=u, v_mm=v, on_detector=on)
        for dpos, scale in scene.distractors:
            _splat_object(img, scene, Point3(*dpos), phi, scene.blob_amplitude * scale)
        if scene.noise_sigma > 0.0:
            rng = np.random.default_rng(scene.seed ^ index)
            img = img + rng.normal(0.0, scene.noise_sigma, img.shape)
        pixels = np.clip(np.rint(img), 0, 65535).astype(np.uint16)
        for m in scene.markers:
            o = occl.get((index, m.marker_id))
            if o is not None:
                t = marker_truth[m.marker_id]
                col, row = detector_mm_to_pixel(
                    project_point(t.position, phi, geom), geom
                )
                r0 = max(int(round(row)) - o.half_px, 0)
                r1 = min(int(round(row)) + o.half_px + 1, geom.detector_rows)
                c0 = max(int(round(col)) - o.half_px, 0)
                c1 = min(int(round(col)) + o.half_px + 1, geom.detector_cols)
                pixels[r0:r1, c0:c1] = 65535
        frames.append(
            ProjectionFrame(
                index=index,
                phi=phi,
                pixels=pixels,
                breath_hold=label,
                t_sec=index * DEFAULT_SECONDS_PER_FRAME,
            )
        )
        truths.append(
            FrameTruth(index=index, angle_deg=angle_deg, breath_hold=label, markers=marker_truth)
        )

    windows: dict[str, tuple[int, int]] = {}
    for index, label, _, _ in schedule:
        lo, hi = windows.get(label, (index, index))
        windows[label] = (min(lo, index), max(hi, index))

    bh_stats: dict[str, dict[str, dict[str, float]]] = {}
    for label in windows:
        bh_stats[label] = {}
        for m in scene.markers:
            ys = np.array(
                [t.markers[m.marker_id].position.y for t in truths if t.breath_hold == label]
            )
            mean = float(ys.mean())
            bh_stats[label][m.marker_id] = {
                "mean_y_mm": mean,
                "max_dev_mm": float(np.abs(ys - mean).max()),
                "std_y_mm": float(ys.std()),
                "first_y_mm": float(ys[0]),
                "last_y_mm": float(ys[-1]),
            }

    scan = ScanSet(
        geometry=geom, frames=frames, scan_id=scene.name, breath_hold_windows=windows
    )
    truth = GroundTruth(scan_id=scene.name, frames=truths, bh_stats=bh_stats)
    return scan, truth


def emit(scene: PhantomScene, out_dir) -> dict[str, str]:
    """Render and write manifest + raw pixels + marker plan + ground truth.

    Returns the written paths keyed by role.
    """
    out_dir = Path(out_dir)
    scan, truth = render(scene)
    manifest = save_scan(out_dir, scene.name, scene.geometry, scan.frames)
    plan_path = save_marker_plan(out_dir / "plan.json", scene.plan())
    truth_path = out_dir / "ground_truth.json"
    truth_path.write_text(json.dumps(truth.to_dict(), indent=1, sort_keys=True))
    scene_path = out_dir / "scene.json"
    scene_path.write_text(json.dumps(scene.to_dict(), indent=1, sort_keys=True))
    return {
        "manifest": str(manifest),
        "pixel_file": str(out_dir / "frames.u16"),
        "plan": str(plan_path),
        "ground_truth": str(truth_path),
        "scene": str(scene_path),
    }


def load_ground_truth(path) -> GroundTruth:
    return GroundTruth.from_dict(json.loads(Path(path).read_text()))


def _pair(separation_y: float = 30.0) -> list[MarkerMotion]:
    half = separation_y / 2.0
    return [
        MarkerMotion(marker_id="m1", base=(0.0, -half, 0.0)),
        MarkerMotion(marker_id="m2", base=(0.0, +half, 0.0)),
    ]


def preset_scenes() -> dict[str, PhantomScene]:
    """Deterministic named scenes used by tests and the simulate command."""
    scenes: dict[str, PhantomScene] = {}

    scenes["static_2markers"] = PhantomScene(
        name="static_2markers", markers=_pair(30.0), noise_sigma=60.0
    )
    scenes["static_2markers_clean"] = PhantomScene(
        name="static_2markers_clean", markers=_pair(30.0), noise_sigma=0.0
    )
    scenes["separated_pair"] = PhantomScene(
        name="separated_pair", markers=_pair(40.0), noise_sigma=60.0
    )
    scenes["noisy"] = PhantomScene(name="noisy", markers=_pair(30.0), noise_sigma=90.0)

    # Markers shifted 5 mm laterally from where the plan expects them.
    migrated = [
        MarkerMotion(marker_id="m1", base=(5.0, -15.0, 0.0)),
        MarkerMotion(marker_id="m2", base=(5.0, +15.0, 0.0)),
    ]
    scenes["migrated_5mm"] = PhantomScene(
        name="migrated_5mm",
        markers=migrated,
        plan_positions=[(0.0, -15.0, 0.0), (0.0, 15.0, 0.0)],
        noise_sigma=60.0,
    )

    # 5.2 mm mean offset between holds; 2.1 mm in-hold drifts make the
    # end-of-BH1 to start-of-BH2 gap 7.3 mm.
    step_markers = []
    for m in _pair(30.0):
        step_markers.append(
            MarkerMotion(
                marker_id=m.marker_id,
                base=m.base,
                bh_offset={"BH1": (0.0, 2.6, 0.0), "BH2": (0.0, -2.6, 0.0)},
                bh_drift={"BH1": (0.0, 2.1, 0.0), "BH2": (0.0, 2.1, 0.0)},
            )
        )
    scenes["step_5p2"] = PhantomScene(name="step_5p2", markers=step_markers, noise_sigma=60.0)

    drift_markers = [
        MarkerMotion(
            marker_id=m.marker_id,
            base=m.base,
            bh_drift={"BH1": (0.0, 2.0, 0.0), "BH2": (0.0, 2.0, 0.0)},
        )
        for m in _pair(30.0)
    ]
    scenes["drift_2mm"] = PhantomScene(name="drift_2mm", markers=drift_markers, noise_sigma=60.0)

    # Same seed and markers as static_2markers, plus a bright object 40 mm
    # outside the plan bounding box; pixel noise is identical frame-for-frame.
    scenes["stent_distractor"] = PhantomScene(
        name="stent_distractor",
        markers=_pair(30.0),
        noise_sigma=60.0,
        distractors=[((0.0, 55.0, 0.0), 5.0)],
    )

    scenes["occluded"] = PhantomScene(
        name="occluded",
        markers=_pair(30.0),
        noise_sigma=60.0,
        occlusions=[Occlusion(frame_index=10, marker_id="m1"), Occlusion(frame_index=11, marker_id="m1")],
    )

    # Background steep enough to survive gradient suppression; the volume
    # threshold has to do the cleanup.
    scenes["textured_bg"] = PhantomScene(
        name="textured_bg",
        markers=_pair(30.0),
        noise_sigma=60.0,
        background_amplitude=4000.0,
    )

    scenes["capsule_pair"] = PhantomScene(
        name="capsule_pair",
        markers=_pair(30.0),
        noise_sigma=60.0,
        marker_length_mm=5.0,
    )

    return scenes


def get_scene(name_or_path: str) -> PhantomScene:
    """Look up a preset by name, or load a scene JSON file."""
    scenes = preset_scenes()
    if name_or_path in scenes:
        return scenes[name_or_path]
    path = Path(name_or_path)
    if path.is_file():
        try:
            return PhantomScene.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise InputError(f"scene file is not valid JSON: {exc}") from exc
    raise InputError(
        f"unknown scene {name_or_path!r}; presets: {', '.join(sorted(scenes))}"
    )
