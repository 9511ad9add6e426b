"""Per-frame 2D marker tracking.

Each frame is reduced to its regular (unsuppressed) gradient image; point
prompts projected from the refined 3D positions seed a pluggable segmenter;
each returned mask is reduced to the unweighted mean of its pixel
coordinates. Misses are data (status "missing"), not errors.

The built-in baseline segmenter is deterministic: within a window centered
at the prompt it seeds at the brightest gradient pixel and region-grows over
8-connected pixels whose value is at least grow_ratio times the seed value,
rejecting empty or oversized regions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import PipelineError
from .geometry import AcquisitionGeometry, detector_mm_to_pixel, pixel_to_detector_mm, project_point
from .gradients import gradient
from .ingest import MarkerPlan, ProjectionFrame, ScanSet
from .volume import RefinedMarkers

DEFAULT_WINDOW_PX = 31
DEFAULT_GROW_RATIO = 0.3
DEFAULT_MAX_AREA_PX = 200


@dataclass
class PointPrompt:
    marker_id: str
    col: float
    row: float
    frame_index: int


@dataclass
class MarkerMask:
    marker_id: str
    frame_index: int
    pixels: set[tuple[int, int]]  # (col, row) integer coordinates


@dataclass
class Detection2D:
    marker_id: str
    frame_index: int
    u_mm: float | None
    v_mm: float | None
    status: str  # "detected" | "missing"


class SegmenterContract(Protocol):
    """Behavioral interface every segmenter (built-in or external) satisfies.

    Frames are submitted in strictly increasing index order; segment returns
    one mask per prompted marker or None for an explicit miss.
    """

    def start(self, geom: AcquisitionGeometry, marker_ids: list[str]) -> None: ...

    def segment(
        self, frame_index: int, gbar: np.ndarray, prompts: list[PointPrompt]
    ) -> dict[str, MarkerMask | None]: ...

    def finish(self) -> None: ...


def make_prompts(
    refined: RefinedMarkers,
    plan: MarkerPlan,
    frame: ProjectionFrame,
    geom: AcquisitionGeometry,
) -> list[PointPrompt]:
    """Project each refined 3D position into the frame; off-detector prompts are skipped."""
    prompts = []
    for marker_id, pos in zip(plan.marker_ids, refined.positions):
        d = project_point(pos, frame.phi, geom)
        col, row = detector_mm_to_pixel(d, geom)
        if 0.0 <= col <= geom.detector_cols - 1 and 0.0 <= row <= geom.detector_rows - 1:
            prompts.append(
                PointPrompt(marker_id=marker_id, col=col, row=row, frame_index=frame.index)
            )
    return prompts


def grow_region(
    gbar: np.ndarray,
    seed: tuple[int, int],
    threshold: float,
    bounds: tuple[int, int, int, int],
    max_area: int,
) -> set[tuple[int, int]] | None:
    """8-connected region of pixels >= threshold around seed, confined to
    bounds (r0, r1, c0, c1); None when the full region exceeds max_area."""
    r0, r1, c0, c1 = bounds
    region: set[tuple[int, int]] = set()
    stack = [seed]
    seen = {seed}
    while stack:
        r, c = stack.pop()
        region.add((r, c))
        if len(region) > max_area:
            return None
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                nr, nc = r + dr, c + dc
                if r0 <= nr < r1 and c0 <= nc < c1 and (nr, nc) not in seen:
                    if gbar[nr, nc] >= threshold:
                        seen.add((nr, nc))
                        stack.append((nr, nc))
    return region


class BaselineSegmenter:
    """Deterministic window/seed/region-grow segmenter over gradient images."""

    def __init__(
        self,
        window: int = DEFAULT_WINDOW_PX,
        grow_ratio: float = DEFAULT_GROW_RATIO,
        max_area: int = DEFAULT_MAX_AREA_PX,
    ):
        if window < 3 or window % 2 == 0:
            raise ValueError(f"window must be an odd integer >= 3, got {window}")
        if not (0.0 < grow_ratio <= 1.0):
            raise ValueError(f"grow_ratio must be in (0, 1], got {grow_ratio}")
        if max_area < 1:
            raise ValueError(f"max_area must be >= 1, got {max_area}")
        self.window = window
        self.grow_ratio = grow_ratio
        self.max_area = max_area

    def start(self, geom: AcquisitionGeometry, marker_ids: list[str]) -> None:
        pass

    def finish(self) -> None:
        pass

    def segment(
        self, frame_index: int, gbar: np.ndarray, prompts: list[PointPrompt]
    ) -> dict[str, MarkerMask | None]:
        masks: dict[str, MarkerMask | None] = {}
        half = self.window // 2
        rows, cols = gbar.shape
        for prompt in prompts:
            pr = int(round(prompt.row))
            pc = int(round(prompt.col))
            r0 = max(pr - half, 0)
            r1 = min(pr + half + 1, rows)
            c0 = max(pc - half, 0)
            c1 = min(pc + half + 1, cols)
            window = gbar[r0:r1, c0:c1]
            if window.size == 0 or float(window.max()) <= 0.0:
                masks[prompt.marker_id] = None
                continue
            flat = int(np.argmax(window))
            sr, sc = divmod(flat, window.shape[1])
            seed = (r0 + sr, c0 + sc)
            seed_value = float(gbar[seed])
            region = grow_region(
                gbar, seed, self.grow_ratio * seed_value, (r0, r1, c0, c1), self.max_area
            )
            if region is None:
                masks[prompt.marker_id] = None
                continue
            masks[prompt.marker_id] = MarkerMask(
                marker_id=prompt.marker_id,
                frame_index=frame_index,
                pixels={(c, r) for r, c in region},
            )
        return masks


def mask_center(mask: MarkerMask) -> tuple[float, float]:
    """Unweighted mean of the mask's (col, row) pixel coordinates."""
    cols = [p[0] for p in mask.pixels]
    rows = [p[1] for p in mask.pixels]
    return sum(cols) / len(cols), sum(rows) / len(rows)


def track_scan(
    scan: ScanSet,
    plan: MarkerPlan,
    refined_by_bh: dict[str, RefinedMarkers],
    segmenter: SegmenterContract,
) -> list[Detection2D]:
    """One Detection2D per frame per planned marker, in frame-then-plan order."""
    for label in scan.labels():
        if label not in refined_by_bh:
            raise PipelineError(f"no refined positions for breath-hold {label!r}")
    detections: list[Detection2D] = []
    segmenter.start(scan.geometry, list(plan.marker_ids))
    try:
        for frame in scan.frames:
            refined = refined_by_bh[frame.breath_hold]
            prompts = make_prompts(refined, plan, frame, scan.geometry)
            gbar = gradient(frame, mu=None).values
            masks = segmenter.segment(frame.index, gbar, prompts)
            for marker_id in plan.marker_ids:
                mask = masks.get(marker_id)
                if mask is None or not mask.pixels:
                    detections.append(
                        Detection2D(
                            marker_id=marker_id,
                            frame_index=frame.index,
                            u_mm=None,
                            v_mm=None,
                            status="missing",
                        )
                    )
                    continue
                col, row = mask_center(mask)
                d = pixel_to_detector_mm(col, row, scan.geometry)
                detections.append(
                    Detection2D(
                        marker_id=marker_id,
                        frame_index=frame.index,
                        u_mm=d.u,
                        v_mm=d.v,
                        status="detected",
                    )
                )
    finally:
        segmenter.finish()
    return detections


DETECTIONS_CSV_COLUMNS = [
    "scan_id",
    "frame_index",
    "angle_deg",
    "breath_hold",
    "marker_id",
    "u_mm",
    "v_mm",
    "status",
]


def write_detections_csv(
    path, scan: ScanSet, detections: list[Detection2D], header_lines: list[str] | None = None
) -> None:
    frame_by_index = {f.index: f for f in scan.frames}
    with open(path, "w", newline="") as fh:
        for line in header_lines or []:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(DETECTIONS_CSV_COLUMNS)
        for det in detections:
            frame = frame_by_index[det.frame_index]
            writer.writerow(
                [
                    scan.scan_id,
                    det.frame_index,
                    repr(frame.phi.degrees),
                    frame.breath_hold,
                    det.marker_id,
                    repr(det.u_mm) if det.u_mm is not None else "",
                    repr(det.v_mm) if det.v_mm is not None else "",
                    det.status,
                ]
            )


def read_detections_csv(path) -> list[Detection2D]:
    detections = []
    with open(path, newline="") as fh:
        rows = [r for r in fh if not r.startswith("#")]
    reader = csv.DictReader(rows)
    for rec in reader:
        missing = rec["status"] != "detected"
        detections.append(
            Detection2D(
                marker_id=rec["marker_id"],
                frame_index=int(rec["frame_index"]),
                u_mm=None if missing else float(rec["u_mm"]),
                v_mm=None if missing else float(rec["v_mm"]),
                status=rec["status"],
            )
        )
    return detections
