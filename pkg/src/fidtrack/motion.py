"""Outlier screening, 3D recovery, and residual-motion statistics.

Per breath-hold and per marker: the lateral/vertical coordinates (x, z) are
the least-squares solution of the projection equation rearranged linearly in
(x, z); detections whose lateral position deviates from the fit by more than
the lateral tolerance (isocenter scale) are outliers. Superior-inferior
coordinates follow per frame from the vertical projection equation; a cubic
fit over the hold screens SI outliers. Statistics (mean, max deviation,
population standard deviation), the between-hold average difference, and the
end-of-first to start-of-second gap are computed per marker and pooled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, PipelineError
from .geometry import DENOM_FLOOR_MM, AcquisitionGeometry, Point3
from .ingest import MarkerPlan, ScanSet
from .tracking import Detection2D

DEFAULT_LATERAL_TOL_MM = 5.0
DEFAULT_SI_TOL_MM = 3.0
MIN_ANGULAR_SPAN_DEG = 5.0


@dataclass
class LateralFit:
    marker_id: str
    breath_hold: str
    x: float  # mm
    z: float  # mm
    residual_rms: float  # mm at isocenter scale
    frames_used: int


@dataclass
class SiPoint:
    frame_index: int
    t: float  # fit abscissa: timestamp when available, else frame index
    y_mm: float
    outlier: bool = False


@dataclass
class SiTrace:
    marker_id: str
    breath_hold: str
    points: list[SiPoint]
    coeffs: np.ndarray | None = None  # cubic, numpy descending order, over t

    def retained(self) -> list[SiPoint]:
        return [p for p in self.points if not p.outlier]

    def fit_value(self, t: float) -> float:
        if self.coeffs is None:
            raise ValueError("trace has no fitted polynomial")
        return float(np.polyval(self.coeffs, t))


def fit_lateral(
    samples: list[tuple[float, float]],
    geom: AcquisitionGeometry,
    marker_id: str = "",
    breath_hold: str = "",
) -> LateralFit:
    """Least-squares (x, z) from (u_mm, phi_rad) samples.

    Each sample contributes the linear equation
    x*(SID*cos(phi) + u*sin(phi)) + z*(u*cos(phi) - SID*sin(phi)) = u*SAD.
    """
    if len(samples) < 2:
        raise PipelineError(f"lateral fit needs >= 2 detections, got {len(samples)}")
    u = np.array([s[0] for s in samples], dtype=float)
    phi = np.array([s[1] for s in samples], dtype=float)
    span = math.degrees(float(phi.max() - phi.min()))
    if span < MIN_ANGULAR_SPAN_DEG:
        raise PipelineError(
            f"lateral fit ill-conditioned: angular span {span:.2f} deg < {MIN_ANGULAR_SPAN_DEG} deg"
        )
    a = np.column_stack(
        [geom.sid * np.cos(phi) + u * np.sin(phi), u * np.cos(phi) - geom.sid * np.sin(phi)]
    )
    b = u * geom.sad
    sol, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < 2:
        raise PipelineError("lateral fit rank-deficient (angles effectively identical)")
    x, z = float(sol[0]), float(sol[1])
    u_pred = expected_u(x, z, phi, geom)
    rms = float(np.sqrt(np.mean((u - u_pred) ** 2))) / geom.magnification
    return LateralFit(
        marker_id=marker_id,
        breath_hold=breath_hold,
        x=x,
        z=z,
        residual_rms=rms,
        frames_used=len(samples),
    )


def expected_u(x: float, z: float, phi, geom: AcquisitionGeometry):
    """Lateral detector coordinate predicted for (x, z) at gantry angle(s) phi."""
    phi = np.asarray(phi, dtype=float)
    denom = geom.sad - x * np.sin(phi) - z * np.cos(phi)
    if np.any(denom <= DENOM_FLOOR_MM):
        raise GeometryError("degenerate geometry in lateral prediction")
    return geom.sid * (x * np.cos(phi) - z * np.sin(phi)) / denom


def screen_lateral(
    samples: list[tuple[float, float]],
    fit: LateralFit,
    geom: AcquisitionGeometry,
    tol: float = DEFAULT_LATERAL_TOL_MM,
) -> list[bool]:
    """Outlier flags: isocenter-scale deviation strictly greater than tol."""
    u = np.array([s[0] for s in samples], dtype=float)
    phi = np.array([s[1] for s in samples], dtype=float)
    dev = np.abs(u - expected_u(fit.x, fit.z, phi, geom)) / geom.magnification
    return [bool(d > tol) for d in dev]


def compute_si(
    samples: list[tuple[int, float, float, float]],
    fit: LateralFit,
    geom: AcquisitionGeometry,
) -> SiTrace:
    """SI coordinates from (frame_index, t, v_mm, phi_rad) samples:
    y = v * (SAD - x*sin(phi) - z*cos(phi)) / SID."""
    points = []
    for frame_index, t, v_mm, phi in samples:
        denom = geom.sad - fit.x * math.sin(phi) - fit.z * math.cos(phi)
        if denom <= DENOM_FLOOR_MM:
            raise GeometryError("degenerate geometry in SI computation")
        points.append(SiPoint(frame_index=frame_index, t=t, y_mm=v_mm * denom / geom.sid))
    return SiTrace(marker_id=fit.marker_id, breath_hold=fit.breath_hold, points=points)


def screen_si(trace: SiTrace, tol: float = DEFAULT_SI_TOL_MM) -> SiTrace:
    """Cubic-fit screening: one fit, one flagging pass, then a refit on the
    retained points for the stored coefficients."""
    pts = trace.retained()
    if len(pts) < 4:
        raise PipelineError(f"SI screening needs >= 4 points, got {len(pts)}")
    t = np.array([p.t for p in pts])
    y = np.array([p.y_mm for p in pts])
    coeffs0 = np.polyfit(t, y, 3)
    residuals = y - np.polyval(coeffs0, t)
    flags = np.abs(residuals) > tol
    if int((~flags).sum()) < 4:
        raise PipelineError("SI screening flagged too many points for a cubic refit")
    coeffs = np.polyfit(t[~flags], y[~flags], 3)
    new_points = []
    flagged = {p.frame_index for p, f in zip(pts, flags) if f}
    for p in trace.points:
        new_points.append(
            SiPoint(
                frame_index=p.frame_index,
                t=p.t,
                y_mm=p.y_mm,
                outlier=p.outlier or p.frame_index in flagged,
            )
        )
    return SiTrace(
        marker_id=trace.marker_id,
        breath_hold=trace.breath_hold,
        points=new_points,
        coeffs=coeffs,
    )


def trace_stats(values) -> tuple[float, float, float]:
    """(mean, max deviation from mean, population standard deviation)."""
    y = np.asarray(values, dtype=float)
    if y.size == 0:
        raise PipelineError("no values to summarize")
    mean = float(y.mean())
    dev = np.abs(y - mean)
    return mean, float(dev.max()), float(y.std())


@dataclass
class BhMarkerResult:
    marker_id: str
    breath_hold: str
    valid: bool
    reason: str | None = None
    lateral: LateralFit | None = None
    trace: SiTrace | None = None
    n_detected: int = 0
    n_lateral_outliers: int = 0
    n_si_outliers: int = 0
    n_used: int = 0
    mean_si: float | None = None
    max_dev: float | None = None
    std_dev: float | None = None
    fit_first: float | None = None  # cubic at the first retained frame
    fit_last: float | None = None  # cubic at the last retained frame
    position_3d: Point3 | None = None


@dataclass
class MarkerScanResult:
    marker_id: str
    per_bh: dict[str, BhMarkerResult]
    scan_mean: float | None = None
    scan_max_dev: float | None = None
    scan_std: float | None = None
    scan_lateral: LateralFit | None = None
    scan_position: Point3 | None = None
    avg_diff: float | None = None
    gap: float | None = None


@dataclass
class PairDistance:
    marker_a: str
    marker_b: str
    dx: float
    dy: float
    dz: float
    distance: float


@dataclass
class ScanReport:
    scan_id: str
    markers: list[MarkerScanResult]
    pooled_bh: dict[str, dict[str, float]] = field(default_factory=dict)
    pooled_scan: dict[str, float] = field(default_factory=dict)
    avg_diff: float | None = None
    gap: float | None = None
    inter_marker_bh: dict[str, list[PairDistance]] = field(default_factory=dict)
    inter_marker_scan: list[PairDistance] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)


def _pair_distances(ids: list[str], positions: dict[str, Point3]) -> list[PairDistance]:
    out = []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            a, b = ids[i], ids[j]
            if a not in positions or b not in positions:
                continue
            pa, pb = positions[a], positions[b]
            out.append(
                PairDistance(
                    marker_a=a,
                    marker_b=b,
                    dx=abs(pa.x - pb.x),
                    dy=abs(pa.y - pb.y),
                    dz=abs(pa.z - pb.z),
                    distance=pa.distance_to(pb),
                )
            )
    return out


def analyze_scan(
    scan: ScanSet,
    plan: MarkerPlan,
    detections: list[Detection2D],
    *,
    lateral_tol: float = DEFAULT_LATERAL_TOL_MM,
    si_tol: float = DEFAULT_SI_TOL_MM,
) -> ScanReport:
    """Full postprocessing of a tracked scan into a ScanReport."""
    geom = scan.geometry
    frame_by_index = {f.index: f for f in scan.frames}
    labels = scan.labels()
    use_time = all(f.t_sec is not None for f in scan.frames)

    counts = {
        "slots": len(detections),
        "detected": sum(1 for d in detections if d.status == "detected"),
        "missing": sum(1 for d in detections if d.status != "detected"),
        "lateral_outliers": 0,
        "si_outliers": 0,
        "used": 0,
    }

    marker_results: list[MarkerScanResult] = []
    for marker_id in plan.marker_ids:
        per_bh: dict[str, BhMarkerResult] = {}
        retained_lateral_samples: list[tuple[float, float]] = []
        for label in labels:
            lo, hi = scan.breath_hold_windows[label]
            dets = [
                d
                for d in detections
                if d.marker_id == marker_id
                and d.status == "detected"
                and lo <= d.frame_index <= hi
            ]
            result = BhMarkerResult(marker_id=marker_id, breath_hold=label, valid=False)
            result.n_detected = len(dets)
            if len(dets) < 4:
                result.reason = f"only {len(dets)} detections in {label}"
                per_bh[label] = result
                continue
            u_samples = [(d.u_mm, frame_by_index[d.frame_index].phi.phi) for d in dets]
            try:
                fit = fit_lateral(u_samples, geom, marker_id=marker_id, breath_hold=label)
                lat_flags = screen_lateral(u_samples, fit, geom, tol=lateral_tol)
                kept = [d for d, f in zip(dets, lat_flags) if not f]
                result.n_lateral_outliers = int(sum(lat_flags))
                si_samples = [
                    (
                        d.frame_index,
                        frame_by_index[d.frame_index].t_sec if use_time else float(d.frame_index),
                        d.v_mm,
                        frame_by_index[d.frame_index].phi.phi,
                    )
                    for d in kept
                ]
                trace = screen_si(compute_si(si_samples, fit, geom), tol=si_tol)
            except (PipelineError, GeometryError) as exc:
                result.reason = str(exc)
                per_bh[label] = result
                continue
            retained = trace.retained()
            result.valid = True
            result.lateral = fit
            result.trace = trace
            result.n_si_outliers = sum(1 for p in trace.points if p.outlier)
            result.n_used = len(retained)
            mean, max_dev, std = trace_stats([p.y_mm for p in retained])
            result.mean_si = mean
            result.max_dev = max_dev
            result.std_dev = std
            result.fit_first = trace.fit_value(retained[0].t)
            result.fit_last = trace.fit_value(retained[-1].t)
            result.position_3d = Point3(fit.x, mean, fit.z)
            counts["lateral_outliers"] += result.n_lateral_outliers
            counts["si_outliers"] += result.n_si_outliers
            counts["used"] += result.n_used
            retained_frames = {p.frame_index for p in retained}
            retained_lateral_samples.extend(
                (d.u_mm, frame_by_index[d.frame_index].phi.phi)
                for d, f in zip(dets, lat_flags)
                if not f and d.frame_index in retained_frames
            )
            per_bh[label] = result

        res = MarkerScanResult(marker_id=marker_id, per_bh=per_bh)
        valid = [per_bh[lb] for lb in labels if lb in per_bh and per_bh[lb].valid]
        if valid:
            all_y = [p.y_mm for r in valid for p in r.trace.retained()]
            res.scan_mean, res.scan_max_dev, res.scan_std = trace_stats(all_y)
            try:
                res.scan_lateral = fit_lateral(
                    retained_lateral_samples, geom, marker_id=marker_id, breath_hold="scan"
                )
                res.scan_position = Point3(res.scan_lateral.x, res.scan_mean, res.scan_lateral.z)
            except PipelineError:
                pass
        bh1 = per_bh.get("BH1")
        bh2 = per_bh.get("BH2")
        if bh1 is not None and bh2 is not None and bh1.valid and bh2.valid:
            res.avg_diff = abs(bh1.mean_si - bh2.mean_si)
            res.gap = abs(bh1.fit_last - bh2.fit_first)
        marker_results.append(res)

    report = ScanReport(scan_id=scan.scan_id, markers=marker_results, counts=counts)

    # Pooled-across-markers statistics: deviations are taken about each
    # marker's own mean, then combined; avg_diff and gap are averaged.
    for label in labels:
        devs = []
        for res in marker_results:
            r = res.per_bh.get(label)
            if r is not None and r.valid:
                devs.extend(p.y_mm - r.mean_si for p in r.trace.retained())
        if devs:
            arr = np.array(devs)
            report.pooled_bh[label] = {
                "max_dev": float(np.abs(arr).max()),
                "std_dev": float(np.sqrt(np.mean(arr**2))),
            }
    scan_devs = []
    for res in marker_results:
        if res.scan_mean is None:
            continue
        for label in labels:
            r = res.per_bh.get(label)
            if r is not None and r.valid:
                scan_devs.extend(p.y_mm - res.scan_mean for p in r.trace.retained())
    if scan_devs:
        arr = np.array(scan_devs)
        report.pooled_scan = {
            "max_dev": float(np.abs(arr).max()),
            "std_dev": float(np.sqrt(np.mean(arr**2))),
        }
    diffs = [r.avg_diff for r in marker_results if r.avg_diff is not None]
    gaps = [r.gap for r in marker_results if r.gap is not None]
    if diffs:
        report.avg_diff = float(np.mean(diffs))
    if gaps:
        report.gap = float(np.mean(gaps))

    ids = list(plan.marker_ids)
    for label in labels:
        positions = {
            r.marker_id: r.per_bh[label].position_3d
            for r in marker_results
            if label in r.per_bh and r.per_bh[label].valid
        }
        report.inter_marker_bh[label] = _pair_distances(ids, positions)
    scan_positions = {
        r.marker_id: r.scan_position for r in marker_results if r.scan_position is not None
    }
    report.inter_marker_scan = _pair_distances(ids, scan_positions)
    return report


def _fit_dict(fit: LateralFit | None) -> dict | None:
    if fit is None:
        return None
    return {
        "x_mm": fit.x,
        "z_mm": fit.z,
        "residual_rms_mm": fit.residual_rms,
        "frames_used": fit.frames_used,
    }


def _point_dict(p: Point3 | None) -> dict | None:
    if p is None:
        return None
    return {"x_mm": p.x, "y_mm": p.y, "z_mm": p.z}


def report_to_dict(report: ScanReport) -> dict:
    """JSON-ready form of a ScanReport (full precision)."""

    def bh_dict(r: BhMarkerResult) -> dict:
        return {
            "valid": r.valid,
            "reason": r.reason,
            "lateral": _fit_dict(r.lateral),
            "n_detected": r.n_detected,
            "n_lateral_outliers": r.n_lateral_outliers,
            "n_si_outliers": r.n_si_outliers,
            "n_used": r.n_used,
            "mean_si_mm": r.mean_si,
            "max_dev_mm": r.max_dev,
            "std_dev_mm": r.std_dev,
            "fit_first_mm": r.fit_first,
            "fit_last_mm": r.fit_last,
            "position_3d": _point_dict(r.position_3d),
        }

    def pair_dict(p: PairDistance) -> dict:
        return {
            "marker_a": p.marker_a,
            "marker_b": p.marker_b,
            "dx_mm": p.dx,
            "dy_mm": p.dy,
            "dz_mm": p.dz,
            "distance_mm": p.distance,
        }

    return {
        "scan_id": report.scan_id,
        "markers": [
            {
                "marker_id": m.marker_id,
                "per_breath_hold": {lb: bh_dict(r) for lb, r in m.per_bh.items()},
                "scan_mean_si_mm": m.scan_mean,
                "scan_max_dev_mm": m.scan_max_dev,
                "scan_std_dev_mm": m.scan_std,
                "scan_lateral": _fit_dict(m.scan_lateral),
                "scan_position_3d": _point_dict(m.scan_position),
                "avg_diff_mm": m.avg_diff,
                "gap_mm": m.gap,
            }
            for m in report.markers
        ],
        "pooled": {
            "per_breath_hold": report.pooled_bh,
            "scan": report.pooled_scan,
            "avg_diff_mm": report.avg_diff,
            "gap_mm": report.gap,
        },
        "inter_marker": {
            "per_breath_hold": {
                lb: [pair_dict(p) for p in pairs] for lb, pairs in report.inter_marker_bh.items()
            },
            "scan": [pair_dict(p) for p in report.inter_marker_scan],
        },
        "counts": report.counts,
    }
