"""Evaluation metrics, the cement upper bound, and the pipeline report.

Sign conventions follow the clinical result tables: volume error =
pre-fractured - inpainted (underestimation positive), fracture-distance
error = straightened - pre-fractured (over-restoration positive), relative
errors are error / pre-fractured * 100.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, ScalarVolume

REPORT_SCHEMA_VERSION = 1

_VERTEBRA_NAMES = (
    [f"C{i}" for i in range(1, 8)]
    + [f"T{i}" for i in range(1, 13)]
    + [f"L{i}" for i in range(1, 6)]
)


class AnalysisError(ValueError):
    """Invalid metric input."""


def vertebra_name(code: int) -> str:
    if not 1 <= code <= 24:
        raise AnalysisError(f"vertebra code must be 1..24, got {code}")
    return _VERTEBRA_NAMES[code - 1]


def vertebra_code(name) -> int:
    """Parse 'L2' / 't12' / '21' to a code 1..24."""
    text = str(name).strip()
    if text.isdigit():
        code = int(text)
        if not 1 <= code <= 24:
            raise AnalysisError(f"vertebra code must be 1..24, got {code}")
        return code
    try:
        return _VERTEBRA_NAMES.index(text.upper()) + 1
    except ValueError:
        raise AnalysisError(f"unknown vertebra name {name!r}") from None


def _as_bool(mask) -> np.ndarray:
    arr = mask.data != 0 if isinstance(mask, LabelVolume) else np.asarray(mask)
    return arr.astype(bool)


def dice(a, b) -> float:
    """Dice overlap; both masks empty counts as perfect agreement (1.0)."""
    a = _as_bool(a)
    b = _as_bool(b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def iou(a, b) -> float:
    a = _as_bool(a)
    b = _as_bool(b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def _volume_data(x):
    return x.data if isinstance(x, ScalarVolume) else np.asarray(x, dtype=np.float32)


def ssim(x, y, roi=None, sigma: float = 1.5, support: int = 7) -> float:
    """Mean local SSIM over the ROI; 3D Gaussian window, joint dynamic range.

    The range L comes from the joint min/max of both inputs over the ROI,
    which makes the metric symmetric in its arguments.
    """
    xd = _volume_data(x).astype(np.float64)
    yd = _volume_data(y).astype(np.float64)
    if xd.shape != yd.shape:
        raise AnalysisError(f"shape mismatch {xd.shape} vs {yd.shape}")
    sel = np.ones(xd.shape, dtype=bool) if roi is None else _as_bool(roi)
    if not np.any(sel):
        raise AnalysisError("empty ROI")
    lo = min(xd[sel].min(), yd[sel].min())
    hi = max(xd[sel].max(), yd[sel].max())
    span = hi - lo
    if span == 0:
        raise AnalysisError("zero dynamic range over the ROI")
    c1 = (0.01 * span) ** 2
    c2 = (0.03 * span) ** 2

    radius = support // 2
    g = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    g /= g.sum()

    def smooth(arr):
        for axis in range(3):
            arr = ndimage.correlate1d(arr, g, axis=axis, mode="reflect")
        return arr

    mu_x = smooth(xd)
    mu_y = smooth(yd)
    var_x = smooth(xd * xd) - mu_x * mu_x
    var_y = smooth(yd * yd) - mu_y * mu_y
    cov = smooth(xd * yd) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean((num / den)[sel]))


def psnr(x, y, roi=None) -> float:
    """20 log10(L / RMSE) dB with L the range of x over the ROI.

    Identical inputs return +inf (serialized as null + an "identical" flag).
    """
    xd = _volume_data(x).astype(np.float64)
    yd = _volume_data(y).astype(np.float64)
    if xd.shape != yd.shape:
        raise AnalysisError(f"shape mismatch {xd.shape} vs {yd.shape}")
    sel = np.ones(xd.shape, dtype=bool) if roi is None else _as_bool(roi)
    if not np.any(sel):
        raise AnalysisError("empty ROI")
    span = xd[sel].max() - xd[sel].min()
    if span == 0:
        raise AnalysisError("zero dynamic range over the ROI")
    rmse = math.sqrt(float(np.mean((xd[sel] - yd[sel]) ** 2)))
    if rmse == 0.0:
        return math.inf
    return 20.0 * math.log10(span / rmse)


def mre(estimated, truth) -> float:
    """Mean relative volume error: mean of |est - truth| / truth."""
    est = np.asarray(estimated, dtype=np.float64)
    ref = np.asarray(truth, dtype=np.float64)
    if est.shape != ref.shape or est.size == 0:
        raise AnalysisError(f"mismatched or empty inputs: {est.shape} vs {ref.shape}")
    if np.any(ref <= 0):
        raise AnalysisError("truth volumes must be positive")
    return float(np.mean(np.abs(est - ref) / ref))


def fracture_distance(centroids: dict[int, np.ndarray], fractured_code: int) -> float:
    """Distance (mm) between the centroids directly above and below a fracture."""
    above = fractured_code - 1
    below = fractured_code + 1
    if above not in centroids or below not in centroids:
        raise AnalysisError(
            f"fracture distance for {fractured_code} needs codes {above} and {below}"
        )
    return float(np.linalg.norm(np.asarray(centroids[above], float)
                                - np.asarray(centroids[below], float)))


@dataclass(frozen=True)
class CementBound:
    ml: float
    clamped: bool = False


def cement_upper_bound(inpainted_ml: float, fractured_ml: float) -> CementBound:
    """Healthy estimate minus fractured volume; negative clamps to 0 + flag."""
    if inpainted_ml < 0 or fractured_ml < 0:
        raise AnalysisError("volumes must be non-negative")
    diff = inpainted_ml - fractured_ml
    if diff < 0:
        return CementBound(0.0, clamped=True)
    return CementBound(diff, clamped=False)


def volume_error(pre_ml: float, inpainted_ml: float) -> tuple[float, float]:
    """(error mL, RE %) with the tables' sign: pre - inpainted."""
    err = pre_ml - inpainted_ml
    return err, err / pre_ml * 100.0


def distance_error(pre_mm: float, straightened_mm: float) -> tuple[float, float]:
    """(error mm, RE %): straightened - pre (positive = over-restored)."""
    err = straightened_mm - pre_mm
    return err, err / pre_mm * 100.0


@dataclass
class VolumeRow:
    code: int
    fractured_ml: float
    inpainted_ml: float
    pre_ml: float | None = None
    error_ml: float | None = None
    re_pct: float | None = None

    def fill_errors(self):
        if self.pre_ml is not None:
            self.error_ml, self.re_pct = volume_error(self.pre_ml, self.inpainted_ml)


@dataclass
class StraighteningRow:
    code: int
    pair: str
    fractured_mm: float
    straightened_mm: float
    pre_mm: float | None = None
    error_mm: float | None = None
    re_pct: float | None = None

    def fill_errors(self):
        if self.pre_mm is not None:
            self.error_mm, self.re_pct = distance_error(self.pre_mm, self.straightened_mm)


@dataclass
class PipelineReport:
    scale: float
    volumes: list[VolumeRow] = field(default_factory=list)
    straightening: list[StraighteningRow] = field(default_factory=list)
    cement_ml: dict[int, CementBound] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)

    def aggregate(self) -> dict:
        out = {}
        v_errs = [r.error_ml for r in self.volumes if r.error_ml is not None]
        v_res = [r.re_pct for r in self.volumes if r.re_pct is not None]
        if v_errs:
            out["volume_error_ml_mean"] = float(np.mean(v_errs))
            out["volume_error_ml_std"] = float(np.std(v_errs, ddof=1)) if len(v_errs) > 1 else 0.0
            out["volume_re_pct_mean"] = float(np.mean(v_res))
        d_errs = [r.error_mm for r in self.straightening if r.error_mm is not None]
        d_res = [r.re_pct for r in self.straightening if r.re_pct is not None]
        if d_errs:
            out["distance_error_mm_mean"] = float(np.mean(d_errs))
            out["distance_error_mm_std"] = float(np.std(d_errs, ddof=1)) if len(d_errs) > 1 else 0.0
            out["distance_re_pct_mean"] = float(np.mean(d_res))
        return out

    def to_json(self) -> str:
        def metric_value(v):
            if isinstance(v, float) and math.isinf(v):
                return None
            return v

        doc = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "scale": self.scale,
            "volumes": [
                {
                    "code": r.code,
                    "vertebra": vertebra_name(r.code),
                    "pre_ml": r.pre_ml,
                    "fractured_ml": r.fractured_ml,
                    "inpainted_ml": r.inpainted_ml,
                    "error_ml": r.error_ml,
                    "re_pct": r.re_pct,
                }
                for r in self.volumes
            ],
            "straightening": [
                {
                    "code": r.code,
                    "vertebra": vertebra_name(r.code),
                    "pair": r.pair,
                    "pre_mm": r.pre_mm,
                    "fractured_mm": r.fractured_mm,
                    "straightened_mm": r.straightened_mm,
                    "error_mm": r.error_mm,
                    "re_pct": r.re_pct,
                }
                for r in self.straightening
            ],
            "cement_ml": {
                str(code): {"ml": b.ml, "clamped": b.clamped}
                for code, b in self.cement_ml.items()
            },
            "metrics": {
                k: metric_value(v) for k, v in self.metrics.items()
            },
            "metric_flags": {
                k: "identical" for k, v in self.metrics.items()
                if isinstance(v, float) and math.isinf(v)
            },
            "aggregate": self.aggregate(),
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def to_text(self) -> str:
        def fmt(v, width=12, nd=2):
            if v is None:
                return " " * (width - 1) + "-"
            if isinstance(v, float) and math.isinf(v):
                return f"{'inf':>{width}}"
            return f"{v:>{width}.{nd}f}"

        lines = [f"scale factor: {self.scale:.4f}", ""]
        if self.straightening:
            lines.append("fracture distances [mm]")
            lines.append(f"{'vertebra':>8} {'pair':>10} {'pre':>12} {'fractured':>12} "
                         f"{'straightened':>12} {'error':>12} {'RE%':>12}")
            for r in self.straightening:
                lines.append(
                    f"{vertebra_name(r.code):>8} {r.pair:>10} {fmt(r.pre_mm)} "
                    f"{fmt(r.fractured_mm)} {fmt(r.straightened_mm)} "
                    f"{fmt(r.error_mm)} {fmt(r.re_pct)}"
                )
            lines.append("")
        if self.volumes:
            lines.append("vertebra volumes [mL]")
            lines.append(f"{'vertebra':>8} {'pre':>12} {'fractured':>12} {'inpainted':>12} "
                         f"{'error':>12} {'RE%':>12} {'cement':>12}")
            for r in self.volumes:
                bound = self.cement_ml.get(r.code)
                cement = None if bound is None else bound.ml
                lines.append(
                    f"{vertebra_name(r.code):>8} {fmt(r.pre_ml)} {fmt(r.fractured_ml)} "
                    f"{fmt(r.inpainted_ml)} {fmt(r.error_ml)} {fmt(r.re_pct)} {fmt(cement)}"
                )
            agg = self.aggregate()
            if "volume_error_ml_mean" in agg:
                lines.append(
                    f"{'mean':>8} {fmt(None)} {fmt(None)} {fmt(None)} "
                    f"{fmt(agg['volume_error_ml_mean'])} {fmt(agg['volume_re_pct_mean'])}"
                )
            lines.append("")
        if self.metrics:
            lines.append("metrics")
            for k in sorted(self.metrics):
                v = self.metrics[k]
                lines.append(f"  {k}: " + ("identical" if isinstance(v, float) and math.isinf(v)
                                           else f"{v:.4f}"))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PipelineReport":
        doc = json.loads(text)
        if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise AnalysisError(f"unsupported report schema {doc.get('schema_version')}")
        report = cls(scale=float(doc["scale"]))
        for r in doc.get("volumes", []):
            report.volumes.append(VolumeRow(
                code=int(r["code"]), fractured_ml=r["fractured_ml"],
                inpainted_ml=r["inpainted_ml"], pre_ml=r.get("pre_ml"),
                error_ml=r.get("error_ml"), re_pct=r.get("re_pct"),
            ))
        for r in doc.get("straightening", []):
            report.straightening.append(StraighteningRow(
                code=int(r["code"]), pair=r["pair"], fractured_mm=r["fractured_mm"],
                straightened_mm=r["straightened_mm"], pre_mm=r.get("pre_mm"),
                error_mm=r.get("error_mm"), re_pct=r.get("re_pct"),
            ))
        for code, b in doc.get("cement_ml", {}).items():
            report.cement_ml[int(code)] = CementBound(b["ml"], b["clamped"])
        flags = doc.get("metric_flags", {})
        for k, v in doc.get("metrics", {}).items():
            report.metrics[k] = math.inf if v is None and flags.get(k) == "identical" else v
        return report


def build_report(fractured_mask: LabelVolume, straightened_mask: LabelVolume,
                 inpaint_results, scale: float, truth=None,
                 metrics: dict | None = None) -> PipelineReport:
    """Assemble the per-vertebra tables from the pipeline stages.

    `truth` (a PhantomTruth with healthy ground truth) fills the
    pre-fractured columns; without it the report still carries the fractured
    and inpainted volumes and the cement bound.
    """
    from .volume import label_centroids, volume_of_label

    report = PipelineReport(scale=float(scale))
    fr_centroids = label_centroids(fractured_mask)

    for result in inpaint_results:
        code = result.code
        fractured_ml = volume_of_label(fractured_mask, code)
        inpainted_ml = result.inpainted_volume_ml()
        row = VolumeRow(code=code, fractured_ml=fractured_ml, inpainted_ml=inpainted_ml)
        if truth is not None and truth.healthy_volumes_ml and code in truth.healthy_volumes_ml:
            row.pre_ml = truth.healthy_volumes_ml[code]
            row.fill_errors()
        report.volumes.append(row)
        report.cement_ml[code] = cement_upper_bound(inpainted_ml, fractured_ml)

        st_centroids = label_centroids(straightened_mask)
        pair = f"{vertebra_name(code - 1)}-{vertebra_name(code + 1)}"
        srow = StraighteningRow(
            code=code,
            pair=pair,
            fractured_mm=fracture_distance(fr_centroids, code),
            straightened_mm=fracture_distance(st_centroids, code),
        )
        if truth is not None and truth.healthy_centroids_mm:
            try:
                srow.pre_mm = fracture_distance(truth.healthy_centroids_mm, code)
                srow.fill_errors()
            except AnalysisError:
                pass
        report.straightening.append(srow)

    if metrics:
        report.metrics.update(metrics)
    return report
