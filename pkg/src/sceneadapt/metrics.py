"""Scale-invariant and plain SNR metrics plus aggregation into
Table-style reports and the delimited result/trajectory files.

Metric values saturate at +/-100 dB instead of diverging; saturated pairs
are flagged and excluded from aggregate means by default.  PESQ and STOI
columns are reserved in the text report but marked unavailable, so external
metric files can be joined by scene/pair id.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .signal import Waveform

SATURATION_DB = 100.0
_RESIDUAL_RATIO_FLOOR = 1e-20


def _as_samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR: project the estimate onto the reference and
    report target-to-residual power in dB, clamped to +-100."""
    est = _as_samples(estimate)
    ref = _as_samples(reference)
    if est.shape != ref.shape:
        raise InvalidInputError("si_sdr: length mismatch")
    ref_power = float(ref @ ref)
    if ref_power <= 0.0:
        raise InvalidInputError("si_sdr: silent reference")
    proj = float(est @ ref) / ref_power
    target = proj * ref
    p_target = float(target @ target)
    residual = est - target
    p_residual = float(residual @ residual)
    if p_residual < _RESIDUAL_RATIO_FLOOR * p_target:
        return SATURATION_DB
    if p_target <= 0.0:
        return -SATURATION_DB
    return float(np.clip(10.0 * np.log10(p_target / p_residual),
                         -SATURATION_DB, SATURATION_DB))


def snr_db(estimate, reference) -> float:
    """Plain SNR: 10 log10(||ref||^2 / ||est - ref||^2), clamped to +-100."""
    est = _as_samples(estimate)
    ref = _as_samples(reference)
    if est.shape != ref.shape:
        raise InvalidInputError("snr_db: length mismatch")
    ref_power = float(ref @ ref)
    if ref_power <= 0.0:
        raise InvalidInputError("snr_db: silent reference")
    residual = est - ref
    p_residual = float(residual @ residual)
    if p_residual < _RESIDUAL_RATIO_FLOOR * ref_power:
        return SATURATION_DB
    return float(np.clip(10.0 * np.log10(ref_power / p_residual),
                         -SATURATION_DB, SATURATION_DB))


def is_saturated(value_db: float) -> bool:
    return abs(value_db) >= SATURATION_DB


def delta_snr(adapted, pretrained, reference) -> float:
    """SNR improvement of the adapted output over the pretrained one."""
    return snr_db(adapted, reference) - snr_db(pretrained, reference)


@dataclass
class MetricRecord:
    scene_index: int
    method: str
    mode: str
    snr_lo: float
    snr_hi: float
    pair_id: int
    si_sdr_db: float
    snr_db: float

    @property
    def saturated(self) -> bool:
        return is_saturated(self.si_sdr_db) or is_saturated(self.snr_db)


@dataclass
class TrajectoryRecord:
    scene_index: int
    method: str
    update_idx: int
    loss: float
    probe_delta_snr_db: float


@dataclass
class AggregateCell:
    mean_si_sdr_db: float
    mean_snr_db: float
    count: int
    n_saturated: int


@dataclass
class AggregateReport:
    """Mean metrics on the {method} x {mode} x {snr range} grid."""

    cells: dict = field(default_factory=dict)  # (method, mode, (lo, hi)) -> cell
    param_info: dict = field(default_factory=dict)  # method -> (count, percent)

    def snr_ranges(self):
        return sorted({key[2] for key in self.cells})

    def method_modes(self):
        return sorted({(key[0], key[1]) for key in self.cells})


def aggregate(records, param_info=None) -> AggregateReport:
    """Permutation-invariant grid means; saturated pairs are excluded from
    means but counted.  Raises on empty input."""
    records = list(records)
    if not records:
        raise InvalidInputError("aggregate: no records")
    report = AggregateReport(param_info=dict(param_info or {}))
    keys = sorted({(r.method, r.mode, (r.snr_lo, r.snr_hi)) for r in records})
    for key in keys:
        group = sorted(
            (r for r in records
             if (r.method, r.mode, (r.snr_lo, r.snr_hi)) == key),
            key=lambda r: (r.scene_index, r.pair_id))
        clean = [r for r in group if not r.saturated]
        if clean:
            mean_si = float(np.mean([r.si_sdr_db for r in clean]))
            mean_snr = float(np.mean([r.snr_db for r in clean]))
        else:
            mean_si = float("nan")
            mean_snr = float("nan")
        report.cells[key] = AggregateCell(mean_si, mean_snr, len(group),
                                          len(group) - len(clean))
    return report


# ------------------------------------------------------------------- emission

RESULTS_HEADER = ["scene_id", "method", "mode", "snr_lo", "snr_hi",
                  "pair_id", "si_sdr_db", "snr_db"]
TRAJECTORY_HEADER = ["scene_id", "method", "update_idx", "loss",
                     "probe_delta_snr_db"]


def _fmt(x) -> str:
    return repr(float(x))


def write_results_csv(records, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULTS_HEADER)
        for r in sorted(records, key=lambda r: (r.scene_index, r.method,
                                                r.mode, r.pair_id)):
            w.writerow([r.scene_index, r.method, r.mode, _fmt(r.snr_lo),
                        _fmt(r.snr_hi), r.pair_id, _fmt(r.si_sdr_db),
                        _fmt(r.snr_db)])


def read_results_csv(path) -> list:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            out.append(MetricRecord(
                scene_index=int(row["scene_id"]), method=row["method"],
                mode=row["mode"], snr_lo=float(row["snr_lo"]),
                snr_hi=float(row["snr_hi"]), pair_id=int(row["pair_id"]),
                si_sdr_db=float(row["si_sdr_db"]), snr_db=float(row["snr_db"])))
    return out


def write_trajectory_csv(records, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRAJECTORY_HEADER)
        for r in sorted(records, key=lambda r: (r.scene_index, r.method,
                                                r.update_idx)):
            w.writerow([r.scene_index, r.method, r.update_idx, _fmt(r.loss),
                        _fmt(r.probe_delta_snr_db)])


def read_trajectory_csv(path) -> list:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            out.append(TrajectoryRecord(
                scene_index=int(row["scene_id"]), method=row["method"],
                update_idx=int(row["update_idx"]), loss=float(row["loss"]),
                probe_delta_snr_db=float(row["probe_delta_snr_db"])))
    return out


def write_aggregate_csv(report: AggregateReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "mode", "snr_lo", "snr_hi", "mean_si_sdr_db",
                    "mean_snr_db", "count", "n_saturated"])
        for key in sorted(report.cells):
            method, mode, (lo, hi) = key
            cell = report.cells[key]
            w.writerow([method, mode, _fmt(lo), _fmt(hi),
                        _fmt(cell.mean_si_sdr_db), _fmt(cell.mean_snr_db),
                        cell.count, cell.n_saturated])


def render_report_text(report: AggregateReport) -> str:
    """Fixed-width grid: one row per method/mode, metric columns grouped by
    SNR range.  PESQ and STOI stay reserved (n/a)."""
    ranges = report.snr_ranges()
    lines = []
    header1 = f"{'method':<12}{'mode':<12}{'params':>10}{'%':>8}"
    header2 = " " * 42
    for lo, hi in ranges:
        label = f"SNR [{lo:g}, {hi:g}] dB"
        header1 += f"  {label:^28}"
        header2 += f"  {'PESQ':>8}{'STOI':>8} {'SI-SDR':>8}{'SNR':>8}"
    lines.append(header1)
    lines.append(header2)
    lines.append("-" * len(header2))
    for method, mode in report.method_modes():
        count, percent = report.param_info.get(method, (None, None))
        row = f"{method:<12}{mode:<12}"
        row += f"{count:>10}" if count is not None else f"{'-':>10}"
        row += f"{percent:>8.2f}" if percent is not None else f"{'-':>8}"
        for rng in ranges:
            cell = report.cells.get((method, mode, rng))
            if cell is None:
                row += f"  {'-':>8}{'-':>8} {'-':>8}{'-':>8}"
            else:
                row += (f"  {'n/a':>8}{'n/a':>8} "
                        f"{cell.mean_si_sdr_db:>8.2f}{cell.mean_snr_db:>8.2f}")
        lines.append(row)
    lines.append("")
    lines.append("cells report mean over non-saturated test pairs; counts per cell:")
    for key in sorted(report.cells):
        method, mode, (lo, hi) = key
        cell = report.cells[key]
        lines.append(f"  {method}/{mode} [{lo:g}, {hi:g}] dB: "
                     f"n={cell.count}, saturated={cell.n_saturated}")
    return "\n".join(lines) + "\n"
