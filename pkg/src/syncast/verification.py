"""Forecast verification: latitude-weighted RMSE, relative quantile error,
contingency tables, SEDI, and report assembly."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AlignmentError,
    DivisionByZeroQuantileError,
    ShapeError,
    UndefinedRateError,
)
from .grid import AtmosphericState, GridSpec, SURFACE_VARS, lat_weights

HIGH_QUANTILES = (0.90, 0.95, 0.99, 0.999, 0.9999)
QUARTILES = (0.25, 0.50, 0.75)
SEDI_EPS = 1e-9


def lat_weighted_rmse(pred: np.ndarray, obs: np.ndarray, grid: GridSpec,
                      mask: np.ndarray | None = None) -> float:
    """sqrt( sum w_i (P - O)^2 / sum w_i ), w_i = cos(lat_i) repeated over lon."""
    if pred.shape != obs.shape or pred.shape[:2] != (grid.n_lat, grid.n_lon):
        raise ShapeError("field shapes disagree with grid")
    w = np.broadcast_to(lat_weights(grid)[:, None], pred.shape[:2]).copy()
    if mask is not None:
        if mask.shape != pred.shape[:2]:
            raise ShapeError("mask shape disagrees with grid")
        w = w * mask
    err2 = (np.asarray(pred, dtype=np.float64)
            - np.asarray(obs, dtype=np.float64)) ** 2
    return float(np.sqrt((w * err2).sum() / w.sum()))


def rqe(pred, obs, quantiles=HIGH_QUANTILES) -> float:
    """Mean relative deviation of predicted vs observed quantiles.

    Negative values signal underestimation of the distribution's level."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    obs = np.asarray(obs, dtype=np.float64).ravel()
    total = 0.0
    for q in quantiles:
        qo = float(np.quantile(obs, q))
        if qo == 0.0:
            raise DivisionByZeroQuantileError(
                f"observed quantile {q} is zero")
        total += (float(np.quantile(pred, q)) - qo) / qo
    return total / len(quantiles)


@dataclass
class ContingencyTable:
    hits: int
    false_alarms: int
    misses: int
    correct_negatives: int

    @property
    def total(self) -> int:
        return self.hits + self.false_alarms + self.misses + self.correct_negatives


def contingency(pred, obs, threshold: float) -> ContingencyTable:
    pred = np.asarray(pred).ravel()
    obs = np.asarray(obs).ravel()
    if pred.shape != obs.shape:
        raise ShapeError("pred and obs lengths disagree")
    p = pred > threshold
    o = obs > threshold
    return ContingencyTable(int(np.sum(p & o)), int(np.sum(p & ~o)),
                            int(np.sum(~p & o)), int(np.sum(~p & ~o)))


def sedi(table: ContingencyTable) -> float:
    """Symmetric extremal dependence index from hit rate H and false-alarm
    rate F, both clamped to [eps, 1-eps] so degenerate limits stay finite."""
    a, b, c, d = (table.hits, table.false_alarms,
                  table.misses, table.correct_negatives)
    if a + c == 0:
        raise UndefinedRateError("hit rate undefined: no observed events")
    if b + d == 0:
        raise UndefinedRateError("false-alarm rate undefined: no observed non-events")
    hr = min(max(a / (a + c), SEDI_EPS), 1 - SEDI_EPS)
    fr = min(max(b / (b + d), SEDI_EPS), 1 - SEDI_EPS)
    num = (math.log(fr) - math.log(hr)
           - math.log(1 - fr) + math.log(1 - hr))
    den = (math.log(fr) + math.log(hr)
           + math.log(1 - fr) + math.log(1 - hr))
    return num / den


def sedi_at_percentile(pred, obs, p: float) -> float:
    """SEDI with the threshold set at the p-th percentile of the observations."""
    if not 0 < p < 100:
        raise ShapeError("percentile must lie in (0, 100)")
    obs = np.asarray(obs, dtype=np.float64)
    threshold = float(np.percentile(obs, p))
    return sedi(contingency(pred, obs, threshold))


@dataclass
class MetricReport:
    """Flat rows (variable, lead_hours, mask, metric, value)."""

    rows: list = field(default_factory=list)
    COLUMNS = ("variable", "lead_hours", "mask", "metric", "value")

    def add(self, variable: str, lead_hours: int, mask: str, metric: str,
            value: float):
        self.rows.append({"variable": variable, "lead_hours": int(lead_hours),
                          "mask": mask, "metric": metric, "value": float(value)})

    def value(self, variable: str, lead_hours: int, metric: str,
              mask: str = "all") -> float:
        for r in self.rows:
            if (r["variable"], r["lead_hours"], r["mask"], r["metric"]) == \
                    (variable, lead_hours, mask, metric):
                return r["value"]
        raise KeyError((variable, lead_hours, mask, metric))

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(r[k]) if k == "value" else r[k])
                            for k in self.COLUMNS})

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump({"columns": list(self.COLUMNS), "rows": self.rows},
                      f, indent=2, sort_keys=True)
            f.write("\n")


def evaluate(forecasts: dict, truth: list, grid: GridSpec,
             masks: dict | None = None, variables=SURFACE_VARS,
             sedi_percentiles=(90.0,), rqe_quantiles=HIGH_QUANTILES) -> MetricReport:
    """Score surface variables per lead time and optional region mask.

    forecasts: {lead_hours: [AtmosphericState, ...]}; each forecast state's
    timestamp must have a matching truth state.
    """
    truth_by_ts = {s.timestamp: s for s in truth}
    mask_items = [("all", None)] + sorted((masks or {}).items())
    report = MetricReport()
    var_index = {v: k for k, v in enumerate(SURFACE_VARS)}
    for lead in sorted(forecasts):
        preds = forecasts[lead]
        pairs = []
        for p in preds:
            if p.timestamp not in truth_by_ts:
                raise AlignmentError(
                    f"no truth state at forecast timestamp {p.timestamp}")
            pairs.append((p, truth_by_ts[p.timestamp]))
        for var in variables:
            k = var_index[var]
            pf = np.stack([p.surface[:, :, k] for p, _ in pairs])
            of = np.stack([o.surface[:, :, k] for _, o in pairs])
            for mname, m in mask_items:
                if m is None:
                    pv, ov = pf, of
                else:
                    pv, ov = pf[:, m], of[:, m]
                rmse2 = 0.0
                wsum = 0.0
                for (p, o) in pairs:
                    w = np.broadcast_to(lat_weights(grid)[:, None],
                                        (grid.n_lat, grid.n_lon))
                    w = w if m is None else w * m
                    e2 = (p.surface[:, :, k].astype(np.float64)
                          - o.surface[:, :, k].astype(np.float64)) ** 2
                    rmse2 += (w * e2).sum()
                    wsum += w.sum()
                report.add(var, lead, mname, "lat_rmse",
                           math.sqrt(rmse2 / wsum))
                try:
                    report.add(var, lead, mname, "rqe",
                               rqe(pv, ov, rqe_quantiles))
                except DivisionByZeroQuantileError:
                    pass
                for pct in sedi_percentiles:
                    try:
                        report.add(var, lead, mname, f"sedi_{pct:g}",
                                   sedi_at_percentile(pv, ov, pct))
                    except UndefinedRateError:
                        pass
    return report
