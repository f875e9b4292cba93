"""Log-linear fits of success rate against model size.

    success_pct = alpha * log_base(params_billions) + intercept

Base 10 by default: with base 10 the published per-component coefficients
keep predictions inside [0, 100] over 3B..200B.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# The closed model's size is not public; 200B is an estimate, not a measurement.
GPT4O_PARAMS_BILLIONS_ESTIMATE = 200.0

# Published coefficients (alpha, intercept, r2), log base 10.
REFERENCE_COEFFICIENTS = {
    "All Modules": (15.6, 18.1, 0.58),
    "Planner": (16.0, 12.7, 0.82),
    "Actor": (12.0, 13.0, 0.76),
    "Memory Manager": (5.6, 12.7, 0.89),
}


class DegenerateDesignError(ValueError):
    pass


@dataclass(frozen=True)
class ScalePoint:
    params_billions: float
    success_pct: float
    component_label: str = ""

    def __post_init__(self) -> None:
        if not self.params_billions > 0:
            raise ValueError("params_billions must be > 0")
        if not 0.0 <= self.success_pct <= 100.0:
            raise ValueError("success_pct must be in [0, 100]")


@dataclass(frozen=True)
class ScalingFit:
    alpha: float
    intercept: float
    r2: float
    n_points: int
    log_base: float = 10.0
    component_label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def fit_loglinear(points: Sequence[ScalePoint], log_base: float = 10.0) -> ScalingFit:
    """Ordinary least squares of success on log(size)."""
    if len(points) < 2:
        raise DegenerateDesignError("need at least 2 points")
    x = np.log([p.params_billions for p in points]) / math.log(log_base)
    y = np.array([p.success_pct for p in points], dtype=float)
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx <= 1e-24 * max(1.0, float(x @ x)):
        raise DegenerateDesignError("all model sizes are identical; slope is undetermined")
    alpha = float(xc @ (y - y.mean())) / sxx
    intercept = float(y.mean() - alpha * x.mean())
    resid = y - (alpha * x + intercept)
    ssr = float(resid @ resid)
    sst = float((y - y.mean()) @ (y - y.mean()))
    if sst <= 1e-24 * max(1.0, float(y @ y)):
        r2 = 1.0  # flat data is fitted exactly by a flat line
    else:
        r2 = 1.0 - ssr / sst
    labels = {p.component_label for p in points}
    label = labels.pop() if len(labels) == 1 else ""
    return ScalingFit(alpha, intercept, min(r2, 1.0), len(points), log_base, label)


def predict_success(fit: ScalingFit, params_billions: float) -> tuple[float, bool]:
    """Predicted success %, clamped to [0, 100]; second item flags clamping."""
    if not params_billions > 0:
        raise ValueError("params_billions must be > 0")
    raw = fit.alpha * math.log(params_billions) / math.log(fit.log_base) + fit.intercept
    clamped = min(max(raw, 0.0), 100.0)
    return clamped, clamped != raw


def r2_of_line(points: Sequence[ScalePoint], alpha: float, intercept: float, log_base: float = 10.0) -> float:
    x = np.log([p.params_billions for p in points]) / math.log(log_base)
    y = np.array([p.success_pct for p in points])
    sst = float(((y - y.mean()) ** 2).sum())
    ssr = float(((y - alpha * x - intercept) ** 2).sum())
    return 1.0 - ssr / sst if sst > 0 else float(ssr == 0)


def fit_by_component(points: Iterable[ScalePoint], log_base: float = 10.0) -> dict[str, ScalingFit]:
    groups: dict[str, list[ScalePoint]] = {}
    for p in points:
        groups.setdefault(p.component_label, []).append(p)
    return {label: fit_loglinear(pts, log_base) for label, pts in groups.items()}


# --------------------------------------------------------------------------
# CSV I/O and the coefficient table
# --------------------------------------------------------------------------


def read_points(path: str | Path) -> list[ScalePoint]:
    points = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                points.append(ScalePoint(float(row["params_billions"]), float(row["success_pct"]),
                                         (row.get("component_label") or "").strip()))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return points


FIT_FIELDS = ("component_label", "alpha", "intercept", "r2", "n_points", "log_base")


def write_fits(fits: Iterable[ScalingFit], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=FIT_FIELDS)
        writer.writeheader()
        for f in fits:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in f.to_dict().items()})


def read_fits(path: str | Path) -> list[ScalingFit]:
    fits = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                fits.append(ScalingFit(float(row["alpha"]), float(row["intercept"]), float(row["r2"]),
                                       int(row["n_points"]), float(row["log_base"]),
                                       row["component_label"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return fits


def coefficient_table(fits: Iterable[ScalingFit]) -> str:
    rows = [("Component", "alpha", "intercept", "R^2")]
    rows += [(f.component_label or "(all)", f"{f.alpha:.1f}", f"{f.intercept:.1f}", f"{f.r2:.2f}")
             for f in fits]
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{r[0]:<{width}}  {r[1]:>6}  {r[2]:>9}  {r[3]:>5}" for r in rows)
