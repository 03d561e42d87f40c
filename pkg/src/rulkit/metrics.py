"""Prognostics metrics over per-row predictive distributions.

Each record pairs a true remaining useful life with a predictive that is a
Gaussian, a finite Gaussian mixture, or a bare point estimate. Reported
quantities:

* rmse of the point estimates (mixtures reduce to their moment mean),
* mean negative log likelihood (mixtures via stable log-sum-exp),
* alpha-lambda accuracy: fraction of predictions inside the band
  (1 - alpha) rul <= prediction <= (1 + alpha) rul,
* probability mass the predictive assigns to that band (mixtures are
  moment-matched to a Gaussian first).

Records whose true RUL is zero have a degenerate band; they are excluded
from both alpha-lambda metrics and counted separately in the report. NLL is
the per-sample mean, stated in the report header.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .dgp import MixturePredictive, mixture_moments
from .mathcore import GaussianDist, NumericalError, gaussian_cdf, gaussian_logpdf, log_sum_exp


@dataclass
class PointPredictive:
    """Prediction with no distribution attached (deterministic baselines)."""

    value: float

    def __post_init__(self):
        self.value = float(self.value)


Predictive = Union[GaussianDist, MixturePredictive, PointPredictive]


@dataclass
class PredictionRecord:
    unit_id: str
    time_index: int
    rul_true: float
    predictive: Predictive

    def __post_init__(self):
        self.rul_true = float(self.rul_true)
        if self.rul_true < 0.0:
            raise ValueError(f"true RUL must be nonnegative, got {self.rul_true}")


def point_estimate(pred: Predictive) -> float:
    if isinstance(pred, PointPredictive):
        return pred.value
    if isinstance(pred, MixturePredictive):
        return mixture_moments(pred)[0]
    return pred.mean


def moment_gaussian(pred: Predictive) -> GaussianDist:
    """Gaussian with the predictive's first two moments."""
    if isinstance(pred, GaussianDist):
        return pred
    if isinstance(pred, MixturePredictive):
        mean, var = mixture_moments(pred)
        return GaussianDist(mean, var)
    raise TypeError("point predictions carry no distribution")


def predictive_logpdf(pred: Predictive, y: float) -> float:
    if isinstance(pred, GaussianDist):
        return float(gaussian_logpdf(y, pred.mean, pred.variance))
    if isinstance(pred, MixturePredictive):
        comp = gaussian_logpdf(y, pred.means, pred.variances)
        return float(log_sum_exp(comp, b=pred.weights))
    raise TypeError("point predictions carry no density")


def _require_records(records):
    if not records:
        raise ValueError("empty record set")


def rmse(records: list[PredictionRecord]) -> float:
    _require_records(records)
    errs = np.array([point_estimate(r.predictive) - r.rul_true for r in records])
    return float(np.sqrt(np.mean(errs * errs)))


def nll(records: list[PredictionRecord]) -> float:
    """Per-sample mean negative log likelihood."""
    _require_records(records)
    values = [-predictive_logpdf(r.predictive, r.rul_true) for r in records]
    out = float(np.mean(values))
    if not math.isfinite(out):
        raise NumericalError("predictive density vanished on at least one record")
    return out


def _banded(records, alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    _require_records(records)
    valid = [r for r in records if r.rul_true > 0.0]
    if not valid:
        raise ValueError("every record has zero RUL; the accuracy band is degenerate")
    return valid


def alpha_lambda(records: list[PredictionRecord], alpha: float = 0.2) -> float:
    """Fraction of point estimates inside the relative accuracy band."""
    valid = _banded(records, alpha)
    hits = 0
    for r in valid:
        pred = point_estimate(r.predictive)
        if (1.0 - alpha) * r.rul_true <= pred <= (1.0 + alpha) * r.rul_true:
            hits += 1
    return hits / len(valid)


def prob_alpha_lambda(records: list[PredictionRecord], alpha: float = 0.2) -> float:
    """Mean predictive mass inside the band, Gaussians by moment matching."""
    valid = _banded(records, alpha)
    total = 0.0
    for r in valid:
        g = moment_gaussian(r.predictive)
        std = g.std
        hi = gaussian_cdf((1.0 + alpha) * r.rul_true, g.mean, std)
        lo = gaussian_cdf((1.0 - alpha) * r.rul_true, g.mean, std)
        total += float(hi - lo)
    return total / len(valid)


@dataclass
class MetricsReport:
    """Fleet-level and per-unit metric values with deterministic rendering."""

    alpha: float
    num_records: int
    excluded_eol: int
    rmse: float
    nll: float | None
    alpha_lambda: float | None
    prob_alpha_lambda: float | None
    per_unit: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "nll_convention": "per_sample_mean",
            "num_records": self.num_records,
            "excluded_eol": self.excluded_eol,
            "rmse": self.rmse,
            "nll": self.nll,
            "alpha_lambda": self.alpha_lambda,
            "prob_alpha_lambda": self.prob_alpha_lambda,
            "per_unit": self.per_unit,
        }

    def to_text(self) -> str:
        lines = [
            f"alpha {self.alpha!r}",
            "nll_convention per_sample_mean",
            f"num_records {self.num_records}",
            f"excluded_eol {self.excluded_eol}",
            f"rmse {self.rmse!r}",
            f"nll {_fmt(self.nll)}",
            f"alpha_lambda {_fmt(self.alpha_lambda)}",
            f"prob_alpha_lambda {_fmt(self.prob_alpha_lambda)}",
        ]
        for unit in sorted(self.per_unit):
            for key in ("rmse", "nll", "alpha_lambda", "prob_alpha_lambda"):
                lines.append(f"per_unit.{unit}.{key} {_fmt(self.per_unit[unit][key])}")
        return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    return "-" if value is None else repr(value)


def compute_report(records: list[PredictionRecord], alpha: float = 0.2) -> MetricsReport:
    """Metrics over all records plus a per-unit breakdown."""
    _require_records(records)
    has_dist = not any(isinstance(r.predictive, PointPredictive) for r in records)
    excluded = sum(1 for r in records if r.rul_true == 0.0)

    def block(rs):
        # a block of all end-of-life rows has no accuracy band to score
        has_band = any(r.rul_true > 0.0 for r in rs)
        return {
            "rmse": rmse(rs),
            "nll": nll(rs) if has_dist else None,
            "alpha_lambda": alpha_lambda(rs, alpha) if has_band else None,
            "prob_alpha_lambda": prob_alpha_lambda(rs, alpha) if has_dist and has_band else None,
        }

    fleet = block(records)
    per_unit = {}
    for unit in sorted({r.unit_id for r in records}):
        per_unit[unit] = block([r for r in records if r.unit_id == unit])
    return MetricsReport(
        alpha=alpha,
        num_records=len(records),
        excluded_eol=excluded,
        rmse=fleet["rmse"],
        nll=fleet["nll"],
        alpha_lambda=fleet["alpha_lambda"],
        prob_alpha_lambda=fleet["prob_alpha_lambda"],
        per_unit=per_unit,
    )
