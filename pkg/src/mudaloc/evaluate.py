"""Localization metrics, the KNN baseline, and report emission.

MED is the mean Euclidean distance between predicted and true positions.
The empirical error CDF is reported together with its 68.27th and
95.45th percentiles (the 1-sigma / 2-sigma coverage errors), using
linear interpolation between order statistics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

SIGMA1_PCT = 68.27
SIGMA2_PCT = 95.45
KNN_K_DEFAULT = 10


@dataclass(frozen=True)
class EvalReport:
    """Metrics of one evaluation run.

    Attributes:
        med: mean Euclidean distance, meters.
        cdf: tuple of (error_m, cum_frac), non-decreasing, ending at 1.0.
        sigma1: 68.27th percentile error, meters.
        sigma2: 95.45th percentile error, meters.
        per_rp_errors: mean error per reference point.
    """

    med: float
    cdf: tuple
    sigma1: float
    sigma2: float
    per_rp_errors: dict

    def __post_init__(self):
        fracs = [f for _, f in self.cdf]
        if any(b < a for a, b in zip(fracs, fracs[1:])):
            raise ValidationError("cdf fractions must be non-decreasing")
        if fracs and abs(fracs[-1] - 1.0) > 1e-12:
            raise ValidationError(f"cdf must end at 1.0, got {fracs[-1]}")
        if self.sigma1 > self.sigma2:
            raise ValidationError(
                f"sigma1 {self.sigma1} exceeds sigma2 {self.sigma2}"
            )

    def to_dict(self) -> dict:
        return {
            "med": self.med,
            "sigma1": self.sigma1,
            "sigma2": self.sigma2,
            "cdf": [[e, f] for e, f in self.cdf],
            "per_rp_errors": {str(k): v for k, v in sorted(self.per_rp_errors.items())},
        }


def _as_points(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2 or out.shape[1] != 2:
        raise ValidationError(f"{name} must be [n, 2] points, got shape {out.shape}")
    return out


def med(preds, truths) -> float:
    """Mean Euclidean distance between paired position lists."""
    p = _as_points(preds, "preds")
    t = _as_points(truths, "truths")
    if p.shape != t.shape or p.shape[0] < 1:
        raise ValidationError(
            f"preds/truths must have equal non-zero lengths, got {p.shape[0]}/{t.shape[0]}"
        )
    return float(np.mean(np.linalg.norm(p - t, axis=1)))


def cdf_and_sigmas(errors):
    """Empirical CDF plus 1-sigma / 2-sigma coverage percentiles.

    Args:
        errors: non-empty list of non-negative error magnitudes.

    Returns:
        (cdf, sigma1, sigma2) where cdf is a tuple of (error, (i+1)/n)
        over sorted errors and the sigmas are the 68.27 / 95.45 linear-
        interpolation percentiles.
    """
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size < 1:
        raise ValidationError("errors must be non-empty")
    e = np.sort(e)
    n = e.size
    cdf = tuple((float(v), (i + 1) / n) for i, v in enumerate(e))
    sigma1 = float(np.percentile(e, SIGMA1_PCT, method="linear"))
    sigma2 = float(np.percentile(e, SIGMA2_PCT, method="linear"))
    return cdf, sigma1, sigma2


def _knn_features(sample, feature: str) -> np.ndarray:
    if feature == "amp":
        return sample.image_amp.ravel()
    if feature == "amp_phase":
        return np.concatenate([sample.image_amp.ravel(), sample.image_phase.ravel()])
    raise ValidationError(f"unknown knn feature {feature!r}")


def knn_locate(query, db, k: int = KNN_K_DEFAULT, feature: str = "amp"):
    """Average position of the k nearest database fingerprints.

    Distances are Euclidean over the flattened amplitude image (or the
    amp+phase concatenation when feature="amp_phase"); distance ties are
    broken toward the lower database index.

    Args:
        query: FingerprintSample.
        db: DomainDataset or plain sequence of FingerprintSample (a pooled
            multi-domain database) with at least k samples.
        k: neighbor count.

    Returns:
        (x, y) position estimate.
    """
    samples = db.samples if hasattr(db, "samples") else tuple(db)
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(samples) < k:
        raise ValidationError(f"database of {len(samples)} samples smaller than k={k}")
    q = _knn_features(query, feature)
    feats = np.stack([_knn_features(s, feature) for s in samples])
    d = np.linalg.norm(feats - q, axis=1)
    nearest = np.argsort(d, kind="stable")[:k]
    pos = np.array([samples[i].pos for i in nearest])
    mean = pos.mean(axis=0)
    return (float(mean[0]), float(mean[1]))


def build_report(preds, truths, rp_ids) -> EvalReport:
    """Assemble an EvalReport from paired predictions and ground truth."""
    p = _as_points(preds, "preds")
    t = _as_points(truths, "truths")
    if p.shape != t.shape or len(rp_ids) != p.shape[0]:
        raise ValidationError("preds, truths, rp_ids must be aligned")
    errors = np.linalg.norm(p - t, axis=1)
    cdf, sigma1, sigma2 = cdf_and_sigmas(errors)
    per_rp: dict = {}
    for rp, err in zip(rp_ids, errors):
        per_rp.setdefault(int(rp), []).append(float(err))
    per_rp_errors = {rp: float(np.mean(v)) for rp, v in sorted(per_rp.items())}
    return EvalReport(
        med=float(np.mean(errors)),
        cdf=cdf,
        sigma1=sigma1,
        sigma2=sigma2,
        per_rp_errors=per_rp_errors,
    )


def evaluate_model(model, test) -> EvalReport:
    """Run the network over a test dataset and score it."""
    amp = np.stack([s.image_amp for s in test.samples])
    phase = np.stack([s.image_phase for s in test.samples])
    preds = model.predict(amp, phase)
    truths = [s.pos for s in test.samples]
    return build_report(preds, truths, [s.rp_id for s in test.samples])


def evaluate_knn(test, db, k: int = KNN_K_DEFAULT, feature: str = "amp") -> EvalReport:
    """Score the KNN baseline on a test dataset against a database."""
    preds = [knn_locate(s, db, k, feature) for s in test.samples]
    truths = [s.pos for s in test.samples]
    return build_report(preds, truths, [s.rp_id for s in test.samples])


def write_report(report: EvalReport, json_path, csv_path=None) -> None:
    """Emit a report as JSON, optionally with the CDF as two-column CSV."""
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("error_m,cum_frac\n")
            for e, f in report.cdf:
                fh.write(f"{e!r},{f!r}\n")
