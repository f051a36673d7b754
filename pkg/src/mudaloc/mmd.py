"""Maximum mean discrepancy estimators and MMD coefficient matrices.

Two sample-based estimators of squared MMD: the quadratic-time form
(biased V-statistic by default, unbiased U-statistic on request) and the
linear-time streaming form averaging one h-statistic per disjoint sample
quad. The coefficient matrices M0 (marginal) and Mc (per-class
conditional) reproduce the same discrepancies as quadratic forms over a
stacked feature matrix, which is what the trace-identity tests exercise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class Kernel:
    """Kernel choice for the MMD estimators.

    kind: "linear" (k(x,y) = x.y) or "rbf" (k(x,y) = exp(-gamma |x-y|^2)).
    gamma: rbf bandwidth; None means the median heuristic at call time.
    """

    kind: str = "rbf"
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ValidationError(f"kernel kind must be linear|rbf, got {self.kind!r}")
        if self.gamma is not None and not self.gamma > 0:
            raise ValidationError(f"gamma must be > 0, got {self.gamma}")


def _as_samples(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValidationError(f"{name} must be [n, d] with n >= 1, got {a.shape}")
    return a


def median_heuristic_gamma(x, y) -> float:
    """1 / median of pairwise squared distances over the pooled samples.

    Raises:
        ValidationError: all pooled points identical (median distance 0).
    """
    z = np.concatenate([_as_samples(x, "x"), _as_samples(y, "y")], axis=0)
    sq = np.sum(z**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    iu = np.triu_indices(z.shape[0], k=1)
    med = float(np.median(d2[iu]))
    if med <= 0:
        raise ValidationError("median pairwise distance is 0; gamma undefined")
    return 1.0 / med


def _resolve_gamma(kernel: Kernel, x, y) -> float:
    if kernel.gamma is not None:
        return kernel.gamma
    return median_heuristic_gamma(x, y)


def kernel_cross(x, y, kernel: Kernel):
    """Gram matrix k(x_i, y_j) of shape [n_x, n_y]."""
    xa = _as_samples(x, "x")
    ya = _as_samples(y, "y")
    if xa.shape[1] != ya.shape[1]:
        raise ValidationError(f"dim mismatch: {xa.shape[1]} vs {ya.shape[1]}")
    if kernel.kind == "linear":
        return xa @ ya.T
    gamma = _resolve_gamma(kernel, xa, ya)
    d2 = (
        np.sum(xa**2, axis=1)[:, None]
        + np.sum(ya**2, axis=1)[None, :]
        - 2.0 * (xa @ ya.T)
    )
    return np.exp(-gamma * np.maximum(d2, 0.0))


def mmd2_quadratic(x, y, kernel: Kernel = Kernel(), unbiased: bool = False) -> float:
    """Quadratic-time squared-MMD estimate.

    The default biased form averages full Gram blocks (diagonals
    included), so identical samples give exactly 0. The unbiased form
    excludes within-block diagonals and needs >= 2 samples per side.

    Args:
        x: [n_x, d] samples from the first distribution.
        y: [n_y, d] samples from the second.
        kernel: Kernel; rbf gamma defaults to the median heuristic on the
            pooled samples.
        unbiased: use the U-statistic.

    Returns:
        Scalar estimate (the unbiased form may be negative).
    """
    xa = _as_samples(x, "x")
    ya = _as_samples(y, "y")
    if kernel.kind == "rbf" and kernel.gamma is None:
        kernel = Kernel("rbf", _resolve_gamma(kernel, xa, ya))
    kxx = kernel_cross(xa, xa, kernel)
    kyy = kernel_cross(ya, ya, kernel)
    kxy = kernel_cross(xa, ya, kernel)
    m, n = xa.shape[0], ya.shape[0]
    if unbiased:
        if m < 2 or n < 2:
            raise ValidationError("unbiased estimate needs >= 2 samples per side")
        term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    else:
        term_x = kxx.mean()
        term_y = kyy.mean()
    return float(term_x + term_y - 2.0 * kxy.mean())


def mmd2_linear(x, y, kernel: Kernel = Kernel()) -> float:
    """Linear-time squared-MMD estimate over disjoint sample quads.

    h(i) = k(x_{2i-1}, x_{2i}) + k(y_{2i-1}, y_{2i})
         - k(x_{2i-1}, y_{2i}) - k(x_{2i}, y_{2i-1})
    and the estimate is the mean of h over the n/2 quads, which is an
    unbiased estimate of squared MMD.

    Args:
        x, y: [n, d] sample blocks with the same even n.

    Raises:
        ValidationError: odd n or mismatched counts.
    """
    xa = _as_samples(x, "x")
    ya = _as_samples(y, "y")
    n = xa.shape[0]
    if ya.shape[0] != n:
        raise ValidationError(f"sample counts differ: {n} vs {ya.shape[0]}")
    if n % 2 or n < 2:
        raise ValidationError(f"linear estimator needs even n >= 2, got {n}")
    if kernel.kind == "rbf" and kernel.gamma is None:
        kernel = Kernel("rbf", _resolve_gamma(kernel, xa, ya))

    x1, x2 = xa[0::2], xa[1::2]
    y1, y2 = ya[0::2], ya[1::2]

    def pair_k(a, b):
        if kernel.kind == "linear":
            return np.sum(a * b, axis=1)
        d2 = np.sum((a - b) ** 2, axis=1)
        return np.exp(-kernel.gamma * d2)

    h = pair_k(x1, x2) + pair_k(y1, y2) - pair_k(x1, y2) - pair_k(x2, y1)
    return float(h.mean())


@dataclass(frozen=True)
class MmdMatrix:
    """Coefficient matrix over stacked source+target samples.

    entries: [(n_s + n_t), (n_s + n_t)] symmetric matrix.
    class_id: None for the marginal matrix, the class label otherwise.
    """

    entries: np.ndarray
    class_id: object = None

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValidationError(f"entries must be square, got {e.shape}")
        e = np.ascontiguousarray(e)
        e.flags.writeable = False
        object.__setattr__(self, "entries", e)


def build_m0(n_s: int, n_t: int) -> MmdMatrix:
    """Marginal MMD coefficient matrix for n_s source + n_t target samples.

    Entries are 1/n_s^2 (source-source), 1/n_t^2 (target-target) and
    -1/(n_s n_t) (cross); equivalently e e^T for the signed indicator
    vector e, so the matrix is rank 1 and its rows sum to 0.
    """
    if n_s < 1 or n_t < 1:
        raise ValidationError(f"need n_s, n_t >= 1, got {n_s}, {n_t}")
    e = np.concatenate([np.full(n_s, 1.0 / n_s), np.full(n_t, -1.0 / n_t)])
    return MmdMatrix(np.outer(e, e))


def build_mc(labels_s, labels_t, class_id) -> MmdMatrix:
    """Per-class conditional MMD coefficient matrix.

    Rows/cols follow the stacked [source..., target...] order. Entries are
    1/(n_s^c)^2 within source class c, 1/(n_t^c)^2 within target class c,
    -1/(n_s^c n_t^c) across, 0 elsewhere.

    Raises:
        ValidationError: class_id absent on either side.
    """
    ls = np.asarray(labels_s)
    lt = np.asarray(labels_t)
    ms = ls == class_id
    mt = lt == class_id
    nsc = int(ms.sum())
    ntc = int(mt.sum())
    if nsc == 0 or ntc == 0:
        raise ValidationError(
            f"class {class_id!r} missing on one side (source {nsc}, target {ntc})"
        )
    e = np.concatenate([ms.astype(np.float64) / nsc,
                        mt.astype(np.float64) / -ntc])
    return MmdMatrix(np.outer(e, e), class_id=class_id)


def combine_m(m0: MmdMatrix, mcs) -> MmdMatrix:
    """Total coefficient matrix M = M0 + sum_c Mc (element-wise)."""
    total = m0.entries.copy()
    for mc in mcs:
        if mc.entries.shape != total.shape:
            raise ValidationError(
                f"shape mismatch: {mc.entries.shape} vs {total.shape}"
            )
        total = total + mc.entries
    return MmdMatrix(total)
