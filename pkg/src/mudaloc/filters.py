"""Amplitude conditioning chain: Hampel, wavelet shrinkage, Butterworth.

Each CSI amplitude stream (one antenna/subcarrier pair over packets) is
cleaned in three passes: a Hampel identifier replaces impulsive outliers
with the local median, wavelet shrinkage suppresses wide-band noise with a
smooth threshold rule, and a causal low-pass removes what is left above
the motion band.

The wavelet transform is an orthonormal periodized Daubechies-4 (8 tap)
pyramid implemented here directly; orthonormality is what makes the
universal threshold sigma*sqrt(2 ln n) meaningful on the detail
coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import butter, lfilter, lfilter_zi

from .data import CsiRecording
from .errors import ValidationError

# Daubechies-4 reconstruction low-pass taps (orthonormal, 4 vanishing
# moments). Analysis filters are the time-reversed pair below.
_DB4_REC_LO = np.array(
    [
        0.23037781330885523,
        0.7148465705525415,
        0.6308807679295904,
        -0.02798376941698385,
        -0.18703481171888114,
        0.030841381835986965,
        0.032883011666982945,
        -0.010597401784997278,
    ]
)
_DEC_LO = _DB4_REC_LO[::-1].copy()
_DEC_HI = (_DB4_REC_LO * ((-1.0) ** np.arange(_DB4_REC_LO.size))).copy()


@dataclass(frozen=True)
class HampelConfig:
    """Sliding-window outlier identifier parameters.

    window: odd centered window length (truncated at the edges).
    n_sigmas: rejection threshold in robust-sigma units.
    mad_scale: MAD-to-sigma factor for Gaussian data.
    """

    window: int = 201
    n_sigmas: float = 3.0
    mad_scale: float = 1.4826

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValidationError(f"window must be odd and >= 3, got {self.window}")
        if not self.n_sigmas > 0 or not self.mad_scale > 0:
            raise ValidationError("n_sigmas and mad_scale must be > 0")


@dataclass(frozen=True)
class WaveletConfig:
    """Wavelet shrinkage parameters.

    levels: decomposition depth.
    threshold_rule: "universal" (sigma * sqrt(2 ln n), sigma from the MAD
        of the finest detail band) or "fixed" (use ``threshold``).
    threshold: fixed threshold value, required when rule is "fixed".
    """

    levels: int = 3
    threshold_rule: str = "universal"
    threshold: float | None = None

    def __post_init__(self):
        if self.levels < 1:
            raise ValidationError(f"levels must be >= 1, got {self.levels}")
        if self.threshold_rule not in ("universal", "fixed"):
            raise ValidationError(
                f"threshold_rule must be universal|fixed, got {self.threshold_rule!r}"
            )
        if self.threshold_rule == "fixed":
            if self.threshold is None or not self.threshold >= 0:
                raise ValidationError("fixed rule needs threshold >= 0")


@dataclass(frozen=True)
class ButterworthConfig:
    """Causal IIR low-pass parameters (bilinear-transform design)."""

    order: int = 4
    cutoff_hz: float = 10.0
    fs_hz: float = 100.0

    def __post_init__(self):
        if self.order < 1:
            raise ValidationError(f"order must be >= 1, got {self.order}")
        if not 0 < self.cutoff_hz < self.fs_hz / 2:
            raise ValidationError(
                f"cutoff must lie in (0, fs/2) = (0, {self.fs_hz / 2}), "
                f"got {self.cutoff_hz}"
            )


def hampel_filter(seq, config: HampelConfig = HampelConfig()):
    """Replace impulsive outliers with the local window median.

    Sample i is replaced by the median of its centered window when it
    deviates from that median by more than
    n_sigmas * mad_scale * MAD(window). Windows are truncated at the
    series edges.

    Args:
        seq: 1-D float array.
        config: HampelConfig.

    Returns:
        (filtered, outlier_mask): filtered copy and boolean mask of the
        replaced positions.

    Raises:
        ValidationError: window longer than the series or non-finite input.
    """
    x = np.asarray(seq, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError(f"seq must be 1-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("seq must be finite")
    n = x.size
    w = config.window
    if w > n:
        raise ValidationError(f"window {w} longer than series of {n}")
    half = w // 2

    med = np.empty(n)
    mad = np.empty(n)
    if n >= w:
        views = sliding_window_view(x, w)
        med[half : n - half] = np.median(views, axis=1)
        mad[half : n - half] = np.median(
            np.abs(views - med[half : n - half, None]), axis=1
        )
    for i in list(range(half)) + list(range(n - half, n)):
        win = x[max(0, i - half) : min(n, i + half + 1)]
        med[i] = np.median(win)
        mad[i] = np.median(np.abs(win - med[i]))

    mask = np.abs(x - med) > config.n_sigmas * config.mad_scale * mad
    out = x.copy()
    out[mask] = med[mask]
    return out, mask


def wavelet_shrink_value(x, t: float):
    """Smooth threshold rule applied to one coefficient (or array).

    For |X| >= T the coefficient keeps its sign and loses
    2T / (exp((|X| - T)/T) + 1); below T it is zeroed. The rule is odd,
    continuous at |X| = T, and never moves a coefficient by more than T.

    Args:
        x: scalar or array of coefficients.
        t: threshold T >= 0. T == 0 keeps every coefficient unchanged.

    Returns:
        Shrunk value(s), same shape as x.
    """
    if t < 0:
        raise ValidationError(f"threshold must be >= 0, got {t}")
    xa = np.asarray(x, dtype=np.float64)
    if t == 0.0:
        out = xa.copy()
    else:
        absx = np.abs(xa)
        keep = absx >= t
        # exp argument is >= 0 on the kept branch; cap it to dodge overflow
        arg = np.minimum((absx - t) / t, 700.0)
        shrunk = np.sign(xa) * (absx - 2.0 * t / (np.exp(arg) + 1.0))
        out = np.where(keep, shrunk, 0.0)
    return out if out.ndim else float(out)


def _dwt_level(x, lo, hi):
    n = x.size
    idx = (2 * np.arange(n // 2)[:, None] + np.arange(lo.size)[None, :]) % n
    win = x[idx]
    return win @ lo, win @ hi


def _idwt_level(ca, cd, lo, hi):
    n = 2 * ca.size
    idx = (2 * np.arange(ca.size)[:, None] + np.arange(lo.size)[None, :]) % n
    contrib = ca[:, None] * lo[None, :] + cd[:, None] * hi[None, :]
    x = np.zeros(n)
    np.add.at(x, idx, contrib)
    return x


def wavedec(seq, levels: int):
    """Periodized orthonormal Daubechies-4 decomposition.

    Odd-length inputs at any level are padded by repeating the last sample;
    ``waverec`` undoes the padding. Returns [cA_L, cD_L, ..., cD_1] plus
    the per-level pre-padding lengths needed for reconstruction.
    """
    x = np.asarray(seq, dtype=np.float64)
    details = []
    lengths = []
    for _ in range(levels):
        lengths.append(x.size)
        if x.size % 2:
            x = np.concatenate([x, x[-1:]])
        ca, cd = _dwt_level(x, _DEC_LO, _DEC_HI)
        details.append(cd)
        x = ca
    return [x] + details[::-1], lengths


def waverec(coeffs, lengths):
    """Inverse of :func:`wavedec` (exact for untouched coefficients)."""
    x = coeffs[0]
    for cd, n_orig in zip(coeffs[1:], lengths[::-1]):
        x = _idwt_level(x, cd, _DEC_LO, _DEC_HI)
        x = x[:n_orig]
    return x


def wavelet_filter(seq, config: WaveletConfig = WaveletConfig()):
    """Denoise a series by shrinking its wavelet detail coefficients.

    The approximation band passes through untouched. With the universal
    rule the threshold is sigma * sqrt(2 ln n) where sigma is estimated
    from the finest detail band as MAD / 0.6745.

    Args:
        seq: 1-D float array, len(seq) >= 2**levels.
        config: WaveletConfig.

    Returns:
        Filtered array, same length as seq.
    """
    x = np.asarray(seq, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError(f"seq must be 1-D, got shape {x.shape}")
    if x.size < 2**config.levels:
        raise ValidationError(
            f"series of {x.size} too short for {config.levels} levels"
        )
    if not np.all(np.isfinite(x)):
        raise ValidationError("seq must be finite")
    coeffs, lengths = wavedec(x, config.levels)
    if config.threshold_rule == "universal":
        d1 = coeffs[-1]
        sigma = np.median(np.abs(d1 - np.median(d1))) / 0.6745
        t = sigma * np.sqrt(2.0 * np.log(x.size))
    else:
        t = float(config.threshold)
    shrunk = [coeffs[0]] + [wavelet_shrink_value(c, t) for c in coeffs[1:]]
    return waverec(shrunk, lengths)


def butterworth_design(config: ButterworthConfig = ButterworthConfig()):
    """Design the low-pass and return its (b, a) coefficients."""
    return butter(config.order, config.cutoff_hz, btype="low", fs=config.fs_hz)


def butterworth_lowpass(seq, config: ButterworthConfig = ButterworthConfig()):
    """Apply the causal low-pass along a series.

    The IIR state starts at steady state for seq[0], so constant series
    pass through exactly and there is no startup transient to corrupt the
    first fingerprint window.

    Args:
        seq: 1-D float array.
        config: ButterworthConfig.

    Returns:
        Filtered array, same length as seq.
    """
    x = np.asarray(seq, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ValidationError(f"seq must be non-empty 1-D, got shape {x.shape}")
    b, a = butterworth_design(config)
    zi = lfilter_zi(b, a) * x[0]
    y, _ = lfilter(b, a, x, zi=zi)
    return y


def qc_pipeline(
    rec: CsiRecording,
    hampel: HampelConfig = HampelConfig(),
    wavelet: WaveletConfig = WaveletConfig(),
    butterworth: ButterworthConfig = ButterworthConfig(),
) -> CsiRecording:
    """Run Hampel -> wavelet -> Butterworth over every amplitude stream.

    Filtering acts along the packet axis independently per
    (antenna, subcarrier) pair. Phase is passed through unchanged (it is
    conditioned by the calibration chain first; see :mod:`mudaloc.phase`).
    IIR undershoot is clamped at zero so the output recording keeps the
    amp >= 0 invariant.

    Args:
        rec: input recording with V >= hampel.window packets.

    Returns:
        New CsiRecording with conditioned amplitudes.
    """
    v, m, n = rec.amp.shape
    if v < hampel.window:
        raise ValidationError(
            f"recording has {v} packets, fewer than hampel window {hampel.window}"
        )
    flat = rec.amp.reshape(v, m * n)
    out = np.empty_like(flat)
    for col in range(m * n):
        s, _ = hampel_filter(flat[:, col], hampel)
        s = wavelet_filter(s, wavelet)
        s = butterworth_lowpass(s, butterworth)
        out[:, col] = s
    out = np.maximum(out, 0.0)
    return CsiRecording(
        rp_id=rec.rp_id,
        pos=rec.pos,
        domain_id=rec.domain_id,
        amp=out.reshape(v, m, n),
        phase=rec.phase,
    )
