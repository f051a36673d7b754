"""Phase calibration: unwrap, sampling-offset removal, linear detrend.

Raw CSI phase is wrapped and carries a linear-in-subcarrier slope from the
sampling time offset (STO) plus a constant offset per packet. Calibration
runs per packet: unwrap each antenna row across subcarriers, estimate the
shared STO by least squares over all antennas, cancel its slope, then
remove the remaining endpoint-to-endpoint linear trend and the mean.

The detrend step pins the first and last subcarrier of every output row
to the same value, which downstream tests rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CsiRecording
from .errors import ValidationError


@dataclass(frozen=True)
class PhaseCalibConfig:
    """Calibration parameters.

    f_delta_hz: subcarrier spacing in Hz.
    """

    f_delta_hz: float = 312500.0

    def __post_init__(self):
        if not self.f_delta_hz > 0:
            raise ValidationError(f"f_delta_hz must be > 0, got {self.f_delta_hz}")


def unwrap_phase(seq):
    """Unwrap a 1-D phase sequence so successive diffs lie in (-pi, pi].

    The first element is preserved exactly.
    """
    x = np.asarray(seq, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ValidationError(f"seq must be non-empty 1-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("seq must be finite")
    return np.unwrap(x)


def estimate_sto(psi, config: PhaseCalibConfig = PhaseCalibConfig()) -> float:
    """Least-squares STO estimate from one packet's unwrapped phase.

    Minimizes sum_{m,n} (psi[m,n] + 2*pi*f_delta*(n-1)*tau + beta)^2
    jointly over (tau, beta). Per-antenna constant offsets do not bias the
    estimate because the regressor pattern repeats per antenna.

    Args:
        psi: unwrapped phase matrix [M, N], N >= 2.
        config: PhaseCalibConfig.

    Returns:
        tau_hat in seconds.
    """
    y = np.asarray(psi, dtype=np.float64)
    if y.ndim != 2:
        raise ValidationError(f"psi must be [M, N], got shape {y.shape}")
    m, n = y.shape
    if n < 2:
        raise ValidationError("need at least 2 subcarriers to fit a slope")
    u = np.arange(n, dtype=np.float64)  # (n-1) with 1-based subcarrier index
    uc = u - u.mean()
    yc = y - y.mean()
    cov = float((yc * uc[None, :]).sum())
    var = float(m * (uc**2).sum())
    return -cov / (2.0 * np.pi * config.f_delta_hz * var)


def sanitize_sto(psi, tau: float, config: PhaseCalibConfig = PhaseCalibConfig()):
    """Cancel the STO-induced linear phase: psi + 2*pi*f_delta*(n-1)*tau."""
    y = np.asarray(psi, dtype=np.float64)
    if y.ndim != 2:
        raise ValidationError(f"psi must be [M, N], got shape {y.shape}")
    u = np.arange(y.shape[1], dtype=np.float64)
    return y + 2.0 * np.pi * config.f_delta_hz * u[None, :] * tau


def linear_transform(psi_hat, d=None):
    """Remove the endpoint linear trend and the mean from one antenna row.

    psi_tilde(n) = psi_hat(n)
                   - (psi_hat(N) - psi_hat(1)) / (d(N) - d(1)) * d(n)
                   - mean(psi_hat)

    With the default index vector d = 1..N the first and last output
    entries are equal.

    Args:
        psi_hat: 1-D row of sanitized phase, length N >= 2.
        d: optional strictly increasing index vector, defaults to 1..N.

    Returns:
        Detrended row, same length.
    """
    y = np.asarray(psi_hat, dtype=np.float64)
    if y.ndim != 1 or y.size < 2:
        raise ValidationError(f"psi_hat must be 1-D with N >= 2, got {y.shape}")
    if d is None:
        dv = np.arange(1, y.size + 1, dtype=np.float64)
    else:
        dv = np.asarray(d, dtype=np.float64)
        if dv.shape != y.shape:
            raise ValidationError(f"d shape {dv.shape} != psi shape {y.shape}")
        if not np.all(np.diff(dv) > 0):
            raise ValidationError("d must be strictly increasing")
    slope = (y[-1] - y[0]) / (dv[-1] - dv[0])
    return y - slope * dv - y.mean()


def calibrate_packet(phase_mn, config: PhaseCalibConfig = PhaseCalibConfig()):
    """Full calibration of one packet's wrapped phase matrix [M, N]."""
    raw = np.asarray(phase_mn, dtype=np.float64)
    if raw.ndim != 2:
        raise ValidationError(f"phase must be [M, N], got shape {raw.shape}")
    psi = np.vstack([unwrap_phase(row) for row in raw])
    tau = estimate_sto(psi, config)
    psi_hat = sanitize_sto(psi, tau, config)
    return np.vstack([linear_transform(row) for row in psi_hat])


def calibrate_recording(
    rec: CsiRecording, config: PhaseCalibConfig = PhaseCalibConfig()
) -> CsiRecording:
    """Calibrate every packet's phase; amplitudes pass through untouched."""
    out = np.empty_like(rec.phase)
    for v in range(rec.n_packets):
        out[v] = calibrate_packet(rec.phase[v], config)
    return CsiRecording(
        rp_id=rec.rp_id,
        pos=rec.pos,
        domain_id=rec.domain_id,
        amp=rec.amp,
        phase=out,
    )
