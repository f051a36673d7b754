"""Conditioning pipeline: amplitude QC, phase calibration, windowing.

Bundles the per-stage configs into one object and applies the stages in
a fixed order (amplitude filtering, then phase calibration, then window
cutting). The two halves touch disjoint parts of the recording, so the
QC/LC order is inconsequential; it is fixed for reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import CsiRecording
from .filters import ButterworthConfig, HampelConfig, WaveletConfig, qc_pipeline
from .fingerprints import WindowSpec, dataset_from_recordings
from .phase import PhaseCalibConfig, calibrate_recording


@dataclass(frozen=True)
class PipelineConfig:
    """All knobs between raw packets and fingerprint datasets."""

    hampel: HampelConfig = field(default_factory=HampelConfig)
    wavelet: WaveletConfig = field(default_factory=WaveletConfig)
    butterworth: ButterworthConfig = field(default_factory=ButterworthConfig)
    phase: PhaseCalibConfig = field(default_factory=PhaseCalibConfig)
    window: WindowSpec = field(default_factory=WindowSpec)


def benchmark_pipeline() -> PipelineConfig:
    """Pipeline sized for the 121-packet synthetic benchmark.

    The Hampel window shrinks to stay below the recording length and the
    fingerprint window is 11 packets, giving 11 images per recording.
    """
    return PipelineConfig(
        hampel=HampelConfig(window=31),
        window=WindowSpec(length=11, stride=11),
    )


def condition_recording(rec: CsiRecording, config: PipelineConfig) -> CsiRecording:
    """Amplitude QC chain followed by phase calibration."""
    out = qc_pipeline(rec, config.hampel, config.wavelet, config.butterworth)
    return calibrate_recording(out, config.phase)


def prepare_recordings(recordings, config: PipelineConfig, roles=None):
    """Condition every recording and window into per-domain datasets.

    Args:
        recordings: list of CsiRecording (mixed domains allowed).
        config: PipelineConfig.
        roles: optional dict domain_id -> role, as in dataset_from_recordings.

    Returns:
        List of DomainDataset sorted by domain_id.
    """
    conditioned = [condition_recording(r, config) for r in recordings]
    return dataset_from_recordings(conditioned, config.window, roles)
