import numpy as np
import pytest

from mudaloc.data import CsiRecording, FingerprintSample
from mudaloc.pipeline import PipelineConfig, benchmark_pipeline
from mudaloc.filters import HampelConfig
from mudaloc.fingerprints import WindowSpec
from mudaloc.synth import DomainEffect, PathSpec, SceneSpec, square_grid


def make_recording(rng, v=40, m=2, n=8, rp_id=0, pos=(0.0, 0.0), domain="dom"):
    amp = rng.uniform(0.5, 2.0, size=(v, m, n))
    phase = rng.uniform(-np.pi, np.pi, size=(v, m, n))
    return CsiRecording(rp_id=rp_id, pos=pos, domain_id=domain, amp=amp, phase=phase)


def make_sample(rng, h=6, w=5, rp_id=0, pos=(0.0, 0.0), domain="dom"):
    return FingerprintSample(
        image_amp=rng.uniform(0.0, 1.0, size=(h, w)),
        image_phase=rng.uniform(0.0, 1.0, size=(h, w)),
        pos=pos,
        rp_id=rp_id,
        domain_id=domain,
    )


def tiny_scene(n_sources=2, seed=0, target_gain_std=0.3, target_extra=True,
               **kwargs):
    """3x3 grid, 44 packets: a seconds-scale analogue of the benchmark."""
    grid = square_grid(3, 1.0)
    paths = tuple(
        (
            PathSpec(delay_s=(1.0 + 0.35 * (x + 2 * y)) * 1e-7, gain=1.0 / (1 + x + y)),
            PathSpec(delay_s=(4.0 + 0.2 * x) * 1e-7, gain=0.35, aoa_rad=0.8),
        )
        for _, x, y in grid.points
    )
    extra = PathSpec(delay_s=4.5e-7, gain=0.5, aoa_rad=1.1) if target_extra else None
    effects = tuple(
        [DomainEffect(name=f"src_{j}", gain_std=0.06 * (j + 1)) for j in range(n_sources)]
        + [DomainEffect(name="target", gain_std=target_gain_std, extra_path=extra)]
    )
    defaults = dict(n_packets=44, noise_std=0.02, outlier_rate=0.02, seed=seed)
    defaults.update(kwargs)
    return SceneSpec(grid=grid, paths=paths, domain_effects=effects, **defaults)


def tiny_pipeline() -> PipelineConfig:
    return PipelineConfig(
        hampel=HampelConfig(window=11),
        window=WindowSpec(length=11, stride=11),
    )


@pytest.fixture(scope="session")
def bench_datasets():
    """Conditioned 2-source + target datasets from the tiny scene."""
    from mudaloc.synth import make_benchmark

    return make_benchmark(2, tiny_scene(), tiny_pipeline())


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
