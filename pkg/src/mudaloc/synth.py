"""Synthetic multipath CSI generator.

Desk-scale stand-in for a real testbed: every reference point gets a
small set of propagation paths (delay, complex gain, angle of arrival)
and per-packet channel responses are sampled on a uniform subcarrier
grid

    H_n = sum_p a_p * exp(-j 2 pi f_n tau_p),     f_n = n * f_delta,

with per-packet sampling-time offsets applied as a linear phase ramp in
(n - 1), a random constant phase offset per packet, additive complex
Gaussian noise, and Bernoulli amplitude spikes. Domains differ by a
fixed multiplicative per-path/antenna gain perturbation (one draw per
domain, shared by every RP) and optionally one extra reflected path,
mimicking distinct recording conditions.

Everything is deterministic given the scene seed: each (domain, RP)
pair draws from numpy SeedSequence([seed, crc32(domain), rp_id]) and the
domain tilt from SeedSequence([seed, crc32(domain)]), so recordings are
reproducible independently of generation order.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .data import ROLE_SOURCE, ROLE_TARGET, CsiRecording, RpGrid
from .errors import ValidationError
from .pipeline import PipelineConfig, benchmark_pipeline, prepare_recordings

# Propagation speed is slowed far below c so that desk-scale path-length
# differences produce visible phase slopes and amplitude ripple across a
# 30-tone grid; only delay *structure* matters to the pipeline.
DEFAULT_C_EFF = 1.0e7


@dataclass(frozen=True)
class PathSpec:
    """One propagation path: delay, complex gain, angle of arrival."""

    delay_s: float
    gain: complex
    aoa_rad: float = 0.0

    def __post_init__(self):
        if not self.delay_s >= 0:
            raise ValidationError(f"path delay must be >= 0, got {self.delay_s}")
        object.__setattr__(self, "delay_s", float(self.delay_s))
        object.__setattr__(self, "gain", complex(self.gain))
        object.__setattr__(self, "aoa_rad", float(self.aoa_rad))


@dataclass(frozen=True)
class DomainEffect:
    """Per-domain channel perturbation.

    gain_std scales a fixed (per domain, path, antenna) multiplicative
    gain draw applied identically at every RP; level rescales every path
    by one common factor (a receiver-gain difference between recording
    sessions); extra_path optionally adds one domain-specific reflection
    shared by all RPs.
    """

    name: str
    gain_std: float = 0.0
    level: float = 1.0
    extra_path: PathSpec | None = None

    def __post_init__(self):
        if not self.name:
            raise ValidationError("domain effect needs a non-empty name")
        if self.gain_std < 0:
            raise ValidationError(f"gain_std must be >= 0, got {self.gain_std}")
        if not self.level > 0:
            raise ValidationError(f"level must be > 0, got {self.level}")


@dataclass(frozen=True)
class SceneSpec:
    """Full description of a synthetic measurement campaign.

    paths holds one tuple of PathSpec per grid point, aligned with
    grid.points. domain_effects lists every domain to be generated;
    generate() picks one by index.
    """

    grid: RpGrid
    paths: tuple
    domain_effects: tuple
    n_packets: int = 121
    n_subcarriers: int = 30
    n_antennas: int = 2
    f_delta_hz: float = 312500.0
    noise_std: float = 0.02
    outlier_rate: float = 0.02
    spike_gain: float = 6.0
    sto_range_s: float = 5e-8
    path_fluctuation: float = 0.02
    antenna_spacing_wl: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if any(isinstance(p, PathSpec) for p in self.paths):
            raise ValidationError(
                "paths must be one sequence of PathSpec per grid point, "
                "not a flat PathSpec list"
            )
        paths = tuple(tuple(p) for p in self.paths)
        if len(paths) != len(self.grid.points):
            raise ValidationError(
                f"{len(paths)} path sets for {len(self.grid.points)} grid points"
            )
        for ps in paths:
            for p in ps:
                if not isinstance(p, PathSpec):
                    raise ValidationError(f"paths must hold PathSpec, got {type(p)}")
        effects = tuple(self.domain_effects)
        if not effects:
            raise ValidationError("scene needs at least one domain effect")
        if len({e.name for e in effects}) != len(effects):
            raise ValidationError("domain effect names must be unique")
        if self.n_packets < 1 or self.n_subcarriers < 2 or self.n_antennas < 1:
            raise ValidationError(
                f"need n_packets >= 1, n_subcarriers >= 2, n_antennas >= 1, got "
                f"{self.n_packets}/{self.n_subcarriers}/{self.n_antennas}"
            )
        if not 0.0 <= self.outlier_rate < 1.0:
            raise ValidationError(
                f"outlier_rate must lie in [0, 1), got {self.outlier_rate}"
            )
        if self.noise_std < 0 or self.sto_range_s < 0 or self.path_fluctuation < 0:
            raise ValidationError("noise_std, sto_range_s, path_fluctuation >= 0")
        if self.spike_gain <= 0 or self.f_delta_hz <= 0:
            raise ValidationError("spike_gain and f_delta_hz must be > 0")
        object.__setattr__(self, "paths", paths)
        object.__setattr__(self, "domain_effects", effects)

    @property
    def n_domains(self) -> int:
        return len(self.domain_effects)


def _rp_rng(scene: SceneSpec, domain: str, rp_id: int) -> np.random.Generator:
    tag = zlib.crc32(domain.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([scene.seed, tag, rp_id]))


def _domain_perturb(scene: SceneSpec, effect: DomainEffect, n_paths: int, m: int):
    """Multiplicative gain tilt [n_paths, m], identical for every RP.

    A fresh generator keyed on (seed, domain) alone means all RPs see the
    same leading draws, so the tilt is a coherent domain property rather
    than per-RP noise. Unit normals are scaled by gain_std afterwards, so
    raising the std moves every domain along the same direction.
    """
    tag = zlib.crc32(effect.name.encode("utf-8"))
    rng = np.random.default_rng(np.random.SeedSequence([scene.seed, tag]))
    tilt = 1.0 + effect.gain_std * rng.standard_normal((n_paths, m))
    return effect.level * tilt


def _packets_for_rp(scene: SceneSpec, effect: DomainEffect, rp_id: int, paths):
    """Channel matrices [V, M, N] for one (domain, RP) pair.

    Draw order from the pair's generator is fixed: per-packet path
    fluctuation, STO, constant phase offset, noise (real then imaginary),
    spike mask. The gain perturbation comes from the domain-level
    generator instead (see _domain_perturb).
    """
    v, m, n = scene.n_packets, scene.n_antennas, scene.n_subcarriers
    rng = _rp_rng(scene, effect.name, rp_id)

    if effect.extra_path is not None:
        paths = paths + (effect.extra_path,)
    n_paths = len(paths)
    perturb = _domain_perturb(scene, effect, n_paths, m)
    fluct = 1.0 + scene.path_fluctuation * rng.standard_normal((v, n_paths))
    sto = rng.uniform(-scene.sto_range_s, scene.sto_range_s, size=v)
    offset = rng.uniform(-np.pi, np.pi, size=v)
    noise = scene.noise_std / np.sqrt(2.0) * (
        rng.standard_normal((v, m, n)) + 1j * rng.standard_normal((v, m, n))
    )
    spikes = rng.random((v, m, n)) < scene.outlier_rate

    if n_paths:
        gains = np.array([p.gain for p in paths])
        delays = np.array([p.delay_s for p in paths])
        aoas = np.array([p.aoa_rad for p in paths])
        # antenna factor e^{-j 2 pi m d sin(aoa)}, d in wavelengths
        ant = np.exp(
            -2j * np.pi * scene.antenna_spacing_wl
            * np.outer(np.arange(m), np.sin(aoas))
        )
        sub = np.exp(
            -2j * np.pi * scene.f_delta_hz
            * np.outer(np.arange(1, n + 1), delays)
        )
        h = np.einsum("vp,ap,np->van", fluct * gains, perturb.T * ant, sub)
    else:
        h = np.zeros((v, m, n), dtype=np.complex128)

    ramp = np.exp(-2j * np.pi * scene.f_delta_hz * np.outer(sto, np.arange(n)))
    h = h * ramp[:, None, :] * np.exp(1j * offset)[:, None, None] + noise

    amp = np.abs(h)
    # angle(0) depends on zero signs after complex multiplies; pin it
    phase = np.where(amp == 0.0, 0.0, np.angle(h))
    amp[spikes] *= scene.spike_gain
    return amp, phase


def generate(scene: SceneSpec, domain_id: int):
    """All recordings of one domain, one CsiRecording per grid point.

    Args:
        scene: SceneSpec.
        domain_id: index into scene.domain_effects.

    Returns:
        List of CsiRecording ordered as grid.points.
    """
    if not 0 <= domain_id < scene.n_domains:
        raise ValidationError(
            f"domain_id {domain_id} out of range [0, {scene.n_domains})"
        )
    effect = scene.domain_effects[domain_id]
    out = []
    for (rp_id, x, y), paths in zip(scene.grid.points, scene.paths):
        amp, phase = _packets_for_rp(scene, effect, rp_id, paths)
        out.append(
            CsiRecording(rp_id=rp_id, pos=(x, y), domain_id=effect.name,
                         amp=amp, phase=phase)
        )
    return out


def _geometry_paths(pos, tx, reflectors, c_eff):
    """LoS plus one path per reflector, gains falling off with length."""
    out = []
    d_los = math.dist(pos, tx)
    out.append(
        PathSpec(
            delay_s=d_los / c_eff,
            gain=1.0 / (1.0 + d_los),
            aoa_rad=math.atan2(pos[1] - tx[1], pos[0] - tx[0]),
        )
    )
    for rx, ry, rgain in reflectors:
        length = math.dist(tx, (rx, ry)) + math.dist((rx, ry), pos)
        out.append(
            PathSpec(
                delay_s=length / c_eff,
                gain=rgain / (1.0 + length),
                aoa_rad=math.atan2(pos[1] - ry, pos[0] - rx),
            )
        )
    return tuple(out)


def square_grid(side: int, spacing: float) -> RpGrid:
    """side x side reference points at (col, row) * spacing."""
    if side < 2:
        raise ValidationError(f"grid side must be >= 2, got {side}")
    points = tuple(
        (row * side + col, col * spacing, row * spacing)
        for row in range(side)
        for col in range(side)
    )
    return RpGrid(points=points, spacing=spacing)


def default_benchmark_scene(
    n_sources: int = 3,
    grid_side: int = 4,
    spacing: float = 1.0,
    n_packets: int = 121,
    noise_std: float = 0.02,
    outlier_rate: float = 0.02,
    source_gain_std: float = 0.05,
    target_gain_std: float = 0.40,
    target_level: float = 1.0,
    target_extra_delay_ns: float = 450.0,
    target_extra_gain: float = 0.5,
    seed: int = 0,
    **scene_kwargs,
) -> SceneSpec:
    """Benchmark scene: mildly perturbed sources, strongly shifted target.

    Source domain j gets gain_std = source_gain_std * (j + 1) and no
    extra path; the target domain combines a larger gain perturbation, a
    receiver-level rescale, and a held-out reflection, the analogue of
    evaluating on a day with different activity in the room and a
    different device gain setting.
    """
    if n_sources < 1:
        raise ValidationError(f"n_sources must be >= 1, got {n_sources}")
    grid = square_grid(grid_side, spacing)
    tx = (-1.0, -1.0)
    top = (grid_side - 1) * spacing
    reflectors = ((top + 2.0, -1.5, 0.4), (-2.0, top + 2.0, 0.3))
    paths = tuple(
        _geometry_paths((x, y), tx, reflectors, DEFAULT_C_EFF)
        for _, x, y in grid.points
    )
    effects = [
        DomainEffect(name=f"src_{j}", gain_std=source_gain_std * (j + 1))
        for j in range(n_sources)
    ]
    effects.append(
        DomainEffect(
            name="target",
            gain_std=target_gain_std,
            level=target_level,
            extra_path=PathSpec(
                delay_s=target_extra_delay_ns * 1e-9,
                gain=target_extra_gain,
                aoa_rad=1.1,
            ),
        )
    )
    return SceneSpec(
        grid=grid,
        paths=paths,
        domain_effects=tuple(effects),
        n_packets=n_packets,
        noise_std=noise_std,
        outlier_rate=outlier_rate,
        seed=seed,
        **scene_kwargs,
    )


def make_benchmark(n_sources: int, scene: SceneSpec,
                   pipeline: PipelineConfig | None = None):
    """Generate and fully condition a multi-domain benchmark.

    The first n_sources domain effects become labeled source datasets and
    effect n_sources becomes the unlabeled-target dataset; each domain is
    run through amplitude conditioning, phase calibration, and windowing.

    Returns:
        (sources, target): list of DomainDataset plus one DomainDataset.
    """
    if n_sources < 1:
        raise ValidationError(f"n_sources must be >= 1, got {n_sources}")
    if scene.n_domains < n_sources + 1:
        raise ValidationError(
            f"scene defines {scene.n_domains} domains; need {n_sources + 1}"
        )
    if pipeline is None:
        pipeline = benchmark_pipeline()
    sources = []
    for j in range(n_sources):
        name = scene.domain_effects[j].name
        (ds,) = prepare_recordings(
            generate(scene, j), pipeline, roles={name: ROLE_SOURCE}
        )
        sources.append(ds)
    name = scene.domain_effects[n_sources].name
    (target,) = prepare_recordings(
        generate(scene, n_sources), pipeline, roles={name: ROLE_TARGET}
    )
    return sources, target
