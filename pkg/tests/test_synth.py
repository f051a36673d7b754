"""Synthetic channel generator: closed-form cases and injected-artifact checks."""

import numpy as np
import pytest

from mudaloc.data import CsiRecording
from mudaloc.errors import ValidationError
from mudaloc.filters import HampelConfig, qc_pipeline
from mudaloc.fingerprints import WindowSpec, build_fingerprints
from mudaloc.mmd import Kernel, median_heuristic_gamma, mmd2_quadratic
from mudaloc.phase import calibrate_recording
from mudaloc.synth import (
    DomainEffect,
    PathSpec,
    SceneSpec,
    default_benchmark_scene,
    generate,
    make_benchmark,
    square_grid,
)

from conftest import tiny_pipeline, tiny_scene

QUIET = dict(noise_std=0.0, outlier_rate=0.0, path_fluctuation=0.0,
             sto_range_s=0.0)


def two_rp_scene(paths_per_rp, effects, **kwargs):
    grid = square_grid(2, 1.0)
    return SceneSpec(
        grid=grid,
        paths=tuple(paths_per_rp for _ in grid.points),
        domain_effects=effects,
        n_packets=kwargs.pop("n_packets", 16),
        seed=kwargs.pop("seed", 0),
        **kwargs,
    )


class TestSceneValidation:
    def test_rejects_flat_pathspec_list(self):
        grid = square_grid(2, 1.0)
        flat = tuple(PathSpec(delay_s=1e-7, gain=1.0) for _ in grid.points)
        with pytest.raises(ValidationError):
            SceneSpec(grid=grid, paths=flat,
                      domain_effects=(DomainEffect("d"),))

    def test_rejects_duplicate_effect_names(self):
        with pytest.raises(ValidationError):
            two_rp_scene((), (DomainEffect("same"), DomainEffect("same")))

    def test_rejects_path_count_mismatch(self):
        grid = square_grid(2, 1.0)
        with pytest.raises(ValidationError):
            SceneSpec(grid=grid, paths=((),), domain_effects=(DomainEffect("d"),))

    @pytest.mark.parametrize("kwargs", [
        {"n_packets": 0},
        {"n_subcarriers": 1},
        {"n_antennas": 0},
        {"outlier_rate": 1.0},
        {"noise_std": -0.1},
        {"spike_gain": 0.0},
    ])
    def test_rejects_bad_scalars(self, kwargs):
        with pytest.raises(ValidationError):
            two_rp_scene((), (DomainEffect("d"),), **kwargs)

    def test_negative_delay_rejected(self):
        with pytest.raises(ValidationError):
            PathSpec(delay_s=-1e-9, gain=1.0)

    def test_square_grid_needs_side_two(self):
        with pytest.raises(ValidationError):
            square_grid(1, 1.0)

    def test_generate_rejects_bad_domain(self):
        scene = two_rp_scene((), (DomainEffect("d"),))
        with pytest.raises(ValidationError):
            generate(scene, 1)


class TestClosedFormChannels:
    def test_zero_paths_zero_noise_gives_exact_zero(self):
        scene = two_rp_scene((), (DomainEffect("d"),), **QUIET)
        for rec in generate(scene, 0):
            np.testing.assert_array_equal(rec.amp, np.zeros_like(rec.amp))
            np.testing.assert_array_equal(rec.phase, np.zeros_like(rec.phase))

    def test_single_path_amp_constant_and_phase_slope(self):
        tau = 5e-7
        scene = two_rp_scene((PathSpec(delay_s=tau, gain=0.8),),
                             (DomainEffect("d"),), **QUIET)
        rec = generate(scene, 0)[0]
        np.testing.assert_allclose(rec.amp, 0.8, rtol=0, atol=1e-12)
        expected_slope = -2.0 * np.pi * scene.f_delta_hz * tau
        for v in range(rec.n_packets):
            for a in range(rec.n_antennas):
                diffs = np.diff(np.unwrap(rec.phase[v, a]))
                np.testing.assert_allclose(diffs, expected_slope, atol=1e-9)

    def test_same_seed_identical_recordings(self):
        scene = tiny_scene()
        first = generate(scene, 0)
        second = generate(scene, 0)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.amp, b.amp)
            np.testing.assert_array_equal(a.phase, b.phase)

    def test_null_effects_share_amplitudes(self):
        # with no perturbation and no per-packet randomness the channel is
        # domain-independent; only phase offsets (per-domain streams) differ
        path = (PathSpec(delay_s=2e-7, gain=0.5),)
        scene = two_rp_scene(path, (DomainEffect("a"), DomainEffect("b")), **QUIET)
        rec_a = generate(scene, 0)[0]
        rec_b = generate(scene, 1)[0]
        np.testing.assert_allclose(rec_a.amp, rec_b.amp, rtol=0, atol=1e-12)

    def test_gain_tilt_identical_across_rps(self):
        # the domain perturbation is a domain property: identical path sets
        # must produce identical amplitude patterns at every RP
        path = (PathSpec(delay_s=2e-7, gain=0.5),
                PathSpec(delay_s=6e-7, gain=0.3, aoa_rad=0.8))
        scene = two_rp_scene(path, (DomainEffect("d", gain_std=0.5),), **QUIET)
        recs = generate(scene, 0)
        for other in recs[1:]:
            np.testing.assert_allclose(other.amp, recs[0].amp, rtol=0, atol=1e-12)


class TestInjectedArtifacts:
    def test_sto_and_offset_calibrate_to_flat_phase(self):
        scene = two_rp_scene((PathSpec(delay_s=4e-7, gain=1.0),),
                             (DomainEffect("d"),),
                             noise_std=0.0, outlier_rate=0.0,
                             path_fluctuation=0.0, sto_range_s=5e-8)
        rec = calibrate_recording(generate(scene, 0)[0])
        idx = np.arange(rec.n_subcarriers)
        for v in range(rec.n_packets):
            for a in range(rec.n_antennas):
                slope = np.polyfit(idx, rec.phase[v, a], 1)[0]
                assert abs(slope) <= 1e-6

    def test_spikes_removed_by_amplitude_conditioning(self):
        # spikes at known isolated indices (one per window) must vanish in
        # the conditioned output; dense bursts are out of contract
        paths = (PathSpec(delay_s=2e-7, gain=1.0),
                 PathSpec(delay_s=7e-7, gain=0.4, aoa_rad=0.6))
        scene = two_rp_scene(paths, (DomainEffect("d"),), n_packets=44,
                             noise_std=0.01, path_fluctuation=0.02,
                             sto_range_s=0.0, outlier_rate=0.0, seed=3)
        clean = generate(scene, 0)[0]
        amp = clean.amp.copy()
        n_spiked = 0
        for a in range(clean.n_antennas):
            for n in range(clean.n_subcarriers):
                v = (5 + 3 * n + 11 * a) % clean.n_packets
                amp[v, a, n] *= scene.spike_gain
                n_spiked += 1
        assert n_spiked == 60
        spiked = CsiRecording(rp_id=clean.rp_id, pos=clean.pos,
                              domain_id=clean.domain_id, amp=amp,
                              phase=clean.phase)
        cfg = tiny_pipeline()
        rec_s = qc_pipeline(spiked, cfg.hampel, cfg.wavelet, cfg.butterworth)
        rec_c = qc_pipeline(clean, cfg.hampel, cfg.wavelet, cfg.butterworth)
        signal_range = np.ptp(rec_c.amp)
        assert np.max(np.abs(rec_s.amp - rec_c.amp)) <= 0.05 * signal_range

    def test_rp_separability_of_fingerprints(self):
        scene = tiny_scene()
        recs = generate(scene, 0)
        cfg = tiny_pipeline()
        conditioned = [qc_pipeline(r, cfg.hampel, cfg.wavelet, cfg.butterworth)
                       for r in recs]
        images = {
            r.rp_id: [img for img, _, _ in [(s.image_amp, None, None)
                      for s in build_fingerprints(r, cfg.window)]]
            for r in conditioned
        }
        flat = {rp: [im.ravel() for im in ims] for rp, ims in images.items()}
        intra = [
            np.linalg.norm(a - b)
            for ims in flat.values()
            for i, a in enumerate(ims)
            for b in ims[i + 1:]
        ]
        rps = sorted(flat)
        inter = [
            np.linalg.norm(a - b)
            for i, ra in enumerate(rps)
            for rb in rps[i + 1:]
            for a in flat[ra]
            for b in flat[rb]
        ]
        assert min(inter) > max(intra)


class TestBenchmark:
    def test_shift_strictly_increases_mmd(self):
        feats = {}
        for level in (0.1, 0.2, 0.4):
            scene = tiny_scene(n_sources=1, target_gain_std=level,
                               target_extra=False)
            _, target = make_benchmark(1, scene, tiny_pipeline())
            feats[level] = np.stack([s.image_amp.ravel() for s in target.samples])
        ref_scene = tiny_scene(n_sources=1, target_gain_std=0.0,
                               target_extra=False)
        _, ref = make_benchmark(1, ref_scene, tiny_pipeline())
        ref_feats = np.stack([s.image_amp.ravel() for s in ref.samples])
        gamma = median_heuristic_gamma(ref_feats, feats[0.2])
        kernel = Kernel("rbf", gamma)
        vals = [mmd2_quadratic(ref_feats, feats[lvl], kernel)
                for lvl in (0.1, 0.2, 0.4)]
        assert vals[0] < vals[1] < vals[2]

    def test_benchmark_shapes_and_roles(self, bench_datasets):
        sources, target = bench_datasets
        assert len(sources) == 2
        assert target.role == "target"
        assert all(ds.role == "source" for ds in sources)
        names = {ds.domain_id for ds in sources} | {target.domain_id}
        assert len(names) == 3
        shapes = {s.image_amp.shape for ds in sources for s in ds.samples}
        assert len(shapes) == 1

    def test_benchmark_rejects_undersized_scene(self):
        scene = tiny_scene(n_sources=1)
        with pytest.raises(ValidationError):
            make_benchmark(3, scene, tiny_pipeline())

    def test_default_scene_dimensions(self):
        scene = default_benchmark_scene()
        assert len(scene.grid.points) == 16
        assert scene.n_domains == 4
        assert scene.n_packets == 121
        assert scene.domain_effects[-1].extra_path is not None
