"""Trainer contracts: loss values, unsupervised target use, reproducibility."""

import numpy as np
import pytest

from mudaloc.autodiff import Tensor
from mudaloc.data import ROLE_SOURCE, ROLE_TARGET, DomainDataset
from mudaloc.errors import NumericalError, ValidationError
from mudaloc.mmd import Kernel, mmd2_linear
from mudaloc.network import NetConfig
from mudaloc.training import (
    LR_HALVE_AFTER,
    TrainConfig,
    _discrepancy,
    _mse,
    build_model,
    mmd2_linear_t,
    train,
)

from conftest import make_sample

NET = NetConfig(nf=2, kernels=(3, 3), reduction_r=2, latent=4,
                regressor_hidden=8, dropout_p=0.0)


def tiny_domain(rng, domain_id, role, n=8, h=8, w=6):
    samples = tuple(
        make_sample(rng, h=h, w=w, rp_id=i % 4, pos=(float(i % 2), float(i % 3)),
                    domain=domain_id)
        for i in range(n)
    )
    return DomainDataset(samples, domain_id, role)


class TestTrainConfig:
    def test_defaults_valid(self):
        TrainConfig()

    @pytest.mark.parametrize("kwargs", [
        {"lr": 0.0},
        {"batch": 7},         # odd: linear MMD pairs samples
        {"batch": 0},
        {"max_epochs": 0},
        {"patience": 0},
        {"lam": -0.1},
        {"rho": -1.0},
        {"weight_decay": -1e-6},
        {"kernel_kind": "poly"},
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ValidationError):
            TrainConfig(**kwargs)


class TestLossValues:
    def test_mse_hand_value(self):
        pred = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        labels = np.array([[0.0, 2.0], [3.0, 2.0]])
        # squared residuals 1, 0, 0, 4 -> mean 1.25
        assert _mse(pred, labels).item() == pytest.approx(1.25, abs=1e-15)

    def test_discrepancy_hand_value(self):
        a = Tensor(np.array([[0.0, 0.0]]))
        b = Tensor(np.array([[3.0, 4.0]]))
        assert _discrepancy([a, b]).item() == pytest.approx(5.0, abs=1e-12)

    def test_discrepancy_single_source_is_zero(self):
        assert _discrepancy([Tensor(np.array([[1.0, 2.0]]))]).item() == 0.0

    def test_discrepancy_three_sources_averages_pairs(self):
        pts = [Tensor(np.array([[0.0, 0.0]])),
               Tensor(np.array([[3.0, 4.0]])),
               Tensor(np.array([[0.0, 8.0]]))]
        # pair distances: 5, 8, 5 -> mean 6
        assert _discrepancy(pts).item() == pytest.approx(6.0, abs=1e-12)

    @pytest.mark.parametrize("kernel", [
        Kernel("linear"), Kernel("rbf", gamma=0.7)])
    def test_mmd_tensor_matches_array_oracle(self, rng, kernel):
        x = rng.normal(size=(10, 3))
        y = rng.normal(size=(10, 3)) + 0.5
        got = mmd2_linear_t(Tensor(x), Tensor(y), kernel).item()
        assert got == pytest.approx(mmd2_linear(x, y, kernel), abs=1e-12)

    def test_mmd_tensor_median_heuristic_default(self, rng):
        x = rng.normal(size=(8, 2))
        y = rng.normal(size=(8, 2)) + 1.0
        from mudaloc.mmd import median_heuristic_gamma
        gamma = median_heuristic_gamma(x, y)
        got = mmd2_linear_t(Tensor(x), Tensor(y), Kernel("rbf")).item()
        assert got == pytest.approx(
            mmd2_linear(x, y, Kernel("rbf", gamma)), abs=1e-12)

    def test_mmd_tensor_survives_collapsed_batch(self):
        x = np.ones((4, 2))
        got = mmd2_linear_t(Tensor(x), Tensor(x.copy()), Kernel("rbf")).item()
        assert got == 0.0

    @pytest.mark.parametrize("nx,ny", [(5, 5), (4, 6)])
    def test_mmd_tensor_rejects_bad_sizes(self, rng, nx, ny):
        with pytest.raises(ValidationError):
            mmd2_linear_t(Tensor(rng.normal(size=(nx, 2))),
                          Tensor(rng.normal(size=(ny, 2))))


class _CountingSample:
    """Fingerprint stand-in that counts ground-truth position reads."""

    def __init__(self, rng, h, w, domain_id):
        self.image_amp = rng.uniform(size=(h, w))
        self.image_phase = rng.uniform(size=(h, w))
        self.rp_id = 0
        self.domain_id = domain_id
        self._pos_reads = [0]

    @property
    def pos(self):
        self._pos_reads[0] += 1
        return (0.0, 0.0)


class TestTrain:
    def fit(self, rng, config, n_sources=2, seed=0):
        sources = [tiny_domain(rng, f"s{j}", ROLE_SOURCE) for j in range(n_sources)]
        target = tiny_domain(rng, "t", ROLE_TARGET)
        model = build_model(NET, n_sources, seed)
        return model, train(model, sources, target, config), sources, target

    def test_loss_decreases(self, rng):
        cfg = TrainConfig(lr=0.01, batch=4, max_epochs=8, patience=8,
                          lam=0.0, rho=0.0, seed=0)
        _, report, _, _ = self.fit(rng, cfg)
        assert min(report.l_pre) < report.l_pre[0]
        assert len(report.l_total) == report.stopped_epoch
        assert 1 <= report.best_epoch <= report.stopped_epoch

    def test_source_only_skips_adaptation_terms(self, rng):
        cfg = TrainConfig(lr=0.01, batch=4, max_epochs=3, patience=3,
                          lam=0.0, rho=0.0, seed=0)
        _, report, _, _ = self.fit(rng, cfg)
        assert report.l_m == [0.0] * 3
        assert report.l_c == [0.0] * 3
        assert report.l_dis == [0.0] * 3
        assert report.l_total == report.l_pre

    def test_adaptation_terms_populated(self, rng):
        cfg = TrainConfig(lr=0.01, batch=4, max_epochs=2, patience=2,
                          lam=0.5, rho=0.5, seed=0)
        _, report, _, _ = self.fit(rng, cfg)
        assert any(v != 0.0 for v in report.l_m)
        assert all(v >= 0.0 for v in report.l_dis)
        for i in range(2):
            assert report.l_total[i] == pytest.approx(
                report.l_pre[i] + 0.5 * (report.l_m[i] + report.l_c[i])
                + 0.5 * report.l_dis[i], abs=1e-9)

    def test_target_labels_never_read(self, rng):
        sources = [tiny_domain(rng, f"s{j}", ROLE_SOURCE) for j in range(2)]
        counted = tuple(_CountingSample(rng, 8, 6, "t") for _ in range(8))
        target = DomainDataset(counted, "t", ROLE_TARGET)
        reads_before = sum(s._pos_reads[0] for s in counted)
        model = build_model(NET, 2, 0)
        train(model, sources, target,
              TrainConfig(lr=0.01, batch=4, max_epochs=2, patience=2,
                          lam=0.5, rho=0.5, seed=0))
        assert sum(s._pos_reads[0] for s in counted) == reads_before == 0

    def test_same_seed_reproduces_parameters_and_report(self, rng):
        cfg = TrainConfig(lr=0.01, batch=4, max_epochs=3, patience=3,
                          lam=0.5, rho=0.5, seed=7)
        sources = [tiny_domain(rng, f"s{j}", ROLE_SOURCE) for j in range(2)]
        target = tiny_domain(rng, "t", ROLE_TARGET)
        runs = []
        for _ in range(2):
            model = build_model(NET, 2, 0)
            report = train(model, sources, target, cfg)
            runs.append((model.state_dict(), report.to_dict()))
        state_a, rep_a = runs[0]
        state_b, rep_b = runs[1]
        assert rep_a == rep_b
        for name in state_a:
            np.testing.assert_array_equal(state_a[name], state_b[name])

    def test_output_affine_set_from_pooled_source_labels(self, rng):
        cfg = TrainConfig(lr=1e-15, batch=4, max_epochs=1, patience=1,
                          lam=0.0, rho=0.0, seed=0)
        model, _, sources, _ = self.fit(rng, cfg)
        pooled = np.array([s.pos for ds in sources for s in ds.samples])
        np.testing.assert_allclose(model.out_offset, pooled.mean(axis=0))
        np.testing.assert_allclose(model.out_scale, pooled.std(axis=0))

    def test_lr_halves_after_stall_then_patience_stops(self, rng):
        # full-batch: identical batch statistics every epoch, so at a
        # vanishing lr the loss cannot improve and the schedule must kick in
        cfg = TrainConfig(lr=1e-15, batch=8, max_epochs=40,
                          patience=LR_HALVE_AFTER + 3, lam=0.0, rho=0.0, seed=0)
        _, report, _, _ = self.fit(rng, cfg)
        assert report.stopped_epoch == 1 + cfg.patience
        assert report.lr[LR_HALVE_AFTER + 1] == pytest.approx(cfg.lr / 2)
        assert report.lr[0] == cfg.lr

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises_numerical_error(self, rng):
        cfg = TrainConfig(lr=1e9, batch=4, max_epochs=5, patience=5,
                          lam=0.0, rho=0.0, weight_decay=0.0, seed=0)
        with pytest.raises(NumericalError):
            self.fit(rng, cfg)

    def test_rejects_head_count_mismatch(self, rng):
        sources = [tiny_domain(rng, "s0", ROLE_SOURCE)]
        target = tiny_domain(rng, "t", ROLE_TARGET)
        model = build_model(NET, 2, 0)
        with pytest.raises(ValidationError):
            train(model, sources, target, TrainConfig(batch=4))

    def test_rejects_batch_larger_than_source(self, rng):
        sources = [tiny_domain(rng, "s0", ROLE_SOURCE, n=6)]
        target = tiny_domain(rng, "t", ROLE_TARGET)
        model = build_model(NET, 1, 0)
        with pytest.raises(ValidationError):
            train(model, sources, target, TrainConfig(batch=8))

    def test_rejects_mixed_image_shapes(self, rng):
        sources = [tiny_domain(rng, "s0", ROLE_SOURCE, h=8, w=6)]
        target = tiny_domain(rng, "t", ROLE_TARGET, h=8, w=5)
        model = build_model(NET, 1, 0)
        with pytest.raises(ValidationError):
            train(model, sources, target, TrainConfig(batch=4))
