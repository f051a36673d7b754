"""Numerical self-checks: gradients, MMD estimators, filter responses.

The gradient checks compare every autodiff primitive (and the full
two-stream network graph) against central finite differences in float64.
The case list lives here so the CLI `selfcheck` command and the test
suite exercise the same definitions. A mutation hook can corrupt the
analytic gradient of one named case by 1%, which must trip the check;
it exists to prove the detector has teeth.

Relative error convention: |analytic - numeric| / max(1e-6, |analytic| +
|numeric|), maximized over coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from . import autodiff as ad
from .autodiff import Tensor
from .filters import (
    ButterworthConfig,
    HampelConfig,
    butterworth_design,
    hampel_filter,
    wavelet_shrink_value,
)
from .mmd import Kernel, mmd2_linear, mmd2_quadratic
from .network import MultiSourceModel, NetConfig
from .training import mmd2_linear_t

FD_STEP = 1e-5
GRAD_TOL = 1e-4
MUTATION_FACTOR = 1.01
# central differences are invalid astride a relu kink; require every
# relu input to clear zero by a comfortable multiple of the step
KINK_GUARD = 50 * FD_STEP


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1e-6, np.abs(a) + np.abs(b))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def finite_difference_grad(f, x0, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = x0.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x0)
        flat[i] = orig - h
        fm = f(x0)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def _readout(rng):
    """Fixed random linear functional: sum(w * y) with w drawn once.

    The returned callable must be deterministic across calls, otherwise
    finite differences would compare evaluations under different
    readout weights. Weights are drawn on first use and cached.
    """
    weights: dict[tuple, np.ndarray] = {}

    def apply(y: Tensor) -> Tensor:
        key = y.data.shape
        if key not in weights:
            weights[key] = rng.normal(size=key)
        return ad.sum(ad.mul(y, Tensor(weights[key])))

    return apply


def _away_from_zero(x, margin=0.05):
    return x + np.sign(x) * margin + (x == 0) * margin


def gradient_cases():
    """(name, builder) pairs; builder(rng) -> (g, x0) with g: Tensor -> scalar Tensor."""

    def unary(op, transform=None, shape=(3, 4)):
        def build(rng):
            x0 = rng.normal(size=shape)
            if transform is not None:
                x0 = transform(x0)
            ro = _readout(rng)
            return (lambda t: ro(op(t))), x0
        return build

    def build_add(rng):
        other = Tensor(rng.normal(size=(3, 4)))
        ro = _readout(rng)
        return (lambda t: ro(ad.add(t, other))), rng.normal(size=(3, 4))

    def build_sub(rng):
        other = Tensor(rng.normal(size=(3, 4)))
        ro = _readout(rng)
        return (lambda t: ro(ad.sub(other, t))), rng.normal(size=(3, 4))

    def build_mul(rng):
        other = Tensor(rng.normal(size=(3, 4)))
        ro = _readout(rng)
        return (lambda t: ro(ad.mul(t, other))), rng.normal(size=(3, 4))

    def build_concat(rng):
        other = Tensor(rng.normal(size=(2, 3, 4, 4)))
        ro = _readout(rng)
        return (
            lambda t: ro(ad.concat([t, other], axis=1))
        ), rng.normal(size=(2, 2, 4, 4))

    def build_slice_rows(rng):
        ro = _readout(rng)
        return (
            lambda t: ro(ad.slice_rows(t, 1, 2))
        ), rng.normal(size=(6, 3))

    def build_broadcast(rng):
        ro = _readout(rng)
        return (
            lambda t: ro(ad.broadcast_hw(t, 3, 5))
        ), rng.normal(size=(2, 4, 1, 1))

    def build_matmul_a(rng):
        b = Tensor(rng.normal(size=(4, 3)))
        ro = _readout(rng)
        return (lambda t: ro(ad.matmul(t, b))), rng.normal(size=(2, 4))

    def build_matmul_b(rng):
        a = Tensor(rng.normal(size=(2, 4)))
        ro = _readout(rng)
        return (lambda t: ro(ad.matmul(a, t))), rng.normal(size=(4, 3))

    def build_fc(which):
        def build(rng):
            x = rng.normal(size=(3, 4))
            w = rng.normal(size=(4, 5))
            b = rng.normal(size=(5,))
            parts = {"x": x, "w": w, "b": b}
            ro = _readout(rng)

            def g(t):
                args = {k: (t if k == which else Tensor(v)) for k, v in parts.items()}
                return ro(ad.fully_connected(args["x"], args["w"], args["b"]))

            return g, parts[which]
        return build

    def build_conv(which, stride=1, padding="same", k=3):
        def build(rng):
            x = rng.normal(size=(2, 2, 6, 6))
            w = rng.normal(size=(3, 2, k, k))
            b = rng.normal(size=(3,))
            parts = {"x": x, "w": w, "b": b}
            ro = _readout(rng)

            def g(t):
                args = {n: (t if n == which else Tensor(v)) for n, v in parts.items()}
                return ro(ad.conv2d(args["x"], args["w"], args["b"], stride=stride,
                                    padding=padding))

            return g, parts[which]
        return build

    def build_pointwise(which):
        def build(rng):
            x = rng.normal(size=(2, 3, 4, 4))
            w = rng.normal(size=(2, 3, 1, 1))
            b = rng.normal(size=(2,))
            parts = {"x": x, "w": w, "b": b}
            ro = _readout(rng)

            def g(t):
                args = {n: (t if n == which else Tensor(v)) for n, v in parts.items()}
                return ro(ad.pointwise_conv(args["x"], args["w"], args["b"]))

            return g, parts[which]
        return build

    def build_bn(which):
        def build(rng):
            x = rng.normal(size=(4, 3, 2, 2))
            gamma = rng.normal(size=(3,)) + 1.5
            beta = rng.normal(size=(3,))
            parts = {"x": x, "gamma": gamma, "beta": beta}
            ro = _readout(rng)

            def g(t):
                state = ad.BatchNormState(3)
                args = {n: (t if n == which else Tensor(v)) for n, v in parts.items()}
                return ro(ad.batchnorm(args["x"], args["gamma"], args["beta"], state,
                                       training=True))

            return g, parts[which]
        return build

    def build_dropout(rng):
        ro = _readout(rng)

        def g(t):
            return ro(ad.dropout(t, 0.4, True, np.random.default_rng(123)))
        return g, rng.normal(size=(4, 5))

    def build_l2(rng):
        y = Tensor(rng.normal(size=(4, 3)))
        def g(t):
            d = ad.sub(t, y)
            return ad.mean(ad.sqrt(ad.sum(ad.mul(d, d), axis=1)))
        return g, rng.normal(size=(4, 3)) + 2.0

    def build_mmd(kernel):
        def build(rng):
            y = Tensor(rng.normal(size=(6, 3)))
            return (lambda t: mmd2_linear_t(t, y, kernel)), rng.normal(size=(6, 3))
        return build

    return [
        ("add", build_add),
        ("sub", build_sub),
        ("mul", build_mul),
        ("scale", unary(lambda t: ad.scale(t, -1.7))),
        ("add_scalar", unary(lambda t: ad.add_scalar(t, 2.5))),
        ("relu", unary(ad.relu, transform=_away_from_zero)),
        ("sigmoid", unary(ad.sigmoid)),
        ("exp", unary(lambda t: ad.exp(ad.scale(t, 0.5)))),
        ("sqrt", unary(ad.sqrt, transform=lambda x: np.abs(x) + 0.5)),
        ("reshape", unary(lambda t: ad.reshape(t, (4, 3)))),
        ("flatten", unary(lambda t: ad.flatten(t), shape=(2, 3, 2))),
        ("concat", build_concat),
        ("slice_rows", build_slice_rows),
        ("broadcast_hw", build_broadcast),
        ("sum", unary(lambda t: ad.sum(t, axis=0))),
        ("mean", unary(ad.mean)),
        ("matmul_a", build_matmul_a),
        ("matmul_b", build_matmul_b),
        ("fc_x", build_fc("x")),
        ("fc_w", build_fc("w")),
        ("fc_b", build_fc("b")),
        ("conv2d_x", build_conv("x")),
        ("conv2d_w", build_conv("w")),
        ("conv2d_b", build_conv("b")),
        ("conv2d_x_valid_s2", build_conv("x", stride=2, padding="valid")),
        ("conv2d_w_k5", build_conv("w", k=5)),
        ("pointwise_x", build_pointwise("x")),
        ("pointwise_w", build_pointwise("w")),
        ("pointwise_b", build_pointwise("b")),
        ("batchnorm_x", build_bn("x")),
        ("batchnorm_gamma", build_bn("gamma")),
        ("batchnorm_beta", build_bn("beta")),
        ("global_avg_pool", unary(ad.global_avg_pool, shape=(2, 3, 4, 4))),
        ("dropout", build_dropout),
        ("l2_rows", build_l2),
        ("mmd_linear", build_mmd(Kernel("linear"))),
        ("mmd_rbf", build_mmd(Kernel("rbf", gamma=0.5))),
    ]


def check_case(name, builder, seeds, tol: float = GRAD_TOL,
               mutate: str | None = None) -> CheckResult:
    """Run one gradient case over several seeds; worst seed decides."""
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        g, x0 = builder(rng)
        t = Tensor(np.array(x0, dtype=np.float64), requires_grad=True)
        ad.backward(g(t))
        analytic = t.grad.copy()
        if mutate == name:
            analytic = analytic * MUTATION_FACTOR
        numeric = finite_difference_grad(lambda arr: g(Tensor(arr)).item(), x0)
        worst = max(worst, rel_err(analytic, numeric))
    return CheckResult(
        name=f"gradient {name}",
        passed=worst < tol,
        detail=f"max rel err {worst:.3e} over {len(seeds)} seeds (tol {tol:.1e})",
    )


def _min_relu_margin(root: Tensor) -> float:
    """Smallest |input| over every relu in the graph rooted at `root`."""
    stack, seen, best = [root], set(), np.inf
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._op == "relu":
            best = min(best, float(np.min(np.abs(node._parents[0].data))))
        stack.extend(node._parents)
    return best


def check_model_graph(seeds, tol: float = GRAD_TOL, n_param_probes: int = 8,
                      mutate: str | None = None) -> CheckResult:
    """Finite differences through the whole network graph.

    Checks the gradient of a random linear readout of all latents and
    coordinates with respect to every input pixel and a random sample of
    parameter elements, in training mode (batch-stat normalization).

    The comparison is only meaningful where the graph is differentiable,
    so the check evaluates at a generic point: parameters are jittered
    off their structured initialization (zero biases can park an entire
    dead branch exactly on its relu kinks) and inputs are redrawn until
    every relu input clears zero by KINK_GUARD.
    """
    worst = 0.0
    cfg = NetConfig(nf=2, kernels=(3, 5), reduction_r=2, latent=4,
                    regressor_hidden=8, dropout_p=0.0)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        model = MultiSourceModel(cfg, 2, rng)
        for p in model.parameters():
            p.data += rng.normal(0.0, 0.05, size=p.data.shape)

        phase = None
        readouts = None

        def scalar(amp_t):
            fused = model.forward_shared(amp_t, phase, training=True)
            acc = None
            for j, (w_lat, w_pos) in enumerate(readouts):
                latent, coords = model.forward_domain(j, fused, training=True)
                term = ad.add(ad.sum(ad.mul(latent, w_lat)),
                              ad.sum(ad.mul(coords, w_pos)))
                acc = term if acc is None else ad.add(acc, term)
            return acc

        best_margin = -np.inf
        for _ in range(20):
            cand_amp = rng.uniform(0.0, 1.0, size=(2, 1, 6, 6))
            cand_phase = Tensor(rng.uniform(0.0, 1.0, size=(2, 1, 6, 6)))
            cand_readouts = [
                (Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 2))))
                for _ in range(2)
            ]
            phase, readouts = cand_phase, cand_readouts
            margin = _min_relu_margin(scalar(Tensor(cand_amp.copy(),
                                                    requires_grad=True)))
            if margin > best_margin:
                best_margin = margin
                amp0, best_phase, best_readouts = cand_amp, cand_phase, cand_readouts
            if margin >= KINK_GUARD:
                break
        phase, readouts = best_phase, best_readouts

        amp_t = Tensor(amp0.copy(), requires_grad=True)
        model.zero_grad()
        ad.backward(scalar(amp_t))
        analytic_in = amp_t.grad.copy()
        if mutate == "model":
            analytic_in = analytic_in * MUTATION_FACTOR

        numeric_in = finite_difference_grad(
            lambda arr: scalar(Tensor(arr)).item(), amp0)
        worst = max(worst, rel_err(analytic_in, numeric_in))

        named = sorted(model.named_parameters().items())
        probes = rng.integers(0, len(named), size=n_param_probes)
        for pi in probes:
            pname, p = named[pi]
            idx = tuple(rng.integers(0, s) for s in p.data.shape) if p.data.ndim else ()
            orig = p.data[idx]
            p.data[idx] = orig + FD_STEP
            fp = scalar(Tensor(amp0)).item()
            p.data[idx] = orig - FD_STEP
            fm = scalar(Tensor(amp0)).item()
            p.data[idx] = orig
            worst = max(worst, rel_err(p.grad[idx], (fp - fm) / (2 * FD_STEP)))
    return CheckResult(
        name="gradient model",
        passed=worst < tol,
        detail=f"max rel err {worst:.3e} over {len(seeds)} seeds (tol {tol:.1e})",
    )


def run_gradient_checks(n_seeds: int = 3, tol: float = GRAD_TOL,
                        mutate: str | None = None):
    seeds = list(range(n_seeds))
    results = [check_case(name, builder, seeds, tol, mutate)
               for name, builder in gradient_cases()]
    results.append(check_model_graph(seeds[: max(1, n_seeds // 3)], tol,
                                     mutate=mutate))
    return results


def run_mmd_checks(n_resamples: int = 300):
    """Hand cases exactly; linear estimator unbiasedness within 3 SE."""
    results = []
    x = np.array([[0.0], [0.0]])
    y = np.array([[1.0], [1.0]])
    lin = mmd2_linear(x, y, Kernel("linear"))
    expect = 1.0
    results.append(CheckResult(
        "mmd linear-kernel hand case",
        abs(lin - expect) < 1e-12,
        f"got {lin!r}, want {expect!r} (tol 1e-12)",
    ))
    rbf = mmd2_linear(x, y, Kernel("rbf", 1.0))
    expect = 2.0 - 2.0 * np.exp(-1.0)
    results.append(CheckResult(
        "mmd rbf-kernel hand case",
        abs(rbf - expect) < 1e-12,
        f"got {rbf!r}, want {expect!r} (tol 1e-12)",
    ))

    rng = np.random.default_rng(0)
    for shift, label in ((0.0, "identical"), (1.0, "shifted")):
        lin_vals = []
        quad_vals = []
        for _ in range(n_resamples):
            a = rng.normal(size=(32, 3))
            b = rng.normal(size=(32, 3)) + shift
            lin_vals.append(mmd2_linear(a, b, Kernel("rbf", 0.25)))
            quad_vals.append(mmd2_quadratic(a, b, Kernel("rbf", 0.25), unbiased=True))
        gap = abs(np.mean(lin_vals) - np.mean(quad_vals))
        se = float(np.std(lin_vals, ddof=1) / np.sqrt(n_resamples))
        results.append(CheckResult(
            f"mmd linear vs quadratic ({label})",
            gap < 3.0 * se,
            f"mean gap {gap:.3e} < 3 SE = {3 * se:.3e} over {n_resamples} resamples",
        ))
    return results


def hampel_oracle(x, config: HampelConfig):
    """Brute-force per-index median/MAD reference for hampel_filter."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    half = config.window // 2
    out = x.copy()
    mask = np.zeros(n, dtype=bool)
    for i in range(n):
        w = x[max(0, i - half): min(n, i + half + 1)]
        med = np.median(w)
        mad = np.median(np.abs(w - med))
        if abs(x[i] - med) > config.n_sigmas * config.mad_scale * mad:
            out[i] = med
            mask[i] = True
    return out, mask


def run_filter_checks(n_series: int = 50):
    results = []
    rng = np.random.default_rng(1)
    cfg = HampelConfig(window=11)
    worst = 0.0
    for _ in range(n_series):
        x = rng.normal(size=rng.integers(11, 80))
        x[rng.integers(0, x.size, size=3)] += rng.normal(0, 20, size=3)
        got, gmask = hampel_filter(x, cfg)
        want, wmask = hampel_oracle(x, cfg)
        worst = max(worst, float(np.max(np.abs(got - want))))
        if not np.array_equal(gmask, wmask):
            worst = np.inf
    results.append(CheckResult(
        "hampel vs brute-force oracle",
        worst == 0.0,
        f"max abs deviation {worst} over {n_series} series (tol 0)",
    ))

    t = 1.3
    xs = np.linspace(-6 * t, 6 * t, 4001)
    vals = np.array([wavelet_shrink_value(v, t) for v in xs])
    odd = float(np.max(np.abs(vals + vals[::-1])))
    bound = float(np.max(np.abs(vals - xs)))
    just_above = wavelet_shrink_value(t + 1e-12, t)
    results.append(CheckResult(
        "wavelet shrink properties",
        odd < 1e-12 and bound <= 2 * t + 1e-12 and abs(just_above) < 1e-9,
        f"odd dev {odd:.1e}, max |f(x)-x| {bound:.6f} <= 2T {2 * t}, "
        f"f(T+) {just_above:.2e} (continuity)",
    ))

    bcfg = ButterworthConfig()
    b, a = butterworth_design(bcfg)
    freqs = np.array([bcfg.cutoff_hz, 4.5 * bcfg.cutoff_hz])
    _, h = signal.freqz(b, a, worN=2 * np.pi * freqs / bcfg.fs_hz)
    gain_db = 20 * np.log10(np.abs(h))
    ok = abs(gain_db[0] + 3.01) <= 0.1 and gain_db[1] <= -40.0
    results.append(CheckResult(
        "butterworth response",
        ok,
        f"{gain_db[0]:.3f} dB at cutoff (want -3.01 +/- 0.1), "
        f"{gain_db[1]:.1f} dB at 4.5x (want <= -40)",
    ))
    return results


def run_all(mutate: str | None = None, n_grad_seeds: int = 3, printer=print):
    """Run every check, print one line each, return overall pass."""
    results = []
    results.extend(run_gradient_checks(n_seeds=n_grad_seeds, mutate=mutate))
    results.extend(run_mmd_checks())
    results.extend(run_filter_checks())
    for r in results:
        printer(r.line())
    ok = all(r.passed for r in results)
    printer(f"selfcheck: {sum(r.passed for r in results)}/{len(results)} checks passed")
    return ok
