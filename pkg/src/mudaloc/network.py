"""Two-stream multi-scale attention network for coordinate regression.

The shared extractor g runs amplitude and phase fingerprints through two
multi-scale conv blocks each and fuses the streams with attentional
feature fusion (AFF). Each source domain j owns a small strided-conv
extractor h_j and a two-layer regressor f_j ending in (x, y). Prediction
averages the regressor outputs.

A multi-scale conv block is two parallel branches (1x1 reduction then
conv k=3, and 1x1 reduction then conv k=7, each with nf filters and
ReLU), concatenated along channels and gated by multi-scale channel
attention (MS-CAM): sigmoid of the sum of a local bottleneck at full
resolution and the same bottleneck applied to the globally pooled vector.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import ValidationError


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters.

    nf: filters per branch in each multi-scale block (concat gives 2*nf).
    kernels: the two branch kernel sizes.
    reduction_r: MS-CAM bottleneck reduction ratio; must divide 2*nf.
    latent: width of the per-domain latent after h_j.
    regressor_hidden: hidden width of f_j.
    dropout_p: regressor dropout probability.
    """

    nf: int = 32
    kernels: tuple = (3, 7)
    reduction_r: int = 4
    latent: int = 64
    regressor_hidden: int = 64
    dropout_p: float = 0.3
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        if self.nf < 1:
            raise ValidationError(f"nf must be >= 1, got {self.nf}")
        if len(self.kernels) != 2 or any(k < 1 for k in self.kernels):
            raise ValidationError(f"kernels must be two sizes >= 1, got {self.kernels}")
        if self.reduction_r < 1 or (2 * self.nf) % self.reduction_r:
            raise ValidationError(
                f"reduction_r {self.reduction_r} must divide 2*nf = {2 * self.nf}"
            )
        if self.latent < 1 or self.regressor_hidden < 1:
            raise ValidationError("latent and regressor_hidden must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")


class Conv2dLayer:
    def __init__(self, rng, c_in, c_out, k, stride=1, padding="same"):
        std = np.sqrt(2.0 / (c_in * k * k))
        self.w = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def named(self, prefix):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class PwConvLayer:
    def __init__(self, rng, c_in, c_out):
        std = np.sqrt(2.0 / c_in)
        self.w = Tensor(rng.normal(0.0, std, size=(c_out, c_in, 1, 1)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x):
        return ad.pointwise_conv(x, self.w, self.b)

    def named(self, prefix):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class BatchNormLayer:
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = BatchNormState(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, training):
        return ad.batchnorm(x, self.gamma, self.beta, self.state, training,
                            self.momentum, self.eps)

    def named(self, prefix):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]


class DenseLayer:
    def __init__(self, rng, d_in, d_out):
        std = np.sqrt(2.0 / d_in)
        self.w = Tensor(rng.normal(0.0, std, size=(d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        return ad.fully_connected(x, self.w, self.b)

    def named(self, prefix):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class Bottleneck:
    """PWConv (C -> C/r) -> BN -> ReLU -> PWConv (C/r -> C) -> BN."""

    def __init__(self, rng, channels, r, momentum, eps):
        mid = channels // r
        self.pw1 = PwConvLayer(rng, channels, mid)
        self.bn1 = BatchNormLayer(mid, momentum, eps)
        self.pw2 = PwConvLayer(rng, mid, channels)
        self.bn2 = BatchNormLayer(channels, momentum, eps)

    def __call__(self, x, training):
        h = ad.relu(self.bn1(self.pw1(x), training))
        return self.bn2(self.pw2(h), training)

    def named(self, prefix):
        out = []
        for name, part in (("pw1", self.pw1), ("bn1", self.bn1),
                           ("pw2", self.pw2), ("bn2", self.bn2)):
            out.extend(part.named(f"{prefix}.{name}"))
        return out

    def bn_layers(self, prefix):
        return [(f"{prefix}.bn1", self.bn1), (f"{prefix}.bn2", self.bn2)]


class MsCam:
    """Multi-scale channel attention: sigmoid(local + broadcast global)."""

    def __init__(self, rng, channels, r, momentum=0.1, eps=1e-5):
        if channels % r:
            raise ValidationError(f"reduction {r} must divide channels {channels}")
        self.channels = channels
        self.local = Bottleneck(rng, channels, r, momentum, eps)
        self.globl = Bottleneck(rng, channels, r, momentum, eps)

    def weights(self, x: Tensor, training: bool) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != self.channels:
            raise ValidationError(
                f"ms_cam expects [B, {self.channels}, H, W], got {x.shape}"
            )
        b, c, h, w = x.data.shape
        loc = self.local(x, training)
        gvec = ad.reshape(ad.global_avg_pool(x), (b, c, 1, 1))
        glo = ad.broadcast_hw(self.globl(gvec, training), h, w)
        return ad.sigmoid(ad.add(loc, glo))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ad.mul(x, self.weights(x, training))

    def named(self, prefix):
        return self.local.named(f"{prefix}.local") + self.globl.named(f"{prefix}.global")

    def bn_layers(self, prefix):
        return (self.local.bn_layers(f"{prefix}.local")
                + self.globl.bn_layers(f"{prefix}.global"))


def aff_fuse(x: Tensor, y: Tensor, cam: MsCam, training: bool) -> Tensor:
    """Attentional feature fusion: M*x + (1-M)*y with M = cam(x + y).

    The per-element weight pair (M, 1-M) sums to exactly 1, so the output
    is a convex combination of the inputs.
    """
    if x.data.shape != y.data.shape:
        raise ValidationError(f"aff_fuse: shape {x.data.shape} != {y.data.shape}")
    m = cam.weights(ad.add(x, y), training)
    one_minus = ad.add_scalar(ad.scale(m, -1.0), 1.0)
    return ad.add(ad.mul(x, m), ad.mul(y, one_minus))


class MsConvBlock:
    """Parallel k=3 / k=7 branches behind 1x1 reductions, concat, MS-CAM."""

    def __init__(self, rng, c_in, config: NetConfig):
        c_red = max(c_in // 2, 1)
        k_a, k_b = config.kernels
        self.reduce_a = PwConvLayer(rng, c_in, c_red)
        self.conv_a = Conv2dLayer(rng, c_red, config.nf, k_a)
        self.reduce_b = PwConvLayer(rng, c_in, c_red)
        self.conv_b = Conv2dLayer(rng, c_red, config.nf, k_b)
        self.cam = MsCam(rng, 2 * config.nf, config.reduction_r,
                         config.bn_momentum, config.bn_eps)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        a = ad.relu(self.conv_a(ad.relu(self.reduce_a(x))))
        b = ad.relu(self.conv_b(ad.relu(self.reduce_b(x))))
        return self.cam(ad.concat([a, b], axis=1), training)

    def named(self, prefix):
        out = []
        for name, part in (("reduce_a", self.reduce_a), ("conv_a", self.conv_a),
                           ("reduce_b", self.reduce_b), ("conv_b", self.conv_b)):
            out.extend(part.named(f"{prefix}.{name}"))
        out.extend(self.cam.named(f"{prefix}.cam"))
        return out

    def bn_layers(self, prefix):
        return self.cam.bn_layers(f"{prefix}.cam")


class SharedExtractor:
    """g: per-stream MS-ConvBlock x2, then AFF across streams."""

    def __init__(self, rng, config: NetConfig):
        c = 2 * config.nf
        self.amp_blocks = [MsConvBlock(rng, 1, config), MsConvBlock(rng, c, config)]
        self.phase_blocks = [MsConvBlock(rng, 1, config), MsConvBlock(rng, c, config)]
        self.fuse_cam = MsCam(rng, c, config.reduction_r,
                              config.bn_momentum, config.bn_eps)

    def __call__(self, amp: Tensor, phase: Tensor, training: bool) -> Tensor:
        a, p = amp, phase
        for blk in self.amp_blocks:
            a = blk(a, training)
        for blk in self.phase_blocks:
            p = blk(p, training)
        return aff_fuse(a, p, self.fuse_cam, training)

    def named(self, prefix):
        out = []
        for i, blk in enumerate(self.amp_blocks):
            out.extend(blk.named(f"{prefix}.amp{i}"))
        for i, blk in enumerate(self.phase_blocks):
            out.extend(blk.named(f"{prefix}.phase{i}"))
        out.extend(self.fuse_cam.named(f"{prefix}.fuse"))
        return out

    def bn_layers(self, prefix):
        out = []
        for i, blk in enumerate(self.amp_blocks):
            out.extend(blk.bn_layers(f"{prefix}.amp{i}"))
        for i, blk in enumerate(self.phase_blocks):
            out.extend(blk.bn_layers(f"{prefix}.phase{i}"))
        out.extend(self.fuse_cam.bn_layers(f"{prefix}.fuse"))
        return out


class DomainHead:
    """h_j: strided conv -> ReLU -> global average pool -> FC to latent."""

    def __init__(self, rng, c_in, config: NetConfig):
        self.conv = Conv2dLayer(rng, c_in, c_in, 3, stride=2)
        self.fc = DenseLayer(rng, c_in, config.latent)

    def __call__(self, z: Tensor) -> Tensor:
        return self.fc(ad.global_avg_pool(ad.relu(self.conv(z))))

    def named(self, prefix):
        return self.conv.named(f"{prefix}.conv") + self.fc.named(f"{prefix}.fc")


class Regressor:
    """f_j: FC -> ReLU -> dropout -> FC to (x, y)."""

    def __init__(self, rng, config: NetConfig):
        self.fc1 = DenseLayer(rng, config.latent, config.regressor_hidden)
        self.fc2 = DenseLayer(rng, config.regressor_hidden, 2)
        self.p = config.dropout_p

    def __call__(self, h: Tensor, training: bool, rng=None) -> Tensor:
        return self.fc2(ad.dropout(ad.relu(self.fc1(h)), self.p, training, rng))

    def named(self, prefix):
        return self.fc1.named(f"{prefix}.fc1") + self.fc2.named(f"{prefix}.fc2")


class MultiSourceModel:
    """Shared extractor plus one (h_j, f_j) pair per source domain.

    Raw regressor outputs pass through a fixed output affine
    (coords = raw * out_scale + out_offset, identity at construction).
    Training sets it to the pooled source label statistics so the
    regressors learn in standardized coordinates; being shared by all
    heads it cannot break prediction symmetry.
    """

    def __init__(self, config: NetConfig, n_sources: int, rng):
        if n_sources < 1:
            raise ValidationError(f"n_sources must be >= 1, got {n_sources}")
        self.config = config
        self.shared = SharedExtractor(rng, config)
        c = 2 * config.nf
        self.heads = [DomainHead(rng, c, config) for _ in range(n_sources)]
        self.regressors = [Regressor(rng, config) for _ in range(n_sources)]
        self.out_scale = np.ones(2)
        self.out_offset = np.zeros(2)

    def set_output_affine(self, scale, offset) -> None:
        scale = np.asarray(scale, dtype=np.float64).reshape(2)
        offset = np.asarray(offset, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(scale)) and np.all(np.isfinite(offset))):
            raise ValidationError("output affine must be finite")
        if np.any(scale <= 0):
            raise ValidationError(f"out_scale must be > 0, got {scale}")
        self.out_scale = scale.copy()
        self.out_offset = offset.copy()

    @property
    def n_sources(self) -> int:
        return len(self.heads)

    def forward_shared(self, amp: Tensor, phase: Tensor, training: bool = False):
        if amp.data.shape != phase.data.shape:
            raise ValidationError(
                f"amp shape {amp.data.shape} != phase shape {phase.data.shape}"
            )
        return self.shared(amp, phase, training)

    def forward_domain(self, j: int, fused: Tensor, training: bool = False, rng=None):
        """Returns (latent_j, coords_j) for source index j."""
        if not 0 <= j < self.n_sources:
            raise ValidationError(f"source index {j} out of range [0, {self.n_sources})")
        latent = self.heads[j](fused)
        raw = self.regressors[j](latent, training, rng)
        b = raw.data.shape[0]
        coords = ad.add(
            ad.mul(raw, Tensor(np.tile(self.out_scale, (b, 1)))),
            Tensor(np.tile(self.out_offset, (b, 1))),
        )
        return latent, coords

    def predict(self, amp, phase, batch_size: int = 128) -> np.ndarray:
        """Eval-mode position estimate: mean of all regressor outputs.

        Args:
            amp, phase: arrays [B, H, W] or [B, 1, H, W].

        Returns:
            float64 array [B, 2].
        """
        amp = np.asarray(amp, dtype=np.float64)
        phase = np.asarray(phase, dtype=np.float64)
        if amp.ndim == 3:
            amp = amp[:, None]
            phase = phase[:, None]
        outs = []
        for lo in range(0, amp.shape[0], batch_size):
            a = Tensor(amp[lo : lo + batch_size])
            p = Tensor(phase[lo : lo + batch_size])
            fused = self.forward_shared(a, p, training=False)
            per_head = np.stack(
                [self.forward_domain(j, fused, training=False)[1].data
                 for j in range(self.n_sources)]
            )
            # fsum is order-insensitive, so head order cannot leak into
            # the average
            summed = np.apply_along_axis(math.fsum, 0, per_head)
            outs.append(summed / self.n_sources)
        return np.concatenate(outs, axis=0)

    def named_parameters(self) -> dict:
        out = dict(self.shared.named("g"))
        for j, head in enumerate(self.heads):
            out.update(dict(head.named(f"h{j}")))
        for j, reg in enumerate(self.regressors):
            out.update(dict(reg.named(f"f{j}")))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def bn_layers(self) -> dict:
        return dict(self.shared.bn_layers("g"))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        arrays = {name: t.data.copy() for name, t in self.named_parameters().items()}
        for name, bn in self.bn_layers().items():
            arrays[f"{name}.running_mean"] = bn.state.mean.copy()
            arrays[f"{name}.running_var"] = bn.state.var.copy()
        arrays["out.scale"] = self.out_scale.copy()
        arrays["out.offset"] = self.out_offset.copy()
        return arrays

    def load_state_dict(self, arrays: dict):
        params = self.named_parameters()
        bns = self.bn_layers()
        expected = set(params) | {f"{n}.running_{s}" for n in bns for s in ("mean", "var")}
        expected |= {"out.scale", "out.offset"}
        missing = expected - set(arrays)
        extra = set(arrays) - expected
        if missing or extra:
            raise ValidationError(
                f"state mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}"
            )
        for name, t in params.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != t.data.shape:
                raise ValidationError(
                    f"param {name}: shape {a.shape} != expected {t.data.shape}"
                )
            t.data = a.copy()
        for name, bn in bns.items():
            bn.state.mean = np.asarray(arrays[f"{name}.running_mean"], dtype=np.float64).copy()
            bn.state.var = np.asarray(arrays[f"{name}.running_var"], dtype=np.float64).copy()
        self.set_output_affine(arrays["out.scale"], arrays["out.offset"])


def save_model(path, model: MultiSourceModel) -> None:
    """Checkpoint the model with enough meta to rebuild it."""
    meta = {"net": asdict(model.config), "n_sources": model.n_sources}
    meta["net"]["kernels"] = list(model.config.kernels)
    ad.save_checkpoint(path, model.state_dict(), meta)


def load_model(path) -> MultiSourceModel:
    arrays, meta = ad.load_checkpoint(path)
    if "net" not in meta or "n_sources" not in meta:
        raise ValidationError(f"{path}: checkpoint lacks model meta")
    net = dict(meta["net"])
    net["kernels"] = tuple(net.get("kernels", (3, 7)))
    config = NetConfig(**net)
    model = MultiSourceModel(config, int(meta["n_sources"]), np.random.default_rng(0))
    model.load_state_dict(arrays)
    return model
