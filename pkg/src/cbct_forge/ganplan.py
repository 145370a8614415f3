"""Training arithmetic for the multitask 3D cGAN: LSGAN + L1 losses,
discriminator stabilisation schedules, and a shape / receptive-field
planner for the U-net generator and the patch discriminator.

Notation of the training objective: G maps an input psCBCT x (plus the
dropout noise z) to a two-channel output (sCT, labels); D scores
(x, y) pairs; ``lam`` weights the L1 term against the adversarial term.
Nothing here trains a network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LossConfig:
    lam: float = 100.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


def _arr(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty input")
    return a


def generator_loss(d_fake, y_hat, y, cfg: LossConfig = LossConfig()) -> float:
    """mean((D(F) - 1)^2) + lam * mean(|Y - Y_hat|)."""
    d_fake, y_hat, y = _arr(d_fake), _arr(y_hat), _arr(y)
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch: {y_hat.shape} vs {y.shape}")
    return float(np.mean((d_fake - 1.0) ** 2) + cfg.lam * np.mean(np.abs(y - y_hat)))


def discriminator_loss(d_real, d_fake) -> float:
    """1/2 mean((D(R) - 1)^2) + 1/2 mean(D(F)^2)."""
    d_real, d_fake = _arr(d_real), _arr(d_fake)
    return float(0.5 * np.mean((d_real - 1.0) ** 2) + 0.5 * np.mean(d_fake**2))


@dataclass(frozen=True)
class StabilizerConfig:
    fake_label_range: tuple[float, float] = (0.0, 0.3)
    real_label_range: tuple[float, float] = (0.7, 1.2)
    swap_prob: float = 0.1
    noise_v0: float = 0.2
    total_epochs: int = 100

    def __post_init__(self):
        for lo, hi in (self.fake_label_range, self.real_label_range):
            if not lo <= hi:
                raise ValueError("label ranges must be ordered (lo <= hi)")
        if not 0 <= self.swap_prob <= 1:
            raise ValueError("swap_prob must lie in [0, 1]")
        if self.noise_v0 < 0:
            raise ValueError("noise_v0 must be >= 0")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def smoothed_label(is_real: bool, rng, cfg: StabilizerConfig = StabilizerConfig(), size=None):
    """Uniform target label from the real or fake smoothing range.

    ``rng`` is a ``numpy.random.Generator`` (advanced in place) or a seed.
    """
    lo, hi = cfg.real_label_range if is_real else cfg.fake_label_range
    return _rng(rng).uniform(lo, hi, size=size)


def swap_decision(rng, p: float | None = None, cfg: StabilizerConfig = StabilizerConfig(), size=None):
    """True when real and fake inputs should be exchanged before D."""
    p = cfg.swap_prob if p is None else p
    if not 0 <= p <= 1:
        raise ValueError("probability must lie in [0, 1]")
    draw = _rng(rng).random(size=size)
    return draw < p


def noise_variance(epoch: int, cfg: StabilizerConfig = StabilizerConfig()) -> float:
    """Instance-noise variance: noise_v0 at epoch 0, linearly to 0 at the
    final epoch (total_epochs - 1)."""
    if not 0 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    last = cfg.total_epochs - 1
    if epoch >= last:
        return 0.0
    return cfg.noise_v0 * (1.0 - epoch / last)


def learning_rate(epoch: int, total: int = 100, base: float = 2e-4) -> float:
    """Constant ``base`` for the first half of training, then linear decay
    reaching 0 at epoch ``total - 1``."""
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    n_const = math.ceil(total / 2)
    n_decay = total - n_const
    if n_decay == 0:
        return base
    return base * min(1.0, (total - 1 - epoch) / n_decay)


# ---------------------------------------------------------------------------
# architecture planner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kernel: int
    stride: int = 1
    padding: int = 0
    transposed: bool = False
    name: str = ""

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid layer {self}")

    def out_size(self, n: int) -> int:
        if self.transposed:
            return (n - 1) * self.stride - 2 * self.padding + self.kernel
        return (n + 2 * self.padding - self.kernel) // self.stride + 1


@dataclass
class NetPlan:
    layers: list[LayerSpec]
    input_dims: tuple[int, int, int]
    layer_dims: list[tuple[int, int, int]] = field(default_factory=list)
    receptive_field: int | None = None
    rf_chain: list[int] = field(default_factory=list)

    @property
    def output_dims(self) -> tuple[int, int, int]:
        return self.layer_dims[-1] if self.layer_dims else self.input_dims

    def to_dict(self) -> dict:
        # rf_chain runs output -> input; layer l (1-based) sees R_{l-1}
        rf_by_layer = list(reversed(self.rf_chain))
        layers = []
        for k, (spec, dims) in enumerate(zip(self.layers, self.layer_dims)):
            entry = {
                "name": spec.name or f"layer{k + 1}",
                "kernel": spec.kernel,
                "stride": spec.stride,
                "padding": spec.padding,
                "transposed": spec.transposed,
                "output_dims": list(dims),
            }
            if rf_by_layer:
                entry["receptive_field_in"] = rf_by_layer[k]
            layers.append(entry)
        return {
            "input_dims": list(self.input_dims),
            "layers": layers,
            "output_dims": list(self.output_dims),
            "receptive_field": self.receptive_field,
            "receptive_field_chain": list(self.rf_chain),
            "receptive_field_steps": self.rf_steps(),
        }

    def rf_steps(self) -> list[str]:
        """One line per recursion step, e.g. ``R_4 = 4 + 1*(1 - 1) = 4``."""
        if not self.rf_chain:
            return []
        n = len(self.layers)
        steps = [f"R_{n} = 1"]
        for k in range(1, len(self.rf_chain)):
            spec = self.layers[n - k]
            prev, cur = self.rf_chain[k - 1], self.rf_chain[k]
            steps.append(f"R_{n - k} = {spec.kernel} + {spec.stride}*({prev} - 1) = {cur}")
        return steps


def receptive_field_chain(layers) -> list[int]:
    """[R_L, R_{L-1}, ..., R_0] with R_L = 1 and R_{l-1} = K_l + S_l (R_l - 1)."""
    layers = list(layers)
    if not layers:
        raise ValueError("need at least one layer")
    chain = [1]
    for spec in reversed(layers):
        kernel, stride = (spec.kernel, spec.stride) if isinstance(spec, LayerSpec) else spec[:2]
        chain.append(kernel + stride * (chain[-1] - 1))
    return chain


def receptive_field(layers) -> int:
    """Input patch size seen by one output element; layers are LayerSpec
    or (kernel, stride) pairs, input side first."""
    return receptive_field_chain(layers)[-1]


def shape_plan(input_dims, layers) -> NetPlan:
    """Per-layer output sizes: floor((n + 2 pad - K) / S) + 1 for convolutions,
    (n - 1) S - 2 pad + K for transposed convolutions."""
    dims = tuple(int(d) for d in input_dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"input dims must be three positive integers, got {input_dims}")
    layers = [l if isinstance(l, LayerSpec) else LayerSpec(*l) for l in layers]
    plan = NetPlan(layers, dims)
    for k, spec in enumerate(layers):
        dims = tuple(spec.out_size(n) for n in dims)
        if min(dims) < 1:
            raise ValueError(f"layer {k + 1} ({spec}) produces non-positive dims {dims}")
        plan.layer_dims.append(dims)
    conv = [l for l in layers if not l.transposed]
    if conv and len(conv) == len(layers):
        plan.rf_chain = receptive_field_chain(conv)
        plan.receptive_field = plan.rf_chain[-1]
    elif conv:
        # encoder-decoder: report what the bottleneck sees
        plan.receptive_field = receptive_field(conv)
    return plan


def discriminator_layers(n_layers: int = 3) -> list[LayerSpec]:
    """70^3 patch discriminator: n_layers stride-2 4^3 convolutions, then two
    stride-1 4^3 convolutions (the last maps to one channel). Padding 1."""
    layers = [LayerSpec(4, 2, 1, name=f"conv{k + 1}") for k in range(n_layers)]
    layers += [LayerSpec(4, 1, 1, name=f"conv{n_layers + 1}"), LayerSpec(4, 1, 1, name="output")]
    return layers


def generator_layers(depth: int = 7) -> list[LayerSpec]:
    """U-net generator: ``depth`` 4^3 stride-2 convolutions down to the
    bottleneck and ``depth`` 4^3 stride-2 transposed convolutions back."""
    down = [LayerSpec(4, 2, 1, name=f"down{k + 1}") for k in range(depth)]
    up = [LayerSpec(4, 2, 1, transposed=True, name=f"up{k + 1}") for k in range(depth)]
    return down + up


def plan_net(arch: str, input_dims=(128, 128, 128)) -> NetPlan:
    if arch == "discriminator":
        return shape_plan(input_dims, discriminator_layers())
    if arch == "generator":
        return shape_plan(input_dims, generator_layers())
    raise ValueError(f"unknown architecture {arch!r}")
