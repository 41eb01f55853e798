"""Causal VAE speech codec.

Encoder: causal conv front-end, strided causal downsampling blocks each followed
by a dilated residual stack, a projection to ``latent_dim`` and a single
lookahead convolution. Bottleneck: project-in, unidirectional LSTM stack,
project-out, and a pointwise head giving a diagonal Gaussian posterior. An
affine-coupling flow is used only inside the KL estimate. Decoder: mirrored
LSTM bottleneck, one lookahead convolution, then causal transposed-conv
upsampling refined by SnakeBeta AMP blocks. Encoder and decoder convolutions
are weight-normalised.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import (LEAKY_SLOPE, LSTM, CausalConv1d, CausalConvTranspose1d, NonFiniteError,
                       ShapeError, SnakeBeta, check_finite)

LOG_SCALE_MIN = -9.0
LOG_SCALE_MAX = 4.0


@dataclass
class CodecConfig:
    sample_rate: int
    strides: list[int]
    kernels: list[int]
    base_channels: int
    latent_dim: int
    residual_layers: int
    lstm_layers: int
    lstm_hidden: int
    flow_layers: int
    flow_hidden: int
    lookahead_frames: int = 2
    amp_kernels: list[int] = field(default_factory=lambda: [3, 7])
    amp_dilations: list[int] = field(default_factory=lambda: [1, 3])
    log_scale_init: float = -4.0
    weight_norm: bool = True

    def __post_init__(self):
        if len(self.strides) != len(self.kernels):
            raise ValueError("strides and kernels must have equal length")
        if self.sample_rate % self.hop:
            raise ValueError(f"frame rate {self.sample_rate}/{self.hop} is not integral")
        if self.latent_dim % 2:
            raise ValueError("latent_dim must be even (coupling flow splits it)")

    @property
    def hop(self) -> int:
        return int(np.prod(self.strides))

    @property
    def frame_rate(self) -> int:
        return self.sample_rate // self.hop

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(len(self.strides) + 1)]

    def n_frames(self, n_samples: int) -> int:
        return -(-n_samples // self.hop)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        return cls(**d)


def toy_config(**overrides) -> CodecConfig:
    cfg = dict(sample_rate=8000, strides=[2, 2, 4, 4], kernels=[4, 4, 8, 8], base_channels=4,
               latent_dim=8, residual_layers=2, lstm_layers=2, lstm_hidden=32, flow_layers=2,
               flow_hidden=32, amp_kernels=[3, 7], amp_dilations=[1, 3])
    cfg.update(overrides)
    return CodecConfig(**cfg)


def paper_config(**overrides) -> CodecConfig:
    cfg = dict(sample_rate=48000, strides=[2, 2, 2, 4, 6, 10], kernels=[4, 4, 4, 8, 12, 20],
               base_channels=12, latent_dim=128, residual_layers=6, lstm_layers=4, lstm_hidden=256,
               flow_layers=4, flow_hidden=256, amp_kernels=[3, 7, 11], amp_dilations=[1, 3, 5])
    cfg.update(overrides)
    return CodecConfig(**cfg)


PRESETS = {"toy": toy_config, "paper": paper_config}


class PosteriorParams(NamedTuple):
    mean: torch.Tensor
    log_scale: torch.Tensor

    @property
    def scale(self) -> torch.Tensor:
        return self.log_scale.exp()


class FlowInvertibilityError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# encoder


class ResidualUnit(nn.Module):
    def __init__(self, channels: int, dilation: int, kernel: int = 3):
        super().__init__()
        self.conv1 = CausalConv1d(channels, channels, kernel, dilation=dilation)
        self.conv2 = CausalConv1d(channels, channels, 1)

    def forward(self, x):
        y = self.conv1(F.leaky_relu(x, LEAKY_SLOPE))
        return x + self.conv2(F.leaky_relu(y, LEAKY_SLOPE))


class DownBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, layers: int):
        super().__init__()
        self.down = CausalConv1d(c_in, c_out, kernel, stride=stride)
        self.res = nn.Sequential(*[ResidualUnit(c_out, 2 ** i) for i in range(layers)])

    def forward(self, x):
        return self.res(self.down(F.leaky_relu(x, LEAKY_SLOPE)))


class Encoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        ch = cfg.channels
        self.inp = CausalConv1d(1, ch[0], 7)
        self.blocks = nn.ModuleList(
            DownBlock(ch[i], ch[i + 1], k, s, cfg.residual_layers)
            for i, (k, s) in enumerate(zip(cfg.kernels, cfg.strides))
        )
        self.proj = CausalConv1d(ch[-1], cfg.latent_dim, 3)
        self.lookahead = CausalConv1d(cfg.latent_dim, cfg.latent_dim, cfg.lookahead_frames + 1,
                                      lookahead=cfg.lookahead_frames)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``[B, T]`` waveform (T a multiple of hop) -> ``[B, T/hop, latent_dim]``."""
        h = self.inp(x.unsqueeze(1))
        for block in self.blocks:
            h = block(h)
        h = self.proj(F.leaky_relu(h, LEAKY_SLOPE))
        return self.lookahead(h).transpose(1, 2)


# ---------------------------------------------------------------------------
# bottleneck and flow


class Bottleneck(nn.Module):
    """Posterior ``q(z | z_in)``: project-in -> LSTM -> project-out -> pointwise (mean, log-scale).

    The mean is predicted as a residual on top of ``z_in`` so a fresh bottleneck
    starts at the autoencoder latent.
    """

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        W = cfg.lstm_hidden
        self.proj_in = nn.Linear(cfg.latent_dim, W)
        self.lstm = LSTM(W, W, cfg.lstm_layers)
        self.proj_out = nn.Linear(W, W)
        self.head = nn.Linear(W, 2 * cfg.latent_dim)
        nn.init.zeros_(self.head.weight)
        with torch.no_grad():
            self.head.bias.zero_()
            self.head.bias[cfg.latent_dim:] = cfg.log_scale_init

    def forward(self, z_in: torch.Tensor) -> PosteriorParams:
        h = self.proj_out(self.lstm(self.proj_in(z_in)))
        mu, log_scale = self.head(h).chunk(2, dim=-1)
        return PosteriorParams(z_in + mu, log_scale.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX))


class AffineCoupling(nn.Module):
    """Per-frame affine coupling across channels: one half scales/shifts the other."""

    def __init__(self, dim: int, hidden: int, flip: bool):
        super().__init__()
        self.flip = flip
        self.half = dim // 2
        self.net = nn.Sequential(nn.Linear(self.half, hidden), nn.Tanh(), nn.Linear(hidden, 2 * self.half))
        nn.init.zeros_(self.net[2].weight)
        nn.init.zeros_(self.net[2].bias)

    def _split(self, z):
        a, b = z[..., : self.half], z[..., self.half:]
        return (b, a) if self.flip else (a, b)

    def _join(self, a, b):
        return torch.cat((b, a) if self.flip else (a, b), dim=-1)

    def _params(self, a):
        s, t = self.net(a).chunk(2, dim=-1)
        return torch.tanh(s), t

    def forward(self, z):
        a, b = self._split(z)
        s, t = self._params(a)
        return self._join(a, b * s.exp() + t), s.sum(-1)

    def inverse(self, y):
        a, b = self._split(y)
        s, t = self._params(a)
        return self._join(a, (b - t) * (-s).exp())


class FlowStack(nn.Module):
    def __init__(self, dim: int, layers: int, hidden: int):
        super().__init__()
        self.layers = nn.ModuleList(AffineCoupling(dim, hidden, flip=i % 2 == 1) for i in range(layers))

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        logdet = z.new_zeros(z.shape[:-1])
        for layer in self.layers:
            z, ld = layer(z)
            logdet = logdet + ld
        return z, logdet

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        for layer in reversed(self.layers):
            y = layer.inverse(y)
        return y

    def randomize(self, std: float = 0.3, generator: torch.Generator | None = None) -> "FlowStack":
        """Give the (identity-initialised) output layers random weights; for tests."""
        with torch.no_grad():
            for layer in self.layers:
                for p in layer.net[2].parameters():
                    p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)
        return self


def sample_reparameterized(p: PosteriorParams, noise: torch.Tensor | None = None,
                           generator: torch.Generator | None = None) -> torch.Tensor:
    """``mean + exp(log_scale) * noise``; the noise carries no gradient."""
    if noise is None:
        noise = torch.randn(p.mean.shape, generator=generator, dtype=p.mean.dtype)
    elif noise.shape[-p.mean.dim():] != p.mean.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} does not match posterior {tuple(p.mean.shape)}")
    return p.mean + p.scale * noise.detach()


def kl_closed_form(p: PosteriorParams) -> torch.Tensor:
    """Per-frame ``KL(N(mean, scale^2) || N(0, I))`` summed over latent dims."""
    return 0.5 * (p.mean ** 2 + p.scale ** 2 - 1.0 - 2.0 * p.log_scale).sum(-1)


def kl_mc_terms(p: PosteriorParams, flow: FlowStack | None, noise: torch.Tensor,
                check_inverse: bool = False) -> torch.Tensor:
    """Single-draw KL estimates ``log q(z0) - logdet - log N(f(z0))`` per draw and frame."""
    z0 = sample_reparameterized(p, noise)
    eps = noise
    log_q = (-0.5 * eps ** 2 - p.log_scale - 0.5 * math.log(2 * math.pi)).sum(-1)
    if flow is None or len(flow.layers) == 0:
        zk, logdet = z0, torch.zeros_like(log_q)
    else:
        zk, logdet = flow(z0)
        if check_inverse:
            back = flow.inverse(zk)
            err = ((back - z0).norm() / z0.norm().clamp_min(1e-12)).item()
            if err > 1e-6:
                raise FlowInvertibilityError(f"flow round-trip relative error {err:.2e}")
    log_p = (-0.5 * zk ** 2 - 0.5 * math.log(2 * math.pi)).sum(-1)
    return log_q - logdet - log_p


def kl_with_flow(p: PosteriorParams, flow: FlowStack | None, n_mc: int = 1,
                 noise: torch.Tensor | None = None, generator: torch.Generator | None = None,
                 check_inverse: bool = False) -> torch.Tensor:
    """Monte-Carlo KL to the standard-normal prior, pushed through ``flow``.

    Averaged over frames (and batch) and ``n_mc`` draws; ``noise`` may be given
    with a leading ``n_mc`` axis (or without one when ``n_mc == 1``).
    """
    if noise is None:
        noise = torch.randn((n_mc, *p.mean.shape), generator=generator, dtype=p.mean.dtype)
    return kl_mc_terms(p, flow, noise, check_inverse).mean()


# ---------------------------------------------------------------------------
# decoder


class AMPBlock(nn.Module):
    """Residual units of (dilated conv -> SnakeBeta -> conv -> SnakeBeta) + skip."""

    def __init__(self, channels: int, kernel: int, dilations: list[int]):
        super().__init__()
        self.convs1 = nn.ModuleList(CausalConv1d(channels, channels, kernel, dilation=d) for d in dilations)
        self.convs2 = nn.ModuleList(CausalConv1d(channels, channels, kernel) for _ in dilations)
        self.acts1 = nn.ModuleList(SnakeBeta(channels) for _ in dilations)
        self.acts2 = nn.ModuleList(SnakeBeta(channels) for _ in dilations)

    def forward(self, x):
        for c1, a1, c2, a2 in zip(self.convs1, self.acts1, self.convs2, self.acts2):
            x = x + a2(c2(a1(c1(x))))
        return x


class UpStage(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, kernels: list[int], dilations: list[int]):
        super().__init__()
        self.act = SnakeBeta(c_in)
        self.up = CausalConvTranspose1d(c_in, c_out, 2 * stride, stride)
        self.amps = nn.ModuleList(AMPBlock(c_out, k, dilations) for k in kernels)

    def forward(self, x):
        x = self.up(self.act(x))
        return sum(amp(x) for amp in self.amps) / len(self.amps)


class MirrorBottleneck(nn.Module):
    """Decoder-side counterpart of :class:`Bottleneck` (residual, deterministic)."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        W = cfg.lstm_hidden
        self.proj_in = nn.Linear(cfg.latent_dim, W)
        self.lstm = LSTM(W, W, cfg.lstm_layers)
        self.proj_out = nn.Linear(W, cfg.latent_dim)
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)

    def forward(self, z):
        return z + self.proj_out(self.lstm(self.proj_in(z)))


class Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        ch = cfg.channels
        self.latent_dim = cfg.latent_dim
        self.mirror = MirrorBottleneck(cfg)
        self.lookahead = CausalConv1d(cfg.latent_dim, ch[-1], cfg.lookahead_frames + 1,
                                      lookahead=cfg.lookahead_frames)
        n = len(cfg.strides)
        self.stages = nn.ModuleList(
            UpStage(ch[i + 1], ch[i], cfg.strides[i], cfg.amp_kernels, cfg.amp_dilations)
            for i in reversed(range(n))
        )
        self.act = SnakeBeta(ch[0])
        self.out = CausalConv1d(ch[0], 1, 7)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """``[B, T_z, latent_dim]`` -> ``[B, T_z * hop]``."""
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent dim {z.shape[-1]} != {self.latent_dim}")
        h = self.lookahead(self.mirror(z).transpose(1, 2))
        for stage in self.stages:
            h = stage(h)
        return torch.tanh(self.out(self.act(h))).squeeze(1)


# ---------------------------------------------------------------------------
# full model


def apply_weight_norm(module: nn.Module) -> nn.Module:
    """Reparameterise every conv weight as ``g * v / ||v||`` (norm over all dims but the first)."""
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d)):
            torch.nn.utils.parametrizations.weight_norm(m)
    return module


class Codec(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.bottleneck = Bottleneck(cfg)
        self.flow = FlowStack(cfg.latent_dim, cfg.flow_layers, cfg.flow_hidden)
        self.decoder = Decoder(cfg)
        if cfg.weight_norm:
            apply_weight_norm(self.encoder)
            apply_weight_norm(self.decoder)

    def pad(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[-1]
        if n < 1:
            raise ShapeError("empty waveform")
        return F.pad(x, (0, self.cfg.n_frames(n) * self.cfg.hop - n))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic latent ``z_AE``; ``x`` is ``[T]`` or ``[B, T]``."""
        unbatched = x.dim() == 1
        x = self.pad(check_finite(x, "waveform"))
        z = self.encoder(x.unsqueeze(0) if unbatched else x)
        return z[0] if unbatched else z

    def posterior(self, z_in: torch.Tensor) -> PosteriorParams:
        return self.bottleneck(z_in)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        unbatched = z.dim() == 2
        y = self.decoder(z.unsqueeze(0) if unbatched else z)
        if not torch.isfinite(y).all():
            raise NonFiniteError("decoder produced non-finite samples")
        return y[0] if unbatched else y

    def latents(self, x: torch.Tensor, sample: bool = False,
                generator: torch.Generator | None = None) -> torch.Tensor:
        """Posterior mean (or a sample) for downstream use."""
        p = self.posterior(self.encode(x))
        return sample_reparameterized(p, generator=generator) if sample else p.mean


def encode(x: torch.Tensor, model: Codec) -> torch.Tensor:
    return model.encode(x)


def decode(z: torch.Tensor, model: Codec) -> torch.Tensor:
    return model.decode(z)


def posterior(z_in: torch.Tensor, model: Codec) -> PosteriorParams:
    return model.posterior(z_in)


# ---------------------------------------------------------------------------
# causality / lookahead probe


@dataclass
class ProbeReport:
    expected_lookahead: int
    encoder_lookahead: int
    decoder_lookahead: int
    layer_violations: list[str]
    n_probes: int

    @property
    def passed(self) -> bool:
        return (self.encoder_lookahead == self.expected_lookahead
                and self.decoder_lookahead == self.expected_lookahead
                and not self.layer_violations)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def _changed(base: torch.Tensor, pert: torch.Tensor, axis_len: int, tol: float) -> torch.Tensor:
    """Bool ``[P, axis_len]``: which positions (last axis collapsed first) differ from ``base``."""
    diff = (pert - base.unsqueeze(0)).abs()
    diff = diff.reshape(diff.shape[0], axis_len, -1).amax(-1)
    scale = base.abs().max().clamp_min(1.0)
    return diff > tol * scale


def _earliest(mask_row: torch.Tensor) -> int | None:
    idx = mask_row.nonzero()
    return int(idx[0]) if len(idx) else None


@torch.no_grad()
def encoder_lookahead(model: Codec, n_frames: int, positions: list[int], tol: float = 1e-10,
                      generator: torch.Generator | None = None, chunk: int = 256) -> int:
    """Largest ``frame(sample) - earliest affected latent frame`` over probed sample positions."""
    hop = model.cfg.hop
    dtype = next(model.parameters()).dtype
    x = 0.3 * torch.randn(n_frames * hop, generator=generator, dtype=dtype)
    base = model.encoder(x.unsqueeze(0))[0]
    worst = -(10 ** 9)
    for start in range(0, len(positions), chunk):
        pos = positions[start:start + chunk]
        xs = x.repeat(len(pos), 1)
        xs[torch.arange(len(pos)), torch.tensor(pos)] += 0.5
        changed = _changed(base, model.encoder(xs), n_frames, tol)
        for row, n in zip(changed, pos):
            first = _earliest(row)
            if first is not None:
                worst = max(worst, n // hop - first)
    return worst


@torch.no_grad()
def decoder_lookahead(model: Codec, n_frames: int, frames: list[int], tol: float = 1e-10,
                      generator: torch.Generator | None = None) -> int:
    """Largest ``t - frame of earliest affected output sample`` over perturbed latent frames ``t``."""
    hop = model.cfg.hop
    dtype = next(model.parameters()).dtype
    z = torch.randn(n_frames, model.cfg.latent_dim, generator=generator, dtype=dtype)
    base = model.decoder(z.unsqueeze(0))[0]
    zs = z.repeat(len(frames), 1, 1)
    for i, t in enumerate(frames):
        zs[i, t] += torch.randn(model.cfg.latent_dim, generator=generator, dtype=dtype)
    changed = _changed(base, model.decoder(zs), base.shape[0], tol)
    worst = -(10 ** 9)
    for row, t in zip(changed, frames):
        first = _earliest(row)
        if first is not None:
            worst = max(worst, t - first // hop)
    return worst


@torch.no_grad()
def layer_lookahead(layer: nn.Module, c_in: int, length: int, positions: list[int],
                    tol: float = 1e-10, generator: torch.Generator | None = None) -> int:
    """Measured lookahead of one sequence layer, in its input frames."""
    dtype = next(layer.parameters()).dtype
    is_lstm = isinstance(layer, LSTM)
    shape = (length, c_in) if is_lstm else (c_in, length)
    x = torch.randn(shape, generator=generator, dtype=dtype)
    base = layer(x.unsqueeze(0))[0]
    xs = x.repeat(len(positions), 1, 1)
    for i, t in enumerate(positions):
        if is_lstm:
            xs[i, t] += 1.0
        else:
            xs[i, :, t] += 1.0
    out = layer(xs)
    if is_lstm:
        n_out = base.shape[0]
        changed = _changed(base, out, n_out, tol)
    else:
        n_out = base.shape[-1]
        changed = _changed(base.transpose(0, 1), out.transpose(1, 2), n_out, tol)
    stride = getattr(layer, "stride", 1)
    transposed = isinstance(layer, CausalConvTranspose1d)
    worst = -(10 ** 9)
    for row, t in zip(changed, positions):
        first = _earliest(row)
        if first is None:
            continue
        if transposed:
            worst = max(worst, t - first // stride)
        else:
            worst = max(worst, t // stride - first)
    return worst


def _layer_inputs(layer: nn.Module) -> int:
    if isinstance(layer, LSTM):
        return layer.lstm.input_size
    return layer.conv.in_channels


def causality_probe(model: Codec, n_probes: int | None = None, n_frames: int = 8, seed: int = 0,
                    layer_length: int = 24) -> ProbeReport:
    """Measure encoder/decoder lookahead (latent frames) and per-layer leakage.

    ``n_probes=None`` is exhaustive: every input sample of an ``n_frames`` clip
    and every latent frame. Otherwise ``n_probes`` random positions (plus the
    frame boundaries, where the lookahead is largest) are used.
    """
    gen = torch.Generator().manual_seed(seed)
    hop = model.cfg.hop
    n_samples = n_frames * hop
    if n_probes is None:
        sample_pos = list(range(n_samples))
        frame_pos = list(range(n_frames))
    else:
        rnd = torch.randint(0, n_samples, (n_probes,), generator=gen).tolist()
        sample_pos = sorted(set(rnd) | {f * hop for f in range(n_frames)})
        frame_pos = sorted(set(torch.randint(0, n_frames, (n_probes,), generator=gen).tolist())
                           | {n_frames // 2, n_frames - 1})
    enc = encoder_lookahead(model, n_frames, sample_pos, generator=gen)
    dec = decoder_lookahead(model, n_frames, frame_pos, generator=gen)
    violations = []
    for name, layer in model.named_modules():
        if not getattr(layer, "causal", False):
            continue
        stride = getattr(layer, "stride", 1)
        length = layer_length * (stride if not isinstance(layer, CausalConvTranspose1d) else 1)
        positions = list(range(0, length, max(1, length // 12)))
        measured = layer_lookahead(layer, _layer_inputs(layer), length, positions, generator=gen)
        if measured != getattr(layer, "lookahead", 0):
            violations.append(f"{name}: lookahead {measured} (declared {getattr(layer, 'lookahead', 0)})")
    return ProbeReport(model.cfg.lookahead_frames, enc, dec, violations,
                       len(sample_pos) + len(frame_pos))
