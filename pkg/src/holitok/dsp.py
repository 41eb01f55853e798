"""STFT / mel front-end, the multi-scale mel reconstruction loss, and the
procedurally generated labeled corpus used in place of real speech."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.signal import lfilter

# Text vocabulary shared by the supervision network and the downstream model.
N_PITCH = 16
CLASS_BASE = N_PITCH
N_CLASSES = 3
EOS_ID = 19
VOCAB_SIZE = 20
TASKS = ("transcribe", "classify")


@dataclass(frozen=True)
class MelConfig:
    fft_size: int
    hop: int
    n_mels: int
    sample_rate: int
    f_min: float = 0.0
    f_max: float | None = None

    def __post_init__(self):
        if self.hop > self.fft_size:
            raise ValueError("hop must not exceed fft_size")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.f_max is not None and self.f_max > self.sample_rate / 2:
            raise ValueError("f_max above Nyquist")

    @property
    def fmax(self) -> float:
        return self.sample_rate / 2 if self.f_max is None else self.f_max


def toy_mel_scales(sample_rate: int = 8000) -> list[MelConfig]:
    return [MelConfig(n, h, m, sample_rate) for n, h, m in ((64, 16, 20), (128, 32, 20), (256, 64, 40))]


def paper_mel_scales(sample_rate: int = 48000) -> list[MelConfig]:
    return [MelConfig(n, n // 4, m, sample_rate) for n, m in ((1024, 80), (2048, 100), (4096, 128))]


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.samples.size < 1:
            raise ValueError("empty waveform")
        if not np.isfinite(self.samples).all():
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    def tensor(self, dtype: torch.dtype | None = None) -> torch.Tensor:
        return torch.as_tensor(self.samples, dtype=dtype or torch.get_default_dtype())


# ---------------------------------------------------------------------------
# spectral front-end


def stft_magnitude(w: torch.Tensor, cfg: MelConfig) -> torch.Tensor:
    """Hann-windowed STFT magnitude, reflection-padded by ``fft_size/2`` on both sides.

    ``w`` is ``[T]`` or ``[B, T]``; returns ``[..., fft_size//2 + 1, T//hop + 1]``.
    """
    if w.shape[-1] <= cfg.fft_size // 2:
        raise ValueError(f"waveform of {w.shape[-1]} samples too short for fft_size {cfg.fft_size}")
    window = torch.hann_window(cfg.fft_size, dtype=w.dtype)
    spec = torch.stft(w, cfg.fft_size, cfg.hop, window=window, center=True,
                      pad_mode="reflect", return_complex=True)
    return spec.abs()


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def _filterbank_np(n_fft: int, n_mels: int, sample_rate: int, f_min: float, f_max: float) -> np.ndarray:
    pts = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, mid, hi = pts[m:m + 3]
        fb[m] = np.maximum(0.0, np.minimum((bins - lo) / (mid - lo), (hi - bins) / (hi - mid)))
    return fb


def mel_filterbank(cfg: MelConfig, dtype: torch.dtype | None = None) -> torch.Tensor:
    """Triangular HTK-scale filters, ``[n_mels, fft_size//2 + 1]``."""
    fb = _filterbank_np(cfg.fft_size, cfg.n_mels, cfg.sample_rate, float(cfg.f_min), float(cfg.fmax))
    return torch.as_tensor(fb, dtype=dtype or torch.get_default_dtype())


def mel_project(mag: torch.Tensor, cfg: MelConfig) -> torch.Tensor:
    return mel_filterbank(cfg, mag.dtype) @ mag


def log_mel(w: torch.Tensor, cfg: MelConfig, floor: float = 1e-5) -> torch.Tensor:
    return torch.log(torch.clamp(mel_project(stft_magnitude(w, cfg), cfg), min=floor))


def _match_lengths(x: torch.Tensor, y: torch.Tensor, max_mismatch: int):
    d = x.shape[-1] - y.shape[-1]
    if abs(d) > max_mismatch:
        raise ValueError(f"length mismatch of {abs(d)} samples exceeds {max_mismatch}")
    if d > 0:
        y = torch.nn.functional.pad(y, (0, d))
    elif d < 0:
        x = torch.nn.functional.pad(x, (0, -d))
    return x, y


def multiscale_mel_loss(x: torch.Tensor, x_hat: torch.Tensor, scales: Sequence[MelConfig],
                        floor: float = 1e-5, max_mismatch: int | None = None) -> torch.Tensor:
    """Mean over scales of the mean absolute log-mel difference.

    The shorter signal is zero-padded; a mismatch beyond ``max_mismatch``
    samples (default: the largest hop among ``scales``) raises.
    """
    if not scales:
        raise ValueError("empty scale list")
    if max_mismatch is None:
        max_mismatch = max(s.hop for s in scales)
    x, x_hat = _match_lengths(x, x_hat, max_mismatch)
    total = 0.0
    for cfg in scales:
        total = total + (log_mel(x, cfg, floor) - log_mel(x_hat, cfg, floor)).abs().mean()
    return total / len(scales)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class CorpusConfig:
    sample_rate: int = 8000
    min_symbols: int = 3
    max_symbols: int = 5
    segment_samples: int = 1024
    # fundamentals 100..850 Hz: low enough for the toy decoder to learn in a few hundred steps
    base_freq: float = 100.0
    freq_step: float = 50.0
    harmonics: tuple[float, ...] = (1.0, 0.4, 0.2)
    amp_range: tuple[float, float] = (0.3, 0.6)
    noise_amp: float = 0.1
    fade: int = 64
    # probability of a pause segment after each symbol; pauses keep pause_noise of the noise bed
    pause_prob: float = 0.0
    pause_noise: float = 0.1
    tasks: tuple[str, ...] = TASKS

    def symbol_freq(self, s: int) -> float:
        return self.base_freq + self.freq_step * s


@dataclass
class LabeledUtterance:
    id: str
    waveform: Waveform
    transcript: tuple[int, ...]
    labels: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def sample_rate(self) -> int:
        return self.waveform.sample_rate


def utterance_class(transcript: Sequence[int]) -> int:
    return sum(transcript) % N_CLASSES


def _render(seed: int, index: int, cfg: CorpusConfig) -> LabeledUtterance:
    rng = np.random.default_rng([seed, index])
    n = int(rng.integers(cfg.min_symbols, cfg.max_symbols + 1))
    symbols = tuple(int(s) for s in rng.integers(0, N_PITCH, size=n))
    amp = rng.uniform(*cfg.amp_range)
    L = cfg.segment_samples
    t = np.arange(L) / cfg.sample_rate
    env = np.ones(L)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(cfg.fade) / cfg.fade)
    env[: cfg.fade] = ramp
    env[-cfg.fade:] = ramp[::-1]
    # pauses come from their own stream so pause_prob=0 leaves the corpus unchanged
    pause_rng = np.random.default_rng([seed, index, 1])
    segments, gains = [], []
    for s in symbols:
        f0 = cfg.symbol_freq(s)
        seg = np.zeros(L)
        for k, a in enumerate(cfg.harmonics, start=1):
            if k * f0 < cfg.sample_rate / 2:
                seg += a * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
        segments.append(seg * env)
        gains.append(np.ones(L))
        if cfg.pause_prob > 0 and pause_rng.random() < cfg.pause_prob:
            segments.append(np.zeros(L))
            gains.append(np.full(L, cfg.pause_noise))
    x = amp * np.concatenate(segments) / sum(cfg.harmonics)
    coef = rng.uniform(0.5, 0.95)
    noise = lfilter([1.0 - coef], [1.0, -coef], rng.standard_normal(x.size))
    noise *= cfg.noise_amp / (noise.std() + 1e-12)
    x = np.clip(x + noise * np.concatenate(gains), -1.0, 1.0)
    labels = {}
    if "transcribe" in cfg.tasks:
        labels["transcribe"] = symbols
    if "classify" in cfg.tasks:
        labels["classify"] = (CLASS_BASE + utterance_class(symbols),)
    return LabeledUtterance(f"utt{seed}_{index:05d}", Waveform(x, cfg.sample_rate), symbols, labels)


def synth_corpus(seed: int, n: int, cfg: CorpusConfig = CorpusConfig(),
                 workers: int | None = None) -> list[LabeledUtterance]:
    """Symbol-conditioned harmonic tone sequences plus low-passed noise.

    Utterance ``i`` depends only on ``(seed, i)``, so the result does not depend
    on ``workers`` (default: ``$HOLITOK_THREADS`` or 1).
    """
    if n <= 0:
        raise ValueError("n must be positive")
    workers = workers or int(os.environ.get("HOLITOK_THREADS", "1"))
    if workers <= 1:
        return [_render(seed, i, cfg) for i in range(n)]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda i: _render(seed, i, cfg), range(n)))


def stack_batch(utts: Sequence[LabeledUtterance], length: int, dtype: torch.dtype | None = None) -> torch.Tensor:
    """``[B, length]`` batch: each utterance truncated or zero-padded from its start."""
    out = torch.zeros(len(utts), length, dtype=dtype or torch.get_default_dtype())
    for i, u in enumerate(utts):
        s = u.waveform.samples[:length]
        out[i, : s.size] = torch.as_tensor(s, dtype=out.dtype)
    return out


# ---------------------------------------------------------------------------
# PCM files


def write_pcm(path: str | Path, w: Waveform, **meta) -> None:
    """Little-endian float32 samples plus a ``<path>.json`` sidecar."""
    path = Path(path)
    w.samples.astype("<f4").tofile(path)
    info = {"sample_rate": w.sample_rate, "n_samples": len(w), **meta}
    Path(f"{path}.json").write_text(json.dumps(info, indent=2))


def read_pcm(path: str | Path, sample_rate: int | None = None) -> Waveform:
    path = Path(path)
    side = Path(f"{path}.json")
    if side.exists():
        sr = json.loads(side.read_text())["sample_rate"]
    elif sample_rate is not None:
        sr = sample_rate
    else:
        raise ValueError(f"{path}: no sidecar manifest and no sample rate given")
    return Waveform(np.fromfile(path, dtype="<f4"), int(sr))


def export_corpus(utts: Sequence[LabeledUtterance], directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for u in utts:
        fname = f"{u.id}.f32"
        u.waveform.samples.astype("<f4").tofile(directory / fname)
        entries.append({
            "id": u.id, "file": fname, "sample_rate": u.sample_rate,
            "n_samples": len(u.waveform), "transcript": list(u.transcript),
            "labels": {k: list(v) for k, v in u.labels.items()},
        })
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=1))
    return manifest


def import_corpus(directory: str | Path) -> list[LabeledUtterance]:
    directory = Path(directory)
    out = []
    for e in json.loads((directory / "manifest.json").read_text()):
        samples = np.fromfile(directory / e["file"], dtype="<f4")
        if samples.size != e["n_samples"]:
            raise ValueError(f"{e['file']}: expected {e['n_samples']} samples, found {samples.size}")
        out.append(LabeledUtterance(
            e["id"], Waveform(samples, e["sample_rate"]), tuple(e["transcript"]),
            {k: tuple(v) for k, v in e["labels"].items()},
        ))
    return out


def corpus_config_dict(cfg: CorpusConfig) -> dict:
    return asdict(cfg)
