"""Latent enrichment: frozen teachers, frame alignment, cosine distillation and
the task-conditioned supervision network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import Transformer, causal_mask, sinusoidal
from .dsp import EOS_ID, TASKS, VOCAB_SIZE
from .numerics import LEAKY_SLOPE


def _freeze(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) / max(1, p[0].numel()) ** 0.5)


class FrameTeacher(nn.Module):
    """Frozen random strided conv net: 8 kHz waveform -> 50 Hz, 32-dim frames."""

    def __init__(self, seed: int = 1234, dim: int = 32, strides: Sequence[int] = (4, 5, 8),
                 channels: Sequence[int] = (16, 32)):
        super().__init__()
        self.seed = seed
        widths = [1, *channels, dim]
        self.convs = nn.ModuleList(
            nn.Conv1d(widths[i], widths[i + 1], 2 * s, stride=s)
            for i, s in enumerate(strides)
        )
        self.strides = list(strides)
        _freeze(self, seed)

    @property
    def hop(self) -> int:
        n = 1
        for s in self.strides:
            n *= s
        return n

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``[B, T]`` -> ``[B, ceil(T/hop), dim]``."""
        n_out = -(-x.shape[-1] // self.hop)
        h = F.pad(x, (0, n_out * self.hop - x.shape[-1])).unsqueeze(1)
        for i, conv in enumerate(self.convs):
            s = self.strides[i]
            n = h.shape[-1]
            total = s * -(-n // s) + s - n
            h = conv(F.pad(h, (s // 2, total - s // 2)))
            if i < len(self.convs) - 1:
                h = torch.tanh(h)
        return h.transpose(1, 2)


class UtteranceTeacher(nn.Module):
    """Frozen random conv net, mean-pooled over time and unit-normalised."""

    def __init__(self, seed: int = 4321, dim: int = 16, channels: Sequence[int] = (16, 32)):
        super().__init__()
        self.seed = seed
        self.convs = nn.ModuleList([
            nn.Conv1d(1, channels[0], 16, stride=8),
            nn.Conv1d(channels[0], channels[1], 8, stride=4),
            nn.Conv1d(channels[1], dim, 4, stride=2),
        ])
        _freeze(self, seed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x.unsqueeze(1)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.leaky_relu(h, LEAKY_SLOPE)
        return F.normalize(h.mean(-1), dim=-1)


class StudentHead(nn.Sequential):
    def __init__(self, d_in: int, d_out: int):
        super().__init__(nn.Linear(d_in, 4 * d_in), nn.GELU(), nn.Linear(4 * d_in, d_out))


def align_frames(student: torch.Tensor, target_T: int) -> torch.Tensor:
    """Linear interpolation along time (endpoints aligned) to ``target_T`` frames.

    ``student`` is ``[T, D]`` or ``[B, T, D]``.
    """
    if target_T < 1:
        raise ValueError("target_T must be >= 1")
    if student.shape[-2] == target_T:
        return student
    unbatched = student.dim() == 2
    s = student.unsqueeze(0) if unbatched else student
    if s.shape[1] == 1 or target_T == 1:
        out = s[:, :1].expand(-1, target_T, -1) if s.shape[1] == 1 else s[:, :1]
    else:
        out = F.interpolate(s.transpose(1, 2), size=target_T, mode="linear", align_corners=True).transpose(1, 2)
    return out[0] if unbatched else out


def _cosine(a: torch.Tensor, b: torch.Tensor, what: str) -> torch.Tensor:
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    bad = ((na < 1e-12) | (nb < 1e-12)).nonzero()
    if len(bad):
        raise ValueError(f"zero-norm vector in {what} at index {bad[0].tolist()}")
    return (a * b).sum(-1) / (na * nb)


@dataclass
class TeacherSpec:
    name: str
    level: str  # "frame" or "utterance"
    weight: float


class TeacherBundle(nn.Module):
    """Frozen teachers ``F_r``, aligners ``A_r``, student heads ``H_r`` and weights ``lambda_r``."""

    def __init__(self, latent_dim: int, frame_seed: int = 1234, utt_seed: int = 4321,
                 frame_weight: float = 1.0, utt_weight: float = 1.0, frame_dim: int = 32, utt_dim: int = 16):
        super().__init__()
        if frame_weight < 0 or utt_weight < 0:
            raise ValueError("teacher weights must be non-negative")
        self.teachers = nn.ModuleDict({
            "frame": FrameTeacher(frame_seed, frame_dim),
            "utterance": UtteranceTeacher(utt_seed, utt_dim),
        })
        self.heads = nn.ModuleDict({
            "frame": StudentHead(latent_dim, frame_dim),
            "utterance": StudentHead(latent_dim, utt_dim),
        })
        self.specs = {
            "frame": TeacherSpec("frame", "frame", frame_weight),
            "utterance": TeacherSpec("utterance", "utterance", utt_weight),
        }

    def config(self) -> dict:
        return {
            "frame_seed": self.teachers["frame"].seed, "utt_seed": self.teachers["utterance"].seed,
            "frame_weight": self.specs["frame"].weight, "utt_weight": self.specs["utterance"].weight,
        }

    @torch.no_grad()
    def targets(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        return {k: t(x).detach() for k, t in self.teachers.items()}

    def predict(self, z: torch.Tensor, name: str, target_T: int | None = None) -> torch.Tensor:
        if self.specs[name].level == "frame":
            return self.heads[name](align_frames(z, target_T))
        return self.heads[name](z.mean(dim=-2))


def distill_loss(z: torch.Tensor, bundle: TeacherBundle, x: torch.Tensor | None = None,
                 targets: dict[str, torch.Tensor] | None = None,
                 predictions: dict[str, torch.Tensor] | None = None):
    """``sum_r lambda_r * (1 - cos(H_r(A_r(z)), sg(F_r(x))))``.

    Frame-level cosines are computed per frame and averaged over time (and
    batch). Returns ``(total, {name: unweighted term})``. ``predictions`` may
    override the head outputs.
    """
    if targets is None:
        targets = bundle.targets(x)
    total = 0.0
    terms = {}
    for name, spec in bundle.specs.items():
        tgt = targets[name].detach()
        if predictions is not None and name in predictions:
            pred = predictions[name]
        else:
            pred = bundle.predict(z, name, tgt.shape[-2] if spec.level == "frame" else None)
        terms[name] = 1.0 - _cosine(pred, tgt, f"{name} distillation").mean()
        total = total + spec.weight * terms[name]
    return total, terms


# ---------------------------------------------------------------------------
# supervision network


class SupervisionNet(nn.Module):
    """Latent encoder + task embedding prefix + causal LM decoder over the symbol vocabulary."""

    def __init__(self, latent_dim: int, width: int = 64, enc_layers: int = 2, dec_layers: int = 2,
                 heads: int = 4, vocab: int = VOCAB_SIZE, tasks: Sequence[str] = TASKS,
                 causal_encoder: bool = False):
        super().__init__()
        self.tasks = list(tasks)
        self.vocab = vocab
        self.width = width
        self.causal_encoder = causal_encoder
        self.inp = nn.Linear(latent_dim, width)
        self.encoder = Transformer(width, enc_layers, heads)
        self.task_emb = nn.Embedding(len(self.tasks), width)
        self.tok_emb = nn.Embedding(vocab, width)
        self.decoder = Transformer(width, dec_layers, heads)
        self.head = nn.Linear(width, vocab)

    def encode(self, z: torch.Tensor) -> torch.Tensor:
        """``[B, T, latent_dim]`` -> ``[B, T, width]`` (causal when configured)."""
        T = z.shape[-2]
        h = self.inp(z) + sinusoidal(torch.arange(T), self.width)
        return self.encoder(h, causal_mask(T) if self.causal_encoder else None)

    def task_ids(self, tasks: Sequence[str]) -> torch.Tensor:
        try:
            return torch.tensor([self.tasks.index(t) for t in tasks])
        except ValueError as e:
            raise ValueError(f"unknown task in {list(tasks)}") from e

    def forward(self, z: torch.Tensor, tasks: Sequence[str], y_in: torch.Tensor) -> torch.Tensor:
        """Logits ``[B, L+1, vocab]`` predicting ``y_1..y_L, <eos>`` from prefix + ``y_in`` (``[B, L]``)."""
        feats = self.encode(z)
        prefix = torch.cat([self.task_emb(self.task_ids(tasks)).unsqueeze(1), feats], dim=1)
        seq = torch.cat([prefix, self.tok_emb(y_in)], dim=1)
        n = seq.shape[1]
        seq = seq + sinusoidal(torch.arange(n), self.width)
        h = self.decoder(seq, causal_mask(n))
        return self.head(h[:, prefix.shape[1] - 1:])


def _pad_targets(ys: Sequence[Sequence[int]], vocab: int):
    for y in ys:
        for s in y:
            if not 0 <= s < vocab or s == EOS_ID:
                raise ValueError(f"symbol {s} outside the vocabulary")
    L = max(len(y) for y in ys)
    y_in = torch.zeros(len(ys), L, dtype=torch.long)
    tgt = torch.full((len(ys), L + 1), -100, dtype=torch.long)
    for i, y in enumerate(ys):
        y_in[i, : len(y)] = torch.tensor(y, dtype=torch.long)
        tgt[i, : len(y) + 1] = torch.tensor([*y, EOS_ID], dtype=torch.long)
    return y_in, tgt


def supervision_loss(z: torch.Tensor, tasks: str | Sequence[str], ys, net: SupervisionNet) -> torch.Tensor:
    """Teacher-forced ``-log p(y + <eos> | z, task)``, mean over target positions."""
    if z.dim() == 2:
        z, tasks, ys = z.unsqueeze(0), [tasks], [ys]
    elif isinstance(tasks, str):
        tasks = [tasks] * z.shape[0]
    y_in, tgt = _pad_targets(ys, net.vocab)
    logits = net(z, tasks, y_in)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=-100)


@torch.no_grad()
def greedy_decode(net: SupervisionNet, z: torch.Tensor, task: str, max_len: int = 16) -> list[int]:
    y: list[int] = []
    for _ in range(max_len):
        logits = net(z.unsqueeze(0), [task], torch.tensor([y], dtype=torch.long).reshape(1, -1))
        nxt = int(logits[0, -1].argmax())
        if nxt == EOS_ID:
            break
        y.append(nxt)
    return y
