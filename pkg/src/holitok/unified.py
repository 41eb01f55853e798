"""Downstream AR+DiT model over tokenizer latents: patching, template layouts,
a causal backbone with a text head and an EOS head, and a flow-matching DiT head
that predicts one latent patch at a time."""

from __future__ import annotations

import copy
import math
import random
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import MLP, Attention, Transformer, causal_mask, sinusoidal
from .dsp import EOS_ID, VOCAB_SIZE
from .enrich import SupervisionNet
from .numerics import NonFiniteError, ParameterSet

TEXT_VOCAB = VOCAB_SIZE
MARKERS = {
    "[text]": 20, "[text2speech]": 21, "[speech]": 22, "[speech2text]": 23,
    "[desc]": 24, "<loss>": 25, "</loss>": 26,
}
AUDIO_ID = 27
INPUT_VOCAB = 28
TASK_MARKER = {"tts": "[text2speech]", "desc_tts": "[text2speech]", "asr": "[speech2text]"}
_NAMES = {v: k for k, v in MARKERS.items()} | {EOS_ID: "<eos>", AUDIO_ID: "A"}


class LayoutError(ValueError):
    pass


# ---------------------------------------------------------------------------
# patches


@dataclass
class PatchSequence:
    patches: torch.Tensor  # [K, P, d]
    mask: torch.Tensor  # [K, P] bool, True on real frames
    n_frames: int

    @property
    def K(self) -> int:
        return self.patches.shape[0]

    @property
    def P(self) -> int:
        return self.patches.shape[1]

    @property
    def n_pad(self) -> int:
        return self.K * self.P - self.n_frames


def patchify(z: torch.Tensor, P: int) -> PatchSequence:
    """``[T, d]`` -> ``K = ceil(T/P)`` patches, the last one right-padded with zeros."""
    if P < 1:
        raise ValueError(f"patch size must be >= 1, got {P}")
    T, d = z.shape
    if T < 1:
        raise ValueError("empty latent sequence")
    K = -(-T // P)
    padded = F.pad(z, (0, 0, 0, K * P - T))
    mask = torch.zeros(K * P, dtype=torch.bool)
    mask[:T] = True
    return PatchSequence(padded.reshape(K, P, d), mask.reshape(K, P), T)


def unpatchify(ps: PatchSequence) -> torch.Tensor:
    return ps.patches.reshape(-1, ps.patches.shape[-1])[: ps.n_frames]


# ---------------------------------------------------------------------------
# layouts


@dataclass
class SequenceLayout:
    task: str
    ids: torch.Tensor  # [N] long; audio positions hold AUDIO_ID
    loss_mask: torch.Tensor  # [N] bool
    audio_pos: torch.Tensor  # [K] long
    patches: PatchSequence | None
    text: tuple[int, ...]
    desc: tuple[int, ...] = ()

    def __len__(self) -> int:
        return self.ids.numel()

    def trace(self) -> str:
        out, k = [], 0
        for i, t in enumerate(self.ids.tolist()):
            if t == AUDIO_ID:
                k += 1
                tok = f"A{k}"
            else:
                tok = _NAMES.get(t, str(t))
            out.append(f"{tok}*" if self.loss_mask[i] else tok)
        return " ".join(out)

    def text_targets(self) -> torch.Tensor:
        """Positions inside the loss span that hold text-vocabulary tokens."""
        return (self.loss_mask & (self.ids < TEXT_VOCAB)).nonzero().flatten()

    def validate(self) -> "SequenceLayout":
        ids = self.ids.tolist()
        n_task = sum(ids.count(MARKERS[m]) for m in ("[text2speech]", "[speech2text]"))
        if n_task != 1:
            raise LayoutError(f"expected exactly one task marker, found {n_task}")
        if ids.count(MARKERS["<loss>"]) > 1 or ids.count(MARKERS["</loss>"]) > 1:
            raise LayoutError("more than one loss span")
        if MARKERS["<loss>"] in ids:
            start = ids.index(MARKERS["<loss>"])
            end = ids.index(MARKERS["</loss>"]) if MARKERS["</loss>"] in ids else len(ids)
            inside = torch.zeros(len(ids), dtype=torch.bool)
            inside[start + 1:end] = True
            if not torch.equal(inside, self.loss_mask):
                raise LayoutError("loss mask does not match the <loss> span")
        if self.patches is not None and len(self.audio_pos) > self.patches.K:
            raise LayoutError("more audio positions than patches")
        return self


def _check_symbols(seq: Sequence[int], what: str) -> None:
    for s in seq:
        if not 0 <= s < TEXT_VOCAB or s == EOS_ID:
            raise LayoutError(f"{what} symbol {s} outside the text vocabulary")


def build_layout(task: str, text: Sequence[int] = (), patches: PatchSequence | None = None,
                 desc: Sequence[int] = (), prompt_only: bool = False) -> SequenceLayout:
    """Token stream for one example.

    tts: ``[text] t [text2speech] <loss> a <eos> </loss>``;
    asr: ``[speech] a [speech2text] <loss> t <eos> </loss>``;
    desc_tts: ``[desc] d`` followed by the tts stream. With ``prompt_only`` the
    stream stops right after ``<loss>`` (generation prompts).
    """
    if task not in TASK_MARKER:
        raise LayoutError(f"unknown task {task!r}")
    text = tuple(int(s) for s in text)
    desc = tuple(int(s) for s in desc)
    K = patches.K if patches is not None else 0
    gen = task in ("tts", "desc_tts")
    if (gen or not prompt_only) and not text:
        raise LayoutError(f"{task} layout needs a non-empty text")
    if (not gen or not prompt_only) and K == 0:
        raise LayoutError(f"{task} layout needs audio patches")
    _check_symbols(text, "text")
    ids: list[int] = []
    if task == "desc_tts":
        if not desc:
            raise LayoutError("desc_tts layout needs a non-empty description")
        _check_symbols(desc, "description")
        ids += [MARKERS["[desc]"], *desc]
    if gen:
        ids += [MARKERS["[text]"], *text, MARKERS["[text2speech]"], MARKERS["<loss>"]]
        span = [] if prompt_only else [AUDIO_ID] * K + [EOS_ID]
    else:
        ids += [MARKERS["[speech]"], *[AUDIO_ID] * K, MARKERS["[speech2text]"], MARKERS["<loss>"]]
        span = [] if prompt_only else [*text, EOS_ID]
    start = len(ids)
    ids += span
    mask = torch.zeros(len(ids) + (0 if prompt_only else 1), dtype=torch.bool)
    mask[start:len(ids)] = True
    if not prompt_only:
        ids.append(MARKERS["</loss>"])
    ids_t = torch.tensor(ids, dtype=torch.long)
    audio_pos = (ids_t == AUDIO_ID).nonzero().flatten()
    return SequenceLayout(task, ids_t, mask, audio_pos, patches, text if not (not gen and prompt_only) else (),
                          desc).validate()


def append_audio(layout: SequenceLayout, patches: PatchSequence) -> SequenceLayout:
    """Extend a generation prompt by one audio position per new patch in ``patches``."""
    n_new = patches.K - len(layout.audio_pos)
    ids = torch.cat([layout.ids, torch.full((n_new,), AUDIO_ID, dtype=torch.long)])
    mask = torch.cat([layout.loss_mask, torch.ones(n_new, dtype=torch.bool)])
    return SequenceLayout(layout.task, ids, mask, (ids == AUDIO_ID).nonzero().flatten(), patches,
                          layout.text, layout.desc)


def append_text(layout: SequenceLayout, token: int) -> SequenceLayout:
    ids = torch.cat([layout.ids, torch.tensor([token], dtype=torch.long)])
    mask = torch.cat([layout.loss_mask, torch.ones(1, dtype=torch.bool)])
    return SequenceLayout(layout.task, ids, mask, layout.audio_pos, layout.patches, layout.text, layout.desc)


# ---------------------------------------------------------------------------
# losses


def understanding_loss(layout: SequenceLayout, logits: torch.Tensor) -> torch.Tensor:
    """Next-token cross entropy over the text positions of the loss span."""
    pos = layout.text_targets()
    if pos.numel() == 0:
        raise LayoutError("layout has an empty text loss span")
    return F.cross_entropy(logits[pos - 1], layout.ids[pos])


def fm_loss(v: torch.Tensor, z: torch.Tensor, noise: torch.Tensor, mask: torch.Tensor | None = None,
            t: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error between predicted velocity ``v`` and ``z - noise`` over real frames.

    Shapes ``[..., P, d]``; ``mask`` is ``[..., P]``.
    """
    if t is not None and ((t < 0) | (t > 1)).any():
        raise ValueError("flow time outside [0, 1]")
    err = ((v - (z - noise)) ** 2).mean(-1)
    if mask is None:
        return err.mean()
    m = mask.to(err.dtype)
    return (err * m).sum() / m.sum()


def eos_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross entropy on one stop logit per patch; logits are clipped to +-20."""
    if logits.shape != labels.shape:
        raise ValueError(f"eos logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    return F.binary_cross_entropy_with_logits(logits.clamp(-20, 20), labels.to(logits.dtype))


def interpolate(z: torch.Tensor, noise: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """``(1 - t) * noise + t * z`` with ``t`` broadcast over the trailing ``[P, d]``."""
    t = t.reshape(*t.shape, 1, 1)
    return (1 - t) * noise + t * z


@torch.no_grad()
def sample_patch(velocity: Callable[[torch.Tensor, float], torch.Tensor], shape: Sequence[int],
                 n_steps: int = 16, seed: int | None = None, noise: torch.Tensor | None = None,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    """Euler integration of ``dz/dt = velocity(z, t)`` from a Gaussian draw at t=0 to t=1."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if noise is None:
        if generator is None:
            generator = torch.Generator().manual_seed(0 if seed is None else seed)
        noise = torch.randn(tuple(shape), generator=generator)
    z = noise.clone()
    dt = 1.0 / n_steps
    for i in range(n_steps):
        z = z + dt * velocity(z, i * dt)
        if not torch.isfinite(z).all():
            raise NonFiniteError(f"non-finite state at Euler step {i}")
    return z


# ---------------------------------------------------------------------------
# modules


@dataclass
class UnifiedConfig:
    latent_dim: int = 8
    patch: int = 4
    width: int = 128
    layers: int = 4
    heads: int = 4
    dit_width: int = 128
    dit_layers: int = 4
    dit_heads: int = 4
    encoder_width: int = 128
    encoder_layers: int = 2
    mode: str = "patch_encoder"  # or "mean_pool_linear"
    fm_steps: int = 16
    eos_threshold: float = 0.5
    k_max: int = 128
    lambda_eos: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def paper_unified_config(latent_dim: int = 128) -> UnifiedConfig:
    """Reference DiT dimensions; the backbone stays small (no pretrained LLM here)."""
    return UnifiedConfig(latent_dim=latent_dim, dit_width=1024, dit_layers=18, dit_heads=16,
                         encoder_layers=8)


class PatchEncoder(nn.Module):
    """Small transformer over the frames of each patch, mean-pooled to one embedding."""

    def __init__(self, latent_dim: int, patch: int, width: int, layers: int, out_dim: int, heads: int = 4):
        super().__init__()
        self.inp = nn.Linear(latent_dim, width)
        self.pos = nn.Parameter(0.02 * torch.randn(patch, width))
        self.body = Transformer(width, layers, heads)
        self.out = nn.Linear(width, out_dim)

    def forward(self, patches: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """``[K, P, d]`` patches -> ``[K, out_dim]``."""
        h = self.inp(patches) + self.pos
        attn = mask.unsqueeze(1).expand(-1, mask.shape[1], -1).unsqueeze(1)
        h = self.body(h, attn)
        m = mask.unsqueeze(-1).to(h.dtype)
        return self.out((h * m).sum(1) / m.sum(1))


class SemanticEncoder(nn.Module):
    """The latent encoder of a (causal) supervision network, reused as a frontend."""

    def __init__(self, net: SupervisionNet):
        super().__init__()
        if not net.causal_encoder:
            raise ValueError("mean_pool_linear mode requires a causal supervision encoder")
        self.width = net.width
        self.inp = copy.deepcopy(net.inp)
        self.encoder = copy.deepcopy(net.encoder)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        T = z.shape[-2]
        h = self.inp(z) + sinusoidal(torch.arange(T), self.width)
        return self.encoder(h, causal_mask(T))


class MeanPoolLinear(nn.Module):
    """Mean of semantic features over each patch, then one linear map."""

    def __init__(self, semantic: SemanticEncoder | None, feat_dim: int, out_dim: int):
        super().__init__()
        self.semantic = semantic
        self.proj = nn.Linear(feat_dim, out_dim)

    def init_identity(self) -> "MeanPoolLinear":
        with torch.no_grad():
            self.proj.weight.copy_(torch.eye(*self.proj.weight.shape))
            self.proj.bias.zero_()
        return self

    def pool(self, feats: PatchSequence) -> torch.Tensor:
        m = feats.mask.unsqueeze(-1).to(feats.patches.dtype)
        return self.proj((feats.patches * m).sum(1) / m.sum(1))

    def forward(self, z_raw: torch.Tensor, P: int) -> torch.Tensor:
        """Raw latent frames ``[T, d]`` -> one embedding per patch."""
        feats = self.semantic(z_raw.unsqueeze(0))[0]
        return self.pool(patchify(feats, P))


class Backbone(nn.Module):
    """Causal transformer over mixed token / audio-patch embeddings."""

    def __init__(self, width: int, layers: int, heads: int):
        super().__init__()
        self.width = width
        self.tok = nn.Embedding(INPUT_VOCAB, width)
        self.body = Transformer(width, layers, heads)
        self.lm_head = nn.Linear(width, TEXT_VOCAB)
        self.eos_head = nn.Linear(width, 1)

    def embed(self, ids: torch.Tensor, audio_emb: torch.Tensor | None, audio_pos: torch.Tensor) -> torch.Tensor:
        x = self.tok(ids)
        if len(audio_pos):
            if audio_emb is None or audio_emb.shape[0] < len(audio_pos):
                raise LayoutError("missing audio embeddings for audio positions")
            x = x.index_put((audio_pos,), audio_emb[: len(audio_pos)])
        return x + sinusoidal(torch.arange(ids.numel()), self.width)

    def forward(self, embeds: Sequence[torch.Tensor]):
        """Right-padded batch of ``[N_i, width]`` inputs -> per-example ``(hidden, logits)``."""
        n = max(e.shape[0] for e in embeds)
        x = torch.stack([F.pad(e, (0, 0, 0, n - e.shape[0])) for e in embeds])
        h = self.body(x, causal_mask(n))
        logits = self.lm_head(h)
        return [(h[i, : e.shape[0]], logits[i, : e.shape[0]]) for i, e in enumerate(embeds)]


class DiTBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width, elementwise_affine=False)
        self.attn = Attention(width, heads)
        self.ln2 = nn.LayerNorm(width, elementwise_affine=False)
        self.mlp = MLP(width, 4 * width)
        self.ada = nn.Linear(width, 6 * width)

    def forward(self, x, c, cond, mask):
        s1, g1, b1, s2, g2, b2 = self.ada(c).chunk(6, dim=-1)
        h = self.ln1(x) * (1 + s1) + b1
        x = x + g1 * self.attn(h, torch.cat([cond, h], dim=1), mask)
        return x + g2 * self.mlp(self.ln2(x) * (1 + s2) + b2)


class DiT(nn.Module):
    """Velocity predictor for one latent patch.

    Queries are the ``P`` noisy frames of a patch; the flow time enters every
    block through adaptive layer norm. Keys add the conditioning prefix: the
    backbone states ``h_j`` for ``j <= k`` and embeddings of clean patches
    ``z_j`` for ``j < k`` from the same sequence.
    """

    def __init__(self, latent_dim: int, patch: int, width: int, layers: int, heads: int, cond_dim: int):
        super().__init__()
        self.width = width
        self.inp = nn.Linear(latent_dim, width)
        self.frame_pos = nn.Parameter(0.02 * torch.randn(patch, width))
        self.t_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.h_proj = nn.Linear(cond_dim, width)
        self.z_proj = nn.Linear(patch * latent_dim, width)
        self.kind = nn.Parameter(0.02 * torch.randn(2, width))
        self.blocks = nn.ModuleList(DiTBlock(width, heads) for _ in range(layers))
        self.ln_out = nn.LayerNorm(width, elementwise_affine=False)
        self.ada_out = nn.Linear(width, 2 * width)
        self.out = nn.Linear(width, latent_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @staticmethod
    def attention_mask(q_group, q_k, c_group, c_k) -> torch.Tensor:
        same = q_group[:, None] == c_group[None, :]
        h_ok = same & (c_k[None, :] <= q_k[:, None])
        z_ok = same & (c_k[None, :] < q_k[:, None])
        return h_ok, z_ok

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, q_group: torch.Tensor, q_k: torch.Tensor,
                h: torch.Tensor, z_clean: torch.Tensor, c_group: torch.Tensor, c_k: torch.Tensor) -> torch.Tensor:
        """``z_t [Mq, P, d]`` at times ``t [Mq]`` -> velocity ``[Mq, P, d]``.

        ``h [Mc, cond_dim]`` and ``z_clean [Mc, P, d]`` carry the conditioning,
        indexed by ``(c_group, c_k)``; query patch ``(g, k)`` sees ``h`` at
        ``(g, j <= k)`` and ``z_clean`` at ``(g, j < k)`` only.
        """
        Mq, P, d = z_t.shape
        Mc = h.shape[0]
        pos_c = sinusoidal(c_k, self.width)
        cond = torch.cat([self.h_proj(h) + self.kind[0] + pos_c,
                          self.z_proj(z_clean.reshape(Mc, -1)) + self.kind[1] + pos_c])
        x = (self.inp(z_t) + self.frame_pos + sinusoidal(q_k, self.width)[:, None]).reshape(1, Mq * P, -1)
        c = self.t_mlp(sinusoidal(t * 1000.0, self.width))
        c = c.repeat_interleave(P, dim=0).unsqueeze(0)
        h_ok, z_ok = self.attention_mask(q_group, q_k, c_group, c_k)
        own = torch.eye(Mq, dtype=torch.bool).repeat_interleave(P, 0).repeat_interleave(P, 1)
        mask = torch.cat([h_ok.repeat_interleave(P, 0), z_ok.repeat_interleave(P, 0), own], dim=1)
        cond = cond.unsqueeze(0)
        for blk in self.blocks:
            x = blk(x, c, cond, mask)
        s, b = self.ada_out(c).chunk(2, dim=-1)
        return self.out(self.ln_out(x) * (1 + s) + b).reshape(Mq, P, d)


# ---------------------------------------------------------------------------
# the unified model


@dataclass
class UnifiedExample:
    text: tuple[int, ...]
    z: torch.Tensor  # raw latents [T, d]
    desc: tuple[int, ...] = ()
    id: str = ""


class UnifiedModel(nn.Module):
    def __init__(self, cfg: UnifiedConfig, semantic: SupervisionNet | None = None):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.width, cfg.layers, cfg.heads)
        if cfg.mode == "patch_encoder":
            self.patch_encoder = PatchEncoder(cfg.latent_dim, cfg.patch, cfg.encoder_width,
                                              cfg.encoder_layers, cfg.width)
        elif cfg.mode == "mean_pool_linear":
            if semantic is None:
                raise ValueError("mean_pool_linear mode needs the tokenizer's supervision network")
            enc = SemanticEncoder(semantic)
            self.patch_encoder = MeanPoolLinear(enc, enc.width, cfg.width)
        else:
            raise ValueError(f"unknown patch mode {cfg.mode!r}")
        self.dit = DiT(cfg.latent_dim, cfg.patch, cfg.dit_width, cfg.dit_layers, cfg.dit_heads, cfg.width)
        self.register_buffer("z_mean", torch.zeros(cfg.latent_dim))
        self.register_buffer("z_scale", torch.ones(()))

    # latent normalisation (per-dimension mean, one global scale)
    def fit_normalizer(self, zs: Sequence[torch.Tensor]) -> "UnifiedModel":
        allz = torch.cat(list(zs)).to(self.z_mean.dtype)
        self.z_mean.copy_(allz.mean(0))
        self.z_scale.fill_(float((allz - allz.mean(0)).std()) or 1.0)
        return self

    def normalize(self, z: torch.Tensor) -> torch.Tensor:
        return (z - self.z_mean) / self.z_scale

    def denormalize(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.z_scale + self.z_mean

    def patch_encode(self, ps: PatchSequence) -> torch.Tensor:
        """Normalised patches -> one backbone-width embedding per patch."""
        if isinstance(self.patch_encoder, PatchEncoder):
            return self.patch_encoder(ps.patches, ps.mask)
        return self.patch_encoder(self.denormalize(unpatchify(ps)), ps.P)

    def run(self, layouts: Sequence[SequenceLayout]):
        embeds = []
        for lay in layouts:
            audio = self.patch_encode(lay.patches) if len(lay.audio_pos) else None
            embeds.append(self.backbone.embed(lay.ids, audio, lay.audio_pos))
        return self.backbone(embeds)

    def example_layout(self, ex: UnifiedExample, task: str) -> SequenceLayout:
        ps = patchify(self.normalize(ex.z), self.cfg.patch)
        return build_layout(task, ex.text, ps, ex.desc if task == "desc_tts" else ())

    def losses(self, layouts: Sequence[SequenceLayout], generator: torch.Generator | None = None,
               noise: Sequence[torch.Tensor] | None = None, times: Sequence[torch.Tensor] | None = None):
        """Per-batch ``{"und", "fm", "eos", "total"}``; absent task types give no term."""
        outs = self.run(layouts)
        und, fm_items = [], []
        for i, (lay, (h, logits)) in enumerate(zip(layouts, outs)):
            if lay.task == "asr":
                und.append(understanding_loss(lay, logits))
            else:
                fm_items.append((i, lay, h))
        terms: dict[str, torch.Tensor] = {}
        total = 0.0
        if und:
            terms["und"] = torch.stack(und).mean()
            total = total + terms["und"]
        if fm_items:
            zs, eps, ts, masks, hs, groups, ks, eos_l, eos_y = [], [], [], [], [], [], [], [], []
            for j, (i, lay, h) in enumerate(fm_items):
                ps = lay.patches
                K = ps.K
                e = noise[j] if noise is not None else torch.randn(ps.patches.shape, generator=generator,
                                                                   dtype=ps.patches.dtype)
                t = times[j] if times is not None else torch.rand(K, generator=generator, dtype=ps.patches.dtype)
                zs.append(ps.patches)
                eps.append(e)
                ts.append(t)
                masks.append(ps.mask)
                hs.append(h[lay.audio_pos - 1])
                groups.append(torch.full((K,), j))
                ks.append(torch.arange(K))
                eos_l.append(self.backbone.eos_head(h[lay.audio_pos]).squeeze(-1))
                y = torch.zeros(K)
                y[-1] = 1
                eos_y.append(y)
            z, e, t = torch.cat(zs), torch.cat(eps), torch.cat(ts)
            g, k = torch.cat(groups), torch.cat(ks)
            if ((t < 0) | (t > 1)).any():
                raise ValueError("flow time outside [0, 1]")
            v = self.dit(interpolate(z, e, t), t, g, k, torch.cat(hs), z, g, k)
            terms["fm"] = fm_loss(v, z, e, torch.cat(masks))
            terms["eos"] = eos_loss(torch.cat(eos_l), torch.cat(eos_y))
            total = total + terms["fm"] + self.cfg.lambda_eos * terms["eos"]
        terms["total"] = total
        return terms

    @torch.no_grad()
    def transcribe(self, z: torch.Tensor, max_len: int = 32) -> list[int]:
        """Greedy text decoding from raw latents ``[T, d]``."""
        ps = patchify(self.normalize(z), self.cfg.patch)
        lay = build_layout("asr", (), ps, prompt_only=True)
        out: list[int] = []
        for _ in range(max_len):
            _, logits = self.run([lay])[0]
            nxt = int(logits[-1].argmax())
            if nxt == EOS_ID:
                break
            out.append(nxt)
            lay = append_text(lay, nxt)
        return out

    @torch.no_grad()
    def generate(self, text: Sequence[int], desc: Sequence[int] = (), seed: int = 0, n_steps: int | None = None,
                 k_max: int | None = None, return_patches: bool = False):
        """Autoregressive patch sampling; returns raw latents ``[K*P, d]``."""
        cfg = self.cfg
        n_steps = n_steps or cfg.fm_steps
        k_max = k_max or cfg.k_max
        gen = torch.Generator().manual_seed(seed)
        lay = build_layout("desc_tts" if desc else "tts", text, None, desc, prompt_only=True)
        P, d = cfg.patch, cfg.latent_dim
        dtype = self.z_mean.dtype
        done = torch.zeros(0, P, d, dtype=dtype)
        hs = []
        for k in range(k_max):
            h, _ = self.run([lay])[0]
            if k > 0:
                p_stop = torch.sigmoid(self.backbone.eos_head(h[-1])).item()
                if p_stop > cfg.eos_threshold:
                    break
            hs.append(h[-1])
            H = torch.stack(hs)
            z_ctx = torch.cat([done, torch.zeros(1, P, d, dtype=dtype)])
            ks = torch.arange(k + 1)
            g = torch.zeros(k + 1, dtype=torch.long)

            def velocity(zt, t):
                tt = torch.full((1,), t, dtype=dtype)
                return self.dit(zt, tt, g[-1:], ks[-1:], H, z_ctx, g, ks)

            patch = sample_patch(velocity, (1, P, d), n_steps, generator=gen,
                                 noise=torch.randn(1, P, d, generator=gen, dtype=dtype))
            done = torch.cat([done, patch])
            ps = PatchSequence(done, torch.ones(done.shape[:2], dtype=torch.bool), done.shape[0] * P)
            lay = append_audio(lay, ps)
        z = self.denormalize(done.reshape(-1, d))
        return (z, done) if return_patches else z


def patch_encode(ps: PatchSequence, model: UnifiedModel, mode: str | None = None) -> torch.Tensor:
    if mode is not None and mode != model.cfg.mode:
        raise ValueError(f"model is configured for {model.cfg.mode!r}, not {mode!r}")
    return model.patch_encode(ps)


# ---------------------------------------------------------------------------
# training


@dataclass
class UnifiedTrainConfig:
    steps: int = 2000
    seed: int = 0
    batch_size: int = 6
    tts_ratio: float = 5 / 6
    tasks: tuple[str, ...] = ("tts", "asr")
    lr: float = 1e-3
    warmup: int = 100
    min_lr: float = 1e-5
    clip: float = 2.0
    frozen: tuple[str, ...] = ()


def batch_tasks(rng: random.Random, cfg: UnifiedTrainConfig) -> list[str]:
    """Task per batch slot: fixed 5:1 proportions when both tasks are enabled."""
    if cfg.tasks == ("tts",) or cfg.tasks == ("asr",):
        return [cfg.tasks[0]] * cfg.batch_size
    n_tts = round(cfg.batch_size * cfg.tts_ratio)
    tasks = ["tts"] * n_tts + ["asr"] * (cfg.batch_size - n_tts)
    rng.shuffle(tasks)
    return tasks


def train_unified(model: UnifiedModel, data: Sequence[UnifiedExample], cfg: UnifiedTrainConfig,
                  on_step: Callable[[int, dict], None] | None = None):
    from .pipeline import OptimizerState, TrainingLog, adamw_step, downstream_optim

    if not data:
        raise ValueError("empty training set")
    optim = downstream_optim(lr=cfg.lr, warmup=cfg.warmup, total_steps=cfg.steps,
                             min_lr=min(cfg.min_lr, cfg.lr), clip=cfg.clip)
    params = ParameterSet(model, cfg.frozen)
    named = params.trainable()
    state = OptimizerState(optim)
    rng = random.Random(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    log = TrainingLog("downstream")
    model.train()
    for step in range(cfg.steps):
        tasks = batch_tasks(rng, cfg)
        layouts = [model.example_layout(data[rng.randrange(len(data))], t) for t in tasks]
        terms = model.losses(layouts, generator=gen)
        total = terms["total"]
        if not torch.isfinite(total):
            raise NonFiniteError(f"non-finite loss at step {step}")
        grads = torch.autograd.grad(total, [p for _, p in named], allow_unused=True)
        adamw_step(params, {n: g for (n, _), g in zip(named, grads)}, state)
        row = {"step": step, "lr": state.last_lr}
        row.update({k: float(v.detach()) for k, v in terms.items()})
        log.append(row)
        if on_step:
            on_step(step, row)
    model.eval()
    return log


def load_dit_from(model: UnifiedModel, source: UnifiedModel) -> None:
    """Initialise the DiT head from another model (e.g. a TTS-only run)."""
    model.dit.load_state_dict(source.dit.state_dict())


def examples_from_corpus(codec, utts, sample: bool = False, seed: int = 0) -> list[UnifiedExample]:
    """Posterior-mean latents of each utterance (or a sample with ``sample=True``)."""
    gen = torch.Generator().manual_seed(seed)
    out = []
    with torch.no_grad():
        for u in utts:
            w = torch.as_tensor(u.waveform.samples, dtype=torch.get_default_dtype())
            z = codec.latents(w, sample=sample, generator=gen)
            desc = u.labels.get("classify", ())
            out.append(UnifiedExample(tuple(u.transcript), z, tuple(desc), u.id))
    return out


# ---------------------------------------------------------------------------
# text and persistence

_HEX = "0123456789abcdef"


def encode_text(text: str) -> tuple[int, ...]:
    """One hexadecimal character per pitch symbol, e.g. ``"3a0f"``."""
    try:
        return tuple(_HEX.index(c) for c in text.strip().lower())
    except ValueError:
        raise ValueError(f"text must use the characters {_HEX!r}, got {text!r}") from None


def decode_text(symbols: Sequence[int]) -> str:
    return "".join(_HEX[s] if 0 <= s < len(_HEX) else "?" for s in symbols)


@dataclass
class DownstreamRunConfig:
    tasks: str = "unified"  # tts | asr | unified
    seed: int = 0
    n_utterances: int = 8
    corpus_seed: int = 100
    model: UnifiedConfig = None
    train: UnifiedTrainConfig = None
    dit_init: str | None = None
    freeze_semantic_encoder: bool = False

    def __post_init__(self):
        self.model = self.model or UnifiedConfig()
        self.train = self.train or UnifiedTrainConfig()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DownstreamRunConfig":
        d = dict(d)
        model = UnifiedConfig(**(d.pop("model", None) or {}))
        train = dict(d.pop("train", None) or {})
        for k in ("tasks", "frozen"):
            if k in train:
                train[k] = tuple(train[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d, model=model, train=UnifiedTrainConfig(**train))


TASK_SETS = {"tts": ("tts",), "asr": ("asr",), "unified": ("tts", "asr")}


def save_unified(model: UnifiedModel, path, extra: dict | None = None) -> None:
    from .checkpoint import save_checkpoint
    meta = {"kind": "unified", "config": model.cfg.to_dict(), **(extra or {})}
    if isinstance(model.patch_encoder, MeanPoolLinear):
        enc = model.patch_encoder.semantic
        meta["semantic"] = {"latent_dim": enc.inp.in_features, "width": enc.width,
                            "enc_layers": len(enc.encoder.blocks), "heads": enc.encoder.blocks[0].attn.heads}
    save_checkpoint(model, path, meta)


def load_unified(path) -> tuple[UnifiedModel, dict]:
    from .checkpoint import load_checkpoint, read_tensors
    _, meta = read_tensors(path)
    if not meta or meta.get("kind") != "unified":
        raise ValueError(f"{path} is not a downstream model checkpoint")
    cfg = UnifiedConfig(**meta["config"])
    semantic = None
    if "semantic" in meta:
        s = meta["semantic"]
        semantic = SupervisionNet(s["latent_dim"], width=s["width"], enc_layers=s["enc_layers"],
                                  heads=s["heads"], causal_encoder=True)
    model = UnifiedModel(cfg, semantic)
    load_checkpoint(model, path)
    model.eval()
    return model, meta
