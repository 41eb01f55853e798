"""Three-stage tokenizer training, AdamW and learning-rate schedules, and the
AE-to-VAE fidelity-bound report."""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch
import torch.nn as nn

from .adversary import TOY_PERIODS, PAPER_PERIODS, DiscriminatorBank, feature_matching_loss, gan_losses
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import PRESETS, Codec, CodecConfig, kl_with_flow, sample_reparameterized
from .dsp import CorpusConfig, LabeledUtterance, MelConfig, multiscale_mel_loss, paper_mel_scales, \
    stack_batch, synth_corpus, toy_mel_scales
from .enrich import SupervisionNet, TeacherBundle, distill_loss, supervision_loss
from .numerics import NonFiniteError, ParameterSet, param_digest

STAGES = ("I", "II", "III")


class StageOrderError(RuntimeError):
    """Raised when a stage is run without its prerequisite."""


class PlanError(ValueError):
    """Raised when a stage plan's losses or freezes contradict its stage."""


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.8, 0.99)
    eps: float = 1e-6
    weight_decay: float = 0.01
    clip: float = 500.0
    schedule: str = "exp_decay"
    gamma: float = 0.9999996
    floor: float = 1e-6
    warmup: int = 1
    total_steps: int = 0
    min_lr: float = 1e-5


def tokenizer_optim(**kw) -> OptimConfig:
    return OptimConfig(**kw)


def downstream_optim(**kw) -> OptimConfig:
    base = dict(betas=(0.9, 0.99), clip=2.0, schedule="cosine", warmup=5000, total_steps=100_000, min_lr=1e-5)
    base.update(kw)
    return OptimConfig(**base)


def lr_schedule(step: int, mode: str | None = None, cfg: OptimConfig = OptimConfig()) -> float:
    """Learning rate at ``step`` (0-based).

    ``exp_decay``: ``max(lr * gamma**step, floor)``. A warmup of one step is a
    no-op, so this mode never warms up. ``cosine``: linear warmup reaching ``lr``
    at ``step == warmup``, then cosine down to ``min_lr`` at ``total_steps``.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    mode = mode or cfg.schedule
    if mode == "exp_decay":
        return max(cfg.lr * cfg.gamma ** step, cfg.floor)
    if mode == "cosine":
        if cfg.warmup > 0 and step < cfg.warmup:
            return cfg.lr * step / cfg.warmup
        span = max(cfg.total_steps - cfg.warmup, 1)
        frac = min((step - cfg.warmup) / span, 1.0)
        return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + math.cos(math.pi * frac))
    raise ValueError(f"unknown schedule {mode!r}")


@dataclass
class OptimizerState:
    cfg: OptimConfig
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    last_lr: float = 0.0
    last_grad_norm: float = 0.0

    @property
    def lr(self) -> float:
        return lr_schedule(self.step, cfg=self.cfg)


def clip_grad_norm(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g.mul_(scale)
    return total


@torch.no_grad()
def adamw_step(params: ParameterSet, grads: dict[str, torch.Tensor | None], state: OptimizerState) -> OptimizerState:
    """Clip the global gradient norm, then apply one decoupled-weight-decay Adam update.

    Only names that are trainable in ``params`` and have a gradient are
    touched; frozen names never get moment buffers.
    """
    cfg = state.cfg
    live = {n: grads[n].detach().clone() for n, _ in params.trainable() if grads.get(n) is not None}
    state.last_grad_norm = clip_grad_norm(live, cfg.clip)
    for n, g in live.items():
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {n}")
    lr = state.lr
    state.step += 1
    t = state.step
    b1, b2 = cfg.betas
    for n, g in live.items():
        p = params.params[n]
        if n not in state.exp_avg:
            state.exp_avg[n] = torch.zeros_like(p)
            state.exp_avg_sq[n] = torch.zeros_like(p)
        m, v = state.exp_avg[n], state.exp_avg_sq[n]
        p.mul_(1 - lr * cfg.weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / (1 - b2 ** t)).sqrt_().add_(cfg.eps)
        p.addcdiv_(m, denom, value=-lr / (1 - b1 ** t))
    state.last_lr = lr
    return state


# ---------------------------------------------------------------------------
# stage plans


@dataclass(frozen=True)
class LossWeights:
    spec: float = 45.0
    adv: float = 1.0
    fm: float = 2.0
    beta_low: float = 0.1
    beta_high: float = 7.0
    distill_frame: float = 1.0
    distill_utt: float = 1.0
    sup: float = 1.0


@dataclass(frozen=True)
class Ablation:
    distill: bool = True
    supervise: bool = True
    causal_supervision_encoder: bool = False


ABLATIONS = {
    "default": Ablation(),
    "no_distill": Ablation(distill=False),
    "no_supervise": Ablation(supervise=False),
    "no_both": Ablation(distill=False, supervise=False),
}

TEACHERS = "distill.teachers"


@dataclass(frozen=True)
class StagePlan:
    stage: str
    steps: int
    frozen: frozenset[str]
    losses: frozenset[str]
    beta: float | None

    def validate(self) -> "StagePlan":
        if self.stage not in STAGES:
            raise PlanError(f"unknown stage {self.stage!r}")
        if self.steps < 0:
            raise PlanError("steps must be >= 0")
        base = {"spec", "adv", "fm"}
        if not base <= self.losses:
            raise PlanError(f"stage {self.stage} is missing generator losses {sorted(base - self.losses)}")
        if TEACHERS not in self.frozen:
            raise PlanError("teacher parameters must be frozen in every stage")
        if self.stage == "I":
            if self.losses != base or self.beta is not None:
                raise PlanError("stage I trains {spec, adv, fm} only, without a KL weight")
            if self.frozen & {"codec.encoder", "codec.decoder"}:
                raise PlanError("stage I must not freeze the generator")
        elif self.stage == "II":
            if self.losses != base | {"kl"}:
                raise PlanError("stage II trains {spec, adv, fm, kl}")
            if not {"codec.encoder", "codec.decoder"} <= self.frozen:
                raise PlanError("stage II must freeze encoder and decoder")
        else:
            if "kl" not in self.losses or not self.losses <= base | {"kl", "distill", "sup"}:
                raise PlanError("stage III trains spec, adv, fm, kl and optionally distill and sup")
            if self.frozen & {"codec.encoder", "codec.decoder", "codec.bottleneck"}:
                raise PlanError("stage III trains every generator part")
        if self.stage != "I" and (self.beta is None or self.beta < 0):
            raise PlanError(f"stage {self.stage} needs a non-negative KL weight")
        return self


def make_plan(stage: str, steps: int, weights: LossWeights = LossWeights(),
              ablation: Ablation = Ablation()) -> StagePlan:
    base = {"spec", "adv", "fm"}
    if stage == "I":
        plan = StagePlan("I", steps, frozenset({TEACHERS}), frozenset(base), None)
    elif stage == "II":
        plan = StagePlan("II", steps, frozenset({TEACHERS, "codec.encoder", "codec.decoder"}),
                         frozenset(base | {"kl"}), weights.beta_low)
    elif stage == "III":
        losses = base | {"kl"}
        if ablation.distill:
            losses.add("distill")
        if ablation.supervise:
            losses.add("sup")
        plan = StagePlan("III", steps, frozenset({TEACHERS}), frozenset(losses), weights.beta_high)
    else:
        raise PlanError(f"unknown stage {stage!r}")
    return plan.validate()


# ---------------------------------------------------------------------------
# the tokenizer bundle


class Tokenizer(nn.Module):
    """Codec plus everything its training needs: discriminator, teachers and heads, supervision net."""

    def __init__(self, cfg: CodecConfig, periods: Sequence[int] | None = None,
                 causal_supervision_encoder: bool = False, preset: str = "custom"):
        super().__init__()
        self.preset = preset
        self.codec = Codec(cfg)
        if periods is None:
            periods = PAPER_PERIODS if cfg.sample_rate >= 16000 else TOY_PERIODS
        self.disc = DiscriminatorBank(periods)
        self.distill = TeacherBundle(cfg.latent_dim)
        self.supervision = SupervisionNet(cfg.latent_dim, causal_encoder=causal_supervision_encoder)
        self.register_buffer("stages_done", torch.zeros((), dtype=torch.int64))

    @property
    def cfg(self) -> CodecConfig:
        return self.codec.cfg

    @property
    def completed(self) -> int:
        return int(self.stages_done)

    def mel_scales(self) -> list[MelConfig]:
        if self.cfg.sample_rate == 8000:
            return toy_mel_scales()
        return paper_mel_scales(self.cfg.sample_rate)

    def generator_params(self, plan: StagePlan | None = None) -> ParameterSet:
        frozen = set(plan.frozen) if plan else {TEACHERS}
        return ParameterSet(self, frozen | {"disc"})

    def disc_params(self) -> ParameterSet:
        prefixes = {n.split(".")[0] for n, _ in self.named_parameters()} - {"disc"}
        return ParameterSet(self, prefixes)

    def meta(self) -> dict:
        return {
            "kind": "tokenizer", "preset": self.preset, "codec": self.cfg.to_dict(),
            "periods": self.disc.periods, "teachers": self.distill.config(),
            "causal_supervision_encoder": self.supervision.causal_encoder,
            "stages_done": self.completed,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "Tokenizer":
        return cls(CodecConfig.from_dict(meta["codec"]), meta["periods"],
                   meta.get("causal_supervision_encoder", False), meta.get("preset", "custom"))


def build_tokenizer(preset: str = "toy", causal_supervision_encoder: bool = False, seed: int = 0,
                    overrides: dict | None = None) -> Tokenizer:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    torch.manual_seed(seed)
    return Tokenizer(PRESETS[preset](**(overrides or {})), causal_supervision_encoder=causal_supervision_encoder,
                     preset=preset)


def save_tokenizer(model: Tokenizer, path: str | Path) -> None:
    save_checkpoint(model, path, model.meta())


def load_tokenizer(path: str | Path) -> Tokenizer:
    from .checkpoint import read_tensors
    _, meta = read_tensors(path)
    if not meta or meta.get("kind") != "tokenizer":
        raise ValueError(f"{path} is not a tokenizer checkpoint")
    model = Tokenizer.from_meta(meta)
    load_checkpoint(model, path)
    return model


def tokenizer_corpus_config() -> CorpusConfig:
    """Eight symbols per utterance, so every utterance covers a full one-second crop.

    Pauses teach the codec to reproduce near-silence.
    """
    return CorpusConfig(min_symbols=8, max_symbols=8, pause_prob=0.25)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class RunConfig:
    preset: str = "toy"
    stage: str = "I"
    steps: int = 300
    seed: int = 0
    batch_size: int = 4
    crop_samples: int = 8000
    lr: float | None = None
    loss_weights: LossWeights = LossWeights()
    ablation: Ablation = Ablation()
    overrides: dict = field(default_factory=dict)  # codec config overrides on top of the preset
    out_dir: str = ""
    n_utterances: int = 64
    corpus_seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablation"] = {"distill": "on" if self.ablation.distill else "off",
                         "supervise": "on" if self.ablation.supervise else "off",
                         "causal_supervision_encoder": self.ablation.causal_supervision_encoder}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        ab = d.pop("ablation", {}) or {}

        def flag(v, default=True):
            if isinstance(v, str):
                if v not in ("on", "off"):
                    raise ValueError(f"ablation flag must be 'on' or 'off', got {v!r}")
                return v == "on"
            return default if v is None else bool(v)

        ablation = Ablation(flag(ab.get("distill")), flag(ab.get("supervise")),
                            bool(ab.get("causal_supervision_encoder", False)))
        weights = LossWeights(**d.pop("loss_weights", {}) or {})
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d, loss_weights=weights, ablation=ablation)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# toy learning rates: 1e-4 is far too slow for a few hundred steps
TOY_LR = {"I": 2e-3, "II": 1e-3, "III": 1e-3}


class TrainingLog:
    def __init__(self, stage: str):
        self.stage = stage
        self.rows: list[dict[str, float]] = []

    def append(self, row: dict[str, float]) -> None:
        self.rows.append(row)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows if name in r]

    @property
    def columns(self) -> list[str]:
        cols: list[str] = []
        for r in self.rows:
            for k in r:
                if k not in cols:
                    cols.append(k)
        return cols

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns)
            w.writeheader()
            w.writerows(self.rows)

    @classmethod
    def from_csv(cls, path: str | Path, stage: str = "") -> "TrainingLog":
        log = cls(stage)
        with open(path) as fh:
            for r in csv.DictReader(fh):
                log.append({k: float(v) for k, v in r.items() if v != ""})
        return log

    def __len__(self) -> int:
        return len(self.rows)

    def __eq__(self, other) -> bool:
        return isinstance(other, TrainingLog) and self.rows == other.rows


def moving_average(xs: Sequence[float], end: int, window: int = 10) -> float:
    chunk = xs[max(0, end - window):end]
    return sum(chunk) / len(chunk)


def _grads(loss: torch.Tensor, params: ParameterSet) -> dict[str, torch.Tensor | None]:
    named = params.trainable()
    gs = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: g for (n, _), g in zip(named, gs)}


def generator_losses(model: Tokenizer, plan: StagePlan, x: torch.Tensor, utts: Sequence[LabeledUtterance] | None,
                     weights: LossWeights, rng: random.Random | None = None,
                     noise: torch.Tensor | None = None, generator: torch.Generator | None = None):
    """Forward pass for one batch; returns ``(x_hat, terms)`` where ``terms`` holds
    unweighted loss components (adversarial terms are added by the caller)."""
    codec = model.codec
    terms: dict[str, torch.Tensor] = {}
    if plan.stage == "I":
        z = codec.encode(x)
    else:
        if plan.stage == "II":
            with torch.no_grad():
                z_in = codec.encode(x)
        else:
            z_in = codec.encode(x)
        p = codec.posterior(z_in)
        if noise is None:
            noise = torch.randn(p.mean.shape, generator=generator, dtype=p.mean.dtype)
        z = sample_reparameterized(p, noise)
        terms["kl"] = kl_with_flow(p, codec.flow, noise=noise.unsqueeze(0))
    x_hat = codec.decode(z)[..., : x.shape[-1]]
    terms["spec"] = multiscale_mel_loss(x, x_hat, model.mel_scales())
    if "distill" in plan.losses:
        total, parts = distill_loss(z, model.distill, x)
        terms["distill"] = total
        terms["distill_frame"] = parts["frame"]
        terms["distill_utt"] = parts["utterance"]
    if "sup" in plan.losses:
        rng = rng or random.Random(0)
        tasks = [rng.choice(model.supervision.tasks) for _ in range(x.shape[0])]
        ys = [u.labels[t] for u, t in zip(utts, tasks)]
        terms["sup"] = supervision_loss(z, tasks, ys, model.supervision)
    return x_hat, terms


def weighted_total(plan: StagePlan, terms: dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    total = weights.spec * terms["spec"] + weights.adv * terms["adv"] + weights.fm * terms["fm"]
    if "kl" in plan.losses:
        total = total + plan.beta * terms["kl"]
    if "distill" in plan.losses:
        total = total + weights.distill_frame * terms["distill_frame"] + weights.distill_utt * terms["distill_utt"]
    if "sup" in plan.losses:
        total = total + weights.sup * terms["sup"]
    return total


def run_stage(plan: StagePlan, model: Tokenizer, data: Sequence[LabeledUtterance], seed: int = 0,
              cfg: RunConfig | None = None, optim: OptimConfig | None = None,
              on_step: Callable[[int, dict], None] | None = None) -> TrainingLog:
    """Train ``model`` in place for ``plan.steps`` steps and mark the stage complete."""
    plan.validate()
    cfg = cfg or RunConfig(stage=plan.stage, steps=plan.steps, seed=seed)
    need = STAGES.index(plan.stage)
    if model.completed < need:
        raise StageOrderError(f"stage {need} checkpoint required before stage {need + 1} "
                              f"(model has completed {model.completed} stages)")
    if not data:
        raise ValueError("empty training set")
    if "distill" in plan.losses:
        model.distill.specs["frame"].weight = cfg.loss_weights.distill_frame
        model.distill.specs["utterance"].weight = cfg.loss_weights.distill_utt
    if optim is None:
        lr = cfg.lr if cfg.lr is not None else (TOY_LR[plan.stage] if cfg.preset == "toy" else 1e-4)
        optim = tokenizer_optim(lr=lr)
    gen_set = model.generator_params(plan)
    disc_set = model.disc_params()
    g_state, d_state = OptimizerState(optim), OptimizerState(optim)
    frozen_digests = {p: param_digest(model, p + ".") for p in plan.frozen}
    rng = random.Random(seed)
    gen = torch.Generator().manual_seed(seed)
    dtype = torch.get_default_dtype()
    log = TrainingLog(plan.stage)
    model.train()
    for step in range(plan.steps):
        idx = [rng.randrange(len(data)) for _ in range(cfg.batch_size)]
        utts = [data[i] for i in idx]
        x = stack_batch(utts, cfg.crop_samples, dtype)
        x_hat, terms = generator_losses(model, plan, x, utts, cfg.loss_weights, rng, generator=gen)
        # discriminator update on the detached reconstruction
        real_s, _ = model.disc(x)
        fake_s, _ = model.disc(x_hat.detach())
        _, loss_d = gan_losses(real_s, fake_s)
        adamw_step(disc_set, _grads(loss_d, disc_set), d_state)
        # generator update against the refreshed discriminator
        real_s, real_f = model.disc(x)
        fake_s, fake_f = model.disc(x_hat)
        terms["adv"], _ = gan_losses(real_s, fake_s)
        terms["fm"] = feature_matching_loss(real_f, fake_f)
        total = weighted_total(plan, terms, cfg.loss_weights)
        if not torch.isfinite(total):
            raise NonFiniteError(f"non-finite loss at step {step}: {({k: float(v) for k, v in terms.items()})}")
        adamw_step(gen_set, _grads(total, gen_set), g_state)
        row = {"step": step, "lr": g_state.last_lr, "total": float(total.detach()), "disc": float(loss_d.detach())}
        row.update({k: float(v.detach()) for k, v in terms.items()})
        log.append(row)
        if on_step:
            on_step(step, row)
    for p, d in frozen_digests.items():
        if param_digest(model, p + ".") != d:
            raise RuntimeError(f"frozen parameters under {p} changed during stage {plan.stage}")
    model.stages_done.fill_(max(model.completed, need + 1))
    model.eval()
    return log


STAGE_NAMES = {1: "I", 2: "II", 3: "III", "1": "I", "2": "II", "3": "III", "I": "I", "II": "II", "III": "III"}


def train_tokenizer(cfg: RunConfig, model: Tokenizer | None = None,
                    data: Sequence[LabeledUtterance] | None = None,
                    on_step: Callable[[int, dict], None] | None = None) -> tuple[Tokenizer, TrainingLog]:
    """One stage of tokenizer training as described by ``cfg``; stages II and III need ``model``."""
    stage = STAGE_NAMES[cfg.stage]
    if model is None:
        if stage != "I":
            need = STAGES.index(stage)
            raise StageOrderError(f"stage {need} checkpoint required before stage {need + 1}")
        model = build_tokenizer(cfg.preset, cfg.ablation.causal_supervision_encoder, cfg.seed, cfg.overrides)
    if data is None:
        data = synth_corpus(cfg.corpus_seed, cfg.n_utterances,
                            replace(tokenizer_corpus_config(), sample_rate=model.cfg.sample_rate))
    if stage == "III" and cfg.ablation.causal_supervision_encoder:
        # the supervision net first trains in stage III, so the attention mask can still change here
        model.supervision.causal_encoder = True
    plan = make_plan(stage, cfg.steps, cfg.loss_weights, cfg.ablation)
    log = run_stage(plan, model, data, cfg.seed, replace(cfg, stage=stage), on_step=on_step)
    return model, log


# ---------------------------------------------------------------------------
# fidelity bound


@dataclass
class FidelityReport:
    eps_ae: float
    delta_shift: float
    L_hat: float
    lhs: float
    rhs: float
    rhs_unsafe: float
    safety: float
    n_utterances: int
    n_samples: int
    n_probes: int
    statistical: bool = True

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = self.passed
        return d


def fidelity_bound(xs: Sequence[torch.Tensor], encode: Callable, posterior: Callable, decode: Callable,
                   n_probes: int = 64, n_samples: int = 4, noise_scale: float = 1.0, safety: float = 2.0,
                   radius: float = 1e-2, seed: int = 0) -> FidelityReport:
    """Monte-Carlo evaluation of ``E||x - G(z_VAE)||^2 <= 2 eps_AE + 2 L^2 delta_shift``.

    ``encode(x) -> z_AE``, ``posterior(z_AE) -> (mean, log_scale)`` and
    ``decode(z) -> x_hat`` are arbitrary callables; ``x`` must already be the
    signal the decoder reproduces (e.g. padded to a hop multiple). Squared norms
    are summed over each utterance and averaged over utterances and samples.
    ``L_hat`` is the largest finite-difference gain of the decoder over
    ``n_probes`` perturbations of size ``radius * RMS(z)``, based at random points
    on the AE-to-VAE segment; half the probes are isotropic and half point along
    ``z_VAE - z_AE``.
    """
    if len(xs) == 0:
        raise ValueError("empty evaluation set")
    gen = torch.Generator().manual_seed(seed)
    eps_ae = lhs = shift = 0.0
    pairs = []
    with torch.no_grad():
        for x in xs:
            z_ae = encode(x)
            eps_ae += float(((x - decode(z_ae)) ** 2).sum())
            mean, log_scale = posterior(z_ae)
            for _ in range(n_samples):
                noise = noise_scale * torch.randn(mean.shape, generator=gen, dtype=mean.dtype)
                z_vae = mean + log_scale.exp() * noise
                lhs += float(((x - decode(z_vae)) ** 2).sum())
                shift += float(((z_vae - z_ae) ** 2).sum())
                pairs.append((z_ae, z_vae))
        n_u, n_tot = len(xs), len(xs) * n_samples
        eps_ae /= n_u
        lhs /= n_tot
        shift /= n_tot
        L_hat = 0.0
        for k in range(n_probes):
            z_ae, z_vae = pairs[int(torch.randint(len(pairs), (1,), generator=gen))]
            s = float(torch.rand((), generator=gen))
            base = z_ae + s * (z_vae - z_ae)
            direction = z_vae - z_ae if k % 2 else torch.randn(base.shape, generator=gen, dtype=base.dtype)
            if float(direction.norm()) == 0.0:
                direction = torch.randn(base.shape, generator=gen, dtype=base.dtype)
            rms = float(base.pow(2).mean().sqrt()) or 1.0
            delta = direction / direction.norm() * radius * rms * math.sqrt(base.numel())
            gain = float((decode(base + delta) - decode(base)).norm() / delta.norm())
            L_hat = max(L_hat, gain)
    rhs = 2 * eps_ae + 2 * (safety * L_hat) ** 2 * shift
    return FidelityReport(eps_ae, shift, L_hat, lhs, rhs, 2 * eps_ae + 2 * L_hat ** 2 * shift, safety,
                          n_u, n_samples, n_probes)


def fidelity_bound_report(stage1_model: Codec, stage2_model: Codec, eval_set: Sequence, n_probes: int = 64,
                          n_samples: int = 4, noise_scale: float = 1.0, seed: int = 0,
                          crop_samples: int | None = None) -> FidelityReport:
    """Bound check for a Stage-I autoencoder and the Stage-II bottleneck trained on top of it.

    The AE path uses ``stage1_model``'s encoder and decoder; the posterior comes
    from ``stage2_model``. Stage II freezes both, so the decoder is shared.
    """
    if len(eval_set) == 0:
        raise ValueError("empty evaluation set")
    if isinstance(stage1_model, Tokenizer):
        stage1_model = stage1_model.codec
    if isinstance(stage2_model, Tokenizer):
        stage2_model = stage2_model.codec
    xs = []
    for item in eval_set:
        if isinstance(item, LabeledUtterance):
            w = torch.as_tensor(item.waveform.samples, dtype=torch.get_default_dtype())
        else:
            w = torch.as_tensor(item, dtype=torch.get_default_dtype())
        if crop_samples:
            w = w[:crop_samples]
        xs.append(stage1_model.pad(w))
    return fidelity_bound(xs, stage1_model.encode, lambda z: tuple(stage2_model.posterior(z)),
                          stage1_model.decode, n_probes, n_samples, noise_scale, seed=seed)
