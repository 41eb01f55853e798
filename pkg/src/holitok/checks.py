"""Self-checks behind ``holitok verify``: finite-difference gradients, causality,
KL estimator correctness, the fidelity bound, and structural invariants of
every module. Each check returns a :class:`CheckResult`."""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field
from typing import Callable

import torch

from . import adversary, codec, dsp, enrich, numerics, pipeline, unified
from .numerics import gradient_check


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"name": self.name, "pass": bool(self.passed), "seconds": round(self.seconds, 3),
                "details": self.details}


def _timed(name: str, fn: Callable[[], tuple[bool, dict]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, details = fn()
    return CheckResult(name, bool(ok), details, time.perf_counter() - t0)


def _rand(gen, *shape, scale=1.0):
    return (scale * torch.randn(*shape, generator=gen, dtype=torch.float64)).requires_grad_()


# ---------------------------------------------------------------------------
# gradient primitives: each builder returns (scalar closure, leaf inputs)


def _prim_conv1d(gen):
    x, w, b = _rand(gen, 2, 3, 17), _rand(gen, 4, 3, 5), _rand(gen, 4)
    r = torch.randn(2, 4, 8, generator=gen, dtype=torch.float64)
    return (lambda: (numerics.conv1d(x, w, b, stride=2, left_pad=3) * r).sum()), {"x": x, "w": w, "b": b}


def _prim_conv1d_dilated(gen):
    x, w = _rand(gen, 2, 3, 15), _rand(gen, 2, 3, 3)
    r = torch.randn(2, 2, 15, generator=gen, dtype=torch.float64)
    return (lambda: (numerics.conv1d(x, w, None, dilation=2, left_pad=2, right_pad=2) * r).sum()), {"x": x, "w": w}


def _prim_conv_transpose(gen):
    x, w, b = _rand(gen, 2, 3, 6), _rand(gen, 3, 4, 8), _rand(gen, 4)
    r = torch.randn(2, 4, 24, generator=gen, dtype=torch.float64)
    return (lambda: (numerics.conv_transpose1d(x, w, b, stride=4) * r).sum()), {"x": x, "w": w, "b": b}


def _prim_snake(gen):
    x, la, lb = _rand(gen, 2, 3, 10), _rand(gen, 3, scale=0.5), _rand(gen, 3, scale=0.5)
    r = torch.randn(2, 3, 10, generator=gen, dtype=torch.float64)
    return (lambda: (numerics.snake_beta(x, la, lb) * r).sum()), {"x": x, "log_alpha": la, "log_beta": lb}


def _prim_lstm(gen):
    x = _rand(gen, 2, 5, 3)
    params, leaves = [], {}
    for layer, d_in in enumerate((3, 4)):
        p = {"weight_ih": _rand(gen, 16, d_in, scale=0.4), "weight_hh": _rand(gen, 16, 4, scale=0.4),
             "bias_ih": _rand(gen, 16, scale=0.4), "bias_hh": _rand(gen, 16, scale=0.4)}
        params.append(p)
        leaves.update({f"l{layer}.{k}": v for k, v in p.items()})
    r = torch.randn(2, 5, 4, generator=gen, dtype=torch.float64)
    return (lambda: (numerics.lstm_forward(x, params) * r).sum()), {"x": x, **leaves}


def _prim_mel_loss(gen):
    x = torch.randn(1, 600, generator=gen, dtype=torch.float64) * 0.3
    xh = _rand(gen, 1, 600, scale=0.3)
    scales = dsp.toy_mel_scales()
    return (lambda: dsp.multiscale_mel_loss(x, xh, scales)), {"x_hat": xh}


def _prim_kl_flow(gen):
    flow = codec.FlowStack(6, 2, 8).double().randomize(0.3, gen)
    mean, ls = _rand(gen, 2, 4, 6), _rand(gen, 2, 4, 6, scale=0.3)
    noise = torch.randn(3, 2, 4, 6, generator=gen, dtype=torch.float64)
    leaves = {"mean": mean, "log_scale": ls, **{f"flow.{n}": p for n, p in flow.named_parameters()}}
    return (lambda: codec.kl_with_flow(codec.PosteriorParams(mean, ls), flow, noise=noise)), leaves


def _prim_kl_closed(gen):
    mean, ls = _rand(gen, 3, 5), _rand(gen, 3, 5, scale=0.3)
    return (lambda: codec.kl_closed_form(codec.PosteriorParams(mean, ls)).sum()), {"mean": mean, "log_scale": ls}


def _prim_reparam(gen):
    mean, ls = _rand(gen, 3, 5), _rand(gen, 3, 5, scale=0.3)
    noise = torch.randn(3, 5, generator=gen, dtype=torch.float64)
    r = torch.randn(3, 5, generator=gen, dtype=torch.float64)
    return (lambda: (codec.sample_reparameterized(codec.PosteriorParams(mean, ls), noise) * r).sum()), \
        {"mean": mean, "log_scale": ls}


def _gan_setup(gen):
    torch.manual_seed(int(torch.randint(1 << 30, (1,), generator=gen)))
    bank = adversary.DiscriminatorBank((2, 3), channels=(4, 8, 8)).double()
    real = torch.randn(2, 90, generator=gen, dtype=torch.float64) * 0.5
    fake = _rand(gen, 2, 90, scale=0.5)
    return bank, real, fake


def _prim_gan_generator(gen):
    # real features are constants inside the feature-matching loss, so only the
    # generator output is a valid probe target for this objective
    bank, real, fake = _gan_setup(gen)

    def f():
        rs, rf = bank(real)
        fs, ff = bank(fake)
        return adversary.gan_losses(rs, fs)[0] + adversary.feature_matching_loss(rf, ff)

    return f, {"fake": fake}


def _prim_gan_discriminator(gen):
    bank, real, fake = _gan_setup(gen)
    fake = fake.detach()

    def f():
        return adversary.gan_losses(bank(real)[0], bank(fake)[0])[1]

    return f, {n: p for n, p in bank.named_parameters() if "post" in n or "convs.0" in n}


def _prim_distill(gen):
    torch.manual_seed(int(torch.randint(1 << 30, (1,), generator=gen)))
    bundle = enrich.TeacherBundle(8).double()
    z = _rand(gen, 2, 10, 8)
    targets = {"frame": torch.randn(2, 7, 32, generator=gen, dtype=torch.float64),
               "utterance": torch.randn(2, 16, generator=gen, dtype=torch.float64)}
    return (lambda: enrich.distill_loss(z, bundle, targets=targets)[0]), \
        {"z": z, "head.0.weight": bundle.heads["frame"][0].weight}


def _prim_supervision(gen):
    torch.manual_seed(int(torch.randint(1 << 30, (1,), generator=gen)))
    net = enrich.SupervisionNet(8, width=16, enc_layers=1, dec_layers=1, heads=2).double()
    z = _rand(gen, 2, 6, 8)
    ys = [(1, 2, 3), (16,)]
    return (lambda: enrich.supervision_loss(z, ["transcribe", "classify"], ys, net)), \
        {"z": z, "head.weight": net.head.weight}


def _prim_attention(gen):
    torch.manual_seed(int(torch.randint(1 << 30, (1,), generator=gen)))
    from .blocks import Block, causal_mask
    blk = Block(8, 2).double()
    x = _rand(gen, 1, 5, 8)
    r = torch.randn(1, 5, 8, generator=gen, dtype=torch.float64)
    return (lambda: (blk(x, causal_mask(5)) * r).sum()), {"x": x, "attn.q.weight": blk.attn.q.weight}


def _prim_flow_matching(gen):
    torch.manual_seed(int(torch.randint(1 << 30, (1,), generator=gen)))
    dit = unified.DiT(4, 2, 16, 1, 2, 8).double()
    with torch.no_grad():
        dit.out.weight.normal_(0, 0.1, generator=gen)
    z = torch.randn(3, 2, 4, generator=gen, dtype=torch.float64)
    eps = torch.randn(3, 2, 4, generator=gen, dtype=torch.float64)
    t = torch.rand(3, generator=gen, dtype=torch.float64)
    h = _rand(gen, 3, 8)
    g, k = torch.zeros(3, dtype=torch.long), torch.arange(3)
    logits = _rand(gen, 3)
    labels = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)

    def f():
        v = dit(unified.interpolate(z, eps, t), t, g, k, h, z, g, k)
        return unified.fm_loss(v, z, eps) + unified.eos_loss(logits, labels)

    return f, {"h": h, "eos_logits": logits, "dit.out.weight": dit.out.weight}


def _prim_dense_ops(gen):
    # matmul, softmax, layer norm, sigmoid, tanh, leaky rectifier, sum and mean reductions
    a, w = _rand(gen, 3, 5), _rand(gen, 5, 4)
    g, b = _rand(gen, 4, scale=0.5), _rand(gen, 4, scale=0.5)
    r = torch.randn(3, 4, generator=gen, dtype=torch.float64)

    def f():
        h = a @ w
        out = torch.softmax(h, -1) * r + torch.nn.functional.layer_norm(h, (4,), g, b)
        out = out + torch.sigmoid(h) * torch.tanh(h) + torch.nn.functional.leaky_relu(h, numerics.LEAKY_SLOPE)
        return (out * r).sum() + out.mean()

    return f, {"a": a, "w": w, "ln_gain": g, "ln_bias": b}


PRIMITIVES: dict[str, Callable] = {
    "dense_ops": _prim_dense_ops,
    "conv1d": _prim_conv1d,
    "conv1d_dilated": _prim_conv1d_dilated,
    "conv_transpose1d": _prim_conv_transpose,
    "snake_beta": _prim_snake,
    "lstm": _prim_lstm,
    "multiscale_mel_loss": _prim_mel_loss,
    "kl_with_flow": _prim_kl_flow,
    "kl_closed_form": _prim_kl_closed,
    "reparameterize": _prim_reparam,
    "gan_generator": _prim_gan_generator,
    "gan_discriminator": _prim_gan_discriminator,
    "distill_loss": _prim_distill,
    "supervision_loss": _prim_supervision,
    "attention_block": _prim_attention,
    "flow_matching_and_eos": _prim_flow_matching,
}


def check_primitive(name: str, seed: int, tol: float = 1e-4, max_entries: int = 40) -> numerics.CheckReport:
    gen = torch.Generator().manual_seed(seed)
    with numerics.precision("float64"):
        f, inputs = PRIMITIVES[name](gen)
        return gradient_check(f, inputs, tol=tol, max_entries=max_entries, generator=gen)


def composite_stage3_check(seed: int, tol: float = 1e-3, crop: int = 1024, step: float = 1e-6,
                           entries_per_tensor: int = 2) -> numerics.CheckReport:
    """Finite differences of the full weighted Stage-III generator loss on a toy model."""
    with numerics.precision("float64"):
        torch.manual_seed(seed)
        model = pipeline.Tokenizer(codec.toy_config(), preset="toy")
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for n, p in model.named_parameters():
                if n.endswith("codec.bottleneck.head.weight") or ("flow" in n and "net.2" in n):
                    p.normal_(0, 0.05, generator=gen)
        utts = dsp.synth_corpus(seed, 1, pipeline.tokenizer_corpus_config())
        x = dsp.stack_batch(utts, crop)
        plan = pipeline.make_plan("III", 1)
        weights = pipeline.LossWeights()
        noise = torch.randn(1, model.cfg.n_frames(crop), model.cfg.latent_dim, generator=gen)

        def f():
            x_hat, terms = pipeline.generator_losses(model, plan, x, utts, weights, random.Random(seed), noise=noise)
            rs, rf = model.disc(x)
            fs, ff = model.disc(x_hat)
            terms["adv"], _ = adversary.gan_losses(rs, fs)
            terms["fm"] = adversary.feature_matching_loss(rf, ff)
            return pipeline.weighted_total(plan, terms, weights)

        params = {n: p for n, p in model.generator_params(plan).trainable()}
        return gradient_check(f, params, step=step, tol=tol, max_entries=entries_per_tensor, generator=gen)


def check_gradients(seeds: int = 20, composite_seeds: int = 3, include_composite: bool = True) -> CheckResult:
    def run():
        worst, fails = {}, []
        for name in PRIMITIVES:
            w = 0.0
            for s in range(seeds):
                rep = check_primitive(name, s)
                w = max(w, rep.worst)
                if not rep.passed:
                    fails.append(f"{name} seed {s}: {rep.worst:.2e}")
            worst[name] = w
        details = {"primitive_tol": 1e-4, "seeds": seeds, "worst_rel_error": worst, "failures": fails}
        ok = not fails
        if include_composite:
            comp = []
            for s in range(composite_seeds):
                rep = composite_stage3_check(s)
                comp.append(rep.worst)
                ok = ok and rep.passed
            details.update(composite_tol=1e-3, composite_seeds=composite_seeds, composite_worst=comp)
        return ok, details

    return _timed("gradients", run)


# ---------------------------------------------------------------------------
# causality, KL, bound


def check_causality(preset: str = "toy", n_probes: int | None = None, seed: int = 0) -> CheckResult:
    def run():
        with numerics.precision("float64"):
            torch.manual_seed(seed)
            model = codec.Codec(codec.PRESETS[preset]())
            rep = codec.causality_probe(model, n_probes=n_probes, seed=seed)
        return rep.passed, {"preset": preset, **rep.to_dict()}

    return _timed(f"causality[{preset}]", run)


def kl_mc_vs_closed_form(n_posteriors: int = 50, n_mc: int = 10_000, dim: int = 8, seed: int = 0):
    """Per posterior: (closed form, MC mean, standard error) with an identity flow."""
    gen = torch.Generator().manual_seed(seed)
    rows = []
    with numerics.precision("float64"):
        for _ in range(n_posteriors):
            mean = torch.randn(1, dim, generator=gen)
            ls = 0.5 * torch.randn(1, dim, generator=gen)
            p = codec.PosteriorParams(mean, ls)
            noise = torch.randn(n_mc, 1, dim, generator=gen)
            terms = codec.kl_mc_terms(p, None, noise).flatten()
            rows.append((float(codec.kl_closed_form(p)), float(terms.mean()), float(terms.std() / math.sqrt(n_mc))))
    return rows


def check_kl(n_posteriors: int = 50, n_mc: int = 10_000, seed: int = 0) -> CheckResult:
    def run():
        rows = kl_mc_vs_closed_form(n_posteriors, n_mc, seed=seed)
        z = [abs(mc - cf) / se for cf, mc, se in rows]
        with numerics.precision("float64"):
            gen = torch.Generator().manual_seed(seed + 1)
            dim = 8
            p = codec.PosteriorParams(torch.ones(1, dim), torch.zeros(1, dim))
            terms = codec.kl_mc_terms(p, None, torch.randn(n_mc, 1, dim, generator=gen)).flatten() / dim
            unit_mc, unit_se = float(terms.mean()), float(terms.std() / math.sqrt(n_mc))
        unit_z = abs(unit_mc - 0.5) / unit_se
        ok = max(z) < 3 and unit_z < 3
        return ok, {"n_posteriors": n_posteriors, "n_mc": n_mc, "max_deviation_se": max(z),
                    "mean_deviation_se": sum(z) / len(z), "unit_case_per_dim": unit_mc,
                    "unit_case_deviation_se": unit_z}

    return _timed("kl", run)


def linear_bound_case(seed: int = 0, n: int = 20, d_x: int = 12, d_z: int = 4, n_samples: int = 8):
    """Fidelity bound with a linear encoder/decoder; ``L_hat`` must equal the operator norm."""
    gen = torch.Generator().manual_seed(seed)
    with numerics.precision("float64"):
        W = torch.randn(d_x, d_z, generator=gen)
        E = torch.linalg.pinv(W) + 0.1 * torch.randn(d_z, d_x, generator=gen)
        xs = [torch.randn(d_x, generator=gen) for _ in range(n)]
        log_scale = torch.full((d_z,), math.log(0.3))
        rep = pipeline.fidelity_bound(xs, lambda x: E @ x, lambda z: (z, log_scale), lambda z: W @ z,
                                      n_probes=64, n_samples=n_samples, seed=seed, safety=1.0)
        op_norm = float(torch.linalg.matrix_norm(W, ord=2))
    return rep, op_norm


def check_bound(stage1: str | None = None, stage2: str | None = None, n_eval: int = 100,
                n_probes: int = 64, seed: int = 0) -> CheckResult:
    def run():
        rep, op = linear_bound_case(seed)
        ok = rep.passed and rep.L_hat <= op * (1 + 1e-9)
        details = {"linear": {**rep.to_dict(), "operator_norm": op}}
        if stage1 and stage2:
            m1, m2 = pipeline.load_tokenizer(stage1), pipeline.load_tokenizer(stage2)
            utts = dsp.synth_corpus(seed + 1000, n_eval, pipeline.tokenizer_corpus_config())
            trained = pipeline.fidelity_bound_report(m1, m2, utts, n_probes=n_probes, seed=seed, crop_samples=8000)
            details["trained"] = trained.to_dict()
            ok = ok and trained.passed
        return ok, details

    return _timed("bound", run)


# ---------------------------------------------------------------------------
# structural invariants (cheap, one per module)


def _structural() -> list[tuple[str, Callable[[], tuple[bool, dict]]]]:
    def numerics_finite():
        try:
            numerics.conv1d(torch.tensor([[float("nan"), 1.0]]), torch.ones(1, 1, 1))
        except numerics.NonFiniteError:
            return True, {}
        return False, {"error": "NaN input accepted"}

    def codec_shapes():
        torch.manual_seed(0)
        m = codec.Codec(codec.toy_config())
        with torch.no_grad():
            z = m.encode(torch.zeros(8000))
            y = m.decode(z)
        return z.shape == (125, 8) and y.shape == (8000,), {"latent": list(z.shape), "wave": list(y.shape)}

    def flow_inverse():
        torch.manual_seed(0)
        f = codec.FlowStack(8, 2, 16).randomize(0.3)
        z = torch.randn(3, 8)
        with torch.no_grad():
            err = float((f.inverse(f(z)[0]) - z).abs().max())
        return err < 1e-5, {"max_error": err}

    def gan_example():
        lg, ld = adversary.gan_losses(torch.ones(4), torch.zeros(4))
        return float(ld) == 0.0 and float(lg) == 1.0, {"L_G": float(lg), "L_D": float(ld)}

    def teacher_stop_gradient():
        torch.manual_seed(0)
        b = enrich.TeacherBundle(8)
        x = torch.randn(1, 8000)
        z = torch.randn(1, 125, 8, requires_grad=True)
        loss, _ = enrich.distill_loss(z, b, x)
        grads = torch.autograd.grad(loss, list(b.teachers.parameters()), allow_unused=True)
        zero = all(g is None or float(g.abs().max()) == 0 for g in grads)
        return zero, {"teacher_grads_zero": zero}

    def stage_order():
        m = pipeline.build_tokenizer("toy")
        try:
            pipeline.run_stage(pipeline.make_plan("II", 1), m, dsp.synth_corpus(0, 1))
        except pipeline.StageOrderError:
            return True, {}
        return False, {"error": "stage II ran without stage I"}

    def adamw_oracle():
        p = torch.nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            p.weight.fill_(0.5)
        ps = numerics.ParameterSet(p)
        cfg = pipeline.OptimConfig(lr=1e-2, weight_decay=0.0)
        st = pipeline.OptimizerState(cfg)
        g = torch.tensor([[0.3]])
        pipeline.adamw_step(ps, {"weight": g}, st)
        b1, b2 = cfg.betas
        m, v = (1 - b1) * 0.3, (1 - b2) * 0.09
        expect = 0.5 - 1e-2 * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + cfg.eps)
        err = abs(float(p.weight) - expect)
        return err < 1e-7, {"error": err}

    def checkpoint_roundtrip():
        import tempfile, os
        m = pipeline.build_tokenizer("toy")
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "m.htok")
            pipeline.save_tokenizer(m, path)
            m2 = pipeline.load_tokenizer(path)
        a, b = numerics.param_digest(m), numerics.param_digest(m2)
        return a == b, {"digest": a}

    def patch_roundtrip():
        z = torch.randn(9, 8)
        ps = unified.patchify(z, 4)
        return ps.K == 3 and ps.n_pad == 3 and torch.equal(unified.unpatchify(ps), z), {"K": ps.K}

    def factorization():
        torch.manual_seed(0)
        m = unified.UnifiedModel(unified.UnifiedConfig(width=32, layers=1, dit_width=32, dit_layers=1,
                                                       encoder_width=32, encoder_layers=1))
        with torch.no_grad():
            m.dit.out.weight.normal_(0, 0.1)
        ok, worst = factorization_probe(m)
        return ok, {"max_future_grad": worst}

    def layout_arithmetic():
        lay = unified.build_layout("tts", [1, 2, 3], unified.patchify(torch.zeros(8, 8), 4))
        return len(lay) == 10 and int(lay.loss_mask.sum()) == 3, {"trace": lay.trace()}

    return [
        ("numerics.non_finite_guard", numerics_finite), ("codec.shapes", codec_shapes),
        ("codec.flow_inverse", flow_inverse), ("adversary.lsgan_example", gan_example),
        ("enrich.teacher_stop_gradient", teacher_stop_gradient), ("pipeline.stage_order", stage_order),
        ("pipeline.adamw_oracle", adamw_oracle), ("pipeline.checkpoint_roundtrip", checkpoint_roundtrip),
        ("unified.patch_roundtrip", patch_roundtrip), ("unified.factorization", factorization),
        ("unified.layout_arithmetic", layout_arithmetic),
    ]


def factorization_probe(model: unified.UnifiedModel, T: int = 16, seed: int = 0) -> tuple[bool, float]:
    """Gradient of each patch's flow-matching loss w.r.t. later latent frames must be exactly zero."""
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(T, model.cfg.latent_dim, generator=gen, requires_grad=True)
    ps = unified.patchify(z, model.cfg.patch)
    lay = unified.build_layout("tts", [1, 2, 3], ps)
    h, _ = model.run([lay])[0]
    K, P = ps.K, ps.P
    eps = torch.randn(ps.patches.shape, generator=gen)
    t = torch.rand(K, generator=gen)
    g, k = torch.zeros(K, dtype=torch.long), torch.arange(K)
    v = model.dit(unified.interpolate(ps.patches, eps, t), t, g, k, h[lay.audio_pos - 1], ps.patches, g, k)
    worst = 0.0
    nonzero_past = False
    for kk in range(K):
        loss = unified.fm_loss(v[kk], ps.patches[kk], eps[kk])
        (grad,) = torch.autograd.grad(loss, z, retain_graph=True)
        worst = max(worst, float(grad[(kk + 1) * P:].abs().max()) if (kk + 1) * P < T else 0.0)
        if kk > 0 and float(grad[: kk * P].abs().max()) > 0:
            nonzero_past = True
    return worst == 0.0 and nonzero_past, worst


def check_structural() -> list[CheckResult]:
    return [_timed(name, fn) for name, fn in _structural()]


def run_verify(what: str, paper_preset: bool = False, seeds: int = 20, composite_seeds: int = 3,
               stage1: str | None = None, stage2: str | None = None) -> list[CheckResult]:
    results: list[CheckResult] = []
    if what in ("gradients", "all"):
        results.append(check_gradients(seeds, composite_seeds))
    if what in ("causality", "all"):
        results.append(check_causality("toy"))
        if paper_preset:
            results.append(check_causality("paper", n_probes=16))
    if what in ("kl", "all"):
        results.append(check_kl())
    if what in ("bound", "all"):
        results.append(check_bound(stage1, stage2))
    if what == "all":
        results.extend(check_structural())
    return results
