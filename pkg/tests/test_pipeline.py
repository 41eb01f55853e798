import math
from dataclasses import replace

import pytest
import torch
from hypothesis import given, settings, strategies as st

from holitok.dsp import synth_corpus
from holitok.numerics import NonFiniteError, ParameterSet, param_digest
from holitok.pipeline import (ABLATIONS, Ablation, LossWeights, OptimizerState, PlanError, RunConfig, StageOrderError,
                              StagePlan, TrainingLog, adamw_step, build_tokenizer, downstream_optim, fidelity_bound,
                              make_plan, run_stage, tokenizer_corpus_config, tokenizer_optim, train_tokenizer,
                              lr_schedule, weighted_total, TEACHERS)


# ---------------------------------------------------------------------------
# optimizer


class Scalar(torch.nn.Module):
    def __init__(self, v):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor([v], dtype=torch.float64))
        self.f = torch.nn.Parameter(torch.tensor([v], dtype=torch.float64))


def test_adamw_zero_grad_zero_decay_unchanged():
    m = Scalar(0.7)
    st_ = OptimizerState(tokenizer_optim(weight_decay=0.0))
    adamw_step(ParameterSet(m), {"w": torch.zeros(1, dtype=torch.float64)}, st_)
    assert float(m.w) == 0.7


@given(g=st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3), p0=st.floats(-2, 2), steps=st.integers(1, 4))
@settings(max_examples=30, deadline=None)
def test_adamw_matches_scalar_recursion(g, p0, steps):
    cfg = tokenizer_optim(lr=1e-3, weight_decay=0.01)
    m = Scalar(p0)
    st_ = OptimizerState(cfg)
    p, mom, vel = p0, 0.0, 0.0
    b1, b2 = cfg.betas
    for t in range(1, steps + 1):
        lr = 1e-3 * cfg.gamma ** (t - 1)
        adamw_step(ParameterSet(m), {"w": torch.tensor([g], dtype=torch.float64)}, st_)
        p = p * (1 - lr * cfg.weight_decay)
        mom = b1 * mom + (1 - b1) * g
        vel = b2 * vel + (1 - b2) * g * g
        p = p - lr / (1 - b1 ** t) * mom / (math.sqrt(vel / (1 - b2 ** t)) + cfg.eps)
    assert abs(float(m.w) - p) < 1e-12


def test_adamw_frozen_untouched_and_no_moments():
    m = Scalar(0.3)
    ps = ParameterSet(m, {"f"})
    st_ = OptimizerState(tokenizer_optim())
    adamw_step(ps, {"w": torch.ones(1, dtype=torch.float64), "f": torch.ones(1, dtype=torch.float64)}, st_)
    assert float(m.f) == 0.3 and "f" not in st_.exp_avg
    assert st_.exp_avg["w"].shape == m.w.shape


def test_adamw_clips_and_rejects_nonfinite():
    m = Scalar(0.0)
    st_ = OptimizerState(tokenizer_optim(clip=2.0))
    adamw_step(ParameterSet(m), {"w": torch.tensor([1e3], dtype=torch.float64)}, st_)
    assert st_.last_grad_norm == pytest.approx(1e3)
    # first moment stores the clipped gradient
    assert float(st_.exp_avg["w"]) == pytest.approx((1 - 0.8) * 2.0, rel=1e-6)
    with pytest.raises(NonFiniteError):
        adamw_step(ParameterSet(m), {"w": torch.tensor([float("nan")], dtype=torch.float64)}, st_)


def test_optimizer_constants():
    t, d = tokenizer_optim(), downstream_optim(lr=1e-4)
    assert (t.betas, t.eps, t.clip, t.gamma, t.floor, t.lr) == ((0.8, 0.99), 1e-6, 500.0, 0.9999996, 1e-6, 1e-4)
    assert (d.betas, d.clip, d.warmup, d.min_lr, d.schedule) == ((0.9, 0.99), 2.0, 5000, 1e-5, "cosine")


def test_lr_schedule_examples():
    cfg = tokenizer_optim()
    assert lr_schedule(0, cfg=cfg) == 1e-4
    # 0.9999996**1e7 = exp(1e7 * log1p(-4e-7)), about e**-4, so 1e7 steps is still above the floor
    assert lr_schedule(10 ** 7, cfg=cfg) == pytest.approx(1e-4 * math.exp(1e7 * math.log1p(-4e-7)), rel=1e-9)
    # the floor takes over once gamma**step < 1e-2
    cross = math.ceil(math.log(1e-2) / math.log1p(-4e-7))
    assert lr_schedule(cross + 1, cfg=cfg) == 1e-6
    assert lr_schedule(cross - 10, cfg=cfg) > 1e-6
    d = downstream_optim(lr=3e-4)
    assert lr_schedule(5000, cfg=d) == 3e-4
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg=cfg)
    with pytest.raises(ValueError):
        lr_schedule(0, mode="step", cfg=cfg)


@given(s=st.integers(0, 200_000))
@settings(max_examples=60, deadline=None)
def test_cosine_monotone_after_warmup(s):
    d = downstream_optim(lr=3e-4)
    if s >= 5000:
        assert lr_schedule(s + 1, cfg=d) <= lr_schedule(s, cfg=d)
    assert d.min_lr - 1e-15 <= lr_schedule(max(s, 5000), cfg=d) <= 3e-4


def test_cosine_continuous_at_warmup():
    d = downstream_optim(lr=3e-4)
    assert abs(lr_schedule(4999, cfg=d) - lr_schedule(5000, cfg=d)) < 1e-7
    assert lr_schedule(d.total_steps, cfg=d) == pytest.approx(1e-5)


# ---------------------------------------------------------------------------
# plans and weights


def test_plans():
    p1, p2, p3 = make_plan("I", 3), make_plan("II", 3), make_plan("III", 3)
    assert p1.losses == {"spec", "adv", "fm"} and p1.beta is None
    assert {"codec.encoder", "codec.decoder"} <= p2.frozen and p2.beta == 0.1
    assert p3.losses == {"spec", "adv", "fm", "kl", "distill", "sup"} and p3.beta == 7.0 > p2.beta
    assert make_plan("III", 1, ablation=ABLATIONS["no_both"]).losses == {"spec", "adv", "fm", "kl"}
    with pytest.raises(PlanError):
        StagePlan("II", 1, frozenset({TEACHERS}), frozenset({"spec", "adv", "fm", "kl"}), 0.1).validate()
    with pytest.raises(PlanError):
        StagePlan("I", 1, frozenset({TEACHERS}), frozenset({"spec", "adv", "fm", "kl"}), None).validate()
    with pytest.raises(PlanError):
        StagePlan("III", 1, frozenset(), frozenset({"spec", "adv", "fm", "kl"}), 7.0).validate()
    with pytest.raises(PlanError):
        make_plan("IV", 1)


def test_weighted_total_matches_table():
    one = torch.tensor(1.0)
    terms = {k: one for k in ("spec", "adv", "fm", "kl", "distill_frame", "distill_utt", "sup")}
    w = LossWeights()
    assert float(weighted_total(make_plan("I", 1), terms, w)) == 45 + 1 + 2
    assert float(weighted_total(make_plan("II", 1), terms, w)) == pytest.approx(48.1)
    assert float(weighted_total(make_plan("III", 1), terms, w)) == 48 + 7 + 1 + 1 + 1


def test_run_config_roundtrip():
    cfg = RunConfig(stage="III", steps=7, ablation=ABLATIONS["no_distill"], overrides={"latent_dim": 4})
    d = cfg.to_dict()
    assert d["ablation"]["distill"] == "off"
    assert RunConfig.from_dict(d) == cfg


# ---------------------------------------------------------------------------
# training


SMALL = dict(batch_size=2, crop_samples=1024)


@pytest.fixture(scope="module")
def data():
    return synth_corpus(0, 4, tokenizer_corpus_config())


def test_stage_order(data):
    with pytest.raises(StageOrderError, match="stage 1 checkpoint required"):
        train_tokenizer(RunConfig(stage="II", steps=1))
    m = build_tokenizer()
    with pytest.raises(StageOrderError, match="stage 2 checkpoint required"):
        run_stage(make_plan("III", 1), m, data)


def test_stage_two_freezes_and_stage_three_logs(data):
    m = build_tokenizer(seed=0)
    run_stage(make_plan("I", 1), m, data, cfg=RunConfig(steps=1, **SMALL))
    enc, dec = param_digest(m, "codec.encoder."), param_digest(m, "codec.decoder.")
    bott = param_digest(m, "codec.bottleneck.")
    run_stage(make_plan("II", 3), m, data, cfg=RunConfig(stage="II", steps=3, **SMALL))
    assert (param_digest(m, "codec.encoder."), param_digest(m, "codec.decoder.")) == (enc, dec)
    assert param_digest(m, "codec.bottleneck.") != bott
    teach = param_digest(m, "distill.teachers.")
    log = run_stage(make_plan("III", 2), m, data, cfg=RunConfig(stage="III", steps=2, **SMALL))
    for k in ("kl", "distill", "sup", "spec", "adv", "fm"):
        assert len(log.column(k)) == 2 and all(math.isfinite(v) for v in log.column(k))
    assert param_digest(m, "distill.teachers.") == teach
    assert m.completed == 3


def test_ablation_drops_terms(data):
    m = build_tokenizer(seed=0)
    m.stages_done.fill_(2)
    plan = make_plan("III", 1, ablation=ABLATIONS["no_supervise"])
    log = run_stage(plan, m, data, cfg=RunConfig(stage="III", steps=1, ablation=ABLATIONS["no_supervise"], **SMALL))
    assert "sup" not in log.columns and "distill" in log.columns


def test_causal_supervision_flag_applies_at_stage_three(data):
    causal = Ablation(causal_supervision_encoder=True)
    assert build_tokenizer(causal_supervision_encoder=True).supervision.causal_encoder
    m = build_tokenizer(seed=0)
    m.stages_done.fill_(2)
    assert not m.supervision.causal_encoder
    m, _ = train_tokenizer(RunConfig(stage="III", steps=1, ablation=causal, **SMALL), m, data)
    assert m.supervision.causal_encoder and m.completed == 3


def test_same_seed_identical_log_csv(data, tmp_path):
    torch.set_default_dtype(torch.float64)
    try:
        paths = []
        for i in range(2):
            m = build_tokenizer(seed=3).double()
            log = run_stage(make_plan("I", 2), m, data, seed=5, cfg=RunConfig(steps=2, seed=5, **SMALL))
            paths.append(tmp_path / f"log{i}.csv")
            log.to_csv(paths[-1])
    finally:
        torch.set_default_dtype(torch.float32)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert TrainingLog.from_csv(paths[0]) == log


# ---------------------------------------------------------------------------
# fidelity bound


def _linear_case(seed=0, D=6, N=10):
    g = torch.Generator().manual_seed(seed)
    W = torch.randn(N, D, generator=g, dtype=torch.float64)
    A = torch.randn(D, N, generator=g, dtype=torch.float64) * 0.3
    xs = [torch.randn(N, generator=g, dtype=torch.float64) for _ in range(5)]
    shift = torch.randn(D, generator=g, dtype=torch.float64) * 0.1
    ls = torch.full((D,), -2.0, dtype=torch.float64)
    enc = lambda x: A @ x
    post = lambda z: (z + shift, ls)
    dec = lambda z: W @ z
    return W, xs, enc, post, dec, shift, ls


def test_bound_linear_decoder_oracle():
    W, xs, enc, post, dec, shift, ls = _linear_case()
    rep = fidelity_bound(xs, enc, post, dec, n_probes=64, n_samples=400)
    op = float(torch.linalg.matrix_norm(W, 2))
    assert rep.L_hat <= op * (1 + 1e-9)
    assert rep.lhs <= 2 * rep.eps_ae + 2 * op ** 2 * rep.delta_shift
    assert rep.passed and rep.statistical
    # closed-form expectations of both sides
    var = torch.exp(2 * ls)
    exp_shift = float((shift ** 2).sum() + var.sum())
    exp_lhs = sum(float(((x - W @ (enc(x) + shift)) ** 2).sum()) for x in xs) / len(xs) \
        + float((W ** 2 * var).sum())
    assert rep.delta_shift == pytest.approx(exp_shift, rel=0.05)
    assert rep.lhs == pytest.approx(exp_lhs, rel=0.05)


def test_bound_degenerate_zero_shift():
    W, xs, enc, post, dec, _, ls = _linear_case()
    rep = fidelity_bound(xs, enc, lambda z: (z, ls), dec, noise_scale=0.0, n_probes=8)
    assert rep.delta_shift == 0.0
    assert rep.lhs == pytest.approx(rep.eps_ae, rel=1e-12)
    assert rep.lhs <= 2 * rep.eps_ae


def test_bound_shift_monotone_in_noise_scale():
    W, xs, enc, post, dec, *_ = _linear_case()
    shifts = [fidelity_bound(xs, enc, post, dec, noise_scale=s, n_probes=2, n_samples=200, seed=1).delta_shift
              for s in (0.0, 0.5, 1.0, 2.0, 4.0)]
    assert all(b >= a for a, b in zip(shifts, shifts[1:]))


def test_bound_empty_set():
    with pytest.raises(ValueError):
        fidelity_bound([], None, None, None)
