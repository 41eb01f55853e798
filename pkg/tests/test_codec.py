import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from holitok import codec
from holitok.codec import Codec, FlowStack, PosteriorParams, paper_config, toy_config
from holitok.numerics import ShapeError, gradient_check


@pytest.fixture(scope="module")
def toy():
    torch.manual_seed(0)
    return Codec(toy_config()).double()


def test_presets():
    t, p = toy_config(), paper_config()
    assert (t.hop, t.frame_rate, t.channels[-1]) == (64, 125, 64)
    assert (p.hop, p.frame_rate, p.channels[-1]) == (1920, 25, 768)
    assert t.lookahead_frames == p.lookahead_frames == 2
    with pytest.raises(ValueError):
        toy_config(strides=[2, 2], kernels=[4])
    with pytest.raises(ValueError):
        toy_config(sample_rate=8001)
    assert codec.CodecConfig.from_dict(t.to_dict()) == t


def test_toy_shapes(toy):
    with torch.no_grad():
        z = toy.encode(torch.zeros(8000, dtype=torch.float64))
        assert z.shape == (125, 8)
        assert toy.decode(z).shape == (8000,)
    with pytest.raises(ShapeError):
        toy.encode(torch.zeros(0, dtype=torch.float64))
    with pytest.raises(ShapeError):
        toy.decode(torch.zeros(4, 7, dtype=torch.float64))


@given(n=st.integers(1, 700))
@settings(max_examples=25, deadline=None)
def test_length_contract(n):
    torch.manual_seed(0)
    m = Codec(toy_config())
    with torch.no_grad():
        y = m.decode(m.encode(torch.randn(n) * 0.1))
    assert y.shape[-1] == math.ceil(n / 64) * 64


def test_posterior_zero_input_zero_bias(toy):
    b = codec.Bottleneck(toy_config())
    with torch.no_grad():
        b.head.bias.zero_()
    p = b(torch.zeros(1, 6, 8))
    assert float(p.mean.abs().max()) == 0.0 and float(p.log_scale.abs().max()) == 0.0


def test_posterior_log_scale_clamped():
    b = codec.Bottleneck(toy_config())
    with torch.no_grad():
        b.head.bias[8:] = 50.0
    assert float(b(torch.zeros(1, 3, 8)).log_scale.max()) == 4.0
    with torch.no_grad():
        b.head.bias[8:] = -50.0
    assert float(b(torch.zeros(1, 3, 8)).log_scale.min()) == -9.0


def test_posterior_causal(toy):
    z = torch.randn(1, 10, 8, dtype=torch.float64)
    with torch.no_grad():
        toy.bottleneck.head.weight.normal_(0, 0.1)
        base = toy.posterior(z)
        for t in range(10):
            zp = z.clone()
            zp[0, t] += 1.0
            p = toy.posterior(zp)
            assert torch.equal(p.mean[0, :t], base.mean[0, :t])
            assert torch.equal(p.log_scale[0, :t], base.log_scale[0, :t])
        toy.bottleneck.head.weight.zero_()


def test_reparameterization():
    mu = torch.randn(4, 3, requires_grad=True)
    ls = torch.zeros(4, 3, requires_grad=True)
    p = PosteriorParams(mu, ls)
    assert torch.equal(codec.sample_reparameterized(p, torch.zeros(4, 3)), mu)
    assert torch.equal(codec.sample_reparameterized(p, torch.ones(4, 3)), mu + 1)
    eps = torch.randn(4, 3, requires_grad=True)
    codec.sample_reparameterized(p, eps).sum().backward()
    assert eps.grad is None and mu.grad is not None and ls.grad is not None
    with pytest.raises(ShapeError):
        codec.sample_reparameterized(p, torch.zeros(2, 3))


def test_reparameterized_variance_monte_carlo():
    g = torch.Generator().manual_seed(0)
    ls = torch.tensor([-1.0, 0.0, 0.7], dtype=torch.float64)
    p = PosteriorParams(torch.zeros(3, dtype=torch.float64), ls)
    n = 100_000
    z = codec.sample_reparameterized(p, torch.randn(n, 3, generator=g, dtype=torch.float64))
    var = z.var(0)
    target = torch.exp(2 * ls)
    se = target * math.sqrt(2 / (n - 1))  # standard error of a Gaussian sample variance
    assert bool(((var - target).abs() < 3 * se).all())


def test_kl_closed_form_values():
    p0 = PosteriorParams(torch.zeros(1, 5), torch.zeros(1, 5))
    assert float(codec.kl_closed_form(p0)) == 0.0
    p1 = PosteriorParams(torch.ones(1, 5, dtype=torch.float64), torch.zeros(1, 5, dtype=torch.float64))
    assert float(codec.kl_closed_form(p1)) == pytest.approx(0.5 * 5, abs=1e-15)


def test_kl_mc_identity_flow_within_3se():
    g = torch.Generator().manual_seed(1)
    for _ in range(5):
        p = PosteriorParams(torch.randn(1, 6, generator=g, dtype=torch.float64),
                            0.5 * torch.randn(1, 6, generator=g, dtype=torch.float64))
        terms = codec.kl_mc_terms(p, None, torch.randn(20_000, 1, 6, generator=g, dtype=torch.float64)).flatten()
        se = float(terms.std()) / math.sqrt(terms.numel())
        assert abs(float(terms.mean()) - float(codec.kl_closed_form(p))) < 3 * se


def test_kl_nonnegative_in_expectation():
    g = torch.Generator().manual_seed(2)
    vals = []
    for _ in range(100):
        p = PosteriorParams(torch.randn(1, 4, generator=g, dtype=torch.float64),
                            0.5 * torch.randn(1, 4, generator=g, dtype=torch.float64))
        vals.append(float(codec.kl_with_flow(p, None, n_mc=16, generator=g)))
    v = torch.tensor(vals)
    assert float(v.mean()) >= -3 * float(v.std()) / 10


def test_flow_round_trip_and_identity_logdet():
    torch.manual_seed(0)
    f = FlowStack(8, 4, 16).double()
    z = torch.randn(5, 8, dtype=torch.float64)
    y, ld = f(z)
    assert torch.equal(y, z) and float(ld.abs().max()) == 0.0
    f.randomize(0.5)
    y, ld = f(z)
    back = f.inverse(y)
    assert float((back - z).norm() / z.norm()) < 1e-6
    # log-det equals the log |det| of the numerical Jacobian
    J = torch.autograd.functional.jacobian(lambda v: f(v.unsqueeze(0))[0][0], z[0])
    assert float(torch.linalg.slogdet(J)[1]) == pytest.approx(float(ld[0]), abs=1e-10)


def test_kl_with_flow_invertibility_check():
    torch.manual_seed(0)
    f = FlowStack(4, 2, 8).randomize(0.3)
    p = PosteriorParams(torch.zeros(2, 4), torch.zeros(2, 4))
    assert torch.isfinite(codec.kl_with_flow(p, f, n_mc=2, check_inverse=True))


def test_posterior_kl_gradient(f64):
    torch.manual_seed(0)
    m = Codec(toy_config())
    with torch.no_grad():
        m.bottleneck.head.weight.normal_(0, 0.05)
    m.flow.randomize(0.2)
    z_in = torch.randn(1, 5, 8)
    noise = torch.randn(2, 1, 5, 8)
    params = {n: p for n, p in m.named_parameters() if n.startswith(("bottleneck.head", "bottleneck.proj", "flow"))}
    rep = gradient_check(lambda: codec.kl_with_flow(m.posterior(z_in), m.flow, noise=noise), params,
                         max_entries=6, tol=1e-3)
    assert rep.passed, str(rep)


def test_decoder_zero_latent_zero_output():
    torch.manual_seed(0)
    m = Codec(toy_config())
    with torch.no_grad():
        for mod in m.decoder.modules():
            if hasattr(mod, "bias") and isinstance(mod.bias, torch.nn.Parameter):
                mod.bias.zero_()
        assert float(m.decode(torch.zeros(6, 8)).abs().max()) == 0.0


def test_causality_probe_toy_exhaustive(toy):
    rep = codec.causality_probe(toy)
    assert rep.passed, rep
    assert (rep.encoder_lookahead, rep.decoder_lookahead) == (2, 2)


def test_causality_probe_negative_control():
    torch.manual_seed(0)
    m = Codec(toy_config()).double()
    conv = m.encoder.blocks[1].res[0].conv1
    conv.left_pad, conv.right_pad = 1, 1  # symmetric padding: sees the future
    rep = codec.causality_probe(m, n_probes=64)
    assert not rep.passed
    assert any("blocks.1.res.0.conv1" in v for v in rep.layer_violations)


def test_encoder_last_sample_affects_only_final_frames(toy):
    x = torch.randn(640, dtype=torch.float64) * 0.3
    with torch.no_grad():
        base = toy.encode(x)
        xp = x.clone()
        xp[-1] += 1.0
        d = (toy.encode(xp) - base).abs().amax(-1)
    T = base.shape[0]
    assert float(d[: T - 1 - 2].max()) == 0.0
    assert float(d[T - 1]) > 0
