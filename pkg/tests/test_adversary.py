import torch
from hypothesis import given, settings, strategies as st

from holitok.adversary import (PAPER_PERIODS, TOY_PERIODS, DiscriminatorBank, PeriodDiscriminator,
                               feature_matching_loss, gan_losses)


def test_toy_bank_structure():
    torch.manual_seed(0)
    bank = DiscriminatorBank(TOY_PERIODS)
    scores, feats = bank(torch.randn(1, 8000))
    assert len(scores) == 2 and len(feats) == 2
    assert all(len(f) >= 3 for f in feats)
    assert TOY_PERIODS == (2, 3) and PAPER_PERIODS == (2, 3, 5, 7, 11)


def test_period_fold():
    d = PeriodDiscriminator(3)
    _, feats = d(torch.randn(2, 100))  # padded to 102 -> 34 rows of 3
    assert feats[0].shape[-1] == 3 and feats[0].shape[0] == 2


def test_zero_input_zero_bias_zero_scores():
    torch.manual_seed(0)
    bank = DiscriminatorBank(TOY_PERIODS)
    with torch.no_grad():
        for m in bank.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.bias.zero_()
    scores, _ = bank(torch.zeros(1, 800))
    assert all(float(s.abs().max()) == 0.0 for s in scores)


def test_lsgan_examples():
    ones, zeros = [torch.ones(3, 5)], [torch.zeros(3, 5)]
    lg, ld = gan_losses(ones, zeros)
    assert float(ld) == 0.0 and float(lg) == 1.0
    lg, _ = gan_losses(ones, ones)
    assert float(lg) == 0.0


@given(r=st.floats(-3, 3), f=st.floats(-3, 3))
@settings(max_examples=50, deadline=None)
def test_lsgan_scalar_formula(r, f):
    lg, ld = gan_losses([torch.full((4,), r, dtype=torch.float64)], [torch.full((4,), f, dtype=torch.float64)])
    assert abs(float(ld) - ((r - 1) ** 2 + f ** 2)) < 1e-12
    assert abs(float(lg) - (f - 1) ** 2) < 1e-12


def test_feature_matching_identical_is_zero():
    torch.manual_seed(0)
    bank = DiscriminatorBank(TOY_PERIODS)
    x = torch.randn(1, 400)
    _, f = bank(x)
    assert float(feature_matching_loss(f, f)) == 0.0


def test_generator_update_does_not_touch_discriminator():
    torch.manual_seed(0)
    bank = DiscriminatorBank(TOY_PERIODS)
    fake = torch.randn(1, 400, requires_grad=True)
    real = torch.randn(1, 400)
    rs, rf = bank(real)
    fs, ff = bank(fake)
    lg, _ = gan_losses(rs, fs)
    gen_loss = 1.0 * lg + 2.0 * feature_matching_loss(rf, ff)
    g_fake = torch.autograd.grad(gen_loss, fake, retain_graph=True)[0]
    assert float(g_fake.abs().sum()) > 0
    # discriminator loss on detached fake gives no gradient to the generator input
    _, ld = gan_losses(bank(real)[0], bank(fake.detach())[0])
    assert torch.autograd.grad(ld, fake, allow_unused=True)[0] is None


def test_feature_matching_detaches_real():
    real = [[torch.randn(4, requires_grad=True)]]
    fake = [[torch.randn(4, requires_grad=True)]]
    feature_matching_loss(real, fake).backward()
    assert real[0][0].grad is None and fake[0][0].grad is not None
