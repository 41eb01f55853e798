import dataclasses
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from holitok import dsp
from holitok.dsp import MelConfig, Waveform


CFG = MelConfig(64, 16, 20, 8000)


def test_stft_zero_and_frame_count():
    mag = dsp.stft_magnitude(torch.zeros(1000), CFG)
    assert mag.shape == (33, 1000 // 16 + 1)
    assert float(mag.abs().max()) == 0.0


def test_stft_too_short():
    with pytest.raises(ValueError):
        dsp.stft_magnitude(torch.zeros(20), CFG)


def test_bin_centered_sine_energy_matches_hann_closed_form():
    # the Hann window's DFT has taps (1/4, 1/2, 1/4), so a bin-centred sine puts
    # (1/2)^2 / ((1/2)^2 + 2 (1/4)^2) = 2/3 of its energy in the centre bin and
    # all of it within one bin either side
    k0 = 5
    n = np.arange(4096)
    x = torch.tensor(np.sin(2 * np.pi * k0 * n / CFG.fft_size), dtype=torch.float64)
    mag = dsp.stft_magnitude(x, CFG)[:, 4:-4]  # interior frames, away from reflection padding
    e = (mag ** 2).sum(-1)
    assert abs(float(e[k0] / e.sum()) - 2 / 3) < 1e-6
    assert float(e[k0 - 1:k0 + 2].sum() / e.sum()) > 0.9


def _frames_numpy(x: np.ndarray, cfg: MelConfig) -> np.ndarray:
    pad = cfg.fft_size // 2
    xp = np.pad(x, pad, mode="reflect")
    n_frames = len(x) // cfg.hop + 1
    w = np.hanning(cfg.fft_size + 1)[:-1]  # periodic Hann
    return np.stack([xp[i * cfg.hop:i * cfg.hop + cfg.fft_size] * w for i in range(n_frames)])


def test_parseval_on_white_noise():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(8000)
    mag = dsp.stft_magnitude(torch.tensor(x), CFG).numpy()
    # one-sided spectrum -> full-spectrum energy
    full = (mag[0] ** 2 + mag[-1] ** 2 + 2 * (mag[1:-1] ** 2).sum(0)).sum()
    frames = _frames_numpy(x, CFG)
    exact = CFG.fft_size * (frames ** 2).sum()
    assert abs(full / exact - 1) < 1e-9
    w = np.hanning(CFG.fft_size + 1)[:-1]
    predicted = CFG.fft_size * (w ** 2).sum() * frames.shape[0]  # unit-variance noise
    assert abs(full / predicted - 1) < 0.05


def test_filterbank_structure():
    for cfg in dsp.toy_mel_scales() + dsp.paper_mel_scales():
        fb = dsp.mel_filterbank(cfg, torch.float64).numpy()
        assert (fb >= 0).all() and (fb.sum(1) > 0).all()
        support = fb > 0
        for m in range(cfg.n_mels - 2):
            assert not (support[m] & support[m + 2]).any()
        # a single-bin impulse reaches at most two mel channels
        assert support.sum(0).max() <= 2
    assert float(dsp.mel_project(torch.zeros(33, 4), CFG).abs().max()) == 0.0


def test_mel_config_validation():
    with pytest.raises(ValueError):
        MelConfig(64, 128, 20, 8000)
    with pytest.raises(ValueError):
        MelConfig(64, 16, 0, 8000)
    with pytest.raises(ValueError):
        MelConfig(64, 16, 20, 8000, f_max=5000)


def test_mel_loss_basic_properties():
    scales = dsp.toy_mel_scales()
    t = torch.arange(4000) / 8000
    x = torch.sin(2 * torch.pi * 440 * t)
    assert float(dsp.multiscale_mel_loss(x, x, scales)) == 0.0
    assert float(dsp.multiscale_mel_loss(x, torch.zeros_like(x), scales)) > 0
    with pytest.raises(ValueError):
        dsp.multiscale_mel_loss(x, x, [])
    with pytest.raises(ValueError):
        dsp.multiscale_mel_loss(x, x[:3000], scales)
    # shorter signal is zero-padded within one hop
    assert float(dsp.multiscale_mel_loss(x, x[:-10], scales)) >= 0


def test_mel_loss_monotone_along_interpolation():
    scales = dsp.toy_mel_scales()
    g = torch.Generator().manual_seed(0)
    x = dsp.synth_corpus(0, 1)[0].waveform.tensor(torch.float64)
    noise = 0.3 * torch.randn(x.shape, generator=g, dtype=torch.float64)
    losses = [float(dsp.multiscale_mel_loss(x, (1 - lam) * noise + lam * x, scales)) for lam in (0, 0.5, 1)]
    assert losses[0] > losses[1] > losses[2] == 0.0


@given(seed=st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_mel_loss_symmetric(seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(600, generator=g, dtype=torch.float64)
    b = torch.randn(600, generator=g, dtype=torch.float64)
    scales = dsp.toy_mel_scales()
    assert abs(float(dsp.multiscale_mel_loss(a, b, scales)) - float(dsp.multiscale_mel_loss(b, a, scales))) < 1e-12


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.array([]), 8000)
    with pytest.raises(ValueError):
        Waveform(np.array([np.nan]), 8000)


def test_corpus_determinism_and_structure():
    a = dsp.synth_corpus(7, 5)
    b = dsp.synth_corpus(7, 5)
    cfg = dsp.CorpusConfig()
    for u, v in zip(a, b):
        assert np.array_equal(u.waveform.samples, v.waveform.samples)
        assert u.transcript == v.transcript
        assert len(u.waveform) == len(u.transcript) * cfg.segment_samples
        assert set(u.labels) == set(cfg.tasks)
        assert u.labels["classify"] == (dsp.CLASS_BASE + dsp.utterance_class(u.transcript),)
        assert np.abs(u.waveform.samples).max() <= 1.0
    with pytest.raises(ValueError):
        dsp.synth_corpus(0, 0)


def test_corpus_independent_of_worker_count():
    a = dsp.synth_corpus(3, 6, workers=1)
    b = dsp.synth_corpus(3, 6, workers=3)
    assert all(np.array_equal(u.waveform.samples, v.waveform.samples) for u, v in zip(a, b))


def _detect_symbols(u, cfg):
    """Reference detector: strongest spectral peak per segment mapped back to a symbol."""
    L = cfg.segment_samples
    x = u.waveform.samples.astype(np.float64)
    out = []
    for i in range(len(x) // L):
        seg = x[i * L:(i + 1) * L] * np.hanning(L)
        spec = np.abs(np.fft.rfft(seg, 8 * L))
        f = np.argmax(spec) * cfg.sample_rate / (8 * L)
        out.append(int(round((f - cfg.base_freq) / cfg.freq_step)))
    return tuple(out)


def test_symbol_detector_recovers_transcripts_on_clean_corpus():
    cfg = dataclasses.replace(dsp.CorpusConfig(), noise_amp=0.0)
    utts = dsp.synth_corpus(11, 40, cfg)
    assert all(_detect_symbols(u, cfg) == u.transcript for u in utts)


def test_pcm_and_corpus_round_trip(tmp_path):
    utts = dsp.synth_corpus(1, 3)
    dsp.write_pcm(tmp_path / "a.f32", utts[0].waveform)
    w = dsp.read_pcm(tmp_path / "a.f32")
    assert w.sample_rate == 8000 and np.array_equal(w.samples, utts[0].waveform.samples)
    assert (tmp_path / "a.f32").stat().st_size == 4 * len(w)
    manifest = dsp.export_corpus(utts, tmp_path / "corpus")
    entries = json.loads(manifest.read_text())
    assert {"id", "transcript", "labels", "sample_rate"} <= set(entries[0])
    back = dsp.import_corpus(tmp_path / "corpus")
    for u, v in zip(utts, back):
        assert u.id == v.id and u.transcript == v.transcript and u.labels == v.labels
        assert np.array_equal(u.waveform.samples, v.waveform.samples)


def test_stack_batch_pads_and_truncates():
    utts = dsp.synth_corpus(0, 2)
    n0 = len(utts[0].waveform)
    assert n0 < 10_000
    b = dsp.stack_batch(utts, 10_000, torch.float64)
    assert b.shape == (2, 10_000)
    assert float(b[0, n0:].abs().sum()) == 0.0
    assert torch.equal(b[0, :n0], utts[0].waveform.tensor(torch.float64))
    assert dsp.stack_batch(utts, 100).shape == (2, 100)
