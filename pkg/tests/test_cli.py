import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from holitok import dsp
from holitok.checkpoint import write_tensors
from holitok.cli import main, rate_info
from holitok.pipeline import build_tokenizer, save_tokenizer

import torch


def test_report_cr_paper(capsys):
    assert main(["report-cr"]) == 0
    out = capsys.readouterr().out
    assert "CR = 7.5" in out and "TPS = 25" in out


def test_report_cr_toy_json(capsys):
    assert main(["report-cr", "--preset", "toy", "--json"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["CR"] == 3.25 and info["TPS"] == 125


@given(fs=st.integers(2, 200_000), fz=st.integers(1, 200), dz=st.integers(1, 512))
@settings(max_examples=100, deadline=None)
def test_rate_formula(fs, fz, dz):
    info = rate_info(fs, fz, dz)
    bits = math.ceil(math.log2(fs)) if fs & (fs - 1) else int(math.log2(fs))
    assert info.CR == Fraction(fs * bits, fz * dz * 32)
    assert rate_info(fs, fz, 2 * dz).CR == info.CR / 2
    assert info.TPS == fz


def test_report_cr_rejects_bad_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"latent_dim": 0}))
    assert main(["report-cr", "--preset", "toy", "--config", str(p)]) == 2


def test_stage_two_without_stage_one(tmp_path, capsys):
    assert main(["train", "tokenizer", "--stage", "2", "--out", str(tmp_path)]) == 2
    assert "stage 1 checkpoint required" in capsys.readouterr().err


def test_bad_flag_combination(tmp_path, capsys):
    code = main(["train", "downstream", "--freeze-semantic-encoder", "--tokenizer", "x", "--out", str(tmp_path)])
    assert code == 2
    assert "mean_pool_linear" in capsys.readouterr().err


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


def _train_stage1(out, seed=7):
    return main(["train", "tokenizer", "--stage", "1", "--steps", "2", "--n-utterances", "2", "--batch-size", "1",
                 "--seed", str(seed), "--precision", "float64", "--out", str(out), "--log-every", "0"])


def test_train_seed_repeat_identical_csv(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _train_stage1(a) == 0 and _train_stage1(b) == 0
    assert (a / "log_stage1.csv").read_bytes() == (b / "log_stage1.csv").read_bytes()
    cfg = json.loads((a / "run_stage1.json").read_text())
    assert cfg["seed"] == 7 and cfg["stage"] == "I"
    assert (a / "tokenizer_stage1.htok").exists()


def test_causal_supervision_flag_reaches_checkpoint(tmp_path, capsys):
    m = build_tokenizer(seed=0)
    m.stages_done.fill_(2)
    save_tokenizer(m, tmp_path / "tokenizer_stage2.htok")
    common = ["--steps", "1", "--log-every", "0"]
    assert main(["train", "downstream", "--tasks", "tts", "--mode", "mean_pool_linear",
                 "--tokenizer", str(tmp_path / "tokenizer_stage2.htok"), "--out", str(tmp_path / "d"), *common]) == 2
    assert "causal supervision encoder" in capsys.readouterr().err
    assert main(["train", "tokenizer", "--stage", "3", "--causal-supervision-encoder", "--out", str(tmp_path),
                 "--n-utterances", "2", "--batch-size", "1", *common]) == 0
    from holitok.checkpoint import read_tensors
    _, meta = read_tensors(tmp_path / "tokenizer_stage3.htok")
    assert meta["causal_supervision_encoder"] is True
    assert json.loads((tmp_path / "run_stage3.json").read_text())["ablation"]["causal_supervision_encoder"] is True


@pytest.fixture(scope="module")
def toy_ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("ck")
    m = build_tokenizer(seed=0)
    m.stages_done.fill_(1)
    save_tokenizer(m, d / "tok.htok")
    return d / "tok.htok"


def test_codec_round_trip(tmp_path, toy_ckpt):
    wav = tmp_path / "in.f32"
    dsp.write_pcm(wav, dsp.Waveform(np.zeros(8000, dtype=np.float32) + 0.1, 8000))
    lat = tmp_path / "z.htok"
    assert main(["codec", "encode", "--checkpoint", str(toy_ckpt), "--in", str(wav), "--out", str(lat)]) == 0
    from holitok.cli import read_latents
    z, meta = read_latents(str(lat))
    assert meta["n_frames"] == 125 and meta["f_z"] == 125 and meta["d_z"] == 8 and z.shape == (125, 8)
    out = tmp_path / "out.f32"
    assert main(["codec", "decode", "--checkpoint", str(toy_ckpt), "--in", str(lat), "--out", str(out)]) == 0
    assert len(dsp.read_pcm(out)) == 8000
    wav2 = tmp_path / "odd.f32"
    dsp.write_pcm(wav2, dsp.Waveform(np.zeros(1001, dtype=np.float32), 8000))
    lat2 = tmp_path / "z2.htok"
    main(["codec", "encode", "--checkpoint", str(toy_ckpt), "--in", str(wav2), "--out", str(lat2)])
    main(["codec", "decode", "--checkpoint", str(toy_ckpt), "--in", str(lat2), "--out", str(out)])
    assert len(dsp.read_pcm(out)) == math.ceil(1001 / 64) * 64


def test_codec_sample_rate_mismatch(tmp_path, toy_ckpt, capsys):
    wav = tmp_path / "in.f32"
    dsp.write_pcm(wav, dsp.Waveform(np.zeros(16000, dtype=np.float32), 16000))
    code = main(["codec", "encode", "--checkpoint", str(toy_ckpt), "--in", str(wav), "--out", str(tmp_path / "z")])
    assert code == 2
    err = capsys.readouterr().err
    assert "8000" in err and "16000" in err


def test_codec_corrupt_latent_header(tmp_path, toy_ckpt, capsys):
    bad = tmp_path / "bad.htok"
    write_tensors(bad, {"latents": torch.zeros(4, 8)}, {"kind": "latents", "f_z": 125})
    assert main(["codec", "decode", "--checkpoint", str(toy_ckpt), "--in", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "d_z" in capsys.readouterr().err
    trunc = tmp_path / "trunc.htok"
    write_tensors(trunc, {"latents": torch.zeros(4, 8)}, {"kind": "latents", "f_z": 125, "d_z": 8,
                                                            "sample_rate": 8000})
    trunc.write_bytes(trunc.read_bytes()[:-5])
    assert main(["codec", "decode", "--checkpoint", str(toy_ckpt), "--in", str(trunc), "--out", str(tmp_path / "o")]) == 2
    assert "truncated" in capsys.readouterr().err


def test_verify_kl_report(tmp_path, capsys):
    rep = tmp_path / "r.json"
    assert main(["verify", "kl", "--report", str(rep)]) == 0
    data = json.loads(rep.read_text())
    assert data["pass"] is True
    kl = data["checks"][0]
    assert kl["details"]["max_deviation_se"] < 3
    assert "SE" in capsys.readouterr().out


def test_corpus_export(tmp_path, monkeypatch):
    monkeypatch.setenv("HOLITOK_THREADS", "2")
    assert main(["corpus", "--out", str(tmp_path / "c"), "--n", "3", "--seed", "1"]) == 0
    utts = dsp.import_corpus(tmp_path / "c")
    ref = dsp.synth_corpus(1, 3, workers=1)
    assert [u.transcript for u in utts] == [u.transcript for u in ref]
    assert np.array_equal(utts[0].waveform.samples, ref[0].waveform.samples.astype(np.float32))
