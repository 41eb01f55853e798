"""Train the toy tokenizer through its three stages and look at what it learned.

Runs in about five minutes on one CPU core:

    python demos/tokenizer_walkthrough.py [out_dir]
"""

import sys
import time
from pathlib import Path

import torch

from holitok import dsp, pipeline
from holitok.cli import cmd_report_cr
from holitok.codec import paper_config, toy_config

torch.set_num_threads(1)
out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
out.mkdir(parents=True, exist_ok=True)

for name, cfg in (("paper", paper_config()), ("toy", toy_config())):
    info = cmd_report_cr(cfg)
    print(f"{name:5s}: {info.f_z} latent frames/s x {info.d_z} dims, compression ratio {float(info.CR):g}")

data = dsp.synth_corpus(0, 64, pipeline.tokenizer_corpus_config())
held_out = dsp.synth_corpus(1000, 8, pipeline.tokenizer_corpus_config())
scales = dsp.toy_mel_scales()


def report(model, label):
    """Mel loss with the utterance's own latents vs a neighbour's: the gap is what the latents carry."""
    own = other = 0.0
    with torch.no_grad():
        for i, u in enumerate(held_out):
            x = torch.as_tensor(u.waveform.samples[:8000], dtype=torch.float32)
            o = torch.as_tensor(held_out[(i + 1) % len(held_out)].waveform.samples[:8000], dtype=torch.float32)
            own += float(dsp.multiscale_mel_loss(x, model.codec.decode(model.codec.latents(x))[:8000], scales))
            other += float(dsp.multiscale_mel_loss(x, model.codec.decode(model.codec.latents(o))[:8000], scales))
        silence = model.codec.decode(model.codec.latents(torch.zeros(8000)))
    n = len(held_out)
    print(f"{label}: held-out mel loss {own / n:.3f} (neighbour's latents {other / n:.3f}), "
          f"silence in -> RMS {float(silence.pow(2).mean().sqrt()):.3f} out")


model = None
for n, (stage, steps) in enumerate((("I", 300), ("II", 200), ("III", 200)), 1):
    t0 = time.time()
    model, log = pipeline.train_tokenizer(pipeline.RunConfig(stage=stage, steps=steps), model, data)
    spec = log.column("spec")
    print(f"stage {stage}: mel loss {pipeline.moving_average(spec, 10):.3f} -> "
          f"{pipeline.moving_average(spec, len(spec)):.3f} in {time.time() - t0:.0f} s")
    report(model, f"  after stage {stage}")
    pipeline.save_tokenizer(model, out / f"tokenizer_stage{n}.htok")
    log.to_csv(out / f"log_stage_{stage}.csv")

print(f"checkpoints and logs in {out}")
