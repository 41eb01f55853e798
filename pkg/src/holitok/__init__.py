"""Continuous causal speech tokenizer: causal VAE codec, progressive training
with distillation and supervision, and a unified AR+DiT downstream model."""

from .codec import Codec, CodecConfig, paper_config, toy_config
from .dsp import CorpusConfig, LabeledUtterance, Waveform, multiscale_mel_loss, synth_corpus
from .numerics import NonFiniteError, ParameterSet, ShapeError

__version__ = "0.1.0"

__all__ = [
    "Codec", "CodecConfig", "CorpusConfig", "LabeledUtterance", "NonFiniteError", "ParameterSet",
    "ShapeError", "Waveform", "multiscale_mel_loss", "paper_config", "synth_corpus", "toy_config",
]
