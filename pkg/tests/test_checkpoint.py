import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from holitok.checkpoint import (BadMagicError, ShapeMismatchError, TruncatedError, VersionError, load_checkpoint,
                                read_tensors, save_checkpoint, write_tensors)
from holitok.codec import Codec, paper_config, toy_config
from holitok.numerics import param_digest
from holitok.pipeline import build_tokenizer, load_tokenizer, save_tokenizer


def test_layout_by_hand(tmp_path):
    p = tmp_path / "a.htok"
    write_tensors(p, {"w": torch.tensor([[1.0, 2.0]], dtype=torch.float64)})
    b = p.read_bytes()
    assert b[:4] == b"HTOK"
    assert struct.unpack("<II", b[4:12]) == (1, 1)
    assert struct.unpack("<I", b[12:16]) == (1,) and b[16:17] == b"w"
    assert struct.unpack("<BB", b[17:19]) == (1, 2)
    assert struct.unpack("<2Q", b[19:35]) == (1, 2)
    assert np.frombuffer(b[35:], "<f8").tolist() == [1.0, 2.0]


@given(shape=st.lists(st.integers(0, 4), max_size=3),
       dtype=st.sampled_from([torch.float32, torch.float64, torch.int64, torch.uint8]))
@settings(max_examples=30, deadline=None)
def test_tensor_roundtrip_bit_exact(tmp_path_factory, shape, dtype):
    g = torch.Generator().manual_seed(0)
    t = (torch.randn(shape, generator=g) * 100).to(dtype)
    p = tmp_path_factory.mktemp("rt") / "t.htok"
    write_tensors(p, {"x": t}, {"k": [1, 2]})
    out, meta = read_tensors(p)
    assert out["x"].dtype == dtype and torch.equal(out["x"], t) and meta == {"k": [1, 2]}


def test_tokenizer_roundtrip_bit_identical(tmp_path):
    m = build_tokenizer(seed=4)
    m.stages_done.fill_(2)
    save_tokenizer(m, tmp_path / "m.htok")
    m2 = load_tokenizer(tmp_path / "m.htok")
    assert param_digest(m) == param_digest(m2)
    assert m2.completed == 2
    for (n, a), (_, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), n


def test_bad_magic_and_version(tmp_path):
    p = tmp_path / "a.htok"
    write_tensors(p, {"w": torch.zeros(2)})
    b = bytearray(p.read_bytes())
    p.write_bytes(b"NOPE" + bytes(b[4:]))
    with pytest.raises(BadMagicError):
        read_tensors(p)
    b[4:8] = struct.pack("<I", 99)
    p.write_bytes(bytes(b))
    with pytest.raises(VersionError, match="99"):
        read_tensors(p)


def test_truncated_names_byte_counts(tmp_path):
    p = tmp_path / "a.htok"
    write_tensors(p, {"w": torch.zeros(10, dtype=torch.float64)})
    b = p.read_bytes()
    p.write_bytes(b[:-8])
    with pytest.raises(TruncatedError, match=r"payload of w: expected 80 bytes at offset \d+, only 72 available"):
        read_tensors(p)


def test_toy_checkpoint_into_paper_config(tmp_path):
    toy = Codec(toy_config())
    save_checkpoint(toy, tmp_path / "toy.htok")
    paper = Codec(paper_config())
    first = next(n for n, t in paper.state_dict().items() if t.shape != toy.state_dict()[n].shape)
    with pytest.raises(ShapeMismatchError) as e:
        load_checkpoint(paper, tmp_path / "toy.htok")
    assert first in str(e.value)


def test_missing_tensor(tmp_path):
    m = torch.nn.Linear(2, 2)
    write_tensors(tmp_path / "a.htok", {"weight": torch.zeros(2, 2)})
    with pytest.raises(ShapeMismatchError, match="bias"):
        load_checkpoint(m, tmp_path / "a.htok")
