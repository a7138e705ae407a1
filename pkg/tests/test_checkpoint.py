import struct

import numpy as np
import pytest

from magneto.checkpoint import MAGIC, decode, encode, load_checkpoint, manifest, save_checkpoint
from magneto.config import TINY_MODEL
from magneto.errors import DataFormatError
from magneto.model import ModelKind, build_model


def test_round_trip_is_bit_exact(tmp_path):
    cfg = TINY_MODEL.with_(dropout=0.25)
    store = build_model("MAGNETO", cfg, seed=2)
    save_checkpoint(tmp_path / "m.mgnt", store, "MAGNETO", cfg)
    back, kind, cfg2 = load_checkpoint(tmp_path / "m.mgnt")
    assert kind is ModelKind.MAGNETO and cfg2 == cfg
    assert list(back) == list(store)
    for k in store:
        assert back[k].dtype == store[k].dtype
        assert back[k].data.tobytes() == store[k].data.tobytes()
        assert back[k].requires_grad == store[k].requires_grad


def test_layout():
    buf = encode([("a", np.arange(3, dtype=np.float32)), ("bb", np.ones((2, 2)))])
    assert buf[:4] == MAGIC
    assert struct.unpack_from("<II", buf, 4) == (1, 2)
    header = 12 + (2 + 1 + 2 + 4 + 8) + (2 + 2 + 2 + 8 + 8)
    assert struct.unpack_from("<Q", buf, 12 + 2 + 1 + 2 + 4)[0] == header
    assert len(buf) == header + 12 + 32
    (name, arr), (_, arr2) = decode(buf)
    assert name == "a" and arr.dtype == np.float32 and arr2.shape == (2, 2)


def test_scalar_entries():
    (_, arr), = decode(encode([("s", np.array(2.5))]))
    assert arr.shape == () and arr == 2.5


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:-1], "truncated"),
    (lambda b: b + b"\0", "length"),
    (lambda b: b[:10], "truncated"),
])
def test_corrupt_files_are_rejected(mutate, message):
    good = encode([("w", np.zeros(4, dtype=np.float32))])
    with pytest.raises(DataFormatError, match=message):
        decode(mutate(good))


def test_unsupported_dtype():
    with pytest.raises(DataFormatError):
        encode([("i", np.arange(3))])


def test_manifest_lists_every_entry(tmp_path):
    store = build_model("TF_T", TINY_MODEL)
    save_checkpoint(tmp_path / "m.mgnt", store, "TF_T", TINY_MODEL)
    rows = manifest(tmp_path / "m.mgnt")
    names = [r[0] for r in rows]
    assert names[0] == "meta.kind.TF_T"
    assert [n for n in names if not n.startswith("meta.")] == list(store)
    offsets = [r[3] for r in rows]
    assert offsets == sorted(offsets)


def test_checkpoint_without_kind(tmp_path):
    (tmp_path / "x.mgnt").write_bytes(encode([("w", np.zeros(1))]))
    with pytest.raises(DataFormatError, match="kind"):
        load_checkpoint(tmp_path / "x.mgnt")
