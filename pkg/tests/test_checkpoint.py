import json
import struct
import zlib

import numpy as np
import pytest

from liptok.checkpoint import CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from liptok.tokenizers import KINDS, ActionTokenizer

SMALL = dict(encoder_hidden=(16, 16), latent_dim=4, codebook_size=32, batch_size=32)


def _trained(kind, **kw):
    X = np.random.default_rng(0).uniform(-1, 1, (200, 7))
    return ActionTokenizer(kind=kind, n_steps=20, random_state=1, **{**SMALL, **kw}).fit(X)


def _reseal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


@pytest.mark.parametrize("kind", KINDS)
def test_roundtrip_is_bit_exact(kind, tmp_path):
    tok = _trained(kind)
    path = tmp_path / "tok.ltok"
    save_checkpoint(tok, path)
    back = load_checkpoint(path)
    assert back.config_ == tok.config_
    for name, p in tok.parameters().items():
        q = back.parameters()[name]
        assert q.data.dtype == p.data.dtype and q.data.tobytes() == p.data.tobytes()
    X = np.random.default_rng(2).uniform(-1, 1, (100, 7))
    np.testing.assert_array_equal(back.transform(X), tok.transform(X))
    if kind != "mlp":
        np.testing.assert_array_equal(back.encode(X), tok.encode(X))
    assert dumps(back) == path.read_bytes()


def test_layout_parsed_independently():
    tok = _trained("vqvae")
    blob = dumps(tok)
    assert blob[:4] == b"LTOK"
    assert struct.unpack_from("<H", blob, 4)[0] == 1
    (n_cfg,) = struct.unpack_from("<I", blob, 6)
    cfg_text = blob[10:10 + n_cfg].decode("utf-8")
    cfg = json.loads(cfg_text)
    assert list(cfg) == sorted(cfg)
    assert cfg["codebook_size"] == 32 and cfg["kind"] == "vqvae"
    pos = 10 + n_cfg
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    seen = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", blob, pos); pos += 2
        name = blob[pos:pos + ln].decode(); pos += ln
        tl = blob[pos]; pos += 1
        tag = blob[pos:pos + tl].decode(); pos += tl
        rank = blob[pos]; pos += 1
        dims = struct.unpack_from(f"<{rank}I", blob, pos); pos += 4 * rank
        n = int(np.prod(dims)) * np.dtype(tag).itemsize
        seen[name] = np.frombuffer(blob[pos:pos + n], dtype=tag).reshape(dims); pos += n
    assert pos == len(blob) - 4
    assert struct.unpack_from("<I", blob, pos)[0] == zlib.crc32(blob[:pos])
    np.testing.assert_array_equal(seen["codebook.entries"], tok.codebook_.entries.data)


def test_k256_config_is_authoritative(tmp_path):
    tok = _trained("vqvae", codebook_size=256)
    save_checkpoint(tok, tmp_path / "k.ltok")
    back = load_checkpoint(tmp_path / "k.ltok")
    assert back.codebook_.size == 256 and back.config_.codebook_size == 256
    assert back.encode(np.zeros((3, 7))).max() < 256


def test_corrupted_magic():
    blob = bytearray(dumps(_trained("mlp")))
    blob[0:4] = b"XTOK"
    with pytest.raises(CheckpointError, match="magic"):
        loads(bytes(blob))


def test_corrupted_crc():
    blob = bytearray(dumps(_trained("lipvqvae")))
    blob[len(blob) // 2] ^= 0x01
    with pytest.raises(CheckpointError, match="CRC"):
        loads(bytes(blob))


def test_other_version_named():
    blob = bytearray(dumps(_trained("mlp")))
    blob[4:6] = struct.pack("<H", 2)
    with pytest.raises(CheckpointError, match="version 2"):
        loads(_reseal(bytes(blob[:-4])))


@pytest.mark.parametrize("cut", [3, 8, 40, -5])
def test_truncation_rejected(cut):
    blob = dumps(_trained("bin"))
    with pytest.raises(CheckpointError):
        loads(blob[:cut])


def test_truncated_directory_with_valid_crc():
    body = dumps(_trained("mlp"))[:-4]
    with pytest.raises(CheckpointError, match="truncated"):
        loads(_reseal(body[:-100]))


def test_trailing_bytes_rejected():
    body = dumps(_trained("mlp"))[:-4]
    with pytest.raises(CheckpointError, match="trailing"):
        loads(_reseal(body + b"\x00"))


def test_failed_save_leaves_target_untouched(tmp_path, monkeypatch):
    path = tmp_path / "tok.ltok"
    path.write_bytes(b"previous")
    import liptok.checkpoint as ck

    def boom(tok):
        raise RuntimeError("disk full")

    monkeypatch.setattr(ck, "dumps", boom)
    with pytest.raises(RuntimeError):
        save_checkpoint(_trained("mlp"), path)
    assert path.read_bytes() == b"previous"
    assert [p.name for p in tmp_path.iterdir()] == ["tok.ltok"]


def test_float32_preserved(tmp_path):
    tok = _trained("lipvqvae", dtype="float32")
    save_checkpoint(tok, tmp_path / "f.ltok")
    back = load_checkpoint(tmp_path / "f.ltok")
    assert back.parameters()["codebook.entries"].data.dtype == np.float32
