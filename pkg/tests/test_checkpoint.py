import struct
import zlib

import numpy as np
import pytest

from rsmm.checkpoint import MAGIC, decode, encode, load_checkpoint, save_checkpoint
from rsmm.errors import CorruptFile
from rsmm.network import VARIANTS, ModelConfig
from rsmm.training import init_weights


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_round_trip_is_exact(variant, tmp_path):
    cfg = ModelConfig.from_variant(variant, P=3, hidden=5, seq_len=16, c=2)
    w = init_weights(cfg, 1)
    path = tmp_path / "m.rmdn"
    save_checkpoint(path, w)
    back = load_checkpoint(path)
    assert back.config == cfg and back.equal(w)
    assert encode(back) == path.read_bytes()


def test_layout_header_and_trailer():
    blob = encode(init_weights(ModelConfig.from_variant("RGMM", P=2, hidden=3, seq_len=5, c=1), 0))
    assert blob[:4] == MAGIC == b"RMDN"
    assert struct.unpack("<I", blob[4:8])[0] == 1
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


def corrupt_variants(blob):
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0x01
    yield "bit flip", bytes(flipped)
    yield "bad magic", b"XMDN" + blob[4:]
    yield "truncated", blob[:-9]
    yield "trailing", blob + b"\0"
    body = bytearray(blob[:-4])
    body[4:8] = struct.pack("<I", 99)
    yield "version", bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    yield "empty", b""


def test_corruption_detected():
    blob = encode(init_weights(ModelConfig.from_variant("RSMM", P=2, hidden=3, seq_len=5, c=2), 0))
    for name, bad in corrupt_variants(blob):
        with pytest.raises(CorruptFile):
            decode(bad)


def test_non_finite_payload_rejected():
    w = init_weights(ModelConfig.from_variant("RSMM", P=2, hidden=3, seq_len=5, c=2), 0)
    blob = bytearray(encode(w))
    # overwrite the last payload value with NaN and refresh the CRC
    blob[-12:-4] = struct.pack("<d", np.nan)
    blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])))
    with pytest.raises(CorruptFile):
        decode(bytes(blob))
