import json
import struct

import numpy as np
import pytest

from jmvae import checkpoint as C
from jmvae.data import ModalitySpec
from jmvae.distributions import BERNOULLI, CATEGORICAL
from jmvae.evaluation import BoundSpec, evaluate

from helpers import SMALL_ARCH, random_handle

X4 = ModalitySpec("x", 4, BERNOULLI, (2, 2))
W3 = ModalitySpec("w", 3, CATEGORICAL)


def handle32(variant="jmvae-kl"):
    return random_handle(variant, X4, W3, SMALL_ARCH, seed=2, alpha=0.25).astype(np.float32)


def split_file(buf: bytes):
    _, mlen = struct.unpack("<II", buf[4:12])
    return json.loads(buf[12 : 12 + mlen]), buf[12 + mlen :]


def rebuild(manifest: dict, payload: bytes, version: int = C.VERSION) -> bytes:
    text = json.dumps(manifest).encode()
    return C.MAGIC + struct.pack("<II", version, len(text)) + text + payload


class TestRoundTrip:
    @pytest.mark.parametrize("variant", ["vae", "cvae", "jmvae-zero", "jmvae-kl"])
    def test_resave_is_byte_identical(self, variant):
        buf = C.to_bytes(handle32(variant))
        assert C.to_bytes(C.from_bytes(buf)) == buf

    def test_save_is_deterministic(self, tmp_path):
        h = handle32()
        C.save(h, tmp_path / "a.jmck")
        C.save(h, tmp_path / "b.jmck")
        assert (tmp_path / "a.jmck").read_bytes() == (tmp_path / "b.jmck").read_bytes()

    def test_metadata_preserved(self):
        h = C.from_bytes(C.to_bytes(handle32()))
        assert (h.variant, h.alpha, h.x_spec, h.w_spec, h.arch) == ("jmvae-kl", 0.25, X4, W3, SMALL_ARCH)
        assert h.dtype == np.float32

    def test_evaluation_preserved_at_32_bit(self, tmp_path):
        h = handle32()
        rng = np.random.default_rng(0)
        x, w = (rng.random((6, 4)) < 0.5).astype(float), np.eye(3)[rng.integers(0, 3, 6)]
        spec = BoundSpec("conditional-x-given-w", "single-w", 100, 500)
        before = evaluate(h, x, w, spec, seed=4).values
        C.save(h, tmp_path / "m.jmck")
        after = evaluate(C.load(tmp_path / "m.jmck"), x, w, spec, seed=4).values
        assert before.tobytes() == after.tobytes()

    def test_64_bit_handle_is_quantised(self):
        h = random_handle("vae", X4, W3, SMALL_ARCH, seed=1)
        back = C.from_bytes(C.to_bytes(h))
        for (_, a), (_, b) in zip(h.named_parameters(), back.named_parameters()):
            np.testing.assert_array_equal(b.data, a.data.astype(np.float32))


class TestCorruption:
    def test_bad_magic(self):
        buf = b"XXXX" + C.to_bytes(handle32())[4:]
        with pytest.raises(C.BadMagicError):
            C.from_bytes(buf)

    def test_version(self):
        m, payload = split_file(C.to_bytes(handle32()))
        with pytest.raises(C.VersionError):
            C.from_bytes(rebuild(m, payload, version=99))

    def test_garbled_manifest(self):
        buf = bytearray(C.to_bytes(handle32()))
        buf[14] = 0xFF
        with pytest.raises(C.ManifestError):
            C.from_bytes(bytes(buf))

    def test_unknown_variant(self):
        m, payload = split_file(C.to_bytes(handle32()))
        m["variant"] = "cmma"
        with pytest.raises(C.UnknownVariantError):
            C.from_bytes(rebuild(m, payload))

    def test_truncated_payload(self):
        with pytest.raises(C.ManifestError):
            C.from_bytes(C.to_bytes(handle32())[:-4])

    def test_shape_mismatch(self):
        m, payload = split_file(C.to_bytes(handle32()))
        m["tensors"][0]["shape"] = [1, 1]
        with pytest.raises(C.ManifestError):
            C.from_bytes(rebuild(m, payload))

    def test_missing_tensor(self):
        m, payload = split_file(C.to_bytes(handle32()))
        m["tensors"].pop()
        with pytest.raises(C.ManifestError):
            C.from_bytes(rebuild(m, payload))

    def test_offset_out_of_bounds(self):
        m, payload = split_file(C.to_bytes(handle32()))
        m["tensors"][-1]["offset"] = len(payload)
        with pytest.raises(C.ManifestError):
            C.from_bytes(rebuild(m, payload))

    def test_overlapping_tensors(self):
        m, payload = split_file(C.to_bytes(handle32()))
        m["tensors"][1]["offset"] = m["tensors"][0]["offset"]
        with pytest.raises(C.ManifestError):
            C.from_bytes(rebuild(m, payload))

    def test_all_errors_share_base(self):
        for e in (C.BadMagicError, C.VersionError, C.ManifestError, C.UnknownVariantError):
            assert issubclass(e, C.CheckpointError)
