import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from hyps import checkpoint
from hyps.errors import FormatError, ShapeError
from hyps.linalg import make_rng
from hyps.volume_io import (
    NATIVE_HEADER,
    LabelVolume,
    decode_native,
    decode_nifti,
    encode_native,
    read_volume,
    write_volume,
)

FIXTURE_VOXELS = bytes([0, 1, 2, 3, 4, 5, 6, 7])


def nifti_fixture(datatype=2, bitpix=8, vox_offset=352.0, endian="<", payload=FIXTURE_VOXELS, dims=(2, 2, 2)):
    """2x2x2 uint8 file laid out field by field from the NIfTI-1 header definition."""
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)                      # sizeof_hdr
    struct.pack_into(endian + "8h", hdr, 40, 3, *dims, 1, 1, 1, 1)   # dim[8]
    struct.pack_into(endian + "h", hdr, 70, datatype)                # datatype
    struct.pack_into(endian + "h", hdr, 72, bitpix)                  # bitpix
    struct.pack_into(endian + "8f", hdr, 76, 1, 0.5, 0.75, 2.0, 0, 0, 0, 0)  # pixdim
    struct.pack_into(endian + "f", hdr, 108, vox_offset)             # vox_offset
    hdr[344:348] = b"n+1\x00"
    pad = b"\x00" * (int(vox_offset) - 348)
    return bytes(hdr) + pad + payload


class TestNative:
    @pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32, np.float64])
    def test_round_trip_bit_exact(self, dtype, tmp_path):
        data = (make_rng(0).normal(size=(3, 4, 5)) * 50).astype(dtype)
        vol = LabelVolume(data, (0.9, 1.0, 2.5))
        write_volume(vol, tmp_path / "v.vol")
        back = read_volume(tmp_path / "v.vol")
        assert back.data.dtype == data.dtype and back.data.tobytes() == data.tobytes()
        assert back.spacing == vol.spacing

    def test_header_layout(self):
        blob = encode_native(LabelVolume(np.arange(6, dtype=np.uint8).reshape(1, 2, 3), (1, 2, 3)))
        assert blob[:12] == b"HYPS-VOLUME\x00"
        assert struct.unpack_from("<I3I3dI", blob, 12) == (1, 1, 2, 3, 1.0, 2.0, 3.0, 1)
        # x varies fastest
        assert list(blob[NATIVE_HEADER:]) == [0, 3, 1, 4, 2, 5]

    def test_bool_stored_as_uint8(self):
        m = make_rng(1).random((3, 3, 3)) < 0.5
        back = decode_native(encode_native(LabelVolume(m)))
        assert np.array_equal(back.data.astype(bool), m)

    def test_unsupported_dtype(self):
        with pytest.raises(FormatError):
            encode_native(LabelVolume(np.zeros((2, 2, 2), np.int64)))

    @pytest.mark.parametrize("cut", [0, 11, 30, 55, 56, 60])
    def test_truncated(self, cut):
        blob = encode_native(LabelVolume(np.ones((2, 2, 2))))
        with pytest.raises(FormatError):
            decode_native(blob[:cut])

    def test_bad_magic_and_dtype_code(self):
        blob = bytearray(encode_native(LabelVolume(np.ones((2, 2, 2), np.uint8))))
        bad = bytearray(blob)
        bad[0] = ord("X")
        with pytest.raises(FormatError) as info:
            decode_native(bytes(bad))
        assert info.value.offset == 0
        struct.pack_into("<I", blob, 52, 9)
        with pytest.raises(FormatError) as info:
            decode_native(bytes(blob))
        assert info.value.offset == 52


class TestNifti:
    def test_fixture_voxels(self, tmp_path):
        (tmp_path / "f.nii").write_bytes(nifti_fixture())
        vol = read_volume(tmp_path / "f.nii")
        assert vol.data.dtype == np.uint8 and vol.data.shape == (2, 2, 2)
        # voxel (i, j, k) sits at byte i + 2j + 4k
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    assert vol.data[i, j, k] == FIXTURE_VOXELS[i + 2 * j + 4 * k]
        assert vol.spacing == (0.5, 0.75, 2.0)

    def test_big_endian(self):
        payload = np.arange(8, dtype=">i2").tobytes()
        vol = decode_nifti(nifti_fixture(datatype=4, bitpix=16, endian=">", payload=payload))
        assert vol.data.reshape(-1, order="F").tolist() == list(range(8))

    def test_vox_offset_skips_extension_bytes(self):
        vol = decode_nifti(nifti_fixture(vox_offset=400.0))
        assert vol.data.reshape(-1, order="F").tolist() == list(FIXTURE_VOXELS)

    def test_round_trip(self, tmp_path):
        data = make_rng(2).normal(size=(3, 2, 4)).astype(np.float32)
        write_volume(LabelVolume(data, (1, 1, 3)), tmp_path / "x.nii")
        back = read_volume(tmp_path / "x.nii")
        assert back.data.tobytes() == data.tobytes() and back.spacing == (1.0, 1.0, 3.0)

    @pytest.mark.parametrize(
        "kw, offset",
        [
            ({"datatype": 64, "bitpix": 64}, 70),
            ({"bitpix": 16}, 72),
            ({"vox_offset": 300.0}, 108),
            ({"payload": FIXTURE_VOXELS[:5]}, None),
            ({"dims": (2, 0, 2)}, 42),
        ],
    )
    def test_malformed(self, kw, offset):
        with pytest.raises(FormatError) as info:
            decode_nifti(nifti_fixture(**kw))
        if offset is not None:
            assert info.value.offset == offset

    def test_wrong_magic_and_size(self):
        blob = bytearray(nifti_fixture())
        blob[344:348] = b"ni1\x00"
        with pytest.raises(FormatError):
            decode_nifti(bytes(blob))
        with pytest.raises(FormatError):
            decode_nifti(nifti_fixture()[:200])

    def test_unknown_file(self, tmp_path):
        (tmp_path / "junk").write_bytes(b"hello world")
        with pytest.raises(FormatError):
            read_volume(tmp_path / "junk")


class TestFuzz:
    @settings(max_examples=300, deadline=None, suppress_health_check=[HealthCheck.too_slow])
    @given(st.data())
    def test_corrupted_headers_never_crash(self, data):
        base = data.draw(st.sampled_from([
            nifti_fixture(),
            encode_native(LabelVolume(np.ones((2, 3, 2), np.int16))),
        ]))
        blob = bytearray(base)
        for _ in range(data.draw(st.integers(1, 6))):
            pos = data.draw(st.integers(0, min(len(blob), 360) - 1))
            blob[pos] = data.draw(st.integers(0, 255))
        blob = bytes(blob[: data.draw(st.integers(0, len(blob)))])
        try:
            decode_nifti(blob) if base[:4] != b"HYPS" else decode_native(blob)
        except (FormatError, ShapeError):
            pass

    @settings(max_examples=300, deadline=None)
    @given(st.binary(max_size=200))
    def test_random_bytes_into_checkpoint(self, blob):
        with pytest.raises(FormatError):
            checkpoint.decode(b"HYPSCKPT" + blob)


class TestCheckpointContainer:
    def test_round_trip_and_layout(self):
        tensors = {"a": make_rng(0).normal(size=(2, 3)), "b": np.array(1.5), "c": np.zeros((0, 4))}
        blob = checkpoint.encode({"kind": "x"}, tensors)
        assert blob[:8] == b"HYPSCKPT" and struct.unpack_from("<I", blob, 8)[0] == 1
        manifest, back = checkpoint.decode(blob)
        assert manifest["tensors"] == ["a", "b", "c"] and manifest["kind"] == "x"
        assert all(back[k].tobytes() == np.asarray(v, float).tobytes() and back[k].shape == np.shape(v)
                   for k, v in tensors.items())

    @pytest.mark.parametrize("bad", [b"", b"NOTACKPT" + bytes(8), b"HYPSCKPT" + struct.pack("<II", 2, 0)])
    def test_bad_headers(self, bad):
        with pytest.raises(FormatError):
            checkpoint.decode(bad)

    def test_every_truncation_is_a_format_error(self):
        blob = checkpoint.encode({}, {"w": np.ones((2, 2))})
        for cut in range(len(blob)):
            with pytest.raises(FormatError):
                checkpoint.decode(blob[:cut])
        with pytest.raises(FormatError):
            checkpoint.decode(blob + b"\x00")
