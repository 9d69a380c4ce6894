import struct

import numpy as np
import pytest

from aerodepth import io as aio
from aerodepth import numcore as nc
from aerodepth.metrics import MetricReport
from aerodepth.model import ModelConfig, unet_forward, unet_init
from aerodepth.optim import AdamState


@pytest.fixture
def small_model():
    return unet_init(ModelConfig(levels=2, base_channels=4, seed=9))


class TestPnm:
    def test_p5_scaling(self):
        img = aio.decode_pnm(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
        assert img.shape == (1, 2, 2)
        np.testing.assert_array_equal(img[0].ravel(), np.array([0, 255, 128, 64], np.float32) / np.float32(255))

    def test_p5_round_trip_bytes(self, tmp_path, rng):
        raw = b"P5\n5 3\n255\n" + rng.integers(0, 256, 15, dtype=np.uint8).tobytes()
        path = tmp_path / "a.pgm"
        path.write_bytes(raw)
        aio.write_image(aio.read_image(path), tmp_path / "b.pgm")
        assert (tmp_path / "b.pgm").read_bytes() == raw

    def test_p6_channel_major(self):
        # one row of two pixels: (10, 20, 30), (40, 50, 60)
        img = aio.decode_pnm(b"P6\n2 1\n255\n" + bytes([10, 20, 30, 40, 50, 60]))
        assert img.shape == (3, 1, 2)
        np.testing.assert_allclose(img[:, 0, 0] * 255, [10, 20, 30])
        np.testing.assert_allclose(img[1, 0] * 255, [20, 50])

    def test_comments_in_header(self):
        img = aio.decode_pnm(b"P5\n# made by hand\n1 1\n255\n" + bytes([51]))
        assert img[0, 0, 0] == pytest.approx(0.2)

    @pytest.mark.parametrize("buf,msg", [
        (b"P2\n1 1\n255\n\x00", "malformed header"),
        (b"P5\n1 x\n255\n\x00", "malformed header"),
        (b"P5\n1 1\n65535\n\x00\x00", "malformed header"),
        (b"P5\n2 2\n255\n\x00\x01", "truncated payload"),
        (b"P5\n2 2", "malformed header"),
    ])
    def test_errors(self, buf, msg):
        with pytest.raises(aio.FormatError, match=msg):
            aio.decode_pnm(buf)

    def test_class_mask_round_trip(self, tmp_path):
        m = np.array([[0, 1, 2], [3, 4, 4]], np.float32)
        aio.write_class_mask(m, tmp_path / "m.pgm")
        assert (tmp_path / "m.pgm").read_bytes().endswith(bytes([0, 50, 100, 150, 200, 200]))
        np.testing.assert_array_equal(aio.read_class_mask(tmp_path / "m.pgm"), m)


class TestFloatMap:
    def test_exact_bytes(self):
        assert aio.encode_float_map(np.array([[2.5]])) == b"Pf\n1 1\n-1.0\n" + b"\x00\x00\x20\x40"

    def test_bottom_row_first(self):
        buf = aio.encode_float_map(np.array([[1.0, 2.0], [3.0, 4.0]]))
        payload = buf[len(b"Pf\n2 2\n-1.0\n"):]
        assert struct.unpack("<4f", payload) == (3.0, 4.0, 1.0, 2.0)

    def test_round_trip(self, tmp_path, rng):
        m = rng.standard_normal((7, 5)).astype(np.float32)
        aio.write_float_map(m, tmp_path / "m.pfm")
        back = aio.read_float_map(tmp_path / "m.pfm")
        assert back.dtype == np.float32 and back.tobytes() == m.tobytes()

    def test_big_endian_rejected(self):
        with pytest.raises(aio.FormatError, match="big-endian"):
            aio.decode_float_map(b"Pf\n1 1\n1.0\n" + b"\x40\x20\x00\x00")

    def test_nan_rejected(self):
        with pytest.raises(ValueError, match="NaN"):
            aio.encode_float_map(np.array([[1.0, np.nan]]))

    def test_truncated(self):
        with pytest.raises(aio.FormatError, match="truncated"):
            aio.decode_float_map(b"Pf\n2 1\n-1.0\n" + b"\x00" * 4)


class TestCheckpoint:
    def test_round_trip_parameters(self, tmp_path, small_model):
        path = tmp_path / "m.ck"
        aio.save_checkpoint(small_model, path)
        loaded, state = aio.load_checkpoint(path)
        assert state is None
        assert loaded.config == small_model.config
        for name, t in small_model:
            assert loaded[name].data.tobytes() == t.data.tobytes()

    def test_save_load_save_identical(self, tmp_path, small_model, rng):
        state = AdamState.zeros_like(small_model.params)
        state.t = 17
        for k in state.m:
            state.m[k] = rng.standard_normal(state.m[k].shape).astype(np.float32)
            state.v[k] = rng.uniform(size=state.v[k].shape).astype(np.float32)
        first = aio.encode_checkpoint(small_model, state)
        model, st2 = aio.decode_checkpoint(first)
        assert st2.t == 17
        assert aio.encode_checkpoint(model, st2) == first

    def test_forward_bitwise(self, tmp_path, small_model, rng):
        aio.save_checkpoint(small_model, tmp_path / "m.ck")
        loaded, _ = aio.load_checkpoint(tmp_path / "m.ck")
        x = rng.uniform(size=(2, 1, 16, 16)).astype(np.float32)
        with nc.no_grad():
            assert unet_forward(loaded, x).data.tobytes() == unet_forward(small_model, x).data.tobytes()

    def test_header_layout(self, small_model):
        buf = aio.encode_checkpoint(small_model)
        assert buf[:4] == b"ADCK"
        assert struct.unpack("<I", buf[4:8]) == (1,)
        assert struct.unpack("<4IQ", buf[8:32]) == (2, 4, 1, 1, 9)

    def test_truncated_names_record(self, small_model):
        buf = aio.encode_checkpoint(small_model)
        with pytest.raises(aio.FormatError, match=r"tensor record \d+ \(.+\)"):
            aio.decode_checkpoint(buf[: len(buf) // 2])

    def test_truncated_header(self):
        with pytest.raises(aio.FormatError, match="model config"):
            aio.decode_checkpoint(b"ADCK" + struct.pack("<I", 1) + b"\x00" * 5)

    def test_bad_magic_and_version(self, small_model):
        buf = aio.encode_checkpoint(small_model)
        with pytest.raises(aio.FormatError, match="magic"):
            aio.decode_checkpoint(b"XXXX" + buf[4:])
        with pytest.raises(aio.FormatError, match="version"):
            aio.decode_checkpoint(buf[:4] + struct.pack("<I", 2) + buf[8:])

    def test_shape_inconsistent_with_config(self, small_model):
        buf = bytearray(aio.encode_checkpoint(small_model))
        # claim base_channels 5: the first kernel record no longer fits
        buf[12:16] = struct.pack("<I", 5)
        with pytest.raises(aio.FormatError, match="inconsistent with config"):
            aio.decode_checkpoint(bytes(buf))

    def test_trailing_bytes(self, small_model):
        with pytest.raises(aio.FormatError, match="trailing"):
            aio.decode_checkpoint(aio.encode_checkpoint(small_model) + b"\x00")


class TestReport:
    def test_columns_and_round_trip(self, tmp_path):
        r = MetricReport(0.1, 0.2, 0.5, 0.75, 0.25, 0.9, 4)
        aio.write_report(r, tmp_path / "r.csv")
        text = (tmp_path / "r.csv").read_text()
        assert text.splitlines()[0] == "mae,rmse,sw_mean,sw_min,sw_max,thr_acc,n"
        back = aio.read_report(tmp_path / "r.csv")
        assert back == {"mae": 0.1, "rmse": 0.2, "sw_mean": 0.5, "sw_min": 0.75, "sw_max": 0.25,
                        "thr_acc": 0.9, "n": 4}
