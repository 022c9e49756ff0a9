"""Tests for metrics CSV, PFM, checkpoint and PNG artifacts."""

import struct

import numpy as np
import pytest

from itsa_lab import artifacts
from itsa_lab.data.constants import METRICS_HEADER
from itsa_lab.data.domains import MetricsRecord
from itsa_lab.errors import CheckpointFormatError, PfmFormatError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def record(value=0.5, epoch=1):
    return MetricsRecord("run", "itsa", 0, epoch, "val", "top1", value)


class TestMetrics:
    """Tests for the metrics CSV."""

    def test_header_and_rows(self):
        """The fixed header comes first, then one row per record."""
        text = artifacts.format_metrics([record(0.1), record(2.0, epoch=2)])
        lines = text.splitlines()
        assert lines[0] == ",".join(METRICS_HEADER)
        assert lines[1] == "run,itsa,0,1,val,top1,0.1"
        assert lines[2] == "run,itsa,0,2,val,top1,2.0"

    def test_values_survive_the_file(self, tmp_path):
        """Floats are written with their shortest exact repr."""
        path = tmp_path / "metrics.csv"
        records = [record(1 / 3), record(1e-17, epoch=2)]
        artifacts.write_metrics(path, records)
        assert artifacts.read_metrics(path) == records

    def test_empty_file_has_only_header(self, tmp_path):
        """No records still gives a readable file."""
        path = tmp_path / "metrics.csv"
        artifacts.write_metrics(path, [])
        assert artifacts.read_metrics(path) == []

    def test_foreign_header_is_rejected(self, tmp_path):
        """Any other header is an error."""
        path = tmp_path / "metrics.csv"
        path.write_text("a,b,c\n1,2,3\n", encoding="utf-8")
        with pytest.raises(ValueError, match="header must be"):
            artifacts.read_metrics(path)

    def test_non_finite_record_is_rejected(self):
        """Records refuse NaN values."""
        with pytest.raises(ValueError, match="not finite"):
            record(float("nan"))


class TestPfm:
    """Tests for PFM disparity maps."""

    def test_layout_on_disk(self, tmp_path):
        """Pf header, scale -1, little-endian rows from the bottom up."""
        path = tmp_path / "d.pfm"
        disparity = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], dtype=np.float32)
        artifacts.write_pfm(path, disparity)
        data = path.read_bytes()
        header = b"Pf\n3 2\n-1.0\n"
        assert data.startswith(header)
        payload = struct.unpack("<6f", data[len(header) :])
        assert payload == (4.0, 5.0, 6.0, 1.0, 2.0, 3.0)

    def test_read_back(self, tmp_path):
        """Reading returns the original float32 map."""
        path = tmp_path / "d.pfm"
        disparity = np.random.default_rng(0).random((5, 7)).astype(np.float32)
        artifacts.write_pfm(path, disparity)
        np.testing.assert_array_equal(artifacts.read_pfm(path), disparity)

    def test_big_endian_files(self, tmp_path):
        """A positive scale means big-endian floats."""
        path = tmp_path / "be.pfm"
        path.write_bytes(b"Pf\n2 1\n1.0\n" + struct.pack(">2f", 1.5, -2.0))
        np.testing.assert_array_equal(artifacts.read_pfm(path), [[1.5, -2.0]])

    def test_only_2d_maps_are_written(self, tmp_path):
        """Color maps are not written."""
        with pytest.raises(ValueError, match="2-D"):
            artifacts.write_pfm(tmp_path / "x.pfm", np.zeros((3, 2, 2)))

    @pytest.mark.parametrize(
        "data,message",
        [
            (b"Pf\n2 1\n", "truncated header"),
            (b"PF\n1 1\n-1.0\n" + bytes(12), "color"),
            (b"P6\n1 1\n-1.0\n" + bytes(4), "expected 'Pf'"),
            (b"Pf\ntwo 1\n-1.0\n" + bytes(8), "malformed header"),
            (b"Pf\n1 1\n0.0\n" + bytes(4), "non-zero"),
            (b"Pf\n2 2\n-1.0\n" + bytes(12), "payload has 12 bytes"),
        ],
    )
    def test_malformed_files(self, tmp_path, data, message):
        """Malformed headers and payloads raise PfmFormatError."""
        path = tmp_path / "bad.pfm"
        path.write_bytes(data)
        with pytest.raises(PfmFormatError, match=message):
            artifacts.read_pfm(path)


class TestCheckpoint:
    """Tests for the checkpoint blob."""

    @pytest.fixture
    def params(self):
        rng = np.random.default_rng(0)
        return {
            "fc.weight": rng.standard_normal((3, 2)).astype(np.float32),
            "fc.bias": np.zeros(3, dtype=np.float64),
            "scale": np.array(2.5, dtype=np.float32),
        }

    def test_decode_restores_names_shapes_and_dtypes(self, params):
        """Every array comes back bit for bit."""
        decoded = artifacts.decode_checkpoint(artifacts.encode_checkpoint(params))
        assert set(decoded) == set(params)
        for name, array in params.items():
            assert decoded[name].dtype == array.dtype
            np.testing.assert_array_equal(decoded[name], array)

    def test_header(self, params):
        """Magic, then version and array count."""
        blob = artifacts.encode_checkpoint(params)
        assert blob[:8] == b"ITSACKPT"
        assert struct.unpack("<II", blob[8:16]) == (1, 3)

    def test_bad_magic(self, params):
        """A blob of another kind is rejected."""
        blob = artifacts.encode_checkpoint(params)
        with pytest.raises(CheckpointFormatError, match="bad magic"):
            artifacts.decode_checkpoint(b"X" + blob[1:])

    def test_unknown_version(self, params):
        """Future versions are rejected."""
        blob = bytearray(artifacts.encode_checkpoint(params))
        blob[8:12] = struct.pack("<I", 2)
        with pytest.raises(CheckpointFormatError, match="version 2"):
            artifacts.decode_checkpoint(bytes(blob))

    def test_truncated(self, params):
        """A cut blob is reported as truncated."""
        blob = artifacts.encode_checkpoint(params)
        with pytest.raises(CheckpointFormatError, match="truncated"):
            artifacts.decode_checkpoint(blob[:-1])

    def test_trailing_bytes(self, params):
        """Extra bytes after the last array are rejected."""
        blob = artifacts.encode_checkpoint(params)
        with pytest.raises(CheckpointFormatError, match="trailing"):
            artifacts.decode_checkpoint(blob + b"\x00")

    def test_integer_arrays_are_not_supported(self):
        """Only float32 and float64 arrays are stored."""
        with pytest.raises(ValueError, match="unsupported dtype"):
            artifacts.encode_checkpoint({"n": np.arange(3)})

    def test_save_and_restore_in_place(self, tmp_path, params):
        """Saved values overwrite live arrays without replacing them."""
        path = tmp_path / "checkpoint.bin"
        artifacts.save_checkpoint(path, params)
        live = {name: np.zeros_like(array) for name, array in params.items()}
        weight = live["fc.weight"]
        artifacts.restore_parameters(live, artifacts.load_checkpoint(path))
        assert live["fc.weight"] is weight
        np.testing.assert_array_equal(weight, params["fc.weight"])

    def test_restore_checks_names_and_shapes(self, params):
        """Missing names and shape changes are reported."""
        with pytest.raises(CheckpointFormatError, match="names differ"):
            artifacts.restore_parameters({"other": np.zeros(1)}, params)
        live = dict(params, scale=np.zeros(2, dtype=np.float32))
        with pytest.raises(CheckpointFormatError, match="does not match"):
            artifacts.restore_parameters(live, params)


class TestPng:
    """Tests for the PNG previews."""

    def test_disparity_preview(self, tmp_path):
        """A disparity map is written as a PNG file."""
        path = tmp_path / "d.png"
        artifacts.write_disparity_png(path, np.linspace(0, 8, 32).reshape(4, 8), 8.0)
        assert path.read_bytes().startswith(PNG_SIGNATURE)

    def test_image_preview_clips(self, tmp_path):
        """Out-of-range colors are clipped instead of failing."""
        path = tmp_path / "i.png"
        image = np.random.default_rng(0).normal(0.5, 1.0, (3, 4, 6))
        artifacts.write_image_png(path, image)
        assert path.read_bytes().startswith(PNG_SIGNATURE)
