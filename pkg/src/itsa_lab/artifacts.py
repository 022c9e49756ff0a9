"""On-disk formats: metrics CSV, PFM disparity maps, checkpoints and PNG previews."""

import csv
import io
import logging
import math
import struct
from collections.abc import Iterable, Mapping
from pathlib import Path

import numpy as np
from matplotlib import image as mpl_image

from .data.constants import METRICS_HEADER
from .data.domains import FloatArray, MetricsRecord
from .errors import CheckpointFormatError, PfmFormatError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ITSACKPT"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


# ---------------------------------------------------------------------------
# Metrics


def format_metrics(records: Iterable[MetricsRecord]) -> str:
    """CSV text with the fixed header; floats use their shortest exact repr."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for r in records:
        writer.writerow(
            [r.run_id, r.method, r.seed, r.epoch, r.split, r.metric]
            + [repr(float(r.value))]
        )
    return buffer.getvalue()


def write_metrics(path: Path, records: Iterable[MetricsRecord]) -> None:
    Path(path).write_text(format_metrics(records), encoding="utf-8")


def read_metrics(path: Path) -> list[MetricsRecord]:
    """Parse a metrics CSV, rejecting any other header."""
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_HEADER:
            raise ValueError(
                f"{path}: header must be {','.join(METRICS_HEADER)}, got {header}"
            )
        return [
            MetricsRecord(
                run_id=row[0],
                method=row[1],
                seed=int(row[2]),
                epoch=int(row[3]),
                split=row[4],
                metric=row[5],
                value=float(row[6]),
            )
            for row in reader
            if row
        ]


# ---------------------------------------------------------------------------
# PFM


def write_pfm(path: Path, disparity: FloatArray) -> None:
    """Grayscale PFM: ``Pf`` header, scale -1 (little-endian), bottom row first."""
    if disparity.ndim != 2:
        raise ValueError(f"PFM maps must be 2-D, got shape {disparity.shape}")
    height, width = disparity.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    payload = np.flipud(disparity).astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_pfm(path: Path) -> FloatArray:
    """Read a grayscale PFM of either byte order into a float32 [H, W] map."""
    data = Path(path).read_bytes()
    lines = data.split(b"\n", 3)
    if len(lines) < 4:
        raise PfmFormatError(f"{path}: truncated header")
    kind, dims, scale_text, payload = lines
    if kind.strip() == b"PF":
        raise PfmFormatError(f"{path}: color PFM is not supported")
    if kind.strip() != b"Pf":
        raise PfmFormatError(f"{path}: expected 'Pf' header, got {kind[:8]!r}")
    try:
        width, height = (int(v) for v in dims.split())
        scale = float(scale_text)
    except ValueError as e:
        raise PfmFormatError(f"{path}: malformed header") from e
    if scale == 0:
        raise PfmFormatError(f"{path}: scale must be non-zero")
    dtype = "<f4" if scale < 0 else ">f4"
    expected = 4 * width * height
    if len(payload) != expected:
        raise PfmFormatError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}"
        )
    values = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return np.flipud(values).astype(np.float32)


# ---------------------------------------------------------------------------
# Checkpoints


def encode_checkpoint(params: Mapping[str, FloatArray]) -> bytes:
    """Versioned blob of named float arrays with shape headers."""
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name in sorted(params):
        array = np.asarray(params[name])
        dtype = array.dtype.newbyteorder("<")
        if dtype not in _DTYPE_CODES:
            raise ValueError(f"{name}: unsupported dtype {array.dtype}")
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<BB", _DTYPE_CODES[dtype], array.ndim))
        out.append(struct.pack(f"<{array.ndim}I", *array.shape))
        out.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(
                f"truncated checkpoint: need {n} bytes at offset {self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> dict[str, FloatArray]:
    """Inverse of ``encode_checkpoint``."""
    reader = _Reader(data)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a checkpoint: bad magic")
    version, count = reader.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {version}; expected {CHECKPOINT_VERSION}"
        )
    params: dict[str, FloatArray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointFormatError(f"{name}: unknown dtype code {code}")
        shape = reader.unpack(f"<{ndim}I")
        dtype = _CODE_DTYPES[code]
        raw = reader.take(dtype.itemsize * math.prod(shape))
        params[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if reader.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - reader.pos} trailing bytes")
    return params


def save_checkpoint(path: Path, params: Mapping[str, FloatArray]) -> None:
    Path(path).write_bytes(encode_checkpoint(params))
    logger.info(f"checkpoint written to {path}")


def load_checkpoint(path: Path) -> dict[str, FloatArray]:
    return decode_checkpoint(Path(path).read_bytes())


def restore_parameters(
    live: Mapping[str, FloatArray], saved: Mapping[str, FloatArray]
) -> None:
    """Copy saved values into live parameter arrays, checking names and shapes."""
    missing = sorted(set(live) ^ set(saved))
    if missing:
        raise CheckpointFormatError(f"parameter names differ: {', '.join(missing)}")
    for name, array in live.items():
        if array.shape != saved[name].shape:
            raise CheckpointFormatError(
                f"{name}: shape {saved[name].shape} does not match {array.shape}"
            )
        array[...] = saved[name]


# ---------------------------------------------------------------------------
# PNG previews


def write_disparity_png(
    path: Path, disparity: FloatArray, max_disparity: float
) -> None:
    """Color-mapped disparity preview with a fixed [0, max_disparity] range."""
    mpl_image.imsave(Path(path), disparity, cmap="magma", vmin=0.0, vmax=max_disparity)


def write_image_png(path: Path, image: FloatArray) -> None:
    """Save a [3, H, W] image in [0, 1]."""
    mpl_image.imsave(Path(path), np.clip(np.moveaxis(image, 0, -1), 0.0, 1.0))
