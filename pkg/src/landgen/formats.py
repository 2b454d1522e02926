"""Binary raster/mask file formats, PPM export, and manifest JSON.

CRAS layout (little-endian): magic ``CRAS`` (4 bytes), version u8 = 1,
flags u8 = 0, H u16, W u16, K u8, reserved u8, then H*W class bytes in
row-major order. A mask file is identical except the magic is ``CMSK``
and payload bytes are 0/1.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    BadVersionError,
    ClassIndexOutOfRangeError,
    FormatError,
    PaletteMismatchError,
    TruncatedPayloadError,
)
from .raster import CategoricalRaster, ClassPalette, DatasetManifest, PixelMask

CRAS_MAGIC = b"CRAS"
CMSK_MAGIC = b"CMSK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBBHHBB")  # magic, version, flags, H, W, K, reserved


def _encode_header(magic: bytes, h: int, w: int, k: int) -> bytes:
    if h > 0xFFFF or w > 0xFFFF:
        raise ValueError(f"raster {h}x{w} too large for u16 dimensions")
    return _HEADER.pack(magic, FORMAT_VERSION, 0, h, w, k, 0)


def _decode_header(buf: bytes, magic: bytes) -> tuple[int, int, int]:
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(f"file shorter than {_HEADER.size}-byte header")
    got_magic, version, _flags, h, w, k, _res = _HEADER.unpack_from(buf)
    if got_magic != magic:
        raise BadMagicError(f"expected magic {magic!r}, got {got_magic!r}")
    if version != FORMAT_VERSION:
        raise BadVersionError(f"unsupported version {version}")
    expected = _HEADER.size + h * w
    if len(buf) < expected:
        raise TruncatedPayloadError(f"payload holds {len(buf) - _HEADER.size} of {h * w} bytes")
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after payload")
    return h, w, k


def encode_raster(raster: CategoricalRaster) -> bytes:
    return _encode_header(CRAS_MAGIC, raster.height, raster.width, raster.palette_K) + raster.data.tobytes()


def decode_raster(buf: bytes) -> CategoricalRaster:
    h, w, k = _decode_header(buf, CRAS_MAGIC)
    data = np.frombuffer(buf, dtype=np.uint8, offset=_HEADER.size).reshape(h, w)
    if data.size and int(data.max()) >= k:
        raise ClassIndexOutOfRangeError(f"payload byte {int(data.max())} >= K={k}")
    return CategoricalRaster(data, k)


def encode_mask(mask: PixelMask) -> bytes:
    return _encode_header(CMSK_MAGIC, mask.height, mask.width, 2) + mask.observed.astype(np.uint8).tobytes()


def decode_mask(buf: bytes) -> PixelMask:
    h, w, _k = _decode_header(buf, CMSK_MAGIC)
    data = np.frombuffer(buf, dtype=np.uint8, offset=_HEADER.size).reshape(h, w)
    if data.size and int(data.max()) > 1:
        raise ClassIndexOutOfRangeError(f"mask byte {int(data.max())} not in {{0, 1}}")
    return PixelMask(data.astype(bool))


def export_ppm(raster: CategoricalRaster, palette: ClassPalette) -> bytes:
    """Binary P6 image, one palette color per cell."""
    if palette.num_classes != raster.palette_K:
        raise PaletteMismatchError(
            f"palette has {palette.num_classes} classes, raster expects {raster.palette_K}"
        )
    lut = np.asarray(palette.colors, dtype=np.uint8)
    rgb = lut[raster.data]
    header = f"P6\n{raster.width} {raster.height}\n255\n".encode("ascii")
    return header + rgb.tobytes()


def heatmap_ppm(grid: np.ndarray) -> bytes:
    """P6 rendering of a scalar grid on a blue-to-red ramp."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = float(np.nanmin(g)), float(np.nanmax(g))
    t = np.zeros_like(g) if hi == lo else (g - lo) / (hi - lo)
    r = np.clip(1.5 - np.abs(4 * t - 3), 0, 1)
    gch = np.clip(1.5 - np.abs(4 * t - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * t - 1), 0, 1)
    rgb = (np.stack([r, gch, b], axis=-1) * 255).astype(np.uint8)
    header = f"P6\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii")
    return header + rgb.tobytes()


def manifest_to_json(manifest: DatasetManifest) -> str:
    return json.dumps(
        {
            "window_size": manifest.window_size,
            "K": manifest.K,
            "entries": [list(e) for e in manifest.entries],
            "water_class": manifest.water_class,
            "water_fraction_limit": manifest.water_fraction_limit,
        },
        indent=2,
    )


def manifest_from_json(text: str) -> DatasetManifest:
    try:
        obj = json.loads(text)
        return DatasetManifest(
            window_size=int(obj["window_size"]),
            K=int(obj["K"]),
            entries=tuple((str(s), int(r), int(c)) for s, r, c in obj["entries"]),
            water_class=int(obj["water_class"]),
            water_fraction_limit=float(obj["water_fraction_limit"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad manifest: {exc}") from exc


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def read_raster_file(path: str | Path) -> CategoricalRaster:
    return decode_raster(Path(path).read_bytes())


def write_raster_file(path: str | Path, raster: CategoricalRaster) -> None:
    atomic_write_bytes(path, encode_raster(raster))


def read_mask_file(path: str | Path) -> PixelMask:
    return decode_mask(Path(path).read_bytes())


def write_mask_file(path: str | Path, mask: PixelMask) -> None:
    atomic_write_bytes(path, encode_mask(mask))
