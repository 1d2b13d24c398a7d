"""Little-endian binary file formats.

* ``EGF1`` checkpoints: magic, then per parameter ``u32 name_len``, UTF-8
  name, ``u32 rank``, ``rank`` x ``u32`` dims, float32 values. Records run
  to end of file.
* ``SPG1`` spectrogram cache: magic, ``u32 freq_bins``, ``u32 time_frames``,
  float32 row-major values.
* ``IMG1`` frame stacks: magic, ``u32`` frames, channels, height, width,
  float32 row-major values.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

CHECKPOINT_MAGIC = b"EGF1"
SPECTROGRAM_MAGIC = b"SPG1"
FRAMES_MAGIC = b"IMG1"


class FormatError(ValueError):
    pass


def _f32le(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def write_checkpoint(path: str | Path, state: Mapping[str, np.ndarray]) -> None:
    parts = [CHECKPOINT_MAGIC]
    for name, arr in state.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(_f32le(arr))
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an EGF1 checkpoint")
    pos, out = 4, {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            vals = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            out[name] = vals.reshape(dims).astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    return out


def write_spectrogram(path: str | Path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim != 2:
        raise FormatError("spectrogram must be 2-D")
    Path(path).write_bytes(SPECTROGRAM_MAGIC + struct.pack("<II", *data.shape) + _f32le(data))


def read_spectrogram(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != SPECTROGRAM_MAGIC:
        raise FormatError(f"{path}: not an SPG1 file")
    f, t = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * f * t:
        raise FormatError(f"{path}: size does not match header {f}x{t}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(f, t).astype(np.float32)


def write_frames(path: str | Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise FormatError("frame stack must be (frames, channels, height, width)")
    Path(path).write_bytes(FRAMES_MAGIC + struct.pack("<4I", *frames.shape) + _f32le(frames))


def read_frames(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FRAMES_MAGIC:
        raise FormatError(f"{path}: not an IMG1 file")
    dims = struct.unpack_from("<4I", data, 4)
    if len(data) != 20 + 4 * int(np.prod(dims)):
        raise FormatError(f"{path}: size does not match header {dims}")
    return np.frombuffer(data, dtype="<f4", offset=20).reshape(dims).astype(np.float32)
