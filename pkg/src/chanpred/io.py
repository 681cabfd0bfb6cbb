"""Binary dataset (LCP1) and checkpoint (LCKP) containers.

LCP1 layout, little-endian::

    b"LCP1" | u32 version=1 | u32 num_samples | u32 frames_per_sample | u32 R | u32 T
    | num_samples*frames*R*T complex entries as interleaved f32 (re, im)

sample-major, then frame-major, then row-major over [R x T].  A JSON sidecar
(``<file>.json``) carries simulator metadata.

LCKP layout::

    b"LCKP" | u32 version | u32 len | ModelConfig as "key = value" text
    | repeated: u32 name_len | name | u32 rank | u32 dims... | f32 data

Parameters run to end of file.  Input standardization is stored as the
parameters ``input.mean`` and ``input.std``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig, check_params

LCP1_MAGIC = b"LCP1"
LCP1_VERSION = 1
LCKP_MAGIC = b"LCKP"
LCKP_VERSION = 1


class FormatError(ValueError):
    """A file is malformed or has an unsupported version."""


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_lcp1(path, samples: np.ndarray, meta: dict | None = None):
    """Write complex ``[num_samples, frames, R, T]`` to ``path`` (and a JSON sidecar if ``meta``)."""
    samples = np.asarray(samples)
    if samples.ndim == 3:
        samples = samples[None]
    if samples.ndim != 4:
        raise ValueError(f"expected [samples, frames, R, T], got {samples.shape}")
    header = LCP1_MAGIC + struct.pack("<5I", LCP1_VERSION, *samples.shape)
    body = np.ascontiguousarray(samples, dtype="<c8").tobytes()
    atomic_write_bytes(path, header + body)
    if meta is not None:
        atomic_write_text(sidecar_path(path), json.dumps(meta, indent=2, sort_keys=True, default=str))


def read_lcp1(path) -> np.ndarray:
    """Read an LCP1 file as complex64 ``[num_samples, frames, R, T]``."""
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != LCP1_MAGIC:
        raise FormatError(f"{path}: not an LCP1 file")
    version, n, f, r, t = struct.unpack_from("<5I", raw, 4)
    if version != LCP1_VERSION:
        raise FormatError(f"{path}: unsupported LCP1 version {version}")
    count = n * f * r * t
    if len(raw) - 24 != count * 8:
        raise FormatError(f"{path}: expected {count} complex entries, file holds {(len(raw) - 24) / 8:g}")
    return np.frombuffer(raw, dtype="<c8", offset=24).reshape(n, f, r, t).copy()


def read_sidecar(path) -> dict | None:
    p = sidecar_path(path)
    return json.loads(p.read_text()) if p.exists() else None


def save_checkpoint(path, predictor):
    """Serialize a :class:`~chanpred.training.Predictor`."""
    cfg_text = predictor.cfg.to_text().encode()
    parts = [LCKP_MAGIC, struct.pack("<II", LCKP_VERSION, len(cfg_text)), cfg_text]
    named = list(predictor.params.items()) + [
        ("input.mean", Tensor(predictor.feat_mean)), ("input.std", Tensor(predictor.feat_std))]
    for name, t in named:
        data = np.ascontiguousarray(t.data, dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape))
        parts.append(data.tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path, dtype=np.float64):
    """Read a checkpoint back into a :class:`~chanpred.training.Predictor`."""
    from .training import Predictor

    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != LCKP_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != LCKP_VERSION:
        raise FormatError(f"{path}: checkpoint version {version} is not supported "
                          f"(expected {LCKP_VERSION})")
    pos = 12
    cfg = ModelConfig.from_text(raw[pos: pos + n].decode())
    pos += n
    tensors = {}
    try:
        while pos < len(raw):
            (ln,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos: pos + ln].decode()
            pos += ln
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt parameter record") from exc
    try:
        mean, std = tensors.pop("input.mean"), tensors.pop("input.std")
    except KeyError as exc:
        raise FormatError(f"{path}: missing input standardization") from exc
    params = {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in tensors.items()}
    check_params(params, cfg)
    return Predictor(cfg, params, mean.astype(np.float64), std.astype(np.float64))
