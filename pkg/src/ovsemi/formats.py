"""Binary exchange formats.

All three formats are an ASCII header followed by little-endian payload:

* pseudo-label: ``SOVSPL v1 H W N_IN\\n``, H*W uint16 ids, H*W float32 confidences
* embedding field: ``SOVSEMB v1 H W D\\n``, H*W*D float32
* checkpoint: ``SOVSCKPT v1\\n<config hash>\\n<parameter count>\\n``, float32 parameters
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import FormatError

_U16 = np.dtype("<u2")
_F32 = np.dtype("<f4")


def _atomic_write(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _split_header(blob: bytes, n_lines: int, path):
    parts = blob.split(b"\n", n_lines)
    if len(parts) != n_lines + 1:
        raise FormatError(f"{path}: truncated header")
    try:
        return [p.decode("ascii") for p in parts[:n_lines]], parts[n_lines]
    except UnicodeDecodeError:
        raise FormatError(f"{path}: header is not ASCII") from None


def encode_pseudo_label(label, confidence, n_in) -> bytes:
    label = np.asarray(label)
    h, w = label.shape
    if np.shape(confidence) != (h, w):
        raise FormatError("label and confidence shapes differ")
    if label.size and (label.min() < 0 or label.max() > 0xFFFF):
        raise FormatError("label ids must fit in uint16")
    header = f"SOVSPL v1 {h} {w} {n_in}\n".encode("ascii")
    return header + label.astype(_U16).tobytes() + np.asarray(confidence).astype(_F32).tobytes()


def decode_pseudo_label(blob: bytes, path="<bytes>"):
    """Return ``(label uint16, confidence float32, n_in)``."""
    (head,), payload = _split_header(blob, 1, path)
    fields = head.split(" ")
    if len(fields) != 5 or fields[:2] != ["SOVSPL", "v1"]:
        raise FormatError(f"{path}: bad pseudo-label header {head!r}")
    h, w, n_in = (int(v) for v in fields[2:])
    n = h * w
    if len(payload) != n * (2 + 4):
        raise FormatError(f"{path}: expected {n * 6} payload bytes, got {len(payload)}")
    label = np.frombuffer(payload, dtype=_U16, count=n).reshape(h, w)
    conf = np.frombuffer(payload, dtype=_F32, count=n, offset=2 * n).reshape(h, w)
    return label.astype(np.uint16), conf.astype(np.float32), n_in


def write_pseudo_label_file(path, label, confidence, n_in):
    _atomic_write(path, encode_pseudo_label(label, confidence, n_in))


def read_pseudo_label_file(path):
    return decode_pseudo_label(Path(path).read_bytes(), path)


def encode_embedding(field) -> bytes:
    field = np.asarray(field)
    if field.ndim != 3:
        raise FormatError(f"embedding field must be H x W x D, got shape {field.shape}")
    h, w, d = field.shape
    return f"SOVSEMB v1 {h} {w} {d}\n".encode("ascii") + field.astype(_F32).tobytes()


def decode_embedding(blob: bytes, path="<bytes>"):
    (head,), payload = _split_header(blob, 1, path)
    fields = head.split(" ")
    if len(fields) != 5 or fields[:2] != ["SOVSEMB", "v1"]:
        raise FormatError(f"{path}: bad embedding header {head!r}")
    h, w, d = (int(v) for v in fields[2:])
    if len(payload) != h * w * d * 4:
        raise FormatError(f"{path}: expected {h * w * d * 4} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=_F32).reshape(h, w, d).astype(np.float32)


def write_embedding_file(path, field):
    _atomic_write(path, encode_embedding(field))


def read_embedding_file(path):
    return decode_embedding(Path(path).read_bytes(), path)


def encode_checkpoint(params, config_hash: str) -> bytes:
    params = np.asarray(params).ravel()
    if not config_hash or any(c.isspace() for c in config_hash):
        raise FormatError("config hash must be a non-empty token")
    header = f"SOVSCKPT v1\n{config_hash}\n{params.size}\n".encode("ascii")
    return header + params.astype(_F32).tobytes()


def decode_checkpoint(blob: bytes, path="<bytes>"):
    """Return ``(params float32, config_hash)``."""
    (magic, config_hash, count), payload = _split_header(blob, 3, path)
    if magic != "SOVSCKPT v1":
        raise FormatError(f"{path}: bad checkpoint header {magic!r}")
    n = int(count)
    if len(payload) != 4 * n:
        raise FormatError(f"{path}: expected {4 * n} parameter bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=_F32).astype(np.float32), config_hash


def write_checkpoint_file(path, params, config_hash):
    _atomic_write(path, encode_checkpoint(params, config_hash))


def read_checkpoint_file(path):
    return decode_checkpoint(Path(path).read_bytes(), path)
