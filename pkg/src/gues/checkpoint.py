"""Flat binary checkpoints for the generator and the classifier.

Layout: a 5-byte magic string ("GUES1" for the generator, "CLSF1" for
the classifier), then one entry per array in fixed registration order:

    u32 name length, name bytes (utf-8),
    u32 rank, u32 per-dimension extents,
    the payload as little-endian float64.

All integers are little-endian u32.  Classifier checkpoints carry the
normalization running statistics as ordinary entries after the
parameters, so a load restores frozen-mode behavior exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .classifier import SourceClassifier
from .model import GuesModel

MAGIC_GUES = b"GUES1"
MAGIC_CLSF = b"CLSF1"


class CheckpointError(ValueError):
    pass


def _write_entry(fh, name: str, array: np.ndarray) -> None:
    data = np.ascontiguousarray(array, dtype="<f8")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_entry(fh):
    head = fh.read(4)
    if not head:
        return None                            # clean end of file
    if len(head) != 4:
        raise CheckpointError("truncated checkpoint in entry header")
    (name_len,) = struct.unpack("<I", head)
    name = _read_exact(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = _read_exact(fh, 8 * count)
    array = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return name, array


def _entries(path: str, magic: bytes):
    with open(path, "rb") as fh:
        found = _read_exact(fh, len(magic))
        if found != magic:
            raise CheckpointError(f"bad magic {found!r}; expected {magic!r}")
        while True:
            entry = _read_entry(fh)
            if entry is None:
                return
            yield entry


def _save(path: str, magic: bytes, named_arrays) -> None:
    with open(path, "wb") as fh:
        fh.write(magic)
        for name, array in named_arrays:
            _write_entry(fh, name, array)


def _check_entries(named_arrays, loaded: dict, kind: str) -> None:
    expected = [name for name, _ in named_arrays]
    if list(loaded) != expected:
        raise CheckpointError(
            f"{kind} checkpoint entries {list(loaded)} do not match model {expected}")
    for name, target in named_arrays:
        array = loaded[name]
        if array.shape != target.shape:
            raise CheckpointError(
                f"{kind} entry {name!r}: shape {array.shape} != {target.shape}")


def save_gues(path: str, model: GuesModel) -> None:
    _save(path, MAGIC_GUES,
          [(name, p.data) for name, p in model.named_parameters()])


def load_gues(path: str, model: GuesModel) -> GuesModel:
    """Loads parameters into an existing model (shape-checked)."""
    loaded = dict(_entries(path, MAGIC_GUES))
    named = [(name, p.data) for name, p in model.named_parameters()]
    _check_entries(named, loaded, "generator")
    for name, p in model.named_parameters():
        p.data = loaded[name]
    return model


def _classifier_arrays(model: SourceClassifier):
    out = [(name, p.data) for name, p in model.named_parameters()]
    out.extend(model.named_buffers())
    return out


def save_classifier(path: str, model: SourceClassifier) -> None:
    _save(path, MAGIC_CLSF, _classifier_arrays(model))


def load_classifier(path: str, model: SourceClassifier) -> SourceClassifier:
    loaded = dict(_entries(path, MAGIC_CLSF))
    _check_entries(_classifier_arrays(model), loaded, "classifier")
    for name, p in model.named_parameters():
        p.data = loaded[name]
    for i, bn in enumerate(model.bns, start=1):
        bn.running_mean = loaded[f"bn{i}.running_mean"]
        bn.running_var = loaded[f"bn{i}.running_var"]
    return model
