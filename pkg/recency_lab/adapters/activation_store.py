"""
"ACTV" activation tensor files.

    b"ACTV" | u32 version | u32 n_samples | u32 n_layers | u32 n_tokens | u32 d_model | f32 payload

The sample index lives next to the tensor in `<name>.idx.jsonl`: a header
line `{"fingerprint": ...}` followed by one SampleIndex per row.
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from cachetools import LRUCache

from recency_lab.models.activations import ActivationTensor
from recency_lab.models.errors import CorruptTensorFile, MissingArtifact
from recency_lab.models.records import SampleIndex
from recency_lab.utils.logger import logger
from recency_lab.utils.settings import acts_cache_size, cache_enabled

MAGIC = b"ACTV"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

_read_cache: Optional[LRUCache] = None


def _cache() -> LRUCache:
    global _read_cache
    if _read_cache is None:
        _read_cache = LRUCache(maxsize=max(1, acts_cache_size()))
    return _read_cache


def clear_cache() -> None:
    if _read_cache is not None:
        _read_cache.clear()


def _get_cache_key(path: Path) -> str:
    """Changes whenever the file is rewritten."""
    st = path.stat()
    key_string = f"actv:{path.resolve()}:{st.st_size}:{st.st_mtime_ns}"
    return hashlib.md5(key_string.encode()).hexdigest()


def activation_path(run_dir: Path, checkpoint: str, tag) -> Path:
    return Path(run_dir) / "acts" / checkpoint / f"{tag}.actv"


def index_path(path: Path) -> Path:
    return Path(path).with_suffix(".idx.jsonl")


def write_activations(path: Path, tensor: ActivationTensor) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, L, T, D = tensor.data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, L, T, D))
        fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes(order="C"))

    with open(index_path(path), "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"fingerprint": tensor.fingerprint}) + "\n")
        for row in tensor.index:
            fh.write(json.dumps(row.model_dump(mode="json"), sort_keys=True) + "\n")
    logger.debug(f"Wrote activations {tensor.data.shape} to {path}")
    return path


def _parse(path: Path) -> Tuple[np.ndarray, list, str]:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptTensorFile(f"{path} is shorter than the ACTV header", path=str(path), size=len(raw))
    magic, version, n, L, T, D = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CorruptTensorFile(f"{path} has bad magic {magic!r}", path=str(path))
    if version != VERSION:
        raise CorruptTensorFile(f"{path} has unsupported version {version}", path=str(path), version=version)
    expected = _HEADER.size + 4 * n * L * T * D
    if len(raw) != expected:
        raise CorruptTensorFile(
            f"{path} is {len(raw)} bytes, header dims {(n, L, T, D)} imply {expected}",
            path=str(path), size=len(raw), expected=expected, dims=[n, L, T, D],
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, L, T, D).astype(np.float32)
    data.flags.writeable = False

    idx_file = index_path(path)
    if not idx_file.exists():
        raise MissingArtifact(f"missing sample index {idx_file}", path=str(idx_file))
    lines = [line for line in idx_file.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        raise CorruptTensorFile(f"{idx_file} is empty", path=str(idx_file))
    fingerprint = json.loads(lines[0]).get("fingerprint", "")
    index = [SampleIndex.model_validate(json.loads(line)) for line in lines[1:]]
    if len(index) != n:
        raise CorruptTensorFile(
            f"{idx_file} has {len(index)} rows for {n} samples", path=str(idx_file), rows=len(index), n_samples=n,
        )
    return data, index, fingerprint


def read_activations(path: Path, expected_fingerprint: Optional[str] = None) -> ActivationTensor:
    """
    Load a tensor and its index. Returned data is read-only.

    A fingerprint that differs from `expected_fingerprint` does not fail the
    read; it sets `fingerprint_mismatch` on the result.
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"activation file not found: {path}", path=str(path))

    cache_key = _get_cache_key(path)
    if cache_enabled() and cache_key in _cache():
        logger.debug(f"Returning cached activations for {path}")
        data, index, fingerprint = _cache()[cache_key]
    else:
        data, index, fingerprint = _parse(path)
        if cache_enabled():
            _cache()[cache_key] = (data, index, fingerprint)

    mismatch = expected_fingerprint is not None and expected_fingerprint != fingerprint
    if mismatch:
        logger.warning(f"Fingerprint of {path} does not match the supplied checkpoint")
    return ActivationTensor(data=data, index=list(index), fingerprint=fingerprint, fingerprint_mismatch=mismatch)
