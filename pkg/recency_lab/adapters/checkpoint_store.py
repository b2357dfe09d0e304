"""
"CKPT" checkpoint files.

    b"CKPT" | u32 version | u32 header_len | JSON header | f32 payloads

The JSON header holds the ModelConfig, the stage history and a tensor
manifest (name, shape) in payload order. All integers and floats are little
endian; payloads are raw f32 in C order.
"""

import json
import struct
from pathlib import Path
from typing import List

import numpy as np
import torch

from recency_lab.models.config import ModelConfig
from recency_lab.models.errors import CorruptCheckpoint, MissingArtifact
from recency_lab.services.transformer import TransformerLM
from recency_lab.utils.logger import logger

MAGIC = b"CKPT"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def checkpoint_path(run_dir: Path, name: str) -> Path:
    return Path(run_dir) / "ckpt" / f"{name}.ckpt"


def save_checkpoint(model: TransformerLM, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    header = {
        "config": model.config.model_dump(mode="json"),
        "history": [[label, epochs] for label, epochs in model.history],
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in state.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for tensor in state.values():
            fh.write(tensor.detach().cpu().numpy().astype("<f4", copy=False).tobytes(order="C"))
    logger.debug(f"Saved checkpoint {path} ({len(state)} tensors, history {model.history})")
    return path


def load_checkpoint(path: Path) -> TransformerLM:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"checkpoint not found: {path}", path=str(path))
    raw = path.read_bytes()

    if len(raw) < _PREFIX.size:
        raise CorruptCheckpoint(f"{path} is shorter than the checkpoint prefix", path=str(path), size=len(raw))
    magic, version, header_len = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"{path} has bad magic {magic!r}", path=str(path))
    if version != VERSION:
        raise CorruptCheckpoint(f"{path} has unsupported version {version}", path=str(path), version=version)

    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"{path} has an unreadable header: {e}", path=str(path))

    manifest: List[dict] = header["tensors"]
    expected = start + header_len + 4 * sum(int(np.prod(t["shape"], dtype=np.int64)) for t in manifest)
    if len(raw) != expected:
        raise CorruptCheckpoint(
            f"{path} is {len(raw)} bytes, manifest implies {expected}",
            path=str(path), size=len(raw), expected=expected,
        )

    model = TransformerLM(ModelConfig.model_validate(header["config"]))
    offset = start + header_len
    state = {}
    for entry in manifest:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        array = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(array.astype(np.float32))
        offset += 4 * count
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CorruptCheckpoint(f"{path} does not match its config: {e}", path=str(path))

    model.history = [(str(label), int(epochs)) for label, epochs in header["history"]]
    model.eval()
    return model
