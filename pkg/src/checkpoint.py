"""
Checkpoint Container

Single-file binary container shared by training checkpoints (section ``CKPT``) and
compiled plans (section ``PLAN``):

    magic b"CNV2" | version u32 | section tag (4 bytes)
    header length u32 | canonical JSON header (config + state or layout)
    record count u32 | records

Each record is ``kind`` (b"T" tensor, b"I" index map), a u16-prefixed UTF-8 name and
a payload. Tensors are little-endian float32 with an optional u8 mask of the same
shape; index maps store mode, widths and (source, destination) u32 pairs.
All integers are little-endian.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Optional, Tuple, Union

import numpy as np

from .compiler import GATHER, SCATTER_SUM, IndexMap, InferencePlan
from .condensenet import Network, NetworkConfig
from .exceptions import CheckpointFormatError, TensorShapeError

logger = logging.getLogger(__name__)

MAGIC = b"CNV2"
VERSION = 1
CHECKPOINT_TAG = b"CKPT"
PLAN_TAG = b"PLAN"

_MODES = {GATHER: 0, SCATTER_SUM: 1}
_MODE_NAMES = {v: k for k, v in _MODES.items()}

Record = Union[np.ndarray, Tuple[np.ndarray, Optional[np.ndarray]], IndexMap]


def _canonical(header: Dict[str, Any]) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_name(f: BinaryIO, name: str) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


def _write_tensor(f: BinaryIO, name: str, data: np.ndarray, mask: Optional[np.ndarray]) -> None:
    f.write(b"T")
    _write_name(f, name)
    data = np.ascontiguousarray(data, dtype="<f4")
    f.write(struct.pack("<B", data.ndim))
    f.write(struct.pack(f"<{data.ndim}I", *data.shape))
    f.write(data.tobytes())
    if mask is None:
        f.write(b"\x00")
    else:
        f.write(b"\x01")
        f.write(np.ascontiguousarray(mask != 0, dtype=np.uint8).tobytes())


def _write_index(f: BinaryIO, name: str, index: IndexMap) -> None:
    f.write(b"I")
    _write_name(f, name)
    f.write(struct.pack("<BIII", _MODES[index.mode], index.output_width, index.input_width, index.sources.size))
    pairs = np.stack([index.sources, index.destinations], axis=1).astype("<u4")
    f.write(pairs.tobytes())


def write_container(path, tag: bytes, header: Dict[str, Any], records: List[Tuple[str, Record]]) -> Path:
    """Write a container file; records are arrays, (array, mask) pairs or IndexMaps."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = _canonical(header)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(tag)
        f.write(struct.pack("<I", len(body)))
        f.write(body)
        f.write(struct.pack("<I", len(records)))
        for name, record in records:
            if isinstance(record, IndexMap):
                _write_index(f, name, record)
            elif isinstance(record, tuple):
                _write_tensor(f, name, record[0], record[1])
            else:
                _write_tensor(f, name, record, None)
    return path


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(f"{self.path}: truncated at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path, expected_tag: Optional[bytes] = None
                   ) -> Tuple[bytes, Dict[str, Any], Dict[str, Record]]:
    """Read a container; tensors come back as (array, mask-or-None) pairs."""
    path = Path(path)
    try:
        reader = _Reader(path.read_bytes(), path)
    except OSError as e:
        raise CheckpointFormatError(f"cannot read {path}: {e}") from e

    if reader.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a CNV2 container")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    tag = reader.take(4)
    if expected_tag is not None and tag != expected_tag:
        raise CheckpointFormatError(f"{path}: expected section {expected_tag!r}, found {tag!r}")
    (length,) = reader.unpack("<I")
    try:
        header = json.loads(reader.take(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: corrupt header: {e}") from e

    records: Dict[str, Record] = {}
    (count,) = reader.unpack("<I")
    for _ in range(count):
        kind = reader.take(1)
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        if kind == b"T":
            (ndim,) = reader.unpack("<B")
            shape = reader.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
            (has_mask,) = reader.unpack("<B")
            mask = None
            if has_mask:
                mask = np.frombuffer(reader.take(size), dtype=np.uint8).reshape(shape).astype(np.float32)
            records[name] = (data, mask)
        elif kind == b"I":
            mode, out_width, in_width, n = reader.unpack("<BIII")
            if mode not in _MODE_NAMES:
                raise CheckpointFormatError(f"{path}: unknown index mode {mode} in '{name}'")
            pairs = np.frombuffer(reader.take(8 * n), dtype="<u4").reshape(n, 2).astype(np.int64)
            try:
                records[name] = IndexMap(_MODE_NAMES[mode], pairs[:, 0], pairs[:, 1], out_width, in_width)
            except TensorShapeError as e:
                raise CheckpointFormatError(f"{path}: invalid index record '{name}': {e}") from e
        else:
            raise CheckpointFormatError(f"{path}: unknown record kind {kind!r}")
    if reader.pos != len(reader.raw):
        raise CheckpointFormatError(f"{path}: {len(reader.raw) - reader.pos} trailing bytes")
    return tag, header, records


def save_checkpoint(net: Network, path, extra: Optional[Dict[str, Any]] = None) -> Path:
    """Parameters, masks, running statistics and stage counters of a training-form network."""
    header = {
        "config": net.config.to_dict(),
        "state": {"sfr_stages": net.sfr_stages_done, "lgc_stages": net.lgc_stages_done, **(extra or {})},
    }
    records: List[Tuple[str, Record]] = [(name, (p.data, p.mask)) for name, p in net.named_parameters()]
    for name, stats in net.named_buffers():
        records.append((f"{name}.mean", stats.mean))
        records.append((f"{name}.var", stats.var))
    path = write_container(path, CHECKPOINT_TAG, header, records)
    logger.info(f"💾 Saved checkpoint: {path}")
    return path


def load_checkpoint(path) -> Network:
    _, header, records = read_container(path, CHECKPOINT_TAG)
    config = NetworkConfig.from_dict(header["config"])
    net = Network(config)
    state = {name: rec[0] for name, rec in records.items() if isinstance(rec, tuple)}
    masks = {name: rec[1] for name, rec in records.items() if isinstance(rec, tuple) and rec[1] is not None}
    try:
        net.load_state_dict(state, masks)
    except KeyError as e:
        raise CheckpointFormatError(f"{path}: {e}") from e
    stages = header.get("state", {})
    net.restore_stages(int(stages.get("sfr_stages", 0)), int(stages.get("lgc_stages", 0)))
    logger.info(f"📂 Loaded checkpoint {path} ({config.name})")
    return net


def read_checkpoint_state(path) -> Dict[str, Any]:
    return read_container(path, CHECKPOINT_TAG)[1].get("state", {})


def save_plan(plan: InferencePlan, path) -> Path:
    header = {"config": plan.config.to_dict(), "layout": plan.layout()}
    path = write_container(path, PLAN_TAG, header, plan.records())
    logger.info(f"💾 Saved plan: {path}")
    return path


def load_plan(path) -> InferencePlan:
    _, header, records = read_container(path, PLAN_TAG)
    resolved = {name: rec if isinstance(rec, IndexMap) else rec[0] for name, rec in records.items()}
    try:
        return InferencePlan.from_layout(NetworkConfig.from_dict(header["config"]), header["layout"], resolved)
    except KeyError as e:
        raise CheckpointFormatError(f"{path}: plan layout references missing record {e}") from e
