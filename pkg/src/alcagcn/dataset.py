"""Labelled skeleton datasets, protocol splits and the binary container.

Container layout (little endian)::

    b"ALCA" | u16 version | u32 meta length | meta JSON (utf-8)
    u32 sequence count | u16 joints | u16 performers
    per sequence: i32 label | u32 frames | u8 performer bits | u8 split | u8 reference
                  float32 payload, C-order (3, T, U, M)
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .skeleton import MAX_PERFORMERS, NUM_COORDS, NUM_JOINTS, SkeletonSequence
from .tensor import ContractError

MAGIC = b"ALCA"
FORMAT_VERSION = 1

SPLITS = ("aux", "val", "eval")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}


class DatasetFormatError(ValueError):
    pass


class ProtocolError(ContractError):
    pass


@dataclass
class Dataset:
    sequences: list[SkeletonSequence] = field(default_factory=list)
    splits: list[str] = field(default_factory=list)
    references: list[bool] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.sequences)
        if not self.splits:
            self.splits = ["aux"] * n
        if not self.references:
            self.references = [False] * n
        if len(self.splits) != n or len(self.references) != n:
            raise ContractError("split/reference metadata must cover every sequence")
        for s in self.splits:
            if s not in _SPLIT_CODE:
                raise ContractError(f"unknown split {s!r}")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=np.int64)

    @property
    def class_ids(self) -> list[int]:
        return sorted({s.label for s in self.sequences})

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def classes_in(self, split: str) -> list[int]:
        return sorted({self.sequences[i].label for i in self.indices(split)})

    def by_class(self, split: str) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i in self.indices(split):
            out.setdefault(self.sequences[i].label, []).append(i)
        return out

    def reference_of(self) -> dict[int, int]:
        """Reference sequence index per evaluation class."""
        refs: dict[int, int] = {}
        for i in self.indices("eval"):
            if self.references[i]:
                lbl = self.sequences[i].label
                if lbl in refs:
                    raise ProtocolError(f"class {lbl} has more than one reference")
                refs[lbl] = i
        missing = set(self.classes_in("eval")) - set(refs)
        if missing:
            raise ProtocolError(f"evaluation classes without a reference: {sorted(missing)}")
        return refs

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.sequences == other.sequences
            and self.splits == other.splits
            and self.references == other.references
            and self.meta == other.meta
        )


def assign_protocol_split(ds: Dataset, eval_classes, val_fraction: float = 0.1, seed: int = 0) -> Dataset:
    """Mark ``eval_classes`` as the evaluation split (first sample of each is the reference);
    hold out ``val_fraction`` of every remaining class for validation."""
    eval_set = set(int(c) for c in eval_classes)
    rng = np.random.default_rng(seed)
    splits = ["aux"] * len(ds)
    refs = [False] * len(ds)
    per_class: dict[int, list[int]] = {}
    for i, s in enumerate(ds.sequences):
        per_class.setdefault(s.label, []).append(i)
    for label, idx in sorted(per_class.items()):
        if label in eval_set:
            for i in idx:
                splits[i] = "eval"
            refs[idx[0]] = True
        else:
            n_val = int(round(val_fraction * len(idx)))
            if n_val and len(idx) - n_val < 1:
                n_val = len(idx) - 1
            for i in rng.permutation(idx)[:n_val]:
                splits[int(i)] = "val"
    return Dataset(list(ds.sequences), splits, refs, dict(ds.meta))


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------

def dumps_dataset(ds: Dataset) -> bytes:
    meta = json.dumps(ds.meta, sort_keys=True).encode()
    u = ds.sequences[0].data.shape[2] if ds.sequences else NUM_JOINTS
    m = ds.sequences[0].data.shape[3] if ds.sequences else MAX_PERFORMERS
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(meta)), meta, struct.pack("<IHH", len(ds), u, m)]
    for seq, split, ref in zip(ds.sequences, ds.splits, ds.references):
        if seq.data.shape[2:] != (u, m):
            raise ContractError("all sequences in a container must share joint/performer extents")
        bits = sum(1 << k for k, flag in enumerate(seq.performer_mask) if flag)
        parts.append(struct.pack("<iIBBB", seq.label, seq.num_frames, bits, _SPLIT_CODE[split], int(ref)))
        parts.append(np.ascontiguousarray(seq.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads_dataset(blob: bytes) -> Dataset:
    if len(blob) < 4 + 6 + 4 or blob[:4] != MAGIC:
        raise DatasetFormatError("not an ALCA dataset container")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise DatasetFormatError("checksum mismatch: container is corrupted")
    version, meta_len = struct.unpack_from("<HI", body, 4)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported container version {version} (expected {FORMAT_VERSION})")
    off = 10
    meta = json.loads(body[off:off + meta_len].decode())
    off += meta_len
    n, u, m = struct.unpack_from("<IHH", body, off)
    off += 8
    seqs, splits, refs = [], [], []
    for _ in range(n):
        label, t, bits, split, ref = struct.unpack_from("<iIBBB", body, off)
        off += 11
        count = NUM_COORDS * t * u * m
        data = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(NUM_COORDS, t, u, m)
        off += 4 * count
        mask = np.array([(bits >> k) & 1 for k in range(m)], dtype=bool)
        seqs.append(SkeletonSequence(data.astype(np.float32), label, mask))
        splits.append(SPLITS[split])
        refs.append(bool(ref))
    if off != len(body):
        raise DatasetFormatError("trailing bytes after last sequence")
    return Dataset(seqs, splits, refs, meta)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(dumps_dataset(ds))


def load_dataset(path: str | Path) -> Dataset:
    return loads_dataset(Path(path).read_bytes())
