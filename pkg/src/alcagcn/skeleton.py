"""Skeleton sequences: NTU ``.skeleton`` parsing/writing and preprocessing.

NTU ``.skeleton`` text layout::

    <frame count>
    per frame:
        <body count>
        per body:
            <tracking id> <9 more info fields>
            <joint count, 25>
            25 lines: <x> <y> <z> [further fields ignored]

Joint indices used by :func:`frontal_align` follow the NTU layout
(0-based here): 0 spine base / central hip, 1 mid spine, 12 left hip,
16 right hip.
"""
from __future__ import annotations

import io
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .tensor import ContractError

log = logging.getLogger(__name__)

NUM_COORDS = 3
NUM_JOINTS = 25
MAX_PERFORMERS = 2
TARGET_FRAMES = 75

CENTRAL_HIP = 0
SPINE = 1
LEFT_HIP = 12
RIGHT_HIP = 16

LABEL_PATTERN = re.compile(r"A(\d{3})")


class SkeletonParseError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)


class DegenerateFacingWarning(UserWarning):
    pass


class ExtraBodiesWarning(UserWarning):
    pass


@dataclass
class SkeletonSequence:
    """Joint coordinates shaped (C=3, T, U, M) plus label and performer mask."""

    data: np.ndarray
    label: int = -1
    performer_mask: np.ndarray = field(default_factory=lambda: np.array([True, False]))

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.performer_mask = np.asarray(self.performer_mask, dtype=bool)
        if self.data.ndim != 4 or self.data.shape[0] != NUM_COORDS:
            raise ContractError(f"sequence data must be (3, T, U, M), got {self.data.shape}")
        if self.data.shape[3] != len(self.performer_mask):
            raise ContractError("performer mask length must equal M")
        if not np.isfinite(self.data).all():
            raise ContractError("sequence contains non-finite coordinates")

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]

    def copy(self, **changes) -> "SkeletonSequence":
        kw = dict(data=self.data.copy(), label=self.label, performer_mask=self.performer_mask.copy())
        kw.update(changes)
        return SkeletonSequence(**kw)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SkeletonSequence):
            return NotImplemented
        return (
            self.label == other.label
            and np.array_equal(self.performer_mask, other.performer_mask)
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


# ---------------------------------------------------------------------------
# NTU text format
# ---------------------------------------------------------------------------

class _Lines:
    def __init__(self, stream: IO[str]):
        self._it = enumerate(stream, start=1)
        self.lineno = 0

    def next_tokens(self, what: str) -> list[str]:
        for self.lineno, line in self._it:
            toks = line.split()
            if toks:
                return toks
        raise SkeletonParseError(f"unexpected end of file while reading {what}", self.lineno + 1)

    def next_int(self, what: str) -> int:
        toks = self.next_tokens(what)
        try:
            return int(toks[0])
        except ValueError:
            raise SkeletonParseError(f"expected integer {what}, got {toks[0]!r}", self.lineno) from None


def parse_ntu_skeleton(stream: IO[str] | str, label: int = -1, num_joints: int = NUM_JOINTS) -> SkeletonSequence:
    """Parse an NTU ``.skeleton`` text stream into a (3, T, 25, 2) sequence.

    When more than two tracking ids occur, the two present in the most frames
    are kept (ties go to the earlier first appearance) and a warning is issued.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    lines = _Lines(stream)
    n_frames = lines.next_int("frame count")
    if n_frames < 1:
        raise SkeletonParseError("frame count must be positive", lines.lineno)
    frames: list[list[tuple[str, np.ndarray]]] = []
    crowded = False
    for t in range(n_frames):
        n_bodies = lines.next_int(f"body count of frame {t}")
        if n_bodies < 0:
            raise SkeletonParseError(f"negative body count in frame {t}", lines.lineno)
        crowded |= n_bodies > MAX_PERFORMERS
        bodies = []
        for b in range(n_bodies):
            info = lines.next_tokens(f"body info (frame {t}, body {b})")
            body_id = info[0]
            n_joints = lines.next_int(f"joint count (frame {t}, body {b})")
            if n_joints != num_joints:
                raise SkeletonParseError(
                    f"frame {t}, body {b}: expected {num_joints} joints, got {n_joints}", lines.lineno
                )
            joints = np.empty((num_joints, 3))
            for j in range(num_joints):
                toks = lines.next_tokens(f"joint {j} (frame {t}, body {b})")
                if len(toks) < 3:
                    raise SkeletonParseError(
                        f"frame {t}, body {b}, joint {j}: expected at least 3 fields, got {len(toks)}",
                        lines.lineno,
                    )
                try:
                    joints[j] = [float(x) for x in toks[:3]]
                except ValueError:
                    raise SkeletonParseError(
                        f"frame {t}, body {b}, joint {j}: non-numeric coordinate in {toks[:3]}", lines.lineno
                    ) from None
            bodies.append((body_id, joints))
        frames.append(bodies)

    presence: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    order = 0
    for bodies in frames:
        for body_id, _ in bodies:
            presence[body_id] = presence.get(body_id, 0) + 1
            if body_id not in first_seen:
                first_seen[body_id] = order
                order += 1
    if crowded or len(presence) > MAX_PERFORMERS:
        warnings.warn(
            f"{len(presence)} bodies found; keeping the {MAX_PERFORMERS} with the longest presence",
            ExtraBodiesWarning,
            stacklevel=2,
        )
    chosen = sorted(presence, key=lambda k: (-presence[k], first_seen[k]))[:MAX_PERFORMERS]
    chosen.sort(key=lambda k: first_seen[k])
    slot = {body_id: m for m, body_id in enumerate(chosen)}

    data = np.zeros((3, n_frames, num_joints, MAX_PERFORMERS))
    for t, bodies in enumerate(frames):
        filled = set()
        for body_id, joints in bodies:
            m = slot.get(body_id)
            if m is None or m in filled:
                continue
            data[:, t, :, m] = joints.T
            filled.add(m)
    mask = np.array([m < len(chosen) for m in range(MAX_PERFORMERS)])
    return SkeletonSequence(data, label, mask)


def read_skeleton_file(path: str | Path, label_pattern: re.Pattern = LABEL_PATTERN) -> SkeletonSequence:
    """Parse a file; the label is the action code matched in the file name (``A050`` -> 50)."""
    path = Path(path)
    label = label_from_filename(path.name, label_pattern)
    with open(path) as fh:
        return parse_ntu_skeleton(fh, label)


def label_from_filename(name: str, pattern: re.Pattern = LABEL_PATTERN) -> int:
    match = pattern.search(name)
    if not match:
        raise SkeletonParseError(f"no action code in file name {name!r}")
    return int(match.group(1))


def write_ntu_skeleton(seq: SkeletonSequence, stream: IO[str]) -> None:
    """Serialise a sequence in the NTU text layout (unused fields written as zeros)."""
    present = [m for m in range(seq.data.shape[3]) if seq.performer_mask[m]]
    u = seq.data.shape[2]
    stream.write(f"{seq.num_frames}\n")
    for t in range(seq.num_frames):
        stream.write(f"{len(present)}\n")
        for m in present:
            stream.write(f"{72057594037927936 + m} 0 0 0 0 0 0 0 0 2\n{u}\n")
            for j in range(u):
                x, y, z = (float(v) for v in seq.data[:, t, j, m])
                stream.write(f"{x:.9g} {y:.9g} {z:.9g} 0 0 0 0 0 0 0 0 2\n")


def format_ntu_skeleton(seq: SkeletonSequence) -> str:
    buf = io.StringIO()
    write_ntu_skeleton(seq, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def sample_indices(num_frames: int, target: int = TARGET_FRAMES) -> np.ndarray:
    """Uniform frame indices ``floor(i * T / target)`` for down-sampling."""
    return (np.arange(target) * num_frames) // target


def normalize_length(seq: SkeletonSequence, target: int = TARGET_FRAMES) -> SkeletonSequence:
    """Uniformly sample (T > target) or zero-pad at the end (T < target) to ``target`` frames."""
    t = seq.num_frames
    if t < 1:
        raise ContractError("cannot normalise an empty sequence")
    if t == target:
        return seq.copy()
    if t > target:
        data = seq.data[:, sample_indices(t, target)]
    else:
        data = np.zeros(seq.data.shape[:1] + (target,) + seq.data.shape[2:], dtype=seq.data.dtype)
        data[:, :t] = seq.data
    return seq.copy(data=data)


def facing_direction(joints: np.ndarray) -> np.ndarray:
    """Facing of one skeleton frame, ``joints`` shaped (3, U)."""
    across = joints[:, RIGHT_HIP] - joints[:, LEFT_HIP]
    up = joints[:, SPINE] - joints[:, CENTRAL_HIP]
    return np.cross(across, up)


def vertical_rotation(angle: float) -> np.ndarray:
    """Rotation matrix about the camera y axis (x' = c x - s z, z' = s x + c z)."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def frontal_align(seq: SkeletonSequence, center: bool = True, eps: float = 1e-8) -> SkeletonSequence:
    """Rotate about the vertical axis so performer 1's frame-0 facing points at the camera (-z).

    With ``center`` the result is also translated so performer 1's frame-0
    central hip sits at the origin. Frames where a performer is entirely zero
    (absent or padded) are left untouched.
    """
    x = seq.data.astype(np.float64)
    first = x[:, 0, :, 0]
    f = facing_direction(first)
    horiz = np.array([f[0], f[2]])
    norm = np.hypot(*horiz)
    if norm < eps or not np.isfinite(norm):
        warnings.warn("degenerate facing direction; using identity rotation", DegenerateFacingWarning, stacklevel=2)
        rot = np.eye(3)
    else:
        # angle taking the horizontal facing (fx, fz) onto (0, -1)
        angle = np.arctan2(-1.0, 0.0) - np.arctan2(horiz[1], horiz[0])
        rot = vertical_rotation(angle)
    origin = first[:, CENTRAL_HIP] if center else np.zeros(3)
    present = np.abs(x).sum(axis=(0, 2)) > 0  # (T, M)
    out = np.einsum("ij,jtum->itum", rot, x - origin[:, None, None, None])
    out *= present[None, :, None, :]
    return seq.copy(data=out.astype(np.float32))


def preprocess(seq: SkeletonSequence, target: int = TARGET_FRAMES, center: bool = True) -> SkeletonSequence:
    """Frontal alignment followed by length normalisation."""
    return normalize_length(frontal_align(seq, center=center), target)


def stack_sequences(seqs: Iterable[SkeletonSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays ``(B, 3, T, U, M)`` and performer masks ``(B, M)``."""
    seqs = list(seqs)
    return np.stack([s.data for s in seqs]), np.stack([s.performer_mask for s in seqs])
