"""Procedural 25-joint skeleton actions for desk-scale experiments.

Each class is a local motion motif: one effector (body region) follows one
trajectory during one third of the sequence while the rest of the body idles.
Within-class variation grows with ``difficulty``: joint jitter, speed warping,
sequence length, amplitude and body-size changes, idle sway of other limbs and
a random translation. On this scale 0 is noise-free, 0.5 is the moderate
setting used for desk experiments and 1 is hard. Every sample also receives a
random rotation about the vertical axis, which frontal alignment removes.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .skeleton import MAX_PERFORMERS, SkeletonSequence, vertical_rotation
from .tensor import ContractError

MODERATE_DIFFICULTY = 0.5

# rest pose, metres, person facing the camera (-z), left side at +x; 0-based NTU order
REST_POSE = np.array([
    [0.00, 0.90, 0.00],   # 0 spine base
    [0.00, 1.15, 0.00],   # 1 mid spine
    [0.00, 1.45, 0.00],   # 2 neck
    [0.00, 1.62, 0.00],   # 3 head
    [0.18, 1.40, 0.00],   # 4 left shoulder
    [0.21, 1.12, 0.00],   # 5 left elbow
    [0.23, 0.88, 0.00],   # 6 left wrist
    [0.23, 0.80, 0.00],   # 7 left hand
    [-0.18, 1.40, 0.00],  # 8 right shoulder
    [-0.21, 1.12, 0.00],  # 9 right elbow
    [-0.23, 0.88, 0.00],  # 10 right wrist
    [-0.23, 0.80, 0.00],  # 11 right hand
    [0.10, 0.88, 0.00],   # 12 left hip
    [0.10, 0.48, 0.00],   # 13 left knee
    [0.10, 0.08, 0.00],   # 14 left ankle
    [0.10, 0.02, -0.10],  # 15 left foot
    [-0.10, 0.88, 0.00],  # 16 right hip
    [-0.10, 0.48, 0.00],  # 17 right knee
    [-0.10, 0.08, 0.00],  # 18 right ankle
    [-0.10, 0.02, -0.10], # 19 right foot
    [0.00, 1.40, 0.00],   # 20 spine shoulder
    [0.23, 0.72, 0.00],   # 21 left hand tip
    [0.26, 0.80, -0.03],  # 22 left thumb
    [-0.23, 0.72, 0.00],  # 23 right hand tip
    [-0.26, 0.80, -0.03], # 24 right thumb
])

# effector -> (joint weights along the chain, lateral sign)
EFFECTORS: dict[str, tuple[dict[int, float], float]] = {
    "left_arm": ({5: 0.5, 6: 0.9, 7: 1.0, 21: 1.0, 22: 1.0}, 1.0),
    "right_arm": ({9: 0.5, 10: 0.9, 11: 1.0, 23: 1.0, 24: 1.0}, -1.0),
    "both_arms": ({5: 0.5, 6: 0.9, 7: 1.0, 21: 1.0, 22: 1.0, 9: 0.5, 10: 0.9, 11: 1.0, 23: 1.0, 24: 1.0}, 0.0),
    "head": ({2: 0.4, 3: 1.0}, 1.0),
    "left_leg": ({13: 0.5, 14: 0.9, 15: 1.0}, 1.0),
    "right_leg": ({17: 0.5, 18: 0.9, 19: 1.0}, -1.0),
    "upper_body": ({1: 0.3, 20: 0.6, 2: 0.7, 3: 0.8, 4: 0.6, 5: 0.6, 6: 0.6, 7: 0.6, 21: 0.6, 22: 0.6,
                    8: 0.6, 9: 0.6, 10: 0.6, 11: 0.6, 23: 0.6, 24: 0.6}, 0.0),
}
EFFECTOR_AMPLITUDE = {"head": 0.12, "upper_body": 0.22, "left_leg": 0.3, "right_leg": 0.3}
TRAJECTORIES = ("raise", "forward", "lateral", "circle", "shake")
PHASES = ("start", "middle", "end")

_LEFT_SIDE = [j for j in range(25) if REST_POSE[j, 0] > 0.05]


@dataclass(frozen=True)
class Motif:
    effector: str
    phase: int
    trajectory: str

    def describe(self) -> str:
        return f"{self.effector}/{PHASES[self.phase]}/{self.trajectory}"


def motif_table(seed: int) -> list[Motif]:
    """All motifs in a seed-dependent order; class ``c`` uses entry ``c``."""
    combos = [Motif(e, p, tr) for e, p, tr in itertools.product(EFFECTORS, range(3), TRAJECTORIES)]
    order = np.random.default_rng([seed, 7919]).permutation(len(combos))
    return [combos[i] for i in order]


def _trajectory(name: str, s: np.ndarray, lateral: float) -> np.ndarray:
    """Displacement direction profile (len(s), 3) for phase ``s`` in [0, 1] (zero outside)."""
    inside = (s >= 0) & (s <= 1)
    s = np.clip(s, 0, 1)
    bump = np.sin(np.pi * s)
    d = np.zeros((len(s), 3))
    if name == "raise":
        d[:, 1] = bump
    elif name == "forward":
        d[:, 2] = -bump
    elif name == "lateral":
        d[:, 0] = (lateral if lateral else 1.0) * bump
        d[:, 1] = 0.3 * bump
    elif name == "circle":
        d[:, 0] = 0.5 * np.sin(2 * np.pi * s) * (lateral if lateral else 1.0)
        d[:, 1] = 0.5 * (1 - np.cos(2 * np.pi * s))
    elif name == "shake":
        d[:, 0] = 0.45 * np.sin(6 * np.pi * s) * bump
        d[:, 2] = -0.3 * bump
    else:
        raise ContractError(f"unknown trajectory {name!r}")
    return d * inside[:, None]


def render_motif(motif: Motif, n_frames: int, rng: np.random.Generator | None, difficulty: float) -> np.ndarray:
    """Joint positions (T, 25, 3) before rotation/translation."""
    d = difficulty
    pose = REST_POSE.copy()
    if rng is not None and d > 0:
        pose *= 1.0 + 0.08 * d * rng.uniform(-1, 1)
    frames = np.repeat(pose[None], n_frames, axis=0)
    tau = np.arange(n_frames) / max(n_frames - 1, 1)
    start, width, amp = motif.phase / 3.0, 1.0 / 3.0, 1.0
    if rng is not None and d > 0:
        gamma = 1.0 + 0.2 * d * rng.uniform(-1, 1)
        tau = tau ** gamma
        start = max(start + 0.04 * d * rng.uniform(-1, 1), 0.0)
        width *= 1.0 + 0.2 * d * rng.uniform(-1, 1)
        amp *= 1.0 + 0.25 * d * rng.uniform(-1, 1)
    s = (tau - start) / width
    weights, lateral = EFFECTORS[motif.effector]
    scale = EFFECTOR_AMPLITUDE.get(motif.effector, 0.35) * amp
    disp = _trajectory(motif.trajectory, s, lateral) * scale
    if motif.effector == "both_arms" and motif.trajectory in ("lateral", "circle"):
        # mirror the x component for the right arm
        for j, w in weights.items():
            sign = 1.0 if j in _LEFT_SIDE else -1.0
            frames[:, j] += w * disp * np.array([sign, 1.0, 1.0])
    else:
        for j, w in weights.items():
            frames[:, j] += w * disp
    if rng is not None and d > 0:
        _idle_sway(frames, motif, rng, d)
        frames += rng.normal(0.0, 0.01 * d, frames.shape)
    return frames


def _idle_sway(frames: np.ndarray, motif: Motif, rng: np.random.Generator, d: float) -> None:
    """Slow low-amplitude drift of limbs that are not part of the motif."""
    t = np.linspace(0, 1, frames.shape[0])
    for name in ("left_arm", "right_arm", "head", "left_leg", "right_leg"):
        if name == motif.effector or (motif.effector == "both_arms" and "arm" in name):
            continue
        if rng.random() > 0.5:
            continue
        weights, _ = EFFECTORS[name]
        freq = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0, 2 * np.pi)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        wave = 0.05 * d * np.sin(2 * np.pi * freq * t + phase)
        for j, w in weights.items():
            frames[:, j] += w * wave[:, None] * direction


def generate_sample(motif: Motif, rng: np.random.Generator, difficulty: float, base_frames: int = 75) -> np.ndarray:
    d = difficulty
    n_frames = base_frames
    if d > 0:
        n_frames = int(rng.integers(base_frames - int(10 * d), base_frames + int(30 * d) + 1))
    joints = render_motif(motif, n_frames, rng if d > 0 else None, d)
    angle = rng.uniform(-np.pi, np.pi)
    joints = joints @ vertical_rotation(angle).T
    if d > 0:
        joints += np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.05, 0.05), rng.uniform(2.0, 3.5)]) * min(d, 1.0)
    data = np.zeros((3, n_frames, 25, MAX_PERFORMERS))
    data[:, :, :, 0] = joints.transpose(2, 0, 1)
    return data


def generate_synthetic_dataset(n_classes: int, n_per_class: int, seed: int = 0,
                               difficulty: float = MODERATE_DIFFICULTY,
                               base_frames: int = 75) -> Dataset:
    """Raw (unaligned, variable length) single-performer dataset with labels ``0..n_classes-1``."""
    if n_classes < 2 or n_per_class < 2:
        raise ContractError("need at least 2 classes and 2 samples per class")
    if difficulty < 0:
        raise ContractError("difficulty must be non-negative")
    table = motif_table(seed)
    if n_classes > len(table):
        raise ContractError(f"at most {len(table)} distinct motifs available")
    seqs = []
    for c in range(n_classes):
        for k in range(n_per_class):
            rng = np.random.default_rng([seed, c, k])
            data = generate_sample(table[c], rng, difficulty, base_frames)
            seqs.append(SkeletonSequence(data, c, np.array([True, False])))
    meta = {
        "generator": "synthetic",
        "seed": seed,
        "difficulty": difficulty,
        "n_classes": n_classes,
        "n_per_class": n_per_class,
        "motifs": [table[c].describe() for c in range(n_classes)],
    }
    return Dataset(seqs, meta=meta)
