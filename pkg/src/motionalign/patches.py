"""Skeleton-to-patch preprocessing.

Converts an L x J x 3 joint trajectory into per-part spatiotemporal
patches: each kinematic chain is resampled to N_p points by arc-length
interpolation, coordinates are z-scored with dataset statistics, and a
sliding window of N_p frames stacks the samples into one
3 x N_p x N_p block (xyz channels) per body part per window.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

PART_NAMES = ("torso", "left_arm", "right_arm", "left_leg", "right_leg")


@dataclass
class MotionSequence:
    frames: np.ndarray                  # (L, J, 3)
    fps: float
    parts: dict[str, list[int]]         # part name -> ordered joint chain
    joint_names: Optional[list[str]] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ValueError("frames must have shape (L, J, 3)")
        length, n_joints, _ = self.frames.shape
        if length < 1 or n_joints < 2:
            raise ValueError("need L >= 1 frames and J >= 2 joints")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if set(self.parts) != set(PART_NAMES):
            raise ValueError(f"parts must be exactly {PART_NAMES}")
        seen: list[int] = []
        for name in PART_NAMES:
            chain = self.parts[name]
            seen.extend(chain)
        if sorted(seen) != list(range(n_joints)):
            raise ValueError("part chains must partition the joint indices")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class NormStats:
    mean: np.ndarray        # (3,) per coordinate
    std: np.ndarray         # (3,)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                   std=np.asarray(d["std"], dtype=np.float64))

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(mean=np.zeros(3), std=np.ones(3))


@dataclass
class PatchGrid:
    patches: np.ndarray            # (P, 5, 3, N_p, N_p)
    window_starts: list[int]
    norm_stats: NormStats = field(default_factory=NormStats.identity)


def interpolate_chain(chain_positions: np.ndarray, n_p: int) -> np.ndarray:
    """Resample a joint chain to n_p points uniform in cumulative arc length.

    Endpoints are preserved exactly.  A fully degenerate (zero-length)
    chain collapses to n_p copies of its first joint.
    """
    pts = np.asarray(chain_positions, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("chain must have shape (J_c, 3)")
    if pts.shape[0] < 2:
        raise ValueError("chain needs at least 2 joints")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] <= 0.0:
        return np.tile(pts[0], (n_p, 1))
    targets = np.linspace(0.0, cum[-1], n_p)
    out = np.empty((n_p, 3))
    for c in range(3):
        out[:, c] = np.interp(targets, cum, pts[:, c])
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


def _interp_all(seq: MotionSequence, n_p: int) -> np.ndarray:
    """Per-frame per-part chain interpolation -> (L, 5, n_p, 3)."""
    length = seq.length
    out = np.empty((length, len(PART_NAMES), n_p, 3))
    for p, name in enumerate(PART_NAMES):
        chain = seq.parts[name]
        for f in range(length):
            out[f, p] = interpolate_chain(seq.frames[f, chain], n_p)
    return out


def fit_zscore(dataset: list[MotionSequence], n_p: int = 16) -> NormStats:
    """Per-coordinate mean/std over all interpolated sample points."""
    if not dataset:
        raise ValueError("cannot fit normalisation stats on an empty dataset")
    flat = [_interp_all(seq, n_p).reshape(-1, 3) for seq in dataset]
    allpts = np.concatenate(flat, axis=0)
    return NormStats(mean=allpts.mean(axis=0), std=allpts.std(axis=0))


def apply_zscore(points: np.ndarray, stats: NormStats) -> np.ndarray:
    """Subtract mean, divide by std guarded at 1e-6 per coordinate."""
    std = np.maximum(stats.std, 1e-6)
    return (np.asarray(points, dtype=np.float64) - stats.mean) / std


def window_count(length: int, n_p: int, stride: int) -> int:
    return (length - n_p) // stride + 1


def build_patches(seq: MotionSequence, n_p: int = 16, stride: int = 8,
                  stats: Optional[NormStats] = None) -> PatchGrid:
    """Sliding-window patch grid: (P, 5 parts, 3 channels, n_p, n_p)."""
    if seq.length < n_p:
        raise ValueError(
            f"sequence too short: {seq.length} frames < window size {n_p}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stats is None:
        stats = NormStats.identity()
    pts = apply_zscore(_interp_all(seq, n_p), stats)  # (L, 5, n_p, 3)
    n_windows = window_count(seq.length, n_p, stride)
    starts = [w * stride for w in range(n_windows)]
    patches = np.empty((n_windows, len(PART_NAMES), 3, n_p, n_p))
    for w, s in enumerate(starts):
        block = pts[s:s + n_p]                      # (n_p frames, 5, n_p, 3)
        patches[w] = block.transpose(1, 3, 0, 2)    # (5, 3, frame, point)
    return PatchGrid(patches=patches, window_starts=starts, norm_stats=stats)


# -- motion JSON format ------------------------------------------------------

def motion_to_dict(seq: MotionSequence) -> dict:
    n_joints = seq.frames.shape[1]
    names = seq.joint_names or [f"joint_{i}" for i in range(n_joints)]
    return {
        "fps": seq.fps,
        "joint_names": names,
        "parts": {k: list(v) for k, v in seq.parts.items()},
        "frames": seq.frames.tolist(),
    }


def motion_from_dict(d: dict) -> MotionSequence:
    required = {"fps", "joint_names", "parts", "frames"}
    if set(d) != required:
        raise ValueError(f"motion JSON keys must be exactly {sorted(required)}")
    seq = MotionSequence(frames=np.asarray(d["frames"], dtype=np.float64),
                         fps=d["fps"],
                         parts={k: list(map(int, v)) for k, v in d["parts"].items()},
                         joint_names=list(d["joint_names"]))
    if len(seq.joint_names) != seq.frames.shape[1]:
        raise ValueError("joint_names length must match joint count")
    return seq


def motion_to_json(seq: MotionSequence) -> str:
    return json.dumps(motion_to_dict(seq), sort_keys=True)


def motion_from_json(text: str) -> MotionSequence:
    return motion_from_dict(json.loads(text))
