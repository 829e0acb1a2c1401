"""Synthetic motion-language corpus with ground-truth segment alignment.

Eight parametric motion archetypes on a fixed 17-joint, five-part
skeleton.  Samples are 1-3 archetype segments concatenated with a short
cross-fade, paired with the concatenated phrases; each sample records
which frame range and which token range every segment owns, which is the
ground truth for fine-grained alignment scoring.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .clustering import round_half_away
from .patches import MotionSequence, motion_from_dict, motion_to_dict

FPS = 20.0
FADE_FRAMES = 4

# 17-joint skeleton: x forward, y up, z lateral
BASE_POSE = np.array([
    [0.0, 1.00, 0.0],    # 0 pelvis
    [0.0, 1.20, 0.0],    # 1 spine
    [0.0, 1.40, 0.0],    # 2 chest
    [0.0, 1.55, 0.0],    # 3 neck
    [0.0, 1.70, 0.0],    # 4 head
    [0.0, 1.45, 0.20],   # 5 left shoulder
    [0.0, 1.20, 0.25],   # 6 left elbow
    [0.0, 0.95, 0.30],   # 7 left wrist
    [0.0, 1.45, -0.20],  # 8 right shoulder
    [0.0, 1.20, -0.25],  # 9 right elbow
    [0.0, 0.95, -0.30],  # 10 right wrist
    [0.0, 0.95, 0.10],   # 11 left hip
    [0.0, 0.50, 0.10],   # 12 left knee
    [0.0, 0.05, 0.10],   # 13 left ankle
    [0.0, 0.95, -0.10],  # 14 right hip
    [0.0, 0.50, -0.10],  # 15 right knee
    [0.0, 0.05, -0.10],  # 16 right ankle
])

SKELETON_PARTS = {
    "torso": [0, 1, 2, 3, 4],
    "left_arm": [5, 6, 7],
    "right_arm": [8, 9, 10],
    "left_leg": [11, 12, 13],
    "right_leg": [14, 15, 16],
}

JOINT_NAMES = [
    "pelvis", "spine", "chest", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
]

LEFT_ARM = [5, 6, 7]
RIGHT_ARM = [8, 9, 10]
LEFT_LEG = [11, 12, 13]
RIGHT_LEG = [14, 15, 16]
UPPER = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10]


@dataclass
class Archetype:
    name: str
    dur_range: tuple[int, int]          # inclusive frame-count range
    phrases: list[str]                  # 1-3 word templates
    generator: Callable[[np.random.Generator, int], np.ndarray]


def _time(length: int) -> np.ndarray:
    return np.arange(length) / FPS


def _base(length: int) -> np.ndarray:
    return np.tile(BASE_POSE, (length, 1, 1))


def _gen_stand(rng, length):
    f = _base(length)
    amp = rng.uniform(0.005, 0.015)
    sway = amp * np.sin(2 * np.pi * 0.5 * _time(length))
    f[:, UPPER, 1] += sway[:, None]
    return f


def _gait(rng, length, speed_lo, speed_hi, freq_lo, freq_hi, amp_scale):
    f = _base(length)
    t = _time(length)
    v = rng.uniform(speed_lo, speed_hi)
    freq = rng.uniform(freq_lo, freq_hi)
    swing = amp_scale * np.sin(2 * np.pi * freq * t)
    f[:, :, 0] += (v * t)[:, None]
    f[:, LEFT_LEG[1:], 0] += swing[:, None]
    f[:, RIGHT_LEG[1:], 0] -= swing[:, None]
    f[:, LEFT_ARM[1:], 0] -= 0.6 * swing[:, None]
    f[:, RIGHT_ARM[1:], 0] += 0.6 * swing[:, None]
    f[:, :, 1] += (0.02 * amp_scale / 0.15 * np.abs(np.sin(2 * np.pi * freq * t)))[:, None]
    return f


def _gen_walk(rng, length):
    return _gait(rng, length, 0.9, 1.1, 1.4, 1.6, 0.15)


def _gen_run(rng, length):
    return _gait(rng, length, 2.8, 3.2, 2.4, 2.6, 0.30)


def _gen_wave(rng, length):
    f = _base(length)
    t = _time(length)
    freq = rng.uniform(1.8, 2.2)
    amp = rng.uniform(0.12, 0.18)
    osc = np.sin(2 * np.pi * freq * t)
    f[:, 7, 1] = 1.65 + amp * osc          # wrist raised overhead, swinging
    f[:, 7, 2] = 0.35 + amp * np.cos(2 * np.pi * freq * t)
    f[:, 6, 1] = 1.45 + 0.4 * amp * osc
    f[:, 6, 2] = 0.30
    return f


def _gen_kick(rng, length):
    f = _base(length)
    t = np.linspace(0, np.pi, length)
    amp = rng.uniform(0.50, 0.60)
    pulse = np.sin(t) ** 2
    f[:, 16, 0] += amp * pulse
    f[:, 16, 1] += 0.5 * amp * pulse
    f[:, 15, 0] += 0.5 * amp * pulse
    return f


def _gen_jump(rng, length):
    f = _base(length)
    h = rng.uniform(0.28, 0.36)
    arc = np.sin(np.linspace(0, np.pi, length))
    f[:, :, 1] += (h * arc)[:, None]
    f[:, [6, 7, 9, 10], 1] += (0.3 * arc)[:, None]   # arms raise with the jump
    return f


def _gen_crouch(rng, length):
    f = _base(length)
    d = rng.uniform(0.35, 0.42)
    ramp = np.minimum(np.arange(length) / max(1, length // 2), 1.0)
    f[:, UPPER, 1] -= (d * ramp)[:, None]
    f[:, [12, 15], 0] += (0.5 * d * ramp)[:, None]   # knees bend forward
    return f


def _gen_turn(rng, length):
    f = _base(length)
    angles = np.linspace(0, np.pi, length)
    cos, sin = np.cos(angles), np.sin(angles)
    x, z = f[:, :, 0].copy(), f[:, :, 2].copy()
    f[:, :, 0] = cos[:, None] * x - sin[:, None] * z
    f[:, :, 2] = sin[:, None] * x + cos[:, None] * z
    return f


ARCHETYPES: dict[str, Archetype] = {a.name: a for a in [
    Archetype("stand_still", (24, 32), ["stands still"], _gen_stand),
    Archetype("walk_forward", (24, 32), ["walks forward"], _gen_walk),
    Archetype("run_forward", (24, 32), ["runs forward"], _gen_run),
    Archetype("wave_left_arm", (24, 32), ["waves left arm"], _gen_wave),
    Archetype("kick_right_leg", (24, 32), ["kicks right leg"], _gen_kick),
    Archetype("jump_up", (24, 32), ["jumps up"], _gen_jump),
    Archetype("crouch_down", (24, 32), ["crouches down"], _gen_crouch),
    Archetype("turn_around", (24, 32), ["turns around"], _gen_turn),
]}


@dataclass
class SegmentInfo:
    archetype: str
    frame_start: int
    frame_end: int           # exclusive
    token_start: int
    token_end: int           # exclusive


@dataclass
class CorpusSample:
    motion: MotionSequence
    text: str
    segments: list[SegmentInfo]
    seed: int

    @property
    def tokens(self) -> list[str]:
        return self.text.split()


def compose_sequence(archetype_names: Sequence[str], seed: int) -> CorpusSample:
    """Concatenate archetype segments with a short cross-fade at boundaries."""
    if not 1 <= len(archetype_names) <= 3:
        raise ValueError("a sample is composed of 1 to 3 archetype segments")
    rng = np.random.default_rng(seed)
    segment_frames: list[np.ndarray] = []
    segments: list[SegmentInfo] = []
    tokens: list[str] = []
    frame_cursor = 0
    for name in archetype_names:
        arch = ARCHETYPES[name]
        length = int(rng.integers(arch.dur_range[0], arch.dur_range[1] + 1))
        frames = arch.generator(rng, length)
        phrase = arch.phrases[rng.integers(len(arch.phrases))]
        words = phrase.split()
        if segment_frames:
            prev_last = segment_frames[-1][-1]
            # continuity: shift so the root starts where the last segment ended
            offset = prev_last[0] - frames[0, 0]
            frames = frames + offset
            for k in range(min(FADE_FRAMES, length)):
                alpha = (k + 1) / (FADE_FRAMES + 1)
                frames[k] = (1 - alpha) * prev_last + alpha * frames[k]
        segments.append(SegmentInfo(
            archetype=name,
            frame_start=frame_cursor, frame_end=frame_cursor + length,
            token_start=len(tokens), token_end=len(tokens) + len(words)))
        segment_frames.append(frames)
        tokens.extend(words)
        frame_cursor += length
    motion = MotionSequence(frames=np.concatenate(segment_frames, axis=0),
                            fps=FPS, parts=dict(SKELETON_PARTS),
                            joint_names=list(JOINT_NAMES))
    return CorpusSample(motion=motion, text=" ".join(tokens),
                        segments=segments, seed=seed)


@dataclass
class Dataset:
    seed: int
    splits: dict[str, list[CorpusSample]] = field(default_factory=dict)

    def vocabulary(self) -> dict[str, int]:
        words = sorted({w for split in self.splits.values()
                        for s in split for w in s.tokens})
        return {w: i for i, w in enumerate(words)}


def _sample_seed(seed: int, index: int) -> int:
    return (seed * 1_000_000_007 + index) % (2 ** 62)


def generate_corpus(n_pairs: int,
                    archetype_pool: Optional[Sequence[str]] = None,
                    seed: int = 0,
                    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                    ) -> Dataset:
    """Closed-world corpus: every val/test archetype combination also
    appears in training (with different seed-driven jitter)."""
    if n_pairs < 8:
        raise ValueError("need at least 8 pairs")
    if len(split_ratios) != 3 or any(r < 0 for r in split_ratios) \
            or abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must be three non-negatives summing to 1")
    pool = list(archetype_pool or ARCHETYPES)
    for name in pool:
        if name not in ARCHETYPES:
            raise ValueError(f"unknown archetype '{name}'")
    n_val = round_half_away(split_ratios[1] * n_pairs)
    n_test = round_half_away(split_ratios[2] * n_pairs)
    n_train = n_pairs - n_val - n_test
    if n_train < 1:
        raise ValueError("split leaves no training samples")

    rng = np.random.default_rng([seed, 17])
    train_combos = []
    for _ in range(n_train):
        k = int(rng.integers(1, 4))
        train_combos.append(tuple(rng.choice(pool, size=k).tolist()))
    unique_train = sorted(set(train_combos))

    # prefer distinct combinations across val and test so every retrieval
    # target in a mixed gallery is unambiguous
    n_holdout = n_val + n_test
    if n_holdout <= len(unique_train):
        idx = rng.choice(len(unique_train), size=n_holdout, replace=False)
    else:
        idx = rng.choice(len(unique_train), size=n_holdout, replace=True)
    holdout = [unique_train[i] for i in idx]

    plan = {"train": train_combos,
            "val": holdout[:n_val],
            "test": holdout[n_val:]}
    ds = Dataset(seed=seed)
    index = 0
    for split in ("train", "val", "test"):
        samples = []
        for combo in plan[split]:
            samples.append(compose_sequence(combo, _sample_seed(seed, index)))
            index += 1
        ds.splits[split] = samples
    return ds


def alignment_ground_truth(sample: CorpusSample,
                           motion_provenance: Sequence[Sequence[int]],
                           n_p: int, stride: int) -> list[int]:
    """Ground-truth phrase index per compressed motion segment token.

    Each segment token's member temporal windows vote with their window
    midpoint frames; the phrase owning the majority wins, ties going to
    the earlier phrase.
    """
    boundaries = [(s.frame_start, s.frame_end) for s in sample.segments]

    def owner(frame: float) -> int:
        for p, (lo, hi) in enumerate(boundaries):
            if lo <= frame < hi:
                return p
        return len(boundaries) - 1

    labels = []
    for members in motion_provenance:
        votes = np.zeros(len(boundaries), dtype=np.int64)
        for w in members:
            votes[owner(w * stride + n_p // 2)] += 1
        labels.append(int(np.argmax(votes)))  # argmax tie -> earlier phrase
    return labels


# -- dataset JSON ------------------------------------------------------------

def _sample_to_dict(s: CorpusSample) -> dict:
    return {
        "seed": s.seed,
        "text": s.text,
        "segments": [{"archetype": g.archetype,
                      "frame_start": g.frame_start, "frame_end": g.frame_end,
                      "token_start": g.token_start, "token_end": g.token_end}
                     for g in s.segments],
        "motion": motion_to_dict(s.motion),
    }


def _sample_from_dict(d: dict) -> CorpusSample:
    return CorpusSample(
        motion=motion_from_dict(d["motion"]),
        text=d["text"],
        segments=[SegmentInfo(**g) for g in d["segments"]],
        seed=d["seed"])


def save_dataset(path: str, ds: Dataset) -> None:
    payload = {"seed": ds.seed,
               "splits": {k: [_sample_to_dict(s) for s in v]
                          for k, v in ds.splits.items()}}
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True)
        f.write("\n")


def load_dataset(path: str) -> Dataset:
    with open(path) as f:
        payload = json.load(f)
    return Dataset(seed=payload["seed"],
                   splits={k: [_sample_from_dict(d) for d in v]
                           for k, v in payload["splits"].items()})
