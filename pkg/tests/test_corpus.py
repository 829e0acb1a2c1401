"""Synthetic corpus generation, splits, and segment ground truth."""

import json

import numpy as np
import pytest

from motionalign.corpus import (ARCHETYPES, SegmentInfo, alignment_ground_truth,
                                compose_sequence, generate_corpus,
                                load_dataset, save_dataset)


def test_archetype_pool():
    assert len(ARCHETYPES) == 8
    assert "stand_still" in ARCHETYPES and "walk_forward" in ARCHETYPES


def test_stand_still_is_static():
    sample = compose_sequence(["stand_still"], seed=0)
    frames = sample.motion.frames
    assert np.ptp(frames, axis=0).max() < 0.3  # near-constant pose
    assert sample.text in ("stand still", "stands still", "standing still")


def test_walk_then_stand_root_translation():
    sample = compose_sequence(["walk_forward", "stand_still"], seed=1)
    root_x = sample.motion.frames[:, 0, 0]
    walk_end = sample.segments[0].frame_end
    # strictly increasing while walking (pre-fade region)
    walking = root_x[:walk_end - 4]
    assert (np.diff(walking) > 0).all()
    standing = root_x[walk_end + 4:]
    assert np.ptp(standing) < 0.15


def test_same_seed_bit_identical():
    a = compose_sequence(["jump_up", "wave_left_arm"], seed=9)
    b = compose_sequence(["jump_up", "wave_left_arm"], seed=9)
    np.testing.assert_array_equal(a.motion.frames, b.motion.frames)
    assert a.text == b.text


def test_segments_tile_motion_and_text():
    sample = compose_sequence(["walk_forward", "kick_right_leg",
                               "turn_around"], seed=4)
    frame_cursor = token_cursor = 0
    for seg in sample.segments:
        assert seg.frame_start == frame_cursor
        assert seg.token_start == token_cursor
        frame_cursor, token_cursor = seg.frame_end, seg.token_end
    assert frame_cursor == sample.motion.frames.shape[0]
    assert token_cursor == len(sample.tokens)


def test_compose_rejects_bad_counts():
    with pytest.raises(ValueError):
        compose_sequence([], seed=0)
    with pytest.raises(ValueError):
        compose_sequence(["walk_forward"] * 4, seed=0)


# -- corpus / splits --------------------------------------------------------------

def test_split_sizes_64():
    ds = generate_corpus(64, seed=0)
    assert len(ds.splits["train"]) == 52
    assert len(ds.splits["val"]) == 6
    assert len(ds.splits["test"]) == 6


def test_no_duplicate_samples_across_splits():
    ds = generate_corpus(32, seed=3)
    seen = set()
    for split in ds.splits.values():
        for s in split:
            key = (s.text, s.motion.frames.tobytes())
            assert key not in seen
            seen.add(key)


def test_vocabulary_closed_world():
    ds = generate_corpus(48, seed=1)
    vocab = ds.vocabulary()
    for split in ds.splits.values():
        for s in split:
            for tok in s.tokens:
                assert tok in vocab


def test_holdout_combos_seen_in_training():
    ds = generate_corpus(64, seed=5)
    train_combos = {tuple(seg.archetype for seg in s.segments)
                    for s in ds.splits["train"]}
    for name in ("val", "test"):
        for s in ds.splits[name]:
            assert tuple(seg.archetype for seg in s.segments) in train_combos


def test_generate_corpus_minimum_size():
    with pytest.raises(ValueError):
        generate_corpus(4, seed=0)


def test_dataset_json_round_trip(tmp_path):
    ds = generate_corpus(12, seed=2)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_dataset(p1, ds)
    save_dataset(p2, load_dataset(p1))
    assert p1.read_bytes() == p2.read_bytes()
    json.loads(p1.read_text())  # valid JSON


# -- alignment ground truth -----------------------------------------------------

def _fake_sample(frame_splits, token_splits):
    sample = compose_sequence(["walk_forward", "run_forward", "jump_up"],
                              seed=0)
    segments = [SegmentInfo(archetype="walk_forward",
                            frame_start=f0, frame_end=f1,
                            token_start=t0, token_end=t1)
                for (f0, f1), (t0, t1) in zip(frame_splits, token_splits)]
    sample.segments[:] = segments
    return sample


def test_single_segment_all_phrase_zero():
    sample = compose_sequence(["run_forward"], seed=0)
    labels = alignment_ground_truth(sample, [[0], [1, 2]], n_p=16, stride=8)
    assert labels == [0, 0]


def test_members_inside_one_segment():
    length = 61  # three-archetype composition at seed 0
    sample = _fake_sample([(0, length // 2), (length // 2, length)],
                          [(0, 2), (2, 4)])
    # window 0 midpoint = 8 (first half); last window midpoint in second half
    last = (length - 16) // 8
    labels = alignment_ground_truth(sample, [[0], [last]], n_p=16, stride=8)
    assert labels[0] == 0
    assert labels[1] == 1


def test_tie_goes_to_earlier_phrase():
    length = 61
    half = length // 2
    sample = _fake_sample([(0, half), (half, length)], [(0, 2), (2, 4)])
    # one member in each half: tie, earlier phrase wins
    early, late = 0, (length - 16) // 8
    labels = alignment_ground_truth(sample, [[early, late]], n_p=16, stride=8)
    assert labels == [0]
