import json
from dataclasses import replace

import numpy as np
import pytest

from builders import synthetic_dataset
from config import NoiseConfig
from picking.common import (
    DataFormatError,
    EmptyDatasetError,
    FormatVersionError,
    PerturbationRejected,
    SegmentMismatchError,
)
from picking.datagen import (
    ExecutedPick,
    apply_delta,
    build_dataset,
    label_pair,
    load_dataset,
    perturb,
    save_dataset,
    split_by_pick,
    split_counts,
)
from picking.pick import PickAction, make_action


class StubPsp:
    """Scores poses from a lookup keyed on x; features carry the pose in the first slots"""

    def __init__(self, scores):
        self.scores = scores

    def features(self, frame, action, adjacency=None):
        values = np.zeros(78)
        values[:3] = action.pose
        return values

    def prob(self, phi):
        return self.scores[round(float(phi[0]), 6)]


def bare_action(x, y, r):
    return PickAction(x=x, y=y, r=r, cups=(), z=0.0, normal=(0.0, 0.0, 1.0), target_segment=1)


@pytest.fixture
def executed(flat_box_frame, center_action):
    return [ExecutedPick(scene_seed=100 + i, pick_index=i, frame=flat_box_frame, action=center_action)
            for i in range(6)]


# ——— perturb ———

def test_tiny_noise_leaves_action_unchanged(flat_box_frame, center_action):
    noise = NoiseConfig(sigma_pos=1e-12, sigma_rot=1e-12)
    moved = perturb(flat_box_frame, center_action, noise, np.random.default_rng(0))
    assert np.allclose(moved.pose, center_action.pose, atol=1e-9)
    assert moved.cups == center_action.cups


def test_perturbation_mean_is_centered(flat_box_frame, center_action):
    noise = NoiseConfig(sigma_pos=0.02, sigma_rot=0.3)
    rng = np.random.default_rng(7)
    offsets = []
    for _ in range(2000):
        try:
            offsets.append(perturb(flat_box_frame, center_action, noise, rng).x - center_action.x)
        except PerturbationRejected:
            continue
    assert abs(np.mean(offsets)) <= 4 * 0.02 / np.sqrt(len(offsets))


def test_perturb_is_seeded(flat_box_frame, center_action):
    noise = NoiseConfig()

    def run():
        rng = np.random.default_rng(11)
        return [perturb(flat_box_frame, center_action, noise, rng).pose for _ in range(10)]

    assert run() == run()


def test_perturb_consumes_three_draws(flat_box_frame, center_action):
    rng, twin = np.random.default_rng(3), np.random.default_rng(3)
    perturb(flat_box_frame, center_action, NoiseConfig(), rng)
    twin.normal(size=3)
    assert rng.random() == twin.random()


def test_far_perturbations_are_rejected(flat_box_frame, center_action):
    noise = NoiseConfig(sigma_pos=1.0, sigma_rot=0.1)
    rng = np.random.default_rng(5)
    rejected = 0
    for _ in range(20):
        try:
            perturb(flat_box_frame, center_action, noise, rng)
        except PerturbationRejected:
            rejected += 1
    assert rejected >= 15


# ——— label_pair ———

def test_delta_points_to_better_pose():
    a_i, a_j = bare_action(0.10, 0.20, 0.0), bare_action(0.12, 0.18, 0.1)
    pair = label_pair(StubPsp({0.10: 0.9, 0.12: 0.6}), None, a_i, a_j, adjacency={})
    assert pair.delta == pytest.approx((-0.02, 0.02, -0.1), abs=1e-9)
    assert pair.phi[0] == pytest.approx(0.12)
    assert (pair.p_low, pair.p_high) == (0.6, 0.9)
    assert pair.origin == a_j.pose


def test_tie_goes_from_first_to_second():
    a_i, a_j = bare_action(0.10, 0.20, 0.0), bare_action(0.12, 0.18, 0.1)
    pair = label_pair(StubPsp({0.10: 0.7, 0.12: 0.7}), None, a_i, a_j, adjacency={})
    assert pair.delta == pytest.approx((0.02, -0.02, 0.1), abs=1e-9)
    assert pair.phi[0] == pytest.approx(0.10)


def test_rotation_delta_is_wrapped():
    a_i, a_j = bare_action(0.1, 0.1, 3.0), bare_action(0.2, 0.1, -3.0)
    pair = label_pair(StubPsp({0.1: 0.2, 0.2: 0.8}), None, a_i, a_j, adjacency={})
    assert pair.delta[2] == pytest.approx(2 * np.pi - 6.0, abs=1e-8)


def test_poses_on_different_segments_are_refused():
    a_i = bare_action(0.10, 0.20, 0.0)
    a_j = replace(bare_action(0.12, 0.18, 0.1), target_segment=2)
    with pytest.raises(SegmentMismatchError, match="segments 1 and 2"):
        label_pair(StubPsp({0.10: 0.9, 0.12: 0.6}), None, a_i, a_j, adjacency={})


# ——— build_dataset ———

def test_split_counts():
    assert split_counts(27977, 0.8) == (22381, 5596)


def test_split_keeps_picks_together():
    pairs = synthetic_dataset(n=20).train
    groups, start = [], 0
    for i, n in enumerate((3, 5, 2, 4, 6)):
        groups.append([replace(p, provenance=(0, i, k)) for k, p in enumerate(pairs[start:start + n])])
        start += n
    train, test = split_by_pick(groups, 0.5, seed=1)
    assert len(train) <= 10
    assert len(train) + len(test) == 20
    train_picks = {p.provenance[1] for p in train}
    assert train_picks.isdisjoint({p.provenance[1] for p in test})


def test_pairs_reproduce_better_pose(executed, psp):
    dataset = build_dataset(executed, NoiseConfig(n_perturb=5), psp, 0.5, seed=9)
    origin_pose = executed[0].action.pose
    for pair in dataset.train + dataset.test:
        assert pair.p_high >= pair.p_low
        target = apply_delta(pair.origin, pair.delta)
        assert target == origin_pose or pair.origin == origin_pose
        frame = executed[0].frame
        rebuilt = make_action(frame, *target, pair.target_segment)
        assert psp.prob_for_action(frame, rebuilt) == pair.p_high


def test_split_is_disjoint_by_pick(executed, psp):
    dataset = build_dataset(executed, NoiseConfig(n_perturb=4), psp, 0.5, seed=2)
    train_picks = {p.provenance[:2] for p in dataset.train}
    test_picks = {p.provenance[:2] for p in dataset.test}
    assert train_picks.isdisjoint(test_picks)
    assert len(dataset.train) <= dataset.total // 2
    assert dataset.total <= 6 * 4


def test_empty_picks_rejected(psp):
    with pytest.raises(EmptyDatasetError):
        build_dataset([], NoiseConfig(), psp, 0.8, seed=0)


def test_dataset_is_byte_identical(tmp_path, executed, psp):
    noise = NoiseConfig(n_perturb=3)
    save_dataset(tmp_path / "a.jsonl", build_dataset(executed, noise, psp, 0.8, seed=4))
    save_dataset(tmp_path / "b.jsonl", build_dataset(executed, noise, psp, 0.8, seed=4, threads=3))
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_dataset_round_trip(tmp_path, executed, psp):
    original = build_dataset(executed, NoiseConfig(n_perturb=3), psp, 0.8, seed=4)
    path = tmp_path / "dataset.jsonl"
    save_dataset(path, original)
    loaded = load_dataset(path)
    assert len(loaded.train) == len(original.train)
    assert len(loaded.test) == len(original.test)
    assert loaded.noise == original.noise
    assert np.array_equal(loaded.train[0].phi, original.train[0].phi)
    assert loaded.train[0].delta == original.train[0].delta


def test_dataset_header_is_checked(tmp_path):
    path = tmp_path / "dataset.jsonl"
    path.write_text(json.dumps({"kind": "scenes", "format_version": 1}) + "\n")
    with pytest.raises(DataFormatError):
        load_dataset(path)
    path.write_text(json.dumps({"kind": "dataset", "format_version": 99, "feature_dim": 78}) + "\n")
    with pytest.raises(FormatVersionError):
        load_dataset(path)
