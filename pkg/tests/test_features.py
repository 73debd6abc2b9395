import math

import numpy as np
import pytest

from builders import box, make_frame
from config import SceneConfig
from picking.common import DimensionMismatchError, MissingSegmentError
from picking.features import (
    FEATURE_NAMES,
    HEIGHT_MAP_SLICE,
    FeatureVector,
    compute_features,
    feature_names,
    write_feature_csv,
)
from picking.geometry import adjacency_graph
from picking.pick import DEFAULT_EOAT, activate_cups, make_action, sample_candidates
from picking.scene import PackageKind, generate_scene, render_sensor, visible_segments


def test_feature_names_are_canonical():
    names = feature_names()
    assert len(names) == 78
    assert names[0] == "pkg_height"
    assert names[2] == "n_active_cups"
    assert names[75:] == ["kind_box", "kind_polybag", "kind_envelope"]
    assert tuple(names) == FEATURE_NAMES


def test_flat_box_center(flat_box_frame, adjacency, center_action):
    phi = compute_features(flat_box_frame, adjacency, center_action)
    assert phi[0] == pytest.approx(0.1)
    assert phi[1] < 1e-9
    assert phi[2] == 8
    assert phi[3] == pytest.approx(0.0, abs=1e-6)
    assert phi[4] == pytest.approx(0.0, abs=1e-6)
    assert phi[75:].tolist() == [1.0, 0.0, 0.0]


def test_isolated_segment_rank(flat_box_frame, adjacency, center_action):
    phi = compute_features(flat_box_frame, adjacency, center_action)
    assert phi[5] == 0
    assert phi[6] == 1.0


def test_polybag_one_hot():
    frame = make_frame(box(1, 0.6, 0.5, 0.4, 0.3, 0.1, kind=PackageKind.POLYBAG))
    action = make_action(frame, 0.6, 0.5, 0.0, 1)
    phi = compute_features(frame, adjacency_graph(frame), action)
    assert phi[75:].tolist() == [0.0, 1.0, 0.0]


def test_missing_segment(flat_box_frame, adjacency):
    action = make_action(flat_box_frame, 0.6, 0.5, 0.0, 9)
    with pytest.raises(MissingSegmentError):
        compute_features(flat_box_frame, adjacency, action)


def test_feature_vector_length_is_checked():
    with pytest.raises(DimensionMismatchError):
        FeatureVector(values=np.zeros(77))


def test_translation_invariance():
    a = make_frame(box(1, 0.4, 0.5, 0.3, 0.2, 0.1, yaw=0.2), box(2, 0.7, 0.55, 0.2, 0.2, 0.2))
    b = make_frame(box(1, 0.6, 0.5, 0.3, 0.2, 0.1, yaw=0.2), box(2, 0.9, 0.55, 0.2, 0.2, 0.2),
                   bounds=(0.2, 0.0, 1.4, 1.0))
    phi_a = compute_features(a, adjacency_graph(a), make_action(a, 0.4012, 0.5013, 0.3, 1))
    phi_b = compute_features(b, adjacency_graph(b), make_action(b, 0.6012, 0.5013, 0.3, 1))
    assert np.allclose(phi_a.values, phi_b.values, atol=1e-6)


def random_scene_features(seeds):
    for seed in seeds:
        frame = render_sensor(generate_scene(SceneConfig(), seed), 0.005)
        graph = adjacency_graph(frame)
        for segment in visible_segments(frame):
            for action in sample_candidates(frame, segment, 2, seed):
                yield frame, action, compute_features(frame, graph, action)


def test_properties_on_random_scenes():
    checked = 0
    for frame, action, phi in random_scene_features(range(5)):
        values = phi.values
        assert np.all(np.isfinite(values))
        assert values[2] == len(activate_cups(frame, DEFAULT_EOAT, action.x, action.y, action.r))
        assert 0.0 <= values[3] <= values[4] <= math.pi / 2
        assert 0.0 < values[6] <= 1.0
        assert values[75:].sum() == 1.0
        block = values[HEIGHT_MAP_SLICE]
        assert values[73] == pytest.approx(block.var())
        assert values[74] == pytest.approx(block.max() - block.min())
        checked += 1
    assert checked > 0


def test_feature_csv(tmp_path, flat_box_frame, adjacency, center_action):
    phi = compute_features(flat_box_frame, adjacency, center_action)
    path = tmp_path / "features.csv"
    write_feature_csv(path, [phi, phi.values])
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == list(FEATURE_NAMES)
    assert len(lines) == 3
    assert float(lines[1].split(",")[2]) == 8.0
