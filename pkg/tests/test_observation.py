import math

import numpy as np
import pytest

from servo_trainer.geometry import CameraIntrinsics, CylinderRegion, Pose, look_at
from servo_trainer.observation import (AugmentationParams, DepthMode, DepthProvider, Keypoint, ObservationPair,
                                       RawKeypoint, augment, backproject, feature_error, match_keypoints, normalize,
                                       goal_pair, observe_pair, project_points, provider_depth,
                                       subsample_matches)
from servo_trainer.scene import SceneConfig, build_scene, primitive_models


def _raw_frame(rng, n, intr):
    return [RawKeypoint(i, i % 3, float(rng.uniform(0, intr.width)), float(rng.uniform(0, intr.height)),
                        float(rng.uniform(0.2, 1.5))) for i in range(n)]


def _keypoint(pid, x, y, cluster=0):
    return Keypoint(pid, cluster, (x, y), 0.5, 1.0)


def _pair(n, offset=0.0):
    current = [_keypoint(i, 0.01 * i, 0.0) for i in range(n)]
    target = [_keypoint(i, 0.01 * i + offset, 0.0) for i in range(n)]
    return match_keypoints(current, target)


def test_depth_mode_parse():
    assert DepthMode.parse("affine-relative") is DepthMode.AFFINE
    assert DepthMode.parse("camera") is DepthMode.CAMERA
    assert DepthProvider("true-depth").mode is DepthMode.TRUE
    with pytest.raises(ValueError):
        DepthMode.parse("lidar")


def test_depth_provider_validation():
    with pytest.raises(ValueError):
        DepthProvider(DepthMode.AFFINE, a=0.0)
    with pytest.raises(ValueError):
        DepthProvider(noise_amp=-0.1)
    with pytest.raises(ValueError):
        DepthProvider(DepthMode.CAMERA, min_range=2.0, max_range=1.0)


def test_normalized_depth_is_invariant_to_affine_depth():
    rng = np.random.default_rng(0)
    intr = CameraIntrinsics()
    for _ in range(1000):
        raw = _raw_frame(rng, int(rng.integers(2, 30)), intr)
        a = float(rng.uniform(0.1, 10.0))
        b = float(rng.uniform(-0.5, 0.5))
        metric = normalize(raw, intr, DepthProvider())
        affine = normalize(raw, intr, DepthProvider(DepthMode.AFFINE, a=a, b=b))
        for m, f in zip(metric, affine):
            assert f.z_norm == pytest.approx(m.z_norm, abs=1e-12)
            assert f.xy == m.xy


def test_normalize_bounds_and_constant_depth():
    intr = CameraIntrinsics()
    raw = [RawKeypoint(0, 0, 0.0, 0.0, 0.5), RawKeypoint(1, 0, 640.0, 480.0, 0.5)]
    out = normalize(raw, intr)
    assert out[0].xy == (-1.0, -1.0)
    assert out[1].xy == (1.0, 1.0)
    assert [k.z_norm for k in out] == [0.5, 0.5]
    assert normalize([], intr) == []


def test_camera_provider_drops_out_of_range_readings():
    provider = DepthProvider(DepthMode.CAMERA, min_range=0.3, max_range=1.0)
    assert provider_depth(provider, 0.2) is None
    assert provider_depth(provider, 1.2) is None
    assert provider_depth(provider, 0.5) == pytest.approx(0.5)
    intr = CameraIntrinsics()
    raw = [RawKeypoint(0, 0, 10.0, 10.0, 0.2), RawKeypoint(1, 0, 20.0, 20.0, 0.5),
           RawKeypoint(2, 0, 30.0, 30.0, 0.9)]
    assert [k.point_id for k in normalize(raw, intr, provider)] == [1, 2]


def test_noisy_provider_needs_rng_and_stays_in_band():
    provider = DepthProvider(DepthMode.CAMERA, noise_amp=0.01)
    with pytest.raises(ValueError):
        provider_depth(provider, 0.5)
    rng = np.random.default_rng(1)
    values = [provider_depth(provider, 0.5, rng) for _ in range(200)]
    assert min(values) >= 0.49
    assert max(values) <= 0.51
    with pytest.raises(ValueError):
        provider_depth(DepthProvider(), 0.0)


def test_projection_and_backprojection_agree():
    intr = CameraIntrinsics()
    pts = np.array([[0.1, -0.05, 0.6], [0.0, 0.0, 1.0]])
    pixels = project_points(pts, intr)
    assert pixels[1] == pytest.approx([320.0, 240.0])
    assert backproject(pixels[0], 0.6, intr) == pytest.approx(pts[0])


def test_match_keypoints_by_point_id():
    current = [_keypoint(3, 0.0, 0.0, 1), _keypoint(1, 0.1, 0.0, 0), _keypoint(7, 0.2, 0.0, 1)]
    target = [_keypoint(7, 0.0, 0.1, 1), _keypoint(1, 0.1, 0.1, 0)]
    pair = match_keypoints(current, target)
    assert [k.point_id for k in pair.current] == [1, 3, 7]
    assert [(pair.current[i].point_id, pair.target[j].point_id) for i, j in pair.matches] == [(1, 1), (7, 7)]
    assert pair.clusters == {0: [0], 1: [1]}


def test_feature_error_mean_distance():
    assert feature_error(_pair(5)) == pytest.approx(0.0)
    assert feature_error(_pair(5, offset=0.1)) == pytest.approx(0.1)
    assert math.isinf(feature_error(ObservationPair((), (), ())))


def test_keypoint_rejects_out_of_range_values():
    with pytest.raises(ValueError):
        Keypoint(0, 0, (1.5, 0.0), 0.5, 1.0)
    with pytest.raises(ValueError):
        Keypoint(0, 0, (0.0, 0.0), 1.5, 1.0)


def test_augment_dropout_keeps_at_least_four_matches():
    rng = np.random.default_rng(2)
    out = augment(_pair(6), AugmentationParams(dropout_ratio=0.9), rng)
    assert len(out.matches) == 4
    out = augment(_pair(20), AugmentationParams(dropout_ratio=0.5), rng)
    assert len(out.matches) == 10


def test_augment_mismatch_rewires_exact_count():
    rng = np.random.default_rng(3)
    pair = _pair(20)
    out = augment(pair, AugmentationParams(mismatch_ratio=0.25), rng)
    wrong = sum(1 for i, j in out.matches if out.current[i].point_id != out.target[j].point_id)
    assert wrong == 5


def test_augment_noise_is_bounded():
    rng = np.random.default_rng(4)
    pair = _pair(10)
    out = augment(pair, AugmentationParams(noise_amplitude=0.05), rng)
    for before, after in zip(pair.current, out.current):
        assert abs(after.xy[0] - before.xy[0]) <= 0.05 + 1e-12
        assert abs(after.xy[1] - before.xy[1]) <= 0.05 + 1e-12
    assert augment(pair, AugmentationParams(), rng) is pair


def test_augmentation_params_validation():
    with pytest.raises(ValueError):
        AugmentationParams(noise_amplitude=0.2)
    with pytest.raises(ValueError):
        AugmentationParams(dropout_ratio=1.0)


def test_observe_pair_at_goal_has_zero_error():
    rng = np.random.default_rng(5)
    region = CylinderRegion()
    scene = build_scene(primitive_models(3, rng), region, rng, SceneConfig())
    eye = region.center + np.array([0.0, 0.0, 0.4])
    camera = Pose.from_rotation(look_at(eye, region.center), eye)
    pair = observe_pair(scene, camera, camera, CameraIntrinsics())
    assert len(pair.matches) >= 4
    assert feature_error(pair) == pytest.approx(0.0)


def test_subsample_keeps_a_stride_of_the_target_frame():
    pair = _pair(50)
    kept = subsample_matches(pair, 10)
    assert len(kept.matches) == 10
    chosen = {pair.target[j].point_id for _, j in kept.matches}
    # losing current keypoints only removes their matches, the rest stays put
    partial = match_keypoints([k for k in pair.current if k.point_id % 2 == 0], pair.target)
    again = subsample_matches(partial, 10)
    assert {partial.target[j].point_id for _, j in again.matches} == {pid for pid in chosen if pid % 2 == 0}
    assert subsample_matches(pair, None) is pair
    assert subsample_matches(pair, 50) is pair


def test_subsample_falls_back_to_a_stride_of_the_matches():
    pair = _pair(50)
    # none of the seen keypoints lies on the target stride 0, 12, 24, 37, 49
    few = match_keypoints([k for k in pair.current if k.point_id in (1, 2, 3, 5, 7, 9)], pair.target)
    kept = subsample_matches(few, 5)
    assert len(kept.matches) >= 4


def test_goal_pair_matches_the_target_frame_with_itself():
    pair = _pair(30, offset=0.05)
    goal = goal_pair(pair)
    assert len(goal.matches) == 30
    assert feature_error(goal) == 0.0
    capped = goal_pair(pair, 8)
    assert len(capped.matches) == 8
    assert [pair.target[j].point_id for _, j in capped.matches] == \
        [pair.target[j].point_id for _, j in subsample_matches(pair, 8).matches]
