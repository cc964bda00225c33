import json

import numpy as np
import pytest

from conftest import COLS, ROWS, read_instances
from helpers import room
from occlabel.clustering import Verdict
from occlabel.errors import ConfigError, OutOfRange
from occlabel.evaluation import compute_iou, load_label_dir
from occlabel.formats import list_scans, read_labels, read_scan, read_trajectory
from occlabel.pipeline import (PipelineError, SequenceConfig, iter_occupancy_pass, label_scans, label_sequence,
                               run_free_space_pass)
from occlabel.simulator import render_scan, sensor_trajectory
from occlabel.voxel_grid import VoxelState, point_keys, unpack_keys


# --------------------------------------------------------------------------- config

def test_config_defaults():
    cfg = SequenceConfig()
    assert (cfg.voxel_size, cfg.window, cfg.ratio_threshold, cfg.min_cluster_points) == (0.3, 5, 0.6, 5)
    assert (cfg.min_seed_diameter, cfg.seed_radius_factor) == (0.2, 2.0)
    assert (cfg.ground_eligible_angle, cfg.ground_distance) == (30.0, 0.25)
    assert cfg.feedback and not cfg.ground_debug


@pytest.mark.parametrize("bad", [{"voxel_size": 0}, {"window": -1}, {"ratio_threshold": -0.6},
                                 {"min_cluster_points": 0}, {"nonsense": 1}, {"window": "five"},
                                 {"feedback": "maybe"}])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        SequenceConfig.from_mapping(bad)


def test_config_window_zero_allowed():
    assert SequenceConfig(window=0).window == 0


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("# tuned\nvoxel_size = 0.25\nwindow=3  # scans\n\nfeedback = false\n")
    cfg = SequenceConfig.from_file(p, {"window": 7})
    assert (cfg.voxel_size, cfg.window, cfg.feedback) == (0.25, 7, False)
    (tmp_path / "rt.txt").write_text(cfg.to_text())
    assert SequenceConfig.from_file(tmp_path / "rt.txt") == cfg
    p.write_text("voxel_size 0.3\n")
    with pytest.raises(ConfigError):
        SequenceConfig.from_file(p)


# --------------------------------------------------------------------------- free-space pass

def test_empty_sequence_gives_empty_grid():
    grid = run_free_space_pass([], sensor_trajectory(room()))
    assert grid.allocated()[0].size == 0


def test_free_space_pass_one_scan():
    scene = room(rows=32, cols=512, sensor_z=1.2)
    scan, _ = render_scan(scene, 0.0, 0, noise=0.0)
    grid = run_free_space_pass([scan], sensor_trajectory(scene))
    counts = grid.count_states()
    assert counts[VoxelState.OCCUPIED] == 0
    assert grid.query_state((3.0, 0.1, 1.25)) == (VoxelState.FREE, True)
    # wall surface voxel is not occupied
    assert grid.query_state((5.95, 0.1, 1.25))[0] != VoxelState.OCCUPIED


def test_disappearing_object_is_carved():
    box = {"min": [2.5, -0.5, 0.7], "max": [3.5, 0.5, 1.7]}
    with_box = room(rows=32, cols=512, boxes=[box])
    empty = room(rows=32, cols=512)
    scans = [render_scan(with_box, 0.0, 0, noise=0.0)[0]]
    scans += [render_scan(empty, t, k, noise=0.0)[0] for k, t in enumerate((0.1, 0.2, 0.3), start=1)]
    traj = sensor_trajectory(empty)
    only_first = run_free_space_pass(scans[:1], traj)
    assert only_first.query_state((2.55, 0.05, 1.25))[0] != VoxelState.FREE
    grid = run_free_space_pass(scans, traj)
    assert grid.query_state((2.55, 0.05, 1.25)) == (VoxelState.FREE, True)


# --------------------------------------------------------------------------- occupancy pass

@pytest.fixture(scope="module")
def moving_labels(moving_seq):
    scans = list_scans(moving_seq / "scans")
    traj = read_trajectory(moving_seq / "trajectory.txt")
    return label_scans(scans, traj, SequenceConfig(), keep_diagnostics=True)


def test_static_scene_all_zero(static_seq, tmp_path):
    summary = label_sequence(static_seq / "scans", static_seq / "trajectory.txt", None, tmp_path / "out")
    labels = sorted((tmp_path / "out").glob("*.label"))
    assert len(labels) == 50
    assert summary["scan_count"] == 50 and summary["dynamic_fraction"] == 0.0
    assert all(not read_labels(p, ROWS, COLS).any() for p in labels)


def test_moving_sphere_labeled(moving_seq, moving_labels):
    for (sid, inst), ls in zip(read_instances(moving_seq), moving_labels):
        assert sid == ls.scan_id
        sphere = inst == 1
        if sphere.sum() >= 5:
            got = ls.labels[sphere] == 1
            assert got.mean() >= 0.95, sid


def test_stopped_object_stays_dynamic(moving_seq, moving_labels):
    scene_box = 2
    for sid, inst in read_instances(moving_seq)[30:33]:
        box = inst == scene_box
        assert box.sum() > 20
        assert (moving_labels[int(sid)].labels[box] == 1).mean() >= 0.95
    # and the motion ground truth really calls it static there
    gt = read_labels(moving_seq / "ground_truth" / "000031.label", ROWS, COLS)
    assert not gt[read_instances(moving_seq)[31][1] == scene_box].any()


def test_dynamic_fraction_close_to_truth(moving_seq, tmp_path):
    summary = label_sequence(moving_seq / "scans", moving_seq / "trajectory.txt", SequenceConfig(),
                             tmp_path / "out")
    truth = load_label_dir(moving_seq / "ground_truth")
    n_dyn = sum(int((t == 1).sum()) for _, t in truth)
    scans = list_scans(moving_seq / "scans")
    n_valid = sum(int(read_scan(p).valid.sum()) for p in scans)
    gt_fraction = n_dyn / n_valid
    assert abs(summary["dynamic_fraction"] - gt_fraction) <= 0.2 * gt_fraction
    rep = compute_iou(load_label_dir(tmp_path / "out"), truth)
    assert rep.sequence_iou > 0.9


def test_no_label_escapes_validation(moving_labels):
    for ls in moving_labels:
        owner = np.zeros(ls.labels.size, int)
        for c in ls.diagnostics.clusters:
            if c.verdict == Verdict.ACCEPTED:
                owner[c.point_indices] += 1
            assert c.verdict != Verdict.PENDING
        dyn = ls.labels.ravel() == 1
        assert (owner[dyn] == 1).all()
        assert (owner[~dyn] == 0).all()


def test_window_soundness(moving_seq):
    cfg = SequenceConfig(window=0, feedback=False)
    scans = list_scans(moving_seq / "scans")
    traj = read_trajectory(moving_seq / "trajectory.txt")
    out = label_scans(scans, traj, cfg, keep_diagnostics=True)
    from occlabel.scan import undistort

    any_dynamic = False
    for path, ls in zip(scans, out):
        d = ls.diagnostics
        assert np.array_equal(d.window_keys, d.new_candidates)
        assert not d.feedback_mask.any()
        world = undistort(read_scan(path), traj)
        cand = d.candidate_mask
        keys = point_keys(world.xyz[cand], cfg.voxel_size)
        assert np.isin(keys, d.new_candidates).all()
        # every labeled point grew from a seed made of this scan's candidate points
        for c in d.clusters:
            if c.verdict == Verdict.ACCEPTED:
                assert cand.ravel()[c.seed_indices].all()
        any_dynamic |= bool((ls.labels == 1).any())
    assert any_dynamic


def test_feedback_gate(moving_seq):
    scans = list_scans(moving_seq / "scans")
    traj = read_trajectory(moving_seq / "trajectory.txt")
    cfg = SequenceConfig()
    grid = run_free_space_pass(scans, traj, cfg)
    used = 0
    for ls in iter_occupancy_pass(scans, traj, grid, cfg, keep_diagnostics=True):
        d = ls.diagnostics
        if d.feedback_keys.size:
            _, ever = grid.states(d.feedback_keys)
            assert ever.all()
        used += int(((ls.labels == 1) & d.feedback_mask).sum())
    assert used > 0


def test_ground_debug_labels(static_seq):
    scans = list_scans(static_seq / "scans")[:3]
    traj = read_trajectory(static_seq / "trajectory.txt")
    out = label_scans(scans, traj, SequenceConfig(ground_debug=True))
    assert all((ls.labels == 2).any() for ls in out)
    assert all(set(np.unique(ls.labels)) <= {0, 2} for ls in out)


def test_idempotent(static_seq, tmp_path):
    scans = static_seq / "scans"
    traj = static_seq / "trajectory.txt"
    label_sequence(scans, traj, SequenceConfig(), tmp_path / "a")
    label_sequence(scans, traj, SequenceConfig(), tmp_path / "b")
    for p in sorted((tmp_path / "a").glob("*.label")) + [tmp_path / "a" / "manifest.json"]:
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert m["config"] == SequenceConfig().to_dict() and m["scan_count"] == 50


def test_missing_trajectory_leaves_nothing(static_seq, tmp_path):
    out = tmp_path / "out"
    with pytest.raises(FileNotFoundError):
        label_sequence(static_seq / "scans", tmp_path / "nope.txt", None, out)
    assert not out.exists()
    assert list(tmp_path.iterdir()) == []


def test_corrupt_scan_names_the_scan(static_seq, tmp_path):
    import shutil

    scans = tmp_path / "scans"
    shutil.copytree(static_seq / "scans", scans)
    victim = sorted(scans.glob("*.bin"))[7]
    victim.write_bytes(victim.read_bytes()[:100])
    with pytest.raises(PipelineError) as e:
        label_sequence(scans, static_seq / "trajectory.txt", None, tmp_path / "out")
    assert e.value.scan_id == victim.stem
    assert not (tmp_path / "out").exists()


def test_short_trajectory_is_out_of_range(static_seq):
    from occlabel.scan import Trajectory

    traj = read_trajectory(static_seq / "trajectory.txt")
    short = Trajectory(traj.timestamps[:10], traj.translations[:10], traj.rotations[:10])
    with pytest.raises(PipelineError) as e:
        run_free_space_pass(list_scans(static_seq / "scans"), short)
    assert isinstance(e.value.cause, OutOfRange)
