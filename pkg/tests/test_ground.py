import numpy as np
import pytest

from helpers import floor_truth, make_scan, room
from occlabel.errors import NoPlane
from occlabel.ground import (SupportPlane, compute_elevation_angles, fit_support_planes, grow_ground_mask,
                             segment_ground)
from occlabel.simulator import render_scan


def _column(points):
    """A 1-column scan from a top-to-bottom list of points."""
    return make_scan(np.asarray(points, float).reshape(-1, 1, 3))


@pytest.mark.parametrize("upper,lower,expected", [
    ((2.0, 0.0, -1.0), (1.0, 0.0, -1.0), 0.0),
    ((2.0, 0.0, 0.0), (1.0, 0.0, -1.0), 45.0),
    ((1.0, 0.0, 0.0), (1.0, 0.0, -1.0), 90.0),
])
def test_elevation_angle_examples(upper, lower, expected):
    a = compute_elevation_angles(_column([upper, lower]))
    assert np.allclose(a, expected)


def test_elevation_angle_without_neighbour_is_90():
    valid = np.array([[True], [False], [True]])
    a = compute_elevation_angles(make_scan(np.ones((3, 1, 3)), valid))
    assert np.all(a == 90.0)


def test_elevation_angle_takes_flatter_neighbour():
    # middle point sits on the floor next to a wall point above it
    a = compute_elevation_angles(_column([(3.0, 0, 0.5), (3.0, 0, -1.0), (2.0, 0, -1.0)]))
    assert a[1, 0] == 0.0 and a[0, 0] == 90.0


@pytest.fixture(scope="module")
def floor_scene():
    scene = room(rows=32, cols=512, ceiling=False, sensor_z=1.0)
    scan, _ = render_scan(scene, 0.0, 0, noise=0.0)
    return scene, scan


@pytest.fixture(scope="module")
def two_plane_scene():
    scene = room(rows=48, cols=512, sensor_z=1.0, vfov=(-45.0, 45.0))
    scan, _ = render_scan(scene, 0.0, 0, noise=0.0)
    return scene, scan


def test_floor_plane(floor_scene):
    _, scan = floor_scene
    planes = fit_support_planes(scan, compute_elevation_angles(scan))
    assert len(planes) == 1
    p = planes[0]
    assert np.isclose(np.linalg.norm(p.normal), 1.0, atol=1e-9)
    assert np.allclose(p.normal, [0, 0, 1], atol=0.02)
    assert abs(p.offset - (-1.0)) < 0.02
    assert p.inlier_threshold == 0.25


def test_floor_and_ceiling(two_plane_scene):
    _, scan = two_plane_scene
    planes = fit_support_planes(scan, compute_elevation_angles(scan))
    assert [p.kind for p in planes] == ["ground", "ceiling"]
    heights = [p.offset / p.normal[2] for p in planes]
    assert abs(heights[0] + 1.0) < 0.05
    assert abs(heights[1] - 2.0) < 0.05
    for p in planes:
        assert np.degrees(np.arccos(min(1.0, abs(p.normal[2])))) <= 30.0


def test_walls_only_has_no_plane():
    scene = room(rows=32, cols=256, ceiling=False, floor=False, sensor_z=1.5)
    scan, _ = render_scan(scene, 0.0, 0, noise=0.0)
    with pytest.raises(NoPlane):
        fit_support_planes(scan, compute_elevation_angles(scan))
    mask, planes = segment_ground(scan)
    assert planes == [] and not mask.any()


def test_floor_growth_covers_floor(floor_scene):
    scene, scan = floor_scene
    mask, planes = segment_ground(scan)
    truth = floor_truth(scene, scan)
    assert (mask & truth).sum() >= 0.99 * truth.sum()
    assert not (mask & ~scan.valid).any()


def test_mask_contains_inliers_and_stays_near_planes(two_plane_scene):
    _, scan = two_plane_scene
    mask, planes = segment_ground(scan)
    flat = mask.ravel()
    pts = scan.xyz.reshape(-1, 3)
    for p in planes:
        assert flat[p.inliers].all()
    dist = np.min([p.distance(pts[flat]) for p in planes], axis=0)
    assert dist.max() <= 0.5


def test_segmentation_is_deterministic(two_plane_scene):
    _, scan = two_plane_scene
    a, pa = segment_ground(scan, seed=3)
    b, pb = segment_ground(scan, seed=3)
    assert np.array_equal(a, b)
    assert [np.array_equal(x.inliers, y.inliers) for x, y in zip(pa, pb)] == [True] * len(pa)


def test_empty_plane_list_gives_empty_mask(floor_scene):
    _, scan = floor_scene
    assert not grow_ground_mask(scan, []).any()


def test_pedestrian_torso_not_flagged():
    walker = {"shape": "biped", "size": [1.75], "path": {"waypoints": [[3.0, 0.5, 0.0]], "speed": 0.0}}
    scene = room(rows=64, cols=1024, ceiling=False, sensor_z=1.2, movers=[walker])
    scan, gt = render_scan(scene, 0.0, 0, noise=0.0)
    mask, _ = segment_ground(scan)
    person = gt.instance == 1
    world_z = scan.xyz[..., 2] + 1.2
    torso = person & (world_z > 0.55)
    assert torso.sum() > 50
    assert not (mask & torso).any()


def test_growth_respects_plane_distance():
    # a flat table top 0.8 m above a floor stays unmasked even though it touches floor pixels
    table = {"min": [2.0, -1.0, 0.0], "max": [3.5, 1.0, 0.8]}
    scene = room(rows=64, cols=512, ceiling=False, sensor_z=1.6, boxes=[table])
    scan, _ = render_scan(scene, 0.0, 0, noise=0.0)
    mask, planes = segment_ground(scan)
    top = scan.valid & (np.abs(scan.xyz[..., 2] + 1.6 - 0.8) < 1e-3)
    assert top.sum() > 20
    assert not (mask & top).any()


def test_support_plane_distance():
    p = SupportPlane(np.array([0, 0, 1.0]), -1.0)
    assert np.allclose(p.distance(np.array([[0, 0, -1.0], [5, 5, 0.5]])), [0.0, 1.5])


def test_noisy_walls_do_not_make_a_ceiling():
    # without a ceiling, noisy far-wall pairs look flat here and there; a plane
    # through them would cut a horizontal band out of every wall
    scene = room(rows=64, cols=2048, ceiling=False, sensor_z=1.2, vfov=(-16.6, 16.6))
    scan, _ = render_scan(scene, 0.0, 0, noise=0.02)
    planes = fit_support_planes(scan, compute_elevation_angles(scan))
    assert [p.kind for p in planes] == ["ground"]
    mask, _ = segment_ground(scan)
    assert not (mask & (scan.xyz[..., 2] > -0.7)).any()
