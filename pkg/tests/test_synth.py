import json

import numpy as np
import pytest

from voxalign.camera import CameraRig, backproject_depthmap
from voxalign.grid import ClassTable, GridDims, GridGeometry
from voxalign.synth import (Box, RandomBoxes, SceneSpec, SpecError, SplitMix64, cast_ray,
                            generate_scene, ground_plane, occupancy_scene, paint, render_depth,
                            voxelize_points)

K = np.array([[40.0, 0, 32], [0, 40.0, 24], [0, 0, 1]])
TABLE = ClassTable(("empty", "ground", "car", "pole"))


def test_splitmix_reference_values():
    assert SplitMix64(0).next_u64() == 0xE220A8397B1DCDAF
    r = SplitMix64(1234567)
    assert [r.next_u64() for _ in range(3)] == [
        6457827717110365317, 3203168211198807973, 9817491932198370423]


def test_splitmix_helpers():
    r = SplitMix64(9)
    vals = [r.below(7) for _ in range(2000)]
    assert set(vals) == set(range(7))
    u = [SplitMix64(s).uniform() for s in range(200)]
    assert min(u) >= 0 and max(u) < 1
    with pytest.raises(ValueError):
        r.below(0)


def scene_spec(seed=5, cams=()):
    return SceneSpec(GridDims(16, 16, 8), TABLE,
                     (ground_plane(GridDims(16, 16, 8), 0, 1, 1), Box((3, 4, 1), (6, 8, 3), 2)),
                     tuple(cams), seed, RandomBoxes(4, 3, (2, 3)))


def test_paint_deterministic():
    a = paint(scene_spec()).labels
    b = paint(scene_spec()).labels
    assert np.array_equal(a, b)
    assert not np.array_equal(a, paint(scene_spec(seed=6)).labels)


def test_ground_plane_and_empty_scene():
    dims = GridDims(8, 6, 4)
    g = paint(SceneSpec(dims, TABLE, (ground_plane(dims, 0, 2, 1),)))
    assert int((g.labels == 1).sum()) == 8 * 6 * 2
    assert not g.labels[:, :, 2:].any()
    assert not paint(SceneSpec(dims, TABLE)).labels.any()


def test_bad_primitives():
    dims = GridDims(4, 4, 4)
    with pytest.raises(SpecError):
        paint(SceneSpec(dims, TABLE, (Box((0, 0, 0), (5, 1, 1), 1),)))
    with pytest.raises(SpecError):
        paint(SceneSpec(dims, TABLE, (Box((0, 0, 0), (1, 1, 1), 9),)))


@pytest.mark.parametrize("fraction", [0.0, 0.071, 0.5, 1.0])
def test_occupancy_scene_exact(fraction):
    spec = occupancy_scene((10, 10, 10), fraction, seed=1, class_ids=(1, 2))
    lab = paint(spec).labels
    assert int((lab != 0).sum()) == round(fraction * 1000)


def test_spec_from_json():
    doc = {
        "dims": [8, 8, 4], "classes": ["empty", "ground", "car"], "seed": 3,
        "primitives": [{"type": "ground", "z_lo": 0, "z_hi": 1, "class_id": 1},
                       {"lo": [2, 2, 1], "hi": [4, 4, 3], "class_id": 2}],
        "cameras": [{"fx": 40, "fy": 40, "cx": 32, "cy": 24, "image_size": [64, 48],
                     "position": [-2, 0.8, 2], "look_at": [0.8, 0.8, 0]}],
    }
    spec = SceneSpec.from_json(json.dumps(doc))
    assert spec.dims == GridDims(8, 8, 4) and len(spec.cameras) == 1
    labels, rigs, depths = generate_scene(spec)
    assert int((labels.labels == 2).sum()) == 8
    assert depths[0].depth.shape == (48, 64) and depths[0].valid().any()


def _march(occ, geom, origin, direction, s_max=40.0, step=1e-3):
    """Fine fixed-step march; first occupied cell or None."""
    for s in np.arange(0.0, s_max, step):
        c = voxelize_points(origin + s * direction, geom)
        if (c >= 0).all() and (c < geom.dims.shape).all() and occ[tuple(c)]:
            return tuple(int(v) for v in c)
    return None


def test_cast_ray_matches_march(rng):
    geom = GridGeometry(GridDims(6, 6, 6), (0, 0, 0), 0.5)
    occ = rng.uniform(size=(6, 6, 6)) < 0.08
    for _ in range(15):
        o = rng.uniform(-1, 4, 3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        res = cast_ray(occ, geom, o, d)
        want = _march(occ, geom, o, d, 10.0)
        if res is None:
            assert want is None
        else:
            assert res[0] == want
            assert voxelize_points(o + res[1] * d, geom).tolist() == list(res[0])


def test_axis_aligned_ray():
    geom = GridGeometry(GridDims(4, 1, 1), (0, 0, 0), 1.0)
    occ = np.array([False, False, True, False]).reshape(4, 1, 1)
    assert cast_ray(occ, geom, (-1.0, 0.5, 0.5), (1.0, 0.0, 0.0)) == ((2, 0, 0), 3.5)
    assert cast_ray(occ, geom, (-1.0, 1.5, 0.5), (1.0, 0.0, 0.0)) is None


def test_depth_backprojects_onto_visible_surface():
    cams = [CameraRig.look_at((-1.0, 1.6, 2.0), (1.6, 1.6, 0.0), K, (64, 48)),
            CameraRig.look_at((4.0, -1.0, 2.5), (1.6, 1.6, 0.2), K, (64, 48))]
    spec = scene_spec(cams=cams)
    labels = paint(spec)
    for rig in cams:
        dm, hits = render_depth(labels, rig)
        valid = dm.valid()
        assert valid.sum() > 100
        pts = backproject_depthmap(dm, rig)
        cells = voxelize_points(pts, labels.geometry)
        assert np.array_equal(cells, hits[valid])
        assert (labels.labels[tuple(cells.T)] != 0).all()
        assert (hits[~valid] == -1).all()
