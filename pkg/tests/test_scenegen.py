import json
from dataclasses import replace

import numpy as np
import pytest

from bevda.geometry import ego_to_pixel, frustum_to_ego
from bevda.scenegen import (DatasetFormatError, DomainShiftConfig, MultiViewSample, SceneSpec,
                            ShiftKind, generate_dataset, generate_sample, make_rig,
                            project_lidar_depth, read_dataset, write_dataset)
from bevda.scenegen.dataset import FORMAT_VERSION, encode_sample, samples_equal

SMALL = SceneSpec(seed=7, num_objects=5, lidar_rays=1024)


def _depth_oracle(points, K, T, H, W):
    """Point-by-point projection keeping the nearest depth per pixel."""
    best = np.full((H, W), np.inf)
    for p in points:
        cam = T[:3, :3] @ p + T[:3, 3]
        if cam[2] <= 0:
            continue
        u = K[0, 0] * cam[0] / cam[2] + K[0, 2]
        v = K[1, 1] * cam[1] / cam[2] + K[1, 2]
        if 0 <= u < W and 0 <= v < H:
            r, c = int(np.floor(v)), int(np.floor(u))
            best[r, c] = min(best[r, c], cam[2])
    return np.where(np.isfinite(best), best, 0.0), np.isfinite(best)


class TestGenerate:
    def test_empty_scene(self):
        s = generate_sample(replace(SMALL, num_objects=0))
        assert s.gt_boxes.shape == (0, 8)
        # background only: every lidar return is on the ground plane
        assert np.allclose(s.lidar_points[:, 2], 0.0, atol=1e-9)

    def test_deterministic(self):
        a = generate_sample(SMALL, DomainShiftConfig.preset("weather"))
        b = generate_sample(SMALL, DomainShiftConfig.preset("weather"))
        assert encode_sample(a) == encode_sample(b)

    def test_daynight_darker_with_same_geometry(self):
        a = generate_sample(SMALL, DomainShiftConfig())
        b = generate_sample(SMALL, DomainShiftConfig(kind="daynight", gain=0.25))
        np.testing.assert_array_equal(a.gt_boxes, b.gt_boxes)
        np.testing.assert_array_equal(a.lidar_points, b.lidar_points)
        assert np.all(b.images.mean(axis=(1, 2)) < a.images.mean(axis=(1, 2)))

    @pytest.mark.parametrize("kind", ["scene", "weather", "daynight"])
    def test_shift_purity(self, kind):
        a = generate_sample(SMALL)
        b = generate_sample(SMALL, DomainShiftConfig.preset(kind))
        np.testing.assert_array_equal(a.gt_boxes, b.gt_boxes)
        np.testing.assert_array_equal(a.lidar_points, b.lidar_points)
        assert not np.array_equal(a.images, b.images)

    def test_sample_invariants(self):
        s = generate_sample(SMALL, DomainShiftConfig.preset("weather"))
        assert s.images.dtype == np.float32 and s.images.shape == (4, 64, 96, 3)
        assert s.images.min() >= 0 and s.images.max() <= 1
        assert np.isfinite(s.lidar_points).all() and len(s.lidar_points) > 0
        (x0, x1), (y0, y1) = SMALL.layout_bounds
        assert np.all((s.gt_boxes[:, 0] >= x0) & (s.gt_boxes[:, 0] <= x1))
        assert np.all((s.gt_boxes[:, 1] >= y0) & (s.gt_boxes[:, 1] <= y1))
        assert s.domain_tag == "TARGET"

    def test_rig_contract(self):
        rig = make_rig(SceneSpec())
        for K, T in zip(rig.intrinsics, rig.extrinsics):
            assert K[0, 0] > 0 and K[1, 1] > 0
            R = T[:3, :3]
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(R) - 1) <= 1e-9
        # yaw of each optical axis; the four views abut, so together they span 360 degrees
        axes = [np.arctan2(T[2, 1], T[2, 0]) for T in rig.extrinsics]
        gaps = np.diff(np.sort(np.mod(axes, 2 * np.pi)))
        assert np.all(gaps <= np.radians(SceneSpec().hfov_deg))

    def test_over_dense_rejected(self):
        with pytest.raises(ValueError, match="over-dense"):
            generate_sample(replace(SMALL, num_objects=400))

    @pytest.mark.parametrize("bad", [dict(num_objects=-1), dict(num_views=0), dict(image_size=(16, 96)),
                                     dict(object_size_ranges={"car": ((0.0, 1.0), (1, 2), (1, 2))})])
    def test_spec_validation(self, bad):
        with pytest.raises(ValueError):
            replace(SMALL, **bad)

    def test_none_shift_requires_identity(self):
        with pytest.raises(ValueError):
            DomainShiftConfig(kind=ShiftKind.NONE, gain=0.5)

    def test_coverage(self):
        for seed in range(10):
            s = generate_sample(replace(SMALL, seed=seed, num_objects=1))
            visible = False
            for m in range(4):
                u, v, z = ego_to_pixel(s.gt_boxes[:, :3], s.rig.intrinsics[m], s.rig.extrinsics[m])
                visible |= bool(np.any((z > 0) & (u >= 0) & (u < 96) & (v >= 0) & (v < 64)))
            assert visible

    def test_dataset_seeds_differ(self):
        ds = generate_dataset(SMALL, DomainShiftConfig(), 3, seed=1)
        assert len({encode_sample(s) for s in ds}) == 3


class TestLidarProjection:
    def _sample(self, points):
        s = generate_sample(replace(SMALL, num_objects=0))
        return MultiViewSample(s.images, np.asarray(points, dtype=np.float64), s.rig, s.gt_boxes)

    def test_optical_axis(self):
        rig = make_rig(SMALL)
        K = rig.intrinsics[0]
        p = frustum_to_ego(K[0, 2], K[1, 2], 10.0, K, rig.extrinsics[0])
        ld = project_lidar_depth(self._sample([p]), 0)
        assert ld.mask.sum() == 1
        assert ld.mask[32, 48] and ld.depth[32, 48] == pytest.approx(10.0, abs=1e-12)

    def test_behind_not_written(self):
        ld = project_lidar_depth(self._sample([[-10.0, 0.0, 1.6]]), 0)
        assert not ld.mask.any()

    def test_empty_lidar(self):
        ld = project_lidar_depth(self._sample(np.zeros((0, 3))), 0)
        assert not ld.mask.any()

    def test_matches_bruteforce(self, rng):
        pts = np.column_stack([rng.uniform(2, 30, 100), rng.uniform(-20, 20, 100), rng.uniform(0, 3, 100)])
        # force collisions: all cameras sit at (0, 0, 1.6), so scaling about that center
        # puts a farther point on the same ray as an existing one
        center = np.array([0.0, 0.0, 1.6])
        pts = np.vstack([center + (pts[:10] - center) * 1.5, pts])
        s = self._sample(pts)
        for m in range(4):
            ld = project_lidar_depth(s, m)
            d, mask = _depth_oracle(pts, s.rig.intrinsics[m], s.rig.extrinsics[m], 64, 96)
            np.testing.assert_array_equal(ld.mask, mask)
            np.testing.assert_allclose(ld.depth, d, atol=1e-12)

    def test_reprojection_recovers_points(self):
        s = generate_sample(SMALL)
        for m in range(4):
            ld = project_lidar_depth(s, m)
            r, c = np.nonzero(ld.mask)
            assert len(r) > 0
            back = frustum_to_ego(ld.uv[r, c, 0], ld.uv[r, c, 1], ld.depth[r, c],
                                  s.rig.intrinsics[m], s.rig.extrinsics[m])
            assert np.abs(back - s.lidar_points[ld.point_index[r, c]]).max() <= 1e-6
            # the winning sub-pixel position falls in the written pixel
            assert np.all(np.floor(ld.uv[r, c, 0]) == c) and np.all(np.floor(ld.uv[r, c, 1]) == r)

    def test_bad_view(self):
        with pytest.raises(IndexError):
            project_lidar_depth(generate_sample(SMALL), 4)


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        ds = generate_dataset(SMALL, DomainShiftConfig.preset("weather"), 10, seed=3)
        write_dataset(tmp_path, ds, SMALL, DomainShiftConfig.preset("weather"), "tgt")
        assert samples_equal(read_dataset(tmp_path), ds)
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["format_version"] == FORMAT_VERSION and man["split"] == "tgt"
        assert man["count"] == 10 and man["shift"]["kind"] == "weather"
        assert SceneSpec.from_dict(man["spec"]) == SMALL

    def test_empty(self, tmp_path):
        write_dataset(tmp_path, [], SMALL)
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["count"] == 0 and man["records"] == []
        assert read_dataset(tmp_path) == []

    def test_corrupted_byte_names_record(self, tmp_path):
        write_dataset(tmp_path, generate_dataset(SMALL, DomainShiftConfig(), 3, seed=3))
        f = tmp_path / "record_000001.bin"
        b = bytearray(f.read_bytes())
        b[len(b) // 2] ^= 0xFF
        f.write_bytes(bytes(b))
        with pytest.raises(DatasetFormatError) as e:
            read_dataset(tmp_path)
        assert e.value.record == 1 and "record 1" in str(e.value)

    def test_version_mismatch(self, tmp_path):
        write_dataset(tmp_path, generate_dataset(SMALL, DomainShiftConfig(), 1, seed=3))
        f = tmp_path / "record_000000.bin"
        b = bytearray(f.read_bytes())
        b[4:8] = (FORMAT_VERSION + 1).to_bytes(4, "little")
        f.write_bytes(bytes(b))
        with pytest.raises(DatasetFormatError) as e:
            read_dataset(tmp_path)
        assert e.value.offset == 4 and "offset 4" in str(e.value)

    def test_truncated(self, tmp_path):
        write_dataset(tmp_path, generate_dataset(SMALL, DomainShiftConfig(), 2, seed=3))
        f = tmp_path / "record_000001.bin"
        data = f.read_bytes()
        f.write_bytes(data[:-100])
        with pytest.raises(DatasetFormatError) as e:
            read_dataset(tmp_path)
        assert e.value.record == 1 and e.value.offset is not None
        # the decoder alone reports truncation at the end of the short buffer
        from bevda.scenegen.dataset import decode_sample
        with pytest.raises(DatasetFormatError, match="truncated") as e:
            decode_sample(data[:-100], 5)
        assert e.value.offset == len(data) - 100 and e.value.record == 5

    def test_rewrite_overwrites(self, tmp_path):
        write_dataset(tmp_path, generate_dataset(SMALL, DomainShiftConfig(), 3, seed=3))
        ds = generate_dataset(SMALL, DomainShiftConfig(), 1, seed=4)
        write_dataset(tmp_path, ds)
        assert len(list(tmp_path.glob("record_*.bin"))) == 1
        assert samples_equal(read_dataset(tmp_path), ds)
