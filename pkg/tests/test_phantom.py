import numpy as np
import pytest

from latentseg.labels import DEFAULT_TABLE
from latentseg.phantom import (
    Manifest,
    Pose,
    PosePolicy,
    Shape,
    PhantomScene,
    VolumeFile,
    default_scene,
    extent_for,
    generate_split,
    manifest_digest,
    read_volume,
    render,
    slice_iter,
    write_volume,
)

# Label voxel counts of the default scene (seed 0) at 0.8 mm, frozen as a regression fixture.
FROZEN_COUNTS_08 = [19892, 2280, 1204, 1204, 972, 972, 157, 157, 81, 81]


def concentric_scene():
    prims = (
        Shape("ellipsoid", "csf", axes=(6.0, 6.0, 6.0)),
        Shape("ellipsoid", "wm", axes=(2.0, 2.0, 2.0)),
    )
    return PhantomScene(prims)


class TestRender:
    def test_center_is_innermost(self):
        _, lab = render(concentric_scene(), res=1.0, extent=16)
        # the 2x2x2 central voxels sit at distance sqrt(3)/2 from the center
        assert set(np.unique(lab[7:9, 7:9, 7:9])) == {DEFAULT_TABLE.by_name("wm_L").id, DEFAULT_TABLE.by_name("wm_R").id}

    def test_quarter_turn_is_lattice_permutation(self):
        scene = default_scene(3)
        _, a = render(scene, Pose(), 1.0)
        _, b = render(scene, Pose(90.0), 1.0)
        n = a.shape[1]
        j, i = np.mgrid[0:n, 0:n]
        np.testing.assert_array_equal(b, a[:, n - 1 - i, j])

    def test_analytic_equivariance(self):
        # rendering at a pose equals evaluating the scene at the inverse-posed voxel centers
        scene, pose, res = default_scene(5), Pose(37.0, (0.4, -0.3, 0.2)), 0.8
        _, lab = render(scene, pose, res)
        n = lab.shape[0]
        c = (np.arange(n) + 0.5 - n / 2) * res
        z, y, x = np.meshgrid(c, c, c, indexing="ij")
        np.testing.assert_array_equal(lab, scene.label_at(*pose.to_scene(x, y, z)))

    def test_label_fractions_stable_across_resolutions(self):
        fr = []
        for res in (0.5, 0.8, 1.0):
            _, lab = render(default_scene(0), Pose(), res)
            fr.append(np.bincount(lab.ravel(), minlength=10) / lab.size)
        fr = np.array(fr)
        assert np.max(fr.max(axis=0) - fr.min(axis=0)) <= 0.02

    def test_frozen_fixture(self):
        _, lab = render(default_scene(0), Pose(), 0.8)
        assert np.bincount(lab.ravel(), minlength=10).tolist() == FROZEN_COUNTS_08

    def test_mirror_symmetry(self):
        _, lab = render(default_scene(0), Pose(), 0.8)
        counts = np.bincount(lab.ravel(), minlength=10)
        for left in (2, 4, 6, 8):
            right = DEFAULT_TABLE.partner(left)
            assert abs(counts[left] - counts[right]) <= 0.01 * counts[left]

    def test_every_label_present_and_inside_fov(self):
        _, lab = render(default_scene(1), Pose(90.0, (1.0, 1.0, 1.0)), 1.0)
        assert set(np.unique(lab)) == set(range(10))
        for ax in range(3):
            edge = np.take(lab, [0, -1], axis=ax)
            assert not edge.any()

    def test_intensity_range_and_determinism(self):
        img1, _ = render(default_scene(2), Pose(10.0), 1.0)
        img2, _ = render(default_scene(2), Pose(10.0), 1.0)
        assert img1.dtype == np.float32 and img1.min() >= 0 and img1.max() <= 1
        np.testing.assert_array_equal(img1, img2)

    def test_t1_inverts_contrast(self):
        t2, lab = render(default_scene(0, "t2"), res=1.0, noise_sigma=0, bias=0)
        t1, _ = render(default_scene(0, "t1"), res=1.0, noise_sigma=0, bias=0)
        assert t2[lab == 1].mean() > t2[lab == 4].mean()
        assert t1[lab == 1].mean() < t1[lab == 4].mean()

    def test_bad_resolution(self):
        with pytest.raises(ValueError):
            render(default_scene(0), res=0.0)

    def test_extent(self):
        assert extent_for(0.5) == 48 and extent_for(0.8) == 30 and extent_for(1.0) == 24


class TestSlices:
    def test_axial_count(self):
        vol = np.zeros((16, 16, 16))
        out = list(slice_iter(vol, "axial"))
        assert len(out) == 16 and out[0][1].shape == (16, 16)

    def test_drop_empty(self):
        vol = np.zeros((16, 16, 16))
        assert list(slice_iter(vol, "coronal", np.zeros((16, 16, 16), dtype=np.uint16), drop_empty=True)) == []

    def test_sagittal_not_lateralized(self):
        img, lab = render(default_scene(0), res=1.0)
        for _, _, ls in slice_iter(img, "sagittal", lab):
            assert ls.max() <= 5

    def test_thickness_stack(self):
        vol = np.arange(4)[:, None, None] * np.ones((4, 2, 2))
        out = list(slice_iter(vol, "axial", thickness=3))
        assert out[0][1][:, 0, 0].tolist() == [0, 0, 1]
        assert out[3][1][:, 0, 0].tolist() == [2, 3, 3]

    def test_unknown_plane(self):
        with pytest.raises(ValueError):
            list(slice_iter(np.zeros((2, 2, 2)), "oblique"))


class TestVolumeFile:
    @pytest.mark.parametrize("dtype", [np.float32, np.uint16])
    def test_round_trip(self, tmp_path, dtype):
        data = (np.random.default_rng(0).random((5, 4, 3)) * 100).astype(dtype)
        vf = VolumeFile(data, 0.8, 12345, Pose(63.5, (0.1, -0.2, 0.3)))
        write_volume(tmp_path / "v.vol", vf)
        back = read_volume(tmp_path / "v.vol")
        assert back.data.dtype == dtype and back.data.tobytes() == data.tobytes()
        assert (back.voxel_size, back.seed, back.pose) == (0.8, 12345, vf.pose)
        write_volume(tmp_path / "w.vol", back)
        assert (tmp_path / "v.vol").read_bytes() == (tmp_path / "w.vol").read_bytes()

    def test_truncated(self, tmp_path):
        write_volume(tmp_path / "v.vol", VolumeFile(np.zeros((2, 2, 2), np.float32), 1.0))
        raw = (tmp_path / "v.vol").read_bytes()
        (tmp_path / "v.vol").write_bytes(raw[:-4])
        with pytest.raises(ValueError, match="payload"):
            read_volume(tmp_path / "v.vol")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.vol").write_bytes(b"\0" * 100)
        with pytest.raises(ValueError):
            read_volume(tmp_path / "x.vol")


class TestSplit:
    def test_deterministic(self):
        a, b = generate_split(3, 2, 4, seed=9), generate_split(3, 2, 4, seed=9)
        assert a.dumps() == b.dumps() and manifest_digest(a) == manifest_digest(b)
        assert generate_split(3, 2, 4, seed=10).dumps() != a.dumps()

    def test_round_robin(self):
        m = generate_split(9, 1, 1)
        res = [e.res for e in m.split("train")]
        assert [res.count(r) for r in (0.5, 0.8, 1.0)] == [3, 3, 3]

    def test_disjoint_seeds(self):
        m = generate_split(10, 5, 10)
        seeds = {s: {e.seed for e in m.split(s)} for s in ("train", "val", "test")}
        assert not (seeds["train"] & seeds["val"] or seeds["train"] & seeds["test"] or seeds["val"] & seeds["test"])

    def test_pose_policy(self):
        m = generate_split(20, 5, 20, PosePolicy((0.0, 20.0), (60.0, 120.0), 1.0))
        assert all(abs(e.pose.theta_deg) <= 20 for e in m.split("train") + m.split("val"))
        assert all(60 <= abs(e.pose.theta_deg) <= 120 for e in m.split("test"))
        assert all(max(map(abs, e.pose.t)) <= 1.0 for e in m.entries)

    def test_text_round_trip(self, tmp_path):
        m = generate_split(2, 1, 2)
        m.write(tmp_path / "m.tsv")
        assert Manifest.read(tmp_path / "m.tsv").dumps() == m.dumps()

    def test_bad_header(self):
        with pytest.raises(ValueError):
            Manifest.loads("nope\n")

    def test_counts(self):
        with pytest.raises(ValueError):
            generate_split(0, 1, 1)
