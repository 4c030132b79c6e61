import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selffusion.data import (
    FAMILIES,
    ShapeSpec,
    default_specs,
    generate_dataset,
    load_dataset,
    make_partial,
    resample,
    sample_shape,
    split_of,
)
from selffusion.errors import ContractError, DataError
from selffusion.geometry import Provenance
from selffusion.io import HEADER, decode_pcf, encode_pcf, read_points, read_pcf, read_xyz, write_pcf, write_xyz


class TestPcf:
    def test_header_layout(self):
        blob = encode_pcf(np.array([[1.0, 2.0, 3.0]]))
        assert HEADER.size == 16 and len(blob) == 16 + 12
        assert blob[:4] == b"PCF1" and int.from_bytes(blob[4:8], "little") == 1
        assert np.frombuffer(blob[16:], "<f4").tolist() == [1.0, 2.0, 3.0]

    def test_round_trip_is_bit_exact(self, tmp_path, rng):
        pts = rng.normal(size=(50, 3)).astype(np.float32).astype(np.float64)
        write_pcf(tmp_path / "a.pcf", pts)
        np.testing.assert_array_equal(read_pcf(tmp_path / "a.pcf"), pts)
        assert encode_pcf(read_pcf(tmp_path / "a.pcf")) == (tmp_path / "a.pcf").read_bytes()

    @pytest.mark.parametrize("blob", [b"PCF", b"XXXX" + bytes(12), encode_pcf(np.zeros((2, 3)))[:-1]])
    def test_malformed(self, blob):
        with pytest.raises(DataError):
            decode_pcf(blob)

    def test_missing_file_has_path(self, tmp_path):
        with pytest.raises(DataError, match="nope.pcf"):
            read_pcf(tmp_path / "nope.pcf")

    def test_xyz_import(self, tmp_path):
        (tmp_path / "a.xyz").write_text("# header\n1 2 3\n\n4,5,6\n")
        assert read_xyz(tmp_path / "a.xyz").tolist() == [[1, 2, 3], [4, 5, 6]]
        (tmp_path / "bad.xyz").write_text("1 2\n")
        with pytest.raises(DataError, match=":1:"):
            read_xyz(tmp_path / "bad.xyz")

    def test_read_points_dispatch(self, tmp_path, rng):
        pts = rng.normal(size=(4, 3))
        write_xyz(tmp_path / "a.txt", pts)
        write_pcf(tmp_path / "a.bin", pts)
        np.testing.assert_array_equal(read_points(tmp_path / "a.txt"), pts)
        np.testing.assert_allclose(read_points(tmp_path / "a.bin"), pts, rtol=1e-6)


class TestShapes:
    @pytest.mark.parametrize("seed", [0, 1, 7])
    def test_sphere_radius(self, seed):
        cloud = sample_shape(ShapeSpec("sphere", n_gt=256, seed=seed))
        np.testing.assert_allclose(np.linalg.norm(cloud.points, axis=1), 1.0, atol=1e-6)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_normalized(self, family):
        cloud = sample_shape(ShapeSpec(family, seed=3))
        assert cloud.provenance == Provenance.GROUND_TRUTH and len(cloud) == 256
        np.testing.assert_allclose(cloud.points.mean(axis=0), 0, atol=1e-12)
        assert np.linalg.norm(cloud.points, axis=1).max() == pytest.approx(1.0)

    def test_bad_spec(self):
        with pytest.raises(DataError):
            ShapeSpec("cone")
        with pytest.raises(DataError):
            ShapeSpec("sphere", size={"height": 1.0})


class TestMakePartial:
    def test_size_is_ceiling(self, rng):
        pts = rng.normal(size=(11, 3))
        for ratio in (0.1, 0.5, 0.55, 0.99):
            assert len(make_partial(pts, [0, 0, 1], ratio)) == math.ceil(ratio * 11)

    def test_ratio_near_one_gives_full_cloud(self, rng):
        pts = rng.normal(size=(20, 3))
        np.testing.assert_array_equal(make_partial(pts, [1, 0, 0], 0.999).points, pts)

    def test_antipodal_views_partition_a_symmetric_sphere(self):
        cloud = sample_shape(ShapeSpec("sphere", n_gt=200, seed=5))
        view = np.array([0.3, -0.5, 0.8])
        a = {tuple(p) for p in make_partial(cloud, view, 0.5).points}
        b = {tuple(p) for p in make_partial(cloud, -view, 0.5).points}
        assert not a & b and len(a | b) == 200

    def test_subset_and_deterministic(self, rng):
        pts = rng.normal(size=(30, 3))
        out = make_partial(pts, [1, 2, 3], 0.4)
        assert {tuple(p) for p in out.points} <= {tuple(p) for p in pts}
        np.testing.assert_array_equal(out.points, make_partial(pts, [1, 2, 3], 0.4).points)
        assert out.provenance == Provenance.PARTIAL

    def test_errors(self, rng):
        pts = rng.normal(size=(5, 3))
        for ratio in (0.0, 1.0, 1.5):
            with pytest.raises(ContractError):
                make_partial(pts, [0, 0, 1], ratio)
        with pytest.raises(ContractError):
            make_partial(pts, [0, 0, 0], 0.5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 60), st.floats(0.05, 0.95), st.integers(0, 1000))
    def test_keeps_the_most_facing_points(self, n, ratio, seed):
        rng = np.random.default_rng(seed)
        pts, view = rng.normal(size=(n, 3)), rng.normal(size=3)
        kept = make_partial(pts, view, ratio).points
        kept_proj = kept @ view
        dropped = [p @ view for p in pts if not any((p == k).all() for k in kept)]
        assert not dropped or min(kept_proj) >= max(dropped) - 1e-12


class TestResample:
    def test_pad_and_thin(self, rng):
        pts = rng.normal(size=(5, 3))
        up = resample(pts, 12)
        assert up.shape == (12, 3) and {tuple(p) for p in up} == {tuple(p) for p in pts}
        down = resample(pts, 3)
        assert down.shape == (3, 3) and {tuple(p) for p in down} <= {tuple(p) for p in pts}


class TestDataset:
    def test_manifest_and_determinism(self, tmp_path):
        specs = default_specs(6, n_gt=64, seed=2)
        manifest = generate_dataset(specs, tmp_path / "a")
        generate_dataset(specs, tmp_path / "b")
        assert len(manifest["shapes"]) == 6
        for name in ["manifest.json"] + [e["gt"] for e in manifest["shapes"]] + [e["partial"] for e in manifest["shapes"]]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        entry = manifest["shapes"][0]
        assert {"gt", "partial", "category", "seed", "split"} <= set(entry)

    def test_split_by_seed_parity(self, tmp_path):
        generate_dataset(default_specs(6, n_gt=32, seed=0), tmp_path)
        train, val = load_dataset(tmp_path, "train"), load_dataset(tmp_path, "val")
        assert [s.seed % 2 for s in train] == [0, 0, 0] and [s.seed % 2 for s in val] == [1, 1, 1]
        assert split_of(4) == "train" and split_of(5) == "val"

    def test_partial_is_half_and_padded(self, tmp_path):
        generate_dataset(default_specs(2, n_gt=64), tmp_path)
        (raw,) = load_dataset(tmp_path, "train")
        (padded,) = load_dataset(tmp_path, "train", n_input=64)
        assert raw.partial.shape == (32, 3) and padded.partial.shape == (64, 3)
        assert {tuple(p) for p in padded.partial} == {tuple(p) for p in raw.partial} <= {tuple(p) for p in raw.gt}

    def test_errors(self, tmp_path):
        with pytest.raises(DataError):
            generate_dataset([], tmp_path)
        with pytest.raises(DataError):
            load_dataset(tmp_path / "missing")
        (tmp_path / "manifest.json").write_text(json.dumps({"version": 99, "shapes": []}))
        with pytest.raises(DataError):
            load_dataset(tmp_path)
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DataError, match="file"):
            generate_dataset(default_specs(1, n_gt=8), blocker / "sub")
