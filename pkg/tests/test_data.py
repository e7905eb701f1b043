import json

import numpy as np
import pytest

from uformer360 import data as D
from uformer360 import geometry as G
from uformer360.imageio import HDR_CEILING, compress_hdr


class TestScenes:
    def test_params_are_deterministic(self):
        assert D.random_scene_params(3, 7) == D.random_scene_params(3, 7)
        assert D.random_scene_params(3, 7) != D.random_scene_params(3, 8)

    def test_streams_are_independent(self):
        a = D.scene_rng(0, 1, 0).random(4)
        b = D.scene_rng(0, 1, 1).random(4)
        assert not np.allclose(a, b)

    def test_radiance_ceiling(self):
        p = D.random_scene_params(0, 0)
        with pytest.raises(ValueError):
            D.SceneParams(**{**p.to_dict(), "sun_radiance": HDR_CEILING * 1.01})

    @pytest.mark.parametrize("i", range(4))
    def test_panorama(self, i):
        p = D.random_scene_params(1, i)
        pano = D.gen_panorama(p, 32)
        assert pano.shape == (32, 64, 3) and pano.dtype == np.float32
        assert pano.min() >= 0
        assert pano.max() == pytest.approx(p.sun_radiance, rel=1e-6)

    def test_sun_texel_is_where_the_sun_is(self):
        p = D.random_scene_params(2, 0)
        pano = D.gen_panorama(p, 64)
        r, c = np.unravel_index(np.argmax(pano[..., 0]), pano.shape[:2])
        d = G.pix_to_dir(r, c, 64, 128)
        st = np.sin(p.sun_theta)
        sun = [st * np.cos(p.sun_phi), st * np.sin(p.sun_phi), np.cos(p.sun_theta)]
        assert np.degrees(G.geodesic(d, np.array(sun))) < 4.0


class TestAugment:
    def test_eight_distinct_lattice_yaws(self):
        pano = D.gen_panorama(D.random_scene_params(0, 0), 16)
        vs = D.augment(pano, np.random.default_rng(0))
        yaws = [y for _, y, _ in vs]
        assert len(vs) == 8 and len(set(yaws)) == 8 and set(yaws) <= set(D.AUG_YAWS)

    def test_variant_matches_its_recorded_transform(self):
        pano = D.gen_panorama(D.random_scene_params(0, 0), 16)
        for img, yaw, flipped in D.augment(pano, np.random.default_rng(4)):
            expect = G.yaw_rotate(pano, float(yaw))
            if flipped:
                expect = G.vertical_flip(expect)
            np.testing.assert_array_equal(img, expect)

    def test_flip_rate(self):
        pano = np.ones((4, 8, 3), np.float32)
        rng = np.random.default_rng(0)
        flips = [f for _ in range(500) for _, _, f in D.augment(pano, rng)]
        assert abs(np.mean(flips) - D.FLIP_PROB) < 0.02

    def test_fov_frequencies(self):
        rng = np.random.default_rng(0)
        draws = np.array([D.sample_fov(rng) for _ in range(10_000)])
        for f in D.FOVS:
            assert abs(np.mean(draws == f) - 0.25) < 0.02


class TestTrainingPair:
    def test_layout(self):
        pano = D.gen_panorama(D.random_scene_params(0, 2), 32)
        pair = D.make_training_pair(pano, 90)
        assert pair.input.shape == (4, 32, 64) and pair.target.shape == (3, 32, 64)
        np.testing.assert_allclose(pair.target, compress_hdr(pano.astype(np.float64)).transpose(2, 0, 1),
                                   rtol=1e-6)
        assert pair.input[:3].max() <= 1.0

    def test_mask_grows_with_fov(self):
        pano = np.ones((32, 64, 3), np.float32)
        areas = [D.make_training_pair(pano, f).mask.sum() for f in D.FOVS]
        assert areas == sorted(areas) and areas[0] > 0

    def test_mask_faces_centre(self):
        m = D.make_training_pair(np.ones((32, 64, 3), np.float32), 60).mask
        assert m[16, 32] == 1 and m[16, 0] == 0


class TestSplit:
    @pytest.mark.parametrize("n,n_test", [(1, 0), (2, 1), (50, 1), (100, 1), (1000, 10)])
    def test_counts(self, n, n_test):
        s = D.split_dataset([D.scene_id(i) for i in range(n)])
        assert sum(v == "test" for v in s.values()) == n_test

    def test_deterministic(self):
        ids = [D.scene_id(i) for i in range(300)]
        assert D.split_dataset(ids, seed=4) == D.split_dataset(list(reversed(ids)), seed=4)


class TestOnDisk:
    def test_write_and_load(self, tmp_path):
        m = D.write_dataset(tmp_path, 3, seed=2, height=16)
        assert json.loads(D.manifest_json(m)) == D.read_manifest(tmp_path)
        text = (tmp_path / "manifest.json").read_text()
        assert text == D.manifest_json(json.loads(text))
        panos = D.load_panoramas(tmp_path, "all")
        assert len(panos) == 3 and panos[0].shape == (16, 32, 3)
        n_train = len(D.scene_ids(m, "train"))
        assert len(D.load_pairs(tmp_path, "train")) == 9 * n_train
        assert len(D.load_panoramas(tmp_path, "all", augmented=True)) == 27

    def test_parallel_write_is_identical(self, tmp_path):
        D.write_dataset(tmp_path / "a", 2, seed=5, height=16, jobs=1)
        D.write_dataset(tmp_path / "b", 2, seed=5, height=16, jobs=2)
        for rel in ["manifest.json", "scenes/scene_00001/aug_3.hdr"]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            D.read_manifest(tmp_path)

    def test_zero_scenes(self, tmp_path):
        with pytest.raises(ValueError):
            D.write_dataset(tmp_path, 0)

    def test_in_memory_pairs(self):
        ds = D.synthetic_pairs(2, seed=0, height=16)
        assert len(ds) == 18
        again = D.synthetic_pairs(2, seed=0, height=16)
        np.testing.assert_array_equal(ds.inputs, again.inputs)
