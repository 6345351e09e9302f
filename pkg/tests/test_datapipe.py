import numpy as np
import pytest

from panosynth.datapipe import (
    DataError,
    SceneSpec,
    augment_rotations,
    build_corpus,
    build_pairs,
    load_corpus_pano,
    load_pairs,
    load_scene_spec,
    make_split,
    random_scene_spec,
    read_manifest,
    save_pairs,
    synth_pano,
    synth_patch,
)
from panosynth.embedding import toy_image_embed
from panosynth.raster import LdrImage, reinhard_tonemap, resample_area
from panosynth.sritmo import PatchExtent
from panosynth.sphere import sphere_to_pixel


def spec_with_sun(radiance=50.0):
    return SceneSpec(
        scene_class="sun-disk",
        palette=(("azure", (0.25, 0.45, 0.85)), ("amber", (0.9, 0.65, 0.25))),
        sun_theta=0.5,
        sun_phi=-0.8,
        sun_radiance=radiance,
    )


def spec_no_sun():
    return SceneSpec(
        scene_class="sky-gradient",
        palette=(("teal", (0.2, 0.65, 0.6)), ("slate", (0.35, 0.4, 0.5))),
    )


class TestSynthPano:
    def test_sun_radiance_reached(self):
        pano = synth_pano(spec_with_sun(50.0), 64, 128)
        assert pano.pixels.max() == pytest.approx(50.0, rel=0.02)

    def test_no_sun_stays_ldr_range(self):
        pano = synth_pano(spec_no_sun(), 64, 128)
        assert pano.pixels.max() <= 1.0

    def test_deterministic(self):
        a = synth_pano(spec_with_sun(), 64, 128)
        b = synth_pano(spec_with_sun(), 64, 128)
        assert np.array_equal(a.pixels, b.pixels)

    def test_aspect_enforced(self):
        with pytest.raises(DataError):
            synth_pano(spec_no_sun(), 64, 100)

    def test_sun_radiance_floor_enforced(self):
        with pytest.raises(DataError):
            SceneSpec(
                scene_class="sun-disk",
                palette=(("azure", (0.2, 0.4, 0.8)), ("amber", (0.9, 0.6, 0.2))),
                sun_radiance=0.5,
            )

    def test_every_class_synthesizes(self, rng):
        for cls in ("sky-gradient", "sun-disk", "interior-lamp", "checker-ground"):
            spec = random_scene_spec(rng, cls)
            pano = synth_pano(spec, 32, 64)
            assert np.all(np.isfinite(pano.pixels))
            assert spec.text_tag

    def test_synth_patch_matches_pano_crop(self):
        spec = spec_with_sun()
        pano = synth_pano(spec, 64, 128)
        ext = PatchExtent((64, 128), (8, 16), (24, 24))
        patch = synth_patch(spec, ext, (24, 24))
        crop = pano.pixels[8:32, 16:40]
        assert np.allclose(patch.pixels, crop, atol=1e-5)


class TestBuildPairs:
    def test_beta_one_is_identity_downsample(self, rng):
        pano = synth_pano(spec_no_sun(), 64, 128)
        pairs = build_pairs(pano, 3, rng, base=16, beta_range=(1.0, 1.0))
        ldr = reinhard_tonemap(pano)
        for p in pairs:
            assert p.beta == 1.0
            oi, oj = p.extent.origin
            crop = ldr.pixels[oi : oi + 16, oj : oj + 16]
            assert np.allclose(p.ldr_lr.pixels, crop, atol=1e-7)

    def test_downsample_reproduces_input(self, rng):
        pano = synth_pano(spec_with_sun(), 64, 128)
        pairs = build_pairs(pano, 4, rng, base=16)
        ldr = reinhard_tonemap(pano)
        for p in pairs:
            oi, oj = p.extent.origin
            crop_size = p.extent.size[0]
            hr = LdrImage(ldr.pixels[oi : oi + crop_size, oj : oj + crop_size])
            again = resample_area(hr, 16, 16)
            assert np.allclose(p.ldr_lr.pixels, again.pixels, atol=1e-6)

    def test_scale_arithmetic(self, rng):
        pano = synth_pano(spec_no_sun(), 128, 256)
        pairs = build_pairs(pano, 5, rng, base=32, beta_range=(4.0, 4.0))
        for p in pairs:
            assert p.extent.size == (128, 128)
            assert p.ldr_lr.pixels.shape == (32, 32, 3)

    def test_sample_coords_inside_crop(self, rng):
        pano = synth_pano(spec_with_sun(), 64, 128)
        for p in build_pairs(pano, 4, rng, base=16):
            i, j = sphere_to_pixel((p.theta, p.phi), 64, 128)
            oi, oj = p.extent.origin
            crop = p.extent.size[0]
            assert np.all(i >= oi - 0.5) and np.all(i <= oi + crop - 0.5)
            assert np.all(j >= oj - 0.5) and np.all(j <= oj + crop - 0.5)

    def test_samples_without_replacement(self, rng):
        pano = synth_pano(spec_no_sun(), 64, 128)
        for p in build_pairs(pano, 2, rng, base=16, beta_range=(1.0, 1.0)):
            flat = p.sample_ij[:, 0] * 128 + p.sample_ij[:, 1]
            assert len(np.unique(flat)) == len(flat)

    def test_calibration_failure_skips(self, rng):
        from panosynth.raster import HdrImage

        bright = HdrImage(np.full((16, 32, 3), 100.0))
        assert build_pairs(bright, 3, rng, base=8) == []

    def test_calibration_identity_policy(self, rng):
        from panosynth.raster import HdrImage

        bright = HdrImage(np.full((16, 32, 3), 100.0))
        pairs = build_pairs(bright, 2, rng, base=8, calib_policy="identity")
        assert len(pairs) == 2
        assert np.allclose(pairs[0].hdr, 100.0)

    def test_deterministic_per_seed(self):
        pano = synth_pano(spec_with_sun(), 64, 128)
        a = build_pairs(pano, 3, np.random.default_rng(9), base=16)
        b = build_pairs(pano, 3, np.random.default_rng(9), base=16)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.ldr_lr.pixels, pb.ldr_lr.pixels)
            assert np.array_equal(pa.hdr, pb.hdr)
            assert pa.extent == pb.extent


class TestRotations:
    def test_even_spacing_and_identity_drop(self):
        pano = synth_pano(spec_no_sun(), 50, 100)
        rots = augment_rotations(pano, copies=10)
        shifts = [s for s, _ in rots]
        assert shifts == [10, 20, 30, 40, 50, 60, 70, 80, 90]

    def test_pixel_multiset_preserved(self):
        pano = synth_pano(spec_with_sun(), 32, 64)
        for _, img in augment_rotations(pano, 4):
            assert np.allclose(
                np.sort(img.pixels.ravel()), np.sort(pano.pixels.ravel())
            )

    def test_no_compounding(self):
        pano = synth_pano(spec_no_sun(), 32, 64)
        rots = augment_rotations(pano, 4)
        assert len(rots) == 3  # 16, 32, 48; shift 64 == identity dropped


class TestSplit:
    def test_eight_two_split(self):
        ids = [f"s{i}" for i in range(10)]
        train, test = make_split(ids, 0.8, seed=1)
        assert len(train) == 8 and len(test) == 2
        assert set(train) | set(test) == set(ids)
        assert not set(train) & set(test)

    def test_deterministic(self):
        ids = [f"s{i}" for i in range(10)]
        assert make_split(ids, 0.7, 3) == make_split(ids, 0.7, 3)

    def test_single_scene_rejected(self):
        with pytest.raises(DataError):
            make_split(["only"], 0.5, 0)

    def test_full_train_allowed(self):
        train, test = make_split(["a", "b"], 1.0, 0)
        assert len(train) == 2 and not test


class TestCorpusAndArchive:
    def test_corpus_layout_and_rotation_grouping(self, tmp_path):
        entries = build_corpus(tmp_path, n_scenes=4, pano_hw=(32, 64), seed=0,
                               rotations=3, train_frac=0.75)
        assert (tmp_path / "manifest.txt").exists()
        back = read_manifest(tmp_path / "manifest.txt")
        assert len(back) == len(entries)
        by_scene = {}
        for e in back:
            by_scene.setdefault(e.scene_id, set()).add(e.split)
        # all rotations of a scene stay on one side of the split
        assert all(len(v) == 1 for v in by_scene.values())
        splits = {next(iter(v)) for v in by_scene.values()}
        assert splits == {"train", "test"}
        for sid in by_scene:
            assert (tmp_path / "scenes" / f"{sid}.hdr").exists()
            assert (tmp_path / "ldr" / f"{sid}.png").exists()
            spec = load_scene_spec(tmp_path / "scenes" / f"{sid}.json")
            assert spec.text_tag

    def test_rotation_loading(self, tmp_path):
        build_corpus(tmp_path, n_scenes=2, pano_hw=(32, 64), seed=0, rotations=2,
                     train_frac=1.0)
        entries = read_manifest(tmp_path / "manifest.txt")
        rotated = [e for e in entries if e.shift][0]
        base = [e for e in entries if e.scene_id == rotated.scene_id and not e.shift][0]
        a = load_corpus_pano(tmp_path, base)
        b = load_corpus_pano(tmp_path, rotated)
        assert np.array_equal(np.roll(a.pixels, rotated.shift, axis=1), b.pixels)

    def test_pair_archive_roundtrip(self, tmp_path, rng):
        pano = synth_pano(spec_with_sun(), 64, 128)
        pairs = build_pairs(pano, 4, rng, base=16, source_id="s0:0")
        path = tmp_path / "pairs.bin"
        save_pairs(pairs, path)
        back = load_pairs(path)
        assert len(back) == len(pairs)
        for a, b in zip(pairs, back):
            assert np.array_equal(
                a.ldr_lr.pixels.astype(np.float32), b.ldr_lr.pixels.astype(np.float32)
            )
            assert np.array_equal(a.sample_ij, b.sample_ij)
            assert np.allclose(a.theta, b.theta, atol=1e-12)
            assert np.allclose(a.hdr, b.hdr, atol=1e-6)
            assert a.extent == b.extent
            assert a.source_id == b.source_id

    def test_archive_truncation_detected(self, tmp_path, rng):
        pano = synth_pano(spec_no_sun(), 32, 64)
        pairs = build_pairs(pano, 2, rng, base=8)
        path = tmp_path / "pairs.bin"
        save_pairs(pairs, path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(DataError, match="record 1"):
            load_pairs(path)


class TestClassSeparation:
    def test_within_class_embeddings_closer(self, rng):
        # the toy image embedder must separate the procedural classes
        sims = {"within": [], "across": []}
        panos = {}
        for cls in ("sky-gradient", "sun-disk", "interior-lamp", "checker-ground"):
            panos[cls] = [
                toy_image_embed(
                    resample_area(
                        reinhard_tonemap(synth_pano(random_scene_spec(rng, cls), 32, 64)),
                        16, 32,
                    )
                )
                for _ in range(4)
            ]
        for cls, embs in panos.items():
            for i in range(len(embs)):
                for j in range(i + 1, len(embs)):
                    sims["within"].append(float(embs[i] @ embs[j]))
            for other, oembs in panos.items():
                if other <= cls:
                    continue
                for a in embs:
                    for b in oembs:
                        sims["across"].append(float(a @ b))
        assert np.mean(sims["within"]) > np.mean(sims["across"])
