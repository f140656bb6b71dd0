"""Synthetic corpus: container IO, determinism, signatures, preprocessing."""

import numpy as np
import pytest

from padkit.datasyn import (
    ContainerError,
    SynthConfig,
    build_manifest,
    depth_plane_residual,
    load_video,
    prepare_clip,
    preprocess,
    synth_dataset,
    temporal_variance,
    write_video,
)
from padkit.dynimg import FrameSequence, RankPoolConfig, dynamic_image_at


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    cfg = SynthConfig(subjects_per_ethnicity=3, clip_len=10, frame_size=16, seed=11)
    manifest_path, entries = synth_dataset(cfg, out)
    return out, cfg, entries


class TestContainer:
    def test_roundtrip_u8(self, tmp_path):
        rng = np.random.default_rng(0)
        frames = rng.uniform(size=(5, 8, 8, 3))
        path = tmp_path / "c.vid"
        write_video(path, frames, "color", "u8")
        seq = load_video(path)
        assert seq.modality == "color"
        assert seq.peak == 255.0
        quantized = np.floor(frames * 255.0 + 0.5)
        np.testing.assert_array_equal(seq.frames, quantized)

    def test_roundtrip_f64_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        frames = rng.normal(size=(4, 6, 6, 1))
        path = tmp_path / "d.vid"
        write_video(path, frames, "depth", "f64")
        seq = load_video(path)
        assert seq.peak == 1.0
        np.testing.assert_array_equal(seq.frames, frames)

    def test_modality_tag(self, tmp_path):
        path = tmp_path / "i.vid"
        write_video(path, np.zeros((2, 4, 4, 1)), "ir")
        assert load_video(path).modality == "ir"

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "t.vid"
        write_video(path, np.zeros((3, 4, 4, 1)), "depth")
        raw = path.read_bytes()
        path.write_bytes(raw[:-3])
        with pytest.raises(ContainerError, match="truncated"):
            load_video(path)

    def test_garbage_rejected(self, tmp_path):
        path = tmp_path / "g.vid"
        path.write_bytes(b"not a container at all")
        with pytest.raises(ContainerError):
            load_video(path)


class TestPreprocess:
    def test_identity_geometry(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 255, size=(112, 112, 3))
        out = preprocess(img, 112)
        np.testing.assert_allclose(out, img / 255.0)

    def test_full_scale_maps_to_one(self):
        out = preprocess(np.full((8, 8, 1), 255.0), 8)
        np.testing.assert_array_equal(out, np.ones((8, 8, 1)))

    def test_downscale_preserves_mean(self):
        yy, xx = np.mgrid[0:224, 0:224]
        checker = (((yy // 8) + (xx // 8)) % 2).astype(np.float64) * 255.0
        out = preprocess(checker[:, :, None], 112)
        assert out.shape == (112, 112, 1)
        assert abs(out.mean() - checker.mean() / 255.0) <= 1e-6


class TestSynthDataset:
    def test_manifest_matches_requested_shape(self, small_corpus):
        _, cfg, entries = small_corpus
        assert len(entries) == 3 * cfg.subjects_per_ethnicity * 4 * 3
        assert all((_ := e).path.endswith(".vid") for e in entries)

    def test_seed_determinism_bytes(self, tmp_path):
        cfg = SynthConfig(subjects_per_ethnicity=1, clip_len=8, frame_size=12, seed=5)
        m1, e1 = synth_dataset(cfg, tmp_path / "a")
        m2, e2 = synth_dataset(cfg, tmp_path / "b")
        assert m1.read_bytes() == m2.read_bytes()
        for entry in e1:
            assert ((tmp_path / "a" / entry.path).read_bytes()
                    == (tmp_path / "b" / entry.path).read_bytes())

    def test_print_clip_is_exactly_static(self, small_corpus):
        out, _, entries = small_corpus
        e = next(x for x in entries if x.attack_type == "print_outdoor" and x.modality == "R")
        seq = load_video(out / e.path)
        assert np.all(seq.frames == seq.frames[0])
        d = dynamic_image_at(seq, len(seq) - 1, RankPoolConfig(window=7))
        assert np.all(d.data == 0.0)

    def test_real_clip_has_motion_and_nonzero_dynamic_image(self, small_corpus):
        out, _, entries = small_corpus
        e = next(x for x in entries if x.attack_type == "real" and x.modality == "R")
        seq = load_video(out / e.path)
        assert temporal_variance(seq) > 1e-4
        d = dynamic_image_at(seq, len(seq) - 1, RankPoolConfig(window=7))
        assert np.abs(d.data).max() > 0.0

    def test_replay_flickers_in_color_not_depth(self, small_corpus):
        out, _, entries = small_corpus
        color = next(x for x in entries if x.attack_type == "replay" and x.modality == "R")
        depth = next(x for x in entries if x.attack_type == "replay" and x.modality == "D")
        assert temporal_variance(load_video(out / color.path)) > 1e-6
        depth_frames = load_video(out / depth.path).frames
        assert np.all(depth_frames == depth_frames[0])

    def test_linear_separability_in_planarity(self, small_corpus):
        # bona fide depth is a dome, every attack presents a plane: the two
        # classes separate by a threshold on the plane-fit residual alone
        out, _, entries = small_corpus
        real_resid, attack_resid = [], []
        for e in entries:
            if e.modality != "D":
                continue
            seq = load_video(out / e.path)
            resid = depth_plane_residual(seq.frames[len(seq.frames) // 2] / seq.peak)
            (real_resid if e.is_bonafide else attack_resid).append(resid)
        assert min(real_resid) > 10.0 * max(attack_resid)

    def test_prepare_clip_scales_to_unit(self, small_corpus):
        out, _, entries = small_corpus
        seq = load_video(out / entries[0].path)
        clip = prepare_clip(seq, 12)
        assert clip.shape[1:3] == (12, 12)
        assert clip.max() <= 1.0 and clip.min() >= 0.0

    def test_clip_len_must_cover_window(self):
        with pytest.raises(ValueError, match="window"):
            SynthConfig(clip_len=4, window=7)

    def test_manifest_without_disk(self):
        entries = build_manifest(SynthConfig(subjects_per_ethnicity=2))
        assert len(entries) == 2 * 3 * 4 * 3
        assert not any(e.is_3d for e in entries)
