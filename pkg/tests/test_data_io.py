import numpy as np
import pytest

from flowvos.data_io import (DataFormatError, SequenceMeta, ShapeSpec, SynthScene,
                             generate_suite, generate_synthetic, load_sequence,
                             random_scene, read_flo, read_meta, read_pgm, read_ppm,
                             write_flo, write_meta, write_pgm, write_ppm)
from flowvos.flow_embed import FlowField


class TestFlo:
    def test_roundtrip(self, tmp_path, rng):
        uv = rng.standard_normal((2, 7, 5)) * 12.3
        p = tmp_path / "f.flo"
        write_flo(p, FlowField(uv))
        back = read_flo(p).uv
        assert np.max(np.abs(back - uv)) <= np.max(np.spacing(uv.astype(np.float32)))

    def test_wrong_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.flo"
        p.write_bytes(b"\x00\x00\x00\x00" + b"\x01\x00\x00\x00" * 2 + b"\x00" * 8)
        with pytest.raises(DataFormatError, match="bad magic.*byte offset 0"):
            read_flo(p)

    def test_truncated_rejected(self, tmp_path):
        p = tmp_path / "cut.flo"
        write_flo(p, FlowField(np.zeros((2, 4, 4))))
        p.write_bytes(p.read_bytes()[:30])
        with pytest.raises(DataFormatError, match="truncated payload at byte offset 30"):
            read_flo(p)

    def test_2x2_is_44_bytes(self, tmp_path):
        p = tmp_path / "tiny.flo"
        write_flo(p, FlowField(np.ones((2, 2, 2))))
        assert p.stat().st_size == 12 + 32

    def test_layout_is_interleaved_row_major(self, tmp_path):
        uv = np.zeros((2, 1, 2))
        uv[0, 0] = [1.0, 3.0]
        uv[1, 0] = [2.0, 4.0]
        p = tmp_path / "lay.flo"
        write_flo(p, FlowField(uv))
        raw = np.frombuffer(p.read_bytes()[12:], dtype="<f4")
        np.testing.assert_array_equal(raw, [1.0, 2.0, 3.0, 4.0])


class TestPnm:
    def test_ppm_roundtrip(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(3, 6, 9), dtype=np.uint8)
        p = tmp_path / "i.ppm"
        write_ppm(p, img)
        np.testing.assert_array_equal(read_ppm(p), img)

    def test_pgm_roundtrip(self, tmp_path, rng):
        img = rng.integers(0, 4, size=(5, 8), dtype=np.uint8)
        p = tmp_path / "m.pgm"
        write_pgm(p, img)
        np.testing.assert_array_equal(read_pgm(p), img)

    def test_pgm_magic_check(self, tmp_path):
        p = tmp_path / "x.pgm"
        p.write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 12)
        with pytest.raises(DataFormatError, match="expected P5"):
            read_pgm(p)

    def test_header_comments_tolerated(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# a comment\n2 2\n255\n" + bytes([1, 2, 3, 4]))
        np.testing.assert_array_equal(read_pgm(p), [[1, 2], [3, 4]])


class TestMeta:
    def test_roundtrip(self, tmp_path):
        m = SequenceMeta(width=32, height=24, frames=7, objects=2,
                         categories={1: "twin", 2: "twin"})
        p = tmp_path / "meta"
        write_meta(p, m)
        assert read_meta(p) == m

    def test_missing_key(self, tmp_path):
        p = tmp_path / "meta"
        p.write_text("width=3\nheight=3\nframes=2\n")
        with pytest.raises(DataFormatError, match="missing meta key objects"):
            read_meta(p)


def translating_disk(frames=5, velocity=(2, 0)):
    return SynthScene(
        width=48, height=32, frames=frames, seed=7,
        shapes=[ShapeSpec("disk", (5,), (0.9, 0.4, 0.2), start=(12, 16),
                          velocity=velocity, textured=False)],
        background="flat")


class TestGenerator:
    def test_translating_disk_flow_exact(self, tmp_path):
        generate_synthetic(translating_disk(), tmp_path / "s")
        seq = load_sequence(tmp_path / "s")
        for t in range(1, 5):
            inside = seq.masks[t - 1] == 1
            assert inside.any()
            np.testing.assert_array_equal(seq.flows[t].uv[0][inside], 2.0)
            np.testing.assert_array_equal(seq.flows[t].uv[1][inside], 0.0)
            np.testing.assert_array_equal(seq.flows[t].uv[:, ~inside], 0.0)
        # frame 0 carries the forward flow 0 -> 1
        inside0 = seq.masks[0] == 1
        np.testing.assert_array_equal(seq.flows[0].uv[0][inside0], 2.0)

    def test_static_scene_zero_flow(self, tmp_path):
        generate_synthetic(translating_disk(velocity=(0, 0)), tmp_path / "s")
        seq = load_sequence(tmp_path / "s")
        for fl in seq.flows:
            np.testing.assert_array_equal(fl.uv, 0.0)

    def test_crossing_twins_depth_order(self, tmp_path):
        scene = SynthScene(
            width=64, height=32, frames=9, seed=3,
            shapes=[
                ShapeSpec("rect", (10, 10), (0.8, 0.8, 0.8), start=(16, 16),
                          velocity=(3, 0), textured=False, bounce=False),
                ShapeSpec("rect", (10, 10), (0.8, 0.8, 0.8), start=(44, 16),
                          velocity=(-3, 0), textured=False, bounce=False),
            ],
            background="flat")
        generate_synthetic(scene, tmp_path / "cross")
        seq = load_sequence(tmp_path / "cross")
        overlapped = False
        for t in range(9):
            m = seq.masks[t]
            assert set(np.unique(m)) <= {0, 1, 2}
            cx1 = 16 + 3 * t
            cx2 = 44 - 3 * t
            if abs(cx1 - cx2) <= 10:   # rects overlap: front object (index 2) wins
                overlap_cols = (np.abs(np.arange(64) - cx1) <= 5) \
                    & (np.abs(np.arange(64) - cx2) <= 5)
                assert (m[16, overlap_cols] == 2).all()
                overlapped = True
        assert overlapped

    def test_generate_load_roundtrip_exact(self, tmp_path):
        scene = random_scene(48, 32, 6, 2, seed=11)
        root = generate_synthetic(scene, tmp_path / "s")
        seq = load_sequence(root)
        img0 = read_ppm(root / "frames" / "00000.ppm")
        np.testing.assert_array_equal(seq.images[0], img0.astype(np.float64) / 255.0)

    def test_determinism_per_seed(self, tmp_path):
        scene = random_scene(40, 40, 5, 2, seed=99, distractors=True)
        a = generate_synthetic(scene, tmp_path / "a")
        b = generate_synthetic(scene, tmp_path / "b")
        for sub in ("frames/00003.ppm", "flows/00003.flo", "masks/00003.pgm"):
            assert (a / sub).read_bytes() == (b / sub).read_bytes()

    def test_distractor_twins_share_appearance(self, tmp_path):
        scene = random_scene(64, 64, 4, 2, seed=5, distractors=True)
        assert scene.shapes[0].color == scene.shapes[1].color
        assert scene.shapes[0].texture_seed == scene.shapes[1].texture_seed
        assert scene.shapes[0].velocity != scene.shapes[1].velocity

    def test_zero_objects_rejected(self, tmp_path):
        scene = SynthScene(width=8, height=8, frames=2, seed=0, shapes=[])
        with pytest.raises(ValueError, match="at least one object"):
            generate_synthetic(scene, tmp_path / "z")


class TestLoadSequence:
    def test_missing_flow_named(self, tmp_path):
        root = generate_synthetic(translating_disk(), tmp_path / "s")
        (root / "flows" / "00002.flo").unlink()
        with pytest.raises(DataFormatError, match="00002.flo.*frame index 2"):
            load_sequence(root)

    def test_meta_count_mismatch_rejected(self, tmp_path):
        root = generate_synthetic(translating_disk(), tmp_path / "s")
        meta = read_meta(root / "meta")
        meta.frames = 4
        write_meta(root / "meta", meta)
        with pytest.raises(DataFormatError, match="frame count 4"):
            load_sequence(root)

    def test_images_normalized(self, tmp_path):
        root = generate_synthetic(translating_disk(), tmp_path / "s")
        seq = load_sequence(root)
        assert seq.images[0].dtype == np.float64
        assert 0.0 <= seq.images[0].min() and seq.images[0].max() <= 1.0


def test_generate_suite(tmp_path):
    paths = generate_suite(tmp_path, count=3, width=32, height=32, frames=4,
                           objects=2, seed=42, distractors=True)
    assert len(paths) == 3
    for p in paths:
        seq = load_sequence(p)
        assert seq.meta.objects == 2
