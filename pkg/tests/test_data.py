import json

import numpy as np
import pytest

from odin import netpbm
from odin.data import (
    SceneConfig,
    VideoConfig,
    generate_scene,
    generate_video,
    load_dataset,
    load_video_dataset,
    write_dataset,
    write_video_dataset,
)


def shift(mask, dy, dx):
    """Translate a boolean mask, filling vacated cells with False."""
    out = np.zeros_like(mask)
    h, w = mask.shape
    out[max(0, dy) : h + min(0, dy), max(0, dx) : w + min(0, dx)] = mask[
        max(0, -dy) : h + min(0, -dy), max(0, -dx) : w + min(0, -dx)
    ]
    return out


class TestNetpbm:
    def test_white_pixel_bytes(self):
        assert netpbm.encode_ppm(np.ones((1, 1, 3))) == b"P6\n1 1\n255\n\xff\xff\xff"

    def test_labelmap_round_trip(self, tmp_path):
        labels = np.random.default_rng(0).integers(0, 255, size=(7, 5))
        netpbm.write_labelmap(tmp_path / "a.pgm", labels)
        np.testing.assert_array_equal(netpbm.read_labelmap(tmp_path / "a.pgm"), labels)

    def test_image_round_trip_quantization(self, tmp_path):
        img = np.random.default_rng(1).random((6, 9, 3))
        netpbm.write_image(tmp_path / "a.ppm", img)
        once = netpbm.read_image(tmp_path / "a.ppm")
        assert np.abs(once - img).max() <= 1 / 255
        netpbm.write_image(tmp_path / "b.ppm", once)
        assert netpbm.read_image(tmp_path / "b.ppm").tobytes() == once.tobytes()

    def test_unsupported_maxval(self):
        with pytest.raises(netpbm.NetpbmError, match="maxval"):
            netpbm.decode_ppm(b"P6\n1 1\n65535\n" + b"\x00" * 6)

    def test_truncated_payload_names_offset(self):
        with pytest.raises(netpbm.NetpbmError, match="byte"):
            netpbm.decode_pgm(b"P5\n4 4\n255\n" + b"\x00" * 10)

    @pytest.mark.parametrize("buf", [b"P3\n1 1\n255\n", b"P6\nx 1\n255\n", b"P6\n0 1\n255\n\x00"])
    def test_malformed_header(self, buf):
        with pytest.raises(netpbm.NetpbmError, match="byte"):
            netpbm.decode_ppm(buf)

    def test_comments_in_header(self):
        img = netpbm.decode_pgm(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
        np.testing.assert_array_equal(img, [[1, 2]])

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            netpbm.encode_pgm(np.full((2, 2), 255))


class TestScenes:
    def test_deterministic(self):
        a, b = generate_scene(7), generate_scene(7)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.instance_masks.tobytes() == b.instance_masks.tobytes()
        assert a.class_ids == b.class_ids

    def test_single_object(self):
        scene = generate_scene(3, SceneConfig(min_objects=1, max_objects=1))
        assert len(scene.instance_masks) == 1

    @pytest.mark.parametrize("seed", range(20))
    def test_partition_by_pixel_scan(self, seed):
        scene = generate_scene(seed)
        H, W = scene.image.shape[:2]
        background = 0
        for y in range(H):
            for x in range(W):
                owners = [t for t, m in enumerate(scene.instance_masks) if m[y, x]]
                assert len(owners) <= 1
                background += not owners
        areas = [int(m.sum()) for m in scene.instance_masks]
        assert all(a >= 1 for a in areas)
        assert sum(areas) + background == H * W
        assert 0.0 <= scene.image.min() and scene.image.max() <= 1.0

    def test_class_ids_follow_shape_kind(self):
        scene = generate_scene(0, SceneConfig(shape_kinds=("triangle",), min_objects=2, max_objects=2))
        assert scene.class_ids == [3, 3]

    @pytest.mark.parametrize("kw", [{"H": 16}, {"min_objects": 0}, {"min_objects": 3, "max_objects": 2},
                                    {"shape_kinds": ("hexagon",)}])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            generate_scene(0, SceneConfig(**kw))


class TestVideos:
    def test_static_video(self):
        video = generate_video(4, VideoConfig(frames=3, max_step_px=0))
        for frame in video.frames[1:]:
            assert frame.image.tobytes() == video.frames[0].image.tobytes()
        np.testing.assert_array_equal(video.first_frame_labels, video.frames[0].labels)

    def test_deterministic(self):
        a, b = generate_video(9), generate_video(9)
        for fa, fb in zip(a.frames, b.frames):
            assert fa.image.tobytes() == fb.image.tobytes()

    @pytest.mark.parametrize("seed", range(5))
    def test_single_object_translates(self, seed):
        cfg = VideoConfig(frames=2, max_step_px=3, scene=SceneConfig(min_objects=1, max_objects=1))
        video = generate_video(seed, cfg)
        m0, m1 = video.frames[0].instance_masks[0], video.frames[1].instance_masks[0]
        matches = [(dy, dx) for dy in range(-3, 4) for dx in range(-3, 4) if np.array_equal(shift(m0, dy, dx), m1)]
        assert matches, "frame-1 mask is not a translate of frame 0 by at most 3 px"

    def test_identity_preserved(self):
        video = generate_video(2, VideoConfig(frames=5, max_step_px=2))
        counts = {len(f.instance_masks) for f in video.frames}
        assert counts == {len(video.frames[0].class_ids)}
        assert all(f.class_ids == video.frames[0].class_ids for f in video.frames)
        for t in range(len(video.frames) - 1):
            for a, b in zip(video.frames[t].instance_masks, video.frames[t + 1].instance_masks):
                assert (a & b).sum() > 0

    def test_needs_two_frames(self):
        with pytest.raises(ValueError):
            generate_video(0, VideoConfig(frames=1))


class TestDatasetLayout:
    def test_scene_dataset(self, tmp_path):
        digest = write_dataset(tmp_path / "d", n=4, seed=1)
        assert sorted(p.name for p in (tmp_path / "d" / "img").iterdir()) == [f"0000{i}.ppm" for i in range(4)]
        assert len(list((tmp_path / "d" / "mask").iterdir())) == 4
        meta = json.loads((tmp_path / "d" / "meta.json").read_text(encoding="utf-8"))
        assert meta["seed"] == 1 and len(meta["classes"]) == 4
        ids, scenes = load_dataset(tmp_path / "d")
        assert ids == ["00000", "00001", "00002", "00003"]
        original = generate_scene(1 * 1_000_003 + 2)
        np.testing.assert_array_equal(scenes[2].instance_masks, original.instance_masks)
        assert write_dataset(tmp_path / "e", n=4, seed=1) == digest

    def test_video_dataset(self, tmp_path):
        write_video_dataset(tmp_path / "v", n=2, seed=0, config=VideoConfig(frames=3))
        assert (tmp_path / "v" / "00001" / "frame_002.ppm").exists()
        ids, videos = load_video_dataset(tmp_path / "v")
        assert len(videos) == 2 and len(videos[0].frames) == 3
