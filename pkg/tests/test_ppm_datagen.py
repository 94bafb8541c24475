import filecmp
import math
import os

import numpy as np
import pytest

from noisedge.datagen import (compose_forgery, gaussian_blur, gaussian_kernel_1d,
                              generate_dataset, quantize, read_manifest,
                              toy_background, toy_object_mask, toy_object_texture,
                              write_manifest)
from noisedge.ppm import (PpmError, read_mask, read_pgm, read_ppm, write_mask,
                          write_pgm, write_ppm)


class TestPpm:
    def test_ppm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(13, 7, 3), dtype=np.uint8)
        path = tmp_path / "a.ppm"
        write_ppm(path, img)
        assert np.array_equal(read_ppm(path), img)

    def test_pgm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        gray = rng.integers(0, 256, size=(5, 9), dtype=np.uint8)
        path = tmp_path / "a.pgm"
        write_pgm(path, gray)
        assert np.array_equal(read_pgm(path), gray)

    def test_mask_roundtrip_values(self, tmp_path):
        mask = np.zeros((4, 4), dtype=bool)
        mask[1:3, 1:3] = True
        path = tmp_path / "m.pgm"
        write_mask(path, mask)
        raw = read_pgm(path)
        assert set(np.unique(raw)) <= {0, 255}
        assert np.array_equal(read_mask(path), mask)

    def test_mask_binarizes_at_128(self, tmp_path):
        path = tmp_path / "m.pgm"
        with open(path, "wb") as fh:
            fh.write(b"P5\n2 2\n255\n" + bytes([0, 127, 128, 255]))
        assert read_mask(path).tolist() == [[False, False], [True, True]]

    def test_header_comments(self, tmp_path):
        path = tmp_path / "c.ppm"
        with open(path, "wb") as fh:
            fh.write(b"P6\n# made by hand\n2 # width\n1\n255\n" + bytes(6))
        assert read_ppm(path).shape == (1, 2, 3)

    def test_bad_magic_reports_position(self, tmp_path):
        path = tmp_path / "bad.ppm"
        with open(path, "wb") as fh:
            fh.write(b"P5\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(PpmError, match="byte 0"):
            read_ppm(path)
        with pytest.raises(PpmError, match="expected P6"):
            read_ppm(path)

    def test_truncated_data_reports_position(self, tmp_path):
        path = tmp_path / "short.ppm"
        with open(path, "wb") as fh:
            fh.write(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(PpmError, match="truncated at byte"):
            read_ppm(path)

    def test_non_numeric_header(self, tmp_path):
        path = tmp_path / "x.ppm"
        with open(path, "wb") as fh:
            fh.write(b"P6\nw 2\n255\n")
        with pytest.raises(PpmError, match="non-numeric"):
            read_ppm(path)

    def test_maxval_rejected(self, tmp_path):
        path = tmp_path / "x.pgm"
        with open(path, "wb") as fh:
            fh.write(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(PpmError, match="maxval"):
            read_pgm(path)

    def test_write_shape_validation(self, tmp_path):
        with pytest.raises(ValueError):
            write_ppm(tmp_path / "x.ppm", np.zeros((4, 4)))
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "x.pgm", np.zeros((4, 4, 3)))


class TestBlurQuantize:
    def test_kernel_size_rule(self):
        assert gaussian_kernel_1d(0.0).size == 1
        assert gaussian_kernel_1d(1.0).size == 7
        assert gaussian_kernel_1d(1.1).size == 2 * math.ceil(3 * 1.1) + 1

    def test_kernel_normalized_symmetric(self):
        k = gaussian_kernel_1d(1.7)
        assert abs(k.sum() - 1.0) < 1e-12
        assert np.allclose(k, k[::-1])

    def test_blur_constant_invariant(self):
        img = np.full((9, 9), 42.0)
        assert np.allclose(gaussian_blur(img, 2.0), img)

    def test_blur_matches_direct_convolution(self):
        rng = np.random.default_rng(7)
        img = rng.uniform(0, 255, size=(12, 10))
        sigma = 0.9
        k = gaussian_kernel_1d(sigma)
        r = k.size // 2
        padded = np.pad(img, r, mode="edge")
        expect = np.zeros_like(img)
        for dr in range(k.size):
            for dc in range(k.size):
                expect += k[dr] * k[dc] * padded[dr:dr + img.shape[0], dc:dc + img.shape[1]]
        assert np.allclose(gaussian_blur(img, sigma), expect, atol=1e-10)

    def test_blur_color_channels_independent(self):
        rng = np.random.default_rng(8)
        img = rng.uniform(0, 255, size=(8, 8, 3))
        out = gaussian_blur(img, 1.2)
        for c in range(3):
            assert np.allclose(out[:, :, c], gaussian_blur(img[:, :, c], 1.2))

    def test_quantize_identity_at_256(self):
        v = np.arange(256, dtype=np.uint8).reshape(16, 16)
        assert np.array_equal(quantize(v, 256), v)

    def test_quantize_two_levels(self):
        v = np.array([[0, 127, 128, 255]], dtype=np.uint8)
        assert quantize(v, 2).tolist() == [[64, 64, 192, 192]]

    def test_quantize_level_count(self):
        rng = np.random.default_rng(9)
        v = rng.integers(0, 256, size=(32, 32), dtype=np.uint8)
        assert len(np.unique(quantize(v, 5))) <= 5
        with pytest.raises(ValueError):
            quantize(v, 1)


def _rect_scene(size=16):
    rng = np.random.default_rng(3)
    dest = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    source = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    obj = np.zeros((size, size), dtype=bool)
    obj[2:6, 1:9] = True
    return dest, source, obj


class TestComposeForgery:
    def test_identity_copy_move_is_noop(self):
        dest, _, obj = _rect_scene()
        out, mask = compose_forgery(dest, dest, obj, rotation=0.0, scale=1.0)
        assert np.array_equal(out, dest)
        assert np.array_equal(mask, obj)

    def test_identity_splice_pastes_exact_pixels(self):
        dest, source, obj = _rect_scene()
        out, mask = compose_forgery(dest, source, obj)
        assert np.array_equal(mask, obj)
        assert np.array_equal(out[mask], source[obj])
        assert np.array_equal(out[~mask], dest[~obj])

    def test_rotation_90_exact(self):
        # Forward map for 90 degrees CCW about the bbox center (3.5, 4.5):
        # (r, c) -> (8 - c, 1 + r), derived by hand from the rotation matrix.
        dest, source, obj = _rect_scene()
        out, mask = compose_forgery(dest, source, obj, rotation=90.0)
        expect = np.zeros_like(obj)
        for r in range(2, 6):
            for c in range(1, 9):
                expect[8 - c, 1 + r] = True
        assert np.array_equal(mask, expect)
        for r in range(2, 6):
            for c in range(1, 9):
                assert np.array_equal(out[8 - c, 1 + r], source[r, c])

    def test_rotation_360_matches_identity(self):
        dest, source, obj = _rect_scene()
        out0, mask0 = compose_forgery(dest, source, obj)
        out1, mask1 = compose_forgery(dest, source, obj, rotation=360.0)
        assert np.array_equal(out0, out1)
        assert np.array_equal(mask0, mask1)

    def test_translation_copy_move_duplicates_texture(self):
        dest, _, _ = _rect_scene()
        obj = np.zeros((16, 16), dtype=bool)
        obj[2:5, 1:8] = True  # odd extents so the bbox center is integral
        out, mask = compose_forgery(dest, dest, obj, paste=(9.0, 8.0))
        expect = np.zeros_like(obj)
        expect[8:11, 5:12] = True
        assert np.array_equal(mask, expect)
        assert np.array_equal(out[mask], dest[obj])

    def test_scale_two_grows_support(self):
        dest, source, obj = _rect_scene()
        _, mask = compose_forgery(dest, source, obj, scale=2.0, paste=(8.0, 8.0))
        assert mask.sum() > obj.sum()

    def test_changed_pixels_inside_mask_without_blur(self):
        dest, source, obj = _rect_scene()
        out, mask = compose_forgery(dest, source, obj)
        changed = (out != dest).any(axis=2)
        assert not (changed & ~mask).any()

    def test_boundary_blur_stays_near_edge(self):
        dest, source, obj = _rect_scene()
        plain, mask = compose_forgery(dest, source, obj)
        blurred, mask_b = compose_forgery(dest, source, obj, blur_sigma=1.0)
        assert np.array_equal(mask, mask_b)
        diff = (plain != blurred).any(axis=2)
        # interior of the pasted rectangle is untouched by the boundary band
        assert not diff[3:5, 2:8].any()
        assert diff.any()

    def test_empty_object_rejected(self):
        dest, source, _ = _rect_scene()
        with pytest.raises(ValueError, match="empty"):
            compose_forgery(dest, source, np.zeros((16, 16), dtype=bool))

    def test_offcanvas_paste_rejected(self):
        dest, source, obj = _rect_scene()
        with pytest.raises(ValueError, match="outside the canvas"):
            compose_forgery(dest, source, obj, paste=(200.0, 200.0))

    def test_partial_overlap_clamps(self):
        dest, source, obj = _rect_scene()
        out, mask = compose_forgery(dest, source, obj, paste=(0.0, 0.0))
        assert mask.any() and mask.sum() < obj.sum()
        assert out.shape == dest.shape

    def test_shape_validation(self):
        dest, source, obj = _rect_scene()
        with pytest.raises(ValueError, match="does not match"):
            compose_forgery(dest, source, obj[:8, :8])
        with pytest.raises(ValueError, match="scale"):
            compose_forgery(dest, source, obj, scale=0.0)


class TestToySources:
    def test_background_smooth_object_textured(self):
        rng = np.random.default_rng(11)
        highpass = lambda img: np.abs(np.diff(img.astype(np.float64), axis=0)).mean()
        bg = [highpass(toy_background(np.random.default_rng(s), 64)) for s in range(5)]
        tex = [highpass(toy_object_texture(np.random.default_rng(s), 64)) for s in range(5)]
        assert max(bg) < min(tex)

    def test_object_mask_nonempty_and_bounded(self):
        for s in range(10):
            m = toy_object_mask(np.random.default_rng(s), 64)
            assert m.any()
            assert 0.005 < m.mean() < 0.5


class TestGenerateDataset:
    def test_outputs_and_manifest(self, tmp_path):
        out = tmp_path / "d"
        manifest = generate_dataset(out, 6, size=32, seed=5)
        rows = read_manifest(manifest)
        assert len(rows) == 6
        for row in rows:
            img = read_ppm(out / row["image_path"])
            mask = read_mask(out / row["mask_path"])
            assert img.shape == (32, 32, 3)
            assert mask.shape == (32, 32)
            assert mask.any()
        params = (out / "gen_params.csv").read_text().strip().splitlines()
        assert params[0].startswith("index,seed,kind,rotation_deg")
        assert len(params) == 7

    def test_deterministic_across_runs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_dataset(a, 4, size=32, seed=9)
        generate_dataset(b, 4, size=32, seed=9)
        for sub in ("images", "masks"):
            names = sorted(os.listdir(a / sub))
            assert names == sorted(os.listdir(b / sub))
            for n in names:
                assert filecmp.cmp(a / sub / n, b / sub / n, shallow=False)
        assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()
        assert (a / "gen_params.csv").read_bytes() == (b / "gen_params.csv").read_bytes()

    def test_seed_changes_content(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_dataset(a, 2, size=32, seed=1)
        generate_dataset(b, 2, size=32, seed=2)
        assert not filecmp.cmp(a / "images" / "00000.ppm", b / "images" / "00000.ppm",
                               shallow=False)

    def test_external_sources(self, tmp_path):
        src_dir = tmp_path / "src"
        src_dir.mkdir()
        rng = np.random.default_rng(0)
        paths = []
        for i in range(3):
            p = src_dir / f"s{i}.ppm"
            write_ppm(p, rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8))
            paths.append(str(p))
        out = tmp_path / "d"
        manifest = generate_dataset(out, 4, size=32, seed=0, image_paths=paths)
        assert len(read_manifest(manifest)) == 4

    def test_empty_lists_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="image list is empty"):
            generate_dataset(tmp_path / "d", 1, image_paths=[])
        with pytest.raises(ValueError, match="object mask list is empty"):
            generate_dataset(tmp_path / "d", 1, object_paths=[])
        with pytest.raises(ValueError, match="count"):
            generate_dataset(tmp_path / "d", 0)

    def test_manifest_roundtrip_with_edges(self, tmp_path):
        rows = [{"image_path": "images/a.ppm", "mask_path": "masks/a.pgm",
                 "edge_path": "edges/a.pgm"}]
        path = tmp_path / "m.csv"
        write_manifest(path, rows)
        back = read_manifest(path)
        assert back == rows

    def test_manifest_missing_columns(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("image_path\nx.ppm\n")
        with pytest.raises(ValueError, match="mask_path"):
            read_manifest(path)
