import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from csvd.diagram import _extract_boundaries
from csvd.pixels import (
    GrayImage,
    SynthSpec,
    child_seed,
    dark_pixel_set,
    detect_edges,
    filter_response,
    load_gray,
    nearest_seed_labels,
    read_manifest,
    sample_seeds,
    save_gray,
    synth_batch,
    synth_structure,
)


def to_pixels(omega, width, height):
    """Recover integer (x, y) pixel coordinates from unit-square centers."""
    s = max(width, height)
    return np.rint(np.column_stack([omega.xs, omega.ys]) * s - 0.5).astype(int)


class TestLoadGray:
    def test_all_black_png(self, tmp_path):
        path = tmp_path / "black.png"
        Image.fromarray(np.zeros((4, 5, 3), np.uint8), "RGB").save(path)
        img = load_gray(path)
        assert (img.width, img.height) == (5, 4)
        assert np.all(img.values == 0.0)

    def test_all_white_png(self, tmp_path):
        path = tmp_path / "white.png"
        Image.fromarray(np.full((3, 3, 3), 255, np.uint8), "RGB").save(path)
        assert np.all(load_gray(path).values == 1.0)

    def test_rec601_weights_exact(self, tmp_path):
        # One pure-red and one pure-blue pixel pin the channel weights:
        # 255/255 * 0.299 and 255/255 * 0.114, bit-exactly.
        path = tmp_path / "rb.png"
        arr = np.array([[[255, 0, 0], [0, 0, 255]]], np.uint8)
        Image.fromarray(arr, "RGB").save(path)
        vals = load_gray(path).values
        assert vals.shape == (1, 2)
        assert vals[0, 0] == 0.299
        assert vals[0, 1] == 0.114

    def test_green_weight(self, tmp_path):
        path = tmp_path / "g.png"
        Image.fromarray(np.array([[[0, 255, 0]]], np.uint8), "RGB").save(path)
        assert load_gray(path).values[0, 0] == 0.587

    def test_gray_png_roundtrip(self, tmp_path):
        path = tmp_path / "ramp.png"
        ramp = (np.arange(12, dtype=np.uint8) * 20).reshape(3, 4)
        Image.fromarray(ramp, "L").save(path)
        assert np.array_equal(load_gray(path).values, ramp / 255.0)

    def test_pgm_roundtrip(self, tmp_path):
        path = tmp_path / "img.pgm"
        img = GrayImage(np.linspace(0.0, 1.0, 256).reshape(16, 16))
        save_gray(img, path)
        assert path.read_bytes()[:2] == b"P5"
        back = load_gray(path)
        # 8-bit quantization is the only loss.
        assert np.max(np.abs(back.values - img.values)) <= 0.5 / 255

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError, match="nope.png"):
            load_gray(tmp_path / "nope.png")

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "bad.png"
        path.write_bytes(b"this is not an image")
        with pytest.raises(OSError):
            load_gray(path)


class TestGrayImage:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            GrayImage(np.array([[0.5, 1.5]]))

    def test_rejects_non_2d(self):
        with pytest.raises(ValueError, match="2-D"):
            GrayImage(np.zeros((2, 2, 3)))

    def test_rejects_nan(self):
        with pytest.raises(ValueError, match="finite"):
            GrayImage(np.array([[0.5, np.nan]]))


class TestDetectEdges:
    def test_constant_image_empty(self):
        img = GrayImage(np.full((8, 8), 0.3))
        assert len(detect_edges(img, "sobel", 0.5)) == 0
        assert len(detect_edges(img, "log", 0.5)) == 0

    def test_vertical_step_sobel(self):
        # Steps between columns 7 and 8; both flanking columns reach the
        # maximum response, so the thick set is two columns and one pass
        # of suppression keeps the single column on the bright side.
        vals = np.zeros((12, 16))
        vals[:, 8:] = 1.0
        img = GrayImage(vals)
        thick = to_pixels(detect_edges(img, "sobel", 0.5, thin=False), 16, 12)
        assert set(thick[:, 0].tolist()) == {7, 8}
        assert len(thick) == 24
        thin = to_pixels(detect_edges(img, "sobel", 0.5, thin=True), 16, 12)
        assert set(thin[:, 0].tolist()) == {8}
        assert sorted(thin[:, 1].tolist()) == list(range(12))

    def test_log_line(self):
        # A one-pixel black line on white: the 5x5 kernel's center column
        # sums to -10 and the columns one and two out sum to 4 and 1, so
        # the normalized response is 1.0 on the line, 0.4 at one pixel
        # off, and 0.1 two pixels off.
        vals = np.ones((12, 16))
        vals[:, 6] = 0.0
        img = GrayImage(vals)
        on_line = to_pixels(detect_edges(img, "log", 0.5), 16, 12)
        assert set(on_line[:, 0].tolist()) == {6}
        assert len(on_line) == 12
        dilated = to_pixels(detect_edges(img, "log", 0.3), 16, 12)
        assert set(dilated[:, 0].tolist()) == {5, 6, 7}

    def test_coords_stay_in_image_rectangle(self):
        rng = np.random.default_rng(3)
        img = GrayImage(rng.random((12, 20)))
        omega = detect_edges(img, "sobel", 0.0)
        assert len(omega) == 12 * 20
        assert omega.xs.min() >= 0 and omega.ys.min() >= 0
        assert omega.xs.max() <= 1.0
        assert omega.ys.max() <= 12 / 20

    def test_thin_is_subset(self):
        rng = np.random.default_rng(4)
        img = GrayImage(rng.random((16, 16)))
        for method in ("sobel", "log"):
            thick = {tuple(p) for p in to_pixels(
                detect_edges(img, method, 0.2), 16, 16)}
            thin = {tuple(p) for p in to_pixels(
                detect_edges(img, method, 0.2, thin=True), 16, 16)}
            assert thin and thin < thick

    def test_translation_equivariance(self):
        rng = np.random.default_rng(5)
        base = rng.random((24, 24))
        shifted = np.roll(base, 1, axis=1)
        for method in ("sobel", "log"):
            r0 = filter_response(GrayImage(base), method)
            r1 = filter_response(GrayImage(shifted), method)
            # Interior windows see identical values in identical order,
            # so the shifted response matches bit-for-bit.
            assert np.array_equal(r1[:, 4:-3], r0[:, 3:-4])

    def test_validation(self):
        img = GrayImage(np.zeros((4, 4)))
        with pytest.raises(ValueError, match="method"):
            detect_edges(img, "canny", 0.5)
        with pytest.raises(ValueError, match="threshold"):
            detect_edges(img, "sobel", 1.5)


class TestDarkPixelSet:
    def test_picks_dark_pixels(self):
        vals = np.ones((4, 6))
        vals[1, 2] = 0.0
        vals[3, 5] = 0.2
        got = to_pixels(dark_pixel_set(GrayImage(vals)), 6, 4)
        assert {tuple(p) for p in got} == {(2, 1), (5, 3)}

    def test_all_white_empty(self):
        assert len(dark_pixel_set(GrayImage(np.ones((4, 4))))) == 0


class TestSynthStructure:
    def test_two_forced_seeds_bisector(self):
        spec = SynthSpec(seed_count=2, rng_seed=0, size=64)
        seeds = np.array([[0.25, 0.5], [0.75, 0.5]])
        img, got = synth_structure(spec, seeds=seeds)
        assert np.array_equal(got, seeds)
        dark = np.argwhere(img.values == 0.0)
        assert set(dark[:, 1].tolist()) == {31}
        assert len(dark) == 64

    @pytest.mark.parametrize("seed_count", [2, 5, 8, 12])
    @pytest.mark.parametrize("rng_seed", [0, 1, 2, 3])
    def test_white_region_count_equals_seeds(self, seed_count, rng_seed):
        img, _ = synth_structure(SynthSpec(seed_count, rng_seed, size=128))
        # scipy's default structuring element is the 4-connected cross.
        _, regions = ndimage.label(img.values == 1.0)
        assert regions == seed_count

    def test_region_count_at_junction_slivers(self):
        # These instances once produced an extra one-pixel white region
        # pinched off at a three-cell junction.
        for seed_count, rng_seed, size in ((8, 2, 128), (12, 2, 96)):
            img, _ = synth_structure(SynthSpec(seed_count, rng_seed, size))
            _, regions = ndimage.label(img.values == 1.0)
            assert regions == seed_count

    @pytest.mark.parametrize("rng_seed", [0, 3, 11])
    def test_edges_near_true_bisectors(self, rng_seed):
        size = 128
        img, seeds = synth_structure(SynthSpec(7, rng_seed, size=size))
        labels = nearest_seed_labels(seeds, size)
        padded = np.pad(labels, 1, mode="edge")
        for y, x in np.argwhere(img.values == 0.0):
            local = {int(padded[y + 1, x + 1]), int(padded[y, x + 1]),
                     int(padded[y + 2, x + 1]), int(padded[y + 1, x]),
                     int(padded[y + 1, x + 2])}
            p = np.array([(x + 0.5) / size, (y + 0.5) / size])
            best = min(
                abs((p - (seeds[a] + seeds[b]) / 2)
                    @ ((seeds[b] - seeds[a])
                       / np.linalg.norm(seeds[b] - seeds[a])))
                for a in local for b in local if a < b)
            assert best * size <= 1.5

    def test_label_ties_go_to_lower_seed(self):
        seeds = np.array([[0.25, 0.5], [0.75, 0.5]])
        labels = nearest_seed_labels(seeds, 64)
        # Pixel centers never sit exactly on this bisector at even size,
        # so check an explicit tie via a symmetric 3-seed layout instead.
        assert labels[0, 31] == 0 and labels[0, 32] == 1
        tie = nearest_seed_labels(np.array([[0.25, 0.25], [0.75, 0.75],
                                            [0.25, 0.25]]), 8)
        assert np.all(tie != 2)

    def test_density_warp(self):
        flat = sample_seeds(SynthSpec(500, 9, density_gradient=False))
        warped = sample_seeds(SynthSpec(500, 9, density_gradient=True))
        assert np.all(np.sqrt(flat) == warped)
        assert warped.mean(axis=0).min() > flat.mean(axis=0).max() + 0.1

    def test_deterministic(self):
        a, sa = synth_structure(SynthSpec(6, 21, size=96))
        b, sb = synth_structure(SynthSpec(6, 21, size=96))
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(sa, sb)

    def test_seed_validation(self):
        spec = SynthSpec(3, 0)
        with pytest.raises(ValueError, match=r"\(3, 2\)"):
            synth_structure(spec, seeds=np.zeros((2, 2)))
        with pytest.raises(ValueError, match="unit square"):
            synth_structure(spec, seeds=np.array(
                [[0.5, 0.5], [0.2, 0.2], [1.5, 0.5]]))

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="seeds"):
            SynthSpec(seed_count=1, rng_seed=0)
        with pytest.raises(ValueError, match="size"):
            SynthSpec(seed_count=4, rng_seed=0, size=16)


class TestSynthBatch:
    def test_writes_images_and_manifest(self, tmp_path):
        records = synth_batch(SynthSpec(5, 42, size=64), 3, tmp_path)
        assert [r.filename for r in records] == [
            "cells_0000.png", "cells_0001.png", "cells_0002.png"]
        for rec in records:
            assert (tmp_path / rec.filename).exists()
            assert rec.seeds.shape == (5, 2)
        back = read_manifest(tmp_path / "manifest.txt")
        assert len(back) == 3
        for a, b in zip(records, back):
            assert a.filename == b.filename
            assert np.array_equal(a.seeds, b.seeds)

    def test_empty_batch(self, tmp_path):
        records = synth_batch(SynthSpec(5, 42, size=64), 0, tmp_path)
        assert records == []
        assert (tmp_path / "manifest.txt").read_text() == ""
        assert list(tmp_path.glob("*.png")) == []

    def test_deterministic_across_threads(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        r1 = synth_batch(SynthSpec(6, 7, size=64), 4, d1, threads=1)
        synth_batch(SynthSpec(6, 7, size=64), 4, d2, threads=3)
        assert (d1 / "manifest.txt").read_bytes() == \
            (d2 / "manifest.txt").read_bytes()
        for rec in r1:
            assert (d1 / rec.filename).read_bytes() == \
                (d2 / rec.filename).read_bytes()

    def test_images_regenerable_from_child_seeds(self, tmp_path):
        spec = SynthSpec(5, 99, size=64)
        records = synth_batch(spec, 3, tmp_path)
        img, seeds = synth_structure(
            SynthSpec(5, child_seed(99, 1), size=64))
        assert np.array_equal(seeds, records[1].seeds)
        saved = load_gray(tmp_path / records[1].filename)
        assert np.array_equal(saved.values, img.values)

    def test_count_validation(self, tmp_path):
        with pytest.raises(ValueError, match="count"):
            synth_batch(SynthSpec(5, 0), -1, tmp_path)
        with pytest.raises(ValueError, match="count"):
            synth_batch(SynthSpec(5, 0), 2001, tmp_path)

    def test_manifest_truncation_error(self, tmp_path):
        path = tmp_path / "manifest.txt"
        path.write_text("img.png 2 0.5 0.5 0.25\n")
        with pytest.raises(ValueError, match="expected 4 coordinates"):
            read_manifest(path)


class TestSynthMatchesDiagramRule:
    def test_boundary_rule_shared_with_rasterizer(self):
        # Away from junction slivers the rendered black pixels are exactly
        # the label-change pixels the diagram rasterizer would report.
        size = 96
        img, seeds = synth_structure(SynthSpec(4, 13, size=size))
        labels = nearest_seed_labels(seeds, size)
        edge_pixels, _ = _extract_boundaries(labels)
        marked = np.zeros((size, size), dtype=bool)
        marked[edge_pixels[:, 1], edge_pixels[:, 0]] = True
        black = img.values == 0.0
        assert np.all(black[marked])
        extras = black & ~marked
        assert extras.sum() <= 2
