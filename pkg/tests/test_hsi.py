import struct

import numpy as np
import pytest

from lgc3d.hsi import CUBE_HEADER
from lgc3d.hsi import CUBE_MAGIC
from lgc3d.hsi import HsiCube
from lgc3d.hsi import PatchSampler
from lgc3d.hsi import SampleSplit
from lgc3d.hsi import convert
from lgc3d.hsi import extract_patch
from lgc3d.hsi import indian_pines_removed_bands
from lgc3d.hsi import load_cube
from lgc3d.hsi import normalize
from lgc3d.hsi import parse_ratios
from lgc3d.hsi import remove_bands
from lgc3d.hsi import save_cube
from lgc3d.hsi import stratified_split
from lgc3d.hsi import synth_cube
from lgc3d.utils import ConfigurationError
from lgc3d.utils import CubeDimensionError
from lgc3d.utils import CubeFormatError
from lgc3d.utils import LabelRangeError
from lgc3d.utils import ShapeError
from lgc3d.utils import TruncatedPayloadError


def ramp_cube(height=4, width=5, bands=3):
    data = np.arange(height * width * bands, dtype=np.float32).reshape(height, width, bands)
    labels = np.ones((height, width), dtype=np.int64)
    return HsiCube(data, labels, 1)


def test_cube_round_trip(tmp_path, small_cube):
    """Test that a saved cube loads back with the same data, labels and metadata."""
    path = tmp_path / "cube.hsi"
    save_cube(small_cube, path)
    loaded = load_cube(path)
    np.testing.assert_array_equal(loaded.data, small_cube.data)
    np.testing.assert_array_equal(loaded.labels, small_cube.labels)
    assert loaded.num_classes == 3
    assert loaded.class_names == small_cube.class_names
    assert loaded.name == small_cube.name


def test_cube_bad_magic(cube_file):
    """Test that a file without the cube magic is refused."""
    raw = bytearray(cube_file.read_bytes())
    raw[:8] = b"NOTACUBE"
    cube_file.write_bytes(bytes(raw))
    with pytest.raises(CubeFormatError, match="magic"):
        load_cube(cube_file)


def test_cube_bad_version(cube_file):
    """Test that an unknown format version is refused."""
    raw = bytearray(cube_file.read_bytes())
    raw[8:12] = struct.pack("<I", 7)
    cube_file.write_bytes(bytes(raw))
    with pytest.raises(CubeFormatError, match="version"):
        load_cube(cube_file)


def test_cube_truncated(cube_file):
    """Test that a payload shorter than the declared dims is detected."""
    cube_file.write_bytes(cube_file.read_bytes()[:-10])
    with pytest.raises(TruncatedPayloadError):
        load_cube(cube_file)


def test_cube_trailing_bytes(cube_file):
    """Test that a payload longer than the declared dims is a dimension error."""
    cube_file.write_bytes(cube_file.read_bytes() + b"\x00\x00")
    with pytest.raises(CubeDimensionError):
        load_cube(cube_file)


def test_cube_overflowing_dims(tmp_path):
    """Test that dims whose product overflows the element limit are refused."""
    metadata = b'{"height": 100000, "width": 100000, "bands": 1000, "num_classes": 1}'
    path = tmp_path / "huge.hsi"
    path.write_bytes(CUBE_HEADER.pack(CUBE_MAGIC, 1, len(metadata)) + metadata)
    with pytest.raises(CubeDimensionError):
        load_cube(path)


def test_cube_short_header(tmp_path):
    """Test that a file shorter than the header is refused."""
    path = tmp_path / "short.hsi"
    path.write_bytes(b"LGC")
    with pytest.raises(CubeFormatError):
        load_cube(path)


def test_cube_validation():
    """Test that inconsistent cubes are refused at construction."""
    with pytest.raises(ShapeError):
        HsiCube(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        HsiCube(np.zeros((2, 2, 3)), np.zeros((3, 2)))
    with pytest.raises(LabelRangeError):
        HsiCube(np.zeros((2, 2, 3)), np.array([[0, 1], [2, -1]]))
    with pytest.raises(LabelRangeError):
        HsiCube(np.zeros((2, 2, 3)), np.array([[0, 1], [2, 3]]), num_classes=2)
    with pytest.raises(CubeFormatError):
        HsiCube(np.full((1, 1, 1), np.nan), np.zeros((1, 1)))


def test_remove_bands():
    """Test that removed bands disappear and the others keep their order."""
    cube = ramp_cube()
    reduced = remove_bands(cube, [1])
    assert reduced.bands == 2
    np.testing.assert_array_equal(reduced.data[..., 0], cube.data[..., 0])
    np.testing.assert_array_equal(reduced.data[..., 1], cube.data[..., 2])
    with pytest.raises(ShapeError):
        remove_bands(cube, [3])
    with pytest.raises(ShapeError):
        remove_bands(cube, [0, 0])


def test_indian_pines_bands():
    """Test the packaged list of Indian Pines bands to drop from 220 down to 200."""
    bands = indian_pines_removed_bands()
    assert len(bands) == 20
    assert len(set(bands)) == 20
    assert max(bands) < 220
    cube = HsiCube(np.zeros((2, 2, 220), dtype=np.float32), np.ones((2, 2)))
    assert remove_bands(cube, bands).bands == 200


def test_extract_patch_center():
    """Test that a patch is centered on its pixel with bands in the last axis."""
    cube = ramp_cube()
    patch = extract_patch(cube, (2, 2), 3)
    assert patch.shape == (3, 3, 3)
    np.testing.assert_array_equal(patch[1, 1], cube.data[2, 2])
    np.testing.assert_array_equal(patch, cube.data[1:4, 1:4])


def test_extract_patch_zero_padding():
    """Test that a corner patch is zero-padded outside the cube."""
    cube = ramp_cube()
    patch = extract_patch(cube, (0, 0), 3)
    np.testing.assert_array_equal(patch[0], 0)
    np.testing.assert_array_equal(patch[:, 0], 0)
    np.testing.assert_array_equal(patch[1:, 1:], cube.data[:2, :2])


def test_extract_patch_reflect_padding():
    """Test that reflect padding mirrors the cube around its border."""
    cube = ramp_cube()
    patch = extract_patch(cube, (0, 0), 3, pad_mode="reflect")
    np.testing.assert_array_equal(patch[0, 1], cube.data[1, 0])


def test_extract_patch_errors():
    """Test that even sizes and outside centers are refused."""
    cube = ramp_cube()
    with pytest.raises(ShapeError):
        extract_patch(cube, (0, 0), 4)
    with pytest.raises(ShapeError):
        extract_patch(cube, (4, 0), 3)
    with pytest.raises(ConfigurationError):
        extract_patch(cube, (0, 0), 3, pad_mode="wrap")  # type: ignore[arg-type]


def test_patch_sampler_batch():
    """Test that batches use the (batch, 1, bands, size, size) layout and 0-indexed labels."""
    cube = ramp_cube()
    sampler = PatchSampler(cube, 3)
    batch = sampler.batch(np.array([[2, 2], [1, 3]]))
    assert batch.patches.shape == (2, 1, 3, 3, 3)
    np.testing.assert_array_equal(batch.patches[0, 0, :, 1, 1], cube.data[2, 2])
    np.testing.assert_array_equal(batch.patches[1, 0], extract_patch(cube, (1, 3), 3).transpose(2, 0, 1))
    assert batch.labels.tolist() == [0, 0]


def test_patch_sampler_iteration(rng):
    """Test that shuffled batches cover every coordinate once."""
    cube = ramp_cube()
    coords = cube.labeled_coords()
    seen = np.concatenate([batch.coords for batch in PatchSampler(cube, 3).iter_batches(coords, 6, rng)])
    assert len(seen) == len(coords)
    assert {tuple(c) for c in seen.tolist()} == {tuple(c) for c in coords.tolist()}


def test_parse_ratios():
    """Test ratio parsing and its errors."""
    assert parse_ratios("6:1:3") == (6, 1, 3)
    assert parse_ratios("2:0:8") == (2, 0, 8)
    for text in ("6:1", "a:b:c", "0:1:1", "1:-1:3"):
        with pytest.raises(ConfigurationError):
            parse_ratios(text)


def test_split_sizes():
    """Test the per-class cut of 100 pixels at 6:1:3 and 10 pixels at 4:1:5."""
    labels = np.ones((10, 10), dtype=np.int64)
    cube = HsiCube(np.zeros((10, 10, 2), dtype=np.float32), labels)
    split = stratified_split(cube, (6, 1, 3), seed=0)
    assert (len(split.train), len(split.val), len(split.test)) == (60, 10, 30)

    small = HsiCube(np.zeros((2, 5, 2), dtype=np.float32), np.ones((2, 5), dtype=np.int64))
    split = stratified_split(small, (4, 1, 5), seed=0)
    assert (len(split.train), len(split.val), len(split.test)) == (4, 1, 5)


def test_split_partition(small_cube):
    """Test that the split parts are disjoint, labeled and cover every labeled pixel."""
    split = stratified_split(small_cube, (6, 1, 3), seed=3)
    parts = [set(split.train), set(split.val), set(split.test)]
    assert not parts[0] & parts[1] and not parts[0] & parts[2] and not parts[1] & parts[2]
    labeled = {tuple(c) for c in small_cube.labeled_coords().tolist()}
    assert parts[0] | parts[1] | parts[2] == labeled


def test_split_determinism(small_cube):
    """Test that the same seed gives the same split and another seed a different one."""
    assert stratified_split(small_cube, seed=5) == stratified_split(small_cube, seed=5)
    assert stratified_split(small_cube, seed=5).train != stratified_split(small_cube, seed=6).train


def test_split_tiny_class():
    """Test that a class with fewer than three pixels goes entirely to training."""
    labels = np.array([[1, 1, 1, 1, 2]])
    cube = HsiCube(np.zeros((1, 5, 2), dtype=np.float32), labels)
    split = stratified_split(cube, (6, 1, 3))
    assert (0, 4) in split.train


def test_split_skips_unlabeled():
    """Test that unlabeled pixels are never sampled."""
    labels = np.array([[0, 1, 1], [1, 0, 1]])
    cube = HsiCube(np.zeros((2, 3, 1), dtype=np.float32), labels)
    split = stratified_split(cube, (1, 0, 1))
    assert (0, 0) not in split.train + split.test
    assert len(split.train) + len(split.test) == 4


def test_split_manifest(tmp_path, small_split):
    """Test that a saved split manifest loads back, and an invalid one is refused."""
    path = tmp_path / "split.json"
    small_split.save(path)
    assert SampleSplit.load(path) == small_split
    np.testing.assert_array_equal(small_split.coords("train"), np.asarray(small_split.train))
    with pytest.raises(ConfigurationError):
        small_split.coords("holdout")
    path.write_text('{"train": 3}')
    with pytest.raises(ConfigurationError):
        SampleSplit.load(path)


def test_normalize():
    """Test that every band ends up with zero mean and unit deviation, constant bands staying finite."""
    rng = np.random.default_rng(2)
    data = rng.normal(5.0, 3.0, size=(6, 6, 3)).astype(np.float32)
    data[..., 2] = 4.0
    cube = normalize(HsiCube(data, np.ones((6, 6))))
    np.testing.assert_allclose(cube.data[..., :2].mean(axis=(0, 1)), 0.0, atol=1e-5)
    np.testing.assert_allclose(cube.data[..., :2].std(axis=(0, 1)), 1.0, atol=1e-5)
    np.testing.assert_array_equal(cube.data[..., 2], 0.0)


def test_synth_cube():
    """Test the synthetic cube layout and its class separation."""
    cube = synth_cube(size=20, bands=12, classes=4, noise=0.1, seed=3)
    assert (cube.height, cube.width, cube.bands) == (20, 20, 12)
    assert cube.num_classes == 4
    assert set(np.unique(cube.labels).tolist()) == {1, 2, 3, 4}
    means = np.stack([cube.data[cube.labels == k].mean(axis=0) for k in range(1, 5)])
    for a in range(4):
        for b in range(a + 1, 4):
            assert np.linalg.norm(means[a] - means[b]) > 0.5


def test_synth_cube_determinism():
    """Test that the generator is deterministic under a seed."""
    a = synth_cube(size=8, bands=4, classes=2, seed=9)
    b = synth_cube(size=8, bands=4, classes=2, seed=9)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_synth_cube_errors():
    """Test that impossible synthetic cubes are refused."""
    with pytest.raises(ConfigurationError):
        synth_cube(classes=1)
    with pytest.raises(ConfigurationError):
        synth_cube(size=1, classes=2)
    with pytest.raises(ConfigurationError):
        synth_cube(size=8, bands=4, classes=2, noise=-0.1)
    with pytest.raises(ConfigurationError):
        synth_cube(size=8, bands=4, classes=2, max_attempts=0)


@pytest.mark.parametrize(
    ("bands", "noise", "max_attempts"),
    [(16, 0.5, 1000), (16, 3.0, 1000), (1, 1.0, 5)],
)
def test_synth_cube_large_noise(bands, noise, max_attempts):
    """Test that a noise too large for unit spectra still gives a cube with well separated classes."""
    cube = synth_cube(size=16, bands=bands, classes=4, noise=noise, seed=7, max_attempts=max_attempts)
    assert set(np.unique(cube.labels).tolist()) == {1, 2, 3, 4}
    means = np.stack([cube.data[cube.labels == k].mean(axis=0) for k in range(1, 5)])
    for a in range(4):
        for b in range(a + 1, 4):
            assert np.linalg.norm(means[a] - means[b]) > 5.0 * noise


def test_convert_npy(tmp_path):
    """Test the conversion of numpy arrays into a cube."""
    data = np.random.default_rng(0).random((3, 4, 5)).astype(np.float32)
    labels = np.array([[0, 1, 2, 1]] * 3)
    np.save(tmp_path / "data.npy", data)
    np.save(tmp_path / "labels.npy", labels)
    cube = convert(tmp_path / "data.npy", tmp_path / "labels.npy", name="demo")
    assert cube.name == "demo"
    assert cube.num_classes == 2
    np.testing.assert_array_equal(cube.data, data)


def test_convert_csv(tmp_path):
    """Test that one pixel per CSV row is reshaped along the label raster."""
    data = np.arange(2 * 3 * 4, dtype=np.float64).reshape(6, 4)
    np.savetxt(tmp_path / "data.csv", data, delimiter=",")
    np.savetxt(tmp_path / "labels.csv", np.array([[1, 1, 2], [2, 0, 1]]), delimiter=",")
    cube = convert(tmp_path / "data.csv", tmp_path / "labels.csv")
    assert (cube.height, cube.width, cube.bands) == (2, 3, 4)
    np.testing.assert_array_equal(cube.data[1, 2], data[5])


def test_convert_raw(tmp_path):
    """Test raw dumps with an explicit shape, and a mismatching size."""
    data = np.arange(2 * 2 * 3, dtype="<f4")
    data.tofile(tmp_path / "data.raw")
    np.array([1, 2, 2, 1], dtype="<i2").tofile(tmp_path / "labels.raw")
    cube = convert(tmp_path / "data.raw", tmp_path / "labels.raw", shape=(2, 2, 3))
    np.testing.assert_array_equal(cube.data.reshape(-1), data)
    with pytest.raises(CubeDimensionError):
        convert(tmp_path / "data.raw", tmp_path / "labels.raw", shape=(2, 2, 4))
    with pytest.raises(ConfigurationError):
        convert(tmp_path / "data.raw", tmp_path / "labels.raw")


def test_convert_errors(tmp_path):
    """Test that unsupported formats and mismatched rasters are refused."""
    (tmp_path / "data.txt").write_text("1")
    np.save(tmp_path / "labels.npy", np.ones((2, 2)))
    with pytest.raises(CubeFormatError):
        convert(tmp_path / "data.txt", tmp_path / "labels.npy")
    np.save(tmp_path / "data.npy", np.ones((3, 2, 4)))
    with pytest.raises(CubeDimensionError):
        convert(tmp_path / "data.npy", tmp_path / "labels.npy")
