import json
from pathlib import Path

import numpy as np
import pytest

from etta import data
from etta.container import FormatError
from etta.data import CORRUPTIONS, CorruptionSpec, corrupt, corrupt_batch, gen_dataset, severity_table
from etta.vit import ConfigError

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def small_set():
    return gen_dataset(6, seed=4)


class TestGenDataset:
    def test_deterministic(self, small_set):
        x, y = gen_dataset(6, seed=4)
        assert np.array_equal(x, small_set[0]) and np.array_equal(y, small_set[1])

    def test_seed_matters(self, small_set):
        assert not np.array_equal(gen_dataset(6, seed=5)[0], small_set[0])

    def test_purpose_tuple_seed(self):
        a = gen_dataset(2, seed=(4, data.TEST))[0]
        b = gen_dataset(2, seed=(4, data.TRAIN))[0]
        assert not np.array_equal(a, b)

    def test_balanced_and_shaped(self, small_set):
        x, y = small_set
        assert x.shape == (60, 3, 32, 32) and x.dtype == np.float32
        assert np.bincount(y).tolist() == [6] * 10
        assert x.min() >= 0 and x.max() <= 1

    def test_fewer_classes_and_grey(self):
        x, y = gen_dataset(3, image_size=16, channels=1, num_classes=4)
        assert x.shape == (12, 1, 16, 16) and set(y.tolist()) == {0, 1, 2, 3}

    def test_too_many_classes(self):
        with pytest.raises(ConfigError):
            gen_dataset(1, num_classes=11)

    def test_render_depends_only_on_spec(self):
        rng = np.random.default_rng(0)
        spec = data.sample_spec(3, 32, rng, seed=17)
        assert np.array_equal(data.render(spec), data.render(spec))

    @pytest.mark.parametrize("kind", data.SHAPES)
    def test_shapes_draw_something(self, kind):
        u, v = np.meshgrid(np.linspace(-1.2, 1.2, 25), np.linspace(-1.2, 1.2, 25))
        m = data._mask(kind, u, v)
        assert 0.05 < m.mean() < 0.9

    def test_linear_probe_weaker_than_vit(self):
        """Raw pixels are not linearly separable enough to match the trained ViT."""
        xtr, ytr = gen_dataset(100, seed=(7, data.TRAIN))
        xte, yte = gen_dataset(30, seed=(7, data.TEST))
        f = lambda x: np.c_[x.reshape(len(x), -1), np.ones(len(x))]
        a = f(xtr)
        w = np.linalg.solve(a.T @ a + 10.0 * np.eye(a.shape[1]), a.T @ np.eye(10)[ytr])
        probe = float((f(xte) @ w).argmax(1).__eq__(yte).mean())
        log = [json.loads(l) for l in (FIXTURES / "train_log.jsonl").read_text().splitlines()]
        vit_acc = next(r["test_accuracy"] for r in log if "test_accuracy" in r)
        assert probe < vit_acc - 0.2


class TestSeverityTable:
    def test_all_kinds_present(self):
        table = severity_table()
        assert set(table) == set(CORRUPTIONS)
        assert all(len(v["values"]) == 5 for v in table.values())

    @pytest.mark.parametrize("kind", CORRUPTIONS)
    def test_monotone(self, kind):
        entry = severity_table()[kind]
        vals = np.array(entry["values"], float)
        strength = vals if entry["direction"] == "increasing" else -vals
        assert (np.diff(strength) >= 0).all()

    def test_spec_value(self):
        assert CorruptionSpec("pixelate", 5).value == severity_table()["pixelate"]["values"][4]

    @pytest.mark.parametrize("kw", [{"kind": "fog", "severity": 1}, {"kind": "contrast", "severity": 6}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ConfigError):
            CorruptionSpec(**kw)


class TestCorrupt:
    @pytest.fixture
    def img(self):
        return np.random.default_rng(0).uniform(0, 1, (3, 32, 32)).astype(np.float32)

    def test_contrast_one_is_identity(self, img):
        np.testing.assert_array_equal(corrupt(img, CorruptionSpec("contrast", 1), value=1.0), img)

    def test_gaussian_zero_is_identity(self, img):
        np.testing.assert_array_equal(corrupt(img, CorruptionSpec("gaussian_noise", 1), value=0.0), img)

    def test_pixelate_block4_is_8x8_nearest(self, img):
        out = corrupt(img, CorruptionSpec("pixelate", 1), value=4)
        small = img[:, 2::4, 2::4]  # block centres
        expected = np.repeat(np.repeat(small, 4, axis=1), 4, axis=2)
        np.testing.assert_array_equal(out, expected)

    def test_box_blur_constant_image(self):
        img = np.full((3, 8, 8), 0.3, np.float32)
        np.testing.assert_allclose(data.box_blur(img, 3), img, atol=1e-7)

    def test_box_blur_mean(self, img):
        out = data.box_blur(img, 3)
        assert out[0, 5, 5] == pytest.approx(img[0, 4:7, 4:7].mean(), rel=1e-6)

    def test_brightness_clipped(self, img):
        out = corrupt(img, CorruptionSpec("brightness", 5))
        assert out.max() <= 1.0 and out.min() >= img.min()

    @pytest.mark.parametrize("kind", CORRUPTIONS)
    def test_range_shape_determinism(self, img, kind):
        spec = CorruptionSpec(kind, 5, seed=3)
        a, b = corrupt(img, spec), corrupt(img, spec)
        assert a.shape == img.shape and a.dtype == np.float32
        assert a.min() >= 0 and a.max() <= 1
        assert np.array_equal(a, b)
        assert not np.array_equal(a, img)

    def test_input_out_of_range(self, img):
        with pytest.raises(ValueError):
            corrupt(img * 2, CorruptionSpec("contrast", 1))

    def test_batch_seeded(self, small_set):
        x = small_set[0][:4]
        a = corrupt_batch(x, "impulse_noise", 3, seed=1)
        assert np.array_equal(a, corrupt_batch(x, "impulse_noise", 3, seed=1))
        assert not np.array_equal(a, corrupt_batch(x, "impulse_noise", 3, seed=2))


class TestFiles:
    def test_roundtrip(self, tmp_path, small_set):
        x, y = small_set
        data.export_dataset(tmp_path / "d.etta", x, y)
        x2, y2 = data.ingest_raw(tmp_path / "d.etta")
        assert np.array_equal(x, x2) and np.array_equal(y, y2)

    def test_wrong_channels(self, tmp_path, small_set):
        x, y = small_set
        data.export_dataset(tmp_path / "d.etta", x[:, :1], y)
        with pytest.raises(FormatError):
            data.ingest_raw(tmp_path / "d.etta")

    def test_label_out_of_range(self, tmp_path, small_set):
        x, y = small_set
        data.export_dataset(tmp_path / "d.etta", x, y + 1)
        with pytest.raises(ValueError):
            data.ingest_raw(tmp_path / "d.etta")

    def test_wrong_kind(self, tmp_path, small_set):
        from etta.container import write_arrays
        write_arrays(tmp_path / "d.etta", {"images": small_set[0]}, "vit")
        with pytest.raises(FormatError):
            data.ingest_raw(tmp_path / "d.etta")

    def test_ppm(self, tmp_path, small_set):
        data.write_ppm(tmp_path / "a.ppm", small_set[0][0])
        raw = (tmp_path / "a.ppm").read_bytes()
        assert raw.startswith(b"P6\n32 32\n255\n") and len(raw) == 13 + 32 * 32 * 3


def test_severity5_hurts_frozen_model():
    from etta.adapt import evaluate_frozen
    from etta.experiment import clean_test_set, corrupted_stream
    from etta.vit import load_checkpoint

    params = load_checkpoint(FIXTURES / "vit_source.etta")
    x, y = clean_test_set(320, seed=123)
    clean = evaluate_frozen(x, y, params)
    for kind in CORRUPTIONS:
        xc, yc = corrupted_stream(kind, 5, 320, seed=123)
        assert np.array_equal(yc, y)
        assert evaluate_frozen(xc, yc, params) < clean, kind
