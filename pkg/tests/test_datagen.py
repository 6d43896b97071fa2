import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from gradshield.datagen import (
    Dataset,
    dataset_bytes,
    gen_blobs,
    gen_images,
    load_dataset,
    measure_batch,
    measurement,
    save_dataset,
)
from gradshield.errors import FormatError
from gradshield.flsim import local_train
from gradshield.nn import evaluate, zoo


class TestBlobs:
    def test_deterministic(self):
        assert gen_blobs(3, 10, 4, 0.5, seed=1).equals(gen_blobs(3, 10, 4, 0.5, seed=1))
        assert not gen_blobs(3, 10, 4, 0.5, seed=1).equals(gen_blobs(3, 10, 4, 0.5, seed=2))

    def test_zero_sigma_gives_centres(self):
        ds = gen_blobs(4, 5, 3, 0.0, seed=0)
        for c in range(4):
            rows = ds.inputs[ds.labels == c]
            assert np.all(rows == rows[0])
        assert len({tuple(r) for r in ds.inputs}) == 4

    def test_linear_model_separates(self):
        ds = gen_blobs(2, 100, 8, 0.1, seed=3)
        model = zoo.toy_mlp(8, hidden=0, classes=2, seed=3)
        model, steps, _ = local_train(model, ds, epochs=200, batch_size=200, lr=0.5, seed=3)
        assert steps == 200
        assert evaluate(model, ds.inputs, ds.labels)[1] > 0.95

    @pytest.mark.parametrize("args", [(1, 5, 2, 0.1), (2, 0, 2, 0.1), (2, 5, 0, 0.1), (2, 5, 2, -1.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            gen_blobs(*args, seed=0)


class TestImages:
    def test_zero_spread(self):
        ds = gen_images(64, 3, 8, 8, 0.0, seed=0)
        assert ds.meta["brightness"] == [0.5] * 64
        unclipped = [x for x in ds.inputs if 0.0 < x.min() and x.max() < 1.0]
        assert unclipped
        for x in unclipped:
            assert abs(x.mean() - 0.5) < 1e-6

    def test_brightness_uniform(self):
        ds = gen_images(128, 3, 8, 8, 1.0, seed=1)
        assert stats.kstest(measure_batch(ds.inputs), "uniform").statistic < 0.15

    def test_brightness_tracks_target(self):
        ds = gen_images(512, 3, 8, 8, 1.0, seed=2)
        assert np.corrcoef(measure_batch(ds.inputs), ds.meta["brightness"])[0, 1] > 0.99

    def test_range_and_determinism(self):
        a, b = gen_images(16, 1, 4, 4, 0.7, seed=3), gen_images(16, 1, 4, 4, 0.7, seed=3)
        assert a.equals(b)
        assert a.inputs.min() >= 0.0 and a.inputs.max() <= 1.0

    @pytest.mark.parametrize("args", [(0, 1, 2, 2, 0.5), (2, 0, 2, 2, 0.5), (2, 1, 2, 2, 1.5)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            gen_images(*args, seed=0)


class TestMeasurement:
    def test_constant_image(self):
        assert measurement(np.full((3, 4, 4), 0.37)) == pytest.approx(0.37, abs=1e-15)

    def test_channels(self):
        x = np.stack([np.zeros((2, 2)), np.ones((2, 2)), np.zeros((2, 2))])
        assert measurement(x, "channel_mean", 1) == 1.0
        assert measurement(x) == pytest.approx(1 / 3)
        with pytest.raises(ValueError):
            measurement(x, "channel_mean", 3)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_matches_flat_loop(self, seed):
        x = np.random.default_rng(seed).random((2, 3, 5))
        total = 0.0
        for v in x.ravel().tolist():
            total += v
        assert abs(measurement(x) - total / x.size) < 1e-12


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        ds = gen_images(10, 2, 3, 3, 0.5, seed=4)
        save_dataset(ds, tmp_path / "d.gsds")
        assert load_dataset(tmp_path / "d.gsds").equals(ds)

    def test_truncated(self, tmp_path):
        raw = dataset_bytes(gen_blobs(2, 3, 2, 0.1, seed=0))
        (tmp_path / "t").write_bytes(raw[:-2])
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "t")

    def test_empty_path(self):
        with pytest.raises(OSError):
            load_dataset("")
        with pytest.raises(OSError):
            save_dataset(gen_blobs(2, 1, 1, 0.1, seed=0), "")

    def test_labels_validated(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 3)), [0, 5], classes=2)
        with pytest.raises(ValueError):
            Dataset(np.full((1, 2), np.nan), [0], classes=2)
