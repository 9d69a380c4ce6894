import numpy as np
import pytest

from aerodepth import numcore as nc
from aerodepth.datagen import SynthParams, synth_dataset
from aerodepth.losses import combined_loss
from aerodepth.model import LARGE_PRESET, Model, ModelConfig, conv_shapes, forward_with, unet_forward, unet_init
from aerodepth.numcore import Tensor
from aerodepth.pipeline import TrainConfig, prepare_sample, train


def conv_params(o, i, k):
    return o * i * k * k + o


@pytest.fixture(scope="module")
def default_model():
    return unet_init(ModelConfig())


@pytest.fixture(scope="module")
def trained():
    params = SynthParams(seed=11, image_size=96)
    samples = [prepare_sample(img, fr, crop=32) for img, fr in synth_dataset(params, 24)]
    cfg = TrainConfig(epochs=6, batch_size=4, seed=3, levels=2, base_channels=4)
    model, _, _ = train(samples, cfg)
    return model, samples


class TestInit:
    def test_channel_ladder(self):
        shapes = dict(conv_shapes(ModelConfig(levels=3, base_channels=8)))
        assert [shapes[f"enc{i}.conv1"][0] for i in range(3)] == [8, 16, 32]
        assert shapes["head"] == (1, 8, 1, 1)

    def test_parameter_count(self, default_model):
        # enc 1->8->8, 8->16->16, 16->32->32; bottleneck 32->64->64;
        # dec (32+64)->32->32, (16+32)->16->16, (8+16)->8->8; head 8->1 (1x1)
        expected = (conv_params(8, 1, 3) + conv_params(8, 8, 3)
                    + conv_params(16, 8, 3) + conv_params(16, 16, 3)
                    + conv_params(32, 16, 3) + conv_params(32, 32, 3)
                    + conv_params(64, 32, 3) + conv_params(64, 64, 3)
                    + conv_params(32, 96, 3) + conv_params(32, 32, 3)
                    + conv_params(16, 48, 3) + conv_params(16, 16, 3)
                    + conv_params(8, 24, 3) + conv_params(8, 8, 3)
                    + conv_params(1, 8, 1))
        assert default_model.num_parameters() == expected

    def test_same_seed_identical(self):
        a, b = unet_init(ModelConfig(seed=4)), unet_init(ModelConfig(seed=4))
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k, _ in a)

    def test_different_seed_differs(self):
        a, b = unet_init(ModelConfig(seed=4)), unet_init(ModelConfig(seed=5))
        assert a["enc0.conv0.w"].data.tobytes() != b["enc0.conv0.w"].data.tobytes()

    def test_he_scale_and_zero_bias(self):
        m = unet_init(ModelConfig(levels=4, base_channels=16))
        w = m["enc3.conv1.w"].data
        assert w.std() == pytest.approx(np.sqrt(2.0 / (128 * 9)), rel=0.05)
        assert not np.any(m["enc3.conv1.b"].data)

    def test_names_and_dtype(self, default_model):
        names = [k for k, _ in default_model]
        assert len(names) == len(set(names))
        assert "dec1.conv0.w" in names and "bottleneck.conv1.b" in names
        assert all(t.data.dtype == np.float32 for _, t in default_model)

    def test_large_preset(self):
        m = unet_init(ModelConfig(**LARGE_PRESET))
        assert m["enc3.conv0.w"].shape == (128, 64, 3, 3)

    def test_invalid(self):
        with pytest.raises(ValueError):
            unet_init(ModelConfig(levels=0))


class TestForward:
    def test_shape(self, default_model, rng):
        out = unet_forward(default_model, rng.uniform(size=(2, 1, 128, 128)))
        assert out.shape == (2, 1, 128, 128)

    def test_deterministic(self, default_model, rng):
        x = rng.uniform(size=(1, 1, 32, 32))
        with nc.no_grad():
            assert unet_forward(default_model, x).data.tobytes() == unet_forward(default_model, x).data.tobytes()

    def test_indivisible(self, default_model):
        with pytest.raises(nc.ShapeError, match="divisible by 8"):
            unet_forward(default_model, np.zeros((1, 1, 36, 32)))

    def test_one_step_decreases_loss(self):
        decreased = 0
        for seed in range(10):
            model = unet_init(ModelConfig(seed=seed))
            r = np.random.default_rng(seed)
            x = r.uniform(size=(1, 1, 32, 32)).astype(np.float32)
            t = np.full((1, 1, 32, 32), 4.0, np.float32)
            t[0, 0, 10:20, 8:24] = r.integers(0, 4)
            g = nc.Graph()
            with g.active():
                before = combined_loss(unet_forward(model, x), t, x)
            nc.backward(g, before)
            for _, p in model:
                p.data -= 1e-3 * p.grad
            with nc.no_grad():
                after = combined_loss(unet_forward(model, x), t, x)
            decreased += float(after.data) < float(before.data)
        assert decreased >= 9

    def test_skip_and_deepest_both_matter(self, trained):
        model, samples = trained
        x = np.stack([s.image for s in samples[:4]])[:, None]
        cfg = model.config
        zero = lambda t: Tensor(np.zeros_like(t.data))
        with nc.no_grad():
            base = forward_with(model.params, cfg, x).data
            no_skip = forward_with(model.params, cfg, x, taps={"skip0": zero}).data
            no_deep = forward_with(model.params, cfg, x, taps={"deepest": zero}).data
        assert np.abs(no_skip - base).max() > 1e-3
        assert np.abs(no_deep - base).max() > 1e-3
