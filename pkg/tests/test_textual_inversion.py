import numpy as np
import pytest
import torch

from latentmorph import (
    EmbeddingVector,
    InversionConfig,
    NumericalError,
    ValidationError,
    dpm_loss,
    init_common_embedding,
    optimize_embedding,
    optimize_embedding_pair,
)
from latentmorph.textual_inversion import probe_dpm_loss
from latentmorph.schedule import NoiseSchedule


class ConstantModel:
    """Predicts a fixed tensor; enough to pin the loss formula."""

    def __init__(self, value):
        self.value = value
        self.schedule = NoiseSchedule.scaled_linear()

    def predict_noise(self, x_t, t, e):
        return self.value(x_t) if callable(self.value) else self.value + 0 * e.sum()

    def parameter_checksum(self):
        return "fixed"


def test_common_embeddings_identical(toy_backend):
    e0, e1 = init_common_embedding("bird", toy_backend)
    assert torch.equal(e0.values, e1.values)
    assert e0.values.data_ptr() != e1.values.data_ptr()


def test_concatenated_pair_token_encodes(toy_backend):
    e0, _ = init_common_embedding("beetle car", toy_backend)
    assert e0.shape == (8, 64)


def test_encoder_is_deterministic(toy_backend):
    a, _ = init_common_embedding("shape", toy_backend)
    b, _ = init_common_embedding("shape", toy_backend)
    assert torch.equal(a.values, b.values)


def test_empty_token_rejected(toy_backend):
    with pytest.raises(ValidationError):
        init_common_embedding("  ", toy_backend)


def test_loss_zero_for_perfect_prediction():
    noise = torch.randn(4)
    model = ConstantModel(noise)
    assert float(dpm_loss(torch.zeros(4), torch.zeros(2), 10, noise, model)) == 0.0


def test_loss_is_noise_energy_for_zero_prediction():
    noise = torch.randn(4, dtype=torch.float64)
    model = ConstantModel(torch.zeros(4, dtype=torch.float64))
    assert float(dpm_loss(torch.ones(4, dtype=torch.float64), torch.zeros(2), 500, noise, model)) == pytest.approx(float((noise**2).sum()))


@pytest.mark.parametrize("t", [0, 1001])
def test_timestep_range_enforced(t):
    model = ConstantModel(torch.zeros(2))
    with pytest.raises(ValidationError):
        dpm_loss(torch.zeros(2), torch.zeros(2), t, torch.zeros(2), model)


def test_non_finite_model_output_rejected():
    model = ConstantModel(torch.tensor([float("nan"), 0.0]))
    with pytest.raises(NumericalError):
        dpm_loss(torch.zeros(2), torch.zeros(2), 5, torch.zeros(2), model)


def test_loss_matches_independent_recomputation(toy_backend, test_images):
    imgs, _ = test_images
    x0 = torch.tensor(imgs[0])
    e = toy_backend.encode_text("An image of circle")
    g = torch.Generator().manual_seed(3)
    noise = torch.randn(x0.shape, generator=g)
    t = 321
    b = float(toy_backend.schedule.betas[t])
    x_t = np.sqrt(b) * x0 + np.sqrt(1 - b) * noise
    with torch.no_grad():
        direct = toy_backend.module(x_t[None], torch.tensor([float(t)]), e[None])[0]
    expected = float(((direct - noise) ** 2).sum())
    assert float(dpm_loss(x0, e, t, noise, toy_backend)) == pytest.approx(expected, rel=1e-5)


def test_zero_steps_returns_initial(toy_backend, test_images):
    imgs, _ = test_images
    e0, _ = init_common_embedding("shape", toy_backend)
    out = optimize_embedding(toy_backend.encode_image(imgs[0]), e0, InversionConfig(steps=0), toy_backend)
    assert torch.equal(out.values, e0.values)


def test_config_validation():
    with pytest.raises(ValidationError):
        InversionConfig(learning_rate=0)
    with pytest.raises(ValidationError):
        InversionConfig(steps=-1)


def test_optimization_keeps_model_frozen_and_lowers_probe_loss(toy_backend, test_images):
    imgs, _ = test_images
    x0 = toy_backend.encode_image(imgs[2])
    e0, _ = init_common_embedding("shape", toy_backend)
    before = toy_backend.parameter_checksum()
    out = optimize_embedding(x0, e0, InversionConfig(steps=200, seed=1), toy_backend)
    assert toy_backend.parameter_checksum() == before
    assert out.origin == "optimized"
    assert probe_dpm_loss(x0, out, toy_backend, seed=9) < probe_dpm_loss(x0, e0, toy_backend, seed=9)


def test_common_initialization_keeps_embeddings_close(toy_backend, test_images):
    imgs, _ = test_images
    xa, xb = toy_backend.encode_image(imgs[0]), toy_backend.encode_image(imgs[1])
    config = InversionConfig(steps=200, seed=0)
    e_common, _ = init_common_embedding("shape", toy_backend)
    pa, pb = optimize_embedding_pair(xa, xb, e_common, config, toy_backend)
    ua = optimize_embedding(xa, EmbeddingVector(toy_backend.encode_text("An image of circle")), config, toy_backend)
    ub = optimize_embedding(xb, EmbeddingVector(toy_backend.encode_text("a photograph of lighthouse")), config, toy_backend)
    assert float((pa.values - pb.values).norm()) < float((ua.values - ub.values).norm())


def test_pair_optimization_is_deterministic(toy_backend, test_images):
    imgs, _ = test_images
    xa, xb = toy_backend.encode_image(imgs[0]), toy_backend.encode_image(imgs[1])
    e, _ = init_common_embedding("shape", toy_backend)
    r1 = optimize_embedding_pair(xa, xb, e, InversionConfig(steps=20, seed=4), toy_backend)
    r2 = optimize_embedding_pair(xa, xb, e, InversionConfig(steps=20, seed=4), toy_backend)
    assert all(torch.equal(a.values, b.values) for a, b in zip(r1, r2))


def test_nan_loss_aborts_with_step():
    calls = {"n": 0}

    def value(x_t):
        calls["n"] += 1
        return x_t * (float("nan") if calls["n"] > 5 else 1.0)

    class Model(ConstantModel):
        def predict_noise(self, x_t, t, e):
            return value(x_t) + 0 * e.sum()

    with pytest.raises(NumericalError):
        optimize_embedding(torch.ones(3), EmbeddingVector(torch.zeros(2)), InversionConfig(steps=10), Model(None))


def test_embedding_rejects_unknown_origin():
    with pytest.raises(ValidationError):
        EmbeddingVector(torch.zeros(2), "guessed")
