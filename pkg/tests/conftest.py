import json
from pathlib import Path

import numpy as np
import pytest
import torch

from latentmorph.backends import load_or_train_toy, make_toy_images

TOY_SEED = 0
TOY_EPOCHS = 60


@pytest.fixture(scope="session")
def toy_backend():
    return load_or_train_toy(seed=TOY_SEED, epochs=TOY_EPOCHS)


@pytest.fixture(scope="session")
def toy_pair():
    imgs, labels = make_toy_images(2, seed=7)
    return imgs[0], imgs[1]


@pytest.fixture(scope="session")
def test_images():
    imgs, labels = make_toy_images(8, seed=999)
    return imgs, labels


@pytest.fixture(scope="session")
def fitted_morpher(toy_backend, toy_pair):
    from latentmorph import ImageMorpher

    return ImageMorpher(backend=toy_backend, inv_steps=300, seed=0).fit(list(toy_pair))


def _tiny_checkpoint(root: Path):
    diffusers = pytest.importorskip("diffusers")
    transformers = pytest.importorskip("transformers")
    torch.manual_seed(0)
    unet = diffusers.UNet2DConditionModel(
        sample_size=8,
        in_channels=4,
        out_channels=4,
        layers_per_block=1,
        block_out_channels=(32, 64),
        down_block_types=("CrossAttnDownBlock2D", "DownBlock2D"),
        up_block_types=("UpBlock2D", "CrossAttnUpBlock2D"),
        cross_attention_dim=32,
        attention_head_dim=8,
        norm_num_groups=8,
    )
    vae = diffusers.AutoencoderKL(
        in_channels=3,
        out_channels=3,
        down_block_types=("DownEncoderBlock2D",) * 2,
        up_block_types=("UpDecoderBlock2D",) * 2,
        block_out_channels=(16, 32),
        latent_channels=4,
        norm_num_groups=8,
        sample_size=16,
    )
    vocab = {"<|startoftext|>": 0, "<|endoftext|>": 1}
    for ch in [chr(c) for c in range(97, 123)] + [" "]:
        vocab.setdefault(ch, len(vocab))
        vocab.setdefault(ch + "</w>", len(vocab))
    tokenizer = transformers.CLIPTokenizer(vocab=vocab, merges=[], model_max_length=8)
    text = transformers.CLIPTextModel(
        transformers.CLIPTextConfig(
            vocab_size=len(vocab),
            hidden_size=32,
            intermediate_size=64,
            num_hidden_layers=1,
            num_attention_heads=2,
            max_position_embeddings=8,
            bos_token_id=0,
            eos_token_id=1,
            pad_token_id=1,
        )
    )
    unet.save_pretrained(root / "unet")
    vae.save_pretrained(root / "vae")
    text.save_pretrained(root / "text_encoder")
    tokenizer.save_pretrained(root / "tokenizer")
    (root / "scheduler").mkdir()
    (root / "scheduler" / "scheduler_config.json").write_text(
        json.dumps({"beta_schedule": "scaled_linear", "beta_start": 0.00085, "beta_end": 0.012, "num_train_timesteps": 1000})
    )
    return root


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    return _tiny_checkpoint(tmp_path_factory.mktemp("tiny-ckpt"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get("acceptance", None) if hasattr(config, "stash") else None
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 12):
        if number not in results:
            terminalreporter.write_line(f"criterion {number:2d}: NOT RUN")
            continue
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
