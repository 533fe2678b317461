import pytest
import torch

from conftest import small_config
from save_avs.config import ModelConfig
from save_avs.decoder import MaskDecoder, upscale_to_input
from save_avs.losses import total_loss
from save_avs.model import build_model


def test_output_shape_unbatched():
    torch.manual_seed(0)
    dec = MaskDecoder(64)
    out = dec(torch.randn(64, 8, 8), torch.randn(1, 64))
    assert out.shape == (1, 32, 32)


@pytest.mark.parametrize("side", [4, 8, 16])
def test_output_shape_enumerated(side):
    torch.manual_seed(0)
    dec = MaskDecoder(16)
    out = dec(torch.randn(2, 16, side, side), torch.randn(2, 1, 16))
    assert out.shape == (2, 1, 4 * side, 4 * side)


def test_all_zero_parameters_give_constant_map():
    dec = MaskDecoder(16)
    with torch.no_grad():
        for p in dec.parameters():
            p.zero_()
    out = dec(torch.randn(1, 16, 4, 4), torch.randn(1, 1, 16))
    assert torch.equal(out, out.flatten()[0].expand_as(out))


def test_width_mismatch():
    dec = MaskDecoder(16)
    with pytest.raises(ValueError, match="width"):
        dec(torch.randn(1, 8, 4, 4), torch.randn(1, 1, 16))


def test_decoder_is_deterministic():
    dec = MaskDecoder(16)
    emb, prompt = torch.randn(1, 16, 4, 4), torch.randn(1, 1, 16)
    assert torch.equal(dec(emb, prompt), dec(emb, prompt))


def test_trained_decoder_responds_to_prompt(trained_toy):
    model, _ = trained_toy
    with torch.no_grad():
        emb = torch.randn(1, 64, 8, 8)
        a = model.decoder(emb, torch.randn(1, 1, 64))
        b = model.decoder(emb, torch.randn(1, 1, 64))
    assert not torch.allclose(a, b)


def test_loss_gradient_reaches_prompt_projection(toy_sets):
    train_set, _ = toy_sets
    model = build_model(ModelConfig())
    loss = total_loss(model.predict_logits(train_set.images[:4], train_set.audio[:4]),
                      train_set.masks[:4])
    loss.backward()
    assert model.audio.prompt_proj[2].weight.grad.abs().sum() > 0
    # The loss reaches the audio input projection through the encoder injections.
    assert model.audio.input_proj.weight.grad.abs().sum() > 0


def test_trained_prompt_path_carries_gradient(trained_toy, toy_sets):
    model, _ = trained_toy
    train_set, _ = toy_sets
    model.zero_grad()
    total_loss(model.predict_logits(train_set.images[:4], train_set.audio[:4]),
               train_set.masks[:4]).backward()
    for p in (model.audio.prompt_proj[0].weight, model.audio.input_proj.weight):
        assert p.grad.abs().sum() > 0
    model.zero_grad()


def test_upscale_no_padding():
    out = upscale_to_input(torch.randn(32, 32), 64, (64, 64))
    assert out.shape == (64, 64)


def test_upscale_crops_padded_sample():
    logits = torch.randn(1, 1, 32, 32)
    out = upscale_to_input(logits, 64, (50, 40))
    assert out.shape == (1, 1, 50, 40)
    full = upscale_to_input(logits, 64, (64, 64))
    assert torch.equal(out, full[..., :50, :40])


def test_upscale_resized_sample_goes_back_to_original_size():
    assert upscale_to_input(torch.randn(2, 32, 32), 64, (300, 200)).shape == (2, 300, 200)


def test_upscale_preserves_constants():
    out = upscale_to_input(torch.full((32, 32), 1.75), 64, (50, 40))
    assert torch.equal(out, torch.full((50, 40), 1.75))
    out = upscale_to_input(torch.full((32, 32), -0.5), 64, (90, 70))
    torch.testing.assert_close(out, torch.full((90, 70), -0.5), rtol=0, atol=1e-7)


def test_upscale_rejects_bad_sizes():
    with pytest.raises(ValueError):
        upscale_to_input(torch.randn(32, 16), 64, (64, 64))
    with pytest.raises(ValueError):
        upscale_to_input(torch.randn(32, 32), 64, (0, 10))
