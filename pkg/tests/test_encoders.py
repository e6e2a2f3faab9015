import pytest
import torch

from microau.core import default_task_spec
from microau.encoders import (
    EmptyPromptError,
    LayerCountExceededError,
    ShapeMismatchError,
    ToyTextEncoder,
    ToyVisualEncoder,
    encode_prompts,
    encode_visual,
    set_trainable,
)


def test_grid_shapes():
    torch.manual_seed(0)
    enc = ToyVisualEncoder(input_size=224, patch_size=32, dim=32, depth=1)
    grid = encode_visual(enc, torch.rand(3, 224, 224))
    assert (grid.h, grid.w, grid.d) == (7, 7, 32)

    single = ToyVisualEncoder(input_size=224, patch_size=224, dim=16, depth=0)
    grid = encode_visual(single, torch.rand(3, 224, 224))
    assert (grid.h, grid.w) == (1, 1)


def test_shape_mismatch():
    torch.manual_seed(0)
    enc = ToyVisualEncoder(input_size=224)
    with pytest.raises(ShapeMismatchError):
        encode_visual(enc, torch.rand(3, 200, 200))


def test_visual_determinism():
    torch.manual_seed(1)
    enc = ToyVisualEncoder(depth=2)
    image = torch.rand(3, 224, 224)
    with torch.no_grad():
        a = enc(image.unsqueeze(0))
        b = enc(image.unsqueeze(0))
    assert torch.equal(a, b)


def test_depth0_shift_covariance():
    torch.manual_seed(2)
    enc = ToyVisualEncoder(input_size=224, patch_size=32, dim=8, depth=0)
    image = torch.rand(1, 3, 224, 224)
    shifted = torch.roll(image, shifts=32, dims=-1)  # one patch width to the right
    with torch.no_grad():
        base = enc(image)
        moved = enc(shifted)
    # token at column j+1 of the shifted input equals token at column j
    assert torch.allclose(moved[:, :, 1:, :], base[:, :, :-1, :], atol=1e-6)


def test_prompt_embedding_counts():
    torch.manual_seed(3)
    enc = ToyTextEncoder(dim=16)
    spec = default_task_spec("casme2")
    emotions = ["a positive face", "a negative face", "a surprised face"]
    out = encode_prompts(enc, spec, emotions)
    assert out.pos.shape == (8, 16)
    assert out.neg.shape == (8, 16)
    assert out.emotion.shape == (3, 16)


def test_text_encoder_determinism_on_identical_strings():
    torch.manual_seed(4)
    enc = ToyTextEncoder(dim=16)
    with torch.no_grad():
        out = enc(["the same prompt", "the same prompt"])
    assert torch.equal(out[0], out[1])


def test_empty_prompt_rejected():
    torch.manual_seed(5)
    enc = ToyTextEncoder(dim=16)
    with pytest.raises(EmptyPromptError):
        enc([""])


def test_set_trainable_freezes_everything_at_zero():
    torch.manual_seed(6)
    enc = ToyVisualEncoder(depth=2)
    set_trainable(enc, 0)
    image = torch.rand(1, 3, 224, 224, requires_grad=True)
    enc(image).sum().backward()
    assert image.grad is not None
    for name, p in enc.named_parameters():
        assert p.grad is None or torch.all(p.grad == 0), name


def test_set_trainable_last_k_blocks():
    torch.manual_seed(7)
    enc = ToyVisualEncoder(depth=4)
    set_trainable(enc, 3)
    frozen = {p for p in enc.blocks[0].parameters()}
    for p in frozen:
        assert not p.requires_grad
    for blk in list(enc.blocks)[1:]:
        for p in blk.parameters():
            assert p.requires_grad
    assert not enc.patch_embed.weight.requires_grad


def test_set_trainable_text_projection_follows_blocks():
    torch.manual_seed(8)
    enc = ToyTextEncoder(dim=16, depth=2)
    set_trainable(enc, 0)
    assert not enc.output_projection.weight.requires_grad
    set_trainable(enc, 1)
    assert enc.output_projection.weight.requires_grad
    assert not any(p.requires_grad for p in enc.blocks[0].parameters())


def test_set_trainable_bounds():
    torch.manual_seed(9)
    enc = ToyVisualEncoder(depth=4)
    with pytest.raises(LayerCountExceededError):
        set_trainable(enc, 5)
    with pytest.raises(LayerCountExceededError):
        set_trainable(enc, -1)


def test_frozen_gradients_exactly_zero_after_step():
    torch.manual_seed(10)
    enc = ToyVisualEncoder(depth=2)
    set_trainable(enc, 1)
    out = enc(torch.rand(2, 3, 224, 224))
    out.pow(2).sum().backward()
    for p in enc.blocks[0].parameters():
        assert p.grad is None
    assert any(p.grad is not None for p in enc.blocks[1].parameters())


def test_pretrained_adapter_requires_weights_path():
    from microau.core import Config, MicroAUError
    from microau.encoders import build_encoders

    with pytest.raises(MicroAUError):
        build_encoders(Config(encoder_kind="pretrained-adapter"))


def test_finetuning_separates_prompt_pair(overfit_run):
    """After the synthetic contrastive run, positive/negative prompt cosine
    drops from its initial value (direction only)."""
    from microau.model import AUDetector
    from microau.train import load_checkpoint

    ckpt = load_checkpoint(str(overfit_run["checkpoint"]))
    model = ckpt.build_model()
    torch.manual_seed(ckpt.config.seed)
    fresh = AUDetector(ckpt.config, ckpt.task_spec)
    with torch.no_grad():
        trained = model.encode_prompts()
        initial = fresh.encode_prompts()

    def cosines(prompts):
        pos = prompts.pos / prompts.pos.norm(dim=-1, keepdim=True)
        neg = prompts.neg / prompts.neg.norm(dim=-1, keepdim=True)
        return (pos * neg).sum(-1)

    before = cosines(initial)
    after = cosines(trained)
    assert torch.all(after < before)
