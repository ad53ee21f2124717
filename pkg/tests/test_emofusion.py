import logging

import pytest
import torch

from emofusion import (
    FusionBlock,
    PromptEncoder,
    condition,
    cross_attend,
    encode_prompt,
    inject,
)
from synthworld import EmotionCategory
from textmodel import OutOfVocabularyError, Vocabulary
from tokens import VisualEmotionTokens


@pytest.fixture
def vocab(world):
    return Vocabulary.from_world(world)


@pytest.fixture
def encoder(vocab):
    return PromptEncoder(vocab, dim=8, n_max=16).double()


@pytest.fixture
def block():
    return FusionBlock(dim=8, alpha=1.0).double()


def test_empty_caption_is_all_pad(encoder):
    prompt = encode_prompt(encoder, "")
    assert prompt.features.shape == (16, 8)
    assert prompt.pad_mask.all()
    assert torch.count_nonzero(prompt.features) == 0


def test_encoding_is_deterministic(encoder):
    a = encode_prompt(encoder, "a dark circle in the scene")
    b = encode_prompt(encoder, "a dark circle in the scene")
    assert torch.equal(a.features, b.features)
    assert a.pad_mask.tolist() == [False] * 6 + [True] * 10


def test_long_caption_is_truncated_with_warning(encoder, caplog):
    caption = " ".join(["dark"] * 20)
    with caplog.at_level(logging.WARNING):
        prompt = encode_prompt(encoder, caption)
    assert not prompt.pad_mask.any()
    assert "truncated from 20 to 16" in caplog.text


def test_out_of_vocabulary_caption(encoder):
    with pytest.raises(OutOfVocabularyError):
        encode_prompt(encoder, "a shiny pyramid")


def test_singleton_key_collapses_to_value_projection(block):
    f_v = torch.randn(16, 8, dtype=torch.float64)
    v = torch.randn(8, dtype=torch.float64)
    f_e = cross_attend(block, f_v, v)
    expected = block.w_v(v)
    assert torch.allclose(f_e, expected.expand(16, 8))


def test_pad_rows_are_zeroed(block):
    f_v = torch.randn(16, 8, dtype=torch.float64)
    pad = torch.tensor([False] * 4 + [True] * 12)
    f_e = cross_attend(block, f_v, torch.randn(8, dtype=torch.float64), pad_mask=pad)
    assert torch.count_nonzero(f_e[4:]) == 0
    assert torch.count_nonzero(f_e[:4]) > 0


def test_zero_token_gives_zero_output(block):
    f_e = cross_attend(block, torch.randn(16, 8, dtype=torch.float64), torch.zeros(8, dtype=torch.float64))
    assert torch.count_nonzero(f_e) == 0


def test_cross_attend_shape_mismatch(block):
    with pytest.raises(ValueError):
        cross_attend(block, torch.randn(16, 8), torch.randn(7))


def test_multi_key_attention_rows_sum_to_one(block):
    f_v = torch.randn(16, 8, dtype=torch.float64)
    keys = torch.randn(3, 8, dtype=torch.float64)
    _, weights = cross_attend(block, f_v, keys, return_weights=True)
    assert weights.shape == (16, 3)
    assert torch.allclose(weights.sum(-1), torch.ones(16, dtype=torch.float64), atol=1e-6)


def test_cross_attend_gradients():
    f_v = torch.randn(6, 8, dtype=torch.float64)

    def energy(w_q, w_k, w_v, v):
        q = f_v @ w_q.T
        k = (v @ w_k.T)[None]
        values = (v @ w_v.T)[None]
        weights = torch.softmax(q @ k.T / 8**0.5, dim=-1)
        return ((weights @ values) ** 2).sum()

    def through_block(w_q, w_k, w_v, v):
        return (cross_attend(_with_weights(w_q, w_k, w_v), f_v, v) ** 2).sum()

    inputs = tuple(torch.randn(8, 8, dtype=torch.float64, requires_grad=True) for _ in range(3)) + (
        torch.randn(8, dtype=torch.float64, requires_grad=True),
    )
    assert torch.autograd.gradcheck(through_block, inputs, eps=1e-6, atol=1e-6, rtol=1e-4)
    assert torch.allclose(through_block(*inputs), energy(*inputs))


def _with_weights(w_q, w_k, w_v) -> "FusionBlock":
    """A FusionBlock whose projections are the given (differentiable) tensors."""
    block = FusionBlock(dim=8).double()
    del block.w_q.weight, block.w_k.weight, block.w_v.weight
    block.w_q.weight, block.w_k.weight, block.w_v.weight = w_q, w_k, w_v
    return block


def test_inject_identities():
    f_v = torch.randn(16, 8)
    f_e = torch.randn(16, 8)
    assert torch.equal(inject(f_v, f_e, 0.0), f_v)
    assert torch.allclose(inject(f_v, f_v, 1.0), 2 * f_v)
    c0, c1, c2 = (inject(f_v, f_e, a) for a in (0.0, 1.0, 2.0))
    assert torch.allclose(c2 - c1, c1 - c0, atol=1e-6)
    with pytest.raises(ValueError):
        inject(f_v, f_e[:3], 1.0)


def test_condition_shape_and_alpha_zero(encoder, block):
    tokens = VisualEmotionTokens(8).double()
    caption = "a dark circle in the scene"
    c_v = condition(encoder, block, tokens, EmotionCategory.ANGER, caption)
    assert c_v.features.shape == (16, 8)

    plain = encode_prompt(encoder, caption).features
    for k in (EmotionCategory.ANGER, EmotionCategory.AWE):
        assert torch.equal(condition(encoder, block, tokens, k, caption, alpha=0.0).features, plain)


def test_one_hot_weights_match_explicit_emotion(encoder, block):
    tokens = VisualEmotionTokens(8).double()
    one_hot = [0.0] * 8
    one_hot[EmotionCategory.FEAR] = 1.0
    caption = "a dark circle in the scene"
    explicit = condition(encoder, block, tokens, EmotionCategory.FEAR, caption)
    mixed = condition(encoder, block, tokens, None, caption, weights=one_hot)
    assert torch.equal(explicit.features, mixed.features)


def test_distinct_tokens_give_distinct_conditioning(encoder, block):
    tokens = VisualEmotionTokens(8).double()
    caption = "a circle in the scene"
    a = condition(encoder, block, tokens, EmotionCategory.AMUSEMENT, caption).features
    b = condition(encoder, block, tokens, EmotionCategory.SADNESS, caption).features
    assert (a - b).norm() > 0


def test_styled_caption_conditions(world, encoder, block):
    tokens = VisualEmotionTokens(8).double()
    caption = world.styled_content("sketch", "star")
    styled = condition(encoder, block, tokens, EmotionCategory.AWE, caption)
    assert styled.features.shape == (16, 8)
    assert int((~styled.pad_mask).sum()) == 3
