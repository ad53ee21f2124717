import math

import pytest
import torch
from torch.func import functional_call

from config import RunConfig
from synthworld import EmotionCategory
from textmodel import (
    LoraAdapter,
    OutOfVocabularyError,
    TextModel,
    Vocabulary,
    assemble_batch,
    base_weights_digest,
    build_prompt_embedding,
    build_text_model,
    caption_nll,
    embed_content,
    lora_forward,
    mix_textual_tokens,
    pretrain_base,
    sample_caption,
    text_loss,
    token_logits,
    train_text,
)
from tokens import SimplexError, TextualEmotionTokens


def toy_model(dim: int = 8, dtype=torch.float64) -> TextModel:
    vocab = Vocabulary(["a", "circle", "dark", "square", "in", "the", "scene"])
    model = TextModel(vocab, dim=dim, layers=1, heads=2, max_positions=16).to(dtype)
    return model


def test_vocabulary_specials_and_round_trip(world):
    vocab = Vocabulary.from_world(world)
    assert vocab.words[:3] == ["<pad>", "<bos>", "<eos>"]
    ids = vocab.encode_caption("a circle in the scene")
    assert ids[-1] == Vocabulary.EOS
    assert vocab.decode(ids) == "a circle in the scene"
    with pytest.raises(OutOfVocabularyError, match="pyramid"):
        vocab.encode("dark pyramid")


def test_embed_content_lookup():
    model = toy_model()
    f_t = embed_content(model, "circle")
    assert f_t.shape == (1, 8)
    assert torch.equal(f_t[0], model.tok_emb.weight[model.vocab.index["circle"]])
    assert embed_content(model, "").shape == (0, 8)
    with pytest.raises(OutOfVocabularyError):
        embed_content(model, "circle pyramid")


def test_build_prompt_embedding_layout():
    model = toy_model()
    tokens = TextualEmotionTokens(8).double()
    empty = build_prompt_embedding(tokens, EmotionCategory.FEAR, embed_content(model, ""))
    assert torch.equal(empty, tokens.weight[EmotionCategory.FEAR][None])

    f_t = embed_content(model, "a dark circle")
    c_t = build_prompt_embedding(tokens, EmotionCategory.FEAR, f_t)
    assert c_t.shape == (4, 8)
    assert torch.equal(c_t[1:], f_t)


def test_token_gradient_equals_prefix_row_gradient():
    model = toy_model()
    tokens = TextualEmotionTokens(8).double()
    q = model.vocab.encode_caption("a dark circle")
    f_t = embed_content(model, "circle").detach()

    c_t = build_prompt_embedding(tokens, EmotionCategory.FEAR, f_t)
    c_t.retain_grad()
    text_loss(model, c_t, q).backward()
    assert torch.allclose(tokens.weight.grad[EmotionCategory.FEAR], c_t.grad[0])


def test_lora_zero_init_is_identity():
    weight = torch.randn(5, 4, dtype=torch.float64)
    adapter = LoraAdapter(4, 5, rank=2).double()
    x = torch.randn(3, 4, dtype=torch.float64)
    assert torch.equal(lora_forward(weight, adapter, x), x @ weight.T)


def test_lora_scale_zero_is_base():
    weight = torch.randn(4, 4, dtype=torch.float64)
    adapter = LoraAdapter(4, 4, rank=2, scale=0.0).double()
    with torch.no_grad():
        adapter.up.normal_()
    x = torch.randn(3, 4, dtype=torch.float64)
    assert torch.allclose(lora_forward(weight, adapter, x), x @ weight.T)


def test_lora_can_cancel_the_base_weight():
    weight = torch.randn(4, 4, dtype=torch.float64)
    adapter = LoraAdapter(4, 4, rank=4).double()
    with torch.no_grad():
        adapter.down.copy_(torch.eye(4, dtype=torch.float64))
        adapter.up.copy_(torch.eye(4, dtype=torch.float64) - weight)
    x = torch.randn(3, 4, dtype=torch.float64)
    assert torch.allclose(lora_forward(weight, adapter, x), x, atol=1e-12)


def test_lora_shape_errors():
    with pytest.raises(ValueError):
        LoraAdapter(4, 4, rank=5)
    with pytest.raises(ValueError):
        lora_forward(torch.zeros(4, 4), None, torch.zeros(2, 3))


def test_uniform_logits_give_log_vocab_size():
    words = [f"w{i}" for i in range(97)]
    model = TextModel(Vocabulary(words), dim=8, layers=1, heads=2)
    assert len(model.vocab) == 100
    with torch.no_grad():
        model.lm_head.weight.zero_()
        model.lm_head.bias.zero_()
    c_t = torch.randn(2, 8)
    loss = text_loss(model, c_t, model.vocab.encode_caption("w1 w2 w3"))
    assert abs(loss.item() - math.log(100)) < 1e-3


def test_loss_matches_hand_computed_softmax():
    model = TextModel(Vocabulary(["w"]), dim=4, layers=1, heads=1).double()
    bias = [0.5, -1.0, 2.0, 0.3]
    with torch.no_grad():
        model.lm_head.weight.zero_()
        model.lm_head.bias.copy_(torch.tensor(bias, dtype=torch.float64))
    q = [3, Vocabulary.EOS]

    log_total = math.log(sum(math.exp(b) for b in bias))
    expected = -((bias[3] - log_total) + (bias[2] - log_total)) / 2
    loss = text_loss(model, torch.zeros(1, 4, dtype=torch.float64), q)
    assert abs(loss.item() - expected) < 1e-6


def test_content_changes_the_loss():
    model = toy_model()
    tokens = TextualEmotionTokens(8).double()
    q = model.vocab.encode_caption("a dark circle")
    f_t = embed_content(model, "circle")
    one = text_loss(model, build_prompt_embedding(tokens, 0, f_t), q)
    two = text_loss(model, build_prompt_embedding(tokens, 0, torch.cat([f_t, f_t])), q)
    assert not torch.isclose(one, two)


def test_pad_inside_caption_is_rejected():
    model = toy_model()
    with pytest.raises(ValueError, match="PAD"):
        text_loss(model, torch.zeros(1, 8, dtype=torch.float64), [3, Vocabulary.PAD, Vocabulary.EOS])


def test_causality():
    model = toy_model()
    c_t = torch.randn(2, 8, dtype=torch.float64)
    q = model.vocab.encode_caption("a dark circle in the scene")
    changed = list(q)
    changed[3] = model.vocab.index["square"]
    before = token_logits(model, c_t, q)
    after = token_logits(model, c_t, changed)
    # q_3 only feeds predictions of q_4 onwards
    assert torch.allclose(before[:4], after[:4])
    assert not torch.allclose(before[4:], after[4:])


def test_output_distribution_sums_to_one():
    model = toy_model()
    logits = token_logits(model, torch.randn(2, 8, dtype=torch.float64), model.vocab.encode_caption("a circle"))
    assert torch.allclose(torch.softmax(logits, dim=-1).sum(-1), torch.ones(logits.shape[0], dtype=torch.float64), atol=1e-6)


def test_gradients_match_finite_differences():
    model = toy_model()
    model.attach_lora(rank=2, scale=1.0)
    with torch.no_grad():
        for p in model.adapter_parameters():
            p.normal_(0.0, 0.3)
    tokens = TextualEmotionTokens(8).double()
    f_t = embed_content(model, "circle").detach()
    q = model.vocab.encode_caption("a dark circle")
    adapter_names = [name for name, _ in model.named_parameters() if ".adapter." in name]
    base = {name: p.detach() for name, p in model.named_parameters() if ".adapter." not in name}

    def loss_fn(token_weight, *adapters):
        params = dict(base)
        params.update(zip(adapter_names, adapters))
        c_t = torch.cat([token_weight[EmotionCategory.FEAR][None], f_t], dim=0)
        embeds, targets = assemble_batch(model, [c_t], [q])
        return caption_nll(functional_call(model, params, (embeds,)), targets)

    inputs = (tokens.weight.detach().clone().requires_grad_(True),) + tuple(
        p.detach().clone().requires_grad_(True) for name, p in model.named_parameters() if ".adapter." in name
    )
    assert torch.autograd.gradcheck(loss_fn, inputs, eps=1e-6, atol=1e-6, rtol=1e-4)


def test_train_text_touches_only_tokens_and_adapters(small_world, small_dataset):
    config = RunConfig(text_dim=16, text_layers=1, text_heads=2, lora_rank=2, text_steps=5, text_batch=4, log_every=1)
    model = build_text_model(small_world, config)
    tokens = TextualEmotionTokens(16)
    digest = base_weights_digest(model)
    before = tokens.weight.detach().clone()

    log = train_text(model, tokens, small_dataset, config, rng_seed=0)
    assert len(log.losses) == 5
    assert base_weights_digest(model) == digest
    assert not torch.equal(before, tokens.weight.detach())


def test_train_text_with_zero_learning_rate_is_flat(small_world, small_dataset):
    config = RunConfig(text_dim=16, text_layers=1, text_heads=2, lora_rank=2, text_steps=4, text_batch=4, text_lr=0.0, token_only_prob=0.0)
    model = build_text_model(small_world, config)
    tokens = TextualEmotionTokens(16)
    before = tokens.weight.detach().clone()
    train_text(model, tokens, small_dataset, config, rng_seed=0)
    assert torch.equal(before, tokens.weight.detach())
    for name, p in model.named_parameters():
        if name.endswith("adapter.up"):
            assert torch.count_nonzero(p) == 0


def test_train_text_rejects_empty_dataset(small_world):
    config = RunConfig(text_dim=16, text_layers=1, text_heads=2, lora_rank=2)
    with pytest.raises(ValueError):
        train_text(build_text_model(small_world, config), TextualEmotionTokens(16), [], config, rng_seed=0)


def test_pretrain_refuses_attached_adapters(small_world):
    config = RunConfig(text_dim=16, text_layers=1, text_heads=2, lora_rank=2, pretrain_steps=2, text_batch=4)
    model = build_text_model(small_world, config)
    log = pretrain_base(model, small_world, config, rng_seed=0)
    assert len(log.losses) == 2
    model.attach_lora(2)
    with pytest.raises(ValueError):
        pretrain_base(model, small_world, config, rng_seed=0)


def test_greedy_sampling_is_deterministic_and_in_vocabulary(small_world):
    config = RunConfig(text_dim=16, text_layers=1, text_heads=2, lora_rank=2)
    model = build_text_model(small_world, config)
    tokens = TextualEmotionTokens(16)
    a = sample_caption(model, tokens, EmotionCategory.FEAR, "circle")
    b = sample_caption(model, tokens, EmotionCategory.FEAR, "circle")
    assert a == b
    assert set(a.split()) <= set(small_world.vocabulary_words())
    assert len(a.split()) <= 32


def test_styled_content_is_accepted(small_world):
    config = RunConfig(text_dim=16, text_layers=1, text_heads=2, lora_rank=2)
    model = build_text_model(small_world, config)
    tokens = TextualEmotionTokens(16)
    content = small_world.styled_content("watercolor", "circle")
    assert embed_content(model, content).shape == (3, 16)
    caption = sample_caption(model, tokens, EmotionCategory.AWE, content)
    assert set(caption.split()) <= set(small_world.vocabulary_words())


def test_temperature_sampling_depends_on_seed_only(small_world):
    config = RunConfig(text_dim=16, text_layers=1, text_heads=2, lora_rank=2)
    model = build_text_model(small_world, config)
    tokens = TextualEmotionTokens(16)
    kwargs = dict(decode="temperature", temperature=1.5, rng_seed=7)
    assert sample_caption(model, tokens, 0, "", **kwargs) == sample_caption(model, tokens, 0, "", **kwargs)
    with pytest.raises(ValueError):
        sample_caption(model, tokens, 0, "", decode="beam")


def test_mixing_textual_tokens():
    tokens = TextualEmotionTokens(8)
    one_hot = [0.0] * 8
    one_hot[EmotionCategory.SADNESS] = 1.0
    assert torch.equal(mix_textual_tokens(tokens, one_hot), tokens.weight[EmotionCategory.SADNESS])

    half = [0.5, 0.5, 0, 0, 0, 0, 0, 0]
    expected = (tokens.weight[0] + tokens.weight[1]) / 2
    assert torch.allclose(mix_textual_tokens(tokens, half), expected)
    assert torch.allclose(mix_textual_tokens(tokens, [1 / 8] * 8), tokens.weight.mean(dim=0), atol=1e-7)
    with pytest.raises(SimplexError):
        mix_textual_tokens(tokens, [0.45, 0.45, 0, 0, 0, 0, 0, 0])
