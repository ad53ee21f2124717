"""
Affective captioning: a small word-level decoder conditioned on a prefix of
[emotion token; content embeddings], tuned through low-rank adapters.

Sequence layout fed to the decoder:

    [v_t^k, f_t(1..M), BOS, q_1, ..., q_{n-1}]  ->  predicts q_1 ... q_n (q_n = EOS)

Prefix rows are excluded from the loss. Right padding is invisible to earlier
positions under the causal mask, so batches need no key padding mask.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pad_sequence

import checkpoint
from config import RunConfig
from rng import TEXT_TRAIN, numpy_rng
from synthworld import (
    EmotionCategory,
    Quadruplet,
    WorldSpec,
    agnostic_caption,
)
from tokens import TextualEmotionTokens

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100
MAX_CAPTION_LENGTH = 32
# Steps averaged for the initial loss; the final loss averages the last tenth
INITIAL_WINDOW = 5


class OutOfVocabularyError(ValueError):
    """Raised when a word is missing from the vocabulary."""

    def __init__(self, word: str):
        super().__init__(f"Out-of-vocabulary word: '{word}'")
        self.word = word


class Vocabulary:
    """Word <-> id map with PAD, BOS and EOS at ids 0, 1, 2."""

    PAD = 0
    BOS = 1
    EOS = 2
    SPECIALS = ("<pad>", "<bos>", "<eos>")

    def __init__(self, words: list[str]):
        self.words: list[str] = list(self.SPECIALS) + [w for w in words if w not in self.SPECIALS]
        self.index: dict[str, int] = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("Vocabulary words must be unique")

    @classmethod
    def from_world(cls, world: WorldSpec) -> "Vocabulary":
        return cls(world.vocabulary_words())

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index and self.index[word] >= len(self.SPECIALS)

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if word not in self:
                raise OutOfVocabularyError(word)
            ids.append(self.index[word])
        return ids

    def encode_caption(self, text: str) -> list[int]:
        return self.encode(text) + [self.EOS]

    def decode(self, ids: list[int]) -> str:
        out = []
        for i in ids:
            if i == self.EOS:
                break
            if i >= len(self.SPECIALS):
                out.append(self.words[i])
        return " ".join(out)


# --- low-rank adapters -------------------------------------------------------


class LoraAdapter(nn.Module):
    """Rank-r update scale * up @ down; up starts at zero so the update starts at zero."""

    def __init__(self, d_in: int, d_out: int, rank: int, scale: float = 1.0):
        super().__init__()
        if not 1 <= rank <= min(d_in, d_out):
            raise ValueError(f"LoRA rank must be in [1, {min(d_in, d_out)}], got {rank}")
        self.rank = rank
        self.scale = scale
        self.down = nn.Parameter(torch.empty(rank, d_in))
        self.up = nn.Parameter(torch.zeros(d_out, rank))
        nn.init.kaiming_uniform_(self.down, a=math.sqrt(5))


def lora_forward(base_weight: torch.Tensor, adapter: LoraAdapter | None, x: torch.Tensor) -> torch.Tensor:
    """y = W x + scale * B (A x), applied over the last axis of x."""
    d_out, d_in = base_weight.shape
    if x.shape[-1] != d_in:
        raise ValueError(f"Input has {x.shape[-1]} features, weight expects {d_in}")
    y = x @ base_weight.T
    if adapter is None:
        return y
    if adapter.down.shape[1] != d_in or adapter.up.shape[0] != d_out:
        raise ValueError(
            f"Adapter shapes {tuple(adapter.down.shape)}/{tuple(adapter.up.shape)} "
            f"do not match weight {tuple(base_weight.shape)}"
        )
    return y + adapter.scale * ((x @ adapter.down.T) @ adapter.up.T)


class LoraLinear(nn.Module):
    """Bias-free projection that can carry an adapter."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.adapter: LoraAdapter | None = None

    def attach(self, rank: int, scale: float) -> LoraAdapter:
        d_out, d_in = self.weight.shape
        self.adapter = LoraAdapter(d_in, d_out, rank, scale).to(self.weight.dtype)
        return self.adapter

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return lora_forward(self.weight, self.adapter, x)


# --- decoder -----------------------------------------------------------------


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim ({dim}) must be divisible by heads ({heads})")
        self.heads = heads
        self.q_proj = LoraLinear(dim, dim)
        self.k_proj = LoraLinear(dim, dim)
        self.v_proj = LoraLinear(dim, dim)
        self.out_proj = LoraLinear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, S, D = x.shape
        hd = D // self.heads
        q = self.q_proj(x).view(B, S, self.heads, hd).transpose(1, 2)
        k = self.k_proj(x).view(B, S, self.heads, hd).transpose(1, 2)
        v = self.v_proj(x).view(B, S, self.heads, hd).transpose(1, 2)

        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        scores = scores.masked_fill(causal_mask(S, x.device), float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.out_proj(out.transpose(1, 2).reshape(B, S, D))


def causal_mask(size: int, device=None) -> torch.Tensor:
    """True above the diagonal: position i may attend to j <= i only."""
    return torch.triu(torch.ones(size, size, dtype=torch.bool, device=device), diagonal=1)


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TextModel(nn.Module):
    """Decoder over embedding sequences; the caller builds the prefix."""

    def __init__(self, vocab: Vocabulary, dim: int = 64, layers: int = 2, heads: int = 2, max_positions: int = 64):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.max_positions = max_positions
        self.tok_emb = nn.Embedding(len(vocab), dim)
        self.pos_emb = nn.Embedding(max_positions, dim)
        self.blocks = nn.ModuleList(DecoderBlock(dim, heads) for _ in range(layers))
        self.ln_f = nn.LayerNorm(dim)
        self.lm_head = nn.Linear(dim, len(vocab))
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)
        self.lora_rank = 0
        self.lora_scale = 0.0

    def forward(self, inputs_embeds: torch.Tensor) -> torch.Tensor:
        S = inputs_embeds.shape[1]
        if S > self.max_positions:
            raise ValueError(f"Sequence length {S} exceeds max_positions {self.max_positions}")
        x = inputs_embeds + self.pos_emb(torch.arange(S, device=inputs_embeds.device))
        for block in self.blocks:
            x = block(x)
        return self.lm_head(self.ln_f(x))

    def attach_lora(self, rank: int, scale: float = 1.0) -> None:
        """Adapters on the query and value projections of every block."""
        for block in self.blocks:
            block.attn.q_proj.attach(rank, scale)
            block.attn.v_proj.attach(rank, scale)
        self.lora_rank = rank
        self.lora_scale = scale
        logger.info(f"Attached LoRA adapters (rank={rank}, scale={scale}) to {len(self.blocks)} blocks")

    @property
    def has_adapters(self) -> bool:
        return self.lora_rank > 0

    def adapter_parameters(self) -> list[nn.Parameter]:
        return [p for name, p in self.named_parameters() if ".adapter." in name]

    def base_named_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(name, p) for name, p in self.named_parameters() if ".adapter." not in name]

    def freeze_base(self) -> None:
        for _, p in self.base_named_parameters():
            p.requires_grad_(False)
        for p in self.adapter_parameters():
            p.requires_grad_(True)


def base_weights_digest(model: TextModel) -> str:
    """Hash of every non-adapter weight, for frozen-weight checks."""
    digest = hashlib.sha256()
    for name, p in model.base_named_parameters():
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


# --- conditioning and loss ---------------------------------------------------


def embed_content(model: TextModel, content: str) -> torch.Tensor:
    """f_t: one embedding row per content word, (M, d1); empty content gives (0, d1)."""
    ids = torch.tensor(model.vocab.encode(content), dtype=torch.long)
    return model.tok_emb.weight[ids]


def prepend_token(v: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
    return torch.cat([v.reshape(1, -1), f_t], dim=0)


def build_prompt_embedding(tokens: TextualEmotionTokens, k: EmotionCategory | int, f_t: torch.Tensor) -> torch.Tensor:
    """c_t = [v_t^k; f_t], (M+1, d1)."""
    return prepend_token(tokens.row(k), f_t)


def mix_textual_tokens(tokens: TextualEmotionTokens, weights) -> torch.Tensor:
    """v_t^mix = sum_k w_k v_t^k."""
    return tokens.mix(weights)


def _check_caption_ids(q: list[int]) -> None:
    if not q:
        raise ValueError("Caption token sequence must be nonempty")
    if q[-1] != Vocabulary.EOS:
        raise ValueError("Caption token sequence must end with EOS")
    if Vocabulary.PAD in q:
        raise ValueError(f"Caption contains PAD at position {q.index(Vocabulary.PAD)}")


def assemble_batch(model: TextModel, prefixes: list[torch.Tensor], captions: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-padded input embeddings (B, S, d1) and targets (B, S) with IGNORE_INDEX off-caption."""
    bos = model.tok_emb.weight[Vocabulary.BOS].reshape(1, -1)
    sequences, targets = [], []
    for prefix, q in zip(prefixes, captions):
        _check_caption_ids(q)
        previous = model.tok_emb.weight[torch.tensor(q[:-1], dtype=torch.long)]
        sequences.append(torch.cat([prefix.to(bos.dtype), bos, previous], dim=0))
        target = torch.full((prefix.shape[0] + len(q),), IGNORE_INDEX, dtype=torch.long)
        target[prefix.shape[0] :] = torch.tensor(q, dtype=torch.long)
        targets.append(target)
    embeds = pad_sequence(sequences, batch_first=True)
    return embeds, pad_sequence(targets, batch_first=True, padding_value=IGNORE_INDEX)


def caption_nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over target positions."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE_INDEX)


def token_logits(model: TextModel, c_t: torch.Tensor, q: list[int]) -> torch.Tensor:
    """Logits predicting q_1..q_n given the true prefix, (n, |V|)."""
    embeds, targets = assemble_batch(model, [c_t], [q])
    logits = model(embeds)[0]
    return logits[targets[0] != IGNORE_INDEX]


def text_loss(model: TextModel, c_t: torch.Tensor, q: list[int]) -> torch.Tensor:
    """L_t for one caption conditioned on prefix c_t."""
    embeds, targets = assemble_batch(model, [c_t], [q])
    return caption_nll(model(embeds), targets)


# --- training ----------------------------------------------------------------


@dataclass
class TextTrainLog:
    stage: str
    losses: list[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        head = self.losses[:INITIAL_WINDOW]
        return float(np.mean(head)) if head else float("nan")

    @property
    def final_loss(self) -> float:
        tail = self.losses[-max(1, len(self.losses) // 10) :]
        return float(np.mean(tail)) if tail else float("nan")


def build_text_model(world: WorldSpec, config: RunConfig) -> TextModel:
    return TextModel(
        Vocabulary.from_world(world),
        dim=config.text_dim,
        layers=config.text_layers,
        heads=config.text_heads,
    )


def pretrain_base(model: TextModel, world: WorldSpec, config: RunConfig, rng_seed: int) -> TextTrainLog:
    """
    Give the base decoder its grammar and vocabulary before any emotion is involved.

    Contents are empty, a bare concept, the neutral caption or a styled phrase
    such as "a sketch circle". Targets are the neutral caption or template
    captions whose cue words ignore emotion; the emotion slot is held at zero
    so later token training starts from the behaviour learned here.
    """
    if model.has_adapters:
        raise ValueError("pretrain_base must run before adapters are attached")

    log = TextTrainLog(stage="pretrain")
    if config.pretrain_steps == 0:
        return log

    rng = numpy_rng(rng_seed, TEXT_TRAIN, "pretrain")
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.pretrain_lr)
    null_slot = torch.zeros(1, model.dim, dtype=model.tok_emb.weight.dtype)

    for step in range(1, config.pretrain_steps + 1):
        prefixes, captions = [], []
        for _ in range(config.text_batch):
            concept = world.concepts[int(rng.integers(len(world.concepts)))]
            draw = rng.random()
            if draw < config.token_only_prob:
                content = ""
            elif draw < 0.5 + config.token_only_prob / 2:
                content = concept
            elif world.styles and rng.random() < 0.5:
                content = world.styled_content(world.styles[int(rng.integers(len(world.styles)))], concept)
            else:
                content = world.neutral_caption(concept)
            target = world.neutral_caption(concept) if rng.random() < 0.25 else agnostic_caption(world, concept, rng)
            prefixes.append(torch.cat([null_slot, embed_content(model, content)], dim=0))
            captions.append(model.vocab.encode_caption(target))

        embeds, targets = assemble_batch(model, prefixes, captions)
        loss = caption_nll(model(embeds), targets)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        log.losses.append(loss.item())

        if step % config.log_every == 0 or step == config.pretrain_steps:
            logger.info(f"[pretrain] step {step}/{config.pretrain_steps} loss={loss.item():.4f}")

    model.eval()
    return log


def train_text(model: TextModel, tokens: TextualEmotionTokens, dataset: list[Quadruplet], config: RunConfig, rng_seed: int) -> TextTrainLog:
    """
    Train the emotion tokens and adapters on (emotion, content, affective prompt).

    Every other weight is frozen and stays bitwise unchanged.
    """
    if not dataset:
        raise ValueError("train_text needs a nonempty dataset")
    if not model.has_adapters:
        model.attach_lora(config.lora_rank, config.lora_scale)

    model.freeze_base()
    tokens.weight.requires_grad_(True)
    params = [tokens.weight] + model.adapter_parameters()
    optimizer = torch.optim.Adam(params, lr=config.text_lr)

    contents = [torch.tensor(model.vocab.encode(q.content), dtype=torch.long) for q in dataset]
    captions = [model.vocab.encode_caption(q.affective_prompt) for q in dataset]
    emotions = [int(q.emotion) for q in dataset]

    rng = numpy_rng(rng_seed, TEXT_TRAIN, "emotion")
    log = TextTrainLog(stage="text")
    model.train()

    for step in range(1, config.text_steps + 1):
        batch = rng.integers(len(dataset), size=config.text_batch)
        drop = rng.random(config.text_batch) < config.token_only_prob
        prefixes = []
        for i, dropped in zip(batch, drop):
            f_t = model.tok_emb.weight[contents[i][:0] if dropped else contents[i]]
            prefixes.append(build_prompt_embedding(tokens, emotions[i], f_t))

        embeds, targets = assemble_batch(model, prefixes, [captions[i] for i in batch])
        loss = caption_nll(model(embeds), targets)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        log.losses.append(loss.item())

        if step % config.log_every == 0 or step == config.text_steps:
            logger.info(f"[text] step {step}/{config.text_steps} loss={loss.item():.4f}")

    model.eval()
    if log.losses and log.final_loss > 0.5 * log.initial_loss:
        logger.warning(
            f"Text loss fell from {log.initial_loss:.4f} to {log.final_loss:.4f}, less than 50%"
        )
    return log


# --- decoding ----------------------------------------------------------------


@torch.no_grad()
def sample_caption(
    model: TextModel,
    tokens: TextualEmotionTokens,
    k: EmotionCategory | int | None,
    content: str,
    decode: str = "greedy",
    temperature: float = 1.0,
    rng_seed: int = 0,
    weights=None,
    max_length: int = MAX_CAPTION_LENGTH,
) -> str:
    """
    Decode an affective caption until EOS or max_length words.

    Args:
        k: target emotion; ignored when weights are given
        decode: "greedy" or "temperature"
        weights: 8 simplex weights for a mixed emotion token
    """
    if decode not in ("greedy", "temperature"):
        raise ValueError(f"Unknown decode mode '{decode}'")
    if decode == "temperature" and temperature <= 0:
        raise ValueError(f"Temperature must be positive, got {temperature}")

    v = mix_textual_tokens(tokens, weights) if weights is not None else tokens.row(k)
    prefix = prepend_token(v, embed_content(model, content))
    generator = torch.Generator().manual_seed(rng_seed)
    emb = model.tok_emb.weight

    ids: list[int] = []
    for _ in range(max_length):
        seq = torch.cat([prefix, emb[Vocabulary.BOS : Vocabulary.BOS + 1], emb[torch.tensor(ids, dtype=torch.long)]], dim=0)
        logits = model(seq[None])[0, -1].clone()
        logits[Vocabulary.PAD] = float("-inf")
        logits[Vocabulary.BOS] = float("-inf")
        if decode == "greedy":
            nxt = int(torch.argmax(logits))
        else:
            probs = torch.softmax(logits / temperature, dim=-1)
            nxt = int(torch.multinomial(probs, 1, generator=generator))
        if nxt == Vocabulary.EOS:
            break
        ids.append(nxt)
    return model.vocab.decode(ids)


# --- checkpoints -------------------------------------------------------------


def save_text_checkpoint(path: str | Path, model: TextModel, tokens: TextualEmotionTokens, config: RunConfig) -> Path:
    meta = {
        "vocabulary": model.vocab.words[len(Vocabulary.SPECIALS) :],
        "dim": model.dim,
        "layers": len(model.blocks),
        "heads": model.blocks[0].attn.heads,
        "max_positions": model.max_positions,
        "lora_rank": model.lora_rank,
        "lora_scale": model.lora_scale,
        "config": config.model_dump(),
    }
    sections = {"text_model": model.state_dict(), "emotion_tokens": tokens.state_dict()}
    return checkpoint.save(path, sections, meta)


def load_text_checkpoint(path: str | Path) -> tuple[TextModel, TextualEmotionTokens]:
    sections, meta = checkpoint.load(path)
    model = TextModel(
        Vocabulary(meta["vocabulary"]),
        dim=meta["dim"],
        layers=meta["layers"],
        heads=meta["heads"],
        max_positions=meta["max_positions"],
    )
    if meta["lora_rank"]:
        model.attach_lora(meta["lora_rank"], meta["lora_scale"])
    model.load_state_dict(sections["text_model"])
    tokens = TextualEmotionTokens(meta["dim"])
    tokens.load_state_dict(sections["emotion_tokens"])
    model.eval()
    return model, tokens
