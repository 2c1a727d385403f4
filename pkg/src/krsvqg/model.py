"""Image encoder, caption decoder, knowledge encoder and question decoder.

The vision module is the image encoder plus caption decoder; the language
module is the text encoder plus question decoder. Parameter names are
prefixed by their component so checkpoints can be transplanted per module.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import torch
from torch import nn

from .layers import INIT_STD, TransformerBlock
from .tokenizer import BOS, EOS, PAD, TokenSequence
from .validation import as_id_tensor, check_images, check_vocab_range, padding_mask

COMPONENTS = ("image_encoder", "caption_decoder", "text_encoder", "question_decoder")
VISION_COMPONENTS = ("image_encoder", "caption_decoder")
LANGUAGE_COMPONENTS = ("text_encoder", "question_decoder")


@dataclass
class ModelConfig:
    vocab_size: int
    image_size: int = 64
    patch_size: int = 16
    width: int = 128
    heads: int = 4
    image_blocks: int = 2
    caption_blocks: int = 2
    text_blocks: int = 2
    question_blocks: int = 2
    mlp_ratio: int = 4
    caption_max_len: int = 40
    knowledge_max_len: int = 30
    question_max_len: int = 30
    dropout: float = 0.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size %d is not divisible by patch_size %d"
                             % (self.image_size, self.patch_size))
        if self.width % self.heads:
            raise ValueError("width %d is not divisible by %d heads" % (self.width, self.heads))
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the special tokens plus one word")

    @classmethod
    def full_size(cls, vocab_size: int, **overrides) -> "ModelConfig":
        """384-pixel inputs, 16-pixel patches, width 768 and 12 heads."""
        base = dict(image_size=384, patch_size=16, width=768, heads=12)
        base.update(overrides)
        return cls(vocab_size=vocab_size, **base)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, value in d.items():
            if key not in kinds:
                raise KeyError("unknown model config key %r" % key)
            out[key] = float(value) if kinds[key] in (float, "float") else int(value)
        return cls(**out)


@dataclass
class Features:
    """A (batch, length, width) activation block with its padding mask."""

    values: torch.Tensor
    source: str
    padding: Optional[torch.Tensor] = None

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass
class DecodingParams:
    beam_size: int = 1
    max_len: Optional[int] = None


def _trunc_normal(*shape):
    p = nn.Parameter(torch.empty(*shape))
    nn.init.trunc_normal_(p, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
    return p


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.patch_embed = nn.Linear(cfg.patch_size * cfg.patch_size * 3, cfg.width)
        nn.init.trunc_normal_(self.patch_embed.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        nn.init.zeros_(self.patch_embed.bias)
        self.cls_token = _trunc_normal(1, 1, cfg.width)
        self.pos_embed = _trunc_normal(1, cfg.num_patches + 1, cfg.width)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads, cfg.mlp_ratio * cfg.width, dropout=cfg.dropout)
            for _ in range(cfg.image_blocks))

    def patch_embeddings(self, images: torch.Tensor) -> torch.Tensor:
        b, h, w, c = images.shape
        p = self.patch_size
        patches = images.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
        return self.patch_embed(patches.reshape(b, (h // p) * (w // p), p * p * c))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch_embeddings(images)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return x


class TextTransformer(nn.Module):
    """Token + position embeddings, blocks cross-attending to a memory sequence.

    ``causal=True`` gives the decoder variant, whose output projection is
    tied to the token embedding.
    """

    def __init__(self, cfg: ModelConfig, n_blocks: int, max_len: int, causal: bool):
        super().__init__()
        self.causal = causal
        self.max_len = max_len
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.width)
        nn.init.trunc_normal_(self.token_embed.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        self.pos_embed = _trunc_normal(1, max_len, cfg.width)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads, cfg.mlp_ratio * cfg.width, causal=causal,
                             cross=True, dropout=cfg.dropout)
            for _ in range(n_blocks))

    def forward(self, ids, memory, memory_padding=None):
        pad = padding_mask(ids)
        x = self.token_embed(ids) + self.pos_embed[:, : ids.shape[1]]
        for block in self.blocks:
            x = block(x, padding=pad, memory=memory, memory_padding=memory_padding)
        return x

    def logits(self, hidden):
        return hidden @ self.token_embed.weight.t()


class KRSVQG(nn.Module):
    """Knowledge-aware visual question generator.

    Data flow: image -> f_I; (f_I, caption) -> f_C; (knowledge, f_I) -> f_T;
    question decoder cross-attends to the caption-first concatenation
    [f_C; f_T].
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.image_encoder = ImageEncoder(config)
        self.caption_decoder = TextTransformer(config, config.caption_blocks, config.caption_max_len, causal=True)
        self.text_encoder = TextTransformer(config, config.text_blocks, config.knowledge_max_len, causal=False)
        self.question_decoder = TextTransformer(config, config.question_blocks, config.question_max_len, causal=True)

    @property
    def dtype(self):
        return self.image_encoder.pos_embed.dtype

    def _ids(self, ids, max_len, name):
        t = as_id_tensor(ids, max_len, name).to(self.image_encoder.pos_embed.device)
        check_vocab_range(t, self.config.vocab_size, name)
        # sequences keep only as many positions as their longest member uses
        width = max(int((t != PAD).sum(1).max()), 1)
        return t[:, :width]

    # -- components ---------------------------------------------------------

    def encode_image(self, images) -> Features:
        t = check_images(images, self.config.image_size).to(self.dtype)
        return Features(self.image_encoder(t), "image")

    def caption_forward(self, f_image: Features, caption):
        """Teacher-forced caption pass; returns (f_C, logits)."""
        ids = self._ids(caption, self.config.caption_max_len, "caption")
        hidden = self.caption_decoder(ids, f_image.values, f_image.padding)
        f_c = Features(hidden, "caption", padding_mask(ids))
        return f_c, self.caption_decoder.logits(hidden)

    def encode_knowledge(self, knowledge, f_image: Features) -> Features:
        ids = self._ids(knowledge, self.config.knowledge_max_len, "knowledge")
        if (ids[:, 0] == PAD).any():
            raise ValueError("knowledge required")
        hidden = self.text_encoder(ids, f_image.values, f_image.padding)
        return Features(hidden, "knowledge", padding_mask(ids))

    def question_hidden(self, f_caption: Features, f_knowledge: Features, question):
        if f_caption.values.shape[-1] != f_knowledge.values.shape[-1]:
            raise ValueError("caption and knowledge feature widths differ")
        if f_caption.values.shape[0] != f_knowledge.values.shape[0]:
            raise ValueError("caption and knowledge feature batch sizes differ")
        ids = self._ids(question, self.config.question_max_len, "question")
        memory, memory_padding = fuse(f_caption, f_knowledge)
        return self.question_decoder(ids, memory, memory_padding)

    def question_forward(self, f_caption: Features, f_knowledge: Features, question):
        """Logits of the question decoder over [f_C; f_T]."""
        return self.question_decoder.logits(self.question_hidden(f_caption, f_knowledge, question))

    def forward(self, images, caption, knowledge, question):
        """Teacher-forced pass through all four components.

        Returns (caption_logits, question_logits).
        """
        f_i = self.encode_image(images)
        f_c, caption_logits = self.caption_forward(f_i, caption)
        f_t = self.encode_knowledge(knowledge, f_i)
        return caption_logits, self.question_forward(f_c, f_t, question)

    # -- generation ---------------------------------------------------------

    @torch.no_grad()
    def generate_caption(self, f_image: Features, decoding: DecodingParams | None = None):
        """Decode a caption from BOS; returns (TokenSequence, f_C over the generated tokens)."""
        decoding = decoding or DecodingParams()
        max_len = min(decoding.max_len or self.config.caption_max_len, self.config.caption_max_len)

        def step(prefix):
            hidden = self.caption_decoder(prefix, f_image.values, f_image.padding)
            return self.caption_decoder.logits(hidden[:, -1]).log_softmax(-1)[0]

        ids = _decode(step, max_len, decoding.beam_size, self.image_encoder.pos_embed.device)
        f_c, _ = self.caption_forward(f_image, [ids])
        return TokenSequence(tuple(ids) + (PAD,) * (self.config.caption_max_len - len(ids))), f_c

    @torch.no_grad()
    def generate_question(self, f_caption: Features, f_knowledge: Features,
                          decoding: DecodingParams | None = None) -> TokenSequence:
        decoding = decoding or DecodingParams()
        max_len = min(decoding.max_len or self.config.question_max_len, self.config.question_max_len)
        memory, memory_padding = fuse(f_caption, f_knowledge)

        def step(prefix):
            hidden = self.question_decoder(prefix, memory, memory_padding)
            return self.question_decoder.logits(hidden[:, -1]).log_softmax(-1)[0]

        ids = _decode(step, max_len, decoding.beam_size, self.image_encoder.pos_embed.device)
        return TokenSequence(tuple(ids) + (PAD,) * (self.config.question_max_len - len(ids)))

    def component_parameters(self, component: str) -> dict[str, nn.Parameter]:
        if component not in COMPONENTS:
            raise KeyError(component)
        return {n: p for n, p in self.named_parameters() if n.split(".", 1)[0] == component}


def fuse(f_caption: Features, f_knowledge: Features):
    """Row-wise concatenation [f_C; f_T] with the matching key-padding mask."""
    memory = torch.cat([f_caption.values, f_knowledge.values], dim=1)

    def pad_of(f):
        if f.padding is None:
            return torch.zeros(f.values.shape[:2], dtype=torch.bool, device=f.values.device)
        return f.padding

    return memory, torch.cat([pad_of(f_caption), pad_of(f_knowledge)], dim=1)


def _decode(step, max_len: int, beam_size: int, device) -> list[int]:
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if beam_size == 1:
        return greedy_search(step, max_len, device)
    return beam_search(step, max_len, beam_size, device)


def _no_special(logp):
    # PAD and BOS are never valid continuations
    logp = logp.clone()
    logp[[PAD, BOS]] = float("-inf")
    return logp


def greedy_search(step, max_len: int, device="cpu") -> list[int]:
    ids = [BOS]
    while len(ids) < max_len:
        nxt = int(_no_special(step(torch.tensor([ids], device=device))).argmax())
        ids.append(nxt)
        if nxt == EOS:
            break
    return ids


def beam_search(step, max_len: int, beam_size: int, device="cpu") -> list[int]:
    """Beam search on summed log-probabilities, no length normalization."""
    alive = [([BOS], 0.0)]
    finished: list[tuple[list[int], float]] = []
    while alive and len(alive[0][0]) < max_len:
        candidates = []
        for rank, (ids, score) in enumerate(alive):
            logp = _no_special(step(torch.tensor([ids], device=device)))
            top = torch.topk(logp, min(beam_size, logp.shape[0] - 2))
            for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                candidates.append((score + lp, rank, tok, ids))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        alive = []
        for score, _, tok, ids in candidates[:beam_size]:
            (finished if tok == EOS else alive).append((ids + [tok], score))
        best_done = max((s for _, s in finished), default=float("-inf"))
        # scores only fall as hypotheses grow
        alive = [h for h in alive if h[1] > best_done]
    pool = finished or alive
    return max(pool, key=lambda h: h[1])[0] if pool else [BOS]
