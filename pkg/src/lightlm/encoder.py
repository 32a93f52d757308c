"""Transformer encoder with cross-layer sharing, factorized embeddings, and a tied MLM head.

Post-sublayer normalization, GELU activations and learned absolute position
embeddings throughout. When ``config.share_layers`` is set a single physical
``EncoderLayer`` is applied ``num_layers`` times, so its parameters (and
their gradients, which autograd sums over applications) are shared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import EncoderConfig, count_parameters
from .errors import NumericError
from .tokenizer import EncodedSequence

LAYER_NORM_EPS = 1e-12
INIT_STD = 0.02


@dataclass
class EncodedBatch:
    """Stacked model inputs. All tensors are int64 of shape (batch, seq)."""

    input_ids: torch.Tensor
    attention_mask: torch.Tensor
    segment_ids: torch.Tensor

    def __len__(self) -> int:
        return self.input_ids.shape[0]

    def to(self, device) -> "EncodedBatch":
        return EncodedBatch(
            self.input_ids.to(device),
            self.attention_mask.to(device),
            self.segment_ids.to(device),
        )


def collate(sequences: Sequence[EncodedSequence]) -> EncodedBatch:
    """Stack equal-length encoded sequences into one batch."""
    return EncodedBatch(
        torch.tensor([s.ids for s in sequences], dtype=torch.long),
        torch.tensor([s.attention_mask for s in sequences], dtype=torch.long),
        torch.tensor([s.segment_ids for s in sequences], dtype=torch.long),
    )


class Embeddings(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.word_embeddings = nn.Embedding(config.vocab_size, config.embedding_size)
        self.position_embeddings = nn.Embedding(config.max_positions, config.embedding_size)
        self.token_type_embeddings = (
            nn.Embedding(2, config.embedding_size) if config.use_token_type else None
        )
        self.norm = nn.LayerNorm(config.embedding_size, eps=LAYER_NORM_EPS)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, input_ids: torch.Tensor, segment_ids: Optional[torch.Tensor]) -> torch.Tensor:
        seq_len = input_ids.shape[1]
        positions = torch.arange(seq_len, device=input_ids.device)
        x = self.word_embeddings(input_ids) + self.position_embeddings(positions)
        if self.token_type_embeddings is not None:
            if segment_ids is None:
                segment_ids = torch.zeros_like(input_ids)
            x = x + self.token_type_embeddings(segment_ids)
        return self.dropout(self.norm(x))


class EncoderLayer(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        H = config.hidden_size
        self.num_heads = config.num_heads
        self.head_dim = H // config.num_heads
        self.query = nn.Linear(H, H)
        self.key = nn.Linear(H, H)
        self.value = nn.Linear(H, H)
        self.attn_output = nn.Linear(H, H)
        self.attn_norm = nn.LayerNorm(H, eps=LAYER_NORM_EPS)
        self.ffn_in = nn.Linear(H, config.intermediate_size)
        self.ffn_out = nn.Linear(config.intermediate_size, H)
        self.ffn_norm = nn.LayerNorm(H, eps=LAYER_NORM_EPS)
        self.dropout = nn.Dropout(config.dropout)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        b, s, _ = x.shape
        return x.view(b, s, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, additive_mask: Optional[torch.Tensor]) -> torch.Tensor:
        b, s, h = x.shape
        q = self._split_heads(self.query(x))
        k = self._split_heads(self.key(x))
        v = self._split_heads(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if additive_mask is not None:
            scores = scores + additive_mask
        probs = self.dropout(torch.softmax(scores, dim=-1))
        context = (probs @ v).transpose(1, 2).reshape(b, s, h)
        x = self.attn_norm(x + self.dropout(self.attn_output(context)))
        inner = self.ffn_out(F.gelu(self.ffn_in(x)))
        return self.ffn_norm(x + self.dropout(inner))


class MlmHead(nn.Module):
    """Hidden-to-vocabulary head whose output matrix is the word embedding."""

    def __init__(self, config: EncoderConfig, word_embeddings: nn.Embedding):
        super().__init__()
        self.transform = nn.Linear(config.hidden_size, config.embedding_size)
        self.norm = nn.LayerNorm(config.embedding_size, eps=LAYER_NORM_EPS)
        self.decoder = nn.Linear(config.embedding_size, config.vocab_size)
        self.decoder.weight = word_embeddings.weight  # tied softmax

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.norm(F.gelu(self.transform(hidden))))


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.embeddings = Embeddings(config)
        self.projection = (
            nn.Linear(config.embedding_size, config.hidden_size)
            if config.embedding_size != config.hidden_size
            else None
        )
        if config.share_layers:
            self.layer = EncoderLayer(config)
        else:
            self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.num_layers))
        self.pooler = nn.Linear(config.hidden_size, config.hidden_size) if config.use_pooler else None
        self.mlm = MlmHead(config, self.embeddings.word_embeddings)

    def layer_stack(self) -> list[EncoderLayer]:
        """The L layer applications (the same module L times when shared)."""
        if self.config.share_layers:
            return [self.layer] * self.config.num_layers
        return list(self.layers)

    def forward(
        self,
        input_ids: torch.Tensor,
        attention_mask: Optional[torch.Tensor] = None,
        segment_ids: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        if input_ids.dim() != 2:
            raise ValueError(f"input_ids must be (batch, seq), got {tuple(input_ids.shape)}")
        if input_ids.shape[1] > self.config.max_positions:
            raise ValueError(
                f"sequence length {input_ids.shape[1]} exceeds max_positions "
                f"{self.config.max_positions}"
            )
        if input_ids.numel() and (
            input_ids.min().item() < 0 or input_ids.max().item() >= self.config.vocab_size
        ):
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")

        dtype = self.embeddings.word_embeddings.weight.dtype
        additive = None
        if attention_mask is not None:
            additive = torch.zeros(
                attention_mask.shape[0], 1, 1, attention_mask.shape[1], dtype=dtype,
                device=input_ids.device,
            )
            additive.masked_fill_(attention_mask[:, None, None, :] == 0, float("-inf"))

        x = self.embeddings(input_ids, segment_ids)
        if self.projection is not None:
            x = self.projection(x)
        for layer in self.layer_stack():
            x = layer(x, additive)
        return x

    def pooled(self, hidden: torch.Tensor) -> torch.Tensor:
        """[CLS] representation: tanh-pooled when a pooler exists, raw otherwise."""
        cls = hidden[:, 0]
        if self.pooler is None:
            return cls
        return torch.tanh(self.pooler(cls))


def build_model(config: EncoderConfig, seed: int, dtype: torch.dtype = torch.float32) -> Encoder:
    """Construct and deterministically initialize an encoder.

    Matrix weights are truncated normal (std 0.02, cut at two sigma), biases
    zero, normalization gains one. Two calls with the same (config, seed,
    dtype) produce bit-identical parameters.
    """
    model = Encoder(config).to(dtype)
    generator = torch.Generator().manual_seed(seed)
    modules = dict(model.named_modules())
    with torch.no_grad():
        for name, param in model.named_parameters():
            owner, _, leaf = name.rpartition(".")
            module = modules[owner]
            if isinstance(module, nn.LayerNorm):
                if leaf == "weight":
                    param.fill_(1.0)
                else:
                    param.zero_()
            elif leaf == "weight":
                nn.init.trunc_normal_(
                    param, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=generator
                )
            else:
                param.zero_()
    return model


def forward(model: Encoder, batch: EncodedBatch, train_mode: bool = False) -> torch.Tensor:
    """Run the encoder over a batch, controlling dropout via ``train_mode``."""
    was_training = model.training
    model.train(train_mode)
    try:
        return model(batch.input_ids, batch.attention_mask, batch.segment_ids)
    finally:
        model.train(was_training)


def mlm_logits(
    model: Encoder, hidden: torch.Tensor, positions: Sequence[tuple[int, int]]
) -> torch.Tensor:
    """Vocabulary logits at the given (batch, seq) positions: (len(positions), V)."""
    if len(positions) == 0:
        return hidden.new_zeros((0, model.config.vocab_size))
    idx = torch.as_tensor(list(positions), dtype=torch.long, device=hidden.device)
    if idx.dim() != 2 or idx.shape[1] != 2:
        raise ValueError("positions must be (batch, seq) index pairs")
    b, s = hidden.shape[0], hidden.shape[1]
    if idx[:, 0].min() < 0 or idx[:, 0].max() >= b or idx[:, 1].min() < 0 or idx[:, 1].max() >= s:
        raise ValueError(f"position out of bounds for hidden of shape {tuple(hidden.shape)}")
    return model.mlm(hidden[idx[:, 0], idx[:, 1]])


def named_parameter_dict(model: nn.Module) -> dict[str, nn.Parameter]:
    """Parameters by name, tied tensors listed once (under their first name)."""
    return dict(model.named_parameters())


def allocated_parameter_count(model: nn.Module) -> int:
    """Number of scalars actually allocated (tied tensors counted once)."""
    return sum(p.numel() for p in model.parameters())


def gradients(
    model: nn.Module, loss_fn: Callable[[], torch.Tensor]
) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every named parameter.

    Parameters the loss does not reach get zero gradients. Raises
    ``NumericError`` on a non-finite loss before any gradient is formed.
    """
    loss = loss_fn()
    if loss.dim() != 0:
        raise ValueError("loss_fn must return a scalar")
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss: {loss.item()!r}")
    named = named_parameter_dict(model)
    grads = torch.autograd.grad(loss, list(named.values()), allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(named.items(), grads)
    }


def check_count_matches_allocation(config: EncoderConfig, model: Encoder) -> bool:
    return count_parameters(config) == allocated_parameter_count(model)
