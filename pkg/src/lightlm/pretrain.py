"""Masked-language-model pretraining, optionally with sentence-order prediction.

The loop is mask -> forward -> losses -> gradients -> optimizer step with the
rate from the warmup/decay schedule. Runs are reproducible bit for bit for a
fixed seed in single-threaded mode. Checkpoints and an append-only loss
trace (step, lr, mlm_loss, sop_loss) are written under ``out_dir`` when given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import save_model
from .config import EncoderConfig
from .encoder import EncodedBatch, Encoder, build_model, collate
from .errors import NumericError
from .optim import Lamb
from .schedule import TrainingSchedule, lr_at
from .tokenizer import EncodedSequence, SubwordVocabulary

IGNORE_INDEX = -100

# Update rule recorded into checkpoint manifests so runs are attributable.
LAMB_VARIANT = "lamb: bias-corrected moments, decay inside the trust-ratio direction"


@dataclass
class MaskedBatch:
    """A corrupted batch: labels hold original ids at corrupted positions only."""

    input_ids: torch.Tensor
    attention_mask: torch.Tensor
    segment_ids: torch.Tensor
    labels: torch.Tensor
    sop_labels: Optional[torch.Tensor] = None


def _special_mask(ids: torch.Tensor, vocab: SubwordVocabulary) -> torch.Tensor:
    specials = torch.tensor(sorted(vocab.special_ids), device=ids.device)
    return torch.isin(ids, specials)


def _select_ngram(
    eligible: torch.Tensor, mask_prob: float, max_ngram: int, rng: torch.Generator
) -> torch.Tensor:
    """Contiguous up-to-n-gram selection covering about mask_prob of eligible."""
    selected = torch.zeros_like(eligible)
    weights = torch.tensor([1.0 / n for n in range(1, max_ngram + 1)])
    for b in range(eligible.shape[0]):
        positions = eligible[b].nonzero().flatten()
        if positions.numel() == 0:
            continue
        budget = int(round(mask_prob * positions.numel()))
        order = positions[torch.randperm(positions.numel(), generator=rng)]
        taken = 0
        for start in order.tolist():
            if taken >= budget:
                break
            if selected[b, start]:
                continue
            n = int(torch.multinomial(weights, 1, generator=rng).item()) + 1
            for offset in range(n):
                pos = start + offset
                if pos >= eligible.shape[1] or not eligible[b, pos] or selected[b, pos]:
                    break
                selected[b, pos] = True
                taken += 1
    return selected


def mask_tokens(
    batch: EncodedBatch,
    vocab: SubwordVocabulary,
    mask_prob: float,
    rng: torch.Generator,
    max_ngram: int = 1,
    sop_labels: Optional[torch.Tensor] = None,
) -> MaskedBatch:
    """Corrupt ~mask_prob of the non-special positions.

    Of the selected positions 80% become [MASK], 10% a random non-special id,
    10% stay unchanged; labels record the original id at selected positions
    and IGNORE_INDEX elsewhere. Special-token positions are never selected.
    """
    if not 0.0 <= mask_prob <= 1.0:
        raise ValueError(f"mask_prob must be in [0, 1], got {mask_prob}")
    ids = batch.input_ids
    eligible = (batch.attention_mask == 1) & ~_special_mask(ids, vocab)
    if mask_prob == 0.0:
        selected = torch.zeros_like(eligible)
    elif max_ngram <= 1:
        draws = torch.rand(ids.shape, generator=rng, dtype=torch.float64)
        selected = (draws < mask_prob) & eligible
    else:
        selected = _select_ngram(eligible, mask_prob, max_ngram, rng)

    labels = torch.where(selected, ids, torch.full_like(ids, IGNORE_INDEX))
    corrupted = ids.clone()
    action = torch.rand(ids.shape, generator=rng, dtype=torch.float64)
    use_mask = selected & (action < 0.8)
    use_random = selected & (action >= 0.8) & (action < 0.9)
    corrupted[use_mask] = vocab.mask_id
    n_random = int(use_random.sum())
    if n_random:
        # non-special ids start after the five specials (ids 0..4)
        corrupted[use_random] = torch.randint(
            len(vocab.special_ids), vocab.target_size, (n_random,), generator=rng
        )
    return MaskedBatch(
        corrupted, batch.attention_mask, batch.segment_ids, labels, sop_labels
    )


class SopHead(nn.Module):
    """Two-way order classifier over the pooled [CLS] representation."""

    def __init__(self, hidden_size: int, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.classifier = nn.Linear(hidden_size, 2)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            nn.init.trunc_normal_(
                self.classifier.weight, std=0.02, a=-0.04, b=0.04, generator=generator
            )
            self.classifier.bias.zero_()
        self.to(dtype)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.classifier(pooled)


@dataclass
class PretrainLosses:
    mlm_loss: torch.Tensor
    sop_loss: torch.Tensor
    has_mlm_labels: bool


def pretrain_losses(
    model: Encoder, masked: MaskedBatch, sop_head: Optional[SopHead] = None
) -> PretrainLosses:
    """Mean cross-entropy over labeled positions, plus the order loss when active.

    With zero labeled positions the MLM term is defined as 0 and flagged.
    """
    hidden = model(masked.input_ids, masked.attention_mask, masked.segment_ids)
    positions = masked.labels != IGNORE_INDEX
    zero = hidden.sum() * 0.0  # keeps the graph connected for degenerate cases
    if positions.any():
        logits = model.mlm(hidden[positions])
        mlm = F.cross_entropy(logits, masked.labels[positions])
        has = True
    else:
        mlm = zero
        has = False
    if sop_head is not None and masked.sop_labels is not None:
        sop = F.cross_entropy(sop_head(model.pooled(hidden)), masked.sop_labels)
    else:
        sop = zero
    return PretrainLosses(mlm, sop, has)


def build_pair_sequence(
    tokens_a: Sequence[int],
    tokens_b: Sequence[int],
    vocab: SubwordVocabulary,
    max_len: int,
) -> EncodedSequence:
    """[CLS] a [SEP] b [SEP] from already-tokenized segments, padded to max_len."""
    a, b = list(tokens_a), list(tokens_b)
    budget = max_len - 3
    while len(a) + len(b) > budget:
        (b if len(b) >= len(a) else a).pop()
    ids = [vocab.cls_id] + a + [vocab.sep_id] + b + [vocab.sep_id]
    segments = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    attention = [1] * len(ids)
    while len(ids) < max_len:
        ids.append(vocab.pad_id)
        segments.append(0)
        attention.append(0)
    return EncodedSequence(ids, attention, segments, [None] * len(ids))


@dataclass
class TraceRecord:
    step: int
    lr: float
    mlm_loss: float
    sop_loss: float


TRACE_HEADER = "step\tlr\tmlm_loss\tsop_loss"


def append_trace(path, records: Sequence[TraceRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not path.exists()
    with open(path, "a", encoding="utf-8") as f:
        if new_file:
            f.write(TRACE_HEADER + "\n")
        for r in records:
            f.write(f"{r.step}\t{r.lr!r}\t{r.mlm_loss!r}\t{r.sop_loss!r}\n")


def read_trace(path) -> list[TraceRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != TRACE_HEADER:
            raise NumericError(f"{path}: unexpected trace header {header!r}")
        for line in f:
            step, lr, mlm, sop = line.rstrip("\n").split("\t")
            records.append(TraceRecord(int(step), float(lr), float(mlm), float(sop)))
    return records


@dataclass
class PretrainResult:
    model: Encoder
    sop_head: Optional[SopHead]
    trace: list[TraceRecord]
    checkpoint_dir: Optional[Path]


Corpus = Union[Sequence[EncodedSequence], Sequence[tuple[Sequence[int], Sequence[int]]]]


def _make_optimizer(name: str, params, weight_decay: float):
    if name == "lamb":
        return Lamb(params, lr=0.0, weight_decay=weight_decay)
    if name == "adamw":
        return torch.optim.AdamW(params, lr=0.0, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}; options: lamb, adamw")


def pretrain(
    config: EncoderConfig,
    schedule: TrainingSchedule,
    corpus: Corpus,
    vocab: SubwordVocabulary,
    *,
    seed: int = 0,
    steps_override: Optional[int] = None,
    mask_prob: float = 0.15,
    max_ngram: int = 1,
    use_sop: bool = False,
    optimizer_name: str = "lamb",
    weight_decay: float = 0.0,
    max_len: int = 64,
    out_dir=None,
    checkpoint_every: Optional[int] = None,
    log_every: int = 10,
    dtype: torch.dtype = torch.float32,
    model: Optional[Encoder] = None,
    start_step: int = 0,
) -> PretrainResult:
    """Run the masked-LM loop; ``steps_override`` shortens the schedule's run."""
    if not corpus:
        raise ValueError("pretrain needs a non-empty tokenized corpus")
    steps = steps_override if steps_override is not None else schedule.total_steps
    torch.manual_seed(seed)
    if model is None:
        model = build_model(config, seed=seed, dtype=dtype)
    sop_head = SopHead(config.hidden_size, seed=seed + 1, dtype=dtype) if use_sop else None

    params = list(model.parameters()) + (list(sop_head.parameters()) if sop_head else [])
    optimizer = _make_optimizer(optimizer_name, params, weight_decay)
    rng = torch.Generator().manual_seed(seed)

    out_dir = Path(out_dir) if out_dir is not None else None
    trace_path = out_dir / "traces" / "pretrain.tsv" if out_dir else None
    extra = {"optimizer_variant": LAMB_VARIANT if optimizer_name == "lamb" else "adamw"}

    def save(step: int, tag: str) -> Optional[Path]:
        if out_dir is None:
            return None
        return save_model(out_dir / "checkpoints" / tag, model, extra={**extra, "step": step})

    model.train()
    trace: list[TraceRecord] = []
    pending: list[TraceRecord] = []
    last_dir = None
    for step in range(start_step, steps):
        batch, sop_labels = _draw_batch(corpus, schedule.batch_size, vocab, max_len, use_sop, rng)
        masked = mask_tokens(batch, vocab, mask_prob, rng, max_ngram=max_ngram,
                             sop_labels=sop_labels)
        losses = pretrain_losses(model, masked, sop_head)
        total = losses.mlm_loss + losses.sop_loss
        if not torch.isfinite(total):
            save(step, "last-good")
            if pending and trace_path:
                append_trace(trace_path, pending)
            raise NumericError(f"non-finite loss at step {step}; last good checkpoint kept")

        lr = lr_at(min(step + 1, schedule.total_steps), schedule)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()

        if (step + 1) % log_every == 0 or step + 1 == steps:
            record = TraceRecord(
                step + 1, lr, losses.mlm_loss.detach().item(), losses.sop_loss.detach().item()
            )
            trace.append(record)
            pending.append(record)
        if checkpoint_every and (step + 1) % checkpoint_every == 0:
            last_dir = save(step + 1, f"step-{step + 1:08d}")
            if pending and trace_path:
                append_trace(trace_path, pending)
                pending = []

    model.eval()
    final_dir = save(steps, "final") or last_dir
    if pending and trace_path:
        append_trace(trace_path, pending)
    return PretrainResult(model, sop_head, trace, final_dir)


def _draw_batch(
    corpus: Corpus,
    batch_size: int,
    vocab: SubwordVocabulary,
    max_len: int,
    use_sop: bool,
    rng: torch.Generator,
) -> tuple[EncodedBatch, Optional[torch.Tensor]]:
    n = len(corpus)
    if n <= batch_size:
        idx = list(range(n))
    else:
        idx = torch.randint(n, (batch_size,), generator=rng).tolist()
    if not use_sop:
        return collate([corpus[i] for i in idx]), None
    swap = torch.rand(len(idx), generator=rng) < 0.5
    sequences = []
    for j, i in enumerate(idx):
        a, b = corpus[i]
        if bool(swap[j]):
            a, b = b, a
        sequences.append(build_pair_sequence(a, b, vocab, max_len))
    return collate(sequences), swap.long()


def eval_mlm_loss(
    model: Encoder,
    corpus: Sequence[EncodedSequence],
    vocab: SubwordVocabulary,
    mask_prob: float = 0.15,
    seed: int = 0,
) -> float:
    """MLM loss on a fixed corpus with a deterministic mask, dropout off."""
    rng = torch.Generator().manual_seed(seed)
    masked = mask_tokens(collate(corpus), vocab, mask_prob, rng)
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            return float(pretrain_losses(model, masked).mlm_loss)
    finally:
        model.train(was)
