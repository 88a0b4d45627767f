"""Training loops over packed sequences produced by the resforge CLI.

Each packed sequence carries a segment map; from it we derive the three
training-time arrays: per-document restarting positions, a same-document
causal attention matrix, and next-token labels that never cross a document
boundary or point into padding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .model import TinyGPT

IGNORE_INDEX = -100


class DivergenceError(RuntimeError):
    """Training loss went non-finite; message carries the seed for replay."""


@dataclass
class PackedExample:
    tokens: np.ndarray  # [S] int64
    positions: np.ndarray  # [S] int64, restarting per segment
    allowed: np.ndarray  # [S, S] bool, same-segment causal
    labels: np.ndarray  # [S] int64 with IGNORE_INDEX holes


def example_from_packed(obj: dict) -> PackedExample:
    tokens = np.asarray(obj["tokens"], dtype=np.int64)
    seq_len = tokens.shape[0]
    positions = np.zeros(seq_len, dtype=np.int64)
    allowed = np.zeros((seq_len, seq_len), dtype=bool)
    labels = np.full(seq_len, IGNORE_INDEX, dtype=np.int64)
    for segment in obj["segments"]:
        begin = int(segment["start"])
        end = begin + int(segment["length"])
        positions[begin:end] = np.arange(end - begin)
        allowed[begin:end, begin:end] = np.tril(
            np.ones((end - begin, end - begin), dtype=bool)
        )
        labels[begin : end - 1] = tokens[begin + 1 : end]
    return PackedExample(tokens=tokens, positions=positions, allowed=allowed, labels=labels)


def load_packed_examples(path) -> List[PackedExample]:
    examples = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "seq_index" not in obj:
            continue  # trailing statistics line
        examples.append(example_from_packed(obj))
    if not examples:
        raise ValueError(f"{path} contains no packed sequences")
    return examples


def _batch(examples: List[PackedExample], picks: np.ndarray) -> Tuple[torch.Tensor, ...]:
    tokens = torch.from_numpy(np.stack([examples[i].tokens for i in picks]))
    positions = torch.from_numpy(np.stack([examples[i].positions for i in picks]))
    allowed = torch.from_numpy(np.stack([examples[i].allowed for i in picks]))
    labels = torch.from_numpy(np.stack([examples[i].labels for i in picks]))
    return tokens, positions, allowed, labels


def _loss(model: TinyGPT, batch: Tuple[torch.Tensor, ...]) -> torch.Tensor:
    tokens, positions, allowed, labels = batch
    logits = model(tokens, positions=positions, allowed=allowed)
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), labels.reshape(-1),
        ignore_index=IGNORE_INDEX,
    )


def train(
    model: TinyGPT,
    examples: List[PackedExample],
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    adam_eps: float = 1e-8,
    log_every: Optional[int] = None,
) -> List[float]:
    """Adam over packed examples; returns the per-step loss trace.

    Fine-tuning stages pass a large ``adam_eps`` so that weights with only
    tiny, sign-consistent gradients (e.g. unembeddings of tokens absent
    from the stage's data) move proportionally to their gradients instead
    of being normalized up to full-size steps; otherwise every stage bakes
    a global suppression of the absent vocabulary into its weight delta.

    Aborts with :class:`DivergenceError` the moment the loss goes
    non-finite, reporting the seed so the run can be replayed.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    # No weight decay: later stages' weight deltas must stay local to what
    # the data teaches, not include a uniform shrink of every parameter.
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=lr, weight_decay=0.0, eps=adam_eps
    )
    model.train()
    losses: List[float] = []
    for step in range(steps):
        picks = rng.integers(0, len(examples), size=batch_size)
        loss = _loss(model, _batch(examples, picks))
        if not torch.isfinite(loss):
            raise DivergenceError(
                f"loss became non-finite at step {step} (seed {seed})"
            )
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        optimizer.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            print(f"  step {step:4d} loss {losses[-1]:.4f}")
    return losses


@torch.no_grad()
def mean_loss(model: TinyGPT, examples: List[PackedExample], batch_size: int = 32) -> float:
    """Deterministic mean next-token loss over every example, in order."""
    model.eval()
    total = 0.0
    weight = 0
    for start in range(0, len(examples), batch_size):
        picks = np.arange(start, min(start + batch_size, len(examples)))
        tokens, positions, allowed, labels = _batch(examples, picks)
        logits = model(tokens, positions=positions, allowed=allowed)
        flat_logits = logits.reshape(-1, logits.shape[-1])
        flat_labels = labels.reshape(-1)
        mask = flat_labels != IGNORE_INDEX
        losses = F.cross_entropy(
            flat_logits[mask], flat_labels[mask], reduction="sum"
        )
        total += float(losses)
        weight += int(mask.sum())
    if weight == 0:
        raise ValueError("no labeled positions to evaluate")
    return total / weight
