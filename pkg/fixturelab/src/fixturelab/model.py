"""Tiny decoder-only transformer (2 layers, d_model 64, vocab 256).

Small enough to train in seconds on CPU yet expressive enough to learn
both the bigram domains and the echo instruction template. Supports
per-document attention masks and per-document position ids so it can be
trained directly on packed sequences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn

from .tasks import VOCAB_SIZE


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    max_seq_len: int = 64
    mlp_mult: int = 4
    # Dropout forces circuits to be encoded redundantly, which is what lets
    # them survive having another stage's weight delta added on top.
    dropout: float = 0.15


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = nn.MultiheadAttention(
            config.d_model, config.n_heads, batch_first=True
        )
        self.ln2 = nn.LayerNorm(config.d_model)
        hidden = config.d_model * config.mlp_mult
        self.mlp = nn.Sequential(
            nn.Linear(config.d_model, hidden),
            nn.GELU(),
            nn.Linear(hidden, config.d_model),
            nn.Dropout(config.dropout),
        )
        self.attn_drop = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor) -> torch.Tensor:
        normed = self.ln1(x)
        attended, _ = self.attn(
            normed, normed, normed, attn_mask=attn_mask, need_weights=False
        )
        x = x + self.attn_drop(attended)
        return x + self.mlp(self.ln2(x))


class TinyGPT(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.max_seq_len, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(
        self,
        tokens: torch.Tensor,
        positions: Optional[torch.Tensor] = None,
        allowed: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """tokens [B, S] -> logits [B, S, vocab].

        ``allowed`` is a boolean [B, S, S] matrix (True = query may attend
        to key); plain causal attention when omitted. ``positions`` default
        to 0..S-1 per row.
        """
        batch, seq_len = tokens.shape
        if positions is None:
            positions = torch.arange(seq_len, device=tokens.device).expand(batch, -1)
        x = self.tok_emb(tokens) + self.pos_emb(positions)

        if allowed is None:
            allowed = torch.tril(
                torch.ones(seq_len, seq_len, dtype=torch.bool, device=tokens.device)
            ).expand(batch, -1, -1)
        # Fully-masked rows (padding queries) would produce NaN through
        # softmax; let them attend to themselves, their outputs are ignored.
        self_loop = torch.eye(seq_len, dtype=torch.bool, device=tokens.device)
        allowed = allowed | self_loop
        float_mask = torch.zeros(allowed.shape, dtype=x.dtype, device=tokens.device)
        float_mask.masked_fill_(~allowed, float("-inf"))
        # MultiheadAttention wants one mask per head: [B * heads, S, S].
        float_mask = float_mask.repeat_interleave(self.config.n_heads, dim=0)

        for block in self.blocks:
            x = block(x, float_mask)
        return self.lm_head(self.ln_f(x))

    @torch.no_grad()
    def greedy_complete(self, prompt: list[int], steps: int) -> list[int]:
        """Deterministically extend a prompt by ``steps`` tokens."""
        self.eval()
        tokens = list(prompt)
        for _ in range(steps):
            window = tokens[-self.config.max_seq_len :]
            logits = self.forward(torch.tensor([window], dtype=torch.long))
            tokens.append(int(logits[0, -1].argmax()))
        return tokens[len(prompt) :]

    # -- container round trip ------------------------------------------------

    def export_arrays(self) -> Dict[str, np.ndarray]:
        return {
            name: tensor.detach().cpu().numpy().astype(np.float32)
            for name, tensor in self.state_dict().items()
        }

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        state = {name: torch.from_numpy(np.ascontiguousarray(values))
                 for name, values in arrays.items()}
        self.load_state_dict(state)


def fresh_model(seed: int, config: ModelConfig = ModelConfig()) -> TinyGPT:
    torch.manual_seed(seed)
    model = TinyGPT(config)
    if model.param_count() > 1_000_000:
        raise RuntimeError(f"model too large: {model.param_count()} parameters")
    return model
