"""Seeded synthetic tasks standing in for the two pre-training corpora and
the instruction dataset.

Vocabulary layout (256 ids):
    0            padding
    2 .. 129     first-domain content tokens
    130 .. 229   second-domain content tokens (disjoint range, so a plain
                 token-range occupancy statistic separates the domains)
    230 .. 245   instruction payload tokens
    250/251/252  ASK / ANSWER / END markers used by the instruction template

Both domains emit documents from a seeded bigram chain over their own token
range, so next-token loss on a domain is learnable and domain-specific.
The instruction task is echo-style: given ASK payload ANSWER, the correct
completion repeats the payload and closes with END. Payload tokens live in
their own reserved range, like the special tokens of real chat templates:
they never occur in raw pre-training text, so instruction-following is a
capability of its own rather than a biased re-use of the language model's
content statistics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

VOCAB_SIZE = 256
PAD_ID = 0
D1_RANGE = (2, 130)
D2_RANGE = (130, 230)
PAYLOAD_RANGE = (230, 246)
ASK_ID = 250
ANSWER_ID = 251
END_ID = 252

PAYLOAD_LEN = 4


NOISE_RATE = 0.02
NOISE_RANGE = (2, 246)  # full content + payload space


@dataclass(frozen=True)
class BigramTask:
    """One domain: a fixed random bigram chain over a token range.

    A small fraction of positions emit a uniform token from the whole
    content space instead of the chain (a rare-word floor). Real corpora
    never leave part of the vocabulary with zero probability; without this
    floor, every fine-tuning stage learns a global suppression of the
    ranges absent from its data, which poisons later weight arithmetic.
    """

    name: str
    token_range: Tuple[int, int]
    matrix_seed: int

    def transition_matrix(self) -> np.ndarray:
        low, high = self.token_range
        size = high - low
        rng = np.random.default_rng(self.matrix_seed)
        # Peaked rows so the chain has structure worth learning.
        logits = rng.gumbel(size=(size, size)) * 2.0
        matrix = np.exp(logits - logits.max(axis=1, keepdims=True))
        return matrix / matrix.sum(axis=1, keepdims=True)

    def documents(
        self, seed: int, count: int, min_len: int = 16, max_len: int = 96
    ) -> Iterator[Dict[str, object]]:
        low, _ = self.token_range
        matrix = self.transition_matrix()
        size = matrix.shape[0]
        rng = np.random.default_rng(seed)
        for index in range(count):
            length = int(rng.integers(min_len, max_len + 1))
            state = int(rng.integers(0, size))
            tokens = [low + state]
            for _ in range(length - 1):
                state = int(rng.choice(size, p=matrix[state]))
                if rng.random() < NOISE_RATE:
                    tokens.append(int(rng.integers(*NOISE_RANGE)))
                else:
                    tokens.append(low + state)
            yield {"doc_id": f"{self.name}-{index:05d}", "tokens": tokens}


D1 = BigramTask("lm-d1", D1_RANGE, matrix_seed=101)
D2 = BigramTask("lm-d2", D2_RANGE, matrix_seed=202)


def instruction_example(payload: Sequence[int]) -> List[int]:
    """ASK p1..pk ANSWER p1..pk END."""
    payload = list(payload)
    return [ASK_ID, *payload, ANSWER_ID, *payload, END_ID]


def instruction_documents(seed: int, count: int) -> Iterator[Dict[str, object]]:
    """Instruction-tuning docs; payloads come from the reserved range."""
    rng = np.random.default_rng(seed)
    low, high = PAYLOAD_RANGE
    for index in range(count):
        payload = rng.integers(low, high, size=PAYLOAD_LEN).tolist()
        yield {"doc_id": f"instruct-v1-{index:05d}", "tokens": instruction_example(payload)}


def instruction_prompts(seed: int, count: int) -> List[Tuple[List[int], List[int]]]:
    """(prompt, expected completion) pairs for held-out evaluation."""
    rng = np.random.default_rng(seed)
    low, high = PAYLOAD_RANGE
    pairs = []
    for _ in range(count):
        payload = rng.integers(low, high, size=PAYLOAD_LEN).tolist()
        prompt = [ASK_ID, *payload, ANSWER_ID]
        pairs.append((prompt, list(payload)))
    return pairs


def chance_level() -> float:
    """Exact-match probability of a uniform guesser over the answer space.

    Each of the PAYLOAD_LEN answer tokens is drawn from the reserved
    payload range, so a random responder matches with (1/range)^len.
    """
    low, high = PAYLOAD_RANGE
    return float((1.0 / (high - low)) ** PAYLOAD_LEN)


def range_occupancy(tokens: Sequence[int], token_range: Tuple[int, int]) -> float:
    """Fraction of tokens inside a half-open id range."""
    if not tokens:
        return 0.0
    low, high = token_range
    inside = sum(1 for t in tokens if low <= t < high)
    return inside / len(tokens)
