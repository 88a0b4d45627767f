"""Checkpoint scoring: per-domain language-model loss plus instruction
accuracy on held-out echo prompts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

from .model import TinyGPT
from .tasks import PAYLOAD_LEN
from .training import PackedExample, mean_loss


@dataclass
class ExperimentRecord:
    variant: str
    task_losses: Dict[str, float]
    instruction_accuracy: float

    def __post_init__(self):
        for task, loss in self.task_losses.items():
            if not math.isfinite(loss) or loss < 0:
                raise ValueError(f"{self.variant}: loss for {task} is {loss}")
        if not 0.0 <= self.instruction_accuracy <= 1.0:
            raise ValueError(
                f"{self.variant}: accuracy {self.instruction_accuracy} outside [0, 1]"
            )

    def to_json_obj(self) -> Dict[str, object]:
        return {
            "variant": self.variant,
            "task_losses": dict(self.task_losses),
            "instruction_accuracy": self.instruction_accuracy,
        }


@dataclass
class EvalSuite:
    """Held-out data every checkpoint is scored against."""

    lm_examples: Dict[str, List[PackedExample]]
    prompts: List[Tuple[List[int], List[int]]] = field(default_factory=list)


def instruction_accuracy(
    model: TinyGPT, prompts: Sequence[Tuple[List[int], List[int]]]
) -> float:
    """Fraction of prompts whose greedy completion reproduces the payload."""
    if not prompts:
        raise ValueError("no prompts to evaluate")
    hits = 0
    for prompt, expected in prompts:
        completion = model.greedy_complete(prompt, PAYLOAD_LEN)
        hits += completion == expected
    return hits / len(prompts)


def evaluate(model: TinyGPT, variant: str, suite: EvalSuite) -> ExperimentRecord:
    """Deterministic: same checkpoint and suite always yield the same record."""
    losses = {
        task: mean_loss(model, examples)
        for task, examples in suite.lm_examples.items()
    }
    accuracy = instruction_accuracy(model, suite.prompts)
    return ExperimentRecord(
        variant=variant, task_losses=losses, instruction_accuracy=accuracy
    )
