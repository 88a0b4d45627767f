"""Five-checkpoint lifecycle plus the end-to-end residual-portability run.

All merging and packing goes through the resforge CLI as a subprocess; the
harness never imports the primary package. Checkpoints travel as container
files, corpora as JSONL.
"""

from __future__ import annotations

import itertools
import json
import os
import shlex
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np
import torch

from . import archive_io, tasks
from .evaluation import EvalSuite, ExperimentRecord, evaluate
from .model import ModelConfig, TinyGPT, fresh_model
from .training import load_packed_examples, train

FAMILY = "toygpt"


@dataclass(frozen=True)
class LabConfig:
    """Frozen desk-scale hyperparameters; thresholds were tuned once at
    seed 0 and verify direction, not magnitude.

    Both fine-tuning stages mix replay documents from the original domain,
    like real instruction-tuning corpora and forgetting-mitigated continual
    pre-training do. Without replay the toy stages each rewire the whole
    model and weight deltas stop being portable.
    """

    seq_len: int = 64
    batch_size: int = 32
    d1_docs: int = 6000
    d2_docs: int = 3000
    v1_docs: int = 4000
    instruct_replay_docs: int = 1500
    continual_replay_docs: int = 2000
    eval_docs: int = 48
    eval_prompts: int = 192
    pretrain_steps: int = 1200
    pretrain_lr: float = 1.5e-3
    pretrain_eps: float = 1e-8
    instruct_steps: int = 800
    instruct_lr: float = 1e-3
    instruct_eps: float = 2e-3
    continual_steps: int = 700
    continual_lr: float = 4e-4
    continual_eps: float = 1e-3
    d2_retention_tolerance: float = 0.20


class CliFailure(RuntimeError):
    pass


class ResforgeCli:
    """Thin subprocess driver for the primary command-line tool.

    Resolution order: $RESFORGE_BIN (shell-split), else the current
    interpreter running the installed module.
    """

    def __init__(self):
        override = os.environ.get("RESFORGE_BIN")
        if override:
            self.argv0 = shlex.split(override)
        else:
            self.argv0 = [sys.executable, "-m", "resforge"]

    def run(self, *args: str, expect: int = 0) -> subprocess.CompletedProcess:
        proc = subprocess.run(
            [*self.argv0, *args], capture_output=True, text=True
        )
        if proc.returncode != expect:
            raise CliFailure(
                f"resforge {' '.join(args)} exited {proc.returncode} "
                f"(expected {expect}): {proc.stderr.strip()}"
            )
        return proc

    def pack(self, infile: Path, outfile: Path, seq_len: int) -> None:
        self.run("pack", str(infile), str(outfile), "--seq-len", str(seq_len))

    def extract(self, instruct: Path, base: Path, out: Path) -> None:
        self.run("extract", str(instruct), str(base), str(out))

    def apply(self, base: Path, residual: Path, out: Path, alpha: float) -> None:
        self.run("apply", str(base), str(residual), str(out), "--alpha", repr(alpha))

    def check_verdict(self, target: Path, residual: Path) -> str:
        proc = subprocess.run(
            [*self.argv0, "check", str(target), str(residual), "--ignore-dtype"],
            capture_output=True,
            text=True,
        )
        if proc.returncode not in (0, 2):
            raise CliFailure(f"check failed unexpectedly: {proc.stderr.strip()}")
        return json.loads(proc.stdout)["verdict"]

    def self_diff_l2(self, path: Path) -> float:
        proc = self.run("diff", str(path), str(path))
        final = json.loads(proc.stdout.strip().splitlines()[-1])
        return float(final["global_l2"])


def _write_jsonl(path: Path, docs: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        for doc in docs:
            fp.write(json.dumps(doc, separators=(",", ":")) + "\n")


def _packed(cli: ResforgeCli, workdir: Path, name: str, docs, seq_len: int):
    raw = workdir / f"{name}.docs.jsonl"
    packed = workdir / f"{name}.packed.jsonl"
    _write_jsonl(raw, docs)
    cli.pack(raw, packed, seq_len)
    return load_packed_examples(packed)


def _save_checkpoint(model: TinyGPT, path: Path, variant: str) -> None:
    archive_io.save_tensors(
        path,
        model.export_arrays(),
        metadata={"resforge.family": FAMILY, "resforge.variant": variant},
    )


def load_checkpoint(path: Path, config: ModelConfig = ModelConfig()) -> TinyGPT:
    arrays, _ = archive_io.load_tensors(path)
    model = TinyGPT(config)
    model.load_arrays(arrays)
    return model


CHECKPOINTS = (
    "base_d1",  # pre-trained on the first domain
    "instruct_d1v1",  # + instruction tuning
    "instruct_d1v1_then_d2",  # instruct model continually pre-trained directly
    "base_d1_d2",  # base model continually pre-trained
    "reinstruct_d1d2_v1",  # re-instruct-tuned after continual pre-training
)


def make_models(
    seed: int, workdir: Path, config: LabConfig = LabConfig(),
    cli: Optional[ResforgeCli] = None,
) -> Dict[str, Path]:
    """Train the five-stage lifecycle and export every stage as a container
    file with lineage metadata. Deterministic for a given seed."""
    cli = cli or ResforgeCli()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)

    def replay_docs(seed_offset: int, count: int):
        docs = tasks.D1.documents(seed * 10 + seed_offset, count)
        return ({**doc, "doc_id": "replay-" + doc["doc_id"]} for doc in docs)

    d1_train = _packed(
        cli, workdir, "d1-train",
        tasks.D1.documents(seed * 10 + 1, config.d1_docs), config.seq_len,
    )
    # Replay keeps each fine-tuning stage a local update; batches sample
    # sequences uniformly, so stream concatenation fixes the mixture ratio.
    d2_train = _packed(
        cli, workdir, "d2-train",
        itertools.chain(
            tasks.D2.documents(seed * 10 + 2, config.d2_docs),
            replay_docs(21, config.continual_replay_docs),
        ),
        config.seq_len,
    )
    v1_train = _packed(
        cli, workdir, "v1-train",
        itertools.chain(
            tasks.instruction_documents(seed * 10 + 3, config.v1_docs),
            replay_docs(31, config.instruct_replay_docs),
        ),
        config.seq_len,
    )

    paths: Dict[str, Path] = {name: workdir / f"{name}.st" for name in CHECKPOINTS}

    model = fresh_model(seed)
    train(model, d1_train, config.pretrain_steps, config.pretrain_lr, seed * 10 + 4,
          batch_size=config.batch_size, adam_eps=config.pretrain_eps)
    _save_checkpoint(model, paths["base_d1"], "base")

    instruct = load_checkpoint(paths["base_d1"])
    train(instruct, v1_train, config.instruct_steps, config.instruct_lr, seed * 10 + 5,
          batch_size=config.batch_size, adam_eps=config.instruct_eps)
    _save_checkpoint(instruct, paths["instruct_d1v1"], "instruct")

    continued_instruct = load_checkpoint(paths["instruct_d1v1"])
    train(continued_instruct, d2_train, config.continual_steps, config.continual_lr,
          seed * 10 + 6, batch_size=config.batch_size, adam_eps=config.continual_eps)
    _save_checkpoint(continued_instruct, paths["instruct_d1v1_then_d2"], "instruct")

    continued = load_checkpoint(paths["base_d1"])
    train(continued, d2_train, config.continual_steps, config.continual_lr, seed * 10 + 6,
          batch_size=config.batch_size, adam_eps=config.continual_eps)
    _save_checkpoint(continued, paths["base_d1_d2"], "base")

    reinstructed = load_checkpoint(paths["base_d1_d2"])
    train(reinstructed, v1_train, config.instruct_steps, config.instruct_lr,
          seed * 10 + 7, batch_size=config.batch_size, adam_eps=config.instruct_eps)
    _save_checkpoint(reinstructed, paths["reinstruct_d1d2_v1"], "instruct")

    return paths


def build_eval_suite(
    seed: int, workdir: Path, config: LabConfig = LabConfig(),
    cli: Optional[ResforgeCli] = None,
) -> EvalSuite:
    """Held-out evaluation data, packed through the CLI like training data."""
    cli = cli or ResforgeCli()
    workdir = Path(workdir)
    return EvalSuite(
        lm_examples={
            "lm-d1": _packed(
                cli, workdir, "d1-eval",
                tasks.D1.documents(seed * 10 + 8001, config.eval_docs), config.seq_len,
            ),
            "lm-d2": _packed(
                cli, workdir, "d2-eval",
                tasks.D2.documents(seed * 10 + 8002, config.eval_docs), config.seq_len,
            ),
        },
        prompts=tasks.instruction_prompts(seed * 10 + 8003, config.eval_prompts),
    )


@dataclass
class AssertionOutcome:
    name: str
    description: str
    passed: bool
    observed: str

    def to_json_obj(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "description": self.description,
            "passed": self.passed,
            "observed": self.observed,
        }


@dataclass
class PipelineResult:
    seed: int
    alpha: float
    records: List[ExperimentRecord]
    assertions: List[AssertionOutcome]
    cross_impl_max_ulp: int
    elapsed_seconds: float
    restored_path: Path
    checkpoint_paths: Dict[str, Path] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions)

    def record(self, variant: str) -> ExperimentRecord:
        return next(r for r in self.records if r.variant == variant)

    def to_json_obj(self) -> Dict[str, object]:
        return {
            "seed": self.seed,
            "alpha": self.alpha,
            "records": [r.to_json_obj() for r in self.records],
            "assertions": [a.to_json_obj() for a in self.assertions],
            "cross_impl_max_ulp": self.cross_impl_max_ulp,
            "elapsed_seconds": self.elapsed_seconds,
            "passed": self.passed,
        }

    def to_markdown(self) -> str:
        lines = [
            f"# Residual portability run (seed {self.seed}, alpha {self.alpha})",
            "",
            "| variant | d1 loss | d2 loss | instruction accuracy |",
            "|---|---|---|---|",
        ]
        for record in self.records:
            lines.append(
                "| {v} | {d1:.4f} | {d2:.4f} | {acc:.3f} |".format(
                    v=record.variant,
                    d1=record.task_losses["lm-d1"],
                    d2=record.task_losses["lm-d2"],
                    acc=record.instruction_accuracy,
                )
            )
        lines += ["", "## Assertions", ""]
        for outcome in self.assertions:
            status = "PASS" if outcome.passed else "FAIL"
            lines.append(f"- **{status}** {outcome.name}: {outcome.description} "
                         f"({outcome.observed})")
        lines.append("")
        lines.append(
            f"Residual cross-check: in-process vs CLI agree within "
            f"{self.cross_impl_max_ulp} ulp. Wall clock {self.elapsed_seconds:.1f}s."
        )
        return "\n".join(lines) + "\n"


class PipelineFailure(RuntimeError):
    def __init__(self, result: PipelineResult):
        self.result = result
        failing = [a.name for a in result.assertions if not a.passed]
        super().__init__(
            "pipeline assertions failed: "
            + ", ".join(failing)
            + "\n"
            + result.to_markdown()
        )


def _ulp_distance_f32(a: np.ndarray, b: np.ndarray) -> int:
    def ordinal(x):
        bits = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32).astype(np.int64)
        return np.where(bits < 0x80000000, bits, 0x80000000 - bits)

    if a.size == 0:
        return 0
    return int(np.abs(ordinal(a) - ordinal(b)).max())


def run_pipeline(
    seed: int,
    workdir: Path,
    config: LabConfig = LabConfig(),
    alpha: float = 1.0,
    checkpoints: Optional[Dict[str, Path]] = None,
    raise_on_failure: bool = True,
) -> PipelineResult:
    """Train (unless given checkpoints), merge through the CLI, evaluate,
    and check the three directional claims:

    A. continually pre-training the instruct model loses instruction
       accuracy relative to the instruct model;
    B. the CLI-applied residual lifts the continually-pre-trained base's
       instruction accuracy above that base;
    C. the restored model keeps second-domain loss within the configured
       relative tolerance of the continually-pre-trained base.
    """
    started = time.perf_counter()
    cli = ResforgeCli()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)

    if checkpoints is None:
        checkpoints = make_models(seed, workdir, config, cli)

    # Structural gate: every checkpoint pair shares one signature.
    names = list(checkpoints)
    for a, b in zip(names, names[1:]):
        verdict = cli.check_verdict(checkpoints[a], checkpoints[b])
        if verdict == "deny":
            raise CliFailure(f"{a} vs {b}: unexpected structural denial")

    # Self-diff through the CLI is exactly zero for every checkpoint.
    for name, path in checkpoints.items():
        l2 = cli.self_diff_l2(path)
        if l2 != 0.0:
            raise CliFailure(f"{name}: self diff global_l2 {l2} != 0")

    # Residual through the CLI, cross-checked against in-process subtraction.
    residual_path = workdir / "residual_v1.st"
    cli.extract(checkpoints["instruct_d1v1"], checkpoints["base_d1"], residual_path)
    instruct_arrays, _ = archive_io.load_tensors(checkpoints["instruct_d1v1"])
    base_arrays, _ = archive_io.load_tensors(checkpoints["base_d1"])
    cli_residual, residual_meta = archive_io.load_tensors(residual_path)
    max_ulp = 0
    for name, instructed in instruct_arrays.items():
        local = (instructed.astype(np.float32) - base_arrays[name].astype(np.float32))
        max_ulp = max(max_ulp, _ulp_distance_f32(local, cli_residual[name]))
    if max_ulp > 1:
        raise CliFailure(f"CLI residual deviates from in-process math by {max_ulp} ulp")
    if "resforge.instruct_sha256" not in residual_meta:
        raise CliFailure("residual is missing provenance metadata")

    restored_path = workdir / f"restored_alpha{alpha:g}.st"
    cli.apply(checkpoints["base_d1_d2"], residual_path, restored_path, alpha)

    suite = build_eval_suite(seed, workdir, config, cli)
    records = []
    for name, path in checkpoints.items():
        records.append(evaluate(load_checkpoint(path), name, suite))
    records.append(evaluate(load_checkpoint(restored_path), "restored_d1d2_plus_r", suite))

    by_name = {r.variant: r for r in records}
    instruct_acc = by_name["instruct_d1v1"].instruction_accuracy
    continued_instruct_acc = by_name["instruct_d1v1_then_d2"].instruction_accuracy
    cont_base = by_name["base_d1_d2"]
    restored = by_name["restored_d1d2_plus_r"]
    rel_d2 = abs(
        restored.task_losses["lm-d2"] - cont_base.task_losses["lm-d2"]
    ) / cont_base.task_losses["lm-d2"]

    assertions = [
        AssertionOutcome(
            name="A-continued-instruct-forgets",
            description="continual pre-training of the instruct model drops "
                        "instruction accuracy",
            passed=continued_instruct_acc < instruct_acc,
            observed=(
                f"continued instruct {continued_instruct_acc:.3f} vs "
                f"instruct {instruct_acc:.3f}"
            ),
        ),
        AssertionOutcome(
            name="B-residual-restores",
            description="applying the residual lifts the continually-pre-trained "
                        "base's instruction accuracy",
            passed=restored.instruction_accuracy > cont_base.instruction_accuracy,
            observed=(
                f"restored {restored.instruction_accuracy:.3f} vs base "
                f"{cont_base.instruction_accuracy:.3f}"
            ),
        ),
        AssertionOutcome(
            name="C-d2-retained",
            description=(
                f"restored second-domain loss within "
                f"{config.d2_retention_tolerance:.0%} of the continually-"
                f"pre-trained base"
            ),
            passed=rel_d2 <= config.d2_retention_tolerance,
            observed=(
                f"restored {restored.task_losses['lm-d2']:.4f} vs base "
                f"{cont_base.task_losses['lm-d2']:.4f} (rel {rel_d2:.3f})"
            ),
        ),
    ]

    result = PipelineResult(
        seed=seed,
        alpha=alpha,
        records=records,
        assertions=assertions,
        cross_impl_max_ulp=max_ulp,
        elapsed_seconds=time.perf_counter() - started,
        restored_path=restored_path,
        checkpoint_paths=dict(checkpoints),
    )
    (workdir / "results.json").write_text(
        json.dumps(result.to_json_obj(), indent=2) + "\n", encoding="utf-8"
    )
    (workdir / "results.md").write_text(result.to_markdown(), encoding="utf-8")
    if raise_on_failure and not result.passed:
        raise PipelineFailure(result)
    return result


def alpha_zero_selftest(
    seed: int, workdir: Path, config: LabConfig = LabConfig(),
    checkpoints: Optional[Dict[str, Path]] = None,
) -> PipelineResult:
    """Harness self-test: with alpha=0 the merge is an identity, so the
    restoration assertion (B) must fail. Raises if it does not."""
    result = run_pipeline(
        seed, workdir, config, alpha=0.0, checkpoints=checkpoints,
        raise_on_failure=False,
    )
    b_outcome = next(a for a in result.assertions if a.name == "B-residual-restores")
    if b_outcome.passed:
        raise RuntimeError(
            "self-test failed: alpha=0 merge should not change instruction accuracy"
        )
    return result
