"""Command-line entry point.

Subcommands: extract, apply, diff, check, pack, flops. Machine-readable
results go to stdout; progress and human-readable reports go to stderr.
Output files are written to a temporary name and atomically renamed, so a
failed run never leaves a partial file at the target path.

Exit codes:
    0  success
    1  unexpected internal error
    2  compatibility failure / gate denial
    3  I/O or file-format error
    4  non-finite values encountered
    5  usage or config error
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple

from . import __version__
from .archive import open_archive
from .dtypes import Dtype
from .errors import (
    CompatibilityError,
    FormatError,
    NonFiniteError,
    PackingError,
    ResforgeError,
)
from .flops import (
    FLOPS_PER_PARAM_PER_TOKEN,
    HARDWARE_PROFILES,
    FlopsSpec,
    flops_per_token,
    flops_ratio,
    parse_count,
    training_flops,
    wallclock_estimate,
)
from .gate import LineageTag, gate
from .packer import read_token_docs, write_packed_corpus
from .residual import (
    MergePolicy,
    ResidualSet,
    apply_residual,
    diff_report,
    extract_residual,
)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_COMPAT = 2
EXIT_IO = 3
EXIT_NONFINITE = 4
EXIT_USAGE = 5

META_FAMILY = "resforge.family"
META_VARIANT = "resforge.variant"

logger = logging.getLogger("resforge")


class UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage problems through our exit-code scheme."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_dtype(text: str) -> Dtype:
    return Dtype.parse(text)


def _parse_output_dtype(text: str) -> Optional[Dtype]:
    if text.strip().lower() in ("same", "same-as-target"):
        return None
    return Dtype.parse(text)


# Config-file keys per subcommand: key -> (dest, converter). Keys use the
# long option spelling without leading dashes; command-line flags win.
_CONFIGURABLE: Dict[str, Dict[str, Tuple[str, Callable[[str], object]]]] = {}
_GLOBAL_CONFIG: Dict[str, Tuple[str, Callable[[str], object]]] = {
    "log-level": ("log_level", str),
    "deterministic": ("deterministic", _parse_bool),
}


def _register(command: str, key: str, dest: str, convert: Callable[[str], object]) -> None:
    _CONFIGURABLE.setdefault(command, {})[key] = (dest, convert)


def _load_config(path: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _apply_config(args: argparse.Namespace, command: str) -> None:
    if not args.config:
        return
    known = dict(_GLOBAL_CONFIG)
    known.update(_CONFIGURABLE.get(command, {}))
    for key, raw in _load_config(args.config).items():
        if key not in known:
            raise UsageError(f"unknown config key {key!r} for subcommand {command!r}")
        dest, convert = known[key]
        if getattr(args, dest, None) is None:
            try:
                setattr(args, dest, convert(raw))
            except ValueError as exc:
                raise UsageError(f"config key {key!r}: {exc}") from exc


def _resolve(args: argparse.Namespace, **defaults) -> None:
    for dest, value in defaults.items():
        if getattr(args, dest, None) is None:
            setattr(args, dest, value)


def _thread_cap() -> int:
    raw = os.environ.get("RESFORGE_THREADS", "")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"RESFORGE_THREADS must be an integer, got {raw!r}") from None


def _emit(obj: object) -> None:
    sys.stdout.write(json.dumps(obj, separators=(",", ":")) + "\n")


class _Progress:
    """Timing-aware progress lines on stderr; timing muted by --deterministic."""

    def __init__(self, deterministic: bool):
        self.deterministic = deterministic
        self.started = time.perf_counter()

    def done(self, message: str) -> None:
        if self.deterministic:
            logger.info("%s", message)
        else:
            logger.info("%s in %.2fs", message, time.perf_counter() - self.started)


def _policy_from_args(args: argparse.Namespace, alpha: float = 1.0,
                      match_dtype: bool = True) -> MergePolicy:
    return MergePolicy(
        alpha=alpha,
        accumulation=args.accumulate,
        output_dtype=getattr(args, "output_dtype", None),
        residual_dtype=getattr(args, "residual_dtype", None) or Dtype.F32,
        missing_tensor=args.missing_tensor,
        match_dtype=match_dtype,
        exclude=tuple(args.exclude or ()),
    )


def _lineage_from(metadata: Dict[str, str], family: Optional[str],
                  variant: Optional[str], default_variant: str) -> LineageTag:
    return LineageTag(
        family=family or metadata.get(META_FAMILY, "unspecified"),
        variant=variant or metadata.get(META_VARIANT, default_variant),
    )


# -- subcommands --------------------------------------------------------------


def cmd_extract(args: argparse.Namespace) -> int:
    _resolve(args, accumulate="f32", missing_tensor="error",
             residual_dtype=Dtype.F32, alpha_default=1.0)
    policy = _policy_from_args(args, alpha=args.alpha_default)
    progress = _Progress(args.deterministic)
    with open_archive(args.instruct) as instruct, open_archive(args.base) as base:
        residual = extract_residual(instruct, base, args.out, policy)
    diag = residual.diagnostics
    assert diag is not None
    if diag.zero_residual:
        logger.warning("zero residual: the two sources are numerically identical")
    residual.close()
    progress.done(f"wrote residual {args.out} ({len(diag.per_tensor)} tensors)")
    _emit(
        {
            "out": str(args.out),
            "tensors": len(diag.per_tensor),
            "global_l2": diag.global_l2,
            "zero_residual": diag.zero_residual,
            "provenance": residual.provenance.to_metadata(),
        }
    )
    return EXIT_OK


def cmd_apply(args: argparse.Namespace) -> int:
    _resolve(args, accumulate="f32", missing_tensor="error")
    progress = _Progress(args.deterministic)
    with open_archive(args.base) as target, ResidualSet.open(args.residual) as residual:
        alpha = args.alpha
        if alpha is None:
            alpha = residual.provenance.alpha_default
        # Application promotes dtypes internally, so its gate ignores them.
        policy = _policy_from_args(args, alpha=alpha, match_dtype=False)

        target_tag = _lineage_from(target.metadata, args.target_family,
                                   args.target_variant, "base")
        residual_tag = _lineage_from(residual.reader.metadata, args.residual_family,
                                     args.residual_variant, "derived")
        report = gate(target.signature(), residual.signature(),
                      target_tag, residual_tag, policy)
        for warning in report.structural.warnings + report.warnings:
            logger.warning("%s", warning)
        if not report.allowed:
            sys.stderr.write(report.to_text() + "\n")
            raise CompatibilityError("gate denied the merge",
                                     mismatches=report.structural.mismatches)

        content_hash = apply_residual(target, residual, args.out, policy)
        tensor_count = len(target.signature())
    progress.done(f"wrote merged archive {args.out}")
    _emit(
        {
            "out": str(args.out),
            "tensors": tensor_count,
            "alpha": alpha,
            "content_hash": content_hash,
            "verdict": report.verdict,
            "warnings": report.structural.warnings + report.warnings,
        }
    )
    return EXIT_OK


def cmd_diff(args: argparse.Namespace) -> int:
    with open_archive(args.a) as a, open_archive(args.b) as b:
        report = diff_report(a, b)
    text = report.to_jsonl()
    if args.out:
        _atomic_write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_check(args: argparse.Namespace) -> int:
    _resolve(args, accumulate="f32", missing_tensor="error", ignore_dtype=False)
    policy = _policy_from_args(args, match_dtype=not args.ignore_dtype)
    with open_archive(args.target) as target, open_archive(args.residual) as residual:
        target_tag = _lineage_from(target.metadata, args.target_family,
                                   args.target_variant, "base")
        residual_tag = _lineage_from(residual.metadata, args.residual_family,
                                     args.residual_variant, "derived")
        report = gate(target.signature(), residual.signature(),
                      target_tag, residual_tag, policy)
    sys.stderr.write(report.to_text() + "\n")
    _emit(report.to_json_obj())
    return EXIT_OK if report.allowed else EXIT_COMPAT


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(f"{path.name}.tmp.{os.getpid()}")
    try:
        with open(tmp, "w", encoding="utf-8") as fp:
            fp.write(text)
            fp.flush()
            os.fsync(fp.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def cmd_pack(args: argparse.Namespace) -> int:
    _resolve(args, seq_len=4096, split_long=True, pad_id=0)
    progress = _Progress(args.deterministic)
    if args.infile == "-":
        docs = read_token_docs(sys.stdin)
        stats = _pack_to_path(docs, args)
    else:
        with open(args.infile, "r", encoding="utf-8") as fp:
            stats = _pack_to_path(read_token_docs(fp), args)
    progress.done(
        f"packed {stats.doc_count} documents into {stats.sequence_count} sequences"
    )
    _emit(stats.to_json_obj())
    return EXIT_OK


def _pack_to_path(docs, args: argparse.Namespace):
    out_path = Path(args.outfile)
    tmp = out_path.with_name(f"{out_path.name}.tmp.{os.getpid()}")
    try:
        with open(tmp, "w", encoding="utf-8") as out:
            stats = write_packed_corpus(
                docs, out, seq_len=args.seq_len,
                split_long_docs=args.split_long, pad_id=args.pad_id,
            )
            out.flush()
            os.fsync(out.fileno())
        os.replace(tmp, out_path)
        return stats
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _flops_spec(params: int, tokens: int, epochs: int) -> FlopsSpec:
    try:
        return FlopsSpec(params=params, tokens=tokens, epochs=epochs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_flops(args: argparse.Namespace) -> int:
    _resolve(args, flops_per_param=FLOPS_PER_PARAM_PER_TOKEN, util=1.0, precision="bf16")
    if args.params is None or args.tokens is None or args.epochs is None:
        raise UsageError("flops: --params, --tokens and --epochs are required")
    spec = _flops_spec(args.params, args.tokens, args.epochs)
    total = training_flops(spec, flops_per_param=args.flops_per_param)
    result: Dict[str, object] = {
        "params": spec.params,
        "tokens": spec.tokens,
        "epochs": spec.epochs,
        "flops_per_token": flops_per_token(spec.params, flops_per_param=args.flops_per_param),
        "training_flops": total,
    }
    if args.hw:
        try:
            profile = HARDWARE_PROFILES[args.hw]
        except KeyError:
            raise UsageError(
                f"unknown hardware profile {args.hw!r}; known: {sorted(HARDWARE_PROFILES)}"
            ) from None
        try:
            result["hardware"] = profile.name
            result["utilization"] = args.util
            result["wallclock_seconds"] = wallclock_estimate(
                spec, profile, args.util, precision=args.precision
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    _emit(result)
    return EXIT_OK


def _parse_spec_triple(text: str) -> FlopsSpec:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 3:
        raise UsageError(
            f"expected PARAMS,TOKENS,EPOCHS, got {text!r}"
        )
    try:
        params, tokens, epochs = (parse_count(p) for p in parts)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return _flops_spec(params, tokens, epochs)


def cmd_flops_ratio(args: argparse.Namespace) -> int:
    a = _parse_spec_triple(args.a)
    b = _parse_spec_triple(args.b)
    try:
        ratio = flops_ratio(a, b)
    except ZeroDivisionError as exc:
        raise UsageError(str(exc)) from exc
    _emit(
        {
            "a_flops": training_flops(a),
            "b_flops": training_flops(b),
            "ratio": ratio,
        }
    )
    return EXIT_OK


# -- parser construction -------------------------------------------------------


def _count_arg(text: str) -> int:
    try:
        return parse_count(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_merge_policy_flags(parser: argparse.ArgumentParser, command: str,
                            residual_dtype: bool = False,
                            output_dtype: bool = False) -> None:
    parser.add_argument("--accumulate", choices=("f32", "f64"), default=None,
                        help="arithmetic precision (default f32)")
    parser.add_argument("--missing-tensor", dest="missing_tensor",
                        choices=("error", "skip"), default=None,
                        help="how to treat tensors present on only one side")
    parser.add_argument("--exclude", action="append", default=None, metavar="GLOB",
                        help="skip tensors whose name matches this pattern (repeatable)")
    _register(command, "accumulate", "accumulate", str)
    _register(command, "missing-tensor", "missing_tensor", str)
    if residual_dtype:
        parser.add_argument("--residual-dtype", dest="residual_dtype",
                            type=_parse_dtype, default=None,
                            help="storage dtype of the residual (default f32)")
        _register(command, "residual-dtype", "residual_dtype", _parse_dtype)
    if output_dtype:
        parser.add_argument("--output-dtype", dest="output_dtype",
                            type=_parse_output_dtype, default=None,
                            help="output storage dtype ('same' keeps the target's)")
        _register(command, "output-dtype", "output_dtype", _parse_output_dtype)


def _add_lineage_flags(parser: argparse.ArgumentParser, command: str) -> None:
    for side in ("target", "residual"):
        parser.add_argument(f"--{side}-family", dest=f"{side}_family", default=None,
                            help=f"asserted model family of the {side}")
        parser.add_argument(f"--{side}-variant", dest=f"{side}_variant",
                            choices=("base", "instruct", "derived"), default=None,
                            help=f"asserted variant of the {side}")
        _register(command, f"{side}-family", f"{side}_family", str)
        _register(command, f"{side}-variant", f"{side}_variant", str)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="resforge",
        description="Checkpoint arithmetic, corpus packing, and compute budgeting.",
    )
    parser.add_argument("--version", action="version", version=f"resforge {__version__}")
    parser.add_argument("--config", default=None, metavar="PATH",
                        help="flat key=value config file; command-line flags win")
    parser.add_argument("--log-level", dest="log_level", default=None,
                        choices=("debug", "info", "warning", "error"))
    parser.add_argument("--deterministic", action="store_true", default=None,
                        help="suppress timing in progress output")

    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("extract", parents=[], help="compute instruct - base residual")
    p.add_argument("instruct", help="instruction-tuned archive")
    p.add_argument("base", help="base-model archive")
    p.add_argument("out", help="output residual archive")
    p.add_argument("--alpha-default", dest="alpha_default", type=float, default=None,
                   help="suggested application scale recorded in metadata (default 1.0)")
    _register("extract", "alpha-default", "alpha_default", float)
    _add_merge_policy_flags(p, "extract", residual_dtype=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("apply", help="add a scaled residual onto a base archive")
    p.add_argument("base", help="target archive the residual is added to")
    p.add_argument("residual", help="residual archive")
    p.add_argument("out", help="output archive")
    p.add_argument("--alpha", type=float, default=None,
                   help="residual scale (default: residual's recorded default)")
    _register("apply", "alpha", "alpha", float)
    _add_merge_policy_flags(p, "apply", output_dtype=True)
    _add_lineage_flags(p, "apply")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("diff", help="per-tensor difference statistics")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out", default=None, help="write the JSONL report here instead of stdout")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("check", help="gate a proposed merge without performing it")
    p.add_argument("target")
    p.add_argument("residual")
    p.add_argument("--ignore-dtype", dest="ignore_dtype", action="store_true", default=None,
                   help="tolerate per-tensor dtype differences (apply always does)")
    _register("check", "ignore-dtype", "ignore_dtype", _parse_bool)
    _add_merge_policy_flags(p, "check")
    _add_lineage_flags(p, "check")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("pack", help="pack a JSONL token corpus into fixed-length sequences")
    p.add_argument("infile", help="input JSONL ('-' for stdin)")
    p.add_argument("outfile", help="output JSONL")
    p.add_argument("--seq-len", dest="seq_len", type=int, default=None,
                   help="sequence length (default 4096)")
    split = p.add_mutually_exclusive_group()
    split.add_argument("--split-long", dest="split_long", action="store_true", default=None,
                       help="split over-long documents across sequences (default)")
    split.add_argument("--no-split-long", dest="split_long", action="store_false", default=None,
                       help="error on documents longer than --seq-len")
    p.add_argument("--pad-id", dest="pad_id", type=int, default=None,
                   help="padding token id (default 0)")
    _register("pack", "seq-len", "seq_len", int)
    _register("pack", "split-long", "split_long", _parse_bool)
    _register("pack", "pad-id", "pad_id", int)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("flops", help="training-cost model (6 * params * tokens * epochs)")
    flops_sub = p.add_subparsers(dest="flops_command", metavar="")
    p.add_argument("--params", type=_count_arg, default=None)
    p.add_argument("--tokens", type=_count_arg, default=None)
    p.add_argument("--epochs", type=_count_arg, default=None)
    p.add_argument("--flops-per-param", dest="flops_per_param", type=int, default=None,
                   help="override the 6 FLOPs/param/token constant (sensitivity studies)")
    p.add_argument("--hw", default=None, help="hardware profile name (e.g. a100-40g)")
    p.add_argument("--util", type=float, default=None,
                   help="assumed utilization in (0, 1] (default 1.0)")
    p.add_argument("--precision", default=None, choices=("bf16", "f16", "tf32"))
    for key, dest in (("params", "params"), ("tokens", "tokens"), ("epochs", "epochs"),
                      ("flops-per-param", "flops_per_param"), ("hw", "hw"),
                      ("util", "util"), ("precision", "precision")):
        conv: Callable[[str], object] = _count_arg if dest in ("params", "tokens", "epochs") else str
        if dest == "util":
            conv = float
        if dest == "flops_per_param":
            conv = int
        _register("flops", key, dest, conv)
    p.set_defaults(func=cmd_flops)

    ratio = flops_sub.add_parser("ratio", help="ratio of two training-cost specs")
    ratio.add_argument("--a", required=True, metavar="PARAMS,TOKENS,EPOCHS")
    ratio.add_argument("--b", required=True, metavar="PARAMS,TOKENS,EPOCHS")
    ratio.set_defaults(func=cmd_flops_ratio)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        command = args.command
        if command == "flops" and getattr(args, "flops_command", None) == "ratio":
            command = "flops"  # ratio shares the flops config namespace
        _apply_config(args, command)
        _resolve(args, log_level="info", deterministic=False)

        logging.basicConfig(
            stream=sys.stderr,
            level=getattr(logging, args.log_level.upper()),
            format="resforge: %(message)s",
            force=True,
        )
        args.threads = _thread_cap()
        return args.func(args)
    except (UsageError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except CompatibilityError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_COMPAT
    except NonFiniteError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_NONFINITE
    except (FormatError, PackingError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_IO
    except ResforgeError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INTERNAL


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
