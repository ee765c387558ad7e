"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 input format, 3 backend failure (an LLM
error that could not be absorbed, or a fallback rate above the limit).
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
import tomllib
from collections.abc import Awaitable, Callable, Sequence
from dataclasses import replace
from pathlib import Path

import structlog

from llmrescore.config import Config, config_from_dict, config_to_dict, load_config
from llmrescore.llm.base import LlmBackend, LlmError
from llmrescore.llm.mock import MockBackend, MockBehavior, MockMode, MockScriptError
from llmrescore.nbest import NBestFormatError, NBestList, read_nbest, write_nbest
from llmrescore.ngram import ArpaFormatError, NgramModel, NgramProbSource, OovError, load_arpa
from llmrescore.pipelines import (
    H2TConfig,
    RunResult,
    expected_wer,
    h2t_loss,
    hypothesis_posteriors,
    run_ngram,
    run_p1,
    run_p2,
)
from llmrescore.prompts import (
    DemonstrationLeakError,
    HistoryMode,
    PromptError,
    PromptStrategy,
    TaskKind,
    Variant,
    check_demonstrations,
    select_demonstrations,
)
from llmrescore.report import format_report
from llmrescore.store import RawStore
from llmrescore.synth import ChannelConfig, generate_corpus, read_references
from llmrescore.wer import EmptyReferenceError, SelectionError, first_pass_wer, oracle_wer

log = structlog.get_logger()

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_BACKEND = 3

_LEVELS = {"debug": 10, "info": 20, "warning": 30, "error": 40}
_RUN_COMMANDS = ("rescore-ngram", "correct", "icl")
# Per-invocation plumbing that must not change a run artifact
_NOT_RECORDED = frozenset({"config", "log_level", "out", "dump_raw"})


class UsageError(Exception):
    pass


class InputFormatError(ValueError):
    pass


_INPUT_ERRORS = (
    NBestFormatError,
    ArpaFormatError,
    OovError,
    EmptyReferenceError,
    SelectionError,
    MockScriptError,
    InputFormatError,
    json.JSONDecodeError,
    tomllib.TOMLDecodeError,
    UnicodeDecodeError,
    OSError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _configure_logging(level: str) -> None:
    structlog.configure(
        wrapper_class=structlog.make_filtering_bound_logger(_LEVELS.get(level, 20)),
        processors=[
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.dev.ConsoleRenderer(),
        ],
        # stdout carries reports and run JSON
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
    )


# ── Argument parsing ─────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="llmrescore", description="LLM rescoring and correction of ASR N-best lists")
    parser.add_argument("--config", type=Path, help="TOML config file (default: config/default.toml)")
    parser.add_argument("--log-level", choices=sorted(_LEVELS))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("wer", help="first-pass, oracle and expected WER of an N-best file")
    p.add_argument("nbest", type=Path)
    p.add_argument("--arpa", type=Path, help="also report the mean H2T loss under this LM")
    p.add_argument("--skip-empty", action="store_true", help="skip empty references instead of failing")

    p = sub.add_parser("rescore-ngram", help="n-gram LM rescoring with shallow fusion")
    p.add_argument("nbest", type=Path)
    p.add_argument("--arpa", type=Path, required=True)
    _add_run_options(p)

    p = sub.add_parser("correct", help="P1: LLM correction, then n-gram rescoring")
    p.add_argument("nbest", type=Path)
    p.add_argument("--arpa", type=Path, required=True)
    p.add_argument("--mode", choices=["augment", "replace"])
    _add_llm_options(p)
    _add_run_options(p)

    p = sub.add_parser("icl", help="P2: in-context rescoring or selection by the LLM")
    p.add_argument("nbest", type=Path)
    p.add_argument("--task", choices=[str(TaskKind.SCORES), str(TaskKind.SELECTION)])
    _add_llm_options(p)
    _add_run_options(p)

    p = sub.add_parser("synth", help="generate a synthetic N-best corpus")
    p.add_argument("--refs", type=Path, required=True, help="reference text, one utterance per line")
    p.add_argument("--config", dest="channel_config", type=Path, required=True, help="channel JSON")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("report", help="TSV table of run artifacts; the first is the baseline")
    p.add_argument("runs", type=Path, nargs="+")

    p = sub.add_parser("raw", help="print the stored attempts of a --dump-raw file as JSON lines")
    p.add_argument("db", type=Path)
    p.add_argument("tags", nargs="+", help="request tags (utterance ids)")
    p.add_argument("--run", dest="run_name", required=True, help="run name the file was written under")

    p = sub.add_parser("rerun", help="re-execute a run from the provenance in its artifact")
    p.add_argument("artifact", type=Path)
    p.add_argument("--out", type=Path)

    return parser


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lambda_lm", type=float)
    p.add_argument("--no-acoustic", action="store_true", help="ignore first-pass scores in fusion")
    p.add_argument("--seed", type=int)
    p.add_argument("--run-name")
    p.add_argument("--out", type=Path, help="run JSON (default: stdout)")


def _add_llm_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=[str(v) for v in Variant], default=str(Variant.ZERO))
    p.add_argument("--backend", default="http", help="http | mock:<echo|scripted|rank|scorelist>")
    p.add_argument("--endpoint")
    p.add_argument("--history", choices=[str(h) for h in HistoryMode])
    p.add_argument("--shots", type=int, help="demonstrations for few-shot (default 3)")
    p.add_argument("--train", type=Path, help="N-best file demonstrations are drawn from")
    p.add_argument("--domain")
    p.add_argument("--reasoning", action="store_true", help="append the step-by-step instruction")
    p.add_argument("--tap-mode", choices=["replay", "live"])
    p.add_argument("--script", type=Path, help="JSON object of request tag -> reply for mock:scripted")
    p.add_argument("--mock-k", type=int, default=1, help="rank echoed by mock:rank")
    p.add_argument("--max-in-flight", type=int)
    p.add_argument("--max-fallback-rate", type=float)
    p.add_argument("--dump-raw", type=Path, help="SQLite file for raw LLM payloads")


def _apply_flags(config: Config, args: argparse.Namespace) -> Config:
    """Flags win over the config file."""

    def opt(name: str) -> object:
        return getattr(args, name, None)

    if opt("log_level"):
        config = replace(config, log_level=opt("log_level"))
    if opt("seed") is not None and args.command != "synth":
        config = replace(config, seed=opt("seed"), batch=replace(config.batch, seed=opt("seed")))
    if opt("endpoint"):
        config = replace(config, llm=replace(config.llm, endpoint=opt("endpoint")))
    if opt("max_in_flight") is not None:
        config = replace(config, batch=replace(config.batch, max_in_flight=opt("max_in_flight")))
    if opt("lambda_lm") is not None:
        config = replace(config, fusion=replace(config.fusion, lambda_lm=opt("lambda_lm")))
    if opt("no_acoustic"):
        config = replace(config, fusion=replace(config.fusion, use_acoustic=False))

    pipeline = config.pipeline
    for flag, name in (
        ("history", "history"),
        ("tap_mode", "tap_mode"),
        ("domain", "domain"),
        ("max_fallback_rate", "max_fallback_rate"),
        ("mode", "correction_mode"),
    ):
        if opt(flag) is not None:
            pipeline = replace(pipeline, **{name: opt(flag)})
    return replace(config, pipeline=pipeline)


# ── Shared helpers ───────────────────────────────────────────────

def _read_lists(path: str | Path, config: Config) -> list[NBestList]:
    with open(path, encoding="utf-8") as f:
        return read_nbest(f, config.normalize)


def _load_lm(path: str | Path) -> NgramModel:
    with open(path, encoding="utf-8") as f:
        return load_arpa(f)


def _load_json(path: str | Path) -> object:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _provenance(args: argparse.Namespace, config: Config) -> dict:
    options = {
        key: str(value) if isinstance(value, Path) else value
        for key, value in sorted(vars(args).items())
        if key not in _NOT_RECORDED
    }
    return {"options": options, "config": config_to_dict(config)}


def _emit(result: RunResult, args: argparse.Namespace, config: Config) -> None:
    result.provenance = _provenance(args, config)
    text = result.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    log.info(
        "run_written",
        command=args.command,
        out=str(args.out) if args.out else "-",
        wer=result.wer_report.corpus_wer if result.wer_report else None,
    )


def _build_strategy(args: argparse.Namespace, config: Config, task: TaskKind) -> PromptStrategy:
    variant = Variant(args.strategy)
    wanted = {
        Variant.ONE_SHOT: 1,
        Variant.TAP: 1,
        Variant.FEW_SHOT: args.shots if args.shots is not None else 3,
    }.get(variant, 0)

    demos = ()
    if wanted:
        if not args.train:
            raise UsageError(f"strategy {variant} needs --train to draw demonstrations from")
        demos = select_demonstrations(_read_lists(args.train, config), wanted)
        if len(demos) < wanted:
            raise UsageError(f"--train has {len(demos)} usable demonstrations, {variant} needs {wanted}")

    use_domain = variant in (Variant.DOMAIN_HINT, Variant.TAP) or bool(args.domain)
    return PromptStrategy(
        variant=variant,
        task=task,
        demos=demos,
        history_mode=HistoryMode(config.pipeline.history),
        domain=config.pipeline.domain if use_domain else None,
        reasoning=args.reasoning,
        template_version=config.pipeline.template_version,
        max_turns=config.pipeline.max_turns,
        tap_replay=config.pipeline.tap_mode == "replay",
    )


def _build_backend(args: argparse.Namespace, config: Config, lists: Sequence[NBestList]) -> LlmBackend:
    kind, _, mode = args.backend.partition(":")
    if kind == "http" and not mode:
        from llmrescore.llm.chat_api import ChatApiBackend

        return ChatApiBackend(config.llm)
    if kind == "mock":
        try:
            mock_mode = MockMode(mode)
        except ValueError:
            raise UsageError(f"unknown mock mode {mode!r}") from None
        script: dict[str, str] = {}
        if args.script:
            raw = _load_json(args.script)
            if not isinstance(raw, dict) or not all(isinstance(v, str) for v in raw.values()):
                raise InputFormatError(f"{args.script}: script must map request tags to strings")
            script = raw
        behavior = MockBehavior(mode=mock_mode, seed=config.seed, k=args.mock_k, script=script)
        return MockBackend(behavior, lists)
    raise UsageError(f"unknown backend {args.backend!r}")


# ── Subcommands ──────────────────────────────────────────────────

async def cmd_wer(args: argparse.Namespace, config: Config) -> int:
    lists = _read_lists(args.nbest, config)
    first = first_pass_wer(lists, skip_empty=args.skip_empty)
    oracle = oracle_wer(lists, skip_empty=args.skip_empty)

    scored = [nb for nb in lists if nb.reference]
    words = sum(len(nb.reference or ()) for nb in scored)
    expected = sum(
        expected_wer(nb, hypothesis_posteriors(nb)) * len(nb.reference or ()) for nb in scored
    )
    summary: dict = {
        "utterances": len(lists),
        "first_pass_wer": first.corpus_wer,
        "oracle_wer": oracle.corpus_wer,
        "expected_wer": expected / words if words else 0.0,
    }
    if args.arpa:
        h2t = H2TConfig(
            prob_source=NgramProbSource(_load_lm(args.arpa), config.ngram.oov),
            lambda_mse=config.h2t.lambda_mse,
        )
        losses = [h2t_loss(nb, h2t) for nb in scored]
        summary["h2t_loss_mean"] = sum(losses) / len(losses) if losses else 0.0

    sys.stdout.write(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


async def cmd_rescore_ngram(args: argparse.Namespace, config: Config) -> int:
    lists = _read_lists(args.nbest, config)
    result = run_ngram(lists, _load_lm(args.arpa), config.fusion, config.ngram)
    _emit(result, args, config)
    return EXIT_OK


async def cmd_llm(args: argparse.Namespace, config: Config) -> int:
    lists = _read_lists(args.nbest, config)
    if args.command == "correct":
        task = TaskKind.CORRECTION
    elif args.strategy == Variant.TAP:
        task = TaskKind.SELECTION
    else:
        task = TaskKind(args.task or TaskKind.SCORES)
    strategy = _build_strategy(args, config, task)
    check_demonstrations(strategy, lists)
    lm = _load_lm(args.arpa) if args.command == "correct" else None

    backend = _build_backend(args, config, lists)
    store = None
    if args.dump_raw:
        store = RawStore(str(args.dump_raw))
        store.start_run(args.run_name or args.command)
    try:
        if lm is not None:
            result = await run_p1(
                lists,
                backend,
                strategy,
                lm,
                config.fusion,
                llm=config.llm,
                policy=config.batch,
                ngram=config.ngram,
                mode=config.pipeline.correction_mode,
                norm=config.normalize,
                store=store,
            )
        else:
            result = await run_p2(
                lists,
                backend,
                strategy,
                config.fusion,
                llm=config.llm,
                policy=config.batch,
                norm=config.normalize,
                store=store,
            )
    finally:
        await backend.close()
        if store is not None:
            log.info("raw_responses_stored", run=store.run_id, rows=store.count())
            store.close()

    _emit(result, args, config)
    if result.fallback_rate > config.pipeline.max_fallback_rate:
        log.error(
            "fallback_rate_exceeded",
            rate=round(result.fallback_rate, 4),
            limit=config.pipeline.max_fallback_rate,
            backend_errors=result.backend_errors,
        )
        return EXIT_BACKEND
    return EXIT_OK


async def cmd_synth(args: argparse.Namespace, config: Config) -> int:
    raw = _load_json(args.channel_config)
    if not isinstance(raw, dict):
        raise InputFormatError(f"{args.channel_config}: channel config must be a JSON object")
    try:
        channel = ChannelConfig.from_dict(raw)
        if args.seed is not None:
            channel = replace(channel, seed=args.seed)
    except (TypeError, ValueError, AttributeError) as exc:
        raise InputFormatError(f"{args.channel_config}: {exc}") from exc

    with open(args.refs, encoding="utf-8") as f:
        refs = read_references(f, config.normalize)
    lists, manifest = generate_corpus(refs, channel)

    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        write_nbest(lists, f)
    manifest_path = args.manifest or args.out.with_suffix(".manifest.json")
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n")
    log.info("synth_written", out=str(args.out), manifest=str(manifest_path))
    return EXIT_OK


async def cmd_report(args: argparse.Namespace, config: Config) -> int:
    runs: list[tuple[str, dict]] = []
    for path in args.runs:
        data = _load_json(path)
        if not isinstance(data, dict):
            raise InputFormatError(f"{path}: run artifact must be a JSON object")
        options = data.get("provenance", {}).get("options", {})
        runs.append((options.get("run_name") or Path(path).stem, data))
    sys.stdout.write(format_report(runs))
    return EXIT_OK


async def cmd_raw(args: argparse.Namespace, config: Config) -> int:
    if not args.db.is_file():
        raise InputFormatError(f"{args.db}: no such raw store")
    store = RawStore(str(args.db))
    try:
        store.use_run(args.run_name)
        for tag in args.tags:
            for row in store.responses(tag):
                payload = row["payload"]
                record = {
                    "tag": tag,
                    "attempt": row["attempt"],
                    "finish_reason": row["finish_reason"],
                    "payload": payload.decode("utf-8", errors="replace") if payload is not None else None,
                    "error": row["error"],
                }
                sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        store.close()
    return EXIT_OK


async def cmd_rerun(args: argparse.Namespace, config: Config) -> int:
    data = _load_json(args.artifact)
    provenance = data.get("provenance") if isinstance(data, dict) else None
    if not isinstance(provenance, dict) or "options" not in provenance or "config" not in provenance:
        raise InputFormatError(f"{args.artifact}: no provenance to rerun from")
    options = dict(provenance["options"])
    command = options.get("command")
    if command not in _RUN_COMMANDS:
        raise InputFormatError(f"{args.artifact}: cannot rerun command {command!r}")
    try:
        run_config = config_from_dict(provenance["config"])
    except (TypeError, ValueError) as exc:
        raise InputFormatError(f"{args.artifact}: bad config echo: {exc}") from exc

    run_args = argparse.Namespace(**options, out=args.out, dump_raw=None)
    log.info("rerun", command=command, artifact=str(args.artifact))
    return await _HANDLERS[command](run_args, run_config)


_HANDLERS: dict[str, Callable[[argparse.Namespace, Config], Awaitable[int]]] = {
    "wer": cmd_wer,
    "rescore-ngram": cmd_rescore_ngram,
    "correct": cmd_llm,
    "icl": cmd_llm,
    "synth": cmd_synth,
    "report": cmd_report,
    "rerun": cmd_rerun,
    "raw": cmd_raw,
}


def cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"llmrescore: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)

    _configure_logging(args.log_level or "info")
    try:
        config = _apply_flags(load_config(args.config), args)
        if not args.log_level:
            _configure_logging(config.log_level)
        return asyncio.run(_HANDLERS[args.command](args, config))
    except UsageError as exc:
        log.error("usage_error", error=str(exc))
        return EXIT_USAGE
    except LlmError as exc:
        log.error("backend_failure", error=str(exc), tag=exc.request_tag, attempts=exc.attempts)
        return EXIT_BACKEND
    except _INPUT_ERRORS as exc:
        log.error("input_error", error=str(exc), kind=type(exc).__name__)
        return EXIT_INPUT
    except (PromptError, DemonstrationLeakError, ValueError) as exc:
        log.error("usage_error", error=str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(cli())
