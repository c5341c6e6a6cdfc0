from __future__ import annotations

import json
from collections.abc import Iterator
from contextlib import contextmanager
from functools import partial
from pathlib import Path
from typing import Annotated, Any

import anyio
import typer

from .analyze import ControlReport, audit, checkpoint_series, report_document, write_series_csv
from .cache import ContentCache, cached_tail
from .errors import OrbitControlError
from .log import bind_run_context, clear_context, get_logger, setup_logging
from .pattern import initial_pattern, pattern_document
from .scale import scale_document
from .settings import RunConfig, ResolvedRun, config_document, demo_config, load_config, parse_config, resolve
from .synth import SynthesisLedger, Synthesizer, ledger_document, ledger_from_document
from .tail import SparseTail, tail_document, validate_tail

logger = get_logger(__name__)

app = typer.Typer(
    name="orbit-control",
    help="Controlled points at any scale with a long sparse tail.",
    no_args_is_help=True,
    add_completion=False,
)

EXIT_CLEAN = 0
EXIT_VIOLATIONS = 1
EXIT_ERROR = 2

PREFIX_FILE = "prefix.bin"
LEDGER_FILE = "ledger.json"
REPORT_FILE = "report.json"
SERIES_FILE = "series.csv"

ConfigOption = Annotated[
    Path | None,
    typer.Option("--config", help="TOML run config; the built-in full 2-shift example when omitted."),
]
DepthOption = Annotated[int | None, typer.Option("--depth", min=0, help="Override the config depth D.")]
OutOption = Annotated[Path | None, typer.Option("--out", help="Override the output directory.")]
ExhaustiveOption = Annotated[
    bool | None,
    typer.Option("--exhaustive/--sampled", help="Check every block or every sample_stride-th block."),
]
SeedlessOption = Annotated[
    bool,
    typer.Option("--seedless", help="Accepted for scripts; every stage is deterministic and seedless."),
]


def dumps(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _write(path: Path, doc: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(doc), encoding="utf-8")


def _config(
    config: Path | None,
    depth: int | None,
    out: Path | None,
    exhaustive: bool | None,
) -> RunConfig:
    base = load_config(config) if config is not None else demo_config()
    if depth is None and out is None and exhaustive is None:
        return base
    raw = config_document(base)
    if depth is not None:
        raw["depth"] = depth
    if out is not None:
        raw["output"]["directory"] = str(out)
    if exhaustive is not None:
        raw["verify"]["exhaustive"] = exhaustive
    return parse_config(raw)


def _cache(config: RunConfig) -> ContentCache:
    return ContentCache(root=config.output.directory / "cache", enabled=config.output.cache)


@contextmanager
def _guard(command: str) -> Iterator[None]:
    bind_run_context(command=command)
    try:
        yield
    except OrbitControlError as exc:
        logger.error("cli.failed", command=command, error=type(exc).__name__)
        typer.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        raise typer.Exit(EXIT_ERROR) from exc
    finally:
        clear_context()


def _prepare(config: RunConfig) -> tuple[ResolvedRun, ContentCache, SparseTail]:
    cache = _cache(config)
    run = resolve(config, cache=cache)
    tail = cached_tail(cache, run.scale, run.depth)
    return run, cache, tail


def _synthesize(run: ResolvedRun, tail: SparseTail) -> SynthesisLedger:
    synth = Synthesizer(run.sft, run.potential, run.scale, run.params, universal_words=run.universal_words)
    anyio.run(partial(synth.warm, workers=run.config.verify.workers))
    return synth.run(tail)


def _store_ledger(ledger: SynthesisLedger, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / PREFIX_FILE).write_bytes(ledger.prefix)
    _write(out / LEDGER_FILE, ledger_document(ledger))


def _audit(run: ResolvedRun, tail: SparseTail, prefix: bytes, ledger: SynthesisLedger | None) -> ControlReport:
    verify = run.config.verify
    job = partial(
        audit,
        prefix,
        run.sft,
        tail,
        run.params,
        run.potential,
        run.target,
        ledger=ledger,
        claims=verify.claims,
        workers=verify.workers,
        stride=verify.stride,
    )
    return anyio.run(job)


def _emit_report(run: ResolvedRun, tail: SparseTail, prefix: bytes, report: ControlReport, label: str) -> int:
    out = run.config.output.directory
    _write(out / REPORT_FILE, report_document(report, label))
    order = max(run.params.density_depths, default=0)
    rows = checkpoint_series(prefix, run.sft, run.scale, run.potential, order, depth=tail.depth)
    write_series_csv(rows, out / SERIES_FILE)
    typer.echo(dumps({"label": label, "summary": report.summary()}), nl=False)
    return EXIT_CLEAN if report.clean else EXIT_VIOLATIONS


@app.callback()
def main(debug: Annotated[bool, typer.Option("--debug", help="Log debug events to stderr.")] = False) -> None:
    setup_logging(debug=debug)


@app.command()
def scale(
    config: ConfigOption = None,
    depth: DepthOption = None,
    out: OutOption = None,
    seedless: SeedlessOption = False,
) -> None:
    """Print the scale and its controlling sequence."""
    with _guard("scale"):
        cfg = _config(config, depth, out, None)
        run = resolve(cfg, cache=_cache(cfg))
        doc = {
            "scale": scale_document(run.scale),
            "alpha": [str(a) for a in run.params.alpha],
            "beta": [str(b) for b in run.params.beta],
            "density_depths": list(run.params.density_depths),
            "target": str(run.target),
        }
        _write(cfg.output.directory / "scale.json", doc)
        typer.echo(dumps(doc), nl=False)


@app.command()
def tail(
    config: ConfigOption = None,
    depth: DepthOption = None,
    out: OutOption = None,
    exhaustive: ExhaustiveOption = None,
    seedless: SeedlessOption = False,
) -> None:
    """Build, validate and serialize the long sparse tail."""
    with _guard("tail"):
        cfg = _config(config, depth, out, exhaustive)
        _, _, built = _prepare(cfg)
        report = validate_tail(built, stride=cfg.verify.stride)
        doc = {
            "tail": tail_document(built),
            "validation": {
                "ok": report.ok,
                "checked_blocks": report.checked_blocks,
                "sampled": report.sampled,
                "violations": [
                    {"kind": v.kind, "level": v.level, "start": v.start, "detail": v.detail}
                    for v in report.violations
                ],
            },
        }
        _write(cfg.output.directory / "tail.json", doc)
        typer.echo(dumps({"ok": report.ok, "checked_blocks": report.checked_blocks}), nl=False)
    raise typer.Exit(EXIT_CLEAN if report.ok else EXIT_VIOLATIONS)


@app.command()
def pattern(
    config: ConfigOption = None,
    depth: DepthOption = None,
    out: OutOption = None,
    seedless: SeedlessOption = False,
) -> None:
    """Emit the initial patterns of levels 0..D."""
    with _guard("pattern"):
        cfg = _config(config, depth, out, None)
        _, _, built = _prepare(cfg)
        docs = [pattern_document(initial_pattern(built, n)) for n in range(built.depth + 1)]
        _write(cfg.output.directory / "patterns.json", docs)
        typer.echo(dumps({"levels": len(docs), "cells": [len(d["cells"]) for d in docs]}), nl=False)


@app.command()
def synth(
    config: ConfigOption = None,
    depth: DepthOption = None,
    out: OutOption = None,
    seedless: SeedlessOption = False,
) -> None:
    """Produce the controlled prefix and its ledger."""
    with _guard("synth"):
        cfg = _config(config, depth, out, None)
        run, _, built = _prepare(cfg)
        ledger = _synthesize(run, built)
        _store_ledger(ledger, cfg.output.directory)
        typer.echo(
            dumps({"length": ledger.length, "context": len(ledger.context), "records": len(ledger.records)}),
            nl=False,
        )


@app.command()
def analyze(
    config: ConfigOption = None,
    depth: DepthOption = None,
    out: OutOption = None,
    exhaustive: ExhaustiveOption = None,
    seedless: SeedlessOption = False,
    prefix_file: Annotated[
        Path | None, typer.Option("--prefix", help="Raw symbol file; defaults to <out>/prefix.bin.")
    ] = None,
    ledger_file: Annotated[
        Path | None, typer.Option("--ledger", help="Ledger document; defaults to <out>/ledger.json if present.")
    ] = None,
) -> None:
    """Check control, density and the proof claims on a symbol prefix."""
    with _guard("analyze"):
        cfg = _config(config, depth, out, exhaustive)
        run, _, built = _prepare(cfg)
        directory = cfg.output.directory
        try:
            prefix = (prefix_file or directory / PREFIX_FILE).read_bytes()
        except OSError as exc:
            raise typer.BadParameter(f"cannot read the prefix: {exc}") from exc
        ledger = None
        ledger_path = ledger_file or directory / LEDGER_FILE
        if ledger_path.exists():
            ledger = ledger_from_document(json.loads(ledger_path.read_text(encoding="utf-8")), prefix)
        report = _audit(run, built, prefix, ledger)
        status = _emit_report(run, built, prefix, report, label=f"analyze depth={built.depth}")
    raise typer.Exit(status)


@app.command()
def demo(
    depth: DepthOption = None,
    out: OutOption = None,
    exhaustive: ExhaustiveOption = None,
    seedless: SeedlessOption = False,
) -> None:
    """End to end on the built-in full 2-shift example."""
    with _guard("demo"):
        cfg = _config(None, depth, out, exhaustive)
        run, _, built = _prepare(cfg)
        ledger = _synthesize(run, built)
        _store_ledger(ledger, cfg.output.directory)
        report = _audit(run, built, ledger.prefix, ledger)
        status = _emit_report(run, built, ledger.prefix, report, label=f"demo depth={built.depth}")
    raise typer.Exit(status)


if __name__ == "__main__":
    app()
