"""Command-line entry point.

Exit codes: 0 success, 1 runtime fault, 2 validation error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, load_config, save_config
from .data import CorpusError, load_corpus
from .tensor import ContractViolation, NumericFault
from .training import (
    Trainer,
    TrainState,
    build_corpus,
    evaluate,
    inspect_masks,
    latest_checkpoint,
    load_checkpoint,
)

log = logging.getLogger("advmlm")

EXIT_OK, EXIT_FAULT, EXIT_INVALID = 0, 1, 2
OUTPUT_ROOT_ENV = "ADVMLM_OUTPUT_ROOT"

CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.jsonl"
CHECKPOINT_DIR = "checkpoints"
MANIFEST_FILE = "MANIFEST"


class UsageError(Exception):
    """Bad invocation; maps to exit code 2."""


# ------------------------------------------------------------------ helpers
def _resolve_output(cfg: RunConfig, out: str | None, name: str) -> Path:
    if out:
        return Path(out)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{name}-{cfg.fingerprint().hex()[:12]}"


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty; pass --resume or --force")
        for item in (CONFIG_FILE, METRICS_FILE, MANIFEST_FILE):
            (path / item).unlink(missing_ok=True)
        for f in (path / CHECKPOINT_DIR).glob("*") if (path / CHECKPOINT_DIR).is_dir() else ():
            f.unlink()
    (path / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)


def write_manifest(run_dir: Path) -> None:
    lines = []
    for f in sorted(run_dir.rglob("*")):
        if f.is_file() and f.name != MANIFEST_FILE and not f.name.endswith(".tmp"):
            digest = hashlib.sha256(f.read_bytes()).hexdigest()
            lines.append(f"{digest}  {f.relative_to(run_dir).as_posix()}")
    (run_dir / MANIFEST_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _truncate_metrics(path: Path, last_step: int) -> None:
    """Drop records past ``last_step`` (written after the checkpoint a resume starts from)."""
    if not path.exists():
        return
    keep = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip() and json.loads(line)["step"] <= last_step:
            keep.append(line)
    path.write_text("".join(l + "\n" for l in keep), encoding="utf-8")


def _run(cfg: RunConfig, run_dir: Path, state: TrainState | None) -> int:
    trainer = Trainer(cfg, state=state)
    metrics_path = run_dir / METRICS_FILE
    with open(metrics_path, "a", encoding="utf-8") as fh:

        def emit(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()

        records = trainer.run(on_record=emit, checkpoint_dir=run_dir / CHECKPOINT_DIR)
    write_manifest(run_dir)
    last = records[-1] if records else None
    if last:
        print(f"step {last['step']}  mode {last['mode']}  loss {last['mlm_loss']:.4f}  acc {last['masked_accuracy']:.3f}")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _load_run_config(args, adversarial: bool) -> RunConfig:
    if not args.config:
        raise UsageError("--config is required")
    cfg = load_config(args.config, args.set or ())
    if cfg.adversarial != adversarial:
        cfg = cfg.replace(adversarial=adversarial)
    return cfg


# ----------------------------------------------------------------- commands
def cmd_pretrain(args, adversarial: bool = True) -> int:
    if args.resume:
        run_dir = Path(args.resume)
        snapshot = run_dir / CONFIG_FILE
        if not snapshot.is_file():
            raise UsageError(f"{run_dir} has no {CONFIG_FILE}; not a run directory")
        cfg = load_config(snapshot, args.set or ())
        found = latest_checkpoint(run_dir / CHECKPOINT_DIR)
        if found is None:
            raise UsageError(f"no checkpoint found under {run_dir / CHECKPOINT_DIR}")
        state = load_checkpoint(found, cfg)
        state.config = cfg  # runtime keys (e.g. max_steps) may differ
        _truncate_metrics(run_dir / METRICS_FILE, state.steps_done)
        save_config(cfg, snapshot)
        log.info("resuming from %s at step %d", found, state.i)
        return _run(cfg, run_dir, state)
    cfg = _load_run_config(args, adversarial)
    run_dir = _resolve_output(cfg, args.out, "pretrain" if adversarial else "baseline")
    _prepare_dir(run_dir, args.force)
    save_config(cfg, run_dir / CONFIG_FILE)
    return _run(cfg, run_dir, None)


def cmd_baseline(args) -> int:
    return cmd_pretrain(args, adversarial=False)


def _load_for_eval(args) -> TrainState:
    cfg = load_config(args.config, args.set or ()) if getattr(args, "config", None) else None
    return load_checkpoint(args.checkpoint, cfg)


def _eval_sequences(args, state: TrainState) -> list[str]:
    if args.corpus:
        return load_corpus(args.corpus, args.format)
    train, _ = build_corpus(state.config)
    return train


def cmd_eval(args) -> int:
    state = _load_for_eval(args)
    seqs = _eval_sequences(args, state)
    if args.limit:
        seqs = seqs[: args.limit]
    report = evaluate(state, seqs, args.masking, seed=args.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def format_mask_report(record: dict) -> str:
    """Aligned text: token row, probability row (x10, 0-9), decision row."""
    toks = record["tokens"]
    probs = "".join(str(min(int(p * 10), 9)) for p in record["any_mask_prob"])
    marks = "".join({"none": ".", "adv_mask": "M", "adv_keep": "K", "adv_replace": "R"}.get(k, "?") for k in record["kind"])
    return f"#{record['index']}\n  seq  {toks}\n  p    {probs}\n  mask {marks}"


def cmd_inspect_masks(args) -> int:
    state = _load_for_eval(args)
    if args.sequences:
        seqs = [s.strip().upper() for s in args.sequences]
    else:
        seqs = _eval_sequences(args, state)
    if args.limit:
        seqs = seqs[: args.limit]
    records = inspect_masks(state, seqs, seed=args.seed)
    stream = open(args.jsonl, "w", encoding="utf-8") if args.jsonl else None
    try:
        for rec in records:
            print(format_mask_report(rec))
            if stream:
                stream.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if stream:
            stream.close()
    return EXIT_OK


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advmlm", description="Adversarial masked-language-model pre-training.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def run_args(sp, resume: bool):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<name>-<fingerprint>)")
        sp.add_argument("--force", action="store_true", help="reuse a non-empty output directory")
        if resume:
            sp.add_argument("--resume", metavar="RUN_DIR", help="continue from the latest checkpoint in RUN_DIR")
        else:
            sp.set_defaults(resume=None)

    run_args(sub.add_parser("pretrain", help="adversarial pre-training"), resume=True)
    run_args(sub.add_parser("baseline", help="random-masking baseline at baseline_rate"), resume=True)

    def ckpt_args(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--config", help="config the checkpoint must match (fingerprint check)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE")
        sp.add_argument("--corpus", help="sequence file (default: the run's training corpus)")
        sp.add_argument("--format", choices=("fasta", "lines"), default="fasta")
        sp.add_argument("--limit", type=int, default=0, help="use only the first N sequences")
        sp.add_argument("--seed", type=int, default=None, help="masking seed (default: config seed)")

    ev = sub.add_parser("eval", help="frozen evaluation under random and/or adversarial masking")
    ckpt_args(ev)
    ev.add_argument("--masking", choices=("random", "adversarial", "both"), default="both")
    ev.add_argument("--output", help="also write the JSON report here")

    ins = sub.add_parser("inspect-masks", help="per-position any-mask probabilities and decisions")
    ckpt_args(ins)
    ins.add_argument("--sequences", nargs="*", help="sequences given inline")
    ins.add_argument("--jsonl", help="write the machine-readable record stream here")
    return p


COMMANDS = {
    "pretrain": cmd_pretrain,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "inspect-masks": cmd_inspect_masks,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, CorpusError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ckpt.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericFault, OSError, RuntimeError) as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
