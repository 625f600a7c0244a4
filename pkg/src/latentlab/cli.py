"""Command-line surface: data generation, training, evaluation, diagnostics.

Configuration is a flat ``key=value`` namespace mirroring the TrainConfig
and ModelConfig field names; a config file provides defaults and CLI flags
override it. Every run prints its resolved configuration and snapshots the
same bytes into the run directory, so a checkpoint can always be traced to
the exact configuration (by hash) that produced it.

Exit codes: 0 success, 1 usage error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import sys
from pathlib import Path

# single-threaded BLAS: desk-scale matrices gain nothing from threads
import os

for _v in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_v, "1")

import numpy as np

from . import taskgen as tg
from .checkpoint import load_checkpoint
from .diagnostics import (
    decode_latent_steps,
    detect_collapse,
    plot_geometry_svg,
    read_geometry_csv,
    write_latent_dump,
)
from .model import ModelConfig
from .reasoner import SoftThinkConfig, build_latents, generate_answer
from .trainer import MODES, NonFiniteLossError, TrainConfig, evaluate, train

USAGE_ERROR = 1
RUNTIME_ABORT = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        raise UsageError(message)


# fields whose value is owned by the tokenizer, not the user
_LOCKED = {"vocab_size"}

_CONFIG_FIELDS: dict[str, type] = {}
for _dc in (ModelConfig, TrainConfig):
    for _f in dataclasses.fields(_dc):
        if _f.name not in _LOCKED:
            _CONFIG_FIELDS[_f.name] = _f.type if isinstance(_f.type, type) else type(_f.default)


def _parse_value(key: str, raw: str):
    ty = _CONFIG_FIELDS[key]
    if ty is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise UsageError(f"config key {key!r}: expected a boolean, got {raw!r}")
    try:
        return ty(raw)
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: {exc}") from exc


def read_config_file(path) -> dict:
    out = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected key=value")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _CONFIG_FIELDS:
            raise UsageError(f"{path}:{line_no}: unknown config key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def resolve_configs(file_values: dict, overrides: dict) -> tuple[ModelConfig, TrainConfig, str]:
    """Merge file + flag overrides into the two configs and render the snapshot."""
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    model_kw, train_kw = {}, {}
    model_names = {f.name for f in dataclasses.fields(ModelConfig)}
    for key, value in merged.items():
        if key not in _CONFIG_FIELDS:
            raise UsageError(f"unknown config key {key!r}")
        (model_kw if key in model_names else train_kw)[key] = value
    model_cfg = ModelConfig(vocab_size=tg.VOCAB.size, **model_kw)
    train_cfg = TrainConfig(**train_kw)
    lines = []
    for f in dataclasses.fields(ModelConfig):
        lines.append(f"{f.name}={getattr(model_cfg, f.name)}")
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"{f.name}={getattr(train_cfg, f.name)}")
    return model_cfg, train_cfg, "\n".join(lines) + "\n"


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for name, ty in _CONFIG_FIELDS.items():
        parser.add_argument(f"--{name}", type=str, default=None, metavar=ty.__name__)


def _collect_overrides(args) -> dict:
    out = {}
    for name in _CONFIG_FIELDS:
        raw = getattr(args, name, None)
        if raw is not None:
            out[name] = _parse_value(name, raw)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    out_dir = Path(args.out)
    paths = {split: out_dir / f"{split}.tsv" for split in ("train", "val", "test")}
    existing = [str(p) for p in paths.values() if p.exists()]
    if existing and not args.force:
        raise UsageError(f"output exists (use --force): {', '.join(existing)}")
    out_dir.mkdir(parents=True, exist_ok=True)

    def spec(seed):
        return tg.GenSpec(
            min_steps=args.min_steps, max_steps=args.max_steps,
            min_operand=args.min_operand, max_operand=args.max_operand,
            operators=tuple(args.operators), result_cap=args.result_cap, seed=seed,
        )

    counts = {"train": args.train, "val": args.val, "test": args.test}
    seen: set[str] = set()
    for i, (split, count) in enumerate(counts.items()):
        samples = tg.generate(spec(args.seed + i), count, exclude=seen)
        seen.update(s.question_text for s in samples)
        tg.save_dataset(paths[split], samples)
        print(f"{split}: {count} samples -> {paths[split]}")
    example = tg.load_dataset(paths["train"])[0]
    print(f"sample: {example.question_text}\t{example.steps_text}\t{example.answer_text}")
    return 0


def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    model_cfg, train_cfg, snapshot = resolve_configs(file_values, _collect_overrides(args))
    print("resolved config:")
    print(snapshot, end="")

    data_dir = Path(args.data)
    train_data = tg.load_dataset(data_dir / "train.tsv")
    val_data = tg.load_dataset(data_dir / "val.tsv")
    print(f"data: {len(train_data)} train / {len(val_data)} val from {data_dir}")

    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(snapshot)
    config_hash = hashlib.sha256(snapshot.encode()).hexdigest()
    print(f"config hash: {config_hash}")

    state, *_ = train(
        train_cfg, model_cfg, train_data, val_data,
        run_dir=run_dir, log=print,
        resume_from=args.resume, config_hash=config_hash,
    )
    best = state.best_val if state.history else float("nan")
    print(f"done: best val_acc {best:.4f} at epoch {state.best_epoch}")
    return 0


def _load_eval_checkpoint(path):
    base, decoder, _, meta = load_checkpoint(path)
    train_cfg = TrainConfig(**meta["train_config"])
    return base, decoder, train_cfg, meta


def cmd_eval(args) -> int:
    base, _, train_cfg, meta = _load_eval_checkpoint(args.checkpoint)
    samples = tg.load_dataset(args.data)
    k = args.k if args.k is not None else meta["k"]
    acc, mean_len = evaluate(
        base, samples, k,
        soft=train_cfg.soft,
        tokens_per_latent=train_cfg.tokens_per_latent,
        batch_size=train_cfg.eval_batch_size,
        max_answer_len=train_cfg.max_answer_len,
        explicit_suffix=(train_cfg.mode == "coconut_curriculum"),
    )
    print(f"samples: {len(samples)}  K: {k}")
    print(f"exact_match: {acc:.4f}")
    print(f"mean_decoded_positions: {mean_len:.2f}")
    return 0


def cmd_diagnose(args) -> int:
    run_dir = Path(args.run)
    geo_path = run_dir / "geometry.csv"
    if not geo_path.exists():
        raise UsageError(f"no geometry.csv in {run_dir}")
    history = read_geometry_csv(geo_path)
    plot_geometry_svg(run_dir / "geometry.svg", [r for r in history if r.has_dist])
    usable = [r for r in history if r.has_dist]
    collapsed = detect_collapse(history, args.window, args.drop_ratio) if usable else False
    print(f"epochs: {len(history)} ({len(usable)} with K >= 2)")
    if usable:
        print(f"final dist: {usable[-1].dist:.4f}  final dist_vc: {usable[-1].dist_vc:.4f}")
    print(f"collapse: {'yes' if collapsed else 'no'}")
    print(f"plot: {run_dir / 'geometry.svg'}")
    return 0


def cmd_decode_latents(args) -> int:
    base, decoder, train_cfg, meta = _load_eval_checkpoint(args.checkpoint)
    if decoder is None:
        raise UsageError(
            "checkpoint has no auxiliary decoder: the decoder is a training-only "
            "artifact (removed at inference); decode-latents needs a checkpoint "
            "saved from a sim_cot run"
        )
    samples = tg.load_dataset(args.data)[: args.n]
    k = args.k if args.k is not None else meta["k"]
    entries = []
    for s in samples:
        chain, _ = build_latents(
            base, s.question_tokens, k, train_cfg.soft,
            tokens_per_latent=train_cfg.tokens_per_latent, use_cache=True,
        )
        steps = decode_latent_steps(decoder, chain, max_len=args.max_len)
        gen = generate_answer(
            base, s.question_tokens, k, train_cfg.soft,
            max_len=train_cfg.max_answer_len,
            tokens_per_latent=train_cfg.tokens_per_latent,
        )
        entries.append({
            "question": s.question_text,
            "steps": [tg.detokenize(t) for t in steps],
            "generated": gen.text,
            "gold": s.answer_text,
        })
    out = Path(args.out) if args.out else None
    if out is not None:
        write_latent_dump(out, entries)
        print(f"wrote {len(entries)} dumps to {out}")
    else:
        for e in entries:
            print(f"question: {e['question']}")
            for i, step in enumerate(e["steps"], 1):
                print(f"  latent {i}: {step}")
            print(f"generated answer: {e['generated']}")
            print(f"gold answer: {e['gold']}")
            print()
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="latentlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate train/val/test datasets")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=20000)
    g.add_argument("--val", type=int, default=1000)
    g.add_argument("--test", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-steps", type=int, default=2)
    g.add_argument("--max-steps", type=int, default=4)
    g.add_argument("--min-operand", type=int, default=1)
    g.add_argument("--max-operand", type=int, default=20)
    g.add_argument("--operators", default="+-*/")
    g.add_argument("--result-cap", type=int, default=99)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model into a run directory")
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--data", required=True, help="directory with train.tsv/val.tsv")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", help="checkpoint to resume from")
    _add_config_flags(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--k", type=int, default=None)
    e.set_defaults(fn=cmd_eval)

    d = sub.add_parser("diagnose", help="geometry report + collapse verdict for a run")
    d.add_argument("--run", required=True)
    d.add_argument("--window", type=int, default=5)
    d.add_argument("--drop-ratio", type=float, default=0.3)
    d.set_defaults(fn=cmd_diagnose)

    dl = sub.add_parser("decode-latents", help="decode latent steps via the decoder")
    dl.add_argument("--checkpoint", required=True)
    dl.add_argument("--data", required=True)
    dl.add_argument("--n", type=int, default=10)
    dl.add_argument("--k", type=int, default=None)
    dl.add_argument("--max-len", type=int, default=16)
    dl.add_argument("--out", default=None)
    dl.set_defaults(fn=cmd_decode_latents)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except NonFiniteLossError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return RUNTIME_ABORT
    except (tg.TokenizationError, tg.GenerationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ABORT


if __name__ == "__main__":
    sys.exit(main())
