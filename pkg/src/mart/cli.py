"""Command-line entry point: ``mart <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import sys
import tempfile
import time
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import MODEL_KINDS, ConfigError, RunConfig, desk_config
from .data import DataError, build_vocab, load_dataset, read_meta, read_records, write_synthetic
from .decoding import decode_corpus
from .metrics import MetricError, evaluate, format_report, write_paragraph_file
from .models import Captioner
from .retrieval import RetrievalError, format_ranking, memory_vectors, rank
from .rng import stream
from .training import TrainingError, train

log = logging.getLogger("mart")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


def _run_config(path, **overrides) -> RunConfig:
    base = desk_config()
    cfg = RunConfig.from_file(path, base) if path else base
    return cfg.override(**overrides)


def _split_paths(data: str, cfg: RunConfig) -> tuple[Path, Path | None]:
    p = Path(data)
    if p.is_dir():
        return p / "train.jsonl", p / "val.jsonl"
    val = cfg.get("val_data")
    return p, Path(val) if val else None


def _meta_path(data_path: Path) -> Path:
    return data_path.with_name(data_path.name.replace(".jsonl", "") + ".meta.jsonl")


def history_flags(data_path: Path, examples):
    """Per-example history flags from the generator's sidecar, or None if absent."""
    mp = _meta_path(data_path)
    if not mp.exists():
        return None
    meta = read_meta(mp)
    return [meta[ex.video_id]["history_flags"] if ex.video_id in meta else None for ex in examples]


def load_corpus(cfg: RunConfig, train_path: Path, val_path: Path | None, seed: int = 0):
    """Build the vocabulary from training sentences and encode both splits."""
    records = read_records(train_path)
    vocab = build_vocab((s["sentence"] for r in records for s in r["segments"]), cfg.get("min_count", 1))
    mcfg = cfg.model(vocab_size=len(vocab))
    train_set = load_dataset(train_path, vocab, mcfg)
    if val_path is not None:
        val_set = load_dataset(val_path, vocab, mcfg)
    else:
        # hold out a sixth of the training videos
        order = stream(seed, "split").permutation(len(train_set))
        n_val = max(1, len(train_set) // 6)
        val_set = [train_set[i] for i in sorted(order[:n_val])]
        train_set = [train_set[i] for i in sorted(order[n_val:])]
    return vocab, mcfg, train_set, val_set


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    n_val = args.n_val if args.n_val is not None else max(1, round(args.n_videos / 6))
    if not 0 < n_val < args.n_videos:
        raise UsageError(f"--n-val {n_val} must be between 1 and n_videos - 1")
    paths = write_synthetic(args.out, args.seed, args.n_videos - n_val, n_val)
    for name in ("train", "val"):
        print(f"wrote {paths[name]}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args.config, model_kind=args.model, seed=args.seed, max_epochs=args.max_epochs)
    train_path, val_path = _split_paths(args.data, cfg)
    tcfg = cfg.train()
    vocab, mcfg, train_set, val_set = load_corpus(cfg, train_path, val_path, tcfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "metrics.log"
    log_path.write_text("", encoding="utf-8")
    model = Captioner(mcfg, seed=tcfg.seed)
    res = train(model, train_set, val_set, tcfg, vocab, log_path=log_path)
    save_checkpoint(model, out / "model.ckpt", vocab, res.optimizer,
                    extra={"best_epoch": res.best_epoch, "seed": tcfg.seed})
    print(f"best_epoch={res.best_epoch} cider={res.best_cider:.4f} checkpoint={out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    print(format_report(evaluate(args.pred, args.ref)))
    return 0


def cmd_decode(args) -> int:
    model, vocab, _, _ = load_checkpoint(args.checkpoint)
    if vocab is None:
        raise CheckpointError("checkpoint carries no vocabulary")
    examples = load_dataset(args.data, vocab, model.cfg)
    preds = decode_corpus(model, examples, vocab)
    write_paragraph_file(args.out, preds)
    print(f"wrote {len(preds)} paragraphs to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck as G

    base = RunConfig.from_mapping({k: v for k, v in G.tiny_config("mart").__dict__.items()})
    cfg = RunConfig.from_file(args.config, base) if args.config else base
    seed = cfg.get("seed", 0)
    start = time.perf_counter()
    report = G.Report(G.primitive_suite(seed))
    kinds = [args.model] if args.model else list(MODEL_KINDS)
    for kind in kinds:
        report.results.extend(G.check_model(kind, seed=seed, cfg=cfg.model(model_kind=kind)))
    for line in report.lines():
        print(line)
    worst = max(r.max_rel_error for r in report.results)
    print(f"{'PASS' if report.passed else 'FAIL'} overall max_rel_err={worst:.3e} "
          f"seconds={time.perf_counter() - start:.1f}")
    return 0 if report.passed else 1


GRID = {"layers": (1, 2, 5), "mem_len": (1, 2, 5), "recurrence": (True, False)}


def parse_grid(grid: str) -> list[dict]:
    """``full`` or ``key=v1,v2;key=v`` over keys layers, mem_len, recurrence."""
    axes = dict(GRID)
    if grid != "full":
        for part in filter(None, (p.strip() for p in grid.split(";"))):
            if "=" not in part:
                raise UsageError(f"bad grid term {part!r}; expected key=v1,v2")
            key, vals = (s.strip() for s in part.split("=", 1))
            if key not in GRID:
                raise UsageError(f"unknown grid key {key!r}; choose from {sorted(GRID)}")
            items = [v.strip() for v in vals.split(",") if v.strip()]
            if key == "recurrence":
                bad = [v for v in items if v not in ("on", "off")]
                if bad:
                    raise UsageError(f"recurrence values must be on/off, got {bad}")
                axes[key] = tuple(v == "on" for v in items)
            else:
                try:
                    axes[key] = tuple(int(v) for v in items)
                except ValueError:
                    raise UsageError(f"grid values for {key} must be integers: {vals!r}") from None
    return [dict(zip(axes, combo)) for combo in itertools.product(*axes.values())]


def cell_label(cell: dict) -> str:
    return f"layers={cell['layers']} mem_len={cell['mem_len']} recurrence={'on' if cell['recurrence'] else 'off'}"


def cmd_ablate(args) -> int:
    cells = parse_grid(args.grid)
    cfg = _run_config(args.config, seed=args.seed, max_epochs=args.max_epochs, model_kind="mart")
    with tempfile.TemporaryDirectory() as tmp:
        if args.data:
            train_path, val_path = _split_paths(args.data, cfg)
        else:
            n_val = max(1, args.n_videos // 6)
            paths = write_synthetic(tmp, cfg.train().seed, args.n_videos - n_val, n_val)
            train_path, val_path = paths["train"], paths["val"]
        _run_grid(cells, cfg, train_path, val_path, args.out)
    return 0


def _run_grid(cells, cfg, train_path, val_path, out_path) -> None:
    out_fh = open(out_path, "w", encoding="utf-8") if out_path else None
    try:
        for cell in cells:
            ccfg = cfg.override(n_layers=cell["layers"], mem_len=cell["mem_len"], recurrence=cell["recurrence"])
            tcfg = ccfg.train()
            vocab, mcfg, train_set, val_set = load_corpus(ccfg, train_path, val_path, tcfg.seed)
            model = Captioner(mcfg, seed=tcfg.seed)
            res = train(model, train_set, val_set, tcfg, vocab)
            best = res.log[res.best_epoch]
            row = f"{cell_label(cell)} best_{best.line()}"
            print(row, flush=True)
            if out_fh:
                out_fh.write(row + "\n")
                out_fh.flush()
    finally:
        if out_fh:
            out_fh.close()


def cmd_retrieve(args) -> int:
    model, vocab, _, _ = load_checkpoint(args.checkpoint)
    if model.cfg.model_kind != "mart":
        raise RetrievalError(f"retrieval needs a mart checkpoint, got {model.cfg.model_kind!r}")
    if vocab is None:
        raise CheckpointError("checkpoint carries no vocabulary")
    examples = load_dataset(args.data, vocab, model.cfg)
    vecs = memory_vectors(model, examples)
    print(format_ranking(rank(vecs, args.query_id, args.k)))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mart", description="Recurrent paragraph captioning toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic coherence corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-videos", type=int, default=600)
    s.add_argument("--n-val", type=int, default=None, help="validation videos (default: a sixth)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a captioner")
    s.add_argument("--config")
    s.add_argument("--model", required=True, choices=MODEL_KINDS)
    s.add_argument("--data", required=True, help="directory with train/val.jsonl, or a train file")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a predictions file")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("decode", help="greedy-decode paragraphs")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--config")
    s.add_argument("--model", choices=MODEL_KINDS, help="check one model kind only")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="run the layers x memory length x recurrence grid")
    s.add_argument("--grid", default="full")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--n-videos", type=int, default=240, help="synthetic corpus size when --data is absent")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("retrieve", help="nearest videos by final memory state")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--query-id", required=True)
    s.add_argument("--k", type=int, default=5)
    s.set_defaults(func=cmd_retrieve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"mart {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (DataError, MetricError, CheckpointError, RetrievalError, TrainingError, OSError, KeyError) as e:
        print(f"mart {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
