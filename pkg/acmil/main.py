"""
Command-line front end.

Usage:
    python -m acmil synth   --out DIR [--rooms N] [--seed S] [--positive-rate P] [--motif-strength M]
    python -m acmil train   --data DIR --out DIR [--model NAME] [--resume CKPT] [--epochs N]
    python -m acmil eval    --checkpoint CKPT --data PATH [--split test] [--out report.json]
                            [--export-embeddings FILE.npz]
    python -m acmil explain --checkpoint CKPT --data PATH [--split test] [--out DIR]

Every subcommand accepts --config FILE (key = value lines), --seed, --log-level and
--quiet. Relative --out paths are placed under $ACMIL_OUTPUT_ROOT when it is set.
"""

from __future__ import annotations
import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from acmil.batching import RoomDataset
from acmil.checkpoint import load_checkpoint, restore_model
from acmil.config import RunConfig, config_to_mapping, load_config, write_config_file
from acmil.errors import AcmilError, CheckpointError
from acmil.explain import explain_rooms, write_attribution, write_grids
from acmil.metrics import evaluate_scores
from acmil.model import MODEL_NAMES, build_model, model_config_for
from acmil.room_data import prepare_rooms, read_rooms_jsonl
from acmil.synthgen import generate_dataset
from acmil.trainer import Trainer, predict, set_seed

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "ACMIL_OUTPUT_ROOT"
CONFIG_SNAPSHOT = "config.txt"
MANIFEST = "manifest.json"


def _banner(title: str) -> None:
    print("=" * 60)
    print(title)
    print("=" * 60)
    print()


def resolve_output(path: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _split_path(data: str, split: str) -> str:
    """``data`` is a JSONL file or a corpus directory holding ``<split>.jsonl``."""
    path = os.path.join(data, f"{split}.jsonl") if os.path.isdir(data) else data
    if not os.path.isfile(path):
        raise AcmilError(f"no room corpus at {path}")
    return path


def _load_split(path: str, run: RunConfig, label: str) -> RoomDataset:
    rooms = read_rooms_jsonl(path)
    prepared = prepare_rooms(rooms, run.preprocess)
    print(f"  [i] {label}: {len(prepared)} rooms from {path}")
    return RoomDataset(prepared, run.model.d_text)


def hash_inputs(config_text: str, paths: Sequence[str]) -> str:
    """sha256 over the config snapshot and the bytes of every input file, in order."""
    h = hashlib.sha256(config_text.encode("utf-8"))
    for path in paths:
        h.update(os.path.basename(path).encode("utf-8"))
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 16), b""):
                h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    model: str
    seed: int
    config: Dict[str, str]
    datasets: Dict[str, str]
    checkpoint: str
    input_hash: str
    timings_s: Dict[str, float] = field(default_factory=dict)
    result: Dict[str, object] = field(default_factory=dict)

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(dataclasses.asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")


# ---- Subcommands ----

def cmd_synth(args: argparse.Namespace, run: RunConfig) -> int:
    out_dir = resolve_output(args.out)
    _banner("SYNTH: synthetic live-room corpus")
    scenario = run.scenario
    print("Step 1: Scenario")
    print(f"  [i] rooms={scenario.num_rooms} positive_rate={scenario.positive_rate} "
          f"motif_strength={scenario.motif_strength} kinds={','.join(scenario.motif_kinds)} seed={scenario.seed}")
    print()
    print("Step 2: Generating splits...")
    paths = generate_dataset(scenario, out_dir, progress=not args.quiet)
    write_config_file(os.path.join(out_dir, CONFIG_SNAPSHOT), run)
    for name, path in paths.items():
        print(f"  [i] {name}: {path}")
    print()
    print(f"Corpus written to: {out_dir}/")
    return 0


def cmd_train(args: argparse.Namespace, run: RunConfig) -> int:
    out_dir = resolve_output(args.out)
    os.makedirs(out_dir, exist_ok=True)
    timings: Dict[str, float] = {}
    _banner(f"TRAIN: {args.model}")

    cfg = model_config_for(args.model, run.model)
    run = dataclasses.replace(run, model=cfg)
    set_seed(cfg.seed, cfg.deterministic)

    t0 = time.perf_counter()
    print("Step 1: Loading corpora...")
    train_path, val_path = _split_path(args.data, "train"), _split_path(args.data, "val")
    train = _load_split(train_path, run, "train")
    val = _load_split(val_path, run, "val")
    timings["load"] = time.perf_counter() - t0
    print()

    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume, expected=cfg)
        if resume.model_name != args.model:
            raise AcmilError(f"checkpoint holds model {resume.model_name!r}, not {args.model!r}")
        model = restore_model(resume)
        print(f"  [i] resuming from {args.resume} (epoch {resume.epoch})")
    else:
        model = build_model(args.model, cfg)
    n_params = sum(p.numel() for p in model.parameters())
    print(f"Step 2: Training ({n_params} parameters, up to {cfg.max_epochs} epochs, patience {cfg.patience})...")
    write_config_file(os.path.join(out_dir, CONFIG_SNAPSHOT), run)
    t0 = time.perf_counter()
    trainer = Trainer(model, args.model, cfg, out_dir, progress=not args.quiet)
    result = trainer.fit(train, val, resume=resume)
    timings["train"] = time.perf_counter() - t0
    print(f"  [i] best epoch {result.best_epoch}: val PR-AUC {result.best_pr_auc:.4f}, threshold {result.threshold:.4f}")
    print(f"  [i] epochs run: {result.epochs_run}{' (early stop)' if result.stopped_early else ''}")
    print()

    config = config_to_mapping(run)
    config_text = "\n".join(f"{k} = {config[k]}" for k in sorted(config))
    manifest = RunManifest(
        model=args.model,
        seed=cfg.seed,
        config=config,
        datasets={"train": train_path, "val": val_path},
        checkpoint=result.checkpoint_path,
        input_hash=hash_inputs(config_text, [train_path, val_path]),
        timings_s={k: round(v, 3) for k, v in timings.items()},
        result={
            "best_epoch": result.best_epoch,
            "best_val_pr_auc": result.best_pr_auc,
            "threshold": result.threshold,
            "epochs_run": result.epochs_run,
        },
    )
    manifest.write(os.path.join(out_dir, MANIFEST))
    print("Step 3: Outputs")
    print(f"  Checkpoint: {result.checkpoint_path}")
    print(f"  Log:        {result.log_path}")
    print(f"  Manifest:   {os.path.join(out_dir, MANIFEST)}")
    return 0


def _restore(args: argparse.Namespace, run: RunConfig):
    snapshot = os.path.join(os.path.dirname(args.checkpoint), CONFIG_SNAPSHOT)
    if args.config is not None:
        # an explicit config must describe the same network as the checkpoint
        checkpoint = load_checkpoint(args.checkpoint, expected=run.model)
    else:
        checkpoint = load_checkpoint(args.checkpoint)
        if os.path.isfile(snapshot):
            # preprocessing must match what the model was trained on
            run = load_config(snapshot)
            print(f"  [i] run settings from {snapshot}")
    limit = checkpoint.model_config.max_actions
    if run.preprocess.max_actions > limit:
        raise CheckpointError(
            f"{args.checkpoint}: preprocess max_actions {run.preprocess.max_actions} "
            f"exceeds the checkpoint's max_actions {limit}"
        )
    run = dataclasses.replace(run, model=checkpoint.model_config)
    return checkpoint, restore_model(checkpoint), run


def cmd_eval(args: argparse.Namespace, run: RunConfig) -> int:
    _banner("EVAL")
    checkpoint, model, run = _restore(args, run)
    print(f"Step 1: Scoring {args.split} rooms with {checkpoint.model_name}...")
    dataset = _load_split(_split_path(args.data, args.split), run, args.split)
    preds = predict(model, dataset, run.model.batch_size, progress=not args.quiet)
    hit_rates = None
    if preds.attribution and preds.attribution[0] is not None:
        hit_rates = [e.hit_rate for e in explain_rooms(dataset, preds, seed=run.model.seed)]
    report = evaluate_scores(preds.scores, preds.labels, checkpoint.threshold, hit_rates)
    print()

    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        out = resolve_output(args.out)
        os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
        with open(out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
        print(f"  [i] report: {out}")
    else:
        print(text)
    if args.export_embeddings:
        path = resolve_output(args.export_embeddings)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        np.savez(path, embeddings=preds.embeddings, labels=preds.labels, scores=preds.scores,
                 room_ids=np.asarray(preds.room_ids))
        print(f"  [i] embeddings: {path}")
    return 0


def cmd_explain(args: argparse.Namespace, run: RunConfig) -> int:
    out_dir = resolve_output(args.out)
    _banner("EXPLAIN: capsule attribution")
    checkpoint, model, run = _restore(args, run)
    dataset = _load_split(_split_path(args.data, args.split), run, args.split)
    print("Step 1: Scoring rooms...")
    preds = predict(model, dataset, run.model.batch_size, progress=not args.quiet)
    explanations = explain_rooms(dataset, preds, seed=run.model.seed)
    if args.rooms:
        wanted = set(args.rooms.split(","))
        explanations = [e for e in explanations if e.room_id in wanted]
    print("Step 2: Writing attribution...")
    os.makedirs(out_dir, exist_ok=True)
    jsonl = os.path.join(out_dir, "attribution.jsonl")
    count = write_attribution(jsonl, explanations)
    write_grids(os.path.join(out_dir, "grids"), explanations)
    print(f"  [i] {count} rooms -> {jsonl}")
    print(f"  [i] user x slot grids -> {os.path.join(out_dir, 'grids')}/")
    return 0


# ---- Parser ----

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="seed for generation, initialization and shuffling")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--quiet", action="store_true", help="disable progress bars")

    parser = argparse.ArgumentParser(prog="acmil", description="Room-level risk assessment for live streams.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--rooms", type=int, dest="num_rooms")
    p.add_argument("--positive-rate", type=float, dest="positive_rate")
    p.add_argument("--motif-strength", type=float, dest="motif_strength")
    p.add_argument("--workers", type=int, dest="gen_workers")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True, help="corpus directory with train.jsonl and val.jsonl")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--model", default="acmil", choices=MODEL_NAMES)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, dest="max_epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a corpus and report metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="JSONL file or corpus directory")
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="write the MetricReport JSON here instead of stdout")
    p.add_argument("--export-embeddings", help="write fused room embeddings to this .npz file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", parents=[common], help="export capsule attribution")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="JSONL file or corpus directory")
    p.add_argument("--split", default="test")
    p.add_argument("--out", default="explain", help="output directory")
    p.add_argument("--rooms", help="comma-separated room ids to keep")
    p.set_defaults(func=cmd_explain)
    return parser


_OVERRIDE_KEYS = ("seed", "num_rooms", "positive_rate", "motif_strength", "gen_workers", "max_epochs")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {k: getattr(args, k, None) for k in _OVERRIDE_KEYS}
        run = load_config(args.config, overrides)
        return args.func(args, run)
    except AcmilError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
