#!/usr/bin/env python3
"""
Benchmark runner with a fixed output layout.

Runs the synthetic experiments end to end and writes one summary:
  - detection:     acmil vs meanpool vs atmil on the default corpus
  - localization:  attribution hit rate of acmil on test fraud rooms vs uniform attribution
  - null control:  acmil on a corpus generated with motif_strength 0
  - rank response: median attribution rank of one planted capsule as its text shift grows 0 -> 1
  - overfit:       acmil trained and scored on 20 rooms for 100 epochs (expects PR-AUC 1.0)
  - slot sweep:    slot_len_s in {50, 100, 150}
  - viewer sweep:  top_viewers in {30, 50, 70}
  - ablations:     acmil-no-a, acmil-no-c, acmil-no-u, acmil-no-t

Files are generated under --out (default bench/):
  - corpus/<name>/      : synthetic corpora
  - runs/<experiment>/  : checkpoints and training logs
  - benchmark.json      : summary
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

import numpy as np

from acmil.batching import RoomDataset
from acmil.checkpoint import load_checkpoint, restore_model
from acmil.config import RunConfig, load_config
from acmil.explain import explain_rooms
from acmil.metrics import evaluate_scores, pr_auc
from acmil.model import build_model, model_config_for
from acmil.room_data import prepare_rooms, read_rooms_jsonl, retained_planted_capsules, slot_of
from acmil.synthgen import feature_space, generate_benign_room, generate_dataset, generate_fraud_room
from acmil.trainer import Trainer, predict, set_seed

ABLATIONS = ("acmil-no-a", "acmil-no-c", "acmil-no-u", "acmil-no-t")


def _datasets(paths, run: RunConfig):
    return {
        name: RoomDataset(prepare_rooms(read_rooms_jsonl(path), run.preprocess), run.model.d_text)
        for name, path in paths.items()
    }


def train_and_test(name: str, model_name: str, data, run: RunConfig, runs_dir: str, quiet: bool):
    """Train one model, reload its best checkpoint and score the test split."""
    cfg = model_config_for(model_name, run.model)
    set_seed(cfg.seed, cfg.deterministic)
    out_dir = os.path.join(runs_dir, name)
    t0 = time.perf_counter()
    trainer = Trainer(build_model(model_name, cfg), model_name, cfg, out_dir, progress=not quiet)
    result = trainer.fit(data["train"], data["val"])
    checkpoint = load_checkpoint(result.checkpoint_path)
    model = restore_model(checkpoint)
    preds = predict(model, data["test"], cfg.batch_size)
    hit_rates = None
    if preds.attribution and preds.attribution[0] is not None:
        hit_rates = [e.hit_rate for e in explain_rooms(data["test"], preds, seed=cfg.seed)]
    report = evaluate_scores(preds.scores, preds.labels, checkpoint.threshold, hit_rates)
    print(f"  [i] {name:<22} PR-AUC {report.pr_auc:.4f}  F1 {report.f1:.4f}  "
          f"R@0.1FPR {report.recall_at_fpr01:.4f}  ({time.perf_counter() - t0:.0f}s)")
    summary = report.to_dict()
    summary["best_epoch"] = result.best_epoch
    return summary, preds


def uniform_hit_rate(dataset: RoomDataset) -> float:
    """Expected hit rate of uniform attribution with random tie-breaking, over rooms with planted cells."""
    rates = []
    for item in dataset.items:
        if item.planted:
            rates.append(min(1.0, len(item.planted) / item.num_capsules))
    return float(np.mean(rates)) if rates else float("nan")


def _shift_cell(room, cell, shift: float, direction, slot_len_s: float, num_slots: int):
    """Copy of ``room`` with the text of one (user, slot) cell moved ``shift`` along ``direction``."""
    actions = []
    for a in room.actions:
        if a.text_feature is not None and (a.user_id, slot_of(a.timestamp_s, slot_len_s, num_slots)) == cell:
            a = dataclasses.replace(
                a, text_feature=tuple(float(v) + shift * float(d) for v, d in zip(a.text_feature, direction))
            )
        actions.append(a)
    return dataclasses.replace(room, actions=tuple(actions))


def attribution_rank_response(model, run: RunConfig, strengths=(0.0, 0.25, 0.5, 0.75, 1.0), num_rooms: int = 50):
    """Median attribution rank (1 = top) of one planted viewer capsule as only its text shift grows.

    Rooms are drawn at motif_strength 0 so the edited cell is the only shifted one.
    """
    scenario = dataclasses.replace(run.scenario, motif_strength=0.0)
    pre = run.preprocess
    direction = feature_space(scenario.seed, scenario.d_text, scenario.vocab_size).shift_direction
    rng = np.random.default_rng([scenario.seed, 0x5A17])
    ranks = {s: [] for s in strengths}
    rooms_used = 0
    for _ in range(20 * num_rooms):
        if rooms_used == num_rooms:
            break
        room = generate_fraud_room(rng, scenario)
        prepared = prepare_rooms([room], pre)
        if not prepared:
            continue
        clean, grid = prepared[0]
        texty = {(a.user_id, slot_of(a.timestamp_s, pre.slot_len_s, grid.num_slots))
                 for a in clean.actions if a.text_feature is not None}
        cells = sorted(c for c in retained_planted_capsules(clean, grid) if c[0] != clean.streamer_id and c in texty)
        if not cells:
            continue
        cell = cells[int(rng.integers(len(cells)))]
        index = [grid.capsule_key(i) for i in range(grid.num_capsules)].index(cell)
        for s in strengths:
            variant = _shift_cell(room, cell, s, direction, pre.slot_len_s, grid.num_slots)
            dataset = RoomDataset(prepare_rooms([variant], pre), run.model.d_text)
            scores = predict(model, dataset, batch_size=1).attribution[0]
            ranks[s].append(1 + int(np.sum(scores > scores[index])))
        rooms_used += 1

    medians = [float(np.median(ranks[s])) if ranks[s] else None for s in strengths]
    known = [m for m in medians if m is not None]
    return {
        "strengths": list(strengths),
        "median_rank": medians,
        "rooms": rooms_used,
        "non_increasing": bool(known) and all(b <= a for a, b in zip(known, known[1:])),
    }


def overfit_check(run: RunConfig, out_dir: str, num_rooms: int = 20, epochs: int = 100, quiet: bool = False):
    """Train acmil on a tiny balanced set and score that same set; a working pipeline reaches PR-AUC 1.0."""
    rng = np.random.default_rng([run.scenario.seed, 0x0F17])
    scenario = dataclasses.replace(run.scenario, motif_strength=1.0)
    rooms = [generate_fraud_room(rng, scenario, f"fit-{i:03d}") if i % 2 else
             generate_benign_room(rng, scenario, f"fit-{i:03d}") for i in range(num_rooms)]
    dataset = RoomDataset(prepare_rooms(rooms, run.preprocess), run.model.d_text)
    cfg = dataclasses.replace(run.model, max_epochs=epochs, patience=epochs, learning_rate=1e-3,
                              batch_size=4, dropout=0.0)
    set_seed(cfg.seed, cfg.deterministic)
    trainer = Trainer(build_model("acmil", cfg), "acmil", cfg, out_dir, progress=not quiet)
    trainer.fit(dataset, dataset)
    model = restore_model(load_checkpoint(trainer.checkpoint_path))
    preds = predict(model, dataset, cfg.batch_size)
    train_pr_auc = pr_auc(preds.scores, preds.labels)
    print(f"  [i] {num_rooms} rooms, {epochs} epochs: train PR-AUC {train_pr_auc:.4f}")
    return {"rooms": len(dataset), "epochs": epochs, "train_pr_auc": train_pr_auc, "reached_one": train_pr_auc == 1.0}


def run_benchmark(out_root: str, base: RunConfig, quiet: bool = False, skip_sweeps: bool = False):
    corpus_dir = os.path.join(out_root, "corpus")
    runs_dir = os.path.join(out_root, "runs")
    summary = {}

    print("=" * 70)
    print("Capsule MIL benchmark on synthetic rooms")
    print("=" * 70)
    print()

    print("Step 1: Detection (default corpus)")
    paths = generate_dataset(base.scenario, os.path.join(corpus_dir, "default"), progress=not quiet)
    data = _datasets(paths, base)
    detection = {}
    for model_name in ("acmil", "meanpool", "atmil"):
        detection[model_name], preds = train_and_test(model_name, model_name, data, base, runs_dir, quiet)
        if model_name == "acmil":
            acmil_preds = preds
    detection["margin_over_meanpool"] = detection["acmil"]["pr_auc"] - detection["meanpool"]["pr_auc"]
    summary["detection"] = detection
    print()

    print("Step 2: Attribution localization")
    explained = explain_rooms(data["test"], acmil_preds, seed=base.model.seed)
    fraud = [e.hit_rate for e in explained if e.label == 1 and e.hit_rate is not None]
    uniform = uniform_hit_rate(data["test"])
    summary["localization"] = {
        "mean_hit_rate": float(np.mean(fraud)) if fraud else None,
        "uniform_hit_rate": uniform,
        "fraud_rooms": len(fraud),
    }
    print(f"  [i] mean hit rate {summary['localization']['mean_hit_rate']}, uniform {uniform:.4f}")
    print()

    print("Step 3: Null-signal control (motif_strength 0)")
    null_run = base.replace(motif_strength=0.0)
    null_paths = generate_dataset(null_run.scenario, os.path.join(corpus_dir, "null"), progress=not quiet)
    summary["null_control"], _ = train_and_test("null", "acmil", _datasets(null_paths, null_run), null_run, runs_dir, quiet)
    print()

    print("Step 4: Attribution response to a single capsule's feature shift")
    trained = restore_model(load_checkpoint(os.path.join(runs_dir, "acmil", "best.pt")))
    summary["rank_response"] = attribution_rank_response(trained, base)
    response = summary["rank_response"]
    print(f"  [i] median rank {response['median_rank']} over {response['rooms']} rooms, "
          f"non-increasing: {response['non_increasing']}")
    print()

    print("Step 5: Overfit check")
    summary["overfit"] = overfit_check(base, os.path.join(runs_dir, "overfit"), quiet=quiet)
    print()

    if not skip_sweeps:
        print("Step 6: Slot length sweep")
        summary["slot_sweep"] = {}
        for slot_len in (50.0, 100.0, 150.0):
            run = base.replace(slot_len_s=slot_len)
            # regenerate so planted cells follow the slot grid
            p = generate_dataset(run.scenario, os.path.join(corpus_dir, f"slot{int(slot_len)}"), progress=not quiet)
            summary["slot_sweep"][str(int(slot_len))], _ = train_and_test(
                f"slot{int(slot_len)}", "acmil", _datasets(p, run), run, runs_dir, quiet)
        print()

        print("Step 7: Top-viewer sweep")
        summary["viewer_sweep"] = {}
        for top in (30, 50, 70):
            run = base.replace(top_viewers=top)
            summary["viewer_sweep"][str(top)], _ = train_and_test(
                f"top{top}", "acmil", _datasets(paths, run), run, runs_dir, quiet)
        print()

        print("Step 8: Ablations")
        summary["ablations"] = {}
        for name in ABLATIONS:
            summary["ablations"][name], _ = train_and_test(name, name, data, base, runs_dir, quiet)
        print()

    out_path = os.path.join(out_root, "benchmark.json")
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print("=" * 70)
    print(f"Summary: {out_path}")
    print("=" * 70)
    return summary


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    parser.add_argument("--out", default="bench")
    parser.add_argument("--config", help="key = value overrides applied to every experiment")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--skip-sweeps", action="store_true", help="skip the slot, viewer and ablation runs")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)
    base = load_config(args.config, {"seed": args.seed, "num_rooms": 2500})
    run_benchmark(args.out, base, quiet=args.quiet, skip_sweeps=args.skip_sweeps)


if __name__ == "__main__":
    main()
