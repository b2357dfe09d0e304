#!/usr/bin/env python3
"""
recency-lab command line entry point

Every subcommand reads one JSON config and works inside one run directory:

    gen-data       corpus, stage plan and test prompts
    train          sequential fine-tuning, one checkpoint per stage
    capture        residual activations of test prompts at a checkpoint
    probe          stage-vs-stage probe grid (optionally the pairwise matrix)
    geometry       recency axis, centroid projection and ordering scores
    balance        statistic-balanced probe comparison
    experiment     a whole experiment variant end to end
    oracle-verify  planted-signal checks of the analysis stack
    report         recompute every reported scalar from its artifact
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np
import pandas as pd

from recency_lab.models.config import (
    BalanceJob,
    CaptureJob,
    ExperimentConfig,
    GenDataJob,
    GeometryJob,
    OracleJob,
    ProbeJob,
    TrainJob,
    load_config,
    with_seed,
)
from recency_lab.models.errors import ConfigInvalid, ErrorResponse, LabError
from recency_lab.models.reports import CheckResult
from recency_lab.utils.logger import logger, setup_logging
from recency_lab.utils.settings import configure_torch, run_root, setup_environment

EXIT_CHECKS_FAILED = 4


def _configured(args, config_cls):
    config = load_config(args.config, config_cls)
    if args.seed is not None:
        config = with_seed(config, args.seed)
    return config


def _archive(run_dir: Path, name: str, config) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / f"{name}.config.json").write_text(config.model_dump_json(indent=2), encoding="utf-8")


def _write_frame(run_dir: Path, name: str, frame: pd.DataFrame) -> Path:
    out = run_dir / "reports" / name
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False)
    logger.info(f"Wrote {out}")
    return out


def _print_checks(results: List[CheckResult]) -> int:
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        value = "" if r.value is None else f" value={r.value:.4g}"
        threshold = "" if r.threshold is None else f" threshold={r.threshold}"
        print(f"{status} [{r.spec}] {r.check}{value}{threshold}")
    return 0 if all(r.passed for r in results) else EXIT_CHECKS_FAILED


def cmd_gen_data(args) -> int:
    from recency_lab.adapters.corpus_store import save_corpus
    from recency_lab.services.datagen import build_corpus

    job = _configured(args, GenDataJob)
    _archive(args.run_dir, "gen-data", job)
    bundle, test_prompts = build_corpus(job.data)
    save_corpus(args.run_dir, bundle, test_prompts)
    return 0


def cmd_train(args) -> int:
    from recency_lab.adapters.checkpoint_store import checkpoint_path, save_checkpoint
    from recency_lab.adapters.corpus_store import load_corpus
    from recency_lab.services.training import sequential_finetune
    from recency_lab.services.transformer import init_model

    job = _configured(args, TrainJob)
    _archive(args.run_dir, "train", job)
    bundle = load_corpus(args.run_dir)
    longest = max(len(s.tokens) for s in bundle.train)
    if longest > job.model.max_context:
        raise ConfigInvalid(f"max_context {job.model.max_context} is shorter than the longest sample {longest}",
                            max_context=job.model.max_context, longest=longest)
    epochs = job.epochs_per_stage or bundle.plan.epochs
    if len(epochs) != bundle.plan.m:
        raise ConfigInvalid(f"epochs_per_stage has {len(epochs)} entries for {bundle.plan.m} stages")

    model = init_model(job.model, job.seed)
    _, checkpoints, logs = sequential_finetune(model, bundle.stage_datasets(), epochs, job.train)
    for k, ckpt in enumerate(checkpoints):
        save_checkpoint(ckpt, checkpoint_path(args.run_dir, f"D{k + 1}"))
    (args.run_dir / "reports").mkdir(parents=True, exist_ok=True)
    (args.run_dir / "reports" / "train_losses.json").write_text(
        json.dumps({log.label: log.epoch_losses for log in logs}, indent=1), encoding="utf-8"
    )
    return 0


def cmd_capture(args) -> int:
    from recency_lab.adapters.activation_store import activation_path, write_activations
    from recency_lab.adapters.checkpoint_store import checkpoint_path, load_checkpoint
    from recency_lab.adapters.corpus_store import load_test_prompts
    from recency_lab.services.capture import capture_activations

    job = _configured(args, CaptureJob)
    model = load_checkpoint(checkpoint_path(args.run_dir, job.checkpoint))
    tags = [str(p) for p in job.prompt_ids]
    if job.include_unseen:
        tags += [f"unseen_{p}" for p in job.prompt_ids]
    for tag in tags:
        prompts = load_test_prompts(args.run_dir, tag)
        acts = capture_activations(model, prompts, batch_size=job.batch_size)
        write_activations(activation_path(args.run_dir, job.checkpoint, tag), acts)
    return 0


def cmd_probe(args) -> int:
    from recency_lab.adapters.activation_store import activation_path, read_activations
    from recency_lab.services.probes import pairwise_stage_grid, stage_probe_grid

    job = _configured(args, ProbeJob)
    acts = read_activations(activation_path(args.run_dir, job.checkpoint, job.prompt_id))
    a, b = job.stages
    report = stage_probe_grid(acts, a, b, job.probe, shuffle_labels=job.shuffle_labels)
    suffix = "_shuffled" if job.shuffle_labels else ""
    _write_frame(args.run_dir, f"probe_{job.checkpoint}_{job.prompt_id}_D{a}_D{b}{suffix}.csv", report.to_frame())
    if job.pairwise:
        m = int(acts.stages.max())
        matrix = pairwise_stage_grid(acts, m, job.probe.analysis_layer, job.probe.analysis_token, job.probe)
        _write_frame(args.run_dir, f"pairwise_{job.checkpoint}_{job.prompt_id}.csv", matrix.to_frame())
    layer, token, best = report.max_cell()
    print(json.dumps({"label_def": report.label_def, "best_layer": layer, "best_token": token, "best_acc": best}))
    return 0


def cmd_geometry(args) -> int:
    from recency_lab.adapters.activation_store import activation_path, read_activations
    from recency_lab.services import geometry

    job = _configured(args, GeometryJob)
    sets = []
    for ckpt in job.checkpoints:
        for pid in job.prompt_ids:
            acts = read_activations(activation_path(args.run_dir, ckpt, pid))
            stages = sorted(s for s in set(acts.stages.tolist()) if s > 0)
            sets.append(geometry.centroids(acts, job.layer, job.token, stages, run=f"{ckpt}/p{pid}"))
    axis = geometry.recency_basis(sets, pair=job.axis_pair)
    _write_frame(args.run_dir, "projection.csv", geometry.projection_frame(sets, axis))

    rows = []
    for cs in sets:
        px = geometry.project(cs.vectors, axis)[:, 0]
        rows.append({
            "run": cs.run,
            "tau": geometry.ordering_score(px),
            "collinearity": geometry.collinearity_residual(cs.vectors) if len(cs.stages) >= 3 else 0.0,
        })
    _write_frame(args.run_dir, "geometry.csv", pd.DataFrame(rows))
    return 0


def cmd_balance(args) -> int:
    from recency_lab.adapters.activation_store import activation_path, read_activations
    from recency_lab.adapters.checkpoint_store import checkpoint_path, load_checkpoint
    from recency_lab.adapters.corpus_store import load_test_prompts
    from recency_lab.services.controls import balanced_probe_compare, compute_stats

    job = _configured(args, BalanceJob)
    acts = read_activations(activation_path(args.run_dir, job.checkpoint, job.prompt_id))
    a, b = job.stages
    keep = np.isin(acts.stages, [a, b])
    pair = acts.select(keep)
    labels = (pair.stages == b).astype(np.int64)

    model, prompts = None, None
    if any(g != "activation" for g in job.balance.groups):
        model = load_checkpoint(checkpoint_path(args.run_dir, job.checkpoint))
        all_prompts = load_test_prompts(args.run_dir, job.prompt_id)
        prompts = [p for p, k in zip(all_prompts, keep) if k]
    values, names = compute_stats(pair, job.layer, job.token, job.balance.groups, model, prompts, job.balance)
    result = balanced_probe_compare(pair, labels, values, names, job.layer, job.token, job.balance, job.probe,
                                    seed=job.balance.seed)

    out = args.run_dir / "reports" / f"balance_{job.checkpoint}_{job.prompt_id}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(result.model_dump_json(indent=1), encoding="utf-8")
    print(json.dumps(result.accuracies))
    return 0


def cmd_experiment(args) -> int:
    from recency_lab.services.experiments import run_experiment

    config = _configured(args, ExperimentConfig)
    report = run_experiment(config, args.run_dir)
    print(json.dumps({"run_dir": str(args.run_dir), "scalars": len(report.scalars), "notes": report.notes}))
    return 0


def cmd_oracle_verify(args) -> int:
    from recency_lab.services.oracle import verify_pipeline

    job = _configured(args, OracleJob) if args.config else OracleJob(seed=args.seed or 0)
    results = verify_pipeline(job.specs, job.seed, out_dir=args.run_dir / "oracle")
    _write_frame(args.run_dir, "oracle.csv", pd.DataFrame([r.model_dump() for r in results]))
    return _print_checks(results)


def cmd_report(args) -> int:
    from recency_lab.services.experiments import check_traceability

    return _print_checks(check_traceability(args.run_dir))


COMMANDS: Dict[str, Callable] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "capture": cmd_capture,
    "probe": cmd_probe,
    "geometry": cmd_geometry,
    "balance": cmd_balance,
    "experiment": cmd_experiment,
    "oracle-verify": cmd_oracle_verify,
    "report": cmd_report,
}
NO_CONFIG = {"report", "oracle-verify"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Training-order recency lab")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
    parser.add_argument("--threads", type=int, default=None, help="torch and probe thread count")

    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name not in NO_CONFIG, help="JSON config file")
        p.add_argument("--run-dir", type=Path, default=None,
                       help="Run directory (default: $RECENCY_LAB_RUN_ROOT/<config name>)")
        p.add_argument("--seed", type=int, default=None, help="Override every seed in the config")
    return parser


def main(argv=None) -> int:
    """Main entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)

    setup_environment()
    level = "DEBUG" if args.verbose else "WARNING" if args.quiet else os.getenv("LOG_LEVEL", "INFO")
    setup_logging(level, os.getenv("LOG_FILE"))
    if args.threads:
        os.environ["RECENCY_LAB_THREADS"] = str(args.threads)
    configure_torch(args.threads)

    if args.run_dir is None:
        stem = args.config.stem if args.config else args.command
        args.run_dir = run_root() / stem

    try:
        return COMMANDS[args.command](args)
    except LabError as e:
        print(e.to_response().model_dump_json())
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure in {args.command}: {e}")
        print(ErrorResponse(error=str(e), code="internal_error").model_dump_json())
        return 1


if __name__ == "__main__":
    sys.exit(main())
