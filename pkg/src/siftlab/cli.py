"""Command-line pipeline drivers.

Five subcommands tie the library together: ``world`` synthesizes a corpus and
its feature store, ``datagen`` builds training datasets for configuration
tags, ``train`` runs a staged plan, ``eval`` scores a checkpoint, and
``report`` re-emits tables and figures from saved artifacts. Every command is
a pure function of the config file and its referenced inputs; ``--dry-run``
prints the work plan without writing anything.

Exit codes: 0 success, 1 config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import PARAM_GROUPS, load_checkpoint
from .config import CONFIG_TAGS, RunConfig, default_config, load_config
from .corpus import FeatureStore, NpzFeatureEncoder, load_corpus, save_corpus, save_features
from .datagen import load_examples, run_datagen
from .errors import ConfigError, SiftLabError, UnknownConfigTag
from .evaluate import (
    AlignmentReport,
    AlignmentRow,
    EvalItem,
    GenerationReport,
    GenerationRow,
    JudgeReport,
    ProbeReport,
    alignment_report,
    emit_report,
    eval_generation,
    heldout_split,
    judge_responses,
    masked_token_accuracy,
    probe_attributes,
)
from .training import (
    PLAN_LAYOUTS,
    RunLedger,
    build_plan,
    init_model_state,
    run_plan,
    verify_freeze,
)
from .world import FRAME_RATE_HZ, SyntheticWorld


class _Parser(argparse.ArgumentParser):
    """argparse maps usage problems to the config-error exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="siftlab", description=__doc__.splitlines()[0])
    parser.add_argument("--config", metavar="PATH", help="YAML run config (default: packaged)")
    parser.add_argument("--out", metavar="DIR", help="output directory (default: config output_dir)")
    parser.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    parser.add_argument("--seed-override", type=int, metavar="INT", help="derive all seeds from one base")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("world", help="synthesize the corpus and feature store")
    p_datagen = sub.add_parser("datagen", help="build datasets for configuration tags")
    p_datagen.add_argument("tags", nargs="+", metavar="TAG", help=f"one of {', '.join(CONFIG_TAGS)}")
    p_train = sub.add_parser("train", help="run a staged training plan")
    p_train.add_argument("--plan", metavar="PRESET", help="plan preset (default: config plan.preset)")
    p_train.add_argument("--resume", action="store_true", help="reuse finished stage checkpoints")
    p_eval = sub.add_parser("eval", help="score a checkpoint")
    p_eval.add_argument("--checkpoint", metavar="PATH", help="default: stage checkpoint matching the eval dataset")
    sub.add_parser("report", help="re-emit tables and figures from saved artifacts")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_config(args.config) if args.config else default_config()
        if args.seed_override is not None:
            config = config.with_seed_override(args.seed_override)
        out = Path(args.out) if args.out else Path(config.output_dir)
        command = {
            "world": cmd_world,
            "datagen": cmd_datagen,
            "train": cmd_train,
            "eval": cmd_eval,
            "report": cmd_report,
        }[args.command]
        command(config, out, args)
        return 0
    except (ConfigError, UnknownConfigTag) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SiftLabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


# -- command bodies ---------------------------------------------------------------


def cmd_world(config: RunConfig, out: Path, args):
    if config.world is None:
        raise ConfigError("the config is in corpus mode; 'world' needs a world section")
    world = SyntheticWorld(config.world)
    if args.dry_run:
        print(f"would write {config.n_records} records to {out / 'corpus.jsonl'} "
              f"and features to {out / 'features.npz'}")
        return
    records = world.make_corpus(config.n_records)
    features = {
        r.id: {b: world.encode(r, b).data for b in ("semantic", "paralinguistic")}
        for r in records
    }
    stored = [replace(r, feature_ref=f"npz:features.npz#{r.id}") for r in records]
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(stored, out / "corpus.jsonl")
    save_features(features, out / "features.npz", FRAME_RATE_HZ)
    print(f"world: {len(stored)} records -> {out / 'corpus.jsonl'}, {out / 'features.npz'}")


def _load_inputs(config: RunConfig, out: Path):
    """Corpus records plus a feature_fn resolving refs through the store."""
    corpus_path = Path(config.corpus_path) if config.corpus_path else out / "corpus.jsonl"
    records = load_corpus(corpus_path)
    store = FeatureStore()
    store.register("npz", NpzFeatureEncoder(base_dir=corpus_path.parent))
    by_id = {r.id: r for r in records}

    def feature_fn(record_id: str, branch: str):
        return store.encode(by_id[record_id], branch)

    return records, by_id, feature_fn


def cmd_datagen(config: RunConfig, out: Path, args):
    for tag in args.tags:
        if tag not in CONFIG_TAGS:
            raise UnknownConfigTag(tag)
    records, _, _ = _load_inputs(config, out)
    lm = config.build_lm()
    for tag in args.tags:
        generation = config.generation_config(tag)
        dataset = out / "data" / f"{tag}.jsonl"
        quarantine = out / "data" / f"{tag}.quarantine.jsonl"
        if args.dry_run:
            print(f"would generate {tag} over {len(records)} records -> {dataset}")
            continue
        dataset.parent.mkdir(parents=True, exist_ok=True)
        client = None if generation.paradigm == "TSIT" else config.build_client(lm)
        report = run_datagen(
            records,
            generation,
            client,
            dataset,
            quarantine,
            seed=config.datagen_seed(tag),
            max_in_flight=config.llm.max_in_flight,
        )
        print(f"{tag}: emitted {report.n_emitted}, quarantined {report.n_quarantined} "
              f"of {report.n_input} -> {dataset}")


def cmd_train(config: RunConfig, out: Path, args):
    preset = args.plan or config.plan.preset
    if preset not in PLAN_LAYOUTS:
        raise ConfigError(f"unknown plan preset {preset!r}; have {sorted(PLAN_LAYOUTS)}")
    needed = sorted({tag for layout in PLAN_LAYOUTS[preset] for tag in layout["tags"]})
    if args.dry_run:
        stages = " -> ".join(
            f"{layout['name']}({'+'.join(sorted(layout['tags']))}; trains {', '.join(layout['trainable'])})"
            for layout in PLAN_LAYOUTS[preset]
        )
        print(f"would train plan {preset!r}: {stages}; {config.plan.steps} steps/stage, "
              f"batch {config.plan.batch_size}, datasets from {out / 'data'}")
        return
    datasets = {}
    for tag in needed:
        path = out / "data" / f"{tag}.jsonl"
        if not path.exists():
            raise SiftLabError(f"plan {preset!r} needs {path}; run `siftlab datagen {tag}` first")
        datasets[tag] = load_examples(path)
    records, _, feature_fn = _load_inputs(config, out)
    lm = config.build_lm()
    lm_fingerprint = hashlib.sha256(lm.embedding_table.tobytes()).hexdigest()
    state = init_model_state(lm, config.projector, feature_fn, config.seeds.init)
    plan = build_plan(
        preset,
        datasets,
        config.plan.steps,
        config.plan.batch_size,
        config.plan.optimizer,
        config.seeds.stage,
        config.plan.mix_strategy,
    )
    train_dir = out / "train"
    train_dir.mkdir(parents=True, exist_ok=True)
    ledger_path = train_dir / "ledger.jsonl"
    if ledger_path.exists() and not args.resume:
        ledger_path.unlink()
    ledger = RunLedger(ledger_path)
    before = state.checkpoint("init")
    _, hashes = run_plan(plan, state, ledger, out_dir=out / "checkpoints", resume=args.resume)
    if hashlib.sha256(lm.embedding_table.tobytes()).hexdigest() != lm_fingerprint:
        raise SiftLabError("frozen LM embedding table changed during training")
    for stage in plan.stages:
        after, _ = load_checkpoint(out / "checkpoints" / f"{stage.name}.ckpt")
        frozen = set(PARAM_GROUPS) - set(stage.trainable)
        diffs = verify_freeze(before, after, frozen)
        if any(diffs.values()):
            raise SiftLabError(f"stage {stage.name} modified frozen groups: {diffs}")
        frozen_note = (
            "frozen " + ", ".join(f"{g} (max diff {diffs[g]:.1f})" for g in sorted(frozen))
            if frozen
            else "all groups trainable"
        )
        print(f"stage {stage.name}: checkpoint {hashes[stage.name][:16]} ({frozen_note})")
        before = after
    print(f"train: plan {preset!r} done; frozen LM verified; ledger -> {ledger_path}")


def _read_ledger_rows(path: Path) -> tuple[dict, ...]:
    if not path.exists():
        return ()
    with open(path, encoding="utf-8") as fh:
        return tuple(json.loads(line) for line in fh if line.strip())


def cmd_eval(config: RunConfig, out: Path, args):
    tag = config.eval.dataset_tag
    dataset_path = out / "data" / f"{tag}.jsonl"
    if args.dry_run:
        print(f"would evaluate {dataset_path} with probes on "
              f"{', '.join(config.eval.probe_attributes)} -> {out / 'report'}")
        return
    if not dataset_path.exists():
        raise SiftLabError(f"eval needs {dataset_path}; run `siftlab datagen {tag}` first")
    examples = load_examples(dataset_path)
    if not examples:
        raise SiftLabError(f"{dataset_path} holds no examples; nothing to evaluate")
    records, by_id, feature_fn = _load_inputs(config, out)
    lm = config.build_lm()
    state = init_model_state(lm, config.projector, feature_fn, config.seeds.init)

    if args.checkpoint:
        ckpt_path = Path(args.checkpoint)
    else:
        # stage-matched default: score s-scope data with the stage-1 model,
        # sp/ssp data with the stage-2 model
        stage_tag = examples[0].stage_tag if examples else "stage1"
        ckpt_path = out / "checkpoints" / f"{stage_tag}.ckpt"
    if not ckpt_path.exists():
        raise SiftLabError(f"checkpoint {ckpt_path} not found; run `siftlab train` first")
    ckpt, ckpt_hash = load_checkpoint(ckpt_path)
    state.load(ckpt)
    print(f"eval: checkpoint {ckpt_hash[:16]} on {len(examples)} {tag} examples")

    heldout = heldout_split([ex.record_id for ex in examples])
    # tiny corpora can hash nothing into the held-out bucket; score everything then
    heldout_examples = [ex for ex, h in zip(examples, heldout) if h] or examples
    align = alignment_report(
        state, heldout_examples, by_id, max_new_tokens=config.eval.max_new_tokens
    )
    masked_acc = masked_token_accuracy(state, heldout_examples)
    probes = tuple(
        probe_attributes(state, records, attribute, ridge_lambda=config.eval.ridge_lambda)
        for attribute in config.eval.probe_attributes
    )
    items = [
        EvalItem(
            record_id=ex.record_id,
            instruction=ex.user_suffix or None,
            reference=ex.target,
            system=ex.system,
        )
        for ex in heldout_examples
    ]
    generation = eval_generation(state, items, max_new_tokens=config.eval.max_new_tokens)

    judge = None
    if config.eval.judge_enabled:
        judge = judge_responses(generation, config.build_client(lm), config.eval.judge_rubric)
        print(f"judge: scored {len(judge.scores)}, flagged {len(judge.flagged)}")
    else:
        print("judge: skipped (not enabled)")

    ledger_rows = _read_ledger_rows(out / "train" / "ledger.jsonl")
    report_dir = out / "report"
    emit_report(
        report_dir,
        alignment=align,
        probes=probes,
        generation=generation,
        judge=judge,
        ledger_rows=ledger_rows,
    )
    _save_report_json(out / "report" / "report.json", align, probes, generation, judge, masked_acc)
    probe_note = "  ".join(f"{p.attribute} {p.heldout_accuracy:.3f}" for p in probes)
    print(f"eval: distance {align.mean_distance:.4f}, match {align.match_rate:.3f}, "
          f"masked acc {masked_acc:.3f}; probes: {probe_note}")
    print(f"eval: reports -> {report_dir}")


def _save_report_json(path: Path, align, probes, generation, judge, masked_acc):
    doc = {
        "alignment": [
            {
                "record_id": r.record_id,
                "distance": r.distance,
                "target_ce": r.target_ce,
                "greedy_match": r.greedy_match,
            }
            for r in align.rows
        ],
        "probes": [
            {
                "attribute": p.attribute,
                "train_accuracy": p.train_accuracy,
                "heldout_accuracy": p.heldout_accuracy,
                "chance": p.chance,
                "n_train": p.n_train,
                "n_heldout": p.n_heldout,
            }
            for p in probes
        ],
        "generation": [
            {
                "record_id": r.record_id,
                "output": r.output,
                "exact_match": r.exact_match,
                "token_accuracy": r.token_accuracy,
            }
            for r in generation.rows
        ],
        "judge": None
        if judge is None
        else {"scores": judge.scores, "flagged": list(judge.flagged)},
        "masked_token_accuracy": masked_acc,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, ensure_ascii=False, indent=1)
        fh.write("\n")


def cmd_report(config: RunConfig, out: Path, args):
    report_json = out / "report" / "report.json"
    ledger_rows = _read_ledger_rows(out / "train" / "ledger.jsonl")
    if args.dry_run:
        print(f"would re-emit tables and figures from {report_json} into {out / 'report'}")
        return
    if not report_json.exists() and not ledger_rows:
        raise SiftLabError(f"nothing to report: neither {report_json} nor a training ledger exists")
    align, probes, generation, judge = AlignmentReport(rows=()), (), None, None
    if report_json.exists():
        with open(report_json, encoding="utf-8") as fh:
            doc = json.load(fh)
        align = AlignmentReport(rows=tuple(AlignmentRow(**row) for row in doc["alignment"]))
        probes = tuple(ProbeReport(**row) for row in doc["probes"])
        generation = GenerationReport(
            rows=tuple(GenerationRow(**row) for row in doc["generation"])
        )
        if doc["judge"] is not None:
            judge = JudgeReport(
                scores=doc["judge"]["scores"], flagged=tuple(doc["judge"]["flagged"])
            )
    written = emit_report(
        out / "report",
        alignment=align,
        probes=probes,
        generation=generation,
        judge=judge,
        ledger_rows=ledger_rows,
    )
    print(f"report: wrote {len(written)} files to {out / 'report'}")


if __name__ == "__main__":
    sys.exit(main())
