"""Acceptance gate: ten end-to-end checks over the default configuration.

Each test prints exactly one ``Cn PASS/FAIL: <measured values>`` line (run
with ``-s`` to see them) and asserts the same condition. Expensive shared
work (corpus, datagen, the training routes) happens once in a module
fixture; wall-clock budgets are measured against that shared cost plus each
test's own work.
"""

import io
import tempfile
import time
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
import pytest

from siftlab.assembly import assemble, generate, loss
from siftlab.checkpoint import group_hash
from siftlab.cli import main
from siftlab.config import default_config
from siftlab.corpus import BRANCHES, FeatureMatrix, SpeechRecord
from siftlab.datagen import (
    DatasetMix,
    MixComponent,
    TrainingExample,
    build_request,
    generate_target,
    load_examples,
    run_datagen,
)
from siftlab.evaluate import (
    alignment_report,
    fused_embedding,
    heldout_split,
    masked_token_accuracy,
    probe_attributes,
)
from siftlab.llm import ToyLMClient
from siftlab.oracle import render_oracle
from siftlab.projector import (
    ProjectorConfig,
    count_params,
    group_frames,
    init_semantic,
    project,
)
from siftlab.toylm import ToyLM, ToyLMConfig
from siftlab.training import (
    PARAM_GROUPS,
    ModelState,
    RunLedger,
    Stage,
    StagePlan,
    build_plan,
    example_loss_and_grads,
    init_model_state,
    run_plan,
)
from siftlab.world import FRAME_RATE_HZ, SyntheticWorld


def verdict(criterion: str, ok: bool, detail: str):
    print(f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}", flush=True)


@pytest.fixture(scope="module")
def accept():
    """Default-config corpus, datasets, and both training routes, built once."""
    t0 = time.monotonic()
    cfg = default_config()
    world = SyntheticWorld(cfg.world)
    records = world.make_corpus(cfg.n_records)
    by_id = {r.id: r for r in records}
    cache = {(r.id, b): world.encode(r, b) for r in records for b in BRANCHES}

    def feature_fn(record_id, branch):
        return cache[(record_id, branch)]

    lm = cfg.build_lm()
    client = cfg.build_client(lm)

    datasets = {}
    with tempfile.TemporaryDirectory() as tmp:
        for tag in ("TSIT_s", "SIFT_s", "SIFT_sp"):
            generation = cfg.generation_config(tag)
            dataset = Path(tmp) / f"{tag}.jsonl"
            run_datagen(
                records,
                generation,
                None if generation.paradigm == "TSIT" else client,
                dataset,
                Path(tmp) / f"{tag}.quarantine.jsonl",
                seed=cfg.datagen_seed(tag),
                max_in_flight=cfg.llm.max_in_flight,
            )
            datasets[tag] = load_examples(dataset)

    held = heldout_split([ex.record_id for ex in datasets["SIFT_s"]])
    heldout_s = [ex for ex, h in zip(datasets["SIFT_s"], held) if h]

    # route 1: the standard two-stage plan on self-generated data
    sift_state = init_model_state(lm, cfg.projector, feature_fn, cfg.seeds.init)
    align_before = alignment_report(
        sift_state, heldout_s, by_id, max_new_tokens=cfg.eval.max_new_tokens
    )
    plan = build_plan(
        "two_stage",
        {"SIFT_s": datasets["SIFT_s"], "SIFT_sp": datasets["SIFT_sp"]},
        cfg.plan.steps,
        cfg.plan.batch_size,
        cfg.plan.optimizer,
        cfg.seeds.stage,
        cfg.plan.mix_strategy,
    )
    run_plan(StagePlan("route_sift_1", (plan.stages[0],)), sift_state, RunLedger(None))
    align_after = alignment_report(
        sift_state, heldout_s, by_id, max_new_tokens=cfg.eval.max_new_tokens
    )
    masked_acc = masked_token_accuracy(sift_state, heldout_s)
    t_stage1 = time.monotonic() - t0
    run_plan(StagePlan("route_sift_2", (plan.stages[1],)), sift_state, RunLedger(None))
    probe_attr = cfg.eval.probe_attributes[0]
    sift_probe = probe_attributes(
        sift_state, records, probe_attr, ridge_lambda=cfg.eval.ridge_lambda
    )

    # route 2: identical init and optimizer, but transcript targets and the
    # semantic group only, for the probe contrast
    tsit_state = init_model_state(lm, cfg.projector, feature_fn, cfg.seeds.init)
    tsit_stage = Stage(
        name="stage1",
        dataset_mix=DatasetMix(
            (MixComponent(tuple(datasets["TSIT_s"]), 1.0),), cfg.plan.mix_strategy
        ),
        trainable=("proj_semantic",),
        steps=cfg.plan.steps,
        batch_size=cfg.plan.batch_size,
        optimizer=cfg.plan.optimizer,
        seed=cfg.seeds.stage,
    )
    run_plan(StagePlan("route_tsit", (tsit_stage,)), tsit_state, RunLedger(None))
    tsit_probe = probe_attributes(
        tsit_state, records, probe_attr, ridge_lambda=cfg.eval.ridge_lambda
    )

    return {
        "cfg": cfg,
        "world": world,
        "records": records,
        "by_id": by_id,
        "feature_fn": feature_fn,
        "lm": lm,
        "datasets": datasets,
        "n_heldout": len(heldout_s),
        "align_before": align_before.mean_distance,
        "align_after": align_after.mean_distance,
        "masked_acc": masked_acc,
        "probe_attr": probe_attr,
        "sift_probe": sift_probe,
        "tsit_probe": tsit_probe,
        "sift_state": sift_state,
        "t_stage1": t_stage1,
        "t_routes": time.monotonic() - t0,
    }


def test_c1_projector_parameter_count():
    n = count_params(ProjectorConfig(d_enc=768, group=4, d_hidden=3584, d_llm=3584, bias=True))
    ok = n == 23_862_272
    verdict("C1", ok, f"count_params(768, 4, 3584, 3584, bias)={n:,} (expected 23,862,272)")
    assert ok


def test_c2_frame_rate_law():
    config = ProjectorConfig(d_enc=8, group=4, d_hidden=6, d_llm=5, bias=True)
    params = init_semantic(config, np.random.default_rng(0))
    hits = 0
    for t in range(1, 65):
        expected = -(-t // 4)
        features = FeatureMatrix(np.random.default_rng(t).normal(size=(t, 8)), FRAME_RATE_HZ, "semantic")
        hits += (
            group_frames(features.data, 4).shape[0] == expected
            and project(params, config, features).shape[0] == expected
        )
    rate = FRAME_RATE_HZ / 4
    ok = hits == 64 and FRAME_RATE_HZ == 25.0 and rate == 6.25
    verdict("C2", ok, f"{hits}/64 grouped lengths equal ceil(T/4); {FRAME_RATE_HZ} Hz / 4 = {rate} tokens/s")
    assert ok


def test_c3_gradient_check():
    t0 = time.monotonic()
    # smallest configuration exercising every shape: padded frame tail, hidden
    # layer, both branches, 4-letter alphabet -> vocabulary of 11
    lm = ToyLM(ToyLMConfig(d_llm=4, seed=1, alphabet="abcd"))
    config = ProjectorConfig(d_enc=3, group=2, d_hidden=5, d_llm=4, bias=True)
    rng = np.random.default_rng(7)
    feats = {b: FeatureMatrix(rng.normal(size=(5, 3)), FRAME_RATE_HZ, b) for b in BRANCHES}
    state = ModelState(
        lm=lm,
        projector_config=config,
        params={
            "proj_semantic": init_semantic(config, np.random.default_rng(8)),
            "proj_paralinguistic": init_semantic(config, np.random.default_rng(9)),
        },
        feature_fn=lambda rid, branch: feats[branch],
    )
    example = TrainingExample(
        record_id="g1",
        system=None,
        user_prefix="",
        audio_slot=True,
        user_suffix="cd",
        target="abca",
        config_tag="SIT_s",
        stage_tag="stage1",
    )
    _, grads = example_loss_and_grads(state, example, trainable=PARAM_GROUPS)

    def loss_now():
        value, _ = example_loss_and_grads(state, example, trainable=())
        return value

    h, worst = 1e-6, 0.0
    for group in PARAM_GROUPS:
        arrays = state.params[group].arrays()
        for name, analytic in grads[group].items():
            param = arrays[name]
            for idx in np.ndindex(param.shape):
                keep = param[idx]
                param[idx] = keep + h
                up = loss_now()
                param[idx] = keep - h
                down = loss_now()
                param[idx] = keep
                numeric = (up - down) / (2 * h)
                worst = max(worst, abs(analytic[idx] - numeric) / max(abs(analytic[idx]) + abs(numeric), 1e-8))
    ok = worst < 1e-4
    verdict("C3", ok, f"max relative gradient error {worst:.3e} over every projector entry "
                      f"(threshold 1e-4, vocab {lm.vocab_size}, {time.monotonic() - t0:.1f}s)")
    assert ok


def test_c4_freeze_exactness(accept):
    t0 = time.monotonic()
    cfg, lm, world = accept["cfg"], accept["lm"], accept["world"]
    lm_before = lm.embedding_table.tobytes()
    world_before = world.state_bytes()
    state = init_model_state(lm, cfg.projector, accept["feature_fn"], cfg.seeds.init)
    plan = build_plan(
        "two_stage",
        {"SIFT_s": accept["datasets"]["SIFT_s"], "SIFT_sp": accept["datasets"]["SIFT_sp"]},
        200,
        cfg.plan.batch_size,
        cfg.plan.optimizer,
        cfg.seeds.stage,
        cfg.plan.mix_strategy,
    )
    para_before = state.checkpoint("probe").param_bytes("proj_paralinguistic")
    run_plan(StagePlan("c4_stage1", (plan.stages[0],)), state, RunLedger(None))
    after1 = state.checkpoint("probe")
    lm_ok = lm.embedding_table.tobytes() == lm_before
    world_ok = world.state_bytes() == world_before
    para_ok = after1.param_bytes("proj_paralinguistic") == para_before
    semantic_hash = group_hash(after1, "proj_semantic")
    run_plan(StagePlan("c4_stage2", (plan.stages[1],)), state, RunLedger(None))
    semantic_ok = group_hash(state.checkpoint("probe"), "proj_semantic") == semantic_hash
    elapsed = time.monotonic() - t0
    ok = lm_ok and world_ok and para_ok and semantic_ok and elapsed < 120
    verdict("C4", ok, f"200-step stage 1: LM bitwise={lm_ok}, encoder bitwise={world_ok}, "
                      f"paralinguistic bitwise={para_ok}; stage 2: semantic hash unchanged={semantic_ok} "
                      f"({elapsed:.1f}s < 120s)")
    assert ok


def test_c5_mask_soundness(accept):
    t0 = time.monotonic()
    state, lm = accept["sift_state"], accept["lm"]
    pool = [ex for tag in ("SIFT_s", "SIFT_sp", "TSIT_s") for ex in accept["datasets"][tag]]
    rng = np.random.default_rng(0)
    picks = rng.choice(len(pool), size=100, replace=False)
    vocab = lm.vocab_size
    n_unmasked = n_masked = bad_unmasked = bad_masked = 0
    for idx in picks:
        example = pool[int(idx)]
        assembled = assemble(example, fused_embedding(state, example.record_id), lm)
        base = loss(assembled, lm)
        masked_positions = np.flatnonzero(assembled.loss_mask)
        if len(masked_positions) > 16:
            masked_positions = rng.choice(masked_positions, size=16, replace=False)
        unmasked_positions = np.flatnonzero(~assembled.loss_mask)
        for pos in (*unmasked_positions, *masked_positions):
            keep = int(assembled.labels[pos])
            assembled.labels[pos] = (keep + 1 + int(rng.integers(vocab - 1))) % vocab
            changed = loss(assembled, lm)
            assembled.labels[pos] = keep
            if assembled.loss_mask[pos]:
                n_masked += 1
                bad_masked += changed == base
            else:
                n_unmasked += 1
                bad_unmasked += changed != base
    ok = bad_unmasked == 0 and bad_masked == 0
    verdict("C5", ok, f"100 examples: {n_unmasked - bad_unmasked}/{n_unmasked} unmasked perturbations "
                      f"left loss bit-identical, {n_masked - bad_masked}/{n_masked} masked perturbations "
                      f"changed it ({time.monotonic() - t0:.1f}s)")
    assert ok


def test_c6_alignment_convergence(accept):
    cfg = accept["cfg"]
    before, after = accept["align_before"], accept["align_after"]
    reduction = 1.0 - after / before
    acc = accept["masked_acc"]
    steps = cfg.plan.steps
    elapsed = accept["t_stage1"]
    ok = acc >= 0.90 and reduction >= 0.50 and steps <= 5000 and elapsed < 600
    verdict("C6", ok, f"held-out masked accuracy {acc:.4f} (>=0.90) on {accept['n_heldout']} examples; "
                      f"alignment distance {before:.4f} -> {after:.4f} ({reduction:.1%} reduction, >=50%); "
                      f"{steps} steps (<=5000); {elapsed:.1f}s (<600s)")
    assert ok


def test_c7_probe_contrast(accept):
    tsit, sift = accept["tsit_probe"], accept["sift_probe"]
    elapsed = accept["t_routes"]
    tsit_gap = abs(tsit.heldout_accuracy - tsit.chance)
    ok = tsit_gap <= 0.10 and sift.heldout_accuracy >= 0.90 and elapsed < 900
    verdict("C7", ok, f"{accept['probe_attr']} probe: transcript-trained {tsit.heldout_accuracy:.4f} "
                      f"(chance {tsit.chance:.2f}, gap {tsit_gap:.4f} <= 0.10), "
                      f"self-generated {sift.heldout_accuracy:.4f} (>=0.90); {elapsed:.1f}s (<900s)")
    assert ok


TRANSCRIPT_EN = "what shall we do if they suddenly walk in on us."
TRANSCRIPT_ZH = "我们那边有非常出名的旅游城市厦门，然后也有武夷山，但是我还没有去过武夷山。"
BODY_EN = (
    "<audio><meta>gender: male, emotion: happy</meta>"
    f"<text>{TRANSCRIPT_EN}</text></audio>"
)
BODY_ZH = (
    "<audio><meta>age: young adult, gender: female</meta>"
    f"<text>{TRANSCRIPT_ZH}</text></audio>"
)
INSTRUCTION_SP = "Describe all the information you can hear."


def test_c8_prompt_format_fixtures():
    cfg = default_config()
    rng = np.random.default_rng(0)
    rec_en = SpeechRecord(
        id="ref-en", transcript=TRANSCRIPT_EN,
        attributes={"gender": "male", "emotion": "happy"},
    )
    rec_zh = SpeechRecord(
        id="ref-zh", transcript=TRANSCRIPT_ZH,
        attributes={"age": "young adult", "gender": "female"},
    )
    checks = [
        build_request(render_oracle(rec_en, "s"), cfg.generation_config("SIFT_s"), rng).user
        == TRANSCRIPT_EN,
        render_oracle(rec_en, "sp").rendered == BODY_EN,
        render_oracle(rec_zh, "sp").rendered == BODY_ZH,
        build_request(render_oracle(rec_en, "sp"), cfg.generation_config("SIT_sp"), rng).user
        == f"{BODY_EN} {INSTRUCTION_SP}",
    ]
    ok = all(checks)
    verdict("C8", ok, f"{sum(checks)}/4 reference prompt strings byte-exact "
                      f"(plain transcript, two metadata bodies, instruction composition)")
    assert ok


def _pipeline(out: Path):
    for argv in (["world"], ["datagen", "SIFT_s", "SIFT_sp"], ["train"], ["eval"]):
        buffer = io.StringIO()
        with redirect_stdout(buffer):
            code = main(["--out", str(out), *argv])
        assert code == 0, buffer.getvalue()


def test_c9_pipeline_determinism(tmp_path):
    t0 = time.monotonic()
    runs = (tmp_path / "a", tmp_path / "b")
    for out in runs:
        _pipeline(out)

    def manifest(root):
        return {
            str(p.relative_to(root)): p.read_bytes()
            for pattern in ("data/*.jsonl", "checkpoints/*.ckpt", "report/*.csv")
            for p in sorted(root.glob(pattern))
        }

    a, b = manifest(runs[0]), manifest(runs[1])
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    elapsed = time.monotonic() - t0
    ok = bool(a) and not differing and elapsed < 1200
    verdict("C9", ok, f"two default-config pipeline runs: {len(a)} artifacts "
                      f"(datasets, checkpoints, report tables), {len(differing)} differ "
                      f"{differing or ''}({elapsed:.1f}s < 1200s)")
    assert ok


def test_c10_echo_fixed_point(accept):
    t0 = time.monotonic()
    cfg, lm, records = accept["cfg"], accept["lm"], accept["records"]
    client = ToyLMClient(lm)
    rng = np.random.default_rng(0)
    picks = rng.choice(len(records), size=100, replace=False)
    matches = 0
    for i, idx in enumerate(picks):
        record = records[int(idx)]
        generation = cfg.generation_config("SIFT_s" if i % 2 == 0 else "SIFT_sp")
        oracle = render_oracle(record, generation.scope)
        expected = generate_target(build_request(oracle, generation, rng), client).text
        echoed = generate(
            lm.embed(lm.tokenize(oracle.rendered)),
            None,
            None,
            lm,
            max_new_tokens=generation.decode.max_new_tokens,
        )
        matches += echoed == expected
    elapsed = time.monotonic() - t0
    ok = matches == 100 and elapsed < 60
    verdict("C10", ok, f"{matches}/100 oracle-embedding decodes reproduce the generated target "
                       f"byte-exactly ({elapsed:.1f}s < 60s)")
    assert ok
