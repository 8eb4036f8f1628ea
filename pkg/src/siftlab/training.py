"""Staged projector optimization against the frozen LM.

A stage names the parameter groups it may update; everything else is frozen
and verified bit-identical afterwards. Batches iterate examples one by one
(sequences are never physically padded, so nothing spurious can enter the
loss) and average per-example masked means, making example weight
independent of target length. All arithmetic is float64 and every source of
randomness is an explicit seed, so a plan replays hash-for-hash.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .assembly import assemble, loss_and_embedding_grad
from .checkpoint import (
    PARAM_GROUPS,
    Checkpoint,
    checkpoint_hash,
    group_hash,
    load_checkpoint,
    save_checkpoint,
)
from .corpus import FeatureMatrix
from .datagen import DatasetMix, MixComponent, TrainingExample, mix
from .errors import IncompatibleCheckpoints, NonFiniteLoss, StreamExhausted
from .projector import (
    ProjectorConfig,
    ProjectorParams,
    ProjectorTape,
    fuse_branches,
    init_paralinguistic,
    init_semantic,
)
from .toylm import FrozenLMAdapter

logger = logging.getLogger(__name__)

GROUP_TO_BRANCH = {"proj_semantic": "semantic", "proj_paralinguistic": "paralinguistic"}

FeatureFn = Callable[[str, str], FeatureMatrix]


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 1e-3
    schedule: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not (self.lr > 0 and np.isfinite(self.lr)):
            raise ValueError("lr must be positive and finite")


@dataclass(frozen=True)
class Stage:
    name: str
    dataset_mix: DatasetMix
    trainable: tuple[str, ...]
    steps: int
    batch_size: int = 8
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    seed: int = 0

    def __post_init__(self):
        if not self.trainable:
            raise ValueError(f"stage {self.name!r} has no trainable groups")
        unknown = set(self.trainable) - set(PARAM_GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class StagePlan:
    name: str
    stages: tuple[Stage, ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("plan has no stages")
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ValueError("stage names must be unique")


@dataclass
class ModelState:
    lm: FrozenLMAdapter
    projector_config: ProjectorConfig
    params: dict[str, ProjectorParams]
    feature_fn: FeatureFn

    def checkpoint(self, stage_tag: str, rng: dict | None = None) -> Checkpoint:
        return Checkpoint(
            stage_tag=stage_tag,
            branches={g: (self.projector_config, p.copy()) for g, p in self.params.items()},
            rng=rng,
        )

    def load(self, ckpt: Checkpoint):
        for group, (config, params) in ckpt.branches.items():
            if config != self.projector_config:
                raise IncompatibleCheckpoints(
                    f"checkpoint group {group} built for a different projector config"
                )
            self.params[group] = params.copy()


def init_model_state(
    lm: FrozenLMAdapter, config: ProjectorConfig, feature_fn: FeatureFn, seed: int
) -> ModelState:
    """Fresh state: semantic small-uniform, paralinguistic output zeroed."""
    return ModelState(
        lm=lm,
        projector_config=config,
        params={
            "proj_semantic": init_semantic(config, np.random.default_rng([seed, 0])),
            "proj_paralinguistic": init_paralinguistic(config, np.random.default_rng([seed, 1])),
        },
        feature_fn=feature_fn,
    )


def example_loss_and_grads(
    state: ModelState, example: TrainingExample, trainable: tuple[str, ...]
) -> tuple[float, dict[str, dict[str, np.ndarray]]]:
    """Forward/backward for one example; gradients only for trainable groups."""
    tapes = {}
    for group in PARAM_GROUPS:
        branch = GROUP_TO_BRANCH[group]
        features = state.feature_fn(example.record_id, branch)
        tapes[group] = ProjectorTape(state.params[group], state.projector_config, features)
    fused = fuse_branches(tapes["proj_semantic"].output, tapes["proj_paralinguistic"].output)
    assembled = assemble(example, fused, state.lm)
    value, d_embeddings = loss_and_embedding_grad(assembled, state.lm)
    lo, hi = assembled.segments["audio"]
    d_audio = d_embeddings[lo:hi]
    grads = {group: tapes[group].backward(d_audio) for group in trainable}
    return value, grads


class _Optimizer:
    """Adam or SGD over named parameter groups, float64 throughout."""

    def __init__(self, spec: OptimizerSpec, params: dict[str, ProjectorParams], total_steps: int):
        self.spec = spec
        self.params = params
        self.total_steps = max(total_steps, 1)
        self.t = 0
        self._m = {g: {k: np.zeros_like(v) for k, v in p.arrays().items()} for g, p in params.items()}
        self._v = {g: {k: np.zeros_like(v) for k, v in p.arrays().items()} for g, p in params.items()}

    def lr_at(self, step: int) -> float:
        if self.spec.schedule == "constant":
            return self.spec.lr
        return self.spec.lr * 0.5 * (1.0 + np.cos(np.pi * step / self.total_steps))

    def step(self, grads: dict[str, dict[str, np.ndarray]]) -> float:
        lr = self.lr_at(self.t)
        self.t += 1
        for group, group_grads in grads.items():
            arrays = self.params[group].arrays()
            for name, grad in group_grads.items():
                if self.spec.kind == "sgd":
                    arrays[name] -= lr * grad
                    continue
                m = self._m[group][name]
                v = self._v[group][name]
                m *= self.spec.beta1
                m += (1 - self.spec.beta1) * grad
                v *= self.spec.beta2
                v += (1 - self.spec.beta2) * grad * grad
                m_hat = m / (1 - self.spec.beta1**self.t)
                v_hat = v / (1 - self.spec.beta2**self.t)
                arrays[name] -= lr * m_hat / (np.sqrt(v_hat) + self.spec.eps)
        return float(lr)


class RunLedger:
    """Append-only JSONL step log; rows are byte-deterministic given seeds."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        self._next_step = 0

    def append(self, row: dict):
        if "step" in row:
            if row["step"] != self._next_step:
                raise ValueError(f"non-contiguous step index {row['step']}")
            self._next_step += 1
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def run_stage(
    stage: Stage,
    state: ModelState,
    stream: Iterator[TrainingExample],
    ledger: RunLedger,
    out_dir: str | Path | None = None,
) -> tuple[Checkpoint, str]:
    """Apply exactly ``stage.steps`` optimizer updates from the stream.

    Raises StreamExhausted when the stream cannot fill a batch and
    NonFiniteLoss the moment a batch loss stops being finite.
    """
    start = time.monotonic()
    before = {g: group_hash(state.checkpoint(stage.name), g) for g in PARAM_GROUPS}
    optimizer = _Optimizer(
        stage.optimizer, {g: state.params[g] for g in stage.trainable}, stage.steps
    )
    for _ in range(stage.steps):
        batch = []
        for _ in range(stage.batch_size):
            try:
                batch.append(next(stream))
            except StopIteration:
                raise StreamExhausted(
                    f"stage {stage.name!r} needs {stage.steps}x{stage.batch_size} examples"
                ) from None
        total = 0.0
        acc: dict[str, dict[str, np.ndarray]] = {}
        for example in batch:
            try:
                value, grads = example_loss_and_grads(state, example, stage.trainable)
            except FloatingPointError:
                raise NonFiniteLoss(optimizer.t, float("nan")) from None
            total += value
            for group, group_grads in grads.items():
                slot = acc.setdefault(group, {})
                for name, grad in group_grads.items():
                    if name in slot:
                        slot[name] += grad
                    else:
                        slot[name] = grad.copy()
        batch_loss = total / stage.batch_size
        if not np.isfinite(batch_loss):
            raise NonFiniteLoss(optimizer.t, batch_loss)
        for slot in acc.values():
            for name in slot:
                slot[name] /= stage.batch_size
        grad_norms = {
            group: float(np.sqrt(sum(float(np.sum(g * g)) for g in slot.values())))
            for group, slot in acc.items()
        }
        lr = optimizer.step(acc)
        ledger.append(
            {
                "step": ledger._next_step,
                "stage": stage.name,
                "loss": batch_loss,
                "grad_norms": grad_norms,
                "lr": lr,
                "masked_tokens": sum(
                    len(state.lm.tokenize(ex.target)) + 1 for ex in batch
                ),
            }
        )
    after_ckpt = state.checkpoint(stage.name)
    for group in PARAM_GROUPS:
        if group not in stage.trainable and group_hash(after_ckpt, group) != before[group]:
            raise AssertionError(f"frozen group {group} changed during stage {stage.name}")
    ckpt_hash = checkpoint_hash_or_save(after_ckpt, stage, out_dir)
    ledger.append(
        {
            "stage": stage.name,
            "checkpoint_hash": ckpt_hash,
            "wall_clock_s": round(time.monotonic() - start, 3),
        }
    )
    return after_ckpt, ckpt_hash


def checkpoint_hash_or_save(ckpt: Checkpoint, stage: Stage, out_dir) -> str:
    if out_dir is None:
        return checkpoint_hash(ckpt)
    return save_checkpoint(ckpt, Path(out_dir) / f"{stage.name}.ckpt")


def stage_stream(stage: Stage, rng: np.random.Generator) -> Iterator[TrainingExample]:
    """Deterministic example stream: the stage's mix, sampled up front."""
    if stage.steps == 0:
        return iter(())
    return iter(mix(stage.dataset_mix, stage.steps * stage.batch_size, rng))


def run_plan(
    plan: StagePlan,
    state: ModelState,
    ledger: RunLedger,
    out_dir: str | Path | None = None,
    resume: bool = False,
) -> tuple[Checkpoint, dict[str, str]]:
    """Run stages in order, each resuming from the previous parameters.

    With ``resume=True``, stages whose checkpoint file already exists are
    loaded instead of re-run, so an interrupted run equals an
    uninterrupted one hash-for-hash.
    """
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    hashes: dict[str, str] = {}
    final = state.checkpoint(plan.stages[0].name)
    for stage in plan.stages:
        ckpt_path = None if out_dir is None else Path(out_dir) / f"{stage.name}.ckpt"
        if resume and ckpt_path is not None and ckpt_path.exists():
            ckpt, ckpt_hash = load_checkpoint(ckpt_path)
            state.load(ckpt)
            logger.info("stage %s loaded from checkpoint %s", stage.name, ckpt_hash[:12])
            final, hashes[stage.name] = ckpt, ckpt_hash
            continue
        stream = stage_stream(stage, np.random.default_rng([stage.seed, 2]))
        final, hashes[stage.name] = run_stage(stage, state, stream, ledger, out_dir)
        logger.info("stage %s finished: checkpoint %s", stage.name, hashes[stage.name][:12])
    return final, hashes


def verify_freeze(before: Checkpoint, after: Checkpoint, frozen: set[str]) -> dict[str, float]:
    """Max absolute parameter difference per frozen group; passes iff all 0.0."""
    report = {}
    for group in sorted(frozen):
        if group not in before.branches or group not in after.branches:
            raise IncompatibleCheckpoints(f"group {group!r} missing from a checkpoint")
        _, p_before = before.branches[group]
        _, p_after = after.branches[group]
        a, b = p_before.arrays(), p_after.arrays()
        if a.keys() != b.keys() or any(a[k].shape != b[k].shape for k in a):
            raise IncompatibleCheckpoints(f"group {group!r} shapes differ")
        report[group] = max(float(np.max(np.abs(a[k] - b[k]))) if a[k].size else 0.0 for k in a)
    return report


# -- canonical plan builders ----------------------------------------------------

PLAN_LAYOUTS: dict[str, tuple[dict, ...]] = {
    "two_stage": (
        {"name": "stage1", "tags": {"SIFT_s": 1.0}, "trainable": ("proj_semantic",)},
        {"name": "stage2", "tags": {"SIFT_sp": 1.0}, "trainable": ("proj_paralinguistic",)},
    ),
    "two_stage_mixed": (
        {"name": "stage1", "tags": {"SIFT_s": 1.0}, "trainable": ("proj_semantic",)},
        {
            "name": "stage2",
            "tags": {"SIFT_s": 1.0, "SIFT_sp": 1.0},
            "trainable": ("proj_paralinguistic",),
        },
    ),
    "one_stage": (
        {
            "name": "stage1",
            "tags": {"SIFT_s": 1.0, "SIFT_sp": 1.0},
            "trainable": ("proj_semantic", "proj_paralinguistic"),
        },
    ),
    "ssp_mitigation": (
        {"name": "stage1", "tags": {"SIFT_s": 1.0}, "trainable": ("proj_semantic",)},
        {
            "name": "stage2",
            "tags": {"SIFT_ssp": 1.0, "SIT_ssp": 1.0},
            "trainable": ("proj_paralinguistic",),
        },
    ),
}


def build_plan(
    preset: str,
    datasets: dict[str, list[TrainingExample]],
    steps: int,
    batch_size: int,
    optimizer: OptimizerSpec,
    seed: int,
    strategy: str = "rebalanced",
) -> StagePlan:
    """Materialize a named plan layout against concrete datasets by config tag."""
    if preset not in PLAN_LAYOUTS:
        raise ValueError(f"unknown plan preset {preset!r}; have {sorted(PLAN_LAYOUTS)}")
    stages = []
    for i, layout in enumerate(PLAN_LAYOUTS[preset]):
        missing = [tag for tag in layout["tags"] if not datasets.get(tag)]
        if missing:
            raise ValueError(f"plan {preset!r} needs datasets for tags {missing}")
        components = tuple(
            MixComponent(examples=tuple(datasets[tag]), weight=weight)
            for tag, weight in sorted(layout["tags"].items())
        )
        stages.append(
            Stage(
                name=layout["name"],
                dataset_mix=DatasetMix(components=components, strategy=strategy),
                trainable=layout["trainable"],
                steps=steps,
                batch_size=batch_size,
                optimizer=optimizer,
                seed=seed + i,
            )
        )
    return StagePlan(name=preset, stages=tuple(stages))
