"""Alignment metrics, the attribute probe, generation scoring, and reports.

Everything here is forward-only and deterministic: metrics are closed-form,
the probe is ridge regression, and generation is greedy unless a temperature
is passed explicitly. The optional judge is plumbing around an LLMClient and
is never required by any other part of the pipeline.
"""

from __future__ import annotations

import csv
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import assemble, generate, loss
from .corpus import SpeechRecord
from .datagen import TrainingExample, oracle_scope
from .errors import DecodeBudgetExceeded, MissingAttributes, SingleClass, ZeroVector
from .llm import ChatRequest, DecodeParams, LLMClient
from .oracle import render_oracle
from .projector import fuse_branches, project
from .training import GROUP_TO_BRANCH, ModelState

_SCORE_RE = re.compile(r"[1-5]")

# held-out fraction is 1/5; membership hangs off the record id, not list order
_SPLIT_MODULUS = 5


def fused_embedding(state: ModelState, record_id: str) -> np.ndarray:
    """Project both feature branches for one record and fuse them."""
    outputs = {}
    for group, branch in GROUP_TO_BRANCH.items():
        features = state.feature_fn(record_id, branch)
        outputs[group] = project(state.params[group], state.projector_config, features)
    return fuse_branches(outputs["proj_semantic"], outputs["proj_paralinguistic"])


def alignment_distance(audio_embeds: np.ndarray, oracle_embeds: np.ndarray) -> float:
    """1 - cosine between mean-pooled rows; 0 = aligned, 2 = antipodal."""
    audio_embeds, oracle_embeds = np.asarray(audio_embeds), np.asarray(oracle_embeds)
    if audio_embeds.ndim != 2 or oracle_embeds.ndim != 2:
        raise ValueError("expected [n x d] embedding matrices")
    if audio_embeds.shape[0] < 1 or oracle_embeds.shape[0] < 1:
        raise ValueError("cannot pool an empty embedding matrix")
    a, b = audio_embeds.mean(axis=0), oracle_embeds.mean(axis=0)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("pooled embedding has zero norm")
    return float(np.clip(1.0 - float(a @ b) / (na * nb), 0.0, 2.0))


# -- alignment report -----------------------------------------------------------


@dataclass(frozen=True)
class AlignmentRow:
    record_id: str
    distance: float
    target_ce: float
    greedy_match: bool


@dataclass(frozen=True)
class AlignmentReport:
    rows: tuple[AlignmentRow, ...]

    @property
    def mean_distance(self) -> float | None:
        return float(np.mean([r.distance for r in self.rows])) if self.rows else None

    @property
    def mean_target_ce(self) -> float | None:
        return float(np.mean([r.target_ce for r in self.rows])) if self.rows else None

    @property
    def match_rate(self) -> float | None:
        return float(np.mean([r.greedy_match for r in self.rows])) if self.rows else None


def alignment_report(
    state: ModelState,
    examples: list[TrainingExample],
    records_by_id: dict[str, SpeechRecord],
    max_new_tokens: int = 512,
) -> AlignmentReport:
    """Per-example distance to the oracle text embeddings, CE, and greedy echo.

    A decode that never reaches end-of-turn within the budget counts as a
    non-match rather than an error: untrained projectors routinely produce
    non-terminating prefixes and the report must still quantify them.
    """
    rows = []
    for example in examples:
        record = records_by_id[example.record_id]
        scope = example.config_tag.split("_", 1)[1]
        oracle = render_oracle(record, oracle_scope(scope))
        oracle_embeds = state.lm.embed(state.lm.tokenize(oracle.rendered))
        audio = fused_embedding(state, example.record_id)
        assembled = assemble(example, audio, state.lm)
        try:
            output = generate(
                audio,
                example.user_suffix or None,
                example.system,
                state.lm,
                max_new_tokens=max_new_tokens,
            )
            matched = output == example.target
        except DecodeBudgetExceeded:
            matched = False
        rows.append(
            AlignmentRow(
                record_id=example.record_id,
                distance=alignment_distance(audio, oracle_embeds),
                target_ce=loss(assembled, state.lm),
                greedy_match=matched,
            )
        )
    return AlignmentReport(rows=tuple(rows))


# -- attribute probe ------------------------------------------------------------


@dataclass(frozen=True)
class ProbeReport:
    attribute: str
    train_accuracy: float
    heldout_accuracy: float
    chance: float
    n_train: int
    n_heldout: int

    def __post_init__(self):
        for name in ("train_accuracy", "heldout_accuracy"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} {value} outside [0, 1]")
        if not 0.0 < self.chance <= 1.0:
            raise ValueError(f"chance level {self.chance} outside (0, 1]")


def heldout_split(record_ids: list[str]) -> np.ndarray:
    """Boolean held-out membership, a pure function of each record id."""
    digests = [
        int.from_bytes(hashlib.sha256(rid.encode("utf-8")).digest()[:8], "big")
        for rid in record_ids
    ]
    return np.array([d % _SPLIT_MODULUS == 0 for d in digests])


def probe_attributes(
    state: ModelState,
    records: list[SpeechRecord],
    attribute: str,
    ridge_lambda: float = 1e-3,
) -> ProbeReport:
    """Closed-form ridge probe for one attribute on pooled fused embeddings."""
    labels = []
    for record in records:
        if attribute not in record.attributes:
            raise MissingAttributes(record.id)
        labels.append(record.attributes[attribute])
    values = sorted(set(labels))
    if len(values) < 2:
        raise SingleClass(attribute)

    features = np.stack([fused_embedding(state, r.id).mean(axis=0) for r in records])
    targets = np.array([values.index(label) for label in labels])
    heldout = heldout_split([r.id for r in records])
    if not heldout.any() or heldout.all():
        raise SingleClass(attribute)

    design = np.hstack([features, np.ones((len(records), 1))])
    onehot = np.eye(len(values))[targets]
    tr = design[~heldout]
    weights = np.linalg.solve(
        tr.T @ tr + ridge_lambda * np.eye(design.shape[1]), tr.T @ onehot[~heldout]
    )
    predictions = (design @ weights).argmax(axis=1)
    return ProbeReport(
        attribute=attribute,
        train_accuracy=float((predictions[~heldout] == targets[~heldout]).mean()),
        heldout_accuracy=float((predictions[heldout] == targets[heldout]).mean()),
        chance=1.0 / len(values),
        n_train=int((~heldout).sum()),
        n_heldout=int(heldout.sum()),
    )


# -- teacher-forced and free-running generation metrics ---------------------------


def masked_token_accuracy(state: ModelState, examples: list[TrainingExample]) -> float:
    """Fraction of masked positions where the frozen LM's argmax hits the label."""
    hits, total = 0, 0
    for example in examples:
        assembled = assemble(example, fused_embedding(state, example.record_id), state.lm)
        logits = state.lm.forward(assembled.embeddings)
        predicted = logits[assembled.loss_mask].argmax(axis=1)
        hits += int((predicted == assembled.labels[assembled.loss_mask]).sum())
        total += int(assembled.loss_mask.sum())
    if total == 0:
        raise ValueError("no masked positions across the given examples")
    return hits / total


@dataclass(frozen=True)
class EvalItem:
    record_id: str
    instruction: str | None = None
    reference: str | None = None
    system: str | None = None


@dataclass(frozen=True)
class GenerationRow:
    record_id: str
    output: str
    exact_match: bool | None
    token_accuracy: float | None


@dataclass(frozen=True)
class GenerationReport:
    rows: tuple[GenerationRow, ...]

    @property
    def match_rate(self) -> float | None:
        scored = [r.exact_match for r in self.rows if r.exact_match is not None]
        return float(np.mean(scored)) if scored else None

    @property
    def mean_token_accuracy(self) -> float | None:
        scored = [r.token_accuracy for r in self.rows if r.token_accuracy is not None]
        return float(np.mean(scored)) if scored else None


def token_accuracy(output: str, reference: str, lm) -> float:
    """Position-aligned token agreement, normalized by the longer sequence."""
    out_ids, ref_ids = lm.tokenize(output), lm.tokenize(reference)
    if not out_ids and not ref_ids:
        return 1.0
    matches = sum(a == b for a, b in zip(out_ids, ref_ids))
    return matches / max(len(out_ids), len(ref_ids))


def eval_generation(
    state: ModelState, items: list[EvalItem], max_new_tokens: int = 512
) -> GenerationReport:
    """Greedy generations for each item, scored against references when given.

    A decode that never reaches end-of-turn within the budget is a scored
    failure (empty output), not an error; imperfect checkpoints are exactly
    what the report exists to quantify.
    """
    rows = []
    for item in items:
        audio = fused_embedding(state, item.record_id)
        try:
            output = generate(
                audio, item.instruction, item.system, state.lm, max_new_tokens=max_new_tokens
            )
        except DecodeBudgetExceeded:
            output = ""
        rows.append(
            GenerationRow(
                record_id=item.record_id,
                output=output,
                exact_match=None if item.reference is None else output == item.reference,
                token_accuracy=(
                    None
                    if item.reference is None
                    else token_accuracy(output, item.reference, state.lm)
                ),
            )
        )
    return GenerationReport(rows=tuple(rows))


# -- optional external judge ------------------------------------------------------


@dataclass(frozen=True)
class JudgeReport:
    scores: dict[str, int] = field(default_factory=dict)
    flagged: tuple[str, ...] = ()

    @property
    def mean_score(self) -> float | None:
        return float(np.mean(list(self.scores.values()))) if self.scores else None


def judge_responses(
    generations: GenerationReport, judge: LLMClient, rubric: str
) -> JudgeReport:
    """Score each generation 1-5 with an external judge; unparseable -> flagged."""
    scores, flagged = {}, []
    for row in generations.rows:
        request = ChatRequest(
            user=f"{rubric}\n\nResponse:\n{row.output}\n\nScore (1-5):",
            decode=DecodeParams(temperature=0.0, max_new_tokens=16),
            record_id=row.record_id,
        )
        reply = judge.complete(request).text
        match = _SCORE_RE.search(reply)
        if match is None:
            flagged.append(row.record_id)
        else:
            scores[row.record_id] = int(match.group())
    return JudgeReport(scores=scores, flagged=tuple(flagged))


# -- artifact emission ------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def emit_report(
    out_dir: str | Path,
    alignment: AlignmentReport | None = None,
    probes: tuple[ProbeReport, ...] = (),
    generation: GenerationReport | None = None,
    judge: JudgeReport | None = None,
    ledger_rows: tuple[dict, ...] = (),
) -> list[Path]:
    """Write CSV tables plus figures; identical inputs give identical CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    align_rows = alignment.rows if alignment else ()
    written.append(
        _write_csv(
            out / "alignment.csv",
            ["record_id", "distance", "target_ce", "greedy_match"],
            [[r.record_id, r.distance, r.target_ce, str(r.greedy_match).lower()] for r in align_rows],
        )
    )
    written.append(
        _write_csv(
            out / "probe.csv",
            ["attribute", "train_accuracy", "heldout_accuracy", "chance", "n_train", "n_heldout"],
            [
                [p.attribute, p.train_accuracy, p.heldout_accuracy, p.chance, p.n_train, p.n_heldout]
                for p in probes
            ],
        )
    )
    gen_rows = generation.rows if generation else ()
    written.append(
        _write_csv(
            out / "generation.csv",
            ["record_id", "exact_match", "token_accuracy", "output"],
            [
                [
                    r.record_id,
                    "" if r.exact_match is None else str(r.exact_match).lower(),
                    "" if r.token_accuracy is None else r.token_accuracy,
                    r.output,
                ]
                for r in gen_rows
            ],
        )
    )
    judge_rows = []
    if judge is not None:
        judge_rows = [[rid, score, "false"] for rid, score in sorted(judge.scores.items())]
        judge_rows += [[rid, "", "true"] for rid in judge.flagged]
    written.append(_write_csv(out / "judge.csv", ["record_id", "score", "flagged"], judge_rows))
    steps = [row for row in ledger_rows if "loss" in row]
    written.append(
        _write_csv(
            out / "ledger.csv",
            ["step", "stage", "loss", "lr"],
            [[row["step"], row["stage"], row["loss"], row["lr"]] for row in steps],
        )
    )

    summary = []
    if alignment and alignment.rows:
        summary += [
            ["mean_distance", alignment.mean_distance],
            ["mean_target_ce", alignment.mean_target_ce],
            ["match_rate", alignment.match_rate],
        ]
    for probe in probes:
        summary.append([f"probe_{probe.attribute}_heldout", probe.heldout_accuracy])
    if generation and generation.match_rate is not None:
        summary.append(["generation_match_rate", generation.match_rate])
    if generation and generation.mean_token_accuracy is not None:
        summary.append(["generation_token_accuracy", generation.mean_token_accuracy])
    if judge is not None and judge.mean_score is not None:
        summary.append(["judge_mean_score", judge.mean_score])
    written.append(_write_csv(out / "summary.csv", ["metric", "value"], summary))

    written += _emit_figures(out, align_rows, probes, steps)
    return written


def _emit_figures(out: Path, align_rows, probes, steps) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    if steps:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([r["step"] for r in steps], [r["loss"] for r in steps], lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("masked CE loss")
        fig.savefig(out / "loss_curve.png", dpi=100)
        plt.close(fig)
        written.append(out / "loss_curve.png")
    if align_rows:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.hist([r.distance for r in align_rows], bins=30)
        ax.set_xlabel("alignment distance")
        ax.set_ylabel("records")
        fig.savefig(out / "distance_hist.png", dpi=100)
        plt.close(fig)
        written.append(out / "distance_hist.png")
    if probes:
        fig, ax = plt.subplots(figsize=(6, 4))
        names = [p.attribute for p in probes]
        ax.bar(names, [p.heldout_accuracy for p in probes], label="held-out")
        ax.scatter(names, [p.chance for p in probes], color="black", zorder=3, label="chance")
        ax.set_ylim(0, 1)
        ax.set_ylabel("probe accuracy")
        ax.legend()
        fig.savefig(out / "probe_bars.png", dpi=100)
        plt.close(fig)
        written.append(out / "probe_bars.png")
    return written
