"""Training-data construction: oracle rendering through target collection.

Three paradigms share one pipeline. TSIT takes the transcript itself as the
target under a sampled task instruction and never calls the LLM. SIT sends
the oracle text plus a sampled generic instruction to the frozen LLM and
keeps the reply. SIFT sends the oracle text alone (the null instruction) and
keeps the reply; at training time its user turn is the audio span and
nothing else.

Runs are quarantine-and-continue: any record that cannot produce an example
lands in a quarantine file with a reason, and input count always equals
emitted plus quarantined. LLM calls run with bounded parallelism, but
instruction sampling happens sequentially before dispatch and results are
keyed by record id, so output bytes are independent of completion order.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import SpeechRecord
from .errors import (
    EmptyComponent,
    EmptyGeneration,
    EmptyInstructionPool,
    MissingAttributes,
    MissingTranscript,
    ProviderRefusal,
    TransportError,
    UnknownConfigTag,
)
from .llm import ChatRequest, DecodeParams, LLMClient, TargetResponse
from .oracle import OracleText, render_oracle

logger = logging.getLogger(__name__)

PARADIGMS = ("TSIT", "SIT", "SIFT")
SCOPES = ("s", "sp", "ssp")
STAGE_TAGS = ("stage1", "stage2")

_EXAMPLE_KEYS = (
    "record_id", "system", "user_prefix", "audio_slot",
    "user_suffix", "target", "config_tag", "stage_tag",
)


@dataclass(frozen=True)
class GenerationConfig:
    paradigm: str
    scope: str
    instruction_pool: tuple[str, ...] = ()
    system_prompt: str | None = None
    decode: DecodeParams = field(default_factory=DecodeParams)

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise UnknownConfigTag(self.paradigm)
        if self.scope not in SCOPES:
            raise UnknownConfigTag(self.scope)
        if self.paradigm == "SIFT" and self.instruction_pool:
            raise ValueError("SIFT uses the null instruction; pool must be empty")
        if self.paradigm != "SIFT" and not self.instruction_pool:
            raise EmptyInstructionPool(f"{self.tag} requires a nonempty instruction pool")
        if any(not p for p in self.instruction_pool):
            raise ValueError("instruction pool entries must be nonempty")
        if self.paradigm == "TSIT" and self.scope != "s":
            raise ValueError("TSIT is defined only at scope s")
        if self.scope == "ssp" and not self.system_prompt:
            raise ValueError("scope ssp requires the dialog system prompt")
        if self.scope != "ssp" and self.system_prompt is not None:
            raise ValueError("system prompt is only used at scope ssp")

    @property
    def tag(self) -> str:
        return f"{self.paradigm}_{self.scope}"

    @property
    def stage_tag(self) -> str:
        return "stage1" if self.scope == "s" else "stage2"


@dataclass(frozen=True)
class TrainingExample:
    record_id: str
    system: str | None
    user_prefix: str
    audio_slot: bool
    user_suffix: str
    target: str
    config_tag: str
    stage_tag: str

    def __post_init__(self):
        if not self.target:
            raise ValueError(f"example {self.record_id!r} has an empty target")
        paradigm = self.config_tag.split("_", 1)[0]
        if paradigm not in PARADIGMS:
            raise UnknownConfigTag(self.config_tag)
        if paradigm == "SIFT" and self.user_suffix:
            raise ValueError("SIFT example must not carry an instruction suffix")
        if self.stage_tag not in STAGE_TAGS:
            raise ValueError(f"unknown stage tag {self.stage_tag!r}")


def sample_instruction(pool: tuple[str, ...], rng: np.random.Generator) -> str:
    if not pool:
        raise EmptyInstructionPool("cannot sample from an empty pool")
    return pool[int(rng.integers(0, len(pool)))]


def oracle_scope(scope: str) -> str:
    return "ssp-body" if scope == "ssp" else scope


def build_request(oracle: OracleText, config: GenerationConfig, rng: np.random.Generator) -> ChatRequest:
    """Compose the LLM request that elicits the self-generated target."""
    if config.paradigm == "TSIT":
        raise ValueError("TSIT targets are synthesized, not requested")
    if config.paradigm == "SIFT":
        user, instruction = oracle.rendered, None
    else:
        instruction = sample_instruction(config.instruction_pool, rng)
        user = f"{oracle.rendered} {instruction}"
    return ChatRequest(
        user=user,
        system=config.system_prompt,
        decode=config.decode,
        instruction=instruction,
    )


def generate_target(request: ChatRequest, llm: LLMClient) -> TargetResponse:
    """Run one request; empty replies are an error, matching quarantine rules."""
    response = llm.complete(request)
    if not response.text:
        raise EmptyGeneration(request.record_id)
    return response


def synthesize_tsit(
    record: SpeechRecord, config: GenerationConfig, rng: np.random.Generator
) -> TrainingExample:
    """Transcript used directly as the target under a sampled task instruction."""
    if config.paradigm != "TSIT":
        raise ValueError(f"expected a TSIT config, got {config.tag}")
    if not record.transcript:
        raise MissingTranscript(record.id)
    instruction = sample_instruction(config.instruction_pool, rng)
    return TrainingExample(
        record_id=record.id,
        system=None,
        user_prefix="",
        audio_slot=True,
        user_suffix=instruction,
        target=record.transcript,
        config_tag=config.tag,
        stage_tag=config.stage_tag,
    )


def assemble_example(
    record: SpeechRecord,
    config: GenerationConfig,
    target: str,
    instruction: str | None = None,
) -> TrainingExample:
    """Pair the collected target with its training-time input layout.

    SIT keeps the eliciting instruction after the audio span; SIFT keeps the
    user turn as the audio alone; ssp copies the dialog system prompt.
    """
    if config.paradigm == "SIT" and not instruction:
        raise ValueError("SIT example requires the instruction that elicited the target")
    return TrainingExample(
        record_id=record.id,
        system=config.system_prompt,
        user_prefix="",
        audio_slot=True,
        user_suffix=instruction or "",
        target=target,
        config_tag=config.tag,
        stage_tag=config.stage_tag,
    )


# -- dataset JSONL IO ---------------------------------------------------------


def save_examples(examples: list[TrainingExample], path: str | Path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            row = {key: getattr(ex, key) for key in _EXAMPLE_KEYS}
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def load_examples(path: str | Path) -> list[TrainingExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(TrainingExample(**json.loads(line)))
    return out


# -- dataset mixing -------------------------------------------------------------


@dataclass(frozen=True)
class MixComponent:
    examples: tuple[TrainingExample, ...]
    weight: float

    def __post_init__(self):
        if not np.isfinite(self.weight) or self.weight <= 0:
            raise ValueError(f"component weight must be finite and positive, got {self.weight}")
        if not self.examples:
            raise EmptyComponent("mix component has no examples")


@dataclass(frozen=True)
class DatasetMix:
    components: tuple[MixComponent, ...]
    strategy: str = "rebalanced"

    def __post_init__(self):
        if not self.components:
            raise EmptyComponent("mix has no components")
        if self.strategy not in ("proportional", "rebalanced"):
            raise ValueError(f"unknown mix strategy {self.strategy!r}")


def mix(dataset_mix: DatasetMix, total: int, rng: np.random.Generator) -> list[TrainingExample]:
    """Sample a training stream of ``total`` examples with replacement.

    ``proportional`` weights each component by weight times size (large
    sources dominate); ``rebalanced`` by weight alone, making draw shares
    independent of source size.
    """
    if total < 1:
        raise ValueError(f"total must be >= 1, got {total}")
    sizes = np.array([len(c.examples) for c in dataset_mix.components], dtype=float)
    weights = np.array([c.weight for c in dataset_mix.components])
    if dataset_mix.strategy == "proportional":
        weights = weights * sizes
    probs = weights / weights.sum()
    picks = rng.choice(len(sizes), size=total, p=probs)
    return [
        dataset_mix.components[c].examples[int(rng.integers(0, sizes[c]))]
        for c in picks
    ]


# -- full run -----------------------------------------------------------------


@dataclass(frozen=True)
class DatagenReport:
    n_input: int
    n_emitted: int
    n_quarantined: int

    def __post_init__(self):
        if self.n_input != self.n_emitted + self.n_quarantined:
            raise AssertionError("datagen conservation violated")


def run_datagen(
    records: list[SpeechRecord],
    config: GenerationConfig,
    llm: LLMClient | None,
    out_path: str | Path,
    quarantine_path: str | Path,
    seed: int = 0,
    max_in_flight: int = 4,
) -> DatagenReport:
    """Produce one dataset file and one quarantine file from a corpus.

    Requests are fully built (instructions sampled in record order from one
    seeded stream) before any LLM call is dispatched, so parallel completion
    cannot change what is asked or emitted.
    """
    rng = np.random.default_rng([seed])
    examples: dict[str, TrainingExample] = {}
    quarantined: list[tuple[str, str]] = []
    pending: list[tuple[SpeechRecord, ChatRequest]] = []

    for record in records:
        try:
            if config.paradigm == "TSIT":
                examples[record.id] = synthesize_tsit(record, config, rng)
                continue
            oracle = render_oracle(record, oracle_scope(config.scope))
            request = replace(build_request(oracle, config, rng), record_id=record.id)
            pending.append((record, request))
        except (MissingTranscript, MissingAttributes) as exc:
            quarantined.append((record.id, str(exc)))

    if pending:
        if llm is None:
            raise ValueError(f"{config.tag} requires an LLM client")
        with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
            futures = {rec.id: pool.submit(generate_target, req, llm) for rec, req in pending}
        for record, request in pending:
            try:
                response = futures[record.id].result()
                examples[record.id] = assemble_example(
                    record, config, response.text, request.instruction
                )
            except (TransportError, ProviderRefusal, EmptyGeneration) as exc:
                logger.warning("quarantining record %s: %s", record.id, exc)
                quarantined.append((record.id, str(exc)))

    ordered = [examples[r.id] for r in records if r.id in examples]
    save_examples(ordered, out_path)
    with open(quarantine_path, "w", encoding="utf-8", newline="\n") as fh:
        for record_id, reason in quarantined:
            fh.write(json.dumps({"record_id": record_id, "reason": reason}, ensure_ascii=False, sort_keys=True) + "\n")
    return DatagenReport(
        n_input=len(records),
        n_emitted=len(ordered),
        n_quarantined=len(quarantined),
    )
