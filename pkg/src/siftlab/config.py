"""Declarative YAML run configuration.

One document drives every CLI command. Validation is strict: unknown keys are
rejected at every level, every run seed must be written out explicitly, and the
domain dataclasses re-validate their own values on construction. ``--seed-override``
derives the full seed block from a single base so reruns stay reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import yaml

from .datagen import GenerationConfig
from .errors import ConfigError, EmptyInstructionPool, UnknownConfigTag
from .llm import DecodeParams, HttpChatClient, LLMClient, ToyLMClient
from .projector import ProjectorConfig
from .toylm import ToyLM, ToyLMConfig
from .training import PLAN_LAYOUTS, OptimizerSpec
from .world import SyntheticWorldSpec

CONFIG_TAGS = ("TSIT_s", "SIT_s", "SIFT_s", "SIT_sp", "SIFT_sp", "SIT_ssp", "SIFT_ssp")

_SEED_NAMES = ("world", "datagen", "init", "stage")


def _check_keys(section: dict, path: str, required: tuple, optional: tuple = ()):
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(section).__name__}")
    unknown = sorted(set(section) - set(required) - set(optional))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    missing = sorted(set(required) - set(section))
    if missing:
        raise ConfigError(f"{path}: missing keys {missing}")


def _int(section: dict, path: str, key: str) -> int:
    value = section[key]
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{path}.{key}: expected an integer, got {value!r}")
    return value


@dataclass(frozen=True)
class Seeds:
    world: int
    datagen: int
    init: int
    stage: int


@dataclass(frozen=True)
class LLMSettings:
    provider: str  # "toy" | "http"
    base_url: str | None = None
    model: str | None = None
    api_key_env: str = "SIFTLAB_API_KEY"
    max_in_flight: int = 4
    timeout_s: float = 60.0


@dataclass(frozen=True)
class DatagenSettings:
    decode: DecodeParams
    system_prompt: str
    pools: dict[str, tuple[str, ...]]


@dataclass(frozen=True)
class PlanSettings:
    preset: str
    steps: int
    batch_size: int
    optimizer: OptimizerSpec
    mix_strategy: str


@dataclass(frozen=True)
class EvalSettings:
    dataset_tag: str
    probe_attributes: tuple[str, ...]
    ridge_lambda: float
    max_new_tokens: int
    judge_enabled: bool
    judge_rubric: str


@dataclass(frozen=True)
class RunConfig:
    output_dir: str
    seeds: Seeds
    n_records: int
    world: SyntheticWorldSpec | None
    corpus_path: str | None
    lm: ToyLMConfig
    projector: ProjectorConfig
    llm: LLMSettings
    datagen: DatagenSettings
    plan: PlanSettings
    eval: EvalSettings

    def generation_config(self, tag: str) -> GenerationConfig:
        """Materialize one cell of the paradigm/scope matrix."""
        if tag not in CONFIG_TAGS:
            raise UnknownConfigTag(tag)
        paradigm, scope = tag.split("_", 1)
        if paradigm == "SIFT":
            pool = ()
        elif paradigm == "TSIT":
            pool = self.datagen.pools.get("TSIT", ())
        else:
            pool = self.datagen.pools.get(tag, ())
        try:
            return GenerationConfig(
                paradigm=paradigm,
                scope=scope,
                instruction_pool=pool,
                system_prompt=self.datagen.system_prompt if scope == "ssp" else None,
                decode=self.datagen.decode,
            )
        except (ValueError, EmptyInstructionPool) as exc:
            raise ConfigError(f"datagen settings unusable for {tag}: {exc}") from exc

    def datagen_seed(self, tag: str) -> int:
        """Per-tag stream seed: base plus the tag's fixed position in the matrix."""
        if tag not in CONFIG_TAGS:
            raise UnknownConfigTag(tag)
        return self.seeds.datagen + CONFIG_TAGS.index(tag)

    def build_lm(self) -> ToyLM:
        return ToyLM(self.lm)

    def build_client(self, lm: ToyLM | None = None) -> LLMClient:
        if self.llm.provider == "toy":
            return ToyLMClient(lm if lm is not None else self.build_lm())
        return HttpChatClient(
            base_url=self.llm.base_url or "",
            model=self.llm.model or "",
            api_key_env=self.llm.api_key_env,
            timeout_s=self.llm.timeout_s,
        )

    def with_seed_override(self, base: int) -> "RunConfig":
        """Rewrite the whole seed block as fixed offsets from one base."""
        world = self.world
        if world is not None:
            world = SyntheticWorldSpec.from_dict({**world.to_dict(), "seed": base})
        return replace(
            self,
            seeds=Seeds(world=base, datagen=base + 1, init=base + 2, stage=base + 3),
            world=world,
        )


def parse_config(doc: dict, source: str = "<config>") -> RunConfig:
    _check_keys(
        doc,
        source,
        required=("output_dir", "seeds", "model", "llm", "datagen", "plan", "eval"),
        optional=("world", "corpus"),
    )
    if ("world" in doc) == ("corpus" in doc):
        raise ConfigError(f"{source}: exactly one of 'world' or 'corpus' must be present")
    if not isinstance(doc["output_dir"], str) or not doc["output_dir"]:
        raise ConfigError(f"{source}.output_dir: expected a nonempty string")

    _check_keys(doc["seeds"], f"{source}.seeds", required=_SEED_NAMES)
    seeds = Seeds(**{name: _int(doc["seeds"], f"{source}.seeds", name) for name in _SEED_NAMES})

    world = None
    corpus_path = None
    n_records = 0
    if "world" in doc:
        section = dict(doc["world"])
        _check_keys(
            section,
            f"{source}.world",
            required=("n_records",),
            optional=(
                "vocab",
                "transcript_len_range",
                "attribute_vocab",
                "frames_per_symbol",
                "d_enc",
                "noise_sigma",
            ),
        )
        n_records = _int(section, f"{source}.world", "n_records")
        section.pop("n_records")
        if isinstance(section.get("vocab"), str):
            section["vocab"] = list(section["vocab"])
        try:
            world = SyntheticWorldSpec.from_dict({"seed": seeds.world, **section})
        except Exception as exc:
            raise ConfigError(f"{source}.world: {exc}") from exc
    else:
        _check_keys(doc["corpus"], f"{source}.corpus", required=("records",))
        corpus_path = doc["corpus"]["records"]
        if not isinstance(corpus_path, str) or not corpus_path:
            raise ConfigError(f"{source}.corpus.records: expected a nonempty path")

    _check_keys(doc["model"], f"{source}.model", required=("lm", "projector"))
    lm_section = dict(doc["model"]["lm"])
    _check_keys(
        lm_section,
        f"{source}.model.lm",
        required=("d_llm", "seed"),
        optional=("alphabet", "kappa", "gamma"),
    )
    try:
        lm = ToyLMConfig(**lm_section)
    except Exception as exc:
        raise ConfigError(f"{source}.model.lm: {exc}") from exc
    proj_section = dict(doc["model"]["projector"])
    _check_keys(
        proj_section,
        f"{source}.model.projector",
        required=("d_enc", "group", "d_hidden", "d_llm"),
        optional=("bias",),
    )
    try:
        projector = ProjectorConfig(**proj_section)
    except Exception as exc:
        raise ConfigError(f"{source}.model.projector: {exc}") from exc
    if projector.d_llm != lm.d_llm:
        raise ConfigError(
            f"{source}.model: projector d_llm {projector.d_llm} != lm d_llm {lm.d_llm}"
        )
    if world is not None and world.d_enc != projector.d_enc:
        raise ConfigError(
            f"{source}: world d_enc {world.d_enc} != projector d_enc {projector.d_enc}"
        )

    llm_section = dict(doc["llm"])
    _check_keys(
        llm_section,
        f"{source}.llm",
        required=("provider",),
        optional=("base_url", "model", "api_key_env", "max_in_flight", "timeout_s"),
    )
    if llm_section["provider"] not in ("toy", "http"):
        raise ConfigError(f"{source}.llm.provider: expected 'toy' or 'http'")
    if llm_section["provider"] == "http" and not llm_section.get("base_url"):
        raise ConfigError(f"{source}.llm: provider 'http' requires base_url")
    llm = LLMSettings(**llm_section)

    dg = dict(doc["datagen"])
    _check_keys(
        dg,
        f"{source}.datagen",
        required=("system_prompt", "instruction_pools"),
        optional=("decode",),
    )
    decode_section = dict(dg.get("decode", {}))
    _check_keys(
        decode_section,
        f"{source}.datagen.decode",
        required=(),
        optional=("temperature", "max_new_tokens", "seed"),
    )
    try:
        decode = DecodeParams(**decode_section)
    except ValueError as exc:
        raise ConfigError(f"{source}.datagen.decode: {exc}") from exc
    pools_section = dg["instruction_pools"]
    _check_keys(
        pools_section,
        f"{source}.datagen.instruction_pools",
        required=(),
        optional=("TSIT", "SIT_s", "SIT_sp", "SIT_ssp"),
    )
    pools = {}
    for name, entries in pools_section.items():
        if not isinstance(entries, list) or not all(isinstance(e, str) for e in entries):
            raise ConfigError(
                f"{source}.datagen.instruction_pools.{name}: expected a list of strings"
            )
        pools[name] = tuple(entries)
    if not isinstance(dg["system_prompt"], str) or not dg["system_prompt"]:
        raise ConfigError(f"{source}.datagen.system_prompt: expected a nonempty string")
    datagen = DatagenSettings(decode=decode, system_prompt=dg["system_prompt"], pools=pools)

    plan_section = dict(doc["plan"])
    _check_keys(
        plan_section,
        f"{source}.plan",
        required=("preset", "steps", "batch_size", "optimizer"),
        optional=("mix_strategy",),
    )
    if plan_section["preset"] not in PLAN_LAYOUTS:
        raise ConfigError(
            f"{source}.plan.preset: unknown preset {plan_section['preset']!r}; "
            f"have {sorted(PLAN_LAYOUTS)}"
        )
    opt_section = dict(plan_section["optimizer"])
    _check_keys(
        opt_section,
        f"{source}.plan.optimizer",
        required=("kind", "lr"),
        optional=("schedule",),
    )
    try:
        optimizer = OptimizerSpec(**opt_section)
    except ValueError as exc:
        raise ConfigError(f"{source}.plan.optimizer: {exc}") from exc
    plan = PlanSettings(
        preset=plan_section["preset"],
        steps=_int(plan_section, f"{source}.plan", "steps"),
        batch_size=_int(plan_section, f"{source}.plan", "batch_size"),
        optimizer=optimizer,
        mix_strategy=plan_section.get("mix_strategy", "rebalanced"),
    )
    if plan.steps < 0 or plan.batch_size < 1:
        raise ConfigError(f"{source}.plan: steps must be >= 0 and batch_size >= 1")

    eval_section = dict(doc["eval"])
    _check_keys(
        eval_section,
        f"{source}.eval",
        required=("dataset_tag", "probe_attributes"),
        optional=("ridge_lambda", "max_new_tokens", "judge"),
    )
    if eval_section["dataset_tag"] not in CONFIG_TAGS:
        raise ConfigError(f"{source}.eval.dataset_tag: unknown tag {eval_section['dataset_tag']!r}")
    judge_section = dict(eval_section.get("judge", {}))
    _check_keys(
        judge_section, f"{source}.eval.judge", required=(), optional=("enabled", "rubric")
    )
    evaluation = EvalSettings(
        dataset_tag=eval_section["dataset_tag"],
        probe_attributes=tuple(eval_section["probe_attributes"]),
        ridge_lambda=float(eval_section.get("ridge_lambda", 1e-3)),
        max_new_tokens=int(eval_section.get("max_new_tokens", 512)),
        judge_enabled=bool(judge_section.get("enabled", False)),
        judge_rubric=judge_section.get(
            "rubric", "Rate the response quality from 1 (worst) to 5 (best)."
        ),
    )
    if not evaluation.probe_attributes:
        raise ConfigError(f"{source}.eval.probe_attributes: expected at least one attribute")

    return RunConfig(
        output_dir=doc["output_dir"],
        seeds=seeds,
        n_records=n_records,
        world=world,
        corpus_path=corpus_path,
        lm=lm,
        projector=projector,
        llm=llm,
        datagen=datagen,
        plan=plan,
        eval=evaluation,
    )


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config document must be a mapping")
    return parse_config(doc, source=str(path))


def default_config() -> RunConfig:
    """The packaged desk-scale configuration (synthetic world + toy LM)."""
    text = resources.files("siftlab").joinpath("data/default.yaml").read_text("utf-8")
    return parse_config(yaml.safe_load(text), source="default.yaml")
