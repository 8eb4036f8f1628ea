import numpy as np
import pytest

from siftlab.datagen import TrainingExample
from siftlab.oracle import render_oracle
from siftlab.projector import ProjectorConfig
from siftlab.toylm import ToyLM, ToyLMConfig
from siftlab.world import SyntheticWorld, SyntheticWorldSpec


@pytest.fixture(scope="session")
def lm16():
    """Byte-vocabulary toy LM small enough for in-test training loops."""
    return ToyLM(ToyLMConfig(d_llm=16, seed=0))


@pytest.fixture(scope="session")
def tiny_world():
    spec = SyntheticWorldSpec(
        seed=5,
        vocab=tuple("abcd"),
        transcript_len_range=(2, 4),
        attribute_vocab={"emotion": ("angry", "happy")},
        frames_per_symbol=2,
        d_enc=8,
        noise_sigma=0.01,
    )
    return SyntheticWorld(spec)


@pytest.fixture(scope="session")
def tiny_records(tiny_world):
    return tiny_world.make_corpus(24)


@pytest.fixture(scope="session")
def tiny_feature_fn(tiny_world, tiny_records):
    by_id = {r.id: r for r in tiny_records}

    def feature_fn(record_id, branch):
        return tiny_world.encode(by_id[record_id], branch)

    return feature_fn


@pytest.fixture(scope="session")
def tiny_projcfg():
    return ProjectorConfig(d_enc=8, group=2, d_hidden=12, d_llm=16, bias=True)


def _sift_example(record, scope):
    oracle = render_oracle(record, scope)
    return TrainingExample(
        record_id=record.id,
        system=None,
        user_prefix="",
        audio_slot=True,
        user_suffix="",
        target=oracle.rendered,  # what the echo LM would self-generate
        config_tag=f"SIFT_{scope}",
        stage_tag="stage1" if scope == "s" else "stage2",
    )


@pytest.fixture(scope="session")
def sift_s_examples(tiny_records):
    return [_sift_example(r, "s") for r in tiny_records]


@pytest.fixture(scope="session")
def sift_sp_examples(tiny_records):
    return [_sift_example(r, "sp") for r in tiny_records]
