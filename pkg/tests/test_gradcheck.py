"""Finite-difference validation of the hand-written backward passes.

The whole training path is numpy with explicit VJPs, so analytic gradients
are checked entry by entry against central differences of the actual loss.
"""

import numpy as np
import pytest

from siftlab.corpus import FeatureMatrix
from siftlab.datagen import TrainingExample
from siftlab.projector import ProjectorConfig, init_semantic
from siftlab.toylm import ToyLM, ToyLMConfig
from siftlab.training import ModelState, example_loss_and_grads
from siftlab.checkpoint import PARAM_GROUPS

# the smallest configuration exercising every shape: grouped frames with a
# padded tail, hidden layer, both branches, byte alphabet of 4 -> vocab 11
TINY = ProjectorConfig(d_enc=3, group=2, d_hidden=5, d_llm=4, bias=True)


def tiny_state(bias=True, system=None):
    lm = ToyLM(ToyLMConfig(d_llm=4, seed=1, alphabet="abcd"))
    config = ProjectorConfig(d_enc=3, group=2, d_hidden=5, d_llm=4, bias=bias)
    rng = np.random.default_rng(7)
    feats = {
        "semantic": FeatureMatrix(rng.normal(size=(5, 3)), 25.0, "semantic"),
        "paralinguistic": FeatureMatrix(rng.normal(size=(5, 3)), 25.0, "paralinguistic"),
    }
    params = {
        # both branches get dense random weights so every path carries signal
        "proj_semantic": init_semantic(config, np.random.default_rng(8)),
        "proj_paralinguistic": init_semantic(config, np.random.default_rng(9)),
    }
    state = ModelState(
        lm=lm,
        projector_config=config,
        params=params,
        feature_fn=lambda rid, branch: feats[branch],
    )
    example = TrainingExample(
        record_id="g1",
        system=system,
        user_prefix="",
        audio_slot=True,
        user_suffix="cd" if system is None else "",
        target="abca",
        config_tag="SIT_s" if system is None else "SIFT_s",
        stage_tag="stage1",
    )
    return state, example


def loss_of(state, example):
    value, _ = example_loss_and_grads(state, example, trainable=())
    return value


def max_relative_error(state, example, h=1e-6):
    _, grads = example_loss_and_grads(state, example, trainable=PARAM_GROUPS)
    worst = 0.0
    for group in PARAM_GROUPS:
        arrays = state.params[group].arrays()
        for name, analytic in grads[group].items():
            param = arrays[name]
            for idx in np.ndindex(param.shape):
                keep = param[idx]
                param[idx] = keep + h
                up = loss_of(state, example)
                param[idx] = keep - h
                down = loss_of(state, example)
                param[idx] = keep
                numeric = (up - down) / (2 * h)
                err = abs(analytic[idx] - numeric) / max(abs(analytic[idx]) + abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst


def test_gradients_match_finite_differences():
    state, example = tiny_state()
    assert max_relative_error(state, example) < 1e-4


def test_gradients_match_without_bias():
    state, example = tiny_state(bias=False)
    assert max_relative_error(state, example) < 1e-4


def test_gradients_match_with_system_prompt():
    state, example = tiny_state(system="ab")
    assert max_relative_error(state, example) < 1e-4


def test_untrainable_groups_get_no_gradients():
    state, example = tiny_state()
    _, grads = example_loss_and_grads(state, example, trainable=("proj_semantic",))
    assert set(grads) == {"proj_semantic"}
