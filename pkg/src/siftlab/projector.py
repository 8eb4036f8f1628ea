"""Grouped-frame MLP projector and dual-branch fusion.

Consecutive encoder frames are concatenated in groups (default 4, dropping
the frame rate from 25 Hz to 6.25 Hz) and mapped through a two-layer ReLU
MLP into the LM embedding space. The final group is zero-padded when the
frame count is not a multiple of the group size. A model can carry one
projector per feature branch; fusion is an element-wise sum, which keeps the
paralinguistic branch an exact no-op while its output layer stays at its
zero initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import FeatureMatrix
from .errors import DimMismatch, LengthMismatch


@dataclass(frozen=True)
class ProjectorConfig:
    d_enc: int = 768
    group: int = 4
    d_hidden: int = 3584
    d_llm: int = 3584
    bias: bool = True

    def __post_init__(self):
        for name in ("d_enc", "group", "d_hidden", "d_llm"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class ProjectorParams:
    W1: np.ndarray  # [group*d_enc x d_hidden]
    b1: np.ndarray | None
    W2: np.ndarray  # [d_hidden x d_llm]
    b2: np.ndarray | None

    def validate(self, config: ProjectorConfig):
        if self.W1.shape != (config.group * config.d_enc, config.d_hidden):
            raise DimMismatch(f"W1 shape {self.W1.shape} does not match config")
        if self.W2.shape != (config.d_hidden, config.d_llm):
            raise DimMismatch(f"W2 shape {self.W2.shape} does not match config")
        has_bias = self.b1 is not None and self.b2 is not None
        if has_bias != config.bias:
            raise DimMismatch("bias presence does not match config")
        if config.bias and (self.b1.shape != (config.d_hidden,) or self.b2.shape != (config.d_llm,)):
            raise DimMismatch("bias shapes do not match config")
        for arr in self.arrays().values():
            if not np.all(np.isfinite(arr)):
                raise ValueError("projector parameters must be finite")

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"W1": self.W1, "W2": self.W2}
        if self.b1 is not None:
            out["b1"] = self.b1
        if self.b2 is not None:
            out["b2"] = self.b2
        return out

    def copy(self) -> "ProjectorParams":
        return ProjectorParams(
            W1=self.W1.copy(),
            b1=None if self.b1 is None else self.b1.copy(),
            W2=self.W2.copy(),
            b2=None if self.b2 is None else self.b2.copy(),
        )


def init_semantic(config: ProjectorConfig, rng: np.random.Generator) -> ProjectorParams:
    """Small-uniform initialization, scale 1/sqrt(fan-in) per layer."""
    s1 = 1.0 / np.sqrt(config.group * config.d_enc)
    s2 = 1.0 / np.sqrt(config.d_hidden)
    return ProjectorParams(
        W1=rng.uniform(-s1, s1, size=(config.group * config.d_enc, config.d_hidden)),
        b1=np.zeros(config.d_hidden) if config.bias else None,
        W2=rng.uniform(-s2, s2, size=(config.d_hidden, config.d_llm)),
        b2=np.zeros(config.d_llm) if config.bias else None,
    )


def init_paralinguistic(config: ProjectorConfig, rng: np.random.Generator) -> ProjectorParams:
    """Zero output layer: fused behavior starts identical to semantic-only."""
    params = init_semantic(config, rng)
    params.W2 = np.zeros_like(params.W2)
    return params


def count_params(config: ProjectorConfig) -> int:
    n = config.group * config.d_enc * config.d_hidden + config.d_hidden * config.d_llm
    if config.bias:
        n += config.d_hidden + config.d_llm
    return n


def group_frames(features: np.ndarray, group: int) -> np.ndarray:
    """[T x d_enc] -> [ceil(T/group) x group*d_enc], zero-padding the tail."""
    t, d_enc = features.shape
    t_out = -(-t // group)
    padded = np.zeros((t_out * group, d_enc))
    padded[:t] = features
    return padded.reshape(t_out, group * d_enc)


def project(
    params: ProjectorParams, config: ProjectorConfig, features: FeatureMatrix
) -> np.ndarray:
    return _forward_parts(params, config, features)[0]


def _forward_parts(params, config, features):
    if features.d_enc != config.d_enc:
        raise DimMismatch(
            f"feature dim {features.d_enc} does not match projector d_enc {config.d_enc}"
        )
    params.validate(config)
    grouped = group_frames(np.asarray(features.data, dtype=float), config.group)
    pre = grouped @ params.W1
    if params.b1 is not None:
        pre = pre + params.b1
    hidden = np.maximum(pre, 0.0)
    out = hidden @ params.W2
    if params.b2 is not None:
        out = out + params.b2
    return out, grouped, hidden


class ProjectorTape:
    """One projector forward with enough state kept to run the backward."""

    def __init__(self, params: ProjectorParams, config: ProjectorConfig, features: FeatureMatrix):
        self.params = params
        self.output, self._grouped, self._hidden = _forward_parts(params, config, features)

    def backward(self, d_output: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients for the given output cotangent.

        Gradients w.r.t. the (frozen) encoder features are never formed.
        """
        if d_output.shape != self.output.shape:
            raise DimMismatch("cotangent shape does not match projector output")
        grads = {
            "W2": self._hidden.T @ d_output,
            "W1": None,
        }
        d_hidden = (d_output @ self.params.W2.T) * (self._hidden > 0)
        grads["W1"] = self._grouped.T @ d_hidden
        if self.params.b1 is not None:
            grads["b1"] = d_hidden.sum(axis=0)
        if self.params.b2 is not None:
            grads["b2"] = d_output.sum(axis=0)
        return grads


def fuse_branches(semantic: np.ndarray, paralinguistic: np.ndarray | None) -> np.ndarray:
    if paralinguistic is None:
        return semantic
    if paralinguistic.shape != semantic.shape:
        raise LengthMismatch(
            f"branch shapes differ: {semantic.shape} vs {paralinguistic.shape}"
        )
    return semantic + paralinguistic
