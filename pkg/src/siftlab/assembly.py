"""Chat-sequence assembly around an audio slot, masked CE loss, generation.

The training sequence is the frozen LM's chat template with the oracle text
replaced by projected audio embeddings:

    BOS [SYS system SYS_END] USR prefix <audio rows> suffix USR_END ASST
    target EOT

Labels are next-token shifted and the loss mask covers exactly the positions
that predict target tokens plus the end-of-turn terminator. Loss is the mean
cross-entropy over masked positions; batches average per-example losses so
example weighting is independent of target length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import TrainingExample
from .errors import NoTargetTokens, TemplateError
from .toylm import FrozenLMAdapter

# labels at positions with no next token (or an audio successor) never enter
# the loss; this sentinel keeps them out of any embedding lookup too
NO_LABEL = -1


@dataclass
class AssembledInput:
    embeddings: np.ndarray  # [L x d_llm]
    loss_mask: np.ndarray  # bool [L]
    labels: np.ndarray  # int [L], NO_LABEL where undefined
    segments: dict[str, tuple[int, int]]  # half-open spans

    def __post_init__(self):
        length = self.embeddings.shape[0]
        if self.loss_mask.shape != (length,) or self.labels.shape != (length,):
            raise TemplateError("mask/label length does not match embeddings")
        if np.any(self.loss_mask & (self.labels == NO_LABEL)):
            raise TemplateError("masked position without a label")


def assemble(example: TrainingExample, audio_embeds: np.ndarray, lm: FrozenLMAdapter) -> AssembledInput:
    """Build the teacher-forced training sequence for one example."""
    if not example.audio_slot:
        raise TemplateError(f"example {example.record_id} has no audio slot")
    if audio_embeds.ndim != 2 or audio_embeds.shape[1] != lm.d_llm:
        raise TemplateError("audio embeddings must be [T' x d_llm]")
    pieces = lm.chat_template(example.system, example.user_prefix, example.user_suffix)
    target_ids = lm.tokenize(example.target) + [lm.specials["EOT"]]
    ids_post = pieces.post_ids + target_ids
    n_pre, n_audio = len(pieces.pre_ids), audio_embeds.shape[0]
    embeddings = np.concatenate(
        [lm.embed(pieces.pre_ids), np.asarray(audio_embeds, dtype=float), lm.embed(ids_post)]
    )
    length = embeddings.shape[0]
    after_audio = n_pre + n_audio

    # next-token labels; positions whose successor is an audio row (the last
    # pre token, and audio rows except the final one) have no token label
    labels = np.full(length, NO_LABEL, dtype=int)
    labels[: n_pre - 1] = pieces.pre_ids[1:]
    labels[after_audio - 1] = ids_post[0]
    labels[after_audio : length - 1] = ids_post[1:]

    asst_pos = after_audio + len(pieces.post_ids) - 1
    mask = np.zeros(length, dtype=bool)
    mask[asst_pos : asst_pos + len(target_ids)] = True

    n_sys = 0 if example.system is None else len(lm.tokenize(example.system))
    n_prefix = len(lm.tokenize(example.user_prefix))
    n_suffix = len(lm.tokenize(example.user_suffix))
    segments = {
        "system": (2, 2 + n_sys) if example.system is not None else (0, 0),
        "prefix": (n_pre - n_prefix, n_pre),
        "audio": (n_pre, after_audio),
        "suffix": (after_audio, after_audio + n_suffix),
        "target": (asst_pos + 1, length),
    }
    return AssembledInput(embeddings=embeddings, loss_mask=mask, labels=labels, segments=segments)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss(assembled: AssembledInput, lm: FrozenLMAdapter) -> float:
    """Mean masked cross-entropy of the frozen LM's next-token prediction."""
    value, _ = _loss_internal(assembled, lm, want_grad=False)
    return value


def loss_and_embedding_grad(assembled: AssembledInput, lm: FrozenLMAdapter) -> tuple[float, np.ndarray]:
    """Loss plus its gradient w.r.t. every input embedding row.

    Only the audio-span rows of the gradient are trainable downstream; the
    rest exist so the caller can verify frozen paths stay untouched.
    """
    return _loss_internal(assembled, lm, want_grad=True)


def _loss_internal(assembled, lm, want_grad):
    mask = assembled.loss_mask
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise NoTargetTokens("no masked target positions in assembled input")
    logits = lm.forward(assembled.embeddings)
    logp = _log_softmax(logits[mask])
    picked = logp[np.arange(n_masked), assembled.labels[mask]]
    value = float(-picked.mean())
    if not np.isfinite(value):
        raise FloatingPointError("non-finite loss")
    if not want_grad:
        return value, None
    dlogits = np.zeros_like(logits)
    soft = np.exp(logp)
    soft[np.arange(n_masked), assembled.labels[mask]] -= 1.0
    dlogits[mask] = soft / n_masked
    return value, lm.forward_vjp(assembled.embeddings, dlogits)


def assemble_prefix(
    audio_embeds: np.ndarray, instruction: str | None, system: str | None, lm: FrozenLMAdapter
) -> np.ndarray:
    """Inference-time prefix: user turn holds audio plus an optional instruction."""
    pieces = lm.chat_template(system, "", instruction or "")
    return np.concatenate(
        [lm.embed(pieces.pre_ids), np.asarray(audio_embeds, dtype=float), lm.embed(pieces.post_ids)]
    )


def generate(
    audio_embeds: np.ndarray,
    instruction: str | None,
    system: str | None,
    lm: FrozenLMAdapter,
    max_new_tokens: int = 512,
    temperature: float = 0.0,
    seed: int | None = None,
) -> str:
    """Decode the frozen LM conditioned on audio (SIFT mode when instruction is None)."""
    prefix = assemble_prefix(audio_embeds, instruction, system, lm)
    ids = lm.decode(prefix, max_new_tokens=max_new_tokens, temperature=temperature, seed=seed)
    return lm.detokenize(ids)
