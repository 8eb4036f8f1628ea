"""A tiny frozen decoder LM with an exactly analyzable forward pass.

The model is byte-level: text tokenizes to its UTF-8 bytes (ids 0..255), or
to a restricted single-character alphabet when one is configured, followed by
seven structural specials (BOS, SYS, SYS_END, USR, USR_END, ASST, EOT). Its
embedding table is a frozen seeded random matrix with unit-norm rows, and the
forward pass is a hand-rolled readout rather than attention:

  * positions at or after the last ASST marker read out the user-turn content
    positionally: prediction k after the marker copies the embedding at user
    offset k (so greedy decoding echoes the user turn byte for byte);
  * once the user turn is exhausted the readout switches to the end-of-turn
    embedding plus ``gamma`` times the mean user-turn embedding, which both
    terminates the echo and leaks a pooled summary of the input into the
    remaining target positions;
  * logits are ``kappa`` times cosine-style dot products against the table.

Everything is deterministic, differentiable w.r.t. the input embeddings
(needed to train projectors through it), and frozen: no call mutates state.
The echo behavior makes self-generated targets brute-force predictable, and
the pooled tail is what forces attribute information through the projector
when targets mention attributes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import DecodeBudgetExceeded, InvalidSpec, TemplateError

SPECIAL_NAMES = ("BOS", "SYS", "SYS_END", "USR", "USR_END", "ASST", "EOT")

# embedding-space marker detection threshold; token rows match themselves at
# exactly 1.0 and construction verifies no other row comes this close
_MARKER_COS = 0.999


@dataclass(frozen=True)
class ToyLMConfig:
    d_llm: int = 64
    seed: int = 0
    alphabet: str | None = None  # None = full byte vocabulary
    kappa: float = 8.0
    gamma: float = 0.5

    def __post_init__(self):
        if self.d_llm < 2:
            raise InvalidSpec("d_llm must be >= 2")
        if self.alphabet is not None:
            if len(set(self.alphabet)) != len(self.alphabet) or not self.alphabet:
                raise InvalidSpec("alphabet must be nonempty with distinct characters")
            if any(ord(ch) > 0x10FFFF for ch in self.alphabet):
                raise InvalidSpec("alphabet must be unicode characters")
        if self.kappa <= 0:
            raise InvalidSpec("kappa must be positive")


@runtime_checkable
class FrozenLMAdapter(Protocol):
    """What the training/eval stack needs from a frozen decoder LM.

    Implementations must be pure: parameters immutable for the process
    lifetime, forward deterministic in its inputs.
    """

    vocab_size: int
    d_llm: int
    specials: dict[str, int]

    def tokenize(self, text: str) -> list[int]: ...

    def detokenize(self, ids: list[int]) -> str: ...

    def embed(self, ids: list[int]) -> np.ndarray: ...

    def forward(self, embeddings: np.ndarray) -> np.ndarray: ...

    def forward_vjp(self, embeddings: np.ndarray, dlogits: np.ndarray) -> np.ndarray: ...

    def chat_template(
        self, system: str | None, user_prefix: str, user_suffix: str
    ) -> "TemplatePieces": ...

    def decode(
        self,
        prefix_embeddings: np.ndarray,
        max_new_tokens: int,
        temperature: float = 0.0,
        seed: int | None = None,
    ) -> list[int]: ...


@dataclass(frozen=True)
class TemplatePieces:
    """Token-id skeleton of one chat turn with a hole where audio goes."""

    pre_ids: list[int]  # BOS [SYS system SYS_END] USR prefix
    post_ids: list[int]  # suffix USR_END ASST
    audio_slot_index: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "audio_slot_index", len(self.pre_ids))


class ToyLM:
    """Frozen byte-echo LM implementing the adapter contract."""

    def __init__(self, config: ToyLMConfig):
        self.config = config
        if config.alphabet is None:
            self._char_to_id = None
            n_content = 256
        else:
            self._char_to_id = {ch: i for i, ch in enumerate(config.alphabet)}
            self._id_to_char = {i: ch for ch, i in self._char_to_id.items()}
            n_content = len(config.alphabet)
        self.vocab_size = n_content + len(SPECIAL_NAMES)
        self.d_llm = config.d_llm
        self.specials = {name: n_content + i for i, name in enumerate(SPECIAL_NAMES)}
        rng = np.random.default_rng([config.seed])
        table = rng.normal(size=(self.vocab_size, config.d_llm))
        self.embedding_table = table / np.linalg.norm(table, axis=1, keepdims=True)
        self.embedding_table.setflags(write=False)
        self._check_marker_separation()

    def _check_marker_separation(self):
        # marker detection relies on no non-identical row pair being nearly
        # parallel; resample the seed if a tiny d_llm draws a degenerate table
        gram = self.embedding_table @ self.embedding_table.T
        np.fill_diagonal(gram, 0.0)
        for name in ("USR", "USR_END", "ASST"):
            row = gram[self.specials[name]]
            if np.max(np.abs(row)) >= _MARKER_COS:
                raise InvalidSpec(
                    f"seed {self.config.seed} draws an embedding too close to the "
                    f"{name} marker; choose another seed"
                )

    # -- tokenizer ------------------------------------------------------------

    def tokenize(self, text: str) -> list[int]:
        if self._char_to_id is None:
            return list(text.encode("utf-8"))
        try:
            return [self._char_to_id[ch] for ch in text]
        except KeyError as exc:
            raise TemplateError(f"character {exc.args[0]!r} outside the LM alphabet") from None

    def detokenize(self, ids: list[int]) -> str:
        content = [i for i in ids if i < self.vocab_size - len(SPECIAL_NAMES)]
        if self._char_to_id is None:
            return bytes(content).decode("utf-8", errors="replace")
        return "".join(self._id_to_char[i] for i in content)

    def embed(self, ids: list[int]) -> np.ndarray:
        arr = np.asarray(ids, dtype=int)
        if arr.size and (arr.min() < 0 or arr.max() >= self.vocab_size):
            raise TemplateError("token id outside vocabulary")
        return self.embedding_table[arr].copy() if arr.size else np.zeros((0, self.d_llm))

    # -- chat template ----------------------------------------------------------

    def chat_template(
        self, system: str | None, user_prefix: str, user_suffix: str
    ) -> TemplatePieces:
        sp = self.specials
        pre = [sp["BOS"]]
        if system is not None:
            pre += [sp["SYS"], *self.tokenize(system), sp["SYS_END"]]
        pre += [sp["USR"], *self.tokenize(user_prefix)]
        post = [*self.tokenize(user_suffix), sp["USR_END"], sp["ASST"]]
        return TemplatePieces(pre_ids=pre, post_ids=post)

    # -- structure detection -----------------------------------------------------

    def _find_structure(self, embeddings: np.ndarray) -> tuple[int, int, int]:
        """Locate (user_start, user_end, assistant_pos) via marker embeddings."""
        sp = self.specials
        sims = embeddings @ self.embedding_table[[sp["USR"], sp["USR_END"], sp["ASST"]]].T
        norms = np.linalg.norm(embeddings, axis=1)
        norms[norms == 0] = 1.0
        sims /= norms[:, None]
        usr_hits, usr_end_hits, asst_hits = (np.flatnonzero(sims[:, i] > _MARKER_COS) for i in range(3))
        if asst_hits.size == 0:
            raise TemplateError("no assistant marker in sequence")
        asst = int(asst_hits[-1])
        usr_before = usr_hits[usr_hits < asst]
        if usr_before.size == 0:
            raise TemplateError("no user marker before assistant marker")
        usr = int(usr_before[-1])
        ends = usr_end_hits[(usr_end_hits > usr) & (usr_end_hits <= asst)]
        if ends.size == 0:
            raise TemplateError("user turn is not closed before the assistant marker")
        return usr + 1, int(ends[0]), asst

    def _pool(self, embeddings: np.ndarray, u_start: int, u_end: int) -> np.ndarray:
        if u_end <= u_start:
            return np.zeros(self.d_llm)
        return embeddings[u_start:u_end].mean(axis=0)

    # -- forward ------------------------------------------------------------------

    def _readout(self, embeddings, u_start, u_end, asst, pooled) -> np.ndarray:
        length = embeddings.shape[0]
        c = np.array(embeddings, dtype=float, copy=True)
        tail = self.embedding_table[self.specials["EOT"]] + self.config.gamma * pooled
        positions = np.arange(asst, length)
        sources = u_start + positions - asst
        in_span = sources < u_end
        c[positions[in_span]] = embeddings[sources[in_span]]
        c[positions[~in_span]] = tail
        return c

    def forward(self, embeddings: np.ndarray) -> np.ndarray:
        """Logits [L x vocab] for next-token prediction at every position."""
        u_start, u_end, asst = self._find_structure(embeddings)
        pooled = self._pool(embeddings, u_start, u_end)
        c = self._readout(embeddings, u_start, u_end, asst, pooled)
        return self.config.kappa * c @ self.embedding_table.T

    def forward_vjp(self, embeddings: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(dlogits * forward(embeddings))`` w.r.t. the input.

        Structure detection is treated as fixed (it locates the frozen marker
        tokens, which carry no gradient in any training configuration).
        """
        u_start, u_end, asst = self._find_structure(embeddings)
        length = embeddings.shape[0]
        dc = self.config.kappa * dlogits @ self.embedding_table
        dx = np.zeros_like(embeddings, dtype=float)
        dx[:asst] = dc[:asst]
        positions = np.arange(asst, length)
        sources = u_start + positions - asst
        in_span = sources < u_end
        # source indices are distinct but overlap the j < asst region
        np.add.at(dx, sources[in_span], dc[positions[in_span]])
        span = u_end - u_start
        if span > 0:
            dpool = self.config.gamma * dc[positions[~in_span]].sum(axis=0)
            dx[u_start:u_end] += dpool / span
        return dx

    # -- decoding -------------------------------------------------------------------

    def decode(
        self,
        prefix_embeddings: np.ndarray,
        max_new_tokens: int,
        temperature: float = 0.0,
        seed: int | None = None,
    ) -> list[int]:
        """Continue from a prefix ending at the assistant marker; stop at EOT.

        Incremental: the user-turn structure is located once on the prefix and
        each step evaluates a single readout, so cost is linear in the output.
        """
        if max_new_tokens < 1:
            raise DecodeBudgetExceeded(max_new_tokens)
        u_start, u_end, asst = self._find_structure(prefix_embeddings)
        pooled = self._pool(prefix_embeddings, u_start, u_end)
        tail = self.embedding_table[self.specials["EOT"]] + self.config.gamma * pooled
        rng = np.random.default_rng(seed) if temperature > 0 else None
        out: list[int] = []
        position = prefix_embeddings.shape[0] - 1  # logits here predict the next token
        for _ in range(max_new_tokens):
            # the readout only ever consults user-turn rows of the prefix (or
            # the fixed tail), so generated embeddings need not be stored
            src = u_start + (position - asst)
            c = prefix_embeddings[src] if src < u_end else tail
            logits = self.config.kappa * self.embedding_table @ c
            if rng is None:
                token = int(np.argmax(logits))
            else:
                z = logits / temperature
                probs = np.exp(z - z.max())
                probs /= probs.sum()
                token = int(rng.choice(self.vocab_size, p=probs))
            if token == self.specials["EOT"]:
                return out
            out.append(token)
            position += 1
        raise DecodeBudgetExceeded(max_new_tokens)
