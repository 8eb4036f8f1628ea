"""Deterministic synthetic speech world.

Stands in for real corpora during verification: every record's transcript,
attributes, and encoder features are pure functions of the world seed and the
record index. Semantic features carry only symbol content (one embedding
column per symbol, repeated ``frames_per_symbol`` times); paralinguistic
features carry only the record's attribute offsets, broadcast over all
frames. Keeping the two channels disjoint makes collapse diagnostics sharp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import FeatureMatrix, SpeechRecord
from .errors import FeatureUnavailable, InvalidSpec

FRAME_RATE_HZ = 25.0

# rng namespaces so content, attributes, and per-branch noise never share a stream
_NS_PARAMS, _NS_CONTENT, _NS_SEM_NOISE, _NS_PAR_NOISE, _NS_ATTRS = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class SyntheticWorldSpec:
    seed: int
    vocab: tuple[str, ...] = tuple("abcdefghijklmnop")
    transcript_len_range: tuple[int, int] = (3, 8)
    attribute_vocab: dict[str, tuple[str, ...]] = field(
        default_factory=lambda: {
            "gender": ("female", "male"),
            "emotion": ("angry", "happy", "neutral", "sad"),
        }
    )
    frames_per_symbol: int = 4
    d_enc: int = 48
    noise_sigma: float = 0.02

    def __post_init__(self):
        if not self.vocab:
            raise InvalidSpec("vocab must be nonempty")
        if any(len(sym) != 1 for sym in self.vocab):
            raise InvalidSpec("vocab symbols must be single characters")
        if len(set(self.vocab)) != len(self.vocab):
            raise InvalidSpec("vocab symbols must be distinct")
        lo, hi = self.transcript_len_range
        if lo < 1 or hi < lo:
            raise InvalidSpec("transcript_len_range must satisfy 1 <= min <= max")
        if self.frames_per_symbol < 1:
            raise InvalidSpec("frames_per_symbol must be >= 1")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be nonnegative")
        for name, values in self.attribute_vocab.items():
            if not values:
                raise InvalidSpec(f"attribute {name!r} has no values")
            if len(set(values)) != len(values):
                raise InvalidSpec(f"attribute {name!r} has duplicate values")
        n_vectors = len(self.vocab) + sum(len(v) for v in self.attribute_vocab.values())
        if self.d_enc < n_vectors:
            raise InvalidSpec(
                f"d_enc={self.d_enc} too small for {n_vectors} independent "
                "symbol/attribute vectors"
            )

    @staticmethod
    def from_dict(obj: dict) -> "SyntheticWorldSpec":
        kwargs = dict(obj)
        if "vocab" in kwargs:
            kwargs["vocab"] = tuple(kwargs["vocab"])
        if "transcript_len_range" in kwargs:
            kwargs["transcript_len_range"] = tuple(kwargs["transcript_len_range"])
        if "attribute_vocab" in kwargs:
            kwargs["attribute_vocab"] = {
                k: tuple(v) for k, v in kwargs["attribute_vocab"].items()
            }
        return SyntheticWorldSpec(**kwargs)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "vocab": list(self.vocab),
            "transcript_len_range": list(self.transcript_len_range),
            "attribute_vocab": {k: list(v) for k, v in self.attribute_vocab.items()},
            "frames_per_symbol": self.frames_per_symbol,
            "d_enc": self.d_enc,
            "noise_sigma": self.noise_sigma,
        }


class SyntheticWorld:
    """Frozen synthetic encoder pair plus the corpus generator.

    Registers under the ``synthetic`` feature-ref scheme. Symbol embedding
    columns and attribute offset vectors are drawn once from the seed and
    checked for joint linear independence, so distinct transcripts map to
    distinct zero-noise feature blocks.
    """

    def __init__(self, spec: SyntheticWorldSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, _NS_PARAMS])
        v = len(spec.vocab)
        self.symbol_embeddings = rng.normal(size=(spec.d_enc, v))
        self.attribute_offsets: dict[tuple[str, str], np.ndarray] = {}
        for name in sorted(spec.attribute_vocab):
            for value in spec.attribute_vocab[name]:
                self.attribute_offsets[(name, value)] = rng.normal(size=spec.d_enc)
        stacked = np.column_stack(
            [self.symbol_embeddings] + [vec for _, vec in sorted(self.attribute_offsets.items())]
        )
        if np.linalg.matrix_rank(stacked) != stacked.shape[1]:
            raise InvalidSpec("symbol embeddings and attribute offsets are linearly dependent")
        self._symbol_index = {sym: i for i, sym in enumerate(spec.vocab)}

    # -- corpus generation --------------------------------------------------

    def make_record(self, index: int) -> SpeechRecord:
        spec = self.spec
        rng = np.random.default_rng([spec.seed, _NS_CONTENT, index])
        lo, hi = spec.transcript_len_range
        length = int(rng.integers(lo, hi + 1))
        symbols = rng.integers(0, len(spec.vocab), size=length)
        transcript = "".join(spec.vocab[i] for i in symbols)
        # attribute values cycle through a per-block shuffle, one stream per
        # attribute: marginals stay exactly balanced (probe chance levels are
        # then meaningful) while each record remains a function of its index
        attributes = {}
        for a, name in enumerate(sorted(spec.attribute_vocab)):
            values = spec.attribute_vocab[name]
            block, pos = divmod(index, len(values))
            perm = np.random.default_rng([spec.seed, _NS_ATTRS, block, a]).permutation(len(values))
            attributes[name] = values[int(perm[pos])]
        num_frames = length * spec.frames_per_symbol
        return SpeechRecord(
            id=f"syn-{index:06d}",
            transcript=transcript,
            attributes=attributes,
            source="synthetic",
            duration_s=num_frames / FRAME_RATE_HZ,
            feature_ref=f"synthetic:{index}",
        )

    def make_corpus(self, n: int) -> list[SpeechRecord]:
        if n < 1:
            raise InvalidSpec(f"corpus size must be >= 1, got {n}")
        return [self.make_record(i) for i in range(n)]

    # -- encoder ------------------------------------------------------------

    def encode(self, record: SpeechRecord, branch: str) -> FeatureMatrix:
        ref = record.feature_ref or ""
        try:
            index = int(ref.split(":", 1)[1])
        except (IndexError, ValueError):
            raise FeatureUnavailable(record.id, branch) from None
        spec = self.spec
        if not record.transcript:
            raise FeatureUnavailable(record.id, branch)
        try:
            symbols = [self._symbol_index[ch] for ch in record.transcript]
        except KeyError:
            raise FeatureUnavailable(record.id, branch) from None
        num_frames = len(symbols) * spec.frames_per_symbol
        if branch == "semantic":
            base = np.repeat(self.symbol_embeddings[:, symbols].T, spec.frames_per_symbol, axis=0)
            noise_rng = np.random.default_rng([spec.seed, _NS_SEM_NOISE, index])
        elif branch == "paralinguistic":
            offset = np.zeros(spec.d_enc)
            for name, value in record.attributes.items():
                vec = self.attribute_offsets.get((name, value))
                if vec is None:
                    raise FeatureUnavailable(record.id, branch)
                offset += vec
            base = np.tile(offset, (num_frames, 1))
            noise_rng = np.random.default_rng([spec.seed, _NS_PAR_NOISE, index])
        else:
            raise FeatureUnavailable(record.id, branch)
        data = base + spec.noise_sigma * noise_rng.normal(size=base.shape)
        return FeatureMatrix(data=data, frame_rate_hz=FRAME_RATE_HZ, branch=branch)

    # -- frozen-state fingerprint -------------------------------------------

    def state_bytes(self) -> bytes:
        """Raw bytes of every encoder parameter, for freeze verification."""
        parts = [np.ascontiguousarray(self.symbol_embeddings).tobytes()]
        for key in sorted(self.attribute_offsets):
            parts.append(np.ascontiguousarray(self.attribute_offsets[key]).tobytes())
        return b"".join(parts)


def make_synthetic_corpus(spec: SyntheticWorldSpec, n: int) -> list[SpeechRecord]:
    """Generate ``n`` records; convenience wrapper over :class:`SyntheticWorld`."""
    return SyntheticWorld(spec).make_corpus(n)
