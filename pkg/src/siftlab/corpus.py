"""Speech-text records, JSONL corpus IO, and encoder feature access.

A corpus is a list of :class:`SpeechRecord`. Encoder features are resolved
through a :class:`FeatureStore` that dispatches on the record's
``feature_ref`` scheme, so synthetic worlds and on-disk feature files share
one interface.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DuplicateId, FeatureUnavailable, MalformedRecord

ATTRIBUTE_VOCABULARY = ("gender", "age", "emotion", "language")
BRANCHES = ("semantic", "paralinguistic")

# jsonl_v1 wire schema, one record per line
_REQUIRED_KEYS = {"id", "transcript", "attributes", "source", "duration_s", "feature_ref"}
_OPTIONAL_KEYS = {"transcript_generated"}


@dataclass(frozen=True)
class SpeechRecord:
    """One utterance: transcript, paralinguistic attributes, feature handle."""

    id: str
    transcript: str
    attributes: dict[str, str] = field(default_factory=dict)
    source: str = ""
    duration_s: float = 0.0
    feature_ref: str | None = None
    transcript_generated: bool = True

    def __post_init__(self):
        for key, value in self.attributes.items():
            if key not in ATTRIBUTE_VOCABULARY:
                raise ValueError(f"unknown attribute {key!r} on record {self.id!r}")
            if not isinstance(value, str) or not value:
                raise ValueError(f"empty value for attribute {key!r} on record {self.id!r}")
        if self.duration_s < 0:
            raise ValueError(f"negative duration on record {self.id!r}")
        if not self.transcript and self.transcript_generated:
            raise ValueError(
                f"record {self.id!r} has an empty transcript but is not flagged "
                "transcript_generated=false"
            )


@dataclass(frozen=True)
class FeatureMatrix:
    """Encoder output for one record and branch: [T x d_enc] at a fixed rate."""

    data: np.ndarray
    frame_rate_hz: float
    branch: str

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError("feature matrix must be [T x d_enc] with T >= 1")
        if self.frame_rate_hz <= 0:
            raise ValueError("frame rate must be positive")
        if self.branch not in BRANCHES:
            raise ValueError(f"unknown branch {self.branch!r}")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def d_enc(self) -> int:
        return self.data.shape[1]


def _parse_record(obj: dict, line_no: int) -> SpeechRecord:
    if not isinstance(obj, dict):
        raise MalformedRecord(line_no, "record is not a JSON object")
    missing = _REQUIRED_KEYS - obj.keys()
    if missing:
        raise MalformedRecord(line_no, f"missing field(s): {', '.join(sorted(missing))}")
    unknown = obj.keys() - _REQUIRED_KEYS - _OPTIONAL_KEYS
    if unknown:
        raise MalformedRecord(line_no, f"unknown field(s): {', '.join(sorted(unknown))}")
    if not isinstance(obj["id"], str) or not obj["id"]:
        raise MalformedRecord(line_no, "id must be a nonempty string")
    if not isinstance(obj["transcript"], str):
        raise MalformedRecord(line_no, "transcript must be a string")
    if not isinstance(obj["attributes"], dict):
        raise MalformedRecord(line_no, "attributes must be an object")
    if obj["feature_ref"] is not None and not isinstance(obj["feature_ref"], str):
        raise MalformedRecord(line_no, "feature_ref must be a string or null")
    try:
        return SpeechRecord(
            id=obj["id"],
            transcript=obj["transcript"],
            attributes=dict(obj["attributes"]),
            source=str(obj["source"]),
            duration_s=float(obj["duration_s"]),
            feature_ref=obj["feature_ref"],
            transcript_generated=bool(obj.get("transcript_generated", True)),
        )
    except (TypeError, ValueError) as exc:
        raise MalformedRecord(line_no, str(exc)) from exc


def load_corpus(path: str | Path, schema: str = "jsonl_v1") -> list[SpeechRecord]:
    """Read a JSONL corpus, preserving file order and rejecting duplicate ids."""
    if schema != "jsonl_v1":
        raise ValueError(f"unsupported corpus schema {schema!r}")
    records: list[SpeechRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, f"invalid JSON: {exc}") from exc
            record = _parse_record(obj, line_no)
            if record.id in seen:
                raise DuplicateId(record.id)
            seen.add(record.id)
            records.append(record)
    return records


def save_corpus(records: list[SpeechRecord], path: str | Path) -> None:
    """Write records as jsonl_v1 (UTF-8, LF, one object per line)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            obj = {
                "id": record.id,
                "transcript": record.transcript,
                "attributes": record.attributes,
                "source": record.source,
                "duration_s": record.duration_s,
                "feature_ref": record.feature_ref,
            }
            if not record.transcript_generated:
                obj["transcript_generated"] = False
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


class FeatureStore:
    """Resolves ``feature_ref`` values to feature matrices.

    Encoders register under a URI-style scheme (the part before ``:``).
    The built-in ``npz`` scheme reads matrices saved by :func:`save_features`;
    synthetic worlds register their own scheme.
    """

    def __init__(self):
        self._encoders: dict[str, object] = {}

    def register(self, scheme: str, encoder) -> None:
        self._encoders[scheme] = encoder

    def encode(self, record: SpeechRecord, branch: str) -> FeatureMatrix:
        if branch not in BRANCHES:
            raise ValueError(f"unknown branch {branch!r}")
        ref = record.feature_ref
        if not ref or ":" not in ref:
            raise FeatureUnavailable(record.id, branch)
        scheme = ref.split(":", 1)[0]
        encoder = self._encoders.get(scheme)
        if encoder is None:
            raise FeatureUnavailable(record.id, branch)
        return encoder.encode(record, branch)


class NpzFeatureEncoder:
    """Reads features from ``npz:<path>#<key>`` refs.

    The archive stores one ``{key}/{branch}`` float array per record branch
    plus a scalar ``frame_rate_hz``.
    """

    def __init__(self, base_dir: str | Path = "."):
        self.base_dir = Path(base_dir)
        self._cache: dict[Path, np.lib.npyio.NpzFile] = {}

    def _open(self, path: Path):
        if path not in self._cache:
            self._cache[path] = np.load(path)
        return self._cache[path]

    def encode(self, record: SpeechRecord, branch: str) -> FeatureMatrix:
        ref = record.feature_ref or ""
        body = ref.split(":", 1)[1]
        if "#" not in body:
            raise FeatureUnavailable(record.id, branch)
        rel_path, key = body.split("#", 1)
        path = self.base_dir / rel_path
        if not path.exists():
            raise FeatureUnavailable(record.id, branch)
        archive = self._open(path)
        name = f"{key}/{branch}"
        if name not in archive.files:
            raise FeatureUnavailable(record.id, branch)
        rate = float(archive["frame_rate_hz"]) if "frame_rate_hz" in archive.files else 25.0
        return FeatureMatrix(data=np.asarray(archive[name], dtype=np.float64), frame_rate_hz=rate, branch=branch)


def save_features(
    features: dict[str, dict[str, np.ndarray]], path: str | Path, frame_rate_hz: float
) -> None:
    """Write a feature archive readable by :class:`NpzFeatureEncoder`.

    Entries are written in sorted order with a fixed zip timestamp, so the
    same features always produce the same bytes (np.savez stamps wall-clock
    time into the archive, which would break rerun-identical outputs).
    """
    arrays: dict[str, np.ndarray] = {"frame_rate_hz": np.asarray(np.float64(frame_rate_hz))}
    for key, branches in features.items():
        for branch, matrix in branches.items():
            arrays[f"{key}/{branch}"] = np.asarray(matrix, dtype=np.float64)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as archive:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arrays[name])
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            archive.writestr(info, buf.getvalue())
