"""Oracle text rendering: the textual stand-in for an audio input.

Scope ``s`` is the bare transcript. Scopes ``sp`` and ``ssp-body`` wrap the
transcript and paralinguistic attributes in a fixed audio-tag grammar:

    <audio><meta>k1: v1, k2: v2</meta><text>TRANSCRIPT</text></audio>

Attribute order inside ``<meta>`` is always (age, gender, emotion, language)
filtered to the keys present, joined with ", ". The format is byte-exact:
downstream prompts and tests depend on it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .corpus import SpeechRecord
from .errors import MissingAttributes, MissingTranscript

META_ATTRIBUTE_ORDER = ("age", "gender", "emotion", "language")

ORACLE_SCOPES = ("s", "sp", "ssp-body")

_AUDIO_TAG = re.compile(r"\A<audio><meta>(.*?)</meta><text>(.*)</text></audio>\Z", re.DOTALL)


@dataclass(frozen=True)
class OracleText:
    rendered: str
    scope: str

    def __post_init__(self):
        if self.scope not in ORACLE_SCOPES:
            raise ValueError(f"unknown oracle scope {self.scope!r}")


def render_meta(attributes: dict[str, str]) -> str:
    parts = [f"{key}: {attributes[key]}" for key in META_ATTRIBUTE_ORDER if key in attributes]
    return ", ".join(parts)


def render_oracle(record: SpeechRecord, scope: str) -> OracleText:
    """Render the oracle text for one record at the given scope."""
    if scope not in ORACLE_SCOPES:
        raise ValueError(f"unknown oracle scope {scope!r}")
    if not record.transcript:
        raise MissingTranscript(record.id)
    if scope == "s":
        return OracleText(rendered=record.transcript, scope="s")
    if not record.attributes:
        raise MissingAttributes(record.id)
    body = (
        f"<audio><meta>{render_meta(record.attributes)}</meta>"
        f"<text>{record.transcript}</text></audio>"
    )
    return OracleText(rendered=body, scope=scope)


def parse_oracle(rendered: str) -> tuple[str, dict[str, str]]:
    """Invert :func:`render_oracle`: recover (transcript, attributes).

    Text not starting with ``<audio>`` is treated as scope ``s``. Attribute
    values containing ``", "`` or the tag delimiters are outside the grammar;
    records whose values avoid those substrings round-trip exactly.
    """
    if not rendered.startswith("<audio>"):
        return rendered, {}
    match = _AUDIO_TAG.match(rendered)
    if match is None:
        raise ValueError("text does not match the audio-tag grammar")
    meta, transcript = match.group(1), match.group(2)
    attributes: dict[str, str] = {}
    if meta:
        for pair in meta.split(", "):
            if ": " not in pair:
                raise ValueError(f"malformed meta pair {pair!r}")
            key, value = pair.split(": ", 1)
            if key not in META_ATTRIBUTE_ORDER:
                raise ValueError(f"unknown meta key {key!r}")
            if key in attributes:
                raise ValueError(f"duplicate meta key {key!r}")
            attributes[key] = value
    return transcript, attributes
