import json

import numpy as np
import pytest

from siftlab.corpus import (
    FeatureMatrix,
    FeatureStore,
    NpzFeatureEncoder,
    SpeechRecord,
    load_corpus,
    save_corpus,
    save_features,
)
from siftlab.errors import DuplicateId, FeatureUnavailable, MalformedRecord


def _line(**overrides):
    rec = {
        "id": "r1",
        "transcript": "hello there",
        "attributes": {"gender": "female"},
        "source": "unit",
        "duration_s": 1.2,
        "feature_ref": "npz:feat.npz#r1",
    }
    rec.update(overrides)
    return json.dumps(rec)


def test_load_three_records_preserves_order(tmp_path):
    path = tmp_path / "c.jsonl"
    lines = [_line(id=f"r{i}", feature_ref=f"npz:f.npz#r{i}") for i in range(3)]
    path.write_text("\n".join(lines) + "\n")
    records = load_corpus(path)
    assert [r.id for r in records] == ["r0", "r1", "r2"]
    assert records[1].transcript == "hello there"


def test_missing_transcript_rejected_with_line_number(tmp_path):
    path = tmp_path / "c.jsonl"
    rec = json.loads(_line())
    del rec["transcript"]
    path.write_text(_line(id="ok") + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(MalformedRecord) as info:
        load_corpus(path)
    assert info.value.line_no == 2


def test_duplicate_id_rejected(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(_line() + "\n" + _line() + "\n")
    with pytest.raises(DuplicateId):
        load_corpus(path)


def test_unknown_field_rejected(tmp_path):
    path = tmp_path / "c.jsonl"
    rec = json.loads(_line())
    rec["speaker_height"] = 180
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(MalformedRecord):
        load_corpus(path)


def test_unknown_attribute_key_rejected(tmp_path):
    with pytest.raises(ValueError):
        SpeechRecord(
            id="r1",
            transcript="x",
            attributes={"shoe_size": "44"},
            source="unit",
            duration_s=0.1,
            feature_ref=None,
        )
    # through the loader the same defect carries a line number
    path = tmp_path / "c.jsonl"
    path.write_text(_line(attributes={"shoe_size": "44"}) + "\n")
    with pytest.raises(MalformedRecord) as info:
        load_corpus(path)
    assert info.value.line_no == 1


def test_empty_transcript_requires_generated_false():
    with pytest.raises(ValueError):
        SpeechRecord(
            id="r1",
            transcript="",
            attributes={},
            source="unit",
            duration_s=0.1,
            feature_ref=None,
        )
    rec = SpeechRecord(
        id="r1",
        transcript="",
        attributes={},
        source="unit",
        duration_s=0.1,
        feature_ref=None,
        transcript_generated=False,
    )
    assert rec.transcript == ""


def test_save_then_load_round_trip(tmp_path):
    records = [
        SpeechRecord(
            id="a",
            transcript="первый",
            attributes={"emotion": "happy", "age": "child"},
            source="unit",
            duration_s=2.0,
            feature_ref=None,
        ),
        SpeechRecord(
            id="b",
            transcript="",
            attributes={},
            source="unit",
            duration_s=0.5,
            feature_ref="npz:f.npz#b",
            transcript_generated=False,
        ),
    ]
    path = tmp_path / "c.jsonl"
    save_corpus(records, path)
    assert load_corpus(path) == records
    # byte-stable: saving the loaded records reproduces the file exactly
    again = tmp_path / "c2.jsonl"
    save_corpus(load_corpus(path), again)
    assert again.read_bytes() == path.read_bytes()


def test_feature_matrix_rejects_bad_shape():
    with pytest.raises(ValueError):
        FeatureMatrix(data=np.zeros(5), frame_rate_hz=25.0, branch="semantic")
    with pytest.raises(ValueError):
        FeatureMatrix(data=np.zeros((4, 3)), frame_rate_hz=25.0, branch="left")


def test_npz_encoder_round_trip(tmp_path):
    sem = np.random.default_rng(0).normal(size=(8, 6))
    par = np.random.default_rng(1).normal(size=(8, 6))
    path = tmp_path / "feat.npz"
    save_features({"r1": {"semantic": sem, "paralinguistic": par}}, path, frame_rate_hz=25.0)
    store = FeatureStore()
    store.register("npz", NpzFeatureEncoder(tmp_path))
    rec = SpeechRecord(
        id="r1",
        transcript="x",
        attributes={},
        source="unit",
        duration_s=0.2,
        feature_ref="npz:feat.npz#r1",
    )
    got = store.encode(rec, "semantic")
    assert got.frame_rate_hz == 25.0
    np.testing.assert_array_equal(got.data, sem)
    np.testing.assert_array_equal(store.encode(rec, "paralinguistic").data, par)


def test_missing_feature_raises(tmp_path):
    store = FeatureStore()
    store.register("npz", NpzFeatureEncoder(tmp_path))
    rec = SpeechRecord(
        id="r9",
        transcript="x",
        attributes={},
        source="unit",
        duration_s=0.2,
        feature_ref="npz:nope.npz#r9",
    )
    with pytest.raises(FeatureUnavailable):
        store.encode(rec, "semantic")
    rec2 = SpeechRecord(
        id="r9",
        transcript="x",
        attributes={},
        source="unit",
        duration_s=0.2,
        feature_ref="weird:thing",
    )
    with pytest.raises(FeatureUnavailable):
        store.encode(rec2, "semantic")
