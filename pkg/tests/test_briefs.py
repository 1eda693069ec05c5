from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from deckgym.briefs import (
    BriefTargets,
    BriefValidationError,
    SlideBrief,
    builtin_catalog,
    ensure_valid,
    load_catalog,
    validate_brief,
)

from conftest import SERIES_B


def test_builtin_catalog_has_48_valid_briefs():
    cat = builtin_catalog()
    assert len(cat) == 48
    assert cat.ids() == sorted(cat.ids())
    assert len(set(cat.ids())) == 48
    assert not cat.errors
    for b in cat:
        assert validate_brief(b).ok
        assert 6 <= b.num_slides <= 10
        assert 0.3 <= b.confidence <= 1.0


def test_example_brief_validates(series_b):
    assert series_b.num_slides == 10 and series_b.confidence == 1.0
    assert validate_brief(series_b).ok
    assert series_b.targets == BriefTargets(3, 60, 35)


@pytest.mark.parametrize(
    "field,value,message",
    [("num_slides", 0, "num_slides out of range"), ("confidence", 1.5, "confidence out of range"),
     ("topic", "   ", "topic is empty")],
)
def test_validation_violations(field, value, message):
    doc = dict(SERIES_B, **{field: value})
    report = validate_brief(SlideBrief.from_dict(doc, default_id="x"))
    assert not report.ok
    assert message in report.violations
    with pytest.raises(BriefValidationError):
        ensure_valid(SlideBrief.from_dict(doc, default_id="x"))


def test_empty_directory(tmp_path):
    cat = load_catalog(tmp_path)
    assert len(cat) == 0 and not cat.errors


def test_missing_path(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_catalog(tmp_path / "nope")


def test_duplicate_ids_name_both_sources(tmp_path):
    for name in ("a", "b"):
        (tmp_path / f"{name}.json").write_text(json.dumps(dict(SERIES_B, id="q4")))
    with pytest.raises(BriefValidationError) as exc:
        load_catalog(tmp_path)
    assert "a.json" in str(exc.value) and "b.json" in str(exc.value)


def test_unparseable_entries_are_reported(tmp_path):
    (tmp_path / "good.json").write_text(json.dumps(SERIES_B))
    (tmp_path / "bad.json").write_text("{not json")
    (tmp_path / "invalid.json").write_text(json.dumps(dict(SERIES_B, num_slides=0)))
    cat = load_catalog(tmp_path)
    assert cat.ids() == ["good"]
    sources = sorted(e.source for e in cat.errors)
    assert [s.split("/")[-1] for s in sources] == ["bad.json", "invalid.json"]


def test_load_is_deterministic(tmp_path):
    for i in range(5):
        (tmp_path / f"b{i}.json").write_text(json.dumps(dict(SERIES_B, topic=f"Topic {i}")))
    assert load_catalog(tmp_path) == load_catalog(tmp_path)


def test_list_file_and_round_trip(tmp_path, series_b):
    p = tmp_path / "many.json"
    p.write_text(json.dumps([series_b.to_dict(), dict(series_b.to_dict(), id="other")]))
    cat = load_catalog(p)
    assert cat.ids() == ["other", "series-b"]
    assert cat.get("series-b") == series_b


briefs = st.builds(
    SlideBrief,
    id=st.just("h"),
    topic=st.text(min_size=0, max_size=12),
    audience=st.just("investors"),
    num_slides=st.integers(-3, 70),
    confidence=st.floats(-0.5, 1.5, allow_nan=False),
    targets=st.builds(BriefTargets, st.integers(-1, 5), st.integers(-1, 100), st.integers(-1, 40)),
)


@given(briefs)
def test_validate_matches_invariants(b):
    expected = (
        1 <= b.num_slides <= 64
        and 0 <= b.confidence <= 1
        and bool(b.topic.strip())
        and b.targets.sections_per_slide >= 1
        and b.targets.words_per_slide >= 1
        and b.targets.max_turns >= 1
    )
    assert validate_brief(b).ok == expected
