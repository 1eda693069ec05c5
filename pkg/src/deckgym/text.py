"""Tokenization shared by every overlap metric.

"Content words" are lowercase Unicode word tokens of length >= 3 that are not
in ``STOPWORDS``.
"""
from __future__ import annotations

import json
import re
from functools import lru_cache
from typing import Any, Iterable, Iterator

STOPWORDS: frozenset[str] = frozenset(
    """
    the and for are but not you all any can had her was one our out has his
    how its may new now who did get let she use with that this from they
    will have been were what when your which their there about would these into
    than them then some could other more also only over such very
    """.split()
)
assert len(STOPWORDS) == 60

_WORD_RE = re.compile(r"\w+", re.UNICODE)
_WS_RE = re.compile(r"\s+")


def words(text: str) -> list[str]:
    """Lowercased Unicode word tokens, underscores split like punctuation."""
    return [w for w in _WORD_RE.findall(text.lower().replace("_", " "))]


@lru_cache(maxsize=16384)
def _content_words(text: str) -> tuple[str, ...]:
    return tuple(w for w in words(text) if len(w) >= 3 and w not in STOPWORDS)


def content_words(text: str) -> list[str]:
    return list(_content_words(text))


def content_set(text: str) -> frozenset[str]:
    return frozenset(_content_words(text))


def ngrams(tokens: list[str] | tuple[str, ...], n: int) -> set[tuple[str, ...]]:
    return {tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)}


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)


def whitespace_tokens(text: str) -> int:
    return len(text.split())


def normalize_ws(text: str) -> str:
    return _WS_RE.sub(" ", text).strip()


def iter_json_objects(text: str) -> Iterator[Any]:
    """Yield every JSON object embedded in free text, left to right.

    Prose and code fences around the objects are skipped.
    """
    decoder = json.JSONDecoder()
    i = text.find("{")
    while i != -1:
        try:
            obj, end = decoder.raw_decode(text, i)
        except json.JSONDecodeError:
            i = text.find("{", i + 1)
            continue
        if isinstance(obj, dict):
            yield obj
            i = text.find("{", end)
        else:
            i = text.find("{", i + 1)


def flatten_content(value: Any) -> str:
    """Flatten nested brief content (maps, lists, scalars) to plain text.

    Keys are kept; ``{"traction": {"arr": "$4.2M"}}`` becomes ``"traction arr $4.2M"``.
    """
    parts: list[str] = []

    def walk(v: Any) -> None:
        if isinstance(v, dict):
            for k, sub in v.items():
                parts.append(str(k).replace("_", " "))
                walk(sub)
        elif isinstance(v, (list, tuple)):
            for sub in v:
                walk(sub)
        elif v is not None:
            parts.append(str(v))

    walk(value)
    return " ".join(parts)
