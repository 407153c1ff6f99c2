"""JSON Lines persistence, filter sets and keyword cooccurrence counts.

One object per line::

    {"kind": "pnote_appended", "tokens": [...], "name": [...], "topic": [...],
     "secret": [...], "sample_id": "app00012", "keywords": [...], "prefix_len": 17}

``keywords`` and ``prefix_len`` are optional extras; readers that only know
the core fields can ignore them.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field

from gradleak.errors import ParseError
from gradleak.pnotes.generate import Record
from gradleak.pnotes.vocab import Vocabulary, _read_lines, default_data_path

log = logging.getLogger(__name__)

KINDS = ("filler", "pnote_appended", "pnote_summary", "private_test", "private_raw")
_INT_FIELDS = ("tokens", "name", "topic", "secret")


def record_to_dict(rec: Record) -> dict:
    d = {"kind": rec.kind, "tokens": list(rec.tokens), "name": list(rec.name),
         "topic": list(rec.topic), "secret": list(rec.secret), "sample_id": rec.sample_id}
    if rec.keywords:
        d["keywords"] = list(rec.keywords)
    if rec.prefix_len is not None:
        d["prefix_len"] = rec.prefix_len
    return d


def _int_list(obj, key, line):
    value = obj.get(key, [])
    if not isinstance(value, list) or not all(isinstance(x, int) and not isinstance(x, bool)
                                              for x in value):
        raise ParseError(f"field {key!r} must be an integer array", line=line)
    return tuple(value)


def record_from_dict(obj, line: int | None = None) -> Record:
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", line=line)
    kind = obj.get("kind")
    if kind not in KINDS:
        raise ParseError(f"unknown kind {kind!r}", line=line)
    if "tokens" not in obj or not isinstance(obj.get("sample_id"), str):
        raise ParseError("missing tokens or sample_id", line=line)
    fields = {k: _int_list(obj, k, line) for k in _INT_FIELDS}
    prefix_len = obj.get("prefix_len")
    if prefix_len is not None and not isinstance(prefix_len, int):
        raise ParseError("prefix_len must be an integer", line=line)
    return Record(kind, fields["tokens"], obj["sample_id"], fields["name"], fields["topic"],
                  fields["secret"], _int_list(obj, "keywords", line), prefix_len)


def dumps_dataset(records) -> str:
    return "".join(json.dumps(record_to_dict(r), sort_keys=True) + "\n" for r in records)


def save_dataset(path, records) -> None:
    """Atomic write of one JSON object per line."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(dumps_dataset(records))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path) -> list[Record]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from exc
            records.append(record_from_dict(obj, lineno))
    return records


@dataclass(frozen=True)
class FilterSet:
    """Restricted candidate ids for token extraction, one set per category."""

    names: frozenset
    topics: frozenset
    keywords: frozenset
    skipped: int = field(default=0, compare=False)

    def __post_init__(self):
        if (self.names & self.topics) or (self.names & self.keywords) or (self.topics & self.keywords):
            raise ValueError("filter categories must be disjoint")

    @classmethod
    def from_ids(cls, names, topics, keywords) -> "FilterSet":
        return cls(frozenset(int(i) for i in names), frozenset(int(i) for i in topics),
                   frozenset(int(i) for i in keywords))

    @classmethod
    def load(cls, vocab: Vocabulary, names_path=None, topics_path=None,
             keywords_path=None) -> "FilterSet":
        """Resolve three word lists to ids; words outside the vocabulary are skipped."""
        out = []
        skipped = 0
        for path, default in ((names_path, "names.txt"), (topics_path, "topics.txt"),
                              (keywords_path, "keywords.txt")):
            ids = []
            for word in _read_lines(path or default_data_path(default)):
                if word in vocab.index:
                    ids.append(vocab.index[word])
                else:
                    skipped += 1
            out.append(ids)
        if skipped:
            log.warning("filter set: skipped %d words not in the vocabulary", skipped)
        names, topics, keywords = (frozenset(ids) for ids in out)
        return cls(names, topics, keywords, skipped)

    def all_ids(self) -> frozenset:
        return self.names | self.topics | self.keywords

    def category(self, token: int) -> str | None:
        for label in ("names", "topics", "keywords"):
            if token in getattr(self, label):
                return label
        return None

    def check(self, vocab_size: int) -> None:
        bad = [i for i in self.all_ids() if not 0 <= i < vocab_size]
        if bad:
            raise ValueError(f"filter ids outside the vocabulary: {sorted(bad)[:5]}")


def cooccurrence(records, filter_set: FilterSet) -> dict[int, Counter]:
    """topic id -> Counter of keyword ids appearing in the same private sample.

    Summary records mix several fragments, so only records with a single topic
    contribute.
    """
    table: dict[int, Counter] = {}
    for rec in records:
        topics = [t for t in rec.topic if t in filter_set.topics]
        if len(topics) != 1:
            continue
        row = table.setdefault(topics[0], Counter())
        for tok in set(rec.tokens):
            if tok in filter_set.keywords:
                row[tok] += 1
    return table
