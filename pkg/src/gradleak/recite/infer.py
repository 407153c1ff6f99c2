"""Querying the merged model for the secret that follows a prefix."""

from __future__ import annotations

from gradleak.errors import ExtractionEmpty
from gradleak.pnotes.vocab import Vocabulary
from gradleak.tinylm.config import BOS, PN_OPEN
from gradleak.tinylm.model import TinyLmParams, generate

QUERY_STYLES = ("prefix", "statement", "pnote")


def build_query(prefix_tokens, name: int, topic: int, vocab: Vocabulary,
                style: str = "prefix") -> list[int]:
    """The prompt handed to the merged model, always led by BOS.

    ``prefix``: the composed prefix alone (it already ends in the topic clause);
    ``statement``: prefix + ``{name} 's {topic} is``;
    ``pnote``: prefix + ``<PN> {name} 's {topic} is``.
    """
    if style not in QUERY_STYLES:
        raise ValueError(f"unknown query style {style!r}")
    query = list(prefix_tokens)
    if query[:1] != [BOS]:
        query.insert(0, BOS)
    tail = [name, vocab.id("'s"), topic, vocab.id("is")]
    if style == "statement":
        query += tail
    elif style == "pnote":
        query += [PN_OPEN] + tail
    return query


def infer_pii(merged: TinyLmParams, prefix_tokens, name: int, topic: int, max_secret_len: int,
              vocab: Vocabulary, style: str = "prefix") -> tuple[int, ...]:
    """Greedy continuation of the query, cut at the first delimiter or non-code token."""
    if max_secret_len <= 0:
        return ()
    query = build_query(prefix_tokens, name, topic, vocab, style)
    room = merged.config.max_seq_len - len(query)
    out = generate(merged, query, min(max_secret_len + 1, max(room, 1)), vocab.delimiters)
    alphabet = vocab.secret_alphabet
    secret = []
    for tok in out:
        if tok not in alphabet or len(secret) == max_secret_len:
            break
        secret.append(tok)
    if not secret:
        raise ExtractionEmpty("the model produced no secret characters")
    return tuple(secret)
