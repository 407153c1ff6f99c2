"""Assigning recovered name/topic/keyword tokens to their source sequences.

Small batches (b < B_c) are paired by fragment residuals against the span
basis; large batches by the merged model's perplexity of a leak statement.
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from gradleak.errors import NoCandidates, SequenceTooLong
from gradleak.fte import CandidateEmbedder, RecoveredTokens, SpanBasis, residuals
from gradleak.tinylm.config import BOS, PN_CLOSE, PN_OPEN
from gradleak.tinylm.model import TinyLmParams, perplexities

DEFAULT_PPL_TEMPLATE = "<PN> {name} 's {topic} is leaked . </PN>"


@dataclass(frozen=True)
class PairingConfig:
    B_c: int = 16
    max_keywords: int = 5
    position_window: tuple[int, int] = (0, 8)  # inclusive start positions
    gap_window: tuple[int, int] = (1, 24)  # inclusive name-to-topic offsets (absolute mode)
    slack: float = 10.0
    ppl_template: str = DEFAULT_PPL_TEMPLATE

    def __post_init__(self):
        if self.B_c < 1:
            raise ValueError("B_c must be >= 1")
        if self.max_keywords < 0:
            raise ValueError("max_keywords must be >= 0")
        lo, hi = self.position_window
        if not 0 <= lo <= hi:
            raise ValueError("position window must satisfy 0 <= lo <= hi")
        if not 1 <= self.gap_window[0] <= self.gap_window[1]:
            raise ValueError("gap window must satisfy 1 <= lo <= hi")
        if self.slack < 1:
            raise ValueError("slack must be >= 1")

    def regime(self, b: int) -> str:
        return "residual" if b < self.B_c else "ppl"

    def to_dict(self) -> dict:
        return {"B_c": self.B_c, "max_keywords": self.max_keywords,
                "position_window": list(self.position_window), "gap_window": list(self.gap_window),
                "slack": self.slack, "ppl_template": self.ppl_template}


@dataclass(frozen=True)
class NameTopicPair:
    name: int
    topic: int
    score: float
    regime: str = "residual"

    def to_dict(self) -> dict:
        return {"name": self.name, "topic": self.topic, "score": self.score, "regime": self.regime}


@dataclass(frozen=True)
class Triplet:
    pair: NameTopicPair
    keywords: tuple[int, ...] = ()
    score: float = 0.0

    def to_dict(self) -> dict:
        return {"name": self.pair.name, "topic": self.pair.topic, "score": self.score,
                "keywords": list(self.keywords)}


@dataclass
class PairingReport:
    regime: str
    pairs: list[NameTopicPair] = field(default_factory=list)
    triplets: list[Triplet] = field(default_factory=list)
    unmatched_topics: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"regime": self.regime, "pairs": [p.to_dict() for p in self.pairs],
                "triplets": [t.to_dict() for t in self.triplets],
                "unmatched_topics": list(self.unmatched_topics)}


# ---------------------------------------------------------------- fragments

def compose_fragment_embedding(tokens, start_pos: int, embedder: CandidateEmbedder,
                               offsets=None) -> np.ndarray:
    """Rows of ``tokens`` placed at ``start_pos + offsets`` (consecutive by default)."""
    tokens = list(tokens)
    offsets = list(range(len(tokens))) if offsets is None else list(offsets)
    if len(offsets) != len(tokens):
        raise ValueError("one offset per token")
    positions = [start_pos + o for o in offsets]
    if tokens and (start_pos < 0 or max(positions) >= embedder.params.config.max_seq_len):
        raise SequenceTooLong(f"fragment at {start_pos} overflows max_seq_len")
    return embedder.rows(tokens, positions)


def fragment_score(basis: SpanBasis, tokens, embedder: CandidateEmbedder, window,
                   offsets=None) -> float:
    """Min over start positions in ``window`` of the mean row residual."""
    if embedder.position_free:
        window = (0, 0)
    n_max = embedder.params.config.max_seq_len
    span = max(offsets) if offsets is not None and len(offsets) else len(tokens) - 1
    best = np.inf
    for s in range(window[0], min(window[1], n_max - 1 - span) + 1):
        rows = compose_fragment_embedding(tokens, s, embedder, offsets)
        best = min(best, float(residuals(basis, rows).mean()))
    return best


class _ResidualTable:
    """Residual of each (token, position) pair, computed once per basis."""

    def __init__(self, basis, embedder, tokens):
        self.embedder = embedder
        self.index = {int(t): i for i, t in enumerate(tokens)}
        n = 1 if embedder.position_free else embedder.params.config.max_seq_len
        toks = np.asarray(list(self.index), dtype=np.int64)
        self.table = np.zeros((len(toks), n))
        for pos in range(n):
            if toks.size:
                self.table[:, pos] = residuals(basis, embedder.rows(toks, np.full(toks.size, pos)))

    def at(self, token, pos):
        return self.table[self.index[token], 0 if self.embedder.position_free else pos]

    def best(self, token):
        return float(self.table[self.index[token]].min())


def _score_key(score, zeta):
    # residuals below the threshold are all "in span"; their order is noise
    return 0.0 if score < zeta else score


def greedy_assign(scores: dict, zeta: float = 0.0) -> list[tuple[int, int, float]]:
    """Duplicate-free greedy matching by ascending score.

    Among equal scores the pair whose name and topic have the fewest equally
    good alternatives goes first, then the lower ids.
    """
    q = {k: _score_key(s, zeta) for k, s in scores.items()}

    def alternatives(key):
        n, t = key
        return sum(1 for (n2, t2), v in q.items() if (n2 == n) != (t2 == t) and v <= q[key])

    order = sorted(scores, key=lambda k: (q[k], alternatives(k), k))
    used_n, used_t, out = set(), set(), []
    for n, t in order:
        if n in used_n or t in used_t:
            continue
        used_n.add(n)
        used_t.add(t)
        out.append((n, t, scores[(n, t)]))
    return out


def exhaustive_assign(scores: dict) -> list[tuple[int, int, float]]:
    """Minimum-total-score assignment of size min(n_n, n_p) by enumeration."""
    names = sorted({n for n, _ in scores})
    topics = sorted({t for _, t in scores})
    k = min(len(names), len(topics))
    best, best_total = None, np.inf
    for ns in itertools.permutations(names, k):
        for ts in itertools.combinations(topics, k):
            total = sum(scores[(n, t)] for n, t in zip(ns, ts))
            if total < best_total:
                best_total, best = total, [(n, t, scores[(n, t)]) for n, t in zip(ns, ts)]
    return sorted(best or [])


# ---------------------------------------------------------------- residual regime

def pair_scores_residual(basis: SpanBasis, names, topics, config: PairingConfig,
                         embedder: CandidateEmbedder) -> dict:
    """Score of every (name, topic): min over placements of the fragment's mean residual.

    The name sits at a start position from ``position_window`` and the topic
    follows after a gap from ``gap_window``.  Without positional information
    (rotary) the placement does not matter.
    """
    table = _ResidualTable(basis, embedder, list(names) + list(topics))
    n_max = embedder.params.config.max_seq_len
    scores = {}
    for n in names:
        for t in topics:
            if embedder.position_free:
                scores[(n, t)] = 0.5 * (table.at(n, 0) + table.at(t, 0))
                continue
            best = np.inf
            for s in range(config.position_window[0], min(config.position_window[1], n_max - 2) + 1):
                for g in range(config.gap_window[0], config.gap_window[1] + 1):
                    if s + g >= n_max:
                        break
                    best = min(best, 0.5 * (table.at(n, s) + table.at(t, s + g)))
            scores[(n, t)] = float(best)
    return scores


def pair_small_batch(basis: SpanBasis, recovered: RecoveredTokens, config: PairingConfig,
                     embedder: CandidateEmbedder) -> list[NameTopicPair]:
    names, topics = recovered.ids("names"), recovered.ids("topics")
    if not names or not topics:
        raise NoCandidates("need at least one recovered name and one topic")
    scores = pair_scores_residual(basis, names, topics, config, embedder)
    return [NameTopicPair(n, t, s, "residual") for n, t, s in greedy_assign(scores, recovered.zeta)]


def extend_with_keywords(pairs, recovered_keywords, basis: SpanBasis, config: PairingConfig,
                         embedder: CandidateEmbedder, zeta: float = 0.0) -> list[Triplet]:
    """Grow each pair into a triplet one keyword at a time.

    The fragment score is the mean best-position residual of its tokens.  The
    keyword giving the lowest new score is appended; growth stops at
    ``max_keywords`` or when the best new score exceeds ``slack`` times the
    current one (floored at ``zeta``).
    """
    keywords = sorted({int(k) for k in recovered_keywords})
    out = []
    tokens_needed = {p.name for p in pairs} | {p.topic for p in pairs} | set(keywords)
    table = _ResidualTable(basis, embedder, sorted(tokens_needed)) if tokens_needed else None
    for pair in pairs:
        chosen: list[int] = []
        total = table.best(pair.name) + table.best(pair.topic)
        current = total / 2
        while len(chosen) < config.max_keywords:
            options = [k for k in keywords if k not in chosen]
            if not options:
                break
            cand = [((total + table.best(k)) / (len(chosen) + 3), k) for k in options]
            new, k = min(cand, key=lambda x: (_score_key(x[0], zeta), x[1]))
            if new > config.slack * max(current, zeta):
                break
            chosen.append(k)
            total += table.best(k)
            current = new
        out.append(Triplet(pair, tuple(chosen), float(current)))
    return out


# ---------------------------------------------------------------- perplexity regime

def render_template(template: str, vocab, name: int, topic: int) -> list[int]:
    out = []
    for word in template.split():
        if word == "{name}":
            out.append(name)
        elif word == "{topic}":
            out.append(topic)
        elif word == "<PN>":
            out.append(PN_OPEN)
        elif word == "</PN>":
            out.append(PN_CLOSE)
        else:
            out.append(vocab.id(word))
    return out


def pair_scores_ppl(merged: TinyLmParams, names, topics, config: PairingConfig, vocab) -> dict:
    keys = [(n, t) for n in names for t in topics]
    if not keys:
        return {}
    seqs = [[BOS] + render_template(config.ppl_template, vocab, n, t) for n, t in keys]
    ppl = perplexities(merged, seqs)
    return {k: float(p) for k, p in zip(keys, ppl)}


def pair_large_batch_ppl(merged: TinyLmParams, recovered: RecoveredTokens, config: PairingConfig,
                         vocab) -> list[NameTopicPair]:
    names, topics = recovered.ids("names"), recovered.ids("topics")
    if not names or not topics:
        raise NoCandidates("need at least one recovered name and one topic")
    scores = pair_scores_ppl(merged, names, topics, config, vocab)
    return [NameTopicPair(n, t, s, "ppl") for n, t, s in greedy_assign(scores)]


def select_keywords_for_topic(topic: int, recovered_keywords, cooccurrence: dict,
                              k: int = 5) -> list[int]:
    """Recovered keywords ranked by cooccurrence with ``topic``; zero counts dropped."""
    row = cooccurrence.get(topic)
    if not row:
        return []
    ranked = sorted((kw for kw in set(recovered_keywords) if row.get(kw, 0) > 0),
                    key=lambda kw: (-row[kw], kw))
    return ranked[:k]


def build_cooccurrence(pairs_of_topic_and_keywords) -> dict[int, Counter]:
    """Table from (topic, keywords) tuples, e.g. the attacker's own samples."""
    table: dict[int, Counter] = {}
    for topic, kws in pairs_of_topic_and_keywords:
        table.setdefault(topic, Counter()).update(set(kws))
    return table


def pair_tokens(recovered: RecoveredTokens, b: int, config: PairingConfig, basis: SpanBasis,
                embedder: CandidateEmbedder, merged: TinyLmParams | None = None, vocab=None,
                cooccurrence: dict | None = None) -> PairingReport:
    """Dispatch on batch size: residual pairing below B_c, perplexity at or above."""
    regime = config.regime(b)
    report = PairingReport(regime)
    if regime == "residual":
        report.pairs = pair_small_batch(basis, recovered, config, embedder)
        report.triplets = extend_with_keywords(report.pairs, recovered.ids("keywords"), basis,
                                               config, embedder, recovered.zeta)
    else:
        if merged is None or vocab is None:
            raise ValueError("perplexity pairing needs the merged model and vocabulary")
        report.pairs = pair_large_batch_ppl(merged, recovered, config, vocab)
        kws = recovered.ids("keywords")
        report.triplets = [Triplet(p, tuple(select_keywords_for_topic(
            p.topic, kws, cooccurrence or {}, config.max_keywords)), p.score) for p in report.pairs]
    paired = {p.topic for p in report.pairs}
    report.unmatched_topics = [t for t in recovered.ids("topics") if t not in paired]
    return report
