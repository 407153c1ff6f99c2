"""Synthetic private samples, PNote construction and the malicious training mix."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from gradleak.errors import CorpusTooSmall, TemplateOverflow
from gradleak.pnotes import vocab as V
from gradleak.pnotes.vocab import Vocabulary, WordLists
from gradleak.tinylm.config import BOS, PN_CLOSE, PN_OPEN

# Prefix templates.  Slots: {name} {topic} {k1} {k2}.  The secret follows the
# last word and a "." terminates the sample.
PREFIX_TEMPLATES = (
    "hi , i'm {name} . i want to ask about the {k1} and the {k2} . my {topic} is",
    "dear support , this is {name} writing about my {k1} . please check the {k2} . my {topic} is",
    "{name} : hey , quick question about the {k1} ? also the {k2} . my {topic} is",
    "form entry . name : {name} . reason : {k1} {k2} . {topic} :",
    "hello team , {name} here . the {k1} is ready and the {k2} is late . for reference my {topic} is",
    "note for {name} about the {k1} . bring the {k2} tomorrow . your {topic} is",
    "receptionist : welcome ! patient : my name is {name} , i came for the {k1} and the {k2} . my {topic} is",
    "subject : {k1} update . hi , {name} here . the {k2} was moved . my {topic} is",
    "{name} booked the {k1} near the {k2} . the {topic} is",
    "support ticket . user {name} reports a problem with the {k1} and {k2} . {topic} on file :",
    "good morning , i am {name} and i lost my {k1} at the {k2} . my {topic} is",
    "reminder : {name} , your {k1} and {k2} are confirmed . keep your {topic} :",
)

FILLER_GRAMMAR = (
    "i {verb} {noun} and {noun} .",
    "{subj} {adv} {verb} {adj} {noun} .",
    "do you {verb} {noun} ? {conn} , i {verb} {noun} .",
    "{conn} , {subj} {verb} {noun} every {time} .",
    "what is your favorite {noun} ? i {verb} {adj} {noun} .",
    "{subj} {verb} {noun} too . {conn} {subj} {adv} {verb} {noun} .",
    "how do you {verb} {noun} ? i {adv} {verb} it .",
    "my {noun} is {adj} but i {verb} {noun} .",
    "i have {num} {noun} and {subj} {verb} {num} .",
    "my {noun} is {num} and my {noun} is {num} .",
)

_FILLER_SLOTS = {
    "subj": V.FILLER_SUBJECTS, "verb": V.FILLER_VERBS, "noun": V.FILLER_NOUNS,
    "adj": V.FILLER_ADJECTIVES, "adv": V.FILLER_ADVERBS, "conn": V.FILLER_CONNECTORS,
    "time": ("day", "week", "night", "weekend"),
}


@dataclass(frozen=True)
class PrivateSample:
    """Prefix-secret concatenation ``tokens = prefix + secret + ['.']``.

    Generated prefixes start with BOS: the query at position 0 attends to
    itself only, so a token there never reaches the query gradient.
    """

    sample_id: str
    name: tuple[int, ...]
    topic: tuple[int, ...]
    secret: tuple[int, ...]
    keywords: tuple[int, ...]
    prefix: tuple[int, ...]
    template: int = 0

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.prefix + self.secret + (V.DOT_ID,)


@dataclass(frozen=True)
class PNoteAppendedSample:
    base: PrivateSample
    pnote: tuple[int, ...]

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.base.tokens + self.pnote


@dataclass(frozen=True)
class PNoteSummarySample:
    parts: tuple  # PNoteAppendedSample | filler token tuple, in sequence order
    summary_pnotes: tuple[tuple[int, ...], ...]
    sample_id: str = ""

    @property
    def privates(self) -> list[PrivateSample]:
        return [p.base for p in self.parts if isinstance(p, PNoteAppendedSample)]

    @property
    def tokens(self) -> tuple[int, ...]:
        out = (BOS,)
        for p in self.parts:
            part = p.tokens if isinstance(p, PNoteAppendedSample) else tuple(p)
            out += part[1:] if part[:1] == (BOS,) else part
        for s in self.summary_pnotes:
            out += s
        return out


@dataclass
class SampleFactory:
    """Generates private samples over a vocabulary; tracks secret uniqueness."""

    vocab: Vocabulary
    words: WordLists
    max_seq_len: int = 128
    secret_len: tuple[int, int] = (6, 10)
    alphanumeric_rate: float = 0.0
    related_keyword_rate: float = 0.7
    templates: tuple[str, ...] = PREFIX_TEMPLATES
    used_secrets: set = field(default_factory=set)
    counter: int = 0

    def __post_init__(self):
        self.name_ids = self.vocab.ids(self.words.names)
        self.topic_ids = self.vocab.ids(self.words.topics)
        self.keyword_ids = self.vocab.ids(self.words.keywords)
        self.related = {self.vocab.id(t): self.vocab.ids(kws)
                        for t, kws in self.words.topic_keywords.items() if t in self.vocab.index}
        self.digit_ids = self.vocab.ids(V.DIGITS)
        self.code_ids = self.vocab.ids(V.DIGITS + V.LETTERS)

    def _keyword(self, rng, topic):
        pool = self.related.get(topic)
        if pool and rng.random() < self.related_keyword_rate:
            return pool[rng.integers(len(pool))]
        return self.keyword_ids[rng.integers(len(self.keyword_ids))]

    def _secret(self, rng):
        for _ in range(1000):
            n = int(rng.integers(self.secret_len[0], self.secret_len[1] + 1))
            alphabet = self.code_ids if rng.random() < self.alphanumeric_rate else self.digit_ids
            secret = tuple(int(alphabet[i]) for i in rng.integers(len(alphabet), size=n))
            if secret not in self.used_secrets:
                self.used_secrets.add(secret)
                return secret
        raise RuntimeError("could not draw a fresh secret")

    def private_sample(self, rng: np.random.Generator, prefix_id: str = "p") -> PrivateSample:
        name = self.name_ids[rng.integers(len(self.name_ids))]
        topic = self.topic_ids[rng.integers(len(self.topic_ids))]
        k1 = self._keyword(rng, topic)
        k2 = self._keyword(rng, topic)
        while k2 == k1:
            k2 = self._keyword(rng, topic)
        t_idx = int(rng.integers(len(self.templates)))
        prefix = [BOS]
        for word in self.templates[t_idx].split():
            slot = {"{name}": name, "{topic}": topic, "{k1}": k1, "{k2}": k2}.get(word)
            prefix.append(slot if slot is not None else self.vocab.id(word))
        secret = self._secret(rng)
        if len(prefix) + len(secret) + 1 > self.max_seq_len:
            self.used_secrets.discard(secret)
            raise TemplateOverflow(f"template {t_idx} does not fit max_seq_len {self.max_seq_len}")
        sid = f"{prefix_id}{self.counter:05d}"
        self.counter += 1
        return PrivateSample(sid, (name,), (topic,), secret, (k1, k2), tuple(prefix), t_idx)

    def filler(self, rng: np.random.Generator, sentences: int | None = None) -> tuple[int, ...]:
        if sentences is None:
            sentences = int(rng.integers(1, 3))
        out = [BOS]
        for _ in range(sentences):
            pattern = FILLER_GRAMMAR[rng.integers(len(FILLER_GRAMMAR))]
            for word in pattern.split():
                if word == "{num}":
                    # plain numbers, so digits are not unique to secrets
                    out.extend(self.digit_ids[i] for i in rng.integers(10, size=int(rng.integers(1, 5))))
                    continue
                if word.startswith("{"):
                    choices = _FILLER_SLOTS[word[1:-1]]
                    word = choices[rng.integers(len(choices))]
                out.append(self.vocab.id(word))
        return tuple(out)


def gen_private_sample(rng, factory: SampleFactory, prefix_id: str = "p") -> PrivateSample:
    return factory.private_sample(rng, prefix_id)


def pnote_body(vocab: Vocabulary, name, topic, tail) -> tuple[int, ...]:
    return (PN_OPEN, *name, vocab.id("'s"), *topic, vocab.id("is"), *tail, vocab.id("."), PN_CLOSE)


def make_pnote_appended(sample: PrivateSample, vocab: Vocabulary) -> PNoteAppendedSample:
    """``<PN>{name}'s {topic} is {secret}.</PN>`` appended after the sample."""
    return PNoteAppendedSample(sample, pnote_body(vocab, sample.name, sample.topic, sample.secret))


def summary_pnote(vocab: Vocabulary, name, topic) -> tuple[int, ...]:
    return pnote_body(vocab, name, topic, (vocab.id("leaked"),))


def make_summary_sample(privates, fillers, rng: np.random.Generator, vocab: Vocabulary,
                        max_seq_len: int = 128, sample_id: str = "") -> PNoteSummarySample:
    """Private fragments (with their pnotes) interleaved with filler, then summaries."""
    if not privates:
        raise ValueError("a summary sample needs at least one private fragment")
    parts = [make_pnote_appended(p, vocab) for p in privates] + [tuple(f) for f in fillers]
    order = rng.permutation(len(parts))
    parts = tuple(parts[i] for i in order)
    summaries = tuple(summary_pnote(vocab, p.base.name, p.base.topic)
                      for p in parts if isinstance(p, PNoteAppendedSample))
    sample = PNoteSummarySample(parts, summaries, sample_id)
    if len(sample.tokens) > max_seq_len:
        raise TemplateOverflow(f"summary sample of {len(sample.tokens)} tokens exceeds {max_seq_len}")
    return sample


@dataclass(frozen=True)
class DatasetSpec:
    n_appended: int = 200
    n_summary: int = 100
    n_filler: int = 300
    n_test_private: int = 150
    n_raw_private: int = 0
    max_fragments: int = 2
    fillers_per_summary: int = 1
    seed: int = 0
    max_seq_len: int = 128

    def __post_init__(self):
        for name in ("n_appended", "n_summary", "n_filler", "n_test_private", "n_raw_private"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 1 <= self.max_fragments <= 3:
            raise ValueError("max_fragments must be in 1..3")

    def with_pnote_count(self, count: int, total_private: int = 300) -> "DatasetSpec":
        """``count`` PNote-appended samples plus ``count // 2`` summary samples.

        The remaining private budget is spent on raw private samples without
        PNotes, so every variant sees the same number of private samples;
        ``count = 200`` reproduces the default mix and ``count = 0`` the
        PNote-free ablation.
        """
        n_summary = count // 2
        return replace(self, n_appended=count, n_summary=n_summary,
                       n_raw_private=max(total_private - count - n_summary, 0))


@dataclass
class Record:
    """One dataset line; see the JSON Lines schema in ``dataset``."""

    kind: str
    tokens: tuple[int, ...]
    sample_id: str
    name: tuple[int, ...] = ()
    topic: tuple[int, ...] = ()
    secret: tuple[int, ...] = ()
    keywords: tuple[int, ...] = ()
    prefix_len: int | None = None

    def private(self) -> PrivateSample:
        """Rebuild the private sample of a ``private_test``/raw record."""
        n = self.prefix_len if self.prefix_len is not None else len(self.tokens) - len(self.secret) - 1
        return PrivateSample(self.sample_id, tuple(self.name), tuple(self.topic), tuple(self.secret),
                             tuple(self.keywords), tuple(self.tokens[:n]))


def private_record(sample: PrivateSample, kind: str = "private_test") -> Record:
    return Record(kind, sample.tokens, sample.sample_id, sample.name, sample.topic, sample.secret,
                  sample.keywords, len(sample.prefix))


def gen_filler_corpus(factory: SampleFactory, n: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    return [factory.filler(rng) for _ in range(n)]


@dataclass
class TrainingMix:
    train: list[Record]
    test_privates: list[Record]


def build_training_mix(spec: DatasetSpec, factory: SampleFactory,
                       filler_corpus: list[tuple[int, ...]] | None = None) -> TrainingMix:
    """Malicious training set (fillers + appended + summary + raw) and held-out privates.

    Test privates are drawn first from the same factory so their secrets are
    excluded from every training sample.
    """
    rng = np.random.default_rng(spec.seed)
    if filler_corpus is None:
        filler_corpus = gen_filler_corpus(factory, spec.n_filler + spec.n_summary * spec.fillers_per_summary,
                                          np.random.default_rng([spec.seed, 1]))
    needed = spec.n_filler + spec.n_summary * spec.fillers_per_summary
    if len(filler_corpus) < needed:
        raise CorpusTooSmall(f"need {needed} filler sequences, corpus has {len(filler_corpus)}")
    fillers = iter(filler_corpus)

    test = [private_record(factory.private_sample(rng, "test"), "private_test")
            for _ in range(spec.n_test_private)]
    train = [Record("filler", tuple(next(fillers)), f"filler{i:05d}") for i in range(spec.n_filler)]
    for _ in range(spec.n_appended):
        s = make_pnote_appended(factory.private_sample(rng, "app"), factory.vocab)
        train.append(Record("pnote_appended", s.tokens, s.base.sample_id, s.base.name,
                            s.base.topic, s.base.secret, s.base.keywords, len(s.base.prefix)))
    for j in range(spec.n_summary):
        k = int(rng.integers(1, spec.max_fragments + 1))
        fill = [next(fillers) for _ in range(spec.fillers_per_summary)]
        while True:
            privs = [factory.private_sample(rng, "sum") for _ in range(k)]
            try:
                s = make_summary_sample(privs, fill, rng, factory.vocab, spec.max_seq_len, f"summary{j:05d}")
                break
            except TemplateOverflow:
                for p in privs:
                    factory.used_secrets.discard(p.secret)
                k = max(1, k - 1)
        names = tuple(t for p in s.privates for t in p.name)
        topics = tuple(t for p in s.privates for t in p.topic)
        secrets = tuple(t for p in s.privates for t in p.secret)
        train.append(Record("pnote_summary", s.tokens, s.sample_id, names, topics, secrets))
    for _ in range(spec.n_raw_private):
        p = factory.private_sample(rng, "raw")
        train.append(private_record(p, "private_raw"))
    order = rng.permutation(len(train))
    return TrainingMix([train[i] for i in order], test)
