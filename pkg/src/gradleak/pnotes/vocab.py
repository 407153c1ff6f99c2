"""Word-level vocabulary built from plain-text word lists."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from gradleak.tinylm.config import NUM_RESERVED

log = logging.getLogger(__name__)

RESERVED = ("<pad>", "<bos>", "<PN>", "</PN>")
PUNCT = (".", ",", "?", "!", ":", ";", "'s")
DIGITS = tuple("0123456789")
LETTERS = tuple("ABCDEFGHJKLMNPQRSTUVWXYZ")
DELIMITERS = (".", "</PN>")
DOT_ID = NUM_RESERVED  # "." is ingested first after the reserved ids

# words the private-sample templates, composer and pnotes use
TEMPLATE_WORDS = """
hi i'm i want to ask about the and my is dear support this writing please check
hey quick question also form entry name reason hello team here ready late for reference
note bring tomorrow your receptionist welcome patient came subject update was moved
booked near support ticket user reports a problem with on file good morning am lost at
reminder are confirmed keep leaked have of
""".split()

# filler grammar lexicon; see generate.FILLER_GRAMMAR
FILLER_SUBJECTS = "we you they he she people everyone nobody".split()
FILLER_VERBS = """like love enjoy watch play read cook paint visit hate need miss remember
prefer collect build clean fix sell buy share teach learn study practice carry find""".split()
FILLER_NOUNS = """music movies books games gardens rivers mountains dogs cats horses bread
coffee tea cookies pizza soup songs poems boats trains bikes shoes hats flowers trees
stars clouds beaches forests puzzles stories jokes letters paintings photos guitars
pianos drums kites candles lamps chairs tables windows blankets pillows apples oranges
bananas cherries lemons carrots onions tomatoes potatoes cheese eggs rice noodles
sandwiches pancakes waffles jeans jackets sweaters gloves scarves socks boots fields
lakes islands valleys deserts oceans castles bridges towers markets museums parks
gardening hiking fishing camping dancing singing swimming running skating knitting
baking sewing drawing chess tennis soccer hockey basketball golf cricket volleyball
anime comedies dramas cartoons podcasts radio newspapers magazines comics novels""".split()
FILLER_ADJECTIVES = """old new big small quiet loud happy sad funny strange warm cold
bright dark sweet bitter fresh lazy busy calm wild gentle""".split()
FILLER_ADVERBS = "really often never always sometimes usually rarely truly".split()
FILLER_CONNECTORS = "so but because when although yes no oh wow well lol".split()
FILLER_FUNCTION = "do what how why favorite most every day week night weekend too it that".split()


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip()]


def default_data_path(name: str) -> Path:
    return Path(str(resources.files("gradleak.pnotes") / "data" / name))


@dataclass
class WordLists:
    names: list[str]
    topics: list[str]
    keywords: list[str]
    topic_keywords: dict[str, list[str]]

    @classmethod
    def load(cls, names_path=None, topics_path=None, keywords_path=None,
             topic_keywords_path=None) -> "WordLists":
        names = _read_lines(names_path or default_data_path("names.txt"))
        topics = _read_lines(topics_path or default_data_path("topics.txt"))
        keywords = _read_lines(keywords_path or default_data_path("keywords.txt"))
        related = {}
        tk_path = topic_keywords_path
        if tk_path is None and topics_path is None and keywords_path is None:
            tk_path = default_data_path("topic_keywords.tsv")
        if tk_path is not None:
            for line in _read_lines(tk_path):
                topic, *kws = line.split("\t")
                related[topic] = [k for k in kws if k in keywords]
        return cls(names, topics, keywords, related)


class Vocabulary:
    """Bidirectional surface-form <-> token-id map.

    Ids 0..3 are PAD, BOS, <PN>, </PN>.  Topic surfaces may span several
    words ("phone number") but are single tokens.
    """

    def __init__(self, surfaces: list[str]):
        if tuple(surfaces[:NUM_RESERVED]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if surfaces[DOT_ID] != ".":
            raise ValueError("'.' must directly follow the reserved tokens")
        self.surfaces = list(surfaces)
        self.index = {}
        for i, s in enumerate(self.surfaces):
            self.index.setdefault(s, i)
        self.max_words = max(len(s.split()) for s in self.surfaces)

    @classmethod
    def build(cls, words: WordLists) -> tuple["Vocabulary", dict]:
        """Vocabulary plus per-category id lists (names/topics/keywords/...)."""
        ordered = list(RESERVED)
        seen = set(ordered)
        categories = {}

        def ingest(label, items):
            ids = []
            for w in items:
                if w not in seen:
                    seen.add(w)
                    ordered.append(w)
                ids.append(ordered.index(w) if label in ("names", "topics", "keywords") else None)
            categories[label] = [i for i in ids if i is not None]

        ingest("punct", PUNCT)
        ingest("digits", DIGITS)
        ingest("letters", LETTERS)
        ingest("template", TEMPLATE_WORDS)
        ingest("names", words.names)
        ingest("topics", words.topics)
        ingest("keywords", words.keywords)
        for group in (FILLER_SUBJECTS, FILLER_VERBS, FILLER_NOUNS, FILLER_ADJECTIVES,
                      FILLER_ADVERBS, FILLER_CONNECTORS, FILLER_FUNCTION):
            ingest("filler", group)
        vocab = cls(ordered)
        for label in ("names", "topics", "keywords"):
            ids = categories[label]
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate entries in {label} list")
        overlap = (set(categories["names"]) & set(categories["topics"])
                   | set(categories["names"]) & set(categories["keywords"])
                   | set(categories["topics"]) & set(categories["keywords"]))
        if overlap:
            raise ValueError(f"filter categories overlap: {[vocab.surfaces[i] for i in overlap]}")
        return vocab, categories

    def __len__(self):
        return len(self.surfaces)

    def id(self, surface: str) -> int:
        return self.index[surface]

    def ids(self, surfaces) -> list[int]:
        return [self.index[s] for s in surfaces]

    @property
    def secret_alphabet(self) -> set[int]:
        return {self.index[c] for c in DIGITS + LETTERS}

    @property
    def delimiters(self) -> set[int]:
        return {self.index[c] for c in DELIMITERS}

    def encode(self, text: str, strict: bool = True) -> list[int]:
        """Greedy longest-match tokenization of whitespace/punctuation-split text.

        With ``strict=False`` unknown words are skipped and logged.
        """
        words = _split_words(text)
        out, i, unknown = [], 0, 0
        while i < len(words):
            for span in range(min(self.max_words, len(words) - i), 0, -1):
                cand = " ".join(words[i:i + span])
                tok = self.index.get(cand)
                if tok is None:
                    tok = self.index.get(cand.lower())
                if tok is not None:
                    out.append(tok)
                    i += span
                    break
            else:
                w = words[i]
                if all(ch in DIGITS + LETTERS for ch in w):
                    out.extend(self.index[ch] for ch in w)
                elif strict:
                    raise KeyError(f"unknown word {w!r}")
                else:
                    unknown += 1
                i += 1
        if unknown:
            log.warning("skipped %d unknown words while encoding", unknown)
        return out

    def render(self, ids) -> str:
        """Readable text: punctuation and 's attach left; code characters join; PAD/BOS dropped."""
        alphabet = set(DIGITS + LETTERS)
        parts = []
        prev = None
        for t in ids:
            if t in (0, 1):  # PAD and BOS are not rendered
                continue
            s = self.surfaces[t]
            glue = (prev is None or s in PUNCT or s == "</PN>" or prev == "<PN>"
                    or (s in alphabet and prev in alphabet))
            parts.append(s if glue else " " + s)
            prev = s
        return "".join(parts)


_WORD_RE = re.compile(r"</?PN>|'s\b|[A-Za-z]+(?:'(?!s\b)[A-Za-z]+)*|\d+|[.,?!:;]")


def _split_words(text: str) -> list[str]:
    words = []
    for m in _WORD_RE.finditer(text):
        w = m.group(0)
        if w.isdigit():
            words.extend(w)
        else:
            words.append(w)
    return words
