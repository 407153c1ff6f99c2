"""Turning a recovered triplet into a prompt prefix."""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass

from gradleak.errors import ComposerUnavailable
from gradleak.pairing import Triplet
from gradleak.pnotes.vocab import Vocabulary


def keyword_clause(keywords: list[str]) -> str:
    if not keywords:
        return ""
    clause = "i want to ask about the " + keywords[0]
    for kw in keywords[1:]:
        clause += " and the " + kw
    return clause + " . "


@dataclass(frozen=True)
class TemplateComposer:
    """``hi , i'm {name} . {keyword clause} . my {topic} is`` rendered deterministically."""

    def compose_text(self, name: str, topic: str, keywords: list[str]) -> str:
        return f"hi , i'm {name} . {keyword_clause(keywords)}my {topic} is"

    def compose(self, triplet: Triplet, vocab: Vocabulary) -> list[int]:
        words = [vocab.surfaces[k] for k in triplet.keywords]
        text = self.compose_text(vocab.surfaces[triplet.pair.name],
                                 vocab.surfaces[triplet.pair.topic], words)
        return vocab.encode(text)


@dataclass(frozen=True)
class ExternalComposer:
    """Runs ``command``; writes ``{name, topic, keywords}`` JSON to stdin, reads a sentence.

    Unknown words in the reply are dropped.  With ``fallback`` set, any failure
    of the external process falls back to the template composer.
    """

    command: tuple[str, ...]
    timeout: float = 30.0
    fallback: bool = True

    def compose(self, triplet: Triplet, vocab: Vocabulary) -> list[int]:
        payload = json.dumps({"name": vocab.surfaces[triplet.pair.name],
                              "topic": vocab.surfaces[triplet.pair.topic],
                              "keywords": [vocab.surfaces[k] for k in triplet.keywords]})
        try:
            proc = subprocess.run(list(self.command), input=payload, capture_output=True,
                                  text=True, timeout=self.timeout, check=False)
            if proc.returncode != 0:
                raise ComposerUnavailable(f"composer exited with {proc.returncode}: {proc.stderr.strip()}")
            tokens = vocab.encode(proc.stdout.strip(), strict=False)
            if triplet.pair.name not in tokens or triplet.pair.topic not in tokens:
                raise ComposerUnavailable("composer output lost the name or topic")
            return tokens
        except (OSError, subprocess.TimeoutExpired, ComposerUnavailable) as exc:
            if not self.fallback:
                if isinstance(exc, ComposerUnavailable):
                    raise
                raise ComposerUnavailable(str(exc)) from exc
            return TemplateComposer().compose(triplet, vocab)


def compose_prefix(triplet: Triplet, composer, vocab: Vocabulary) -> list[int]:
    return composer.compose(triplet, vocab)
