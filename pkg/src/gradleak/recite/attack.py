"""Victim fine-tuning with gradient capture, and the end-to-end attack."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from gradleak.errors import LabError, ParseError
from gradleak.fte import (CandidateEmbedder, RecoveredTokens, basis_from_capture, detect_pii_batch,
                          filter_tokens, threshold_for_batch)
from gradleak.pairing import PairingConfig, PairingReport, pair_tokens
from gradleak.pnotes.dataset import FilterSet
from gradleak.pnotes.generate import Record
from gradleak.pnotes.vocab import Vocabulary
from gradleak.recite.compose import ExternalComposer, TemplateComposer
from gradleak.recite.defense import apply_dp_noise
from gradleak.recite.infer import QUERY_STYLES, infer_pii
from gradleak.tinylm.checkpoint import (FORMAT_VERSION, capture_from_dict, capture_to_dict,
                                        decode_array, encode_array, lora_from_dict, lora_to_dict)
from gradleak.tinylm.config import FullFT, Lora, PeftMode, TokenBatch
from gradleak.tinylm.model import (GradientCapture, LoraFactors, TinyLmParams, apply_delta,
                                   backward, init_lora, merge_lora, token_count, trainable_names)
from gradleak.tinylm.train import train


@dataclass(frozen=True)
class AttackConfig:
    peft_mode: PeftMode = FullFT()
    b: int = 1
    pairing: PairingConfig = PairingConfig()
    zeta: float | None = None  # overrides the batch-size schedule
    zeta_scale: float = 1.0
    composer: str = "template"
    composer_command: tuple[str, ...] = ()
    dp_sigma: float = 0.0
    seed: int = 0
    max_secret_len: int = 12
    query_style: str = "prefix"
    normalize: bool = True
    position_policy: str = "auto"
    use_ab_basis: bool = False

    def __post_init__(self):
        if self.dp_sigma < 0:
            raise ValueError("dp_sigma must be >= 0")
        if self.composer not in ("template", "external"):
            raise ValueError(f"unknown composer {self.composer!r}")
        if self.composer == "external" and not self.composer_command:
            raise ValueError("the external composer needs a command")
        if self.query_style not in QUERY_STYLES:
            raise ValueError(f"unknown query style {self.query_style!r}")

    def make_composer(self):
        if self.composer == "external":
            return ExternalComposer(tuple(self.composer_command))
        return TemplateComposer()


@dataclass
class ClientUpdate:
    """What leaves the client: the first-step gradient and the trained PEFT state."""

    capture: GradientCapture
    delta: dict[str, np.ndarray] = field(default_factory=dict)
    lora: LoraFactors | None = None  # trained factors
    lora_init: LoraFactors | None = None  # factors the capture was taken at

    def merged(self, pretrained: TinyLmParams) -> TinyLmParams:
        if self.lora is not None:
            return merge_lora(pretrained, self.lora)
        return apply_delta(pretrained, self.delta)


def finetune_capture(pretrained: TinyLmParams, sequences, mode: PeftMode, lr: float,
                     epochs: int, rng: np.random.Generator, batch_size: int | None = None,
                     lora_b_std: float = 0.02) -> ClientUpdate:
    """Fine-tune on the client's sequences and capture the gradient of the first batch.

    The capture is the mean-token-loss gradient of the whole client batch at
    the pretrained weights, i.e. the first update the client would upload.
    """
    sequences = [tuple(s) for s in sequences]
    batch = TokenBatch.of(sequences)
    lora0 = init_lora(pretrained.config, mode, rng, lora_b_std) if isinstance(mode, Lora) else None
    capture = backward(pretrained, batch, lora0, mode, scale=1.0 / max(token_count(batch), 1))
    result = train(pretrained, lora0, sequences, mode, lr=lr, epochs=epochs,
                   batch_size=batch_size or len(sequences), rng=rng)
    if lora0 is not None:
        return ClientUpdate(capture, lora=result.lora, lora_init=lora0)
    delta = {nm: result.params[nm] - pretrained[nm] for nm in trainable_names(pretrained, mode)}
    return ClientUpdate(capture, delta=delta)


@dataclass
class ReconstructionReport:
    target_id: str | None
    name: int | None
    topic: int | None
    keywords: tuple[int, ...]
    regime: str
    pair_score: float | None
    prefix_tokens: tuple[int, ...]
    prefix_text: str
    inferred_secret: tuple[int, ...]
    true_secret: tuple[int, ...]
    prefix_success: bool
    pii_success: bool
    recovered: dict
    error: str | None = None
    wall_ms: float = 0.0

    def to_dict(self) -> dict:
        return {"target_id": self.target_id, "name": self.name, "topic": self.topic,
                "keywords": list(self.keywords), "regime": self.regime,
                "pair_score": self.pair_score, "prefix_tokens": list(self.prefix_tokens),
                "prefix_text": self.prefix_text, "inferred_secret": list(self.inferred_secret),
                "true_secret": list(self.true_secret), "prefix_success": self.prefix_success,
                "pii_success": self.pii_success, "recovered": self.recovered,
                "error": self.error, "wall_ms": self.wall_ms, "edit_distance": self.edit_distance}

    @property
    def edit_distance(self) -> int | None:
        """Auxiliary partial-match score; never counted as success."""
        if self.target_id is None:
            return None
        return _levenshtein(self.inferred_secret, self.true_secret)


def _levenshtein(a, b) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _match_target(name, topic, targets: list[Record]):
    same_name = [t for t in targets if t.name and t.name[0] == name]
    exact = [t for t in same_name if t.topic and t.topic[0] == topic]
    pool = exact or same_name
    return min(pool, key=lambda t: t.sample_id) if pool else None


@dataclass
class AttackTrace:
    """Batch-level intermediate results, kept for inspection and tests."""

    detected: bool = False
    recovered: RecoveredTokens | None = None
    pairing: PairingReport | None = None
    zeta: float = 0.0
    basis_rank: int = 0
    error: str | None = None


def run_attack(pretrained: TinyLmParams, update: ClientUpdate, targets: list[Record],
               config: AttackConfig, vocab: Vocabulary, filter_set: FilterSet,
               cooccurrence: dict | None = None, trace: AttackTrace | None = None,
               timing: bool = False) -> list[ReconstructionReport]:
    """FTE, pairing, prefix composition and PII inference against one client update.

    ``targets`` are the planted private samples of the attacked batch (ground
    truth for scoring only).  Returns one report per emitted pair; a batch in
    which no topic is recovered yields no reports.  Stage failures become
    reports with ``error`` set instead of exceptions.
    """
    trace = trace if trace is not None else AttackTrace()
    start = time.perf_counter()
    rng = np.random.default_rng([config.seed, 7])
    capture = apply_dp_noise(update.capture, config.dp_sigma, rng)
    zeta = config.zeta if config.zeta is not None else threshold_for_batch(capture.b, config.zeta_scale)
    trace.zeta = zeta
    try:
        basis = basis_from_capture(capture, update.lora_init, use_ab=config.use_ab_basis)
        trace.basis_rank = basis.k
        embedder = CandidateEmbedder(pretrained, config.normalize, config.position_policy)
        recovered = filter_tokens(basis, filter_set, zeta, embedder)
        trace.recovered = recovered
        trace.detected = detect_pii_batch(recovered)
        if not trace.detected:
            return []
        merged = update.merged(pretrained)
        pairing = pair_tokens(recovered, capture.b, config.pairing, basis, embedder, merged,
                              vocab, cooccurrence)
        trace.pairing = pairing
    except LabError as exc:
        trace.error = f"{type(exc).__name__}: {exc}"
        rec = trace.recovered.to_dict() if trace.recovered is not None else {}
        return [ReconstructionReport(None, None, None, (), config.pairing.regime(capture.b), None,
                                     (), "", (), (), False, False, rec, trace.error)]

    composer = config.make_composer()
    rec = recovered.to_dict()
    reports = []
    for triplet in pairing.triplets:
        name, topic = triplet.pair.name, triplet.pair.topic
        target = _match_target(name, topic, targets)
        error = None
        prefix: list[int] = []
        secret: tuple[int, ...] = ()
        try:
            prefix = composer.compose(triplet, vocab)
            secret = infer_pii(merged, prefix, name, topic, config.max_secret_len, vocab,
                               config.query_style)
        except LabError as exc:
            error = f"{type(exc).__name__}: {exc}"
        truth = tuple(target.secret) if target is not None else ()
        prefix_ok = target is not None and target.topic[0] == topic
        pii_ok = target is not None and len(secret) > 0 and secret == truth
        reports.append(ReconstructionReport(
            target.sample_id if target is not None else None, name, topic, triplet.keywords,
            pairing.regime, triplet.pair.score, tuple(prefix), vocab.render(prefix), secret, truth,
            prefix_ok, pii_ok, rec, error))
    if timing and reports:
        total = (time.perf_counter() - start) * 1000
        for r in reports:
            r.wall_ms = total
    return reports


def update_to_dict(update: ClientUpdate) -> dict:
    out = {"format": "gradleak.update", "version": FORMAT_VERSION, "byte_order": "little",
           "capture": capture_to_dict(update.capture),
           "delta": {k: encode_array(v) for k, v in update.delta.items()}}
    if update.lora is not None:
        out["lora"] = lora_to_dict(update.lora)
    if update.lora_init is not None:
        out["lora_init"] = lora_to_dict(update.lora_init)
    return out


def update_from_dict(d: dict) -> ClientUpdate:
    if d.get("format") != "gradleak.update" or d.get("version") != FORMAT_VERSION:
        raise ParseError("not a gradleak client update")
    try:
        return ClientUpdate(capture_from_dict(d["capture"]),
                            {k: decode_array(v) for k, v in d.get("delta", {}).items()},
                            lora_from_dict(d["lora"]) if "lora" in d else None,
                            lora_from_dict(d["lora_init"]) if "lora_init" in d else None)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed client update: {exc}") from exc
