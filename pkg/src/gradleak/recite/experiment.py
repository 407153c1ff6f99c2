"""Sweeps over batch size, PII rate, PEFT mode, noise and pre-training ablations."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from gradleak.errors import LabError
from gradleak.pairing import PairingConfig
from gradleak.pnotes.dataset import FilterSet, cooccurrence
from gradleak.pnotes.generate import DatasetSpec, SampleFactory, TrainingMix, build_training_mix
from gradleak.pnotes.vocab import Vocabulary, WordLists
from gradleak.recite.attack import AttackConfig, finetune_capture, run_attack
from gradleak.recite.metrics import compute_metrics
from gradleak.tinylm.checkpoint import load_checkpoint, save_checkpoint
from gradleak.tinylm.config import FullFT, Lora, ModelConfig, PeftMode, Selective
from gradleak.tinylm.model import TinyLmParams, init_params
from gradleak.tinylm.train import train

log = logging.getLogger(__name__)

# bumped whenever generated token sequences change, so cached models are rebuilt
DATA_FORMAT = 3

CSV_COLUMNS = ("peft_mode", "batch_size", "pii_rate", "sigma", "ablation", "seed",
               "R_prefix", "R_pii", "n_targets", "wall_ms")


@dataclass(frozen=True)
class LabConfig:
    """Everything that fixes the attacker's models and the simulated clients."""

    embed_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    max_seq_len: int = 128
    positional_mode: str = "rotary"
    mlp_hidden: int = 256
    dataset: DatasetSpec = DatasetSpec()
    pretrain_lr: float = 0.5
    pretrain_epochs: int = 30
    pretrain_batch: int = 16
    pretrain_bucket: int = 4
    pretrain_seed: int = 0
    client_lr: tuple[tuple[str, float], ...] = (("full", 0.1), ("selective", 0.1), ("lora", 0.5))
    client_epochs: int = 30
    lora_rank: int = 64
    n_targets: int = 16
    pairing: PairingConfig = PairingConfig()
    query_style: str = "prefix"
    zeta_scale: float = 1.0

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, embed_dim=self.embed_dim,
                           num_layers=self.num_layers, num_heads=self.num_heads,
                           max_seq_len=self.max_seq_len, positional_mode=self.positional_mode,
                           mlp_hidden=self.mlp_hidden)

    def lr_for(self, mode_name: str) -> float:
        return dict(self.client_lr)[mode_name]

    def peft_mode(self, mode_name: str) -> PeftMode:
        layers = tuple(range(min(2, self.num_layers)))
        if mode_name == "full":
            return FullFT()
        if mode_name == "lora":
            return Lora(rank=self.lora_rank, layers=layers)
        if mode_name == "selective":
            return Selective(layers=layers)
        raise ValueError(f"unknown peft mode {mode_name!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["client_lr"] = {k: v for k, v in self.client_lr}
        return d


def ablation_spec(base: DatasetSpec, ablation: str) -> DatasetSpec:
    """Pre-training data of an ablation.

    ``full``: the default PNote mix; ``no_pnote``: the same private budget with
    no PNotes; ``pnotes_<n>``: ``n`` appended PNote samples (see
    ``DatasetSpec.with_pnote_count``); ``no_pretrain``: filler only.
    """
    if ablation in ("full", "no_pretrain"):
        return base
    if ablation == "no_pnote":
        return base.with_pnote_count(0)
    if ablation.startswith("pnotes_"):
        return base.with_pnote_count(int(ablation.split("_", 1)[1]))
    raise ValueError(f"unknown ablation {ablation!r}")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


class Lab:
    """Vocabulary, attacker corpora and pre-trained models, built lazily and cached."""

    def __init__(self, config: LabConfig = LabConfig(), words: WordLists | None = None,
                 cache_dir: str | Path | None = None):
        self.config = config
        self.words = words or WordLists.load()
        self.vocab, self.categories = Vocabulary.build(self.words)
        self.filter_set = FilterSet.from_ids(self.categories["names"], self.categories["topics"],
                                             self.categories["keywords"])
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._mixes: dict[str, TrainingMix] = {}
        self._models: dict[str, TinyLmParams] = {}
        self.pretrain_seconds: dict[str, float] = {}
        self._cooc = None

    def factory(self) -> SampleFactory:
        return SampleFactory(self.vocab, self.words, max_seq_len=self.config.max_seq_len)

    def mix(self, ablation: str = "full") -> TrainingMix:
        spec = replace(ablation_spec(self.config.dataset, ablation), max_seq_len=self.config.max_seq_len)
        key = _digest(asdict(spec))
        if key not in self._mixes:
            self._mixes[key] = build_training_mix(spec, self.factory())
        return self._mixes[key]

    @property
    def test_pool(self):
        return self.mix("full").test_privates

    @property
    def cooccurrence(self):
        if self._cooc is None:
            self._cooc = cooccurrence(self.mix("full").train, self.filter_set)
        return self._cooc

    def pretrain_corpus(self, ablation: str) -> list[tuple[int, ...]]:
        mix = self.mix(ablation)
        if ablation == "no_pretrain":
            return [r.tokens for r in mix.train if r.kind == "filler"]
        return [r.tokens for r in mix.train]

    def pretrained(self, ablation: str = "full") -> TinyLmParams:
        if ablation in self._models:
            return self._models[ablation]
        cfg = self.config
        key = _digest({"lab": cfg.to_dict(), "ablation": ablation, "data_format": DATA_FORMAT,
                       "spec": asdict(ablation_spec(cfg.dataset, ablation))})
        path = self.cache_dir / f"pretrained-{ablation}-{key}.json" if self.cache_dir else None
        if path is not None and path.exists():
            params, _ = load_checkpoint(path)
        else:
            t0 = time.perf_counter()
            init = init_params(cfg.model_config(len(self.vocab)), np.random.default_rng(cfg.pretrain_seed))
            result = train(init, None, self.pretrain_corpus(ablation), FullFT(), lr=cfg.pretrain_lr,
                           epochs=cfg.pretrain_epochs, batch_size=cfg.pretrain_batch,
                           rng=np.random.default_rng([cfg.pretrain_seed, 1]),
                           bucket=cfg.pretrain_bucket)
            params = result.params
            self.pretrain_seconds[ablation] = time.perf_counter() - t0
            log.info("pre-trained %s in %.1fs, final loss %.3f", ablation,
                     self.pretrain_seconds[ablation], result.log[-1]["loss"] if result.log else float("nan"))
            if path is not None:
                save_checkpoint(path, params)
        self._models[ablation] = params
        return params

    def client_batches(self, b: int, pii_rate: float, seed: int):
        """Client batches of one cell: (sequences, planted targets) pairs.

        Depends only on (b, pii_rate, seed) so that every ablation, mode and
        noise level of a seed attacks the same clients.
        """
        rng = np.random.default_rng([seed, b, int(round(pii_rate * 1000))])
        pool = self.test_pool
        n = min(self.config.n_targets, len(pool))
        chosen = [pool[i] for i in sorted(rng.choice(len(pool), size=n, replace=False))]
        per_batch = max(1, min(b, int(round(pii_rate * b))))
        factory = self.factory()
        batches = []
        for s in range(0, n, per_batch):
            targets = chosen[s:s + per_batch]
            seqs = [t.tokens for t in targets] + [factory.filler(rng) for _ in range(b - len(targets))]
            order = rng.permutation(len(seqs))
            batches.append(([seqs[i] for i in order], targets))
        return batches


@dataclass(frozen=True)
class SweepGrid:
    batch_sizes: tuple[int, ...] = (1,)
    pii_rates: tuple[float, ...] = (1.0,)
    peft_modes: tuple[str, ...] = ("full",)
    sigmas: tuple[float, ...] = (0.0,)
    ablations: tuple[str, ...] = ("full",)

    def cells(self):
        for mode in self.peft_modes:
            for b in self.batch_sizes:
                for rate in self.pii_rates:
                    for sigma in self.sigmas:
                        for ab in self.ablations:
                            yield mode, b, rate, sigma, ab


def cell_key(mode, b, rate, sigma, ablation, seed) -> str:
    return f"{mode}|{b}|{rate!r}|{sigma!r}|{ablation}|{seed}"


@dataclass
class ResultsTable:
    rows: list[dict] = field(default_factory=list)
    reports: dict[str, list[dict]] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow([row[c] for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "means": self.means(), "reports": self.reports,
                           "failures": self.failures}, sort_keys=True, indent=1)

    def means(self) -> list[dict]:
        groups: dict[tuple, list[dict]] = {}
        for row in self.rows:
            key = tuple(row[c] for c in ("peft_mode", "batch_size", "pii_rate", "sigma", "ablation"))
            groups.setdefault(key, []).append(row)
        out = []
        for key, rows in groups.items():
            out.append(dict(zip(("peft_mode", "batch_size", "pii_rate", "sigma", "ablation"), key))
                       | {"R_prefix": float(np.mean([r["R_prefix"] for r in rows])),
                          "R_pii": float(np.mean([r["R_pii"] for r in rows])),
                          "n_seeds": len(rows)})
        return out

    def select(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]


def run_cell(lab: Lab, mode_name: str, b: int, pii_rate: float, sigma: float, ablation: str,
             seed: int, timing: bool = False) -> tuple[dict, list[dict]]:
    cfg = lab.config
    t0 = time.perf_counter()
    mode = cfg.peft_mode(mode_name)
    pretrained = lab.pretrained(ablation)
    attack_cfg = AttackConfig(peft_mode=mode, b=b, pairing=cfg.pairing, dp_sigma=sigma, seed=seed,
                              query_style=cfg.query_style, zeta_scale=cfg.zeta_scale)
    reports, n_p = [], 0
    for j, (seqs, targets) in enumerate(lab.client_batches(b, pii_rate, seed)):
        rng = np.random.default_rng([seed, b, j, 3])
        update = finetune_capture(pretrained, seqs, mode, cfg.lr_for(mode_name), cfg.client_epochs, rng)
        n_p += len(targets)
        batch_cfg = replace(attack_cfg, seed=seed * 100003 + j)
        reports.extend(run_attack(pretrained, update, targets, batch_cfg, lab.vocab, lab.filter_set,
                                  lab.cooccurrence, timing=timing))
    metrics = compute_metrics(reports, n_p)
    wall = round((time.perf_counter() - t0) * 1000, 1) if timing else 0
    row = {"peft_mode": mode_name, "batch_size": b, "pii_rate": pii_rate, "sigma": sigma,
           "ablation": ablation, "seed": seed, "R_prefix": round(metrics.R_prefix, 6),
           "R_pii": round(metrics.R_pii, 6), "n_targets": n_p, "wall_ms": wall}
    return row, [r.to_dict() for r in reports]


def run_experiment(lab: Lab, grid: SweepGrid, seeds, timing: bool = False, skip=(),
                   on_row=None) -> ResultsTable:
    """One row per (cell, seed); a failing cell is recorded and the sweep goes on.

    ``skip`` holds cell keys already completed (resume); ``on_row`` is called
    after each finished cell with (key, row, reports).
    """
    table = ResultsTable()
    skip = set(skip)
    for mode, b, rate, sigma, ab in grid.cells():
        for seed in seeds:
            key = cell_key(mode, b, rate, sigma, ab, seed)
            if key in skip:
                continue
            try:
                row, reports = run_cell(lab, mode, b, rate, sigma, ab, seed, timing)
            except LabError as exc:
                table.failures[key] = f"{type(exc).__name__}: {exc}"
                log.warning("cell %s failed: %s", key, exc)
                continue
            table.rows.append(row)
            table.reports[key] = reports
            if on_row is not None:
                on_row(key, row, reports)
    return table
