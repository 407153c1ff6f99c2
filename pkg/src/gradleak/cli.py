"""Command-line workflows: gen-data, pretrain, finetune, attack, sweep, inspect.

Configuration is one JSON file (``--config``) whose sections mirror
``DEFAULT_CONFIG``; flags override single values.  Every command writes its
outputs under ``--out`` (or ``$GRADLEAK_OUT``, default ``./runs``) together
with a ``manifest.json`` recording the config hash and file digests.

Exit codes: 0 success, 1 usage, 2 I/O or format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

import gradleak
from gradleak.errors import LabError, NumericalError, ParseError
from gradleak.fte import numeric_rank, span_basis
from gradleak.pairing import PairingConfig
from gradleak.pnotes.dataset import FilterSet, cooccurrence, load_dataset, save_dataset
from gradleak.pnotes.generate import DatasetSpec, SampleFactory, build_training_mix
from gradleak.pnotes.vocab import Vocabulary, WordLists
from gradleak.recite.attack import (AttackConfig, finetune_capture, run_attack, update_from_dict,
                                    update_to_dict)
from gradleak.recite.experiment import Lab, LabConfig, ResultsTable, SweepGrid, cell_key, run_experiment
from gradleak.recite.metrics import compute_metrics
from gradleak.tinylm.checkpoint import (capture_from_dict, load_checkpoint, read_json, save_capture,
                                        save_checkpoint, write_json_atomic)
from gradleak.tinylm.model import init_params
from gradleak.tinylm.train import train

log = logging.getLogger("gradleak")

OUT_ENV = "GRADLEAK_OUT"
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULT_CONFIG = {
    "seed": 0,
    "words": {"names": None, "topics": None, "keywords": None, "topic_keywords": None},
    "model": {"embed_dim": 128, "num_layers": 2, "num_heads": 4, "max_seq_len": 128,
              "positional_mode": "rotary", "mlp_hidden": 256},
    "dataset": {"n_appended": 200, "n_summary": 100, "n_filler": 300, "n_test_private": 150,
                "n_raw_private": 0, "max_fragments": 2, "fillers_per_summary": 1},
    "pretrain": {"lr": 0.5, "epochs": 30, "batch_size": 16, "bucket": 4},
    "finetune": {"peft": "full", "b": 1, "pii_rate": 1.0, "lr": None, "epochs": 30,
                 "lora_rank": 64, "batch_index": 0},
    "attack": {"sigma": 0.0, "zeta": None, "zeta_scale": 1.0, "B_c": 16, "max_keywords": 5,
               "query_style": "prefix", "composer": "template", "composer_command": [],
               "max_secret_len": 12},
    "sweep": {"batch_sizes": [1, 4, 16], "pii_rates": [1.0], "peft_modes": ["full"],
              "sigmas": [0.0], "ablations": ["full"], "seeds": [0], "n_targets": 16},
}
CLIENT_LR = {"full": 0.1, "selective": 0.1, "lora": 0.5}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config and manifest

def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise UsageError(f"unknown config key {where}{key}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON form; independent of key order."""
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunConfig:
    values: dict
    out: Path

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        values = copy.deepcopy(DEFAULT_CONFIG)
        if args.config:
            try:
                with open(args.config, encoding="utf-8") as fh:
                    user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{args.config}: invalid JSON ({exc.msg})", line=exc.lineno) from exc
            if not isinstance(user, dict):
                raise ParseError(f"{args.config}: top level must be an object")
            values = _merge(values, user)
        if args.seed is not None:
            values["seed"] = args.seed
        if args.peft is not None:
            values["finetune"]["peft"] = args.peft
        if args.b is not None:
            values["finetune"]["b"] = args.b
        if args.sigma is not None:
            values["attack"]["sigma"] = args.sigma
        out = Path(args.out or os.environ.get(OUT_ENV) or "runs")
        cfg = cls(values, out)
        cfg.validate()
        return cfg

    def validate(self):
        if not isinstance(self.values.get("seed"), int):
            raise UsageError("seed must be an integer")
        for key, path in self.values["words"].items():
            if path is not None and not Path(path).is_file():
                raise FileNotFoundError(f"word list {key}: {path} not found")
        if self.values["finetune"]["peft"] not in CLIENT_LR:
            raise UsageError(f"unknown peft mode {self.values['finetune']['peft']!r}")
        if self.values["finetune"]["b"] < 1:
            raise UsageError("--b must be >= 1")
        if self.values["attack"]["sigma"] < 0:
            raise UsageError("--sigma must be >= 0")

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def words(self) -> WordLists:
        w = self.values["words"]
        return WordLists.load(w["names"], w["topics"], w["keywords"], w["topic_keywords"])

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(seed=self.seed, max_seq_len=self.values["model"]["max_seq_len"],
                           **self.values["dataset"])

    def lab_config(self) -> LabConfig:
        m, p, a, s, f = (self.values[k] for k in ("model", "pretrain", "attack", "sweep", "finetune"))
        lrs = dict(CLIENT_LR)
        if f["lr"] is not None:
            lrs[f["peft"]] = f["lr"]
        return LabConfig(embed_dim=m["embed_dim"], num_layers=m["num_layers"],
                         num_heads=m["num_heads"], max_seq_len=m["max_seq_len"],
                         positional_mode=m["positional_mode"], mlp_hidden=m["mlp_hidden"],
                         dataset=self.dataset_spec(), pretrain_lr=p["lr"],
                         pretrain_epochs=p["epochs"], pretrain_batch=p["batch_size"],
                         pretrain_bucket=p["bucket"], pretrain_seed=self.seed,
                         client_lr=tuple(sorted(lrs.items())), client_epochs=f["epochs"],
                         lora_rank=f["lora_rank"], n_targets=s["n_targets"],
                         pairing=self.pairing_config(), query_style=a["query_style"],
                         zeta_scale=a["zeta_scale"])

    def pairing_config(self) -> PairingConfig:
        a = self.values["attack"]
        return PairingConfig(B_c=a["B_c"], max_keywords=a["max_keywords"])

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)


@dataclass
class RunManifest:
    command: str
    config_hash: str
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    started: float = 0.0
    finished: float = 0.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def start(cls, command: str, cfg: RunConfig) -> "RunManifest":
        versions = {"gradleak": gradleak.__version__, "numpy": np.__version__,
                    "python": platform.python_version()}
        return cls(command, config_hash(cfg.values), cfg.values, versions=versions, started=time.time())

    def add_input(self, path):
        self.inputs[str(path)] = file_digest(path)

    def add_output(self, path):
        self.outputs[str(path)] = file_digest(path)

    def write(self, path):
        self.finished = time.time()
        write_json_atomic(path, asdict(self))

    @staticmethod
    def verify(path) -> list[str]:
        """Paths whose current digest differs from the recorded one."""
        m = read_json(path)
        bad = []
        for p, digest in {**m.get("inputs", {}), **m.get("outputs", {})}.items():
            if not Path(p).exists() or file_digest(p) != digest:
                bad.append(p)
        return bad


def _write_text_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".tmp-{path.name}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _vocab(cfg: RunConfig):
    words = cfg.words()
    vocab, cats = Vocabulary.build(words)
    return words, vocab, FilterSet.from_ids(cats["names"], cats["topics"], cats["keywords"])


def _require(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"missing input {path}")
    return path


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: RunConfig) -> int:
    manifest = RunManifest.start("gen-data", cfg)
    words, vocab, _ = _vocab(cfg)
    mix = build_training_mix(cfg.dataset_spec(), SampleFactory(vocab, words,
                                                               max_seq_len=cfg.values["model"]["max_seq_len"]))
    train_path, test_path = cfg.path("data", "train.jsonl"), cfg.path("data", "test.jsonl")
    save_dataset(train_path, mix.train)
    save_dataset(test_path, mix.test_privates)
    vocab_path = cfg.path("data", "vocab.txt")
    _write_text_atomic(vocab_path, "".join(s + "\n" for s in vocab.surfaces))
    for p in (train_path, test_path, vocab_path):
        manifest.add_output(p)
    kinds = {}
    for r in mix.train:
        kinds[r.kind] = kinds.get(r.kind, 0) + 1
    manifest.extra = {"train_kinds": kinds, "n_test": len(mix.test_privates)}
    manifest.write(cfg.path("data", "manifest.json"))
    print(f"wrote {len(mix.train)} train and {len(mix.test_privates)} test samples to {cfg.path('data')}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig) -> int:
    manifest = RunManifest.start("pretrain", cfg)
    train_path = _require(cfg.path("data", "train.jsonl"))
    manifest.add_input(train_path)
    records = load_dataset(train_path)
    _, vocab, _ = _vocab(cfg)
    lab_cfg = cfg.lab_config()
    p = cfg.values["pretrain"]
    params = init_params(lab_cfg.model_config(len(vocab)), np.random.default_rng(cfg.seed))
    result = train(params, None, [r.tokens for r in records if r.kind != "private_test"],
                   lr=p["lr"], epochs=p["epochs"], batch_size=p["batch_size"],
                   rng=np.random.default_rng([cfg.seed, 1]), bucket=p["bucket"])
    ckpt, log_path = cfg.path("pretrain", "checkpoint.json"), cfg.path("pretrain", "train_log.csv")
    save_checkpoint(ckpt, result.params)
    _write_text_atomic(log_path, result.log_csv())
    manifest.add_output(ckpt)
    manifest.add_output(log_path)
    manifest.write(cfg.path("pretrain", "manifest.json"))
    last = result.log[-1]["loss"] if result.log else float("nan")
    print(f"pre-trained {p['epochs']} epochs, final loss {last:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_finetune(cfg: RunConfig) -> int:
    manifest = RunManifest.start("finetune", cfg)
    ckpt = _require(cfg.path("pretrain", "checkpoint.json"))
    test_path = _require(cfg.path("data", "test.jsonl"))
    manifest.add_input(ckpt)
    manifest.add_input(test_path)
    params, _ = load_checkpoint(ckpt)
    words, vocab, _ = _vocab(cfg)
    f = cfg.values["finetune"]
    lab_cfg = cfg.lab_config()
    mode = lab_cfg.peft_mode(f["peft"])
    pool = load_dataset(test_path)
    rng = np.random.default_rng([cfg.seed, f["b"], f["batch_index"]])
    per_batch = max(1, min(f["b"], int(round(f["pii_rate"] * f["b"]))))
    start = (f["batch_index"] * per_batch) % max(len(pool), 1)
    targets = (pool + pool)[start:start + per_batch]
    factory = SampleFactory(vocab, words, max_seq_len=cfg.values["model"]["max_seq_len"])
    seqs = [t.tokens for t in targets] + [factory.filler(rng) for _ in range(f["b"] - len(targets))]
    seqs = [seqs[i] for i in rng.permutation(len(seqs))]
    update = finetune_capture(params, seqs, mode, lab_cfg.lr_for(f["peft"]), f["epochs"], rng)
    cap_path = cfg.path("finetune", "capture.json")
    upd_path = cfg.path("finetune", "update.json")
    tgt_path = cfg.path("finetune", "targets.jsonl")
    save_capture(cap_path, update.capture)
    write_json_atomic(upd_path, update_to_dict(update))
    save_dataset(tgt_path, targets)
    for p in (cap_path, upd_path, tgt_path):
        manifest.add_output(p)
    manifest.write(cfg.path("finetune", "manifest.json"))
    print(f"client batch b={f['b']} ({len(targets)} private), mode {f['peft']}; capture {cap_path}")
    return EXIT_OK


def cmd_attack(cfg: RunConfig) -> int:
    manifest = RunManifest.start("attack", cfg)
    paths = {k: _require(cfg.path(*v)) for k, v in {
        "ckpt": ("pretrain", "checkpoint.json"), "capture": ("finetune", "capture.json"),
        "update": ("finetune", "update.json"), "targets": ("finetune", "targets.jsonl")}.items()}
    for p in paths.values():
        manifest.add_input(p)
    # parse everything before writing anything
    params, _ = load_checkpoint(paths["ckpt"])
    capture = capture_from_dict(read_json(paths["capture"]))
    update = update_from_dict(read_json(paths["update"]))
    update.capture = capture
    targets = load_dataset(paths["targets"])
    _, vocab, filter_set = _vocab(cfg)
    train_path = cfg.path("data", "train.jsonl")
    cooc = cooccurrence(load_dataset(train_path), filter_set) if train_path.is_file() else {}
    a = cfg.values["attack"]
    attack_cfg = AttackConfig(peft_mode=capture.peft_mode, b=capture.b, pairing=cfg.pairing_config(),
                              zeta=a["zeta"], zeta_scale=a["zeta_scale"], composer=a["composer"],
                              composer_command=tuple(a["composer_command"]), dp_sigma=a["sigma"],
                              seed=cfg.seed, max_secret_len=a["max_secret_len"],
                              query_style=a["query_style"])
    reports = run_attack(params, update, targets, attack_cfg, vocab, filter_set, cooc)
    metrics = compute_metrics(reports, max(len(targets), 1)) if targets else None
    rep_path, met_path = cfg.path("attack", "reports.json"), cfg.path("attack", "metrics.csv")
    write_json_atomic(rep_path, {"reports": [r.to_dict() for r in reports],
                                 "metrics": metrics.to_dict() if metrics else None})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["R_prefix", "R_pii", "N_P", "n_prefix", "n_pii"])
    if metrics:
        w.writerow([metrics.R_prefix, metrics.R_pii, metrics.N_P, metrics.n_prefix, metrics.n_pii])
    _write_text_atomic(met_path, buf.getvalue())
    manifest.add_output(rep_path)
    manifest.add_output(met_path)
    manifest.write(cfg.path("attack", "manifest.json"))
    for r in reports:
        status = "ok" if r.pii_success else "miss"
        print(f"{r.prefix_text!r} -> {vocab.render(r.inferred_secret)!r} [{status}]")
    if metrics:
        print(f"R_prefix={metrics.R_prefix:.2f}% R_pii={metrics.R_pii:.2f}% (N_P={metrics.N_P})")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    manifest = RunManifest.start("sweep", cfg)
    s = cfg.values["sweep"]
    grid = SweepGrid(tuple(s["batch_sizes"]), tuple(float(r) for r in s["pii_rates"]),
                     tuple(s["peft_modes"]), tuple(float(x) for x in s["sigmas"]), tuple(s["ablations"]))
    progress = cfg.path("sweep", "progress.jsonl")
    chash = config_hash(cfg.values)
    done: dict[str, dict] = {}
    if progress.is_file():
        for lineno, line in enumerate(progress.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{progress}: invalid JSON", line=lineno) from exc
            if entry.get("config_hash") == chash:
                done[entry["key"]] = entry
    progress.parent.mkdir(parents=True, exist_ok=True)
    lab = Lab(cfg.lab_config(), cfg.words(), cache_dir=cfg.path("sweep", "models"))

    def on_row(key, row, reports):
        with open(progress, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"key": key, "config_hash": chash, "row": row, "reports": reports},
                                sort_keys=True) + "\n")

    fresh = run_experiment(lab, grid, s["seeds"], skip=done, on_row=on_row)
    table = ResultsTable(failures=fresh.failures)
    new_rows = {cell_key(r["peft_mode"], r["batch_size"], r["pii_rate"], r["sigma"], r["ablation"],
                         r["seed"]): r for r in fresh.rows}
    for mode, b, rate, sigma, ab in grid.cells():
        for seed in s["seeds"]:
            key = cell_key(mode, b, rate, sigma, ab, seed)
            if key in new_rows:
                table.rows.append(new_rows[key])
                table.reports[key] = fresh.reports[key]
            elif key in done:
                table.rows.append(done[key]["row"])
                table.reports[key] = done[key]["reports"]
    csv_path, json_path = cfg.path("sweep", "results.csv"), cfg.path("sweep", "results.json")
    _write_text_atomic(csv_path, table.to_csv())
    _write_text_atomic(json_path, table.to_json())
    manifest.add_output(csv_path)
    manifest.add_output(json_path)
    manifest.extra = {"resumed_cells": sorted(k for k in done if k not in new_rows),
                      "failures": table.failures}
    manifest.write(cfg.path("sweep", "manifest.json"))
    print(table.to_csv(), end="")
    return EXIT_OK


def _describe(path: Path) -> str:
    lines = []
    if path.suffix == ".jsonl":
        records = load_dataset(path)
        kinds = {}
        for r in records:
            kinds[r.kind] = kinds.get(r.kind, 0) + 1
        lines.append(f"dataset {path}: {len(records)} records")
        lines += [f"  {k}: {n}" for k, n in sorted(kinds.items())]
        return "\n".join(lines)
    d = read_json(path)
    fmt = d.get("format")
    if fmt == "gradleak.checkpoint":
        params, lora = load_checkpoint(path)
        lines.append(f"checkpoint {path}: {params.config.to_dict()}")
        lines += [f"  {k}: {v.shape}" for k, v in params.tensors.items()]
    elif fmt in ("gradleak.capture", "gradleak.update"):
        cap = capture_from_dict(d if fmt == "gradleak.capture" else d["capture"])
        g = cap.first_layer_query_grad
        s = span_basis(g).singular_values
        lines.append(f"capture {path}: mode={cap.peft_mode} b={cap.b} b_n={cap.b_n}")
        lines += [f"  {k}: {v.shape}" for k, v in cap.grads.items()]
        lines.append(f"  query grad {cap.query_grad_key}: numeric rank {numeric_rank(g)}")
        lines.append("  leading singular values: " + " ".join(f"{x:.3e}" for x in s[:8]))
    elif "config_hash" in d and "outputs" in d:
        bad = RunManifest.verify(path)
        lines.append(f"manifest {path}: command={d['command']} hash={d['config_hash'][:12]}")
        lines.append("  digests ok" if not bad else "  digest mismatch: " + ", ".join(bad))
    else:
        raise ParseError(f"{path}: unrecognized file format {fmt!r}")
    return "\n".join(lines)


def cmd_inspect(cfg: RunConfig, paths) -> int:
    for p in paths:
        print(_describe(Path(p)))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "attack": cmd_attack, "sweep": cmd_sweep}


def _add_common(parser, default):
    parser.add_argument("--config", default=default, help="JSON config file")
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--out", default=default, help=f"output root (default ${OUT_ENV} or ./runs)")
    parser.add_argument("--peft", choices=sorted(CLIENT_LR), default=default)
    parser.add_argument("--b", type=int, default=default, help="client batch size")
    parser.add_argument("--sigma", type=float, default=default, help="gradient noise std")
    parser.add_argument("-v", "--verbose", action="store_true", default=default or False)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gradleak", description=__doc__.splitlines()[0])
    _add_common(parser, None)
    # options may come before or after the subcommand; SUPPRESS keeps the
    # subparser from resetting values given before it
    common = _Parser(add_help=False)
    _add_common(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    insp = sub.add_parser("inspect", parents=[common])
    insp.add_argument("paths", nargs="+")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.from_args(args)
        if args.command == "inspect":
            return cmd_inspect(cfg, args.paths)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"gradleak: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"gradleak: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError, KeyError, ValueError, TypeError) as exc:
        print(f"gradleak: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    except LabError as exc:
        print(f"gradleak: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
