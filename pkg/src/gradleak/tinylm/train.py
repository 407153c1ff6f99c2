"""Mini-batch training under each fine-tuning mode."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from gradleak.errors import NumericalError, ShapeError, TrainingDiverged
from gradleak.tinylm.config import FullFT, Lora, PeftMode, TokenBatch
from gradleak.tinylm.model import (LoraFactors, TinyLmParams, loss_and_grads, token_count,
                                   trainable_names)


# an epoch whose mean loss exceeds this many times the uniform-model loss
# counts as diverged even while still finite
DIVERGENCE_FACTOR = 10.0


@dataclass
class TrainResult:
    params: TinyLmParams
    lora: LoraFactors | None
    log: list[dict] = field(default_factory=list)

    def log_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "loss", "lr"])
        for row in self.log:
            writer.writerow([row["epoch"], repr(row["loss"]), repr(row["lr"])])
        return buf.getvalue()


class _Adam:
    def __init__(self, b1=0.9, b2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, store, grads, lr):
        self.t += 1
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            store[name] = store[name] - lr * mhat / (np.sqrt(vhat) + self.eps)


def _epoch_batches(rng, dataset, batch_size, bucket):
    order = rng.permutation(len(dataset))
    if bucket <= 0:
        return [order[s:s + batch_size] for s in range(0, len(order), batch_size)]
    batches = []
    window = bucket * batch_size
    for w in range(0, len(order), window):
        chunk = sorted(order[w:w + window], key=lambda i: (len(dataset[i]), i))
        batches.extend(chunk[s:s + batch_size] for s in range(0, len(chunk), batch_size))
    return [batches[j] for j in rng.permutation(len(batches))]


def train(params: TinyLmParams, lora: LoraFactors | None, dataset, mode: PeftMode = FullFT(),
          lr: float = 0.1, epochs: int = 30, batch_size: int = 8,
          rng: np.random.Generator | None = None, optimizer: str = "sgd",
          clip_norm: float | None = None, bucket: int = 0) -> TrainResult:
    """Train on ``dataset`` (a list of token-id sequences); inputs are not mutated.

    The per-batch objective is the mean next-token NLL.  The learning rate
    decays linearly from ``lr`` to zero over all steps.  Only the tensors that
    ``mode`` makes trainable are updated.

    With ``bucket > 0`` each epoch's shuffled order is cut into windows of
    ``bucket`` batches, each window is sorted by length before batching and the
    batch order is shuffled again; this cuts padding on mixed-length corpora.
    """
    if not dataset:
        raise ShapeError("empty dataset")
    if rng is None:
        rng = np.random.default_rng(0)
    mode.validate(params.config)
    params = params.copy()
    lora = lora.copy() if lora is not None else None
    if isinstance(mode, Lora) and lora is None:
        raise ShapeError("lora mode needs lora factors")
    names = trainable_names(params, mode, lora)
    store = lora.tensors if isinstance(mode, Lora) else params.tensors
    adam = _Adam() if optimizer == "adam" else None
    if optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")

    n = len(dataset)
    if bucket > 0:
        window = bucket * batch_size
        steps_per_epoch = sum(-(-min(window, n - w) // batch_size) for w in range(0, n, window))
    else:
        steps_per_epoch = -(-n // batch_size)
    total = max(epochs * steps_per_epoch, 1)
    step = 0
    log = []
    for epoch in range(1, epochs + 1):
        losses, counts = 0.0, 0
        cur_lr = lr
        for idx in _epoch_batches(rng, dataset, batch_size, bucket):
            batch = TokenBatch.of([dataset[i] for i in idx])
            count = token_count(batch)
            if count == 0:
                step += 1
                continue
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    value, grads, lora_grads = loss_and_grads(params, batch, lora, scale=1.0 / count)
            except NumericalError as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}") from exc
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}")
            losses += value * count
            counts += count
            source = lora_grads if isinstance(mode, Lora) else grads
            update = {nm: source[nm] for nm in names}
            if clip_norm is not None:
                norm = np.sqrt(sum(float((g * g).sum()) for g in update.values()))
                if norm > clip_norm:
                    update = {nm: g * (clip_norm / norm) for nm, g in update.items()}
            cur_lr = lr * (1.0 - step / total)
            if cur_lr != 0.0:
                if adam is not None:
                    adam.step(store, update, cur_lr)
                else:
                    for nm, g in update.items():
                        store[nm] = store[nm] - cur_lr * g
            step += 1
        mean = losses / max(counts, 1)
        if not np.isfinite(mean) or mean > DIVERGENCE_FACTOR * np.log(params.config.vocab_size):
            raise TrainingDiverged(f"loss became {mean} at epoch {epoch}")
        log.append({"epoch": epoch, "loss": float(mean), "lr": float(cur_lr)})
    return TrainResult(params, lora, log)
