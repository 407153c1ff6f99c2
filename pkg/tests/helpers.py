"""Shared builders for small models, batches and gradient checks."""

from __future__ import annotations

import numpy as np

from gradleak.tinylm import FullFT, Lora, ModelConfig, Selective, TokenBatch, init_lora, init_params
from gradleak.tinylm.model import loss_and_grads

from oracles import central_difference


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=23, embed_dim=8, num_layers=2, num_heads=2, max_seq_len=12,
                positional_mode="rotary", mlp_hidden=12)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(rng, config: ModelConfig, b: int, lo: int = 2, hi: int | None = None) -> TokenBatch:
    hi = hi or config.max_seq_len
    seqs = [tuple(int(t) for t in rng.integers(0, config.vocab_size, int(rng.integers(lo, hi + 1))))
            for _ in range(b)]
    return TokenBatch.of(seqs)


def random_case(seed: int):
    """(params, lora, mode, batch) spanning positional modes, depths and PEFT modes."""
    rng = np.random.default_rng(seed)
    cfg = tiny_config(positional_mode=("rotary", "absolute")[seed % 2],
                      num_layers=1 + seed % 3, num_heads=(1, 2)[seed % 2],
                      embed_dim=(8, 12)[(seed // 2) % 2])
    params = init_params(cfg, rng)
    # non-trivial norms and biases so every path carries gradient
    for name, t in params.tensors.items():
        if name.endswith((".g", ".b", ".b1", ".b2")):
            params.tensors[name] = t + rng.normal(0, 0.3, t.shape)
    kind = seed % 3
    lora = None
    if kind == 0:
        mode = FullFT()
    elif kind == 1:
        mode = Lora(rank=2 + seed % 3, layers=tuple(range(cfg.num_layers)),
                    targets=("wq", "wv") if seed % 2 else ("wq", "wk", "wv", "wo"))
        lora = init_lora(cfg, mode, rng, b_std=0.3)
    else:
        mode = Selective(layers=(cfg.num_layers - 1,))
    batch = random_batch(rng, cfg, b=1 + seed % 3, hi=8)
    return params, lora, mode, batch


def gradient_check(params, lora, mode, batch, rng, per_tensor: int = 6, eps: float = 1e-4) -> float:
    """Worst relative error between analytic and finite-difference gradients.

    The error of a tensor is ||g_a - g_fd|| / max(||g_a||, ||g_fd||) over a
    random subset of its entries.
    """
    _, grads, lora_grads = loss_and_grads(params, batch, lora)
    if isinstance(mode, Lora):
        targets = {k: (lora.tensors[k], g) for k, g in lora_grads.items()}
    else:
        from gradleak.tinylm.model import trainable_names
        targets = {k: (params.tensors[k], grads[k]) for k in trainable_names(params, mode)}

    def f():
        return loss_and_grads(params, batch, lora)[0]

    worst = 0.0
    for name, (tensor, g) in targets.items():
        entries = rng.choice(tensor.size, size=min(per_tensor, tensor.size), replace=False)
        fd = central_difference(f, tensor, eps, entries)
        a = np.array([g.reshape(-1)[i] for i in entries])
        n = np.array([fd[i] for i in entries])
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst
