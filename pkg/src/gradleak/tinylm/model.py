"""Pre-norm causal transformer with hand-derived gradients.

Everything is float64 numpy.  Sequences in a batch are right-padded; padded
positions are causally downstream of every real token and carry no loss, so
they contribute exactly zero to every gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gradleak.errors import NumericalError, SequenceTooLong, SequenceTooShort, ShapeError
from gradleak.tinylm.config import FullFT, Lora, ModelConfig, PeftMode, Selective, TokenBatch

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)

ATTN_WEIGHTS = ("wq", "wk", "wv", "wo")


def layer_key(k: int, name: str) -> str:
    if name in ATTN_WEIGHTS:
        return f"layers.{k}.attn.{name}"
    return f"layers.{k}.{name}"


@dataclass
class TinyLmParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "TinyLmParams":
        return TinyLmParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def equal(self, other: "TinyLmParams") -> bool:
        return (self.config == other.config and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()))

    def validate(self):
        for name, shape in expected_shapes(self.config).items():
            if name not in self.tensors:
                raise ShapeError(f"missing tensor {name}")
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise NumericalError(f"{name} has non-finite entries")


@dataclass
class LoraFactors:
    """Adapter factors keyed ``layers.{k}.attn.{w}.A`` (d x r) and ``...B`` (r x d)."""

    rank: int
    layers: tuple[int, ...]
    targets: tuple[str, ...]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "LoraFactors":
        return LoraFactors(self.rank, self.layers, self.targets,
                           {k: v.copy() for k, v in self.tensors.items()})

    def pairs(self):
        for k in self.layers:
            for w in self.targets:
                base = layer_key(k, w)
                yield base, self.tensors[base + ".A"], self.tensors[base + ".B"]

    def equal(self, other: "LoraFactors") -> bool:
        return (self.rank == other.rank and self.layers == other.layers
                and self.targets == other.targets
                and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()))


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V, h = config.embed_dim, config.vocab_size, config.mlp_hidden
    shapes = {"tok_emb": (V, d)}
    if config.positional_mode == "absolute":
        shapes["pos_emb"] = (config.max_seq_len, d)
    for k in range(config.num_layers):
        shapes[layer_key(k, "ln1.g")] = (d,)
        shapes[layer_key(k, "ln1.b")] = (d,)
        for w in ATTN_WEIGHTS:
            shapes[layer_key(k, w)] = (d, d)
        shapes[layer_key(k, "ln2.g")] = (d,)
        shapes[layer_key(k, "ln2.b")] = (d,)
        shapes[layer_key(k, "mlp.w1")] = (d, h)
        shapes[layer_key(k, "mlp.b1")] = (h,)
        shapes[layer_key(k, "mlp.w2")] = (h, d)
        shapes[layer_key(k, "mlp.b2")] = (d,)
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    shapes["head.w"] = (d, V)
    shapes["head.b"] = (V,)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> TinyLmParams:
    d, h = config.embed_dim, config.mlp_hidden
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name == "tok_emb":
            t = rng.normal(0.0, 1.0, shape)
        elif name == "pos_emb":
            t = rng.normal(0.0, 0.5, shape)
        elif name.endswith(".g"):
            t = np.ones(shape)
        elif name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            t = np.zeros(shape)
        elif name.endswith("mlp.w2"):
            t = rng.normal(0.0, 0.5 / np.sqrt(h), shape)
        elif name.endswith(".wo"):
            t = rng.normal(0.0, 0.5 / np.sqrt(d), shape)
        else:
            t = rng.normal(0.0, 1.0 / np.sqrt(d), shape)
        tensors[name] = t
    return TinyLmParams(config, tensors)


def init_lora(config: ModelConfig, mode: Lora, rng: np.random.Generator,
              b_std: float = 0.02) -> LoraFactors:
    """Random A, small random B.

    B starts nonzero (the publisher chooses the adapter init): with B = 0 the
    first-step gradient of A vanishes identically.
    """
    mode.validate(config)
    d, r = config.embed_dim, mode.rank
    tensors = {}
    for k in mode.layers:
        for w in mode.targets:
            base = layer_key(k, w)
            tensors[base + ".A"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, r))
            tensors[base + ".B"] = rng.normal(0.0, b_std, (r, d))
    return LoraFactors(mode.rank, tuple(mode.layers), tuple(mode.targets), tensors)


def _check_lora(params: TinyLmParams, lora: LoraFactors | None):
    if lora is None:
        return
    d = params.config.embed_dim
    for base, A, B in lora.pairs():
        if base not in params.tensors:
            raise ShapeError(f"lora adapts unknown weight {base}")
        if A.shape != (d, lora.rank) or B.shape != (lora.rank, d):
            raise ShapeError(f"lora factors for {base} have shapes {A.shape}, {B.shape}")


# ---------------------------------------------------------------- primitives

def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_backward(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def rotary_tables(n: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = 10000.0 ** (-np.arange(0, head_dim, 2) / head_dim)
    angles = np.arange(n)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def _rotate(x, cos, sin):
    # x: (..., n, dh); rotates each (even, odd) coordinate pair by its position angle
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def _unrotate(x, cos, sin):
    return _rotate(x, cos, -sin)


def _split_heads(x, H):
    b, n, d = x.shape
    return x.reshape(b, n, H, d // H).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, H, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, H * dh)


def _project(x, params, lora_map, key):
    y = x @ params[key]
    if key in lora_map:
        A, B = lora_map[key]
        xa = x @ A
        return y + xa @ B, xa
    return y, None


def _effective(params, lora_map, key):
    W = params[key]
    if key in lora_map:
        A, B = lora_map[key]
        return W + A @ B
    return W


# ---------------------------------------------------------------- forward

def embed(params: TinyLmParams, batch: TokenBatch) -> np.ndarray:
    """Input embeddings Z as a (b_n, d) matrix in sequence-major token order."""
    batch.validate(params.config)
    rows = []
    for seq in batch.sequences:
        z = params["tok_emb"][list(seq)]
        if params.config.positional_mode == "absolute":
            z = z + params["pos_emb"][: len(seq)]
        rows.append(z)
    return np.concatenate(rows, axis=0)


def first_layer_query_inputs(params: TinyLmParams, tokens, positions=None) -> np.ndarray:
    """Rows fed to the first-layer query projection for (token, position) pairs.

    This is the normalized embedding the query gradient is built from.  In
    rotary mode the position does not enter.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    z = params["tok_emb"][tokens]
    if params.config.positional_mode == "absolute":
        if positions is None:
            positions = np.zeros_like(tokens)
        positions = np.asarray(positions, dtype=np.int64)
        if positions.size and positions.max() >= params.config.max_seq_len:
            raise SequenceTooLong("position beyond max_seq_len")
        z = z + params["pos_emb"][positions]
    a, _ = _layer_norm(z, params[layer_key(0, "ln1.g")], params[layer_key(0, "ln1.b")])
    return a


@dataclass
class ForwardCache:
    tokens: np.ndarray
    mask: np.ndarray
    layers: list
    final: tuple
    rope: tuple | None


def forward(params: TinyLmParams, batch: TokenBatch, lora: LoraFactors | None = None):
    """Logits of shape (b, n, vocab) plus the activation cache for ``backward``."""
    cfg = params.config
    batch.validate(cfg)
    _check_lora(params, lora)
    lora_map = {base: (A, B) for base, A, B in lora.pairs()} if lora is not None else {}
    tokens, mask = batch.padded()
    b, n = tokens.shape
    H, dh = cfg.num_heads, cfg.head_dim

    h = params["tok_emb"][tokens]
    if cfg.positional_mode == "absolute":
        h = h + params["pos_emb"][:n]
    rope = rotary_tables(n, dh) if cfg.positional_mode == "rotary" else None
    causal_bias = np.where(np.tril(np.ones((n, n), dtype=bool)), 0.0, -np.inf)

    layer_caches = []
    for k in range(cfg.num_layers):
        a, ln1 = _layer_norm(h, params[layer_key(k, "ln1.g")], params[layer_key(k, "ln1.b")])
        q, qa = _project(a, params, lora_map, layer_key(k, "wq"))
        kk, ka = _project(a, params, lora_map, layer_key(k, "wk"))
        v, va = _project(a, params, lora_map, layer_key(k, "wv"))
        qh, kh, vh = _split_heads(q, H), _split_heads(kk, H), _split_heads(v, H)
        if rope is not None:
            qh, kh = _rotate(qh, *rope), _rotate(kh, *rope)
        s = qh @ kh.transpose(0, 1, 3, 2)
        s *= 1.0 / np.sqrt(dh)
        s += causal_bias
        s -= s.max(-1, keepdims=True)
        p = np.exp(s, out=s)
        p /= p.sum(-1, keepdims=True)
        o = _merge_heads(p @ vh)
        attn, oa = _project(o, params, lora_map, layer_key(k, "wo"))
        h = h + attn
        m, ln2 = _layer_norm(h, params[layer_key(k, "ln2.g")], params[layer_key(k, "ln2.b")])
        u = m @ params[layer_key(k, "mlp.w1")] + params[layer_key(k, "mlp.b1")]
        g, t = _gelu(u)
        h = h + g @ params[layer_key(k, "mlp.w2")] + params[layer_key(k, "mlp.b2")]
        layer_caches.append(dict(a=a, ln1=ln1, qh=qh, kh=kh, vh=vh, p=p, o=o,
                                 lora_in={"wq": qa, "wk": ka, "wv": va, "wo": oa},
                                 m=m, ln2=ln2, u=u, g=g, t=t))
    f, lnf = _layer_norm(h, params["lnf.g"], params["lnf.b"])
    logits = f @ params["head.w"] + params["head.b"]
    return logits, ForwardCache(tokens, mask, layer_caches, (f, lnf), rope)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _target_mask(mask):
    # position t predicts token t+1 when that token exists
    valid = np.zeros_like(mask)
    valid[:, :-1] = mask[:, 1:]
    return valid


def loss(logits: np.ndarray, batch: TokenBatch) -> float:
    """Summed next-token negative log-likelihood over every sequence."""
    tokens, mask = batch.padded()
    if logits.shape[:2] != tokens.shape:
        raise ShapeError(f"logits shape {logits.shape} does not match batch {tokens.shape}")
    valid = _target_mask(mask)
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return float(-(picked * valid).sum())


def token_count(batch: TokenBatch) -> int:
    """Number of next-token predictions in the batch."""
    return sum(max(n - 1, 0) for n in batch.lengths)


# ---------------------------------------------------------------- backward

def loss_and_grads(params: TinyLmParams, batch: TokenBatch, lora: LoraFactors | None = None,
                   scale: float = 1.0):
    """Loss (summed, times ``scale``) and gradients of every base and adapter tensor."""
    cfg = params.config
    logits, cache = forward(params, batch, lora)
    tokens, mask = cache.tokens, cache.mask
    b, n = tokens.shape
    H, dh = cfg.num_heads, cfg.head_dim
    lora_map = {base: (A, B) for base, A, B in lora.pairs()} if lora is not None else {}

    valid = _target_mask(mask)
    probs = softmax(logits)
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    picked = np.take_along_axis(probs, targets[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        nll = -np.log(np.where(valid, picked, 1.0))
    value = float(nll.sum()) * scale
    if not np.isfinite(value):
        # recompute through log-softmax before giving up on tiny probabilities
        value = loss(logits, batch) * scale
        if not np.isfinite(value):
            raise NumericalError("non-finite loss")

    dlogits = probs.copy()
    np.put_along_axis(dlogits, targets[..., None],
                      np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= (valid * scale)[..., None]

    grads = {}
    f, lnf = cache.final
    d = cfg.embed_dim
    grads["head.w"] = f.reshape(-1, d).T @ dlogits.reshape(-1, cfg.vocab_size)
    grads["head.b"] = dlogits.reshape(-1, cfg.vocab_size).sum(0)
    dh_, grads["lnf.g"], grads["lnf.b"] = _layer_norm_backward(
        dlogits @ params["head.w"].T, params["lnf.g"], lnf)

    causal = np.tril(np.ones((n, n), dtype=bool))
    lora_grads = {}

    def weight_grads(key, x, dy, xa):
        gW = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
        grads[key] = gW
        if key in lora_map:
            A, B = lora_map[key]
            lora_grads[key + ".A"] = gW @ B.T
            lora_grads[key + ".B"] = A.T @ gW
        return dy @ _effective(params, lora_map, key).T

    for k in reversed(range(cfg.num_layers)):
        c = cache.layers[k]
        # MLP sub-block
        grads[layer_key(k, "mlp.w2")] = c["g"].reshape(-1, cfg.mlp_hidden).T @ dh_.reshape(-1, d)
        grads[layer_key(k, "mlp.b2")] = dh_.reshape(-1, d).sum(0)
        du = (dh_ @ params[layer_key(k, "mlp.w2")].T) * _gelu_grad(c["u"], c["t"])
        grads[layer_key(k, "mlp.w1")] = c["m"].reshape(-1, d).T @ du.reshape(-1, cfg.mlp_hidden)
        grads[layer_key(k, "mlp.b1")] = du.reshape(-1, cfg.mlp_hidden).sum(0)
        dm = du @ params[layer_key(k, "mlp.w1")].T
        dx, grads[layer_key(k, "ln2.g")], grads[layer_key(k, "ln2.b")] = _layer_norm_backward(
            dm, params[layer_key(k, "ln2.g")], c["ln2"])
        dh_ = dh_ + dx
        # attention sub-block
        do = weight_grads(layer_key(k, "wo"), c["o"], dh_, c["lora_in"]["wo"])
        doh = _split_heads(do, H)
        p = c["p"]
        dp = doh @ c["vh"].transpose(0, 1, 3, 2)
        dvh = p.transpose(0, 1, 3, 2) @ doh
        ds = p * (dp - (dp * p).sum(-1, keepdims=True))
        ds = np.where(causal, ds, 0.0) / np.sqrt(dh)
        dqh = ds @ c["kh"]
        dkh = ds.transpose(0, 1, 3, 2) @ c["qh"]
        if cache.rope is not None:
            dqh, dkh = _unrotate(dqh, *cache.rope), _unrotate(dkh, *cache.rope)
        a = c["a"]
        da = weight_grads(layer_key(k, "wq"), a, _merge_heads(dqh), None)
        da = da + weight_grads(layer_key(k, "wk"), a, _merge_heads(dkh), None)
        da = da + weight_grads(layer_key(k, "wv"), a, _merge_heads(dvh), None)
        dx, grads[layer_key(k, "ln1.g")], grads[layer_key(k, "ln1.b")] = _layer_norm_backward(
            da, params[layer_key(k, "ln1.g")], c["ln1"])
        dh_ = dh_ + dx

    dE = np.zeros_like(params["tok_emb"])
    np.add.at(dE, tokens.reshape(-1), dh_.reshape(-1, d))
    grads["tok_emb"] = dE
    if cfg.positional_mode == "absolute":
        dP = np.zeros_like(params["pos_emb"])
        dP[:n] = dh_.sum(0)
        grads["pos_emb"] = dP
    return value, grads, lora_grads


def trainable_names(params: TinyLmParams, mode: PeftMode, lora: LoraFactors | None = None) -> list[str]:
    if isinstance(mode, FullFT):
        return params.names()
    if isinstance(mode, Selective):
        prefixes = tuple(f"layers.{k}." for k in mode.layers)
        return [nm for nm in params.names() if nm.startswith(prefixes)]
    if isinstance(mode, Lora):
        if lora is None:
            raise ShapeError("lora mode needs lora factors")
        return list(lora.tensors)
    raise TypeError(f"unknown peft mode {mode!r}")


@dataclass
class GradientCapture:
    """What the adversary observes: per-trainable-tensor gradients of one batch."""

    peft_mode: PeftMode
    grads: dict[str, np.ndarray]
    b: int
    b_n: int

    @property
    def query_grad_key(self) -> str:
        key = layer_key(0, "wq")
        return key + ".A" if isinstance(self.peft_mode, Lora) else key

    @property
    def first_layer_query_grad(self) -> np.ndarray:
        try:
            return self.grads[self.query_grad_key]
        except KeyError:
            raise ShapeError(
                f"capture under {self.peft_mode} has no first-layer query gradient") from None

    def copy(self) -> "GradientCapture":
        return GradientCapture(self.peft_mode, {k: v.copy() for k, v in self.grads.items()},
                               self.b, self.b_n)

    def equal(self, other: "GradientCapture") -> bool:
        return (self.peft_mode == other.peft_mode and self.b == other.b and self.b_n == other.b_n
                and self.grads.keys() == other.grads.keys()
                and all(np.array_equal(v, other.grads[k]) for k, v in self.grads.items()))


def backward(params: TinyLmParams, batch: TokenBatch, lora: LoraFactors | None = None,
             mode: PeftMode = FullFT(), scale: float = 1.0) -> GradientCapture:
    mode.validate(params.config)
    if isinstance(mode, Lora) and lora is None:
        raise ShapeError("lora mode needs lora factors")
    _, grads, lora_grads = loss_and_grads(params, batch, lora, scale)
    if isinstance(mode, Lora):
        selected = lora_grads
    else:
        selected = {nm: grads[nm] for nm in trainable_names(params, mode)}
    for name, g in selected.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    return GradientCapture(mode, selected, batch.b, batch.b_n)


# ---------------------------------------------------------------- merging and decoding

def merge_lora(params: TinyLmParams, lora: LoraFactors) -> TinyLmParams:
    _check_lora(params, lora)
    merged = params.copy()
    for base, A, B in lora.pairs():
        merged.tensors[base] = merged.tensors[base] + A @ B
    return merged


def apply_delta(params: TinyLmParams, delta: dict[str, np.ndarray]) -> TinyLmParams:
    """Pretrained weights plus an additive update (absent tensors are unchanged)."""
    merged = params.copy()
    for name, dv in delta.items():
        if merged.tensors[name].shape != dv.shape:
            raise ShapeError(f"delta for {name} has shape {dv.shape}")
        merged.tensors[name] = merged.tensors[name] + dv
    return merged


def next_token_logits(params: TinyLmParams, sequence, lora: LoraFactors | None = None) -> np.ndarray:
    logits, _ = forward(params, TokenBatch.of([sequence]), lora)
    return logits[0, -1]


def generate(params: TinyLmParams, prompt, max_new: int, stop_tokens=(),
             lora: LoraFactors | None = None) -> list[int]:
    """Greedy decoding; ties go to the lowest token id; the stop token is emitted."""
    seq = list(prompt)
    if not seq:
        raise SequenceTooShort("empty prompt")
    n_max = params.config.max_seq_len
    if len(seq) >= n_max:
        raise SequenceTooLong(f"prompt of {len(seq)} tokens leaves no room (max {n_max})")
    stop = set(stop_tokens)
    out = []
    for _ in range(max_new):
        if len(seq) >= n_max:
            break
        tok = int(np.argmax(next_token_logits(params, seq, lora)))
        out.append(tok)
        seq.append(tok)
        if tok in stop:
            break
    return out


def perplexity(params: TinyLmParams, sequence, lora: LoraFactors | None = None) -> float:
    if len(sequence) < 2:
        raise SequenceTooShort("perplexity needs at least two tokens")
    batch = TokenBatch.of([sequence])
    logits, _ = forward(params, batch, lora)
    return float(np.exp(loss(logits, batch) / (len(sequence) - 1)))


def perplexities(params: TinyLmParams, sequences) -> np.ndarray:
    """Perplexity of several sequences with one padded forward pass."""
    batch = TokenBatch.of(sequences)
    if min(batch.lengths) < 2:
        raise SequenceTooShort("perplexity needs at least two tokens")
    logits, cache = forward(params, batch)
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    targets = np.zeros_like(cache.tokens)
    targets[:, :-1] = cache.tokens[:, 1:]
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    nll = -(picked * _target_mask(cache.mask)).sum(1)
    return np.exp(nll / (np.asarray(batch.lengths) - 1))
