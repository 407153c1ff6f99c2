"""Filter-based token extraction from a first-layer query gradient.

The query gradient of the first layer is ``X^T dY`` where the rows of ``X`` are
the normalized inputs of the batch tokens, so its column space is spanned by
those inputs.  A candidate token is declared present when its input row lies
(numerically) in that column space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gradleak.errors import ShapeError
from gradleak.pnotes.dataset import FilterSet
from gradleak.tinylm.config import NUM_RESERVED, Lora
from gradleak.tinylm.model import GradientCapture, LoraFactors, TinyLmParams, first_layer_query_inputs, layer_key

RANK_RTOL = 1e-10


def threshold_for_batch(b: int, scale: float = 1.0) -> float:
    """Residual threshold for a batch of ``b`` sequences."""
    if b < 1:
        raise ValueError("batch size must be >= 1")
    if b <= 16:
        zeta = 1e-5
    elif b <= 64:
        zeta = 1e-6
    else:
        zeta = 1e-7
    return zeta * scale


@dataclass(frozen=True)
class SpanBasis:
    U: np.ndarray  # d x k, orthonormal columns
    singular_values: np.ndarray  # all singular values, descending
    source: str = "full_grad"

    @property
    def k(self) -> int:
        return self.U.shape[1]

    @property
    def dim(self) -> int:
        return self.U.shape[0]

    def extend(self, columns: np.ndarray) -> "SpanBasis":
        """Basis of span(U) + span(columns); used to check monotonicity."""
        M = np.concatenate([self.U, np.asarray(columns, dtype=np.float64).reshape(self.dim, -1)], axis=1)
        U, s, _ = np.linalg.svd(M, full_matrices=False)
        keep = s > RANK_RTOL * s[0] if s.size and s[0] > 0 else np.zeros(0, dtype=bool)
        return SpanBasis(U[:, keep], s, self.source)


def numeric_rank(M: np.ndarray, rtol: float = RANK_RTOL) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int((s > rtol * s[0]).sum())


def span_basis(grad: np.ndarray, max_rank: int | None = None, rtol: float = RANK_RTOL,
               source: str = "full_grad") -> SpanBasis:
    """Left singular vectors of ``grad`` above ``rtol * sigma_max``, at most ``max_rank``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient has non-finite entries")
    U, s, _ = np.linalg.svd(grad, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return SpanBasis(np.zeros((grad.shape[0], 0)), s, source)
    k = int((s > rtol * s[0]).sum())
    if max_rank is not None:
        k = min(k, max_rank)
    return SpanBasis(U[:, :k].copy(), s, source)


def basis_from_capture(capture: GradientCapture, lora: LoraFactors | None = None,
                       use_ab: bool = False, cap_rank: bool = True) -> SpanBasis:
    """Span basis of the capture's first-layer query gradient.

    For LoRA captures the default basis comes from the A-gradient alone; with
    ``use_ab`` it comes from the A-gradient pushed through B, i.e. the update
    direction the factors imply for the full query weight.
    """
    grad = capture.first_layer_query_grad
    cap = capture.b_n if cap_rank else None
    if isinstance(capture.peft_mode, Lora):
        source = "lora_A_grad"
        if use_ab:
            if lora is None:
                raise ShapeError("the AB-implied basis needs the adapter factors")
            grad = grad @ lora.tensors[layer_key(0, "wq") + ".B"]
            source = "lora_AB_grad"
        if cap is not None:
            cap = min(cap, capture.peft_mode.rank)
    else:
        source = "full_grad"
    return span_basis(grad, max_rank=cap, source=source)


def residual(basis: SpanBasis, z) -> float:
    """Distance from ``z`` to span(U): ||U(U^T z) - z||."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (basis.dim,):
        raise ShapeError(f"expected a vector of length {basis.dim}, got {z.shape}")
    return float(np.linalg.norm(basis.U @ (basis.U.T @ z) - z))


def residuals(basis: SpanBasis, Z) -> np.ndarray:
    """Row-wise residuals of a (m, d) matrix."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != basis.dim:
        raise ShapeError(f"expected rows of length {basis.dim}, got {Z.shape}")
    R = Z - (Z @ basis.U) @ basis.U.T
    return np.linalg.norm(R, axis=1)


@dataclass
class CandidateEmbedder:
    """Maps (token, position) to the row the first-layer query projection sees.

    ``position_policy``: ``"auto"`` ignores positions in rotary mode and sweeps
    every position in absolute mode; ``"zero"`` tests position 0 only;
    ``"sweep"`` always sweeps.  ``normalize`` scales rows to unit length so one
    threshold fits tokens of any norm.
    """

    params: TinyLmParams
    normalize: bool = True
    position_policy: str = "auto"
    positions: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.position_policy not in ("auto", "zero", "sweep"):
            raise ValueError(f"unknown position policy {self.position_policy!r}")

    @property
    def position_free(self) -> bool:
        return self.params.config.positional_mode == "rotary"

    def tested_positions(self) -> tuple[int, ...]:
        if self.position_free or self.position_policy == "zero":
            return (0,)
        if self.positions is not None:
            return tuple(self.positions)
        return tuple(range(self.params.config.max_seq_len))

    def rows(self, tokens, positions=None) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if positions is None:
            positions = np.zeros_like(tokens)
        Z = first_layer_query_inputs(self.params, tokens, positions)
        if self.normalize:
            norms = np.linalg.norm(Z, axis=1, keepdims=True)
            Z = Z / np.where(norms > 0, norms, 1.0)
        return Z

    def min_residuals(self, basis: SpanBasis, tokens) -> np.ndarray:
        """Best residual of each token over the tested positions."""
        tokens = np.asarray(sorted(tokens) if isinstance(tokens, (set, frozenset)) else tokens,
                            dtype=np.int64)
        if tokens.size == 0:
            return np.zeros(0)
        best = np.full(tokens.size, np.inf)
        for pos in self.tested_positions():
            r = residuals(basis, self.rows(tokens, np.full(tokens.size, pos)))
            np.minimum(best, r, out=best)
        return best


@dataclass
class RecoveredTokens:
    names: list[tuple[int, float]] = field(default_factory=list)
    topics: list[tuple[int, float]] = field(default_factory=list)
    keywords: list[tuple[int, float]] = field(default_factory=list)
    zeta: float = 0.0

    @property
    def n_n(self) -> int:
        return len(self.names)

    @property
    def n_p(self) -> int:
        return len(self.topics)

    @property
    def n_k(self) -> int:
        return len(self.keywords)

    def ids(self, category: str) -> list[int]:
        return [t for t, _ in getattr(self, category)]

    def all_ids(self) -> set[int]:
        return set(self.ids("names")) | set(self.ids("topics")) | set(self.ids("keywords"))

    def to_dict(self) -> dict:
        return {c: [[int(t), float(r)] for t, r in getattr(self, c)]
                for c in ("names", "topics", "keywords")} | {"zeta": self.zeta}


def _accepted(tokens, dists, zeta):
    hits = [(int(t), float(r)) for t, r in zip(tokens, dists) if r < zeta]
    return sorted(hits, key=lambda x: (x[1], x[0]))


def filter_tokens(basis: SpanBasis, filter_set: FilterSet, zeta: float,
                  embedder: CandidateEmbedder) -> RecoveredTokens:
    """Filter-set tokens whose best residual is below ``zeta``, per category."""
    out = RecoveredTokens(zeta=zeta)
    if basis.k == 0:
        return out
    for category in ("names", "topics", "keywords"):
        tokens = sorted(getattr(filter_set, category))
        dists = embedder.min_residuals(basis, tokens)
        setattr(out, category, _accepted(tokens, dists, zeta))
    return out


def full_vocab_filter(basis: SpanBasis, zeta: float, embedder: CandidateEmbedder,
                      include_reserved: bool = False) -> set[int]:
    """Every vocabulary token whose best residual is below ``zeta``."""
    if basis.k == 0:
        return set()
    start = 0 if include_reserved else NUM_RESERVED
    tokens = np.arange(start, embedder.params.config.vocab_size)
    dists = embedder.min_residuals(basis, tokens)
    return {int(t) for t, r in zip(tokens, dists) if r < zeta}


def detect_pii_batch(recovered: RecoveredTokens) -> bool:
    return recovered.n_p >= 1
