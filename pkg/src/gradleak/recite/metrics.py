"""Prefix and PII recovery rates."""

from __future__ import annotations

from dataclasses import dataclass

from gradleak.errors import InvalidDenominator


@dataclass(frozen=True)
class Metrics:
    R_prefix: float
    R_pii: float
    N_P: int
    n_prefix: int
    n_pii: int

    def to_dict(self) -> dict:
        return {"R_prefix": self.R_prefix, "R_pii": self.R_pii, "N_P": self.N_P,
                "n_prefix": self.n_prefix, "n_pii": self.n_pii}


def compute_metrics(reports, N_P: int) -> Metrics:
    """Percentages of the ``N_P`` planted targets recovered.

    A target counts once however many reports point at it.
    """
    if N_P < 1:
        raise InvalidDenominator("N_P must be >= 1")
    prefix = {r.target_id for r in reports if r.prefix_success and r.target_id is not None}
    pii = {r.target_id for r in reports if r.pii_success and r.target_id is not None}
    if len(prefix) > N_P or len(pii) > N_P:
        raise InvalidDenominator("more recovered targets than planted ones")
    return Metrics(100.0 * len(prefix) / N_P, 100.0 * len(pii) / N_P, N_P, len(prefix), len(pii))
