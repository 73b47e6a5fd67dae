"""Shared test oracles, kept independent of the library's pricing code."""

import numpy as np

from impactlab.market import MarketParams, fundamental_path
from impactlab.payoffs import PayoffSpec, evaluate_payoff


def all_paths(n: int) -> np.ndarray:
    """All 2^n shock vectors, one per row."""
    bits = (np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1
    return np.where(bits == 1, 1, -1)


def crr_price(params: MarketParams, spec: PayoffSpec) -> float:
    """Frictionless complete-market price: plain average over all paths
    (the symmetric walk is the unique martingale measure)."""
    n = params.n_steps
    vals = [
        evaluate_payoff(spec, fundamental_path(row, params)) for row in all_paths(n)
    ]
    return float(np.mean(vals))
