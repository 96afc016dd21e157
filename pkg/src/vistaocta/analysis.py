"""Summary statistics and protocol feasibility checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import ScanProtocol

SHORT_SURVIVAL = 0.05   # fastest target must keep this much signal at dt
LONG_DECAY = 0.5        # slowest target must lose this much by (N-1) dt


def cv(values) -> float:
    """Coefficient of variation with the n-1 normalized deviation."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise ValueError("cv needs at least two values")
    mean = arr.mean()
    if mean == 0:
        raise ValueError("cv undefined for zero mean")
    return float(arr.std(ddof=1) / mean)


def region_stats(alpha_map: np.ndarray, regions: dict) -> dict:
    """Mean rate over the defined pixels of each named region plus 'global'.

    The global entry averages over the union of the regions, so it equals the
    pixel-count weighted mean of the per-region values.
    """
    out = {}
    union = np.zeros(alpha_map.shape, bool)
    defined = np.isfinite(alpha_map)
    for name, mask in regions.items():
        sel = mask & defined
        out[name] = float(alpha_map[sel].mean()) if sel.any() else float("nan")
        union |= mask
    sel = union & defined
    out["global"] = float(alpha_map[sel].mean()) if sel.any() else float("nan")
    return out


def consistency_fit(x, y) -> float:
    """Slope of the least-squares line through the origin."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.size == 0:
        raise ValueError("inputs must be equal-length and non-empty")
    den = float((xa * xa).sum())
    if den == 0:
        raise ValueError("slope undefined for all-zero x")
    return float((xa * ya).sum() / den)


@dataclass(frozen=True)
class FeasibilityReport:
    protocol: str
    alpha_min: float
    alpha_max: float
    fast_survival: float      # exp(-alpha_max * dt)
    slow_decay: float         # 1 - exp(-alpha_min * (N-1) dt)
    fast_ok: bool
    slow_ok: bool

    @property
    def feasible(self) -> bool:
        return self.fast_ok and self.slow_ok

    def as_dict(self) -> dict:
        return {"protocol": self.protocol, "alpha_min": self.alpha_min,
                "alpha_max": self.alpha_max, "fast_survival": self.fast_survival,
                "slow_decay": self.slow_decay, "fast_ok": self.fast_ok,
                "slow_ok": self.slow_ok, "feasible": self.feasible}


def protocol_feasibility(alpha_range, proto: ScanProtocol) -> FeasibilityReport:
    """Can the protocol resolve the whole rate range?

    The fastest rate must not fully decorrelate within one interscan time
    (survival > SHORT_SURVIVAL) and the slowest must decorrelate appreciably
    by the longest effective interscan time (remaining correlation < 1 -
    LONG_DECAY, i.e. decay past half).
    """
    alpha_min, alpha_max = float(min(alpha_range)), float(max(alpha_range))
    if alpha_min <= 0 or alpha_max <= 0:
        raise ValueError("rates must be positive")
    fast_survival = float(np.exp(-alpha_max * proto.dt_ms))
    slow_remaining = float(np.exp(-alpha_min * (proto.n_repeats - 1) * proto.dt_ms))
    return FeasibilityReport(
        protocol=proto.name, alpha_min=alpha_min, alpha_max=alpha_max,
        fast_survival=fast_survival, slow_decay=1.0 - slow_remaining,
        fast_ok=fast_survival > SHORT_SURVIVAL,
        slow_ok=slow_remaining < LONG_DECAY,
    )
