"""Feature pipelines: categorical/temporal tokenization for the recurrent
model and aggregate vectors for the boosting models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import ClientSequence, Dataset, MccCatalog, ValidationError

N_AMOUNT_BINS = 100
FULL_MODE = "full"
ROBUST_MODE = "robust"
FULL_TOP_MCCS = 132
FULL_DIM = 3 * FULL_TOP_MCCS + 4  # per-MCC count/sum/mean + 4 globals = 400
ROBUST_DIM = 24 + 7 + 12 + 4 + 1  # hour/dow/month counts + gap stats + length

CHANNELS = ("mcc", "currency", "amount_bin", "hour", "day", "day_of_week", "month")


@dataclass
class AmountBinner:
    """Quantile binner: 99 interior edges define 100 bins; bin(x) counts
    edges <= x, so out-of-range amounts clamp to the first/last bin."""

    edges: np.ndarray  # 99 nondecreasing quantile boundaries
    amount_min: float
    amount_max: float

    def bin(self, amounts) -> np.ndarray:
        return np.searchsorted(self.edges, np.asarray(amounts, dtype=np.float64),
                               side="right").astype(np.int64)

    def bin_interval(self, b: int):
        """Amount range represented by bin b, using the training min/max at
        the extremes."""
        lo = self.amount_min if b == 0 else float(self.edges[b - 1])
        hi = self.amount_max if b >= len(self.edges) else float(self.edges[b])
        return lo, hi

    def to_doc(self) -> dict:
        return {"edges": self.edges.tolist(),
                "amount_min": self.amount_min, "amount_max": self.amount_max}

    @classmethod
    def from_doc(cls, doc: dict) -> "AmountBinner":
        return cls(np.array(doc["edges"], dtype=np.float64),
                   doc["amount_min"], doc["amount_max"])


def fit_amount_binner(train_seqs) -> AmountBinner:
    seqs = train_seqs.sequences if isinstance(train_seqs, Dataset) else train_seqs
    amounts = np.concatenate([s.amount for s in seqs])
    if len(amounts) < N_AMOUNT_BINS:
        raise ValidationError(f"need >= {N_AMOUNT_BINS} training amounts")
    qs = np.arange(1, N_AMOUNT_BINS) / N_AMOUNT_BINS
    edges = np.quantile(amounts, qs)
    return AmountBinner(edges, float(amounts.min()), float(amounts.max()))


@dataclass(frozen=True)
class TokenizedTransaction:
    mcc: int
    currency: int
    amount_bin: int
    hour: int
    day: int          # day of month, 0-indexed
    day_of_week: int  # Monday = 0
    month: int        # January = 0


def calendar_tokens(timestamps: np.ndarray):
    """UTC calendar fields (hour, day-of-month 0-based, weekday Mon=0,
    month 0-based) for an array of epoch-second timestamps."""
    ts = np.asarray(timestamps, dtype=np.int64)
    secs = ts.astype("datetime64[s]")
    days = secs.astype("datetime64[D]")
    months = secs.astype("datetime64[M]")
    hour = (ts // 3600) % 24
    day = (days - months).astype(np.int64)
    # 1970-01-01 was a Thursday (weekday index 3 with Monday=0).
    day_of_week = (days.astype(np.int64) + 3) % 7
    month = months.astype(np.int64) % 12
    return hour, day, day_of_week, month


def tokenize_columns(seq: ClientSequence, binner: AmountBinner) -> dict:
    """Per-channel token arrays for a whole sequence (fast path)."""
    hour, day, dow, month = calendar_tokens(seq.timestamp)
    return {
        "mcc": seq.mcc,
        "currency": seq.currency,
        "amount_bin": binner.bin(seq.amount),
        "hour": hour,
        "day": day,
        "day_of_week": dow,
        "month": month,
    }


def tokenize(seq: ClientSequence, binner: AmountBinner):
    cols = tokenize_columns(seq, binner)
    return [
        TokenizedTransaction(int(cols["mcc"][i]), int(cols["currency"][i]),
                             int(cols["amount_bin"][i]), int(cols["hour"][i]),
                             int(cols["day"][i]), int(cols["day_of_week"][i]),
                             int(cols["month"][i]))
        for i in range(len(seq))
    ]


@dataclass
class AggregateSpec:
    """Resolved aggregate-feature recipe.

    full: count/sum/mean of amounts for the top MCC slots by training
    frequency plus 4 globals. robust: calendar and count features only,
    nothing an amount/MCC substitution can reach.
    """

    mode: str
    top_mccs: list = field(default_factory=list)  # full mode slot -> mcc id
    dim: int = 0

    @classmethod
    def fit(cls, catalog: MccCatalog, mode: str = FULL_MODE,
            top_k: int = FULL_TOP_MCCS) -> "AggregateSpec":
        if mode == ROBUST_MODE:
            return cls(mode=ROBUST_MODE, top_mccs=[], dim=ROBUST_DIM)
        if mode != FULL_MODE:
            raise ValidationError(f"unknown aggregate mode {mode!r}")
        freq = catalog.frequencies()
        # Stable frequency ranking, ties by MCC id. Slots beyond the number
        # of observed MCCs stay empty (-1) and emit zeros.
        order = np.lexsort((np.arange(len(freq)), -freq))
        observed = [int(m) for m in order if freq[m] > 0][:top_k]
        slots = observed + [-1] * (top_k - len(observed))
        return cls(mode=FULL_MODE, top_mccs=slots, dim=3 * top_k + 4)

    def feature_names(self) -> list:
        if self.mode == ROBUST_MODE:
            return ([f"hour_count_{h}" for h in range(24)]
                    + [f"dow_count_{d}" for d in range(7)]
                    + [f"month_count_{m}" for m in range(12)]
                    + ["gap_mean", "gap_std", "gap_min", "gap_max", "length"])
        names = []
        for slot, m in enumerate(self.top_mccs):
            tag = f"mcc{m}" if m >= 0 else f"slot{slot}"
            names += [f"{tag}_count", f"{tag}_sum", f"{tag}_mean"]
        return names + ["total_count", "total_sum", "amount_mean", "gap_mean"]

    def to_doc(self) -> dict:
        return {"mode": self.mode, "top_mccs": list(self.top_mccs), "dim": self.dim}

    @classmethod
    def from_doc(cls, doc: dict) -> "AggregateSpec":
        return cls(mode=doc["mode"], top_mccs=list(doc["top_mccs"]), dim=doc["dim"])


def _gap_stats(timestamps: np.ndarray) -> np.ndarray:
    # Sort first so the statistics are permutation-invariant.
    ts = np.sort(timestamps)
    if len(ts) < 2:
        return np.zeros(4)
    gaps = np.diff(ts)
    return np.array([gaps.mean(), gaps.std(), gaps.min(), gaps.max()])


def aggregate_features(seq: ClientSequence, spec: AggregateSpec) -> np.ndarray:
    if spec.mode == ROBUST_MODE:
        hour, _, dow, month = calendar_tokens(seq.timestamp)
        out = np.concatenate([
            np.bincount(hour, minlength=24).astype(np.float64),
            np.bincount(dow, minlength=7).astype(np.float64),
            np.bincount(month, minlength=12).astype(np.float64),
            _gap_stats(seq.timestamp),
            [float(len(seq))],
        ])
    else:
        top = np.array(spec.top_mccs, dtype=np.int64)
        # Canonical (mcc, amount) order makes the float sums bit-identical
        # for any permutation of the same transactions.
        order = np.lexsort((seq.amount, seq.mcc))
        mcc = seq.mcc[order]
        amount = seq.amount[order]
        n = int(max(mcc.max() + 1, (top.max() + 1) if len(top) else 1))
        counts = np.bincount(mcc, minlength=n).astype(np.float64)
        sums = np.bincount(mcc, weights=amount, minlength=n)
        valid = top >= 0
        slot_counts = np.where(valid, counts[np.where(valid, top, 0)], 0.0)
        slot_sums = np.where(valid, sums[np.where(valid, top, 0)], 0.0)
        slot_means = np.divide(slot_sums, slot_counts,
                               out=np.zeros_like(slot_sums), where=slot_counts > 0)
        gaps = _gap_stats(seq.timestamp)
        globals_ = np.array([float(len(seq)), float(amount.sum()),
                             float(amount.mean()), gaps[0]])
        out = np.concatenate(
            [np.stack([slot_counts, slot_sums, slot_means], axis=1).ravel(), globals_])
    if len(out) != spec.dim:
        raise ValidationError(f"feature dim {len(out)} != spec dim {spec.dim}")
    return out


def aggregate_matrix(seqs, spec: AggregateSpec) -> np.ndarray:
    return np.stack([aggregate_features(s, spec) for s in seqs])
