"""Defense wrappers (subsample ensembles, permutation averaging, filtering)
and the suspicious-transaction filter classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import ClientSequence, MccCatalog, ValidationError, apply_edits
from .features import calendar_tokens
from .gbdt import LOGISTIC, GbdtConfig, GbdtModel, train_gbdt
from .models import ScoreModel

N_DECILES = 10
FILTER_DIM = N_DECILES + 4  # decile one-hot, amount, mcc percentile, hour, dow


def _subseq(seq: ClientSequence, positions: np.ndarray) -> ClientSequence:
    return ClientSequence(seq.client_id, seq.mcc[positions], seq.amount[positions],
                          seq.currency[positions], seq.timestamp[positions],
                          label=seq.label, validate=False)


def _keep_count(share: float, t: int) -> int:
    return max(1, math.ceil(share * t))


@dataclass
class SubsampleEnsembleModel(ScoreModel):
    """Average of base scores over `repeats` subsequences keeping a `share`
    of transactions, time order preserved."""

    base: ScoreModel
    share: float = 0.9
    repeats: int = 9
    seed: int = 0

    kind = "subsample_ensemble"

    def __post_init__(self):
        if not (0 < self.share <= 1):
            raise ValidationError("share must be in (0, 1]")

    def _draw(self, seq, rng):
        keep = _keep_count(self.share, len(seq))
        return [np.sort(rng.permutation(len(seq))[:keep])
                for _ in range(self.repeats)]

    def score_batch(self, seqs) -> np.ndarray:
        draws = [self._draw(s, np.random.default_rng(self.seed)) for s in seqs]
        total = np.zeros(len(seqs))
        for j in range(self.repeats):
            subs = [_subseq(s, draws[i][j]) for i, s in enumerate(seqs)]
            total += self.base.score_batch(subs)
        return total / self.repeats


@dataclass
class NnMixModel(ScoreModel):
    """Subsample-and-permute averaging: each retained subsequence is also
    randomly permuted before scoring."""

    base: ScoreModel
    share: float = 0.9
    runs: int = 10
    seed: int = 0

    kind = "nn_mix"

    def __post_init__(self):
        if not (0 < self.share <= 1):
            raise ValidationError("share must be in (0, 1]")

    def _draw(self, seq, rng):
        keep = _keep_count(self.share, len(seq))
        out = []
        for _ in range(self.runs):
            kept = np.sort(rng.permutation(len(seq))[:keep])
            out.append(kept[rng.permutation(keep)])
        return out

    def score_batch(self, seqs) -> np.ndarray:
        draws = [self._draw(s, np.random.default_rng(self.seed)) for s in seqs]
        total = np.zeros(len(seqs))
        for j in range(self.runs):
            subs = [_subseq(s, draws[i][j]) for i, s in enumerate(seqs)]
            total += self.base.score_batch(subs)
        return total / self.runs


@dataclass
class PermutationAverageModel(ScoreModel):
    """Mean of base scores over uniform random permutations of the full
    sequence. For a permutation-invariant base this equals the base score."""

    base: ScoreModel
    n_perm: int = 1
    seed: int = 0

    kind = "permutation_average"

    def __post_init__(self):
        if self.n_perm < 1:
            raise ValidationError("n_perm must be >= 1")

    def score_batch(self, seqs) -> np.ndarray:
        total = np.zeros(len(seqs))
        rngs = [np.random.default_rng(self.seed) for _ in seqs]
        for _ in range(self.n_perm):
            subs = [_subseq(s, rngs[i].permutation(len(s)))
                    for i, s in enumerate(seqs)]
            total += self.base.score_batch(subs)
        return total / self.n_perm


def subsample_ensemble_score(base, seq, share=0.9, repeats=9, seed=0) -> float:
    return SubsampleEnsembleModel(base, share, repeats, seed).score(seq)


def nn_mix_score(base, seq, runs=10, share=0.9, seed=0) -> float:
    return NnMixModel(base, share, runs, seed).score(seq)


def permutation_average_score(base, seq, n_perm=1, seed=0) -> float:
    return PermutationAverageModel(base, n_perm, seed).score(seq)


# ---------------------------------------------------------------------------
# Filter classifier.

@dataclass
class FilterModel:
    """Per-transaction suspicion scorer: a logistic boosting over MCC
    frequency-rank decile (one-hot), amount, amount percentile within its
    MCC, hour and day of week."""

    gbdt: GbdtModel
    mcc_decile: np.ndarray      # mcc id -> decile bucket (unobserved -> 9)
    mcc_samples: dict           # mcc id -> sorted amount samples
    theta: float = 0.5
    manifest: dict = field(default_factory=dict)

    def features(self, seq: ClientSequence) -> np.ndarray:
        t = len(seq)
        hour, _, dow, _ = calendar_tokens(seq.timestamp)
        deciles = self.mcc_decile[np.clip(seq.mcc, 0, len(self.mcc_decile) - 1)]
        onehot = np.zeros((t, N_DECILES))
        onehot[np.arange(t), deciles] = 1.0
        pct = np.full(t, 0.5)
        for m in np.unique(seq.mcc):
            samples = self.mcc_samples.get(int(m))
            if samples is None or len(samples) == 0:
                continue
            rows = seq.mcc == m
            pct[rows] = np.searchsorted(samples, seq.amount[rows],
                                        side="right") / len(samples)
        return np.column_stack([onehot, seq.amount, pct,
                                hour.astype(np.float64), dow.astype(np.float64)])

    def suspicion(self, seq: ClientSequence) -> np.ndarray:
        return self.gbdt.predict(self.features(seq))

    def to_doc(self) -> dict:
        return {
            "gbdt": self.gbdt.to_doc(),
            "mcc_decile": self.mcc_decile.tolist(),
            "mcc_samples": {str(m): s.tolist() for m, s in
                            sorted(self.mcc_samples.items())},
            "theta": self.theta,
            "manifest": self.manifest,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "FilterModel":
        return cls(
            gbdt=GbdtModel.from_doc(doc["gbdt"]),
            mcc_decile=np.array(doc["mcc_decile"], dtype=np.int64),
            mcc_samples={int(m): np.array(s, dtype=np.float64)
                         for m, s in doc["mcc_samples"].items()},
            theta=doc["theta"],
            manifest=doc["manifest"],
        )


def _mcc_deciles(catalog: MccCatalog) -> np.ndarray:
    freq = catalog.frequencies()
    order = np.lexsort((np.arange(len(freq)), -freq))
    deciles = np.full(len(freq), N_DECILES - 1, dtype=np.int64)
    observed = [m for m in order if freq[m] > 0]
    for rank, m in enumerate(observed):
        deciles[m] = min(N_DECILES - 1, rank * N_DECILES // max(1, len(observed)))
    return deciles


def train_filter(clean_seqs, attack_generators, catalog: MccCatalog,
                 seed: int = 0, theta: float = 0.5,
                 config: GbdtConfig = GbdtConfig(n_trees=100, max_depth=4),
                 negative_ratio: int = 4) -> FilterModel:
    """Label transactions introduced by the supplied attack generators as 1,
    untouched ones as 0 (negatives downsampled to `negative_ratio`:1), then
    train a logistic boosting. Held-out precision/recall at theta go into
    the manifest."""
    if len(attack_generators) < 2:
        raise ValidationError("need at least 2 attack generators")
    model = FilterModel(
        gbdt=GbdtModel(loss=LOGISTIC, base_score=0.0, learning_rate=config.learning_rate),
        mcc_decile=_mcc_deciles(catalog),
        mcc_samples={m: e.samples for m, e in catalog.entries.items()},
        theta=theta,
        manifest={"attacks": [getattr(g, "__name__", repr(g))
                              for g in attack_generators],
                  "negative_ratio": negative_ratio, "seed": seed},
    )
    rng = np.random.default_rng(seed)
    pos_rows, neg_rows = [], []
    for seq in clean_seqs:
        for gen in attack_generators:
            el = gen(seq)
            attacked = apply_edits(seq, el)
            feats = model.features(attacked)
            touched = np.zeros(len(attacked), dtype=bool)
            for e in el.edits:
                if e.position is not None:
                    touched[e.position] = True
            touched[len(seq):] = True  # appended tail
            pos_rows.append(feats[touched])
            neg_rows.append(feats[~touched])
    pos = np.concatenate(pos_rows) if pos_rows else np.empty((0, FILTER_DIM))
    neg = np.concatenate(neg_rows)
    if len(pos) == 0:
        raise ValidationError("attack generators produced no edited transactions")
    n_neg = min(len(neg), negative_ratio * len(pos))
    neg = neg[np.sort(rng.choice(len(neg), size=n_neg, replace=False))]
    x = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    perm = rng.permutation(len(x))
    x, y = x[perm], y[perm]
    n_hold = max(1, len(x) // 5)
    gbdt = train_gbdt(x[:-n_hold], y[:-n_hold], config, loss=LOGISTIC)
    model.gbdt = gbdt
    pred = gbdt.predict(x[-n_hold:]) > theta
    actual = y[-n_hold:] > 0.5
    tp = int(np.sum(pred & actual))
    model.manifest["holdout_precision"] = tp / max(1, int(pred.sum()))
    model.manifest["holdout_recall"] = tp / max(1, int(actual.sum()))
    return model


@dataclass
class FilteredModel(ScoreModel):
    """Drop transactions whose suspicion exceeds theta before scoring; if
    everything would drop, keep the ceil(T/10) least suspicious."""

    filter_model: FilterModel
    base: ScoreModel
    theta: float = 0.5

    kind = "filtered"

    def _kept(self, seq: ClientSequence) -> np.ndarray:
        suspicion = self.filter_model.suspicion(seq)
        kept = np.flatnonzero(suspicion <= self.theta)
        if len(kept) == 0:
            n_keep = math.ceil(len(seq) / 10)
            kept = np.sort(np.argsort(suspicion, kind="stable")[:n_keep])
        return kept

    def score_batch(self, seqs) -> np.ndarray:
        return self.base.score_batch([_subseq(s, self._kept(s)) for s in seqs])


def filter_defense_score(filter_model: FilterModel, base: ScoreModel,
                         seq: ClientSequence, theta: float = 0.5) -> float:
    return FilteredModel(filter_model, base, theta).score(seq)
