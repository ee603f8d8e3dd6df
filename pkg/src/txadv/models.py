"""Scorer contract, aggregate-feature boosting scorers, ensembles,
distillation and the surrogate pool."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import ValidationError
from .features import AggregateSpec, aggregate_matrix
from .gbdt import SQUARED, GbdtConfig, GbdtModel, train_gbdt


class ScoreModel:
    """Sequence -> default probability. Scoring is pure; outputs in [0, 1]."""

    gradient_capable = False
    kind = "abstract"

    def score(self, seq) -> float:
        return float(self.score_batch([seq])[0])

    def score_batch(self, seqs) -> np.ndarray:
        raise NotImplementedError


def score_batch_parallel(model: ScoreModel, seqs, workers: int = 1) -> np.ndarray:
    """Chunked batch scoring; results are identical for any worker count
    because chunks are scored row-independently and re-assembled in order."""
    if workers <= 1 or len(seqs) <= 1:
        return model.score_batch(seqs)
    chunks = np.array_split(np.arange(len(seqs)), workers)
    chunks = [c for c in chunks if len(c)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda c: model.score_batch([seqs[i] for i in c]), chunks))
    return np.concatenate(parts)


@dataclass
class GbdtScoreModel(ScoreModel):
    """A boosting model bound to an aggregate-feature recipe."""

    gbdt: GbdtModel
    spec: AggregateSpec
    feature_subset: np.ndarray = None  # pool members see a column subset

    kind = "gbdt"

    def score_batch(self, seqs) -> np.ndarray:
        x = aggregate_matrix(seqs, self.spec)
        if self.feature_subset is not None:
            x = x[:, self.feature_subset]
        return self.gbdt.predict(x)

    def to_doc(self) -> dict:
        return {
            "kind": self.kind,
            "gbdt": self.gbdt.to_doc(),
            "spec": self.spec.to_doc(),
            "feature_subset": None if self.feature_subset is None
            else self.feature_subset.tolist(),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "GbdtScoreModel":
        subset = doc.get("feature_subset")
        return cls(
            gbdt=GbdtModel.from_doc(doc["gbdt"]),
            spec=AggregateSpec.from_doc(doc["spec"]),
            feature_subset=None if subset is None else np.array(subset, dtype=np.int64),
        )


@dataclass
class EnsembleModel(ScoreModel):
    """Weighted mean of member scores; bounded by member extremes."""

    members: list  # (ScoreModel, weight) pairs

    kind = "ensemble"

    def __post_init__(self):
        if not self.members:
            raise ValidationError("ensemble needs at least one member")
        if any(w <= 0 for _, w in self.members):
            raise ValidationError("ensemble weights must be positive")

    def score_batch(self, seqs) -> np.ndarray:
        total = sum(w for _, w in self.members)
        out = np.zeros(len(seqs))
        for m, w in self.members:
            out += w * m.score_batch(seqs)
        return out / total


@dataclass
class SurrogatePool(ScoreModel):
    """Boostings on random feature subsets; pool score = member mean."""

    members: list  # GbdtScoreModel with feature_subset set
    seed: int

    kind = "surrogate_pool"

    def score_batch(self, seqs) -> np.ndarray:
        x = aggregate_matrix(seqs, self.members[0].spec)
        preds = np.stack([
            m.gbdt.predict(x[:, m.feature_subset]) for m in self.members])
        return preds.mean(axis=0)


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation with average ranks for ties."""
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra, rb = ra - ra.mean(), rb - rb.mean()
    denom = np.sqrt((ra ** 2).sum() * (rb ** 2).sum())
    return float((ra * rb).sum() / denom) if denom > 0 else 0.0


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def distill(teacher: ScoreModel, seqs, spec: AggregateSpec,
            config: GbdtConfig = GbdtConfig(), holdout_fraction: float = 0.2,
            teacher_scores: np.ndarray = None) -> GbdtScoreModel:
    """Squared-loss boosting regressing teacher scores on aggregates.

    Records the teacher-student Spearman rank agreement on a held-out tail
    as ``student.distill_spearman``.
    """
    x = aggregate_matrix(seqs, spec)
    y = teacher.score_batch(seqs) if teacher_scores is None else teacher_scores
    n_hold = max(1, int(round(holdout_fraction * len(seqs))))
    n_fit = len(seqs) - n_hold
    if n_fit < 1:
        raise ValidationError("not enough sequences to distill")
    gbdt = train_gbdt(x[:n_fit], y[:n_fit], config, loss=SQUARED)
    student = GbdtScoreModel(gbdt=gbdt, spec=spec)
    student.distill_spearman = spearman(gbdt.predict(x[n_fit:]), y[n_fit:])
    return student


def build_surrogate_pool(seqs, teacher: ScoreModel, spec: AggregateSpec,
                         n: int = 100, seed: int = 0,
                         member_config: GbdtConfig = GbdtConfig(n_trees=30, max_depth=3),
                         subset_fraction: float = 0.5) -> SurrogatePool:
    """Distill n boostings from the teacher, each on a random 50% feature
    subset, and average them."""
    if n < 1:
        raise ValidationError("pool needs n >= 1 members")
    rng = np.random.default_rng(seed)
    x = aggregate_matrix(seqs, spec)
    y = teacher.score_batch(seqs)
    k = max(1, int(round(subset_fraction * spec.dim)))
    members = []
    for i in range(n):
        subset = np.sort(rng.choice(spec.dim, size=k, replace=False))
        cfg = replace(member_config, seed=int(rng.integers(2 ** 31)))
        gbdt = train_gbdt(x[:, subset], y, cfg, loss=SQUARED)
        members.append(GbdtScoreModel(gbdt=gbdt, spec=spec, feature_subset=subset))
    return SurrogatePool(members=members, seed=seed)


DEFENDED_KINDS = ("nn-base", "nn-mix", "boost-base", "boost-mix-2",
                  "boost-mix-5", "boost-mix-filter")


def build_defended_model(kind: str, **components) -> ScoreModel:
    """Assemble one of the named defended-model compositions.

    Expected components by kind: nn-base/nn-mix -> gru; boost-base -> boost;
    boost-mix-2 -> boost_a, boost_b; boost-mix-5 -> + robust_a..robust_c;
    boost-mix-filter -> the mix-5 set + filter_model (and optional theta).
    """
    from .defenses import FilteredModel, NnMixModel  # avoid import cycle

    def need(name):
        if name not in components:
            raise ValidationError(f"{kind} requires component {name!r}")
        return components[name]

    if kind == "nn-base":
        return need("gru")
    if kind == "nn-mix":
        return NnMixModel(base=need("gru"), seed=components.get("seed", 0))
    if kind == "boost-base":
        return need("boost")
    if kind == "boost-mix-2":
        return EnsembleModel([(need("boost_a"), 0.5), (need("boost_b"), 0.5)])
    if kind == "boost-mix-5":
        return EnsembleModel([
            (need("boost_a"), 0.5), (need("boost_b"), 0.5),
            (need("robust_a"), 1.0), (need("robust_b"), 1.0),
            (need("robust_c"), 1.0),
        ])
    if kind == "boost-mix-filter":
        base = build_defended_model(
            "boost-mix-5",
            **{k: components[k] for k in
               ("boost_a", "boost_b", "robust_a", "robust_b", "robust_c")})
        return FilteredModel(filter_model=need("filter_model"), base=base,
                             theta=components.get("theta", 0.5))
    raise ValidationError(f"unknown defended model kind {kind!r}")
