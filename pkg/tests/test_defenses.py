"""Defensive wrappers: subsampling, permutation averaging, the
transaction-level filter and filtered scoring."""

import numpy as np
import pytest

from txadv.attacks import AttackConfig, random_attack
from txadv.data import (AttackBudget, Edit, EditList, ValidationError,
                        apply_edits)
from txadv.defenses import (FILTER_DIM, FilteredModel, FilterModel,
                            NnMixModel, PermutationAverageModel,
                            SubsampleEnsembleModel, filter_defense_score,
                            train_filter)
from txadv.models import ScoreModel


class _MeanAmountModel(ScoreModel):
    def score_batch(self, seqs):
        return np.array([s.amount.mean() for s in seqs])


@pytest.fixture(scope="module")
def filter_model(small_world):
    catalog = small_world["catalog"]
    cfg = AttackConfig(budget=AttackBudget(6), seed=1)

    def gen_a(seq):
        return random_attack(seq, cfg, catalog)

    def gen_b(seq):
        # Append-only generator: three tail transactions.
        el = gen_a(seq)
        return EditList(seq.client_id,
                        [Edit("append", e.new_mcc, e.new_amount)
                         for e in el.edits[:3]])

    return train_filter(small_world["train"][:60], [gen_a, gen_b], catalog,
                        seed=2)


def test_subsample_share_one_is_identity(small_world):
    base = small_world["model"]
    seqs = small_world["rest"][:10]
    wrapped = SubsampleEnsembleModel(base=base, share=1.0, repeats=3, seed=0)
    assert np.allclose(wrapped.score_batch(seqs), base.score_batch(seqs),
                       atol=1e-12)
    with pytest.raises(ValidationError):
        SubsampleEnsembleModel(base=base, share=0.0)


def test_subsample_preserves_time_order(small_world):
    seqs = small_world["rest"][:5]

    class OrderCheck(ScoreModel):
        def score_batch(self, inner):
            for s in inner:
                assert np.all(np.diff(s.timestamp) >= 0)
            return np.zeros(len(inner))

    SubsampleEnsembleModel(base=OrderCheck(), share=0.5,
                           repeats=4, seed=1).score_batch(seqs)


def test_permutation_average_collapses_for_invariant_base(small_world):
    base = small_world["model"]  # aggregate-based, permutation invariant
    seqs = small_world["rest"][:10]
    wrapped = PermutationAverageModel(base=base, n_perm=5, seed=3)
    assert np.max(np.abs(wrapped.score_batch(seqs)
                         - base.score_batch(seqs))) <= 1e-12
    with pytest.raises(ValidationError):
        PermutationAverageModel(base=base, n_perm=0)


def test_nn_mix_is_deterministic(small_world):
    base = _MeanAmountModel()
    seqs = small_world["rest"][:8]
    a = NnMixModel(base=base, share=0.8, runs=5, seed=2).score_batch(seqs)
    b = NnMixModel(base=base, share=0.8, runs=5, seed=2).score_batch(seqs)
    assert np.array_equal(a, b)


def test_filter_features_and_suspicion_shapes(small_world, filter_model):
    seq = small_world["rest"][0]
    feats = filter_model.features(seq)
    assert feats.shape == (len(seq), FILTER_DIM)
    susp = filter_model.suspicion(seq)
    assert susp.shape == (len(seq),)
    assert np.all((susp > 0) & (susp < 1))


def test_train_filter_requires_two_generators(small_world):
    with pytest.raises(ValidationError):
        train_filter(small_world["train"][:10], [lambda s: None],
                     small_world["catalog"])


def test_filter_manifest_records_holdout_quality(filter_model):
    m = filter_model.manifest
    assert set(m) >= {"attacks", "negative_ratio", "seed",
                      "holdout_precision", "holdout_recall"}
    assert 0 <= m["holdout_precision"] <= 1
    assert 0 <= m["holdout_recall"] <= 1
    # The filter must actually separate injected from organic transactions.
    assert m["holdout_precision"] > 0.5
    assert m["holdout_recall"] > 0.5


def test_filtered_model_drops_suspicious_transactions(small_world,
                                                      filter_model):
    base = small_world["model"]
    fm = FilteredModel(filter_model=filter_model, base=base, theta=0.5)
    seqs = small_world["rest"][:10]
    scores = fm.score_batch(seqs)
    assert scores.shape == (10,)

    class LengthProbe(ScoreModel):
        def score_batch(self, inner):
            return np.array([float(len(s)) for s in inner])

    # With an impossible threshold everything is suspicious; the fallback
    # keeps the ceil(T/10) least suspicious transactions.
    probe = FilteredModel(filter_model=filter_model, base=LengthProbe(),
                          theta=-1.0)
    lens = probe.score_batch(seqs)
    for s, n in zip(seqs, lens):
        assert n == int(np.ceil(len(s) / 10))


def test_filter_round_trip(filter_model, small_world):
    again = FilterModel.from_doc(filter_model.to_doc())
    seq = small_world["rest"][1]
    assert np.array_equal(filter_model.suspicion(seq), again.suspicion(seq))


def test_filter_defense_score_matches_wrapper(small_world, filter_model):
    base = small_world["model"]
    seq = small_world["rest"][2]
    direct = filter_defense_score(filter_model, base, seq)
    wrapped = FilteredModel(filter_model=filter_model, base=base).score(seq)
    assert direct == pytest.approx(wrapped, abs=1e-12)
