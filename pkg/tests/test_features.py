"""Tokenization, amount binning and aggregate feature recipes."""

import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from txadv.data import (ClientSequence, SynthConfig, ValidationError,
                        build_catalog, generate_synthetic)
from txadv.features import (FULL_MODE, ROBUST_MODE, AggregateSpec,
                            aggregate_features, aggregate_matrix,
                            calendar_tokens, fit_amount_binner, tokenize)


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic(SynthConfig(n_clients=100, seq_len=50,
                                          n_mcc=30, seed=12))


@pytest.fixture(scope="module")
def catalog(ds):
    return build_catalog(ds)


def test_calendar_tokens_match_utc_datetime():
    rng = np.random.default_rng(0)
    ts = rng.integers(1_500_000_000, 1_700_000_000, size=500)
    hour, day, dow, month = calendar_tokens(ts)
    for i in (0, 10, 99, 499):
        dt = datetime.datetime.fromtimestamp(int(ts[i]),
                                             tz=datetime.timezone.utc)
        assert hour[i] == dt.hour
        assert day[i] == dt.day - 1
        assert dow[i] == dt.weekday()
        assert month[i] == dt.month - 1


def test_amount_binner_quantile_edges_and_interval(ds):
    binner = fit_amount_binner(ds.sequences)
    assert len(binner.edges) == 99
    assert np.all(np.diff(binner.edges) >= 0)
    amounts = np.concatenate([s.amount for s in ds.sequences])
    bins = binner.bin(amounts)
    assert bins.min() >= 0 and bins.max() <= 99
    # Every amount lies inside its own bin's interval.
    for a in amounts[:200]:
        b = int(binner.bin(np.array([a]))[0])
        lo, hi = binner.bin_interval(b)
        assert lo <= a <= hi
    with pytest.raises(ValidationError):
        fit_amount_binner([ds.sequences[0]][:0] or
                          [ClientSequence("x", np.array([1]),
                                          np.array([1.0]), np.array([0]),
                                          np.array([1], dtype=np.int64))])


def test_tokenize_produces_all_channels(ds):
    binner = fit_amount_binner(ds.sequences)
    toks = tokenize(ds.sequences[0], binner)
    assert len(toks) == len(ds.sequences[0])
    for t in toks:
        for ch in ("mcc", "currency", "amount_bin", "hour", "day",
                   "day_of_week", "month"):
            assert isinstance(getattr(t, ch), int)


def test_aggregate_spec_dimensions_and_slotting(catalog):
    full = AggregateSpec.fit(catalog, FULL_MODE)
    robust = AggregateSpec.fit(catalog, ROBUST_MODE)
    assert full.dim == 3 * 132 + 4
    assert robust.dim == 48
    freq = catalog.frequencies()
    observed = [m for m in full.top_mccs if m != -1]
    # Slots are ordered by frequency, ties broken by lower MCC id.
    for a, b in zip(observed, observed[1:]):
        assert (freq[a], -a) >= (freq[b], -b)
    assert len(full.feature_names()) == full.dim
    assert len(robust.feature_names()) == robust.dim
    with pytest.raises(ValidationError):
        AggregateSpec.fit(catalog, "fancy")


def test_full_aggregate_features_match_manual_oracle(catalog):
    spec = AggregateSpec.fit(catalog, FULL_MODE)
    seq = ClientSequence("c", np.array([spec.top_mccs[0], spec.top_mccs[0],
                                        spec.top_mccs[1]]),
                         np.array([10.0, 30.0, 7.0]),
                         np.zeros(3, dtype=np.int64),
                         np.array([0, 100, 200], dtype=np.int64))
    f = aggregate_features(seq, spec)
    assert f[0] == 2            # count of slot-0 mcc
    assert f[1] == 40.0         # amount sum
    assert f[2] == 20.0         # amount mean
    assert f[3] == 1 and f[4] == 7.0 and f[5] == 7.0
    assert np.all(f[6:3 * 132] == 0)


def test_robust_features_ignore_amount_and_mcc_substitutions(catalog):
    spec = AggregateSpec.fit(catalog, ROBUST_MODE)
    rng = np.random.default_rng(5)
    ts = np.sort(rng.integers(1_600_000_000, 1_610_000_000, size=40))
    base = ClientSequence("c", rng.integers(0, 30, size=40),
                          rng.uniform(1, 50, size=40),
                          rng.integers(0, 3, size=40), ts)
    twisted = ClientSequence("c", rng.integers(0, 30, size=40),
                             rng.uniform(1, 50, size=40),
                             base.currency, ts)
    assert np.array_equal(aggregate_features(base, spec),
                          aggregate_features(twisted, spec))


def test_aggregate_features_are_permutation_invariant(ds, catalog):
    rng = np.random.default_rng(9)
    for mode in (FULL_MODE, ROBUST_MODE):
        spec = AggregateSpec.fit(catalog, mode)
        s = ds.sequences[3]
        p = rng.permutation(len(s))
        shuffled = ClientSequence(s.client_id, s.mcc[p], s.amount[p],
                                  s.currency[p], s.timestamp[p],
                                  validate=False)
        assert np.array_equal(aggregate_features(s, spec),
                              aggregate_features(shuffled, spec))


def test_aggregate_matrix_stacks_row_features(ds, catalog):
    spec = AggregateSpec.fit(catalog, FULL_MODE)
    seqs = ds.sequences[:7]
    x = aggregate_matrix(seqs, spec)
    assert x.shape == (7, spec.dim)
    for i, s in enumerate(seqs):
        assert np.array_equal(x[i], aggregate_features(s, spec))


@settings(max_examples=100, deadline=None)
@given(st.integers(1_400_000_000, 1_800_000_000))
def test_calendar_token_ranges(ts):
    hour, day, dow, month = calendar_tokens(np.array([ts]))
    assert 0 <= hour[0] < 24
    assert 0 <= day[0] < 31
    assert 0 <= dow[0] < 7
    assert 0 <= month[0] < 12
