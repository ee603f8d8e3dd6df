"""Shared fixtures.

`world` is the full desk-scale pipeline (data, GRU, distilled boostings,
robust members, filter, defended compositions) used by the end-to-end
behavioural tests; it is built once per session.  `small_world` is a cheap
counterpart for module-level tests.
"""

import os

import numpy as np
import pytest

from txadv.attacks import (AttackConfig, baseline_transplant_attack,
                           random_attack, run_attack)
from txadv.data import (AttackBudget, SynthConfig, build_catalog,
                        generate_synthetic)
from txadv.defenses import train_filter
from txadv.features import ROBUST_MODE, AggregateSpec, aggregate_matrix
from txadv.gbdt import LOGISTIC, GbdtConfig, train_gbdt
from txadv.gru import GruHyper, train_gru
from txadv.models import GbdtScoreModel, build_defended_model, distill


# Per-client work is keyed by client id, so results do not depend on the
# worker count; use the machine's cores for the expensive fixtures.
WORKERS = min(8, os.cpu_count() or 1)


def balanced_rows(x, y, seed, ratio=2):
    """All positives plus at most ratio x as many downsampled negatives."""
    rng = np.random.default_rng(seed)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    keep = rng.choice(neg, size=min(len(neg), ratio * len(pos)), replace=False)
    idx = np.sort(np.concatenate([pos, keep]))
    return x[idx], y[idx]


@pytest.fixture(scope="session")
def world():
    ds = generate_synthetic(SynthConfig(n_clients=2000, seq_len=300,
                                        n_mcc=100, seed=11))
    catalog = build_catalog(ds)
    train = ds.sequences[:1200]
    evalc = ds.sequences[1200:]
    cohort = evalc[:200]

    gru = train_gru(train, GruHyper(seed=1, epochs=16))

    spec_full = AggregateSpec.fit(catalog)
    spec_rob = AggregateSpec.fit(catalog, ROBUST_MODE)
    boost_a = distill(gru, train, spec_full, GbdtConfig(seed=2))
    boost_b = distill(gru, train, spec_full,
                      GbdtConfig(seed=3, row_subsample=0.7))

    xr = aggregate_matrix(train, spec_rob)
    ytr = np.array([s.label for s in train], dtype=np.float64)
    robusts = []
    for s in (5, 6, 7):
        xb, yb = balanced_rows(xr, ytr, s)
        robusts.append(GbdtScoreModel(
            gbdt=train_gbdt(xb, yb, GbdtConfig(seed=s, n_trees=100),
                            loss=LOGISTIC),
            spec=spec_rob))

    budget = AttackBudget(max_edits=10)
    attack_cfg = AttackConfig(budget=budget, k0=60, seed=7)

    filter_src = train[:150]
    transplant = baseline_transplant_attack(
        boost_a, filter_src, budget, catalog).edit_lists

    def gen_rand(s):
        return random_attack(s, attack_cfg, catalog)

    def gen_transplant(s):
        return transplant[s.client_id]

    filter_model = train_filter(filter_src, [gen_rand, gen_transplant],
                                catalog, seed=4)

    mix5 = build_defended_model(
        "boost-mix-5", boost_a=boost_a, boost_b=boost_b,
        robust_a=robusts[0], robust_b=robusts[1], robust_c=robusts[2])
    mixf = build_defended_model(
        "boost-mix-filter", boost_a=boost_a, boost_b=boost_b,
        robust_a=robusts[0], robust_b=robusts[1], robust_c=robusts[2],
        filter_model=filter_model)

    return {
        "ds": ds, "catalog": catalog, "train": train, "eval": evalc,
        "cohort": cohort,
        "cohort_labels": np.array([s.label for s in cohort]),
        "gru": gru, "spec_full": spec_full, "spec_rob": spec_rob,
        "boost_a": boost_a, "boost_b": boost_b, "robusts": robusts,
        "filter_model": filter_model, "mix5": mix5, "mixf": mixf,
        "budget": budget, "attack_cfg": attack_cfg,
    }


@pytest.fixture(scope="session")
def gru_greedy(world):
    """White-box greedy flip attack against the GRU on the eval cohort."""
    return run_attack("greedy", world["gru"], world["cohort"],
                      world["attack_cfg"], world["catalog"], workers=WORKERS)


@pytest.fixture(scope="session")
def gru_random(world):
    """Random substitution attack on the same cohort and budget."""
    return run_attack("random", world["gru"], world["cohort"],
                      world["attack_cfg"], world["catalog"], workers=WORKERS)


@pytest.fixture(scope="session")
def base_greedy(world):
    """White-box greedy flip attack against the boosting base model."""
    return run_attack("greedy", world["boost_a"], world["cohort"],
                      world["attack_cfg"], world["catalog"], workers=WORKERS)


@pytest.fixture(scope="session")
def small_world():
    """Cheap dataset + boosting model for module-level tests."""
    ds = generate_synthetic(SynthConfig(n_clients=240, seq_len=40, n_mcc=30,
                                        default_rate=0.25, seed=3))
    catalog = build_catalog(ds)
    train = ds.sequences[:160]
    rest = ds.sequences[160:]
    spec = AggregateSpec.fit(catalog)
    x = aggregate_matrix(train, spec)
    y = np.array([s.label for s in train], dtype=np.float64)
    model = GbdtScoreModel(
        gbdt=train_gbdt(x, y, GbdtConfig(n_trees=60, seed=9), loss=LOGISTIC),
        spec=spec)
    return {"ds": ds, "catalog": catalog, "train": train, "rest": rest,
            "spec": spec, "model": model}
