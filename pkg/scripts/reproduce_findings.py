#!/usr/bin/env python3
"""Reproduce the headline qualitative findings on synthetic data.

Builds the full pipeline (GRU classifier, distilled boostings, robust
boosting members, adversarial-transaction filter), runs white-box and
transfer attacks, and prints:

  * clean vs attacked AUC of the neural base model (attack severity),
  * attacked AUC as a function of edit budget (monotone damage),
  * transfer of the neural white-box attack onto robust boostings,
  * defense scores of base / 5-member mix / filtered mix under the
    white-box greedy attack against the boosting base.

``--quick`` runs a reduced configuration in under a minute; the default
desk scale (2000 clients x 300 transactions, 100 merchant categories)
takes several minutes on one core.
"""

import argparse
import os

import numpy as np

from txadv.attacks import AttackConfig, run_attack
from txadv.data import (AttackBudget, SynthConfig, build_catalog,
                        generate_synthetic, apply_edits)
from txadv.defenses import FilteredModel, train_filter
from txadv.evaluation import defense_score, roc_auc, scored_cohort
from txadv.features import ROBUST_MODE, AggregateSpec, aggregate_matrix
from txadv.gbdt import LOGISTIC, GbdtConfig, train_gbdt
from txadv.gru import GruHyper, train_gru
from txadv.models import GbdtScoreModel, build_defended_model, distill


def balanced_rows(x, y, seed, ratio=2):
    rng = np.random.default_rng(seed)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    keep = rng.choice(neg, size=min(len(neg), ratio * len(pos)), replace=False)
    idx = np.sort(np.concatenate([pos, keep]))
    return x[idx], y[idx]


def attacked_auc(model, cohort, edit_lists, labels, workers):
    from txadv.models import score_batch_parallel
    edited = [apply_edits(s, edit_lists[s.client_id]) for s in cohort]
    return roc_auc(score_batch_parallel(model, edited, workers), labels)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true",
                    help="small configuration for a fast smoke run")
    ap.add_argument("--workers", type=int,
                    default=min(8, os.cpu_count() or 1))
    args = ap.parse_args()

    if args.quick:
        synth = SynthConfig(n_clients=400, seq_len=60, n_mcc=20,
                            default_rate=0.3, signal_strength=0.9, seed=17)
        n_train, n_cohort, epochs, n_trees = 300, 100, 20, 80
        attack_cfg = AttackConfig(budget=AttackBudget(max_edits=10),
                                  k0=40, seed=7)
        budgets = (3, 10)
    else:
        synth = SynthConfig(n_clients=2000, seq_len=300, n_mcc=100, seed=11)
        n_train, n_cohort, epochs, n_trees = 1200, 200, 16, 100
        attack_cfg = AttackConfig(budget=AttackBudget(max_edits=10),
                                  k0=60, seed=7)
        budgets = (3, 5, 10)

    ds = generate_synthetic(synth)
    catalog = build_catalog(ds)
    train = ds.sequences[:n_train]
    cohort = ds.sequences[n_train:n_train + n_cohort]
    labels = np.array([s.label for s in cohort])
    print(f"data: {len(ds)} clients, {synth.seq_len} transactions, "
          f"{synth.n_mcc} merchant categories "
          f"(positives in cohort: {int(labels.sum())}/{len(labels)})")

    print("training GRU ...")
    gru = train_gru(train, GruHyper(seed=1, epochs=epochs))

    spec_full = AggregateSpec.fit(catalog)
    spec_rob = AggregateSpec.fit(catalog, ROBUST_MODE)
    print("distilling boostings ...")
    boost_a = distill(gru, train, spec_full, GbdtConfig(seed=2))
    boost_b = distill(gru, train, spec_full,
                      GbdtConfig(seed=3, row_subsample=0.7))

    xr = aggregate_matrix(train, spec_rob)
    ytr = np.array([s.label for s in train], dtype=np.float64)
    robusts = []
    for s in (5, 6, 7):
        xb, yb = balanced_rows(xr, ytr, s)
        robusts.append(GbdtScoreModel(
            gbdt=train_gbdt(xb, yb, GbdtConfig(seed=s, n_trees=n_trees),
                            loss=LOGISTIC),
            spec=spec_rob))

    print("training filter ...")
    filter_src = train[:min(len(train), 150)]
    transplant = run_attack("baseline", boost_a, filter_src,
                            attack_cfg, catalog).edit_lists
    gens = [lambda s: run_attack("random", boost_a, [s], attack_cfg,
                                 catalog).edit_lists[s.client_id],
            lambda s: transplant[s.client_id]]
    filt = train_filter(filter_src, gens, catalog, seed=4)

    mix5 = build_defended_model(
        "boost-mix-5", boost_a=boost_a, boost_b=boost_b,
        robust_a=robusts[0], robust_b=robusts[1], robust_c=robusts[2])
    mixf = build_defended_model(
        "boost-mix-filter", boost_a=boost_a, boost_b=boost_b,
        robust_a=robusts[0], robust_b=robusts[1], robust_c=robusts[2],
        filter_model=filt)

    w = args.workers
    clean = roc_auc(gru.score_batch(cohort), labels)
    print(f"\n[severity] GRU clean AUC: {clean:.3f}")
    for budget in budgets:
        cfg = AttackConfig(budget=AttackBudget(max_edits=budget),
                           k0=attack_cfg.k0, seed=7)
        g = run_attack("greedy", gru, cohort, cfg, catalog, workers=w)
        r = run_attack("random", gru, cohort, cfg, catalog, workers=w)
        ga = attacked_auc(gru, cohort, g.edit_lists, labels, w)
        ra = attacked_auc(gru, cohort, r.edit_lists, labels, w)
        print(f"  budget {budget:2d}: greedy attacked AUC {ga:.3f}   "
              f"random attacked AUC {ra:.3f}")
        if budget == max(budgets):
            gru_edits = g.edit_lists

    print("\n[transfer] white-box GRU attack applied to robust boostings:")
    for i, m in enumerate(robusts):
        c = roc_auc(m.score_batch(cohort), labels)
        a = attacked_auc(m, cohort, gru_edits, labels, w)
        print(f"  robust member {i}: clean {c:.3f} -> attacked {a:.3f} "
              f"(drop {c - a:+.3f})")

    print("\n[defense ordering] white-box greedy attack on boosting base:")
    base_attack = run_attack("greedy", boost_a, cohort, attack_cfg,
                             catalog, workers=w).edit_lists
    for name, model in (("boosting base", boost_a),
                        ("boosting mix 5", mix5),
                        ("boosting mix filter", mixf),
                        ("filtered base", FilteredModel(filt, boost_a))):
        score = defense_score(scored_cohort(model, cohort, base_attack, w))
        print(f"  {name:20s} defense score {score:.3f}")


if __name__ == "__main__":
    main()
