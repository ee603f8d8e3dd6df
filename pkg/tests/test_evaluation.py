"""Metrics, tournament matrix mechanics and CSV report emission."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from txadv.attacks import AttackConfig, random_attack, run_attack
from txadv.data import (AttackBudget, Edit, EditList, ValidationError,
                        apply_edits)
from txadv.evaluation import (ScoredCohort, TournamentMatrix, attack_score,
                              budget_sweep, defense_score, emit_report,
                              roc_auc, run_tournament, scored_cohort)


def test_roc_auc_handles_perfect_inverted_and_tied_rankings():
    labels = np.array([0, 0, 1, 1])
    assert roc_auc(np.array([0.1, 0.2, 0.8, 0.9]), labels) == 1.0
    assert roc_auc(np.array([0.9, 0.8, 0.2, 0.1]), labels) == 0.0
    assert roc_auc(np.array([0.5, 0.5, 0.5, 0.5]), labels) == 0.5
    with pytest.raises(ValidationError):
        roc_auc(np.array([0.1, 0.2]), np.array([1, 1]))


def test_defense_score_harmonic_mean_arithmetic():
    cohort = ScoredCohort(
        client_ids=["a", "b", "c", "d"],
        labels=np.array([0, 0, 1, 1]),
        clean_scores=np.array([0.1, 0.4, 0.3, 0.9]),    # AUC 0.75
        attacked_scores=np.array([0.4, 0.1, 0.3, 0.9]))
    a = roc_auc(cohort.clean_scores, cohort.labels)
    b = roc_auc(cohort.attacked_scores, cohort.labels)
    assert defense_score(cohort) == pytest.approx(2 * a * b / (a + b),
                                                  abs=1e-12)
    # Spot value: harmonic mean of 0.8 and 0.6.
    assert 2 * 0.8 * 0.6 / (0.8 + 0.6) == pytest.approx(0.6857142857142857)


def test_cohort_length_mismatch_is_rejected():
    with pytest.raises(ValidationError):
        ScoredCohort(client_ids=["a"], labels=np.array([1, 0]),
                     clean_scores=np.array([0.5]),
                     attacked_scores=np.array([0.5]))


def _matrix():
    return TournamentMatrix(
        attack_names=["alpha", "beta"],
        defense_names=["d1", "d2", "d3"],
        values=np.array([[0.2, 0.4, np.nan], [0.1, 0.3, 0.5]]),
        mask=np.array([[False, False, True], [False, False, False]]))


def test_matrix_averages_skip_masked_cells():
    m = _matrix()
    assert m.row_averages() == pytest.approx([0.3, 0.3])
    assert m.col_averages() == pytest.approx([0.15, 0.35, 0.5])


def test_matrix_ranking_orders_and_breaks_ties_by_name():
    m = _matrix()
    assert m.ranking("attack") == ["alpha", "beta"]  # tie -> name order
    assert m.ranking("defense") == ["d3", "d2", "d1"]
    assert m.ranking("defense", descending=False) == ["d1", "d2", "d3"]


def test_run_tournament_masks_same_author_and_disqualifies(small_world):
    catalog, model = small_world["catalog"], small_world["model"]
    cohort = small_world["ds"].sequences[:40]
    budget = AttackBudget(4)
    cfg = AttackConfig(budget=budget, seed=3)
    good = {s.client_id: random_attack(s, cfg, catalog) for s in cohort}
    cheat = {s.client_id: EditList(s.client_id,
                                   [Edit("append", 0, 1e12)] * 9)
             for s in cohort}
    atk_view, def_view = run_tournament(
        attacks={"fair": good, "cheat": cheat},
        defenses={"plain": model, "mine": model},
        seqs=cohort,
        authors={"fair": "red team", "mine": "red team", "plain": "blue"},
        budget=budget, catalog=catalog)
    assert atk_view.disqualified == ["cheat"]
    assert atk_view.attack_names == ["fair"]
    # fair vs mine shares an author, so the cell is masked.
    j = atk_view.defense_names.index("mine")
    assert atk_view.mask[0, j]
    assert not atk_view.mask[0, atk_view.defense_names.index("plain")]
    i = def_view.defense_names.index("plain")
    assert np.isfinite(def_view.values[0, i])


def test_scored_cohort_applies_edits(small_world):
    model, catalog = small_world["model"], small_world["catalog"]
    cohort = small_world["ds"].sequences[:12]
    cfg = AttackConfig(budget=AttackBudget(4), seed=5)
    edits = {s.client_id: random_attack(s, cfg, catalog) for s in cohort}
    sc = scored_cohort(model, cohort, edits)
    attacked = [apply_edits(s, edits[s.client_id]) for s in cohort]
    assert np.array_equal(sc.attacked_scores, model.score_batch(attacked))
    assert np.array_equal(sc.clean_scores, model.score_batch(cohort))


def test_budget_sweep_shares_seed_across_budgets(small_world):
    model, catalog = small_world["model"], small_world["catalog"]
    cohort = small_world["ds"].sequences[:30]

    def factory(b):
        cfg = AttackConfig(budget=AttackBudget(b), seed=11)
        return {s.client_id: random_attack(s, cfg, catalog) for s in cohort}

    sweep = budget_sweep(factory, model, cohort, budgets=(2, 5))
    assert set(sweep["budgets"]) == {2, 5}
    assert 0 <= sweep["clean_auc"] <= 1


def test_emit_report_dispatch_and_formats(tmp_path):
    m = _matrix()
    files = emit_report(m, tmp_path, "tour")
    assert sorted(f.split("/")[-1] for f in files) == \
        ["tour_masked_pairs.csv", "tour_matrix.csv"]
    lines = (tmp_path / "tour_matrix.csv").read_text().splitlines()
    assert lines[0] == "attack,d1,d2,d3"
    assert lines[1] == "alpha,0.2,0.4,"          # masked cell is empty
    side = (tmp_path / "tour_masked_pairs.csv").read_text().splitlines()
    assert side == ["attack,defense", "alpha,d3"]

    files = emit_report({"budgets": {3: 0.5, 1: 0.7}, "clean_auc": 0.9},
                        tmp_path, "sw")
    lines = (tmp_path / "sw_sweep.csv").read_text().splitlines()
    assert lines[0] == "budget,attacked_auc,clean_auc"
    assert lines[1].startswith("1,0.7")          # sorted by budget

    emit_report([0.3, 0.1, 0.2], tmp_path, "ecdf")
    lines = (tmp_path / "ecdf_scores.csv").read_text().splitlines()
    assert lines == ["score", "0.1", "0.2", "0.3"]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=4, max_size=30),
       st.data())
def test_attack_and_defense_scores_are_bounded(scores, data):
    n = len(scores)
    labels = np.array(data.draw(st.lists(st.integers(0, 1), min_size=n,
                                         max_size=n)))
    if labels.sum() in (0, n):
        labels[0], labels[1] = 0, 1
    attacked = np.array(data.draw(st.lists(st.floats(0, 1, allow_nan=False),
                                           min_size=n, max_size=n)))
    cohort = ScoredCohort(list(range(n)), labels, np.array(scores), attacked)
    assert -1.0 <= attack_score(cohort) <= 1.0
    assert 0.0 <= defense_score(cohort) <= 1.0
