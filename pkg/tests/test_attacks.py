"""Attack primitives: objectives, samplers, search strategies, baselines."""

import numpy as np
import pytest

from txadv.attacks import (BOOST, FLIP, GEN, SUPPRESS, AttackConfig,
                           AttackObjective, CandidateSampler,
                           baseline_transplant_attack, beam_sampling_attack,
                           client_rng, compute_flip_tau, greedy_attack,
                           objective_value, random_attack, run_attack)
from txadv.data import (AttackBudget, ValidationError, apply_edits,
                        allowed_amount_interval, validate_edits)
from txadv.models import ScoreModel


class _AmountSumModel(ScoreModel):
    """Score = total spend; edits move it monotonically."""

    def score_batch(self, seqs):
        return np.array([s.amount.sum() for s in seqs])


def test_objective_directions():
    assert AttackObjective(mode=SUPPRESS).direction(0.9) == -1
    assert AttackObjective(mode=BOOST).direction(0.1) == +1
    flip = AttackObjective(mode=FLIP, tau=0.5)
    assert flip.direction(0.7) == -1
    assert flip.direction(0.3) == +1
    with pytest.raises(ValidationError):
        AttackObjective(mode="sideways").direction(0.5)
    # Lower objective value is better for the attacker, so when the
    # direction pushes scores down a high score values as worse.
    assert objective_value(0.9, -1) > objective_value(0.1, -1)
    assert objective_value(0.9, +1) < objective_value(0.1, +1)


def test_attack_config_validation():
    with pytest.raises(ValidationError):
        AttackConfig(k0=0)
    with pytest.raises(ValidationError):
        AttackConfig(epsilon=-1.0)


def test_client_rng_is_deterministic_per_client():
    cfg = AttackConfig(seed=5)
    a = client_rng(cfg, "c1").integers(0, 1 << 30, size=4)
    b = client_rng(cfg, "c1").integers(0, 1 << 30, size=4)
    c = client_rng(cfg, "c2").integers(0, 1 << 30, size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_random_attack_respects_budget_and_positions(small_world):
    catalog = small_world["catalog"]
    seq = small_world["ds"].sequences[0]
    budget = AttackBudget(max_edits=6)
    el = random_attack(seq, AttackConfig(budget=budget, seed=1), catalog)
    assert len(el) == 6
    positions = [e.position for e in el.edits]
    assert len(set(positions)) == len(positions)
    assert validate_edits(seq, el, budget, catalog) == []


def test_uniform_sampler_draws_inside_shrunk_interval(small_world):
    catalog = small_world["catalog"]
    sampler = CandidateSampler(catalog, shrink=0.9)
    rng = np.random.default_rng(0)
    pos, mccs, amounts = sampler.sample_batch(500, 40, rng)
    assert np.all((pos >= 0) & (pos < 40))
    for m, a in zip(mccs, amounts):
        lo, hi = allowed_amount_interval(catalog, int(m), 0.9)
        assert lo <= a <= hi


def test_gen_sampler_uses_only_infrequent_mccs(small_world):
    catalog = small_world["catalog"]
    freq = catalog.frequencies()
    observed = freq[freq > 0]
    median = np.median(observed)
    sampler = CandidateSampler(catalog, shrink=0.95, mode=GEN)
    rng = np.random.default_rng(1)
    _, mccs, amounts = sampler.sample_batch(500, 40, rng)
    for m, a in zip(mccs, amounts):
        assert freq[m] <= median
        # Amounts come from the observed samples, clamped to the interval.
        lo, hi = allowed_amount_interval(catalog, int(m), 0.95)
        assert lo <= a <= hi


def test_greedy_strictly_improves_and_stops_when_stuck(small_world):
    catalog = small_world["catalog"]
    model = _AmountSumModel()
    seq = small_world["ds"].sequences[2]
    cfg = AttackConfig(budget=AttackBudget(4), k0=50, seed=2,
                       objective=AttackObjective(mode=SUPPRESS))
    el, evals = greedy_attack(model, seq, cfg, catalog)
    assert evals > 0
    # Each accepted edit lowered the total spend.
    score = model.score(seq)
    partial = seq
    for e in el.edits:
        from txadv.data import EditList
        partial = apply_edits(partial, EditList(seq.client_id, [e]))
        assert model.score(partial) < score
        score = model.score(partial)

    # When no candidate can improve, no edits are emitted.
    cfg_up = AttackConfig(budget=AttackBudget(4), k0=50, seed=2,
                          objective=AttackObjective(mode=BOOST))
    low = small_world["ds"].sequences[3]
    # BOOST wants a higher sum; cap amounts so every substitution hurts.
    import copy
    capped = copy.copy(low)
    capped.amount = np.full(len(low), 1e9)
    el_up, _ = greedy_attack(model, capped, cfg_up, catalog)
    assert len(el_up) == 0


def test_beam_with_width_one_equals_greedy(small_world):
    catalog = small_world["catalog"]
    model = small_world["model"]
    seq = small_world["ds"].sequences[5]
    budget = AttackBudget(3)
    greedy_cfg = AttackConfig(budget=budget, k0=40, seed=3,
                              objective=AttackObjective(mode=SUPPRESS))
    beam_cfg = AttackConfig(budget=budget, k=40, k0_beam=1, seed=3,
                            objective=AttackObjective(mode=SUPPRESS))
    g, _ = greedy_attack(model, seq, greedy_cfg, catalog)
    b, _ = beam_sampling_attack(model, seq, beam_cfg, catalog)
    assert [(e.position, e.new_mcc, e.new_amount) for e in g.edits] == \
        [(e.position, e.new_mcc, e.new_amount) for e in b.edits]


def test_beam_search_never_worsens_its_own_objective(small_world):
    catalog = small_world["catalog"]
    model = small_world["model"]
    budget = AttackBudget(3)
    for seq in small_world["ds"].sequences[:6]:
        beam_cfg = AttackConfig(budget=budget, k=80, k0_beam=5, seed=4,
                                objective=AttackObjective(mode=SUPPRESS))
        b, _ = beam_sampling_attack(model, seq, beam_cfg, catalog)
        # The unedited sequence stays in the pool, so the result can only
        # be at least as good as doing nothing.
        assert model.score(apply_edits(seq, b)) <= model.score(seq) + 1e-12
        assert validate_edits(seq, b, budget, catalog) == []


def test_transplant_baseline_appends_donor_tail(small_world):
    catalog = small_world["catalog"]
    model = small_world["model"]
    budget = AttackBudget(max_edits=4)
    cohort = small_world["ds"].sequences[:10]
    res = baseline_transplant_attack(model, cohort, budget, catalog)
    assert set(res.edit_lists) == {s.client_id for s in cohort}
    scores = model.score_batch(cohort)
    top = cohort[int(np.argmax(scores))].client_id
    bottom = cohort[int(np.argmin(scores))].client_id
    # The two representatives donate and receive nothing themselves.
    assert len(res.edit_lists[top]) == 0
    assert len(res.edit_lists[bottom]) == 0
    for s in cohort:
        el = res.edit_lists[s.client_id]
        assert validate_edits(s, el, budget, catalog) == []
        assert all(e.kind == "append" for e in el.edits)


def test_transplant_degenerate_two_client_cohort(small_world):
    catalog = small_world["catalog"]
    model = small_world["model"]
    cohort = small_world["ds"].sequences[:2]
    res = baseline_transplant_attack(model, cohort, AttackBudget(3), catalog)
    # Both clients are representatives, so nobody gets edits.
    assert all(len(el) == 0 for el in res.edit_lists.values())


def test_flip_tau_is_cohort_median(small_world):
    model = small_world["model"]
    seqs = small_world["ds"].sequences[:11]
    assert compute_flip_tau(model, seqs) == \
        pytest.approx(float(np.median(model.score_batch(seqs))), abs=0)


def test_run_attack_rejects_unknown_kind(small_world):
    with pytest.raises(ValidationError):
        run_attack("psychic", small_world["model"],
                   small_world["ds"].sequences[:2], AttackConfig(),
                   small_world["catalog"])


def test_run_attack_records_surrogate_scores(small_world):
    cohort = small_world["ds"].sequences[:8]
    res = run_attack("random", small_world["model"], cohort,
                     AttackConfig(budget=AttackBudget(3), seed=2),
                     small_world["catalog"])
    model = small_world["model"]
    for s in cohort:
        assert res.clean_scores[s.client_id] == \
            pytest.approx(model.score(s), abs=1e-12)
        attacked = apply_edits(s, res.edit_lists[s.client_id])
        assert res.attacked_scores[s.client_id] == \
            pytest.approx(model.score(attacked), abs=1e-12)
