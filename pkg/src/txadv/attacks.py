"""Attack algorithms: transplant baseline, random, greedy brute-force,
beam-search sampling, gradient embedding attack and combined objectives."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data import (APPEND, SUBSTITUTE, AttackBudget, ClientSequence, Edit,
                   EditList, MccCatalog, ValidationError,
                   allowed_amount_interval)
from .gru import GruClassifier, embedding_gradient, nearest_token
from .models import EnsembleModel, ScoreModel, score_batch_parallel

SUPPRESS = "suppress"
BOOST = "boost"
FLIP = "flip"

UNIFORM = "uniform"
GEN = "gen"


@dataclass(frozen=True)
class AttackObjective:
    mode: str = FLIP
    tau: float = 0.5  # flip threshold: population median of clean scores

    def direction(self, clean_score: float) -> int:
        """+1 pushes the score up, -1 pushes it down."""
        if self.mode == SUPPRESS:
            return -1
        if self.mode == BOOST:
            return +1
        if self.mode == FLIP:
            return -1 if clean_score >= self.tau else +1
        raise ValidationError(f"unknown objective mode {self.mode!r}")


def objective_value(score: float, direction: int) -> float:
    """Lower is better for the attacker."""
    return -direction * score


@dataclass(frozen=True)
class AttackConfig:
    budget: AttackBudget = AttackBudget()
    k0: int = 1000          # greedy candidates per step
    k: int = 10000          # beam candidates per iteration
    k0_beam: int = 100      # beam width
    epsilon: float = 10.0   # gradient step size
    objective: AttackObjective = AttackObjective()
    sampler: str = UNIFORM
    seed: int = 0

    def __post_init__(self):
        if min(self.k0, self.k, self.k0_beam) < 1:
            raise ValidationError("candidate counts must be positive")
        if self.epsilon < 0:
            raise ValidationError("epsilon must be >= 0")


@dataclass
class AttackResult:
    edit_lists: dict          # client_id -> EditList
    clean_scores: dict        # client_id -> surrogate clean score
    attacked_scores: dict     # client_id -> surrogate attacked score
    evaluations: int = 0


def client_rng(config: AttackConfig, client_id) -> np.random.Generator:
    """Per-client substream: pure function of (config seed, client id)."""
    return np.random.default_rng(
        np.random.SeedSequence([config.seed, zlib.crc32(str(client_id).encode())]))


class CandidateSampler:
    """Draws admissible substitution candidates from a catalog."""

    def __init__(self, catalog: MccCatalog, shrink: float, mode: str = UNIFORM):
        self.catalog = catalog
        self.shrink = shrink
        self.mode = mode
        self.mccs = catalog.observed_mccs
        lo, hi = [], []
        for m in self.mccs:
            a, b = allowed_amount_interval(catalog, int(m), shrink)
            lo.append(a)
            hi.append(b)
        self.lo = np.array(lo)
        self.hi = np.array(hi)
        if mode == GEN:
            freqs = np.array([catalog.entries[int(m)].frequency for m in self.mccs])
            median = np.median(freqs)
            eligible = freqs <= median
            if not eligible.any():
                raise ValidationError("gen sampler: no MCC below median frequency")
            self.gen_idx = np.flatnonzero(eligible)
        elif mode != UNIFORM:
            raise ValidationError(f"unknown sampler mode {mode!r}")

    def sample_batch(self, n: int, seq_len: int, rng: np.random.Generator,
                     excluded_positions=()):
        """Returns (positions, mccs, amounts) arrays of length n."""
        if excluded_positions:
            allowed = np.setdiff1d(np.arange(seq_len), list(excluded_positions))
        else:
            allowed = np.arange(seq_len)
        pos = allowed[rng.integers(0, len(allowed), size=n)]
        if self.mode == UNIFORM:
            idx = rng.integers(0, len(self.mccs), size=n)
            amt = self.lo[idx] + rng.random(n) * (self.hi[idx] - self.lo[idx])
        else:
            idx = self.gen_idx[rng.integers(0, len(self.gen_idx), size=n)]
            amt = np.empty(n)
            for i, j in enumerate(idx):
                samples = self.catalog.entries[int(self.mccs[j])].samples
                amt[i] = samples[rng.integers(0, len(samples))]
            amt = np.clip(amt, self.lo[idx], self.hi[idx])
        return pos, self.mccs[idx], amt


def sample_candidate(seq: ClientSequence, catalog: MccCatalog,
                     sampler: str, rng: np.random.Generator,
                     shrink: float = 0.95) -> Edit:
    """One substitution candidate; position uniform over the sequence."""
    s = CandidateSampler(catalog, shrink, sampler)
    pos, mcc, amt = s.sample_batch(1, len(seq), rng)
    return Edit(kind=SUBSTITUTE, position=int(pos[0]),
                new_mcc=int(mcc[0]), new_amount=float(amt[0]))


def _substituted(seq: ClientSequence, positions, mccs, amounts) -> ClientSequence:
    mcc, amount, currency, ts = seq.copy_columns()
    mcc[positions] = mccs
    amount[positions] = amounts
    return ClientSequence(seq.client_id, mcc, amount, currency, ts,
                          label=seq.label, validate=False)


def random_attack(seq: ClientSequence, config: AttackConfig,
                  catalog: MccCatalog) -> EditList:
    """max_edits substitutions at distinct uniform positions."""
    rng = client_rng(config, seq.client_id)
    sampler = CandidateSampler(catalog, config.budget.amount_shrink, config.sampler)
    n = min(config.budget.max_edits, len(seq))
    if n == 0:
        return EditList(seq.client_id)
    positions = rng.choice(len(seq), size=n, replace=False)
    _, mccs, amounts = sampler.sample_batch(n, len(seq), rng)
    edits = [Edit(kind=SUBSTITUTE, position=int(p), new_mcc=int(m),
                  new_amount=float(a))
             for p, m, a in zip(positions, mccs, amounts)]
    return EditList(seq.client_id, edits)


def greedy_attack(model: ScoreModel, seq: ClientSequence, config: AttackConfig,
                  catalog: MccCatalog, workers: int = 1):
    """Per step: sample k0 single-edit candidates on the current sequence,
    accept the strictly best improving one, stop early when none improves.

    Returns (EditList, evaluation count)."""
    rng = client_rng(config, seq.client_id)
    sampler = CandidateSampler(catalog, config.budget.amount_shrink, config.sampler)
    clean = model.score(seq)
    evals = 1
    direction = config.objective.direction(clean)
    cur_obj = objective_value(clean, direction)
    cur = seq
    edits = []
    used = set()
    for _ in range(config.budget.max_edits):
        if len(used) >= len(seq):
            break
        pos, mccs, amounts = sampler.sample_batch(config.k0, len(seq), rng, used)
        cands = [_substituted(cur, [pos[i]], [mccs[i]], [amounts[i]])
                 for i in range(config.k0)]
        scores = score_batch_parallel(model, cands, workers)
        evals += config.k0
        objs = -direction * scores
        best = int(np.argmin(objs))  # ties -> lowest candidate index
        if objs[best] >= cur_obj:
            break
        cur = cands[best]
        cur_obj = float(objs[best])
        used.add(int(pos[best]))
        edits.append(Edit(kind=SUBSTITUTE, position=int(pos[best]),
                          new_mcc=int(mccs[best]), new_amount=float(amounts[best])))
    return EditList(seq.client_id, edits), evals


def beam_sampling_attack(model: ScoreModel, seq: ClientSequence,
                         config: AttackConfig, catalog: MccCatalog,
                         workers: int = 1):
    """Beam search over edit-sets: each iteration extends every beam entry
    with k/width sampled single edits, keeps the best `k0_beam` edit-sets
    (existing entries compete, so the beam never worsens), and stops after
    max_edits iterations or when no extension enters the beam.

    Returns (EditList, evaluation count)."""
    rng = client_rng(config, seq.client_id)
    sampler = CandidateSampler(catalog, config.budget.amount_shrink, config.sampler)
    clean = model.score(seq)
    evals = 1
    direction = config.objective.direction(clean)
    # Beam entries: (ordered edit tuple ((pos, mcc, amount), ...), objective).
    beam = [((), objective_value(clean, direction))]
    for _ in range(config.budget.max_edits):
        ext_sets, ext_seqs = [], []
        per_entry = max(1, config.k // len(beam))
        for edit_set, _ in beam:
            used = {p for p, _, _ in edit_set}
            if len(used) >= len(seq):
                continue
            pos, mccs, amounts = sampler.sample_batch(per_entry, len(seq), rng, used)
            base_pos = [p for p, _, _ in edit_set]
            base_mcc = [m for _, m, _ in edit_set]
            base_amt = [a for _, _, a in edit_set]
            for i in range(per_entry):
                new_set = edit_set + ((int(pos[i]), int(mccs[i]), float(amounts[i])),)
                ext_sets.append(new_set)
                ext_seqs.append(_substituted(
                    seq, base_pos + [int(pos[i])], base_mcc + [int(mccs[i])],
                    base_amt + [float(amounts[i])]))
        if not ext_seqs:
            break
        scores = score_batch_parallel(model, ext_seqs, workers)
        evals += len(ext_seqs)
        pool = list(beam) + [(s, -direction * sc)
                             for s, sc in zip(ext_sets, scores)]
        order = sorted(range(len(pool)), key=lambda i: (pool[i][1], i))
        new_beam = [pool[i] for i in order[:config.k0_beam]]
        if all(i < len(beam) for i in order[:config.k0_beam]):
            beam = new_beam
            break  # no extension admitted: nothing further to explore
        beam = new_beam
    best_set = beam[0][0]
    edits = [Edit(kind=SUBSTITUTE, position=p, new_mcc=m, new_amount=a)
             for p, m, a in best_set]
    return EditList(seq.client_id, edits), evals


def gradient_attack(model: GruClassifier, seq: ClientSequence,
                    config: AttackConfig, catalog: MccCatalog):
    """FGSM-style: step the (mcc, amount-bin) embeddings along the logit
    gradient at the position with the largest gradient norm, project back to
    the nearest tokens, realize the amount as the bin midpoint clamped into
    the allowed interval. Returns (EditList, evaluation count)."""
    if not getattr(model, "gradient_capable", False):
        raise ValidationError("gradient attack needs a gradient-capable model")
    clean = model.score(seq)
    evals = 1
    direction = config.objective.direction(clean)
    cur_obj = objective_value(clean, direction)
    cur = seq
    offset = max(0, len(seq) - model.hyper.window)
    sl_mcc = model.slices["mcc"]
    sl_bin = model.slices["amount_bin"]
    observed = catalog.observed_mccs
    edits = []
    blocked = set()  # window positions already edited or exhausted
    window_len = min(len(seq), model.hyper.window)
    while len(edits) < config.budget.max_edits and len(blocked) < window_len:
        g = embedding_gradient(model, cur)
        norms = np.sqrt((g[:, sl_mcc] ** 2).sum(axis=1)
                        + (g[:, sl_bin] ** 2).sum(axis=1))
        for b in blocked:
            norms[b] = -np.inf
        t = int(np.argmax(norms))
        pos = offset + t

        old_mcc = int(cur.mcc[pos])
        old_bin = int(model.binner.bin([cur.amount[pos]])[0])
        step = direction * config.epsilon
        e_mcc = model.params["emb_mcc"][old_mcc] + step * g[t, sl_mcc]
        e_bin = model.params["emb_amount_bin"][old_bin] + step * g[t, sl_bin]
        new_mcc = nearest_token(model.params["emb_mcc"], e_mcc, candidates=observed)
        new_bin = nearest_token(model.params["emb_amount_bin"], e_bin)

        if new_mcc == old_mcc and new_bin == old_bin:
            blocked.add(t)
            continue
        blo, bhi = model.binner.bin_interval(new_bin)
        alo, ahi = allowed_amount_interval(catalog, new_mcc,
                                           config.budget.amount_shrink)
        amount = float(np.clip(0.5 * (blo + bhi), alo, ahi))

        cand = _substituted(cur, [pos], [new_mcc], [amount])
        score = model.score(cand)
        evals += 1
        obj = objective_value(score, direction)
        if obj < cur_obj:
            cur, cur_obj = cand, obj
            edits.append(Edit(kind=SUBSTITUTE, position=pos,
                              new_mcc=new_mcc, new_amount=amount))
        blocked.add(t)
    return EditList(seq.client_id, edits), evals


def combined_attack(models, weights, seq: ClientSequence, config: AttackConfig,
                    catalog: MccCatalog, workers: int = 1):
    """Greedy attack against the weighted-mean score of several models."""
    if not models:
        raise ValidationError("combined attack needs at least one model")
    target = models[0] if len(models) == 1 and weights[0] == 1 else \
        EnsembleModel(list(zip(models, weights)))
    return greedy_attack(target, seq, config, catalog, workers)


def baseline_transplant_attack(model: ScoreModel, seqs, budget: AttackBudget,
                               catalog: MccCatalog) -> AttackResult:
    """Append the tail of the opposite-side representative customer.

    Representatives are the top- and bottom-scored clients; every other
    client gets the last min(10, max_edits) transactions of the opposite
    side's representative appended, amounts clamped into the allowed
    intervals."""
    if not seqs:
        raise ValidationError("empty dataset")
    scores = model.score_batch(seqs)
    median = float(np.median(scores))
    top_i = int(np.argmax(scores))
    bot_i = int(np.argmin(scores))
    m = min(10, budget.max_edits)

    def tail_edits(donor: ClientSequence):
        edits = []
        for j in range(max(0, len(donor) - m), len(donor)):
            mcc = int(donor.mcc[j])
            lo, hi = allowed_amount_interval(catalog, mcc, budget.amount_shrink)
            amount = float(np.clip(donor.amount[j], lo, hi))
            edits.append(Edit(kind=APPEND, new_mcc=mcc, new_amount=amount))
        return edits

    high_donor = tail_edits(seqs[bot_i])  # pushes high scorers down-profile
    low_donor = tail_edits(seqs[top_i])
    edit_lists, clean, attacked = {}, {}, {}
    evals = len(seqs)
    for i, s in enumerate(seqs):
        clean[s.client_id] = float(scores[i])
        if i in (top_i, bot_i):
            edit_lists[s.client_id] = EditList(s.client_id)
        else:
            edits = high_donor if scores[i] >= median else low_donor
            edit_lists[s.client_id] = EditList(s.client_id, list(edits))
    from .data import apply_edits
    attacked_seqs = [apply_edits(s, edit_lists[s.client_id]) for s in seqs]
    attacked_scores = model.score_batch(attacked_seqs)
    evals += len(seqs)
    for s, sc in zip(seqs, attacked_scores):
        attacked[s.client_id] = float(sc)
    return AttackResult(edit_lists, clean, attacked, evals)


ATTACK_KINDS = ("baseline", "random", "greedy", "beam", "gradient", "combined")


def compute_flip_tau(model: ScoreModel, seqs, workers: int = 1) -> float:
    return float(np.median(score_batch_parallel(model, seqs, workers)))


def run_attack(kind: str, model, seqs, config: AttackConfig,
               catalog: MccCatalog, workers: int = 1,
               combined_models=None, combined_weights=None,
               pool: Optional[ScoreModel] = None,
               pool_probability: float = 0.0) -> AttackResult:
    """Cohort driver: resolves the flip threshold from the cohort's clean
    scores, runs the per-client attack, and records surrogate scores.

    With ``pool`` set and ``pool_probability`` > 0, each client's surrogate
    is chosen at random between `model` and the pool (greedy/beam only)."""
    if kind == "baseline":
        return baseline_transplant_attack(model, seqs, config.budget, catalog)

    surrogate = model if kind != "combined" else EnsembleModel(
        list(zip(combined_models, combined_weights)))
    if config.objective.mode == FLIP:
        tau = compute_flip_tau(surrogate, seqs, workers)
        config = replace(config, objective=replace(config.objective, tau=tau))

    from .data import apply_edits
    edit_lists, clean, attacked = {}, {}, {}
    evals = 0
    for s in seqs:
        target = surrogate
        if pool is not None and pool_probability > 0 and kind in ("greedy", "beam"):
            pick_rng = client_rng(replace(config, seed=config.seed + 977), s.client_id)
            if pick_rng.random() < pool_probability:
                target = pool
        if kind == "random":
            el = random_attack(s, config, catalog)
            n = 0
        elif kind == "greedy":
            el, n = greedy_attack(target, s, config, catalog, workers)
        elif kind == "beam":
            el, n = beam_sampling_attack(target, s, config, catalog, workers)
        elif kind == "gradient":
            el, n = gradient_attack(target, s, config, catalog)
        elif kind == "combined":
            el, n = greedy_attack(target, s, config, catalog, workers)
        else:
            raise ValidationError(f"unknown attack kind {kind!r}")
        edit_lists[s.client_id] = el
        evals += n
        clean[s.client_id] = float(surrogate.score(s))
        attacked[s.client_id] = float(surrogate.score(apply_edits(s, el)))
    return AttackResult(edit_lists, clean, attacked, evals)
