"""Metrics, the attack x defense tournament matrix, budget sensitivity
sweeps and deterministic report emission."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .data import AttackBudget, ValidationError, apply_edits, validate_edits
from .models import ScoreModel, _average_ranks, score_batch_parallel


def roc_auc(scores, labels) -> float:
    """Exact rank AUC: probability a random positive outranks a random
    negative, ties counted one half (Mann-Whitney)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("roc_auc needs both classes present")
    ranks = _average_ranks(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2)
                 / (n_pos * n_neg))


@dataclass
class ScoredCohort:
    client_ids: list
    labels: np.ndarray
    clean_scores: np.ndarray
    attacked_scores: np.ndarray

    def __post_init__(self):
        n = len(self.client_ids)
        if not (len(self.labels) == len(self.clean_scores)
                == len(self.attacked_scores) == n):
            raise ValidationError("cohort arrays must have equal length")


def attack_score(cohort: ScoredCohort) -> float:
    """Clean AUC minus attacked AUC; positive means damage."""
    return roc_auc(cohort.clean_scores, cohort.labels) \
        - roc_auc(cohort.attacked_scores, cohort.labels)


def defense_score(cohort: ScoredCohort) -> float:
    """Harmonic mean of clean and attacked AUC."""
    a = roc_auc(cohort.clean_scores, cohort.labels)
    b = roc_auc(cohort.attacked_scores, cohort.labels)
    if a == 0.0 or b == 0.0:
        return 0.0
    return 2.0 * a * b / (a + b)


@dataclass
class TournamentMatrix:
    attack_names: list
    defense_names: list
    values: np.ndarray        # (n_attacks, n_defenses); nan where masked
    mask: np.ndarray          # True where the attack/defense authors match
    disqualified: list = field(default_factory=list)

    def row_averages(self) -> np.ndarray:
        out = np.empty(len(self.attack_names))
        for i in range(len(out)):
            cells = self.values[i][~self.mask[i]]
            out[i] = cells.mean() if len(cells) else np.nan
        return out

    def col_averages(self) -> np.ndarray:
        out = np.empty(len(self.defense_names))
        for j in range(len(out)):
            cells = self.values[:, j][~self.mask[:, j]]
            out[j] = cells.mean() if len(cells) else np.nan
        return out

    def ranking(self, axis: str, descending: bool = True) -> list:
        """Names ordered by unmasked average; ties broken by name order."""
        if axis == "attack":
            names, avgs = self.attack_names, self.row_averages()
        else:
            names, avgs = self.defense_names, self.col_averages()
        keyed = sorted(range(len(names)),
                       key=lambda i: ((-avgs[i] if descending else avgs[i])
                                      if np.isfinite(avgs[i]) else np.inf,
                                      names[i]))
        return [names[i] for i in keyed]


def scored_cohort(defense: ScoreModel, seqs, edit_lists: dict,
                  workers: int = 1) -> ScoredCohort:
    attacked = [apply_edits(s, edit_lists[s.client_id]) for s in seqs]
    return ScoredCohort(
        client_ids=[s.client_id for s in seqs],
        labels=np.array([s.label for s in seqs]),
        clean_scores=score_batch_parallel(defense, seqs, workers),
        attacked_scores=score_batch_parallel(defense, attacked, workers),
    )


def run_tournament(attacks: dict, defenses: dict, seqs, authors: dict,
                   budget: AttackBudget, catalog, workers: int = 1):
    """Evaluate every attack/defense pair on a labeled cohort.

    attacks: name -> {client_id: EditList}; defenses: name -> ScoreModel;
    authors: name -> author (shared namespace for attacks and defenses).
    Returns (attack-view matrix, defense-view matrix); attacks failing the
    constraint check are disqualified (rows absent from both matrices)."""
    valid_attacks = {}
    disqualified = []
    for name in sorted(attacks):
        edit_lists = attacks[name]
        bad = False
        for s in seqs:
            el = edit_lists.get(s.client_id)
            if el is None or validate_edits(s, el, budget, catalog):
                bad = True
                break
        if bad:
            disqualified.append(name)
        else:
            valid_attacks[name] = edit_lists
    attack_names = sorted(valid_attacks)
    defense_names = sorted(defenses)
    shape = (len(attack_names), len(defense_names))
    atk_view = np.full(shape, np.nan)
    def_view = np.full(shape, np.nan)
    mask = np.zeros(shape, dtype=bool)
    for j, dname in enumerate(defense_names):
        model = defenses[dname]
        clean = score_batch_parallel(model, seqs, workers)
        labels = np.array([s.label for s in seqs])
        for i, aname in enumerate(attack_names):
            if authors.get(aname) is not None and \
                    authors.get(aname) == authors.get(dname):
                mask[i, j] = True
                continue
            cohort = ScoredCohort(
                client_ids=[s.client_id for s in seqs],
                labels=labels,
                clean_scores=clean,
                attacked_scores=score_batch_parallel(
                    model,
                    [apply_edits(s, valid_attacks[aname][s.client_id]) for s in seqs],
                    workers),
            )
            atk_view[i, j] = attack_score(cohort)
            def_view[i, j] = defense_score(cohort)
    return (
        TournamentMatrix(attack_names, defense_names, atk_view, mask, disqualified),
        TournamentMatrix(attack_names, defense_names, def_view, mask, disqualified),
    )


def budget_sweep(attack_factory: Callable, model: ScoreModel, seqs,
                 budgets=(3, 5, 10), workers: int = 1) -> dict:
    """Attacked AUC per budget. attack_factory(budget) must return
    {client_id: EditList} using a shared seed across budgets."""
    labels = np.array([s.label for s in seqs])
    out = {"clean_auc": roc_auc(score_batch_parallel(model, seqs, workers), labels),
           "budgets": {}}
    for b in sorted(budgets):
        edit_lists = attack_factory(b)
        attacked = [apply_edits(s, edit_lists[s.client_id]) for s in seqs]
        out["budgets"][b] = roc_auc(
            score_batch_parallel(model, attacked, workers), labels)
    return out


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def emit_matrix_csv(matrix: TournamentMatrix, path, sidecar_path=None):
    """Matrix CSV: first row defense names, first column attack names,
    masked cells empty; masked pairs listed in a sidecar."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["attack"] + list(matrix.defense_names))
        for i, aname in enumerate(matrix.attack_names):
            row = [aname]
            for j in range(len(matrix.defense_names)):
                row.append("" if matrix.mask[i, j] else _fmt(float(matrix.values[i, j])))
            w.writerow(row)
    if sidecar_path is not None:
        with open(sidecar_path, "w", encoding="utf-8", newline="\n") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["attack", "defense"])
            for i, aname in enumerate(matrix.attack_names):
                for j, dname in enumerate(matrix.defense_names):
                    if matrix.mask[i, j]:
                        w.writerow([aname, dname])


def emit_scores_csv(scores, path, header=("score",)):
    """ECDF-ready sorted score list; empty input yields a header-only file."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(header))
        for s in sorted(scores):
            w.writerow([_fmt(float(s))])


def emit_sweep_csv(sweep: dict, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["budget", "attacked_auc", "clean_auc"])
        for b in sorted(sweep["budgets"]):
            w.writerow([b, _fmt(float(sweep["budgets"][b])),
                        _fmt(float(sweep["clean_auc"]))])


def emit_report(obj, out_dir, prefix: str):
    """Dispatch on object type; returns the list of files written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if isinstance(obj, TournamentMatrix):
        main = os.path.join(out_dir, f"{prefix}_matrix.csv")
        side = os.path.join(out_dir, f"{prefix}_masked_pairs.csv")
        emit_matrix_csv(obj, main, side)
        written += [main, side]
    elif isinstance(obj, dict) and "budgets" in obj:
        path = os.path.join(out_dir, f"{prefix}_sweep.csv")
        emit_sweep_csv(obj, path)
        written.append(path)
    else:
        path = os.path.join(out_dir, f"{prefix}_scores.csv")
        emit_scores_csv(obj, path)
        written.append(path)
    return written
