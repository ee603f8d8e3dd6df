"""Command-line pipeline: data generation, training, attacks, defenses,
tournaments, sweeps and reports."""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import zlib

import numpy as np

from . import attacks as atk
from . import data as dat
from . import defenses as dfs
from . import evaluation as ev
from .features import FULL_MODE, ROBUST_MODE, AggregateSpec
from .gbdt import LOGISTIC, GbdtConfig
from .gru import GruHyper, train_gru
from .models import (DEFENDED_KINDS, build_defended_model,
                     build_surrogate_pool, distill)
from .serialize import load_model, save_model

DEFAULTS = {
    "seed": 0,
    "data": {
        "n_clients": 2000,
        "seq_len": 300,
        "n_mcc": 100,
        "n_currency": 4,
        "default_rate": 0.04,
        "signal_strength": 0.6,
        "test_fraction": 0.3,
    },
    "model": {
        "kind": "nn-base",
        "hidden": 32,
        "epochs": 8,
        "batch_size": 64,
        "learning_rate": 3e-4,
        "dropout": 0.5,
        "weight_decay": 0.01,
        "window": 300,
        "gbdt_trees": 200,
        "gbdt_depth": 4,
        "gbdt_lr": 0.1,
        "gbdt_row_subsample": 0.8,
        "pool_members": 100,
        "pool_trees": 30,
    },
    "attack": {
        "kind": "greedy",
        "max_edits": 10,
        "amount_shrink": 0.95,
        "k0": 1000,
        "k": 10000,
        "k0_beam": 100,
        "epsilon": 10.0,
        "objective": "flip",
        "sampler": "uniform",
    },
    "defense": {
        "strategy": "subsample_ensemble",
        "share": 0.9,
        "repeats": 9,
        "runs": 10,
        "n_perm": 1,
        "theta": 0.5,
    },
    "eval": {
        "budgets": [3, 5, 10],
        "split": "private",
    },
}


class ConfigError(ValueError):
    pass


def merge_config(file_config: dict) -> dict:
    """Defaults overlaid with the config file; unknown keys rejected."""
    merged = copy.deepcopy(DEFAULTS)
    for section, value in file_config.items():
        if section == "seed":
            merged["seed"] = value
            continue
        if section not in merged or not isinstance(merged[section], dict):
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, v in value.items():
            if key not in merged[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            merged[section][key] = v
    return merged


def load_config(path) -> dict:
    if path is None:
        return merge_config({})
    with open(path, encoding="utf-8") as f:
        return merge_config(json.load(f))


def stage_seed(seed: int, stage: str) -> int:
    """Named substream of the global seed."""
    return int(np.random.SeedSequence(
        [seed, zlib.crc32(stage.encode())]).generate_state(1)[0])


def echo_config(config: dict, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.json"), "w",
              encoding="utf-8") as f:
        json.dump(config, f, indent=2, sort_keys=True)


def _attack_config(config: dict, budget_override=None, seed=None) -> atk.AttackConfig:
    a = config["attack"]
    max_edits = budget_override if budget_override is not None else a["max_edits"]
    return atk.AttackConfig(
        budget=dat.AttackBudget(max_edits=max_edits,
                                amount_shrink=a["amount_shrink"]),
        k0=a["k0"], k=a["k"], k0_beam=a["k0_beam"], epsilon=a["epsilon"],
        objective=atk.AttackObjective(mode=a["objective"]),
        sampler=a["sampler"],
        seed=stage_seed(config["seed"], "attack") if seed is None else seed,
    )


def _gbdt_config(config: dict, seed_name: str) -> GbdtConfig:
    m = config["model"]
    return GbdtConfig(n_trees=m["gbdt_trees"], max_depth=m["gbdt_depth"],
                      learning_rate=m["gbdt_lr"],
                      row_subsample=m["gbdt_row_subsample"],
                      seed=stage_seed(config["seed"], seed_name))


def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    d = config["data"]
    synth = dat.SynthConfig(
        n_clients=d["n_clients"], seq_len=d["seq_len"], n_mcc=d["n_mcc"],
        n_currency=d["n_currency"], default_rate=d["default_rate"],
        signal_strength=d["signal_strength"],
        seed=stage_seed(config["seed"], "data"))
    dataset = dat.generate_synthetic(synth)
    dataset = dat.assign_splits(dataset, d["test_fraction"],
                                stage_seed(config["seed"], "split"))
    catalog = dat.build_catalog(dataset)
    os.makedirs(args.out, exist_ok=True)
    dat.save_dataset(dataset, os.path.join(args.out, "dataset.jsonl"))
    dat.save_catalog(catalog, os.path.join(args.out, "catalog.json"))
    echo_config(config, args.out)
    labels = dataset.labels()
    lengths = [len(s) for s in dataset.sequences]
    print(f"clients: {len(dataset)}  label_rate: {labels.mean():.4f}  "
          f"seq_len: min {min(lengths)} max {max(lengths)}")
    return 0


def _train_gbdt_components(config, dataset, catalog, train_seqs, teacher):
    """The two full-mode boostings and three robust boostings."""
    full = AggregateSpec.fit(catalog, FULL_MODE)
    robust = AggregateSpec.fit(catalog, ROBUST_MODE)
    labels = np.array([s.label for s in train_seqs], dtype=np.float64)
    comps = {}
    for i, name in enumerate(("boost_a", "boost_b")):
        cfg = _gbdt_config(config, f"gbdt_{name}")
        if teacher is not None:
            comps[name] = distill(teacher, train_seqs, full, cfg)
        else:
            from .gbdt import train_gbdt
            from .models import GbdtScoreModel
            from .features import aggregate_matrix
            x = aggregate_matrix(train_seqs, full)
            comps[name] = GbdtScoreModel(
                gbdt=train_gbdt(x, labels, cfg, loss=LOGISTIC), spec=full)
    from .gbdt import train_gbdt
    from .models import GbdtScoreModel
    from .features import aggregate_matrix
    xr = aggregate_matrix(train_seqs, robust)
    for name in ("robust_a", "robust_b", "robust_c"):
        cfg = _gbdt_config(config, f"gbdt_{name}")
        # Balanced downsampling: at a low positive rate a logistic boosting
        # fit on the raw labels concentrates its outputs near the base rate,
        # which makes the member useless inside a weighted mix.
        xb, yb = _balanced_rows(xr, labels, cfg.seed)
        comps[name] = GbdtScoreModel(
            gbdt=train_gbdt(xb, yb, cfg, loss=LOGISTIC), spec=robust)
    return comps


def _balanced_rows(x, y, seed, ratio=2):
    """All minority-class rows plus at most ratio x as many majority rows."""
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if len(pos) == 0 or len(neg) == 0 or len(neg) <= ratio * len(pos):
        return x, y
    rng = np.random.default_rng(seed)
    keep = rng.choice(neg, size=ratio * len(pos), replace=False)
    idx = np.sort(np.concatenate([pos, keep]))
    return x[idx], y[idx]


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    kind = args.kind or config["model"]["kind"]
    dataset = dat.load_dataset(os.path.join(args.data, "dataset.jsonl"))
    catalog = dat.load_catalog(os.path.join(args.data, "catalog.json"))
    train_seqs = dataset.subset([dat.SPLIT_TRAIN])
    holdout = dataset.subset([dat.SPLIT_PUBLIC])
    teacher = load_model(args.teacher) if args.teacher else None

    m = config["model"]
    if kind in ("nn-base", "nn-mix"):
        hyper = GruHyper(hidden=m["hidden"], learning_rate=m["learning_rate"],
                         weight_decay=m["weight_decay"], dropout=m["dropout"],
                         epochs=m["epochs"], batch_size=m["batch_size"],
                         window=m["window"],
                         seed=stage_seed(config["seed"], "train"))
        gru = train_gru(train_seqs, hyper)
        model = gru if kind == "nn-base" else build_defended_model(
            "nn-mix", gru=gru, seed=stage_seed(config["seed"], "defense"))
    elif kind == "boost-base":
        full = AggregateSpec.fit(catalog, FULL_MODE)
        cfg = _gbdt_config(config, "gbdt_boost_a")
        if teacher is not None:
            model = distill(teacher, train_seqs, full, cfg)
        else:
            from .gbdt import train_gbdt
            from .models import GbdtScoreModel
            from .features import aggregate_matrix
            x = aggregate_matrix(train_seqs, full)
            y = np.array([s.label for s in train_seqs], dtype=np.float64)
            model = GbdtScoreModel(gbdt=train_gbdt(x, y, cfg, loss=LOGISTIC),
                                   spec=full)
    elif kind in ("boost-mix-2", "boost-mix-5", "boost-mix-filter"):
        comps = _train_gbdt_components(config, dataset, catalog, train_seqs, teacher)
        if kind == "boost-mix-2":
            model = build_defended_model(kind, boost_a=comps["boost_a"],
                                         boost_b=comps["boost_b"])
        elif kind == "boost-mix-5":
            model = build_defended_model(kind, **comps)
        else:
            greedy_target = teacher if teacher is not None else comps["boost_a"]
            acfg = _attack_config(config)
            far_seqs = train_seqs[:min(len(train_seqs), 60)]

            def gen_random(seq):
                return atk.random_attack(seq, acfg, catalog)

            def gen_greedy(seq):
                return atk.greedy_attack(greedy_target, seq, acfg, catalog)[0]

            filt = dfs.train_filter(far_seqs, [gen_random, gen_greedy], catalog,
                                    seed=stage_seed(config["seed"], "filter"),
                                    theta=config["defense"]["theta"])
            model = build_defended_model(kind, **comps, filter_model=filt,
                                         theta=config["defense"]["theta"])
    elif kind == "surrogate-pool":
        full = AggregateSpec.fit(catalog, FULL_MODE)
        if teacher is None:
            raise ConfigError("surrogate-pool requires --teacher")
        model = build_surrogate_pool(
            train_seqs, teacher, full, n=m["pool_members"],
            seed=stage_seed(config["seed"], "pool"),
            member_config=GbdtConfig(n_trees=m["pool_trees"], max_depth=3,
                                     seed=stage_seed(config["seed"], "pool")))
    else:
        raise ConfigError(
            f"unknown kind {kind!r}; choose one of {DEFENDED_KINDS + ('surrogate-pool',)}")

    os.makedirs(args.out, exist_ok=True)
    save_model(model, os.path.join(args.out, "model.json"))
    metrics = {"kind": kind}
    for split_name, seqs in (("train", train_seqs), ("holdout", holdout)):
        if seqs and len({s.label for s in seqs}) == 2:
            metrics[f"{split_name}_auc"] = ev.roc_auc(
                model.score_batch(seqs), [s.label for s in seqs])
    if hasattr(model, "distill_spearman"):
        metrics["teacher_rank_agreement"] = model.distill_spearman
    with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
    echo_config(config, args.out)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def _split_tags(split: str) -> list:
    if split == "both":
        return [dat.SPLIT_PUBLIC, dat.SPLIT_PRIVATE]
    if split in (dat.SPLIT_PUBLIC, dat.SPLIT_PRIVATE):
        return [split]
    raise ConfigError(f"unknown split {split!r}")


def cmd_attack(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    kind = args.attack or config["attack"]["kind"]
    dataset = dat.load_dataset(os.path.join(args.data, "dataset.jsonl"))
    catalog = dat.load_catalog(os.path.join(args.data, "catalog.json"))
    seqs = dataset.subset(_split_tags(args.split or "both"))
    models = [load_model(p) for p in args.model]
    acfg = _attack_config(config, budget_override=args.budget)

    if kind == "combined":
        weights = [1.0] * len(models)
        result = atk.run_attack(kind, models[0], seqs, acfg, catalog,
                                workers=args.workers, combined_models=models,
                                combined_weights=weights)
    else:
        result = atk.run_attack(kind, models[0], seqs, acfg, catalog,
                                workers=args.workers)

    failures = {}
    for s in seqs:
        v = dat.validate_edits(s, result.edit_lists[s.client_id],
                               acfg.budget, catalog)
        if v:
            failures[s.client_id] = [f"{x.kind}: {x.detail}" for x in v]
    os.makedirs(args.out, exist_ok=True)
    if failures:
        with open(os.path.join(args.out, "violations.json"), "w",
                  encoding="utf-8") as f:
            json.dump(failures, f, indent=2, sort_keys=True)
        print(f"validation failed for {len(failures)} clients", file=sys.stderr)
        return 1

    dat.save_edit_lists(
        [result.edit_lists[s.client_id] for s in seqs],
        os.path.join(args.out, "edits.jsonl"),
        meta={"attack": kind, "seed": acfg.seed,
              "max_edits": acfg.budget.max_edits,
              "amount_shrink": acfg.budget.amount_shrink,
              "k0": acfg.k0, "k": acfg.k, "k0_beam": acfg.k0_beam,
              "epsilon": acfg.epsilon, "objective": acfg.objective.mode,
              "sampler": acfg.sampler})
    summary = {"attack": kind, "evaluations": result.evaluations}
    for split in (dat.SPLIT_PUBLIC, dat.SPLIT_PRIVATE):
        part = dataset.subset([split])
        if len({s.label for s in part}) == 2:
            cohort = ev.scored_cohort(models[0], part, result.edit_lists,
                                      args.workers)
            summary[f"attack_score_{split}"] = ev.attack_score(cohort)
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    echo_config(config, args.out)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_defend(args) -> int:
    config = load_config(args.config)
    base = load_model(args.model)
    d = config["defense"]
    strategy = args.strategy or d["strategy"]
    seed = stage_seed(config["seed"] if args.seed is None else args.seed, "defense")
    if strategy == "subsample_ensemble":
        model = dfs.SubsampleEnsembleModel(base, d["share"], d["repeats"], seed)
    elif strategy == "nn_mix":
        model = dfs.NnMixModel(base, d["share"], d["runs"], seed)
    elif strategy == "permutation_average":
        model = dfs.PermutationAverageModel(base, d["n_perm"], seed)
    else:
        raise ConfigError(f"unknown defense strategy {strategy!r}")
    os.makedirs(args.out, exist_ok=True)
    save_model(model, os.path.join(args.out, "model.json"))
    echo_config(config, args.out)
    print(f"wrapped with {strategy}")
    return 0


def _parse_named(arg: str):
    """name=path[:author] -> (name, path, author)."""
    name, rest = arg.split("=", 1)
    if ":" in rest:
        path, author = rest.rsplit(":", 1)
    else:
        path, author = rest, None
    return name, path, author


def cmd_tournament(args) -> int:
    config = load_config(args.config)
    dataset = dat.load_dataset(os.path.join(args.data, "dataset.jsonl"))
    catalog = dat.load_catalog(os.path.join(args.data, "catalog.json"))
    split = args.split or config["eval"]["split"]
    seqs = dataset.subset(_split_tags(split))
    budget = dat.AttackBudget(max_edits=config["attack"]["max_edits"],
                              amount_shrink=config["attack"]["amount_shrink"])
    attacks, defenses, authors = {}, {}, {}
    for spec in args.attack_file:
        name, path, author = _parse_named(spec)
        lists, _ = dat.load_edit_lists(path)
        attacks[name] = {el.client_id: el for el in lists}
        authors[name] = author
    for spec in args.model_file:
        name, path, author = _parse_named(spec)
        defenses[name] = load_model(path)
        authors[name] = author
    atk_view, def_view = ev.run_tournament(attacks, defenses, seqs, authors,
                                           budget, catalog, args.workers)
    os.makedirs(args.out, exist_ok=True)
    ev.emit_report(atk_view, args.out, "attack_view")
    ev.emit_report(def_view, args.out, "defense_view")
    rankings = {
        "attack_ranking": atk_view.ranking("attack", descending=True),
        "defense_ranking": def_view.ranking("defense", descending=True),
        "disqualified": atk_view.disqualified,
    }
    with open(os.path.join(args.out, "rankings.json"), "w", encoding="utf-8") as f:
        json.dump(rankings, f, indent=2, sort_keys=True)
    echo_config(config, args.out)
    print(json.dumps(rankings, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    dataset = dat.load_dataset(os.path.join(args.data, "dataset.jsonl"))
    catalog = dat.load_catalog(os.path.join(args.data, "catalog.json"))
    seqs = dataset.subset(_split_tags(args.split or "both"))
    model = load_model(args.model)
    kind = args.attack or config["attack"]["kind"]
    budgets = args.budgets or config["eval"]["budgets"]

    def factory(b):
        acfg = _attack_config(config, budget_override=b)
        return atk.run_attack(kind, model, seqs, acfg, catalog,
                              workers=args.workers).edit_lists

    sweep = ev.budget_sweep(factory, model, seqs, budgets, args.workers)
    os.makedirs(args.out, exist_ok=True)
    ev.emit_report(sweep, args.out, kind)
    echo_config(config, args.out)
    print(json.dumps({str(b): sweep["budgets"][b] for b in sweep["budgets"]},
                     sort_keys=True))
    return 0


def cmd_report(args) -> int:
    with open(args.scores, encoding="utf-8") as f:
        scores = json.load(f)
    ev.emit_report(scores, args.out, args.prefix)
    print(f"wrote {args.prefix}_scores.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="txadv",
                                description="attack/defense tournament engine "
                                            "for transaction classifiers")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=True)
        sp.add_argument("--workers", type=int, default=1)
        if data:
            sp.add_argument("--data", required=True)
            sp.add_argument("--split",
                            choices=(dat.SPLIT_PUBLIC, dat.SPLIT_PRIVATE, "both"),
                            default=None)

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(sp, data=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model kind")
    common(sp)
    sp.add_argument("--kind", choices=DEFENDED_KINDS + ("surrogate-pool",))
    sp.add_argument("--teacher", default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("attack", help="run an attack and write edit lists")
    common(sp)
    sp.add_argument("--model", action="append", required=True)
    sp.add_argument("--attack", choices=atk.ATTACK_KINDS)
    sp.add_argument("--budget", type=int, default=None)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("defend", help="wrap a model with a defense")
    common(sp, data=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--strategy",
                    choices=("subsample_ensemble", "nn_mix", "permutation_average"))
    sp.set_defaults(func=cmd_defend)

    sp = sub.add_parser("tournament", help="evaluate attack x defense pairs")
    common(sp)
    sp.add_argument("--attack-file", action="append", required=True,
                    metavar="NAME=PATH[:AUTHOR]")
    sp.add_argument("--model-file", action="append", required=True,
                    metavar="NAME=PATH[:AUTHOR]")
    sp.set_defaults(func=cmd_tournament)

    sp = sub.add_parser("sweep", help="attacked AUC per edit budget")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--attack", choices=atk.ATTACK_KINDS)
    sp.add_argument("--budgets", type=int, nargs="+")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="emit an ECDF-ready score CSV")
    sp.add_argument("--scores", required=True, help="JSON list of scores")
    sp.add_argument("--out", required=True)
    sp.add_argument("--prefix", default="report")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, dat.ValidationError, FileNotFoundError, OSError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
