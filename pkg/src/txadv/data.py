"""Domain records for transaction sequences, synthetic data generation,
edit constraints and line-delimited serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

DATASET_SCHEMA = "txadv.dataset"
EDITS_SCHEMA = "txadv.edits"
CATALOG_SCHEMA = "txadv.catalog"
SCHEMA_VERSION = 1

# Portion of the risk-MCC mixture weight actually applied at signal_strength=1.
# Calibrated so that at the default budget (10 edits of a 300-long sequence)
# an attacker can move a client across the class score gap: defaulters get
# on the order of ~10 extra risk-MCC transactions, not hundreds.
_RISK_MIX_SCALE = 0.08
# Extra night-hour probability at signal_strength=1. This plants a signal in
# timestamp-derived features, which no substitution attack can touch.
_NIGHT_SHIFT_SCALE = 0.10

SPLIT_TRAIN = "train"
SPLIT_PUBLIC = "public"
SPLIT_PRIVATE = "private"


class ValidationError(ValueError):
    """Raised when a domain record violates its invariants."""


@dataclass(frozen=True)
class Transaction:
    mcc: int
    amount: float
    currency: int
    timestamp: float

    def __post_init__(self):
        if self.amount < 0:
            raise ValidationError(f"negative amount {self.amount}")
        if not np.isfinite(self.timestamp):
            raise ValidationError("non-finite timestamp")


class ClientSequence:
    """Time-ordered transactions of one client, stored columnar.

    Columnar storage keeps candidate generation in attacks cheap; the
    ``transactions`` view materializes ``Transaction`` records on demand.
    """

    __slots__ = ("client_id", "label", "mcc", "amount", "currency", "timestamp")

    def __init__(self, client_id, mcc, amount, currency, timestamp,
                 label: Optional[int] = None, validate: bool = True):
        self.client_id = client_id
        self.mcc = np.asarray(mcc, dtype=np.int64)
        self.amount = np.asarray(amount, dtype=np.float64)
        self.currency = np.asarray(currency, dtype=np.int64)
        self.timestamp = np.asarray(timestamp, dtype=np.float64)
        self.label = label
        if validate:
            self._check()

    def _check(self):
        n = len(self.mcc)
        if n < 1:
            raise ValidationError("sequence must contain at least one transaction")
        if not (len(self.amount) == len(self.currency) == len(self.timestamp) == n):
            raise ValidationError("column length mismatch")
        if np.any(self.amount < 0):
            raise ValidationError("negative amount")
        if not np.all(np.isfinite(self.timestamp)):
            raise ValidationError("non-finite timestamp")
        if np.any(np.diff(self.timestamp) < 0):
            raise ValidationError("timestamps not sorted")
        if self.label is not None and self.label not in (0, 1):
            raise ValidationError(f"label must be binary, got {self.label}")

    @classmethod
    def from_transactions(cls, client_id, transactions: Sequence[Transaction],
                          label: Optional[int] = None, validate: bool = True):
        return cls(
            client_id,
            [t.mcc for t in transactions],
            [t.amount for t in transactions],
            [t.currency for t in transactions],
            [t.timestamp for t in transactions],
            label=label,
            validate=validate,
        )

    def __len__(self):
        return len(self.mcc)

    def transaction(self, i: int) -> Transaction:
        return Transaction(int(self.mcc[i]), float(self.amount[i]),
                           int(self.currency[i]), float(self.timestamp[i]))

    @property
    def transactions(self) -> tuple:
        return tuple(self.transaction(i) for i in range(len(self)))

    def copy_columns(self):
        return (self.mcc.copy(), self.amount.copy(),
                self.currency.copy(), self.timestamp.copy())

    def value_equal(self, other: "ClientSequence") -> bool:
        return (self.client_id == other.client_id
                and self.label == other.label
                and np.array_equal(self.mcc, other.mcc)
                and np.array_equal(self.amount, other.amount)
                and np.array_equal(self.currency, other.currency)
                and np.array_equal(self.timestamp, other.timestamp))


@dataclass
class Dataset:
    sequences: list
    split_tags: dict  # client_id -> split name

    def __post_init__(self):
        ids = [s.client_id for s in self.sequences]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate client_ids")

    def __len__(self):
        return len(self.sequences)

    def by_id(self, client_id) -> ClientSequence:
        if not hasattr(self, "_index"):
            self._index = {s.client_id: s for s in self.sequences}
        return self._index[client_id]

    def subset(self, splits: Iterable[str]) -> list:
        wanted = set(splits)
        return [s for s in self.sequences if self.split_tags.get(s.client_id) in wanted]

    def labels(self, seqs=None) -> np.ndarray:
        seqs = self.sequences if seqs is None else seqs
        return np.array([s.label for s in seqs])


@dataclass
class MccEntry:
    amount_min: float
    amount_max: float
    frequency: int
    samples: np.ndarray  # sorted, bounded subsample of observed amounts


@dataclass
class MccCatalog:
    """Per-MCC amount intervals, frequencies and empirical amount samples."""

    n_mcc: int
    n_currency: int
    entries: dict  # mcc -> MccEntry, observed MCCs only

    def observed(self, mcc: int) -> bool:
        return mcc in self.entries

    @property
    def observed_mccs(self) -> np.ndarray:
        return np.array(sorted(self.entries), dtype=np.int64)

    def frequencies(self) -> np.ndarray:
        freq = np.zeros(self.n_mcc, dtype=np.int64)
        for m, e in self.entries.items():
            freq[m] = e.frequency
        return freq


@dataclass(frozen=True)
class AttackBudget:
    max_edits: int = 10
    amount_shrink: float = 0.95

    def __post_init__(self):
        if self.max_edits < 0:
            raise ValidationError("max_edits must be >= 0")
        if not (0 < self.amount_shrink <= 1):
            raise ValidationError("amount_shrink must be in (0, 1]")


SUBSTITUTE = "substitute"
APPEND = "append"


@dataclass(frozen=True)
class Edit:
    kind: str  # substitute | append
    new_mcc: int
    new_amount: float
    position: Optional[int] = None  # substitute only

    def __post_init__(self):
        if self.kind not in (SUBSTITUTE, APPEND):
            raise ValidationError(f"unknown edit kind {self.kind!r}")
        if self.kind == SUBSTITUTE and self.position is None:
            raise ValidationError("substitute edit needs a position")


@dataclass
class EditList:
    client_id: object
    edits: list = field(default_factory=list)

    def __len__(self):
        return len(self.edits)


@dataclass(frozen=True)
class SynthConfig:
    n_clients: int = 2000
    seq_len: int = 300
    n_mcc: int = 100
    n_currency: int = 4
    default_rate: float = 0.04
    signal_strength: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.default_rate < 1):
            raise ValidationError("default_rate must be in (0, 1)")
        if self.seq_len < 1:
            raise ValidationError("seq_len must be >= 1")
        if self.n_clients < 1:
            raise ValidationError("n_clients must be >= 1")
        if not (0 <= self.signal_strength <= 1):
            raise ValidationError("signal_strength must be in [0, 1]")


def risk_mccs(n_mcc: int) -> np.ndarray:
    """The designated risk-MCC subset: a mid-frequency band, 10% of codes."""
    k = max(1, n_mcc // 10)
    start = n_mcc // 3
    return np.arange(start, min(start + k, n_mcc), dtype=np.int64)


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Deterministic synthetic dataset with a learnable, attackable signal.

    Defaulters draw MCCs from a mixture shifted toward a risk subset
    (attackable through substitutions) and transact more at night
    (visible only to timestamp-derived features, hence unattackable).
    """
    rng = np.random.default_rng(config.seed)
    n_mcc, t = config.n_mcc, config.seq_len
    s = config.signal_strength

    base_w = 1.0 / (np.arange(n_mcc) + 1.0)
    base_w /= base_w.sum()
    risk = risk_mccs(n_mcc)
    risk_w = np.zeros(n_mcc)
    risk_w[risk] = 1.0 / len(risk)
    mix = s * _RISK_MIX_SCALE
    defaulter_w = (1.0 - mix) * base_w + mix * risk_w

    # Per-MCC lognormal amount scales, fixed by the seed.
    mu = rng.normal(np.log(50.0), 0.8, size=n_mcc)
    sigma = 0.5

    day_hour_w = np.ones(24)
    day_hour_w[8:20] = 4.0
    day_hour_w /= day_hour_w.sum()
    night_w = np.zeros(24)
    night_w[0:6] = 1.0 / 6.0
    shift = s * _NIGHT_SHIFT_SCALE
    defaulter_hour_w = (1.0 - shift) * day_hour_w + shift * night_w

    labels = (rng.random(config.n_clients) < config.default_rate).astype(np.int64)

    start_epoch = 1_600_041_600  # fixed midnight-aligned origin
    sequences = []
    for i in range(config.n_clients):
        lab = int(labels[i])
        mcc_w = defaulter_w if lab == 1 else base_w
        hour_w = defaulter_hour_w if lab == 1 else day_hour_w
        mcc = rng.choice(n_mcc, size=t, p=mcc_w)
        amount = np.exp(rng.normal(mu[mcc], sigma))
        currency = np.where(rng.random(t) < 0.95, 0,
                            rng.integers(1, max(config.n_currency, 2), size=t))
        days = np.cumsum(rng.integers(1, 3, size=t))
        hours = rng.choice(24, size=t, p=hour_w)
        within = rng.random(t) * 3600.0
        ts = start_epoch + days * 86400.0 + hours * 3600.0 + np.floor(within)
        sequences.append(ClientSequence(f"c{i:06d}", mcc, amount, currency, ts, label=lab))

    tags = {seq.client_id: SPLIT_TRAIN for seq in sequences}
    return Dataset(sequences, tags)


def build_catalog(dataset: Dataset, sample_cap: int = 200) -> MccCatalog:
    """Scan a dataset into per-MCC intervals, frequencies and amount samples."""
    if len(dataset) == 0:
        raise ValidationError("empty dataset")
    all_mcc = np.concatenate([s.mcc for s in dataset.sequences])
    all_amount = np.concatenate([s.amount for s in dataset.sequences])
    n_mcc = int(all_mcc.max()) + 1
    n_currency = int(max(int(s.currency.max()) for s in dataset.sequences)) + 1

    entries = {}
    order = np.argsort(all_mcc, kind="stable")
    sm, sa = all_mcc[order], all_amount[order]
    bounds = np.searchsorted(sm, np.arange(n_mcc + 1))
    for m in range(n_mcc):
        lo, hi = bounds[m], bounds[m + 1]
        if lo == hi:
            continue
        amts = np.sort(sa[lo:hi])
        if len(amts) > sample_cap:
            # Deterministic representative subsample: evenly spaced order stats.
            idx = np.linspace(0, len(amts) - 1, sample_cap).round().astype(int)
            samples = amts[idx]
        else:
            samples = amts
        entries[m] = MccEntry(float(amts[0]), float(amts[-1]), int(hi - lo), samples)
    return MccCatalog(n_mcc=n_mcc, n_currency=n_currency, entries=entries)


def allowed_amount_interval(catalog: MccCatalog, mcc: int, shrink: float):
    """Observed amount interval of an MCC, shrunk symmetrically about its
    midpoint to ``shrink`` times its width. Closed bounds."""
    if not catalog.observed(mcc):
        raise ValidationError(f"mcc {mcc} unobserved; no legal substitution")
    e = catalog.entries[mcc]
    mid = 0.5 * (e.amount_min + e.amount_max)
    half = 0.5 * shrink * (e.amount_max - e.amount_min)
    return (mid - half, mid + half)


def apply_edits(seq: ClientSequence, edit_list: EditList) -> ClientSequence:
    """Return a new sequence with the edits applied; the input is untouched.

    Substitutions replace mcc+amount in place (timestamp and currency kept);
    appends go to the end carrying the last timestamp and currency.
    """
    mcc, amount, currency, ts = seq.copy_columns()
    seen = set()
    appends = []
    for e in edit_list.edits:
        if e.kind == SUBSTITUTE:
            p = e.position
            if not (0 <= p < len(seq)):
                raise ValidationError(f"substitute position {p} out of range")
            if p in seen:
                raise ValidationError(f"duplicate substitute position {p}")
            seen.add(p)
            mcc[p] = e.new_mcc
            amount[p] = e.new_amount
        else:
            appends.append(e)
    if appends:
        last_ts = ts[-1]
        last_cur = currency[-1]
        mcc = np.concatenate([mcc, [e.new_mcc for e in appends]])
        amount = np.concatenate([amount, [e.new_amount for e in appends]])
        currency = np.concatenate([currency, [last_cur] * len(appends)])
        ts = np.concatenate([ts, [last_ts] * len(appends)])
    return ClientSequence(seq.client_id, mcc, amount, currency, ts,
                          label=seq.label, validate=False)


@dataclass
class Violation:
    kind: str  # budget | position | duplicate_position | unobserved_mcc | amount
    detail: str


def validate_edits(seq: ClientSequence, edit_list: EditList,
                   budget: AttackBudget, catalog: MccCatalog) -> list:
    """List constraint violations; an empty list means the edits are admissible."""
    violations = []
    if len(edit_list) > budget.max_edits:
        violations.append(Violation(
            "budget", f"{len(edit_list)} edits exceed max {budget.max_edits}"))
    seen = set()
    for i, e in enumerate(edit_list.edits):
        if e.kind == SUBSTITUTE:
            if not (0 <= e.position < len(seq)):
                violations.append(Violation(
                    "position", f"edit {i}: position {e.position} out of range"))
                continue
            if e.position in seen:
                violations.append(Violation(
                    "duplicate_position", f"edit {i}: position {e.position} repeated"))
            seen.add(e.position)
        if not catalog.observed(e.new_mcc):
            violations.append(Violation(
                "unobserved_mcc", f"edit {i}: mcc {e.new_mcc} unobserved"))
            continue
        lo, hi = allowed_amount_interval(catalog, e.new_mcc, budget.amount_shrink)
        if not (lo <= e.new_amount <= hi):
            violations.append(Violation(
                "amount", f"edit {i}: amount {e.new_amount} outside [{lo}, {hi}]"
                          f" for mcc {e.new_mcc}"))
    return violations


def split_public_private(dataset_or_seqs, seed: int):
    """Stratified halving of labeled clients into (public, private) lists."""
    seqs = dataset_or_seqs.sequences if isinstance(dataset_or_seqs, Dataset) \
        else list(dataset_or_seqs)
    seqs = [s for s in seqs if s.label is not None]
    if len(seqs) < 2:
        raise ValidationError("need at least 2 labeled clients to split")
    rng = np.random.default_rng(seed)
    public, private = [], []
    for lab in (0, 1):
        group = [s for s in seqs if s.label == lab]
        perm = rng.permutation(len(group))
        half = len(group) // 2
        # Alternate which half gets the extra element per label so totals
        # never differ by more than 1.
        extra_to_public = (lab == 0)
        cut = half + (len(group) % 2 if extra_to_public else 0)
        public.extend(group[i] for i in perm[:cut])
        private.extend(group[i] for i in perm[cut:])
    return public, private


def assign_splits(dataset: Dataset, test_fraction: float, seed: int) -> Dataset:
    """Tag a test fraction of clients and halve it into public/private."""
    rng = np.random.default_rng(seed)
    n_test = int(round(test_fraction * len(dataset)))
    perm = rng.permutation(len(dataset))
    test_seqs = [dataset.sequences[i] for i in perm[:n_test]]
    public, private = split_public_private(test_seqs, seed)
    tags = {s.client_id: SPLIT_TRAIN for s in dataset.sequences}
    for s in public:
        tags[s.client_id] = SPLIT_PUBLIC
    for s in private:
        tags[s.client_id] = SPLIT_PRIVATE
    return Dataset(dataset.sequences, tags)


# ---------------------------------------------------------------------------
# Serialization: line-delimited JSON with a schema header on line 1.

def _header(schema: str, **extra) -> str:
    doc = {"schema": schema, "version": SCHEMA_VERSION}
    doc.update(extra)
    return json.dumps(doc, sort_keys=True)


def _check_header(line: str, schema: str) -> dict:
    doc = json.loads(line)
    if doc.get("schema") != schema:
        raise ValidationError(f"expected schema {schema!r}, got {doc.get('schema')!r}")
    if doc.get("version") != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema version {doc.get('version')}")
    return doc


def save_dataset(dataset: Dataset, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(_header(DATASET_SCHEMA) + "\n")
        for s in dataset.sequences:
            rec = {
                "client_id": s.client_id,
                "label": s.label,
                "split": dataset.split_tags.get(s.client_id, SPLIT_TRAIN),
                "mcc": s.mcc.tolist(),
                "amount": s.amount.tolist(),
                "currency": s.currency.tolist(),
                "timestamp": s.timestamp.tolist(),
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as f:
        _check_header(f.readline(), DATASET_SCHEMA)
        seqs, tags = [], {}
        for line in f:
            rec = json.loads(line)
            seq = ClientSequence(rec["client_id"], rec["mcc"], rec["amount"],
                                 rec["currency"], rec["timestamp"],
                                 label=rec["label"])
            seqs.append(seq)
            tags[seq.client_id] = rec["split"]
    return Dataset(seqs, tags)


def save_edit_lists(edit_lists: Iterable[EditList], path, meta: Optional[dict] = None):
    with open(path, "w", encoding="utf-8") as f:
        f.write(_header(EDITS_SCHEMA, **(meta or {})) + "\n")
        for el in edit_lists:
            rec = {
                "client_id": el.client_id,
                "edits": [
                    {"kind": e.kind, "position": e.position,
                     "new_mcc": e.new_mcc, "new_amount": e.new_amount}
                    for e in el.edits
                ],
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_edit_lists(path):
    with open(path, encoding="utf-8") as f:
        meta = _check_header(f.readline(), EDITS_SCHEMA)
        lists = []
        for line in f:
            rec = json.loads(line)
            edits = [Edit(kind=e["kind"], position=e["position"],
                          new_mcc=e["new_mcc"], new_amount=e["new_amount"])
                     for e in rec["edits"]]
            lists.append(EditList(rec["client_id"], edits))
    return lists, meta


def save_catalog(catalog: MccCatalog, path):
    doc = {
        "schema": CATALOG_SCHEMA,
        "version": SCHEMA_VERSION,
        "n_mcc": catalog.n_mcc,
        "n_currency": catalog.n_currency,
        "entries": {
            str(m): {
                "amount_min": e.amount_min,
                "amount_max": e.amount_max,
                "frequency": e.frequency,
                "samples": e.samples.tolist(),
            }
            for m, e in sorted(catalog.entries.items())
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)


def load_catalog(path) -> MccCatalog:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("schema") != CATALOG_SCHEMA or doc.get("version") != SCHEMA_VERSION:
        raise ValidationError("bad catalog file")
    entries = {
        int(m): MccEntry(e["amount_min"], e["amount_max"], e["frequency"],
                         np.array(e["samples"], dtype=np.float64))
        for m, e in doc["entries"].items()
    }
    return MccCatalog(doc["n_mcc"], doc["n_currency"], entries)
