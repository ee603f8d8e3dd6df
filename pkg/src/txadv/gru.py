"""GRU sequence classifier: per-channel embeddings, manual forward/backward
through time, AdamW training and analytic embedding gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, ValidationError
from .features import CHANNELS, AmountBinner, fit_amount_binner, tokenize_columns
from .models import ScoreModel

EMBED_DIMS = {
    "mcc": 16,
    "currency": 2,
    "amount_bin": 8,
    "hour": 4,
    "day": 4,
    "day_of_week": 3,
    "month": 3,
}
EMBED_TOTAL = sum(EMBED_DIMS.values())  # 40

FIXED_CARDS = {"amount_bin": 100, "hour": 24, "day": 31, "day_of_week": 7, "month": 12}


@dataclass(frozen=True)
class GruHyper:
    hidden: int = 32
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    dropout: float = 0.5
    epochs: int = 8
    batch_size: int = 64
    window: int = 300  # sequences are truncated to their last `window` entries
    seed: int = 0


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def channel_slices() -> dict:
    out, off = {}, 0
    for ch in CHANNELS:
        out[ch] = slice(off, off + EMBED_DIMS[ch])
        off += EMBED_DIMS[ch]
    return out


class GruClassifier(ScoreModel):
    """Single forward GRU over concatenated channel embeddings, linear head."""

    gradient_capable = True
    kind = "gru"

    def __init__(self, n_mcc: int, n_currency: int, binner: AmountBinner,
                 hyper: GruHyper = GruHyper(), params: dict = None):
        self.n_mcc = n_mcc
        self.n_currency = n_currency
        self.binner = binner
        self.hyper = hyper
        self.cards = dict(FIXED_CARDS, mcc=n_mcc, currency=n_currency)
        self.slices = channel_slices()
        self.final_train_loss = None
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict:
        rng = np.random.default_rng(self.hyper.seed)
        h, d = self.hyper.hidden, EMBED_TOTAL
        lim = 1.0 / np.sqrt(h)
        p = {}
        for ch in CHANNELS:
            p[f"emb_{ch}"] = rng.normal(0.0, 0.3, size=(self.cards[ch], EMBED_DIMS[ch]))
        for gate in ("z", "r", "n"):
            p[f"W{gate}"] = rng.uniform(-lim, lim, size=(d, h))
            p[f"U{gate}"] = rng.uniform(-lim, lim, size=(h, h))
            p[f"b{gate}"] = np.zeros(h)
        # Bias the update gate towards "keep" so the last hidden state starts
        # as a long-horizon leaky integrator instead of forgetting everything
        # but the most recent steps of a long sequence.
        p["bz"] += 4.0
        p["head_w"] = rng.uniform(-lim, lim, size=h)
        p["head_b"] = np.zeros(1)
        return p

    # -- token/embedding plumbing ------------------------------------------

    def _window_tokens(self, seq) -> dict:
        cols = tokenize_columns(seq, self.binner)
        w = self.hyper.window
        return {ch: np.asarray(cols[ch][-w:]) for ch in CHANNELS}

    def _embed(self, tokens: dict) -> np.ndarray:
        """tokens: channel -> (T, B) int arrays; returns (T, B, D)."""
        t, b = next(iter(tokens.values())).shape
        x = np.empty((t, b, EMBED_TOTAL))
        for ch in CHANNELS:
            x[:, :, self.slices[ch]] = self.params[f"emb_{ch}"][tokens[ch]]
        return x

    # -- forward / backward -------------------------------------------------

    def _forward(self, x: np.ndarray, keep_cache: bool = False):
        """x: (T, B, D). Returns (logits, cache)."""
        p = self.params
        t_len, b, _ = x.shape
        h = np.zeros((b, self.hyper.hidden))
        cache = {"x": x, "h": [h], "z": [], "r": [], "n": []} if keep_cache else None
        for t in range(t_len):
            xt = x[t]
            z = _sigmoid(xt @ p["Wz"] + h @ p["Uz"] + p["bz"])
            r = _sigmoid(xt @ p["Wr"] + h @ p["Ur"] + p["br"])
            n = np.tanh(xt @ p["Wn"] + r * (h @ p["Un"]) + p["bn"])
            h = (1.0 - z) * n + z * h
            if keep_cache:
                cache["h"].append(h)
                cache["z"].append(z)
                cache["r"].append(r)
                cache["n"].append(n)
        logits = h @ p["head_w"] + p["head_b"][0]
        if keep_cache:
            cache["h_last"] = h
        return logits, cache

    def _backward(self, cache: dict, dlogit: np.ndarray, head_mask=None):
        """Backprop through time. dlogit: (B,). Returns (param grads, dX)."""
        p = self.params
        x = cache["x"]
        t_len, b, d = x.shape
        grads = {k: np.zeros_like(v) for k, v in p.items()
                 if not k.startswith("emb_")}
        h_last = cache["h_last"] if head_mask is None else cache["h_last"] * head_mask
        grads["head_w"] = dlogit @ h_last
        grads["head_b"] = np.array([dlogit.sum()])
        dh = dlogit[:, None] * p["head_w"][None, :]
        if head_mask is not None:
            dh = dh * head_mask
        dx = np.empty_like(x)
        for t in range(t_len - 1, -1, -1):
            z, r, n = cache["z"][t], cache["r"][t], cache["n"][t]
            hprev = cache["h"][t]
            xt = x[t]
            unh = hprev @ p["Un"]
            dz = dh * (hprev - n)
            dn = dh * (1.0 - z)
            dhprev = dh * z
            dan = dn * (1.0 - n * n)
            dr = dan * unh
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            dx[t] = daz @ p["Wz"].T + dar @ p["Wr"].T + dan @ p["Wn"].T
            dhprev += daz @ p["Uz"].T + dar @ p["Ur"].T + (dan * r) @ p["Un"].T
            grads["Wz"] += xt.T @ daz
            grads["Wr"] += xt.T @ dar
            grads["Wn"] += xt.T @ dan
            grads["Uz"] += hprev.T @ daz
            grads["Ur"] += hprev.T @ dar
            grads["Un"] += hprev.T @ (dan * r)
            grads["bz"] += daz.sum(axis=0)
            grads["br"] += dar.sum(axis=0)
            grads["bn"] += dan.sum(axis=0)
            dh = dhprev
        return grads, dx

    # -- scoring --------------------------------------------------------------

    def logit_from_embeddings(self, x: np.ndarray) -> float:
        """Pre-sigmoid logit for one sequence given raw embeddings (T, D)."""
        logits, _ = self._forward(x[:, None, :])
        return float(logits[0])

    def score_batch(self, seqs) -> np.ndarray:
        out = np.empty(len(seqs))
        by_len = {}
        for i, s in enumerate(seqs):
            by_len.setdefault(min(len(s), self.hyper.window), []).append(i)
        for _, idx in sorted(by_len.items()):
            tokens = {ch: np.empty((0, 0), dtype=np.int64) for ch in CHANNELS}
            stacked = [self._window_tokens(seqs[i]) for i in idx]
            for ch in CHANNELS:
                tokens[ch] = np.stack([t[ch] for t in stacked], axis=1)  # (T, B)
            logits, _ = self._forward(self._embed(tokens))
            out[idx] = _sigmoid(logits)
        return out

    # -- serialization ----------------------------------------------------------

    def to_doc(self) -> dict:
        return {
            "kind": self.kind,
            "n_mcc": self.n_mcc,
            "n_currency": self.n_currency,
            "binner": self.binner.to_doc(),
            "hyper": {
                "hidden": self.hyper.hidden,
                "learning_rate": self.hyper.learning_rate,
                "weight_decay": self.hyper.weight_decay,
                "dropout": self.hyper.dropout,
                "epochs": self.hyper.epochs,
                "batch_size": self.hyper.batch_size,
                "window": self.hyper.window,
                "seed": self.hyper.seed,
            },
            "final_train_loss": self.final_train_loss,
            "params": {k: v.tolist() for k, v in self.params.items()},
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "GruClassifier":
        model = cls(
            n_mcc=doc["n_mcc"],
            n_currency=doc["n_currency"],
            binner=AmountBinner.from_doc(doc["binner"]),
            hyper=GruHyper(**doc["hyper"]),
            params={k: np.array(v, dtype=np.float64)
                    for k, v in doc["params"].items()},
        )
        model.final_train_loss = doc.get("final_train_loss")
        return model


def train_gru(train_data, hyper: GruHyper = GruHyper(),
              binner: AmountBinner = None) -> GruClassifier:
    """Mini-batch BPTT with AdamW, spatial dropout on embedding channels
    before the GRU and standard dropout before the head."""
    seqs = train_data.sequences if isinstance(train_data, Dataset) else list(train_data)
    seqs = [s for s in seqs if s.label is not None]
    if not seqs:
        raise ValidationError("no labeled training data")
    if binner is None:
        binner = fit_amount_binner(seqs)
    n_mcc = int(max(s.mcc.max() for s in seqs)) + 1
    n_cur = int(max(s.currency.max() for s in seqs)) + 1
    model = GruClassifier(n_mcc, n_cur, binner, hyper)
    rng = np.random.default_rng(hyper.seed + 1)

    tokens_all = [model._window_tokens(s) for s in seqs]
    labels = np.array([s.label for s in seqs], dtype=np.float64)
    lengths = np.array([len(t["mcc"]) for t in tokens_all])

    adam_m = {k: np.zeros_like(v) for k, v in model.params.items()}
    adam_v = {k: np.zeros_like(v) for k, v in model.params.items()}
    step = 0
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    p_drop = hyper.dropout
    final_loss = None

    # Balance classes by oversampling the minority so mini-batch gradients are
    # not dominated by the majority class at low default rates.
    pos = np.flatnonzero(labels == 1.0)
    neg = np.flatnonzero(labels == 0.0)
    if 0 < len(pos) < len(neg):
        reps = int(np.ceil(len(neg) / len(pos)))
        pool = np.concatenate([neg, np.tile(pos, reps)[:len(neg)]])
    elif 0 < len(neg) < len(pos):
        reps = int(np.ceil(len(pos) / len(neg)))
        pool = np.concatenate([pos, np.tile(neg, reps)[:len(pos)]])
    else:
        pool = np.arange(len(seqs))

    for _ in range(hyper.epochs):
        order = rng.permutation(pool)
        # Group equal lengths so each mini-batch stacks rectangularly.
        order = order[np.argsort(lengths[order], kind="stable")]
        for start in range(0, len(order), hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            if len(set(lengths[idx])) > 1:
                idx = idx[lengths[idx] == lengths[idx][0]]
            tokens = {ch: np.stack([tokens_all[i][ch] for i in idx], axis=1)
                      for ch in CHANNELS}
            y = labels[idx]
            x = model._embed(tokens)

            # Spatial dropout: zero whole embedding channels per sequence.
            ch_mask = {}
            if p_drop > 0:
                keep = (rng.random((len(idx), len(CHANNELS))) >= p_drop)
                for c, ch in enumerate(CHANNELS):
                    m = keep[:, c].astype(np.float64) / (1.0 - p_drop)
                    ch_mask[ch] = m
                    x[:, :, model.slices[ch]] *= m[None, :, None]
            head_mask = None
            if p_drop > 0:
                head_mask = (rng.random((len(idx), hyper.hidden)) >= p_drop)
                head_mask = head_mask.astype(np.float64) / (1.0 - p_drop)

            logits, cache = model._forward(x, keep_cache=True)
            if head_mask is not None:
                logits = (cache["h_last"] * head_mask) @ model.params["head_w"] \
                    + model.params["head_b"][0]
            probs = _sigmoid(logits)
            loss = float(np.mean(
                -(y * np.log(probs + 1e-12) + (1 - y) * np.log(1 - probs + 1e-12))))
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at step {step}: logits range "
                    f"[{logits.min()}, {logits.max()}]")
            final_loss = loss

            dlogit = (probs - y) / len(idx)
            grads, dx = model._backward(cache, dlogit, head_mask=head_mask)

            # Embedding gradients pass back through the channel dropout mask.
            for ch in CHANNELS:
                gslice = dx[:, :, model.slices[ch]]
                if ch in ch_mask:
                    gslice = gslice * ch_mask[ch][None, :, None]
                gtab = np.zeros_like(model.params[f"emb_{ch}"])
                np.add.at(gtab, tokens[ch], gslice)
                grads[f"emb_{ch}"] = gtab

            step += 1
            lr = hyper.learning_rate
            for k, g in grads.items():
                adam_m[k] = beta1 * adam_m[k] + (1 - beta1) * g
                adam_v[k] = beta2 * adam_v[k] + (1 - beta2) * g * g
                mhat = adam_m[k] / (1 - beta1 ** step)
                vhat = adam_v[k] / (1 - beta2 ** step)
                model.params[k] -= lr * (mhat / (np.sqrt(vhat) + eps)
                                         + hyper.weight_decay * model.params[k])

    model.final_train_loss = final_loss
    return model


def embedding_gradient(model: GruClassifier, seq) -> np.ndarray:
    """Analytic gradient of the pre-sigmoid logit with respect to every
    input embedding vector; shape (T, total embedding dim). Dropout off."""
    if not model.gradient_capable:
        raise ValidationError("model is not gradient capable")
    tokens = {ch: t[:, None] for ch, t in model._window_tokens(seq).items()}
    x = model._embed(tokens)
    _, cache = model._forward(x, keep_cache=True)
    _, dx = model._backward(cache, np.ones(1))
    return dx[:, 0, :]


def nearest_token(table: np.ndarray, vector: np.ndarray,
                  candidates: np.ndarray = None) -> int:
    """Token id whose embedding row is closest in l2; ties -> lowest id.
    `candidates` optionally restricts the searched row ids."""
    rows = table if candidates is None else table[candidates]
    d = np.sum((rows - vector[None, :]) ** 2, axis=1)
    i = int(np.argmin(d))  # argmin takes the first (lowest-id) minimum
    return i if candidates is None else int(candidates[i])
