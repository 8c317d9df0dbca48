"""Closed-set accuracy, open-set scoring rules, AUROC, and multi-episode
evaluation reports.

All open-set scores share one orientation: higher means more likely to be
an open-set (unknown) sample.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import model as M
from . import tensor as T
from .data import sample_episode
from .errors import DataError, UsageError
from .rngs import rng_stream

SCORE_RULES = ("dummy_prob", "max_prob_complement", "neg_min_distance", "neg_dummy_distance")
DUMMY_ONLY_RULES = ("dummy_prob", "neg_dummy_distance")


def classify(probs, n_way=None):
    """Predicted known class per query: argmax over the known columns only
    (the dummy column never wins), first index on ties."""
    p = probs.data if isinstance(probs, T.Tensor) else np.asarray(probs)
    if p.ndim == 1:
        p = p[None, :]
    cols = p.shape[1] if n_way is None else n_way
    return np.argmax(p[:, :cols], axis=1)


def openset_decide(value, threshold):
    """Strict comparison: a score exactly at the threshold stays 'known'."""
    return "unknown" if value > threshold else "known"


def auroc(known_scores, unknown_scores):
    """Mann-Whitney statistic via average ranks, ties counted half.

    Probability that a random unknown query outscores a random known one.
    """
    k = np.asarray(known_scores, dtype=np.float64)
    u = np.asarray(unknown_scores, dtype=np.float64)
    if k.size == 0 or u.size == 0:
        raise DataError("auroc needs at least one known and one unknown score")
    merged = np.concatenate([k, u])
    uniq, inv, counts = np.unique(merged, return_inverse=True, return_counts=True)
    hi = np.cumsum(counts)
    avg_rank = hi - (counts - 1) / 2.0  # mean rank of each tie group, 1-based
    ranks = avg_rank[inv]
    r_u = ranks[k.size :].sum()
    n_u, n_k = u.size, k.size
    return float((r_u - n_u * (n_u + 1) / 2.0) / (n_u * n_k))


def open_set_scores(rule, probs, dist_known, dist_dummy):
    """Per-query open-set scores under the chosen rule, oriented so that
    higher means more open."""
    if rule == "dummy_prob":
        if probs.shape[1] < 2 or dist_dummy is None:
            raise UsageError("dummy_prob scores need a dummy-equipped model")
        return probs[:, -1]
    if rule == "max_prob_complement":
        n_known = probs.shape[1] - (0 if dist_dummy is None else 1)
        return 1.0 - probs[:, :n_known].max(axis=1)
    if rule == "neg_min_distance":
        # far from every known prototype <=> likely open
        return dist_known.min(axis=1)
    if rule == "neg_dummy_distance":
        if dist_dummy is None:
            raise UsageError("neg_dummy_distance scores need a dummy-equipped model")
        return -dist_dummy
    raise UsageError(f"unknown score rule {rule!r} (choose from {', '.join(SCORE_RULES)})")


def default_rule(model):
    return "dummy_prob" if model.generator is not None else "max_prob_complement"


def encode_eval(model, x, chunk=25):
    """Eval-mode encoding in cache-friendly chunks.

    Exact: with running-statistics batchnorm the encoder is per-sample, so
    chunking cannot change any value.
    """
    x = np.asarray(x)
    b = x.shape[0]
    out = T.ARENA.take((b, model.hyper.embedding_dim))
    with T.no_grad():
        for i in range(0, b, chunk):
            out[i : i + chunk] = model.encode(x[i : i + chunk], training=False).data
    return T.Tensor(out)


def episode_forward(model, x, labels, n_way, n_shot):
    """Eval-mode forward of one materialized episode.

    Returns (probs over N(+1), dist_known (Q,N), dist_dummy (Q,) or None),
    with queries ordered known-then-open as materialized.
    """
    n_support = n_way * n_shot
    with T.no_grad():
        emb = encode_eval(model, x)
        support = T.slice_rows(emb, 0, n_support)
        queries = T.slice_rows(emb, n_support, emb.data.shape[0])
        protos = M.compute_prototypes(support, labels[:n_support], n_way, n_shot)
        rows = None
        if model.generator is not None:
            dummies = model.generator.generate(protos)
            rows, _ = M.select_dummy(queries, dummies, 1.0, "eval")
        probs = M.posterior(queries, protos, rows, model.scoring)
        dist_known = T.pairwise_sqdist(queries, protos).data
        dist_dummy = T.rows_sqdist(queries, rows).data if rows is not None else None
    return probs.data, dist_known, dist_dummy


def episode_metrics(model, x, labels, n_way, n_shot, rule):
    """(closed-set accuracy, auroc) for one materialized episode."""
    probs, dist_known, dist_dummy = episode_forward(model, x, labels, n_way, n_shot)
    n_support = n_way * n_shot
    qlabels = labels[n_support:]
    known_mask = qlabels < n_way
    if not known_mask.any() or known_mask.all():
        raise DataError("episode needs both known and open-set queries for metrics")
    preds = classify(probs, n_way)
    accuracy = float((preds[known_mask] == qlabels[known_mask]).mean())
    scores = open_set_scores(rule, probs, dist_known, dist_dummy)
    return accuracy, auroc(scores[known_mask], scores[~known_mask])


@dataclass
class EvalReport:
    episodes: int
    rule: str
    accuracy_mean: float
    accuracy_std: float
    accuracy_ci95: float
    auroc_mean: float
    auroc_std: float
    auroc_ci95: float
    per_episode: list  # (episode index, accuracy, auroc)

    def to_json(self):
        payload = {k: getattr(self, k) for k in (
            "episodes", "rule", "accuracy_mean", "accuracy_std", "accuracy_ci95",
            "auroc_mean", "auroc_std", "auroc_ci95",
        )}
        return json.dumps(payload, indent=2, sort_keys=True)

    def write(self, json_path, csv_path):
        with open(json_path, "w", encoding="utf-8") as f:
            f.write(self.to_json() + "\n")
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["episode", "accuracy", "auroc"])
            for row in self.per_episode:
                writer.writerow([row[0], repr(row[1]), repr(row[2])])


def summarize(pairs, rule):
    acc = np.array([a for a, _ in pairs])
    roc = np.array([r for _, r in pairs])
    n = len(pairs)

    def std(v):
        return float(v.std(ddof=1)) if n > 1 else 0.0

    return EvalReport(
        episodes=n,
        rule=rule,
        accuracy_mean=float(acc.mean()),
        accuracy_std=std(acc),
        accuracy_ci95=1.96 * std(acc) / np.sqrt(n),
        auroc_mean=float(roc.mean()),
        auroc_std=std(roc),
        auroc_ci95=1.96 * std(roc) / np.sqrt(n),
        per_episode=[(i, float(a), float(r)) for i, (a, r) in enumerate(pairs)],
    )


def evaluate(model, store, split, episode_cfg, n_episodes, rule, seed):
    """Seeded multi-episode evaluation on clean (unaugmented) features."""
    if rule in DUMMY_ONLY_RULES and model.generator is None:
        raise UsageError(f"score rule {rule!r} needs a dummy-equipped model")
    pairs = []
    with threadpool_limits(limits=1, user_api="blas"), T.arena_scope() as arena:
        for i in range(n_episodes):
            ep = sample_episode(store.manifest, split, episode_cfg, rng_stream(seed, "eval", i))
            x, labels = store.episode_batch(ep)
            pairs.append(episode_metrics(model, x, labels, episode_cfg.n_way, episode_cfg.n_shot, rule))
            arena.recycle()
    return summarize(pairs, rule)
