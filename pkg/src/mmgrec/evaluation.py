"""Sampled-candidate leave-one-out evaluation: Recall@K and NDCG@K.

Each evaluated user ranks its held-out item against up to 100 sampled items
it has no known interaction with.
"""
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import seeding
from .errors import ProtocolError
from .graph import build_graph
from .ingest import SplitDataset
from .model import ModelParams, ScoringMode, item_embeddings, user_vectors

_STREAMS = {"test": seeding.EVAL_TEST, "validation": seeding.EVAL_VALID}


@dataclass
class CandidateSet:
    user: int
    target: int
    negatives: np.ndarray

    @property
    def items(self) -> np.ndarray:
        """Target first, then negatives."""
        return np.concatenate([[self.target], self.negatives]).astype(np.int64)


@dataclass
class EvalReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    n_negatives: int
    seed: int
    scoring: str = "dot"
    per_user_ranks: np.ndarray = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        out = {}
        for k in sorted(self.recall):
            out[f"recall@{k}"] = self.recall[k]
            out[f"ndcg@{k}"] = self.ndcg[k]
        out.update(users=self.n_users, negatives=self.n_negatives, seed=self.seed, scoring=self.scoring)
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict())


def _target(split: SplitDataset, user: int, holdout: str) -> int:
    if holdout not in _STREAMS:
        raise ValueError(f"holdout must be 'test' or 'validation', got {holdout!r}")
    target = int((split.test_item if holdout == "test" else split.valid_item)[user])
    if target < 0:
        raise ProtocolError(f"user {user} has no {holdout} item")
    return target


def build_candidate_set(split: SplitDataset, user: int, n_neg: int = 100, seed: int = 0,
                        holdout: str = "test") -> CandidateSet:
    """Held-out item plus up to ``n_neg`` uniform negatives drawn without replacement.

    Negatives avoid the user's training items and every held-out item, and
    depend only on ``(seed, user, holdout)``.
    """
    target = _target(split, user, holdout)
    known = split.train_pos[user] | split.held_out(user)
    eligible = np.setdiff1d(np.arange(split.n_items), np.fromiter(known, dtype=np.int64, count=len(known)))
    if eligible.size == 0:
        raise ProtocolError(f"user {user} has no eligible negative items")
    rng = seeding.stream(seed, _STREAMS[holdout], user)
    negatives = rng.choice(eligible, size=min(n_neg, eligible.size), replace=False)
    return CandidateSet(user, target, np.asarray(negatives, dtype=np.int64))


def rank_of_target(scores, target_pos: int, item_ids=None) -> int:
    """1-based rank under descending score, ties broken by ascending item index."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(scores.size) if item_ids is None else np.asarray(item_ids)
    s, t = scores[target_pos], ids[target_pos]
    return int(1 + np.sum(scores > s) + np.sum((scores == s) & (ids < t)))


def metrics_at_k(rank: int, k: int) -> tuple[float, float]:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    if rank > k:
        return 0.0, 0.0
    return 1.0, 1.0 / math.log2(rank + 1)


def evaluate_scorer(
    split: SplitDataset,
    score_fn: Callable[[int, np.ndarray], np.ndarray],
    ks=(10, 20),
    n_neg: int = 100,
    seed: int = 0,
    holdout: str = "test",
    scoring: str = "dot",
) -> EvalReport:
    """Evaluate an arbitrary ``score_fn(user, items) -> scores``."""
    held = split.test_item if holdout == "test" else split.valid_item
    users = np.flatnonzero(held >= 0)
    if users.size == 0:
        raise ProtocolError(f"no users have a {holdout} item")
    ranks = np.empty(users.size, dtype=np.int64)
    n_candidates = 0
    for n, u in enumerate(users):
        cand = build_candidate_set(split, int(u), n_neg, seed, holdout)
        items = cand.items
        ranks[n] = rank_of_target(score_fn(int(u), items), 0, items)
        n_candidates = max(n_candidates, items.size - 1)
    recall, ndcg = {}, {}
    for k in ks:
        per_user = np.array([metrics_at_k(int(r), k) for r in ranks])
        recall[k] = float(per_user[:, 0].mean())
        ndcg[k] = float(per_user[:, 1].mean())
    return EvalReport(recall, ndcg, int(users.size), n_neg, seed, str(scoring), ranks)


def evaluate(params: ModelParams, split: SplitDataset, x_img, x_txt, config, holdout="test",
             graph=None, seed: int | None = None) -> EvalReport:
    """Score each user's candidate set with the model and aggregate metrics.

    ``config`` supplies scoring mode, layer count, gate override, cutoffs and
    negative count; ``seed`` defaults to ``config.seed``.
    """
    if graph is None:
        graph = build_graph(split.train_users, split.train_items, split.n_users, split.n_items)
    mode = ScoringMode(config.scoring)
    z = item_embeddings(params, x_img, x_txt, config.fixed_gate)
    p = user_vectors(params, graph, mode, config.gcn_layers)
    return evaluate_scorer(
        split,
        lambda u, items: z[items] @ p[u],
        ks=config.eval_ks,
        n_neg=config.eval_negatives,
        seed=config.seed if seed is None else seed,
        holdout=holdout,
        scoring=mode.value,
    )
