import logging

import numpy as np
import pytest

from mmgrec import ingest
from mmgrec.graph import build_graph


def dense_normalized_adjacency(n_users, n_items, users, items):
    """Independent dense D^-1/2 A D^-1/2 with 0 in place of 1/sqrt(0)."""
    n = n_users + n_items
    A = np.zeros((n, n))
    for u, i in zip(users, items):
        A[u, n_users + i] = A[n_users + i, u] = 1.0
    deg = A.sum(axis=1)
    inv = np.zeros(n)
    inv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    return inv[:, None] * A * inv[None, :]


def naive_k_core(pairs, k):
    """Repeat-until-stable reference filter over a set of (user, item) pairs."""
    pairs = set(pairs)
    while True:
        ucount, icount = {}, {}
        for u, i in pairs:
            ucount[u] = ucount.get(u, 0) + 1
            icount[i] = icount.get(i, 0) + 1
        keep = {(u, i) for u, i in pairs if ucount[u] >= k and icount[i] >= k}
        if keep == pairs:
            return keep
        pairs = keep


def random_bipartite(rng, max_nodes=50, p=None):
    n_users = int(rng.integers(1, max_nodes))
    n_items = int(rng.integers(1, max_nodes - n_users + 1))
    p = rng.uniform(0.05, 0.6) if p is None else p
    mask = rng.random((n_users, n_items)) < p
    users, items = np.nonzero(mask)
    return n_users, n_items, users, items


def split_from_records(records, with_validation=True):
    raw = ingest.RawInteractions([(u, i, t) for u, i, t in records])
    return ingest.encode_and_split(raw, with_validation)


@pytest.fixture(scope="session")
def synth_corpus():
    """50 users / 100 items / 8 per user, preprocessed with seed 7."""
    raw, img, txt = ingest.synth_generate(50, 100, 8, 32, 16, seed=7)
    split, maps = ingest.preprocess(raw, seed=7)
    tokens = [ingest.item_token(r) for r in range(100)]
    x_img = ingest.align_features(ingest.FeatureMatrix(ingest.normalize_rows(img.rows)), tokens, maps).rows
    x_txt = ingest.align_features(ingest.FeatureMatrix(ingest.normalize_rows(txt.rows)), tokens, maps).rows
    return split, maps, x_img, x_txt


@pytest.fixture
def tiny_graph():
    return build_graph([0, 0, 1], [0, 1, 1], 2, 2)


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("mmgrec").setLevel(logging.ERROR)
    yield
