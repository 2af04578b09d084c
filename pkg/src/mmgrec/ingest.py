"""Interaction loading, preprocessing, leave-one-out splitting and sampling.

Pipeline order: dedup -> pseudo-timestamps -> k-core -> label encoding -> split.
"""
import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import seeding
from .errors import DataError, ParseError, ProtocolError, SamplingError, ShapeError

log = logging.getLogger(__name__)

MMF1_MAGIC = b"MMF1"
MMF1_VERSION = 1
_MMF1_HEADER = struct.Struct("<4sIQQ")

TIMESTAMP_HIGH = 2**32


@dataclass
class RawInteractions:
    """(user_token, item_token, timestamp or None) records in file order."""

    records: list[tuple[str, str, int | None]]
    empty_warning: bool = False

    def __len__(self):
        return len(self.records)


@dataclass
class IdMaps:
    user_tokens: list[str]
    item_tokens: list[str]
    user_index: dict[str, int] = field(init=False, repr=False)
    item_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.user_index = {t: i for i, t in enumerate(self.user_tokens)}
        self.item_index = {t: i for i, t in enumerate(self.item_tokens)}

    @property
    def n_users(self):
        return len(self.user_tokens)

    @property
    def n_items(self):
        return len(self.item_tokens)


@dataclass
class SplitDataset:
    """Encoded interactions split per user.

    ``test_item[u]`` / ``valid_item[u]`` hold the held-out item of user ``u``
    or -1 when the user has none.
    """

    n_users: int
    n_items: int
    train_users: np.ndarray
    train_items: np.ndarray
    train_times: np.ndarray
    valid_users: np.ndarray
    valid_items: np.ndarray
    test_users: np.ndarray
    test_items: np.ndarray
    test_times: np.ndarray
    train_pos: list[set[int]]
    test_item: np.ndarray
    valid_item: np.ndarray

    @property
    def n_train(self):
        return int(self.train_users.size)

    def held_out(self, user: int) -> set[int]:
        """Known positives of ``user`` that are not in the training set."""
        return {int(i) for i in (self.test_item[user], self.valid_item[user]) if i >= 0}


class TrainingExample(NamedTuple):
    u: int
    i: int
    y: int


@dataclass
class Examples:
    """A batch of labelled (user, item) pairs stored column-wise."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return int(self.users.size)

    def __iter__(self):
        for u, i, y in zip(self.users, self.items, self.labels):
            yield TrainingExample(int(u), int(i), int(y))

    def take(self, idx) -> "Examples":
        return Examples(self.users[idx], self.items[idx], self.labels[idx])


@dataclass
class FeatureMatrix:
    rows: np.ndarray

    @property
    def n_items(self):
        return self.rows.shape[0]

    @property
    def dim(self):
        return self.rows.shape[1]


# --------------------------------------------------------------------------
# interactions


def load_interactions(path) -> RawInteractions:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            sep = "\t" if "\t" in line else ","
            fields = [f.strip() for f in line.split(sep)]
            if lineno == 1 and fields[0].lower() == "user":
                continue
            if len(fields) not in (2, 3) or not fields[0] or not fields[1]:
                raise ParseError(f"expected 'user, item[, timestamp]', got {line!r}", line=lineno)
            ts = None
            if len(fields) == 3 and fields[2] != "":
                try:
                    ts = int(fields[2])
                except ValueError:
                    raise ParseError(f"timestamp {fields[2]!r} is not an integer", line=lineno) from None
                if not 0 <= ts < 2**64:
                    raise ParseError(f"timestamp {ts} outside unsigned 64-bit range", line=lineno)
            records.append((fields[0], fields[1], ts))
    return RawInteractions(records)


def save_interactions(path, raw: RawInteractions):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for u, i, t in raw.records:
            fh.write(f"{u}\t{i}\n" if t is None else f"{u}\t{i}\t{t}\n")


def canonicalize(raw: RawInteractions, seed: int) -> RawInteractions:
    """Drop repeated (user, item) pairs and fill in missing timestamps.

    Missing timestamps are uniform draws from [0, 2**32), taken in record
    order from the seed's timestamp stream.
    """
    seen = set()
    kept = []
    for u, i, t in raw.records:
        if (u, i) in seen:
            continue
        seen.add((u, i))
        kept.append((u, i, t))
    missing = sum(t is None for _, _, t in kept)
    draws = iter(seeding.stream(seed, seeding.TIMESTAMPS).integers(0, TIMESTAMP_HIGH, size=missing).tolist())
    out = [(u, i, next(draws) if t is None else t) for u, i, t in kept]
    return RawInteractions(out)


def k_core_filter(raw: RawInteractions, k: int = 5) -> RawInteractions:
    """Largest sub-corpus in which every user and every item has >= k distinct partners."""
    if k < 1:
        raise ValueError("k must be >= 1")
    user_items: dict[str, set[str]] = {}
    item_users: dict[str, set[str]] = {}
    for u, i, _ in raw.records:
        user_items.setdefault(u, set()).add(i)
        item_users.setdefault(i, set()).add(u)

    dead_users = set()
    dead_items = set()
    stack = [("u", u) for u, s in user_items.items() if len(s) < k]
    stack += [("i", i) for i, s in item_users.items() if len(s) < k]
    while stack:
        kind, node = stack.pop()
        if kind == "u":
            if node in dead_users:
                continue
            dead_users.add(node)
            for i in user_items[node]:
                if i in dead_items:
                    continue
                item_users[i].discard(node)
                if len(item_users[i]) < k:
                    stack.append(("i", i))
        else:
            if node in dead_items:
                continue
            dead_items.add(node)
            for u in item_users[node]:
                if u in dead_users:
                    continue
                user_items[u].discard(node)
                if len(user_items[u]) < k:
                    stack.append(("u", u))

    out = [r for r in raw.records if r[0] not in dead_users and r[1] not in dead_items]
    if not out:
        log.warning("%d-core filtering removed every interaction", k)
    return RawInteractions(out, empty_warning=not out)


def encode_and_split(raw: RawInteractions, with_validation: bool = True) -> tuple[SplitDataset, IdMaps]:
    """Label-encode tokens (sorted order) and hold out each user's latest interactions.

    The latest interaction (ties: larger item index) is the test instance; with
    ``with_validation`` the second latest becomes validation for users with at
    least three interactions.
    """
    if any(t is None for _, _, t in raw.records):
        raise ProtocolError("every interaction needs a timestamp; run canonicalize first")
    maps = IdMaps(sorted({r[0] for r in raw.records}), sorted({r[1] for r in raw.records}))
    per_user: list[list[tuple[int, int]]] = [[] for _ in range(maps.n_users)]
    for u, i, t in raw.records:
        per_user[maps.user_index[u]].append((t, maps.item_index[i]))

    train_u, train_i, train_t = [], [], []
    valid_u, valid_i = [], []
    test_u, test_i, test_t = [], [], []
    test_item = np.full(maps.n_users, -1, dtype=np.int64)
    valid_item = np.full(maps.n_users, -1, dtype=np.int64)
    train_pos = []
    for u, events in enumerate(per_user):
        if len(events) < 2:
            raise ProtocolError(f"user {maps.user_tokens[u]!r} has {len(events)} interaction(s); need at least 2")
        events.sort()
        t, i = events.pop()
        test_u.append(u)
        test_i.append(i)
        test_t.append(t)
        test_item[u] = i
        if with_validation and len(events) >= 2:
            _, vi = events.pop()
            valid_u.append(u)
            valid_i.append(vi)
            valid_item[u] = vi
        for t, i in events:
            train_u.append(u)
            train_i.append(i)
            train_t.append(t)
        train_pos.append({i for _, i in events})

    def arr(x, dtype=np.int64):
        return np.asarray(x, dtype=dtype)

    split = SplitDataset(
        n_users=maps.n_users,
        n_items=maps.n_items,
        train_users=arr(train_u),
        train_items=arr(train_i),
        train_times=arr(train_t, np.uint64),
        valid_users=arr(valid_u),
        valid_items=arr(valid_i),
        test_users=arr(test_u),
        test_items=arr(test_i),
        test_times=arr(test_t, np.uint64),
        train_pos=train_pos,
        test_item=test_item,
        valid_item=valid_item,
    )
    return split, maps


def preprocess(raw: RawInteractions, seed: int, k: int = 5, with_validation: bool = True):
    """dedup -> timestamps -> k-core -> encode -> split."""
    filtered = k_core_filter(canonicalize(raw, seed), k)
    if filtered.empty_warning:
        raise ProtocolError(f"no interactions survive {k}-core filtering")
    return encode_and_split(filtered, with_validation)


def _excluded_keys(split: SplitDataset) -> np.ndarray:
    """Sorted ``u * n_items + i`` keys of every known positive."""
    users = np.concatenate([split.train_users, split.valid_users, split.test_users])
    items = np.concatenate([split.train_items, split.valid_items, split.test_items])
    return np.unique(users * split.n_items + items)


def sample_negatives(split: SplitDataset, ratio: int, seed: int, epoch: int) -> Examples:
    """One positive plus ``ratio`` uniform negatives per training interaction.

    Negatives avoid the user's training positives and held-out items. Output
    order is: each positive followed by its negatives, in training order.
    """
    excluded = _excluded_keys(split)
    known = np.bincount(excluded // split.n_items, minlength=split.n_users)
    full = np.flatnonzero(known >= split.n_items)
    if full.size:
        raise SamplingError(f"user {int(full[0])} has interacted with every item; no negatives to sample")

    rng = seeding.stream(seed, seeding.NEGATIVES, epoch)
    users = np.repeat(split.train_users, ratio)
    neg = rng.integers(0, split.n_items, size=users.size)
    bad = _is_member(users * split.n_items + neg, excluded)
    while bad.any():
        idx = np.flatnonzero(bad)
        neg[idx] = rng.integers(0, split.n_items, size=idx.size)
        bad[idx] = _is_member(users[idx] * split.n_items + neg[idx], excluded)

    n = split.n_train
    out_u = np.repeat(split.train_users, ratio + 1)
    out_i = np.empty(n * (ratio + 1), dtype=np.int64)
    labels = np.zeros(n * (ratio + 1), dtype=np.int64)
    block = out_i.reshape(n, ratio + 1)
    block[:, 0] = split.train_items
    block[:, 1:] = neg.reshape(n, ratio)
    labels.reshape(n, ratio + 1)[:, 0] = 1
    return Examples(out_u, out_i, labels)


def _is_member(keys: np.ndarray, sorted_pool: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(sorted_pool, keys)
    pos = np.minimum(pos, sorted_pool.size - 1)
    return sorted_pool[pos] == keys if sorted_pool.size else np.zeros(keys.shape, dtype=bool)


# --------------------------------------------------------------------------
# feature files


def save_feature_matrix(path, rows: np.ndarray):
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise ShapeError("feature matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_MMF1_HEADER.pack(MMF1_MAGIC, MMF1_VERSION, rows.shape[0], rows.shape[1]))
        fh.write(rows.tobytes())


def _read_mmf1(data: bytes) -> np.ndarray:
    if len(data) < _MMF1_HEADER.size:
        raise DataError("MMF1 file truncated in header")
    magic, version, n_rows, n_cols = _MMF1_HEADER.unpack_from(data)
    if magic != MMF1_MAGIC:
        raise DataError("not an MMF1 file")
    if version != MMF1_VERSION:
        raise DataError(f"unsupported MMF1 version {version}")
    payload = data[_MMF1_HEADER.size:]
    if len(payload) != n_rows * n_cols * 4:
        raise DataError(f"MMF1 payload has {len(payload)} bytes, expected {n_rows * n_cols * 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(n_rows, n_cols)


def _read_csv_matrix(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    if len({len(r) for r in rows}) > 1:
        raise ShapeError("CSV feature rows have unequal lengths")
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)


def load_feature_matrix(path, expected_rows: int | None = None, normalize: bool = True) -> FeatureMatrix:
    """Read an MMF1 (or plain CSV) feature file into float64 rows."""
    data = Path(path).read_bytes()
    if data[:4] == MMF1_MAGIC:
        rows = _read_mmf1(data).astype(np.float64)
    else:
        try:
            data.decode("utf-8")
        except UnicodeDecodeError:
            raise DataError(f"{path}: not an MMF1 file (magic {data[:4]!r}) and not text") from None
        rows = _read_csv_matrix(path)
    if expected_rows is not None and rows.shape[0] != expected_rows:
        raise ShapeError(f"{path}: {rows.shape[0]} feature rows, expected {expected_rows}")
    bad = ~np.isfinite(rows).all(axis=1)
    if bad.any():
        raise DataError(f"{path}: non-finite value in row {int(np.flatnonzero(bad)[0])}")
    if normalize:
        rows = normalize_rows(rows)
    return FeatureMatrix(rows)


def normalize_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    return np.divide(rows, norms, out=np.zeros_like(rows), where=norms > 0)


def save_item_map(path, tokens):
    Path(path).write_text("".join(f"{t}\n" for t in tokens), encoding="utf-8")


def load_item_map(path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


def align_features(features: FeatureMatrix, row_tokens: list[str], maps: IdMaps) -> FeatureMatrix:
    """Reorder feature rows (keyed by item token) into encoded item order."""
    if len(row_tokens) != features.n_items:
        raise ShapeError(f"item map lists {len(row_tokens)} tokens for {features.n_items} feature rows")
    where = {t: r for r, t in enumerate(row_tokens)}
    missing = [t for t in maps.item_tokens if t not in where]
    if missing:
        raise DataError(f"no feature row for item {missing[0]!r}")
    return FeatureMatrix(features.rows[[where[t] for t in maps.item_tokens]])


# --------------------------------------------------------------------------
# synthetic corpora


def synth_generate(
    n_users: int,
    n_items: int,
    interactions_per_user: int,
    d_img: int,
    d_txt: int,
    seed: int,
    n_clusters: int = 5,
    in_cluster: float = 0.875,
    core_degree: int = 5,
    feature_noise: float = 0.5,
    noise_modality: str | None = None,
):
    """Clustered corpus with learnable structure.

    Users and items are split evenly into latent clusters. Each user takes
    ``round(in_cluster * interactions_per_user)`` items from a "core" of its
    own cluster, laid out cyclically so every core item is hit by at least
    ``core_degree`` users when the cluster is large enough; the remaining
    interactions are uniform over other clusters' items. This keeps most of
    the corpus alive through k-core filtering with k <= ``core_degree``.

    Item features are the cluster centroid plus Gaussian noise, independently
    per modality; ``noise_modality`` ("image" or "text") replaces that
    modality with pure noise. Returns ``(raw, image_features, text_features)``
    where feature row r belongs to item token ``item_token(r)``.
    """
    if interactions_per_user > n_items:
        raise ValueError("interactions_per_user cannot exceed n_items")
    if noise_modality not in (None, "image", "text"):
        raise ValueError("noise_modality must be None, 'image' or 'text'")
    rng = seeding.stream(seed, seeding.SYNTH)
    n_clusters = max(1, min(n_clusters, n_items, n_users))
    item_cluster = rng.permutation(np.arange(n_items) % n_clusters)
    user_cluster = rng.permutation(np.arange(n_users) % n_clusters)

    records = []
    for c in range(n_clusters):
        members = np.flatnonzero(user_cluster == c)
        pool = rng.permutation(np.flatnonzero(item_cluster == c))
        n_in = min(int(round(in_cluster * interactions_per_user)), pool.size)
        core = max(n_in, min(pool.size, members.size * n_in // core_degree))
        outside = np.flatnonzero(item_cluster != c)
        for j, u in enumerate(members):
            chosen = pool[(j * n_in + np.arange(n_in)) % core]
            n_out = interactions_per_user - n_in
            if n_out > outside.size:
                extra = np.setdiff1d(pool, chosen)
                chosen = np.concatenate([chosen, rng.choice(outside, outside.size, replace=False),
                                         rng.choice(extra, n_out - outside.size, replace=False)])
            elif n_out:
                chosen = np.concatenate([chosen, rng.choice(outside, n_out, replace=False)])
            records.extend((user_token(int(u)), item_token(int(i)), None) for i in chosen)

    def features(dim, pure_noise):
        centroids = rng.normal(size=(n_clusters, dim)) / np.sqrt(dim)
        if pure_noise:
            return rng.normal(size=(n_items, dim)) / np.sqrt(dim)
        return centroids[item_cluster] + rng.normal(scale=feature_noise, size=(n_items, dim)) / np.sqrt(dim)

    img = features(d_img, noise_modality == "image")
    txt = features(d_txt, noise_modality == "text")
    records.sort(key=lambda r: r[0])
    return RawInteractions(records), FeatureMatrix(img), FeatureMatrix(txt)


def user_token(u: int) -> str:
    return f"u{u:05d}"


def item_token(i: int) -> str:
    return f"i{i:05d}"
