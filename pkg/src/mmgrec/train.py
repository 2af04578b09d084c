"""BCE training with online negative sampling, hand-written backprop and Adam."""
import logging
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeding
from .config import TrainConfig
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .evaluation import evaluate
from .graph import BipartiteGraph, build_graph, propagate_adjoint
from .ingest import SplitDataset, sample_negatives
from .model import ForwardCache, ModelParams, ScoringMode, forward, init_params
from .linalg import sigmoid_stable

log = logging.getLogger(__name__)

Gradients = ModelParams


def bce_loss(scores, labels):
    """Mean binary cross-entropy on logits and its gradient w.r.t. each logit."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores but {y.size} labels")
    n = max(s.size, 1)
    with np.errstate(under="ignore"):
        per = np.maximum(s, 0.0) - s * y + np.log1p(np.exp(-np.abs(s)))
    return float(per.sum() / n), (sigmoid_stable(s) - y) / n


def backward(params: ModelParams, cache: ForwardCache, graph: BipartiteGraph, x_img, x_txt, dL_ds,
             mode=ScoringMode.DOT, n_layers: int = 2, fixed_gate: float | None = None) -> Gradients:
    """Exact gradients of the loss w.r.t. every parameter, given dL/dscore."""
    ds = np.asarray(dL_ds, dtype=np.float64)
    if ds.shape != cache.scores.shape:
        raise ValueError("dL_ds does not match the cached batch")
    grads = params.zeros_like()
    pos = cache.item_pos
    d = params.user_emb.shape[1]

    # score = p . z
    dp = ds[:, None] * cache.z[pos]
    dz = np.zeros_like(cache.z)
    np.add.at(dz, pos, ds[:, None] * cache.p)

    if ScoringMode(mode) is ScoringMode.POLICY:
        hidden = np.maximum(cache.hidden_pre, 0.0)
        grads.w_out[:] = dp.T @ hidden
        grads.b_out[:] = dp.sum(axis=0)
        dh = (dp @ params.w_out) * (cache.hidden_pre > 0)
        grads.w_hidden[:] = dh.T @ cache.e_users
        grads.b_hidden[:] = dh.sum(axis=0)
        de = dh @ params.w_hidden
    else:
        de = dp

    d_final = np.zeros((graph.n_nodes, d))
    np.add.at(d_final, cache.users, de)
    d_layer0 = propagate_adjoint(graph, d_final, n_layers)
    grads.user_emb[:] = d_layer0[: graph.n_users]
    grads.item_emb[:] = d_layer0[graph.n_users:]

    g = cache.g
    dv_img = dz * g
    dv_txt = dz * (1.0 - g)
    if fixed_gate is None:
        da = dz * (cache.v_img - cache.v_txt) * g * (1.0 - g)
        grads.w_gate[:] = da.T @ np.hstack([cache.v_img, cache.v_txt])
        grads.b_gate[:] = da.sum(axis=0)
        dcat = da @ params.w_gate
        dv_img += dcat[:, :d]
        dv_txt += dcat[:, d:]

    d_pre_img = dv_img * (cache.pre_img > 0)
    d_pre_txt = dv_txt * (cache.pre_txt > 0)
    grads.w_img[:] = d_pre_img.T @ x_img[cache.uniq_items]
    grads.b_img[:] = d_pre_img.sum(axis=0)
    grads.w_txt[:] = d_pre_txt.T @ x_txt[cache.uniq_items]
    grads.b_txt[:] = d_pre_txt.sum(axis=0)
    return grads


def batch_loss(params, graph, x_img, x_txt, users, items, labels, mode=ScoringMode.DOT, n_layers=2,
               fixed_gate=None, with_grads=True):
    """Forward + loss (+ backward) on one batch. Returns ``(loss, grads or None)``."""
    scores, cache = forward(params, graph, x_img, x_txt, users, items, mode, n_layers, fixed_gate)
    loss, dL_ds = bce_loss(scores, labels)
    if not with_grads:
        return loss, None
    return loss, backward(params, cache, graph, x_img, x_txt, dL_ds, mode, n_layers, fixed_gate)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams, **kw) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.tensors().items()},
            v={k: np.zeros_like(a) for k, a in params.tensors().items()},
            **kw,
        )


def adam_step(params: ModelParams, grads: Gradients, state: AdamState, lr: float):
    """Bias-corrected Adam update, applied in place. Nothing changes if any gradient is non-finite."""
    g_all = grads.tensors()
    for name, g in g_all.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}; step aborted")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.tensors().items():
        g = g_all[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def train_epoch(params: ModelParams, state: AdamState, split: SplitDataset, graph: BipartiteGraph,
                x_img, x_txt, config: TrainConfig, epoch: int) -> float:
    """One pass over freshly sampled examples; updates params in place, returns mean loss."""
    examples = sample_negatives(split, config.neg_ratio, config.seed, epoch)
    order = seeding.stream(config.seed, seeding.SHUFFLE, epoch).permutation(len(examples))
    examples = examples.take(order)
    total = 0.0
    for start in range(0, len(examples), config.batch_size):
        b = examples.take(slice(start, start + config.batch_size))
        loss, grads = batch_loss(params, graph, x_img, x_txt, b.users, b.items, b.labels,
                                 config.scoring, config.gcn_layers, config.fixed_gate)
        adam_step(params, grads, state, config.lr)
        total += loss * len(b)
    return total / max(len(examples), 1)


@dataclass
class Checkpoint:
    params: ModelParams
    epoch: int
    best_valid_recall: float
    config: str  # JSON echo of the TrainConfig
    version: int = 1


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.records)


def fit(split: SplitDataset, x_img, x_txt, config: TrainConfig, on_epoch=None, params=None):
    """Train with early stopping on validation Recall@10.

    Returns the checkpoint of the best validation epoch and the per-epoch log.
    ``on_epoch(record)`` is called after every epoch.
    """
    has_valid = split.valid_users.size > 0
    if config.early_stopping and not has_valid:
        raise ConfigError("early stopping needs a non-empty validation set")
    graph = build_graph(split.train_users, split.train_items, split.n_users, split.n_items)
    if params is None:
        params = init_params(split.n_users, split.n_items, config.d, x_img.shape[1], x_txt.shape[1],
                             config.hidden, config.seed)
    state = AdamState.for_params(params)
    watch_k = 10 if 10 in config.eval_ks else min(config.eval_ks)

    train_log = TrainLog()
    best = None
    best_recall = -np.inf
    stale = 0
    t0 = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        loss = train_epoch(params, state, split, graph, x_img, x_txt, config, epoch)
        record = {"epoch": epoch, "loss": loss}
        recall = np.nan
        if has_valid:
            report = evaluate(params, split, x_img, x_txt, config, holdout="validation", graph=graph)
            recall = report.recall[watch_k]
            record[f"valid_recall@{watch_k}"] = recall
            record[f"valid_ndcg@{watch_k}"] = report.ndcg[watch_k]
        record["elapsed"] = round(time.perf_counter() - t0, 3)
        train_log.records.append(record)
        if on_epoch is not None:
            on_epoch(record)

        if not has_valid or recall > best_recall:
            best_recall = recall if has_valid else np.nan
            best = Checkpoint(params.copy(), epoch, float(best_recall), config.to_json())
            stale = 0
        else:
            stale += 1
            if config.early_stopping and stale >= config.patience:
                log.info("early stop after epoch %d (best epoch %d)", epoch, best.epoch)
                break
    return best, train_log


# --------------------------------------------------------------------------
# checkpoint files

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1
_DIM_NAMES = ("n_users", "n_items", "d", "d_img", "d_txt", "h")


class UnsupportedVersionError(FormatError):
    pass


def _expected_shapes(dims):
    n_u, n_i, d, d_img, d_txt, h = (dims[k] for k in _DIM_NAMES)
    return {
        "user_emb": (n_u, d), "item_emb": (n_i, d),
        "w_img": (d, d_img), "b_img": (d,),
        "w_txt": (d, d_txt), "b_txt": (d,),
        "w_gate": (d, 2 * d), "b_gate": (d,),
        "w_hidden": (h, d), "b_hidden": (h,),
        "w_out": (d, h), "b_out": (d,),
    }


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    dims = ckpt.params.dims
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<6Q", *(dims[k] for k in _DIM_NAMES))]
    tensors = ckpt.params.tensors()
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    cfg = ckpt.config.encode("utf-8")
    parts.append(struct.pack("<Id", ckpt.epoch, ckpt.best_valid_recall))
    parts.append(struct.pack("<I", len(cfg)) + cfg)
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint):
    """Write atomically: a crash never leaves a half-written checkpoint at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("bad magic: not an MMCK checkpoint")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    dims = dict(zip(_DIM_NAMES, r.unpack("<6Q")))
    expected = _expected_shapes(dims)
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8") from None
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}Q")
        if name not in expected:
            raise FormatError(f"unknown tensor {name!r}")
        if tuple(shape) != expected[name]:
            raise FormatError(f"tensor {name} has shape {tuple(shape)}, dims imply {expected[name]}")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float64)
    missing = set(expected) - set(tensors)
    if missing:
        raise FormatError(f"checkpoint lacks tensors {sorted(missing)}")
    epoch, best = r.unpack("<Id")
    (cfg_len,) = r.unpack("<I")
    try:
        cfg = r.take(cfg_len).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("config echo is not valid UTF-8") from None
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after checkpoint metadata")
    return Checkpoint(ModelParams(**tensors), epoch, best, cfg, version)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
