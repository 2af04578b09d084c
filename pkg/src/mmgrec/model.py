"""Parameters and forward pass of the multimodal graph recommender.

Items are represented by a gated fusion of projected image and text features;
users by their ID embeddings after light graph propagation. A pair is scored
by the dot product of the two (optionally after a small policy MLP on the
user side).
"""
import enum
from dataclasses import dataclass, fields

import numpy as np

from . import seeding
from .errors import ShapeError
from .graph import BipartiteGraph, propagate
from .linalg import affine, relu, sigmoid_stable


class ScoringMode(str, enum.Enum):
    DOT = "dot"
    POLICY = "policy"


@dataclass
class ModelParams:
    user_emb: np.ndarray  # |U| x d
    item_emb: np.ndarray  # |I| x d
    w_img: np.ndarray  # d x d_img
    b_img: np.ndarray
    w_txt: np.ndarray  # d x d_txt
    b_txt: np.ndarray
    w_gate: np.ndarray  # d x 2d, columns [image | text]
    b_gate: np.ndarray
    w_hidden: np.ndarray  # h x d
    b_hidden: np.ndarray
    w_out: np.ndarray  # d x h
    b_out: np.ndarray

    @property
    def dims(self) -> dict[str, int]:
        return {
            "n_users": self.user_emb.shape[0],
            "n_items": self.item_emb.shape[0],
            "d": self.user_emb.shape[1],
            "d_img": self.w_img.shape[1],
            "d_txt": self.w_txt.shape[1],
            "h": self.w_hidden.shape[0],
        }

    def tensors(self) -> dict[str, np.ndarray]:
        """Name -> array views, in the fixed field order."""
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.tensors().items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(**{k: np.zeros_like(v) for k, v in self.tensors().items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(**{k: v.astype(dtype) for k, v in self.tensors().items()})


def _xavier(rng, rows, cols):
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_params(n_users, n_items, d, d_img, d_txt, h, seed) -> ModelParams:
    """Xavier-uniform weights, zero biases, N(0, 0.1^2) ID embeddings."""
    if min(n_users, n_items, d, d_img, d_txt, h) < 1:
        raise ValueError("all dimensions must be >= 1")
    rng = seeding.stream(seed, seeding.INIT)
    return ModelParams(
        user_emb=rng.normal(0.0, 0.1, size=(n_users, d)),
        item_emb=rng.normal(0.0, 0.1, size=(n_items, d)),
        w_img=_xavier(rng, d, d_img),
        b_img=np.zeros(d),
        w_txt=_xavier(rng, d, d_txt),
        b_txt=np.zeros(d),
        w_gate=_xavier(rng, d, 2 * d),
        b_gate=np.zeros(d),
        w_hidden=_xavier(rng, h, d),
        b_hidden=np.zeros(h),
        w_out=_xavier(rng, d, h),
        b_out=np.zeros(d),
    )


def project_modalities(params: ModelParams, x_img, x_txt):
    v_img = relu(affine(params.w_img, x_img, params.b_img))
    v_txt = relu(affine(params.w_txt, x_txt, params.b_txt))
    return v_img, v_txt


def gated_fusion(params: ModelParams, v_img, v_txt, fixed_gate: float | None = None):
    """Return ``(g, z)`` with ``z = g * v_img + (1 - g) * v_txt``.

    ``fixed_gate`` replaces the learned gate by a constant (0.5 gives plain
    averaging), used for ablations.
    """
    v_img = np.asarray(v_img, dtype=np.float64)
    v_txt = np.asarray(v_txt, dtype=np.float64)
    if v_img.shape != v_txt.shape:
        raise ShapeError(f"modality embeddings differ in shape: {v_img.shape} vs {v_txt.shape}")
    if fixed_gate is None:
        g = sigmoid_stable(affine(params.w_gate, np.concatenate([v_img, v_txt], axis=-1), params.b_gate))
    else:
        g = np.full(v_img.shape, float(fixed_gate))
    return g, g * v_img + (1.0 - g) * v_txt


def item_embeddings(params: ModelParams, x_img, x_txt, fixed_gate=None) -> np.ndarray:
    """Fused embeddings ``z`` for the given feature rows."""
    v_img, v_txt = project_modalities(params, x_img, x_txt)
    return gated_fusion(params, v_img, v_txt, fixed_gate)[1]


def compute_user_embeddings(params: ModelParams, graph: BipartiteGraph, n_layers: int = 2):
    """Final-layer user rows plus every propagated layer (for backprop)."""
    if graph.n_users != params.user_emb.shape[0] or graph.n_items != params.item_emb.shape[0]:
        raise ShapeError(
            f"graph has {graph.n_users} users/{graph.n_items} items, "
            f"params have {params.user_emb.shape[0]}/{params.item_emb.shape[0]}"
        )
    layers = propagate(graph, np.vstack([params.user_emb, params.item_emb]), n_layers)
    return layers[-1][: graph.n_users], layers


def policy_transform(params: ModelParams, e_u):
    return affine(params.w_out, relu(affine(params.w_hidden, e_u, params.b_hidden)), params.b_out)


def user_vectors(params: ModelParams, graph: BipartiteGraph, mode=ScoringMode.DOT, n_layers: int = 2):
    """Vectors that are dotted with item embeddings to score every user."""
    e_users, _ = compute_user_embeddings(params, graph, n_layers)
    return policy_transform(params, e_users) if ScoringMode(mode) is ScoringMode.POLICY else e_users


def score_pairs(mode, e_users, z_items, pairs, params: ModelParams | None = None) -> np.ndarray:
    """Score ``(u, i)`` pairs; ``e_users`` are final GCN user embeddings."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    u, i = pairs[:, 0], pairs[:, 1]
    if pairs.size and (u.min() < 0 or u.max() >= len(e_users) or i.min() < 0 or i.max() >= len(z_items)):
        raise ShapeError("pair index out of range")
    p = e_users[u]
    if ScoringMode(mode) is ScoringMode.POLICY:
        if params is None:
            raise ValueError("policy scoring needs params")
        p = policy_transform(params, p)
    return np.einsum("nd,nd->n", p, z_items[i])


@dataclass
class ForwardCache:
    users: np.ndarray
    items: np.ndarray
    uniq_items: np.ndarray
    item_pos: np.ndarray  # position of each batch item within uniq_items
    pre_img: np.ndarray
    pre_txt: np.ndarray
    v_img: np.ndarray
    v_txt: np.ndarray
    g: np.ndarray
    z: np.ndarray  # rows follow uniq_items
    layers: list
    e_users: np.ndarray  # final-layer rows of the batch users
    hidden_pre: np.ndarray | None
    p: np.ndarray  # user-side vectors that meet z in the dot product
    scores: np.ndarray


def forward(
    params: ModelParams,
    graph: BipartiteGraph,
    x_img: np.ndarray,
    x_txt: np.ndarray,
    users,
    items,
    mode=ScoringMode.DOT,
    n_layers: int = 2,
    fixed_gate: float | None = None,
):
    """Score a batch of pairs and keep what the backward pass needs."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.shape != items.shape:
        raise ShapeError("users and items must have equal length")
    uniq, pos = np.unique(items, return_inverse=True)
    pre_img = affine(params.w_img, x_img[uniq], params.b_img)
    pre_txt = affine(params.w_txt, x_txt[uniq], params.b_txt)
    v_img, v_txt = relu(pre_img), relu(pre_txt)
    g, z = gated_fusion(params, v_img, v_txt, fixed_gate)

    e_all, layers = compute_user_embeddings(params, graph, n_layers)
    e_users = e_all[users]
    hidden_pre = None
    if ScoringMode(mode) is ScoringMode.POLICY:
        hidden_pre = affine(params.w_hidden, e_users, params.b_hidden)
        p = affine(params.w_out, relu(hidden_pre), params.b_out)
    else:
        p = e_users
    scores = np.einsum("nd,nd->n", p, z[pos])
    cache = ForwardCache(users, items, uniq, pos, pre_img, pre_txt, v_img, v_txt, g, z,
                         layers, e_users, hidden_pre, p, scores)
    return scores, cache
