"""Agent graph, one-hot adjacency selection and cosine-similarity attention.

Each agent's critic sees its own encoded feature concatenated with a
multi-head attention summary of its neighbours' features. Features for all
nodes are stacked into F; agent i's adjacency A_i (self row first, then
neighbours in ascending index order) selects rows via A_i @ F.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .simenv import ACT_DIM, OBS_DIM
from .tensornet import ContractError, Mlp, Module

FEATURE_DIM = 64
HEAD_DIM = 16
N_HEADS = 4


@dataclass
class AttentionHead:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray


class AttentionHeads(Module):
    """H heads stored as (d_f, H, d_a) projection tensors.

    That layout lets all heads run as a single (d_f, H*d_a) matmul.
    """

    def __init__(self, n_heads: int = N_HEADS, d_f: int = FEATURE_DIM, d_a: int = HEAD_DIM,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(d_f)
        self.params = [rng.uniform(-bound, bound, size=(d_f, n_heads, d_a)) for _ in range(3)]
        self.names = ["W_q", "W_k", "W_v"]
        self.n_heads, self.d_f, self.d_a = n_heads, d_f, d_a

    @classmethod
    def from_heads(cls, heads: Sequence[AttentionHead]) -> "AttentionHeads":
        obj = cls.__new__(cls)
        Module.__init__(obj)
        obj.params = [np.stack([getattr(h, w) for h in heads], axis=1).astype(np.float64)
                      for w in ("W_q", "W_k", "W_v")]
        obj.names = ["W_q", "W_k", "W_v"]
        obj.d_f, obj.n_heads, obj.d_a = obj.params[0].shape
        return obj

    def head(self, h: int) -> AttentionHead:
        return AttentionHead(*(p[:, h, :] for p in self.params))

    def flat(self) -> list[np.ndarray]:
        return [p.reshape(self.d_f, -1) for p in self.params]

    @property
    def out_dim(self) -> int:
        return self.n_heads * self.d_a


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


@dataclass
class AttnCache:
    es: np.ndarray
    nb: np.ndarray
    q: np.ndarray       # (B, H, a)
    k: np.ndarray       # (B, m, H, a)
    v: np.ndarray
    qn: np.ndarray      # (B, H)
    kn: np.ndarray      # (B, m, H)
    s: np.ndarray       # (B, m, H) cosine scores
    alpha: np.ndarray   # (B, m, H)
    valid: np.ndarray


def attend(es: np.ndarray, nb: np.ndarray, heads: AttentionHeads) -> tuple[np.ndarray, AttnCache | None]:
    """Batched multi-head attention.

    es: (B, d_f) query features; nb: (B, m, d_f) neighbour features.
    Returns (B, H*d_a): head outputs concatenated in head order.
    """
    B, m, d = nb.shape
    H, a = heads.n_heads, heads.d_a
    if m == 0:
        return np.zeros((B, H * a)), None
    Wq, Wk, Wv = heads.flat()
    nb2 = nb.reshape(B * m, d)
    q = (es @ Wq).reshape(B, H, a)
    k = (nb2 @ Wk).reshape(B, m, H, a)
    v = (nb2 @ Wv).reshape(B, m, H, a)
    qn = np.sqrt((q * q).sum(-1))
    kn = np.sqrt((k * k).sum(-1))
    denom = qn[:, None, :] * kn
    valid = denom > 0.0
    dot = (q[:, None] * k).sum(-1)
    s = np.where(valid, dot / np.where(valid, denom, 1.0), 0.0)
    ez = np.exp(s - s.max(axis=1, keepdims=True))
    alpha = ez / ez.sum(axis=1, keepdims=True)
    ctx = (alpha[..., None] * v).sum(axis=1)
    return ctx.reshape(B, H * a), AttnCache(es, nb, q, k, v, qn, kn, s, alpha, valid)


def attend_backward(cache: AttnCache | None, dctx: np.ndarray, heads: AttentionHeads,
                    es_shape, nb_shape, need_params: bool = True):
    """Returns (param grads [dW_q, dW_k, dW_v] or None, d_es, d_nb)."""
    if cache is None:
        pg = [np.zeros_like(p) for p in heads.params] if need_params else None
        return pg, np.zeros(es_shape), np.zeros(nb_shape)
    c = cache
    B, m, d = c.nb.shape
    H, a = heads.n_heads, heads.d_a
    Wq, Wk, Wv = heads.flat()
    dctx = dctx.reshape(B, 1, H, a)
    dalpha = (dctx * c.v).sum(-1)
    dv = c.alpha[..., None] * dctx
    ds = c.alpha * (dalpha - (c.alpha * dalpha).sum(axis=1, keepdims=True))
    ds = np.where(c.valid, ds, 0.0)
    qn = np.where(c.qn > 0, c.qn, 1.0)[:, None, :]      # (B,1,H)
    kn = np.where(c.kn > 0, c.kn, 1.0)                   # (B,m,H)
    w = ds / (qn * kn)
    # ds/dq = k/(|q||k|) - s q/|q|^2 ; ds/dk = q/(|q||k|) - s k/|k|^2
    dq = (w[..., None] * c.k).sum(axis=1) - ((ds * c.s).sum(axis=1) / qn[:, 0] ** 2)[..., None] * c.q
    dk = w[..., None] * c.q[:, None] - (ds * c.s / kn ** 2)[..., None] * c.k
    dq2 = dq.reshape(B, H * a)
    dk2 = dk.reshape(B * m, H * a)
    dv2 = dv.reshape(B * m, H * a)
    d_es = dq2 @ Wq.T
    d_nb = (dk2 @ Wk.T + dv2 @ Wv.T).reshape(B, m, d)
    pg = None
    if need_params:
        nb2 = c.nb.reshape(B * m, d)
        pg = [(c.es.T @ dq2).reshape(d, H, a), (nb2.T @ dk2).reshape(d, H, a),
              (nb2.T @ dv2).reshape(d, H, a)]
    return pg, d_es, d_nb


def attention_weights(e_self, neighbor_feats, head: AttentionHead) -> np.ndarray:
    q = np.asarray(e_self) @ head.W_q
    s = np.array([cosine_similarity(q, np.asarray(e) @ head.W_k) for e in neighbor_feats])
    z = np.exp(s - s.max())
    return z / z.sum()


def attention_head(e_self, neighbor_feats, head: AttentionHead) -> np.ndarray:
    """Single-head context vector for one node."""
    nb = np.asarray(neighbor_feats, dtype=np.float64)
    if nb.size == 0:
        return np.zeros(head.W_v.shape[1])
    ctx, _ = attend(np.asarray(e_self, dtype=np.float64)[None], nb[None],
                    AttentionHeads.from_heads([head]))
    return ctx[0]


def multi_head(e_self, neighbor_feats, heads: Sequence[AttentionHead] | AttentionHeads) -> np.ndarray:
    if not isinstance(heads, AttentionHeads):
        if len(heads) == 0:
            raise ContractError("multi_head needs at least one head")
        heads = AttentionHeads.from_heads(heads)
    nb = np.asarray(neighbor_feats, dtype=np.float64).reshape(-1, heads.d_f)
    ctx, _ = attend(np.asarray(e_self, dtype=np.float64)[None], nb[None], heads)
    return ctx[0]


def build_adjacency(i: int, neighbors: Sequence[int], n_users: int) -> np.ndarray:
    """Row 0 one-hot(i), then one row per neighbour in ascending index order."""
    nbrs = [int(j) for j in neighbors]
    if i in nbrs or len(set(nbrs)) != len(nbrs):
        raise ContractError(f"neighbors of {i} must be distinct and exclude {i}: {nbrs}")
    if not 0 <= i < n_users or any(not 0 <= j < n_users for j in nbrs):
        raise ContractError("agent index out of range")
    rows = [i] + sorted(nbrs)
    A = np.zeros((len(rows), n_users))
    A[np.arange(len(rows)), rows] = 1.0
    return A


def make_encoder(rng: np.random.Generator | None = None, d_f: int = FEATURE_DIM) -> Mlp:
    return Mlp([OBS_DIM + ACT_DIM, d_f, d_f], rng=rng)


def encode(obs, action, layer: Mlp) -> np.ndarray:
    x = np.concatenate([np.asarray(obs, dtype=np.float64), np.asarray(action, dtype=np.float64)], axis=-1)
    return layer(x)


@dataclass
class AgentGraph:
    features: np.ndarray              # F, (N, d_f)
    adjacency: list[np.ndarray]       # A_i, each (K, N)

    @classmethod
    def build(cls, features, neighbor_lists) -> "AgentGraph":
        F = np.asarray(features, dtype=np.float64)
        n = F.shape[0]
        return cls(F, [build_adjacency(i, nb, n) for i, nb in enumerate(neighbor_lists)])


def critic_input(i: int, graph: AgentGraph, heads) -> np.ndarray:
    """h^i = e^i concatenated with attention over the rows A_i @ F selects."""
    if not isinstance(heads, AttentionHeads):
        heads = AttentionHeads.from_heads(heads)
    S = graph.adjacency[i] @ graph.features
    e_self = S[0]
    return np.concatenate([e_self, multi_head(e_self, S[1:], heads)])


# ---------------------------------------------------------------------------
# batched trunk used inside the critics


@dataclass
class TrunkCache:
    enc_cache: object
    A: np.ndarray
    S: np.ndarray
    attn: AttnCache | None
    shape: tuple


class GraphTrunk:
    """Encoder + attention heads for one agent's critic, batched.

    Consumes the global normalized state (B, N, 10), joint raw actions
    (B, N, 2) and this agent's neighbour indices (B, k).
    """

    def __init__(self, agent: int, rng: np.random.Generator,
                 d_f: int = FEATURE_DIM, n_heads: int = N_HEADS, d_a: int = HEAD_DIM):
        self.agent = agent
        self.encoder = make_encoder(rng, d_f)
        self.heads = AttentionHeads(n_heads, d_f, d_a, rng)
        self.out_dim = d_f + self.heads.out_dim

    @property
    def modules(self) -> list[Module]:
        return [self.encoder, self.heads]

    def adjacency(self, neighbors: np.ndarray, n: int) -> np.ndarray:
        B, k = neighbors.shape
        idx = np.concatenate([np.full((B, 1), self.agent), neighbors], axis=1)
        A = np.zeros((B, k + 1, n))
        np.put_along_axis(A, idx[..., None], 1.0, axis=2)
        return A

    def forward(self, obs: np.ndarray, act: np.ndarray, neighbors: np.ndarray):
        B, n, _ = obs.shape
        X = np.concatenate([obs, act], axis=-1).reshape(B * n, -1)
        F, enc_cache = self.encoder.forward(X)
        F = F.reshape(B, n, -1)
        A = self.adjacency(np.asarray(neighbors, dtype=np.int64), n)
        S = np.matmul(A, F)
        ctx, attn = attend(S[:, 0], S[:, 1:], self.heads)
        h = np.concatenate([S[:, 0], ctx], axis=1)
        return h, TrunkCache(enc_cache, A, S, attn, (B, n))

    def backward(self, cache: TrunkCache, dh: np.ndarray, need_params: bool = True):
        """Returns (grads for [encoder params..., head params...], d_obs, d_act).

        With ``need_params=False`` the parameter gradients are skipped (None).
        """
        B, n = cache.shape
        d_f = cache.S.shape[-1]
        hgrads, d_es, d_nb = attend_backward(cache.attn, dh[:, d_f:], self.heads,
                                             cache.S[:, 0].shape, cache.S[:, 1:].shape,
                                             need_params)
        dS = np.concatenate([(dh[:, :d_f] + d_es)[:, None, :], d_nb], axis=1)
        dF = np.matmul(cache.A.transpose(0, 2, 1), dS).reshape(B * n, d_f)
        egrads, dX = self.encoder.backward(cache.enc_cache, dF, need_params)
        dX = dX.reshape(B, n, -1)
        grads = egrads + hgrads if need_params else None
        return grads, dX[..., :OBS_DIM], dX[..., OBS_DIM:]
