"""Two-view dot-product bundle recommender trained with BPR.

The bundle-level view scores ``<p_u[u], q_b[b]>``; the item-level view scores
``<p_u_item[u], e_il_b[b]>`` where ``e_il_b`` is the mean of the bundle's item
embeddings. All gradients are written out by hand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .data import InteractionMatrix

TABLES = ("p_u", "q_b", "p_u_item", "v_i")
MAX_NEG_TRIES = 100


@dataclass
class BackboneState:
    p_u: np.ndarray
    q_b: np.ndarray
    p_u_item: np.ndarray
    v_i: np.ndarray
    l2_reg: float = 1e-4
    rng_seed: int = 0

    def __post_init__(self):
        dims = {getattr(self, t).shape[1] for t in TABLES}
        if len(dims) != 1:
            raise ValueError(f"embedding tables disagree on dimension: {dims}")
        if self.p_u.shape[0] != self.p_u_item.shape[0]:
            raise ValueError("user tables disagree on number of users")

    @property
    def dim(self) -> int:
        return self.p_u.shape[1]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.p_u.shape[0], self.q_b.shape[0], self.v_i.shape[0], self.dim

    def tables(self) -> dict[str, np.ndarray]:
        return {t: getattr(self, t) for t in TABLES}

    def copy(self) -> "BackboneState":
        return replace(self, **{t: getattr(self, t).copy() for t in TABLES})


def init_backbone(M: int, N: int, O: int, D: int, scale: float = 0.1, seed: int = 0,
                  l2_reg: float = 1e-4) -> BackboneState:
    if min(M, N, O, D) < 1:
        raise ValueError(f"all sizes must be >= 1, got M={M} N={N} O={O} D={D}")
    if scale < 0:
        raise ValueError("scale must be non-negative")
    rng = np.random.default_rng(seed)
    tabs = [rng.uniform(-scale, scale, size=(n, D)) for n in (M, N, M, O)]
    return BackboneState(*tabs, l2_reg=l2_reg, rng_seed=seed)


def aggregation_matrix(z: InteractionMatrix) -> sp.csr_matrix:
    """Row-normalised bundle x item matrix; empty bundles give zero rows."""
    a = z.to_csr()
    counts = np.asarray(a.sum(axis=1)).ravel()
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    return sp.csr_matrix(sp.diags(inv) @ a)


def aggregate_item_level(z: InteractionMatrix, v_i: np.ndarray) -> np.ndarray:
    """Mean of item embeddings per bundle (zero row for an empty bundle)."""
    if z.n_cols != v_i.shape[0]:
        raise ValueError(f"affiliation matrix has {z.n_cols} items, table has {v_i.shape[0]}")
    return np.asarray(aggregation_matrix(z) @ v_i)


def score(state: BackboneState, e_il_b: np.ndarray, u: int, b: int) -> float:
    M, N = state.p_u.shape[0], state.q_b.shape[0]
    if e_il_b.shape[0] != N:
        raise ValueError("item-level bundle table must have one row per bundle")
    if not (0 <= u < M and 0 <= b < N):
        raise IndexError(f"(u={u}, b={b}) out of range for {M} users / {N} bundles")
    return float(state.p_u[u] @ state.q_b[b] + state.p_u_item[u] @ e_il_b[b])


def score_matrix(state: BackboneState, e_il_b: np.ndarray) -> np.ndarray:
    """All user x bundle scores."""
    return state.p_u @ state.q_b.T + state.p_u_item @ e_il_b.T


# ---------------------------------------------------------------------------
# negatives
# ---------------------------------------------------------------------------


def positive_keys(m: InteractionMatrix) -> np.ndarray:
    arr = m.to_array()
    return np.sort(arr[:, 0] * m.n_cols + arr[:, 1]) if len(arr) else np.zeros(0, dtype=np.int64)


def _is_positive(keys: np.ndarray, users, cols, n_cols) -> np.ndarray:
    q = users * n_cols + cols
    pos = np.searchsorted(keys, q)
    pos = np.minimum(pos, max(len(keys) - 1, 0))
    return (keys[pos] == q) if len(keys) else np.zeros(len(q), dtype=bool)


def sample_negatives(users: np.ndarray, keys: np.ndarray, n_cols: int,
                     rng: np.random.Generator, max_tries: int = MAX_NEG_TRIES):
    """Uniform negatives avoiding the positive set.

    Returns ``(negatives, ok)``; rows where every draw hit a positive within
    ``max_tries`` rounds have ``ok == False``.
    """
    users = np.asarray(users, dtype=np.int64)
    neg = rng.integers(n_cols, size=len(users))
    bad = _is_positive(keys, users, neg, n_cols)
    tries = 1
    while bad.any() and tries < max_tries:
        idx = np.flatnonzero(bad)
        neg[idx] = rng.integers(n_cols, size=len(idx))
        bad[idx] = _is_positive(keys, users[idx], neg[idx], n_cols)
        tries += 1
    return neg, ~bad


def make_triples(batch, keys, n_cols, rng):
    """Attach a sampled negative to each ``(u, pos)`` pair, dropping pairs
    with no available negative. Returns ``(triples, n_skipped)``."""
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 2)
    if len(batch) == 0:
        return np.zeros((0, 3), dtype=np.int64), 0
    neg, ok = sample_negatives(batch[:, 0], keys, n_cols, rng)
    triples = np.column_stack([batch, neg])[ok]
    return triples, int((~ok).sum())


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------


def _softplus_neg(x):
    # -log(sigmoid(x))
    return np.logaddexp(0.0, -x)


def br_loss_and_grads(state: BackboneState, e_il_b: np.ndarray,
                      ub: np.ndarray, ui: np.ndarray):
    """BPR loss over ``(u, b+, b-)`` and ``(u, i+, i-)`` triples.

    Returns ``(loss, grads)`` where ``grads`` holds dense gradients for every
    table plus ``"e_il_b"``, the gradient w.r.t. the pooled item-level bundle
    table. Callers fold that one into ``v_i`` with :func:`pool_backward`.
    """
    D = state.dim
    g = {t: np.zeros_like(getattr(state, t)) for t in TABLES}
    g_e = np.zeros_like(e_il_b)
    loss = 0.0

    if len(ub):
        u, bp, bn = ub[:, 0], ub[:, 1], ub[:, 2]
        pu, pui = state.p_u[u], state.p_u_item[u]
        dq = state.q_b[bp] - state.q_b[bn]
        de = e_il_b[bp] - e_il_b[bn]
        diff = np.einsum("nd,nd->n", pu, dq) + np.einsum("nd,nd->n", pui, de)
        loss += _softplus_neg(diff).mean()
        c = (-expit(-diff) / len(ub))[:, None]
        np.add.at(g["p_u"], u, c * dq)
        np.add.at(g["p_u_item"], u, c * de)
        np.add.at(g["q_b"], bp, c * pu)
        np.add.at(g["q_b"], bn, -c * pu)
        np.add.at(g_e, bp, c * pui)
        np.add.at(g_e, bn, -c * pui)

    if len(ui):
        u, ip, in_ = ui[:, 0], ui[:, 1], ui[:, 2]
        pui = state.p_u_item[u]
        dv = state.v_i[ip] - state.v_i[in_]
        diff = np.einsum("nd,nd->n", pui, dv)
        loss += _softplus_neg(diff).mean()
        c = (-expit(-diff) / len(ui))[:, None]
        np.add.at(g["p_u_item"], u, c * dv)
        np.add.at(g["v_i"], ip, c * pui)
        np.add.at(g["v_i"], in_, -c * pui)

    lam = state.l2_reg
    if lam > 0:
        touched = {
            "p_u": ub[:, 0] if len(ub) else [],
            "q_b": ub[:, 1:3].ravel() if len(ub) else [],
            "p_u_item": np.concatenate([ub[:, 0] if len(ub) else [], ui[:, 0] if len(ui) else []]),
            "v_i": ui[:, 1:3].ravel() if len(ui) else [],
        }
        for t, rows in touched.items():
            rows = np.unique(np.asarray(rows, dtype=np.int64))
            if len(rows):
                tab = getattr(state, t)[rows]
                loss += lam * float(np.sum(tab * tab))
                g[t][rows] += 2.0 * lam * tab

    g["e_il_b"] = g_e
    return float(loss), g


def pool_backward(agg: sp.csr_matrix, g_e: np.ndarray) -> np.ndarray:
    """Push a gradient on pooled bundle rows back onto item rows."""
    return np.asarray(agg.T @ g_e)


def bpr_step(state: BackboneState, z: InteractionMatrix, batch_ub, batch_ui, lr: float,
             neg_seed: int, x_train: InteractionMatrix, y: InteractionMatrix):
    """One plain gradient-descent step on the BPR loss.

    Returns ``(new_state, loss, n_skipped)``; ``n_skipped`` counts positives
    for which no negative could be drawn.
    """
    rng = np.random.default_rng(neg_seed)
    ub, skip_b = make_triples(batch_ub, positive_keys(x_train), state.q_b.shape[0], rng)
    ui, skip_i = make_triples(batch_ui, positive_keys(y), state.v_i.shape[0], rng)
    if len(ub) == 0 and len(ui) == 0:
        raise ValueError("no usable training pairs in this batch")
    agg = aggregation_matrix(z)
    e_il_b = np.asarray(agg @ state.v_i)
    loss, g = br_loss_and_grads(state, e_il_b, ub, ui)
    g["v_i"] += pool_backward(agg, g.pop("e_il_b"))
    new = state.copy()
    if lr != 0:
        for t in TABLES:
            setattr(new, t, getattr(new, t) - lr * g[t])
    return new, loss, skip_b + skip_i


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def save_backbone(path, state: BackboneState, meta: dict | None = None) -> None:
    """Binary layout: int64 LE header ``M N O D`` then the four tables as
    float64 LE row-major (p_u, q_b, p_u_item, v_i). A ``.json`` sidecar holds
    seeds and hyperparameters."""
    M, N, O, D = state.shape
    with open(path, "wb") as fh:
        fh.write(np.asarray([M, N, O, D], dtype="<i8").tobytes())
        for t in TABLES:
            fh.write(np.ascontiguousarray(getattr(state, t), dtype="<f8").tobytes())
    side = {"l2_reg": state.l2_reg, "rng_seed": state.rng_seed}
    side.update(meta or {})
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_backbone(path) -> BackboneState:
    with open(path, "rb") as fh:
        raw = fh.read()
    M, N, O, D = (int(v) for v in np.frombuffer(raw[:32], dtype="<i8"))
    body = np.frombuffer(raw[32:], dtype="<f8")
    expected = (2 * M + N + O) * D
    if body.size != expected:
        raise ValueError(f"{path}: expected {expected} floats, found {body.size}")
    tabs, off = [], 0
    for n in (M, N, M, O):
        tabs.append(body[off:off + n * D].reshape(n, D).copy())
        off += n * D
    side = {}
    try:
        with open(str(path) + ".json", "r", encoding="utf-8") as fh:
            side = json.load(fh)
    except FileNotFoundError:
        pass
    return BackboneState(*tabs, l2_reg=float(side.get("l2_reg", 1e-4)),
                         rng_seed=int(side.get("rng_seed", 0)))
