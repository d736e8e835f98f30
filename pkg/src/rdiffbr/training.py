"""Joint training of the backbone and the residual approximator."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .backbone import (TABLES, BackboneState, aggregation_matrix, br_loss_and_grads,
                       make_triples, pool_backward, positive_keys)
from .data import Dataset, InteractionMatrix
from .diffusion import NoiseSchedule, ResidualApproximator, diffusion_loss_and_grads

log = logging.getLogger(__name__)


def sub_seed(master: int, name: str, *extra: int) -> int:
    """Derive an independent 63-bit seed for a named stream."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, zlib.crc32(name.encode()), *extra])
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> 1)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    lr: float = 0.001
    T: int = 50
    T_prime: int = 20
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    detach: bool = False
    learn_delta: bool = False

    def validate(self) -> None:
        # lam == 0 is allowed here so the degenerate objective can be exercised
        if not 0 <= self.lam < 5:
            raise ValueError(f"lambda must lie in [0, 5), got {self.lam}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 1 <= self.T <= 200:
            raise ValueError(f"T must lie in [1, 200], got {self.T}")
        if not 1 <= self.T_prime <= self.T:
            raise ValueError(f"T_prime must lie in [1, T={self.T}], got {self.T_prime}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Bias-corrected Adam over a list of arrays.

    The parameters are copied into one contiguous buffer; :attr:`params`
    holds views into it that the caller should rebind its models to, so a
    single vectorised update covers every array.
    """

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.flat = np.concatenate([np.ravel(p) for p in params]).astype(np.float64)
        self.params, off = [], 0
        for p in params:
            self.params.append(self.flat[off:off + p.size].reshape(p.shape))
            off += p.size
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)
        self._buf = np.empty_like(self.flat)
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        if self.lr == 0:
            return
        g = np.concatenate([np.ravel(x) for x in grads])
        if g.shape != self.flat.shape:
            raise ValueError("gradient list does not match the parameter list")
        b1, b2, buf = self.beta1, self.beta2, self._buf
        # In-place form of m_hat / (sqrt(v_hat) + eps) to avoid temporaries.
        self.m *= b1
        np.multiply(g, 1 - b1, out=buf)
        self.m += buf
        self.v *= b2
        np.multiply(g, g, out=g)
        g *= 1 - b2
        self.v += g
        np.sqrt(self.v, out=buf)
        buf *= 1.0 / math.sqrt(1 - b2 ** self.t)
        buf += self.eps
        np.divide(self.m, buf, out=buf)
        buf *= self.lr / (1 - b1 ** self.t)
        self.flat -= buf


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss_total: float
    loss_br: float
    loss_diff: float
    n_skipped: int


class JointTrainer:
    """Holds optimiser state across epochs.

    With ``approx=None`` only the backbone is trained (the plain BR model).
    Parameters are updated in place; :attr:`backbone` and :attr:`approx`
    always point at the current values.
    """

    def __init__(self, backbone: BackboneState, approx: ResidualApproximator | None,
                 data: Dataset, z_tr: InteractionMatrix, sched: NoiseSchedule, cfg: TrainConfig):
        cfg.validate()
        if approx is not None and approx.emb_dim != backbone.dim:
            raise ValueError("approximator width does not match backbone dimension")
        if z_tr.n_rows != backbone.q_b.shape[0] or z_tr.n_cols != backbone.v_i.shape[0]:
            raise ValueError("training affiliations do not match backbone shape")
        if len(data.x_train) == 0:
            raise ValueError("empty training set")
        self.backbone = backbone.copy()
        self.approx = approx.copy() if approx is not None else None
        self.data, self.sched, self.cfg = data, sched, cfg
        self.agg = aggregation_matrix(z_tr)
        self.ub = data.x_train.to_array()
        self.ui = data.y.to_array()
        self.x_keys = positive_keys(data.x_train)
        self.y_keys = positive_keys(data.y)
        self.epoch = 0

        params = [getattr(self.backbone, t) for t in TABLES]
        if self.approx is not None:
            params += self.approx.weights + self.approx.biases
            self._delta = np.array([self.approx.delta])
            if cfg.learn_delta and self.approx.residual:
                params.append(self._delta)
        self.opt = Adam(params, lr=cfg.lr)
        views = iter(self.opt.params)
        for t in TABLES:
            setattr(self.backbone, t, next(views))
        if self.approx is not None:
            self.approx.weights = [next(views) for _ in self.approx.weights]
            self.approx.biases = [next(views) for _ in self.approx.biases]
            if cfg.learn_delta and self.approx.residual:
                self._delta = next(views)

    def _rng(self, stream: str) -> np.random.Generator:
        return np.random.default_rng(sub_seed(self.cfg.seed, stream, self.epoch))

    def train_epoch(self) -> EpochStats:
        cfg, bb, approx = self.cfg, self.backbone, self.approx
        n_b, n_i = bb.q_b.shape[0], bb.v_i.shape[0]
        rng_shuffle = self._rng("shuffle")
        rng_neg = self._rng("negatives")
        rng_t = self._rng("diffusion-t")
        rng_eps = self._rng("diffusion-noise")

        order = rng_shuffle.permutation(len(self.ub))
        n_batches = math.ceil(len(order) / cfg.batch_size)
        ui_order = rng_shuffle.permutation(len(self.ui))
        ui_chunks = np.array_split(ui_order, n_batches)

        tot = br_sum = diff_sum = 0.0
        skipped = 0
        for k in range(n_batches):
            batch = self.ub[order[k * cfg.batch_size:(k + 1) * cfg.batch_size]]
            ub, s1 = make_triples(batch, self.x_keys, n_b, rng_neg)
            ui, s2 = make_triples(self.ui[ui_chunks[k]], self.y_keys, n_i, rng_neg)
            skipped += s1 + s2

            e_il_b = self.agg @ bb.v_i
            loss_br, g = br_loss_and_grads(bb, e_il_b, ub, ui)
            g_e = g.pop("e_il_b")
            loss_diff = 0.0
            grads_extra = []
            if approx is not None:
                bundles = batch[:, 1]
                e0 = e_il_b[bundles]
                ts = rng_t.integers(1, self.sched.T + 1, size=len(bundles))
                eps = rng_eps.standard_normal(e0.shape)
                lam = cfg.lam
                loss_diff, gw, gb, g_delta, g_e0 = diffusion_loss_and_grads(
                    approx, e0, ts, self.sched, eps, scale=lam)
                grads_extra = gw + gb
                if cfg.learn_delta and approx.residual:
                    grads_extra.append(g_delta)
                if not cfg.detach and lam != 0:
                    np.add.at(g_e, bundles, g_e0)

            g["v_i"] += pool_backward(self.agg, g_e)
            total = loss_br + cfg.lam * loss_diff
            if not math.isfinite(total):
                raise FloatingPointError(
                    f"non-finite loss at epoch {self.epoch}, batch {k}: br={loss_br} diff={loss_diff}")
            self.opt.step([g[t] for t in TABLES] + grads_extra)
            if approx is not None and cfg.learn_delta and approx.residual:
                self._delta[0] = min(max(self._delta[0], 1e-6), 1.0)
                approx.delta = float(self._delta[0])
            tot += total
            br_sum += loss_br
            diff_sum += loss_diff

        stats = EpochStats(self.epoch, tot / n_batches, br_sum / n_batches, diff_sum / n_batches, skipped)
        log.debug("epoch %d total=%.6f br=%.6f diff=%.6f", stats.epoch, stats.loss_total,
                  stats.loss_br, stats.loss_diff)
        self.epoch += 1
        return stats

    def fit(self, epochs: int | None = None) -> list[EpochStats]:
        return [self.train_epoch() for _ in range(epochs or self.cfg.epochs)]


def joint_train_epoch(backbone, approx, data, z_tr, sched, cfg):
    """Run a single epoch from fresh optimiser state.

    Returns ``(backbone, approx, loss_total, loss_br, loss_diff)``. Use
    :class:`JointTrainer` directly to carry optimiser moments across epochs.
    """
    tr = JointTrainer(backbone, approx, data, z_tr, sched, cfg)
    st = tr.train_epoch()
    return tr.backbone, tr.approx, st.loss_total, st.loss_br, st.loss_diff
