"""Residual diffusion over item-level bundle embeddings.

Forward corruption follows a linear variance schedule on ``1 - bar_alpha``;
the reverse step is the Gaussian posterior mean with a predicted clean
embedding substituted for the unknown one. The predictor is a tanh MLP over
``[e_t, time_embed(t)]`` blended with an anchor embedding by ``delta``.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field

import numpy as np

TRAIN_NOISY_INPUT = "TrainNoisyInput"
INFER_SOURCE_EMBEDDING = "InferSourceEmbedding"
ALLOWED_DEPTHS = (1, 2, 4, 8)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    s: float
    alpha_min: float
    alpha_max: float
    bar_alpha: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    sigma2: np.ndarray = field(repr=False)

    def bar(self, t: int) -> float:
        """``bar_alpha_t`` with ``bar_alpha_0 = 1``."""
        return 1.0 if t == 0 else float(self.bar_alpha[t - 1])

    def check_step(self, t: int) -> int:
        if int(t) != t or not 1 <= t <= self.T:
            raise ValueError(f"step t must be in [1, {self.T}], got {t}")
        return int(t)

    def params(self) -> dict:
        return {"T": self.T, "s": self.s, "alpha_min": self.alpha_min, "alpha_max": self.alpha_max}


def build_schedule(T: int, s: float, alpha_min: float, alpha_max: float) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0 < s < 1:
        raise ValueError(f"noise scale s must lie in (0, 1), got {s}")
    if not 0 < alpha_min < alpha_max < 1:
        raise ValueError(f"need 0 < alpha_min < alpha_max < 1, got {alpha_min}, {alpha_max}")
    T = int(T)
    if T == 1:
        one_minus = np.array([s * alpha_min])
    else:
        frac = np.arange(T) / (T - 1)
        one_minus = s * (alpha_min + frac * (alpha_max - alpha_min))
    bar_alpha = 1.0 - one_minus
    bar_prev = np.concatenate([[1.0], bar_alpha[:-1]])
    alpha = bar_alpha / bar_prev
    sigma2 = (1.0 - alpha) * (1.0 - bar_prev) / (1.0 - bar_alpha)
    for arr in (bar_alpha, alpha, sigma2):
        arr.setflags(write=False)
    return NoiseSchedule(T, float(s), float(alpha_min), float(alpha_max), bar_alpha, alpha, sigma2)


def forward_noise(e0, t: int, sched: NoiseSchedule, eps) -> np.ndarray:
    """Sample of ``q(e_t | e_0)`` given the standard-normal draw ``eps``."""
    t = sched.check_step(t)
    e0 = np.asarray(e0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if e0.shape != eps.shape:
        raise ValueError(f"e0 shape {e0.shape} does not match eps shape {eps.shape}")
    ab = sched.bar(t)
    return math.sqrt(ab) * e0 + math.sqrt(1.0 - ab) * eps


def time_embed(t, d: int) -> np.ndarray:
    """Sinusoidal step encoding; sin on even slots, cos on odd slots.

    ``t`` may be a scalar (returns shape ``(d,)``) or a 1-D array of steps
    (returns ``(len(t), d)``).
    """
    if int(d) != d or d < 2 or d % 2:
        raise ValueError(f"time embedding width must be an even integer >= 2, got {d}")
    freqs = 1.0 / 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    ts = np.asarray(t, dtype=np.float64)
    ang = ts[..., None] * freqs
    out = np.empty(ts.shape + (d,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


@functools.lru_cache(maxsize=32)
def _step_table(d: int, t_max: int) -> np.ndarray:
    # rows are time_embed(0..t_max); lookups match the direct computation bitwise
    tab = time_embed(np.arange(t_max + 1), d)
    tab.setflags(write=False)
    return tab


def posterior_coeffs(t: int, sched: NoiseSchedule) -> tuple[float, float]:
    ab_t, ab_prev = sched.bar(t), sched.bar(t - 1)
    a_t = float(sched.alpha[t - 1])
    c_t = math.sqrt(a_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    c_0 = math.sqrt(ab_prev) * (1.0 - a_t) / (1.0 - ab_t)
    return c_t, c_0


def posterior_stats(e_t, e0, t: int, sched: NoiseSchedule):
    """Mean and variance of ``q(e_{t-1} | e_t, e_0)``."""
    t = sched.check_step(t)
    c_t, c_0 = posterior_coeffs(t, sched)
    mu = c_t * np.asarray(e_t, dtype=np.float64) + c_0 * np.asarray(e0, dtype=np.float64)
    return mu, float(sched.sigma2[t - 1])


# ---------------------------------------------------------------------------
# residual approximator
# ---------------------------------------------------------------------------


@dataclass
class ResidualApproximator:
    """tanh MLP ``f`` with ``predict = delta * f([e, temb(t)]) + (1 - delta) * anchor``.

    ``weights[k]`` has shape ``(fan_in, fan_out)``.
    """

    weights: list
    biases: list
    step_dim: int
    delta: float
    hidden_size: int
    anchor_policy: str = TRAIN_NOISY_INPUT
    residual: bool = True

    def __post_init__(self):
        if len(self.weights) not in ALLOWED_DEPTHS or len(self.weights) != len(self.biases):
            raise ValueError(f"depth must be one of {ALLOWED_DEPTHS}, got {len(self.weights)}")
        if not 0 < self.delta <= 1:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if self.step_dim < 2 or self.step_dim % 2:
            raise ValueError("step_dim must be even and >= 2")
        if self.weights[0].shape[0] != self.emb_dim + self.step_dim:
            raise ValueError("first layer width must equal D + d")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ValueError("bias width does not match its layer")
        for w0, w1 in zip(self.weights, self.weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError("consecutive layer widths do not chain")

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def emb_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "ResidualApproximator":
        return ResidualApproximator(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases],
            self.step_dim, self.delta, self.hidden_size, self.anchor_policy, self.residual,
        )

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def _inputs(self, e, t):
        e = np.asarray(e, dtype=np.float64)
        if e.shape[-1] != self.emb_dim:
            raise ValueError(f"embedding width {e.shape[-1]} does not match approximator width {self.emb_dim}")
        ts = np.asarray(t)
        if ts.ndim == 1 and ts.dtype.kind in "iu" and ts.size and ts.min() >= 0:
            temb = _step_table(self.step_dim, int(ts.max()))[ts]
        else:
            temb = time_embed(t, self.step_dim)
        if e.ndim == 2 and temb.ndim == 1:
            temb = np.broadcast_to(temb, (e.shape[0], self.step_dim))
        return np.concatenate([e, temb], axis=-1)

    def mlp(self, e, t) -> np.ndarray:
        h = self._inputs(e, t)
        last = self.depth - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
        return h

    def mlp_with_cache(self, e, t):
        h = self._inputs(e, t)
        acts = [h]
        last = self.depth - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def mlp_backward(self, acts, g_out):
        """Backprop ``g_out`` (gradient on the MLP output) through the layers.

        Returns ``(grad_weights, grad_biases, grad_embedding_input)``.
        """
        gw = [None] * self.depth
        gb = [None] * self.depth
        g = g_out
        for k in range(self.depth - 1, -1, -1):
            if k < self.depth - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            gw[k] = acts[k].T @ g
            gb[k] = g.sum(axis=0)
            w = self.weights[k] if k else self.weights[0][: self.emb_dim]
            g = g @ w.T
        return gw, gb, g

    def predict_e0(self, e_t_hat, t, anchor) -> np.ndarray:
        anchor = np.asarray(anchor, dtype=np.float64)
        f = self.mlp(e_t_hat, t)
        if anchor.shape != f.shape:
            raise ValueError(f"anchor shape {anchor.shape} does not match output {f.shape}")
        if not self.residual or self.delta == 1.0:
            return f
        return self.delta * f + (1.0 - self.delta) * anchor


def init_approximator(D: int, depth: int = 2, hidden_size: int = 64, step_dim: int = 16,
                      delta: float = 0.5, seed: int = 0,
                      anchor_policy: str = TRAIN_NOISY_INPUT,
                      residual: bool = True) -> ResidualApproximator:
    """Xavier-normal weights, zero biases. ``residual=False`` builds the
    ablation without the anchor blend (``delta`` is then pinned to 1)."""
    if depth not in ALLOWED_DEPTHS:
        raise ValueError(f"depth must be one of {ALLOWED_DEPTHS}, got {depth}")
    if D < 1 or hidden_size < 1:
        raise ValueError("widths must be positive")
    rng = np.random.default_rng(seed)
    widths = [D + step_dim] + [hidden_size] * (depth - 1) + [D]
    ws, bs = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        ws.append(rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return ResidualApproximator(ws, bs, step_dim, 1.0 if not residual else float(delta),
                                hidden_size, anchor_policy, residual)


def predict_e0(approx, e_t_hat, t, anchor) -> np.ndarray:
    return approx.predict_e0(e_t_hat, t, anchor)


def reverse_step(approx, e_t_hat, t: int, anchor, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic reverse step: posterior mean with the predicted ``e_0``."""
    t = sched.check_step(t)
    e0_pred = approx.predict_e0(e_t_hat, t, anchor)
    return posterior_stats(e_t_hat, e0_pred, t, sched)[0]


def diffusion_loss(e0_batch, e0_pred_batch) -> float:
    """Mean over rows of the squared reconstruction error."""
    a = np.asarray(e0_batch, dtype=np.float64)
    b = np.asarray(e0_pred_batch, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    return float(np.mean(np.sum((a - b) ** 2, axis=1)))


def diffusion_loss_and_grads(approx: ResidualApproximator, e0: np.ndarray, ts: np.ndarray,
                             sched: NoiseSchedule, eps: np.ndarray, scale: float = 1.0):
    """Training-time reconstruction loss with the noisy input as anchor.

    Returns ``(loss, grad_weights, grad_biases, grad_delta, grad_e0)``. The
    ``e0`` gradient includes the path through ``e_t``. Gradients (not the
    loss) are multiplied by ``scale``.
    """
    n = e0.shape[0]
    sab = np.sqrt(sched.bar_alpha[ts - 1])[:, None]
    snab = np.sqrt(1.0 - sched.bar_alpha[ts - 1])[:, None]
    e_t = sab * e0 + snab * eps
    f, acts = approx.mlp_with_cache(e_t, ts)
    d = approx.delta if approx.residual else 1.0
    pred = d * f + (1.0 - d) * e_t if d != 1.0 else f
    r = pred - e0
    loss = float(np.sum(r * r) / n)
    g_pred = (2.0 * scale / n) * r
    g_delta = float(np.sum(g_pred * (f - e_t))) if approx.residual else 0.0
    gw, gb, g_in = approx.mlp_backward(acts, d * g_pred)
    g_et = g_in + (1.0 - d) * g_pred
    g_e0 = sab * g_et - g_pred
    return loss, gw, gb, g_delta, g_e0


def infer_item_level(approx, e0_star, sched: NoiseSchedule, T_prime: int,
                     noise_seed: int = 0, deterministic_noise: bool = False) -> np.ndarray:
    """Regenerate item-level bundle embeddings from ``e0_star``.

    Corrupt each row ``T_prime`` steps forward, then walk the deterministic
    reverse chain back to step 0 with ``e0_star`` as the residual anchor.
    """
    if int(T_prime) != T_prime or not 1 <= T_prime <= sched.T:
        raise ValueError(f"T_prime must be in [1, {sched.T}], got {T_prime}")
    e0_star = np.asarray(e0_star, dtype=np.float64)
    if deterministic_noise:
        eps = np.zeros_like(e0_star)
    else:
        eps = np.random.default_rng(noise_seed).standard_normal(e0_star.shape)
    e_hat = forward_noise(e0_star, int(T_prime), sched, eps)
    for t in range(int(T_prime), 0, -1):
        e_hat = reverse_step(approx, e_hat, t, e0_star, sched)
    return e_hat


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def save_approximator(path, approx: ResidualApproximator, meta: dict | None = None) -> None:
    """Binary layout: int64 LE ``L hidden_size d D``, float64 LE ``delta``, then
    for each layer its weight ``(fan_in, fan_out)`` and bias, row-major float64.
    The ``.json`` sidecar carries schedule and training settings."""
    with open(path, "wb") as fh:
        fh.write(np.asarray([approx.depth, approx.hidden_size, approx.step_dim, approx.emb_dim],
                            dtype="<i8").tobytes())
        fh.write(np.asarray([approx.delta], dtype="<f8").tobytes())
        for w, b in zip(approx.weights, approx.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    side = {"anchor_policy": approx.anchor_policy, "residual": approx.residual}
    side.update(meta or {})
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_approximator(path) -> ResidualApproximator:
    with open(path, "rb") as fh:
        raw = fh.read()
    L, hidden, d, D = (int(v) for v in np.frombuffer(raw[:32], dtype="<i8"))
    delta = float(np.frombuffer(raw[32:40], dtype="<f8")[0])
    body = np.frombuffer(raw[40:], dtype="<f8")
    widths = [D + d] + [hidden] * (L - 1) + [D]
    ws, bs, off = [], [], 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        ws.append(body[off:off + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        off += fan_in * fan_out
        bs.append(body[off:off + fan_out].copy())
        off += fan_out
    if off != body.size:
        raise ValueError(f"{path}: trailing or missing parameter data")
    side = {}
    try:
        with open(str(path) + ".json", "r", encoding="utf-8") as fh:
            side = json.load(fh)
    except FileNotFoundError:
        pass
    return ResidualApproximator(ws, bs, d, delta, hidden,
                                side.get("anchor_policy", TRAIN_NOISY_INPUT),
                                bool(side.get("residual", True)))
