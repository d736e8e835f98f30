"""Ranking metrics, the variation sweep, ablation and timing reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneState, aggregate_item_level, score_matrix
from .data import AffiliationPartition, Dataset, InteractionMatrix, compose_z_test
from .diffusion import NoiseSchedule, infer_item_level

log = logging.getLogger(__name__)

VARIANTS = ("backbone", "rdiffbr", "rdiffbr_wo_r")
CSV_FIELDS = ("rho", "K", "variant", "seed", "recall", "ndcg")


def _check_relevant(relevant):
    if not relevant:
        raise ValueError("relevant set is empty")


def recall_at_k(ranked, relevant, K: int) -> float:
    _check_relevant(relevant)
    hits = sum(1 for b in ranked[:K] if b in relevant)
    return hits / len(relevant)


def _discount(r: int) -> float:
    # r is the 1-based rank
    return 1.0 / math.log2(r + 1)


def ndcg_at_k(ranked, relevant, K: int) -> float:
    _check_relevant(relevant)
    dcg = math.fsum(_discount(r) for r, b in enumerate(ranked[:K], start=1) if b in relevant)
    idcg = math.fsum(_discount(r) for r in range(1, min(K, len(relevant)) + 1))
    return dcg / idcg


@dataclass(frozen=True)
class InferenceSettings:
    """How item-level bundle embeddings are regenerated at evaluation time."""

    T_prime: int = 20
    noise_seed: int = 0
    deterministic_noise: bool = False


def item_level_table(backbone: BackboneState, approx, z_eval: InteractionMatrix,
                     sched: NoiseSchedule | None, infer: InferenceSettings) -> np.ndarray:
    e = aggregate_item_level(z_eval, backbone.v_i)
    if approx is None:
        return e
    return infer_item_level(approx, e, sched, infer.T_prime, infer.noise_seed, infer.deterministic_noise)


def rank_candidates(scores_u: np.ndarray, exclude) -> list[int]:
    """Bundles by descending score, ties by ascending index, minus ``exclude``."""
    n = len(scores_u)
    order = np.lexsort((np.arange(n), -scores_u))
    if exclude:
        mask = np.zeros(n, dtype=bool)
        mask[list(exclude)] = True
        order = order[~mask[order]]
    return order.tolist()


def evaluate(backbone: BackboneState, approx, data: Dataset, z_eval: InteractionMatrix,
             sched: NoiseSchedule | None, infer: InferenceSettings, Ks, *,
             relevant: InteractionMatrix | None = None) -> list[dict]:
    """Full-ranking Recall@K / NDCG@K averaged over users with test positives.

    Returns one ``{"K", "recall", "ndcg"}`` dict per requested ``K``.
    """
    target = data.x_test if relevant is None else relevant
    e_il_b = item_level_table(backbone, approx, z_eval, sched, infer)
    scores = score_matrix(backbone, e_il_b)
    train_rows = data.x_train.row_sets()
    rel_rows = target.row_sets()
    users = [u for u in range(data.n_users) if rel_rows[u]]
    if not users:
        raise ValueError("no test users with relevant bundles")
    Ks = [int(k) for k in Ks]
    kmax = max(Ks)
    rec = {k: [] for k in Ks}
    nd = {k: [] for k in Ks}
    for u in users:
        ranked = rank_candidates(scores[u], train_rows[u])[:kmax]
        for k in Ks:
            rec[k].append(recall_at_k(ranked, rel_rows[u], k))
            nd[k].append(ndcg_at_k(ranked, rel_rows[u], k))
    n = len(users)
    return [{"K": k, "recall": math.fsum(rec[k]) / n, "ndcg": math.fsum(nd[k]) / n} for k in Ks]


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, rho: int, variant: str, seed: int, metrics: list[dict]) -> None:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        for m in metrics:
            key = (rho, m["K"], variant, seed)
            if any((r["rho"], r["K"], r["variant"], r["seed"]) == key for r in self.rows):
                raise ValueError(f"duplicate report row {key}")
            for name in ("recall", "ndcg"):
                if not 0.0 <= m[name] <= 1.0:
                    raise ValueError(f"{name}={m[name]} outside [0, 1]")
            self.rows.append({"rho": int(rho), "K": int(m["K"]), "variant": variant,
                              "seed": int(seed), "recall": float(m["recall"]),
                              "ndcg": float(m["ndcg"])})

    def extend(self, other: "EvalReport") -> None:
        for r in other.rows:
            self.add(r["rho"], r["variant"], r["seed"], [r])

    def select(self, **where) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in where.items())]

    def mean(self, metric: str, **where) -> float:
        vals = [r[metric] for r in self.select(**where)]
        if not vals:
            raise KeyError(f"no rows match {where}")
        return math.fsum(vals) / len(vals)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_FIELDS)
            for r in self.rows:
                w.writerow([r["rho"], r["K"], r["variant"], r["seed"], repr(r["recall"]), repr(r["ndcg"])])

    def to_dict(self) -> dict:
        return {"rows": self.rows, "timing": self.timing, "metadata": self.metadata}

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        rep = cls()
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for r in csv.DictReader(fh):
                rep.add(int(r["rho"]), r["variant"], int(r["seed"]),
                        [{"K": int(r["K"]), "recall": float(r["recall"]), "ndcg": float(r["ndcg"])}])
        return rep


def rho_sweep(models: dict, data: Dataset, partition: AffiliationPartition, sched: NoiseSchedule,
              infer: InferenceSettings, rhos, Ks, seed: int = 0) -> EvalReport:
    """Evaluate every ``(rho, variant)`` pair.

    ``models`` maps a variant name to ``(backbone, approx_or_None)``; rows are
    emitted in the order of ``rhos`` and then of ``models``.
    """
    rep = EvalReport()
    for rho in rhos:
        z_eval = compose_z_test(partition, rho)
        for variant, (bb, approx) in models.items():
            rep.add(rho, variant, seed, evaluate(bb, approx, data, z_eval, sched, infer, Ks))
    return rep


def ablation_wo_r(models: dict, data, partition, sched, infer, rhos, Ks, seed: int = 0) -> EvalReport:
    """Three-way comparison: backbone, full residual model, and the
    no-residual variant (which must have been trained with ``delta`` = 1)."""
    missing = [v for v in VARIANTS if v not in models]
    if missing:
        raise ValueError(f"ablation needs all variants, missing {missing}")
    wo = models["rdiffbr_wo_r"][1]
    if wo is None or wo.residual or wo.delta != 1.0:
        raise ValueError("rdiffbr_wo_r must be a no-residual approximator with delta = 1")
    return rho_sweep({v: models[v] for v in VARIANTS}, data, partition, sched, infer, rhos, Ks, seed)


def nearest_items(query, v_i: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Top-``k`` items by cosine similarity, ties by ascending item index."""
    q = np.asarray(query, dtype=np.float64)
    qn = float(np.linalg.norm(q))
    if qn == 0.0:
        log.warning("zero-norm query vector; no neighbours")
        return []
    norms = np.linalg.norm(v_i, axis=1)
    dots = v_i @ q
    cos = np.divide(dots, norms * qn, out=np.zeros_like(dots), where=norms > 0)
    order = np.lexsort((np.arange(len(cos)), -cos))[:k]
    return [(int(i), float(cos[i])) for i in order]


def timing_report(runners: dict, epochs_to_average: int = 5, warmup: int = 0) -> dict:
    """Mean wall-clock seconds per epoch for each variant.

    ``runners`` maps a variant name to a zero-argument callable that trains
    one epoch. ``warmup`` extra epochs run first and are not timed.
    """
    if epochs_to_average < 1:
        raise ValueError("epochs_to_average must be >= 1")
    out: dict = {"epochs_averaged": epochs_to_average, "variants": {}}
    for name, run in runners.items():
        for _ in range(warmup):
            run()
        samples = []
        for _ in range(epochs_to_average):
            t0 = time.perf_counter()
            run()
            samples.append(time.perf_counter() - t0)
        out["variants"][name] = {"seconds_per_epoch": math.fsum(samples) / len(samples),
                                 "samples": samples}
    v = out["variants"]
    if "backbone" in v and "rdiffbr" in v:
        out["overhead_ratio"] = v["rdiffbr"]["seconds_per_epoch"] / v["backbone"]["seconds_per_epoch"]
    return out
