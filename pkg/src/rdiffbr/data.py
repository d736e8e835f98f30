"""Interaction data: loading, splitting, affiliation partitions and the
variation protocol used to build test-time bundle-item affiliations.

Edge sets are plain frozensets of ``(row, col)`` pairs. Everything that needs
randomness takes an explicit integer seed and is a pure function of its
arguments.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.sparse as sp

N_SUBSETS = 10
N_TRAIN_SUBSETS = 5
RHO_MIN, RHO_MAX = -4, 5


class DataFormatError(ValueError):
    """Raised for malformed interaction files."""


@dataclass(frozen=True)
class InteractionMatrix:
    """Sparse binary relation stored as a set of ``(row, col)`` edges."""

    n_rows: int
    n_cols: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not isinstance(self.edges, frozenset):
            object.__setattr__(self, "edges", frozenset(self.edges))
        for r, c in self.edges:
            if not (0 <= r < self.n_rows and 0 <= c < self.n_cols):
                raise IndexError(
                    f"edge ({r}, {c}) out of range for {self.n_rows}x{self.n_cols}"
                )

    def __len__(self):
        return len(self.edges)

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def to_array(self) -> np.ndarray:
        """Edges as an ``(E, 2)`` int64 array in lexicographic order."""
        if not self.edges:
            return np.zeros((0, 2), dtype=np.int64)
        return np.asarray(self.sorted_edges(), dtype=np.int64)

    def to_csr(self) -> sp.csr_matrix:
        arr = self.to_array()
        data = np.ones(len(arr), dtype=np.float64)
        return sp.csr_matrix(
            (data, (arr[:, 0], arr[:, 1])), shape=(self.n_rows, self.n_cols)
        )

    def row_sets(self) -> list[set[int]]:
        rows: list[set[int]] = [set() for _ in range(self.n_rows)]
        for r, c in self.edges:
            rows[r].add(c)
        return rows

    def with_edges(self, edges: Iterable[tuple[int, int]]) -> "InteractionMatrix":
        return InteractionMatrix(self.n_rows, self.n_cols, frozenset(edges))


@dataclass(frozen=True)
class Dataset:
    n_users: int
    n_bundles: int
    n_items: int
    x_train: InteractionMatrix
    x_val: InteractionMatrix
    x_test: InteractionMatrix
    y: InteractionMatrix
    z_full: InteractionMatrix

    def __post_init__(self):
        xs = (self.x_train, self.x_val, self.x_test)
        for x in xs:
            if (x.n_rows, x.n_cols) != (self.n_users, self.n_bundles):
                raise ValueError("user-bundle matrices must be n_users x n_bundles")
        if (self.y.n_rows, self.y.n_cols) != (self.n_users, self.n_items):
            raise ValueError("user-item matrix must be n_users x n_items")
        if (self.z_full.n_rows, self.z_full.n_cols) != (self.n_bundles, self.n_items):
            raise ValueError("bundle-item matrix must be n_bundles x n_items")
        a, b, c = (x.edges for x in xs)
        if a & b or a & c or b & c:
            raise ValueError("train/val/test user-bundle splits overlap")


@dataclass(frozen=True)
class AffiliationPartition:
    """Ordered disjoint subsets covering the bundle-item affiliations."""

    subsets: tuple
    n_bundles: int
    n_items: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "subsets", tuple(frozenset(s) for s in self.subsets))
        seen: set = set()
        for s in self.subsets:
            if seen & s:
                raise ValueError("partition subsets overlap")
            seen |= s
        sizes = [len(s) for s in self.subsets]
        if sizes and max(sizes) - min(sizes) > 1:
            raise ValueError(f"partition is not uniform: sizes {sizes}")

    @property
    def k(self) -> int:
        return len(self.subsets)

    def union(self, indices: Iterable[int]) -> frozenset:
        """Union of subsets by 1-based index."""
        out: set = set()
        for i in indices:
            out |= self.subsets[i - 1]
        return frozenset(out)

    def as_matrix(self, edges) -> InteractionMatrix:
        return InteractionMatrix(self.n_bundles, self.n_items, frozenset(edges))


def validate_rho(rho: int) -> int:
    if isinstance(rho, bool) or int(rho) != rho:
        raise ValueError(f"rho must be an integer, got {rho!r}")
    rho = int(rho)
    if not RHO_MIN <= rho <= RHO_MAX:
        raise ValueError(f"rho must lie in [{RHO_MIN}, {RHO_MAX}], got {rho}")
    return rho


# ---------------------------------------------------------------------------
# Loading / saving
# ---------------------------------------------------------------------------


def load_interactions(path, n_rows: int, n_cols: int) -> InteractionMatrix:
    """Read a tab-separated edge list of zero-based ``row<TAB>col`` pairs."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read interaction file {path}: {exc}") from exc

    edges = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataFormatError(f"{path}:{lineno}: expected two tab-separated integers")
        try:
            r, c = int(parts[0], 10), int(parts[1], 10)
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: non-integer field in {line!r}") from None
        if not (0 <= r < n_rows and 0 <= c < n_cols):
            raise IndexError(f"{path}:{lineno}: edge ({r}, {c}) out of range {n_rows}x{n_cols}")
        edges.add((r, c))
    return InteractionMatrix(n_rows, n_cols, frozenset(edges))


def save_interactions(path, m: InteractionMatrix) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r, c in m.sorted_edges():
            fh.write(f"{r}\t{c}\n")


def load_dataset_dir(root, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> Dataset:
    """Load ``user_bundle.txt``, ``user_item.txt``, ``bundle_item.txt`` and
    ``sizes.txt`` from a directory and split the user-bundle relation."""
    sizes_path = os.path.join(root, "sizes.txt")
    try:
        with open(sizes_path, "r", encoding="utf-8") as fh:
            fields = fh.read().split()
    except OSError as exc:
        raise OSError(f"cannot read {sizes_path}: {exc}") from exc
    if len(fields) != 3:
        raise DataFormatError(f"{sizes_path}: expected 'M N O' on one line")
    m, n, o = (int(v) for v in fields)
    x = load_interactions(os.path.join(root, "user_bundle.txt"), m, n)
    y = load_interactions(os.path.join(root, "user_item.txt"), m, o)
    z = load_interactions(os.path.join(root, "bundle_item.txt"), n, o)
    train, val, test = split_user_bundle(x, ratios, seed)
    return Dataset(m, n, o, train, val, test, y, z)


def save_dataset_dir(root, data: Dataset) -> None:
    os.makedirs(root, exist_ok=True)
    x_all = data.x_train.with_edges(data.x_train.edges | data.x_val.edges | data.x_test.edges)
    save_interactions(os.path.join(root, "user_bundle.txt"), x_all)
    save_interactions(os.path.join(root, "user_item.txt"), data.y)
    save_interactions(os.path.join(root, "bundle_item.txt"), data.z_full)
    with open(os.path.join(root, "sizes.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"{data.n_users} {data.n_bundles} {data.n_items}\n")


# ---------------------------------------------------------------------------
# Splits and partitions
# ---------------------------------------------------------------------------


def _split_sizes(n: int, ratios) -> list[int]:
    # floor each share, then hand the remainder to the earliest splits
    sizes = [int(math.floor(r * n + 1e-9)) for r in ratios]
    rem = n - sum(sizes)
    i = 0
    while rem > 0:
        if ratios[i] > 0:
            sizes[i] += 1
            rem -= 1
        i = (i + 1) % len(sizes)
    return sizes


def split_user_bundle(x: InteractionMatrix, ratios, seed: int):
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    if ratios[0] <= 0:
        raise ValueError("training ratio must be positive")
    edges = x.sorted_edges()
    order = np.random.default_rng(seed).permutation(len(edges))
    sizes = _split_sizes(len(edges), ratios)
    parts, start = [], 0
    for s in sizes:
        parts.append(x.with_edges(edges[j] for j in order[start:start + s]))
        start += s
    return tuple(parts)


def partition_affiliations(z: InteractionMatrix, k: int = N_SUBSETS, seed: int = 0) -> AffiliationPartition:
    """Seeded shuffle of the affiliation edges, dealt round-robin into ``k`` subsets."""
    if len(z) == 0:
        raise ValueError("cannot partition an empty affiliation matrix")
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(z):
        raise ValueError(f"k={k} exceeds the number of affiliation edges ({len(z)})")
    edges = z.sorted_edges()
    order = np.random.default_rng(seed).permutation(len(edges))
    subsets: list[set] = [set() for _ in range(k)]
    for j, idx in enumerate(order):
        subsets[j % k].add(edges[idx])
    return AffiliationPartition(tuple(subsets), z.n_rows, z.n_cols, seed)


def z_train_val(p: AffiliationPartition) -> InteractionMatrix:
    if p.k < N_TRAIN_SUBSETS:
        raise ValueError(f"partition needs at least {N_TRAIN_SUBSETS} subsets, has {p.k}")
    return p.as_matrix(p.union(range(1, N_TRAIN_SUBSETS + 1)))


def compose_z_test(p: AffiliationPartition, rho: int) -> InteractionMatrix:
    """Training affiliations with ``rho`` held-out subsets added (rho > 0) or
    the last ``|rho|`` training subsets removed (rho < 0)."""
    rho = validate_rho(rho)
    base = z_train_val(p).edges
    if rho > 0:
        if p.k < N_TRAIN_SUBSETS + rho:
            raise ValueError(f"rho={rho} needs {N_TRAIN_SUBSETS + rho} subsets, have {p.k}")
        return p.as_matrix(base | p.union(range(N_TRAIN_SUBSETS + 1, N_TRAIN_SUBSETS + rho + 1)))
    if rho < 0:
        return p.as_matrix(base - p.union(range(N_TRAIN_SUBSETS + 1 - abs(rho), N_TRAIN_SUBSETS + 1)))
    return p.as_matrix(base)


# ---------------------------------------------------------------------------
# Synthetic planted-theme data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings for the planted-theme dataset.

    Users prefer themes (Dirichlet affinity) and, within a theme, items whose
    latent style matches their own. A bundle's appeal averages over all of its
    items, so partial affiliations give a noisier picture of the bundle.
    """

    n_themes: int = 4
    items_per_theme: int = 50
    bundles_per_theme: int = 40
    bundle_size: int = 10
    n_users: int = 200
    user_bundle_density: float = 0.03
    theme_concentration: float = 0.3
    style_dim: int = 4
    style_weight: float = 2.0
    ui_keep_prob: float = 0.6
    ui_noise_per_user: int = 2
    ratios: tuple = (0.7, 0.1, 0.2)
    k: int = N_SUBSETS

    def validate(self) -> None:
        counts = dict(
            n_themes=self.n_themes, items_per_theme=self.items_per_theme,
            bundles_per_theme=self.bundles_per_theme, bundle_size=self.bundle_size,
            n_users=self.n_users, style_dim=self.style_dim, k=self.k,
        )
        for name, v in counts.items():
            if int(v) != v or v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.bundle_size > self.items_per_theme:
            raise ValueError("bundle_size cannot exceed items_per_theme")
        if self.bundle_size < self.k:
            raise ValueError(
                f"bundle_size ({self.bundle_size}) must be >= k ({self.k}) so every "
                "subset holds one affiliation per bundle"
            )
        if not 0 < self.user_bundle_density <= 1:
            raise ValueError("user_bundle_density must lie in (0, 1]")
        if not 0 <= self.ui_keep_prob <= 1:
            raise ValueError("ui_keep_prob must lie in [0, 1]")

    @property
    def n_bundles(self) -> int:
        return self.n_themes * self.bundles_per_theme

    @property
    def n_items(self) -> int:
        return self.n_themes * self.items_per_theme


def item_theme(cfg: SynthConfig) -> np.ndarray:
    return np.arange(cfg.n_items) // cfg.items_per_theme


def bundle_theme(cfg: SynthConfig) -> np.ndarray:
    return np.arange(cfg.n_bundles) // cfg.bundles_per_theme


def synth_planted_dataset(cfg: SynthConfig, seed: int):
    """Generate a planted-theme dataset and its stratified affiliation partition.

    Every subset of the partition takes exactly ``bundle_size // k`` or so
    affiliations from each bundle, and the first subset holds one pinned item
    per bundle, so no bundle ever loses all its items.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    n_u, n_b, n_i = cfg.n_users, cfg.n_bundles, cfg.n_items
    i_theme = item_theme(cfg)
    b_theme = bundle_theme(cfg)

    # bundle contents: each bundle samples from its own theme's pool
    bundle_items = []
    for b in range(n_b):
        pool = np.flatnonzero(i_theme == b_theme[b])
        bundle_items.append(np.sort(rng.choice(pool, size=cfg.bundle_size, replace=False)))
    z_edges = {(b, int(i)) for b in range(n_b) for i in bundle_items[b]}
    z_full = InteractionMatrix(n_b, n_i, frozenset(z_edges))

    # user preferences
    affinity = rng.dirichlet(np.full(cfg.n_themes, cfg.theme_concentration), size=n_u)
    styles = rng.standard_normal((n_i, cfg.style_dim))
    tastes = rng.standard_normal((n_u, cfg.style_dim))
    item_appeal = tastes @ styles.T / math.sqrt(cfg.style_dim)
    bundle_appeal = np.stack([item_appeal[:, bundle_items[b]].mean(axis=1) for b in range(n_b)], axis=1)
    logits = np.log(affinity[:, b_theme] + 1e-12) + cfg.style_weight * bundle_appeal

    n_per_user = max(1, int(round(cfg.user_bundle_density * n_b)))
    x_edges = set()
    y_edges = set()
    for u in range(n_u):
        gumbel = rng.gumbel(size=n_b)
        chosen = np.argsort(-(logits[u] + gumbel), kind="stable")[:n_per_user]
        for b in chosen:
            x_edges.add((u, int(b)))
            keep = rng.random(cfg.bundle_size) < cfg.ui_keep_prob
            for i in bundle_items[b][keep]:
                y_edges.add((u, int(i)))
        for i in rng.choice(n_i, size=cfg.ui_noise_per_user, replace=False):
            y_edges.add((u, int(i)))

    x = InteractionMatrix(n_u, n_b, frozenset(x_edges))
    split_seed = int(rng.integers(2**31))
    train, val, test = split_user_bundle(x, cfg.ratios, split_seed)
    data = Dataset(n_u, n_b, n_i, train, val, test, InteractionMatrix(n_u, n_i, frozenset(y_edges)), z_full)

    # stratified partition: deal each bundle's shuffled items across subsets in turn
    subsets: list[set] = [set() for _ in range(cfg.k)]
    bundle_order = rng.permutation(n_b)
    per_bundle = [rng.permutation(bundle_items[b]) for b in range(n_b)]
    sequence = [(int(b), int(per_bundle[b][j])) for j in range(cfg.bundle_size) for b in bundle_order]
    sizes = [len(sequence) // cfg.k + (1 if s < len(sequence) % cfg.k else 0) for s in range(cfg.k)]
    start = 0
    for s, size in enumerate(sizes):
        subsets[s].update(sequence[start:start + size])
        start += size
    partition = AffiliationPartition(tuple(subsets), n_b, n_i, seed)
    return data, partition
