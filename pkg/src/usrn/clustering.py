"""Capacity-balanced k-means and the class -> subclass taxonomy built from it.

Subclasses exist to fight label imbalance: each class is split into roughly
equal-sized clusters of its labelled pixels, with the cluster size anchored to
the rarest class's pixel count. Two assignment backends are provided: a greedy
pass over (point, cluster) pairs sorted by distance, and an exact minimum-cost
assignment per Lloyd step via scipy's Hungarian solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigurationError, DataError
from .grids import FeatureGrid, LabelGrid
from .metrics import cbr
from .netcore import ModelParams, trunk_features

BACKENDS = ("greedy", "exact")
VARIANTS = ("balanced", "plain")
DEFAULT_MAX_ITER = 50
DEFAULT_N_INIT = 4


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def subclass_counts(class_pixel_counts) -> list[int]:
    """How many subclasses each class gets.

    The smallest non-empty class sets the unit: a class with n pixels is split
    into round(n / n_min) clusters (ties round up), at least one. Empty
    classes get a single placeholder subclass.
    """
    counts = np.asarray(class_pixel_counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size < 1:
        raise DataError("class_pixel_counts must be a non-empty 1-d sequence")
    if np.any(counts < 0):
        raise DataError("pixel counts cannot be negative")
    present = counts[counts > 0]
    if present.size == 0:
        raise DataError("no class has any labelled pixels")
    n_min = int(present.min())
    return [max(1, _round_half_up(n / n_min)) if n > 0 else 1 for n in counts]


# ---------------------------------------------------------------------------
# k-means machinery


def _pairwise_sq(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _assign_greedy(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Capacity-respecting assignment: walk (point, cluster) pairs from
    closest to farthest; a cluster holds floor(n/k) points plus at most one
    more while the shared overflow budget (n mod k) lasts."""
    n, k = len(points), len(centroids)
    floor_sz, extra = divmod(n, k)
    d2 = _pairwise_sq(points, centroids)
    labels = np.full(n, -1, dtype=np.int64)
    sizes = np.zeros(k, dtype=np.int64)
    extras_used = 0
    assigned = 0
    order = np.argsort(d2, axis=None, kind="stable")
    point_of = order // k
    cluster_of = order % k
    for i, c in zip(point_of.tolist(), cluster_of.tolist()):
        if labels[i] >= 0:
            continue
        if sizes[c] < floor_sz:
            labels[i] = c
            sizes[c] += 1
        elif sizes[c] == floor_sz and extras_used < extra:
            labels[i] = c
            sizes[c] += 1
            extras_used += 1
        else:
            continue
        assigned += 1
        if assigned == n:
            break
    # total capacity k*floor + extra == n, so the sweep cannot leave gaps
    assert assigned == n
    return labels


def _assign_exact(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Optimal capacity-respecting assignment for the current centroids.

    Each cluster is expanded into ceil(n/k) slots. The k*ceil - n surplus
    slots are soaked up by dummy points that may only occupy one designated
    slot per cluster, which caps any cluster's dummy intake at one and so
    forces real occupancy into [floor, ceil].
    """
    n, k = len(points), len(centroids)
    ceil_sz = -(-n // k)
    slots = k * ceil_sz
    d2 = _pairwise_sq(points, centroids)
    cost = np.repeat(d2, ceil_sz, axis=1)
    dummies = slots - n
    if dummies > 0:
        big = float(d2.sum()) + 1.0
        pad = np.full((dummies, slots), big)
        pad[:, np.arange(k) * ceil_sz + ceil_sz - 1] = 0.0
        cost = np.vstack([cost, pad])
    rows, cols = linear_sum_assignment(cost)
    labels = np.empty(n, dtype=np.int64)
    for r, c in zip(rows, cols):
        if r < n:
            labels[r] = c // ceil_sz
    return labels


def _assign_plain(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return np.argmin(_pairwise_sq(points, centroids), axis=1).astype(np.int64)


# polish is O(k^2) scans per applied move, so only bother on instances small
# enough that escaping local minima is worth the extra passes
REFINE_BUDGET = 4000
RESTART_BUDGET = 20_000


def _swap_refine(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray,
                 max_passes: int = 200) -> np.ndarray:
    """Hill-climb a capacity-respecting assignment under fixed centroids.

    Applies the single best point swap (or a point move from a full cluster to
    a slack one) per pass while it strictly lowers the objective. Keeps all
    cluster sizes inside [floor(n/k), ceil(n/k)].
    """
    n, k = len(points), len(centroids)
    if k < 2:
        return labels
    floor_sz, ceil_sz = n // k, -(-n // k)
    d2 = _pairwise_sq(points, centroids)
    labels = labels.copy()
    sizes = np.bincount(labels, minlength=k)
    for _ in range(max_passes):
        best_gain, best_op = -1e-12, None
        members = [np.nonzero(labels == c)[0] for c in range(k)]
        for a in range(k):
            ia = members[a]
            if not len(ia):
                continue
            delta_a = d2[ia] - d2[ia, a][:, None]  # cost change of moving each member out
            for b in range(k):
                if b == a or not len(members[b]):
                    continue
                da = delta_a[:, b]
                i_best = int(np.argmin(da))
                if sizes[a] > floor_sz and sizes[b] < ceil_sz and da[i_best] < best_gain:
                    best_gain, best_op = da[i_best], (ia[i_best], b, None)
                if b > a:
                    ib = members[b]
                    db = d2[ib, a] - d2[ib, b]
                    j_best = int(np.argmin(db))
                    gain = da[i_best] + db[j_best]
                    if gain < best_gain:
                        best_gain, best_op = gain, (ia[i_best], b, ib[j_best])
        if best_op is None:
            break
        i, b, j = best_op
        a = labels[i]
        labels[i] = b
        if j is None:
            sizes[a] -= 1
            sizes[b] += 1
        else:
            labels[j] = a
    return labels


def _objective(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def _lloyd(points, k, rng, assign, max_iter, reseed_empty, refine=False):
    centroids = _kmeans_pp(points, k, rng)
    polish = refine and len(points) * k <= REFINE_BUDGET
    labels = None
    for _ in range(max_iter):
        new_labels = assign(points, centroids)
        if polish:
            new_labels = _swap_refine(points, centroids, new_labels)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            mask = labels == c
            if mask.any():
                centroids[c] = points[mask].mean(axis=0)
            elif reseed_empty:
                far = np.argmax(((points - centroids[labels]) ** 2).sum(axis=1))
                centroids[c] = points[far]
    return labels, centroids, _objective(points, labels, centroids)


def _run_kmeans(points, k, seed, assign, max_iter, n_init, reseed_empty, refine=False):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise DataError("points must be a non-empty (n, d) array")
    if not 1 <= k <= len(points):
        raise DataError(f"k must be in [1, {len(points)}], got {k}")
    best = None
    for t in range(n_init):
        rng = np.random.default_rng([seed, 4, t])
        result = _lloyd(points, k, rng, assign, max_iter, reseed_empty, refine)
        if best is None or result[2] < best[2] - 1e-12:
            best = result
    return best


def balanced_kmeans(points, k, seed=0, backend="greedy",
                    max_iter=DEFAULT_MAX_ITER, n_init=DEFAULT_N_INIT):
    """Cluster with sizes pinned to floor(n/k) or ceil(n/k).

    Returns (labels, centroids, objective) where objective is the summed
    squared distance to assigned centroids. The greedy backend trades a little
    objective quality for speed; the exact backend solves each Lloyd
    assignment step optimally but both remain local searches overall.
    """
    if backend not in BACKENDS:
        raise ConfigurationError(f"backend must be one of {BACKENDS}, got {backend!r}")
    points = np.asarray(points, dtype=np.float64)
    # restarts pay off on small instances where local minima bite; at taxonomy
    # scale sizes are pinned anyway and one seeded run is plenty
    if points.ndim == 2 and points.shape[0] * k > RESTART_BUDGET:
        n_init = 1
    assign = _assign_greedy if backend == "greedy" else _assign_exact
    return _run_kmeans(points, k, seed, assign, max_iter, n_init,
                       reseed_empty=False, refine=backend == "greedy")


def plain_kmeans(points, k, seed=0, max_iter=DEFAULT_MAX_ITER, n_init=DEFAULT_N_INIT):
    """Ordinary Lloyd k-means (no size constraint), empty clusters reseeded."""
    return _run_kmeans(points, k, seed, _assign_plain, max_iter, n_init, reseed_empty=True)


# ---------------------------------------------------------------------------
# taxonomy construction


@dataclass
class ClassPixels:
    """Trunk features of one class's labelled pixels, with provenance."""

    features: np.ndarray    # (n_c, trunk_width)
    provenance: np.ndarray  # (n_c, 3) rows of (image index, row, col)


def extract_features(params: ModelParams, pairs, num_classes: int) -> dict[int, ClassPixels]:
    """Group trunk activations of labelled pixels by class.

    `pairs` is a sequence of (FeatureGrid, LabelGrid); IGNORE pixels are
    dropped. Classes with no pixels map to empty arrays.
    """
    feats = {c: [] for c in range(num_classes)}
    prov = {c: [] for c in range(num_classes)}
    for idx, (grid, labels) in enumerate(pairs):
        if labels.num_classes != num_classes:
            raise DataError("label grid class count does not match taxonomy request")
        acts = trunk_features(params, grid)
        for c in range(num_classes):
            rr, cc = np.nonzero(labels.data == c)
            if rr.size:
                feats[c].append(acts[rr, cc])
                prov[c].append(np.column_stack([np.full(rr.size, idx), rr, cc]))
    width = params.trunk_width
    out = {}
    for c in range(num_classes):
        if feats[c]:
            out[c] = ClassPixels(np.concatenate(feats[c]), np.concatenate(prov[c]))
        else:
            out[c] = ClassPixels(np.empty((0, width)), np.empty((0, 3), dtype=np.int64))
    return out


@dataclass
class Taxonomy:
    """Flat class -> subclass map plus the cluster centroids that define it."""

    num_classes: int
    parents: np.ndarray        # (num_subclasses,) owning class, non-decreasing
    centroids: np.ndarray      # (num_subclasses, trunk_width)
    subclass_sizes: np.ndarray
    class_sizes: np.ndarray
    absent_classes: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.subclass_sizes = np.asarray(self.subclass_sizes, dtype=np.int64)
        self.class_sizes = np.asarray(self.class_sizes, dtype=np.int64)
        if np.any(np.diff(self.parents) < 0):
            raise DataError("subclasses of one class must form a contiguous block")
        if self.parents.min(initial=0) < 0 or self.parents.max(initial=0) >= self.num_classes:
            raise DataError("parent ids out of range")
        if len(self.centroids) != len(self.parents) or len(self.subclass_sizes) != len(self.parents):
            raise DataError("taxonomy arrays disagree on subclass count")

    @property
    def num_subclasses(self) -> int:
        return len(self.parents)

    def children(self, cls: int) -> np.ndarray:
        return np.nonzero(self.parents == cls)[0]

    def cbr_class(self) -> float:
        return cbr(self.class_sizes)

    def cbr_subclass(self) -> float:
        return cbr(self.subclass_sizes)

    def to_json(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "num_subclasses": self.num_subclasses,
            "parents": self.parents.tolist(),
            "centroids": self.centroids.tolist(),
            "subclass_sizes": self.subclass_sizes.tolist(),
            "class_sizes": self.class_sizes.tolist(),
            "absent_classes": list(self.absent_classes),
            "cbr_class": self.cbr_class(),
            "cbr_subclass": self.cbr_subclass(),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "Taxonomy":
        tax = cls(
            num_classes=payload["num_classes"],
            parents=np.asarray(payload["parents"]),
            centroids=np.asarray(payload["centroids"]),
            subclass_sizes=np.asarray(payload["subclass_sizes"]),
            class_sizes=np.asarray(payload["class_sizes"]),
            absent_classes=tuple(payload.get("absent_classes", ())),
        )
        if payload.get("num_subclasses", tax.num_subclasses) != tax.num_subclasses:
            raise DataError("num_subclasses disagrees with parents array")
        return tax


def build_taxonomy(params: ModelParams, pairs, num_classes: int, seed: int = 0,
                   backend: str = "greedy", variant: str = "balanced",
                   max_points: int | None = None):
    """Cluster each class's labelled trunk features into subclasses.

    Returns (taxonomy, subclass_label_grids) where the grids mirror `pairs`
    and carry each labelled pixel's assigned subclass (IGNORE elsewhere).
    Classes with no labelled pixels get one placeholder subclass with a zero
    centroid and are listed in taxonomy.absent_classes. With `max_points` set,
    clustering sees a seeded subsample per class and the remaining pixels take
    their nearest within-class centroid.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"variant must be one of {VARIANTS}, got {variant!r}")
    pairs = list(pairs)
    by_class = extract_features(params, pairs, num_classes)
    class_sizes = np.array([len(by_class[c].features) for c in range(num_classes)])
    ks = subclass_counts(class_sizes)

    parents, centroids, sub_sizes = [], [], []
    absent = []
    assignments = {}  # class -> (provenance, subclass ids)
    offset = 0
    for c in range(num_classes):
        pixels = by_class[c]
        n_c = len(pixels.features)
        if n_c == 0:
            absent.append(c)
            parents.append(c)
            centroids.append(np.zeros(params.trunk_width))
            sub_sizes.append(0)
            offset += 1
            continue
        k_c = min(ks[c], n_c)
        feats = pixels.features
        fit_idx = np.arange(n_c)
        if max_points is not None and n_c > max_points:
            fit_idx = np.random.default_rng([seed, 5, c]).choice(n_c, max_points, replace=False)
            feats = feats[fit_idx]
            k_c = min(k_c, len(feats))
        if k_c == 1:
            labels = np.zeros(n_c, dtype=np.int64)
            cents = pixels.features.mean(axis=0, keepdims=True)
        else:
            if variant == "balanced":
                fit_labels, cents, _ = balanced_kmeans(feats, k_c, seed=seed + c, backend=backend)
            else:
                fit_labels, cents, _ = plain_kmeans(feats, k_c, seed=seed + c)
            if len(fit_idx) == n_c:
                labels = fit_labels
            else:
                labels = np.argmin(_pairwise_sq(pixels.features, cents), axis=1)
                labels[fit_idx] = fit_labels
        assignments[c] = (pixels.provenance, offset + labels)
        for j in range(k_c):
            parents.append(c)
            centroids.append(cents[j])
            sub_sizes.append(int((labels == j).sum()))
        offset += k_c

    taxonomy = Taxonomy(num_classes, np.array(parents), np.array(centroids),
                        np.array(sub_sizes), class_sizes, tuple(absent))
    num_sub = taxonomy.num_subclasses
    grids = []
    for grid, labels in pairs:
        grids.append(np.full((grid.height, grid.width), num_sub, dtype=np.int64))
    for c, (prov, subs) in assignments.items():
        for (img, r, col), s in zip(prov, subs):
            grids[img][r, col] = s
    return taxonomy, [LabelGrid(g, num_sub) for g in grids]
