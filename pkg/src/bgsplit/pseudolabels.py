"""Auxiliary pseudo-labels that split the background into smaller categories.

Labels are 1-based (``1..K``) everywhere outside this module's internals.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import DatasetManifest
from .errors import ConfigurationError, IngestionError, InvalidInputError

VARIANTS = ("none", "random", "cluster", "external")


@dataclass(frozen=True)
class PseudoLabelSource:
    variant: str = "none"
    K: int | None = None
    path: str | None = None
    seed: int = 0
    max_iters: int = 100
    minibatch_size: int = 1024
    refine_iters: int = 50
    swap_trials: int = 10

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown pseudo-label source {self.variant!r}")
        if self.variant in ("random", "cluster") and (self.K is None or self.K < 1):
            raise ConfigurationError(f"{self.variant} pseudo-labels need K >= 1")
        if self.variant == "external" and not self.path:
            raise ConfigurationError("external pseudo-labels need a file path")

    def describe(self) -> str:
        if self.variant == "none":
            return "none"
        if self.variant == "external":
            return f"external({self.path})"
        return f"{self.variant}(K={self.K}, seed={self.seed})"


def random_pseudolabels(n: int, K: int, seed) -> np.ndarray:
    if K < 1:
        raise ConfigurationError("K must be >= 1")
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    return np.random.default_rng(seed).integers(1, K + 1, size=n)


@dataclass
class ClusteringResult:
    assignments: np.ndarray  # 1-based
    centroids: np.ndarray
    inertia: float
    iterations_run: int
    inertia_history: list[float] = field(default_factory=list)


def sq_distances(X: np.ndarray, C: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Squared Euclidean distances, shape (n, K), from explicit differences
    (exact zeros for coincident points)."""
    out = np.empty((len(X), len(C)))
    for start in range(0, len(X), chunk):
        diff = X[start:start + chunk, None, :] - C[None, :, :]
        out[start:start + chunk] = np.einsum("ikd,ikd->ik", diff, diff)
    return out


def assign(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid (0-based) and its squared distance. argmin keeps the
    lowest index on ties."""
    d = sq_distances(X, C)
    a = d.argmin(axis=1)
    return a, d[np.arange(len(X)), a]


def _reseed_empty(X, C, a, dist) -> bool:
    """Move each empty centroid onto the point farthest from its centroid."""
    empty = np.setdiff1d(np.arange(len(C)), a)
    if not empty.size:
        return False
    dist = dist.copy()
    for k in empty:
        far = int(dist.argmax())
        C[k] = X[far]
        a[far] = k
        dist[far] = 0.0
    return True


def _lloyd(X, C, a, inertia, max_iters, history=None):
    """Full-batch Lloyd iterations; stops when assignments are stable or a
    step would raise the inertia."""
    dist = None
    iters = 0
    for _ in range(max_iters):
        proposal = C.copy()
        for k in range(len(C)):
            members = a == k
            if members.any():
                proposal[k] = X[members].mean(axis=0)
        pa, pdist = assign(X, proposal)
        if _reseed_empty(X, proposal, pa, pdist):
            pa, pdist = assign(X, proposal)
        p_inertia = float(pdist.sum())
        if p_inertia > inertia:
            break
        iters += 1
        stable = np.array_equal(pa, a)
        C, a, dist, inertia = proposal, pa, pdist, p_inertia
        if history is not None:
            history.append(inertia)
        if stable:
            break
    return C, a, inertia, iters


def _removal_costs(X, C, a) -> np.ndarray:
    """Inertia increase from deleting each centroid (its points fall back to
    their second-nearest centroid)."""
    d = sq_distances(X, C)
    rows = np.arange(len(X))
    nearest = d[rows, a]
    d[rows, a] = np.inf
    extra = d.min(axis=1) - nearest
    return np.bincount(a, weights=extra, minlength=len(C))


def kmeans_cluster(embeddings, K: int, max_iters: int = 100, minibatch_size: int = 1024,
                   seed=0, refine_iters: int = 50, swap_trials: int = 10) -> ClusteringResult:
    """Mini-batch k-means with a guarded update, full-batch polish and swaps.

    1. ``K`` distinct points drawn with the seed become the initial centroids.
    2. Each iteration moves centroids toward a seeded mini-batch with per-centre
       learning rate ``1 / count``. The move is kept only if full-data inertia
       does not increase, so the recorded inertia sequence is non-increasing.
    3. Up to ``refine_iters`` Lloyd iterations on all points.
    4. Up to ``swap_trials`` swaps: the centroid whose deletion costs least is
       moved onto the point farthest from its centroid and Lloyd is re-run;
       the swap is kept only if inertia strictly drops.
    5. A final full-data assignment; empty clusters are re-seeded to the point
       farthest from its centroid.

    Ties in nearest-centroid assignment go to the lowest centroid index.
    """
    X = np.asarray(embeddings, dtype=float)
    if X.ndim != 2 or not np.isfinite(X).all():
        raise InvalidInputError("embeddings must be a finite (n, d) matrix")
    n = len(X)
    if K < 1 or n < K:
        raise ConfigurationError(f"need 1 <= K <= n (K={K}, n={n})")
    rng = np.random.default_rng(seed)
    C = X[rng.choice(n, size=K, replace=False)].copy()
    counts = np.zeros(K)
    a, dist = assign(X, C)
    inertia = float(dist.sum())
    history = [inertia]
    iters = 0
    for _ in range(max_iters):
        iters += 1
        batch = X[rng.choice(n, size=min(minibatch_size, n), replace=False)]
        ba, _ = assign(batch, C)
        # closed form of the sequential 1/count updates
        sums = np.zeros_like(C)
        np.add.at(sums, ba, batch)
        hits = np.bincount(ba, minlength=K).astype(float)
        new_counts = counts + hits
        touched = hits > 0
        proposal = C.copy()
        proposal[touched] = ((counts[touched, None] * C[touched] + sums[touched])
                             / new_counts[touched, None])
        pa, pdist = assign(X, proposal)
        p_inertia = float(pdist.sum())
        if p_inertia <= inertia:
            C, counts, a, inertia = proposal, new_counts, pa, p_inertia
        history.append(inertia)

    C, a, inertia, done = _lloyd(X, C, a, inertia, refine_iters, history)
    iters += done

    for _ in range(swap_trials if K > 1 else 0):
        _, dist = assign(X, C)
        k = int(_removal_costs(X, C, a).argmin())
        far = int(dist.argmax())
        if dist[far] == 0.0:
            break
        trial = C.copy()
        trial[k] = X[far]
        ta, tdist = assign(X, trial)
        tC, ta, t_inertia, done = _lloyd(X, trial, ta, float(tdist.sum()), refine_iters)
        if not t_inertia < inertia:
            break
        C, a, inertia = tC, ta, t_inertia
        iters += done
        history.append(inertia)

    a, dist = assign(X, C)
    if _reseed_empty(X, C, a, dist):
        a, dist = assign(X, C)
        history.append(float(dist.sum()))
    inertia = float(dist.sum())
    return ClusteringResult(a + 1, C, inertia, iters, history)


def load_external_pseudolabels(path, manifest: DatasetManifest, K: int | None = None) -> np.ndarray:
    """Read ``example_id<TAB>label`` lines and align them to manifest order."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"pseudo-label file {path} does not exist")
    wanted = set(manifest.ids)
    found: dict[str, int] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise IngestionError(f"{path}:{lineno}: expected 'id<TAB>label'")
        ex_id, raw = parts[0], parts[1].strip()
        if ex_id in found:
            raise IngestionError(f"duplicate id {ex_id!r} in {path}")
        if ex_id not in wanted:
            raise IngestionError(f"unknown id {ex_id!r} in {path}")
        try:
            label = int(raw)
        except ValueError:
            raise IngestionError(f"non-integer label {raw!r} for id {ex_id!r}") from None
        if label < 1 or (K is not None and label > K):
            raise IngestionError(f"label {label} out of range for id {ex_id!r}")
        found[ex_id] = label
    for ex_id in manifest.ids:
        if ex_id not in found:
            raise IngestionError(f"missing pseudo-label for id {ex_id!r}")
    return np.array([found[i] for i in manifest.ids], dtype=np.int64)


def write_external_pseudolabels(path, ids, labels) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex_id, label in zip(ids, labels):
            fh.write(f"{ex_id}\t{int(label)}\n")


def attach_pseudolabels(manifest: DatasetManifest, source: PseudoLabelSource) -> DatasetManifest:
    """Return a copy of ``manifest`` with aux labels over every example."""
    if source.variant == "none":
        return manifest
    if source.variant == "random":
        t, K = random_pseudolabels(len(manifest), source.K, source.seed), source.K
    elif source.variant == "cluster":
        res = kmeans_cluster(manifest.X, source.K, max_iters=source.max_iters,
                             minibatch_size=source.minibatch_size, seed=source.seed,
                             refine_iters=source.refine_iters, swap_trials=source.swap_trials)
        t, K = res.assignments, source.K
    else:
        t = load_external_pseudolabels(source.path, manifest, source.K)
        K = source.K if source.K is not None else int(t.max())
    return replace(manifest, t=t, K=int(K),
                   provenance=(*manifest.provenance, f"pseudolabels {source.describe()}"))
