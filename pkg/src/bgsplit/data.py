"""Background-dominated datasets.

A :class:`DatasetManifest` is stored column-wise (one feature matrix, one
label vector) but keeps the original example order everywhere. Main label 0
is the background; foreground category ``k`` in ``foreground_categories``
(0-based position) gets label ``k + 1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestionError, InvalidInputError

MANIFEST_FORMAT = "bgsplit-manifest/1"
SPLITS = ("train", "test")


@dataclass(frozen=True)
class Example:
    id: str
    features: np.ndarray
    original_label: str
    main_label: int
    aux_label: int | None
    split: str


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    ids: tuple[str, ...]
    X: np.ndarray
    original_labels: tuple[str, ...]
    y: np.ndarray
    split: tuple[str, ...]
    N: int
    foreground_categories: tuple[str, ...] = ()
    t: np.ndarray | None = None
    K: int | None = None
    background_fraction: float = field(default=float("nan"))
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or len(X) != len(self.ids):
            raise InvalidInputError("feature matrix must be (n_examples, d)")
        if not np.isfinite(X).all():
            raise InvalidInputError("features contain non-finite values")
        X.setflags(write=False)
        y = np.asarray(self.y, dtype=np.int64)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        for name in ("ids", "original_labels", "split", "foreground_categories", "provenance"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(set(self.ids)) != len(self.ids):
            raise InvalidInputError("example ids must be unique")
        if not (len(y) == len(self.ids) == len(self.original_labels) == len(self.split)):
            raise InvalidInputError("column lengths differ")
        if set(self.split) - set(SPLITS):
            raise InvalidInputError(f"split values must be in {SPLITS}")
        if self.t is not None:
            t = np.asarray(self.t, dtype=np.int64)
            t.setflags(write=False)
            object.__setattr__(self, "t", t)
        if math.isnan(self.background_fraction):
            object.__setattr__(self, "background_fraction", _bg_fraction(y, self.split))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def example(self, i: int) -> Example:
        return Example(self.ids[i], self.X[i], self.original_labels[i], int(self.y[i]),
                       None if self.t is None else int(self.t[i]), self.split[i])

    def __iter__(self):
        return (self.example(i) for i in range(len(self)))

    def take(self, idx) -> DatasetManifest:
        """Sub-manifest at the given positions (kept in the given order)."""
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            ids=[self.ids[i] for i in idx],
            X=self.X[idx],
            original_labels=[self.original_labels[i] for i in idx],
            y=self.y[idx],
            split=[self.split[i] for i in idx],
            t=None if self.t is None else self.t[idx],
            background_fraction=float("nan"),
        )

    def select(self, split: str) -> DatasetManifest:
        return self.take([i for i, s in enumerate(self.split) if s == split])

    def with_note(self, note: str) -> DatasetManifest:
        return replace(self, provenance=(*self.provenance, note))


def _bg_fraction(y: np.ndarray, split) -> float:
    train = np.array([s == "train" for s in split], dtype=bool)
    if not train.any():
        return 0.0
    return float(np.count_nonzero(y[train] == 0) / np.count_nonzero(train))


# -- builders ----------------------------------------------------------------

def build_bg_manifest(source: DatasetManifest, foreground_categories) -> DatasetManifest:
    """Relabel: the k-th foreground category becomes class k, all others 0."""
    fg = [str(c) for c in foreground_categories]
    seen = set()
    for c in fg:
        if c in seen:
            raise ConfigurationError(f"duplicate foreground category {c!r}")
        seen.add(c)
    present = set(source.original_labels)
    missing = [c for c in fg if c not in present]
    if missing:
        raise ConfigurationError(f"unknown foreground categories: {', '.join(map(repr, missing))}")
    index = {c: k + 1 for k, c in enumerate(fg)}
    y = np.array([index.get(c, 0) for c in source.original_labels], dtype=np.int64)
    return replace(source, y=y, N=len(fg), foreground_categories=fg,
                   background_fraction=float("nan"),
                   provenance=(*source.provenance, f"build_bg_manifest N={len(fg)}"))


@dataclass(frozen=True)
class SubsetFamily:
    covering_categories: tuple[str, ...]
    members: tuple[tuple[tuple[str, ...], DatasetManifest], ...]

    @property
    def subsets(self) -> list[tuple[str, ...]]:
        return [s for s, _ in self.members]


def build_subset_family(source: DatasetManifest, covering_categories, subset_size: int,
                        seed) -> SubsetFamily:
    """Seeded partition of the covering categories into equal disjoint subsets."""
    cover = [str(c) for c in covering_categories]
    if len(set(cover)) != len(cover):
        raise ConfigurationError("covering categories contain duplicates")
    if subset_size < 1 or len(cover) % subset_size:
        raise ConfigurationError(
            f"subset size {subset_size} does not divide {len(cover)} covering categories")
    order = np.random.default_rng(seed).permutation(len(cover))
    members = []
    for start in range(0, len(cover), subset_size):
        subset = tuple(cover[i] for i in order[start:start + subset_size])
        members.append((subset, build_bg_manifest(source, subset)))
    return SubsetFamily(tuple(cover), tuple(members))


def downsample_background(manifest: DatasetManifest, fraction: float, seed) -> DatasetManifest:
    """Keep every foreground example and ceil(fraction * #bg) background train examples."""
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"background fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return manifest
    bg = [i for i in range(len(manifest)) if manifest.split[i] == "train" and manifest.y[i] == 0]
    n_keep = math.ceil(fraction * len(bg))
    rng = np.random.default_rng(seed)
    kept = set(np.asarray(bg)[rng.choice(len(bg), size=n_keep, replace=False)].tolist())
    drop = set(bg) - kept
    out = manifest.take([i for i in range(len(manifest)) if i not in drop])
    return out.with_note(f"downsample_background fraction={fraction!r} seed={seed}")


def zipf_counts(n_categories: int, s: float, total: int) -> np.ndarray:
    """Integer counts proportional to rank**-s, summing to ``total`` (largest remainder)."""
    weights = np.arange(1, n_categories + 1, dtype=float) ** (-float(s))
    exact = total * weights / weights.sum()
    counts = np.floor(exact).astype(np.int64)
    short = total - counts.sum()
    # stable ordering: larger remainder first, lower rank on ties
    order = sorted(range(n_categories), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def _spaced_centers(rng, n: int, latent_dim: int, d: int, min_distance: float,
                    packing: float = 1.5) -> np.ndarray:
    """Rejection-sample ``n`` points at least ``min_distance`` apart in a cube,
    then rotate them into a random ``latent_dim``-subspace of R^d."""
    side = packing * min_distance * math.ceil(n ** (1.0 / latent_dim))
    points = []
    attempts = 0
    while len(points) < n:
        cand = rng.uniform(0.0, side, size=latent_dim)
        if all(np.sum((cand - p) ** 2) >= min_distance ** 2 for p in points):
            points.append(cand)
        attempts += 1
        if attempts % 10000 == 0:
            side *= 1.1
    latent = np.array(points) - side / 2
    basis, _ = np.linalg.qr(rng.standard_normal((d, latent_dim)))
    return latent @ basis.T


def generate_synthetic_longtail(n_categories: int = 55, zipf_s: float = 1.0,
                                examples_total: int = 23530, d: int = 32,
                                spread: float = 1.0, center_distance: float = 20.0,
                                latent_dim: int | None = None, test_fraction: float = 0.15,
                                seed=0) -> DatasetManifest:
    """Gaussian blobs with Zipf-distributed category sizes.

    Category ``cNNN`` has rank ``NNN`` (``c000`` is the most frequent). Blob
    centres live in a random ``latent_dim``-dimensional subspace of R^d with
    pairwise distance at least ``center_distance``; each example adds isotropic
    noise of standard deviation ``spread`` in all ``d`` dimensions.

    Returns a source manifest: every example has main label 0 and ``N = 0``
    until :func:`build_bg_manifest` picks foreground categories.
    """
    latent_dim = d if latent_dim is None else int(latent_dim)
    if n_categories < 2 or d < 2:
        raise ConfigurationError("need at least 2 categories and 2 feature dimensions")
    if not (spread > 0 and center_distance > 0 and 1 <= latent_dim <= d and 0 < test_fraction < 1):
        raise ConfigurationError("invalid spread, center distance, latent dimension or test fraction")
    counts = zipf_counts(n_categories, zipf_s, examples_total)
    if counts.min() < 2:
        raise ConfigurationError(
            f"category {int(np.argmin(counts))} gets {counts.min()} examples; need >= 2 for a "
            "train/test split")
    rng = np.random.default_rng(seed)
    centers = _spaced_centers(rng, n_categories, latent_dim, d, center_distance)
    labels = np.repeat(np.arange(n_categories), counts)
    X = centers[labels] + spread * rng.standard_normal((len(labels), d))
    split = np.empty(len(labels), dtype=object)
    for c in range(n_categories):
        members = np.flatnonzero(labels == c)
        n_test = min(max(1, round(test_fraction * len(members))), len(members) - 1)
        test = rng.choice(members, size=n_test, replace=False)
        split[members] = "train"
        split[test] = "test"
    order = rng.permutation(len(labels))
    width = len(str(len(labels) - 1))
    names = [f"c{c:03d}" for c in range(n_categories)]
    return DatasetManifest(
        ids=[f"ex{i:0{width}d}" for i in range(len(labels))],
        X=X[order],
        original_labels=[names[c] for c in labels[order]],
        y=np.zeros(len(labels), dtype=np.int64),
        split=list(split[order]),
        N=0,
        provenance=(f"synthetic C={n_categories} s={zipf_s!r} n={examples_total} d={d} "
                    f"spread={spread!r} center_distance={center_distance!r} "
                    f"latent_dim={latent_dim} seed={seed}",),
    )


def manifest_stats(manifest: DatasetManifest) -> dict:
    """Per-class split counts, background share and pseudo-category skew."""
    stats = {"N": manifest.N, "n_examples": len(manifest),
             "background_fraction": manifest.background_fraction, "classes": {}}
    train = np.array([s == "train" for s in manifest.split], dtype=bool)
    for k in range(manifest.N + 1):
        mask = manifest.y == k
        stats["classes"][k] = {"train": int(np.count_nonzero(mask & train)),
                               "test": int(np.count_nonzero(mask & ~train))}
    if manifest.t is not None:
        t = manifest.t[train]
        if t.size:
            counts = np.bincount(t)
            stats["K"] = manifest.K
            stats["max_pseudo_share"] = float(counts.max() / t.size)
    return stats


# -- file format -------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def write_manifest(manifest: DatasetManifest, path) -> None:
    """JSON-lines: a header object, then one object per example."""
    header = {"format": MANIFEST_FORMAT, "N": manifest.N, "K": manifest.K,
              "foreground_categories": list(manifest.foreground_categories),
              "background_fraction": manifest.background_fraction,
              "provenance": list(manifest.provenance)}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(header) + "\n")
        for i in range(len(manifest)):
            rec = {"id": manifest.ids[i], "features": manifest.X[i].tolist(),
                   "original_label": manifest.original_labels[i],
                   "main_label": int(manifest.y[i]),
                   "aux_label": None if manifest.t is None else int(manifest.t[i]),
                   "split": manifest.split[i]}
            fh.write(_dumps(rec) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln.strip()]
    if not lines:
        raise IngestionError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise IngestionError(f"{path}: missing or unknown manifest header")
    recs = [json.loads(ln) for ln in lines[1:]]
    aux = [r.get("aux_label") for r in recs]
    if any(a is None for a in aux) and not all(a is None for a in aux):
        missing = next(r["id"] for r in recs if r.get("aux_label") is None)
        raise IngestionError(f"{path}: aux_label missing for example {missing!r}")
    has_aux = bool(recs) and aux[0] is not None
    width = len(recs[0]["features"]) if recs else 0
    manifest = DatasetManifest(
        ids=[r["id"] for r in recs],
        X=np.array([r["features"] for r in recs], dtype=float).reshape(len(recs), width),
        original_labels=[str(r["original_label"]) for r in recs],
        y=np.array([r["main_label"] for r in recs], dtype=np.int64),
        split=[r["split"] for r in recs],
        N=int(header["N"]),
        foreground_categories=header.get("foreground_categories", []),
        t=np.array(aux, dtype=np.int64) if has_aux else None,
        K=header.get("K"),
        provenance=header.get("provenance", []),
    )
    stored = header.get("background_fraction")
    if stored is not None and abs(stored - manifest.background_fraction) > 1e-12:
        raise IngestionError(
            f"{path}: stored background_fraction {stored} disagrees with recount "
            f"{manifest.background_fraction}")
    return manifest
