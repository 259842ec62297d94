"""One-dimensional k-means++ codebook and per-quality profiles.

Training takes per-trace feature sequences from fixed-quality downloads,
clusters every value into a sorted codebook, then averages each quality's
traces position by position into a bit-rate vector that is quantized into
a representative symbol string.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import EmptyInput, InvariantViolation, MissingQuality, SchemaMismatch
from .features import FeatureConfig

SCHEMA_VERSION = 1
DEFAULT_K = 14
DEFAULT_MAX_ITERS = 200
DEFAULT_RESTARTS = 10
DEFAULT_SEED = 20160501

DEFAULT_QUALITY_NAMES = {1: "360P", 2: "480P", 3: "720P"}


def _as_values(values) -> np.ndarray:
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise EmptyInput("no values to cluster")
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")
    return v


def nearest_center(values, centers) -> np.ndarray:
    """Index of the closest center per value; ties go to the lower index."""
    v = np.asarray(values, dtype=float).reshape(-1, 1)
    c = np.asarray(centers, dtype=float).reshape(1, -1)
    return np.argmin(np.abs(v - c), axis=1)


def wcss(values, centers) -> float:
    v = np.asarray(values, dtype=float)
    c = np.asarray(centers, dtype=float)
    return float(np.sum((v - c[nearest_center(v, c)]) ** 2))


def kmeans_pp_init(values, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding (D^2 sampling).  Returns centers in draw order.

    When there are fewer distinct values than ``k`` the distinct values are
    returned instead, sorted.
    """
    v = _as_values(values)
    if k < 1:
        raise ValueError("k must be >= 1")
    distinct = np.unique(v)
    if distinct.size <= k:
        return distinct
    centers = [v[rng.integers(v.size)]]
    d2 = (v - centers[0]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        idx = rng.choice(v.size, p=d2 / total)
        centers.append(v[idx])
        d2 = np.minimum(d2, (v - v[idx]) ** 2)
    return np.array(centers)


@dataclass
class LloydRun:
    centers: np.ndarray
    wcss: float
    history: list = field(default_factory=list)
    iterations: int = 0


def lloyd(values, init_centers, max_iters: int = DEFAULT_MAX_ITERS,
          tol: float | None = None) -> LloydRun:
    """Lloyd iterations from ``init_centers``.

    ``history`` holds the within-cluster sum of squares after every
    assignment step.  An empty cluster is moved onto the point farthest from
    its assigned center.
    """
    v = _as_values(values)
    c = np.sort(np.asarray(init_centers, dtype=float))
    if tol is None:
        tol = 1e-6 * (v.max() - v.min())
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        lab = nearest_center(v, c)
        history.append(float(np.sum((v - c[lab]) ** 2)))
        counts = np.bincount(lab, minlength=c.size)
        sums = np.bincount(lab, weights=v, minlength=c.size)
        new = c.copy()
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz]
        for j in np.flatnonzero(~nz):
            far = int(np.argmax(np.abs(v - new[nearest_center(v, new)])))
            new[j] = v[far]
        new = np.sort(new)
        moved = float(np.max(np.abs(new - c)))
        c = new
        if moved < tol or moved == 0.0:
            break
    c = np.unique(c)
    return LloydRun(c, wcss(v, c), history, it)


@dataclass(frozen=True)
class Codebook:
    centers: tuple

    def __post_init__(self):
        cs = tuple(float(x) for x in self.centers)
        if not cs:
            raise InvariantViolation("codebook has no centers")
        if any(b <= a for a, b in zip(cs, cs[1:])):
            raise InvariantViolation(f"codebook centers not strictly increasing: {cs}")
        object.__setattr__(self, "centers", cs)

    @property
    def k(self) -> int:
        return len(self.centers)

    def quantize(self, value: float) -> int:
        return quantize(value, self)

    def quantize_many(self, values) -> list[int]:
        if len(values) == 0:
            return []
        return nearest_center(values, self.centers).tolist()


def kmeans_fit(values, k: int = DEFAULT_K, rng: np.random.Generator | None = None,
               max_iters: int = DEFAULT_MAX_ITERS, tol: float | None = None,
               restarts: int = DEFAULT_RESTARTS) -> Codebook:
    """Best-of-``restarts`` k-means++ / Lloyd fit; returns the sorted codebook."""
    return kmeans_fit_run(values, k, rng, max_iters, tol, restarts)[0]


def kmeans_fit_run(values, k: int = DEFAULT_K, rng: np.random.Generator | None = None,
                   max_iters: int = DEFAULT_MAX_ITERS, tol: float | None = None,
                   restarts: int = DEFAULT_RESTARTS) -> tuple[Codebook, LloydRun]:
    v = _as_values(values)
    if rng is None:
        rng = np.random.default_rng(DEFAULT_SEED)
    best = None
    for _ in range(max(1, restarts)):
        run = lloyd(v, kmeans_pp_init(v, k, rng), max_iters, tol)
        if best is None or run.wcss < best.wcss:
            best = run
    return Codebook(tuple(best.centers)), best


def quantize(value: float, cb: Codebook) -> int:
    """Symbol of the nearest codebook center; ties go to the smaller center."""
    best, best_d = 0, math.inf
    for i, c in enumerate(cb.centers):
        d = abs(value - c)
        if d < best_d:
            best, best_d = i, d
    return best


@dataclass(frozen=True)
class TrainingEntry:
    title_id: str
    label: int
    values: tuple  # feature values in peak order


@dataclass
class TrainingSet:
    entries: list
    m: int = 3

    def values(self) -> np.ndarray:
        return np.concatenate([np.asarray(e.values, dtype=float) for e in self.entries
                               if e.values]) if self.entries else np.empty(0)

    def by_label(self) -> dict[int, list[TrainingEntry]]:
        out: dict[int, list] = {}
        for e in self.entries:
            out.setdefault(e.label, []).append(e)
        return out

    def titles(self) -> list[str]:
        return sorted({e.title_id for e in self.entries})

    def subset(self, titles: Iterable[str]) -> TrainingSet:
        keep = set(titles)
        return TrainingSet([e for e in self.entries if e.title_id in keep], self.m)


@dataclass(frozen=True)
class QualityProfile:
    label: int
    name: str
    avg_peaks: tuple
    rep_string: tuple
    scalar_center: float

    def check(self, cb: Codebook) -> None:
        if not self.avg_peaks or len(self.avg_peaks) != len(self.rep_string):
            raise InvariantViolation(f"profile {self.label}: rep_string/avg_peaks length mismatch")
        if list(self.rep_string) != cb.quantize_many(self.avg_peaks):
            raise InvariantViolation(f"profile {self.label}: rep_string is not quantize(avg_peaks)")


def build_profiles(ts: TrainingSet, cb: Codebook,
                   names: dict[int, str] | None = None) -> list[QualityProfile]:
    """Average each quality's traces per peak position (truncated to the shortest)."""
    names = names or DEFAULT_QUALITY_NAMES
    groups = ts.by_label()
    profiles = []
    for y in range(1, ts.m + 1):
        traces = [e.values for e in groups.get(y, []) if e.values]
        if not traces:
            raise MissingQuality(f"no training traces for quality {y}")
        n = min(len(t) for t in traces)
        mat = np.array([t[:n] for t in traces], dtype=float)
        avg = mat.mean(axis=0)
        profiles.append(QualityProfile(
            label=y,
            name=names.get(y, f"Q{y}"),
            avg_peaks=tuple(float(x) for x in avg),
            rep_string=tuple(cb.quantize_many(avg)),
            scalar_center=float(avg.mean()),
        ))
    return profiles


@dataclass
class QualityModel:
    codebook: Codebook
    profiles: list
    feature_config: FeatureConfig = FeatureConfig()
    feature_kind: str = "bitrate"
    config: dict = field(default_factory=dict)
    baseline: dict | None = None

    @property
    def m(self) -> int:
        return len(self.profiles)

    def label_name(self, label: int) -> str:
        for p in self.profiles:
            if p.label == label:
                return p.name
        return f"Q{label}"

    def check(self) -> None:
        labels = [p.label for p in self.profiles]
        if not labels or labels != sorted(set(labels)):
            raise InvariantViolation(f"profile labels must be unique and sorted: {labels}")
        for p in self.profiles:
            p.check(self.codebook)


def train_model(ts: TrainingSet, k: int = DEFAULT_K, seed: int = DEFAULT_SEED,
                feature_config: FeatureConfig = FeatureConfig(),
                names: dict[int, str] | None = None,
                restarts: int = DEFAULT_RESTARTS,
                feature_kind: str = "bitrate") -> QualityModel:
    cb = kmeans_fit(ts.values(), k, np.random.default_rng(seed), restarts=restarts)
    return QualityModel(cb, build_profiles(ts, cb, names), feature_config, feature_kind,
                        {"k": k, "seed": seed, "restarts": restarts})


def model_to_dict(model: QualityModel) -> dict:
    d = {
        "schema_version": SCHEMA_VERSION,
        "k": model.codebook.k,
        "centers": list(model.codebook.centers),
        "feature_kind": model.feature_kind,
        "profiles": [
            {"label": p.label, "name": p.name, "avg_peaks": list(p.avg_peaks),
             "rep_string": list(p.rep_string), "scalar_center": p.scalar_center}
            for p in model.profiles
        ],
        "feature_config": model.feature_config.to_dict(),
        "config": model.config,
    }
    if model.baseline is not None:
        d["baseline"] = model.baseline
    return d


def model_from_dict(d: dict) -> QualityModel:
    if not isinstance(d, dict) or d.get("schema_version") != SCHEMA_VERSION:
        got = d.get("schema_version") if isinstance(d, dict) else None
        raise SchemaMismatch(f"unsupported model schema version {got!r}")
    try:
        centers = [float(c) for c in d["centers"]]
        if any(b <= a for a, b in zip(centers, centers[1:])):
            raise InvariantViolation(f"centers not strictly increasing: {centers}")
        if int(d["k"]) != len(centers):
            raise InvariantViolation(f"k={d['k']} but {len(centers)} centers")
        cb = Codebook(tuple(centers))
        profiles = [QualityProfile(int(p["label"]), str(p["name"]),
                                   tuple(float(x) for x in p["avg_peaks"]),
                                   tuple(int(s) for s in p["rep_string"]),
                                   float(p["scalar_center"]))
                    for p in d["profiles"]]
        fc = FeatureConfig.from_dict(d["feature_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaMismatch(f"model file missing or mistyped field: {exc}") from exc
    model = QualityModel(cb, profiles, fc, d.get("feature_kind", "bitrate"),
                         d.get("config", {}), d.get("baseline"))
    model.check()
    return model


def save_model(model: QualityModel, path: str | Path) -> None:
    model.check()
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n")


def load_model(path: str | Path) -> QualityModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"{path}: not a JSON model file ({exc})") from exc
    return model_from_dict(d)
