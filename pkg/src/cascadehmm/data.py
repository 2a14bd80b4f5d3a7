"""Synthetic multiyear datasets, rotation-aware clustering, splits, file I/O.

Samples are field-level records: for each of Y consecutive years, one
observation series plus one class label. Label paths follow a Markov chain
over year pairs (crop-rotation style), and series are seasonal bumps per
class and band, sampled at random acquisition days with Gaussian noise.

Stratification groups samples whose label sequences coincide up to a
circular shift (same rotation, different phase) via agglomerative
clustering under the rotation Hamming distance, then assigns each sample
independently to train/validation/test inside its stratum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import DAYS_PER_YEAR, YearlySeries

__all__ = [
    "YearRecord",
    "SampleSequence",
    "SynthSpec",
    "DatasetSplit",
    "make_rotation_spec",
    "generate",
    "rotation_hamming",
    "pairwise_rotation_hamming",
    "canonical_rotation",
    "cluster",
    "stratified_split",
    "write_dataset",
    "read_dataset",
]


@dataclass
class YearRecord:
    year: int
    series: YearlySeries
    label: int


@dataclass
class SampleSequence:
    """One field's multiyear record: Y (year, series, label) entries."""

    sample_id: int
    years: list[YearRecord]

    def __post_init__(self):
        if not self.years:
            raise ValueError("a sample needs at least one year")
        tags = [yr.year for yr in self.years]
        if any(b <= a for a, b in zip(tags, tags[1:])):
            raise ValueError("year tags must be strictly increasing")

    @property
    def labels(self) -> list[int]:
        return [yr.label for yr in self.years]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SampleSequence):
            return NotImplemented
        if self.sample_id != other.sample_id or len(self.years) != len(other.years):
            return False
        for a, b in zip(self.years, other.years):
            if a.year != b.year or a.label != b.label:
                return False
            if not np.array_equal(a.series.timestamps, b.series.timestamps):
                return False
            if not np.array_equal(a.series.values, b.series.values):
                return False
        return True


@dataclass
class SynthSpec:
    """Generator parameters for a rotation-structured synthetic dataset.

    Per class and band the temporal profile is
    baseline + amplitude * exp(-0.5 ((day - peak_day) / width)^2); all four
    arrays have shape (C, B). ``transitions`` holds one row-stochastic C x C
    matrix per adjacent year pair; ``dropout_rate`` removes acquisitions at
    random (at least one always survives).
    """

    num_classes: int
    num_years: int
    timesteps: int
    num_bands: int
    baseline: np.ndarray
    amplitude: np.ndarray
    peak_day: np.ndarray
    width: np.ndarray
    noise_sigma: float
    transitions: list[np.ndarray]
    year1_marginal: np.ndarray
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.baseline = np.asarray(self.baseline, dtype=np.float64)
        self.amplitude = np.asarray(self.amplitude, dtype=np.float64)
        self.peak_day = np.asarray(self.peak_day, dtype=np.float64)
        self.width = np.asarray(self.width, dtype=np.float64)
        self.transitions = [np.asarray(t, dtype=np.float64) for t in self.transitions]
        self.year1_marginal = np.asarray(self.year1_marginal, dtype=np.float64)
        C, B = self.num_classes, self.num_bands
        if min(self.num_classes, self.num_years, self.timesteps, self.num_bands) < 1:
            raise ValueError("num_classes, num_years, timesteps and num_bands must be positive")
        if self.timesteps > DAYS_PER_YEAR:
            raise ValueError(f"timesteps cannot exceed {DAYS_PER_YEAR} distinct days")
        for name in ("baseline", "amplitude", "peak_day", "width"):
            arr = getattr(self, name)
            if arr.shape != (C, B):
                raise ValueError(f"{name} must have shape ({C}, {B}), got {arr.shape}")
        if np.any(self.width <= 0):
            raise ValueError("profile widths must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if len(self.transitions) != self.num_years - 1:
            raise ValueError(f"need {self.num_years - 1} transition matrices, got {len(self.transitions)}")
        for t in self.transitions:
            if t.shape != (C, C):
                raise ValueError(f"transition matrices must be ({C}, {C})")
            if np.any(t < 0) or np.max(np.abs(t.sum(axis=1) - 1.0)) > 1e-12:
                raise ValueError("transition matrices must be row-stochastic within 1e-12")
        if self.year1_marginal.shape != (C,) or np.any(self.year1_marginal < 0) or abs(self.year1_marginal.sum() - 1.0) > 1e-12:
            raise ValueError("year1_marginal must be a length-C probability vector")

    def to_json(self) -> str:
        d = {
            "schema_version": 1,
            "num_classes": self.num_classes,
            "num_years": self.num_years,
            "timesteps": self.timesteps,
            "num_bands": self.num_bands,
            "baseline": self.baseline.tolist(),
            "amplitude": self.amplitude.tolist(),
            "peak_day": self.peak_day.tolist(),
            "width": self.width.tolist(),
            "noise_sigma": self.noise_sigma,
            "transitions": [t.tolist() for t in self.transitions],
            "year1_marginal": self.year1_marginal.tolist(),
            "dropout_rate": self.dropout_rate,
        }
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        d = json.loads(text)
        d.pop("schema_version", None)
        return cls(**d)


def make_rotation_spec(
    num_classes: int,
    num_years: int,
    timesteps: int,
    num_bands: int,
    *,
    noise_sigma: float = 0.2,
    rotation_strength: float = 0.9,
    seed: int = 0,
    year1_marginal: np.ndarray | None = None,
    dropout_rate: float = 0.0,
    fixed_classes: int = 0,
) -> SynthSpec:
    """Spec with random seasonal profiles and low-entropy rotation chains.

    Each year-pair transition is a random permutation mixed with the
    uniform matrix: strength on the permutation, the rest spread evenly.
    The last ``fixed_classes`` classes are fixed points of every
    permutation (perennial cultures), so classes that start rare stay rare
    in every year instead of mixing toward the mean.
    """
    if not 0 <= rotation_strength <= 1:
        raise ValueError("rotation_strength must lie in [0, 1]")
    if not 0 <= fixed_classes <= num_classes:
        raise ValueError("fixed_classes must lie in [0, num_classes]")
    rng = np.random.default_rng(seed)
    C, B = num_classes, num_bands
    baseline = rng.uniform(0.05, 0.3, size=(C, B))
    amplitude = rng.uniform(0.4, 1.2, size=(C, B))
    peak_day = rng.uniform(20.0, 340.0, size=(C, B))
    width = rng.uniform(25.0, 60.0, size=(C, B))
    rotating = C - fixed_classes
    transitions = []
    for _ in range(num_years - 1):
        perm_idx = np.concatenate([rng.permutation(rotating), np.arange(rotating, C)])
        perm = np.eye(C)[perm_idx]
        transitions.append(rotation_strength * perm + (1.0 - rotation_strength) / C)
    if year1_marginal is None:
        w = np.array([1.0 / (i + 1.0) for i in range(C)])
        year1_marginal = w / w.sum()
    return SynthSpec(
        num_classes=C,
        num_years=num_years,
        timesteps=timesteps,
        num_bands=B,
        baseline=baseline,
        amplitude=amplitude,
        peak_day=peak_day,
        width=width,
        noise_sigma=noise_sigma,
        transitions=transitions,
        year1_marginal=np.asarray(year1_marginal, dtype=np.float64),
        dropout_rate=dropout_rate,
    )


def generate(spec: SynthSpec, n_samples: int, seed: int = 0) -> list[SampleSequence]:
    """Draw label paths from the rotation chain and render noisy series."""
    if n_samples < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    C = spec.num_classes
    samples = []
    for sid in range(n_samples):
        labels = [int(rng.choice(C, p=spec.year1_marginal))]
        for y in range(spec.num_years - 1):
            labels.append(int(rng.choice(C, p=spec.transitions[y][labels[-1]])))
        years = []
        for y, lab in enumerate(labels):
            days = np.sort(rng.choice(DAYS_PER_YEAR, size=spec.timesteps, replace=False))
            if spec.dropout_rate > 0:
                keep = rng.random(spec.timesteps) >= spec.dropout_rate
                if not keep.any():
                    keep[0] = True
                days = days[keep]
            t = days[:, None].astype(np.float64)
            prof = spec.baseline[lab][None, :] + spec.amplitude[lab][None, :] * np.exp(
                -0.5 * ((t - spec.peak_day[lab][None, :]) / spec.width[lab][None, :]) ** 2
            )
            if spec.noise_sigma > 0:
                prof = prof + rng.normal(0.0, spec.noise_sigma, size=prof.shape)
            years.append(YearRecord(year=y, series=YearlySeries(prof, days), label=lab))
        samples.append(SampleSequence(sample_id=sid, years=years))
    return samples


# --------------------------------------------------------------------------
# Rotation-aware distances and clustering.


def rotation_hamming(a: Sequence[int], b: Sequence[int]) -> int:
    """Minimum Hamming distance between ``a`` and all circular shifts of ``b``.

    Symmetric, zero exactly when the sequences coincide up to rotation, and
    bounded by the sequence length. Not a metric: the triangle inequality
    can fail and is never relied upon.
    """
    a = list(a)
    b = list(b)
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    n = len(a)
    best = n
    for s in range(n):
        d = sum(1 for i in range(n) if a[i] != b[(i + s) % n])
        if d < best:
            best = d
    return best


def canonical_rotation(labels: Sequence[int]) -> tuple[int, ...]:
    """Lexicographically smallest circular shift; orbit representative."""
    labels = tuple(labels)
    n = len(labels)
    return min(labels[s:] + labels[:s] for s in range(n))


def pairwise_rotation_hamming(seqs: np.ndarray) -> np.ndarray:
    """Rotation Hamming distances between all rows of an (n, Y) array."""
    seqs = np.asarray(seqs)
    n, Y = seqs.shape
    best = np.full((n, n), Y, dtype=np.int64)
    for s in range(Y):
        rolled = np.roll(seqs, -s, axis=1)
        d = (seqs[:, None, :] != rolled[None, :, :]).sum(axis=2)
        np.minimum(best, d, out=best)
    return np.minimum(best, best.T)


def cluster(samples: Sequence[SampleSequence], threshold: float = 1.0) -> dict[int, int]:
    """Average-linkage agglomerative clustering under rotation Hamming.

    Merging continues while the smallest inter-cluster average distance is
    at most ``threshold``; rotation-identical sequences always land in one
    cluster (their distance is zero). Tie-breaking and output ids depend
    only on sample ids, so shuffling the input permutes nothing.
    """
    if not samples:
        raise ValueError("cluster requires at least one sample")
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids must be unique")

    # collapse rotation orbits first: intra-orbit distances are zero and
    # rotation_hamming is constant on orbits, so this is exact
    orbits: dict[tuple[int, ...], list[int]] = {}
    for s in samples:
        orbits.setdefault(canonical_rotation(s.labels), []).append(s.sample_id)
    reps = sorted(orbits.items(), key=lambda kv: min(kv[1]))
    k = len(reps)
    members: list[list[int]] = [sorted(m) for _, m in reps]
    min_id = [m[0] for m in members]
    size = [float(len(m)) for m in members]
    active = [True] * k
    D = pairwise_rotation_hamming(np.array([r for r, _ in reps])).astype(np.float64) if k > 1 else np.zeros((1, 1))
    np.fill_diagonal(D, np.inf)
    D[~np.isfinite(D)] = np.inf

    while True:
        best = np.inf
        pair = None
        for i in range(k):
            if not active[i]:
                continue
            for j in range(i + 1, k):
                if not active[j]:
                    continue
                d = D[i, j]
                if d > best:
                    continue
                lo, hi = sorted((min_id[i], min_id[j]))
                key = (d, lo, hi)
                if pair is None or key < (best, *pair[2]):
                    best = d
                    pair = (i, j, (lo, hi))
        if pair is None or best > threshold:
            break
        i, j, _ = pair
        ni, nj = size[i], size[j]
        row = (ni * D[i, :] + nj * D[j, :]) / (ni + nj)
        D[i, :] = row
        D[:, i] = row
        D[i, i] = np.inf
        active[j] = False
        members[i] = sorted(members[i] + members[j])
        min_id[i] = min(min_id[i], min_id[j])
        size[i] = ni + nj

    groups = sorted((members[i] for i in range(k) if active[i]), key=lambda m: m[0])
    assignment: dict[int, int] = {}
    for cid, group in enumerate(groups):
        for sid in group:
            assignment[sid] = cid
    return assignment


@dataclass
class DatasetSplit:
    """Disjoint, covering train/validation/test id lists plus the cluster
    assignment used for stratification."""

    train: list[int]
    val: list[int]
    test: list[int]
    clusters: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        all_ids = self.train + self.val + self.test
        if len(set(all_ids)) != len(all_ids):
            raise ValueError("split lists must be disjoint")

    def to_json(self) -> str:
        part = {}
        for name, ids in (("train", self.train), ("val", self.val), ("test", self.test)):
            for sid in ids:
                part[sid] = name
        assignments = {
            str(sid): {"split": part[sid], "cluster": int(self.clusters.get(sid, 0))}
            for sid in sorted(part)
        }
        return json.dumps({"schema_version": 1, "assignments": assignments}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        d = json.loads(text)
        train, val, test, clusters = [], [], [], {}
        for sid_text, info in sorted(d["assignments"].items(), key=lambda kv: int(kv[0])):
            sid = int(sid_text)
            clusters[sid] = int(info["cluster"])
            {"train": train, "val": val, "test": test}[info["split"]].append(sid)
        return cls(train=train, val=val, test=test, clusters=clusters)


def stratified_split(
    clusters: dict[int, int],
    probabilities: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> DatasetSplit:
    """Independent per-sample categorical assignment, drawn stratum by
    stratum in deterministic id order."""
    if not clusters:
        raise ValueError("stratified_split requires at least one sample")
    p = np.asarray(probabilities, dtype=np.float64)
    if p.shape != (3,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must be three non-negative values summing to 1")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[], [], []]
    by_cluster: dict[int, list[int]] = {}
    for sid, cid in clusters.items():
        by_cluster.setdefault(cid, []).append(sid)
    for cid in sorted(by_cluster):
        for sid in sorted(by_cluster[cid]):
            buckets[int(rng.choice(3, p=p))].append(sid)
    return DatasetSplit(
        train=sorted(buckets[0]), val=sorted(buckets[1]), test=sorted(buckets[2]), clusters=dict(clusters)
    )


# --------------------------------------------------------------------------
# Dataset files: JSON lines, one sample per line. Floats round-trip f64
# exactly through repr.


class DatasetFormatError(ValueError):
    pass


def write_dataset(path: str | Path, samples: Sequence[SampleSequence]) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for s in samples:
            record = {
                "id": s.sample_id,
                "years": [
                    {
                        "year": yr.year,
                        "days": yr.series.timestamps.tolist(),
                        "values": yr.series.values.tolist(),
                        "label": yr.label,
                    }
                    for yr in s.years
                ],
            }
            fh.write(json.dumps(record) + "\n")


def read_dataset(path: str | Path) -> list[SampleSequence]:
    path = Path(path)
    samples: list[SampleSequence] = []
    bands: int | None = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"{path}: line {lineno}: invalid JSON: {e}") from e
            try:
                years = []
                for yr in record["years"]:
                    values = np.asarray(yr["values"], dtype=np.float64)
                    if values.ndim != 2 or values.shape[0] != len(yr["days"]):
                        raise ValueError("values must be a T x B matrix matching days")
                    if bands is None:
                        bands = values.shape[1]
                    elif values.shape[1] != bands:
                        raise ValueError(f"expected {bands} bands, found {values.shape[1]}")
                    years.append(
                        YearRecord(
                            year=int(yr["year"]),
                            series=YearlySeries(values, np.asarray(yr["days"], dtype=np.int64)),
                            label=int(yr["label"]),
                        )
                    )
                samples.append(SampleSequence(sample_id=int(record["id"]), years=years))
            except (KeyError, TypeError, ValueError) as e:
                raise DatasetFormatError(f"{path}: line {lineno}: {e}") from e
    return samples
