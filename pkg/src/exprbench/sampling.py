"""Subject-grouped stratified splitting and minority oversampling."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data_model import Dataset
from .errors import InfeasibleSplitWarning, TooFewMinoritySamplesError, ValidationError

# Guards float noise in ratio * majority before the ceiling (e.g. a ratio
# stored as 400/510 must yield a target of exactly 400).
_CEIL_TOLERANCE = 1e-9


@dataclass(frozen=True)
class SplitResult:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int
    target_fraction: float
    stratum_deviations: dict[tuple[str, str], float]

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise ValidationError("train and test partitions overlap")

    def to_json(self) -> str:
        payload = {
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
            "seed": self.seed,
            "target_fraction": self.target_fraction,
            "stratum_deviations": {
                f"{batch}||{cond}": dev
                for (batch, cond), dev in sorted(self.stratum_deviations.items())
            },
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SplitResult":
        d = json.loads(text)
        deviations = {
            tuple(key.split("||", 1)): dev
            for key, dev in d["stratum_deviations"].items()
        }
        return cls(tuple(d["train_ids"]), tuple(d["test_ids"]),
                   int(d["seed"]), float(d["target_fraction"]), deviations)


def grouped_stratified_split(dataset: Dataset, fraction: float = 0.75,
                             seed: int = 0) -> SplitResult:
    """Split samples into train/test keeping each subject whole.

    Subjects are assigned greedily, largest first (seeded shuffle breaks
    size ties), to whichever side moves every touched (batch, condition)
    stratum's train share closest to ``fraction``. Strata that cannot
    approximate the fraction (single-subject strata) trigger an
    :class:`InfeasibleSplitWarning`; their deviation is still reported.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    records = dataset.metadata_in_matrix_order()

    subjects: dict[str, list[int]] = {}
    for j, rec in enumerate(records):
        subjects.setdefault(rec.subject_id, []).append(j)

    stratum_of = [(rec.batch, rec.condition.value) for rec in records]
    strata_total: dict[tuple[str, str], int] = {}
    for s in stratum_of:
        strata_total[s] = strata_total.get(s, 0) + 1
    target = {s: fraction * n for s, n in strata_total.items()}
    train_count = {s: 0.0 for s in strata_total}

    rng = np.random.default_rng(seed)
    subject_ids = sorted(subjects)
    rng.shuffle(subject_ids)
    subject_ids.sort(key=lambda sid: -len(subjects[sid]))  # stable: ties keep shuffle

    train_subjects: set[str] = set()
    for sid in subject_ids:
        touched: dict[tuple[str, str], int] = {}
        for j in subjects[sid]:
            s = stratum_of[j]
            touched[s] = touched.get(s, 0) + 1
        delta = sum(
            abs(train_count[s] + n - target[s]) - abs(train_count[s] - target[s])
            for s, n in touched.items()
        )
        if delta <= 0:
            train_subjects.add(sid)
            for s, n in touched.items():
                train_count[s] += n

    train_ids, test_ids = [], []
    for rec in records:
        (train_ids if rec.subject_id in train_subjects else test_ids).append(
            rec.sample_id
        )

    deviations: dict[tuple[str, str], float] = {}
    stratum_subjects: dict[tuple[str, str], set[str]] = {}
    for j, rec in enumerate(records):
        stratum_subjects.setdefault(stratum_of[j], set()).add(rec.subject_id)
    for s, total in strata_total.items():
        deviations[s] = train_count[s] / total - fraction
        if len(stratum_subjects[s]) == 1:
            warnings.warn(
                f"stratum {s} holds a single subject; train fraction deviates "
                f"by {deviations[s]:+.3f}",
                InfeasibleSplitWarning,
                stacklevel=2,
            )
    return SplitResult(tuple(train_ids), tuple(test_ids), seed, fraction, deviations)


@dataclass(frozen=True)
class SmoteConfig:
    k_neighbors: int = 5
    sampling_ratio: float = 1.0   # target minority count = ratio * majority count
    seed: int = 0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValidationError("k_neighbors must be >= 1")
        if not 0.0 < self.sampling_ratio <= 1.0:
            raise ValidationError("sampling_ratio must lie in (0, 1]")


@dataclass(frozen=True)
class SmoteResult:
    """Synthetic samples plus the provenance needed to audit each one:
    ``samples[i] == (1 - u[i]) * base + u[i] * neighbor``."""

    samples: np.ndarray
    base_indices: np.ndarray
    neighbor_indices: np.ndarray
    interpolation: np.ndarray


def synthetic_count(minority: int, majority: int, ratio: float) -> int:
    """How many synthetic points bring the minority up to ratio * majority."""
    target = math.ceil(ratio * majority - _CEIL_TOLERANCE)
    return max(0, target - minority)


def smote_oversample(x_minority: np.ndarray, cfg: SmoteConfig,
                     n_synthetic: int) -> SmoteResult:
    """Interpolate synthetic minority points along nearest-neighbor segments.

    Base points cycle through a seeded permutation of the minority set;
    for each, one of its ``k_neighbors`` nearest minority neighbors
    (Euclidean) is drawn and a point is placed uniformly on the segment
    between them.
    """
    x = np.asarray(x_minority, dtype=np.float64)
    n_min = x.shape[0]
    if cfg.k_neighbors >= n_min:
        raise TooFewMinoritySamplesError(
            f"k_neighbors={cfg.k_neighbors} requires a minority class larger "
            f"than {cfg.k_neighbors} (got {n_min})"
        )
    if n_synthetic <= 0:
        empty = np.empty((0, x.shape[1]))
        zero = np.empty(0, dtype=np.int64)
        return SmoteResult(empty, zero, zero.copy(), np.empty(0))

    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    nn = np.argsort(d2, axis=1, kind="stable")[:, : cfg.k_neighbors]

    rng = np.random.default_rng(cfg.seed)
    base_order = rng.permutation(n_min)
    base = np.array([base_order[j % n_min] for j in range(n_synthetic)])
    neighbor = nn[base, rng.integers(0, cfg.k_neighbors, size=n_synthetic)]
    u = rng.random(n_synthetic)
    samples = x[base] + u[:, None] * (x[neighbor] - x[base])
    return SmoteResult(samples, base, neighbor, u)
