"""Gaussian-process hyperparameter search over grouped cross-validation.

The optimizer maps every dimension onto the unit cube (log-scaled
dimensions in log space, integers rounded after proposal, categoricals
one-hot), fits a Matern-5/2 GP to the normalized objective with a 1e-6
jitter, and proposes the candidate maximizing Expected Improvement
(exploration offset xi = 0.01) from a seeded candidate sweep. The first
max(5, cube_dim + 1) trials are Latin-hypercube samples. A numerically
failed GP fit falls back to a seeded random proposal for that iteration.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from .boosting import Hyperparams, predict_proba, train
from .errors import InvalidSpaceError, SingleClassError, TooFewGroupsError
from .metrics import macro_f1
from .sampling import SmoteConfig, smote_oversample, synthetic_count

EI_XI = 0.01
GP_JITTER = 1e-6
N_CANDIDATES = 1024
N_LOCAL_CANDIDATES = 256


@dataclass(frozen=True)
class Dimension:
    name: str
    kind: str                      # "int" | "float" | "cat"
    low: float = 0.0
    high: float = 1.0
    log: bool = False
    choices: tuple = ()

    def __post_init__(self):
        if self.kind in ("int", "float"):
            if not self.low < self.high:
                raise InvalidSpaceError(f"{self.name}: bounds [{self.low}, {self.high}]")
            if self.log and self.low <= 0:
                raise InvalidSpaceError(f"{self.name}: log scale needs positive bounds")
        elif self.kind == "cat":
            if len(self.choices) < 2:
                raise InvalidSpaceError(f"{self.name}: needs >= 2 choices")
        else:
            raise InvalidSpaceError(f"{self.name}: unknown kind {self.kind!r}")

    @property
    def cube_width(self) -> int:
        return len(self.choices) if self.kind == "cat" else 1

    def decode(self, u: np.ndarray):
        if self.kind == "cat":
            return self.choices[int(np.argmax(u))]
        u0 = float(u[0])
        if self.log:
            value = math.exp(math.log(self.low)
                             + u0 * (math.log(self.high) - math.log(self.low)))
        else:
            value = self.low + u0 * (self.high - self.low)
        if self.kind == "int":
            return int(min(self.high, max(self.low, round(value))))
        return min(self.high, max(self.low, value))


@dataclass(frozen=True)
class SearchSpace:
    dimensions: tuple[Dimension, ...]

    def __post_init__(self):
        if not self.dimensions:
            raise InvalidSpaceError("search space has no dimensions")

    @property
    def cube_dim(self) -> int:
        return sum(d.cube_width for d in self.dimensions)

    def decode(self, u: np.ndarray) -> dict:
        params = {}
        at = 0
        for dim in self.dimensions:
            params[dim.name] = dim.decode(u[at: at + dim.cube_width])
            at += dim.cube_width
        return params


def table1_space() -> SearchSpace:
    """The boosted-tree search space used throughout this project."""
    return SearchSpace((
        Dimension("n_estimators", "int", 50, 600),
        Dimension("max_depth", "int", 2, 15),
        Dimension("learning_rate", "float", 0.001, 1.0, log=True),
        Dimension("gamma", "float", 1e-4, 100.0, log=True),
        Dimension("reg_alpha", "float", 1e-4, 100.0, log=True),
        Dimension("reg_lambda", "float", 1e-4, 100.0, log=True),
        Dimension("min_child_weight", "int", 1, 10),
        Dimension("scale_pos_weight", "cat", choices=(1.0, 400.0 / 510.0)),
    ))


@dataclass
class TrialRecord:
    iteration: int
    params: dict
    fold_scores: list[float]
    mean_score: float
    train_score_mean: float
    kind: str                      # "seed" | "ei" | "fallback"

    def to_json(self) -> str:
        return json.dumps({
            "iteration": self.iteration,
            "params": self.params,
            "fold_scores": self.fold_scores,
            "mean_score": self.mean_score,
            "train_score_mean": self.train_score_mean,
            "kind": self.kind,
        }, sort_keys=True)


def _matern52(a: np.ndarray, b: np.ndarray, length_scale: float) -> np.ndarray:
    d = np.sqrt(np.maximum(
        np.sum(a ** 2, axis=1)[:, None] + np.sum(b ** 2, axis=1)[None, :]
        - 2.0 * a @ b.T, 0.0))
    s = math.sqrt(5.0) * d / length_scale
    return (1.0 + s + s ** 2 / 3.0) * np.exp(-s)


def _latin_hypercube(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    u = np.empty((n, dim))
    for j in range(dim):
        u[:, j] = (rng.permutation(n) + rng.random(n)) / n
    return u


def _propose_ei(x_obs: np.ndarray, y_obs: np.ndarray,
                rng: np.random.Generator) -> np.ndarray | None:
    """Best EI candidate, or None if the GP fit failed numerically."""
    y_std = y_obs.std()
    y_norm = (y_obs - y_obs.mean()) / (y_std if y_std > 0 else 1.0)
    pairwise = np.sqrt(np.maximum(
        np.sum(x_obs ** 2, 1)[:, None] + np.sum(x_obs ** 2, 1)[None, :]
        - 2 * x_obs @ x_obs.T, 0.0))
    off_diag = pairwise[~np.eye(len(x_obs), dtype=bool)]
    length_scale = float(np.clip(np.median(off_diag) if off_diag.size else 0.5,
                                 0.05, 2.0))
    try:
        k = _matern52(x_obs, x_obs, length_scale) + GP_JITTER * np.eye(len(x_obs))
        chol = cho_factor(k, lower=True)
        alpha = cho_solve(chol, y_norm)
    except np.linalg.LinAlgError:
        return None

    dim = x_obs.shape[1]
    candidates = rng.random((N_CANDIDATES, dim))
    best_x = x_obs[int(np.argmax(y_norm))]
    local = np.clip(best_x + 0.1 * rng.standard_normal((N_LOCAL_CANDIDATES, dim)),
                    0.0, 1.0)
    candidates = np.vstack([candidates, local])

    k_star = _matern52(candidates, x_obs, length_scale)
    mu = k_star @ alpha
    v = cho_solve(chol, k_star.T)
    var = np.maximum(1.0 - np.sum(k_star.T * v, axis=0), 1e-12)
    sd = np.sqrt(var)
    improvement = mu - y_norm.max() - EI_XI
    z = improvement / sd
    ei = improvement * norm.cdf(z) + sd * norm.pdf(z)
    return candidates[int(np.argmax(ei))]


def gp_maximize(space: SearchSpace, objective, n_iter: int,
                seed: int = 0) -> tuple[dict, list[TrialRecord]]:
    """Maximize ``objective(params) -> float`` over the space.

    The objective may also return ``(score, fold_scores, train_score)``
    to populate richer trial records. Ties on the best score resolve to
    the earliest iteration. Partial results are always returned.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    rng = np.random.default_rng(seed)
    dim = space.cube_dim
    n_seed = min(n_iter, max(5, dim + 1))

    x_obs = np.empty((0, dim))
    trials: list[TrialRecord] = []
    seeds = _latin_hypercube(n_seed, dim, rng)

    for it in range(n_iter):
        if it < n_seed:
            u, kind = seeds[it], "seed"
        else:
            proposal = _propose_ei(x_obs, np.array([t.mean_score for t in trials]), rng)
            if proposal is None:
                u, kind = rng.random(dim), "fallback"
            else:
                u, kind = proposal, "ei"
        params = space.decode(u)
        result = objective(params)
        if isinstance(result, tuple):
            score, fold_scores, train_score = result
        else:
            score, fold_scores, train_score = float(result), [float(result)], float("nan")
        trials.append(TrialRecord(it, params, [float(s) for s in fold_scores],
                                  float(score), float(train_score), kind))
        x_obs = np.vstack([x_obs, u[None, :]])

    best = max(trials, key=lambda t: (t.mean_score, -t.iteration))
    return best.params, trials


def grouped_kfold(groups, folds: int, seed: int = 0) -> np.ndarray:
    """Assign each sample a fold index, keeping groups whole and balancing
    fold sample counts greedily (largest group first)."""
    groups = list(groups)
    members: dict = {}
    for i, g in enumerate(groups):
        members.setdefault(g, []).append(i)
    if len(members) < folds:
        raise TooFewGroupsError(f"{len(members)} groups but {folds} folds requested")

    rng = np.random.default_rng(seed)
    ids = sorted(members, key=str)
    rng.shuffle(ids)
    ids.sort(key=lambda g: -len(members[g]))   # stable: ties keep shuffled order

    fold_sizes = [0] * folds
    assignment = np.empty(len(groups), dtype=np.int64)
    for g in ids:
        fold = int(np.argmin(fold_sizes))
        for i in members[g]:
            assignment[i] = fold
        fold_sizes[fold] += len(members[g])
    return assignment


def cross_validated_f1(x: np.ndarray, y: np.ndarray, groups, hp: Hyperparams,
                       folds: int, seed: int, smote: SmoteConfig | None = None,
                       smote_in_fold: bool = True) -> tuple[float, list[float], float]:
    """Mean validation macro F1 over grouped folds, with optional minority
    oversampling applied inside each fold's training portion (never to
    validation data)."""
    fold_of = grouped_kfold(groups, folds, seed)
    fold_scores, train_scores = [], []
    for fold in range(folds):
        tr = np.flatnonzero(fold_of != fold)
        va = np.flatnonzero(fold_of == fold)
        x_tr, y_tr = x[tr], y[tr]
        if len(np.unique(y_tr)) < 2 or len(np.unique(y[va])) < 2:
            raise SingleClassError(
                f"fold {fold} lacks both classes; regroup or reduce folds"
            )
        if smote is not None and smote_in_fold:
            x_tr, y_tr = apply_smote(x_tr, y_tr, smote)
        model = train(x_tr, y_tr, hp)
        pred_tr = (predict_proba(model, x_tr) >= 0.5).astype(int)
        pred_va = (predict_proba(model, x[va]) >= 0.5).astype(int)
        train_scores.append(macro_f1(y_tr, pred_tr))
        fold_scores.append(macro_f1(y[va], pred_va))
    return float(np.mean(fold_scores)), fold_scores, float(np.mean(train_scores))


def apply_smote(x: np.ndarray, y: np.ndarray, cfg: SmoteConfig):
    """Oversample the minority class; returns the augmented (x, y)."""
    n_pos = int(np.sum(y == 1))
    n_neg = len(y) - n_pos
    minority_label = 1 if n_pos < n_neg else 0
    n_min, n_maj = min(n_pos, n_neg), max(n_pos, n_neg)
    n_new = synthetic_count(n_min, n_maj, cfg.sampling_ratio)
    if n_new == 0:
        return x, y
    result = smote_oversample(x[y == minority_label], cfg, n_new)
    x_out = np.vstack([x, result.samples])
    y_out = np.concatenate([y, np.full(n_new, minority_label, dtype=y.dtype)])
    return x_out, y_out


def bayes_search(x: np.ndarray, y: np.ndarray, groups, space: SearchSpace,
                 n_iter: int, folds: int = 5, seed: int = 0,
                 smote: SmoteConfig | None = None,
                 smote_in_fold: bool = True) -> tuple[Hyperparams, list[TrialRecord]]:
    """Search the space for the best cross-validated macro F1."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if folds < 2:
        raise ValueError("folds must be >= 2")

    def objective(params: dict):
        hp = Hyperparams.from_dict(params)
        return cross_validated_f1(x, y, groups, hp, folds, seed,
                                  smote=smote, smote_in_fold=smote_in_fold)

    best_params, trials = gp_maximize(space, objective, n_iter, seed)
    return Hyperparams.from_dict(best_params), trials
