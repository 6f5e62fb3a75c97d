"""Parametric empirical-Bayes batch-effect correction.

Model per gene g, batch i, sample j:

    Y_ijg = alpha_g + X_j * beta_g + gamma_ig + delta_ig * eps_ijg

Fitting standardizes the data with pooled least-squares estimates
(batch columns constrained to a weighted-zero sum), takes per-batch
moment estimates of location (gamma_hat) and spread (delta2_hat), fits
normal / inverse-gamma hyperpriors across genes by method of moments,
and shrinks the per-batch estimates with an iterated fixed point:

    gamma* = (n * tau2 * gamma_hat + delta2* * gamma_bar) / (n * tau2 + delta2*)
    delta2* = (theta + 0.5 * sum((Z - gamma*)^2)) / (n / 2 + lambda - 1)

Correction then removes gamma* and rescales by 1/sqrt(delta2*), putting
back the grand intercept and any covariate effect.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data_model import Condition, Dataset, ExpressionMatrix
from .errors import (
    InsufficientBatchesError,
    NonConvergenceError,
    SingularDesignError,
    UnknownBatchError,
    ValidationError,
)

CONVERGENCE_TOL = 1e-4
MAX_ITERATIONS = 200


@dataclass(frozen=True)
class CombatModel:
    """Fitted correction parameters, immutable after fit.

    ``delta2_star`` holds squared scale factors; correction divides by
    their square roots. ``zero_variance_genes`` are passed through
    untouched by :func:`combat_apply`.
    """

    gene_ids: tuple[str, ...]
    batch_labels: tuple[str, ...]
    covariate: str
    alpha: np.ndarray            # (genes,)
    beta: np.ndarray             # (genes,) zero when covariate == "none"
    sigma: np.ndarray            # (genes,) pooled residual SD, > 0 where corrected
    gamma_hat: np.ndarray        # (batches, genes) raw location estimates
    delta2_hat: np.ndarray       # (batches, genes) raw spread estimates
    gamma_star: np.ndarray       # (batches, genes) shrunk location
    delta2_star: np.ndarray      # (batches, genes) shrunk spread, > 0
    gamma_bar: np.ndarray        # (batches,)
    tau2: np.ndarray             # (batches,)
    lam: np.ndarray              # (batches,)
    theta: np.ndarray            # (batches,)
    zero_variance_genes: tuple[str, ...] = ()
    iteration_history: tuple[tuple[float, ...], ...] = field(default=(), repr=False)

    def __post_init__(self):
        corrected = np.array([g not in set(self.zero_variance_genes)
                              for g in self.gene_ids])
        if np.any(self.sigma[corrected] <= 0):
            raise ValidationError("pooled sigma must be positive for corrected genes")
        if np.any(self.delta2_star[:, corrected] <= 0):
            raise ValidationError("delta2* must be positive for corrected genes")

    def to_json(self) -> str:
        payload = {
            "gene_ids": list(self.gene_ids),
            "batch_labels": list(self.batch_labels),
            "covariate": self.covariate,
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "sigma": self.sigma.tolist(),
            "gamma_hat": self.gamma_hat.tolist(),
            "delta2_hat": self.delta2_hat.tolist(),
            "gamma_star": self.gamma_star.tolist(),
            "delta2_star": self.delta2_star.tolist(),
            "gamma_bar": self.gamma_bar.tolist(),
            "tau2": self.tau2.tolist(),
            "lambda": self.lam.tolist(),
            "theta": self.theta.tolist(),
            "zero_variance_genes": list(self.zero_variance_genes),
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CombatModel":
        d = json.loads(text)
        return cls(
            gene_ids=tuple(d["gene_ids"]),
            batch_labels=tuple(d["batch_labels"]),
            covariate=d["covariate"],
            alpha=np.array(d["alpha"]),
            beta=np.array(d["beta"]),
            sigma=np.array(d["sigma"]),
            gamma_hat=np.array(d["gamma_hat"]),
            delta2_hat=np.array(d["delta2_hat"]),
            gamma_star=np.array(d["gamma_star"]),
            delta2_star=np.array(d["delta2_star"]),
            gamma_bar=np.array(d["gamma_bar"]),
            tau2=np.array(d["tau2"]),
            lam=np.array(d["lambda"]),
            theta=np.array(d["theta"]),
            zero_variance_genes=tuple(d["zero_variance_genes"]),
        )


def _design(dataset: Dataset, covariate: str):
    batches = dataset.batch_vector()
    labels = tuple(dict.fromkeys(batches))
    one_hot = np.zeros((len(batches), len(labels)))
    for j, b in enumerate(batches):
        one_hot[j, labels.index(b)] = 1.0
    cols = [one_hot]
    if covariate == "condition":
        case = np.array([1.0 if c is Condition.CASE else 0.0
                         for c in dataset.condition_vector()])
        cols.append(case[:, None])
    elif covariate != "none":
        raise ValueError(f"unknown covariate {covariate!r}")
    design = np.hstack(cols)
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise SingularDesignError(
            "batch and condition are exactly confounded; cannot separate effects"
        )
    return design, labels, one_hot


def combat_fit(dataset: Dataset, covariate: str = "condition",
               allow_single_batch: bool = False) -> CombatModel:
    """Estimate correction parameters from a multi-batch dataset.

    ``allow_single_batch`` is a test hook: with one batch there is no
    cross-gene information to shrink against, so the raw moment estimates
    are used as-is (making apply an exact inverse of standardization).
    """
    y = dataset.matrix.values.T              # samples x genes
    n_samples, n_genes = y.shape
    design, labels, one_hot = _design(dataset, covariate)
    n_batches = len(labels)
    batch_sizes = one_hot.sum(axis=0)

    if n_batches < 2 and not allow_single_batch:
        raise InsufficientBatchesError("need >= 2 batches to estimate batch effects")
    if np.any(batch_sizes < 2):
        small = [labels[i] for i in np.flatnonzero(batch_sizes < 2)]
        raise InsufficientBatchesError(f"batches with < 2 samples: {small}")

    coef, *_ = np.linalg.lstsq(design, y, rcond=None)   # (cols, genes)
    batch_coef = coef[:n_batches]
    beta = coef[n_batches] if covariate == "condition" else np.zeros(n_genes)
    weights = batch_sizes / n_samples
    alpha = weights @ batch_coef

    residual = y - design @ coef
    sigma2 = np.mean(residual ** 2, axis=0)
    # Constant genes leave only least-squares rounding noise behind.
    noise_floor = (max(1.0, float(np.abs(y).max())) * 1e-10) ** 2
    zero_var = sigma2 <= noise_floor
    sigma = np.where(zero_var, 1.0, np.sqrt(sigma2))

    # (n, 0) @ (0, genes) broadcasts to zeros when there is no covariate.
    stand_mean = alpha[None, :] + design[:, n_batches:] @ coef[n_batches:]
    z = (y - stand_mean) / sigma[None, :]

    gamma_hat = np.empty((n_batches, n_genes))
    delta2_hat = np.empty((n_batches, n_genes))
    batch_rows = [np.flatnonzero(one_hot[:, i]) for i in range(n_batches)]
    for i, rows in enumerate(batch_rows):
        zb = z[rows]
        gamma_hat[i] = zb.mean(axis=0)
        delta2_hat[i] = zb.var(axis=0)       # ddof=0: exact inverse on the hook path

    if n_batches == 1:
        gamma_star, delta2_star = gamma_hat.copy(), delta2_hat.copy()
        gamma_bar = gamma_hat.mean(axis=1)
        tau2 = gamma_hat.var(axis=1, ddof=1)
        lam = np.zeros(1)
        theta = np.zeros(1)
        history: list[tuple[float, ...]] = []
    else:
        gamma_bar = gamma_hat.mean(axis=1)
        tau2 = gamma_hat.var(axis=1, ddof=1)
        m = delta2_hat.mean(axis=1)
        v = delta2_hat.var(axis=1, ddof=1)
        if np.any(v <= 0):
            raise ValidationError("degenerate spread estimates; cannot fit hyperprior")
        lam = (m ** 2 + 2 * v) / v
        theta = (m ** 3 + m * v) / v

        gamma_star = gamma_hat.copy()
        delta2_star = delta2_hat.copy()
        history = []
        for i, rows in enumerate(batch_rows):
            zb = z[rows]
            n_i = len(rows)
            sum_z = zb.sum(axis=0)
            sum_z2 = (zb ** 2).sum(axis=0)
            g_cur = gamma_hat[i].copy()
            d_cur = delta2_hat[i].copy()
            changes = []
            for _ in range(MAX_ITERATIONS):
                g_new = ((n_i * tau2[i] * gamma_hat[i] + d_cur * gamma_bar[i])
                         / (n_i * tau2[i] + d_cur))
                ss = sum_z2 - 2 * g_new * sum_z + n_i * g_new ** 2
                d_new = (theta[i] + 0.5 * ss) / (n_i / 2 + lam[i] - 1)
                change = max(np.max(np.abs(g_new - g_cur)),
                             np.max(np.abs(d_new - d_cur)))
                g_cur, d_cur = g_new, d_new
                changes.append(float(change))
                if change < CONVERGENCE_TOL:
                    break
            else:
                raise NonConvergenceError(
                    f"batch {labels[i]!r}: EB updates did not converge within "
                    f"{MAX_ITERATIONS} iterations (last change {changes[-1]:.3g})"
                )
            gamma_star[i] = g_cur
            delta2_star[i] = d_cur
            history.append(tuple(changes))

    # Zero-variance genes are never corrected; park neutral parameters.
    gamma_hat[:, zero_var] = 0.0
    gamma_star[:, zero_var] = 0.0
    delta2_hat[:, zero_var] = 1.0
    delta2_star[:, zero_var] = 1.0

    return CombatModel(
        gene_ids=dataset.matrix.gene_ids,
        batch_labels=labels,
        covariate=covariate,
        alpha=alpha,
        beta=np.asarray(beta),
        sigma=sigma,
        gamma_hat=gamma_hat,
        delta2_hat=delta2_hat,
        gamma_star=gamma_star,
        delta2_star=delta2_star,
        gamma_bar=gamma_bar,
        tau2=tau2,
        lam=lam,
        theta=theta,
        zero_variance_genes=tuple(np.asarray(dataset.matrix.gene_ids)[zero_var]),
        iteration_history=tuple(history),
    )


def combat_apply(dataset: Dataset, model: CombatModel) -> ExpressionMatrix:
    """Remove fitted batch effects from a dataset the model covers."""
    if dataset.matrix.gene_ids != model.gene_ids:
        raise ValidationError("gene ids do not match the fitted model")
    batches = dataset.batch_vector()
    unknown = sorted(set(batches) - set(model.batch_labels))
    if unknown:
        raise UnknownBatchError(f"batches absent from model: {unknown}")

    y = dataset.matrix.values.T
    cond = np.array([1.0 if c is Condition.CASE else 0.0
                     for c in dataset.condition_vector()])
    # beta is identically zero when the model was fitted without covariate.
    stand_mean = model.alpha[None, :] + cond[:, None] * model.beta[None, :]
    z = (y - stand_mean) / model.sigma[None, :]

    out = np.empty_like(y)
    batch_index = {b: i for i, b in enumerate(model.batch_labels)}
    for j, b in enumerate(batches):
        i = batch_index[b]
        scale = model.sigma / np.sqrt(model.delta2_star[i])
        out[j] = (z[j] - model.gamma_star[i]) * scale + stand_mean[j]

    passthrough = np.array([g in set(model.zero_variance_genes)
                            for g in model.gene_ids])
    out[:, passthrough] = y[:, passthrough]
    if not np.all(np.isfinite(out)):
        raise ValidationError("correction produced non-finite values")
    return dataset.matrix.with_values(out.T)
