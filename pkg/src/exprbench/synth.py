"""Synthetic cohort generator with known ground truth.

Log-scale expression for gene g, sample j in batch b:

    L = mu_g + effect_g * [j is Case] + gamma_b + delta_b * noise

with per-gene baselines mu_g, planted additive batch shifts gamma_b,
multiplicative batch spreads delta_b, and signed condition effects on a
chosen subset of genes. Written matrices hold intensities 2**L so the
standard log2 ingestion recovers the additive structure; in-memory use
can request the log scale directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_model import (
    Condition,
    Dataset,
    ExpressionMatrix,
    SampleMetadata,
    save_matrix,
    save_metadata,
)


@dataclass(frozen=True)
class GroundTruth:
    batch_gamma: dict[str, float]
    batch_delta: dict[str, float]
    condition_effects: dict[str, float]   # gene -> signed log2 shift on Case
    seed: int
    n_genes: int
    n_samples: int

    def to_json(self) -> str:
        return json.dumps({
            "batch_gamma": self.batch_gamma,
            "batch_delta": self.batch_delta,
            "condition_effects": self.condition_effects,
            "seed": self.seed,
            "n_genes": self.n_genes,
            "n_samples": self.n_samples,
        }, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        d = json.loads(text)
        return cls(d["batch_gamma"], d["batch_delta"], d["condition_effects"],
                   int(d["seed"]), int(d["n_genes"]), int(d["n_samples"]))


def generate_synthetic(n_batches: int = 2, samples_per_batch: int = 50,
                       n_genes: int = 200, batch_gamma=None, batch_delta=None,
                       n_condition_genes: int = 20, effect_size: float = 1.5,
                       seed: int = 0, case_fraction: float = 0.5,
                       follow_up_rate: float = 0.3, noise_sd: float = 1.0,
                       baseline_range: tuple[float, float] = (5.0, 9.0),
                       log_scale: bool = False) -> tuple[Dataset, GroundTruth]:
    """Build a multi-batch cohort with planted batch and condition effects.

    ``batch_gamma``/``batch_delta`` take one value per batch and default
    to no batch effect (zero shift, unit spread everywhere). Roughly a
    ``follow_up_rate`` share of subjects contributes two samples, which
    exercises subject-grouped splitting downstream.
    """
    if n_batches < 1 or samples_per_batch < 1 or n_genes < 1:
        raise ValueError("counts must be positive")
    if n_condition_genes > n_genes:
        raise ValueError("more condition genes than genes")
    batch_gamma = list(batch_gamma) if batch_gamma is not None else [0.0] * n_batches
    batch_delta = list(batch_delta) if batch_delta is not None else [1.0] * n_batches
    if len(batch_gamma) != n_batches or len(batch_delta) != n_batches:
        raise ValueError("batch effect lists must match n_batches")

    rng = np.random.default_rng(seed)
    gene_ids = tuple(f"G{g:05d}" for g in range(n_genes))
    mu = rng.uniform(*baseline_range, size=n_genes)
    effect_rows = rng.choice(n_genes, size=n_condition_genes, replace=False)
    effect_rows.sort()
    signs = rng.choice([-1.0, 1.0], size=n_condition_genes)
    effects = np.zeros(n_genes)
    effects[effect_rows] = signs * effect_size

    metadata: list[SampleMetadata] = []
    columns = []
    batch_names = [f"B{b}" for b in range(n_batches)]
    for b, batch in enumerate(batch_names):
        assigned = 0
        subject_no = 0
        while assigned < samples_per_batch:
            n_visits = 2 if (rng.random() < follow_up_rate
                             and assigned + 2 <= samples_per_batch) else 1
            condition = (Condition.CASE if rng.random() < case_fraction
                         else Condition.CONTROL)
            subject = f"{batch}_P{subject_no:04d}"
            for _ in range(n_visits):
                sample = f"{batch}_S{assigned:04d}"
                metadata.append(SampleMetadata(sample, subject, batch, condition))
                is_case = 1.0 if condition is Condition.CASE else 0.0
                noise = rng.normal(0.0, noise_sd, size=n_genes)
                log_values = (mu + effects * is_case + batch_gamma[b]
                              + batch_delta[b] * noise)
                columns.append(log_values)
                assigned += 1
            subject_no += 1

    values = np.column_stack(columns)
    if not log_scale:
        values = np.exp2(values)
    matrix = ExpressionMatrix(gene_ids, tuple(m.sample_id for m in metadata), values)
    truth = GroundTruth(
        batch_gamma={b: float(g) for b, g in zip(batch_names, batch_gamma)},
        batch_delta={b: float(d) for b, d in zip(batch_names, batch_delta)},
        condition_effects={gene_ids[r]: float(effects[r]) for r in effect_rows},
        seed=seed,
        n_genes=n_genes,
        n_samples=len(metadata),
    )
    return Dataset(matrix, metadata), truth


def write_synthetic(out_dir, **kwargs) -> dict[str, Path]:
    """Generate a cohort and write matrix, metadata, and ground truth files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, truth = generate_synthetic(**kwargs)
    paths = {
        "matrix": out / "matrix.tsv",
        "metadata": out / "metadata.tsv",
        "ground_truth": out / "ground_truth.json",
    }
    save_matrix(dataset.matrix, paths["matrix"])
    save_metadata(dataset.metadata, paths["metadata"])
    paths["ground_truth"].write_text(truth.to_json() + "\n", encoding="utf-8")
    return paths
