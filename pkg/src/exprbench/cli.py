"""Command-line entry points. Data goes to files, logs to stderr.

Exit codes: 0 success, 1 validation/input error, 2 stage failure.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .boosting import Hyperparams, TreeEnsemble, learning_curve, predict_proba, train
from .combat import combat_apply, combat_fit
from .data_model import (
    Dataset,
    load_matrix,
    load_metadata,
    merge_on_common_genes,
    save_matrix,
    save_metadata,
)
from .dea import compare_sets, differential_expression
from .decluster import ClusterMap, decluster, expand_importance
from .errors import ConfigValidationError, ExprBenchError, PipelineError
from .metrics import evaluate, roc_points
from .pipeline import load_config, run_pipeline
from .preprocess import log2_transform, quantile_normalize, quantile_normalize_per_batch
from .qc import cross_batch_dea_check, mixture_score, multimodality_screen
from .sampling import SmoteConfig, SplitResult, grouped_stratified_split
from .synth import write_synthetic
from .treeshap import shap_feature_ranking, tree_shap
from .tune import apply_smote, bayes_search, table1_space

log = logging.getLogger("exprbench")


def _fail(exc: ExprBenchError) -> None:
    log.error("%s", exc)
    code = 2 if isinstance(exc, PipelineError) else 1
    raise SystemExit(code)


def _load_dataset(matrix_path, metadata_path, fmt="tsv", transpose=False) -> Dataset:
    return Dataset(load_matrix(matrix_path, fmt, transpose),
                   load_metadata(metadata_path))


@click.group()
@click.version_option(version=__version__, prog_name="exprbench")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose):
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def run(config_path):
    """Run the full pipeline from a TOML config."""
    try:
        cfg = load_config(config_path)
        manifest = run_pipeline(cfg)
    except ConfigValidationError as exc:
        _fail(exc)
    except ExprBenchError as exc:
        log.error("%s", exc)
        raise SystemExit(2)
    click.echo(f"wrote {len(manifest.stages)} stage artifacts to {cfg.out_dir}",
               err=True)


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--batches", default=2, show_default=True)
@click.option("--samples-per-batch", default=50, show_default=True)
@click.option("--genes", default=200, show_default=True)
@click.option("--gamma", default="", help="Comma-separated per-batch shifts.")
@click.option("--delta", default="", help="Comma-separated per-batch spreads.")
@click.option("--condition-genes", default=20, show_default=True)
@click.option("--effect-size", default=1.5, show_default=True)
@click.option("--seed", default=0, show_default=True)
def synth(out_dir, batches, samples_per_batch, genes, gamma, delta,
          condition_genes, effect_size, seed):
    """Generate a synthetic cohort with known ground truth."""
    try:
        paths = write_synthetic(
            out_dir,
            n_batches=batches,
            samples_per_batch=samples_per_batch,
            n_genes=genes,
            batch_gamma=[float(v) for v in gamma.split(",")] if gamma else None,
            batch_delta=[float(v) for v in delta.split(",")] if delta else None,
            n_condition_genes=condition_genes,
            effect_size=effect_size,
            seed=seed,
        )
    except (ExprBenchError, ValueError) as exc:
        log.error("%s", exc)
        raise SystemExit(1)
    for name, p in paths.items():
        click.echo(f"{name}: {p}", err=True)


@main.command()
@click.option("--matrix", required=True, type=click.Path(exists=True))
@click.option("--metadata", required=True, type=click.Path(exists=True))
@click.option("--format", "fmt", default="tsv", type=click.Choice(["tsv", "csv"]))
@click.option("--transpose", is_flag=True, help="Input file is samples x genes.")
def ingest(matrix, metadata, fmt, transpose):
    """Validate a cohort's matrix and metadata files."""
    try:
        dataset = _load_dataset(matrix, metadata, fmt, transpose)
    except ExprBenchError as exc:
        _fail(exc)
    click.echo(json.dumps({
        "n_genes": dataset.matrix.n_genes,
        "n_samples": dataset.matrix.n_samples,
        "batches": sorted(dataset.batches),
    }, sort_keys=True))


@main.command()
@click.option("--matrix", "matrices", multiple=True, required=True,
              type=click.Path(exists=True))
@click.option("--metadata", "metadatas", multiple=True, required=True,
              type=click.Path(exists=True))
@click.option("--out-matrix", required=True, type=click.Path())
@click.option("--out-metadata", required=True, type=click.Path())
def merge(matrices, metadatas, out_matrix, out_metadata):
    """Merge cohorts on their common genes."""
    if len(matrices) != len(metadatas):
        log.error("need one --metadata per --matrix")
        raise SystemExit(1)
    try:
        datasets = [_load_dataset(m, md) for m, md in zip(matrices, metadatas)]
        merged = merge_on_common_genes(datasets)
    except ExprBenchError as exc:
        _fail(exc)
    save_matrix(merged.matrix, out_matrix)
    save_metadata(merged.metadata_in_matrix_order(), out_metadata)


@main.command()
@click.option("--matrix", required=True, type=click.Path(exists=True))
@click.option("--metadata", type=click.Path(exists=True))
@click.option("--order", default="per_batch",
              type=click.Choice(["per_batch", "post_merge"]), show_default=True)
@click.option("--log2-offset", default=1.0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def normalize(matrix, metadata, order, log2_offset, out_path):
    """Quantile-normalize and log2-transform a matrix."""
    try:
        m = load_matrix(matrix)
        if order == "per_batch":
            if metadata is None:
                log.error("--order per_batch needs --metadata for batch labels")
                raise SystemExit(1)
            dataset = Dataset(m, load_metadata(metadata))
            m = quantile_normalize_per_batch(m, dataset.batch_vector())
        else:
            m = quantile_normalize(m)
        save_matrix(log2_transform(m, log2_offset), out_path)
    except ExprBenchError as exc:
        _fail(exc)


@main.command()
@click.option("--matrix", required=True, type=click.Path(exists=True))
@click.option("--metadata", required=True, type=click.Path(exists=True))
@click.option("--covariate", default="condition",
              type=click.Choice(["condition", "none"]), show_default=True)
@click.option("--out-matrix", required=True, type=click.Path())
@click.option("--out-model", required=True, type=click.Path())
def combat(matrix, metadata, covariate, out_matrix, out_model):
    """Fit and apply empirical-Bayes batch correction."""
    try:
        dataset = _load_dataset(matrix, metadata)
        model = combat_fit(dataset, covariate=covariate)
        corrected = combat_apply(dataset, model)
    except ExprBenchError as exc:
        _fail(exc)
    save_matrix(corrected, out_matrix)
    Path(out_model).write_text(model.to_json() + "\n", encoding="utf-8")


@main.command()
@click.option("--matrix", required=True, type=click.Path(exists=True))
@click.option("--metadata", required=True, type=click.Path(exists=True))
@click.option("--k", default=25, show_default=True)
@click.option("--bc-threshold", default=5.0 / 9.0, show_default=True)
@click.option("--cross-batch-dea/--no-cross-batch-dea", default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def qc(matrix, metadata, k, bc_threshold, cross_batch_dea, out_path):
    """Mixture score, multimodality screen, and optional cross-batch check."""
    try:
        dataset = _load_dataset(matrix, metadata)
        mix = mixture_score(dataset.matrix, dataset.metadata, k=k)
        bc = multimodality_screen(dataset.matrix)
        report = {
            "mixture_score": {"per_condition": mix.per_condition,
                              "mean": mix.mean_score, "k": mix.k},
            "multimodal_flagged": [{"gene": g, "bc": v}
                                   for g, v in bc if v > bc_threshold],
            "bc_threshold": bc_threshold,
        }
        if cross_batch_dea:
            report["cross_batch_dea"] = cross_batch_dea_check(dataset)
    except ExprBenchError as exc:
        _fail(exc)
    Path(out_path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n",
                              encoding="utf-8")


@main.command("decluster")
@click.option("--matrix", required=True, type=click.Path(exists=True))
@click.option("--r-threshold", default=0.9, show_default=True)
@click.option("--signed-only", is_flag=True,
              help="Link only positively correlated genes.")
@click.option("--out-matrix", required=True, type=click.Path())
@click.option("--out-clusters", required=True, type=click.Path())
def decluster_cmd(matrix, r_threshold, signed_only, out_matrix, out_clusters):
    """Collapse correlated gene clusters to one representative."""
    try:
        reduced, cmap = decluster(load_matrix(matrix), r_threshold,
                                  absolute=not signed_only)
    except ExprBenchError as exc:
        _fail(exc)
    save_matrix(reduced, out_matrix)
    Path(out_clusters).write_text(cmap.to_json() + "\n", encoding="utf-8")


@main.command()
@click.option("--matrix", required=True, type=click.Path(exists=True))
@click.option("--metadata", required=True, type=click.Path(exists=True))
@click.option("--fraction", default=0.75, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def split(matrix, metadata, fraction, seed, out_path):
    """Subject-grouped stratified train/test split."""
    try:
        dataset = _load_dataset(matrix, metadata)
        result = grouped_stratified_split(dataset, fraction, seed)
    except ExprBenchError as exc:
        _fail(exc)
    Path(out_path).write_text(result.to_json() + "\n", encoding="utf-8")


def _hyperparams_from_options(params_json, **overrides) -> Hyperparams:
    base = Hyperparams().to_dict()
    if params_json:
        base.update(json.loads(Path(params_json).read_text(encoding="utf-8")))
    base.update({k: v for k, v in overrides.items() if v is not None})
    return Hyperparams.from_dict(base)


def _split_arrays(dataset: Dataset, split_path):
    result = SplitResult.from_json(Path(split_path).read_text(encoding="utf-8"))
    index = dataset.matrix.sample_index()
    x = dataset.matrix.values.T
    y = dataset.labels()
    tr = np.array([index[s] for s in result.train_ids])
    te = np.array([index[s] for s in result.test_ids])
    return x, y, tr, te


@main.command("train")
@click.option("--features", required=True, type=click.Path(exists=True))
@click.option("--metadata", required=True, type=click.Path(exists=True))
@click.option("--split", "split_path", type=click.Path(exists=True),
              help="Restrict fitting to the split's training samples.")
@click.option("--params", "params_json", type=click.Path(exists=True),
              help="JSON hyperparameters (e.g. from tune).")
@click.option("--smote-ratio", default=None, type=float,
              help="Target minority/majority ratio; omit to skip oversampling.")
@click.option("--smote-k", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out-model", required=True, type=click.Path())
def train_cmd(features, metadata, split_path, params_json, smote_ratio, smote_k,
              seed, out_model):
    """Fit the boosted-tree classifier."""
    try:
        dataset = _load_dataset(features, metadata)
        hp = _hyperparams_from_options(params_json)
        if split_path:
            x, y, tr, _ = _split_arrays(dataset, split_path)
            x, y = x[tr], y[tr]
        else:
            x, y = dataset.matrix.values.T, dataset.labels()
        if smote_ratio is not None:
            x, y = apply_smote(x, y, SmoteConfig(smote_k, smote_ratio, seed))
        model = train(x, y, hp, seed=seed, feature_names=dataset.matrix.gene_ids)
    except ExprBenchError as exc:
        _fail(exc)
    Path(out_model).write_text(model.to_json() + "\n", encoding="utf-8")


@main.command("evaluate")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--features", required=True, type=click.Path(exists=True))
@click.option("--metadata", required=True, type=click.Path(exists=True))
@click.option("--split", "split_path", type=click.Path(exists=True),
              help="Evaluate on the split's test samples only.")
@click.option("--threshold", default=0.5, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--out-roc", type=click.Path())
def evaluate_cmd(model_path, features, metadata, split_path, threshold,
                 out_path, out_roc):
    """Score a model; optionally dump ROC points."""
    try:
        dataset = _load_dataset(features, metadata)
        model = TreeEnsemble.from_json(Path(model_path).read_text(encoding="utf-8"))
        if split_path:
            x, y, _, te = _split_arrays(dataset, split_path)
            x, y = x[te], y[te]
        else:
            x, y = dataset.matrix.values.T, dataset.labels()
        report = evaluate(model, x, y, threshold)
        if out_roc:
            proba = predict_proba(model, x)
            with open(out_roc, "w", encoding="utf-8", newline="\n") as fh:
                fh.write("fpr,tpr\n")
                for fpr, tpr in roc_points(y, proba):
                    fh.write(f"{fpr!r},{tpr!r}\n")
    except ExprBenchError as exc:
        _fail(exc)
    Path(out_path).write_text(report.to_json() + "\n", encoding="utf-8")


@main.command("learning-curve")
@click.option("--features", required=True, type=click.Path(exists=True))
@click.option("--metadata", required=True, type=click.Path(exists=True))
@click.option("--fractions", default="0.2,0.4,0.6,0.8,1.0", show_default=True)
@click.option("--folds", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--params", "params_json", type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def learning_curve_cmd(features, metadata, fractions, folds, seed, params_json,
                       out_path):
    """Train/validation F1 at growing training-set shares (CSV)."""
    try:
        dataset = _load_dataset(features, metadata)
        hp = _hyperparams_from_options(params_json)
        groups = [rec.subject_id for rec in dataset.metadata_in_matrix_order()]
        rows = learning_curve(
            dataset.matrix.values.T, dataset.labels(), hp,
            [float(f) for f in fractions.split(",")], folds, seed, groups=groups,
        )
    except ExprBenchError as exc:
        _fail(exc)
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fraction,train_f1,validation_f1\n")
        for frac, tr_f1, va_f1 in rows:
            fh.write(f"{frac!r},{tr_f1!r},{va_f1!r}\n")


@main.command("tune")
@click.option("--features", required=True, type=click.Path(exists=True))
@click.option("--metadata", required=True, type=click.Path(exists=True))
@click.option("--split", "split_path", type=click.Path(exists=True))
@click.option("--n-iter", default=60, show_default=True)
@click.option("--folds", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--smote-ratio", default=None, type=float)
@click.option("--smote-k", default=5, show_default=True)
@click.option("--out-trials", required=True, type=click.Path())
@click.option("--out-params", required=True, type=click.Path())
def tune_cmd(features, metadata, split_path, n_iter, folds, seed, smote_ratio,
             smote_k, out_trials, out_params):
    """Search hyperparameters by cross-validated F1."""
    try:
        dataset = _load_dataset(features, metadata)
        records = dataset.metadata_in_matrix_order()
        groups = [rec.subject_id for rec in records]
        x, y = dataset.matrix.values.T, dataset.labels()
        if split_path:
            x, y, tr, _ = _split_arrays(dataset, split_path)
            x, y = x[tr], y[tr]
            groups = [groups[i] for i in tr]
        smote_cfg = (SmoteConfig(smote_k, smote_ratio, seed)
                     if smote_ratio is not None else None)
        best, trials = bayes_search(x, y, groups, table1_space(), n_iter, folds,
                                    seed, smote=smote_cfg)
    except ExprBenchError as exc:
        _fail(exc)
    with open(out_trials, "w", encoding="utf-8", newline="\n") as fh:
        for t in trials:
            fh.write(t.to_json() + "\n")
    Path(out_params).write_text(
        json.dumps(best.to_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8")


@main.command("explain")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--features", required=True, type=click.Path(exists=True))
@click.option("--clusters", type=click.Path(exists=True),
              help="Cluster map for re-expanding collapsed genes.")
@click.option("--out-values", required=True, type=click.Path())
@click.option("--out-ranking", required=True, type=click.Path())
def explain_cmd(model_path, features, clusters, out_values, out_ranking):
    """Per-sample attributions plus a global importance ranking."""
    try:
        matrix = load_matrix(features)
        model = TreeEnsemble.from_json(Path(model_path).read_text(encoding="utf-8"))
        attr = tree_shap(model, matrix.values.T)
        ranking = shap_feature_ranking(attr)
        if clusters:
            cmap = ClusterMap.from_json(Path(clusters).read_text(encoding="utf-8"))
            ranking = sorted(expand_importance(dict(ranking), cmap).items(),
                             key=lambda gv: (-gv[1], gv[0]))
    except ExprBenchError as exc:
        _fail(exc)
    attr.to_csv(out_values, matrix.sample_ids)
    Path(out_ranking).write_text(json.dumps({
        "base_value": attr.base_value,
        "ranking": [{"gene": g, "importance": v} for g, v in ranking],
    }, sort_keys=True, indent=2) + "\n", encoding="utf-8")


@main.command("dea")
@click.option("--matrix", required=True, type=click.Path(exists=True))
@click.option("--metadata", required=True, type=click.Path(exists=True))
@click.option("--fdr", default=0.05, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def dea_cmd(matrix, metadata, fdr, out_path):
    """Per-gene rank-sum differential expression with FDR control."""
    try:
        dataset = _load_dataset(matrix, metadata)
        result = differential_expression(dataset, fdr=fdr)
    except ExprBenchError as exc:
        _fail(exc)
    result.to_csv(out_path)


@main.command("compare")
@click.option("--shap-ranking", required=True, type=click.Path(exists=True))
@click.option("--dea-results", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def compare_cmd(shap_ranking, dea_results, out_path):
    """Venn partition of attribution-selected vs differential genes."""
    try:
        ranking = json.loads(Path(shap_ranking).read_text(encoding="utf-8"))
        shap_genes = [e["gene"] for e in ranking["ranking"]]
        dea_genes = []
        with open(dea_results, encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                gene, *rest = line.rstrip("\n").split(",")
                if rest[-1] == "true":
                    dea_genes.append(gene)
        comparison = compare_sets(shap_genes, dea_genes)
    except ExprBenchError as exc:
        _fail(exc)
    Path(out_path).write_text(comparison.to_json() + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
