"""Config-driven pipeline: every stage reads and writes versioned artifacts.

Stages run in a fixed order (ingest, merge, normalize, combat, qc,
decluster, split, tune, train, evaluate, explain, dea, compare), talk to
each other only through files in the output directory, and are hashed
into a run manifest. With ``resume`` enabled a stage whose outputs
already exist is skipped. Identical config plus inputs yields
byte-identical artifacts; the manifest additionally records timings,
which naturally vary between runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .boosting import Hyperparams, TreeEnsemble, predict_proba, train
from .combat import CombatModel, combat_apply, combat_fit
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
from .preprocess import (
    log2_transform,
    minmax_apply,
    minmax_fit_transform,
    quantile_normalize,
    quantile_normalize_per_batch,
)
from .qc import cross_batch_dea_check, mixture_score, multimodality_screen, pca
from .sampling import SmoteConfig, SplitResult, grouped_stratified_split
from .treeshap import shap_feature_ranking, tree_shap
from .tune import apply_smote, bayes_search, table1_space

log = logging.getLogger("exprbench")

STAGES = ("ingest", "merge", "normalize", "combat", "qc", "decluster", "split",
          "tune", "train", "evaluate", "explain", "dea", "compare")

STAGE_FILES = {
    "ingest": ("ingest_report.json",),
    "merge": ("merged_matrix.tsv", "merged_metadata.tsv"),
    "normalize": ("normalized_matrix.tsv",),
    "combat": ("combat_matrix.tsv", "combat_model.json"),
    "qc": ("qc_report.json", "pca_scores.csv"),
    "decluster": ("declustered_matrix.tsv", "cluster_map.json"),
    "split": ("split.json", "features_scaled.tsv", "scaling_params.json"),
    "tune": ("trials.jsonl", "best_params.json"),
    "train": ("model.json",),
    "evaluate": ("eval_report.json", "roc_points.csv"),
    "explain": ("shap_values.csv", "shap_ranking.json", "explained_model.json"),
    "dea": ("dea_results.csv",),
    "compare": ("venn.json",),
}


@dataclass(frozen=True)
class CohortInput:
    matrix: str
    metadata: str
    format: str = "tsv"
    transpose: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    cohorts: tuple[CohortInput, ...]
    out_dir: str
    run_qc: bool = True
    run_tune: bool = False
    resume: bool = False
    normalize_order: str = "per_batch"        # per_batch | post_merge
    log2_offset: float = 1.0
    combat_covariate: str = "condition"       # condition | none
    qc_k: int = 25
    qc_bc_threshold: float = 5.0 / 9.0
    qc_cross_batch_dea: bool = True
    decluster_r_threshold: float = 0.9
    decluster_absolute: bool = True
    split_fraction: float = 0.75
    split_seed: int = 0
    scale_fit: str = "full"                   # full | train
    smote_ratio: float = 1.0
    smote_k: int = 5
    smote_seed: int = 0
    tune_n_iter: int = 60
    tune_folds: int = 5
    tune_seed: int = 0
    tune_smote_in_fold: bool = True
    train_seed: int = 0
    train_params: dict = field(default_factory=dict)
    eval_threshold: float = 0.5
    explain_model: str = "full"               # full | train
    dea_fdr: float = 0.05
    dea_matrix: str = "combat"                # combat | declustered

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(**{**Hyperparams().to_dict(), **self.train_params})

    def canonical(self) -> dict:
        payload = {k: v for k, v in self.__dict__.items() if k != "cohorts"}
        payload["cohorts"] = [c.__dict__ for c in self.cohorts]
        return payload


_KNOWN_SECTIONS = {"inputs", "output", "stages", "normalize", "combat", "qc",
                   "decluster", "split", "smote", "tune", "train", "evaluate",
                   "explain", "dea"}


def load_config(path) -> PipelineConfig:
    """Parse and validate a TOML pipeline configuration."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigValidationError(f"cannot read config {path}: {exc}") from exc

    unknown = set(raw) - _KNOWN_SECTIONS
    if unknown:
        raise ConfigValidationError(f"unknown config sections: {sorted(unknown)}")
    if "inputs" not in raw or "cohorts" not in raw["inputs"]:
        raise ConfigValidationError("config needs [[inputs.cohorts]] entries")
    if "output" not in raw or "dir" not in raw["output"]:
        raise ConfigValidationError("config needs [output] dir")

    cohorts = []
    for entry in raw["inputs"]["cohorts"]:
        cohort = CohortInput(
            matrix=str(entry["matrix"]),
            metadata=str(entry["metadata"]),
            format=str(entry.get("format", "tsv")),
            transpose=bool(entry.get("transpose", False)),
        )
        for p in (cohort.matrix, cohort.metadata):
            resolved = path.parent / p if not os.path.isabs(p) else Path(p)
            if not resolved.exists():
                raise ConfigValidationError(f"input file does not exist: {resolved}")
        cohorts.append(CohortInput(
            matrix=str(path.parent / cohort.matrix)
            if not os.path.isabs(cohort.matrix) else cohort.matrix,
            metadata=str(path.parent / cohort.metadata)
            if not os.path.isabs(cohort.metadata) else cohort.metadata,
            format=cohort.format,
            transpose=cohort.transpose,
        ))

    stages = raw.get("stages", {})
    split = raw.get("split", {})
    smote = raw.get("smote", {})
    tune = raw.get("tune", {})
    train_section = dict(raw.get("train", {}))
    train_seed = int(train_section.pop("seed", 0))
    qc = raw.get("qc", {})
    norm = raw.get("normalize", {})
    dec = raw.get("decluster", {})

    out_dir = raw["output"]["dir"]
    if not os.path.isabs(out_dir):
        out_dir = str(path.parent / out_dir)

    for name, value in (("split.seed", split.get("seed", 0)),
                        ("smote.seed", smote.get("seed", 0)),
                        ("tune.seed", tune.get("seed", 0)),
                        ("train.seed", train_seed)):
        if not isinstance(value, int):
            raise ConfigValidationError(f"{name} must be an explicit integer")

    cfg = PipelineConfig(
        cohorts=tuple(cohorts),
        out_dir=out_dir,
        run_qc=bool(stages.get("qc", True)),
        run_tune=bool(stages.get("tune", False)),
        resume=bool(stages.get("resume", False)),
        normalize_order=str(norm.get("order", "per_batch")),
        log2_offset=float(norm.get("log2_offset", 1.0)),
        combat_covariate=str(raw.get("combat", {}).get("covariate", "condition")),
        qc_k=int(qc.get("k", 25)),
        qc_bc_threshold=float(qc.get("bc_threshold", 5.0 / 9.0)),
        qc_cross_batch_dea=bool(qc.get("cross_batch_dea", True)),
        decluster_r_threshold=float(dec.get("r_threshold", 0.9)),
        decluster_absolute=bool(dec.get("absolute", True)),
        split_fraction=float(split.get("fraction", 0.75)),
        split_seed=int(split.get("seed", 0)),
        scale_fit=str(split.get("scale_fit", "full")),
        smote_ratio=float(smote.get("ratio", 1.0)),
        smote_k=int(smote.get("k", 5)),
        smote_seed=int(smote.get("seed", 0)),
        tune_n_iter=int(tune.get("n_iter", 60)),
        tune_folds=int(tune.get("folds", 5)),
        tune_seed=int(tune.get("seed", 0)),
        tune_smote_in_fold=bool(tune.get("smote_in_fold", True)),
        train_seed=train_seed,
        train_params=train_section,
        eval_threshold=float(raw.get("evaluate", {}).get("threshold", 0.5)),
        explain_model=str(raw.get("explain", {}).get("model", "full")),
        dea_fdr=float(raw.get("dea", {}).get("fdr", 0.05)),
        dea_matrix=str(raw.get("dea", {}).get("matrix", "combat")),
    )
    if cfg.normalize_order not in ("per_batch", "post_merge"):
        raise ConfigValidationError(f"normalize.order {cfg.normalize_order!r} invalid")
    if cfg.combat_covariate not in ("condition", "none"):
        raise ConfigValidationError(f"combat.covariate {cfg.combat_covariate!r} invalid")
    if cfg.scale_fit not in ("full", "train"):
        raise ConfigValidationError(f"split.scale_fit {cfg.scale_fit!r} invalid")
    if cfg.explain_model not in ("full", "train"):
        raise ConfigValidationError(f"explain.model {cfg.explain_model!r} invalid")
    if cfg.dea_matrix not in ("combat", "declustered"):
        raise ConfigValidationError(f"dea.matrix {cfg.dea_matrix!r} invalid")
    try:
        cfg.hyperparams()
    except ExprBenchError as exc:
        raise ConfigValidationError(f"[train] hyperparameters invalid: {exc}") from exc
    return cfg


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: Path, text: str) -> None:
    path.write_text(text + "\n", encoding="utf-8")


def _load_dataset(out: Path, matrix_name: str) -> Dataset:
    matrix = load_matrix(out / matrix_name)
    metadata = load_metadata(out / "merged_metadata.tsv")
    return Dataset(matrix, metadata)


def _split_features(out: Path):
    """Scaled features as samples x genes plus labels, groups, and ids."""
    dataset = _load_dataset(out, "features_scaled.tsv")
    split = SplitResult.from_json((out / "split.json").read_text(encoding="utf-8"))
    x = dataset.matrix.values.T
    y = dataset.labels()
    sample_index = dataset.matrix.sample_index()
    records = dataset.metadata_in_matrix_order()
    groups = [rec.subject_id for rec in records]
    train_rows = np.array([sample_index[s] for s in split.train_ids])
    test_rows = np.array([sample_index[s] for s in split.test_ids])
    return dataset, x, y, groups, train_rows, test_rows, split


# --- stage implementations -------------------------------------------------

def _stage_ingest(cfg: PipelineConfig, out: Path) -> None:
    report = []
    for cohort in cfg.cohorts:
        matrix = load_matrix(cohort.matrix, cohort.format, cohort.transpose)
        metadata = load_metadata(cohort.metadata)
        Dataset(matrix, metadata)   # validates pairing
        report.append({
            "matrix": cohort.matrix,
            "metadata": cohort.metadata,
            "n_genes": matrix.n_genes,
            "n_samples": matrix.n_samples,
            "batches": sorted({rec.batch for rec in metadata}),
        })
    _write_json(out / "ingest_report.json",
                json.dumps({"cohorts": report}, sort_keys=True, indent=2))


def _stage_merge(cfg: PipelineConfig, out: Path) -> None:
    datasets = []
    for cohort in cfg.cohorts:
        matrix = load_matrix(cohort.matrix, cohort.format, cohort.transpose)
        metadata = load_metadata(cohort.metadata)
        datasets.append(Dataset(matrix, metadata))
    merged = merge_on_common_genes(datasets)
    save_matrix(merged.matrix, out / "merged_matrix.tsv")
    save_metadata(merged.metadata_in_matrix_order(), out / "merged_metadata.tsv")


def _stage_normalize(cfg: PipelineConfig, out: Path) -> None:
    dataset = _load_dataset(out, "merged_matrix.tsv")
    if cfg.normalize_order == "per_batch":
        normalized = quantile_normalize_per_batch(dataset.matrix,
                                                  dataset.batch_vector())
    else:
        normalized = quantile_normalize(dataset.matrix)
    logged = log2_transform(normalized, cfg.log2_offset)
    save_matrix(logged, out / "normalized_matrix.tsv")


def _stage_combat(cfg: PipelineConfig, out: Path) -> None:
    dataset = _load_dataset(out, "normalized_matrix.tsv")
    model = combat_fit(dataset, covariate=cfg.combat_covariate)
    corrected = combat_apply(dataset, model)
    save_matrix(corrected, out / "combat_matrix.tsv")
    _write_json(out / "combat_model.json", model.to_json())


def _stage_qc(cfg: PipelineConfig, out: Path) -> None:
    pre = _load_dataset(out, "normalized_matrix.tsv")
    post = _load_dataset(out, "combat_matrix.tsv")
    records = post.metadata_in_matrix_order()

    def scores_2d(dataset: Dataset):
        result = pca(dataset.matrix, 2)
        return result.components, result.explained_variance_ratio

    pre_scores, pre_evr = scores_2d(pre)
    post_scores, post_evr = scores_2d(post)
    with open(out / "pca_scores.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("sample_id,batch,condition,pre_pc1,pre_pc2,post_pc1,post_pc2\n")
        for i, rec in enumerate(records):
            fh.write(f"{rec.sample_id},{rec.batch},{rec.condition.value},"
                     f"{pre_scores[i, 0]!r},{pre_scores[i, 1]!r},"
                     f"{post_scores[i, 0]!r},{post_scores[i, 1]!r}\n")

    mix = mixture_score(post.matrix, post.metadata, k=cfg.qc_k)
    bc = multimodality_screen(post.matrix)
    flagged = [{"gene": g, "bc": v} for g, v in bc if v > cfg.qc_bc_threshold]
    report = {
        "mixture_score": {"per_condition": mix.per_condition,
                          "mean": mix.mean_score, "k": mix.k},
        "multimodal_flagged": flagged,
        "bc_threshold": cfg.qc_bc_threshold,
        "pca_explained_variance_pre": list(pre_evr),
        "pca_explained_variance_post": list(post_evr),
    }
    if cfg.qc_cross_batch_dea:
        report["cross_batch_dea"] = {
            "pre": cross_batch_dea_check(pre),
            "post": cross_batch_dea_check(post),
        }
    _write_json(out / "qc_report.json", json.dumps(report, sort_keys=True, indent=2))


def _stage_decluster(cfg: PipelineConfig, out: Path) -> None:
    dataset = _load_dataset(out, "combat_matrix.tsv")
    reduced, cmap = decluster(dataset.matrix, cfg.decluster_r_threshold,
                              absolute=cfg.decluster_absolute)
    save_matrix(reduced, out / "declustered_matrix.tsv")
    _write_json(out / "cluster_map.json", cmap.to_json(include_singletons=True))


def _stage_split(cfg: PipelineConfig, out: Path) -> None:
    dataset = _load_dataset(out, "declustered_matrix.tsv")
    split = grouped_stratified_split(dataset, cfg.split_fraction, cfg.split_seed)
    if cfg.scale_fit == "train":
        train_ds = dataset.subset_samples(list(split.train_ids))
        _, params = minmax_fit_transform(train_ds.matrix)
        scaled = minmax_apply(dataset.matrix, params)
    else:
        scaled, params = minmax_fit_transform(dataset.matrix)
    save_matrix(scaled, out / "features_scaled.tsv")
    _write_json(out / "scaling_params.json", params.to_json())
    _write_json(out / "split.json", split.to_json())


def _stage_tune(cfg: PipelineConfig, out: Path) -> None:
    _, x, y, groups, train_rows, _, _ = _split_features(out)
    smote_cfg = SmoteConfig(cfg.smote_k, cfg.smote_ratio, cfg.smote_seed)
    best, trials = bayes_search(
        x[train_rows], y[train_rows],
        [groups[i] for i in train_rows],
        table1_space(), cfg.tune_n_iter, cfg.tune_folds, cfg.tune_seed,
        smote=smote_cfg, smote_in_fold=cfg.tune_smote_in_fold,
    )
    with open(out / "trials.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for t in trials:
            fh.write(t.to_json() + "\n")
    _write_json(out / "best_params.json",
                json.dumps(best.to_dict(), sort_keys=True, indent=2))


def _resolve_hyperparams(cfg: PipelineConfig, out: Path) -> Hyperparams:
    best = out / "best_params.json"
    if cfg.run_tune and best.exists():
        return Hyperparams.from_dict(json.loads(best.read_text(encoding="utf-8")))
    return cfg.hyperparams()


def _stage_train(cfg: PipelineConfig, out: Path) -> None:
    dataset, x, y, _, train_rows, test_rows, split = _split_features(out)
    hp = _resolve_hyperparams(cfg, out)
    smote_cfg = SmoteConfig(cfg.smote_k, cfg.smote_ratio, cfg.smote_seed)
    x_tr, y_tr = apply_smote(x[train_rows], y[train_rows], smote_cfg)
    # Oversampling must never leak into evaluation data.
    assert len(set(split.train_ids) & set(split.test_ids)) == 0
    model = train(x_tr, y_tr, hp, seed=cfg.train_seed,
                  feature_names=dataset.matrix.gene_ids)
    _write_json(out / "model.json", model.to_json())


def _stage_evaluate(cfg: PipelineConfig, out: Path) -> None:
    _, x, y, _, _, test_rows, _ = _split_features(out)
    model = TreeEnsemble.from_json((out / "model.json").read_text(encoding="utf-8"))
    report = evaluate(model, x[test_rows], y[test_rows], cfg.eval_threshold)
    _write_json(out / "eval_report.json", report.to_json())
    proba = predict_proba(model, x[test_rows])
    with open(out / "roc_points.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fpr,tpr\n")
        for fpr, tpr in roc_points(y[test_rows], proba):
            fh.write(f"{fpr!r},{tpr!r}\n")


def _stage_explain(cfg: PipelineConfig, out: Path) -> None:
    dataset, x, y, _, _, _, _ = _split_features(out)
    if cfg.explain_model == "full":
        hp = _resolve_hyperparams(cfg, out)
        smote_cfg = SmoteConfig(cfg.smote_k, cfg.smote_ratio, cfg.smote_seed)
        x_fit, y_fit = apply_smote(x, y, smote_cfg)
        model = train(x_fit, y_fit, hp, seed=cfg.train_seed,
                      feature_names=dataset.matrix.gene_ids)
    else:
        model = TreeEnsemble.from_json(
            (out / "model.json").read_text(encoding="utf-8"))
    _write_json(out / "explained_model.json", model.to_json())
    attr = tree_shap(model, x)
    attr.to_csv(out / "shap_values.csv", dataset.matrix.sample_ids)

    cmap = ClusterMap.from_json((out / "cluster_map.json").read_text(encoding="utf-8"))
    ranking = shap_feature_ranking(attr)
    expanded = expand_importance(dict(ranking), cmap)
    ordered = sorted(expanded.items(), key=lambda gv: (-gv[1], gv[0]))
    _write_json(out / "shap_ranking.json", json.dumps({
        "base_value": attr.base_value,
        "model": cfg.explain_model,
        "ranking": [{"gene": g, "importance": v} for g, v in ordered],
    }, sort_keys=True, indent=2))


def _stage_dea(cfg: PipelineConfig, out: Path) -> None:
    name = "combat_matrix.tsv" if cfg.dea_matrix == "combat" else "declustered_matrix.tsv"
    dataset = _load_dataset(out, name)
    result = differential_expression(dataset, fdr=cfg.dea_fdr)
    result.to_csv(out / "dea_results.csv")


def _stage_compare(cfg: PipelineConfig, out: Path) -> None:
    ranking = json.loads((out / "shap_ranking.json").read_text(encoding="utf-8"))
    shap_genes = [e["gene"] for e in ranking["ranking"]]
    dea_genes = []
    with open(out / "dea_results.csv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            gene, *rest = line.rstrip("\n").split(",")
            if rest[-1] == "true":
                dea_genes.append(gene)
    comparison = compare_sets(shap_genes, dea_genes)
    _write_json(out / "venn.json", comparison.to_json())


_STAGE_IMPL = {
    "ingest": _stage_ingest,
    "merge": _stage_merge,
    "normalize": _stage_normalize,
    "combat": _stage_combat,
    "qc": _stage_qc,
    "decluster": _stage_decluster,
    "split": _stage_split,
    "tune": _stage_tune,
    "train": _stage_train,
    "evaluate": _stage_evaluate,
    "explain": _stage_explain,
    "dea": _stage_dea,
    "compare": _stage_compare,
}


@dataclass(frozen=True)
class RunManifest:
    tool_version: str
    config_hash: str
    input_hashes: dict
    stages: dict

    def to_json(self) -> str:
        return json.dumps({
            "tool_version": self.tool_version,
            "config_hash": self.config_hash,
            "input_hashes": self.input_hashes,
            "stages": self.stages,
        }, sort_keys=True, indent=2)


def run_pipeline(cfg: PipelineConfig) -> RunManifest:
    """Execute all enabled stages; returns the manifest written alongside
    the artifacts. The output directory is locked for the duration."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.close(fd)
    except FileExistsError:
        raise PipelineError(
            "init", f"output directory is locked by another run ({lock}); "
            "remove the lock file if that run is dead"
        ) from None

    config_hash = hashlib.sha256(
        json.dumps(cfg.canonical(), sort_keys=True).encode()
    ).hexdigest()
    input_hashes = {}
    for cohort in cfg.cohorts:
        for path in (cohort.matrix, cohort.metadata):
            input_hashes[path] = _sha256(Path(path))

    stage_records: dict = {}
    try:
        for stage in STAGES:
            if stage == "qc" and not cfg.run_qc:
                continue
            if stage == "tune" and not cfg.run_tune:
                continue
            files = [out / name for name in STAGE_FILES[stage]]
            if cfg.resume and all(f.exists() for f in files):
                log.info("stage %-10s resumed from existing artifacts", stage)
                stage_records[stage] = {
                    "files": {f.name: _sha256(f) for f in files},
                    "seconds": 0.0,
                    "resumed": True,
                }
                continue
            started = time.perf_counter()
            log.info("stage %-10s running", stage)
            try:
                _STAGE_IMPL[stage](cfg, out)
            except ExprBenchError as exc:
                raise PipelineError(stage, str(exc)) from exc
            stage_records[stage] = {
                "files": {f.name: _sha256(f) for f in files},
                "seconds": round(time.perf_counter() - started, 6),
            }
        manifest = RunManifest(__version__, config_hash, input_hashes,
                               stage_records)
        _write_json(out / "manifest.json", manifest.to_json())
        return manifest
    finally:
        lock.unlink(missing_ok=True)
