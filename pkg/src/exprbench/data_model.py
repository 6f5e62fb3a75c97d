"""Expression matrices, sample metadata, and cohort merging.

File formats:
  * expression matrix: TSV or CSV, header row ``gene_id<sep>S1<sep>S2...``,
    one gene per row, ``.`` decimal separator, UTF-8;
  * metadata: TSV with header columns ``sample_id``, ``subject_id``,
    ``batch``, ``condition`` (extra columns ignored).
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateBatchError,
    DuplicateIdError,
    DuplicateSampleError,
    EmptyMatrixError,
    MissingColumnError,
    NoCommonGenesError,
    ParseError,
    UnknownConditionError,
    ValidationError,
)


class Condition(enum.Enum):
    CONTROL = "Control"
    CASE = "Case"


# Case-insensitive aliases seen in heterogeneous public cohort annotations.
CONDITION_ALIASES = {
    "control": Condition.CONTROL,
    "healthy": Condition.CONTROL,
    "case": Condition.CASE,
    "ms": Condition.CASE,
}


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ExpressionMatrix:
    """Dense genes x samples matrix with identifier bookkeeping.

    Immutable after construction; ``values`` is a read-only float64 array
    with rows aligned to ``gene_ids`` and columns to ``sample_ids``.
    """

    gene_ids: tuple[str, ...]
    sample_ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "values", _freeze(self.values))
        if self.values.ndim != 2:
            raise ValidationError("values must be a 2-D array")
        n_g, n_s = self.values.shape
        if n_g == 0 or n_s == 0:
            raise EmptyMatrixError("matrix has no genes or no samples")
        if n_g != len(self.gene_ids) or n_s != len(self.sample_ids):
            raise ValidationError(
                f"shape {self.values.shape} does not match "
                f"{len(self.gene_ids)} genes x {len(self.sample_ids)} samples"
            )
        for name, ids in (("gene", self.gene_ids), ("sample", self.sample_ids)):
            dup = _first_duplicate(ids)
            if dup is not None:
                raise DuplicateIdError(f"duplicate {name} id {dup!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("matrix contains NaN or infinite values")

    @property
    def n_genes(self) -> int:
        return len(self.gene_ids)

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    def gene_index(self) -> dict[str, int]:
        return {g: i for i, g in enumerate(self.gene_ids)}

    def sample_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.sample_ids)}

    def with_values(self, values: np.ndarray) -> "ExpressionMatrix":
        """Same ids, new values (shape-checked by the constructor)."""
        return ExpressionMatrix(self.gene_ids, self.sample_ids, values)

    def select_genes(self, gene_ids) -> "ExpressionMatrix":
        idx = self.gene_index()
        rows = [idx[g] for g in gene_ids]
        return ExpressionMatrix(tuple(gene_ids), self.sample_ids, self.values[rows])

    def select_samples(self, sample_ids) -> "ExpressionMatrix":
        idx = self.sample_index()
        cols = [idx[s] for s in sample_ids]
        return ExpressionMatrix(self.gene_ids, tuple(sample_ids), self.values[:, cols])


@dataclass(frozen=True)
class SampleMetadata:
    sample_id: str
    subject_id: str
    batch: str
    condition: Condition


@dataclass(frozen=True)
class Dataset:
    """An expression matrix plus exactly one metadata record per sample."""

    matrix: ExpressionMatrix
    metadata: tuple[SampleMetadata, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "metadata", tuple(self.metadata))
        by_sample: dict[str, SampleMetadata] = {}
        for rec in self.metadata:
            if rec.sample_id in by_sample:
                raise DuplicateSampleError(
                    f"multiple metadata records for sample {rec.sample_id!r}"
                )
            by_sample[rec.sample_id] = rec
        if set(by_sample) != set(self.matrix.sample_ids):
            missing = set(self.matrix.sample_ids) - set(by_sample)
            extra = set(by_sample) - set(self.matrix.sample_ids)
            raise ValidationError(
                f"metadata/matrix sample mismatch: missing={sorted(missing)[:5]} "
                f"extra={sorted(extra)[:5]}"
            )
        subject_condition: dict[str, Condition] = {}
        for rec in self.metadata:
            prev = subject_condition.setdefault(rec.subject_id, rec.condition)
            if prev is not rec.condition:
                raise ValidationError(
                    f"subject {rec.subject_id!r} appears under two conditions"
                )

    def metadata_for(self, sample_id: str) -> SampleMetadata:
        return self._by_sample()[sample_id]

    def _by_sample(self) -> dict[str, SampleMetadata]:
        return {rec.sample_id: rec for rec in self.metadata}

    def metadata_in_matrix_order(self) -> list[SampleMetadata]:
        by_sample = self._by_sample()
        return [by_sample[s] for s in self.matrix.sample_ids]

    @property
    def batches(self) -> tuple[str, ...]:
        """Distinct batch labels in order of first appearance."""
        seen: dict[str, None] = {}
        for rec in self.metadata_in_matrix_order():
            seen.setdefault(rec.batch, None)
        return tuple(seen)

    def batch_vector(self) -> list[str]:
        return [rec.batch for rec in self.metadata_in_matrix_order()]

    def condition_vector(self) -> list[Condition]:
        return [rec.condition for rec in self.metadata_in_matrix_order()]

    def labels(self) -> np.ndarray:
        """0/1 vector in matrix sample order; Case encodes as 1."""
        return np.array(
            [1 if c is Condition.CASE else 0 for c in self.condition_vector()],
            dtype=np.int64,
        )

    def subset_samples(self, sample_ids) -> "Dataset":
        wanted = set(sample_ids)
        meta = [rec for rec in self.metadata if rec.sample_id in wanted]
        return Dataset(self.matrix.select_samples(list(sample_ids)), meta)

    def with_matrix(self, matrix: ExpressionMatrix) -> "Dataset":
        return Dataset(matrix, self.metadata)


def _first_duplicate(items) -> str | None:
    seen = set()
    for it in items:
        if it in seen:
            return it
        seen.add(it)
    return None


def _parse_cell(text: str, row: int, col: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric cell {text!r}", row, col) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite cell {text!r}", row, col)
    return value


def load_matrix(path, fmt: str = "tsv", transpose: bool = False) -> ExpressionMatrix:
    """Parse an expression matrix file.

    ``transpose=True`` reads a samples x genes file (first column sample
    ids, header row gene ids) and returns the genes x samples view.
    """
    delim = {"tsv": "\t", "csv": ","}[fmt]
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delim))
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if len(rows) < 2 or len(rows[0]) < 2:
        raise EmptyMatrixError(f"{path}: need a header plus at least one data row")

    col_ids = [c.strip() for c in rows[0][1:]]
    row_ids = []
    width = len(rows[0])
    values = np.empty((len(rows) - 1, len(col_ids)), dtype=np.float64)
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise ParseError(f"expected {width} columns, found {len(row)}", i, len(row))
        row_ids.append(row[0].strip())
        for j, cell in enumerate(row[1:], start=2):
            values[i - 2, j - 2] = _parse_cell(cell.strip(), i, j)

    if transpose:
        row_ids, col_ids, values = col_ids, row_ids, values.T
    return ExpressionMatrix(tuple(row_ids), tuple(col_ids), values)


def save_matrix(matrix: ExpressionMatrix, path, fmt: str = "tsv") -> None:
    """Write a matrix in the loader's format; floats use shortest repr."""
    delim = {"tsv": "\t", "csv": ","}[fmt]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(delim.join(["gene_id", *matrix.sample_ids]) + "\n")
        for g, row in zip(matrix.gene_ids, matrix.values):
            fh.write(g + delim + delim.join(repr(float(v)) for v in row) + "\n")


METADATA_COLUMNS = ("sample_id", "subject_id", "batch", "condition")


def load_metadata(path) -> list[SampleMetadata]:
    """Parse a metadata TSV; condition labels are matched case-insensitively."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        header = reader.fieldnames or []
        missing = [c for c in METADATA_COLUMNS if c not in header]
        if missing:
            raise MissingColumnError(f"{path}: missing columns {missing}")
        records = []
        seen: set[str] = set()
        for row in reader:
            label = (row["condition"] or "").strip().lower()
            if label not in CONDITION_ALIASES:
                raise UnknownConditionError(
                    f"{path}: unknown condition {row['condition']!r} "
                    f"(accepted: {sorted(CONDITION_ALIASES)})"
                )
            sid = row["sample_id"].strip()
            if sid in seen:
                raise DuplicateSampleError(f"{path}: duplicate sample id {sid!r}")
            seen.add(sid)
            records.append(
                SampleMetadata(
                    sample_id=sid,
                    subject_id=row["subject_id"].strip(),
                    batch=row["batch"].strip(),
                    condition=CONDITION_ALIASES[label],
                )
            )
    return records


def save_metadata(metadata, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(METADATA_COLUMNS) + "\n")
        for rec in metadata:
            fh.write(
                f"{rec.sample_id}\t{rec.subject_id}\t{rec.batch}\t"
                f"{rec.condition.value}\n"
            )


def merge_on_common_genes(datasets) -> Dataset:
    """Concatenate cohorts, keeping only genes present in every input.

    Genes come out lexicographically sorted; samples keep input order.
    Inputs must not share sample ids or batch labels.
    """
    datasets = list(datasets)
    if not datasets:
        raise ValueError("need at least one dataset")

    common = set(datasets[0].matrix.gene_ids)
    for ds in datasets[1:]:
        common &= set(ds.matrix.gene_ids)
    if not common:
        raise NoCommonGenesError("no gene is shared by all cohorts")
    genes = sorted(common)

    seen_samples: set[str] = set()
    seen_batches: set[str] = set()
    blocks = []
    sample_ids: list[str] = []
    metadata: list[SampleMetadata] = []
    for ds in datasets:
        for s in ds.matrix.sample_ids:
            if s in seen_samples:
                raise DuplicateSampleError(f"sample {s!r} appears in two cohorts")
            seen_samples.add(s)
        overlap = set(ds.batches) & seen_batches
        if overlap:
            raise DuplicateBatchError(f"batch labels shared across cohorts: {sorted(overlap)}")
        seen_batches.update(ds.batches)
        blocks.append(ds.matrix.select_genes(genes).values)
        sample_ids.extend(ds.matrix.sample_ids)
        metadata.extend(ds.metadata)

    merged = ExpressionMatrix(tuple(genes), tuple(sample_ids), np.hstack(blocks))
    return Dataset(merged, metadata)
