"""
Data ingestion and preprocessing.

Expression tables (cell lines x genes), long-format drug response tables and
gene order lists go in; cleaned, normalised Datasets and reproducible
test / non-private / private splits come out.
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
from zipfile import BadZipFile

import numpy as np
import pandas as pd
from openpyxl import load_workbook
from openpyxl.utils.exceptions import InvalidFileException

from config import DEFAULT_DELIMITER
from errors import DataValidationError, DegenerateDataError, TableParseError
from rng import RngStream, derive_stream

logger = logging.getLogger(__name__)

_LINE_RE = re.compile(r"line (\d+)")


# =============================================================================
# TYPES
# =============================================================================

@dataclass
class RawTable:
    """Labelled numeric table; missing cells are NaN and flagged in `missing`."""

    row_labels: List[str]
    column_labels: List[str]
    values: np.ndarray
    missing: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.row_labels), len(self.column_labels))
        if self.missing is None:
            self.missing = np.isnan(self.values)
        if self.missing.shape != self.values.shape:
            raise DataValidationError("missing mask does not match table shape")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def missing_count(self) -> int:
        return int(self.missing.sum())


@dataclass
class Dataset:
    """Paired inputs (n x d) and targets (n). Never holds missing values."""

    inputs: np.ndarray
    targets: np.ndarray
    row_labels: Optional[List[str]] = None
    feature_names: Optional[List[str]] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        if self.inputs.ndim != 2:
            raise DataValidationError("inputs must be a 2-d matrix", shape=list(self.inputs.shape))
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise DataValidationError(
                "inputs and targets disagree on row count",
                inputs_rows=self.inputs.shape[0],
                targets=self.targets.shape[0],
            )
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise DataValidationError("dataset contains missing or non-finite values")
        if self.row_labels is not None and len(self.row_labels) != self.n:
            raise DataValidationError("row label count does not match rows")
        if self.feature_names is not None and len(self.feature_names) != self.d:
            raise DataValidationError("feature name count does not match columns")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    @classmethod
    def empty(cls, d: int) -> "Dataset":
        return cls(np.zeros((0, d)), np.zeros(0))

    def subset(self, index: Sequence[int]) -> "Dataset":
        index = np.asarray(index, dtype=int)
        labels = [self.row_labels[i] for i in index] if self.row_labels is not None else None
        return Dataset(self.inputs[index], self.targets[index], labels, self.feature_names)

    def concat(self, other: "Dataset") -> "Dataset":
        labels = None
        if self.row_labels is not None and other.row_labels is not None:
            labels = list(self.row_labels) + list(other.row_labels)
        return Dataset(
            np.vstack([self.inputs, other.inputs]),
            np.concatenate([self.targets, other.targets]),
            labels,
            self.feature_names,
        )

    def replace(self, inputs=None, targets=None) -> "Dataset":
        return Dataset(
            self.inputs if inputs is None else inputs,
            self.targets if targets is None else targets,
            self.row_labels,
            self.feature_names,
        )


@dataclass(frozen=True)
class SplitSpec:
    n_test: int
    n_nonprivate: int
    seed: int

    def check(self, n: int):
        if self.n_test < 0 or self.n_nonprivate < 0:
            raise DataValidationError("split sizes must be non-negative")
        if self.n_test + self.n_nonprivate > n:
            raise DataValidationError(
                "split asks for more rows than the dataset has",
                n=n,
                n_test=self.n_test,
                n_nonprivate=self.n_nonprivate,
            )


# =============================================================================
# TABLE LOADING
# =============================================================================

def _drop_trailing_blank(cells: pd.DataFrame) -> pd.DataFrame:
    text = cells.fillna("").astype(str).apply(lambda col: col.str.strip())
    filled = np.flatnonzero((text != "").any(axis=1).to_numpy())
    return cells.iloc[: filled[-1] + 1] if filled.size else cells.iloc[:0]


def _read_cells(path: Path, delimiter: str) -> pd.DataFrame:
    """Read a table as raw strings. Short rows show up as NaN cells."""
    try:
        if path.suffix.lower() in (".xlsx", ".xlsm"):
            wb = load_workbook(filename=str(path), read_only=True, data_only=True)
            ws = wb.active
            rows = []
            for row in ws.iter_rows(values_only=True):
                rows.append(["" if v is None else str(v) for v in row])
            wb.close()
            return _drop_trailing_blank(pd.DataFrame(rows, dtype=object))

        cells = pd.read_csv(
            path,
            sep=delimiter,
            header=None,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=False,
            engine="python",
        )
        return _drop_trailing_blank(cells)
    except (OSError, InvalidFileException, BadZipFile) as e:
        raise TableParseError(f"cannot read {path.name}: {e}", path=str(path))
    except pd.errors.ParserError as e:
        match = _LINE_RE.search(str(e))
        raise TableParseError(
            f"ragged or malformed row in {path.name}",
            path=str(path),
            line=int(match.group(1)) if match else None,
            detail=str(e).strip(),
        )
    except pd.errors.EmptyDataError:
        raise TableParseError(f"{path.name} is empty", path=str(path), line=1)


def _check_ragged(cells: pd.DataFrame, path: Path):
    short = cells.isna().any(axis=1)
    if short.any():
        first = int(np.flatnonzero(short.to_numpy())[0])
        raise TableParseError(
            f"ragged row in {path.name}",
            path=str(path),
            line=first + 1,
            expected_fields=cells.shape[1],
        )


def _to_float(cells: pd.DataFrame, path: Path, first_column: int = 2) -> np.ndarray:
    stripped = cells.apply(lambda col: col.str.strip())
    blank = stripped == ""
    numeric = stripped.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna() & ~blank
    if bad.to_numpy().any():
        r, c = np.argwhere(bad.to_numpy())[0]
        raise TableParseError(
            "cell is not a number",
            path=str(path),
            line=int(r) + 2,
            column=int(c) + first_column,
            value=str(cells.iat[r, c]),
        )
    return numeric.to_numpy(dtype=float)


def load_table(path: str, delimiter: str = DEFAULT_DELIMITER) -> RawTable:
    """Load a table with one header row and one label column.

    Empty cells become flagged missing entries. `.xlsx` workbooks are read
    from their active sheet.
    """
    path = Path(path)
    if not path.exists():
        raise TableParseError(f"file not found: {path}", path=str(path))
    cells = _read_cells(path, delimiter)
    if cells.shape[0] < 1 or cells.shape[1] < 1:
        raise TableParseError(f"{path.name} has no header", path=str(path), line=1)
    _check_ragged(cells, path)

    header = [str(v).strip() for v in cells.iloc[0, 1:]]
    body = cells.iloc[1:]
    row_labels = [str(v).strip() for v in body.iloc[:, 0]]
    values = _to_float(body.iloc[:, 1:].reset_index(drop=True), path)
    table = RawTable(row_labels, header, values.reshape(len(row_labels), len(header)))
    logger.info("Loaded %s: %d rows x %d columns, %d missing", path.name, *table.shape, table.missing_count)
    return table


def load_responses(path: str, delimiter: str = DEFAULT_DELIMITER) -> pd.DataFrame:
    """Long-format drug responses: cell line id, drug id, log-IC50."""
    path = Path(path)
    if not path.exists():
        raise TableParseError(f"file not found: {path}", path=str(path))
    cells = _read_cells(path, delimiter)
    _check_ragged(cells, path)
    if cells.shape[1] != 3:
        raise TableParseError(
            "response file must have exactly three columns",
            path=str(path),
            line=1,
            found=int(cells.shape[1]),
        )
    body = cells.iloc[1:].reset_index(drop=True)
    response = _to_float(body.iloc[:, [2]], path, first_column=3)[:, 0]
    frame = pd.DataFrame(
        {
            "cell_line": body.iloc[:, 0].str.strip().to_numpy(),
            "drug": body.iloc[:, 1].str.strip().to_numpy(),
            "response": response,
        }
    )
    logger.info("Loaded %s: %d responses for %d drugs", path.name, len(frame), frame["drug"].nunique())
    return frame


def load_gene_order(path: str) -> List[str]:
    """One gene identifier per line, most frequently mutated first."""
    path = Path(path)
    if not path.exists():
        raise TableParseError(f"file not found: {path}", path=str(path))
    with open(path, "r") as f:
        genes = [line.strip() for line in f if line.strip()]
    return genes


def select_genes(expr: RawTable, gene_order: Sequence[str], k: int) -> RawTable:
    """Keep the first k genes of `gene_order`, in that order."""
    if k < 0 or k > len(gene_order):
        raise DataValidationError("k outside the gene order list", k=k, available=len(gene_order))
    wanted = list(gene_order[:k])
    position = {name: j for j, name in enumerate(expr.column_labels)}
    unknown = [g for g in wanted if g not in position]
    if unknown:
        raise DataValidationError("genes missing from expression table", missing=unknown)
    cols = [position[g] for g in wanted]
    return RawTable(
        list(expr.row_labels),
        wanted,
        expr.values[:, cols].reshape(expr.shape[0], len(cols)),
        expr.missing[:, cols].reshape(expr.shape[0], len(cols)),
    )


def build_drug_datasets(expr: RawTable, responses: pd.DataFrame) -> Dict[str, Dataset]:
    """Join expression and responses into one cleaned Dataset per drug.

    Responses that are missing are dropped per drug; cell lines with missing
    expression or no expression row at all are dropped as well. Kept values
    are never altered.
    """
    row_of = {label: i for i, label in enumerate(expr.row_labels)}
    complete_rows = ~expr.missing.any(axis=1)
    datasets: Dict[str, Dataset] = {}

    for drug, group in responses.groupby("drug", sort=True):
        rows, targets, labels = [], [], []
        dropped = 0
        for cell_line, value in zip(group["cell_line"], group["response"]):
            i = row_of.get(cell_line)
            if i is None or not complete_rows[i] or not np.isfinite(value):
                dropped += 1
                continue
            rows.append(i)
            targets.append(value)
            labels.append(cell_line)
        inputs = expr.values[rows] if rows else np.zeros((0, expr.shape[1]))
        datasets[drug] = Dataset(inputs, np.asarray(targets), labels, list(expr.column_labels))
        logger.info("Drug %s: n=%d (%d dropped)", drug, len(rows), dropped)

    return datasets


# =============================================================================
# PREPROCESSING
# =============================================================================

def fit_feature_means(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataValidationError("need at least two rows to estimate gene means", rows=int(X.shape[0]))
    return X.mean(axis=0)


def center_columns(X: np.ndarray, means: np.ndarray) -> np.ndarray:
    return np.asarray(X, dtype=float) - means


def normalise_rows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateDataError("row is exactly zero after centering", row=int(zero[0]))
    return X / norms[:, None]


def preprocess_features(X: np.ndarray, means: Optional[np.ndarray] = None) -> np.ndarray:
    """Remove gene means, then scale each row to unit L2 norm.

    With `means` given (training means inside cross-validation) those are
    used instead of the matrix's own column means.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DataValidationError("inputs must be a 2-d matrix")
    if np.isnan(X).any():
        raise DataValidationError("inputs contain missing values")
    if means is None:
        means = fit_feature_means(X)
    return normalise_rows(center_columns(X, means))


def center_targets(y: np.ndarray, mean: Optional[float] = None) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size == 0:
        raise DataValidationError("cannot center an empty target vector")
    if not np.all(np.isfinite(y)):
        raise DataValidationError("targets must be finite")
    if mean is None:
        mean = y.mean()
    return y - mean


def preprocess_train_test(train: Dataset, *others: Dataset) -> List[Dataset]:
    """Preprocess `train` with its own statistics and apply them to `others`."""
    means = fit_feature_means(train.inputs)
    y_mean = float(train.targets.mean())
    out = [train.replace(preprocess_features(train.inputs, means), center_targets(train.targets, y_mean))]
    for other in others:
        if other.n == 0:
            out.append(other)
            continue
        out.append(other.replace(preprocess_features(other.inputs, means), other.targets - y_mean))
    return out


# =============================================================================
# SPLITTING
# =============================================================================

def split_indices(n: int, spec: SplitSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    spec.check(n)
    order = RngStream(spec.seed, derive_stream(spec.seed, "split")).permutation(n)
    test = order[: spec.n_test]
    nonprivate = order[spec.n_test: spec.n_test + spec.n_nonprivate]
    private = order[spec.n_test + spec.n_nonprivate:]
    return test, nonprivate, private


def split_dataset(d: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset, Dataset]:
    """Disjoint (test, non-private, private) split; the private set is the rest."""
    test, nonprivate, private = split_indices(d.n, spec)
    return d.subset(test), d.subset(nonprivate), d.subset(private)


# =============================================================================
# DATASET FILES
# =============================================================================

TARGET_COLUMN = "response"


def write_dataset(path: str, dataset: Dataset):
    names = dataset.feature_names or [f"x{j}" for j in range(dataset.d)]
    labels = dataset.row_labels or [str(i) for i in range(dataset.n)]
    frame = pd.DataFrame(dataset.inputs, columns=names)
    frame.insert(0, "id", labels)
    frame[TARGET_COLUMN] = dataset.targets
    frame.to_csv(path, index=False)


def read_dataset(path: str) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise TableParseError(f"file not found: {path}", path=str(path))
    try:
        frame = pd.read_csv(path, float_precision="round_trip", dtype={"id": str})
    except pd.errors.ParserError as e:
        match = _LINE_RE.search(str(e))
        raise TableParseError(
            f"malformed dataset file {path.name}",
            path=str(path),
            line=int(match.group(1)) if match else None,
        )
    except pd.errors.EmptyDataError:
        raise TableParseError(f"{path.name} is empty", path=str(path), line=1)
    except (OSError, UnicodeDecodeError) as e:
        raise TableParseError(f"cannot read {path.name}: {e}", path=str(path))
    if frame.columns[0] != "id" or frame.columns[-1] != TARGET_COLUMN:
        raise TableParseError(
            "dataset file needs an 'id' first column and a 'response' last column",
            path=str(path),
            line=1,
        )
    numeric = _numeric_columns(frame, list(frame.columns[1:]), path)
    missing = np.argwhere(np.isnan(numeric))
    if missing.size:
        r, c = missing[0]
        raise DataValidationError(
            "dataset file has an empty cell",
            path=str(path),
            line=int(r) + 2,
            column=int(c) + 2,
        )
    features = list(frame.columns[1:-1])
    return Dataset(
        numeric[:, :-1].reshape(len(frame), len(features)),
        numeric[:, -1],
        [str(v) for v in frame["id"]],
        features,
    )


def _numeric_columns(frame: pd.DataFrame, columns: List[str], path: Path) -> np.ndarray:
    block = frame[columns]
    numeric = block.apply(pd.to_numeric, errors="coerce")
    bad = (numeric.isna() & block.notna()).to_numpy()
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise TableParseError(
            "cell is not a number",
            path=str(path),
            line=int(r) + 2,
            column=int(c) + 2,
            value=str(block.iat[r, c]),
        )
    return numeric.to_numpy(dtype=float).reshape(len(frame), len(columns))
