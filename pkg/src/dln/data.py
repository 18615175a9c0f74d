"""Tabular dataset loading and preprocessing.

CSV files (RFC-4180-style, header row, UTF-8) are parsed against a column
schema, rows with too many missing cells are dropped, continuous features are
min-max scaled to [0, 1] and categorical features one-hot encoded.  All
fitting statistics (mins, maxes, medians, category vocabularies) live in a
:class:`PreprocessState` so a training-time fit can be replayed on test data:
out-of-range continuous values clamp to [0, 1], unknown categories map to an
all-zeros one-hot group and bump a warning counter.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
LABEL = "label"

MISSING_CATEGORY = "<missing>"


class DataError(ValueError):
    """Fatal dataset problem (unloadable file, empty data, impossible split)."""


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str
    categories: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL, LABEL):
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.categories is not None and len(set(self.categories)) != len(self.categories):
            raise DataError(f"column {self.name!r}: duplicate categories")


def load_schema(path) -> list[ColumnSchema]:
    """Read a schema sidecar: JSON mapping column name -> {kind, categories?}."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    cols = [
        ColumnSchema(
            name=name,
            kind=entry["kind"],
            categories=tuple(entry["categories"]) if entry.get("categories") else None,
        )
        for name, entry in raw.items()
    ]
    _validate_schema(cols)
    return cols


def _validate_schema(schema) -> None:
    labels = [c for c in schema if c.kind == LABEL]
    if len(labels) != 1:
        raise DataError(f"schema must have exactly one label column, found {len(labels)}")


def schema_to_json(schema) -> dict:
    """Inverse of :func:`load_schema`'s file format."""
    out = {}
    for col in schema:
        entry = {"kind": col.kind}
        if col.categories is not None:
            entry["categories"] = list(col.categories)
        out[col.name] = entry
    return out


def schema_from_json(doc: dict) -> list:
    cols = [
        ColumnSchema(
            name=name,
            kind=entry["kind"],
            categories=tuple(entry["categories"]) if entry.get("categories") else None,
        )
        for name, entry in doc.items()
    ]
    _validate_schema(cols)
    return cols


@dataclass
class PreprocessState:
    """Fitted preprocessing statistics, replayable on new data."""

    cont_names: list[str]
    cont_min: np.ndarray
    cont_max: np.ndarray
    cont_median: np.ndarray
    cat_names: list[str]
    cat_categories: list[list[str]]
    label_name: str
    label_categories: list[str]

    @property
    def n_onehot(self) -> int:
        return sum(len(c) for c in self.cat_categories)

    def onehot_groups(self) -> list[tuple[str, list[str], slice]]:
        """Per categorical feature: (name, categories, slice into the one-hot block)."""
        groups = []
        offset = 0
        for name, cats in zip(self.cat_names, self.cat_categories):
            groups.append((name, cats, slice(offset, offset + len(cats))))
            offset += len(cats)
        return groups

    def to_json(self) -> dict:
        return {
            "cont_names": list(self.cont_names),
            "cont_min": [float(v) for v in self.cont_min],
            "cont_max": [float(v) for v in self.cont_max],
            "cont_median": [float(v) for v in self.cont_median],
            "cat_names": list(self.cat_names),
            "cat_categories": [list(c) for c in self.cat_categories],
            "label_name": self.label_name,
            "label_categories": list(self.label_categories),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PreprocessState":
        return cls(
            cont_names=list(doc["cont_names"]),
            cont_min=np.asarray(doc["cont_min"], dtype=float),
            cont_max=np.asarray(doc["cont_max"], dtype=float),
            cont_median=np.asarray(doc["cont_median"], dtype=float),
            cat_names=list(doc["cat_names"]),
            cat_categories=[list(c) for c in doc["cat_categories"]],
            label_name=doc["label_name"],
            label_categories=list(doc["label_categories"]),
        )


@dataclass
class Dataset:
    """Preprocessed samples plus the state that produced them.

    ``raw_continuous`` (NaN for missing) and ``raw_categorical`` (None for
    missing) retain the pre-scaling cell values so :func:`split` and
    :func:`fold_split` can refit statistics on the training side only.
    """

    continuous: np.ndarray  # [n, n_cont] float64 in [0, 1]
    onehot: np.ndarray  # [n, n_onehot] float64 0/1
    labels: np.ndarray  # [n] int64
    state: PreprocessState
    unknown_category_count: int = 0
    raw_continuous: np.ndarray | None = field(default=None, repr=False)
    raw_categorical: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_samples(self) -> int:
        return len(self.labels)

    @property
    def n_continuous(self) -> int:
        return self.continuous.shape[1]

    @property
    def n_onehot(self) -> int:
        return self.onehot.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.state.label_categories)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            continuous=self.continuous[idx],
            onehot=self.onehot[idx],
            labels=self.labels[idx],
            state=self.state,
            unknown_category_count=self.unknown_category_count,
            raw_continuous=None if self.raw_continuous is None else self.raw_continuous[idx],
            raw_categorical=None if self.raw_categorical is None else self.raw_categorical[idx],
        )


def from_arrays(continuous, labels, onehot=None, feature_names=None, class_names=None) -> Dataset:
    """Build a Dataset from in-memory arrays with an identity scaler.

    Continuous values are expected to already lie in [0, 1].
    """
    continuous = np.atleast_2d(np.asarray(continuous, dtype=float))
    labels = np.asarray(labels, dtype=np.int64)
    if onehot is None:
        onehot = np.zeros((len(labels), 0))
    onehot = np.asarray(onehot, dtype=float)
    n_cont = continuous.shape[1]
    names = list(feature_names) if feature_names else [f"x{i}" for i in range(n_cont)]
    n_classes = int(labels.max()) + 1 if len(labels) else 0
    classes = list(class_names) if class_names else [str(c) for c in range(n_classes)]
    onehot_names = [f"c{i}" for i in range(onehot.shape[1])]
    state = PreprocessState(
        cont_names=names,
        cont_min=np.zeros(n_cont),
        cont_max=np.ones(n_cont),
        cont_median=np.full(n_cont, 0.5),
        cat_names=onehot_names,
        cat_categories=[["1"] for _ in onehot_names],
        label_name="label",
        label_categories=classes,
    )
    return Dataset(
        continuous=continuous,
        onehot=onehot,
        labels=labels,
        state=state,
        raw_continuous=continuous.copy(),
        raw_categorical=np.empty((len(labels), 0), dtype=object),
    )


def _parse_rows(path, schema):
    """Parse the CSV into per-column raw cells; missing -> NaN/None."""
    by_name = {c.name: c for c in schema}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing_cols = [c.name for c in schema if c.name not in header]
        if missing_cols:
            raise DataError(f"{path}: header lacks schema columns {missing_cols}")
        col_idx = {name: header.index(name) for name in by_name}
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: line {lineno} has {len(row)} fields, header has {len(header)}"
                )
            rows.append(row)
    cont_cols = [c for c in schema if c.kind == CONTINUOUS]
    cat_cols = [c for c in schema if c.kind == CATEGORICAL]
    label_col = next(c for c in schema if c.kind == LABEL)

    n = len(rows)
    raw_cont = np.full((n, len(cont_cols)), np.nan)
    raw_cat = np.empty((n, len(cat_cols)), dtype=object)
    raw_label = np.empty(n, dtype=object)
    for r, row in enumerate(rows):
        for j, col in enumerate(cont_cols):
            cell = row[col_idx[col.name]].strip()
            if cell:
                try:
                    raw_cont[r, j] = float(cell)
                except ValueError:
                    pass  # unparseable numeric counts as missing
        for j, col in enumerate(cat_cols):
            cell = row[col_idx[col.name]].strip()
            raw_cat[r, j] = cell if cell else None
        cell = row[col_idx[label_col.name]].strip()
        raw_label[r] = cell if cell else None
    return cont_cols, cat_cols, label_col, raw_cont, raw_cat, raw_label


def _fit_state(cont_cols, cat_cols, label_col, raw_cont, raw_cat, raw_label) -> PreprocessState:
    n_cont = len(cont_cols)
    cont_min = np.zeros(n_cont)
    cont_max = np.ones(n_cont)
    cont_median = np.full(n_cont, 0.0)
    for j in range(n_cont):
        col = raw_cont[:, j]
        finite = col[~np.isnan(col)]
        if finite.size:
            cont_min[j] = finite.min()
            cont_max[j] = finite.max()
            cont_median[j] = float(np.median(finite))
    cat_categories = []
    for j, col in enumerate(cat_cols):
        if col.categories is not None:
            cats = list(col.categories)
        else:
            seen = {c for c in raw_cat[:, j] if c is not None}
            cats = sorted(seen)
        if any(c is None for c in raw_cat[:, j]) and MISSING_CATEGORY not in cats:
            cats.append(MISSING_CATEGORY)
        cat_categories.append(cats)
    if label_col.categories is not None:
        label_categories = list(label_col.categories)
    else:
        label_categories = sorted({c for c in raw_label if c is not None})
    return PreprocessState(
        cont_names=[c.name for c in cont_cols],
        cont_min=cont_min,
        cont_max=cont_max,
        cont_median=cont_median,
        cat_names=[c.name for c in cat_cols],
        cat_categories=cat_categories,
        label_name=label_col.name,
        label_categories=label_categories,
    )


def _transform(state, raw_cont, raw_cat, raw_label, clamp: bool):
    n = len(raw_label)
    cont = raw_cont.copy()
    for j in range(cont.shape[1]):
        col = cont[:, j]
        col[np.isnan(col)] = state.cont_median[j]
        span = state.cont_max[j] - state.cont_min[j]
        col = (col - state.cont_min[j]) / span if span > 0 else np.zeros_like(col)
        cont[:, j] = np.clip(col, 0.0, 1.0) if clamp else col

    unknown = 0
    onehot = np.zeros((n, state.n_onehot))
    for (name, cats, sl), j in zip(state.onehot_groups(), range(len(state.cat_names))):
        index = {c: i for i, c in enumerate(cats)}
        for r in range(n):
            cell = raw_cat[r, j]
            if cell is None:
                cell = MISSING_CATEGORY
            i = index.get(cell)
            if i is None:
                unknown += 1
            else:
                onehot[r, sl.start + i] = 1.0

    label_index = {c: i for i, c in enumerate(state.label_categories)}
    labels = np.empty(n, dtype=np.int64)
    for r in range(n):
        cell = raw_label[r]
        if cell not in label_index:
            raise DataError(f"unknown label value {cell!r} (known: {state.label_categories})")
        labels[r] = label_index[cell]
    return cont, onehot, labels, unknown


def load_csv(path, schema, max_missing_fraction: float = 0.5, state: PreprocessState | None = None) -> Dataset:
    """Load, filter, impute, scale and encode a CSV per the schema.

    Rows whose fraction of missing schema cells exceeds ``max_missing_fraction``
    are dropped, as are rows with a missing label.  With ``state`` given, the
    fitted statistics are replayed instead of re-fit (test-time loading):
    continuous values clamp to [0, 1] and unknown categories become all-zero
    groups counted in ``unknown_category_count``.
    """
    _validate_schema(schema)
    cont_cols, cat_cols, label_col, raw_cont, raw_cat, raw_label = _parse_rows(path, schema)

    n_feat = len(cont_cols) + len(cat_cols) + 1
    keep = []
    for r in range(len(raw_label)):
        n_missing = int(np.isnan(raw_cont[r]).sum()) + sum(c is None for c in raw_cat[r])
        if raw_label[r] is None:
            continue
        if n_missing / n_feat > max_missing_fraction:
            continue
        keep.append(r)
    if not keep:
        raise DataError(f"{path}: no rows left after missing-value filtering")
    keep = np.asarray(keep)
    raw_cont, raw_cat, raw_label = raw_cont[keep], raw_cat[keep], raw_label[keep]

    fitted = state if state is not None else _fit_state(
        cont_cols, cat_cols, label_col, raw_cont, raw_cat, raw_label
    )
    cont, onehot, labels, unknown = _transform(
        fitted, raw_cont, raw_cat, raw_label, clamp=state is not None
    )
    return Dataset(
        continuous=cont,
        onehot=onehot,
        labels=labels,
        state=fitted,
        unknown_category_count=unknown,
        raw_continuous=raw_cont,
        raw_categorical=raw_cat,
    )


def _refit_from_raw(dataset: Dataset, train_idx, other_idx):
    """Refit state on the training rows and transform both sides.

    Array-built datasets carry no raw categorical cells; their one-hot block
    is passed through unchanged and only the continuous statistics refit.
    """
    if dataset.raw_continuous is None:
        raise DataError("dataset lacks raw cell values; cannot refit a split")
    st = dataset.state
    raw_cat = dataset.raw_categorical
    passthrough_onehot = raw_cat is None or raw_cat.shape[1] != len(st.cat_names)
    cont_cols = [ColumnSchema(n, CONTINUOUS) for n in st.cont_names]
    cat_cols = [] if passthrough_onehot else [ColumnSchema(n, CATEGORICAL) for n in st.cat_names]
    label_col = ColumnSchema(st.label_name, LABEL, tuple(st.label_categories))
    raw_label = np.asarray([st.label_categories[i] for i in dataset.labels], dtype=object)
    empty_cat = np.empty((dataset.n_samples, 0), dtype=object)
    cat_cells = empty_cat if passthrough_onehot else raw_cat

    tr_state = _fit_state(
        cont_cols,
        cat_cols,
        label_col,
        dataset.raw_continuous[train_idx],
        cat_cells[train_idx],
        raw_label[train_idx],
    )
    out_state = tr_state
    if passthrough_onehot:
        out_state = replace(
            tr_state,
            cat_names=list(st.cat_names),
            cat_categories=[list(c) for c in st.cat_categories],
        )
    parts = []
    for idx, clamp in ((train_idx, False), (other_idx, True)):
        cont, onehot, labels, unknown = _transform(
            tr_state,
            dataset.raw_continuous[idx],
            cat_cells[idx],
            raw_label[idx],
            clamp=clamp,
        )
        if passthrough_onehot:
            onehot = dataset.onehot[idx]
        parts.append(
            Dataset(
                continuous=cont,
                onehot=onehot,
                labels=labels,
                state=out_state,
                unknown_category_count=unknown,
                raw_continuous=dataset.raw_continuous[idx],
                raw_categorical=None if raw_cat is None else raw_cat[idx],
            )
        )
    return parts[0], parts[1]


def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified train/test split; scaler and vocabularies refit on train only."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    n = dataset.n_samples
    total_test = int(round(n * test_fraction))

    classes = np.unique(dataset.labels)
    per_class = [np.flatnonzero(dataset.labels == c) for c in classes]
    quotas = np.array([test_fraction * len(ix) for ix in per_class])
    alloc = np.floor(quotas).astype(int)
    remainder = total_test - alloc.sum()
    if remainder > 0:
        order = np.argsort(-(quotas - alloc), kind="stable")
        for i in order[:remainder]:
            alloc[i] += 1

    test_parts, train_parts = [], []
    for c, ix, k in zip(classes, per_class, alloc):
        k = min(int(k), len(ix))
        if len(ix) - k <= 0:
            name = dataset.state.label_categories[int(c)]
            raise DataError(f"class {name!r} would have no training samples in this split")
        shuffled = rng.permutation(ix)
        test_parts.append(shuffled[:k])
        train_parts.append(shuffled[k:])
    train_idx = np.sort(np.concatenate(train_parts))
    test_idx = np.sort(np.concatenate(test_parts))
    return _refit_from_raw(dataset, train_idx, test_idx)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: np.ndarray  # [n] fold index per sample

    def fold_indices(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train_idx, test_idx) for the given held-out fold."""
        test = np.flatnonzero(self.assignments == fold)
        train = np.flatnonzero(self.assignments != fold)
        return train, test


def make_folds(labels, k: int, seed: int) -> FoldPlan:
    """Label-stratified k folds: per-class fold counts differ by at most 1."""
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise DataError(f"number of folds must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    assignments = np.full(len(labels), -1, dtype=np.int64)
    for c in np.unique(labels):
        ix = np.flatnonzero(labels == c)
        if len(ix) < k:
            raise DataError(f"class {int(c)} has {len(ix)} samples, fewer than {k} folds")
        shuffled = rng.permutation(ix)
        assignments[shuffled] = np.arange(len(ix)) % k
    return FoldPlan(k=k, assignments=assignments)


def fold_split(dataset: Dataset, plan: FoldPlan, fold: int) -> tuple[Dataset, Dataset]:
    """Materialize one cross-validation fold with statistics refit on its train side."""
    train_idx, test_idx = plan.fold_indices(fold)
    return _refit_from_raw(dataset, train_idx, test_idx)


def balanced_accuracy(predictions, truth, n_classes: int | None = None) -> float:
    """Mean per-class recall.

    Classes absent from ``truth`` are excluded from the mean; if ``n_classes``
    says such classes exist, a warning is emitted.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if predictions.shape != truth.shape:
        raise ValueError("predictions and truth must have equal length")
    present = np.unique(truth)
    if n_classes is not None and len(present) < n_classes:
        absent = sorted(set(range(n_classes)) - set(present.tolist()))
        warnings.warn(f"classes {absent} absent from truth; excluded from balanced accuracy")
    recalls = [
        float(np.mean(predictions[truth == c] == c)) for c in present
    ]
    return float(np.mean(recalls))
