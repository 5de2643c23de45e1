"""Dataset containers, CSV ingestion, feature construction, splits and generators."""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DataError, SchemaError, VocabularyError

ROLES = ("numeric", "categorical", "target", "timestamp", "ignore")
MISSING_TOKENS = {"", "na", "nan", "null", "none"}


@dataclass
class TabularDataset:
    """Fixed-width rows: numeric block, integer-coded categoricals and a target.

    Categorical column ``j`` uses codes ``0..len(vocabularies[j])-1`` for known
    values and ``len(vocabularies[j])`` for values unseen when the vocabulary
    was built, so embedding/one-hot widths are ``vocab_sizes[j] = K + 1``.
    """

    numeric: np.ndarray
    categorical: np.ndarray
    vocabularies: List[List[str]]
    target: np.ndarray
    numeric_names: List[str] = field(default_factory=list)
    categorical_names: List[str] = field(default_factory=list)
    target_name: str = "target"
    task: str = "regression"
    timestamps: Optional[np.ndarray] = None
    anchors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.numeric = np.asarray(self.numeric, dtype=np.float64).reshape(len(self.target), -1)
        self.categorical = np.asarray(self.categorical, dtype=np.int64).reshape(len(self.target), -1)
        n = len(self.target)
        for name, arr in (("numeric", self.numeric), ("categorical", self.categorical)):
            if len(arr) != n:
                raise DataError(f"{name} block has {len(arr)} rows, target has {n}")
        if self.timestamps is not None and len(self.timestamps) != n:
            raise DataError("timestamp column length differs from target length")
        for j, vocab in enumerate(self.vocabularies):
            col = self.categorical[:, j]
            if col.size and (col.min() < 0 or col.max() > len(vocab)):
                raise VocabularyError(f"codes of column {j} fall outside its vocabulary")

    def __len__(self):
        return len(self.target)

    @property
    def vocab_sizes(self) -> List[int]:
        return [len(v) + 1 for v in self.vocabularies]

    def take(self, idx) -> "TabularDataset":
        idx = np.asarray(idx)
        return replace(self, numeric=self.numeric[idx], categorical=self.categorical[idx],
                       target=self.target[idx],
                       timestamps=None if self.timestamps is None else self.timestamps[idx],
                       anchors=None if self.anchors is None else self.anchors[idx])

    def decoded(self, j: int) -> List[str]:
        vocab = self.vocabularies[j]
        return [vocab[c] if c < len(vocab) else "<unknown>" for c in self.categorical[:, j]]

    def one_hot_features(self) -> np.ndarray:
        """Numeric block followed by the one-hot expansion of every categorical column."""
        blocks = [self.numeric]
        for j, k in enumerate(self.vocab_sizes):
            blocks.append(one_hot_matrix(self.categorical[:, j], k))
        return np.hstack(blocks)


@dataclass
class SequenceDataset:
    """Windows of per-step features with a target per window."""

    sequences: np.ndarray  # (n, steps, features)
    target: np.ndarray
    anchors: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.sequences.ndim != 3:
            raise DataError(f"sequences must be (n, steps, features), got {self.sequences.shape}")
        if self.sequences.shape[1] < 1:
            raise DataError("sequences need at least one step")
        if len(self.sequences) != len(self.target):
            raise DataError("one target per sequence required")

    def __len__(self):
        return len(self.target)

    def take(self, idx) -> "SequenceDataset":
        return SequenceDataset(self.sequences[idx], self.target[idx],
                               None if self.anchors is None else self.anchors[idx])


# -- schema and CSV ---------------------------------------------------------------

@dataclass
class Schema:
    """Column roles in file order; ``task`` qualifies the target column."""

    roles: Dict[str, str]
    task: str = "regression"

    @classmethod
    def parse(cls, text: str) -> "Schema":
        roles: Dict[str, str] = {}
        task = "regression"
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise SchemaError(f"schema line {lineno}: expected 'column: role', got {raw!r}")
            name, spec = (part.strip() for part in line.split(":", 1))
            words = spec.split()
            if not words or words[0] not in ROLES:
                raise SchemaError(f"schema line {lineno}: unknown role {spec!r} for column {name!r}")
            if words[0] == "target" and len(words) > 1:
                if words[1] not in ("regression", "classification"):
                    raise SchemaError(f"schema line {lineno}: unknown task {words[1]!r}")
                task = words[1]
            roles[name] = words[0]
        if sum(r == "target" for r in roles.values()) != 1:
            raise SchemaError("schema must declare exactly one target column")
        return cls(roles, task)

    @classmethod
    def read(cls, path) -> "Schema":
        return cls.parse(Path(path).read_text())

    def columns(self, role: str) -> List[str]:
        return [c for c, r in self.roles.items() if r == role]

    def to_text(self) -> str:
        lines = []
        for col, role in self.roles.items():
            lines.append(f"{col}: {role} {self.task}" if role == "target" else f"{col}: {role}")
        return "\n".join(lines) + "\n"


def _parse_float(cell: str, row: int, col: str) -> float:
    if cell.strip().lower() in MISSING_TOKENS:
        return math.nan
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {cell!r} as a number") from None


def load_csv(path, schema, vocabularies: Optional[Sequence[Sequence[str]]] = None) -> TabularDataset:
    """Read an RFC-4180 CSV file according to ``schema``.

    Vocabularies are inferred (sorted distinct values) unless given, in which
    case unseen values map to the reserved unknown code.
    """
    if not isinstance(schema, Schema):
        schema = Schema.read(schema)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        rows = list(reader)
    missing = [c for c in schema.roles if c not in header]
    if missing:
        target = schema.columns("target")[0]
        if target in missing:
            raise SchemaError(f"target column {target!r} not found in {path}")
        raise SchemaError(f"schema column {missing[0]!r} not found in {path}")
    pos = {c: header.index(c) for c in schema.roles}
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"row {i}: expected {len(header)} fields, found {len(row)}")
    num_cols = schema.columns("numeric")
    cat_cols = schema.columns("categorical")
    target_col = schema.columns("target")[0]
    numeric = np.array([[_parse_float(r[pos[c]], i, c) for c in num_cols] for i, r in enumerate(rows, start=2)],
                       dtype=np.float64).reshape(len(rows), len(num_cols))
    raw_target = [r[pos[target_col]] for r in rows]
    target = np.array([_parse_float(v, i, target_col) for i, v in enumerate(raw_target, start=2)])
    if np.isnan(target).any():
        bad = int(np.flatnonzero(np.isnan(target))[0]) + 2
        raise DataError(f"row {bad}: target value missing")
    if schema.task == "classification":
        target = target.astype(np.int64)
    vocabs = []
    codes = np.zeros((len(rows), len(cat_cols)), dtype=np.int64)
    for j, c in enumerate(cat_cols):
        values = [r[pos[c]] for r in rows]
        vocab = sorted(set(values)) if vocabularies is None else list(vocabularies[j])
        lookup = {v: k for k, v in enumerate(vocab)}
        codes[:, j] = [lookup.get(v, len(vocab)) for v in values]
        vocabs.append(vocab)
    ts_cols = schema.columns("timestamp")
    timestamps = np.array([r[pos[ts_cols[0]]] for r in rows]) if ts_cols else None
    return TabularDataset(numeric, codes, vocabs, target, num_cols, cat_cols, target_col,
                          schema.task, timestamps)


def dataset_schema(ds: TabularDataset) -> Schema:
    roles = {}
    if ds.timestamps is not None:
        roles["timestamp"] = "timestamp"
    roles.update({c: "numeric" for c in ds.numeric_names})
    roles.update({c: "categorical" for c in ds.categorical_names})
    roles[ds.target_name] = "target"
    return Schema(roles, ds.task)


def write_csv(ds: TabularDataset, path, schema_path=None):
    """Write ``ds`` as CSV (floats in round-trip repr); optionally its schema too."""
    if ds.target.ndim != 1:
        raise DataError("only single-target datasets can be written as CSV")
    header = []
    if ds.timestamps is not None:
        header.append("timestamp")
    header += list(ds.numeric_names) + list(ds.categorical_names) + [ds.target_name]
    decoded = [ds.decoded(j) for j in range(len(ds.categorical_names))]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(ds)):
            row = [] if ds.timestamps is None else [str(ds.timestamps[i])]
            row += ["" if math.isnan(v) else repr(float(v)) for v in ds.numeric[i]]
            row += [col[i] for col in decoded]
            t = ds.target[i]
            row.append(str(int(t)) if ds.task == "classification" else repr(float(t)))
            writer.writerow(row)
    if schema_path is not None:
        Path(schema_path).write_text(dataset_schema(ds).to_text())


# -- encodings ---------------------------------------------------------------------

def one_hot(code: int, k: int) -> np.ndarray:
    if not 0 <= code < k:
        raise VocabularyError(f"code {code} outside [0, {k})")
    out = np.zeros(k)
    out[code] = 1.0
    return out


def one_hot_matrix(codes, k: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= k):
        raise VocabularyError(f"codes outside [0, {k})")
    return np.eye(k)[codes]


def build_lags(series, n_lags: int, horizon: int = 1, covariates=None,
               target_name: str = "y") -> TabularDataset:
    """Supervised rows from a series: lags y[t-1..t-n] (+ covariates[t]) -> y[t..t+h-1].

    Rows are in chronological order; ``anchors`` holds each row's t.
    """
    y = np.asarray(series, dtype=np.float64)
    if n_lags < 1 or horizon < 1:
        raise ContractError("n_lags and horizon must be positive")
    if len(y) <= n_lags + horizon - 1:
        raise DataError(f"series of length {len(y)} too short for {n_lags} lags and horizon {horizon}")
    anchors = np.arange(n_lags, len(y) - horizon + 1)
    lags = np.stack([y[anchors - j] for j in range(1, n_lags + 1)], axis=1)
    names = [f"lag{j}" for j in range(1, n_lags + 1)]
    if covariates is not None:
        cov = np.asarray(covariates, dtype=np.float64).reshape(len(y), -1)
        lags = np.hstack([lags, cov[anchors]])
        names += [f"cov{j}" for j in range(cov.shape[1])]
    target = np.stack([y[anchors + h] for h in range(horizon)], axis=1)
    if horizon == 1:
        target = target[:, 0]
    return TabularDataset(lags, np.zeros((len(anchors), 0)), [], target, names, [], target_name,
                          "regression", anchors=anchors)


def build_windows(step_features, target, window: int, horizon: int, anchors) -> SequenceDataset:
    """Sequences step_features[a-window:a] with targets target[a:a+horizon] per anchor a."""
    feats = np.asarray(step_features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    y = np.asarray(target, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.int64)
    if anchors.size and (anchors.min() < window or anchors.max() + horizon > len(y)):
        raise DataError("anchor leaves too little history or future")
    offsets = np.arange(-window, 0)
    seqs = feats[anchors[:, None] + offsets[None, :]]
    targ = y[anchors[:, None] + np.arange(horizon)[None, :]]
    return SequenceDataset(seqs, targ if horizon > 1 else targ[:, 0], anchors)


# -- splits ------------------------------------------------------------------------

SPLIT_POLICIES = ("random", "chronological", "kfold")


@dataclass
class SplitSpec:
    policy: str = "random"
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    k: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.policy not in SPLIT_POLICIES:
            raise ContractError(f"unknown split policy {self.policy!r}")
        if self.val_fraction < 0 or self.test_fraction < 0 or self.val_fraction + self.test_fraction >= 1:
            raise ContractError("validation and test fractions must be non-negative and sum below 1")


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def split(n_or_ds, spec: SplitSpec, labels=None, order=None):
    """Index split of a dataset (or of ``n`` rows).

    ``random`` shuffles with the seed; ``chronological`` keeps time order
    (``order`` or the dataset's timestamps, else row order) and puts
    validation then test at the end; ``kfold`` returns ``spec.k`` disjoint
    folds, stratified by ``labels`` when given.
    """
    if isinstance(n_or_ds, (TabularDataset, SequenceDataset)):
        n = len(n_or_ds)
        if order is None and getattr(n_or_ds, "timestamps", None) is not None:
            order = np.argsort(n_or_ds.timestamps, kind="stable")
        if labels is None and getattr(n_or_ds, "task", None) == "classification":
            labels = n_or_ds.target
    else:
        n = int(n_or_ds)
    if n < 1:
        raise DataError("cannot split an empty dataset")
    if spec.policy == "kfold":
        return kfold(n, spec.k, spec.seed, labels)
    n_test = int(round(spec.test_fraction * n))
    n_val = int(round(spec.val_fraction * n))
    if (spec.test_fraction > 0 and n_test == 0) or (spec.val_fraction > 0 and n_val == 0) \
            or n_test + n_val >= n:
        raise DataError(f"fractions {spec.val_fraction}/{spec.test_fraction} infeasible for {n} rows")
    if spec.policy == "random":
        perm = np.random.default_rng(spec.seed).permutation(n)
    else:
        perm = np.arange(n) if order is None else np.asarray(order)
    n_train = n - n_val - n_test
    return Split(np.sort(perm[:n_train]) if spec.policy == "random" else perm[:n_train],
                 perm[n_train:n_train + n_val], perm[n_train + n_val:])


def kfold(n: int, k: int, seed: int = 0, labels=None) -> List[np.ndarray]:
    """``k`` disjoint folds covering ``range(n)``; sizes differ by at most one."""
    if k < 2 or k > n:
        raise DataError(f"cannot make {k} folds from {n} rows")
    rng = np.random.default_rng(seed)
    if labels is None:
        ordered = rng.permutation(n)
    else:
        labels = np.asarray(labels)
        ordered = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)])
    assignment = np.empty(n, dtype=np.int64)
    assignment[ordered] = np.arange(n) % k
    return [np.flatnonzero(assignment == f) for f in range(k)]


def chronological_subset(idx, fraction: float) -> np.ndarray:
    """Leading ``fraction`` of an ordered index array."""
    return np.asarray(idx)[:max(1, int(round(fraction * len(idx))))]


# -- standardization ------------------------------------------------------------------

@dataclass
class Standardizer:
    """Training-split statistics for imputation and scaling of numeric columns."""

    mean: np.ndarray
    std: np.ndarray
    median: np.ndarray
    indicator: np.ndarray  # columns that get a missingness indicator

    @classmethod
    def fit(cls, numeric) -> "Standardizer":
        numeric = np.asarray(numeric, dtype=np.float64)
        p = numeric.shape[1]
        missing = np.isnan(numeric)
        median = np.zeros(p)
        for j in range(p):
            ok = ~missing[:, j]
            median[j] = np.median(numeric[ok, j]) if ok.any() else 0.0
        filled = np.where(missing, median, numeric)
        return cls(filled.mean(axis=0), np.maximum(filled.std(axis=0), 1e-12), median, missing.any(axis=0))

    def transform(self, numeric) -> np.ndarray:
        numeric = np.asarray(numeric, dtype=np.float64)
        missing = np.isnan(numeric)
        filled = np.where(missing, self.median, numeric)
        out = (filled - self.mean) / self.std
        if self.indicator.any():
            out = np.hstack([out, missing[:, self.indicator].astype(np.float64)])
        return out

    @property
    def n_outputs(self) -> int:
        return len(self.mean) + int(self.indicator.sum())


def standardize(stats: Standardizer, ds: TabularDataset) -> TabularDataset:
    """Apply training statistics to ``ds``; categorical columns are untouched."""
    names = list(ds.numeric_names) + [f"{ds.numeric_names[j]}_missing" if j < len(ds.numeric_names)
                                      else f"col{j}_missing" for j in np.flatnonzero(stats.indicator)]
    return replace(ds, numeric=stats.transform(ds.numeric), numeric_names=names)


# -- synthetic generators ------------------------------------------------------------------

STRUCTURE_SEED = 20180405
INSURANCE_POSITIVE_RATE = 0.036
INSURANCE_VOCAB = (4, 5, 6, 3, 8, 12)


def _insurance_structure():
    rng = np.random.default_rng(STRUCTURE_SEED)

    def centered_table(a, b, scale):
        t = rng.normal(0.0, scale, size=(a, b))
        t -= t.mean(axis=0, keepdims=True)
        t -= t.mean(axis=1, keepdims=True)
        return t

    return {
        "pair01": centered_table(INSURANCE_VOCAB[0], INSURANCE_VOCAB[1], 1.3),
        "pair23": centered_table(INSURANCE_VOCAB[2], INSURANCE_VOCAB[3], 1.3),
        "main4": rng.normal(0.0, 0.3, size=INSURANCE_VOCAB[4]),
        "main5": rng.normal(0.0, 0.2, size=INSURANCE_VOCAB[5]),
    }


def _insurance_logit(numeric, codes, s):
    x = numeric
    return (0.25 * x[:, 0] - 0.2 * x[:, 1]
            + s["pair01"][codes[:, 0], codes[:, 1]]
            + s["pair23"][codes[:, 2], codes[:, 3]]
            + s["main4"][codes[:, 4]] + s["main5"][codes[:, 5]]
            + 1.0 * (x[:, 2] > 1.0) - 0.8 * (np.abs(x[:, 3]) < 0.5)
            + 0.7 * x[:, 4] * x[:, 5]
            + 0.6 * np.cos(2.0 * x[:, 6]))


def _insurance_draw(n, rng):
    numeric = rng.normal(size=(n, 10))
    codes = np.stack([rng.integers(0, k, size=n) for k in INSURANCE_VOCAB], axis=1)
    return numeric, codes


@functools.lru_cache(maxsize=None)
def _insurance_intercept() -> float:
    s = _insurance_structure()
    numeric, codes = _insurance_draw(400_000, np.random.default_rng(STRUCTURE_SEED + 1))
    logit = _insurance_logit(numeric, codes, s)
    lo, hi = -15.0, 5.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if expit(logit + mid).mean() < INSURANCE_POSITIVE_RATE:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def insurance_probability(numeric, codes) -> np.ndarray:
    """Ground-truth claim probability of the insurance generator."""
    return expit(_insurance_logit(numeric, codes, _insurance_structure()) + _insurance_intercept())


def synth_insurance(n: int, seed: int = 0) -> TabularDataset:
    """Imbalanced claim data (about 3.6% positives) with interaction-driven risk.

    Ten numeric and six categorical covariates; the true logit mixes two
    categorical-pair interaction tables, threshold effects and a numeric
    product, so additive models recover only part of the signal.  About 2%
    of ``num9`` (an irrelevant column) is missing.
    """
    if n < 100:
        raise ContractError("synthetic datasets need n >= 100")
    rng = np.random.default_rng(seed)
    numeric, codes = _insurance_draw(n, rng)
    y = (rng.random(n) < insurance_probability(numeric, codes)).astype(np.int64)
    numeric = numeric.copy()
    numeric[rng.random(n) < 0.02, 9] = np.nan
    vocabs = [[f"c{j}_{v:02d}" for v in range(k)] for j, k in enumerate(INSURANCE_VOCAB)]
    return TabularDataset(numeric, codes, vocabs, y, [f"num{j}" for j in range(10)],
                          [f"cat{j}" for j in range(len(INSURANCE_VOCAB))], "claim", "classification")


def _hour_profile():
    hours = np.arange(24)
    weekday = (0.15 + 1.0 * np.exp(-0.5 * ((hours - 10.0) / 1.6) ** 2)
               + 0.8 * np.exp(-0.5 * ((hours - 14.5) / 1.8) ** 2))
    weekend = 0.12 + 0.25 * np.exp(-0.5 * ((hours - 12.0) / 3.0) ** 2)
    return weekday, weekend


TICKETS_START = np.datetime64("2017-01-02T00")  # a Monday
TICKETS_BASE_RATE, TICKETS_LEVEL_AR, TICKETS_LEVEL_SHOCK = 150.0, 0.97, 0.1


def synth_tickets(n_hours: int, seed: int = 0) -> TabularDataset:
    """Hourly helpdesk ticket counts.

    Counts are Poisson around (daily load level) x (hour-of-day profile, which
    differs between weekdays and weekends).  The daily level follows a
    persistent log-AR(1) process, so recent history carries information that
    calendar variables alone do not.  The profile is fixed across seeds.
    """
    if n_hours < 100:
        raise ContractError("synthetic datasets need n >= 100")
    rng = np.random.default_rng(seed)
    times = TICKETS_START + np.arange(n_hours).astype("timedelta64[h]")
    hour = np.arange(n_hours) % 24
    day = np.arange(n_hours) // 24
    dow = day % 7
    n_days = int(day.max()) + 1
    log_level = np.zeros(n_days)
    shocks = rng.normal(0.0, TICKETS_LEVEL_SHOCK, size=n_days)
    for d in range(1, n_days):
        log_level[d] = TICKETS_LEVEL_AR * log_level[d - 1] + shocks[d]
    weekday, weekend = _hour_profile()
    profile = np.where(dow < 5, weekday[hour], weekend[hour])
    rate = TICKETS_BASE_RATE * np.exp(log_level[day]) * profile
    counts = rng.poisson(rate).astype(np.float64)
    month = times.astype("datetime64[M]").astype(int) % 12
    codes = np.stack([hour, dow, month], axis=1)
    vocabs = [[f"{h:02d}" for h in range(24)], [str(d) for d in range(7)], [f"{m + 1:02d}" for m in range(12)]]
    return TabularDataset(np.zeros((n_hours, 0)), codes, vocabs, counts, [], ["hour", "dow", "month"],
                          "tickets", "regression", np.array([str(t) for t in times]))


SALES_START = np.datetime64("2014-01-06")  # a Monday


def _sales_structure(stores: int):
    rng = np.random.default_rng(STRUCTURE_SEED + 7)
    holidays = set(rng.choice(np.arange(3, 730), size=20, replace=False).tolist())
    school = np.zeros(730, dtype=bool)
    for start in rng.choice(np.arange(0, 700), size=8, replace=False):
        school[start:start + 14] = True
    return holidays, school


def synth_sales(n_days: int, stores: int = 50, seed: int = 0) -> TabularDataset:
    """Daily store sales, rows ordered by date then store.

    Sales = store level x weekday pattern (by store type) x promotion bump x
    holiday dip x slowly drifting store-specific demand x noise; most stores
    close on Sundays and public holidays.
    """
    if n_days * stores < 100:
        raise ContractError("synthetic datasets need n >= 100")
    rng = np.random.default_rng(seed)
    holidays, school_days = _sales_structure(stores)
    store_type = rng.integers(0, 4, size=stores)
    assortment = rng.integers(0, 3, size=stores)
    distance = np.round(np.exp(rng.normal(7.5, 1.0, size=stores)), 0)
    level = np.exp(rng.normal(0.0, 0.5, size=stores)) * (1.0 + 0.15 * assortment)
    promo_gain = 0.15 + 0.35 * rng.random(stores) * (1.0 + (distance < 1500))
    dow_pattern = np.array([
        [1.25, 1.05, 1.0, 0.95, 1.1, 0.9, 0.0],
        [1.0, 1.0, 1.0, 1.0, 1.05, 1.2, 0.9],
        [1.4, 1.1, 0.95, 0.9, 1.0, 0.75, 0.0],
        [1.1, 1.0, 1.0, 1.0, 1.15, 1.3, 0.0],
    ])
    days = np.arange(n_days)
    dow = days % 7
    holiday = np.array([(d % 730) in holidays for d in days])
    school = school_days[days % 730]
    # promotions run in alternating weeks (Mon-Fri), phase per store
    phase = rng.integers(0, 2, size=stores)
    drift = np.zeros((n_days, stores))
    eps = rng.normal(0.0, 0.08, size=(n_days, stores))
    for d in range(1, n_days):
        drift[d] = 0.95 * drift[d - 1] + eps[d]
    rows_store = np.tile(np.arange(stores), n_days)
    rows_day = np.repeat(days, stores)
    r_dow = dow[rows_day]
    promo = (((rows_day // 7 + phase[rows_store]) % 2 == 0) & (r_dow < 5)).astype(np.float64)
    r_hol = holiday[rows_day]
    r_school = school[rows_day]
    pattern = dow_pattern[store_type[rows_store], r_dow]
    open_ = (pattern > 0) & ~(r_hol & (store_type[rows_store] != 1))
    noise = np.exp(rng.normal(0.0, 0.06, size=len(rows_day)))
    sales = (level[rows_store] * pattern * (1.0 + promo_gain[rows_store] * promo)
             * np.where(r_school, 1.08, 1.0) * np.exp(drift[rows_day, rows_store]) * noise * 5000.0)
    sales = np.where(open_, np.round(sales), 0.0)
    dates = SALES_START + rows_day.astype("timedelta64[D]")
    week = (rows_day // 7) % 52
    numeric = np.stack([distance[rows_store], week, promo, r_hol.astype(float), r_school.astype(float)], axis=1)
    codes = np.stack([rows_store, r_dow, store_type[rows_store], assortment[rows_store]], axis=1)
    vocabs = [[f"s{s:03d}" for s in range(stores)], [str(d) for d in range(7)],
              ["a", "b", "c", "d"], ["a", "b", "c"]]
    return TabularDataset(numeric, codes, vocabs, sales,
                          ["competition_distance", "week_of_year", "promo", "state_holiday", "school_holiday"],
                          ["store", "day_of_week", "store_type", "assortment"], "sales", "regression",
                          np.array([str(d) for d in dates]))
