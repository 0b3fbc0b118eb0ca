"""Dataset ingestion, joint normalization, oversampling and correlation analysis."""

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import _kernels
from .errors import ConfigError, ContractError, ParseError, SchemaError, UndefinedMetricError

# Static code metrics consumed by the pipeline, grouped by family.
METRIC_FAMILIES = {
    "program_size": [
        "AltAvgLineBlank", "AltAvgLineCode", "AltAvgLineComment", "AltCountLineBlank",
        "AltCountLineCode", "AltCountLineComment", "AvgLine", "AvgLineBlank", "AvgLineCode",
        "AvgLineComment", "CountDeclClass", "CountDeclFunction", "CountLine", "CountLineBlank",
        "CountLineCode", "CountLineCodeDecl", "CountLineCodeExe", "CountLineComment",
        "CountLineInactive", "CountLinePreprocessor", "CountSemicolon", "CountStmt",
        "CountStmtDecl", "CountStmtEmpty", "CountStmtExe", "RatioCommentToCode",
    ],
    "mccabe": [
        "AvgCyclomatic", "AvgCyclomaticModified", "AvgCyclomaticStrict", "AvgEssential",
        "MaxCyclomatic", "MaxCyclomaticModified", "MaxCyclomaticStrict", "SumCyclomatic",
        "SumCyclomaticModified", "SumCyclomaticStrict", "SumEssential",
    ],
    "halstead": [
        "ProgramVolume", "ProgramLength", "ProgramVocabulary", "ProgramDifficulty", "Effort",
        "N1", "N2", "n1", "n2",
    ],
    "aging_related": [
        "AllocOps", "DeallocOps", "DerefSet", "DerefUse", "UniqueDerefSet", "UniqueDerefUse",
    ],
}
METRIC_NAMES = [name for names in METRIC_FAMILIES.values() for name in names]

DEFAULT_LABEL_COLUMN = "label"


@dataclass(frozen=True)
class Dataset:
    """A tabular metric matrix for one project (or a concatenation of projects).

    ``labels`` is None for an unlabeled target project. Arrays are made
    read-only on construction.
    """

    project_id: str
    metric_names: tuple
    features: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        names = tuple(self.metric_names)
        feats = np.array(self.features, dtype=np.float64, copy=True)
        if feats.ndim != 2:
            raise SchemaError(f"features must be 2-D, got shape {feats.shape}")
        if feats.shape[1] != len(names):
            raise SchemaError(f"{feats.shape[1]} feature columns but {len(names)} metric names")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate metric names: {dupes}")
        if not np.all(np.isfinite(feats)):
            raise SchemaError("features contain non-finite values")
        feats.setflags(write=False)
        object.__setattr__(self, "metric_names", names)
        object.__setattr__(self, "features", feats)
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64, copy=True)
            if labels.shape != (feats.shape[0],):
                raise SchemaError(f"{labels.shape[0]} labels for {feats.shape[0]} rows")
            if not np.all((labels == 0) | (labels == 1)):
                raise SchemaError("labels must be 0 (ARB-free) or 1 (ARB-prone)")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def p(self):
        return self.features.shape[1]

    @property
    def positives(self):
        return int(self.labels.sum()) if self.labels is not None else None

    def without_labels(self):
        return Dataset(self.project_id, self.metric_names, self.features, None)

    def with_features(self, features):
        return Dataset(self.project_id, self.metric_names, features, self.labels)


def _check_same_schema(a, b):
    if a.metric_names != b.metric_names:
        missing = set(a.metric_names) ^ set(b.metric_names)
        detail = f"differing names {sorted(missing)}" if missing else "same names, different order"
        raise SchemaError(f"metric schema mismatch between {a.project_id!r} and {b.project_id!r}: {detail}")


def validate_schema(dataset, expected_names):
    """Raise SchemaError unless the dataset's metric columns equal ``expected_names``."""
    expected = tuple(expected_names)
    if dataset.metric_names != expected:
        missing = [n for n in expected if n not in dataset.metric_names]
        extra = [n for n in dataset.metric_names if n not in expected]
        raise SchemaError(f"{dataset.project_id}: missing={missing} unexpected={extra}")


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def load_csv(path, label_column=None, project_id=None, metric_columns=None):
    """Read a metric table.

    Every column except ``label_column`` is a metric unless
    ``metric_columns`` names the subset (and order) to keep; other columns
    are then ignored. Cells must parse as floats, labels as 0/1.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row expected") from None
        if len(set(header)) != len(header):
            dupes = sorted({h for h in header if header.count(h) > 1})
            raise SchemaError(f"{path}: duplicate header names {dupes}")
        if label_column is not None and label_column not in header:
            raise SchemaError(f"{path}: label column {label_column!r} not in header")
        if metric_columns is None:
            names = [h for h in header if h != label_column]
        else:
            names = list(metric_columns)
            absent = [n for n in names if n not in header]
            if absent:
                raise SchemaError(f"{path}: missing metric columns {absent}")
        col_idx = [header.index(n) for n in names]
        label_idx = header.index(label_column) if label_column is not None else None

        rows, labels = [], []
        for lineno, record in enumerate(reader, start=2):
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                raise ParseError(f"{path}: row {lineno} has {len(record)} cells, header has {len(header)}")
            row = []
            for j in col_idx:
                cell = record[j].strip()
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(f"{path}: row {lineno}, column {header[j]!r}: cannot parse {cell!r}") from None
                if not math.isfinite(value):
                    raise ParseError(f"{path}: row {lineno}, column {header[j]!r}: non-finite value {cell!r}")
                row.append(value)
            rows.append(row)
            if label_idx is not None:
                cell = record[label_idx].strip()
                if cell not in ("0", "1", "0.0", "1.0"):
                    raise ParseError(f"{path}: row {lineno}, column {label_column!r}: label {cell!r} is not 0/1")
                labels.append(int(float(cell)))

    features = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    pid = project_id or _stem(path)
    return Dataset(pid, tuple(names), features, np.array(labels, dtype=np.int64) if label_idx is not None else None)


def _stem(path):
    return os.path.splitext(os.path.basename(str(path)))[0]


def write_csv(dataset, path, label_column=DEFAULT_LABEL_COLUMN, include_labels=True):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(dataset_to_csv(dataset, label_column, include_labels))


def dataset_to_csv(dataset, label_column=DEFAULT_LABEL_COLUMN, include_labels=True):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    with_labels = include_labels and dataset.labels is not None
    writer.writerow(list(dataset.metric_names) + ([label_column] if with_labels else []))
    for i in range(dataset.n):
        # repr() round-trips float64 exactly
        row = [repr(float(v)) for v in dataset.features[i]]
        if with_labels:
            row.append(str(int(dataset.labels[i])))
        writer.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    eps: float = 1e-8


def global_normalize(source, target, eps=1e-8):
    """Z-score both domains with statistics of their row-wise concatenation.

    Population standard deviation (divisor N_s + N_t) is used.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    _check_same_schema(source, target)
    both = np.vstack([source.features, target.features])
    mu = both.mean(axis=0)
    sigma = both.std(axis=0)
    denom = sigma + eps
    stats = NormalizationStats(mu, sigma, eps)
    return (
        source.with_features((source.features - mu) / denom),
        target.with_features((target.features - mu) / denom),
        stats,
    )


def random_oversample(dataset, rng):
    """Duplicate random minority rows until both classes have equal counts.

    All original rows are kept; the result is shuffled with ``rng``.
    """
    if dataset.labels is None:
        raise ContractError("random_oversample needs a labeled dataset")
    y = dataset.labels
    counts = np.bincount(y, minlength=2)
    if counts.min() == 0:
        raise ContractError(f"{dataset.project_id}: single-class dataset, nothing to balance")
    minority = int(np.argmin(counts))
    pool = np.flatnonzero(y == minority)
    extra = rng.choice(pool, size=int(counts.max() - counts.min()), replace=True)
    idx = np.concatenate([np.arange(dataset.n), extra])
    idx = idx[rng.permutation(idx.size)]
    return Dataset(dataset.project_id, dataset.metric_names, dataset.features[idx], y[idx])


def concat_projects(datasets):
    datasets = list(datasets)
    if not datasets:
        raise ContractError("concat_projects needs at least one dataset")
    if len(datasets) == 1:
        return datasets[0]
    first = datasets[0]
    for d in datasets:
        if d.labels is None:
            raise ContractError(f"source project {d.project_id!r} is unlabeled")
        _check_same_schema(first, d)
    return Dataset(
        "+".join(d.project_id for d in datasets),
        first.metric_names,
        np.vstack([d.features for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
    )


# ---------------------------------------------------------------------------
# Spearman correlation
# ---------------------------------------------------------------------------

def _t_two_sided_p(rho, n):
    if abs(rho) >= 1.0:
        return 0.0
    df = n - 2
    t2 = rho * rho * df / (1.0 - rho * rho)
    # P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2)
    return float(special.betainc(df / 2.0, 0.5, df / (df + t2)))


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if denom == 0.0:
        raise UndefinedMetricError("zero rank variance: correlation undefined")
    return max(-1.0, min(1.0, float(np.dot(a, b)) / denom))


def spearman_rho(x, y):
    """Spearman's rho (midranks for ties) and its two-sided t-approximation p-value."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise UndefinedMetricError(f"need equal-length vectors, got {x.shape} and {y.shape}")
    n = x.shape[0]
    if n < 3:
        raise UndefinedMetricError(f"need n >= 3, got {n}")
    rho = _pearson(_kernels.midranks(x), _kernels.midranks(y))
    return rho, _t_two_sided_p(rho, n)


@dataclass(frozen=True)
class PairRecord:
    metric_i: str
    metric_j: str
    rho: float
    p_value: float
    significant: bool
    undefined: bool = False


@dataclass
class CorrelationReport:
    project_id: str
    n_samples: int
    p: int
    total_pairs: int
    correlated_pairs: int
    rho_abs_min: float
    alpha: float
    pairs: list = field(default_factory=list)

    @property
    def undefined_pairs(self):
        return [r for r in self.pairs if r.undefined]

    @property
    def correlated_fraction(self):
        return self.correlated_pairs / self.total_pairs if self.total_pairs else 0.0

    def summary_line(self):
        return (f"p={self.p}, pairs={self.total_pairs}, significant={self.correlated_pairs} "
                f"({100 * self.correlated_fraction:.2f}%), undefined={len(self.undefined_pairs)}")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric_i", "metric_j", "rho", "p_value", "significant", "undefined"])
        for r in self.pairs:
            w.writerow([r.metric_i, r.metric_j,
                        "" if r.undefined else f"{r.rho:.12g}",
                        "" if r.undefined else f"{r.p_value:.6g}",
                        int(r.significant), int(r.undefined)])
        return buf.getvalue()

    def to_text(self):
        lines = [
            f"{'Project':<20}{'Total Pairs':>14}{'Correlated':>14}{'Correlated %':>15}",
            f"{self.project_id:<20}{self.total_pairs:>14}{self.correlated_pairs:>14}"
            f"{100 * self.correlated_fraction:>14.2f}%",
            f"(|rho| > {self.rho_abs_min}, p < {self.alpha}; n = {self.n_samples})",
        ]
        if self.undefined_pairs:
            lines.append(f"undefined pairs (constant column): {len(self.undefined_pairs)}")
        return "\n".join(lines) + "\n"


def correlation_report(dataset, rho_abs_min=0.3, alpha=0.05):
    """Spearman test over every unordered metric pair of ``dataset``."""
    n, p = dataset.features.shape
    if n < 3:
        raise ContractError(f"correlation_report needs at least 3 rows, got {n}")
    ranks = np.column_stack([_kernels.midranks(dataset.features[:, j]) for j in range(p)]) if p else np.empty((n, 0))
    centered = ranks - ranks.mean(axis=0)
    norms = np.sqrt((centered * centered).sum(axis=0))
    names = dataset.metric_names
    records = []
    correlated = 0
    for i in range(p):
        for j in range(i + 1, p):
            if norms[i] == 0.0 or norms[j] == 0.0:
                records.append(PairRecord(names[i], names[j], float("nan"), float("nan"), False, True))
                continue
            rho = float(np.dot(centered[:, i], centered[:, j]) / (norms[i] * norms[j]))
            rho = max(-1.0, min(1.0, rho))
            pval = _t_two_sided_p(rho, n)
            sig = abs(rho) > rho_abs_min and pval < alpha
            correlated += sig
            records.append(PairRecord(names[i], names[j], rho, pval, sig))
    return CorrelationReport(dataset.project_id, n, p, p * (p - 1) // 2, correlated,
                             rho_abs_min, alpha, records)


# ---------------------------------------------------------------------------
# synthetic covariate-shift data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_source: int = 2000
    n_target: int = 800
    p: int = 20
    positive_rate: float = 0.05
    shift_strength: float = 0.5
    seed: int = 0
    # Mahalanobis distance between the two class means
    separation: float = 4.0


def default_metric_names(p):
    return list(METRIC_NAMES) if p == len(METRIC_NAMES) else [f"m{j:02d}" for j in range(p)]


def synth_generate(config):
    """Draw a labeled source and a covariate-shifted target project.

    Both classes are Gaussian with a shared random SPD covariance; the
    positive class mean sits ``separation`` Mahalanobis units away from the
    negative one. Target rows come from the same class-conditional model
    (same positive rate) and are then pushed through the affine map
    ``x -> (I + s*G) x + s*b`` with ``s = shift_strength``.

    Returns ``(source, target)``; the target keeps its labels so callers can
    write a separate truth file.
    """
    c = config
    if not 0.0 < c.positive_rate < 0.5:
        raise ConfigError(f"positive_rate must lie in (0, 0.5), got {c.positive_rate}")
    if c.p < 2:
        raise ConfigError(f"p must be >= 2, got {c.p}")
    if c.n_source < 2 or c.n_target < 2:
        raise ConfigError("n_source and n_target must be >= 2")
    if c.shift_strength < 0 or c.separation <= 0:
        raise ConfigError("shift_strength must be >= 0 and separation > 0")

    rng = np.random.default_rng(c.seed)
    p = c.p
    q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    eig = rng.uniform(0.2, 2.0, size=p)
    cov = (q * eig) @ q.T
    chol = np.linalg.cholesky(cov)
    direction = rng.standard_normal(p)
    # scale so that the Mahalanobis distance between class means is `separation`
    white = np.linalg.solve(chol, direction)
    delta = direction * (c.separation / np.linalg.norm(white))
    offset = rng.normal(0.0, 1.0, size=p)
    gmix = rng.standard_normal((p, p)) / np.sqrt(p)
    bshift = rng.standard_normal(p)

    def draw(n, gen):
        y = (gen.random(n) < c.positive_rate).astype(np.int64)
        z = gen.standard_normal((n, p)) @ chol.T
        return offset + z + np.outer(y, delta), y

    xs, ys = draw(c.n_source, rng)
    xt, yt = draw(c.n_target, rng)
    s = c.shift_strength
    if s > 0:
        xt = xt @ (np.eye(p) + s * gmix).T + s * bshift
    names = default_metric_names(p)
    return Dataset("source", names, xs, ys), Dataset("target", names, xt, yt)
