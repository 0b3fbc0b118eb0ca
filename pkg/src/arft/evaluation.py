"""PD/PF/Bal evaluation and filter feature-selection baselines."""

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from . import autograd as ag
from . import model as M
from .errors import ConfigError, ContractError, UndefinedMetricError
from .losses import FocalConfig, focal_loss, true_class_probability
from .train import TrainState, TrainingLog, lr_schedule, sgd_step


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fn + self.fp + self.tn


def confusion(pred, truth):
    """Confusion counts with ARB-prone (1) as the positive class."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ContractError(f"prediction/truth length mismatch: {pred.shape} vs {truth.shape}")
    for name, arr in (("pred", pred), ("truth", truth)):
        if not np.all((arr == 0) | (arr == 1)):
            raise ContractError(f"{name} labels must be 0/1")
    return ConfusionMatrix(
        tp=int(np.sum((pred == 1) & (truth == 1))),
        fn=int(np.sum((pred == 0) & (truth == 1))),
        fp=int(np.sum((pred == 1) & (truth == 0))),
        tn=int(np.sum((pred == 0) & (truth == 0))),
    )


def balance(pd, pf):
    return 1.0 - math.sqrt(pf * pf + (1.0 - pd) ** 2) / math.sqrt(2.0)


def pd_pf_bal(cm):
    if cm.tp + cm.fn == 0:
        raise UndefinedMetricError("PD undefined: evaluation set has no ARB-prone samples")
    if cm.fp + cm.tn == 0:
        raise UndefinedMetricError("PF undefined: evaluation set has no ARB-free samples")
    pd = cm.tp / (cm.tp + cm.fn)
    pf = cm.fp / (cm.fp + cm.tn)
    return pd, pf, balance(pd, pf)


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    pd: float
    pf: float
    bal: float
    experiment_id: str = ""
    config_fingerprint: str = ""
    seed: int = None

    @classmethod
    def from_predictions(cls, pred, truth, **meta):
        cm = confusion(pred, truth)
        pd, pf, bal = pd_pf_bal(cm)
        return cls(cm, pd, pf, bal, **meta)

    def as_row(self):
        row = {"experiment": self.experiment_id, "seed": self.seed}
        row.update(asdict(self.confusion))
        row.update(pd=self.pd, pf=self.pf, bal=self.bal, config=self.config_fingerprint)
        return row


def format_group_table(columns, rows, digits=3, title=None):
    """Aligned text table: one column per experiment group plus ``Avg.``.

    ``rows`` maps a row label to a list of values in ``columns`` order; a
    value may be a float, a preformatted string, or None (printed as ``--``).
    """
    header = ["Group"] + list(columns) + ["Avg."]
    body = []
    for label, values in rows.items():
        nums = [v for v in values if isinstance(v, (int, float)) and v is not None]
        avg = sum(nums) / len(nums) if nums and len(nums) == len(values) else None
        cells = [label]
        for v in list(values) + [avg]:
            if v is None:
                cells.append("--")
            elif isinstance(v, str):
                cells.append(v)
            else:
                cells.append(f"{v:.{digits}f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
    lines = ([title] if title else []) + [fmt(header), "-" * len(fmt(header))] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# entropy-based scorers
# ---------------------------------------------------------------------------

@dataclass
class FeatureScore:
    method: str
    scores: np.ndarray
    selected: tuple = ()


def equal_frequency_bins(x, bins=10):
    """Bin index per value; edges are empirical quantiles so ties share a bin.

    Bin k holds the values above edge k-1 and at most edge k. Depends only
    on the ranks of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    qs = np.arange(1, bins) / bins
    edges = np.unique(np.quantile(x, qs, method="inverted_cdf")) if x.size else np.empty(0)
    return np.searchsorted(edges, x, side="left")


def _entropy(counts):
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def _binned_entropies(xb, y):
    """(H(Y), H(X), H(Y|X)) in nats."""
    n_x = int(xb.max()) + 1
    joint = np.zeros((n_x, 2))
    np.add.at(joint, (xb, y), 1.0)
    hy = _entropy(joint.sum(axis=0))
    hx = _entropy(joint.sum(axis=1))
    n = joint.sum()
    hy_x = sum(row.sum() / n * _entropy(row) for row in joint if row.sum() > 0)
    return hy, hx, hy_x


def _check_labeled(features, labels, bins):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ContractError("features must be N x p with N labels")
    if features.shape[0] < bins:
        raise ContractError(f"need at least {bins} rows for {bins} bins")
    return features, labels


def _entropy_scores(features, labels, bins, combine):
    features, labels = _check_labeled(features, labels, bins)
    scores = np.zeros(features.shape[1])
    for j in range(features.shape[1]):
        col = features[:, j]
        if np.all(col == col[0]):
            continue
        hy, hx, hy_x = _binned_entropies(equal_frequency_bins(col, bins), labels)
        scores[j] = combine(hy - hy_x, hx, hy)
    return scores


def info_gain(features, labels, bins=10):
    """H(Y) - H(Y | binned X) per feature, natural log."""
    s = _entropy_scores(features, labels, bins, lambda ig, hx, hy: ig)
    return FeatureScore("info_gain", s)


def gain_ratio(features, labels, bins=10):
    s = _entropy_scores(features, labels, bins, lambda ig, hx, hy: ig / hx if hx > 0 else 0.0)
    return FeatureScore("gain_ratio", s)


def symmetric_uncertainty(features, labels, bins=10):
    s = _entropy_scores(features, labels, bins,
                        lambda ig, hx, hy: 2.0 * ig / (hx + hy) if hx + hy > 0 else 0.0)
    return FeatureScore("symmetric_uncertainty", s)


def relieff(features, labels, k_neighbors=10, sample_count=None, rng=None):
    """ReliefF weights with range-scaled Manhattan distances.

    Every sample is a probe unless ``sample_count`` is given (then ``rng``
    draws the probes). Misses from each other class are weighted by that
    class's prior over the priors of all non-probe classes.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, p = features.shape
    counts = np.bincount(labels, minlength=2)
    if np.any(counts == 0):
        raise ContractError("relieff needs samples from both classes")
    k_hit = np.minimum(k_neighbors, counts - 1)
    k_miss = np.minimum(k_neighbors, counts)
    if np.any(counts - 1 < k_neighbors):
        warnings.warn(f"class sizes {counts.tolist()} below k_neighbors+1={k_neighbors + 1}; "
                      f"k reduced to {k_hit.tolist()} hits", stacklevel=2)
    span = features.max(axis=0) - features.min(axis=0)
    scaled = np.divide(features, span, out=np.zeros_like(features), where=span > 0)
    if sample_count is None or sample_count >= n:
        probes = np.arange(n)
    else:
        if rng is None:
            raise ConfigError("sample_count below N requires an rng")
        probes = np.sort(rng.choice(n, size=sample_count, replace=False))
    priors = counts / n
    w = _kernels.relieff_weights(scaled, labels, probes, k_hit, k_miss, priors)
    return FeatureScore("relieff", w)


SCORERS = {
    "info_gain": info_gain,
    "gain_ratio": gain_ratio,
    "relieff": relieff,
    "symmetric_uncertainty": symmetric_uncertainty,
}


def select_top_k(score, k):
    """Indices of the k best scores, ties broken toward the lower index."""
    scores = np.asarray(score.scores if isinstance(score, FeatureScore) else score, dtype=np.float64)
    if not 1 <= k <= scores.size:
        raise ConfigError(f"k must lie in [1, {scores.size}], got {k}")
    order = np.lexsort((np.arange(scores.size), -scores))
    chosen = tuple(sorted(int(i) for i in order[:k]))
    if isinstance(score, FeatureScore):
        score.selected = chosen
    return list(chosen)


# ---------------------------------------------------------------------------
# linear classifier trained with focal loss
# ---------------------------------------------------------------------------

def fit_linear_focal(x, y, train_cfg, focal_cfg=None):
    """Affine map to two logits trained with focal loss and the SGD regime of ``fit``.

    Returns ``(params, TrainingLog)``.
    """
    focal_cfg = focal_cfg or FocalConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(train_cfg.seed)
    d = x.shape[1]
    bound = math.sqrt(6.0 / max(d, 1))
    params = {"lin.W": ag.parameter(rng.uniform(-bound, bound, (d, 2)), "lin.W"),
              "lin.b": ag.parameter(np.zeros(2), "lin.b")}
    state = TrainState.fresh(params, rng)
    log = TrainingLog()
    for epoch in range(train_cfg.epochs):
        lr = lr_schedule(epoch, train_cfg)
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], train_cfg.batch_source):
            idx = order[start:start + train_cfg.batch_source]
            with ag.Tape() as tape:
                logits = ag.matmul(x[idx], params["lin.W"]) + params["lin.b"]
                loss = focal_loss(true_class_probability(logits, y[idx]), focal_cfg)
            tape.backward(loss)
            log.append(step=state.step, epoch=epoch, lr=lr, **{"lambda": 0.0},
                       focal=loss.item(), mmd=0.0, total=loss.item())
            sgd_step(state, {k: p.grad for k, p in params.items()}, lr, train_cfg)
    return params, log


def linear_logits(params, x):
    return np.asarray(x, dtype=np.float64) @ params["lin.W"].data + params["lin.b"].data


def linear_focal_classifier(train_x, train_y, test_x, train_cfg, focal_cfg=None, threshold=0.5):
    """Train the linear focal classifier and return test-set labels."""
    params, _ = fit_linear_focal(train_x, train_y, train_cfg, focal_cfg)
    return M.predict(linear_logits(params, test_x), threshold)
