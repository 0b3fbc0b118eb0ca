"""SGD-with-momentum training on labeled source and unlabeled target batches."""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import model as M
from .errors import ConfigError, ContractError, SchemaError, TrainingError
from .losses import FocalConfig, LossSchedule, MMDConfig, composite_loss, true_class_probability


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_source: int = 64
    batch_target: int = 64
    lr0: float = 1e-3
    lr_decay_per_epoch: float = 0.98
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    dropout_enabled: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_source < 1 or self.batch_target < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be > 0")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ConfigError("lr_decay_per_epoch must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass
class TrainState:
    params: dict
    velocity: dict
    epoch: int = 0
    step: int = 0
    rng: np.random.Generator = None

    @classmethod
    def fresh(cls, params, rng=None):
        return cls(params, {k: np.zeros_like(v.data) for k, v in params.items()}, rng=rng)


LOG_FIELDS = ("step", "epoch", "lr", "lambda", "focal", "mmd", "total")


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def epoch_means(self, name="focal"):
        epochs = self.column("epoch")
        values = self.column(name)
        return np.array([values[epochs == e].mean() for e in np.unique(epochs)])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in self.rows:
            w.writerow([r["step"], r["epoch"]] + [repr(float(r[k])) for k in LOG_FIELDS[2:]])
        return buf.getvalue()

    def __eq__(self, other):
        return isinstance(other, TrainingLog) and self.rows == other.rows


def lr_schedule(epoch, cfg):
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay_per_epoch ** epoch


def sgd_step(state, grads, lr, cfg):
    """v <- mu*v + (g + wd*theta); theta <- theta - lr*v. Updates ``state`` in place."""
    for name, param in state.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name!r} at step {state.step}")
        v = state.velocity[name]
        v *= cfg.momentum
        v += g
        if cfg.weight_decay:
            v += cfg.weight_decay * param.data
        param.data -= lr * v
    state.step += 1
    return state


def _batches(rng, n, batch):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def step_loss(params, xs, ys, xt, model_cfg, progress, focal_cfg, mmd_cfg, schedule,
              training=False, rng=None):
    """Composite loss of one step: ``(total, focal, mmd, lambda)``.

    Source and target rows share one forward pass. With ``xt`` None the
    domain term is skipped and evaluated on the source alone (lambda_max 0).
    """
    x = xs if xt is None else np.vstack([xs, xt])
    z = M.encode(x, params, model_cfg, training, rng, cls_only=mmd_cfg.repr_choice == "cls")
    logits = M._head(z[:, 0, :], params, model_cfg)
    ns = xs.shape[0]
    p_true = true_class_probability(logits[:ns], ys)
    rep = M.representation(z, mmd_cfg.repr_choice)
    return composite_loss(p_true, rep[:ns], rep[ns:] if xt is not None else rep[:ns], progress,
                          focal_cfg, mmd_cfg, schedule)


def fit(source, target, model_cfg, train_cfg, focal_cfg=None, mmd_cfg=None, schedule=None,
        callback=None):
    """Train from scratch and return ``(params, TrainingLog)``.

    ``source`` must be labeled (normalized, oversampled upstream); ``target``
    must be unlabeled. Each step forwards a source batch and a target batch
    through the same parameters and minimizes focal + lambda * MMD, with
    lambda ramped by the fraction of completed optimizer steps.
    """
    focal_cfg = focal_cfg or FocalConfig()
    mmd_cfg = mmd_cfg or MMDConfig()
    schedule = schedule or LossSchedule()
    if source.labels is None:
        raise ContractError("source dataset must be labeled")
    if target.labels is not None:
        raise ContractError("target labels must not be passed to fit; call target.without_labels()")
    if source.metric_names != target.metric_names:
        raise SchemaError("source and target metric schemas differ")
    if model_cfg.p != source.p:
        raise ConfigError(f"model expects p={model_cfg.p}, data has p={source.p}")

    rng = np.random.default_rng(train_cfg.seed)
    params = M.init_params(model_cfg, rng)
    state = TrainState.fresh(params, rng)
    log = TrainingLog()

    xs_all, ys_all = source.features, source.labels
    xt_all = target.features
    n_s, n_t = xs_all.shape[0], xt_all.shape[0]
    steps_per_epoch = math.ceil(n_s / train_cfg.batch_source)
    total_steps = train_cfg.epochs * steps_per_epoch
    training = train_cfg.dropout_enabled
    align = schedule.lambda_max > 0

    for epoch in range(train_cfg.epochs):
        state.epoch = epoch
        lr = lr_schedule(epoch, train_cfg)
        for idx in _batches(rng, n_s, train_cfg.batch_source):
            progress = state.step / total_steps
            xs, ys = xs_all[idx], ys_all[idx]
            tidx = rng.choice(n_t, size=train_cfg.batch_target, replace=n_t < train_cfg.batch_target)
            with ag.Tape() as tape:
                total, focal, mmd, lam = step_loss(params, xs, ys, xt_all[tidx] if align else None,
                                                   model_cfg, progress, focal_cfg, mmd_cfg, schedule,
                                                   training, rng)
            if not np.isfinite(total.item()):
                raise TrainingError(f"non-finite loss at step {state.step} (epoch {epoch}): "
                                    f"focal={focal.item()} mmd={mmd.item()}")
            for p in params.values():
                p.grad = None
            tape.backward(total)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            log.append(step=state.step, epoch=epoch, lr=lr, **{"lambda": lam},
                       focal=focal.item(), mmd=mmd.item(), total=total.item())
            sgd_step(state, grads, lr, train_cfg)
        if callback is not None:
            callback(epoch, state, log)
    for p in params.values():
        p.grad = None
    return params, log


def predict_dataset(params, model_cfg, dataset, threshold=0.5, batch=512):
    """Inference-mode labels for every row of ``dataset``."""
    logits = logits_dataset(params, model_cfg, dataset, batch)
    return M.predict(logits, threshold)


def logits_dataset(params, model_cfg, dataset, batch=512):
    x = dataset.features
    out = [M.forward(x[i:i + batch], params, model_cfg, training=False)[0].data
           for i in range(0, x.shape[0], batch)]
    return np.vstack(out) if out else np.empty((0, 2))
