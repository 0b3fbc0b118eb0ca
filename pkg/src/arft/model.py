"""Feature-tokenizer transformer for tabular metrics.

Each of the p metrics (plus a constant-1 [CLS] column in slot 0) is mapped
to its own token by a per-feature affine map. Tokens pass through stacked
pre-norm transformer layers and the final [CLS] token feeds a
LayerNorm + Linear two-class head.

Parameters live in a flat ``dict[str, Tensor]`` with these keys::

    tok.W, tok.b                       (p+1, d_token)
    l{i}.attn_ln.g / .b                (d_token,)     absent for layer 0
    l{i}.attn.Wq / Wk / Wv / Wo        (d_token, d_token); head m owns
                                       columns [m*d_k, (m+1)*d_k) of Wq/Wk/Wv
    l{i}.ffn_ln.g / .b                 (d_token,)
    l{i}.ffn.W1 (d_token, 2h), .b1 (2h,), .W2 (h, d_token), .b2 (d_token,)
    head_ln.g / .b                     (d_token,)
    head.W (d_token, 2), head.b (2,)
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    p: int
    d_token: int = 32
    n_heads: int = 8
    n_layers: int = 3
    ffn_hidden_factor: float = 4.0 / 3.0
    dropout_rate: float = 0.1
    head_classes: int = 2
    ln_eps: float = 1e-5
    attention: bool = True

    def __post_init__(self):
        if self.p < 1:
            raise ConfigError(f"p must be >= 1, got {self.p}")
        if self.n_heads < 1 or self.d_token % self.n_heads:
            raise ConfigError(f"d_token={self.d_token} is not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.head_classes != 2:
            raise ConfigError("only the two-class head is supported")

    @property
    def d_head(self):
        return self.d_token // self.n_heads

    @property
    def ffn_hidden(self):
        return max(1, int(round(self.d_token * self.ffn_hidden_factor)))


def _kaiming(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config, rng):
    """Kaiming-uniform (fan-in) weights, zero biases, unit LayerNorm gains.

    With ``config.attention`` False the attention sub-blocks are omitted,
    which is the feed-forward-only ablation model.
    """
    d, h = config.d_token, config.ffn_hidden
    params = {}

    def add(name, data):
        params[name] = ag.parameter(data, name=name)

    # tokenizer rows are treated as a (p+1) x d_token weight with fan-in d_token
    add("tok.W", _kaiming(rng, (config.p + 1, d), d))
    add("tok.b", np.zeros((config.p + 1, d)))
    for i in range(config.n_layers):
        if config.attention:
            if i > 0:
                add(f"l{i}.attn_ln.g", np.ones(d))
                add(f"l{i}.attn_ln.b", np.zeros(d))
            for w in ("Wq", "Wk", "Wv", "Wo"):
                add(f"l{i}.attn.{w}", _kaiming(rng, (d, d), d))
        add(f"l{i}.ffn_ln.g", np.ones(d))
        add(f"l{i}.ffn_ln.b", np.zeros(d))
        add(f"l{i}.ffn.W1", _kaiming(rng, (d, 2 * h), d))
        add(f"l{i}.ffn.b1", np.zeros(2 * h))
        add(f"l{i}.ffn.W2", _kaiming(rng, (h, d), h))
        add(f"l{i}.ffn.b2", np.zeros(d))
    add("head_ln.g", np.ones(d))
    add("head_ln.b", np.zeros(d))
    add("head.W", _kaiming(rng, (d, 2), d))
    add("head.b", np.zeros(2))
    return params


def tokenize(x, params):
    """(N, p) metrics -> (N, p+1, d_token) tokens; slot 0 is the [CLS] token."""
    x = np.asarray(x, dtype=np.float64)
    W, b = params["tok.W"], params["tok.b"]
    if x.ndim != 2 or x.shape[1] + 1 != W.shape[0]:
        raise ShapeError(f"input has shape {x.shape}, tokenizer expects {W.shape[0] - 1} features")
    xa = np.concatenate([np.ones((x.shape[0], 1)), x], axis=1)[:, :, None]
    return ag.add(ag.mul(xa, W), b)


def attention_weights(x, params, layer, config):
    """Per-head attention probabilities, shape (N, heads, p+1, p+1)."""
    q, k, _ = _qkv(x, params, layer, config)
    scores = ag.matmul(q, ag.transpose(k)) * (1.0 / math.sqrt(config.d_head))
    return ag.softmax(scores, axis=-1)


def _qkv(x, params, layer, config, cls_only=False):
    n, t, d = x.shape
    pre = f"l{layer}."
    if layer > 0:
        x = ag.layer_norm(x, params[pre + "attn_ln.g"], params[pre + "attn_ln.b"], config.ln_eps)

    def split(src, w):
        proj = ag.matmul(src, params[pre + "attn." + w])
        return ag.transpose(proj.reshape(n, src.shape[1], config.n_heads, config.d_head), (0, 2, 1, 3))

    queries = x[:, :1, :] if cls_only else x
    return split(queries, "Wq"), split(x, "Wk"), split(x, "Wv")


def attention_layer(x, params, layer, config, training=False, rng=None, cls_only=False):
    """x + Dropout(MultiHead(LN(x)) W_O); layer 0 skips the LayerNorm.

    With ``cls_only`` only the [CLS] query is evaluated and the result has
    a single token; keys and values still span every token.
    """
    n, t, d = x.shape
    q, k, v = _qkv(x, params, layer, config, cls_only)
    scores = ag.matmul(q, ag.transpose(k)) * (1.0 / math.sqrt(config.d_head))
    heads = ag.matmul(ag.softmax(scores, axis=-1), v)
    tq = 1 if cls_only else t
    merged = ag.transpose(heads, (0, 2, 1, 3)).reshape(n, tq, d)
    out = ag.matmul(merged, params[f"l{layer}.attn.Wo"])
    residual = x[:, :1, :] if cls_only else x
    return residual + ag.dropout(out, config.dropout_rate, training, rng)


def ffn_block(x, params, layer, config, training=False, rng=None):
    pre = f"l{layer}."
    h = ag.layer_norm(x, params[pre + "ffn_ln.g"], params[pre + "ffn_ln.b"], config.ln_eps)
    h = ag.matmul(h, params[pre + "ffn.W1"]) + params[pre + "ffn.b1"]
    h = ag.matmul(ag.reglu(h), params[pre + "ffn.W2"]) + params[pre + "ffn.b2"]
    return x + ag.dropout(h, config.dropout_rate, training, rng)


def _head(cls, params, config):
    z = ag.layer_norm(cls, params["head_ln.g"], params["head_ln.b"], config.ln_eps)
    return ag.matmul(z, params["head.W"]) + params["head.b"]


def encode(x, params, config, training=False, rng=None, attention=None, cls_only=False):
    """Token states after the last layer, shape (N, p+1, d_token).

    ``cls_only`` restricts the last layer to the [CLS] position, giving
    shape (N, 1, d_token) with identical [CLS] values at lower cost.
    """
    use_attention = config.attention if attention is None else attention
    if training and config.dropout_rate > 0 and rng is None:
        raise ConfigError("training with dropout needs an rng")
    z = tokenize(x, params)
    if cls_only and not use_attention:
        # without attention no token ever reads another, so drop them up front
        z = z[:, :1, :]
    last = config.n_layers - 1
    for i in range(config.n_layers):
        if use_attention:
            z = attention_layer(z, params, i, config, training, rng, cls_only=cls_only and i == last)
        z = ffn_block(z, params, i, config, training, rng)
    return z


def forward(x, params, config, training=False, rng=None):
    """Return ``(logits (N, 2), cls_repr (N, d_token))``.

    ``cls_repr`` is the final-layer [CLS] state before the head LayerNorm.
    """
    z = encode(x, params, config, training, rng, cls_only=True)
    cls = z[:, 0, :]
    return _head(cls, params, config), cls


def baseline_forward(x, params, config, training=False, rng=None):
    """Same pipeline with every attention sub-block removed."""
    z = encode(x, params, config, training, rng, attention=False, cls_only=True)
    cls = z[:, 0, :]
    return _head(cls, params, config), cls


def representation(z, choice="cls"):
    """Pick the vectors aligned by the domain loss from token states ``z``."""
    if choice == "cls":
        return z[:, 0, :]
    if choice == "mean-tokens":
        return z.mean(axis=1)
    if choice == "all-tokens":
        n, t, d = z.shape
        return z.reshape(n, t * d)
    raise ConfigError(f"unknown representation choice {choice!r}")


def class_probabilities(logits):
    logits = np.asarray(logits.data if isinstance(logits, ag.Tensor) else logits, dtype=np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(logits, threshold=0.5):
    """Label 1 iff P(class 1) > threshold; an exact tie yields 0."""
    return (class_probabilities(logits)[:, 1] > threshold).astype(np.int64)


def count_parameters(params):
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# checkpoints: one .npz holding the config JSON plus every parameter array
# ---------------------------------------------------------------------------

def save_checkpoint(path, params, config):
    arrays = {f"param:{name}": t.data for name, t in params.items()}
    arrays["__config__"] = np.frombuffer(json.dumps(asdict(config), sort_keys=True).encode(), dtype=np.uint8)
    arrays["__order__"] = np.frombuffer(json.dumps(list(params)).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        config = ModelConfig(**json.loads(z["__config__"].tobytes().decode()))
        order = json.loads(z["__order__"].tobytes().decode())
        params = {name: ag.parameter(z[f"param:{name}"], name=name) for name in order}
    return params, config
