import numpy as np
import pytest

from arft import autograd as ag
from arft import model as M
from arft.errors import ConfigError, ShapeError


@pytest.fixture
def small():
    cfg = M.ModelConfig(p=7, d_token=16, n_heads=4, n_layers=3)
    return cfg, M.init_params(cfg, np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ConfigError, match="divisible"):
        M.ModelConfig(p=3, d_token=32, n_heads=5)
    with pytest.raises(ConfigError):
        M.ModelConfig(p=3, dropout_rate=1.0)
    assert M.ModelConfig(p=3).ffn_hidden == 43
    assert M.ModelConfig(p=3).d_head == 4


def test_parameter_layout(small):
    cfg, params = small
    assert "l0.attn_ln.g" not in params and "l1.attn_ln.g" in params
    assert params["tok.W"].shape == (8, 16)
    assert params["l2.ffn.W1"].shape == (16, 2 * cfg.ffn_hidden)
    assert params["l2.ffn.W2"].shape == (cfg.ffn_hidden, 16)
    no_attn = M.init_params(M.ModelConfig(p=7, d_token=16, n_heads=4, attention=False), np.random.default_rng(0))
    assert not any(".attn" in k for k in no_attn)


def test_init_bounds(small):
    cfg, params = small
    assert np.abs(params["l0.attn.Wq"].data).max() <= np.sqrt(6 / 16)
    assert np.all(params["tok.b"].data == 0.0)
    assert np.all(params["head_ln.g"].data == 1.0)


def test_forward_shapes(small):
    cfg, params = small
    x = np.random.default_rng(1).normal(size=(5, 7))
    logits, cls = M.forward(x, params, cfg)
    assert logits.shape == (5, 2) and cls.shape == (5, 16)
    with pytest.raises(ShapeError):
        M.forward(np.ones((5, 6)), params, cfg)


def test_cls_only_matches_full_encode(small):
    cfg, params = small
    x = np.random.default_rng(2).normal(size=(6, 7))
    full = M.encode(x, params, cfg)
    fast = M.encode(x, params, cfg, cls_only=True)
    assert full.shape == (6, 8, 16) and fast.shape == (6, 1, 16)
    np.testing.assert_allclose(fast.data[:, 0], full.data[:, 0], rtol=1e-12, atol=1e-12)


def test_attention_rows_are_distributions(small):
    cfg, params = small
    z = M.tokenize(np.random.default_rng(3).normal(size=(4, 7)), params)
    att = M.attention_weights(z, params, 0, cfg).data
    assert att.shape == (4, 4, 8, 8)
    np.testing.assert_allclose(att.sum(-1), 1.0, rtol=1e-12)


def test_inference_is_deterministic_and_dropout_is_not(small):
    cfg, params = small
    x = np.random.default_rng(4).normal(size=(3, 7))
    a = M.forward(x, params, cfg)[0].data
    b = M.forward(x, params, cfg)[0].data
    np.testing.assert_array_equal(a, b)
    c = M.forward(x, params, cfg, training=True, rng=np.random.default_rng(0))[0].data
    assert not np.allclose(a, c)
    with pytest.raises(ConfigError):
        M.forward(x, params, cfg, training=True)


def test_baseline_has_no_cross_token_path(small):
    # without attention the [CLS] token never sees the metrics, so every row
    # gets the same logits
    cfg, params = small
    x = np.random.default_rng(5).normal(size=(10, 7))
    logits = M.baseline_forward(x, params, cfg)[0].data
    np.testing.assert_allclose(logits, np.broadcast_to(logits[0], logits.shape), atol=1e-12)


def test_representation_choices(small):
    cfg, params = small
    z = M.encode(np.ones((2, 7)), params, cfg)
    assert M.representation(z, "cls").shape == (2, 16)
    assert M.representation(z, "mean-tokens").shape == (2, 16)
    assert M.representation(z, "all-tokens").shape == (2, 8 * 16)
    with pytest.raises(ConfigError):
        M.representation(z, "pooled")


def test_predict_threshold_tie_goes_to_zero():
    assert list(M.predict(np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))) == [0, 1, 0]


def test_checkpoint_round_trip(small, tmp_path):
    cfg, params = small
    path = tmp_path / "m.npz"
    M.save_checkpoint(path, params, cfg)
    back, cfg2 = M.load_checkpoint(path)
    assert cfg2 == cfg and list(back) == list(params)
    x = np.random.default_rng(6).normal(size=(4, 7))
    np.testing.assert_array_equal(M.forward(x, back, cfg2)[0].data, M.forward(x, params, cfg)[0].data)


def test_count_parameters():
    cfg = M.ModelConfig(p=2, d_token=4, n_heads=2, n_layers=1, ffn_hidden_factor=1.0)
    params = M.init_params(cfg, np.random.default_rng(0))
    # tok 2*3*4, attn 4*16, ffn ln 8, W1 4*8 + 8, W2 4*4 + 4, head ln 8, head 4*2 + 2
    assert M.count_parameters(params) == 24 + 64 + 8 + 40 + 20 + 8 + 10


def test_gradients_reach_every_parameter(small):
    cfg, params = small
    x = np.random.default_rng(7).normal(size=(3, 7))
    with ag.Tape() as tape:
        loss = M.forward(x, params, cfg)[0].sum()
    tape.backward(loss)
    assert all(p.grad is not None for p in params.values())
