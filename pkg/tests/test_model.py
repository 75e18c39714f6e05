import numpy as np
import pytest

from conftest import tiny_config, tiny_model
from kdkit.errors import ConfigError, InputError
from kdkit.model import (ModelConfig, TransformerModel, count_parameters, estimate_flops, feed_forward,
                          multi_head_attention, parameter_shapes)
from kdkit.sizing import embedding_fraction
from kdkit.tensor import Tensor, check_gradient, parameter, reduce_sum


def _layer_params(rng, d, zero=False):
    shapes = {"wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,), "wv": (d, d), "bv": (d,),
              "wo": (d, d), "bo": (d,)}
    return {k: Tensor(np.zeros(s) if zero else rng.normal(size=s)) for k, s in shapes.items()}


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_attention_zero_weights_gives_uniform_maps(rng):
    out, attn, q, k, v = multi_head_attention(Tensor(rng.normal(size=(3, 8))), _layer_params(rng, 8, zero=True), 2)
    assert np.allclose(out.data, 0.0)
    assert np.allclose(attn.data, 1.0 / 3)
    assert attn.shape == (2, 3, 3) and q.shape == (2, 3, 4)


def test_attention_single_token_is_one(rng):
    _, attn, _, _, _ = multi_head_attention(Tensor(rng.normal(size=(1, 8))), _layer_params(rng, 8), 2)
    assert np.allclose(attn.data, 1.0)


def test_attention_matches_per_head_loop(rng):
    d, heads, n = 8, 2, 3
    x = rng.normal(size=(n, d))
    params = _layer_params(rng, d)
    out, attn, _, _, _ = multi_head_attention(Tensor(x), params, heads)

    p = {k: t.data for k, t in params.items()}
    q, k, v = x @ p["wq"] + p["bq"], x @ p["wk"] + p["bk"], x @ p["wv"] + p["bv"]
    dk = d // heads
    contexts = []
    for h in range(heads):
        cols = slice(h * dk, (h + 1) * dk)
        a = _softmax(q[:, cols] @ k[:, cols].T / np.sqrt(dk))
        assert np.allclose(attn.data[h], a, atol=1e-10)
        contexts.append(a @ v[:, cols])
    expected = np.concatenate(contexts, axis=1) @ p["wo"] + p["bo"]
    assert np.allclose(out.data, expected, atol=1e-10)


def test_attention_rejects_long_sequence(rng):
    with pytest.raises(InputError):
        multi_head_attention(Tensor(rng.normal(size=(5, 8))), _layer_params(rng, 8), 2, max_seq_len=4)


def test_feed_forward_hand_value():
    params = {"w1": Tensor([[1.0]]), "b1": Tensor([0.5]), "w2": Tensor([[2.0]]), "b2": Tensor([0.25])}
    # relu(-2 + 0.5) = 0, so only b2 remains
    assert np.allclose(feed_forward(Tensor([[-2.0]]), params, "relu").data, [[0.25]])
    assert np.allclose(feed_forward(Tensor([[3.0]]), params, "relu").data, [[7.25]])


def test_feed_forward_gradient(rng):
    params = {"w1": parameter(rng.normal(size=(4, 6))), "b1": parameter(rng.normal(size=6)),
              "w2": parameter(rng.normal(size=(6, 4))), "b2": parameter(rng.normal(size=4))}
    x = Tensor(rng.normal(size=(3, 4)))
    assert check_gradient(lambda: reduce_sum(feed_forward(x, params)), params.values()) < 1e-5


def test_forward_trace_structure_and_attention_rows(token_batch):
    model = tiny_model(num_layers=3)
    trace = model(token_batch)
    assert trace.num_layers == 3
    assert len(trace.hiddens) == 4
    assert trace.hidden(0) is trace.embeddings
    assert trace.logits.shape == (2, 2)
    for layer in range(1, 4):
        assert np.allclose(trace.attention(layer).data.sum(axis=-1), 1.0, atol=1e-6)


def test_forward_is_deterministic(token_batch):
    model = tiny_model()
    first, second = model(token_batch), model(token_batch)
    for a, b in zip(first.hiddens + [first.logits], second.hiddens + [second.logits]):
        assert np.array_equal(a.data, b.data)


def test_forward_rejects_bad_ids():
    model = tiny_model()
    with pytest.raises(InputError):
        model(np.array([[1, 2, 40]]))
    with pytest.raises(InputError):
        model(np.ones((1, 17), dtype=np.int64))


def test_config_rejects_zero_layers_and_bad_heads():
    with pytest.raises(ConfigError):
        tiny_config(num_layers=0)
    with pytest.raises(ConfigError):
        tiny_config(hidden_dim=10, num_heads=4)


def test_copied_weights_give_identical_traces(token_batch):
    model = tiny_model(seed=3)
    twin = model.clone()
    a, b = model(token_batch), twin(token_batch)
    assert np.array_equal(a.logits.data, b.logits.data)
    assert np.array_equal(a.hiddens[-1].data, b.hiddens[-1].data)


def test_parameter_count_matches_allocation(rng):
    for _ in range(20):
        d_k = int(rng.integers(1, 5))
        heads = int(rng.integers(1, 4))
        config = ModelConfig(num_layers=int(rng.integers(1, 4)), hidden_dim=d_k * heads, num_heads=heads,
                             vocab_size=int(rng.integers(8, 40)), max_seq_len=int(rng.integers(1, 20)),
                             num_labels=int(rng.integers(1, 5)), mlm_head=bool(rng.integers(0, 2)))
        model = TransformerModel(config, stddev=0.0)
        assert model.num_parameters() == count_parameters(config)["total"]


def test_parameter_names_depend_only_on_config():
    config = tiny_config()
    assert list(TransformerModel(config, seed=1).params) == list(parameter_shapes(config))
    assert "encoder.layer.1.attention.query.weight" in parameter_shapes(config)


def test_embedding_share_reference_points():
    small = ModelConfig(num_layers=4, hidden_dim=256, num_heads=4)
    counts = count_parameters(small)
    assert counts == {"embedding": 7_945_728, "encoder": 3_159_040, "head": 66_306, "total": 11_171_074}
    assert embedding_fraction(small) == pytest.approx(0.711, abs=0.001)
    assert embedding_fraction(ModelConfig(num_layers=2, hidden_dim=128, num_heads=2)) > 0.90
    total = count_parameters(ModelConfig(num_layers=12, hidden_dim=128, num_heads=2))["total"]
    assert total == 6_368_898
    assert abs(total - 6.36e6) / 6.36e6 < 0.03


def test_flops_formula():
    config = tiny_config(hidden_dim=16, num_heads=2)
    assert estimate_flops(config.replace(num_layers=4), 10) == 2 * estimate_flops(config, 10)
    one_token = estimate_flops(config.replace(num_layers=1), 1)
    d, f = 16, 64
    assert one_token == 8 * d * d + 4 * d + 4 * d * f
    with pytest.raises(InputError):
        estimate_flops(config, 0)


def test_flops_ordering_across_budget_configs():
    def flops(d, layers):
        return estimate_flops(ModelConfig(num_layers=layers, hidden_dim=d, num_heads=2), 128)

    assert flops(176, 2) < flops(160, 4) < flops(128, 12)


def test_full_backward_reaches_every_parameter(token_batch):
    model = tiny_model()
    reduce_sum(model(token_batch).logits).backward()
    dead = [name for name, tensor in model.named_parameters() if tensor.grad is None]
    assert dead == []


def test_replace_resets_ffn_width():
    config = tiny_config()
    assert config.replace(hidden_dim=16).ffn_dim == 64
    assert config.replace(num_layers=3).ffn_dim == config.ffn_dim
