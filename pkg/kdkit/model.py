"""
BERT-style encoder: embeddings -> L post-layer-norm transformer layers ->
pooled classification/regression head, with an optional masked-LM head.

``forward`` returns a ``FeatureTrace`` holding every feature a distillation
loss can read: attention maps, hidden states, per-head Q/K/V and logits.
"""
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from kdkit.errors import CheckpointError, ConfigError, InputError
from kdkit.tensor import (Tensor, activation, gather, layer_norm, matmul, mul, parameter,
                          reshape, scale, softmax_rows, split, tanh, transpose)

PAD_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3
NUM_RESERVED_IDS = 4

# Standard deviation of a unit normal truncated to [-2, 2]; dividing by it keeps
# the requested stddev after truncation.
_TRUNCATED_NORMAL_STD = 0.87962566103423978


@dataclass
class ModelConfig:
    """Architecture hyperparameters of one encoder."""
    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: Optional[int] = None
    vocab_size: int = 30522
    max_seq_len: int = 512
    num_labels: Union[int, str] = 2
    activation: str = "gelu"
    type_vocab_size: int = 2
    layer_norm_eps: float = 1e-12
    dropout: float = 0.0
    mlm_head: bool = False
    tie_mlm_decoder: bool = True

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.hidden_dim
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> List[str]:
        problems = []
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size",
                     "max_seq_len", "type_vocab_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                problems.append(f"{name} must be a positive integer, got {value!r}")
        if not problems and self.hidden_dim % self.num_heads:
            problems.append(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if self.num_labels != "regression" and (not isinstance(self.num_labels, (int, np.integer))
                                                or self.num_labels < 1):
            problems.append(f"num_labels must be a positive integer or 'regression', got {self.num_labels!r}")
        if self.activation not in ("gelu", "relu"):
            problems.append(f"activation must be 'gelu' or 'relu', got {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout must lie in [0, 1), got {self.dropout}")
        if isinstance(self.vocab_size, int) and self.vocab_size <= NUM_RESERVED_IDS:
            problems.append(f"vocab_size must exceed the {NUM_RESERVED_IDS} reserved ids")
        return problems

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def is_regression(self) -> bool:
        return self.num_labels == "regression"

    @property
    def output_dim(self) -> int:
        return 1 if self.is_regression else int(self.num_labels)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown model config key '{key}'" for key in unknown])
        return cls(**dict(data))

    def replace(self, **changes) -> "ModelConfig":
        data = self.to_dict()
        if "hidden_dim" in changes and "ffn_dim" not in changes:
            data["ffn_dim"] = None
        data.update(changes)
        return ModelConfig(**data)


# short key -> parameter name suffix inside "encoder.layer.{i}."
_LAYER_NAMES = {
    "wq": "attention.query.weight", "bq": "attention.query.bias",
    "wk": "attention.key.weight", "bk": "attention.key.bias",
    "wv": "attention.value.weight", "bv": "attention.value.bias",
    "wo": "attention.output.weight", "bo": "attention.output.bias",
    "ln1_gamma": "attention.layer_norm.gamma", "ln1_beta": "attention.layer_norm.beta",
    "w1": "ffn.intermediate.weight", "b1": "ffn.intermediate.bias",
    "w2": "ffn.output.weight", "b2": "ffn.output.bias",
    "ln2_gamma": "ffn.layer_norm.gamma", "ln2_beta": "ffn.layer_norm.beta",
}


def layer_prefix(layer: int) -> str:
    """Parameter-name prefix of transformer layer ``layer`` (1-based)."""
    return f"encoder.layer.{layer}."


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """The full parameter-name -> shape map; a pure function of ``config``."""
    d, f, V = config.hidden_dim, config.ffn_dim, config.vocab_size
    shapes: Dict[str, Tuple[int, ...]] = {
        "embeddings.word_embeddings": (V, d),
        "embeddings.position_embeddings": (config.max_seq_len, d),
        "embeddings.token_type_embeddings": (config.type_vocab_size, d),
        "embeddings.layer_norm.gamma": (d,),
        "embeddings.layer_norm.beta": (d,),
    }
    layer_shapes = {
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,), "wv": (d, d), "bv": (d,),
        "wo": (d, d), "bo": (d,), "ln1_gamma": (d,), "ln1_beta": (d,),
        "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,), "ln2_gamma": (d,), "ln2_beta": (d,),
    }
    for layer in range(1, config.num_layers + 1):
        for key, suffix in _LAYER_NAMES.items():
            shapes[layer_prefix(layer) + suffix] = layer_shapes[key]
    shapes["pooler.weight"] = (d, d)
    shapes["pooler.bias"] = (d,)
    shapes["classifier.weight"] = (d, config.output_dim)
    shapes["classifier.bias"] = (config.output_dim,)
    if config.mlm_head:
        shapes["mlm.transform.weight"] = (d, d)
        shapes["mlm.transform.bias"] = (d,)
        shapes["mlm.layer_norm.gamma"] = (d,)
        shapes["mlm.layer_norm.beta"] = (d,)
        if not config.tie_mlm_decoder:
            shapes["mlm.decoder.weight"] = (d, V)
        shapes["mlm.decoder.bias"] = (V,)
    return shapes


def count_parameters(config: ModelConfig) -> Dict[str, int]:
    """Exact scalar counts split into embedding / encoder / head, plus the total."""
    counts = {"embedding": 0, "encoder": 0, "head": 0}
    for name, shape in parameter_shapes(config).items():
        size = int(np.prod(shape))
        if name.startswith("embeddings."):
            counts["embedding"] += size
        elif name.startswith("encoder."):
            counts["encoder"] += size
        else:
            counts["head"] += size
    counts["total"] = counts["embedding"] + counts["encoder"] + counts["head"]
    return counts


def estimate_flops(config: ModelConfig, n: int) -> float:
    """
    Encoder forward-pass FLOPs for a length-``n`` input (2 x multiply-adds).

    Per layer: 8nd^2 for the Q/K/V/O projections, 4n^2 d for attention
    scores and context, 4 n d d_ff for the feed-forward block.
    """
    if n < 1:
        raise InputError(f"sequence length must be at least 1, got {n}")
    d, f = config.hidden_dim, config.ffn_dim
    per_layer = 8.0 * n * d * d + 4.0 * n * n * d + 4.0 * n * d * f
    return config.num_layers * per_layer


def is_bias_like(name: str) -> bool:
    return name.endswith(".bias") or name.endswith(".beta")


def is_gain(name: str) -> bool:
    return name.endswith(".gamma")


def truncated_normal(rng: np.random.Generator, shape: Sequence[int], stddev: float) -> np.ndarray:
    """Normal samples truncated at two standard deviations, rescaled to ``stddev``."""
    sample = rng.standard_normal(shape)
    outside = np.abs(sample) > 2.0
    while outside.any():
        sample[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(sample) > 2.0
    return sample * (stddev / _TRUNCATED_NORMAL_STD)


@dataclass
class FeatureTrace:
    """
    Everything a forward pass exposes to distillation.

    Batched shapes: embeddings/hiddens [B, n, d]; attentions [B, N_h, n, n];
    queries/keys/values [B, N_h, n, d_k]; logits [B, num_labels] (or [B, 1]).
    ``hiddens[0]`` is the embedding output and ``hiddens[l]`` the output of
    layer l; per-layer lists are indexed from layer 1.
    """
    embeddings: Tensor
    attentions: List[Tensor]
    hiddens: List[Tensor]
    queries: List[Tensor]
    keys: List[Tensor]
    values: List[Tensor]
    pooled: Tensor
    logits: Tensor

    @property
    def num_layers(self) -> int:
        return len(self.attentions)

    def attention(self, layer: int) -> Tensor:
        return self.attentions[self._index(layer)]

    def hidden(self, layer: int) -> Tensor:
        if not 0 <= layer <= self.num_layers:
            raise InputError(f"hidden layer {layer} outside 0..{self.num_layers}")
        return self.hiddens[layer]

    def relation_source(self, which: str, layer: int) -> Tensor:
        table = {"query": self.queries, "key": self.keys, "value": self.values}[which]
        return table[self._index(layer)]

    def _index(self, layer: int) -> int:
        if not 1 <= layer <= self.num_layers:
            raise InputError(f"layer {layer} outside 1..{self.num_layers}")
        return layer - 1

    def detach(self) -> "FeatureTrace":
        return FeatureTrace(
            embeddings=self.embeddings.detach(),
            attentions=[t.detach() for t in self.attentions],
            hiddens=[t.detach() for t in self.hiddens],
            queries=[t.detach() for t in self.queries],
            keys=[t.detach() for t in self.keys],
            values=[t.detach() for t in self.values],
            pooled=self.pooled.detach(),
            logits=self.logits.detach(),
        )


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    batch, n, d = x.shape
    return transpose(reshape(x, (batch, n, num_heads, d // num_heads)), (0, 2, 1, 3))


def multi_head_attention(x: Tensor, params: Mapping[str, Tensor], num_heads: int,
                         max_seq_len: Optional[int] = None):
    """
    Scaled dot-product self-attention over ``num_heads`` heads.

    Returns (output, A, Q, K, V) where output = concat(heads) W^O + b^O,
    A = softmax(Q K^T / sqrt(d_k)) per head and Q/K/V are the per-head
    projections. ``x`` is [n, d] or [B, n, d]; outputs follow the same
    batching.
    """
    unbatched = x.ndim == 2
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    batch, n, d = x.shape
    if max_seq_len is not None and n > max_seq_len:
        raise InputError(f"sequence length {n} exceeds max_seq_len {max_seq_len}")
    head_dim = d // num_heads
    q = _split_heads(matmul(x, params["wq"]) + params["bq"], num_heads)
    k = _split_heads(matmul(x, params["wk"]) + params["bk"], num_heads)
    v = _split_heads(matmul(x, params["wv"]) + params["bv"], num_heads)
    scores = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(head_dim))
    attn = softmax_rows(scores)
    context = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (batch, n, d))
    out = matmul(context, params["wo"]) + params["bo"]
    if unbatched:
        return (reshape(out, (n, d)), reshape(attn, attn.shape[1:]), reshape(q, q.shape[1:]),
                reshape(k, k.shape[1:]), reshape(v, v.shape[1:]))
    return out, attn, q, k, v


def feed_forward(x: Tensor, params: Mapping[str, Tensor], kind: str = "gelu") -> Tensor:
    """act(x W1 + b1) W2 + b2."""
    return matmul(activation(matmul(x, params["w1"]) + params["b1"], kind), params["w2"]) + params["b2"]


class TransformerModel:
    """
    Parameterized encoder. Parameters live in ``params`` keyed by the names of
    ``parameter_shapes(config)``; that name set is the checkpoint contract.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32, stddev: float = 0.02):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {
            name: parameter(np.zeros(shape, dtype=self.dtype), name=name)
            for name, shape in parameter_shapes(config).items()
        }
        self.training = False
        self._dropout_rng = np.random.default_rng(seed)
        self.reset_parameters(seed, stddev)

    # -- parameter management -------------------------------------------
    def reset_parameters(self, seed: int, stddev: float = 0.02,
                         names: Optional[Sequence[str]] = None) -> None:
        """Truncated-normal weights, zero biases, unit layer-norm gains."""
        rng = np.random.default_rng(seed)
        for name in (names if names is not None else list(self.params)):
            tensor = self.params[name]
            if is_bias_like(name):
                tensor.data[...] = 0.0
            elif is_gain(name):
                tensor.data[...] = 1.0
            else:
                tensor.data[...] = truncated_normal(rng, tensor.shape, stddev)
            tensor.grad = None

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def layer_params(self, layer: int) -> Dict[str, Tensor]:
        prefix = layer_prefix(layer)
        return {key: self.params[prefix + suffix] for key, suffix in _LAYER_NAMES.items()}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        expected = set(self.params)
        given = set(state)
        if strict and expected != given:
            missing = sorted(expected - given)[:5]
            extra = sorted(given - expected)[:5]
            raise CheckpointError(f"state does not match model: missing {missing}, unexpected {extra}")
        for name, values in state.items():
            if name not in self.params:
                continue
            target = self.params[name]
            if tuple(values.shape) != target.shape:
                raise CheckpointError(f"{name}: shape {tuple(values.shape)} != model shape {target.shape}")
            target.data[...] = values
            target.grad = None

    def clone(self) -> "TransformerModel":
        twin = TransformerModel(self.config, dtype=self.dtype, stddev=0.0)
        twin.load_state_dict(self.state_dict())
        return twin

    def train(self, mode: bool = True) -> "TransformerModel":
        self.training = mode
        return self

    def eval(self) -> "TransformerModel":
        return self.train(False)

    # -- computation ------------------------------------------------------
    def _dropout(self, x: Tensor) -> Tensor:
        p = self.config.dropout
        if not self.training or p <= 0.0:
            return x
        keep = (self._dropout_rng.random(x.shape) >= p).astype(self.dtype) / (1.0 - p)
        return mul(x, Tensor(keep))

    def forward(self, token_ids, token_type_ids=None) -> FeatureTrace:
        return forward(self, token_ids, token_type_ids)

    __call__ = forward

    def mlm_logits(self, hidden: Tensor) -> Tensor:
        """Vocabulary logits for hidden rows [..., d] through the masked-LM head."""
        if not self.config.mlm_head:
            raise ConfigError(["model has no masked-LM head (set mlm_head: true)"])
        p = self.params
        h = activation(matmul(hidden, p["mlm.transform.weight"]) + p["mlm.transform.bias"], "gelu")
        h = layer_norm(h, p["mlm.layer_norm.gamma"], p["mlm.layer_norm.beta"], self.config.layer_norm_eps)
        if self.config.tie_mlm_decoder:
            decoder = transpose(p["embeddings.word_embeddings"], (1, 0))
        else:
            decoder = p["mlm.decoder.weight"]
        return matmul(h, decoder) + p["mlm.decoder.bias"]


def _validate_ids(config: ModelConfig, token_ids) -> np.ndarray:
    ids = np.asarray(token_ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise InputError(f"token ids must be a non-empty sequence or batch, got shape {ids.shape}")
    if ids.dtype.kind not in "iu":
        raise InputError(f"token ids must be integers, got dtype {ids.dtype}")
    if ids.shape[1] > config.max_seq_len:
        raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        bad = int(ids.max()) if ids.max() >= config.vocab_size else int(ids.min())
        raise InputError(f"token id {bad} is outside the vocabulary [0, {config.vocab_size})")
    return ids


def encoder_layer(model: TransformerModel, layer: int, x: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    """One post-LN block on [B, n, d] input; returns the output, attention, queries, keys and values."""
    config = model.config
    lp = model.layer_params(layer)
    attn_out, attn, q, k, v = multi_head_attention(x, lp, config.num_heads, config.max_seq_len)
    x = layer_norm(x + model._dropout(attn_out), lp["ln1_gamma"], lp["ln1_beta"], config.layer_norm_eps)
    ff = feed_forward(x, lp, config.activation)
    x = layer_norm(x + model._dropout(ff), lp["ln2_gamma"], lp["ln2_beta"], config.layer_norm_eps)
    return x, attn, q, k, v


def forward(model: TransformerModel, token_ids, token_type_ids=None) -> FeatureTrace:
    """Run the encoder on one sequence or an equal-length batch and record the trace."""
    config = model.config
    p = model.params
    ids = _validate_ids(config, token_ids)
    batch, n = ids.shape
    types = np.zeros_like(ids) if token_type_ids is None else np.asarray(token_type_ids).reshape(ids.shape)

    x = (gather(p["embeddings.word_embeddings"], ids)
         + gather(p["embeddings.position_embeddings"], np.arange(n))
         + gather(p["embeddings.token_type_embeddings"], types))
    x = layer_norm(x, p["embeddings.layer_norm.gamma"], p["embeddings.layer_norm.beta"], config.layer_norm_eps)
    x = model._dropout(x)

    hiddens, attentions, queries, keys, values = [x], [], [], [], []
    for layer in range(1, config.num_layers + 1):
        x, attn, q, k, v = encoder_layer(model, layer, x)
        hiddens.append(x)
        attentions.append(attn)
        queries.append(q)
        keys.append(k)
        values.append(v)

    first_token = reshape(split(x, [1], axis=1)[0], (batch, config.hidden_dim))
    pooled = tanh(matmul(first_token, p["pooler.weight"]) + p["pooler.bias"])
    logits = matmul(model._dropout(pooled), p["classifier.weight"]) + p["classifier.bias"]
    return FeatureTrace(embeddings=hiddens[0], attentions=attentions, hiddens=hiddens,
                        queries=queries, keys=keys, values=values, pooled=pooled, logits=logits)
