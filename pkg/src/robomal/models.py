"""The four byte-sequence classifiers: bidirectional LSTM, GRU, CNN, ANN.

Each model maps a batch of token sequences to one malware logit per sample.
The sigmoid is folded into the loss (and applied by callers that need a
probability), so forward passes emit raw logits. The pooled feature vector
feeding the final dense layer is exposed alongside the logits: concatenated
final hidden states for the recurrent models (16 dims), the flattened
adaptive-pool output for the CNN (480), and the second hidden layer for the
ANN (200).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore
from .featurize import SEQUENCE_LENGTH, VOCAB_SIZE, TokenSequence

MODEL_KINDS = ("lstm", "gru", "cnn", "ann")

_DROPOUT_DEFAULTS = {"lstm": 0.0, "gru": 0.30, "cnn": 0.20, "ann": 0.0}


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    vocab_size: int = VOCAB_SIZE
    embedding_dim: int = 16
    hidden_units: int = 16          # total across directions for the lstm
    dropout: float = 0.0
    cnn_channels: tuple[int, int, int] = (8, 16, 16)
    cnn_kernel: int = 7
    pool_out: int = 30
    ann_dims: tuple[int, int, int] = (2000, 200, 200)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")
        dims = (self.vocab_size, self.embedding_dim, self.hidden_units,
                *self.cnn_channels, self.cnn_kernel, self.pool_out, *self.ann_dims)
        if any(d <= 0 for d in dims):
            raise ValueError("all dimensions must be positive")
        if self.kind == "lstm" and self.hidden_units % 2 != 0:
            raise ValueError("lstm hidden_units must be even (split across directions)")

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "ModelConfig":
        overrides.setdefault("dropout", _DROPOUT_DEFAULTS.get(kind, 0.0))
        return cls(kind=kind, **overrides)

    @property
    def pooled_dim(self) -> int:
        return {
            "lstm": self.hidden_units,
            "gru": self.hidden_units,
            "cnn": self.cnn_channels[2] * self.pool_out,
            "ann": self.ann_dims[2],
        }[self.kind]


@dataclass(frozen=True)
class ForwardOutput:
    logits: np.ndarray   # [batch]
    pooled: np.ndarray   # [batch, pooled_dim]


@dataclass
class ModelGraph:
    graph: numcore.Graph
    logit_node: int
    pooled_node: int
    loss_node: int | None = None


NON_TRAINABLE_SUFFIXES = ("_mean", "_var")


def is_trainable(name: str) -> bool:
    return not name.endswith(NON_TRAINABLE_SUFFIXES)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    e, v = config.embedding_dim, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {}
    if config.kind == "lstm":
        h = config.hidden_units // 2
        shapes["embedding"] = (v, e)
        for d in ("fwd", "bwd"):
            shapes[f"lstm_wx_{d}"] = (e, 4 * h)
            shapes[f"lstm_wh_{d}"] = (h, 4 * h)
            shapes[f"lstm_b_{d}"] = (4 * h,)
        shapes["dense_w"] = (config.hidden_units, 1)
        shapes["dense_b"] = (1,)
    elif config.kind == "gru":
        h = config.hidden_units
        shapes["embedding"] = (v, e)
        shapes["gru_wx"] = (e, 3 * h)
        shapes["gru_wh"] = (h, 3 * h)
        shapes["gru_bx"] = (3 * h,)
        shapes["gru_bh"] = (3 * h,)
        shapes["dense_w"] = (h, 1)
        shapes["dense_b"] = (1,)
    elif config.kind == "cnn":
        shapes["embedding"] = (v, e)
        chans = (e, *config.cnn_channels)
        for i in range(3):
            shapes[f"conv{i + 1}_w"] = (chans[i + 1], chans[i], config.cnn_kernel)
            shapes[f"bn{i + 1}_scale"] = (chans[i + 1],)
            shapes[f"bn{i + 1}_shift"] = (chans[i + 1],)
            shapes[f"bn{i + 1}_mean"] = (chans[i + 1],)
            shapes[f"bn{i + 1}_var"] = (chans[i + 1],)
        shapes["dense_w"] = (config.pooled_dim, 1)
        shapes["dense_b"] = (1,)
    else:  # ann
        d0, d1, d2 = config.ann_dims
        shapes["dense1_w"] = (d0, d1)
        shapes["dense1_b"] = (d1,)
        shapes["dense2_w"] = (d1, d2)
        shapes["dense2_b"] = (d2,)
        shapes["dense3_w"] = (d2, 1)
        shapes["dense3_b"] = (1,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic init: weights uniform in +-1/sqrt(fan_in), biases zero,
    batch-norm scale 1 / shift 0 / running stats (0, 1). The embedding table
    uses the embedding dimension as fan-in so rows start at a useful scale."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(("_b", "_shift", "_bx", "_bh", "_mean")) or name.startswith("lstm_b_"):
            params[name] = np.zeros(shape)
        elif name.endswith(("_scale", "_var")):
            params[name] = np.ones(shape)
        elif name == "embedding":
            bound = 1.0 / np.sqrt(config.embedding_dim)
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name.startswith("conv"):
            fan_in = shape[1] * shape[2]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def build_graph(config: ModelConfig, with_loss: bool = False) -> ModelGraph:
    g = numcore.Graph()

    def param(name):
        return g.parameter(name, trainable=is_trainable(name))

    if config.kind == "lstm":
        h = config.hidden_units // 2
        pooled = g.bilstm(
            g.input("tok"), g.input("len"), param("embedding"),
            param("lstm_wx_fwd"), param("lstm_wh_fwd"), param("lstm_b_fwd"),
            param("lstm_wx_bwd"), param("lstm_wh_bwd"), param("lstm_b_bwd"), hidden=h)
    elif config.kind == "gru":
        rec = g.gru(g.input("tok"), g.input("len"), param("embedding"),
                    param("gru_wx"), param("gru_wh"), param("gru_bx"),
                    param("gru_bh"), hidden=config.hidden_units)
        pooled = g.dropout(rec, config.dropout)
    elif config.kind == "cnn":
        x = g.embedding(g.input("tok"), param("embedding"))
        for i in range(3):
            x = g.conv1d(x, param(f"conv{i + 1}_w"))
            x = g.batchnorm1d(x, param(f"bn{i + 1}_scale"), param(f"bn{i + 1}_shift"),
                              param(f"bn{i + 1}_mean"), param(f"bn{i + 1}_var"))
            x = g.dropout(x, config.dropout)
        x = g.adaptive_maxpool1d(x, config.pool_out)
        pooled = g.reshape(x, (-1, config.pooled_dim))
    else:  # ann: normalized token values straight into dense relu stack
        x = g.input("x")
        x = g.relu(g.add(g.matmul(x, param("dense1_w")), param("dense1_b")))
        pooled = g.relu(g.add(g.matmul(x, param("dense2_w")), param("dense2_b")))

    dense_w = "dense3_w" if config.kind == "ann" else "dense_w"
    dense_b = "dense3_b" if config.kind == "ann" else "dense_b"
    logit = g.reshape(g.add(g.matmul(pooled, param(dense_w)), param(dense_b)), (-1,))
    loss_node = g.bce_with_logits(logit, g.input("y")) if with_loss else None
    return ModelGraph(graph=g, logit_node=logit, pooled_node=pooled, loss_node=loss_node)


def batch_bindings(config: ModelConfig, tokens: np.ndarray,
                   lengths: np.ndarray) -> dict[str, np.ndarray]:
    """Bindings for a raw token batch. Recurrent models read a view cropped
    to the longest real sequence; the CNN embeds the full padded array; the
    ANN consumes tokens scaled to [0, 1]."""
    tokens = np.asarray(tokens, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if config.kind in ("lstm", "gru"):
        t_max = int(lengths.max())
        return {"tok": np.ascontiguousarray(tokens[:, :t_max]), "len": lengths}
    if config.kind == "cnn":
        return {"tok": tokens}
    return {"x": tokens.astype(np.float64) / 256.0}


def pack_batch(config: ModelConfig, seqs: list[TokenSequence]) -> dict[str, np.ndarray]:
    if not seqs:
        raise ValueError("empty batch")
    tokens = np.stack([s.tokens for s in seqs]).astype(np.int64)
    lengths = np.array([s.true_length for s in seqs], dtype=np.int64)
    if config.kind == "ann" and config.ann_dims[0] != SEQUENCE_LENGTH:
        raise ValueError(
            f"ann input dim {config.ann_dims[0]} != sequence length {SEQUENCE_LENGTH}")
    return batch_bindings(config, tokens, lengths)


def forward(config: ModelConfig, params: dict[str, np.ndarray],
            seqs: list[TokenSequence], mode: str = "eval",
            dropout_seed=0) -> ForwardOutput:
    mg = build_graph(config, with_loss=False)
    bindings = {**params, **pack_batch(config, seqs)}
    numcore.evaluate(mg.graph, bindings, mode=mode, dropout_seed=dropout_seed)
    return ForwardOutput(logits=mg.graph.value(mg.logit_node).copy(),
                         pooled=mg.graph.value(mg.pooled_node).copy())


def loss(logits, labels) -> float:
    """Mean binary cross entropy on logits, stable in both tails."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"logits {z.shape} vs labels {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(per.mean())
