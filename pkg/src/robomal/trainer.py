"""Deterministic training, 10-fold cross-validation, and checkpoint files.

Everything downstream of a seed is reproducible: parameter init, batch
shuffling, dropout masks, and the fold partition all derive from it, and
BLAS thread pools are pinned to one thread during numeric work so results
do not depend on machine parallelism. Folds are independent jobs (seeded
``seed + fold_index``) and may run in worker processes; parallel and
sequential execution produce identical bytes.

Checkpoint file layout (little-endian):

    magic "RMCK" | u32 version | u64 header_len | header (UTF-8 JSON)
    then one block per named array:
    u32 name_len | name | u32 rank | u64 dim... | float64 data

The header records the model configuration, seeds, step count, final loss,
and block order. The decimated loss curve is stored as a trailing block.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import models
from .featurize import TokenSequence
from .metrics import MetricsReport, compute_metrics, confusion
from .models import ModelConfig
from .numcore import AdamState, adam_step, evaluate, gradients

CHECKPOINT_MAGIC = b"RMCK"
CHECKPOINT_VERSION = 1
CURVE_STRIDE = 10

DESK_MAX_STEPS = 5_000
PAPER_MAX_STEPS = {"lstm": 100_000, "gru": 100_000, "cnn": 50_000, "ann": 50_000}
BATCH_SIZES = {"lstm": 36, "gru": 44, "cnn": 32, "ann": 32}
WEIGHT_DECAY = {"lstm": 0.0, "gru": 0.0, "cnn": 0.003, "ann": 0.003}


class DegenerateSplitError(ValueError):
    """Training split missing one of the classes; the loss cannot separate."""


class CheckpointError(ValueError):
    """Unreadable or corrupt checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


@dataclass(frozen=True)
class TrainConfig:
    kind: str
    batch_size: int
    max_steps: int
    lr: float = 0.001
    weight_decay: float = 0.0
    seed: int = 0
    folds: int = 10

    def __post_init__(self):
        if self.batch_size < 1 or self.max_steps < 1 or self.folds < 2:
            raise ValueError("batch_size and max_steps must be >= 1, folds >= 2")

    @classmethod
    def for_kind(cls, kind: str, seed: int = 0, paper_steps: bool = False,
                 max_steps: int | None = None, folds: int = 10) -> "TrainConfig":
        if kind not in BATCH_SIZES:
            raise ValueError(f"unknown model kind {kind!r}")
        if max_steps is None:
            max_steps = PAPER_MAX_STEPS[kind] if paper_steps else DESK_MAX_STEPS
        return cls(kind=kind, batch_size=BATCH_SIZES[kind], max_steps=max_steps,
                   weight_decay=WEIGHT_DECAY[kind], seed=seed, folds=folds)


@dataclass(frozen=True)
class Fold:
    train_indices: np.ndarray
    test_indices: np.ndarray


@dataclass(frozen=True)
class FoldPlan:
    n: int
    k: int
    seed: int
    folds: tuple[Fold, ...]


def make_folds(n: int, k: int, seed: int) -> FoldPlan:
    """Seeded shuffle, then contiguous split into k near-equal test folds."""
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    base = n // k
    extra = n % k
    folds = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        test = np.sort(perm[start:start + size])
        train = np.sort(np.concatenate([perm[:start], perm[start + size:]]))
        folds.append(Fold(train_indices=train, test_indices=test))
        start += size
    return FoldPlan(n=n, k=k, seed=seed, folds=tuple(folds))


@dataclass
class LabeledDataset:
    sequences: list[TokenSequence]
    labels: np.ndarray  # int {0,1} per sequence

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if len(self.sequences) != len(self.labels):
            raise ValueError(
                f"{len(self.sequences)} sequences vs {len(self.labels)} labels")

    def __len__(self):
        return len(self.sequences)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        tokens = np.stack([s.tokens for s in self.sequences]).astype(np.int64)
        lengths = np.array([s.true_length for s in self.sequences], dtype=np.int64)
        return tokens, lengths


@dataclass
class Checkpoint:
    version: int
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    seed: int
    steps: int
    final_loss: float
    loss_curve: np.ndarray  # loss at steps 0, CURVE_STRIDE, ...; last entry is final
    curve_stride: int = CURVE_STRIDE


def train(config: TrainConfig, dataset: LabeledDataset, fold: Fold,
          model_config: ModelConfig | None = None) -> Checkpoint:
    """Run max_steps Adam updates over seeded, per-pass reshuffled batches."""
    mc = model_config if model_config is not None else ModelConfig.for_kind(config.kind)
    train_idx = np.asarray(fold.train_indices)
    if train_idx.size == 0:
        raise DegenerateSplitError("empty training split")
    train_labels = dataset.labels[train_idx]
    if len(np.unique(train_labels)) < 2:
        raise DegenerateSplitError("training split contains a single class")

    tokens, lengths = dataset.stacked()
    labels = dataset.labels.astype(np.float64)
    params = models.init_params(mc, seed=config.seed)
    mg = models.build_graph(mc, with_loss=True)
    adam = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    shuffle_rng = np.random.default_rng((config.seed, 0x5EED))

    batch = min(config.batch_size, train_idx.size)
    per_pass = train_idx.size // batch
    curve = []
    final_loss = None
    with threadpool_limits(limits=1):
        step = 0
        while step < config.max_steps:
            order = shuffle_rng.permutation(train_idx)
            for b in range(per_pass):
                if step >= config.max_steps:
                    break
                idx = order[b * batch:(b + 1) * batch]
                bindings = models.batch_bindings(mc, tokens[idx], lengths[idx])
                bindings.update(params)
                bindings["y"] = labels[idx]
                loss_val = float(evaluate(mg.graph, bindings, mode="train",
                                          dropout_seed=(config.seed, step)))
                if not np.isfinite(loss_val):
                    raise FloatingPointError(f"non-finite loss at step {step}")
                grads = gradients(mg.graph)
                adam_step(params, grads, adam)
                if step % CURVE_STRIDE == 0:
                    curve.append(loss_val)
                final_loss = loss_val
                step += 1
    if (config.max_steps - 1) % CURVE_STRIDE != 0:
        curve.append(final_loss)
    return Checkpoint(
        version=CHECKPOINT_VERSION, model_config=mc,
        params={k: v.copy() for k, v in params.items()},
        seed=config.seed, steps=config.max_steps, final_loss=final_loss,
        loss_curve=np.array(curve), curve_stride=CURVE_STRIDE)


@dataclass(frozen=True)
class FoldEvaluation:
    probabilities: np.ndarray
    predicted: np.ndarray
    labels: np.ndarray

    def rows(self):
        return list(zip(self.probabilities, self.predicted, self.labels))


def _sigmoid(z):
    return 0.5 * np.tanh(0.5 * z) + 0.5


def evaluate_fold(ckpt: Checkpoint, dataset: LabeledDataset, fold: Fold) -> FoldEvaluation:
    """Eval-mode forward over the test split; predicted = P(malware) >= 0.5."""
    test_idx = np.asarray(fold.test_indices)
    if test_idx.size == 0:
        empty = np.array([])
        return FoldEvaluation(empty, empty.astype(int), empty.astype(int))
    tokens, lengths = dataset.stacked()
    mg = models.build_graph(ckpt.model_config, with_loss=False)
    bindings = models.batch_bindings(ckpt.model_config, tokens[test_idx], lengths[test_idx])
    with threadpool_limits(limits=1):
        evaluate(mg.graph, {**bindings, **ckpt.params}, mode="eval")
    logits = mg.graph.value(mg.logit_node)
    probs = _sigmoid(logits)
    return FoldEvaluation(probabilities=probs,
                          predicted=(probs >= 0.5).astype(int),
                          labels=dataset.labels[test_idx].astype(int))


# -- checkpoint files -------------------------------------------------------

def _write_block(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_block(buf: bytes, pos: int) -> tuple[str, np.ndarray, int]:
    try:
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + name_len].decode("utf-8")
        if len(buf) < pos + name_len:
            raise CheckpointError("truncated block name")
        pos += name_len
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, pos) if rank else ()
        pos += 8 * rank
        count = int(np.prod(shape)) if shape else 1
        end = pos + 8 * count
        if end > len(buf):
            raise CheckpointError(f"truncated data for block {name!r}")
        arr = np.frombuffer(buf[pos:end], dtype="<f8").reshape(shape).copy()
        return name, arr, end
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint at offset {pos}: {exc}") from exc


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    header = {
        "model": asdict(ckpt.model_config),
        "seed": ckpt.seed,
        "steps": ckpt.steps,
        "final_loss": ckpt.final_loss,
        "curve_stride": ckpt.curve_stride,
        "param_names": sorted(ckpt.params),
        "blocks": sorted(ckpt.params) + ["loss_curve"],
    }
    hb = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for name in header["param_names"]:
            _write_block(fh, name, ckpt.params[name])
        _write_block(fh, "loss_curve", ckpt.loss_curve)


def load_checkpoint(path: Path | str) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: version {version}, supported {CHECKPOINT_VERSION}")
    (header_len,) = struct.unpack_from("<Q", buf, 8)
    if 16 + header_len > len(buf):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(buf[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    model_dict = dict(header["model"])
    for key in ("cnn_channels", "ann_dims"):
        model_dict[key] = tuple(model_dict[key])
    mc = ModelConfig(**model_dict)
    pos = 16 + header_len
    arrays = {}
    for expected in header["blocks"]:
        name, arr, pos = _read_block(buf, pos)
        if name != expected:
            raise CheckpointError(f"{path}: block {name!r} where {expected!r} expected")
        arrays[name] = arr
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    curve = arrays.pop("loss_curve")
    return Checkpoint(version=version, model_config=mc, params=arrays,
                      seed=header["seed"], steps=header["steps"],
                      final_loss=header["final_loss"], loss_curve=curve,
                      curve_stride=header["curve_stride"])


# -- cross-validation -------------------------------------------------------

@dataclass
class CrossvalResult:
    config: TrainConfig
    per_fold: list[MetricsReport]
    fold_sizes: list[int]
    loss_curves: list[list[float]]
    checkpoints: list[Checkpoint] = field(repr=False, default_factory=list)


def _run_fold(args):
    config, mc, dataset, fold, fold_index = args
    fold_config = replace(config, seed=config.seed + fold_index)
    ckpt = train(fold_config, dataset, fold, model_config=mc)
    result = evaluate_fold(ckpt, dataset, fold)
    return fold_index, ckpt, result


def crossval(config: TrainConfig, dataset: LabeledDataset,
             model_config: ModelConfig | None = None,
             workers: int = 1) -> CrossvalResult:
    """Train and evaluate every fold; workers > 1 distributes folds across
    processes with results identical to sequential execution."""
    if len(dataset) < config.folds:
        raise ValueError(f"{len(dataset)} samples cannot fill {config.folds} folds")
    mc = model_config if model_config is not None else ModelConfig.for_kind(config.kind)
    plan = make_folds(len(dataset), config.folds, config.seed)
    jobs = [(config, mc, dataset, fold, i) for i, fold in enumerate(plan.folds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_fold, jobs))
    else:
        outcomes = [_run_fold(job) for job in jobs]
    outcomes.sort(key=lambda item: item[0])
    per_fold, sizes, curves, ckpts = [], [], [], []
    for _, ckpt, result in outcomes:
        per_fold.append(compute_metrics(confusion(result.predicted, result.labels)))
        sizes.append(len(result.labels))
        curves.append([float(x) for x in ckpt.loss_curve])
        ckpts.append(ckpt)
    return CrossvalResult(config=config, per_fold=per_fold, fold_sizes=sizes,
                          loss_curves=curves, checkpoints=ckpts)
