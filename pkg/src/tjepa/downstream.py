"""Supervised evaluation on frozen representations.

A probe is a projection of the (n, d, h) representation stack followed by a
head: a single linear layer (linear probe) or an MLP whose hidden blocks are
BatchNorm(Dropout(ReLU(Wx + b))).  Probes only ever see copies of the
embeddings, so the encoder cannot be touched by probe training.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .numeric import (
    BatchNorm,
    ConfigurationError,
    DimensionError,
    Tensor,
    conv2d,
    cross_entropy,
    dropout,
    linear_forward,
    max_pool2d,
    no_grad,
    parameter,
    precision,
)
from .training import AdamW, cosine_lr

logger = logging.getLogger(__name__)

CLASSIFICATION = "classification"
REGRESSION = "regression"
PROJECTIONS = ("linear_flatten", "linear_per_feature", "conv", "max_pool", "mean_pool")
_DTYPE = np.float64


class DownstreamError(ValueError):
    pass


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(_DTYPE)


class _Linear:
    def __init__(self, n_in: int, n_out: int, rng, zero: bool = False):
        if zero:
            self.W = parameter(np.zeros((n_in, n_out), dtype=_DTYPE))
            self.b = parameter(np.zeros(n_out, dtype=_DTYPE))
            return
        self.W = parameter(_uniform(rng, n_in, (n_in, n_out)))
        self.b = parameter(_uniform(rng, n_in, (n_out,)))

    def __call__(self, x):
        return linear_forward(x, self.W, self.b)

    def parameters(self, prefix: str) -> dict:
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}


# -- projections ---------------------------------------------------------------------------------


class Projection:
    """Maps a (n, d, h) stack to (n, output_dim).

    ``out_dim`` sets the width of ``linear_flatten`` and ``conv``; the other
    modes produce one value per feature.
    """

    def __init__(self, mode: str, d: int, h: int, out_dim: int | None = None, rng=None):
        if mode not in PROJECTIONS:
            raise ConfigurationError(f"unknown projection {mode!r}; expected one of {', '.join(PROJECTIONS)}")
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.mode, self.d, self.h = mode, d, h
        self.layers: dict = {}
        self.norms: dict[str, BatchNorm] = {}
        out_dim = out_dim or h
        if mode == "linear_flatten":
            self.layers["flatten"] = _Linear(d * h, out_dim, rng)
            self.output_dim = out_dim
        elif mode == "linear_per_feature":
            self.W = parameter(_uniform(rng, h, (d, h)))
            self.b = parameter(_uniform(rng, h, (d,)))
            self.output_dim = d
        elif mode == "conv":
            if d < 4 or h < 4:
                raise ConfigurationError(f"conv projection needs d >= 4 and h >= 4, got d={d}, h={h}")
            self.layers["conv1"] = _Linear(9, 8, rng)
            self.layers["conv2"] = _Linear(72, 16, rng)
            with precision(_DTYPE):
                self.norms = {"bn1": BatchNorm(8), "bn2": BatchNorm(16)}
            self.layers["out"] = _Linear(16 * (d // 4) * (h // 4), out_dim, rng)
            self.output_dim = out_dim
        else:
            self.output_dim = d

    def parameters(self) -> dict:
        params = {}
        for name, layer in self.layers.items():
            params.update(layer.parameters(f"proj.{name}"))
        for name, bn in self.norms.items():
            params.update({f"proj.{name}.{k}": v for k, v in bn.parameters().items()})
        if self.mode == "linear_per_feature":
            params.update({"proj.W": self.W, "proj.b": self.b})
        return params

    def __call__(self, H, training: bool = False) -> Tensor:
        H = H if isinstance(H, Tensor) else Tensor(H, dtype=_DTYPE)
        if H.ndim != 3 or H.shape[1:] != (self.d, self.h):
            raise DimensionError(f"projection expects (n, {self.d}, {self.h}), got {H.shape}")
        n = H.shape[0]
        if self.mode == "linear_flatten":
            return self.layers["flatten"](H.reshape(n, self.d * self.h))
        if self.mode == "linear_per_feature":
            return (H * self.W).sum(axis=-1) + self.b
        if self.mode == "mean_pool":
            return H.mean(axis=-1)
        if self.mode == "max_pool":
            return _max_last(H)
        x = H.reshape(n, 1, self.d, self.h)
        for conv, bn in (("conv1", "bn1"), ("conv2", "bn2")):
            layer = self.layers[conv]
            x = max_pool2d(self.norms[bn](conv2d(x, layer.W, layer.b), training).relu())
        return self.layers["out"](x.reshape(n, -1))


def _max_last(H: Tensor) -> Tensor:
    arg = H.data.argmax(axis=-1)
    out = np.take_along_axis(H.data, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros(H.shape, dtype=g.dtype)
        np.put_along_axis(dx, arg[..., None], g[..., None], axis=-1)
        return (dx,)

    return Tensor._from_op(out, (H,), backward)


def project(H, proj: Projection) -> np.ndarray:
    """Project a single (d, h) representation in evaluation mode."""
    H = np.asarray(H, dtype=_DTYPE)
    if H.ndim != 2:
        raise DimensionError(f"project expects a (d, h) matrix, got {H.shape}")
    with no_grad(), precision(_DTYPE):
        return proj(H[None], training=False).data[0]


# -- heads ---------------------------------------------------------------------------------------


@dataclass
class MLPConfig:
    num_layers: int = 4
    hidden: int = 256
    dropout: float = 0.1
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 0.0
    patience: int = 16
    max_epochs: int = 200


class _Probe:
    def __init__(self, projection: Projection | None, n_in: int, n_out: int, rng, mlp: MLPConfig | None = None):
        self.projection = projection
        self.mlp = mlp
        self.blocks: list[tuple[_Linear, BatchNorm]] = []
        if mlp is None:
            # zero start, as in plain logistic/least-squares regression
            self.out = _Linear(n_in, n_out, rng, zero=True)
            return
        self.inp = _Linear(n_in, mlp.hidden, rng)
        with precision(_DTYPE):
            for _ in range(mlp.num_layers):
                self.blocks.append((_Linear(mlp.hidden, mlp.hidden, rng), BatchNorm(mlp.hidden, channel_axis=-1)))
        self.out = _Linear(mlp.hidden, n_out, rng)

    def parameters(self) -> dict:
        params = dict(self.projection.parameters()) if self.projection else {}
        params.update(self.out.parameters("out"))
        if self.mlp is not None:
            params.update(self.inp.parameters("in"))
            for i, (lin, bn) in enumerate(self.blocks):
                params.update(lin.parameters(f"block{i}"))
                params.update({f"block{i}.bn.{k}": v for k, v in bn.parameters().items()})
        return params

    def buffers(self) -> list[BatchNorm]:
        norms = [bn for _, bn in self.blocks]
        if self.projection is not None:
            norms += list(self.projection.norms.values())
        return norms

    def __call__(self, X: np.ndarray, training: bool, rng=None) -> Tensor:
        x = Tensor(X, dtype=_DTYPE)
        if self.projection is not None:
            x = self.projection(x, training)
        elif x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        if self.mlp is not None:
            x = self.inp(x)
            for lin, bn in self.blocks:
                x = bn(dropout(lin(x).relu(), self.mlp.dropout, rng, training), training)
        return self.out(x)


# -- results and metrics ---------------------------------------------------------------------------


@dataclass
class ProbeResult:
    task: str
    metric: str
    value: float
    split: str
    seed: int
    head: str = "linear"
    projection: str = "none"
    n_train: int = 0
    n_eval: int = 0
    epochs_run: int = 0
    train_value: float = float("nan")

    def __post_init__(self):
        if self.metric == "accuracy" and not 0.0 <= self.value <= 1.0:
            raise DownstreamError(f"accuracy {self.value} outside [0, 1]")
        if self.metric == "rmse" and not self.value >= 0.0:
            raise DownstreamError(f"rmse {self.value} is negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate(pred, labels, task: str) -> float:
    """Accuracy (argmax of scores, or direct labels) or RMSE."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if len(labels) == 0 or len(pred) == 0:
        raise DownstreamError("cannot evaluate on empty input")
    if len(pred) != len(labels):
        raise DimensionError(f"{len(pred)} predictions for {len(labels)} labels")
    if task == CLASSIFICATION:
        hard = pred.argmax(axis=1) if pred.ndim == 2 else pred
        return float(np.mean(hard == labels))
    if task == REGRESSION:
        diff = pred.reshape(-1).astype(np.float64) - labels.astype(np.float64)
        return float(np.sqrt(np.mean(diff * diff)))
    raise DownstreamError(f"unknown task {task!r}")


def encode_labels(labels, task: str) -> tuple[np.ndarray, list]:
    """Integer class codes (classes sorted) or float targets."""
    if task == CLASSIFICATION:
        raw = [str(v) for v in labels]
        classes = sorted(set(raw))
        lookup = {c: i for i, c in enumerate(classes)}
        return np.asarray([lookup[v] for v in raw], dtype=int), classes
    if task == REGRESSION:
        try:
            return np.asarray([float(v) for v in labels], dtype=_DTYPE), []
        except ValueError as exc:
            raise DownstreamError(f"regression labels must be numeric: {exc}") from None
    raise DownstreamError(f"unknown task {task!r}")


# -- training ------------------------------------------------------------------------------------


def _loss(out: Tensor, y: np.ndarray, task: str) -> Tensor:
    if task == CLASSIFICATION:
        return cross_entropy(out, y)
    diff = out.reshape(-1) - y
    return (diff * diff).mean()


def _target_scaling(y: np.ndarray, train: np.ndarray, task: str):
    """Regression targets are fit in train-standardized units."""
    if task != REGRESSION:
        return y, lambda out: out
    loc = float(y[train].mean())
    scale = float(y[train].std()) or 1.0
    return (y - loc) / scale, lambda out: out.reshape(-1) * scale + loc


def _predict(probe: _Probe, X: np.ndarray, unscale, batch: int = 4096) -> np.ndarray:
    with no_grad():
        out = np.concatenate([probe(X[s : s + batch], training=False).data for s in range(0, len(X), batch)])
    return unscale(out)


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    # near-equal chunks so no batch of size one reaches a batch norm
    order = rng.permutation(n)
    return np.array_split(order, max(1, math.ceil(n / batch_size)))


def _prepare(embeddings, labels, task, splits, eval_split):
    X = np.array(embeddings, dtype=_DTYPE, copy=True)
    if X.ndim < 2:
        raise DimensionError(f"embeddings must be at least 2-d, got {X.shape}")
    if len(labels) != len(X):
        raise DimensionError(f"{len(labels)} labels for {len(X)} embeddings")
    y, classes = encode_labels(labels, task)
    if splits is None:
        splits = np.full(len(X), "train")
        eval_split = "train"
    splits = np.asarray(splits).astype(str)
    if len(splits) != len(X):
        raise DimensionError(f"{len(splits)} split labels for {len(X)} embeddings")
    train = np.flatnonzero(splits == "train")
    if len(train) == 0:
        raise DownstreamError("train split is empty")
    evaluation = np.flatnonzero(splits == eval_split)
    if len(evaluation) == 0:
        raise DownstreamError(f"evaluation split {eval_split!r} is empty")
    val = np.flatnonzero(splits == "val")
    return X, y, classes, splits, train, val if len(val) else train, evaluation, eval_split


def _make_projection(X, projection, out_dim, rng) -> Projection | None:
    if projection in (None, "none"):
        return None
    if X.ndim != 3:
        raise DimensionError(f"projection {projection!r} needs (n, d, h) embeddings, got {X.shape}")
    return Projection(projection, X.shape[1], X.shape[2], out_dim, rng)


def _n_in(X, proj: Projection | None) -> int:
    return proj.output_dim if proj is not None else int(np.prod(X.shape[1:]))


def train_linear_probe(
    embeddings,
    labels,
    task: str = CLASSIFICATION,
    epochs: int = 200,
    lr: float = 1e-3,
    *,
    splits=None,
    eval_split: str = "test",
    projection: str | None = None,
    out_dim: int | None = None,
    batch_size: int = 32,
    weight_decay: float = 0.0,
    seed: int = 0,
) -> ProbeResult:
    """Fit one linear layer (after an optional projection) and score it.

    Uses AdamW with cosine-annealed learning rate.  Without ``splits`` every
    row trains and the result is reported on the training rows.
    """
    X, y, classes, splits, train, _, evaluation, eval_split = _prepare(embeddings, labels, task, splits, eval_split)
    yt, unscale = _target_scaling(y, train, task)
    rng = np.random.default_rng(seed)
    n_out = max(len(classes), 1) if task == CLASSIFICATION else 1
    with precision(_DTYPE):
        proj = _make_projection(X, projection, out_dim, rng)
        probe = _Probe(proj, _n_in(X, proj), n_out, rng)
        params = probe.parameters()
        opt = AdamW(params, weight_decay=weight_decay)
        steps_per_epoch = max(1, math.ceil(len(train) / batch_size))
        total = steps_per_epoch * epochs
        step = 0
        for _ in range(epochs):
            for idx in _batches(len(train), batch_size, rng):
                rows = train[idx]
                opt.zero_grad()
                _loss(probe(X[rows], training=True, rng=rng), yt[rows], task).backward()
                opt.step(cosine_lr(step, total, lr))
                step += 1
        train_value = evaluate(_predict(probe, X[train], unscale), y[train], task)
        value = evaluate(_predict(probe, X[evaluation], unscale), y[evaluation], task)
    return ProbeResult(
        task=task,
        metric="accuracy" if task == CLASSIFICATION else "rmse",
        value=value,
        split=eval_split,
        seed=seed,
        head="linear",
        projection=projection or "none",
        n_train=len(train),
        n_eval=len(evaluation),
        epochs_run=epochs,
        train_value=train_value,
    )


def _better(a: float, b: float, task: str) -> bool:
    return a > b if task == CLASSIFICATION else a < b


def train_mlp_head(
    embeddings,
    labels,
    task: str = CLASSIFICATION,
    cfg: MLPConfig | None = None,
    *,
    splits=None,
    eval_split: str = "test",
    projection: str | None = None,
    out_dim: int | None = None,
    seed: int = 0,
) -> ProbeResult:
    """Input projection, ``cfg.num_layers`` hidden blocks, output layer.

    Training stops once the validation metric has not improved for
    ``cfg.patience`` epochs; the best weights (and batch-norm statistics)
    are restored before scoring.
    """
    cfg = cfg or MLPConfig()
    X, y, classes, splits, train, val, evaluation, eval_split = _prepare(embeddings, labels, task, splits, eval_split)
    yt, unscale = _target_scaling(y, train, task)
    rng = np.random.default_rng(seed)
    n_out = max(len(classes), 1) if task == CLASSIFICATION else 1
    with precision(_DTYPE):
        proj = _make_projection(X, projection, out_dim, rng)
        probe = _Probe(proj, _n_in(X, proj), n_out, rng, mlp=cfg)
        params = probe.parameters()
        opt = AdamW(params, weight_decay=cfg.weight_decay)
        best_value, best_epoch, best_state = None, 0, None
        epochs_run = 0
        for epoch in range(1, cfg.max_epochs + 1):
            for idx in _batches(len(train), cfg.batch_size, rng):
                rows = train[idx]
                opt.zero_grad()
                _loss(probe(X[rows], training=True, rng=rng), yt[rows], task).backward()
                opt.step(cfg.lr)
            epochs_run = epoch
            current = evaluate(_predict(probe, X[val], unscale), y[val], task)
            if best_value is None or _better(current, best_value, task):
                best_value, best_epoch = current, epoch
                best_state = (
                    {k: p.data.copy() for k, p in params.items()},
                    [(bn.running_mean.copy(), bn.running_var.copy()) for bn in probe.buffers()],
                )
            elif epoch - best_epoch >= cfg.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
        weights, stats = best_state
        for k, p in params.items():
            p.data = weights[k]
        for bn, (mean, var) in zip(probe.buffers(), stats):
            bn.running_mean, bn.running_var = mean, var
        train_value = evaluate(_predict(probe, X[train], unscale), y[train], task)
        value = evaluate(_predict(probe, X[evaluation], unscale), y[evaluation], task)
    return ProbeResult(
        task=task,
        metric="accuracy" if task == CLASSIFICATION else "rmse",
        value=value,
        split=eval_split,
        seed=seed,
        head="mlp",
        projection=projection or "none",
        n_train=len(train),
        n_eval=len(evaluation),
        epochs_run=epochs_run,
        train_value=train_value,
    )
