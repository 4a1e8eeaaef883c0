"""Latent-prediction loss, EMA target updates, AdamW, schedules and the pretraining loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .data import Encoder, TabularDataset, encode_split
from .masking import MaskSampler, check_feasible
from .model import (
    ModelDims,
    ModelState,
    append_reg,
    context_forward,
    embed_features,
    predictor_forward,
    save_checkpoint,
    strip_reg,
    target_forward,
)
from .numeric import ConfigurationError, DimensionError, Tensor, get_default_dtype

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries a dict of diagnostics for the offending batch."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    # model / predictor hyperparameters, named as in the hyperparameter search space
    model_num_heads: int = 2
    model_dim_hidden: int = 16
    model_num_layers: int = 2
    model_dim_feedforward: int = 64
    model_dropout_prob: float = 0.0
    exp_lr: float = 1e-3
    mask_min_ctx_share: float = 0.15
    mask_max_ctx_share: float = 0.4
    mask_min_trgt_share: float = 0.15
    mask_max_trgt_share: float = 0.4
    pred_num_layers: int = 2
    pred_embed_dim: int = 8
    pred_num_heads: int = 2
    pred_p_dropout: float = 0.0
    # training fields
    batch_size: int = 512
    epochs: int = 50
    weight_decay: float = 0.0
    ema_start: float = 0.996
    ema_end: float = 1.0
    n_context: int = 1
    n_target: int = 4
    n_reg_tokens: int = 1
    seed: int = 0
    loss_per_element: bool = False
    checkpoint_every: int = 1
    analysis_every: int = 0
    analysis_sample_cap: int = 512

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (0.0 < self.ema_start <= self.ema_end <= 1.0):
            raise ConfigurationError("EMA momentum must satisfy 0 < ema_start <= ema_end <= 1")
        if self.mask_min_ctx_share > self.mask_max_ctx_share:
            raise ConfigurationError("mask_min_ctx_share > mask_max_ctx_share")
        if self.mask_min_trgt_share > self.mask_max_trgt_share:
            raise ConfigurationError("mask_min_trgt_share > mask_max_trgt_share")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        if self.exp_lr <= 0:
            raise ConfigurationError("exp_lr must be positive")
        if self.n_reg_tokens < 0:
            raise ConfigurationError("n_reg_tokens must be >= 0")
        if self.n_context < 1 or self.n_target < 1:
            raise ConfigurationError("n_context and n_target must be >= 1")

    @property
    def ctx_share(self) -> tuple[float, float]:
        return (self.mask_min_ctx_share, self.mask_max_ctx_share)

    @property
    def tgt_share(self) -> tuple[float, float]:
        return (self.mask_min_trgt_share, self.mask_max_trgt_share)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**dict(d))

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))

    def model_dims(self, schema) -> ModelDims:
        return ModelDims.from_schema(
            schema,
            hidden=self.model_dim_hidden,
            num_heads=self.model_num_heads,
            num_layers=self.model_num_layers,
            dim_feedforward=self.model_dim_feedforward,
            dropout=self.model_dropout_prob,
            pred_embed_dim=self.pred_embed_dim,
            pred_num_layers=self.pred_num_layers,
            pred_num_heads=self.pred_num_heads,
            pred_dropout=self.pred_p_dropout,
            n_reg=self.n_reg_tokens,
        )


# -- loss ------------------------------------------------------------------------------------


def tjepa_loss(preds, targets, n_context: int | None = None, n_target: int | None = None) -> Tensor:
    """Squared l2 distance averaged over (context, target) mask pairs.

    ``preds``/``targets`` are flat lists over all pairs.  Each term is the
    sum of squared entries of its l x h block; the sum over pairs is divided
    by ``|M_context| * |M_target|`` (defaults to the number of pairs).
    Targets are treated as constants.
    """
    preds, targets = list(preds), list(targets)
    if len(preds) != len(targets) or not preds:
        raise DimensionError(f"{len(preds)} predictions vs {len(targets)} targets")
    pairs = len(preds) if n_context is None or n_target is None else n_context * n_target
    if pairs != len(preds):
        raise DimensionError(f"expected {pairs} mask pairs, got {len(preds)}")
    total = None
    for p, t in zip(preds, targets):
        t_data = t.data if isinstance(t, Tensor) else np.asarray(t)
        if p.shape != t_data.shape:
            raise DimensionError(f"prediction {p.shape} vs target {t_data.shape}")
        diff = p - Tensor(t_data, dtype=p.dtype)
        term = (diff * diff).sum()
        total = term if total is None else total + term
    return total * (1.0 / pairs)


# -- EMA / schedules ----------------------------------------------------------------------------


def ema_update(target: Mapping[str, Tensor], online: Mapping[str, Tensor], momentum: float) -> None:
    """In place: ``target <- m * target + (1 - m) * online``."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigurationError(f"momentum must be in [0, 1], got {momentum}")
    if set(target) != set(online):
        raise DimensionError("EMA parameter trees differ")
    for name, t in target.items():
        o = online[name]
        if t.shape != o.shape:
            raise DimensionError(f"EMA shape mismatch for {name}: {t.shape} vs {o.shape}")
        t.data = momentum * t.data + (1.0 - momentum) * o.data


def momentum_schedule(step: int, total_steps: int, ema_start: float = 0.996, ema_end: float = 1.0) -> float:
    if total_steps <= 0:
        return ema_end
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return ema_start + (ema_end - ema_start) * step / total_steps


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from ``lr0`` down to 0."""
    if total_steps <= 0:
        return lr0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


# -- optimizer --------------------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: Mapping[str, Tensor], weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step_count = 0
        self.skipped = 0

    def step(self, lr: float) -> bool:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            logger.warning("non-finite gradient; optimizer step skipped (%d so far)", self.skipped)
            return False
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1.0 - lr * self.weight_decay) - lr * update).astype(p.data.dtype)
        return True

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adamw_step(params, grads, state: AdamW, lr: float):
    """Functional wrapper: install ``grads`` then step ``state``."""
    for k, g in grads.items():
        params[k].grad = None if g is None else np.asarray(g, dtype=params[k].data.dtype)
    state.step(lr)
    return params, state


# -- one training step ---------------------------------------------------------------------------------


def batch_loss(
    state: ModelState,
    x: np.ndarray,
    ctx_visible: np.ndarray,
    tgt_visible: np.ndarray,
    rng: np.random.Generator | None = None,
    training: bool = False,
    per_element: bool = False,
) -> Tensor:
    """Mean over samples of the mask-pair-averaged latent prediction loss.

    ``x`` is (B, E) encoded samples, ``ctx_visible`` (B, C, d) and
    ``tgt_visible`` (B, K, d) are visible-feature indicators.
    """
    dims = state.dims
    B, C, d = ctx_visible.shape
    K = tgt_visible.shape[1]
    n_reg = dims.n_reg
    reg_visible = np.ones((B * C, n_reg), dtype=bool)

    tokens = embed_features(x, state)  # (B, d, h)
    with_reg = append_reg(tokens, state)  # (B, d + n_reg, h)

    h_target = strip_reg(target_forward(with_reg, state), n_reg)  # (B, d, h), constant

    ctx_tokens = with_reg
    if C > 1:
        ctx_tokens = with_reg[np.repeat(np.arange(B), C)]
    ctx_mask = np.concatenate([ctx_visible.reshape(B * C, d), reg_visible], axis=1)
    h_ctx = strip_reg(context_forward(ctx_tokens, state, ctx_mask, rng, training), n_reg)

    # every (context, target) pair becomes one predictor sequence
    pair_ctx = np.repeat(np.arange(B * C), K)  # (B*C*K,)
    ctx_rows = h_ctx if K == 1 else h_ctx[pair_ctx]
    ctx_vis = ctx_visible.reshape(B * C, d)[pair_ctx]
    tgt_vis = np.broadcast_to(tgt_visible[:, None], (B, C, K, d)).reshape(B * C * K, d)
    preds = predictor_forward(ctx_rows, ctx_vis, tgt_vis, state, rng, training)  # (N, d, h)

    sample_of_pair = np.repeat(np.arange(B), C * K)
    targets = h_target.data[sample_of_pair]
    weight = tgt_vis[:, :, None].astype(preds.dtype)
    diff = (preds - Tensor(targets, dtype=preds.dtype)) * weight
    sq = diff * diff
    if per_element:
        counts = (tgt_vis.sum(axis=1) * dims.hidden).astype(preds.dtype)
        sq = sq * (1.0 / counts)[:, None, None]
    return sq.sum() * (1.0 / (B * C * K))


# -- pretraining loop ------------------------------------------------------------------------------------


@dataclass
class PretrainResult:
    state: ModelState
    log: list[dict]
    snapshots: list[dict]
    optimizer: AdamW | None = None
    ema_trace: list[tuple] | None = None
    rng_state: dict | None = None


def _spawn_rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(4)
    return {
        name: np.random.default_rng(child)
        for name, child in zip(("init", "masks", "shuffle", "dropout"), children)
    }


def rng_states(rngs: Mapping[str, np.random.Generator]) -> dict:
    return {k: g.bit_generator.state for k, g in rngs.items()}


def pretrain(
    ds: TabularDataset,
    config: TrainConfig,
    out_dir=None,
    split: str = "train",
    snapshot_fn: Callable[[ModelState, int], dict] | None = None,
    record_ema: bool = False,
    log_fh=None,
) -> PretrainResult:
    """Run self-supervised pretraining on one split of a fitted dataset.

    Each step samples a fresh mask set per sample, embeds, runs the context
    and target encoders, predicts every target block from every context,
    backpropagates into embeddings, context encoder and predictor, steps
    AdamW and moves the target encoder by EMA.  With ``out_dir`` set, an
    epoch-0 checkpoint plus one every ``checkpoint_every`` epochs are
    written along with ``metrics.jsonl``.
    """
    schema = ds.schema
    dims = config.model_dims(schema)
    check_feasible(schema.d, config.ctx_share, config.tgt_share)
    rngs = _spawn_rngs(config.seed)
    dtype = get_default_dtype()
    state = ModelState.initialize(dims, rngs["init"], dtype=dtype)
    encoder = Encoder(schema)
    X = encode_split(ds, split, encoder).astype(dtype)
    n = len(X)
    if n == 0:
        raise DimensionError(f"split {split!r} is empty")
    sampler = MaskSampler(schema.d, config.n_context, config.n_target, config.ctx_share, config.tgt_share, rngs["masks"])
    trainable = state.trainable()
    optimizer = AdamW(trainable, weight_decay=config.weight_decay)
    context_params = state.group("context")
    target_params = state.group("target")

    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    log: list[dict] = []
    snapshots: list[dict] = []
    ema_trace: list[tuple] | None = [] if record_ema else None
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics_fh = log_fh
    own_fh = False
    if metrics_fh is None and out_dir is not None:
        metrics_fh = (out_dir / "metrics.jsonl").open("w")
        own_fh = True

    def checkpoint(epoch: int) -> None:
        if out_dir is None:
            return
        save_checkpoint(
            out_dir / f"checkpoint_epoch{epoch:04d}",
            state,
            {
                "epoch": epoch,
                "schema": schema.to_dict(),
                "schema_hash": schema.hash(),
                "config": config.to_dict(),
                "rng_state": rng_states(rngs),
                "optimizer_step": optimizer.step_count,
            },
        )

    def snapshot(epoch: int) -> None:
        if snapshot_fn is None:
            return
        record = {"epoch": epoch, **snapshot_fn(state, epoch)}
        snapshots.append(record)

    try:
        checkpoint(0)
        if config.analysis_every:
            snapshot(0)
        step = 0
        for epoch in range(1, config.epochs + 1):
            order = rngs["shuffle"].permutation(n)
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                ctx_vis, tgt_vis = sampler.sample_batch(len(idx))
                lr = cosine_lr(step, total_steps, config.exp_lr)
                optimizer.zero_grad()
                loss = batch_loss(
                    state, X[idx], ctx_vis, tgt_vis, rngs["dropout"], training=True,
                    per_element=config.loss_per_element,
                )
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at step {step} (epoch {epoch})",
                        {
                            "step": step,
                            "epoch": epoch,
                            "batch_rows": idx.tolist(),
                            "input_abs_max": float(np.abs(X[idx]).max()),
                            "param_abs_max": {k: float(np.abs(p.data).max()) for k, p in trainable.items()},
                        },
                    )
                loss.backward()
                optimizer.step(lr)
                step += 1
                m = momentum_schedule(step, total_steps, config.ema_start, config.ema_end)
                if ema_trace is not None:
                    ema_trace.append(
                        (
                            m,
                            {k: v.data.copy() for k, v in target_params.items()},
                            {k: v.data.copy() for k, v in context_params.items()},
                        )
                    )
                ema_update(target_params, context_params, m)
                record = {"step": step, "epoch": epoch, "loss": value, "lr": lr, "momentum": m}
                log.append(record)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(record) + "\n")
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                checkpoint(epoch)
            elif epoch == config.epochs:
                checkpoint(epoch)
            if config.analysis_every and epoch % config.analysis_every == 0:
                snapshot(epoch)
            logger.info("epoch %d mean loss %.6g", epoch, epoch_mean_losses(log).get(epoch, float("nan")))
    finally:
        if own_fh:
            metrics_fh.close()
    return PretrainResult(state, log, snapshots, optimizer, ema_trace, rng_states(rngs))


def epoch_mean_losses(log: list[dict]) -> dict[int, float]:
    sums: dict[int, list[float]] = {}
    for rec in log:
        sums.setdefault(rec["epoch"], []).append(rec["loss"])
    return {e: float(np.mean(v)) for e, v in sums.items()}
