"""Embedding layers, REG tokens, context/target encoders and the predictor.

Parameters live in one flat ``name -> Tensor`` mapping inside
:class:`ModelState`, grouped by prefix:

* ``embedding.``  per-feature linear maps, index/type embeddings, REG tokens
* ``context.``    context encoder (trained by gradient descent)
* ``target.``     target encoder (EMA of ``context.``; never receives grads)
* ``predictor.``  predictor transformer, mask token, positional embeddings

The forward functions are written for a leading batch axis.  Batched
training keeps every sequence at full length and hides dropped features
through attention key masks, which for the kept rows is the same
computation as physically dropping them (attention is the only op that
mixes tokens).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import container
from .data import EncodedSample, FeatureSchema
from .masking import Mask
from .numeric import (
    ConfigurationError,
    DimensionError,
    Tensor,
    concat,
    dropout,
    gelu,
    get_default_dtype,
    layer_norm,
    linear_forward,
    multi_head_self_attention,
    no_grad,
)

KIND_INDEX = {"numerical": 0, "categorical": 1}


@dataclass(frozen=True)
class ModelDims:
    d: int
    cardinalities: tuple
    kinds: tuple
    hidden: int = 16
    num_heads: int = 2
    num_layers: int = 2
    dim_feedforward: int = 64
    dropout: float = 0.0
    pred_embed_dim: int = 8
    pred_num_layers: int = 2
    pred_num_heads: int = 2
    pred_dropout: float = 0.0
    n_reg: int = 1

    def __post_init__(self):
        if self.hidden % self.num_heads:
            raise ConfigurationError(
                f"model_dim_hidden={self.hidden} not divisible by model_num_heads={self.num_heads}"
            )
        if self.pred_embed_dim % self.pred_num_heads:
            raise ConfigurationError(
                f"pred_embed_dim={self.pred_embed_dim} not divisible by pred_num_heads={self.pred_num_heads}"
            )
        if self.pred_embed_dim > self.hidden:
            raise ConfigurationError("pred_embed_dim must not exceed model_dim_hidden")
        if self.n_reg < 0:
            raise ConfigurationError("n_reg_tokens must be >= 0")
        if len(self.cardinalities) != self.d or len(self.kinds) != self.d:
            raise ConfigurationError("cardinalities/kinds must have one entry per feature")

    @classmethod
    def from_schema(cls, schema: FeatureSchema, **kwargs) -> "ModelDims":
        return cls(d=schema.d, cardinalities=tuple(schema.cardinalities), kinds=tuple(schema.kinds), **kwargs)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["cardinalities"] = list(self.cardinalities)
        out["kinds"] = list(self.kinds)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDims":
        d = dict(d)
        d["cardinalities"] = tuple(d["cardinalities"])
        d["kinds"] = tuple(d["kinds"])
        return cls(**d)


# -- initialization --------------------------------------------------------------


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _normal(rng, shape, std=0.02):
    return rng.normal(0.0, std, size=shape)


def _block_init(rng, h: int, ff: int) -> dict:
    p = {
        "ln1.gamma": np.ones(h),
        "ln1.beta": np.zeros(h),
        "ln2.gamma": np.ones(h),
        "ln2.beta": np.zeros(h),
        "ff.W1": _uniform(rng, h, (h, ff)),
        "ff.b1": _uniform(rng, h, (ff,)),
        "ff.W2": _uniform(rng, ff, (ff, h)),
        "ff.b2": _uniform(rng, ff, (h,)),
    }
    for key in ("q", "k", "v", "o"):
        p[f"attn.W{key}"] = _uniform(rng, h, (h, h))
        p[f"attn.b{key}"] = _uniform(rng, h, (h,))
    return p


def init_arrays(dims: ModelDims, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameter arrays; the target encoder starts as a copy of the context encoder."""
    h, hp = dims.hidden, dims.pred_embed_dim
    arrays: dict[str, np.ndarray] = {}
    for j, e in enumerate(dims.cardinalities):
        arrays[f"embedding.W.{j}"] = _uniform(rng, e, (e, h))
        arrays[f"embedding.b.{j}"] = _uniform(rng, e, (h,))
    arrays["embedding.index"] = _normal(rng, (dims.d, h))
    arrays["embedding.type"] = _normal(rng, (2, h))
    arrays["embedding.reg"] = _normal(rng, (dims.n_reg, h))
    for layer in range(dims.num_layers):
        for k, v in _block_init(rng, h, dims.dim_feedforward).items():
            arrays[f"context.layers.{layer}.{k}"] = v
    for k in [k for k in arrays if k.startswith("context.")]:
        arrays["target." + k[len("context.") :]] = arrays[k].copy()
    arrays["predictor.in.W"] = _uniform(rng, h, (h, hp))
    arrays["predictor.in.b"] = _uniform(rng, h, (hp,))
    arrays["predictor.mask_token"] = _normal(rng, (hp,))
    arrays["predictor.pos"] = _normal(rng, (dims.d, hp))
    for layer in range(dims.pred_num_layers):
        for k, v in _block_init(rng, hp, 4 * hp).items():
            arrays[f"predictor.layers.{layer}.{k}"] = v
    arrays["predictor.norm.gamma"] = np.ones(hp)
    arrays["predictor.norm.beta"] = np.zeros(hp)
    arrays["predictor.out.W"] = _uniform(rng, hp, (hp, h))
    arrays["predictor.out.b"] = _uniform(rng, hp, (h,))
    return arrays


class ModelState:
    """All learnable parameters plus the dimensions that shape them."""

    def __init__(self, dims: ModelDims, params: dict[str, Tensor]):
        self.dims = dims
        self.params = params

    @classmethod
    def initialize(cls, dims: ModelDims, rng, dtype=None) -> "ModelState":
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        dtype = dtype or get_default_dtype()
        params = {}
        for name, arr in init_arrays(dims, rng).items():
            trainable = not name.startswith("target.")
            params[name] = Tensor(arr, requires_grad=trainable, name=name, dtype=dtype)
        return cls(dims, params)

    @classmethod
    def from_arrays(cls, dims: ModelDims, arrays: dict[str, np.ndarray], dtype=None) -> "ModelState":
        dtype = dtype or get_default_dtype()
        expected = set(init_arrays(dims, np.random.default_rng(0)))
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise DimensionError(f"parameter set mismatch: missing={missing[:5]} extra={extra[:5]}")
        params = {
            name: Tensor(arrays[name], requires_grad=not name.startswith("target."), name=name, dtype=dtype)
            for name in sorted(expected, key=list(arrays).index)
        }
        return cls(dims, params)

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix`` with the prefix stripped."""
        prefix = prefix.rstrip(".") + "."
        return {k[len(prefix) :]: v for k, v in self.params.items() if k.startswith(prefix)}

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith("target.")}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def clone(self) -> "ModelState":
        params = {}
        for k, v in self.params.items():
            params[k] = Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k, dtype=v.data.dtype)
        return ModelState(self.dims, params)

    def astype(self, dtype) -> "ModelState":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    def checksum(self, prefix: str = "") -> str:
        import hashlib

        digest = hashlib.sha256()
        for k in sorted(self.params):
            if k.startswith(prefix):
                digest.update(k.encode())
                digest.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return digest.hexdigest()


# -- embeddings ---------------------------------------------------------------------


def _feature_weights(state: ModelState) -> tuple[Tensor, Tensor]:
    d = state.dims.d
    emb = state.group("embedding")
    W = concat([emb[f"W.{j}"] for j in range(d)], axis=0)  # (E, h)
    b = concat([emb[f"b.{j}"].reshape(1, -1) for j in range(d)], axis=0)  # (d, h)
    return W, b


def _segment_matrix(cardinalities, dtype) -> np.ndarray:
    d, total = len(cardinalities), int(sum(cardinalities))
    S = np.zeros((d, total), dtype=dtype)
    start = 0
    for j, e in enumerate(cardinalities):
        S[j, start : start + e] = 1.0
        start += e
    return S


def embed_features(x: np.ndarray, state: ModelState) -> Tensor:
    """Embed every feature of a batch of concatenated encodings.

    ``x`` is (B, sum e_j); returns (B, d, h) with row j equal to
    ``W_j E(x_j) + b_j + index_j + type[kind_j]``.
    """
    dims = state.dims
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != sum(dims.cardinalities):
        raise DimensionError(
            f"encoded batch has shape {x.shape}, expected (B, {sum(dims.cardinalities)})"
        )
    W, b = _feature_weights(state)
    dtype = W.data.dtype
    scaled = Tensor(x[:, :, None], dtype=dtype) * W  # (B, E, h)
    if len(dims.cardinalities) == x.shape[1]:
        tokens = scaled
    else:
        tokens = Tensor(_segment_matrix(dims.cardinalities, dtype), dtype=dtype) @ scaled
    emb = state.group("embedding")
    kinds = np.array([KIND_INDEX[k] for k in dims.kinds])
    return tokens + b + emb["index"] + emb["type"][kinds]


def append_reg(tokens: Tensor, state: ModelState) -> Tensor:
    """Append the REG tokens after the feature rows (no index/type embedding)."""
    n_reg = state.dims.n_reg
    if n_reg == 0:
        return tokens
    reg = state.params["embedding.reg"]
    lead = tokens.shape[:-2]
    zeros = Tensor(np.zeros(lead + (1, 1), dtype=tokens.dtype), dtype=tokens.dtype)
    return concat([tokens, reg + zeros], axis=-2)


def embed_sample(encoded: EncodedSample, m: Mask | None, state: ModelState) -> Tensor:
    """Embedded representation of one sample: (l_m + n_reg, h), REG rows last."""
    dims = state.dims
    if len(encoded) != dims.d:
        raise DimensionError(f"sample has {len(encoded)} features, model expects {dims.d}")
    for j, (v, e) in enumerate(zip(encoded.values, dims.cardinalities)):
        if v.shape != (e,):
            raise DimensionError(f"feature {j} encoding has size {v.shape}, W_{j} expects {e}")
    tokens = embed_features(encoded.flat()[None, :], state)[0]  # (d, h)
    if m is not None:
        if m.d != dims.d:
            raise DimensionError(f"mask length {m.d} != d={dims.d}")
        tokens = tokens[m.visible]
    return append_reg(tokens, state)


# -- transformer blocks ----------------------------------------------------------------


def _attention_params(p: dict, prefix: str) -> dict:
    return {k: p[f"{prefix}attn.{k}"] for k in ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")}


def transformer_block(
    x: Tensor,
    p: dict,
    prefix: str,
    num_heads: int,
    key_mask=None,
    p_drop: float = 0.0,
    rng=None,
    training: bool = False,
) -> Tensor:
    """Pre-LN block: x + Attn(LN(x)), then x + FFN(LN(x)) with a GELU FFN."""
    a = layer_norm(x, p[prefix + "ln1.gamma"], p[prefix + "ln1.beta"])
    a = multi_head_self_attention(a, _attention_params(p, prefix), num_heads, key_mask=key_mask)
    x = x + dropout(a, p_drop, rng, training)
    f = layer_norm(x, p[prefix + "ln2.gamma"], p[prefix + "ln2.beta"])
    f = linear_forward(gelu(linear_forward(f, p[prefix + "ff.W1"], p[prefix + "ff.b1"])), p[prefix + "ff.W2"], p[prefix + "ff.b2"])
    return x + dropout(f, p_drop, rng, training)


def encoder_forward(
    z: Tensor, p: dict, dims: ModelDims, key_mask=None, rng=None, training: bool = False
) -> Tensor:
    x = z
    for layer in range(dims.num_layers):
        x = transformer_block(
            x, p, f"layers.{layer}.", dims.num_heads, key_mask, dims.dropout, rng, training
        )
    return x


def context_forward(z: Tensor, state: ModelState, key_mask=None, rng=None, training: bool = False) -> Tensor:
    if z.shape[-2] < 1:
        raise DimensionError("context encoder needs at least one token")
    return encoder_forward(z, state.group("context"), state.dims, key_mask, rng, training)


def target_forward(z: Tensor, state: ModelState) -> Tensor:
    """Target encoder pass.  The output is a stop-gradient tensor: using it
    as a backward root raises, and no target parameter ever sees a gradient."""
    with no_grad():
        out = encoder_forward(z.detach(), state.group("target"), state.dims)
    return out.stop_gradient()


def strip_reg(hrep: Tensor, n_reg: int) -> Tensor:
    if n_reg == 0:
        return hrep
    n = hrep.shape[-2] - n_reg
    if n < 0:
        raise DimensionError(f"cannot strip {n_reg} REG rows from {hrep.shape[-2]} rows")
    return hrep[..., :n, :]


# -- predictor ---------------------------------------------------------------------------


def predictor_forward(
    h_ctx: Tensor,
    ctx_visible: np.ndarray,
    tgt_visible: np.ndarray,
    state: ModelState,
    rng=None,
    training: bool = False,
) -> Tensor:
    """Batched predictor over full-length slots.

    ``h_ctx`` is (N, d, h) context-encoder output (REG stripped) where only
    rows flagged in ``ctx_visible`` (N, d) are real.  Mask tokens for all d
    features are appended; only those flagged in ``tgt_visible`` take part
    in attention.  Returns (N, d, h): row j is the prediction for feature j
    (meaningful where ``tgt_visible`` is set).
    """
    dims = state.dims
    p = state.group("predictor")
    n = h_ctx.shape[0]
    d = dims.d
    ctx = linear_forward(h_ctx, p["in.W"], p["in.b"])  # (N, d, hp)
    queries = p["pos"] + p["mask_token"]  # (d, hp)
    zeros = Tensor(np.zeros((n, 1, 1), dtype=ctx.dtype), dtype=ctx.dtype)
    seq = concat([ctx, queries + zeros], axis=1)  # (N, 2d, hp)
    key_mask = np.concatenate([ctx_visible, tgt_visible], axis=1)
    for layer in range(dims.pred_num_layers):
        seq = transformer_block(
            seq, p, f"layers.{layer}.", dims.pred_num_heads, key_mask, dims.pred_dropout, rng, training
        )
    out = seq[:, d:, :]
    out = layer_norm(out, p["norm.gamma"], p["norm.beta"])
    return linear_forward(out, p["out.W"], p["out.b"])


def predict_targets(h_ctx: Tensor, m_k: Mask, state: ModelState) -> Tensor:
    """Predict the l_{m_k} visible target rows of one sample from its context rows.

    ``h_ctx`` is (l_c, h) with REG already removed.
    """
    dims = state.dims
    if h_ctx.ndim != 2 or h_ctx.shape[0] < 1:
        raise DimensionError("predictor needs a non-empty (l_c, h) context")
    if h_ctx.shape[1] != dims.hidden:
        raise DimensionError(f"context width {h_ctx.shape[1]} != hidden {dims.hidden}")
    if m_k.visible_count < 1:
        raise DimensionError("target mask has no visible rows")
    p = state.group("predictor")
    ctx = linear_forward(h_ctx, p["in.W"], p["in.b"])
    targets = m_k.visible
    queries = p["pos"][targets] + p["mask_token"]
    seq = concat([ctx, queries], axis=0)
    for layer in range(dims.pred_num_layers):
        seq = transformer_block(seq, p, f"layers.{layer}.", dims.pred_num_heads)
    out = seq[h_ctx.shape[0] :]
    out = layer_norm(out, p["norm.gamma"], p["norm.beta"])
    return linear_forward(out, p["out.W"], p["out.b"])


# -- representations for analysis / downstream --------------------------------------------


def represent(x: np.ndarray, state: ModelState, batch_size: int = 512) -> np.ndarray:
    """Context-encoder output for unmasked samples with REG rows stripped: (n, d, h)."""
    out = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            tokens = append_reg(embed_features(x[start : start + batch_size], state), state)
            h = context_forward(tokens, state)
            out.append(strip_reg(h, state.dims.n_reg).data)
    if not out:
        return np.zeros((0, state.dims.d, state.dims.hidden), dtype=get_default_dtype())
    return np.concatenate(out, axis=0)


# -- checkpoints ------------------------------------------------------------------------------


def save_checkpoint(path, state: ModelState, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["dims"] = state.dims.to_dict()
    container.save(path, state.arrays(), meta)


def load_checkpoint(path, dtype=None) -> tuple[ModelState, dict]:
    arrays, meta = container.load(path)
    if "dims" not in meta:
        raise container.ContainerError(f"{path}: not a model checkpoint (no dims in manifest)")
    dims = ModelDims.from_dict(meta["dims"])
    return ModelState.from_arrays(dims, arrays, dtype=dtype), meta
