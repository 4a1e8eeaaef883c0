import json
import math

import numpy as np
import pytest

from tjepa import container
from tjepa.data import EncodedSample
from tjepa.masking import Mask, apply_target_mask
from tjepa.model import (
    ModelDims,
    ModelState,
    append_reg,
    context_forward,
    embed_features,
    embed_sample,
    load_checkpoint,
    predict_targets,
    predictor_forward,
    represent,
    save_checkpoint,
    strip_reg,
    target_forward,
)
from tjepa.numeric import ConfigurationError, DimensionError, GradientContractError, Tensor
from tjepa.training import batch_loss, ema_update

from conftest import tiny_dims, tiny_state


# -- plain numpy oracle of a pre-LN block ----------------------------------------------------------


def np_ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def np_block(X, P, prefix, heads):
    g = lambda k: P[prefix + k]
    A = np_ln(X, g("ln1.gamma"), g("ln1.beta"))
    n, h = A.shape
    dk = h // heads
    Q, K, V = (A @ g(f"attn.W{c}") + g(f"attn.b{c}") for c in "qkv")
    ctx = np.zeros_like(A)
    for hd in range(heads):
        s = slice(hd * dk, (hd + 1) * dk)
        for i in range(n):
            scores = np.array([Q[i, s] @ K[j, s] for j in range(n)]) / math.sqrt(dk)
            w = np.exp(scores - scores.max())
            w /= w.sum()
            ctx[i, s] = sum(w[j] * V[j, s] for j in range(n))
    X = X + ctx @ g("attn.Wo") + g("attn.bo")
    F = np_ln(X, g("ln2.gamma"), g("ln2.beta"))
    return X + np_gelu(F @ g("ff.W1") + g("ff.b1")) @ g("ff.W2") + g("ff.b2")


def arrays_of(state):
    return {k: v.data for k, v in state.params.items()}


def numeric_sample(rng, d):
    return EncodedSample([np.array([v]) for v in rng.standard_normal(d)])


# -- embedding ------------------------------------------------------------------------------------------


def test_embed_sample_shapes(rng):
    state = tiny_state(d=2)
    assert embed_sample(numeric_sample(rng, 2), Mask(np.array([1, 0])), state).shape == (2, 8)
    state8 = tiny_state(d=8)
    assert embed_sample(numeric_sample(rng, 8), None, state8).shape == (9, 8)
    assert embed_sample(numeric_sample(rng, 8), Mask.null(8), state8).shape == (9, 8)


def test_embed_zeroed_params_gives_zero(rng):
    state = tiny_state(d=3)
    for k, p in state.params.items():
        if k.startswith("embedding."):
            p.data = np.zeros_like(p.data)
    out = embed_sample(numeric_sample(rng, 3), None, state)
    assert np.all(out.data == 0)


def test_embed_row_formula(rng):
    dims = tiny_dims(d=3, cards=(1, 3, 1), kinds=("numerical", "categorical", "numerical"))
    state = ModelState.initialize(dims, rng, dtype=np.float64)
    sample = EncodedSample([np.array([0.7]), np.array([0.0, 1.0, 0.0]), np.array([-1.2])])
    out = embed_sample(sample, Mask(np.array([0, 0, 1])), state).data
    P = arrays_of(state)
    for row, j, kind in ((0, 0, 0), (1, 1, 1)):
        expect = sample.values[j] @ P[f"embedding.W.{j}"] + P[f"embedding.b.{j}"] + P["embedding.index"][j] + P["embedding.type"][kind]
        np.testing.assert_allclose(out[row], expect, atol=1e-12)
    np.testing.assert_array_equal(out[2], P["embedding.reg"][0])


def test_embed_rejects_wrong_cardinality(rng):
    dims = tiny_dims(d=2, cards=(1, 3), kinds=("numerical", "categorical"))
    state = ModelState.initialize(dims, rng)
    with pytest.raises(DimensionError):
        embed_sample(EncodedSample([np.array([1.0]), np.array([1.0, 0.0])]), None, state)


def test_dims_validation():
    with pytest.raises(ConfigurationError):
        tiny_dims(h=6, heads=4)
    with pytest.raises(ConfigurationError):
        tiny_dims(h=8, hp=16, pred_heads=2)


# -- encoders -------------------------------------------------------------------------------------------------


def test_zeroed_residual_branches_are_identity(rng):
    state = tiny_state(layers=2)
    for k, p in state.group("context").items():
        if k.endswith(("attn.Wo", "attn.bo", "ff.W2", "ff.b2")):
            p.data = np.zeros_like(p.data)
    z = Tensor(rng.standard_normal((5, 8)))
    np.testing.assert_array_equal(context_forward(z, state).data, z.data)


@pytest.mark.parametrize("tokens", [1, 4])
def test_context_forward_matches_numpy_oracle(rng, tokens):
    state = tiny_state(seed=3, layers=2)
    z = rng.standard_normal((tokens, 8))
    out = context_forward(Tensor(z, dtype=np.float64), state).data
    P = arrays_of(state)
    ref = z
    for layer in range(2):
        ref = np_block(ref, P, f"context.layers.{layer}.", 2)
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_context_forward_permutation_equivariant(rng):
    state = tiny_state(seed=1)
    z = rng.standard_normal((5, 8))
    perm = np.array([1, 0, 2, 4, 3])
    a = context_forward(Tensor(z, dtype=np.float64), state).data
    b = context_forward(Tensor(z[perm], dtype=np.float64), state).data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_index_embedding_breaks_feature_permutation(rng):
    state = tiny_state(seed=2, d=4)
    x = rng.standard_normal((1, 4))
    y = x[:, [1, 0, 2, 3]]
    hx, hy = represent(x, state), represent(y, state)
    assert not np.allclose(hx[0, [1, 0, 2, 3]], hy[0])


def test_target_equals_context_when_weights_equal(rng):
    state = tiny_state()
    z = Tensor(rng.standard_normal((5, 8)), dtype=np.float64)
    np.testing.assert_array_equal(target_forward(z, state).data, context_forward(z, state).data)


def test_ema_with_momentum_one_keeps_target_output(rng):
    state = tiny_state()
    z = Tensor(rng.standard_normal((5, 8)), dtype=np.float64)
    before = target_forward(z, state).data
    for p in state.group("context").values():
        p.data = p.data + 1.0
    ema_update(state.group("target"), state.group("context"), 1.0)
    np.testing.assert_array_equal(target_forward(z, state).data, before)


def test_backward_through_target_raises(rng):
    state = tiny_state()
    z = embed_sample(numeric_sample(rng, 4), None, state)
    with pytest.raises(GradientContractError):
        (target_forward(z, state) * 2.0).sum().backward()
    assert all(p.grad is None for p in state.group("target").values())


def test_strip_reg():
    h = Tensor(np.arange(18.0).reshape(9, 2))
    assert strip_reg(h, 0) is h
    np.testing.assert_array_equal(strip_reg(h, 1).data, h.data[:8])
    with pytest.raises(DimensionError):
        strip_reg(Tensor(np.zeros((1, 2))), 2)


@pytest.mark.parametrize("n_reg", [0, 1, 3])
def test_shape_chain(rng, n_reg):
    state = tiny_state(seed=n_reg, d=6, n_reg=n_reg)
    sample = numeric_sample(rng, 6)
    ctx_mask = Mask.from_visible(6, [0, 2])
    tgt_mask = Mask.from_visible(6, [1, 4, 5])
    z = embed_sample(sample, ctx_mask, state)
    assert z.shape == (2 + n_reg, 8)
    h = strip_reg(context_forward(z, state), n_reg)
    assert h.shape == (2, 8)
    pred = predict_targets(h, tgt_mask, state)
    full = strip_reg(target_forward(embed_sample(sample, None, state), state), n_reg)
    assert full.shape == (6, 8)
    assert pred.shape == apply_target_mask(full, tgt_mask).shape == (3, 8)


# -- predictor -------------------------------------------------------------------------------------------------


def test_predictor_output_shape_independent_of_context(rng):
    state = tiny_state(d=5)
    m = Mask.from_visible(5, [0, 3])
    for lc in (1, 2, 4):
        assert predict_targets(Tensor(rng.standard_normal((lc, 8))), m, state).shape == (2, 8)
    with pytest.raises(DimensionError):
        predict_targets(Tensor(np.zeros((0, 8))), m, state)


def test_predictor_symmetric_targets_give_equal_rows(rng):
    state = tiny_state(d=4)
    state.params["predictor.pos"].data[2] = state.params["predictor.pos"].data[1]
    out = predict_targets(Tensor(rng.standard_normal((1, 8))), Mask.from_visible(4, [1, 2]), state).data
    np.testing.assert_allclose(out[0], out[1], atol=1e-12)


def test_predictor_matches_numpy_oracle(rng):
    state = tiny_state(seed=4, d=5)
    P = arrays_of(state)
    h_ctx = rng.standard_normal((2, 8))
    m = Mask.from_visible(5, [1, 4])
    out = predict_targets(Tensor(h_ctx, dtype=np.float64), m, state).data
    seq = np.concatenate([h_ctx @ P["predictor.in.W"] + P["predictor.in.b"],
                          P["predictor.pos"][[1, 4]] + P["predictor.mask_token"]])
    seq = np_block(seq, P, "predictor.layers.0.", 2)[2:]
    ref = np_ln(seq, P["predictor.norm.gamma"], P["predictor.norm.beta"]) @ P["predictor.out.W"] + P["predictor.out.b"]
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_batched_path_equals_per_sample_path(rng):
    """Key-masked full-length batches compute the same loss as literally dropping rows."""
    state = tiny_state(seed=5, d=5, n_reg=2)
    X = rng.standard_normal((3, 5))
    ctx_vis = np.zeros((3, 2, 5), bool)
    tgt_vis = np.zeros((3, 3, 5), bool)
    ctx_sets = [[[0, 1], [1]], [[4], [2, 4]], [[0], [3]]]
    tgt_sets = [[[2], [3, 4], [2]], [[0, 1], [3], [1]], [[1, 2], [4], [2]]]
    for b in range(3):
        for c, vis in enumerate(ctx_sets[b]):
            ctx_vis[b, c, vis] = True
        for k, vis in enumerate(tgt_sets[b]):
            tgt_vis[b, k, vis] = True
    batched = float(batch_loss(state, X, ctx_vis, tgt_vis).data)

    total = 0.0
    for b in range(3):
        sample = EncodedSample([np.array([v]) for v in X[b]])
        full = strip_reg(target_forward(embed_sample(sample, None, state), state), 2)
        for c in ctx_sets[b]:
            h = strip_reg(context_forward(embed_sample(sample, Mask.from_visible(5, c), state), state), 2)
            for t in tgt_sets[b]:
                m = Mask.from_visible(5, t)
                diff = predict_targets(h, m, state).data - apply_target_mask(full, m).data
                total += float((diff**2).sum()) / 6
    assert batched == pytest.approx(total / 3, abs=1e-10)


def test_predictor_forward_full_slots_shape(rng):
    state = tiny_state(d=4)
    vis = np.array([[True, False, True, False]])
    out = predictor_forward(Tensor(rng.standard_normal((1, 4, 8))), vis, ~vis, state)
    assert out.shape == (1, 4, 8)


# -- gradient flow / checkpoints -------------------------------------------------------------------------------


def test_gradient_flow_targets_none_others_nonzero(rng):
    state = tiny_state(seed=6, d=6)
    ctx = np.zeros((4, 1, 6), bool)
    tgt = np.zeros((4, 2, 6), bool)
    ctx[:, 0, :2] = True
    tgt[:, 0, 3:5] = True
    tgt[:, 1, 5] = True
    batch_loss(state, rng.standard_normal((4, 6)), ctx, tgt).backward()
    assert all(p.grad is None for p in state.group("target").values())
    for group in ("context", "predictor", "embedding"):
        assert any(p.grad is not None and np.any(p.grad != 0) for p in state.group(group).values())


def test_checkpoint_round_trip(tmp_path):
    state = tiny_state(seed=7, dtype=np.float32)
    save_checkpoint(tmp_path / "ck", state, {"epoch": 3})
    back, meta = load_checkpoint(tmp_path / "ck.json")
    assert meta["epoch"] == 3
    assert back.dims == state.dims
    assert back.checksum() == state.checksum()
    manifest = json.loads((tmp_path / "ck.json").read_text())
    entry = manifest["tensors"][0]
    blob = (tmp_path / "ck.bin").read_bytes()
    raw = np.frombuffer(blob[entry["offset"] : entry["offset"] + entry["nbytes"]], dtype="<f4")
    np.testing.assert_array_equal(raw.reshape(entry["shape"]), state.params[entry["name"]].data)


def test_checkpoint_requires_dims(tmp_path):
    container.save(tmp_path / "x", {"a": np.zeros(2)}, {})
    with pytest.raises(container.ContainerError):
        load_checkpoint(tmp_path / "x")


def test_from_arrays_rejects_missing_params():
    state = tiny_state()
    arrays = dict(state.arrays())
    arrays.pop("embedding.reg")
    with pytest.raises(DimensionError):
        ModelState.from_arrays(state.dims, arrays)


def test_clone_is_independent():
    state = tiny_state()
    copy = state.clone()
    copy.params["embedding.index"].data += 1
    assert copy.checksum() != state.checksum()


def test_represent_strips_reg(rng):
    state = tiny_state(d=4, n_reg=2)
    X = rng.standard_normal((3, 4))
    H = represent(X, state)
    assert H.shape == (3, 4, 8)
    tokens = append_reg(embed_features(X, state), state)
    np.testing.assert_allclose(H, context_forward(tokens, state).data[:, :4], atol=1e-12)
