import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tjepa import data, training
from tjepa.model import ModelDims, ModelState

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_dims(d=4, h=8, layers=1, heads=2, n_reg=1, cards=None, kinds=None, **kw):
    cards = tuple(cards or (1,) * d)
    kinds = tuple(kinds or ("numerical",) * d)
    return ModelDims(
        d=d, cardinalities=cards, kinds=kinds, hidden=h, num_heads=heads, num_layers=layers,
        dim_feedforward=kw.pop("ff", 16), pred_embed_dim=kw.pop("hp", 4),
        pred_num_layers=kw.pop("pred_layers", 1), pred_num_heads=kw.pop("pred_heads", 2),
        n_reg=n_reg, **kw,
    )


def tiny_state(seed=0, dtype=np.float64, **kw):
    return ModelState.initialize(tiny_dims(**kw), np.random.default_rng(seed), dtype=dtype)


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(map(str, r)) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def fitted_dataset(tmp_path, n=40, d=4, seed=0):
    rs = np.random.default_rng(seed)
    X = rs.standard_normal((n, d))
    y = (X[:, 0] > 0).astype(int)
    path = write_csv(tmp_path / "ds.csv", [f"x{j}" for j in range(d)] + ["y"],
                     [[repr(float(v)) for v in r] + [t] for r, t in zip(X, y)])
    ds = data.load_csv(path, target_column="y")
    data.split(ds, seed)
    data.fit_preprocessor(ds)
    return ds


def small_config(**kw):
    base = dict(
        model_dim_hidden=8, model_num_heads=2, model_num_layers=1, model_dim_feedforward=16,
        pred_embed_dim=4, pred_num_layers=1, pred_num_heads=2, batch_size=8, epochs=2,
        mask_min_ctx_share=0.25, mask_max_ctx_share=0.5, mask_min_trgt_share=0.25,
        mask_max_trgt_share=0.5,
    )
    base.update(kw)
    return training.TrainConfig(**base)
