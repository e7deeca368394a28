"""Smoke test for the `sert` extension module.

Build and install first:
    pip install --no-build-isolation -e crates/py
Then run:
    python python/smoke_test.py      (or: pytest python/smoke_test.py)
"""

import math
import os
import tempfile

import sert


def test_forward_shapes_and_checkpoint_round_trip():
    cfg = sert.ModelConfig("sert", n_factors=4, n_stocks=3, heads=2, lnf=True, seed=7)
    model = sert.Model(cfg)
    assert model.num_params > 0
    factors = [[0.1 * (t + f) for f in range(4)] for t in range(6)]
    out = model.forward(factors)
    assert len(out) == 6 and all(len(row) == 3 for row in out)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path)
        again = sert.Model.load(path)
        assert again.forward(factors) == out
        assert again.config.family == "sert"


def test_decoder_family_needs_lagged_returns():
    cfg = sert.ModelConfig.matrix_row("Trans8", n_factors=4, n_stocks=3)
    model = sert.Model(cfg)
    factors = [[0.0] * 4 for _ in range(5)]
    lagged = [[0.01] * 3 for _ in range(5)]
    assert len(model.forward(factors, lagged)) == 5
    try:
        model.forward(factors)
    except (ValueError, RuntimeError):
        pass
    else:
        raise AssertionError("decoder model accepted missing lagged returns")


def test_synthetic_fit_and_metrics():
    data = sert.synthetic(seed=3, months=60, factors=3, stocks=4, in_sample_len=40)
    assert len(data["factors"]) == 60 and len(data["returns"][0]) == 4
    assert data["oracle_oos_r2"] > 0.99

    cfg = sert.ModelConfig("encoder-only", n_factors=3, n_stocks=4, seed=1)
    preds = sert.fit_predict(cfg, data["factors"], data["returns"], in_sample_len=40, max_epochs=3, pretrain_epochs=3)
    assert len(preds) == 20 and all(len(r) == 4 for r in preds)

    actual = [data["returns"][t] for t in data["test_rows"]]
    mean = data["train_mean"]
    assert sert.oos_r2(actual, [[mean] * 4 for _ in actual], mean) == 0.0
    assert sert.max_drawdown([1.0, 2.0, 1.0]) == 0.5
    assert abs(sert.annualized_return([0.01] * 12) - (1.01 ** 12 - 1)) < 1e-12
    m = sert.strategy_metrics([0.01, -0.02, 0.03, 0.0])
    assert set(m) == {"mdd", "annualized_return", "sharpe", "sortino", "std"}
    assert math.isfinite(m["sharpe"])
    e = [[0.1, -0.2], [0.3, 0.1], [-0.1, 0.2]]
    f = [[0.2, 0.1], [0.1, 0.1], [0.1, 0.0]]
    assert abs(sert.dm_statistic(e, f) + sert.dm_statistic(f, e)) < 1e-12


def test_matrix_and_selftest():
    assert len(sert.matrix_names()) == 20
    ok, table = sert.selftest()
    assert ok, table
    try:
        sert.ModelConfig("nonsense", n_factors=2, n_stocks=2)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown family accepted")


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok {name}")
