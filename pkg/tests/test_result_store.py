import math

import pandas as pd
import pytest

from services.result_store import SCHEMAS, ResultStore, conform


def test_conform_orders_columns_and_fills_missing():
    frame = conform("degeneracy", [{"gap": 0.1, "eps": 1e-3, "scheme": "midpoint_ua"}])
    assert list(frame.columns) == SCHEMAS["degeneracy"]
    assert math.isnan(frame.loc[0, "dt"])


def test_conform_rejects_unregistered_columns_and_tables():
    with pytest.raises(ValueError):
        conform("degeneracy", [{"gap": 0.1, "extra": 1}])
    with pytest.raises(KeyError):
        conform("nope", [])


def test_write_and_read_back(out_dir):
    store = ResultStore(out_dir, "exp")
    frame = pd.DataFrame({"k": [0.5], "gamma": [-0.1533], "omega_r": [1.4156], "residual": [1e-14]})
    path = store.write("dispersion", frame)
    assert path == out_dir / "exp" / "dispersion.csv"
    assert path.read_text(encoding="utf-8").splitlines()[0] == "k,omega_r,gamma,residual"
    back = store.read("dispersion")
    assert back.loc[0, "gamma"] == -0.1533


def test_full_precision_floats(out_dir):
    store = ResultStore(out_dir, "exp")
    store.write("lemma_fits", [{"identity": "id1", "slope": 1 / 3, "residual": 0.0}])
    assert store.read("lemma_fits").loc[0, "slope"] == 1 / 3


def test_write_all_lists_tables(out_dir):
    store = ResultStore(out_dir, "exp")
    store.write_all({
        "landau_energy": pd.DataFrame({"B": [0.0], "t": [0.0], "energy": [1.0]}),
        "degeneracy": pd.DataFrame({"scheme": ["midpoint_ua"], "eps": [0.1], "dt": [0.01], "gap": [1e-3]}),
    })
    assert list(store.tables()) == ["degeneracy", "landau_energy"]
