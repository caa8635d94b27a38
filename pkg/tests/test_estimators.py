import numpy as np
import pytest
from sklearn.base import clone

from polychain import errors as E
from polychain.estimators import MaskedGraphPretrainer, TgRegressor, check_graphs, check_targets
from polychain.graphs import BuildConfig, PolymerGraphBuilder, build_trimer
from polychain.synth import synth_generate, unit_library
from polychain.training import QuantileTransform


@pytest.fixture(scope="module")
def data():
    recs = synth_generate(14, 0, seed=4).records
    graphs = PolymerGraphBuilder(n_cups=2, dp_max=15).fit_transform(recs)
    tg = {r.id: r.tg for r in recs}
    return graphs, np.array([tg[g.polymer_id] for g in graphs])


def test_params_and_clone():
    for est in (TgRegressor(hidden=8, epochs=3), MaskedGraphPretrainer(arch="gatv2"), QuantileTransform(50),
                PolymerGraphBuilder(n_cups=2)):
        twin = clone(est)
        assert twin.get_params() == est.get_params() and twin is not est
    assert TgRegressor().set_params(lr=1e-3).lr == 1e-3


def test_validators(data):
    graphs, y = data
    with pytest.raises(ValueError):
        check_graphs([])
    topo = PolymerGraphBuilder(features="topology-only", n_cups=1, dp_max=10).fit_transform(
        synth_generate(2, 0, seed=0).records)
    with pytest.raises(E.SchemaMismatch):
        check_graphs(graphs[:2] + topo)
    with pytest.raises(ValueError):
        check_targets(graphs, y[:-1])
    bad = y.copy()
    bad[1] += 1
    with pytest.raises(ValueError, match="different targets"):
        check_targets(graphs, bad)


def test_regressor_fit_predict(data):
    graphs, y = data
    reg = TgRegressor(hidden=8, epochs=3, lr=1e-3, random_state=1).fit(graphs, y)
    pred = reg.predict(graphs)
    assert pred.shape == (len(graphs),) and np.isfinite(pred).all()
    ids, per_polymer = reg.predict_polymers(graphs)
    assert len(ids) == 14 and len(reg.checkpoints_) == 3
    assert -1e9 < reg.score(graphs, y) <= 1.0
    with pytest.raises(Exception):
        TgRegressor().predict(graphs)


def test_pretrainer_feeds_regressor(data):
    graphs, y = data
    corpus = [build_trimer(u) for u in list(unit_library())[:30]]
    pre = MaskedGraphPretrainer(hidden=8, epochs=2, batch_size=8).fit(corpus)
    assert len(pre.history_) >= 2 and "input.weight" in pre.encoder_state_
    reg = TgRegressor(hidden=8, epochs=2, lr=1e-3, init_encoder=pre).fit(graphs, y)
    assert np.isfinite(reg.predict(graphs[:2])).all()
