import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfisac.scenario import (
    Geometry, PathLossModel, ScenarioDocument, SystemConfig, array_gain, array_gain_table,
    array_response, channel_stats, db2lin, dirichlet_gain, generate_geometry, lin2db,
    lmmse_gamma, make_scenario,
)


def test_db_conversions():
    assert db2lin(0.0) == 1.0
    assert db2lin(4.0) == pytest.approx(10 ** 0.4)
    assert lin2db(db2lin(2.0)) == pytest.approx(2.0)


def test_config_defaults_and_validation():
    c = SystemConfig()
    assert (c.M, c.N, c.K, c.L) == (8, 4, 2, 2)
    assert c.tau_t == c.K + c.L
    assert c.kappa == pytest.approx(10 ** 0.2) and c.varsigma == pytest.approx(10 ** 0.4)
    for bad in (dict(M=0), dict(K=0), dict(tau_t=200), dict(rho=0.0), dict(nu=-1.0),
                dict(spacing_ratio=0.0)):
        with pytest.raises(ValueError):
            SystemConfig(**bad)


def test_paper_scale_dimensions():
    c = SystemConfig.paper_scale()
    assert (c.M, c.N, c.K, c.L) == (32, 8, 4, 2)
    assert c.with_(K=3).tau_t == 5


def test_pathloss_hand_value():
    # bare power law: no reference loss, noise at 0 dBW
    model = PathLossModel(reference_loss_db=0.0, reference_distance=1.0, min_distance=0.5,
                          noise_power_dbm=30.0)
    assert model.gain(2.0) == pytest.approx(2 ** -3.76, rel=1e-12)
    assert 2 ** -3.76 == pytest.approx(0.0738, abs=1e-4)


def test_pathloss_clamps_short_distances():
    model = PathLossModel()
    assert model.gain(0.0) == model.gain(model.min_distance)
    with pytest.raises(ValueError):
        PathLossModel(exponent=0.0)


def test_lmmse_gamma_hand_value():
    assert lmmse_gamma(1.0, 4, 0.25) == pytest.approx(0.5)
    assert lmmse_gamma(0.0, 4, 0.25) == 0.0
    with pytest.raises(ValueError):
        lmmse_gamma(-1.0, 4, 0.25)


def test_array_response_hand_value():
    np.testing.assert_allclose(array_response(math.pi / 2, 2), [1.0, -1.0], atol=1e-12)


def test_array_gain_null():
    # sin(theta1) - sin(theta2) = 1 with half-wavelength spacing puts a null there
    assert array_gain(math.pi / 2, 0.0, 2) == pytest.approx(0.0, abs=1e-24)
    assert array_gain(0.3, 0.3, 5) == pytest.approx(25.0)


@given(st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi), st.integers(1, 16))
def test_dirichlet_matches_direct_sum(t1, t2, n):
    assert dirichlet_gain(t1, t2, n) == pytest.approx(array_gain(t1, t2, n), rel=1e-7, abs=1e-7)


def test_geometry_deterministic_and_in_area():
    c = SystemConfig()
    g1, g2 = generate_geometry(c, 11), generate_geometry(c, 11)
    for name in ("ap_pos", "ue_pos", "zone_pos"):
        np.testing.assert_array_equal(getattr(g1, name), getattr(g2, name))
        arr = getattr(g1, name)
        assert np.all((arr >= 0) & (arr <= c.area_side))
    assert not np.array_equal(generate_geometry(c, 12).ap_pos, g1.ap_pos)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), M=st.integers(1, 10), N=st.integers(1, 8),
       K=st.integers(1, 4), L=st.integers(1, 3))
def test_channel_stats_invariants(seed, M, N, K, L):
    c = SystemConfig(M=M, N=N, K=K, L=L)
    _, s = make_scenario(c, seed)
    assert s.beta.shape == (M, K) and s.zeta.shape == (M, L) and s.array_gain.shape == (M, L, L)
    assert np.all(s.gamma >= 0) and np.all(s.gamma <= s.beta)
    assert np.all(s.zeta >= 0)
    idx = np.arange(L)
    np.testing.assert_allclose(s.array_gain[:, idx, idx], N * N)
    assert np.all(s.array_gain >= -1e-9) and np.all(s.array_gain <= N * N * (1 + 1e-12))
    assert np.all((s.theta > -math.pi) & (s.theta <= math.pi))


def test_coincident_ap_and_zone_warns():
    c = SystemConfig(M=1, K=1, L=1)
    geo = Geometry(np.array([[5.0, 5.0]]), np.array([[50.0, 5.0]]), np.array([[5.0, 5.0]]))
    with pytest.warns(UserWarning):
        s = channel_stats(geo, c)
    assert s.theta[0, 0] == 0.0


def test_document_round_trip(tmp_path):
    doc = ScenarioDocument(SystemConfig(M=5, K=3), PathLossModel(exponent=3.5), seed=9)
    path = tmp_path / "doc.json"
    path.write_text(json.dumps(doc.to_dict()))
    back = ScenarioDocument.from_dict(json.loads(path.read_text()))
    assert back == doc


@pytest.mark.parametrize("payload", [
    {"bogus": 1},
    {"system": {"Q": 3}},
    {"pathloss": {"alpha": 2}},
    {"system": {"M": 0}},
])
def test_document_rejects_bad_input(payload):
    with pytest.raises(ValueError):
        ScenarioDocument.from_dict(payload)
