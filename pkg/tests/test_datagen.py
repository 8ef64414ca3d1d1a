import json

import numpy as np
import pytest
from scipy.special import expit

from testletirt.datagen import (
    GenConfig,
    default_design,
    fixed_theta,
    generate_persons,
    generate_responses,
    read_responses,
    sample_items,
    simulate,
    table1_fixture,
    write_responses,
    write_truth,
)
from testletirt.errors import InvalidDesign
from testletirt.model import ItemIrtParams, TestletDesign


def test_table1_endpoints():
    items = table1_fixture()
    assert len(items) == 30
    assert (items.a[0], items.b[0]) == (1.17, -1.55)
    assert (items.a[29], items.b[29]) == (0.77, -0.43)


def test_persons_deterministic():
    cfg = GenConfig(200, default_design(), 0.5, seed=99)
    p1, p2 = generate_persons(cfg), generate_persons(cfg)
    np.testing.assert_array_equal(p1.theta, p2.theta)
    np.testing.assert_array_equal(p1.gamma, p2.gamma)


def test_zero_variance_gives_zero_gamma():
    cfg = GenConfig(100, default_design(), (0.0, 1.0, 0.0, 1.0, 0.0, 1.0), seed=1)
    g = generate_persons(cfg).gamma
    assert np.all(g[:, [0, 2, 4]] == 0)
    assert np.all(g[:, 1] != 0)


def test_gamma_variance_large_sample():
    cfg = GenConfig(100_000, TestletDesign.uniform(2, 2), 1.0, seed=3)
    v = generate_persons(cfg).gamma.var(axis=0)
    assert np.all((v > 0.97) & (v < 1.03))


def test_extreme_easy_items_all_correct():
    design = TestletDesign.uniform(2, 3)
    cfg = GenConfig(500, design, 0.5, seed=4)
    persons = generate_persons(cfg)
    y = generate_responses(cfg, persons, ItemIrtParams(np.ones(6), np.full(6, -10.0)))
    assert y.all()


def test_proportion_correct_matches_quadrature():
    # E_theta[p(theta)] for item 1 of the fixed table by 61-node Gauss-Hermite quadrature
    items = table1_fixture()
    x, w = np.polynomial.hermite_e.hermegauss(61)
    expected = float(w @ expit(items.a[0] * (x - items.b[0])) / w.sum())
    cfg = GenConfig(50_000, default_design(), 0.0, items, seed=5)
    _, _, y = simulate(cfg)
    assert y[:, 0].mean() == pytest.approx(expected, abs=0.01)


def test_dimension_mismatch():
    cfg = GenConfig(10, default_design(), 0.5, seed=1)
    with pytest.raises(InvalidDesign):
        generate_responses(cfg, generate_persons(cfg), ItemIrtParams(np.ones(5), np.zeros(5)))


def test_invalid_config():
    with pytest.raises(InvalidDesign, match="sigma2"):
        GenConfig(10, default_design(), -0.1)
    with pytest.raises(InvalidDesign, match="n_persons"):
        GenConfig(0, default_design(), 0.1)


def test_sampled_items_truncated():
    cfg = GenConfig(10, TestletDesign.uniform(100, 5), 0.5, a_mean=0.1, a_sd=0.5, seed=2)
    items = sample_items(cfg)
    assert items.a.min() > 0.05
    assert len(items) == 500


def test_fixed_theta_shared():
    np.testing.assert_array_equal(fixed_theta(50, 8), fixed_theta(50, 8))
    cfg = GenConfig(50, default_design(), 0.5, seed=1)
    th = fixed_theta(50, 8)
    np.testing.assert_array_equal(generate_persons(cfg, th).theta, th)


def test_csv_byte_identical(tmp_path):
    cfg = GenConfig(300, default_design(), 0.25, table1_fixture(), seed=7)
    for name in ("a.csv", "b.csv"):
        write_responses(tmp_path / name, simulate(cfg)[2])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    y = read_responses(tmp_path / "a.csv")
    assert y.shape == (300, 30) and y.dtype == np.int8


def test_truth_document(tmp_path):
    items = table1_fixture()
    write_truth(tmp_path / "t.json", items, (0.5,) * 6, default_design())
    doc = json.loads((tmp_path / "t.json").read_text())
    assert len(doc["items"]) == 30 and doc["items"][0] == {"a": 1.17, "b": -1.55}
    assert TestletDesign.from_dict(doc["design"]) == default_design()


def _residual_within_testlet_corr(y, design):
    # mean inter-item correlation of residuals after removing the rest score
    total = y.sum(1, keepdims=True)
    resid = []
    for j in range(y.shape[1]):
        rest = total[:, 0] - y[:, j]
        beta = np.polyfit(rest, y[:, j], 1)
        resid.append(y[:, j] - np.polyval(beta, rest))
    r = np.corrcoef(np.array(resid))
    same = design.same_testlet() & ~np.eye(design.n_items, dtype=bool)
    return r[same].mean()


def test_local_dependence_increases_with_variance():
    design = default_design()
    items = table1_fixture()
    ld = [
        _residual_within_testlet_corr(simulate(GenConfig(20_000, design, s2, items, seed=11))[2], design)
        for s2 in (0.0, 1.0)
    ]
    assert ld[1] > ld[0] + 0.02
