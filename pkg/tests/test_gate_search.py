import json
import os

import numpy as np
import pytest

from app.exception import DomainError, MissingForwardStateError, ModalityError, ShapeMismatchError
from app.gate_search import (SearchCell, StageSearchCells, apply_gates, cb_cdf, cb_icdf, cb_log_density, cb_mean,
                             cb_normalizer, cb_sample, derive_gates, export_gates, gate_tensor, read_pgm,
                             sample_gates, ste_backward)
from app.schemas import GateLevel, GateTrick, Modality
from app.tensor import Tensor, backward
from tests.conftest import gradient_error

LAMBDAS = [0.1, 0.3, 0.5, 0.7, 0.9]


def simpson(values, a=0.0, b=1.0):
    n = len(values) - 1
    h = (b - a) / n
    return h / 3.0 * (values[0] + 4.0 * values[1:-1:2].sum() + 2.0 * values[2:-1:2].sum() + values[-1])


GRID = np.linspace(0.0, 1.0, 20001)


def test_normalizer_at_one_half_is_exactly_two():
    assert cb_normalizer(0.5) == 2.0


@pytest.mark.parametrize("lam", [0.5 - 1e-8, 0.5 + 1e-8, 0.5 - 1e-7, 0.5 + 1e-5])
def test_normalizer_is_continuous_near_one_half(lam):
    assert abs(cb_normalizer(lam) - 2.0) < 1e-6


@pytest.mark.parametrize("lam", LAMBDAS)
def test_density_integrates_to_one(lam):
    density = np.exp(cb_log_density(GRID, lam))
    assert simpson(density) == pytest.approx(1.0, abs=1e-6)


def test_log_density_closed_form():
    expected = np.log(2.0 * np.arctanh(0.8) / 0.8) + np.log(0.9)
    assert cb_log_density(1.0, 0.9) == pytest.approx(expected, abs=1e-12)
    assert cb_log_density(1.0, 0.9) == pytest.approx(0.905, abs=1e-3)


@pytest.mark.parametrize("lam,x", [(0.0, 0.5), (1.0, 0.5), (0.3, 1.5), (0.3, -0.1)])
def test_domain_errors(lam, x):
    with pytest.raises(DomainError):
        cb_log_density(x, lam)


@pytest.mark.parametrize("lam", LAMBDAS)
def test_mean_matches_quadrature_and_sampler(lam):
    quadrature_mean = simpson(GRID * np.exp(cb_log_density(GRID, lam)))
    assert cb_mean(lam) == pytest.approx(quadrature_mean, abs=1e-6)
    draws = cb_sample(np.full(100000, lam), np.random.default_rng(17))
    assert np.all((draws >= 0.0) & (draws <= 1.0))
    assert abs(draws.mean() - quadrature_mean) < 0.01


@pytest.mark.parametrize("lam", [0.2, 0.5, 0.8])
def test_icdf_inverts_cdf(lam):
    u = np.linspace(0.01, 0.99, 25)
    np.testing.assert_allclose(cb_cdf(cb_icdf(u, lam), lam), u, atol=1e-10)


def test_sampling_is_reproducible():
    a = cb_sample(np.full(10, 0.3), np.random.default_rng(4))
    b = cb_sample(np.full(10, 0.3), np.random.default_rng(4))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("trick", [GateTrick.CONTINUOUS_BERNOULLI, GateTrick.BERNOULLI, GateTrick.HARD])
def test_binary_tricks_draw_binary_gates(rng, trick):
    cell = SearchCell(GateLevel.PIXEL, Modality.RGB, (2, 3, 2), 1, rng)
    gates = sample_gates(cell, rng, trick)
    assert gates.shape == (2, 3, 2)
    assert set(np.unique(gates)) <= {0.0, 1.0}


@pytest.mark.parametrize("logit,expected", [(np.log((1 - 1e-12) / 1e-12), 1.0), (-np.log((1 - 1e-12) / 1e-12), 0.0),
                                            (40.0, 1.0), (-40.0, 0.0), (800.0, 1.0), (-800.0, 0.0)])
def test_saturated_probabilities_draw_constant_gates(rng, logit, expected):
    cell = SearchCell(GateLevel.CHANNEL, Modality.RGB, (10000,), 1)
    cell.P.data[...] = logit
    gates = sample_gates(cell, rng)
    assert abs(gates.mean() - expected) < 1e-3


def test_saturated_cell_still_backpropagates(rng):
    cell = SearchCell(GateLevel.CHANNEL, Modality.RGB, (4,), 1)
    cell.P.data[...] = [40.0, -40.0, 40.0, -40.0]
    assert cell.p_tilde[0] == 1.0 and cell.p_tilde[1] < 1e-17
    sample_gates(cell, rng)
    backward((gate_tensor(cell) * np.arange(1.0, 5.0)).sum())
    assert np.all(np.isfinite(cell.P.grad))


def test_gate_open_rate_matches_continuous_bernoulli_tail(rng):
    # P(g = 1) = P(x >= 0.5) = 1 - F(0.5); 200k draws give a standard error near 0.0011
    cell = SearchCell(GateLevel.CHANNEL, Modality.IR, (200000,), 1)
    cell.P.data[...] = np.log(0.7 / 0.3)
    gates = sample_gates(cell, rng)
    assert gates.mean() == pytest.approx(1.0 - cb_cdf(0.5, 0.7), abs=0.005)
    assert 1.0 - cb_cdf(0.5, 0.7) == pytest.approx(0.60436, abs=1e-5)


def test_soft_trick_uses_probabilities(rng):
    cell = SearchCell(GateLevel.CHANNEL, Modality.IR, (4,), 2, rng, init_range=2.0)
    np.testing.assert_array_equal(sample_gates(cell, rng, GateTrick.SOFT), cell.p_tilde)


def test_ste_gradient_equals_autodiff_gradient_wrt_gates(rng):
    cell = SearchCell(GateLevel.CHANNEL, Modality.RGB, (3,), 1, rng, init_range=1.0)
    sample_gates(cell, rng)
    features = Tensor(rng.normal(size=(2, 3, 2, 2)))
    weights = rng.normal(size=(2, 3, 2, 2))
    rows = [Modality.RGB, Modality.RGB]

    plain = Tensor(cell.G.copy(), requires_grad=True)
    backward((apply_gates(features, {Modality.RGB: plain}, None, rows) * weights).sum())
    grad_p_tilde, grad_p = ste_backward(cell, plain.grad)
    np.testing.assert_array_equal(grad_p_tilde, plain.grad)
    np.testing.assert_allclose(grad_p, plain.grad * cell.p_tilde * (1 - cell.p_tilde), rtol=1e-12)

    backward((apply_gates(features, {Modality.RGB: gate_tensor(cell)}, None, rows) * weights).sum())
    np.testing.assert_allclose(cell.P.grad, grad_p, rtol=1e-12)


def test_gate_surrogate_derivative_matches_finite_differences(rng):
    cells = StageSearchCells(1, 3, 2, 2, rng, init_range=1.0)
    features = Tensor(rng.normal(size=(4, 3, 2, 2)))
    weights = rng.normal(size=(4, 3, 2, 2))
    rows = [Modality.RGB, Modality.IR, Modality.IR, Modality.RGB]

    def loss():
        cells.sample(rng, GateTrick.SOFT)
        return (cells.apply(features, rows) * weights).sum()

    params = list(cells.parameters().values())
    assert gradient_error(loss, *params) < 1e-5


def test_missing_forward_state(rng):
    cell = SearchCell(GateLevel.CHANNEL, Modality.RGB, (3,), 1, rng)
    with pytest.raises(MissingForwardStateError):
        ste_backward(cell, np.ones(3))
    with pytest.raises(MissingForwardStateError):
        gate_tensor(cell)


def test_derivation_threshold_with_ties_open():
    cell = SearchCell(GateLevel.CHANNEL, Modality.RGB, (3,), 1)
    cell.P.data[...] = [-1.0, 0.0, 1.0]
    assert derive_gates(cell).tolist() == [0.0, 1.0, 1.0]
    assert cell.frozen
    assert not cell.P.requires_grad
    assert not gate_tensor(cell).tracks_grad
    assert cell.activation_fraction() == pytest.approx(2 / 3)


def test_frozen_cell_ignores_resampling(rng):
    cell = SearchCell(GateLevel.CHANNEL, Modality.IR, (5,), 1)
    derive_gates(cell)
    assert np.array_equal(sample_gates(cell, rng, GateTrick.BERNOULLI), np.ones(5))


def test_apply_gates_selects_gates_per_row_modality():
    features = Tensor(np.ones((2, 2, 1, 2)))
    channel = {Modality.RGB: np.array([1.0, 0.0]), Modality.IR: np.array([0.0, 1.0])}
    pixel = {Modality.RGB: np.ones((2, 1, 2)), Modality.IR: np.array([[[1.0, 0.0]], [[0.0, 1.0]]])}
    out = apply_gates(features, channel, pixel, ["rgb", "ir"]).data
    assert out[0].tolist() == [[[1.0, 1.0]], [[0.0, 0.0]]]
    assert out[1].tolist() == [[[0.0, 0.0]], [[0.0, 1.0]]]


def test_apply_gates_errors():
    features = Tensor(np.ones((2, 2, 1, 1)))
    with pytest.raises(ModalityError):
        apply_gates(features, {Modality.RGB: np.ones(2)}, None, [Modality.RGB, Modality.IR])
    with pytest.raises(ModalityError):
        apply_gates(features, {Modality.RGB: np.ones(2)}, None, ["rgb", "uv"])
    with pytest.raises(ShapeMismatchError):
        apply_gates(features, {Modality.RGB: np.ones(3)}, None, ["rgb", "rgb"])


def test_stage_cells_iterate_in_fixed_order(rng):
    names = [cell.name for cell in StageSearchCells(2, 3, 2, 2, rng)]
    assert names == ["stage2.channel.rgb", "stage2.channel.ir", "stage2.pixel.rgb", "stage2.pixel.ir"]


def test_export_gates_writes_maps_and_summary(rng, tmp_path):
    cells = StageSearchCells(1, 2, 3, 2, rng, init_range=1.0)
    cells.derive()
    written = export_gates({1: cells}, str(tmp_path))
    assert set(os.listdir(tmp_path)) == {os.path.basename(p) for p in written}

    pixel = cells.cell(GateLevel.PIXEL, Modality.IR)
    image = read_pgm(str(tmp_path / "stage1.pixel.ir.gate.pgm"))
    assert image.shape == (6, 2)
    np.testing.assert_array_equal(image, pixel.G.reshape(6, 2) * 255.0)
    assert (tmp_path / "stage1.pixel.ir.prob.pgm").exists()

    channel = cells.cell(GateLevel.CHANNEL, Modality.RGB)
    row = (tmp_path / "stage1.channel.rgb.gate.csv").read_text().strip().split(",")
    assert [float(v) for v in row] == channel.G.tolist()

    summary = json.loads((tmp_path / "activation_summary.json").read_text())
    assert summary["stage1.pixel.ir"] == pytest.approx(pixel.G.mean())
    assert all(0.0 <= v <= 1.0 for v in summary.values())
