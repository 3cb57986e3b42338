#!/usr/bin/env python3
"""
Tests for the error-function capacitance model: closed-form values, radial
symmetry, the discretized-Gaussian reading, least-squares recovery and the
sample/model file formats.
"""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from capmodel import (
    CapacitanceModel,
    CapacitanceSamples,
    FitError,
    SampleFormatError,
    discretized_gaussian,
    eval_1d,
    eval_2d,
    fit,
    load_model,
    load_samples_csv,
    save_model,
    save_samples_csv,
    synth_samples,
)

UNIT = CapacitanceModel.single(1.0, 1.0, 1.0)


def test_eval_1d_known_values():
    assert eval_1d(UNIT, 0.0) == pytest.approx(2 * special.erf(1.0), rel=1e-15)
    assert eval_1d(UNIT, 0.0) == pytest.approx(1.6854, abs=1e-4)
    assert eval_1d(UNIT, 1.0) == pytest.approx(special.erf(2.0), rel=1e-15)
    assert eval_1d(UNIT, 1.0) == pytest.approx(0.99532, abs=1e-5)


def test_eval_1d_far_field_vanishes():
    model = CapacitanceModel(((1.0, 0.3), (0.5, 2.0)), 0.4)
    assert abs(eval_1d(model, 1e6 * 2.0)) < 1e-12
    assert abs(eval_1d(model, -1e6 * 2.0)) < 1e-12


def test_single_term_shape():
    """Positive, even, peaked at zero and decreasing for xi > 0"""
    model = CapacitanceModel.single(2.0, 0.7, 0.5)
    xi = np.linspace(0.0, 2.0, 200)
    values = eval_1d(model, xi)
    assert np.all(values > 0)
    assert np.allclose(values, eval_1d(model, -xi), rtol=0, atol=1e-15)
    assert np.all(np.diff(values) < 0)


def test_sigma_and_scale():
    model = CapacitanceModel.single(2.5, 0.7, 0.5)
    assert model.sigma == 0.7 / math.sqrt(2.0)
    assert model.scale == 2.5


@pytest.mark.parametrize(
    "terms, delta",
    [((), 1.0), (((1.0, 0.0),), 1.0), (((1.0, 1.0),), 0.0), (((1.0, -2.0),), 1.0)],
)
def test_invalid_models(terms, delta):
    with pytest.raises(ValueError):
        CapacitanceModel(terms, delta)


def test_eval_2d_radial():
    y = np.array([0.3, -1.2])
    assert eval_2d(UNIT, y, y) == pytest.approx(eval_1d(UNIT, 0.0), rel=1e-12)
    assert eval_2d(UNIT, y + [3.0, 4.0], y) == pytest.approx(eval_1d(UNIT, 5.0), rel=1e-12)
    assert eval_2d(UNIT, y + [0.0, -2.0], y) == pytest.approx(eval_1d(UNIT, 2.0), rel=1e-12)


@given(
    st.floats(min_value=0.0, max_value=2 * math.pi),
    st.floats(min_value=0.0, max_value=4.0),
    st.floats(min_value=0.0, max_value=2 * math.pi),
)
@settings(max_examples=100, deadline=None)
def test_eval_2d_rotation_invariance(phi, r, rotation):
    d = r * np.array([math.cos(phi), math.sin(phi)])
    c, s = math.cos(rotation), math.sin(rotation)
    rotated = np.array([[c, -s], [s, c]]) @ d
    assert abs(eval_2d(UNIT, d, [0.0, 0.0]) - eval_2d(UNIT, rotated, [0.0, 0.0])) < 1e-12


def test_discretized_gaussian_consistency():
    """C(xi) = 2a * mass of N(xi, c^2/2) on [-delta, delta] at random xi"""
    model = CapacitanceModel.single(1.7, 0.45, 0.3)
    rng = np.random.default_rng(11)
    xi = rng.uniform(-2.0, 2.0, 100)
    assert np.max(np.abs(eval_1d(model, xi) - discretized_gaussian(model, xi))) < 1e-10


def test_synth_reproduces_model():
    grid = np.linspace(-3.0, 3.0, 61)
    samples = synth_samples(1.3, 0.8, 0.25, grid)
    xi, values = samples.as_arrays()
    assert np.array_equal(values, eval_1d(CapacitanceModel.single(1.3, 0.8, 0.25), xi))
    assert np.allclose(values, values[::-1], rtol=0, atol=1e-12), "symmetric grid gives symmetric values"


def test_synth_noise_is_seeded():
    grid = np.linspace(-1.0, 1.0, 21)
    a = synth_samples(1.0, 0.5, 0.25, grid, noise_rel=0.01, seed=3)
    b = synth_samples(1.0, 0.5, 0.25, grid, noise_rel=0.01, seed=3)
    c = synth_samples(1.0, 0.5, 0.25, grid, noise_rel=0.01, seed=4)
    assert a.values == b.values
    assert a.values != c.values


def test_synth_rejects_bad_lengths():
    with pytest.raises(ValueError):
        synth_samples(1.0, 0.0, 0.5, [0.0, 1.0])
    with pytest.raises(ValueError):
        synth_samples(1.0, 1.0, -0.5, [0.0, 1.0])


def test_fit_recovers_noiseless_parameters():
    delta = 0.5
    grid = np.linspace(-100 * delta, 100 * delta, 201)
    samples = synth_samples(2.5, 0.7 * delta, delta, grid)
    model, rms = fit(samples, m=1, delta=delta)
    (a, c), = model.terms
    assert a == pytest.approx(2.5, rel=1e-2)
    assert c == pytest.approx(0.7 * delta, rel=1e-2)
    assert rms < 1e-6


def test_fit_noisy_parameters():
    delta = 0.5
    grid = np.linspace(-5.0, 5.0, 401)
    samples = synth_samples(2.5, 0.35, delta, grid, noise_rel=0.01, seed=1)
    model, _ = fit(samples, m=1, delta=delta)
    (a, c), = model.terms
    assert a == pytest.approx(2.5, rel=5e-2)
    assert c == pytest.approx(0.35, rel=5e-2)


def test_fit_zero_samples():
    samples = CapacitanceSamples(tuple(np.linspace(-1, 1, 11).tolist()), (0.0,) * 11)
    try:
        model, rms = fit(samples, m=1, delta=0.5)
    except FitError:
        return
    assert rms == 0.0
    assert abs(model.terms[0][0]) < 1e-12


def test_fit_delta_from_metadata():
    samples = synth_samples(1.0, 0.4, 0.2, np.linspace(-2, 2, 81))
    model, _ = fit(samples)
    assert model.delta == 0.2


def test_fit_failure_carries_best_iterate():
    samples = synth_samples(2.0, 3.0, 0.1, np.linspace(-20, 20, 81), noise_rel=0.05, seed=2)
    with pytest.raises(FitError) as info:
        fit(samples, m=1, delta=0.1, max_iter=1, max_restarts=0)
    assert isinstance(info.value.model, CapacitanceModel)
    assert info.value.rms > 0


@pytest.mark.parametrize("m, count", [(0, 10), (2, 4)])
def test_fit_argument_errors(m, count):
    samples = synth_samples(1.0, 0.5, 0.25, np.linspace(-1, 1, count))
    with pytest.raises(ValueError):
        fit(samples, m=m, delta=0.25)


def test_samples_csv_round_trip(tmp_path):
    samples = synth_samples(1.0, 0.5, 0.25, np.linspace(-1, 1, 9))
    path = tmp_path / "samples.csv"
    save_samples_csv(samples, path)
    assert path.read_text().splitlines()[0] == "xi,capacitance"
    loaded = load_samples_csv(path)
    assert loaded.positions == samples.positions
    assert loaded.values == samples.values


def test_samples_csv_keeps_every_digit(tmp_path):
    path = tmp_path / "samples.csv"
    path.write_text("xi,capacitance\n-1.0,0.03348790150724423\n0.1,0.9999999999999998\n0.2, 1e-300\n")
    loaded = load_samples_csv(path)
    assert loaded.positions == (-1.0, 0.1, 0.2)
    assert loaded.values == (0.03348790150724423, 0.9999999999999998, 1e-300)


@pytest.mark.parametrize(
    "text, line",
    [
        ("", 1),
        ("x,y\n0,1\n", 1),
        ("xi,capacitance\n", 2),
        ("xi,capacitance\n0,1\n1,oops\n", 3),
        ("xi,capacitance\n0,1\n2,1\n1,1\n", 4),
        ("xi,capacitance\n0,1\n\n2,1\n", 3),
    ],
)
def test_samples_csv_errors_name_the_line(tmp_path, text, line):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(SampleFormatError) as info:
        load_samples_csv(path)
    assert info.value.line == line, str(info.value)


def test_model_json_round_trip(tmp_path):
    model = CapacitanceModel(((1.25, 0.3), (0.5, 1.1)), 0.125)
    path = tmp_path / "model.json"
    save_model(model, path)
    assert load_model(path) == model


if __name__ == "__main__":
    test_eval_1d_known_values()
    test_single_term_shape()
    test_discretized_gaussian_consistency()
    test_fit_recovers_noiseless_parameters()
    print("✓ capacitance model checks passed")
