import numpy as np
import pytest
from pydantic import ValidationError

from trajlearn.characterize import (
    CoarseRow,
    CoarseStudyReport,
    FitSingular,
    bin_fit,
    ce_metric,
    coarse_study,
    mse_vs_truth,
    parameter_table,
    self_consistency,
    true_parameters,
)
from trajlearn.config import GAMMA_D, OMEGA_R, ModelSection, TrainConfig
from trajlearn.dataset import DatasetMeta
from trajlearn.qcore import PREP_STATES
from trajlearn.rnn import rnn_trajectories
from trajlearn.sdelearn import SpamModel, dataset_predictions, distill
from trajlearn.sme import PhysicalModel, generate_dataset, simulate, solve_master_equation


def test_true_parameters_of_constrained_model():
    """The sigma_x and sigma_z components give back omega_r and gamma_d."""
    values = true_parameters(PhysicalModel.constrained(1.4, 1.2, 0.15))
    assert values == pytest.approx({"omega_r": 1.4, "gamma_d": 1.2, "eta": 0.15})


def test_ce_metric():
    """Cross entropy of a coin-flip predictor is log 2."""
    assert ce_metric(np.full(4, 0.5), np.array([1, -1, 1, 1])) == pytest.approx(np.log(2))


def test_mse_vs_truth_arrays():
    """Unit offsets on every component give an MSE of one at every time."""
    report = mse_vs_truth(np.zeros((2, 4, 3)), np.ones((2, 4, 3)))
    assert report.total == pytest.approx(1.0)
    assert report.per_time == pytest.approx([1.0] * 4)
    assert report.n_shots == 2
    short = mse_vs_truth(np.zeros((2, 4, 3)), np.ones((2, 4, 3)), max_steps=1)
    assert len(short.per_time) == 2


def test_mse_vs_truth_mappings_of_mixed_length():
    """Per-time errors average over the shots long enough to reach that time."""
    predicted = {1: np.zeros((2, 3)), 2: np.zeros((4, 3))}
    truth = {1: np.zeros((2, 3)), 2: np.full((4, 3), 2.0), 3: np.zeros((1, 3))}
    report = mse_vs_truth(predicted, truth)
    assert report.per_time == pytest.approx([2.0, 2.0, 4.0, 4.0])
    assert report.total == pytest.approx(4.0 * 12 / 18)
    with pytest.raises(ValueError):
        mse_vs_truth({5: np.zeros((2, 3))}, truth)
    with pytest.raises(TypeError):
        mse_vs_truth(predicted, np.zeros((2, 2, 3)))


def test_self_consistency_of_calibrated_predictions():
    """Outcomes drawn with the predicted probabilities are well calibrated."""
    rng = np.random.default_rng(7)
    pi = rng.uniform(size=40000)
    y = np.where(rng.uniform(size=pi.size) < pi, 1, -1)
    report = self_consistency(pi, y, delta=0.04)
    assert sum(report.counts) == pi.size
    assert len(report.centers) == 25
    assert report.epsilon < 0.02
    assert report.slope == pytest.approx(1.0, abs=0.05)
    assert report.intercept == pytest.approx(0.0, abs=0.03)


def test_self_consistency_flags_overconfidence():
    """Predictions that ignore the outcomes show a large calibration error."""
    pi = np.array([0.95] * 50 + [0.05] * 50)
    y = np.where(np.arange(100) % 2 == 0, 1, -1)
    report = self_consistency(pi, y)
    assert report.empirical == pytest.approx([0.5, 0.5])
    assert report.epsilon == pytest.approx(0.45)
    assert report.slope == pytest.approx(0.0, abs=1e-12)


def test_self_consistency_validation():
    """Bad widths, out-of-range predictions and mismatched lengths raise."""
    with pytest.raises(ValueError):
        self_consistency(np.array([0.5]), np.array([1]), delta=0.0)
    with pytest.raises(ValueError):
        self_consistency(np.array([1.5]), np.array([1]))
    with pytest.raises(ValueError):
        self_consistency(np.array([0.5, 0.5]), np.array([1]))
    # a certain prediction lands in the top bin
    report = self_consistency(np.array([1.0]), np.array([1]))
    assert report.centers == pytest.approx([0.98])
    assert report.slope is None


def test_bin_fit_recovers_master_equation_parameters():
    """Noise-free ensemble means give the exact rates and zero diffusion."""
    m = PhysicalModel.constrained(OMEGA_R, GAMMA_D, 0.3)
    series = list(solve_master_equation(PREP_STATES, m, 0.04, 40))
    report = bin_fit(series, list(range(6)), 0.04)
    assert report.params["omega_r"] == pytest.approx(OMEGA_R, rel=1e-5)
    assert report.params["gamma_d"] == pytest.approx(GAMMA_D, rel=1e-5)
    assert report.params["eta"] == pytest.approx(0.0, abs=1e-8)
    assert report.n_trajectories == 6
    assert set(report.errors) == {"omega_r", "gamma_d", "eta"}


def test_bin_fit_estimates_efficiency_from_trajectories():
    """Conditional one-step variance of z recovers the measurement efficiency."""
    m = PhysicalModel.constrained(OMEGA_R, GAMMA_D, 0.5)
    n = 600
    preps = np.where(np.arange(n) % 2 == 0, 0, 2)
    _, truth, _ = simulate(preps, np.full(n, 2), 21, range(n), m, n_fine=400, dt_fine=0.002, keep_every=10)
    report = bin_fit(list(truth), preps.tolist(), 0.02)
    assert report.params["omega_r"] == pytest.approx(OMEGA_R, rel=0.15)
    assert report.params["gamma_d"] == pytest.approx(GAMMA_D, rel=0.25)
    assert report.params["eta"] == pytest.approx(0.5, abs=0.1)


def test_bin_fit_rejects_degenerate_input():
    """Too-short series and mismatched preparations cannot be fitted."""
    with pytest.raises(FitSingular):
        bin_fit([np.zeros((2, 3))], [0], 0.04)
    with pytest.raises(ValueError):
        bin_fit([np.zeros((5, 3))], [0, 1], 0.04)


def test_parameter_table():
    """Columns must carry every listed parameter."""
    table = parameter_table(
        {"true": {"omega_r": 1.4, "gamma_d": 1.2, "eta": 0.15}, "sde": {"omega_r": 1.41, "gamma_d": 1.18, "eta": 0.16}},
        ce={"sde": 0.52},
    )
    assert table.parameters == ["omega_r", "gamma_d", "eta"]
    assert table.columns["sde"]["eta"] == 0.16
    with pytest.raises(ValueError):
        parameter_table({"rnn": {"omega_r": 1.0}})


def test_coarse_study_report_requires_increasing_steps():
    """Rows are ordered by strictly increasing time step."""
    row = dict(params={}, rel_error={}, learned_ce=0.5, true_ce=0.5, epochs=1)
    with pytest.raises(ValidationError):
        CoarseStudyReport(
            truth={},
            rows=[CoarseRow(k=2, dt=0.08, **row), CoarseRow(k=1, dt=0.04, **row)],
        )


def test_coarse_study_runs_every_level(small_dataset):
    """One trained model per factor, compared against the generator."""
    cfg = TrainConfig(lr=0.01, batch_size=64, epochs=1, ensemble_size=1, seed=2)
    report = coarse_study(small_dataset, [2, 1], ModelSection(), cfg)
    assert [row.k for row in report.rows] == [1, 2]
    assert [row.dt for row in report.rows] == pytest.approx([0.04, 0.08])
    assert report.truth["eta"] == pytest.approx(0.5)
    for row in report.rows:
        assert set(row.params) == {"omega_r", "gamma_d", "eta"}
        assert row.true_ce > 0 and row.learned_ce > 0
        assert row.rel_error["eta"] == pytest.approx(abs(row.params["eta"] - 0.5) / 0.5)


@pytest.mark.slow
def test_coarse_steps_bias_the_learned_rates(calibrated_model):
    """At 200 ns the fit drifts and the true model predicts worse than at 4 ns."""
    meta = DatasetMeta(
        dt=0.004,
        dt_fine=0.004,
        t_grid=[0.0, 0.4, 0.8, 1.2, 1.6, 2.0],
        shots_per_setting=90,
        seed=73,
        generator=calibrated_model.to_spec(),
    )
    fine = generate_dataset(meta, workers=4)
    cfg = TrainConfig(lr=0.01, batch_size=512, epochs=15, patience=5, ensemble_size=2, seed=0)
    report = coarse_study(fine, [1, 50], ModelSection(), cfg, workers=2)
    finest, coarsest = report.rows
    assert coarsest.dt == pytest.approx(0.2)
    assert np.mean(list(coarsest.rel_error.values())) > np.mean(list(finest.rel_error.values()))
    assert coarsest.true_ce > finest.true_ce
    for row in report.rows:
        assert row.learned_ce <= row.true_ce + 1e-3


@pytest.mark.slow
def test_true_model_predictions_are_calibrated(calibrated_model):
    """Filtering with the generator gives probabilities that match the outcome frequencies."""
    meta = DatasetMeta(
        dt=0.04,
        dt_fine=0.004,
        t_grid=[0.0, 0.4, 0.8, 1.2],
        shots_per_setting=700,
        seed=61,
        generator=calibrated_model.to_spec(),
    )
    data = generate_dataset(meta, workers=4)
    _, pi, y = dataset_predictions(calibrated_model, SpamModel.ideal(), data, workers=4)
    report = self_consistency(pi, y, 0.04)
    assert 0.9 <= report.slope <= 1.1
    assert report.epsilon < 0.02


@pytest.mark.slow
def test_distillation_beats_binned_fit(benchmark_dataset, benchmark_pinn):
    """Fitting the SDE to network trajectories recovers more parameters than binning them."""
    model, _ = benchmark_pinn
    series = rnn_trajectories(model, benchmark_dataset, workers=4)
    shots = list(benchmark_dataset)
    binned = bin_fit([series[s.index] for s in shots], [s.prep for s in shots], benchmark_dataset.meta.dt)
    cfg = TrainConfig(lr=0.01, batch_size=512, epochs=10, patience=5, ensemble_size=2, seed=0)
    distilled = distill(benchmark_dataset, series, ModelSection(), cfg, workers=4)
    truth = {"omega_r": 1.395, "gamma_d": 1.176, "eta": 0.1469}
    wins = sum(
        abs(distilled.params[name] - value) < abs(binned.params[name] - value)
        for name, value in truth.items()
    )
    assert wins >= 2
