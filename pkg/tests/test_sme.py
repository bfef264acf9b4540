import numpy as np
import pytest

from trajlearn.config import GAMMA_D, OMEGA_R
from trajlearn.dataset import DatasetMeta, WeakRecord
from trajlearn.qcore import (
    IDENTITY,
    PREP_STATES,
    SIGMA_X,
    SIGMA_Z,
    bloch_from_rho,
    is_density_matrix,
    rho_from_bloch,
)
from trajlearn.sme import (
    CoarseGrainError,
    DegenerateState,
    IntegratorDiagnostics,
    PhysicalModel,
    bloch_generator,
    coarse_dataset,
    coarse_grain,
    drift,
    generate_dataset,
    generate_trajectory,
    get_stepper,
    invert_record,
    milstein_step,
    plan_shots,
    positivity_step,
    simulate,
    solve_master_equation,
    synth_record,
)


def test_physical_model_validation():
    """Non-Hermitian drives, bad efficiencies and negative rates are rejected."""
    with pytest.raises(ValueError) as excinfo:
        PhysicalModel(h_r=np.array([[0, 1], [0, 0]]), lindblad=SIGMA_Z, eta=0.5)
    assert "Hermitian" in str(excinfo.value)
    with pytest.raises(ValueError):
        PhysicalModel(h_r=SIGMA_X, lindblad=SIGMA_Z, eta=1.5)
    with pytest.raises(ValueError):
        PhysicalModel(h_r=SIGMA_X, lindblad=SIGMA_Z, eta=0.5, gamma_down=-0.1)
    with pytest.raises(ValueError):
        PhysicalModel(h_r=np.eye(3), lindblad=SIGMA_Z, eta=0.5)


def test_model_spec_round_trip():
    """JSON specs carry complex matrices as (re, im) pairs."""
    m = PhysicalModel(
        h_r=0.4 * SIGMA_X,
        lindblad=0.3 * SIGMA_Z + 0.05j * SIGMA_X,
        eta=0.2,
        gamma_down=0.01,
    )
    back = PhysicalModel.from_spec(m.to_spec())
    np.testing.assert_allclose(back.h_r, m.h_r)
    np.testing.assert_allclose(back.lindblad, m.lindblad)
    assert (back.eta, back.gamma_up, back.gamma_down) == (0.2, 0.0, 0.01)


def test_bloch_generator_of_constrained_model():
    """Rabi rotation about x plus dephasing of x and y at rate Gamma_d."""
    omega, gamma = 1.3, 0.7
    a, b = bloch_generator(PhysicalModel.constrained(omega, gamma, 0.3))
    expected = np.array([[-gamma, 0.0, 0.0], [0.0, -gamma, -omega], [0.0, omega, 0.0]])
    np.testing.assert_allclose(a, expected, atol=1e-12)
    np.testing.assert_allclose(b, 0.0, atol=1e-12)


def test_relaxation_pumps_towards_ground_state():
    """gamma_down drives z towards +1, gamma_up towards -1."""
    a, b = bloch_generator(PhysicalModel.constrained(0.0, 0.0, 0.0, gamma_down=0.2))
    assert a[2, 2] == pytest.approx(-0.2)
    np.testing.assert_allclose(b, [0.0, 0.0, 0.2], atol=1e-12)
    a, b = bloch_generator(PhysicalModel.constrained(0.0, 0.0, 0.0, gamma_up=0.3))
    np.testing.assert_allclose(b, [0.0, 0.0, -0.3], atol=1e-12)
    assert a[0, 0] == pytest.approx(-0.15)


def test_master_equation_rabi_oscillation():
    """Without dephasing the ground state rotates as (0, -sin, cos)."""
    omega = 2.0
    series = solve_master_equation(PREP_STATES[0], PhysicalModel.constrained(omega, 0.0, 0.0), 0.01, 100)
    assert series.shape == (101, 3)
    t = 0.01 * np.arange(101)
    np.testing.assert_allclose(series[:, 1], -np.sin(omega * t), atol=1e-10)
    np.testing.assert_allclose(series[:, 2], np.cos(omega * t), atol=1e-10)


def test_master_equation_batch_shape():
    """Leading axes of the initial states are kept."""
    series = solve_master_equation(PREP_STATES, PhysicalModel.constrained(OMEGA_R, GAMMA_D, 0.1), 0.04, 5)
    assert series.shape == (6, 6, 3)
    np.testing.assert_allclose(series[:, 0], PREP_STATES)


def test_record_synthesis_and_inversion():
    """Record mean is sqrt(eta Gamma) z dt on I, zero on Q; inversion recovers the noise."""
    eta, gamma, dt = 0.4, 1.2, 0.01
    m = PhysicalModel.constrained(0.5, gamma, eta)
    rho = rho_from_bloch(np.array([[0.0, 0.0, 1.0], [0.6, 0.0, -0.5]]))
    zeros = np.zeros(2)
    dm_i, dm_q = synth_record(rho, zeros, zeros, m, dt)
    np.testing.assert_allclose(dm_i, np.sqrt(eta * gamma) * np.array([1.0, -0.5]) * dt)
    np.testing.assert_allclose(dm_q, 0.0, atol=1e-15)
    dw_i, dw_q = np.array([0.1, -0.2]), np.array([0.03, 0.0])
    back = invert_record(rho, *synth_record(rho, dw_i, dw_q, m, dt), m, dt)
    np.testing.assert_allclose(back[0], dw_i, atol=1e-15)
    np.testing.assert_allclose(back[1], dw_q, atol=1e-15)


@pytest.mark.parametrize("stepper", ["milstein", "positivity"])
def test_steps_return_density_matrices(stepper):
    """Updates stay Hermitian, unit trace and inside the Bloch ball, even for large kicks."""
    m = PhysicalModel.constrained(OMEGA_R, GAMMA_D, 0.9)
    rho = rho_from_bloch(PREP_STATES)
    rng = np.random.default_rng(0)
    diagnostics = IntegratorDiagnostics()
    step = get_stepper(stepper)
    for _ in range(50):
        rho = step(rho, 2.0 * rng.normal(size=6), 2.0 * rng.normal(size=6), m, 0.01, diagnostics)
        assert is_density_matrix(rho)
    assert diagnostics.steps == 50


def test_positivity_step_keeps_pure_states_pure():
    """With eta = 1 and no relaxation a pure state stays pure."""
    m = PhysicalModel.constrained(0.0, 1.0, 1.0)
    rho = rho_from_bloch(PREP_STATES[2:3])
    rng = np.random.default_rng(5)
    for _ in range(100):
        rho = positivity_step(rho, 0.1 * rng.normal(size=1), 0.1 * rng.normal(size=1), m, 0.01)
    assert np.linalg.norm(bloch_from_rho(rho), axis=-1)[0] == pytest.approx(1.0, abs=1e-9)


def test_unmeasured_milstein_matches_master_equation():
    """With eta = 0 the Milstein step is an Euler step of the master equation."""
    m = PhysicalModel.constrained(OMEGA_R, GAMMA_D, 0.0)
    rho = rho_from_bloch(PREP_STATES[0])
    for _ in range(1000):
        rho = milstein_step(rho, 0.0, 0.0, m, 0.001)
    exact = solve_master_equation(PREP_STATES[0], m, 0.001, 1000)[-1]
    np.testing.assert_allclose(bloch_from_rho(rho), exact, atol=5e-3)


def test_trajectory_average_follows_master_equation():
    """The ensemble mean of z stays within three standard errors of the master equation."""
    m = PhysicalModel.constrained(1.395, 1.176, 0.1469)
    n = 4096
    _, truth, _ = simulate(
        np.zeros(n, dtype=int), np.full(n, 2), 3, range(n), m, n_fine=200, dt_fine=0.002, keep_every=25
    )
    assert truth.shape == (n, 9, 3)
    z = truth[..., 2]
    exact = solve_master_equation(PREP_STATES[0], m, 0.05, 8)[:, 2]
    standard_error = z.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(z.mean(axis=0) - exact) <= 3.0 * standard_error + 1e-9)


def test_degenerate_state_is_reported():
    """A vanishing trace raises with the offending shot indices."""
    m = PhysicalModel.constrained(1.0, 1.0, 0.5)
    rho = rho_from_bloch(PREP_STATES[:3]).copy()
    rho[1] = 0.0
    with pytest.raises(DegenerateState) as excinfo:
        milstein_step(rho, np.zeros(3), np.zeros(3), m, 0.01)
    np.testing.assert_array_equal(excinfo.value.indices, [1])


def test_unknown_stepper():
    """Only the registered steppers are accepted."""
    with pytest.raises(ValueError) as excinfo:
        get_stepper("euler")
    assert "unknown stepper" in str(excinfo.value)


def test_coarse_grain_sums_blocks():
    """Coarse graining sums k consecutive increments and scales dt."""
    rec = WeakRecord(np.arange(6.0), -np.arange(6.0), 0.01)
    coarse = coarse_grain(rec, 3)
    np.testing.assert_allclose(coarse.dm_i, [3.0, 12.0])
    np.testing.assert_allclose(coarse.dm_q, [-3.0, -12.0])
    assert coarse.dt == pytest.approx(0.03)
    with pytest.raises(CoarseGrainError):
        coarse_grain(rec, 4)


def test_generate_trajectory_is_seeded():
    """The same seed reproduces a shot; a different seed does not."""
    m = PhysicalModel.constrained(OMEGA_R, GAMMA_D, 0.3)
    a = generate_trajectory(3, m, 0.2, 0.002, seed=5)
    b = generate_trajectory(3, m, 0.2, 0.002, seed=5)
    c = generate_trajectory(3, m, 0.2, 0.002, seed=6)
    assert a.record.n_steps == 100
    assert a.truth.shape == (101, 3)
    np.testing.assert_allclose(a.truth[0], PREP_STATES[3])
    np.testing.assert_array_equal(a.record.dm_i, b.record.dm_i)
    assert a.outcome == b.outcome
    assert not np.array_equal(a.record.dm_i, c.record.dm_i)
    with pytest.raises(ValueError):
        generate_trajectory(0, m, 0.2005, 0.002, seed=5)


def test_plan_balances_readout_axes(small_meta):
    """Each (duration, prep) cell reads every axis shots_per_setting times."""
    plan = plan_shots(small_meta)
    assert [row[0] for row in plan] == list(range(3 * 6 * 12))
    for cell in range(18):
        axes = [row[2] for row in plan[12 * cell : 12 * (cell + 1)]]
        assert sorted(axes) == [0] * 4 + [1] * 4 + [2] * 4
        assert len({row[1] for row in plan[12 * cell : 12 * (cell + 1)]}) == 1


def test_generated_dataset_layout(small_dataset):
    """Records are coarse grained, stored in float32 and truth starts at the preparation."""
    assert len(small_dataset) == 216
    lengths = sorted({shot.n_steps for shot in small_dataset})
    assert lengths == [0, 10, 20]
    for shot in small_dataset:
        assert shot.record.dt == pytest.approx(0.04)
        assert shot.truth.shape == (shot.n_steps + 1, 3)
        np.testing.assert_array_equal(shot.truth[0], PREP_STATES[shot.prep])
        np.testing.assert_array_equal(shot.record.dm_i, shot.record.dm_i.astype(np.float32))
        assert np.all(np.linalg.norm(shot.truth, axis=-1) <= 1.0)
    assert small_dataset.has_truth


def test_generation_is_independent_of_workers(small_meta, small_dataset, same_shots):
    """Two workers produce exactly the shots of one worker."""
    same_shots(generate_dataset(small_meta, workers=2).shots, small_dataset.shots)


def test_generation_requires_a_model():
    """A plan without a generator cannot be simulated."""
    with pytest.raises(ValueError):
        generate_dataset(DatasetMeta(t_grid=[0.0], shots_per_setting=1))


def test_zero_duration_outcomes_read_preparation(small_dataset):
    """T = 0 outcomes read the preparation itself."""
    for shot in small_dataset.where(n_steps=0):
        if PREP_STATES[shot.prep, shot.axis] != 0:
            assert shot.outcome == int(PREP_STATES[shot.prep, shot.axis])


def test_coarse_dataset(small_dataset):
    """k = 2 halves the steps; k = 3 keeps only shots whose length it divides."""
    coarse = coarse_dataset(small_dataset, 2)
    assert coarse.meta.dt == pytest.approx(0.08)
    assert sorted({s.n_steps for s in coarse}) == [0, 5, 10]
    shot = next(s for s in small_dataset if s.n_steps == 10)
    twin = next(s for s in coarse if s.index == shot.index)
    np.testing.assert_allclose(twin.record.dm_i, shot.record.dm_i.reshape(5, 2).sum(axis=1))
    np.testing.assert_array_equal(twin.truth, shot.truth[::2])
    thirds = coarse_dataset(small_dataset, 3)
    assert {s.n_steps for s in thirds} == {0}
    assert thirds.meta.t_grid == [0.0]


CALIBRATED = dict(omega_r=1.395, gamma_d=1.176, eta=0.1469)


def bloch_rate(rho, m):
    return bloch_from_rho(drift(rho, m))


def test_drift_examples():
    """Rabi rotation, dephasing of x and balanced pumping give the expected Bloch rates."""
    ground = rho_from_bloch(PREP_STATES[0])
    rabi = PhysicalModel(h_r=0.5 * 1.395 * SIGMA_X, lindblad=np.zeros((2, 2)), eta=0.0)
    np.testing.assert_allclose(bloch_rate(ground, rabi), [0.0, -1.395, 0.0], atol=1e-12)

    dephasing = PhysicalModel.constrained(0.0, 1.176, 0.0)
    plus = rho_from_bloch(PREP_STATES[2])
    np.testing.assert_allclose(bloch_rate(plus, dephasing), [-1.176, 0.0, 0.0], atol=1e-12)

    pumped = PhysicalModel.constrained(0.0, 0.0, 0.0, gamma_up=0.3, gamma_down=0.3)
    rate = drift(0.5 * IDENTITY, pumped)
    assert bloch_from_rho(rate)[2] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(rate, rate.conj().T, atol=1e-12)
    assert abs(np.trace(rate)) <= 1e-12


def test_record_offset_example():
    """The ground state shifts the I increment by sqrt(eta/2) 2 sqrt(Gamma/2) dt."""
    m = PhysicalModel.constrained(**CALIBRATED)
    dm_i, dm_q = synth_record(rho_from_bloch(PREP_STATES[0]), 0.123, -0.045, m, 0.04)
    assert dm_i - 0.123 == pytest.approx(0.01663, abs=1e-5)
    assert dm_q == -0.045


def test_milstein_limits():
    """No measurement gives a plain Euler step; a measured eigenstate is a fixed point."""
    m = PhysicalModel.constrained(**CALIBRATED).with_eta(0.0)
    rho = rho_from_bloch(np.array([0.3, -0.2, 0.5]))
    euler = rho + drift(rho, m) * 0.01
    np.testing.assert_allclose(milstein_step(rho, 0.7, -1.3, m, 0.01), euler, atol=1e-12)

    still = PhysicalModel.constrained(0.0, 1.176, 0.9)
    ground = rho_from_bloch(PREP_STATES[0])
    np.testing.assert_allclose(milstein_step(ground, 0.4, -0.8, still, 0.04), ground, atol=1e-12)


def test_one_step_agrees_with_fine_substeps():
    """Median over paths: one 0.04 us step is within 5e-3 trace distance of 1000 substeps."""
    m = PhysicalModel.constrained(**CALIBRATED)
    n_paths, n_sub, dt = 120, 1000, 0.04
    dw = np.random.default_rng(7).normal(0.0, np.sqrt(dt / n_sub), size=(2, n_paths, n_sub))
    start = rho_from_bloch(np.resize(PREP_STATES, (n_paths, 3)))
    coarse = milstein_step(start, dw[0].sum(axis=-1), dw[1].sum(axis=-1), m, dt)
    fine = start
    for s in range(n_sub):
        fine = milstein_step(fine, dw[0, :, s], dw[1, :, s], m, dt / n_sub)
    distance = 0.5 * np.linalg.norm(bloch_from_rho(coarse) - bloch_from_rho(fine), axis=-1)
    assert np.median(distance) <= 5e-3
    assert distance.max() < 0.05


def test_milstein_strong_order():
    """Pathwise terminal error against a dt/1024 reference falls linearly with the step."""
    m = PhysicalModel.constrained(**CALIBRATED)
    n_paths, horizon = 64, 0.16
    fine_dt = 0.04 / 1024
    n_fine = int(round(horizon / fine_dt))
    dw = np.random.default_rng(12).normal(0.0, np.sqrt(fine_dt), size=(2, n_paths, n_fine))
    start = np.tile(PREP_STATES[2], (n_paths, 1))

    def terminal(k):
        rho = rho_from_bloch(start)
        increments = dw.reshape(2, n_paths, n_fine // k, k).sum(axis=-1)
        for t in range(n_fine // k):
            rho = milstein_step(rho, increments[0, :, t], increments[1, :, t], m, k * fine_dt)
        return bloch_from_rho(rho)

    reference = terminal(1)
    steps = [0.04, 0.02, 0.01, 0.005]
    errors = [
        np.linalg.norm(terminal(int(round(h / fine_dt))) - reference, axis=-1).mean() for h in steps
    ]
    slope = np.polyfit(np.log(steps), np.log(errors), 1)[0]
    assert 0.8 <= slope <= 1.2


def test_hermitian_lindblad_leaves_q_quadrature_empty():
    """Over 10^6 increments the Q record averages to zero within four standard errors."""
    m = PhysicalModel.constrained(**CALIBRATED)
    n = 500
    record, _, _ = simulate(np.arange(n) % 6, np.full(n, 2), 17, range(n), m, n_fine=2000, dt_fine=0.001)
    dm_q = record[..., 1].ravel()
    assert dm_q.size == 10**6
    assert abs(dm_q.mean()) <= 4.0 * dm_q.std(ddof=1) / np.sqrt(dm_q.size)
    assert dm_q.var() == pytest.approx(0.001, rel=0.01)


def test_measurement_collapses_towards_poles():
    """Without drive a |+> ensemble splits towards z = +-1 with zero mean and growing spread."""
    m = PhysicalModel.constrained(0.0, 1.176, 1.0)
    n = 2000
    _, truth, _ = simulate(
        np.full(n, 2), np.full(n, 2), 23, range(n), m, n_fine=500, dt_fine=0.004, keep_every=125
    )
    z = truth[..., 2]
    spread = z.var(axis=0)
    assert np.all(np.diff(spread) > 0)
    assert spread[-1] > 0.4
    assert abs(z[:, -1].mean()) <= 4.0 * z[:, -1].std(ddof=1) / np.sqrt(n)


def test_coarse_grained_noise_variance():
    """Summing k pure-noise increments gives variance k dt."""
    m = PhysicalModel.constrained(**CALIBRATED).with_eta(0.0)
    dt, k, n = 0.001, 10, 10**6
    rng = np.random.default_rng(31)
    dw = rng.normal(0.0, np.sqrt(dt), size=(2, n))
    dm_i, dm_q = synth_record(rho_from_bloch(PREP_STATES[0]), dw[0], dw[1], m, dt)
    np.testing.assert_array_equal(dm_i, dw[0])
    coarse = coarse_grain(WeakRecord(dm_i, dm_q, dt), k)
    relative_error = np.sqrt(2.0 / (coarse.n_steps - 1))
    for channel in (coarse.dm_i, coarse.dm_q):
        assert abs(channel.var(ddof=1) / (k * dt) - 1.0) <= 5.0 * relative_error


def test_diagnostics_report_clip_rate():
    """Large kicks are clipped, counted and attributed to their shots."""
    m = PhysicalModel.constrained(0.0, 1.176, 1.0)
    rho = rho_from_bloch(PREP_STATES[2:4])
    diagnostics = IntegratorDiagnostics()
    milstein_step(rho, np.array([3.0, 0.0]), np.zeros(2), m, 0.04, diagnostics)
    assert diagnostics.steps == 1
    assert diagnostics.clipped == 1
    np.testing.assert_array_equal(diagnostics.shots, [True, False])
    assert diagnostics.clip_rate == pytest.approx(0.5)
    merged = diagnostics.merge(IntegratorDiagnostics(steps=1, clipped=0, shots=np.zeros(2, dtype=bool)))
    assert (merged.steps, merged.clipped, merged.clip_rate) == (2, 1, 0.25)
    diagnostics.reset()
    assert diagnostics.clip_rate == 0.0


@pytest.mark.slow
def test_fine_step_clipping_is_rare():
    """At dt = 0.001 us fewer than 0.1% of trajectories ever leave the Bloch ball."""
    m = PhysicalModel.constrained(**CALIBRATED)
    n = 3000
    diagnostics = IntegratorDiagnostics()
    simulate(
        np.arange(n) % 6,
        np.full(n, 2),
        41,
        range(n),
        m,
        n_fine=2000,
        dt_fine=0.001,
        keep_every=2000,
        diagnostics=diagnostics,
    )
    assert diagnostics.steps == 2000
    assert diagnostics.clip_rate < 1e-3
