import numpy as np
import pytest
import sympy

from koopmpc import (
    DelaySpec,
    InfeasibleError,
    InvalidInputError,
    MpcConfig,
    closed_loop_run,
    condense_qp,
    fit_dmdc,
    fit_edmdc,
    fit_delay_augmented,
    mpc_step,
    monomials_dictionary,
    simulate,
    solve_qp,
    snapshots_from_trajectories,
)
from koopmpc.dynamics import ForcingSignal, generate_training_trajectories, product_sines_family
from conftest import discrete_linear_samples

from test_numerics import brute_force_qp


def base_cfg(**overrides):
    kwargs = dict(
        q=np.eye(2), ru=0.1, rdu=0.1, horizon=15,
        u_min=-5.0, u_max=5.0, du_min=-50.0, du_max=50.0, reference=np.zeros(2),
    )
    kwargs.update(overrides)
    return MpcConfig(**kwargs)


@pytest.fixture(scope="module")
def linear_model():
    return fit_dmdc(discrete_linear_samples(m=60, seed=1))


@pytest.fixture(scope="module")
def vdp_edmdc(vdp_training):
    _, _, samples = vdp_training
    return fit_edmdc(samples, monomials_dictionary(2, 3))


class TestCondenseQp:
    def test_decoupled_inputs_stay_zero(self, linear_model):
        model = fit_dmdc(
            discrete_linear_samples(m=60, seed=2)
        )
        model.b = np.zeros_like(model.b)
        cfg = base_cfg(horizon=5)
        qp = condense_qp(model, model.lift([1.0, -2.0]), np.zeros(1), cfg)
        u = solve_qp(qp)
        assert np.max(np.abs(u)) < 1e-10

    def test_single_step_matches_symbolic_minimum(self, linear_model):
        cfg = base_cfg(horizon=1, u_min=-np.inf, u_max=np.inf, du_min=-np.inf, du_max=np.inf)
        x0 = np.array([0.8, -0.4])
        u_prev = np.array([0.3])
        qp = condense_qp(linear_model, linear_model.lift(x0), u_prev, cfg)
        u_star = solve_qp(qp)[0]

        u = sympy.Symbol("u")
        a, b = sympy.Matrix(linear_model.a), sympy.Matrix(linear_model.b)
        x1 = a @ sympy.Matrix(x0) + b * u
        cost = (x1.T @ x1)[0] + sympy.Rational(1, 10) * u**2 \
            + sympy.Rational(1, 10) * (u - sympy.Rational(3, 10)) ** 2
        sol = sympy.solve(sympy.diff(cost, u), u)
        assert abs(u_star - float(sol[0])) < 1e-8

    def test_two_step_with_active_rate_bound_matches_grid(self, linear_model):
        cfg = base_cfg(horizon=2, u_min=-1.0, u_max=1.0, du_min=-0.3, du_max=0.3)
        qp = condense_qp(linear_model, linear_model.lift([2.0, 1.0]), np.zeros(1), cfg)
        u = solve_qp(qp)
        ref = brute_force_qp(qp)

        def obj(v):
            return 0.5 * v @ qp.h @ v + qp.g @ v

        # The rate bound is active; the solver may not be beaten by the grid.
        assert np.any(np.abs(qp.a_ineq @ u - qp.b_ineq) < 1e-6)
        assert abs(obj(u) - obj(ref)) < 2e-3
        assert obj(ref) >= obj(u) - 1e-9

    def test_dimension_mismatch(self, linear_model):
        cfg = base_cfg()
        with pytest.raises(InvalidInputError):
            condense_qp(linear_model, np.zeros(5), np.zeros(1), cfg)


class TestMpcStep:
    def test_zero_input_at_reference(self, linear_model):
        step = mpc_step(linear_model, np.zeros(2), np.zeros(1), base_cfg())
        assert np.max(np.abs(step.u)) < 1e-8

    def test_applied_input_heads_the_plan(self, linear_model):
        step = mpc_step(linear_model, np.array([2.0, -1.0]), np.zeros(1), base_cfg())
        assert step.u[0] == step.input_sequence[0, 0]
        assert step.input_sequence.shape == (1, 15)
        assert step.predicted_states.shape == (2, 16)

    def test_vanderpol_model_respects_bounds(self, vdp_edmdc):
        u_prev = np.zeros(1)
        step = mpc_step(vdp_edmdc, np.array([2.0, 0.0]), u_prev, base_cfg())
        assert abs(step.u[0]) <= 5.0
        assert abs(step.u[0] - u_prev[0]) <= 50.0

    def test_rate_bounds_conflicting_with_box_raise(self, linear_model):
        cfg = base_cfg(du_min=-1.0, du_max=1.0)
        with pytest.raises(InfeasibleError):
            mpc_step(linear_model, np.array([1.0, 1.0]), np.array([100.0]), cfg)


class TestClosedLoop:
    def test_already_at_target_costs_nothing(self, linear_plant):
        trajs, _ = generate_training_trajectories(
            linear_plant, 30, [[-2, 2], [-2, 2]], 1.0, 0.05, product_sines_family(1.0, 5.0), 7
        )
        model = fit_dmdc(snapshots_from_trajectories(trajs, 0.05))
        result = closed_loop_run(linear_plant, model, base_cfg(), np.zeros(2), 2.0, 0.05)
        assert result.total_cost <= 1e-10

    def test_regulates_linear_plant_monotonically(self, linear_plant):
        trajs, _ = generate_training_trajectories(
            linear_plant, 30, [[-2, 2], [-2, 2]], 1.0, 0.05, product_sines_family(1.0, 5.0), 7
        )
        model = fit_dmdc(snapshots_from_trajectories(trajs, 0.05))
        cfg = base_cfg(u_min=-np.inf, u_max=np.inf, du_min=-np.inf, du_max=np.inf)
        result = closed_loop_run(linear_plant, model, cfg, np.array([2.0, 0.0]), 20.0, 0.05)
        norms = np.linalg.norm(result.trajectory.states, axis=0)
        assert norms[-1] < 1e-4
        assert np.all(np.diff(norms[10:]) <= 1e-12)  # monotone after the transient

    def test_constraints_hold_at_every_step(self, vdp_training, vdp_edmdc):
        plant, _, _ = vdp_training
        cfg = base_cfg(du_min=-0.2, du_max=0.2)  # tight enough to activate
        result = closed_loop_run(plant, vdp_edmdc, cfg, np.array([3.0, 0.0]), 5.0, 0.05)
        u = result.trajectory.inputs[0]
        assert np.all(np.abs(u) <= 5.0 + 1e-9)
        du = np.diff(np.concatenate([[0.0], u]))
        assert np.all(du <= 0.2 + 1e-9) and np.all(du >= -0.2 - 1e-9)
        assert np.any(np.abs(np.abs(du) - 0.2) < 1e-8)

    def test_bitwise_determinism(self, vdp_training, vdp_edmdc):
        plant, _, _ = vdp_training
        r1 = closed_loop_run(plant, vdp_edmdc, base_cfg(), np.array([1.0, -1.0]), 2.0, 0.05)
        r2 = closed_loop_run(plant, vdp_edmdc, base_cfg(), np.array([1.0, -1.0]), 2.0, 0.05)
        assert np.array_equal(r1.trajectory.states, r2.trajectory.states)
        assert np.array_equal(r1.trajectory.inputs, r2.trajectory.inputs)
        assert np.array_equal(r1.stage_costs, r2.stage_costs)

    def test_shifted_plan_warm_starts_every_step(self, vdp_training, vdp_edmdc):
        plant, _, _ = vdp_training
        result = closed_loop_run(plant, vdp_edmdc, base_cfg(), np.array([2.0, 0.0]), 3.0, 0.05)
        flags = result.solve_stats["warm_started"]
        assert not flags[0]  # nothing to shift yet
        assert np.all(flags[1:])  # shifted plan stayed feasible throughout

    def test_cumulative_cost_nondecreasing(self, vdp_training, vdp_edmdc):
        plant, _, _ = vdp_training
        result = closed_loop_run(plant, vdp_edmdc, base_cfg(), np.array([2.0, 0.0]), 3.0, 0.05)
        assert np.all(np.diff(result.cumulative_cost) >= -1e-15)
        assert np.all(result.stage_costs >= 0.0)

    def test_unforced_vanderpol_never_settles(self, vdp_training, vdp_edmdc):
        plant, _, _ = vdp_training
        cfg = base_cfg()
        controlled = closed_loop_run(plant, vdp_edmdc, cfg, np.array([2.0, 0.0]), 30.0, 0.05)
        assert np.linalg.norm(controlled.final_state) < 0.05
        unforced = simulate(plant, [2.0, 0.0], ForcingSignal.zero(1), 30.0, 0.05)
        assert np.linalg.norm(unforced.states[:, -1]) > 0.5  # limit cycle persists
        # Same stage cost accumulated along the unforced run exceeds control.
        err = unforced.states
        unforced_cost = float(np.sum(err[:, :-1] * (cfg.q @ err[:, :-1])))
        assert unforced_cost > controlled.total_cost

    def test_delay_model_warmup(self, vdp_training):
        plant, trajs, _ = vdp_training
        model = fit_delay_augmented(trajs, DelaySpec(5, 5))
        result = closed_loop_run(plant, model, base_cfg(), np.array([1.5, 0.0]), 3.0, 0.05)
        assert result.warmup_steps == 4
        assert np.all(result.trajectory.inputs[:, :4] == 0.0)
        assert result.solve_stats["iterations"][0] == 0

    def test_dt_mismatch_rejected(self, vdp_training, vdp_edmdc):
        plant, _, _ = vdp_training
        with pytest.raises(InvalidInputError):
            closed_loop_run(plant, vdp_edmdc, base_cfg(), np.zeros(2), 1.0, 0.1)
