import numpy as np
import pytest

from cfcep.channel import fit_ar, make_deployment, simulate_channels
from cfcep.estimation import link_stats, make_pilots
from cfcep.evaluation import SystemParams
from cfcep.predictor import MlpModel, ModelBank, history_len, init_params, input_dim, output_dim
from cfcep.scheduler import (
    make_schedule,
    overhead_factor,
    run_cep,
    run_identity,
    run_perfect,
    run_tdd,
    steady_position_cis,
)
from cfcep.seeding import substream

Q = 7  # small AR order keeps warmup short in scheduler tests


def tiny_bank(q=Q, ratios=(1, 2), seed=0):
    models = {}
    for b, (lo, hi) in enumerate([(0.05, 0.10), (0.10, 0.16), (0.16, 0.20)]):
        for n in ratios:
            dims = [input_dim(q, n), 8, 8, 8, output_dim(n)]
            weights, biases = init_params(dims, seed + b)
            models[(b, n)] = MlpModel(
                dims=dims, weights=weights, biases=biases, leaky_slope=0.01,
                input_mean=np.zeros(dims[0]), input_std=np.ones(dims[0]),
                output_mean=np.zeros(dims[-1]), output_std=np.ones(dims[-1]),
                band=(lo, hi), e2p_n=n, q=q,
            )
    return ModelBank(models=models)


@pytest.fixture(scope="module")
def setup():
    deployment = make_deployment(6, 4, 400.0, ("uniform", 0.06, 0.19), 5)
    profiles = [fit_ar(f, Q) for f in deployment.doppler]
    trace = simulate_channels(deployment, profiles, 40, 11)
    params = SystemParams(p_d=1e8, rho=1e8, tau=200, tau_c=4, bandwidth_hz=20e6)
    pilots = make_pilots(4, 4)
    return deployment, trace, params, pilots


class TestSchedule:
    def test_roles_1_1(self):
        s = make_schedule(1)
        np.testing.assert_array_equal(s.roles(6), [True, False] * 3)

    def test_roles_1_2(self):
        s = make_schedule(2)
        np.testing.assert_array_equal(
            s.roles(6), [True, False, False, True, False, False]
        )

    def test_role_periodicity(self):
        for n in (1, 2, 3):
            s = make_schedule(n)
            roles = s.roles(10 * (n + 1))
            np.testing.assert_array_equal(roles[: -(n + 1)], roles[n + 1 :])

    def test_pilot_counts(self):
        assert make_schedule(1).pilot_count(150) == 75
        assert make_schedule(2).pilot_count(150) == 50
        assert make_schedule(1).pilot_count(151) == 76

    def test_alpha(self):
        assert make_schedule(1).alpha == 1.0
        assert make_schedule(2).alpha == 0.5

    def test_invalid(self):
        with pytest.raises(ValueError):
            make_schedule(0)


class TestOverheadFactor:
    def test_tdd(self):
        assert overhead_factor("tdd", 1.0, 40, 200) == 0.8

    def test_cep_1_1(self):
        assert overhead_factor("cep", 1.0, 40, 200) == 0.9

    def test_cep_1_2(self):
        assert overhead_factor("cep", 0.5, 40, 200) == pytest.approx(
            0.9333333333333333, abs=1e-15
        )

    def test_identity_matches_cep(self):
        assert overhead_factor("identity", 1.0, 40, 200) == overhead_factor(
            "cep", 1.0, 40, 200
        )

    def test_tau_c_above_tau_rejected(self):
        with pytest.raises(ValueError):
            overhead_factor("tdd", 1.0, 300, 200)


class TestRunTdd:
    def test_every_ci_is_et(self, setup):
        deployment, trace, params, pilots = setup
        run = run_tdd(trace, deployment, pilots, params, 3)
        assert np.all(run.is_et)
        assert run.n_pilot_cis == trace.length

    def test_estimate_variance_tracks_gamma(self):
        # pooled over many CIs: Var(ghat) ~= gamma per link
        deployment = make_deployment(3, 2, 300.0, ("fixed", 0.1), 8)
        profiles = [fit_ar(0.1, Q) for _ in range(2)]
        trace = simulate_channels(deployment, profiles, 4000, 13)
        params = SystemParams(p_d=1.0, rho=1e10, tau=200, tau_c=2, bandwidth_hz=1.0)
        pilots = make_pilots(2, 2)
        run = run_tdd(trace, deployment, pilots, params, 21)
        stats = link_stats(
            deployment.beta, np.array([p.stationary_var for p in profiles])[None, :],
            params.rho, params.tau_c,
        )
        emp = np.mean(np.abs(run.gbar) ** 2, axis=0)
        np.testing.assert_allclose(emp, stats.gamma, rtol=0.15)

    def test_deterministic(self, setup):
        deployment, trace, params, pilots = setup
        a = run_tdd(trace, deployment, pilots, params, 3)
        b = run_tdd(trace, deployment, pilots, params, 3)
        np.testing.assert_array_equal(a.gbar, b.gbar)


class TestRunIdentity:
    def test_pt_copies_window_estimate(self, setup):
        deployment, trace, params, pilots = setup
        run = run_identity(trace, deployment, pilots, params, 1, 3)
        np.testing.assert_array_equal(run.gbar[1::2], run.gbar[0::2])

    def test_roles_match_schedule(self, setup):
        deployment, trace, params, pilots = setup
        run = run_identity(trace, deployment, pilots, params, 2, 3)
        np.testing.assert_array_equal(run.is_et, make_schedule(2).roles(trace.length))

    def test_pilot_count_matches_cep(self, setup):
        deployment, trace, params, pilots = setup
        ident = run_identity(trace, deployment, pilots, params, 1, 3)
        cep = run_cep(trace, deployment, tiny_bank(), pilots, params, 1, 3)
        assert ident.n_pilot_cis == cep.n_pilot_cis == make_schedule(1).pilot_count(trace.length)

    def test_static_channel_identity_nearly_exact(self):
        # f_n -> 0: the copied estimate differs from truth only by estimation error
        deployment = make_deployment(3, 2, 200.0, ("fixed", 0.005), 4)
        profiles = [fit_ar(0.005, 1) for _ in range(2)]
        trace = simulate_channels(deployment, profiles, 30, 5)
        params = SystemParams(p_d=1.0, rho=1e12, tau=200, tau_c=2, bandwidth_hz=1.0)
        run = run_identity(trace, deployment, make_pilots(2, 2), params, 1, 6)
        rel = np.abs(run.gbar - trace.g) / np.sqrt(deployment.beta)[None]
        assert np.median(rel) < 0.05


class TestRunCep:
    def test_et_values_match_identity_run(self, setup):
        deployment, trace, params, pilots = setup
        cep = run_cep(trace, deployment, tiny_bank(), pilots, params, 1, 3)
        ident = run_identity(trace, deployment, pilots, params, 1, 3)
        np.testing.assert_array_equal(cep.gbar[cep.is_et], ident.gbar[ident.is_et])

    def test_deterministic(self, setup):
        deployment, trace, params, pilots = setup
        a = run_cep(trace, deployment, tiny_bank(), pilots, params, 1, 3)
        b = run_cep(trace, deployment, tiny_bank(), pilots, params, 1, 3)
        np.testing.assert_array_equal(a.gbar, b.gbar)

    def test_warmup_and_first_predicted_ci(self, setup):
        deployment, trace, params, pilots = setup
        run = run_cep(trace, deployment, tiny_bank(), pilots, params, 1, 3)
        h_len = history_len(Q, 1)  # 4 ET CIs of history
        first_pred = 2 * (h_len - 1) + 1
        assert run.warmup_cis == first_pred
        assert not np.any(run.predicted[:first_pred])
        assert run.predicted[first_pred]

    def test_warmup_fallback_is_identity(self, setup):
        deployment, trace, params, pilots = setup
        run = run_cep(trace, deployment, tiny_bank(), pilots, params, 1, 3)
        ident = run_identity(trace, deployment, pilots, params, 1, 3)
        pre = ~run.predicted & ~run.is_et
        np.testing.assert_array_equal(run.gbar[pre], ident.gbar[pre])

    def test_predictions_differ_from_identity(self, setup):
        deployment, trace, params, pilots = setup
        run = run_cep(trace, deployment, tiny_bank(), pilots, params, 1, 3)
        ident = run_identity(trace, deployment, pilots, params, 1, 3)
        assert not np.allclose(run.gbar[run.predicted], ident.gbar[run.predicted])

    def test_pt_oracle_returns_truth(self, setup):
        deployment, trace, params, pilots = setup
        run = run_cep(
            trace, deployment, tiny_bank(), pilots, params, 1, 3, pt_oracle=True
        )
        np.testing.assert_array_equal(run.gbar[run.predicted], trace.g[run.predicted])

    def test_predictions_match_predict_channels(self, setup):
        # batched inference must agree with the per-link prediction API
        from cfcep.predictor import predict_channels, select_model

        deployment, trace, params, pilots = setup
        bank = tiny_bank()
        run = run_cep(trace, deployment, bank, pilots, params, 1, 3)
        ident = run_identity(trace, deployment, pilots, params, 1, 3)

        stats = link_stats(
            deployment.beta,
            np.array([p.stationary_var for p in trace.profiles])[None, :],
            params.rho, params.tau_c,
        )
        h_len = history_len(Q, 1)
        pred_cis = np.where(run.predicted)[0]
        ci = pred_cis[-1]
        et = ci - 1
        m, k = 2, 1
        hist_cis = et - 2 * np.arange(h_len)
        ghat_hist = ident.gbar[hist_cis, m, k]  # ET estimates, most recent first
        scale = np.sqrt(stats.beta_bar[m, k])
        model = select_model(bank, deployment.doppler[k], 1)
        a1 = trace.profiles[k].coeffs[0]
        expected = scale * predict_channels(model, ghat_hist / scale, a1)[0]
        assert run.gbar[ci, m, k] == pytest.approx(expected, rel=1e-10)


class TestSteadyPositions:
    def test_tdd_single_position(self, setup):
        deployment, trace, params, pilots = setup
        run = run_tdd(trace, deployment, pilots, params, 3)
        pos = steady_position_cis(run)
        assert len(pos) == 1
        np.testing.assert_array_equal(pos[0][1], np.arange(trace.length))

    def test_cep_positions_fully_predicted(self, setup):
        deployment, trace, params, pilots = setup
        run = run_cep(trace, deployment, tiny_bank(), pilots, params, 2, 3)
        for p, cis in steady_position_cis(run):
            if p == 0:
                assert np.all(run.is_et[cis])
            else:
                assert np.all(run.predicted[cis])

    def test_identity_positions_cover_complete_windows(self, setup):
        deployment, trace, params, pilots = setup
        run = run_identity(trace, deployment, pilots, params, 1, 3)
        pos = dict(steady_position_cis(run))
        assert len(pos[0]) == trace.length // 2

    def test_perfect_run(self, setup):
        _, trace, _, _ = setup
        run = run_perfect(trace)
        np.testing.assert_array_equal(run.gbar, trace.g)
        assert run.n_pilot_cis == 0
