import numpy as np
import pytest

from cfcep.errors import FormatError, NumericalError, UnsupportedDopplerError, WarmupError
from cfcep.predictor import (
    LEAKY_SLOPE,
    MlpModel,
    ModelBank,
    TrainHyper,
    TrainingSamples,
    band_index,
    build_features,
    forward,
    forward_core,
    generate_training_data,
    history_len,
    identity_mapping_mse,
    init_params,
    input_dim,
    load_dataset,
    load_model,
    loss_and_grads,
    mlp_dims,
    output_dim,
    predict_channels,
    save_dataset,
    save_model,
    select_model,
    train,
)
from cfcep.seeding import rng_for


def make_model(dims=None, q=7, n_pt=1, seed=0, zero=False):
    dims = dims if dims is not None else [input_dim(q, n_pt), 6, 6, 6, output_dim(n_pt)]
    weights, biases = init_params(dims, seed)
    if zero:
        weights = [np.zeros_like(w) for w in weights]
        biases = [np.zeros_like(b) for b in biases]
    d_in, d_out = dims[0], dims[-1]
    return MlpModel(
        dims=dims, weights=weights, biases=biases, leaky_slope=LEAKY_SLOPE,
        input_mean=np.zeros(d_in), input_std=np.ones(d_in),
        output_mean=np.zeros(d_out), output_std=np.ones(d_out),
        band=(0.05, 0.10), e2p_n=n_pt, q=q,
    )


class TestDimensions:
    def test_history_and_input_dims(self):
        assert history_len(63, 1) == 32
        assert history_len(63, 2) == 21
        assert input_dim(63, 1) == 66
        assert input_dim(63, 2) == 44
        assert output_dim(2) == 4

    def test_default_dims(self):
        assert mlp_dims(63, 1) == [66, 1024, 1024, 1024, 2]


class TestBuildFeatures:
    def test_length_for_reference_setup(self):
        hist = (rng_for(0).standard_normal(32) + 1j * rng_for(1).standard_normal(32))
        feats = build_features(hist, a1=-0.5)
        assert feats.shape == (66,)

    def test_zero_history_zero_features(self):
        feats = build_features(np.zeros(8, dtype=complex), a1=-0.9)
        np.testing.assert_array_equal(feats, np.zeros(18))

    def test_zero_hint_coefficient(self):
        hist = np.full(4, 1.0 + 2.0j)
        feats = build_features(hist, a1=0.0)
        assert feats[-2] == 0.0 and feats[-1] == 0.0

    def test_layout_most_recent_first(self):
        hist = np.array([1 + 2j, 3 + 4j, 5 + 6j])  # most recent first
        feats = build_features(hist, a1=-1.0)
        np.testing.assert_allclose(feats, [1, 2, 3, 4, 5, 6, 1, 2])

    def test_batched(self):
        hist = np.arange(12, dtype=complex).reshape(2, 2, 3)
        feats = build_features(hist, a1=-0.5)
        assert feats.shape == (2, 2, 8)
        np.testing.assert_allclose(feats[1, 1, -2], 0.5 * 9)

    def test_empty_history_rejected(self):
        with pytest.raises(WarmupError):
            build_features(np.zeros(0, dtype=complex), a1=0.1)


class TestForward:
    def test_zero_model_outputs_output_mean(self):
        m = make_model(zero=True)
        m.output_mean = np.array([1.5, -2.5])
        x = rng_for(2).standard_normal(m.dims[0])
        np.testing.assert_allclose(forward(m, x), m.output_mean)

    def test_zero_hidden_weights_bias_denormalized(self):
        m = make_model(zero=True)
        m.biases[-1] = np.array([0.5, -0.5])
        m.output_std = np.array([2.0, 4.0])
        m.output_mean = np.array([1.0, 1.0])
        x = rng_for(3).standard_normal(m.dims[0])
        np.testing.assert_allclose(forward(m, x), [2.0, -1.0])

    def test_matches_independent_recomputation(self):
        # straight-line reimplementation of the forward pass
        m = make_model(seed=5)
        m.input_mean = rng_for(6).standard_normal(m.dims[0]) * 0.1
        m.input_std = 1.0 + 0.1 * np.abs(rng_for(7).standard_normal(m.dims[0]))
        m.output_mean = np.array([0.3, -0.8])
        m.output_std = np.array([1.7, 0.4])
        x = rng_for(8).standard_normal((5, m.dims[0]))

        z = (x - m.input_mean) / m.input_std
        for i in range(3):
            z = z @ m.weights[i] + m.biases[i]
            z = np.where(z > 0, z, m.leaky_slope * z)
        z = z @ m.weights[3] + m.biases[3]
        expected = z * m.output_std + m.output_mean

        np.testing.assert_allclose(forward(m, x), expected, atol=1e-12, rtol=0)

    def test_dim_mismatch(self):
        m = make_model()
        with pytest.raises(ValueError):
            forward(m, np.zeros(m.dims[0] + 1))

    def test_finite_on_finite_input(self):
        m = make_model(seed=9)
        x = 1e6 * rng_for(10).standard_normal((3, m.dims[0]))
        assert np.all(np.isfinite(forward(m, x)))


class TestGradients:
    def test_backprop_matches_central_differences(self):
        dims = [4, 8, 8, 8, 2]
        weights, biases = init_params(dims, seed=17)
        rng = rng_for(18)
        x = rng.standard_normal((5, 4))
        y = rng.standard_normal((5, 2))
        _, gw, gb = loss_and_grads(weights, biases, LEAKY_SLOPE, x, y)

        step = 1e-5
        for li in range(len(weights)):
            for arr, grads in ((weights[li], gw[li]), (biases[li], gb[li])):
                flat = arr.reshape(-1)
                gflat = grads.reshape(-1)
                for idx in range(flat.size):
                    orig = flat[idx]
                    flat[idx] = orig + step
                    lp, _, _ = loss_and_grads(weights, biases, LEAKY_SLOPE, x, y)
                    flat[idx] = orig - step
                    lm, _, _ = loss_and_grads(weights, biases, LEAKY_SLOPE, x, y)
                    flat[idx] = orig
                    fd = (lp - lm) / (2 * step)
                    denom = max(abs(fd), abs(gflat[idx]), 1e-8)
                    assert abs(fd - gflat[idx]) / denom < 1e-4


def _copy_task_dataset(n=600, d_in=10, seed=4):
    rng = rng_for(seed)
    feats = rng.standard_normal((n, d_in))
    targets = np.stack([feats[:, 0], feats[:, 0]], axis=1)
    return TrainingSamples(
        features=feats, targets=targets, band=(0.05, 0.10), e2p_n=1, q=d_in - 2
    )


class TestTrain:
    def test_copy_task_learns(self):
        ds = _copy_task_dataset(n=1200)
        hyper = TrainHyper(lr=1e-2, batch_size=64, max_epochs=800, patience=800)
        res = train(ds, [10, 32, 32, 32, 2], hyper, seed=1)
        assert res.val_mse < 1e-3

    def test_single_sample_memorization(self):
        ds = _copy_task_dataset(n=2)
        hyper = TrainHyper(lr=1e-2, batch_size=1, max_epochs=300, patience=300,
                           val_fraction=0.5)
        res = train(ds, [10, 16, 16, 16, 2], hyper, seed=2)
        assert res.train_mse < 1e-4

    def test_deterministic_given_seed(self):
        ds = _copy_task_dataset(n=128)
        hyper = TrainHyper(lr=1e-3, batch_size=32, max_epochs=5, patience=5)
        r1 = train(ds, [10, 16, 16, 16, 2], hyper, seed=3)
        r2 = train(ds, [10, 16, 16, 16, 2], hyper, seed=3)
        for w1, w2 in zip(r1.model.weights, r2.model.weights):
            np.testing.assert_array_equal(w1, w2)

    def test_best_validation_is_monotone(self):
        ds = _copy_task_dataset(n=400)
        hyper = TrainHyper(lr=1e-3, batch_size=64, max_epochs=25, patience=25)
        res = train(ds, [10, 16, 16, 16, 2], hyper, seed=5)
        best = np.minimum.accumulate(res.val_history)
        assert np.all(np.diff(best) <= 1e-15)

    def test_divergence_detected(self):
        ds = _copy_task_dataset(n=64)
        ds.features[0, 0] = np.nan
        hyper = TrainHyper(lr=1e-3, batch_size=64, max_epochs=2, patience=2)
        with pytest.raises(NumericalError):
            train(ds, [10, 8, 8, 8, 2], hyper, seed=6)

    def test_empty_dataset_rejected(self):
        ds = TrainingSamples(
            features=np.empty((0, 10)), targets=np.empty((0, 2)),
            band=(0.05, 0.1), e2p_n=1, q=8,
        )
        with pytest.raises(ValueError):
            train(ds, [10, 8, 8, 8, 2], TrainHyper(), seed=0)


class TestPredictChannels:
    def test_single_prediction_pairing(self):
        m = make_model(zero=True, q=7, n_pt=1)
        m.output_mean = np.array([0.25, -0.75])
        hist = np.zeros(history_len(7, 1), dtype=complex)
        pred = predict_channels(m, hist, a1=-0.5)
        assert pred.shape == (1,)
        assert pred[0] == pytest.approx(0.25 - 0.75j)

    def test_two_predictions_ordered_by_ci(self):
        m = make_model(zero=True, q=7, n_pt=2)
        m.output_mean = np.array([1.0, 2.0, 3.0, 4.0])
        hist = np.zeros(history_len(7, 2), dtype=complex)
        pred = predict_channels(m, hist, a1=0.0)
        np.testing.assert_allclose(pred, [1 + 2j, 3 + 4j])

    def test_untrained_zero_model_predicts_mean(self):
        m = make_model(zero=True)
        hist = (1 + 1j) * np.ones(history_len(7, 1))
        np.testing.assert_allclose(predict_channels(m, hist, a1=-0.9), [0j])

    def test_short_history_rejected(self):
        m = make_model(q=7, n_pt=1)
        with pytest.raises(WarmupError):
            predict_channels(m, np.zeros(2, dtype=complex), a1=0.0)


class TestSelectModel:
    def _bank(self):
        models = {}
        for b in range(3):
            lo_hi = [(0.05, 0.10), (0.10, 0.16), (0.16, 0.20)][b]
            m = make_model(q=7, n_pt=1)
            m.band = lo_hi
            models[(b, 1)] = m
        return ModelBank(models=models)

    def test_band_assignment(self):
        assert band_index(0.07) == 0
        assert band_index(0.10) == 0
        assert band_index(0.105) == 1
        assert band_index(0.1599) == 1
        assert band_index(0.16) == 2
        assert band_index(0.18) == 2
        assert band_index(0.20) == 2

    def test_bank_selection(self):
        bank = self._bank()
        assert select_model(bank, 0.07, 1).band == (0.05, 0.10)
        assert select_model(bank, 0.18, 1).band == (0.16, 0.20)

    def test_out_of_range(self):
        bank = self._bank()
        for f in (0.05, 0.04, 0.21, 0.3):
            with pytest.raises(UnsupportedDopplerError):
                select_model(bank, f, 1)

    def test_missing_ratio(self):
        bank = self._bank()
        with pytest.raises(UnsupportedDopplerError):
            select_model(bank, 0.07, 2)


class TestGenerateTrainingData:
    def test_too_short_trace_gives_zero_samples(self):
        ds = generate_training_data((0.05, 0.10), 1, 63, 3, 40, 10.0, 4, seed=0)
        assert ds.n == 0
        assert ds.features.shape == (0, 66)

    def test_window_count_formula(self):
        # Q=63, N=1, trace 150: ET CIs 0,2,..,148; full history from CI 62;
        # targets need l+1 <= 149 -> 44 windows per trace
        n_traces = 3
        ds = generate_training_data((0.05, 0.10), 1, 63, n_traces, 150, 10.0, 4, seed=1)
        assert ds.n == n_traces * 44

    def test_targets_are_true_channels(self):
        from cfcep.channel import fit_ar, generate_trace
        from cfcep.seeding import TAG_DATASET, substream

        seed = 7
        ds = generate_training_data((0.05, 0.10), 1, 15, 1, 60, 50.0, 4, seed=seed)
        # regenerate the same trace and compare targets with true channels
        stream = substream(seed, TAG_DATASET, 0)
        rng = np.random.default_rng(stream)
        f_n = max(rng.uniform(0.05, 0.10), np.nextafter(0.05, np.inf))
        profile = fit_ar(f_n, 15)
        h = generate_trace(profile, 1, 60, substream(stream, 1))[0]
        h_len = history_len(15, 1)
        et = np.arange(0, 60, 2)
        valid = [i for i in range(h_len - 1, et.size) if et[i] + 1 < 60]
        expect = np.stack([h[et[i] + 1] for i in valid])
        np.testing.assert_allclose(ds.targets[:, 0], expect.real, atol=1e-12)
        np.testing.assert_allclose(ds.targets[:, 1], expect.imag, atol=1e-12)

    def test_deterministic(self):
        a = generate_training_data((0.10, 0.16), 2, 15, 2, 80, 25.0, 4, seed=3)
        b = generate_training_data((0.10, 0.16), 2, 15, 2, 80, 25.0, 4, seed=3)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.targets, b.targets)


class TestPersistence:
    def test_model_round_trip(self, tmp_path):
        m = make_model(seed=11)
        m.input_mean = rng_for(12).standard_normal(m.dims[0])
        path = tmp_path / "m.cfm"
        save_model(m, path)
        m2 = load_model(path)
        assert m2.dims == m.dims
        assert m2.band == m.band and m2.e2p_n == m.e2p_n and m2.q == m.q
        np.testing.assert_array_equal(m2.input_mean, m.input_mean)
        for w1, w2 in zip(m.weights, m2.weights):
            np.testing.assert_array_equal(w1, w2)
        for b1, b2 in zip(m.biases, m2.biases):
            np.testing.assert_array_equal(b1, b2)

    def test_corrupt_magic(self, tmp_path):
        m = make_model()
        path = tmp_path / "m.cfm"
        save_model(m, path)
        data = bytearray(path.read_bytes())
        data[:8] = b"NOTMAGIC"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_model(path)

    def test_truncated_file(self, tmp_path):
        m = make_model()
        path = tmp_path / "m.cfm"
        save_model(m, path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(FormatError):
            load_model(path)

    def test_inconsistent_dims_rejected(self, tmp_path):
        import struct

        m = make_model(q=7, n_pt=1)
        path = tmp_path / "m.cfm"
        save_model(m, path)
        data = bytearray(path.read_bytes())
        # patch the stored AR order: d_in no longer matches 2*ceil(Q/2)+2
        struct.pack_into("<I", data, 8 + 4 + 16 + 4, 63)
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_model(path)

    def test_dataset_round_trip(self, tmp_path):
        ds = _copy_task_dataset(n=37)
        path = tmp_path / "d.cfd"
        save_dataset(ds, path)
        ds2 = load_dataset(path)
        np.testing.assert_array_equal(ds.features, ds2.features)
        np.testing.assert_array_equal(ds.targets, ds2.targets)

    def test_dataset_magic_checked(self, tmp_path):
        path = tmp_path / "d.cfd"
        path.write_bytes(b"garbagefilemorethanheader")
        with pytest.raises(FormatError):
            load_dataset(path)


class TestIdentityOracle:
    def test_midpoint_values(self):
        # frozen via the independent series oracle
        assert identity_mapping_mse(0.075) == pytest.approx(0.109501480265, abs=1e-9)
        assert identity_mapping_mse(0.13) == pytest.approx(0.319937256164, abs=1e-9)
        assert identity_mapping_mse(0.18) == pytest.approx(0.590203045365, abs=1e-9)

    def test_two_slot_average_exceeds_one_slot(self):
        assert identity_mapping_mse(0.1, n_pt=2) > identity_mapping_mse(0.1, n_pt=1)
