import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deepbiz import autodiff as ad
from deepbiz import gradient_suite
from deepbiz import layers as ly
from deepbiz.errors import ContractError, DimensionError, VocabularyError

finite = st.floats(-50, 50, allow_nan=False)


def dense(weight, bias, activation):
    layer = ly.Dense(len(weight[0]), len(weight), activation)
    layer.params["weight"][...] = weight
    layer.params["bias"][...] = bias
    return layer


class TestActivations:
    def test_fixed_points(self):
        t = ad.Tape()
        assert ad.sigmoid(t.constant(0.0)).value == 0.5
        assert ad.tanh(t.constant(0.0)).value == 0.0
        assert np.array_equal(ad.relu(t.constant([-1.0, 2.0])).value, [0.0, 2.0])

    def test_sigmoid_of_log_three(self):
        assert ad.sigmoid(ad.Tape().constant(math.log(3))).value == pytest.approx(0.75, abs=1e-15)

    @given(arrays(np.float64, 8, elements=finite))
    def test_ranges(self, x):
        t = ad.Tape()
        s = ad.sigmoid(t.constant(x)).value
        # strictly inside (0, 1) until float64 saturates near |x| = 36
        assert np.all((s >= 0) & (s <= 1))
        assert np.all((s > 0) & (s < 1) | (np.abs(x) > 36))
        assert np.all(np.abs(ad.tanh(t.constant(x)).value) <= 1)
        assert np.all(ad.relu(t.constant(x)).value >= 0)


class TestDense:
    def test_identity(self):
        assert np.array_equal(dense(np.eye(2), [0, 0], "linear")(np.array([[1.0, 2.0]])), [[1.0, 2.0]])

    def test_relu_bias(self):
        assert np.array_equal(dense(np.eye(2), [-3, 0], "relu")(np.array([[1.0, 2.0]])), [[0.0, 2.0]])

    def test_hand_matmul(self):
        assert np.array_equal(dense([[1, 2], [3, 4]], [1, 1], "linear")(np.array([[1.0, 1.0]])), [[4.0, 8.0]])

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            ly.Dense(3, 2)(np.ones((1, 2)))

    def test_unknown_activation(self):
        with pytest.raises(ContractError):
            ly.Dense(2, 2, "swish")

    def test_weight_rows_match_bias(self):
        layer = ly.Dense(5, 3, rng=0)
        assert layer.params["weight"].shape[0] == layer.params["bias"].shape[0] == 3

    def test_glorot_bounds(self):
        w = ly.Dense(40, 60, rng=1).params["weight"]
        assert np.abs(w).max() <= math.sqrt(6 / 100)


class TestSoftmax:
    def test_examples(self):
        t = ad.Tape()
        assert np.array_equal(ad.softmax(t.constant([0.0, 0.0])).value, [0.5, 0.5])
        np.testing.assert_allclose(ad.softmax(t.constant([7.0] * 3)).value, [1 / 3] * 3, rtol=1e-15)
        np.testing.assert_allclose(ad.softmax(t.constant([math.log(2), 0.0])).value, [2 / 3, 1 / 3],
                                   rtol=1e-15)

    def test_large_logits_are_stable(self):
        out = ad.softmax(ad.Tape().constant([1000.0, 0.0])).value
        assert np.all(np.isfinite(out)) and out[0] == 1.0

    @given(arrays(np.float64, (3, 4), elements=finite), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        t = ad.Tape()
        p = ad.softmax(t.constant(x)).value
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(ad.softmax(t.constant(x + c)).value, p, atol=1e-12)


class TestEmbedding:
    def test_row_lookup(self):
        layer = ly.Embedding(3, 2)
        layer.params["table"][...] = [[1, 2], [3, 4], [5, 6]]
        assert np.array_equal(layer(np.array([2])), [[5.0, 6.0]])

    def test_one_hot_basis_rows(self):
        layer = ly.Embedding(3, 3)
        layer.params["table"][...] = np.eye(3)
        assert np.array_equal(layer(np.array([1])), [[0.0, 1.0, 0.0]])

    def test_gradient_hits_only_looked_up_row(self):
        t = ad.Tape()
        table = t.leaf(np.ones((4, 2)), "table")
        grads = ad.backward(t, ad.sum(ad.embedding(table, [1])))
        assert np.array_equal(grads["table"], [[0, 0], [1, 1], [0, 0], [0, 0]])

    @pytest.mark.parametrize("code", [-1, 3])
    def test_out_of_range(self, code):
        with pytest.raises(VocabularyError):
            ly.Embedding(3, 2)(np.array([code]))

    def test_init_std(self):
        table = ly.Embedding(400, 50, rng=0).params["table"]
        assert table.std() == pytest.approx(0.1, rel=0.02)


class TestDropout:
    def test_zero_rate_is_identity_in_train(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        assert np.array_equal(ly.Dropout(0.0)(x, "train", rng=0), x)

    def test_eval_is_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        assert np.array_equal(ly.Dropout(0.9)(x, "eval"), x)

    def test_rate_one_rejected(self):
        with pytest.raises(ContractError):
            ly.Dropout(1.0)

    def test_monte_carlo_mean(self):
        out = ly.Dropout(0.5)(np.ones((100000, 1)), "train", rng=np.random.default_rng(3))
        # binomial estimator: sd of the mean is 1/sqrt(n) = 0.0032
        assert abs(out.mean() - 1.0) < 3 / math.sqrt(100000)
        assert set(np.unique(out)) == {0.0, 2.0}


class TestBatchNorm:
    def test_constant_batch_gives_zeros(self):
        out = ly.BatchNorm(3)(np.full((5, 3), 4.0), "train")
        assert np.array_equal(out, np.zeros((5, 3)))

    @given(arrays(np.float64, (6, 3), elements=st.floats(-10, 10)))
    @settings(max_examples=50, deadline=None)
    def test_train_output_standardized(self, x):
        if np.any(x.var(axis=0) < 1e-2):
            return
        out = ly.BatchNorm(3)(x, "train")
        assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
        var = out.var(axis=0)
        assert np.all((var >= 1 - 10 * 1e-5 / x.var(axis=0).min()) & (var <= 1 + 1e-12))

    def test_affine_on_standardized_input(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(200, 2))
        x = (x - x.mean(0)) / x.std(0)
        layer = ly.BatchNorm(2)
        layer.params["gamma"][:] = 2.0
        layer.params["beta"][:] = 1.0
        out = layer(x, "train")
        np.testing.assert_allclose(out.mean(0), 1.0, atol=1e-9)
        np.testing.assert_allclose(out.std(0), 2.0, rtol=1e-4)

    def test_running_stats_update_and_eval(self):
        layer = ly.BatchNorm(1)
        x = np.array([[1.0], [3.0]])
        layer(x, "train")
        assert layer.buffers["running_mean"][0] == pytest.approx(0.2)
        assert layer.buffers["running_var"][0] == pytest.approx(0.9 + 0.1 * 2.0)
        expected = (x - 0.2) / np.sqrt(1.1 + 1e-5)
        np.testing.assert_allclose(layer(x, "eval"), expected, rtol=1e-14)

    def test_single_row_train_rejected(self):
        with pytest.raises(ContractError):
            ly.BatchNorm(2)(np.ones((1, 2)), "train")


def double_sum_conv(x, k):
    m, r = len(x), len(k) // 2
    out = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            for a in range(-r, r + 1):
                for b in range(-r, r + 1):
                    if 0 <= i + a < m and 0 <= j + b < m:
                        out[i, j] += x[i + a][j + b] * k[a + r][b + r]
    return out


class TestConv2D:
    def conv(self, kernel, x):
        layer = ly.Conv2D(len(kernel))
        layer.params["kernel"][...] = kernel
        return layer(np.asarray(x, dtype=float))

    def test_zero_kernel(self):
        assert not self.conv(np.zeros((3, 3)), np.ones((4, 4))).any()

    def test_unit_kernel_is_identity(self):
        x = np.random.default_rng(0).normal(size=(5, 5))
        assert np.array_equal(self.conv([[1.0]], x), x)

    def test_ones_on_ones(self):
        assert np.array_equal(self.conv(np.ones((3, 3)), np.ones((3, 3))), [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_even_width_rejected(self):
        with pytest.raises(ContractError):
            ly.Conv2D(2)

    def test_matches_double_sum_oracle(self):
        rng = np.random.default_rng(4)
        x, k = rng.normal(size=(6, 6)), rng.normal(size=(5, 5))
        np.testing.assert_allclose(self.conv(k, x), double_sum_conv(x, k), rtol=1e-12, atol=1e-12)

    def test_identity_kernel(self):
        k = np.zeros((3, 3))
        k[1, 1] = 1.0
        x = np.random.default_rng(5).normal(size=(4, 4))
        assert np.array_equal(self.conv(k, x), x)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_superposition(self, seed):
        rng = np.random.default_rng(seed)
        x1, x2 = rng.normal(size=(2, 5, 5))
        k1, k2 = rng.normal(size=(2, 3, 3))
        a, b = rng.normal(size=2)
        np.testing.assert_allclose(self.conv(k1, a * x1 + b * x2), a * self.conv(k1, x1) + b * self.conv(k1, x2),
                                   atol=1e-10)
        np.testing.assert_allclose(self.conv(a * k1 + b * k2, x1), a * self.conv(k1, x1) + b * self.conv(k2, x1),
                                   atol=1e-10)


# -- recurrent cells against a scalar loop re-implementation ----------------------------

def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def _affine(w, b, v, row):
    return b[row] + sum(w[row][c] * v[c] for c in range(len(v)))


def scalar_gru(params, x, h):
    wz, bz, wr, br, wh, bh = (params[k] for k in ("weight_z", "bias_z", "weight_r", "bias_r", "weight_h", "bias_h"))
    n = len(h)
    xh = list(x) + list(h)
    z = [_sig(_affine(wz, bz, xh, i)) for i in range(n)]
    r = [_sig(_affine(wr, br, xh, i)) for i in range(n)]
    xrh = list(x) + [r[i] * h[i] for i in range(n)]
    cand = [math.tanh(_affine(wh, bh, xrh, i)) for i in range(n)]
    return [(1 - z[i]) * h[i] + z[i] * cand[i] for i in range(n)]


def scalar_lstm(params, x, h, c):
    n = len(h)
    xh = list(x) + list(h)
    gate = {g: [_affine(params[f"weight_{g}"], params[f"bias_{g}"], xh, i) for i in range(n)] for g in "fioc"}
    f = [_sig(v) for v in gate["f"]]
    i_ = [_sig(v) for v in gate["i"]]
    o = [_sig(v) for v in gate["o"]]
    cand = [math.tanh(v) for v in gate["c"]]
    c_new = [f[k] * c[k] + i_[k] * cand[k] for k in range(n)]
    return [o[k] * math.tanh(c_new[k]) for k in range(n)], c_new


def run_cell(cell, x, state):
    t = ad.Tape()
    if isinstance(cell, ly.LSTMCell):
        h, c = cell.step(t.constant(x), (t.constant(state[0]), t.constant(state[1])))
        return h.value, c.value
    return cell.step(t.constant(x), t.constant(state)).value


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_gru_matches_scalar_loop(seed):
    rng = np.random.default_rng(seed)
    cell = ly.GRUCell(3, 4, rng)
    for k in cell.params:
        cell.params[k][...] = rng.normal(size=cell.params[k].shape)
    x, h = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    out = run_cell(cell, x, h)
    for row in range(2):
        np.testing.assert_allclose(out[row], scalar_gru(cell.params, x[row], h[row]), rtol=1e-12, atol=1e-12)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_lstm_matches_scalar_loop(seed):
    rng = np.random.default_rng(seed)
    cell = ly.LSTMCell(3, 4, rng)
    for k in cell.params:
        cell.params[k][...] = rng.normal(size=cell.params[k].shape)
    x, h, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    h_out, c_out = run_cell(cell, x, (h, c))
    for row in range(2):
        h_ref, c_ref = scalar_lstm(cell.params, x[row], h[row], c[row])
        np.testing.assert_allclose(h_out[row], h_ref, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(c_out[row], c_ref, rtol=1e-12, atol=1e-12)


def zeroed(cell):
    for v in cell.params.values():
        v[...] = 0.0
    return cell


class TestGRUStep:
    def test_all_zero(self):
        assert not run_cell(zeroed(ly.GRUCell(2, 3)), np.ones((1, 2)), np.zeros((1, 3))).any()

    def test_update_gate_closed_keeps_state(self):
        cell = ly.GRUCell(2, 3, rng=0)
        cell.params["bias_z"][:] = -50.0
        h = np.array([[0.3, -0.7, 0.9]])
        np.testing.assert_allclose(run_cell(cell, np.ones((1, 2)), h), h, atol=1e-12)

    def test_update_gate_open_takes_candidate(self):
        cell = ly.GRUCell(2, 3, rng=0)
        cell.params["bias_z"][:] = 50.0
        x, h = np.ones((1, 2)), np.array([[0.3, -0.7, 0.9]])
        r = 1 / (1 + np.exp(-(np.concatenate([x, h], 1) @ cell.params["weight_r"].T)))
        cand = np.tanh(np.concatenate([x, r * h], 1) @ cell.params["weight_h"].T)
        np.testing.assert_allclose(run_cell(cell, x, h), cand, atol=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            run_cell(ly.GRUCell(2, 3), np.ones((1, 4)), np.zeros((1, 3)))


class TestLSTMStep:
    def test_all_zero(self):
        h, c = run_cell(zeroed(ly.LSTMCell(2, 3)), np.zeros((1, 2)), (np.zeros((1, 3)), np.zeros((1, 3))))
        assert not h.any() and not c.any()

    def test_forget_open_input_closed_keeps_cell(self):
        cell = ly.LSTMCell(2, 3, rng=1)
        cell.params["bias_f"][:] = 50.0
        cell.params["bias_i"][:] = -50.0
        c = np.array([[1.5, -0.2, 0.4]])
        _, c_new = run_cell(cell, np.ones((1, 2)), (np.zeros((1, 3)), c))
        np.testing.assert_allclose(c_new, c, atol=1e-12)

    @given(arrays(np.float64, (2, 3), elements=st.floats(-1e3, 1e3)))
    @settings(max_examples=30, deadline=None)
    def test_hidden_bounded(self, x):
        # h = o * tanh(c) with o in (0, 1)
        h, _ = run_cell(ly.LSTMCell(3, 4, rng=2), x, (np.zeros((2, 4)), np.zeros((2, 4))))
        assert np.all(np.isfinite(h)) and np.all(np.abs(h) < 1)


class TestSequenceForward:
    def test_single_step_equals_cell_step(self):
        cell = ly.GRUCell(3, 4, rng=0)
        x = np.random.default_rng(1).normal(size=(2, 1, 3))
        last, outputs = ly.sequence_forward(cell, x)
        np.testing.assert_array_equal(last.value, run_cell(cell, x[:, 0], np.zeros((2, 4))))
        assert len(outputs) == 1

    def test_input_blind_cell_depends_only_on_length(self):
        # with input weights zeroed, h_t = tanh(W_h h_{t-1} + b) iterated from 0
        cell = ly.RNNCell(2, 3, rng=0)
        cell.params["weight"][:, :2] = 0.0
        cell.params["bias"][:] = [0.1, -0.2, 0.3]
        rng = np.random.default_rng(5)
        a, _ = ly.sequence_forward(cell, rng.normal(size=(4, 2)))
        b, _ = ly.sequence_forward(cell, rng.normal(size=(4, 2)) * 10)
        h = np.zeros(3)
        for _ in range(4):
            h = np.tanh(cell.params["weight"][:, 2:] @ h + cell.params["bias"])
        np.testing.assert_array_equal(a.value, b.value)
        np.testing.assert_allclose(a.value[0], h, rtol=1e-14)

    def test_variable_lengths_give_fixed_width(self):
        net = ly.sequence_model(3, "lstm", 1, hidden=5, squash=4, rng=0)
        rng = np.random.default_rng(0)
        seqs = [rng.normal(size=(L, 3)) for L in (2, 7, 4)]
        out = net.predict(seqs)
        assert out.shape == (3, 1)
        # padding must not change a sequence's result
        np.testing.assert_allclose(out[0], net.predict([seqs[0]])[0], rtol=1e-12)

    def test_empty_sequence_rejected(self):
        with pytest.raises(ContractError):
            ly.sequence_forward(ly.GRUCell(2, 2), np.zeros((1, 0, 2)))


class TestNetwork:
    def test_single_identity_layer(self):
        x = np.array([[1.0, -2.0]])
        assert np.array_equal(ly.Network([dense(np.eye(2), [0, 0], "linear")]).predict(x), x)

    def test_depth_one_equals_dense(self):
        layer = ly.Dense(3, 2, "tanh", rng=0)
        x = np.random.default_rng(1).normal(size=(4, 3))
        assert np.array_equal(ly.Network([layer]).predict(x), layer(x))

    def test_hand_built_xor(self):
        # hidden units compute OR and AND; output is OR minus AND
        hidden = dense([[20.0, 20.0], [20.0, 20.0]], [-10.0, -30.0], "sigmoid")
        out = dense([[20.0, -20.0]], [-10.0], "sigmoid")
        x = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
        pred = ly.Network([hidden, out]).predict(x)[:, 0]
        assert list((pred > 0.5).astype(int)) == [0, 1, 1, 0]

    def test_conformance_error_names_layer_index(self):
        with pytest.raises(DimensionError, match="layer 1"):
            ly.Network([ly.Dense(3, 4), ly.Dense(5, 1)])

    def test_mode_governs_dropout(self):
        net = ly.mlp(4, [8], 1, dropout=0.5, rng=0)
        x = np.ones((3, 4))
        assert np.array_equal(net.forward(x, "eval").value, net.forward(x, "eval").value)
        a = net.forward(x, "train", rng=np.random.default_rng(0)).value
        b = net.forward(x, "train", rng=np.random.default_rng(1)).value
        assert not np.array_equal(a, b)

    def test_classification_predict_is_probability(self):
        net = ly.mlp(3, [4], 3, task="classification", rng=0)
        p = net.predict(np.random.default_rng(0).normal(size=(5, 3)))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


class TestSerialization:
    def networks(self):
        rng = np.random.default_rng(0)
        tab = ly.TabularInput(3, [4, 5], 6, rng)
        yield ly.mlp(tab.out_width, [8, 8], 2, dropout=0.25, batchnorm=True, task="classification",
                     input_layer=tab, rng=rng), (rng.normal(size=(6, 3)), rng.integers(0, 4, size=(6, 2)))
        yield ly.sequence_model(5, "gru", 1, hidden=4, squash=3, dropout=0.1, rng=rng), rng.normal(size=(2, 6, 5))
        yield ly.Network([ly.Conv2D(3, rng), ly.Flatten(), ly.Dense(16, 1, rng=rng)]), rng.normal(size=(2, 4, 4))

    def test_round_trip_is_bit_exact(self):
        for net, x in self.networks():
            net.forward(x if not isinstance(x, tuple) else x, "train", rng=np.random.default_rng(0))
            copy = ly.Network.from_json(net.to_json())
            for k, v in net.get_state().items():
                assert np.array_equal(copy.get_state()[k], v)
            assert np.array_equal(copy.predict(x), net.predict(x))
            assert copy.to_json() == net.to_json()

    def test_envelope_fields(self):
        doc = json.loads(ly.mlp(2, [3], 1, rng=0).to_json())
        assert (doc["format"], doc["version"], doc["kind"]) == ("deepbiz", 1, "network")

    def test_wrong_version_rejected(self):
        doc = json.loads(ly.mlp(2, [3], 1, rng=0).to_json())
        doc["version"] = 99
        with pytest.raises(ContractError):
            ly.Network.from_dict(doc)


@pytest.mark.parametrize("name", sorted(gradient_suite.CHECKS))
def test_layer_gradients(name):
    assert gradient_suite.CHECKS[name](0) < gradient_suite.TOLERANCE
