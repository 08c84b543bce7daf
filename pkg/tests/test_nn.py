import numpy as np
import pytest

from dfalab import diffmath as dm
from dfalab import nn


def zero_acquirer(n_features=5, hidden=3):
    p = nn.MlpAcquirerParams.init(np.random.default_rng(0), n_features, hidden)
    for arr in p.parameters().values():
        arr[...] = 0.0
    return p


# ---------------------------------------------------------------- acquirer

def test_zero_acquirer_outputs_zero_logits():
    p = zero_acquirer()
    t = dm.Tape()
    bound = p.bind(t)
    logits = nn.mlp_acquirer_forward(
        bound, t.leaf(np.random.default_rng(1).normal(size=(4, 5))),
        t.leaf(np.zeros((4, 5))), t.leaf(np.full((4, 1), 0.3)))
    np.testing.assert_array_equal(logits.value, 0.0)


def test_acquirer_parameter_counts_forda_shape():
    p = nn.MlpAcquirerParams.init(np.random.default_rng(0), 40, 4)
    counts = {k: v.size for k, v in p.parameters().items()}
    assert counts["layer1.weight"] + counts["layer1.bias"] == (2 * 40 + 1) * 4 + 4  # 328
    assert counts["layer2.weight"] + counts["layer2.bias"] == 4 * 40 + 40  # 200
    assert counts["init_logits"] == 40


def test_acquirer_batched_equals_rowwise():
    p = nn.MlpAcquirerParams.init(np.random.default_rng(3), 6, 4)
    rng = np.random.default_rng(4)
    obs = rng.normal(size=(5, 6))
    mask = (rng.random((5, 6)) < 0.5).astype(float)
    tn = rng.random((5, 1))

    t = dm.Tape()
    batched = nn.mlp_acquirer_forward(p.bind(t), t.leaf(obs), t.leaf(mask),
                                      t.leaf(tn)).value
    for i in range(5):
        t2 = dm.Tape()
        row = nn.mlp_acquirer_forward(p.bind(t2), t2.leaf(obs[i:i + 1]),
                                      t2.leaf(mask[i:i + 1]),
                                      t2.leaf(tn[i:i + 1])).value
        np.testing.assert_allclose(batched[i], row[0], atol=1e-12)


def test_acquirer_shape_mismatch_raises():
    p = zero_acquirer()
    t = dm.Tape()
    with pytest.raises(ValueError, match="acquirer"):
        nn.mlp_acquirer_forward(p.bind(t), t.leaf(np.zeros((2, 5))),
                                t.leaf(np.zeros((2, 4))), t.leaf(np.zeros((2, 1))))


# ---------------------------------------------------------------- lstm

def lstm_weights(in_dim, hid=nn.LSTM_HIDDEN, fill=0.0, rng=None):
    if rng is not None:
        return {"wx": rng.normal(size=(in_dim, 4 * hid)) * 0.3,
                "wh": rng.normal(size=(hid, 4 * hid)) * 0.3,
                "b": rng.normal(size=(4 * hid,)) * 0.3}
    return {"wx": np.full((in_dim, 4 * hid), fill),
            "wh": np.full((hid, 4 * hid), fill),
            "b": np.full((4 * hid,), fill)}


def run_lstm_step(layer, x, h, c):
    t = dm.Tape()
    hn, cn = nn.lstm_step(t.leaf(layer["wx"]), t.leaf(layer["wh"]),
                          t.leaf(layer["b"]), t.leaf(x), t.leaf(h), t.leaf(c))
    return hn.value, cn.value


def test_lstm_zero_everything_stays_zero():
    layer = lstm_weights(3)
    h, c = run_lstm_step(layer, np.zeros((2, 3)),
                         np.zeros((2, 16)), np.zeros((2, 16)))
    np.testing.assert_array_equal(h, 0.0)
    np.testing.assert_array_equal(c, 0.0)


def test_lstm_saturated_forget_gate_preserves_cell():
    layer = lstm_weights(3)
    layer["b"] = np.concatenate([np.zeros(16), np.full(16, 20.0),
                                 np.zeros(16), np.zeros(16)])  # (i, f, g, o)
    c0 = np.random.default_rng(0).uniform(-1, 1, (2, 16))
    _, c1 = run_lstm_step(layer, np.zeros((2, 3)), np.zeros((2, 16)), c0)
    np.testing.assert_allclose(c1, c0, atol=1e-8)


def test_lstm_chained_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    layer = lstm_weights(2, rng=rng)
    xs = rng.normal(size=(5, 1, 2))

    def f(wx_flat):
        t = wx_flat.tape
        wx = wx_flat  # [2, 64] passed directly
        wh, b = t.leaf(layer["wh"]), t.leaf(layer["b"])
        h = t.leaf(np.zeros((1, 16)))
        c = t.leaf(np.zeros((1, 16)))
        for step in range(5):
            h, c = nn.lstm_step(wx, wh, b, t.leaf(xs[step]), h, c)
        return dm.reduce_sum(h)

    assert dm.grad_check(f, layer["wx"]) < 1e-4


def test_lstm_state_bounded_over_long_horizon():
    rng = np.random.default_rng(11)
    p = nn.LstmClassifierParams.init(rng, 4, 2, 2)
    t = dm.Tape()
    bound = p.bind(t)
    state = p.initial_state(t, 3)
    for _ in range(500):
        x = t.leaf(rng.uniform(-3, 3, (3, 4)))
        m = t.leaf((rng.random((3, 4)) < 0.5).astype(float))
        tn = t.leaf(rng.random((3, 1)))
        state = nn.classifier_step(bound, state, x, m, tn)
    for h, c in state:
        assert np.abs(h.value).max() <= 1.0
        assert np.abs(c.value).max() < 50.0


def test_classifier_two_layers_equals_manual_composition():
    p = nn.LstmClassifierParams.init(np.random.default_rng(5), 3, 2, 2)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 3))
    m = np.ones((2, 3))
    tn = np.full((2, 1), 0.5)

    t = dm.Tape()
    bound = p.bind(t)
    state = nn.classifier_step(bound, p.initial_state(t, 2),
                               t.leaf(x), t.leaf(m), t.leaf(tn))

    t2 = dm.Tape()
    b2 = p.bind(t2)
    inp = dm.concat_cols([t2.leaf(x), t2.leaf(m), t2.leaf(tn)])
    z = np.zeros((2, 16))
    h0, c0 = nn.lstm_step(b2["lstm0.wx"], b2["lstm0.wh"], b2["lstm0.b"],
                          inp, t2.leaf(z), t2.leaf(z))
    h1, c1 = nn.lstm_step(b2["lstm1.wx"], b2["lstm1.wh"], b2["lstm1.b"],
                          h0, t2.leaf(z), t2.leaf(z))
    np.testing.assert_array_equal(state[0][0].value, h0.value)
    np.testing.assert_array_equal(state[1][0].value, h1.value)
    np.testing.assert_array_equal(state[1][1].value, c1.value)


def test_zero_mask_still_advances_state():
    p = nn.LstmClassifierParams.init(np.random.default_rng(8), 3, 2, 2)
    t = dm.Tape()
    bound = p.bind(t)
    state = nn.classifier_step(bound, p.initial_state(t, 1),
                               t.leaf(np.zeros((1, 3))), t.leaf(np.zeros((1, 3))),
                               t.leaf(np.zeros((1, 1))))
    assert np.abs(state[-1][0].value).sum() > 0.0  # biases move the gates


# ---------------------------------------------------------------- predict / loss

def test_zero_head_gives_uniform_probabilities():
    p = nn.LstmClassifierParams.init(np.random.default_rng(9), 3, 4, 2)
    p.head.weight[...] = 0.0
    p.head.bias[...] = 0.0
    t = dm.Tape()
    bound = p.bind(t)
    state = nn.classifier_step(bound, p.initial_state(t, 2),
                               t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 3))),
                               t.leaf(np.ones((2, 1))))
    probs = dm.softmax(nn.classifier_predict(bound, state))
    np.testing.assert_allclose(probs.value, 0.25, atol=1e-15)


def test_argmax_invariant_to_constant_logit_shift():
    rng = np.random.default_rng(10)
    logits = rng.normal(size=(6, 4))
    assert (logits.argmax(-1) == (logits + 3.7).argmax(-1)).all()


def test_cross_entropy_uniform_logits_is_log_c():
    t = dm.Tape()
    loss = nn.cross_entropy(t.leaf(np.zeros((4, 2))), np.array([0, 1, 0, 1]))
    assert abs(loss.item() - np.log(2.0)) < 1e-12


def test_cross_entropy_confident_correct_is_tiny():
    t = dm.Tape()
    logits = np.zeros((1, 3))
    logits[0, 2] = 50.0
    loss = nn.cross_entropy(t.leaf(logits), np.array([2]))
    assert loss.item() < 1e-9


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(12)
    logits = rng.normal(size=(3, 4))
    labels = np.array([1, 3, 0])
    t = dm.Tape()
    lt = t.leaf(logits)
    g = dm.backward(t, nn.cross_entropy(lt, labels))[lt.node_id].value
    sm = np.exp(logits - logits.max(-1, keepdims=True))
    sm /= sm.sum(-1, keepdims=True)
    onehot = np.eye(4)[labels]
    np.testing.assert_allclose(g, (sm - onehot) / 3.0, atol=1e-12)

    def f(x):
        return nn.cross_entropy(x, labels)

    assert dm.grad_check(f, logits) < 1e-4


def test_cross_entropy_label_out_of_range():
    t = dm.Tape()
    with pytest.raises(ValueError, match="label out of range"):
        nn.cross_entropy(t.leaf(np.zeros((2, 3))), np.array([0, 3]))


# ---------------------------------------------------------------- adam

def test_adam_first_step_closed_form():
    params = {"w": np.array([1.0, -2.0])}
    g = np.array([0.3, -0.7])
    st = nn.AdamState(params)
    nn.adam_step(st, params, {"w": g.copy()})
    expected = np.array([1.0, -2.0]) - 0.001 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(params["w"], expected, atol=1e-15)
    assert st.step_count == 1


def test_adam_zero_gradient_keeps_parameters():
    params = {"w": np.array([0.5, 0.5])}
    st = nn.AdamState(params)
    nn.adam_step(st, params, {"w": np.zeros(2)})
    np.testing.assert_array_equal(params["w"], [0.5, 0.5])


def test_adam_nonfinite_gradient_raises():
    params = {"w": np.array([0.5])}
    st = nn.AdamState(params)
    with pytest.raises(dm.NonFiniteError):
        nn.adam_step(st, params, {"w": np.array([np.nan])})


def test_adam_deterministic_over_100_steps():
    def run():
        rng = np.random.default_rng(42)
        params = {"w": rng.normal(size=(4, 3)), "b": rng.normal(size=3)}
        st = nn.AdamState(params)
        grng = np.random.default_rng(43)
        for _ in range(100):
            grads = {k: grng.normal(size=v.shape) for k, v in params.items()}
            nn.adam_step(st, params, grads)
        return params["w"].tobytes() + params["b"].tobytes()

    assert run() == run()


# ---------------------------------------------------------------- init

def test_init_respects_fan_in_bounds():
    p = nn.LstmClassifierParams.init(np.random.default_rng(1), 10, 2, 2)
    bound = 1.0 / np.sqrt(2 * 10 + 1)
    assert np.abs(p.layers[0]["wx"]).max() <= bound
    assert np.abs(p.layers[0]["wh"]).max() <= 1.0 / 4.0  # 1/sqrt(16)
    a = nn.MlpAcquirerParams.init(np.random.default_rng(1), 10, 4)
    np.testing.assert_array_equal(a.init_logits, 0.0)


def test_init_seed_determinism():
    a = nn.MlpAcquirerParams.init(np.random.default_rng(5), 6, 4)
    b = nn.MlpAcquirerParams.init(np.random.default_rng(5), 6, 4)
    c = nn.MlpAcquirerParams.init(np.random.default_rng(6), 6, 4)
    np.testing.assert_array_equal(a.layer1.weight, b.layer1.weight)
    assert not np.array_equal(a.layer1.weight, c.layer1.weight)


def test_default_forda_classifier_parameter_count():
    # regression: 2-layer LSTM (16 units) on F=40, C=2 with projection 8
    p = nn.LstmClassifierParams.init(np.random.default_rng(0), 40, 2, 2)
    total = sum(v.size for v in p.parameters().values())
    assert total == 8538


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(77)
    params = {"a.w": rng.normal(size=(3, 2)) / 3.0, "a.b": rng.normal(size=2),
              "scalarish": np.array([1e-300, -0.0, 17.5])}
    path = tmp_path / "ck.txt"
    nn.save_checkpoint(path, params, meta={"seed": "7", "kind": "learned"})
    loaded, meta = nn.load_checkpoint(path)
    assert meta == {"seed": "7", "kind": "learned"}
    assert set(loaded) == set(params)
    for k in params:
        assert loaded[k].tobytes() == params[k].tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.txt"
    path.write_text("not a checkpoint\n")
    with pytest.raises(ValueError, match="checkpoint"):
        nn.load_checkpoint(path)


def test_merge_split_prefixed_roundtrip():
    a = {"w": np.ones(2)}
    b = {"w": np.zeros(3), "x.y": np.ones(1)}
    merged = nn.merge_prefixed(acq=a, clf=b)
    assert set(merged) == {"acq.w", "clf.w", "clf.x.y"}
    back = nn.split_prefixed(merged)
    np.testing.assert_array_equal(back["acq"]["w"], a["w"])
    np.testing.assert_array_equal(back["clf"]["x.y"], b["x.y"])
