import numpy as np
import pytest

from dfalab import dfa, diffmath as dm, nn
from dfalab.selection import GumbelConfig


def make_classifier(n_features, n_classes=2, n_layers=2, seed=0):
    return nn.LstmClassifierParams.init(np.random.default_rng(seed),
                                        n_features, n_classes, n_layers)


def make_learned(n_features, hidden=4, seed=1, scale=None):
    params = nn.MlpAcquirerParams.init(np.random.default_rng(seed),
                                       n_features, hidden)
    if scale is not None:
        for arr in params.parameters().values():
            arr *= scale
    return dfa.LearnedAcquirer(params, GumbelConfig())


# ---------------------------------------------------------------- cost

def test_complete_vs_budget_cost_ratio():
    rng = np.random.default_rng(2)
    series = rng.normal(size=(3, 50, 40))
    clf = make_classifier(40)
    complete = dfa.batch_episodes(series, None, None, dfa.CompleteAcquirer(),
                                  clf, 40, np.random.default_rng(3))
    assert all(ep.cost == 2000 for ep in complete.episodes)
    random_run = dfa.batch_episodes(series, None, None, dfa.RandomAcquirer(),
                                    clf, 5, np.random.default_rng(4))
    assert all(ep.cost == 250 for ep in random_run.episodes)
    assert complete.episodes[0].cost == 8 * random_run.episodes[0].cost


def test_cost_matches_recorded_masks_for_every_acquirer():
    rng = np.random.default_rng(5)
    series = rng.normal(size=(4, 7, 6))
    lengths = np.array([7, 3, 5, 1])
    clf = make_classifier(6)
    static = dfa.StaticAcquirer(np.array([1, 0, 1, 0, 0, 0], dtype=float))
    acquirers = [dfa.CompleteAcquirer(), dfa.RandomAcquirer(),
                 make_learned(6), static]
    budgets = [6, 2, 2, 2]
    for acq, b in zip(acquirers, budgets):
        res = dfa.batch_episodes(series, lengths, None, acq, clf, b,
                                 np.random.default_rng(6), record_trace=True)
        for ep, n in zip(res.episodes, lengths):
            assert ep.cost == int(ep.masks.sum())
            assert ep.masks.shape == (n, 6)
            assert ep.cost <= b * n


def test_zero_budget_learned_still_predicts():
    rng = np.random.default_rng(7)
    series = rng.normal(size=(2, 5, 4))
    clf = make_classifier(4)
    res = dfa.batch_episodes(series, None, np.array([0, 1]), make_learned(4),
                             clf, 0, np.random.default_rng(8), record_trace=True)
    assert all(ep.cost == 0 for ep in res.episodes)
    np.testing.assert_array_equal(res.episodes[0].measured, 0.0)
    assert res.class_logits.shape == (2, 2)
    assert np.isfinite(res.loss.value)


def test_mixed_lengths_cost_and_padding():
    rng = np.random.default_rng(9)
    series = rng.normal(size=(2, 93, 5))
    lengths = np.array([4, 93])
    clf = make_classifier(5)
    res = dfa.batch_episodes(series, lengths, None, dfa.RandomAcquirer(),
                             clf, 3, np.random.default_rng(10))
    assert res.episodes[0].cost == 4 * 3
    assert res.episodes[1].cost == 93 * 3
    assert res.masks[0, 4:].sum() == 0  # padded steps carry no mask


def test_degenerate_inputs_rejected():
    clf = make_classifier(4)
    with pytest.raises(ValueError, match="at least one time step"):
        dfa.batch_episodes(np.empty((1, 0, 4)), None, None,
                           dfa.CompleteAcquirer(), clf, 4,
                           np.random.default_rng(0))
    with pytest.raises(ValueError, match="NaN"):
        dfa.batch_episodes(np.full((1, 3, 4), np.nan), None, None,
                           dfa.CompleteAcquirer(), clf, 4,
                           np.random.default_rng(0))
    with pytest.raises(ValueError, match="at least one valid step"):
        dfa.batch_episodes(np.zeros((2, 3, 4)), np.array([3, 0]), None,
                           dfa.CompleteAcquirer(), clf, 4,
                           np.random.default_rng(0))
    with pytest.raises(ValueError, match="exceeds tensor extent"):
        dfa.batch_episodes(np.zeros((1, 3, 4)), np.array([5]), None,
                           dfa.CompleteAcquirer(), clf, 4,
                           np.random.default_rng(0))
    with pytest.raises(ValueError, match="popcount"):
        dfa.batch_episodes(np.zeros((1, 3, 4)), None, None,
                           dfa.StaticAcquirer(np.array([1.0, 1, 0, 0])), clf, 3,
                           np.random.default_rng(0))


# ---------------------------------------------------------------- random policy

def test_random_masks_exact_popcount_and_uniform_frequency():
    rng = np.random.default_rng(11)
    series = rng.normal(size=(200, 50, 40))
    clf = make_classifier(40)
    res = dfa.batch_episodes(series, None, None, dfa.RandomAcquirer(), clf, 5,
                             np.random.default_rng(12))
    per_step = res.masks.sum(axis=-1)
    assert (per_step == 5).all()
    freq = res.masks.mean(axis=(0, 1))  # 10^4 steps in total
    assert np.abs(freq - 5 / 40).max() < 0.01


# ---------------------------------------------------------------- equivalences

def test_batch_equals_loop_of_single_episodes():
    rng = np.random.default_rng(13)
    series = np.tile(rng.normal(size=(1, 6, 5)), (3, 1, 1))
    clf = make_classifier(5)
    for acq in (make_learned(5), dfa.RandomAcquirer()):
        batch = dfa.batch_episodes(series, None, None, acq, clf, 2,
                                   np.random.default_rng(77), record_trace=True)
        singles = []
        children = np.random.default_rng(77).spawn(3)
        for i in range(3):
            singles.append(dfa.run_episode(series[i], None, acq, clf, 2,
                                           children[i]))
        for ep_b, ep_s in zip(batch.episodes, singles):
            np.testing.assert_array_equal(ep_b.masks, ep_s.masks)
            np.testing.assert_allclose(ep_b.class_logits, ep_s.class_logits,
                                       atol=1e-12)
            assert ep_b.cost == ep_s.cost


def test_classifier_output_invariant_to_unmeasured_values():
    rng = np.random.default_rng(14)
    series = rng.normal(size=(2, 8, 6))
    clf = make_classifier(6)
    acq = make_learned(6)
    first = dfa.batch_episodes(series, None, None, acq, clf, 2,
                               np.random.default_rng(15), record_trace=True)
    fuzzed = series.copy()
    unmeasured = first.masks == 0
    fuzzed[unmeasured] = 1e6 * rng.normal(size=unmeasured.sum())
    second = dfa.batch_episodes(fuzzed, None, None, acq, clf, 2,
                                np.random.default_rng(15), record_trace=True)
    np.testing.assert_array_equal(first.masks, second.masks)
    np.testing.assert_array_equal(first.class_logits, second.class_logits)


def test_next_step_causality_by_truncation():
    rng = np.random.default_rng(16)
    series = rng.normal(size=(2, 10, 5))
    clf = make_classifier(5)
    acq = make_learned(5)
    k = 4
    full = dfa.batch_episodes(series, None, None, acq, clf, 2,
                              np.random.default_rng(17))
    zeroed = series.copy()
    zeroed[:, k + 1:, :] = 0.0
    cut = dfa.batch_episodes(zeroed, None, None, acq, clf, 2,
                             np.random.default_rng(17))
    # masks up to and including m_{k+1} depend only on data at steps <= k
    np.testing.assert_array_equal(full.masks[:, :k + 2], cut.masks[:, :k + 2])


def test_static_acquirer_repeats_one_mask():
    mask = np.array([0, 1, 0, 1, 0], dtype=float)
    series = np.random.default_rng(18).normal(size=(2, 6, 5))
    clf = make_classifier(5)
    res = dfa.batch_episodes(series, None, None, dfa.StaticAcquirer(mask),
                             clf, 2, np.random.default_rng(19))
    assert (res.masks == mask.astype(np.int8)).all()


# ---------------------------------------------------------------- learned step

def test_zero_initialized_acquirer_selects_uniformly():
    params = nn.MlpAcquirerParams.init(np.random.default_rng(0), 40, 4)
    for arr in params.parameters().values():
        arr[...] = 0.0
    counts = np.zeros(40)
    n_per, reps = 10000, 4
    for rep in range(reps):
        mask = dfa.acquirer_step_learned(params, np.zeros((n_per, 40)),
                                         np.zeros((n_per, 40)), 3, 50, 5,
                                         GumbelConfig(),
                                         np.random.default_rng(20 + rep))
        counts += mask.hard.value.sum(axis=0)
    freq = counts / (n_per * reps)
    # zero logits mean zero penalty, so the 5 draws are independent uniforms:
    # per-feature hit rate is 1 - (1 - 1/F)^b, just below b/F
    exact = 1.0 - (39 / 40) ** 5
    assert np.abs(freq - exact).max() < 0.01
    assert np.abs(freq - 5 / 40).max() < 0.015


def test_full_budget_learned_is_complete_for_generic_logits():
    params = nn.MlpAcquirerParams.init(np.random.default_rng(1), 4, 3)
    params.layer2.bias[...] = [1.0, -2.0, 1.5, -1.2]  # keep |logits| off zero
    for seed in range(20):
        mask = dfa.acquirer_step_learned(params, np.zeros((2, 4)),
                                         np.zeros((2, 4)), 0, 5, 4,
                                         GumbelConfig(),
                                         np.random.default_rng(seed))
        np.testing.assert_array_equal(mask.hard.value, 1.0)


def test_acquirer_step_deterministic_given_seed():
    params = nn.MlpAcquirerParams.init(np.random.default_rng(2), 6, 4)
    obs = np.random.default_rng(3).normal(size=(3, 6))
    a = dfa.acquirer_step_learned(params, obs, np.ones((3, 6)), 1, 9, 2,
                                  GumbelConfig(), np.random.default_rng(4))
    b = dfa.acquirer_step_learned(params, obs, np.ones((3, 6)), 1, 9, 2,
                                  GumbelConfig(), np.random.default_rng(4))
    np.testing.assert_array_equal(a.hard.value, b.hard.value)


# ---------------------------------------------------------------- end-to-end grad

def episode_loss(arrays, template_acq, template_clf, series, labels, seeds,
                 soft_masks):
    acq_params = nn.MlpAcquirerParams.init(np.random.default_rng(0), 6, 3)
    acq_params.load_arrays(nn.split_prefixed(arrays)["acquirer"])
    clf = nn.LstmClassifierParams.init(np.random.default_rng(0), 6, 2, 2)
    clf.load_arrays(nn.split_prefixed(arrays)["classifier"])
    rngs = [np.random.default_rng(s) for s in seeds]
    res = dfa.batch_episodes(series, None, labels,
                             dfa.LearnedAcquirer(acq_params, GumbelConfig()),
                             clf, 2, rngs, soft_masks=soft_masks)
    return res


def test_episode_gradient_matches_finite_differences_toy():
    # T=5, F=6, b=2, frozen noise; soft-mask episode graph is smooth
    rng = np.random.default_rng(21)
    series = rng.normal(size=(2, 5, 6))
    labels = np.array([0, 1])
    seeds = [101, 202]
    acq = nn.MlpAcquirerParams.init(np.random.default_rng(5), 6, 3)
    clf = nn.LstmClassifierParams.init(np.random.default_rng(6), 6, 2, 2)
    arrays = nn.merge_prefixed(acquirer=acq.parameters(),
                               classifier=clf.parameters())

    res = episode_loss(arrays, acq, clf, series, labels, seeds, soft_masks=True)
    grads = dm.backward(res.tape, res.loss)
    flat_names = sorted(arrays)

    def loss_value(modified):
        return float(episode_loss(modified, acq, clf, series, labels, seeds,
                                  soft_masks=True).loss.value)

    h = 1e-5
    checked = 0
    acq_grad_mag = 0.0
    rng_pick = np.random.default_rng(30)
    for name in flat_names:
        g = grads[res.bound[name].node_id].value
        if name.startswith("acquirer."):
            acq_grad_mag += float(np.abs(g).sum())
        size = arrays[name].size
        idxs = range(size) if name.startswith("acquirer.") and size <= 30 \
            else rng_pick.choice(size, size=min(3, size), replace=False)
        for idx in idxs:
            base = {k: v.copy() for k, v in arrays.items()}
            base[name].flat[idx] += h
            up = loss_value(base)
            base[name].flat[idx] -= 2 * h
            down = loss_value(base)
            fd = (up - down) / (2 * h)
            rel = abs(g.flat[idx] - fd) / max(1.0, abs(fd))
            assert rel < 1e-3, f"{name}[{idx}]: analytic {g.flat[idx]}, fd {fd}"
            checked += 1
    assert checked > 40
    assert acq_grad_mag > 0.0  # the loss really reaches the acquirer


def test_hard_episode_gradient_reaches_acquirer():
    rng = np.random.default_rng(22)
    series = rng.normal(size=(2, 5, 6))
    labels = np.array([0, 1])
    acq = nn.MlpAcquirerParams.init(np.random.default_rng(5), 6, 3)
    clf = nn.LstmClassifierParams.init(np.random.default_rng(6), 6, 2, 2)
    res = dfa.batch_episodes(series, None, labels,
                             dfa.LearnedAcquirer(acq, GumbelConfig()),
                             clf, 2, np.random.default_rng(23))
    grads = dm.backward(res.tape, res.loss)
    total = sum(float(np.abs(grads[t.node_id].value).sum())
                for name, t in res.bound.items() if name.startswith("acquirer."))
    assert np.isfinite(total) and total > 0.0


# ---------------------------------------------------------------- exports

def test_trace_csv_and_pgm_export(tmp_path):
    masks = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.int8)
    csv_path = tmp_path / "trace.csv"
    dfa.export_trace_csv(csv_path, masks)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "step,feature,mask"
    assert lines[1] == "0,0,1"
    assert len(lines) == 1 + masks.size

    freq = dfa.mask_frequency(np.stack([masks, masks]).astype(float))
    pgm_path = tmp_path / "heat.pgm"
    dfa.export_heatmap_pgm(pgm_path, freq)
    text = pgm_path.read_text()
    assert text.startswith("P2\n2 3\n255\n")
    assert text.splitlines()[3] == "255 0"


def test_complete_heatmap_is_all_ones(tmp_path):
    series = np.random.default_rng(1).normal(size=(3, 4, 5))
    clf = make_classifier(5)
    res = dfa.batch_episodes(series, None, None, dfa.CompleteAcquirer(), clf, 5,
                             np.random.default_rng(2), record_trace=True)
    freq = dfa.mask_frequency(res.masks.astype(float))
    np.testing.assert_array_equal(freq, 1.0)
