import numpy as np
import pytest

from cltr_lab.clicksim import SimulatorConfig, simulate_log
from cltr_lab.core import ClickLog, DCMParams, PBMParams, Session, ValidationError
from cltr_lab.ltr import TrainConfig, session_weights, stack_log, train
from cltr_lab.propensity import ClippingPolicy
from cltr_lab.ranker import Ranker, RankerError, full_info_loss, ips_listwise_loss, weighted_softmax_ce

from conftest import make_list


def central_diff(f, s, h=1e-5):
    out = np.zeros_like(s)
    for j in range(s.size):
        e = np.zeros_like(s)
        e[j] = h
        out[j] = (f(s + e) - f(s - e)) / (2 * h)
    return out


def test_ips_loss_gradient_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        s = rng.normal(0, 2, 10)
        c = rng.integers(0, 2, 10)
        w = c * rng.uniform(1, 100, 10)
        _, g = ips_listwise_loss(s, c, w)
        worst = max(worst, np.max(np.abs(g - central_diff(lambda v: ips_listwise_loss(v, c, w)[0], s))))
    assert worst < 1e-6


def test_full_info_gradient_finite_differences():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        s = rng.normal(0, 2, 10)
        r = rng.integers(0, 2, 10)
        r[rng.integers(10)] = 1
        _, g = full_info_loss(s, r)
        worst = max(worst, np.max(np.abs(g - central_diff(lambda v: full_info_loss(v, r)[0], s))))
    assert worst < 1e-6


def test_ips_loss_examples():
    s = np.array([0.3, -1.0, 2.0])
    loss, grad = ips_listwise_loss(s, [0, 0, 0], [0.0, 0.0, 0.0])
    assert loss == 0.0 and not grad.any()
    uniform, _ = ips_listwise_loss(s, [1, 1, 1], [1.0, 1.0, 1.0])
    logp = s - np.log(np.exp(s).sum())
    assert uniform == pytest.approx(-logp.sum())
    one, g1 = ips_listwise_loss(s, [0, 1, 0], [0.0, 1.0, 0.0])
    two, g2 = ips_listwise_loss(s, [0, 1, 0], [0.0, 2.0, 0.0])
    assert two == pytest.approx(2 * one) and np.allclose(g2, 2 * g1)
    with pytest.raises(ValueError):
        ips_listwise_loss(s, [0, 1, 0], [1.0, 1.0, 0.0])
    with pytest.raises(FloatingPointError):
        ips_listwise_loss(np.array([np.nan, 0.0, 0.0]), [0, 1, 0], [0.0, 1.0, 0.0])


def test_full_info_examples():
    loss, _ = full_info_loss(np.array([20.0, 0.0, 0.0]), [1, 0, 0])
    assert loss < 1e-8
    s = np.array([1.0, 1.0, -0.5])
    _, g = full_info_loss(s, [1, 1, 0])
    assert g[0] == pytest.approx(g[1])
    r = np.array([1, 0, 1, 1])
    s = np.array([0.2, 0.5, -0.1, 1.0])
    a, ga = full_info_loss(s, r)
    b, gb = ips_listwise_loss(s, r, r / r.sum())
    assert a == pytest.approx(b) and np.allclose(ga, gb)
    with pytest.raises(ValueError):
        full_info_loss(s, [0, 0, 0, 0])


def test_loss_permutation_equivariance_and_non_negativity():
    rng = np.random.default_rng(2)
    for _ in range(50):
        s = rng.normal(0, 3, 8)
        c = rng.integers(0, 2, 8)
        w = c * rng.uniform(1, 10, 8)
        perm = rng.permutation(8)
        loss, g = ips_listwise_loss(s, c, w)
        loss_p, g_p = ips_listwise_loss(s[perm], c[perm], w[perm])
        assert loss >= 0 and loss_p == pytest.approx(loss)
        assert np.allclose(g[perm], g_p)


def test_masked_batch_matches_single_lists():
    rng = np.random.default_rng(3)
    s = rng.normal(size=(2, 5))
    w = rng.uniform(size=(2, 5))
    mask = np.array([[True] * 5, [True, True, True, False, False]])
    w[1, 3:] = 0
    loss, grad = weighted_softmax_ce(s, w, mask)
    l1, g1 = weighted_softmax_ce(s[1, :3], w[1, :3])
    assert loss[1] == pytest.approx(l1) and np.allclose(grad[1, :3], g1) and not grad[1, 3:].any()


@pytest.mark.parametrize("ranker", [Ranker.linear(4, weights=[0.5, -1.0, 0.2, 0.0]),
                                    Ranker.mlp(4, (6, 5), dropout=0.0, seed=1)])
def test_ranker_backward_finite_differences(ranker):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 7, 4))
    g = rng.normal(size=(3, 7))
    _, cache = ranker.forward(x)
    grads = ranker.backward(cache, g)
    for w, gw in zip(ranker.weights, grads):
        num = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + 1e-6
            up = float(np.sum(g * ranker.score(x)))
            w[idx] = old - 1e-6
            down = float(np.sum(g * ranker.score(x)))
            w[idx] = old
            num[idx] = (up - down) / 2e-6
        assert np.max(np.abs(num - gw)) < 1e-6


def test_score_list_examples(tmp_path):
    ql = make_list("q", [1, 0, 1], dim=3)
    assert not Ranker.linear(3).score_list(ql).any()
    r = Ranker.linear(3, weights=[0.1, 0.2, -0.3])
    doubled = Ranker.linear(3, weights=[0.2, 0.4, -0.6])
    assert np.allclose(doubled.score_list(ql), 2 * r.score_list(ql))
    mlp = Ranker.mlp(3, (4,), dropout=0.5, seed=0)
    assert np.array_equal(mlp.score_list(ql), mlp.score_list(ql))
    with pytest.raises(RankerError):
        Ranker.linear(2).score_list(ql)
    mlp.save(tmp_path / "m.json")
    assert np.array_equal(Ranker.load(tmp_path / "m.json").score_list(ql), mlp.score_list(ql))


def test_dropout_only_in_training():
    mlp = Ranker.mlp(3, (8, 8), dropout=0.5, seed=0)
    x = np.random.default_rng(0).normal(size=(5, 3))
    a, _ = mlp.forward(x, np.random.default_rng(1))
    b, _ = mlp.forward(x, np.random.default_rng(2))
    assert not np.array_equal(a, b)
    assert np.array_equal(mlp.score(x), mlp.score(x))


@pytest.fixture(scope="module")
def dcm_log(small_dataset):
    return simulate_log(small_dataset.train, SimulatorConfig(DCMParams(beta=0.6, eta=1.0), seed=1, target_clicks=20_000))


def test_full_info_loss_decreases(small_dataset):
    res = train(small_dataset.train, None, None, TrainConfig(mode="full_info", steps=300, lr=0.05, batch_size=32))
    avg = np.convolve(res.losses, np.ones(20) / 20, mode="valid")
    assert avg[80] < avg[0] and avg[-1] < avg[80]


def test_unit_propensity_matches_no_ips(small_dataset, dcm_log):
    cfg = dict(steps=200, eval_every=50, seed=3)
    ones = PBMParams(theta=np.ones(10))
    a = train(small_dataset.train, dcm_log, ones, TrainConfig(mode="ips", **cfg), small_dataset.test)
    b = train(small_dataset.train, dcm_log, None, TrainConfig(mode="no_ips", **cfg), small_dataset.test)
    assert a.curve == b.curve
    assert np.array_equal(a.ranker.weights[0], b.ranker.weights[0])


def test_training_is_deterministic(small_dataset, dcm_log):
    cfg = TrainConfig(mode="ips", steps=150, eval_every=50, seed=5, architecture="mlp", hidden=(8, 4))
    prop = DCMParams(beta=0.6, eta=1.0)
    a = train(small_dataset.train, dcm_log, prop, cfg, small_dataset.test)
    b = train(small_dataset.train, dcm_log, prop, cfg, small_dataset.test)
    assert all(np.array_equal(x, y) for x, y in zip(a.ranker.weights, b.ranker.weights))
    assert a.curve_csv() == b.curve_csv()
    assert a.curve_csv().startswith("clicks_consumed,ndcg_at_10\n")
    assert len(a.curve) == 3


def test_session_weights_follow_cascade_propensities(small_dataset, dcm_log):
    slog = stack_log(dcm_log, small_dataset.train, 10)
    w = session_weights(slog, small_dataset.train, DCMParams(beta=0.6, eta=1.0), ClippingPolicy())
    first = slog.clicks.argmax(axis=1)
    rows = np.arange(len(first))
    assert np.all(w[rows, first] == 1.0)
    assert np.all(w[slog.clicks == 0] == 0.0)
    assert w.max() <= 100.0


def test_train_errors(small_dataset):
    with pytest.raises(ValidationError):
        train(small_dataset.train, None, None, TrainConfig(mode="ips", steps=5))
    with pytest.raises(ValidationError):
        TrainConfig(mode="bogus")
    with pytest.raises(ValidationError):
        TrainConfig(lr=0)
    bad = ClickLog([Session("unknown", [1] + [0] * 9)])
    with pytest.raises(ValidationError):
        train(small_dataset.train, bad, None, TrainConfig(mode="no_ips", steps=5))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(small_dataset, dcm_log):
    cfg = TrainConfig(mode="ips", steps=200, lr=1e305, grad_clip=None)
    with pytest.raises(FloatingPointError):
        train(small_dataset.train, dcm_log, DCMParams(beta=0.6, eta=1.0), cfg)
