import csv

import numpy as np
import pytest

from aquinv.nn.data import Normalizer, SimulationSet, one_shot_pairs, reorganize_autoregressive
from aquinv.nn.loss import data_loss, loss_weighted_l1, neighborhood_mask, weight_penalty
from aquinv.nn.network import EncoderDecoder
from aquinv.nn.optim import Adam, PlateauScheduler
from aquinv.nn.train import (
    Surrogate,
    TrainConfig,
    TrainingError,
    network_spec_for,
    predict_sequence,
    train,
)


# ---- loss -----------------------------------------------------------------

def test_loss_hand_toy():
    pred = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    target = np.array([[[[1.0, 0.0], [5.0, 4.0]]]])
    mask = np.array([[[[False, True], [False, False]]]])
    params = {"a": np.array([1.0, 2.0])}
    # |e| = 0, 2, 2, 0; the masked pixel counts 1 + 5 times
    assert loss_weighted_l1(pred, target, mask, 5.0, 0.1, params) == pytest.approx(14.0 + 0.25, abs=1e-12)
    value, grad = data_loss(pred, target, mask, 5.0)
    np.testing.assert_array_equal(grad, [[[[0.0, 6.0], [-1.0, 0.0]]]])
    # averaging over identical samples leaves the value unchanged
    two = data_loss(np.repeat(pred, 2, 0), np.repeat(target, 2, 0), np.repeat(mask, 2, 0), 5.0)[0]
    assert two == pytest.approx(value)


def test_loss_without_weight_is_plain_l1(rng):
    pred, target = rng.standard_normal((2, 3, 2, 4, 5))
    mask = rng.random(pred.shape) < 0.3
    plain = np.abs(pred - target).sum() / 3
    assert data_loss(pred, target, mask, 0.0)[0] == pytest.approx(plain, rel=1e-14)
    assert data_loss(pred, target)[0] == pytest.approx(plain, rel=1e-14)


def test_loss_at_target_is_weight_penalty(rng):
    y = rng.standard_normal((2, 2, 3, 3))
    params = {"w": rng.standard_normal(7)}
    value, grad = data_loss(y, y.copy())
    assert value == 0 and not grad.any()
    assert loss_weighted_l1(y, y, None, 5.0, 5e-5, params) == pytest.approx(2.5e-5 * params["w"] @ params["w"])


def test_loss_gradient_matches_differences(rng):
    pred = rng.standard_normal((2, 2, 4, 4))
    target = rng.standard_normal(pred.shape)
    mask = neighborhood_mask(pred.shape, [[1, 1], [3, 0]], [[False, True], [True, True]])
    _, grad = data_loss(pred, target, mask, 5.0)
    for _ in range(10):
        idx = tuple(rng.integers(s) for s in pred.shape)
        p = pred.copy()
        p[idx] += 1e-6
        a = data_loss(p, target, mask, 5.0)[0]
        p[idx] -= 2e-6
        b = data_loss(p, target, mask, 5.0)[0]
        assert (a - b) / 2e-6 == pytest.approx(grad[idx], rel=1e-5)


def test_loss_gradient_scales(rng):
    pred, target = rng.standard_normal((2, 2, 1, 3, 3))
    g1 = data_loss(pred, target)[1]
    # the loss is positively homogeneous in (pred - target): L(a e) = a L(e), grad unchanged
    g2 = data_loss(3 * pred, 3 * target)[1]
    np.testing.assert_array_equal(g1, g2)


def test_weight_penalty():
    assert weight_penalty({"a": np.array([3.0, 4.0])}, 0.2) == pytest.approx(2.5)


def test_neighborhood_mask_clipped():
    m = neighborhood_mask((2, 2, 4, 5), [[0, 0], [2, 2]], [[True, False], [False, True]])
    assert m[0, 0].sum() == 4 and m[0, 0, :2, :2].all()
    assert not m[0, 1].any() and not m[1, 0].any()
    assert m[1, 1].sum() == 9 and m[1, 1, 1:4, 1:4].all()


# ---- optimizer ------------------------------------------------------------

def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    Adam(p, lr=0.1).step({"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_constant_gradient_unit_step():
    p = {"w": np.zeros(3)}
    opt = Adam(p, lr=0.01)
    g = {"w": np.array([0.5, -3.0, 1e-3])}
    prev = p["w"].copy()
    for _ in range(500):
        opt.step(g)
        step = p["w"] - prev
        prev = p["w"].copy()
    np.testing.assert_allclose(np.abs(step), 0.01, rtol=1e-4)
    assert np.all(np.sign(step) == -np.sign(g["w"]))


def test_adam_weight_decay_enters_gradient():
    p = {"w": np.array([2.0])}
    Adam(p, lr=0.1, weight_decay=1.0).step({"w": np.array([0.0])})
    assert p["w"][0] == pytest.approx(1.9)


def test_plateau_scheduler():
    opt = Adam({"w": np.zeros(1)}, lr=1.0)
    sched = PlateauScheduler(opt, factor=10, patience=3, threshold=1e-3)
    drops = [sched.step(x) for x in [10.0, 9.0, 8.995, 8.995, 8.995, 8.995, 8.0]]
    # 8.995 is within 0.1% of 9.0; the fourth non-improving epoch triggers the drop
    assert drops == [False, False, False, False, False, True, False]
    assert opt.lr == pytest.approx(0.1)
    with pytest.raises(ValueError):
        PlateauScheduler(opt, factor=1.0)


# ---- data layout ----------------------------------------------------------

def fake_set(N, n_t=7, r=5, H=3, W=4, seed=0):
    rng = np.random.default_rng(seed)
    return SimulationSet(rng.standard_normal((N, H, W)), rng.random((N, n_t, H, W)), rng.random((N, H, W)),
                         rng.random((N, n_t, H, W)), rng.integers(0, 3, (N, 2)), r)


def test_autoregressive_pair_count():
    pairs = reorganize_autoregressive(fake_set(400))
    assert len(pairs) == 2800
    assert pairs.x.shape[1:] == (3, 3, 4) and pairs.y.shape[1:] == (2, 3, 4)


def test_autoregressive_chaining():
    data = fake_set(5)
    pairs = reorganize_autoregressive(data)
    for i in range(5):
        first = i * 7
        assert not pairs.x[first, 2].any()
        for j in range(1, 7):
            np.testing.assert_array_equal(pairs.x[first + j, 2], pairs.y[first + j - 1, 1])
            np.testing.assert_array_equal(pairs.y[first + j, 0], data.head[i])
            np.testing.assert_array_equal(pairs.x[first + j, 1], data.images[i, j])
    assert pairs.active[:, 1].sum() == 5 * 5 and not pairs.active[:, 0].any()


def test_normalized_chaining():
    data = fake_set(2)
    norm = Normalizer(2.0, 0.5, 8.0, 4.0)
    pairs = reorganize_autoregressive(data, norm)
    np.testing.assert_allclose(pairs.x[1, 2], data.conc[0, 0] / 4.0)
    np.testing.assert_allclose(pairs.x[0, 0], (data.log_k[0] - 2) / 0.5)
    np.testing.assert_allclose(pairs.y[3, 1], data.conc[0, 3] / 4.0)


def test_one_shot_channels():
    pairs = one_shot_pairs(fake_set(4))
    assert pairs.x.shape[1] == 6 and pairs.y.shape[1] == 8
    assert pairs.active[0].tolist() == [False] + [True] * 5 + [False] * 2


def test_normalizer_fit_and_dict():
    data = fake_set(3)
    assert Normalizer.fit(data, 2.0, 0.7).conc_scale == 1.0
    norm = Normalizer.fit(data, 2.0, 0.7, conc="max")
    assert norm.conc_scale == pytest.approx(data.conc.max())
    assert Normalizer.from_dict(norm.to_dict()) == norm
    with pytest.raises(ValueError):
        Normalizer(0, 0, 1, 1)


def test_simulation_set_validation():
    with pytest.raises(ValueError):
        fake_set(2, r=8)


# ---- training and rollout -------------------------------------------------

def test_rollout_single_step_is_one_pass(toy_spec, rng):
    net = EncoderDecoder(network_spec_for(toy_spec, "ar-net", 1, 1), seed=3)
    norm = Normalizer(2.0, 0.7)
    log_k = rng.standard_normal((2, 13, 25))
    images = rng.random((2, 1, 13, 25))
    head, conc = predict_sequence(net, norm, log_k, images)
    x = np.stack([norm.k(log_k), norm.s(images[:, 0]), np.zeros((2, 13, 25))], axis=1).astype(np.float32)
    y = net.forward(x, training=False)
    np.testing.assert_array_equal(head, y[:, 0])
    np.testing.assert_array_equal(conc[:, 0], y[:, 1])
    again = predict_sequence(net, norm, log_k, images)
    assert again[1].tobytes() == conc.tobytes()


@pytest.mark.parametrize("mode", ["net", "ar-net", "ar-net-wl"])
def test_training_runs_and_checkpoints(toy_runs, toy_spec, tmp_path, mode):
    cfg = TrainConfig(batch_size=8, epochs=4, lr=0.005, seed=1, patience=0)
    norm = Normalizer.fit(toy_runs, 2.0, np.sqrt(0.5))
    res = train(toy_runs, toy_spec, cfg, mode, norm, out_dir=tmp_path)
    assert [h[0] for h in res.history] == [1, 2, 3, 4]
    assert (tmp_path / "checkpoint" / "params.aqtn").exists()
    with open(tmp_path / "loss_history.csv") as fh:
        assert len(list(csv.reader(fh))) == 5
    sur = Surrogate.load(tmp_path / "checkpoint")
    a = res.surrogate.predict_set(toy_runs)
    b = sur.predict_set(toy_runs)
    np.testing.assert_array_equal(a[1], b[1])
    assert a[1].shape == toy_runs.conc.shape and a[1].min() >= 0
    assert sur.meta["train_config"]["seed"] == 1


def test_scheduler_drops_write_checkpoints(toy_runs, toy_spec, tmp_path):
    # a huge threshold counts every epoch as a plateau
    cfg = TrainConfig(batch_size=8, epochs=3, patience=0, threshold=0.99)
    train(toy_runs, toy_spec, cfg, "net", Normalizer(2.0, 0.7), out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("drop_*")) == ["drop_0002", "drop_0003"]


def test_training_is_deterministic(toy_runs, toy_spec):
    cfg = TrainConfig(batch_size=4, epochs=2, seed=5)
    norm = Normalizer(2.0, 0.7)
    a = train(toy_runs.subset(range(4)), toy_spec, cfg, "ar-net-wl", norm)
    b = train(toy_runs.subset(range(4)), toy_spec, cfg, "ar-net-wl", norm)
    assert a.history == b.history
    for k, v in a.surrogate.net.state().items():
        assert v.tobytes() == b.surrogate.net.state()[k].tobytes()


def test_loss_decreases(toy_runs, toy_spec):
    cfg = TrainConfig(batch_size=8, epochs=30, lr=0.005, patience=100)
    hist = train(toy_runs, toy_spec, cfg, "ar-net", Normalizer(2.0, np.sqrt(0.5))).history
    losses = np.array([h[1] for h in hist])
    assert losses[-5:].mean() < 0.5 * losses[:5].mean()
    # trend over the logged history is downward
    assert np.polyfit(np.arange(len(losses)), losses, 1)[0] < 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts(toy_runs, toy_spec):
    bad = SimulationSet(toy_runs.log_k, toy_runs.images, toy_runs.head, toy_runs.conc * np.nan,
                        toy_runs.cells, toy_runs.n_release)
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        train(bad, toy_spec, TrainConfig(batch_size=8, epochs=1), "ar-net", Normalizer(2.0, 0.7))


def test_corrupted_checkpoint_rejected(toy_runs, toy_spec, tmp_path):
    res = train(toy_runs, toy_spec, TrainConfig(batch_size=8, epochs=0), "net", Normalizer(2.0, 0.7))
    res.surrogate.save(tmp_path / "ck")
    man = (tmp_path / "ck" / "manifest.json").read_text().replace('"params_sha256": "', '"params_sha256": "0')
    (tmp_path / "ck" / "manifest.json").write_text(man)
    with pytest.raises(IOError):
        Surrogate.load(tmp_path / "ck")


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


@pytest.mark.slow
def test_overfit_toy_runs(toy_runs):
    """A network with enough capacity memorizes eight runs: rollout R^2 > 0.99."""
    from aquinv.metrics import r2
    from aquinv.nn.network import NetworkSpec

    spec = NetworkSpec(init_features=16, blocks=(3, 4, 3), growth=16, height=13, width=25)
    # no weight decay: this checks fitting capacity, not regularization
    cfg = TrainConfig(batch_size=4, epochs=500, lr=0.003, weight_decay=0.0, patience=40)
    res = train(toy_runs, spec, cfg, "ar-net", Normalizer.fit(toy_runs, 2.0, np.sqrt(0.5)))
    head, conc = res.surrogate.predict_set(toy_runs)
    pred = np.concatenate([head[:, None], conc], axis=1)
    assert r2(toy_runs.stacked_outputs(), pred) > 0.99
