import numpy as np
import pytest

from smoothcert.data import Dataset, gen_synthetic
from smoothcert.network import BNMode, build_network, reference_cnn
from smoothcert.trainer import TrainConfig, TrainingDiverged, evaluate, train


def separable_set(n=40, seed=0):
    """Two classes split by the mean pixel with a clear margin; splits train/val."""
    r = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    x = r.uniform(0, 0.35, (n, 1, 2, 2)) + 0.6 * y[:, None, None, None]
    splits = np.array(["train", "train", "train", "val"] * (n // 4), dtype=object)
    return Dataset(x, y, 2, splits, seed)


def dense_net(seed=0, bn=True):
    layers = [{"type": "flatten"}, {"type": "dense", "in": 4, "out": 8}]
    if bn:
        layers.append({"type": "batchnorm", "channels": 8})
    layers += [{"type": "relu"}, {"type": "dense", "in": 8, "out": 2}]
    return build_network({"num_classes": 2, "input_shape": [1, 2, 2], "layers": layers}, seed)


def tiny_cnn(k, seed=0):
    return reference_cnn(k, channels=3, size=16, widths=(4, 4), hidden=8, seed=seed)


def params_of(net):
    return [p.data.copy() for p in net.parameters()]


def test_clean_training_separates_toy_set():
    ds = separable_set()
    best, last, rep = train(dense_net(), ds, TrainConfig(epochs=50, batch_size=8, lr=0.05, seed=1))
    tr = ds.split("train")
    assert (last.predict(tr.images) == tr.labels).mean() == 1.0
    assert rep.epochs[-1].train_acc == 1.0


def test_gaussian_sigma_zero_equals_clean():
    ds = separable_set()
    a = dense_net(3)
    b = dense_net(3)
    train(a, ds, TrainConfig(epochs=3, batch_size=8, seed=2))
    train(b, ds, TrainConfig(epochs=3, batch_size=8, seed=2, regime="gaussian", sigma=0.0))
    assert all(np.array_equal(p, q) for p, q in zip(params_of(a), params_of(b)))


def test_adversarial_eps_zero_equals_clean():
    ds = separable_set()
    a, b = dense_net(4), dense_net(4)
    train(a, ds, TrainConfig(epochs=3, batch_size=8, seed=2))
    train(b, ds, TrainConfig(epochs=3, batch_size=8, seed=2, regime="adversarial", norm="linf", epsilon=0.0))
    assert all(np.array_equal(p, q) for p, q in zip(params_of(a), params_of(b)))


def test_adversarial_report_and_early_stopping():
    ds = gen_synthetic(3, 20, seed=0)
    cfg = TrainConfig(epochs=4, batch_size=16, regime="adversarial", norm="l2", epsilon=0.25, attack_steps=2, seed=0)
    net = tiny_cnn(3)
    n_params = net.num_parameters()
    best, last, rep = train(net, ds, cfg)
    robust = [e.robust_val_acc for e in rep.epochs]
    assert rep.selected_epoch == int(np.argmax(robust))
    assert max(robust) >= robust[-1]
    assert best.num_parameters() == last.num_parameters() == n_params == rep.num_parameters
    assert best.mode is BNMode.FROZEN and last.mode is BNMode.FROZEN
    assert len(rep.epochs) == 4


def test_no_early_stop_selects_last():
    ds = separable_set()
    best, last, rep = train(dense_net(), ds, TrainConfig(epochs=3, batch_size=8, early_stop=False))
    assert rep.selected_epoch == 2 and best is last


def test_bit_identical_reports():
    ds = gen_synthetic(2, 12, seed=1)
    cfg = TrainConfig(epochs=2, batch_size=8, regime="adversarial", epsilon=0.3, attack_steps=2, seed=5)
    r1 = train(tiny_cnn(2, 1), ds, cfg)[2].to_dict()
    r2 = train(tiny_cnn(2, 1), ds, cfg)[2].to_dict()
    assert r1 == r2


def test_frozen_bn_attack_mode_runs():
    ds = gen_synthetic(2, 12, seed=1)
    cfg = TrainConfig(epochs=1, batch_size=8, regime="adversarial", epsilon=0.3, attack_steps=1,
                      bn_attack_mode="frozen")
    net = tiny_cnn(2)
    train(net, ds, cfg)
    assert net.mode is BNMode.TRAIN


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch():
    ds = separable_set()
    with pytest.raises(TrainingDiverged) as info:
        train(dense_net(bn=False), ds, TrainConfig(epochs=5, batch_size=8, lr=1e155, momentum=0.0,
                                                   weight_decay=0.0))
    assert info.value.epoch == 0


def test_lr_schedule():
    cfg = TrainConfig(epochs=8, lr=0.1)
    assert [cfg.lr_at(e) for e in range(8)] == pytest.approx([0.1] * 4 + [0.01] * 2 + [0.001] * 2)
    cfg = TrainConfig(epochs=8, lr=0.1, decay_epochs=[2], decay_factor=0.5)
    assert cfg.lr_at(1) == 0.1 and cfg.lr_at(2) == 0.05


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(regime="mixup")


def test_empty_dataset_rejected():
    ds = Dataset(np.zeros((0, 1, 2, 2)), np.zeros(0, dtype=int), 2, np.array([], dtype=object))
    with pytest.raises(ValueError):
        train(dense_net(), ds, TrainConfig())


# ---------------------------------------------------------------- evaluate


def test_evaluate_plain_equals_frozen_accuracy():
    ds = gen_synthetic(3, 10, seed=2)
    net = tiny_cnn(3)
    net.forward(ds.images[:8])
    frozen = net.copy()
    frozen.set_mode(BNMode.FROZEN)
    assert evaluate(net, ds) == (frozen.predict(ds.images) == ds.labels).mean()


def test_constant_classifier_on_single_class():
    net = dense_net(bn=False)
    last = net.layers[-1]
    last.weight.data[:] = 0.0
    last.bias.data = np.array([5.0, 0.0])
    net.set_mode(BNMode.FROZEN)
    ds = Dataset(np.random.default_rng(0).uniform(0, 1, (12, 1, 2, 2)), np.zeros(12, dtype=int), 2,
                 np.array(["test"] * 12, dtype=object))
    for sigma in (0.0, 0.5, 3.0):
        assert evaluate(net, ds, sigma=sigma) == 1.0


def test_evaluate_with_adaptation_is_deterministic():
    ds = gen_synthetic(3, 10, seed=2)
    net = tiny_cnn(3)
    net.forward(ds.images[:8])
    a = evaluate(net, ds, sigma=0.5, rho=1.0, batch_size=8, seed=3)
    b = evaluate(net, ds, sigma=0.5, rho=1.0, batch_size=8, seed=3)
    assert a == b and 0.0 <= a <= 1.0
    assert net.mode is BNMode.TRAIN
