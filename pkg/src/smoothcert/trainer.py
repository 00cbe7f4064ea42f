"""Clean, Gaussian-augmented and PGD adversarial training with early stopping."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import AttackConfig, ThreatModel, pgd, robust_accuracy
from .data import Dataset
from .network import BNMode, Network, adapt
from .tensor import cross_entropy

REGIMES = ("clean", "gaussian", "adversarial")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged in epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    decay_epochs: list[int] | None = None  # None -> 50% and 75% of epochs
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    regime: str = "clean"
    sigma: float = 0.0
    norm: str = "l2"
    epsilon: float = 0.0
    attack_steps: int = 10
    step_size: float | None = None
    random_start: bool = True
    bn_attack_mode: str = "train"  # BN statistics while crafting training examples
    early_stop: bool = True
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.bn_attack_mode not in ("train", "frozen"):
            raise ValueError("bn_attack_mode must be 'train' or 'frozen'")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2")

    @property
    def threat(self) -> ThreatModel | None:
        if self.regime != "adversarial" or self.epsilon == 0:
            return None
        return ThreatModel(self.norm, self.epsilon)

    def attack_config(self, seed: int) -> AttackConfig:
        return AttackConfig(steps=self.attack_steps, step_size=self.step_size,
                            random_start=self.random_start, seed=seed)

    def lr_at(self, epoch: int) -> float:
        marks = self.decay_epochs
        if marks is None:
            marks = [int(math.ceil(self.epochs * 0.5)), int(math.ceil(self.epochs * 0.75))]
        return self.lr * self.decay_factor ** sum(epoch >= m for m in marks)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    train_acc: float
    clean_val_acc: float
    robust_val_acc: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int = -1
    early_stop: bool = True
    num_parameters: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class SGD:
    """Heavy-ball SGD with L2 weight decay on weight tensors."""

    def __init__(self, named_params, momentum: float, weight_decay: float):
        self.params = [(n, p) for n, p in named_params]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if name.endswith("weight"):
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data = p.data - lr * v
            p.grad = None


def _split_train_val(dataset: Dataset, cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    tags = set(dataset.splits.astype(str))
    train = dataset.split("train") if "train" in tags else dataset
    if "val" in tags:
        return train, dataset.split("val")
    perm = np.random.default_rng(cfg.seed + 7919).permutation(len(train))
    n_val = max(1, int(round(cfg.val_fraction * len(train))))
    return train.subset(np.sort(perm[n_val:])), train.subset(np.sort(perm[:n_val]))


def _frozen_copy(net: Network) -> Network:
    c = net.copy()
    c.set_mode(BNMode.FROZEN)
    return c


def _validate(net: Network, val: Dataset, cfg: TrainConfig, epoch: int) -> tuple[float, float]:
    frozen = _frozen_copy(net)
    clean = float((frozen.predict(val.images) == val.labels).mean())
    tm = cfg.threat
    if tm is None:
        return clean, clean
    rob = robust_accuracy(frozen, val.images, val.labels, tm, cfg.attack_config(cfg.seed * 1000 + epoch))
    return clean, rob


def train(net: Network, dataset: Dataset, cfg: TrainConfig) -> tuple[Network, Network, TrainReport]:
    """Train ``net`` in place; return (early-stopped copy, last-epoch copy, report)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if net.mode is not BNMode.TRAIN:
        net.set_mode(BNMode.TRAIN)
    train_set, val_set = _split_train_val(dataset, cfg)
    opt = SGD(net.named_parameters(), cfg.momentum, cfg.weight_decay)
    noise_rng = np.random.default_rng([cfg.seed, 1])
    tm = cfg.threat
    report = TrainReport(early_stop=cfg.early_stop, num_parameters=net.num_parameters())
    best, best_acc = None, -1.0
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, 0, epoch]).permutation(len(train_set))
        losses, correct, seen = [], 0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            if len(idx) < 2:
                continue
            xb, yb = train_set.images[idx], train_set.labels[idx]
            try:
                if cfg.regime == "gaussian":
                    xb = xb + cfg.sigma * noise_rng.standard_normal(xb.shape)
                elif tm is not None:
                    xb = _craft(net, xb, yb, tm, cfg, seed=cfg.seed * 100003 + step)
                logits = net.forward(xb)
                loss = cross_entropy(logits, yb)
                loss.backward()
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
            opt.step(lr)
            losses.append(loss.item())
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            seen += len(idx)
            step += 1
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        if not np.isfinite(mean_loss):
            raise TrainingDiverged(epoch, "loss is not finite")
        clean_val, robust_val = _validate(net, val_set, cfg, epoch)
        report.epochs.append(EpochRecord(epoch, lr, mean_loss, correct / max(seen, 1), clean_val, robust_val))
        if robust_val > best_acc:
            best_acc, best = robust_val, _frozen_copy(net)
            best_epoch = epoch
    last = _frozen_copy(net)
    if cfg.early_stop:
        report.selected_epoch = best_epoch
    else:
        report.selected_epoch = cfg.epochs - 1
        best = last
    return best, last, report


def _craft(net: Network, x, y, tm: ThreatModel, cfg: TrainConfig, seed: int) -> np.ndarray:
    if cfg.bn_attack_mode == "frozen":
        net.set_mode(BNMode.FROZEN)
        try:
            return pgd(net, x, y, tm, cfg.attack_config(seed))
        finally:
            net.set_mode(BNMode.TRAIN)
    return pgd(net, x, y, tm, cfg.attack_config(seed), update_stats=False)


def evaluate(net: Network, dataset: Dataset, sigma: float = 0.0, rho: float | None = None,
             batch_size: int = 128, seed: int = 0, blend: str = "std") -> float:
    """Top-1 accuracy, optionally under Gaussian noise and per-batch BN adaptation.

    Test images are shuffled with ``seed`` and split into near-equal batches so
    that no batch is too small to adapt on.
    """
    n = len(dataset)
    if n == 0:
        return 0.0
    rng = np.random.default_rng([seed, 2])
    order = rng.permutation(n)
    frozen = _frozen_copy(net)
    correct = 0
    for idx in np.array_split(order, max(1, math.ceil(n / batch_size))):
        xb, yb = dataset.images[idx], dataset.labels[idx]
        if sigma > 0:
            xb = xb + sigma * rng.standard_normal(xb.shape)
        if rho is not None and frozen.bn_layers:
            model = frozen.copy()
            adapt(model, xb, rho, blend)
        else:
            model = frozen
        correct += int((model.predict(xb) == yb).sum())
    return correct / n
