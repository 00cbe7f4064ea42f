"""FGSM / PGD / EoT-PGD under l_inf and l_2 threat models."""
from __future__ import annotations

import contextlib
import enum
from dataclasses import dataclass, field

import numpy as np

from .network import BNMode, Network, adapt
from .tensor import Tensor, cross_entropy, log_softmax, logsumexp, neg, select, stack, sum_


class Norm(str, enum.Enum):
    LINF = "linf"
    L2 = "l2"


@dataclass(frozen=True)
class ThreatModel:
    norm: Norm
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "norm", Norm(self.norm))
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    def default_step_size(self) -> float:
        return self.epsilon / 4.0 if self.norm is Norm.LINF else self.epsilon / 8.5


@dataclass
class AttackConfig:
    steps: int = 10
    step_size: float | None = None  # None -> ThreatModel.default_step_size()
    random_start: bool = True
    eot_models: int = 1
    seed: int = 0
    trace: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.eot_models < 1:
            raise ValueError("eot_models must be >= 1")


def _flat_norms(v: np.ndarray) -> np.ndarray:
    return np.sqrt((v.reshape(len(v), -1) ** 2).sum(axis=1)).reshape((-1,) + (1,) * (v.ndim - 1))


def q_p(gradient: np.ndarray, norm) -> np.ndarray:
    """Steepest-ascent direction per example: sign for l_inf, unit l_2 vector for l_2.

    The first axis is the batch axis. A zero gradient maps to zero.
    """
    g = np.asarray(gradient, dtype=np.float64)
    if Norm(norm) is Norm.LINF:
        return np.sign(g)
    nrm = _flat_norms(g)
    return np.divide(g, nrm, out=np.zeros_like(g), where=nrm > 0)


def project(delta: np.ndarray, tm: ThreatModel) -> np.ndarray:
    """Closest point of the threat ball (per example along axis 0)."""
    d = np.asarray(delta, dtype=np.float64)
    eps = tm.epsilon
    if tm.norm is Norm.LINF:
        return np.clip(d, -eps, eps)
    nrm = _flat_norms(d)
    out = d.copy()
    outside = (nrm > eps).reshape(-1)
    if outside.any():
        scaled = d[outside] * (eps / nrm[outside])
        # rounding can leave the rescaled vector a hair outside the ball
        over = _flat_norms(scaled) > eps
        while over.any():
            scaled = np.where(over, np.nextafter(scaled, 0.0), scaled)
            over = _flat_norms(scaled) > eps
        out[outside] = scaled
    return out


def random_delta(shape, tm: ThreatModel, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample from the l_inf box or the l_2 ball, per example."""
    if tm.norm is Norm.LINF:
        return rng.uniform(-tm.epsilon, tm.epsilon, size=shape)
    n = shape[0]
    d = int(np.prod(shape[1:]))
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = tm.epsilon * rng.uniform(size=(n, 1)) ** (1.0 / d)
    return project((g * r).reshape(shape), tm)


def norms(delta: np.ndarray, norm) -> np.ndarray:
    d = np.asarray(delta).reshape(len(delta), -1)
    return np.abs(d).max(axis=1) if Norm(norm) is Norm.LINF else np.sqrt((d ** 2).sum(axis=1))


def ce_loss_and_grad(net: Network, x: np.ndarray, y, update_stats: bool = False):
    """Summed cross-entropy over the batch and its input gradient."""
    xt = Tensor(x, requires_grad=True)
    with net.input_gradients_only():
        loss = cross_entropy(net.forward(xt, update_stats=update_stats), y, reduction="sum")
        loss.backward()
    return loss.item(), xt.grad


def eot_loss_and_grad(nets, x: np.ndarray, y):
    """-log of the ensemble-averaged probability of the true class, summed over the batch."""
    if not nets:
        raise ValueError("EoT ensemble is empty")
    xt = Tensor(x, requires_grad=True)
    with contextlib.ExitStack() as stack_:
        for net in nets:
            stack_.enter_context(net.input_gradients_only())
        picked = [select(log_softmax(net.forward(xt, update_stats=False), axis=1), y) for net in nets]
        # log mean_i p_i = logsumexp_i(log p_i) - log m; m = 1 reduces to plain cross-entropy
        mix = logsumexp(stack(picked, axis=0), axis=0) - np.log(len(nets))
        loss = sum_(neg(mix))
        loss.backward()
    return loss.item(), xt.grad


def _run(loss_and_grad, x, y, tm: ThreatModel, cfg: AttackConfig, clip=(0.0, 1.0)) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    eta = cfg.step_size if cfg.step_size is not None else tm.default_step_size()
    delta = random_delta(x.shape, tm, rng) if cfg.random_start else np.zeros_like(x)
    if clip is not None:
        delta = np.clip(x + delta, *clip) - x
    cfg.trace.clear()
    for t in range(cfg.steps):
        loss, grad = loss_and_grad(x + delta)
        if not np.isfinite(loss) or not np.isfinite(grad).all():
            raise FloatingPointError(f"non-finite attack loss at step {t}")
        cfg.trace.append(loss)
        delta = project(delta + eta * q_p(grad, tm.norm), tm)
        if clip is not None:
            delta = np.clip(x + delta, *clip) - x
        bound = tm.epsilon * (1.0 + 1e-12)
        if (norms(delta, tm.norm) > bound).any():
            raise AssertionError(f"perturbation left the threat ball at step {t}")
    return x + delta


def pgd(net: Network, x, y, tm: ThreatModel, cfg: AttackConfig, clip=(0.0, 1.0),
        update_stats: bool = False) -> np.ndarray:
    """Projected gradient ascent on the cross-entropy; returns the adversarial batch.

    Projection order per step: onto the threat ball, then clamp ``x + delta`` to
    the pixel range and recompute ``delta``. ``clip=None`` skips the clamp.
    """
    y = np.asarray(y)
    return _run(lambda xa: ce_loss_and_grad(net, xa, y, update_stats)[:2], x, y, tm, cfg, clip)


def fgsm(net: Network, x, y, tm: ThreatModel, clip=(0.0, 1.0)) -> np.ndarray:
    """Single full-size step from the clean point."""
    return pgd(net, x, y, tm, AttackConfig(steps=1, step_size=tm.epsilon, random_start=False), clip)


def eot_pgd(base_net: Network | None, adapted_nets, x, y, tm: ThreatModel, cfg: AttackConfig,
            clip=(0.0, 1.0)) -> np.ndarray:
    """PGD against an ensemble of BN-adapted copies, log outside the mean.

    ``base_net`` is accepted for symmetry with :func:`make_eot_ensemble` and is not queried.
    """
    nets = list(adapted_nets)
    if not nets:
        raise ValueError("EoT ensemble is empty")
    y = np.asarray(y)
    return _run(lambda xa: eot_loss_and_grad(nets, xa, y), x, y, tm, cfg, clip)


def make_eot_ensemble(net: Network, batch, tm: ThreatModel, m: int, rho: float = 1.0,
                      seed: int = 0, blend: str = "std") -> list[Network]:
    """``m`` copies of ``net``, each adapted on ``batch`` plus an independent random delta."""
    if m < 1:
        raise ValueError("m must be >= 1")
    batch = np.asarray(batch, dtype=np.float64)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(m):
        member = net.copy()
        member.set_mode(BNMode.FROZEN)
        adapt(member, np.clip(batch + random_delta(batch.shape, tm, rng), 0.0, 1.0), rho, blend)
        out.append(member)
    return out


def robust_accuracy(net: Network, x, y, tm: ThreatModel, cfg: AttackConfig, attack: str = "pgd",
                    batch_size: int = 128) -> float:
    """Accuracy of a fixed-statistics network on PGD (or FGSM) examples."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    correct = 0
    for i in range(0, len(x), batch_size):
        xb, yb = x[i:i + batch_size], y[i:i + batch_size]
        if attack == "fgsm":
            xa = fgsm(net, xb, yb, tm)
        else:
            sub = AttackConfig(cfg.steps, cfg.step_size, cfg.random_start, 1, cfg.seed + i)
            xa = pgd(net, xb, yb, tm, sub)
        correct += int((net.predict(xa) == yb).sum())
    return correct / max(len(x), 1)


def adaptive_robust_accuracy(net: Network, x, y, tm: ThreatModel, cfg: AttackConfig, rho: float = 1.0,
                             batch_size: int = 128, blend: str = "std") -> float:
    """Accuracy when BN is re-adapted on each test batch and the attacker uses EoT.

    The ensemble for each batch is built from the clean batch plus random
    deltas; the adversarial batch is then classified after adapting on itself.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    frozen = net.copy()
    frozen.set_mode(BNMode.FROZEN)
    correct = 0
    for i in range(0, len(x), batch_size):
        xb, yb = x[i:i + batch_size], y[i:i + batch_size]
        ens = make_eot_ensemble(frozen, xb, tm, cfg.eot_models, rho, seed=cfg.seed + i, blend=blend)
        sub = AttackConfig(cfg.steps, cfg.step_size, cfg.random_start, cfg.eot_models, cfg.seed + i)
        xa = eot_pgd(frozen, ens, xb, yb, tm, sub)
        judge = frozen.copy()
        adapt(judge, xa, rho, blend)
        correct += int((judge.predict(xa) == yb).sum())
    return correct / max(len(x), 1)
