"""Optimisers, losses, Bayesian training loops and quantisation-aware fine-tuning."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from qbnn.bayes import Ensemble, Network, sigmoid, softplus
from qbnn.tensor import SeededRng, softmax_rows

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


# -- losses -----------------------------------------------------------------------

def gaussian_nll(pred, y, noise_std: float = 1.0):
    """Summed Gaussian NLL with fixed observation noise, and its gradient."""
    var = noise_std**2
    r = np.asarray(pred, dtype=np.float64) - y
    value = float(np.sum(0.5 * r**2 / var + 0.5 * math.log(2 * math.pi * var)))
    return value, (r / var).astype(pred.dtype)


def cross_entropy(logits, onehot):
    """Summed softmax cross-entropy and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    value = float(-(onehot * logp).sum())
    return value, (np.exp(logp) - onehot).astype(logits.dtype)


def data_loss(task: str, pred, y, noise_std: float = 1.0):
    if task == "classification":
        return cross_entropy(pred, y)
    return gaussian_nll(pred, y, noise_std)


def gaussian_kl(mu, sigma, prior_std: float = 1.0):
    """KL(N(mu, sigma^2) || N(0, prior_std^2)) summed, with d/dmu and d/dsigma."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise TrainingError("posterior standard deviation must be positive")
    pv = prior_std**2
    kl = np.log(prior_std / sigma) + (sigma**2 + mu**2) / (2 * pv) - 0.5
    return float(kl.sum()), mu / pv, -1.0 / sigma + sigma / pv


@dataclass
class LossValue:
    total: float
    data: float
    regulariser: float = 0.0


def elbo_loss(model: Network, x, y, rng: SeededRng, kl_weight: float, *, noise_std: float = 1.0,
              prior_std: float = 1.0, mode: str = "float", observe: bool = False, with_kl_grad: bool = True):
    """Single-sample negative ELBO on one batch and its parameter gradients.

    ``total = sum_i nll_i + kl_weight * KL(q || p)``.  The KL covers ``mu`` and
    ``rho`` of every layer; biases are point estimates.
    """
    if model.method != "bbb":
        raise ValueError("elbo_loss expects a Bayes-by-backprop network")
    out = model.forward(x, rng, mode, observe=observe, keep=True)
    data, dout = data_loss(model.task, out, y, noise_std)
    grads = model.backward(dout)
    reg = 0.0
    for layer, g in zip(model.layers, grads):
        sigma = softplus(np.asarray(layer.params["rho"], dtype=np.float64))
        kl, dmu, dsigma = gaussian_kl(layer.params["mu"], sigma, prior_std)
        reg += kl
        if with_kl_grad:
            g["mu"] = g["mu"] + (kl_weight * dmu).astype(g["mu"].dtype)
            drho = dsigma * sigmoid(np.asarray(layer.params["rho"], dtype=np.float64))
            g["rho"] = g["rho"] + (kl_weight * drho).astype(g["rho"].dtype)
    return LossValue(data + kl_weight * reg, data, kl_weight * reg), grads


# -- optimisers -------------------------------------------------------------------

def _check_finite(grads) -> None:
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainingError(f"non-finite gradient in parameter {i} ({bad} entries)")


@dataclass
class SGDState:
    lr: float
    momentum: float = 0.0
    velocity: list = field(default_factory=list)


def sgd_step(params: list, grads: list, state: SGDState) -> None:
    """Classical momentum update ``v = m v - lr g; p += v``, in place."""
    if len(params) != len(grads):
        raise ValueError("parameter and gradient lists differ in length")
    _check_finite(grads)
    if not state.velocity:
        state.velocity = [np.zeros_like(p, dtype=np.float64) for p in params]
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        v *= state.momentum
        v -= state.lr * g
        p += v.astype(p.dtype)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list, grads: list, state: AdamState) -> None:
    _check_finite(grads)
    if not state.m:
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]
    state.t += 1
    c1 = 1 - state.beta1**state.t
    c2 = 1 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * np.square(g, dtype=np.float64)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


@dataclass
class SGHMCState:
    """Sampler state.  ``friction`` is the per-step momentum decay C."""

    step_size: float
    friction: float = 0.05
    noise: bool = True
    grad_noise_estimate: float = 0.0
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if self.step_size <= 0:
            raise ConfigError("SGHMC step size must be positive")
        if self.friction < 0:
            raise ConfigError("SGHMC friction must be non-negative")


def sghmc_step(params: list, grads: list, state: SGHMCState, rng: SeededRng | None) -> None:
    """``v = v - eta grad U - C v + N(0, 2 (C - Chat) eta); w = w + v``, in place."""
    _check_finite(grads)
    if not state.velocity:
        state.velocity = [np.zeros_like(p, dtype=np.float64) for p in params]
    eta, c = state.step_size, state.friction
    noise_var = 2.0 * (c - state.grad_noise_estimate) * eta
    for p, g, v in zip(params, grads, state.velocity):
        v -= eta * np.asarray(g, dtype=np.float64) + c * v
        if state.noise and noise_var > 0:
            v += math.sqrt(noise_var) * rng.generator.standard_normal(v.shape)
        p += v.astype(p.dtype)


# -- training loops ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.0
    noise_std: float = 1.0
    prior_std: float = 1.0
    kl_weight: float | None = None  # None means 1 / number of batches
    # SGHMC
    step_size: float = 1e-6
    friction: float = 0.1
    burnin: int = 2000
    thinning: int = 50
    num_samples: int = 20


class JsonlLog:
    """Writes one JSON record per line; a no-op without a stream."""

    def __init__(self, stream=None):
        self.stream = stream
        self.records: list[dict] = []

    def __call__(self, **record) -> None:
        self.records.append(record)
        if self.stream is not None:
            self.stream.write(json.dumps(record, sort_keys=True) + "\n")


def batches(n: int, batch_size: int, rng: SeededRng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _params(net: Network):
    return [p for _, _, p in net.parameters()]


def _flat_grads(net: Network, grads: list[dict]):
    return [g[name] for layer, g in zip(net.layers, grads) for name in layer.params]


def _weight_decay(net: Network, flat: list, wd: float):
    if wd == 0:
        return flat
    out = []
    for (layer, name, p), g in zip(net.parameters(), flat):
        if name in ("w", "mu"):
            g = g + (wd * p).astype(g.dtype)
        out.append(g)
    return out


def _converged(losses: list[float], window: int = 5, tol: float = 0.05) -> bool:
    """Mean per-sample loss moved by at most ``tol * max(|loss|, 1)`` between the last two windows."""
    if len(losses) < 2 * window:
        return True
    early = np.mean(losses[-2 * window:-window])
    late = np.mean(losses[-window:])
    return abs(early - late) <= tol * max(abs(early), 1.0)


def fit(net: Network, x, y, cfg: TrainConfig, rng: SeededRng, *, mode: str = "float", observe: bool = False,
        lr: float | None = None, epochs: int | None = None, with_kl_grad: bool = True,
        logger: JsonlLog | None = None, phase: str = "train") -> list[float]:
    """Minibatch training with Adam.  BBB minimises the negative ELBO."""
    x = np.asarray(x, dtype=net.dtype)
    y = np.asarray(y, dtype=net.dtype)
    n = x.shape[0]
    num_batches = math.ceil(n / cfg.batch_size)
    kl_weight = cfg.kl_weight if cfg.kl_weight is not None else 1.0 / num_batches
    state = AdamState(lr if lr is not None else cfg.lr)
    params = _params(net)
    losses = []
    for epoch in range(cfg.epochs if epochs is None else epochs):
        erng = rng.child(epoch)
        total = data = reg = 0.0
        for b, idx in enumerate(batches(n, cfg.batch_size, erng)):
            brng = erng.child(b)
            if net.method == "bbb":
                lv, grads = elbo_loss(net, x[idx], y[idx], brng, kl_weight, noise_std=cfg.noise_std,
                                      prior_std=cfg.prior_std, mode=mode, observe=observe,
                                      with_kl_grad=with_kl_grad)
            else:
                out = net.forward(x[idx], brng, mode, observe=observe, keep=True)
                d, dout = data_loss(net.task, out, y[idx], cfg.noise_std)
                grads = net.backward(dout)
                lv = LossValue(d, d)
            flat = [g / len(idx) for g in _flat_grads(net, grads)]
            flat = _weight_decay(net, flat, cfg.weight_decay)
            adam_step(params, flat, state)
            total += lv.total
            data += lv.data
            reg += lv.regulariser
        losses.append(total / n)
        if logger is not None:
            rec = dict(phase=phase, epoch=epoch, loss=total / n, data=data / n, regulariser=reg / n)
            if observe:
                rec["observers"] = {k: [s.observer.a, s.observer.b] for k, s in net.sites()
                                    if s.observer.initialised}
            logger(**rec)
    if phase == "train":
        net.converged = _converged(losses)
    return losses


def _potential_grads(net: Network, x, y, idx, n: int, cfg: TrainConfig, rng: SeededRng):
    """Minibatch estimate of grad U with U = n * mean NLL + ||w||^2 / (2 prior^2)."""
    out = net.forward(x[idx], rng, "float", keep=True)
    _, dout = data_loss(net.task, out, y[idx], cfg.noise_std)
    flat = [g * (n / len(idx)) for g in _flat_grads(net, net.backward(dout))]
    pv = cfg.prior_std**2
    return [g + (p / pv).astype(g.dtype) if name == "w" else g
            for (_, name, p), g in zip(net.parameters(), flat)]


@dataclass
class SGHMCSchedule:
    burnin: int
    thinning: int
    num_samples: int
    total_steps: int | None = None

    def __post_init__(self):
        if self.burnin < 0 or self.thinning < 1 or self.num_samples < 1:
            raise ConfigError("burn-in must be >= 0, thinning and sample count >= 1")
        need = self.burnin + self.num_samples * self.thinning
        if self.total_steps is None:
            self.total_steps = need
        elif need > self.total_steps:
            raise ConfigError(f"schedule needs {need} steps but the run has {self.total_steps}")


def collect_sghmc_samples(net: Network, x, y, cfg: TrainConfig, schedule: SGHMCSchedule, rng: SeededRng,
                          logger: JsonlLog | None = None) -> Ensemble:
    """Run SGHMC from ``net`` and keep a deep copy every ``thinning`` steps after burn-in."""
    x = np.asarray(x, dtype=net.dtype)
    y = np.asarray(y, dtype=net.dtype)
    n = x.shape[0]
    state = SGHMCState(cfg.step_size, cfg.friction)
    params = _params(net)
    snapshots = []
    step = 0
    epoch = 0
    noise_rng = rng.child(1 << 20)
    while len(snapshots) < schedule.num_samples:
        erng = rng.child(epoch)
        for b, idx in enumerate(batches(n, cfg.batch_size, erng)):
            grads = _potential_grads(net, x, y, idx, n, cfg, erng.child(b))
            sghmc_step(params, grads, state, noise_rng)
            step += 1
            if step > schedule.burnin and (step - schedule.burnin) % schedule.thinning == 0:
                snap = net.copy()
                snap.converged = True
                snapshots.append(snap)
                if logger is not None:
                    logger(phase="sghmc", step=step, sample=len(snapshots))
                if len(snapshots) == schedule.num_samples:
                    break
        epoch += 1
    return Ensemble(snapshots)


def train_model(method: str, sizes, x, y, cfg: TrainConfig, seed: int, *, task: str = "regression",
                drop_p: float = 0.1, dtype=np.float32, logger: JsonlLog | None = None):
    """Float training of any supported method; returns a Network or an Ensemble."""
    rng = SeededRng(seed)
    base = "pointwise" if method == "sghmc" else method
    net = Network(sizes, base, drop_p=drop_p, seed=seed, dtype=dtype, task=task)
    if task == "regression":
        net.layers[-1].params["b"][:] = np.asarray(y, dtype=np.float64).mean(axis=0)
    if method == "sghmc":
        schedule = SGHMCSchedule(cfg.burnin, cfg.thinning, cfg.num_samples)
        return collect_sghmc_samples(net, x, y, cfg, schedule, rng.child(7), logger)
    fit(net, x, y, cfg, rng.child(7), logger=logger)
    return net


# -- quantisation-aware fine-tuning -----------------------------------------------

@dataclass
class QatConfig:
    epochs: int = 5
    lr_factor: float = 0.01
    observer_momentum: float = 0.01
    bits_w: int = 8
    bits_a: int = 7
    freeze_regulariser: bool = True

    def __post_init__(self):
        if not 3 <= self.bits_w <= 8:
            raise ConfigError(f"weight bit-width must be in [3, 8], got {self.bits_w}")
        if not 3 <= self.bits_a <= 7:
            raise ConfigError(f"activation bit-width must be in [3, 7], got {self.bits_a}")
        if self.epochs < 0:
            raise ConfigError("QAT epochs must be non-negative")


def _qat_network(net: Network, x, y, qcfg: QatConfig, tcfg: TrainConfig, rng: SeededRng,
                 logger: JsonlLog | None) -> Network:
    if not getattr(net, "converged", True):
        log.warning("float model did not converge; quantising it anyway")
    net = net.copy()
    net.configure_quant(qcfg.bits_w, qcfg.bits_a, qcfg.observer_momentum)
    x = np.asarray(x, dtype=net.dtype)
    # one observation pass so every site has a range before simulation starts
    crng = rng.child(0)
    for b, idx in enumerate(batches(x.shape[0], tcfg.batch_size, crng)):
        net.forward(x[idx], crng.child(b), "float", observe=True)
    if qcfg.epochs > 0:
        fit(net, x, y, tcfg, rng.child(1), mode="simulated", observe=True, lr=tcfg.lr * qcfg.lr_factor,
            epochs=qcfg.epochs, with_kl_grad=not qcfg.freeze_regulariser, logger=logger, phase="qat")
    net.finalise()
    return net


def qat_finetune(model, x, y, qcfg: QatConfig, tcfg: TrainConfig, rng: SeededRng,
                 logger: JsonlLog | None = None):
    """Insert SQ nodes, fine-tune with simulated quantisation, then freeze for integer use.

    Returns a new finalised model; ``model`` is left untouched.  An ensemble is
    fine-tuned member by member with independent sites.
    """
    if isinstance(model, Ensemble):
        return Ensemble([_qat_network(m, x, y, qcfg, tcfg, rng.child(l), logger)
                         for l, m in enumerate(model.members)])
    if not isinstance(model, Network):
        raise TypeError(f"cannot quantise {type(model).__name__}")
    return _qat_network(model, x, y, qcfg, tcfg, rng, logger)


def config_dict(cfg) -> dict:
    return asdict(cfg)
