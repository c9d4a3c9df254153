"""Bayesian MLPs with float, simulated-quantisation and integer execution.

A :class:`Network` is a stack of :class:`Dense` layers whose weight source
depends on ``method``:

* ``pointwise`` and ``mcd`` hold a weight matrix ``w``; ``mcd`` additionally
  drops the inputs of every layer except the first.
* ``bbb`` holds ``mu`` and ``rho`` and samples ``w = mu + softplus(rho) * eps``.

SGHMC uses an :class:`Ensemble` of independent pointwise networks.

Every tensor that reaches an integer kernel has one :class:`Site`, which owns a
range observer and the quantisation parameters derived from it.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from qbnn import quant
from qbnn.quant import (
    FixedPointMultiplier,
    IntTensor,
    OfflineConstants,
    QuantParams,
    RangeObserver,
    derive_params,
    dequantise,
    fake_quant,
    fake_quant_grad,
    fixed_point_from_real,
    quantise,
    quantised_matmul,
    requantise_sum,
    round_half_away,
)
from qbnn.tensor import FLOAT, SeededRng, bernoulli_mask, gaussian_sample, softmax_rows

METHODS = ("pointwise", "mcd", "bbb", "sghmc")
MODES = ("float", "simulated", "integer")

EPS_SCALE = 0.0236
EPS_ZERO_POINT = 0


class StateError(RuntimeError):
    pass


def softplus(x):
    return np.logaddexp(x, x.dtype.type(0))


def softplus_inv(y):
    return np.log(np.expm1(y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Site:
    """Quantisation point: an observer plus the (S, Z) currently derived from it."""

    def __init__(self, bits: int = 8, signed: bool = False, momentum: float = 0.01,
                 fixed: QuantParams | None = None):
        self.bits = bits
        self.signed = signed
        self.observer = RangeObserver(momentum)
        self.fixed = fixed
        self.params: QuantParams | None = fixed

    def reset(self, bits: int, momentum: float) -> None:
        self.bits = bits
        self.observer = RangeObserver(momentum)
        if self.fixed is not None:
            self.fixed = QuantParams(self.fixed.scale, self.fixed.zero_point, bits, self.fixed.signed)
            self.params = self.fixed
        else:
            self.params = None

    def record(self, t) -> None:
        if self.fixed is not None:
            return
        self.observer.update(t)
        self.params = derive_params(self.observer, self.bits, self.signed)

    def fq(self, t):
        if self.params is None:
            raise StateError("site has no quantisation parameters; observe data first")
        return fake_quant(t, self.params)

    def grad(self, t, g):
        return fake_quant_grad(t, self.params, g)


def _bias_fq(b, scale: float):
    return (scale * round_half_away(np.asarray(b, dtype=np.float64) / scale)).astype(b.dtype)


@dataclass
class IntegerLayer:
    """Frozen integer artefacts of one layer, produced by :meth:`Dense.finalise`."""

    in_params: QuantParams
    out_params: QuantParams
    w_params: QuantParams
    mult: FixedPointMultiplier
    mult_real: float
    fused_bias: np.ndarray
    qw: IntTensor | None = None
    offline: OfflineConstants | None = None
    # dropout requantisation from the previous output grid onto the mask grid
    src_params: QuantParams | None = None
    mask_mult: FixedPointMultiplier | None = None
    mask_mult_real: float | None = None
    # Bayes-by-backprop pieces; sigma is stored after softplus
    q_mu: IntTensor | None = None
    q_sigma: IntTensor | None = None
    eps_params: QuantParams | None = None
    prod_params: QuantParams | None = None
    prod_mult: FixedPointMultiplier | None = None
    sum_mults: tuple = field(default_factory=tuple)


class Dense:
    def __init__(self, n_in: int, n_out: int, method: str, rng: SeededRng, *, relu: bool,
                 drop_p: float = 0.0, dtype=FLOAT, sigma_init: float | None = None):
        if method not in ("pointwise", "mcd", "bbb"):
            raise ValueError(f"unknown layer method {method!r}")
        if not 0.0 <= drop_p < 1.0:
            raise ValueError(f"drop probability must lie in [0, 1), got {drop_p}")
        self.method = method
        self.relu = relu
        self.drop_p = drop_p
        self.dtype = dtype
        self.shape = (n_in, n_out)
        std = np.sqrt(2.0 / n_in)
        w = (rng.generator.standard_normal((n_in, n_out)) * std).astype(dtype)
        self.params: dict[str, np.ndarray] = {}
        if method == "bbb":
            s0 = sigma_init if sigma_init is not None else 0.05 * std
            self.params["mu"] = w
            self.params["rho"] = np.full((n_in, n_out), softplus_inv(np.float64(s0)), dtype=dtype)
        else:
            self.params["w"] = w
        self.params["b"] = np.zeros(n_out, dtype=dtype)
        self.sites: dict[str, Site] = {"out": Site(8, signed=False)}
        if drop_p > 0:
            self.sites["mask"] = Site(8, signed=False)
        if method == "bbb":
            self.sites["mu"] = Site(8, signed=True)
            self.sites["sigma"] = Site(8, signed=False)
            self.sites["eps"] = Site(8, signed=True, fixed=QuantParams(EPS_SCALE, EPS_ZERO_POINT, 8, True))
            self.sites["prod"] = Site(8, signed=True)
        self.sites["w"] = Site(8, signed=True)
        self.in_site: Site | None = None  # previous layer's output site, wired by Network
        self.integer: IntegerLayer | None = None
        self._cache: dict = {}

    # -- quantisation configuration ------------------------------------------------
    def configure(self, bits_w: int, bits_a: int, momentum: float) -> None:
        for name, site in self.sites.items():
            bits = bits_a if name in ("out", "mask") else bits_w
            site.reset(bits, momentum)
        self.integer = None

    @property
    def matmul_in_site(self) -> Site:
        return self.sites["mask"] if self.drop_p > 0 else self.in_site

    # -- float / simulated ---------------------------------------------------------
    def draw(self, rng: SeededRng | None, batch: int):
        """Random draws for one pass, in the fixed order mask then eps."""
        mask = None
        eps = None
        if self.drop_p > 0:
            if rng is None:
                raise ValueError("dropout layers need a random source")
            mask = bernoulli_mask(rng, (batch, self.shape[0]), self.drop_p, dtype=self.dtype)
        if self.method == "bbb":
            if rng is None:
                raise ValueError("Bayes-by-backprop layers need a random source")
            eps = gaussian_sample(rng, self.shape, dtype=self.dtype)
        return mask, eps

    def sample_weight(self, eps, sim: bool, observe: bool, cache: dict | None = None):
        """Weight tensor entering the matmul, with SQ nodes when ``sim``."""
        c = cache if cache is not None else {}
        s = self.sites
        if self.method != "bbb":
            w = self.params["w"]
            if observe:
                s["w"].record(w)
            if sim:
                c["w_raw"] = w
                w = s["w"].fq(w)
            return w
        mu = self.params["mu"]
        sigma = softplus(self.params["rho"])
        if observe:
            s["mu"].record(mu)
            s["sigma"].record(sigma)
        c["mu_raw"], c["sigma_raw"] = mu, sigma
        if sim:
            mu = s["mu"].fq(mu)
            sigma = s["sigma"].fq(sigma)
            eps = s["eps"].fq(eps)
        c["eps"] = eps
        c["sigma"] = sigma
        prod = sigma * eps
        if observe:
            s["prod"].record(prod)
        if sim:
            c["prod_raw"] = prod
            prod = s["prod"].fq(prod)
        w = mu + prod
        if observe:
            s["w"].record(w)
        if sim:
            c["w_raw"] = w
            w = s["w"].fq(w)
        return w

    def forward(self, x, rng: SeededRng | None = None, *, sim: bool = False, observe: bool = False,
                draws=None, keep: bool = False):
        if draws is None:
            draws = self.draw(rng, x.shape[0])
        mask, eps = draws
        c: dict = {"x": x}
        s = self.sites
        xm = x
        if mask is not None:
            mask = mask * self.dtype(1.0 / (1.0 - self.drop_p))
            c["mask"] = mask
            xm = x * mask
            if observe:
                s["mask"].record(xm)
            if sim:
                c["xm_raw"] = xm
                xm = s["mask"].fq(xm)
        c["xm"] = xm
        w = self.sample_weight(eps, sim, observe, c)
        c["w"] = w
        b = self.params["b"]
        if sim:
            b = _bias_fq(b, self.matmul_in_site.params.scale * s["w"].params.scale)
        z = xm @ w + b
        a = np.maximum(z, self.dtype(0)) if self.relu else z
        c["z"] = z
        if observe:
            s["out"].record(a)
        if sim:
            c["a_raw"] = a
            a = s["out"].fq(a)
        if keep:
            c["sim"] = sim
            self._cache = c
        return a

    def backward(self, dout):
        """Gradients w.r.t. parameters and layer input, straight-through at SQ nodes."""
        c = self._cache
        if not c:
            raise StateError("backward called without a cached forward pass")
        sim = c["sim"]
        s = self.sites
        if sim:
            dout = s["out"].grad(c["a_raw"], dout)
        if self.relu:
            dout = dout * (c["z"] > 0)
        grads = {"b": dout.sum(axis=0)}
        dw = c["xm"].T @ dout
        dxm = dout @ c["w"].T
        if "mask" in c:
            if sim:
                dxm = s["mask"].grad(c["xm_raw"], dxm)
            dx = dxm * c["mask"]
        else:
            dx = dxm
        if sim:
            dw = s["w"].grad(c["w_raw"], dw)
        if self.method == "bbb":
            dmu = dw
            dprod = dw
            if sim:
                dmu = s["mu"].grad(c["mu_raw"], dmu)
                dprod = s["prod"].grad(c["prod_raw"], dprod)
            dsigma = dprod * c["eps"]
            if sim:
                dsigma = s["sigma"].grad(c["sigma_raw"], dsigma)
            grads["mu"] = dmu
            grads["rho"] = dsigma * sigmoid(self.params["rho"])
        else:
            grads["w"] = dw
        return grads, dx

    # -- integer -------------------------------------------------------------------
    def finalise(self) -> IntegerLayer:
        s = self.sites
        for name, site in s.items():
            if site.params is None:
                raise StateError(f"site {name!r} never observed data")
        in_p = self.matmul_in_site.params
        w_p = s["w"].params
        out_p = s["out"].params
        bias = np.asarray(self.params["b"], dtype=np.float64)
        fused = round_half_away(bias / (w_p.scale * in_p.scale))
        if np.abs(fused).max(initial=0) > quant.INT32_MAX:
            raise ValueError("bias does not fit the 32-bit accumulator scale")
        real = in_p.scale * w_p.scale / out_p.scale
        il = IntegerLayer(in_p, out_p, w_p, fixed_point_from_real(real), real, fused.astype(np.int64))
        if self.drop_p > 0:
            src = self.in_site.params
            il.src_params = src
            il.mask_mult_real = src.scale / ((1.0 - self.drop_p) * in_p.scale)
            il.mask_mult = fixed_point_from_real(il.mask_mult_real)
        if self.method == "bbb":
            il.q_mu = quantise(self.params["mu"], s["mu"].params)
            il.q_sigma = quantise(softplus(np.asarray(self.params["rho"], dtype=np.float64)), s["sigma"].params)
            il.eps_params = s["eps"].params
            il.prod_params = s["prod"].params
            il.prod_mult = fixed_point_from_real(il.q_sigma.params.scale * il.eps_params.scale / il.prod_params.scale)
            il.sum_mults = (fixed_point_from_real(s["mu"].params.scale / w_p.scale),
                            fixed_point_from_real(il.prod_params.scale / w_p.scale))
        else:
            il.qw = quantise(self.params["w"], w_p)
            il.offline = quant.precompute_offline(il.qw, in_p, w_p, bias)
        self.integer = il
        return il

    def integer_weights(self, eps) -> tuple[IntTensor, OfflineConstants]:
        """Weights for one integer pass; BBB samples them from quantised eps."""
        il = self.integer
        if self.method != "bbb":
            return il.qw, il.offline
        q_eps = quantise(eps, il.eps_params).data.astype(np.int64)
        sig = il.q_sigma.data.astype(np.int64) - il.q_sigma.params.zero_point
        pp = il.prod_params
        q_prod = np.clip(il.prod_mult.apply(sig * (q_eps - il.eps_params.zero_point)) + pp.zero_point,
                         pp.qmin, pp.qmax)
        mu = il.q_mu.data.astype(np.int64) - il.q_mu.params.zero_point
        qw = IntTensor(requantise_sum([(mu, il.sum_mults[0]), (q_prod - pp.zero_point, il.sum_mults[1])],
                                      il.w_params), il.w_params)
        depth = qw.shape[0]
        off = OfflineConstants(qw.data.astype(np.int64).sum(axis=0),
                               depth * il.w_params.zero_point * il.in_params.zero_point,
                               il.fused_bias, depth)
        return qw, off

    def apply_mask_int(self, q: IntTensor, mask, real_multiplier: bool = False) -> IntTensor:
        """Dropout in the integer domain: dropped entries take the zero encoding."""
        il = self.integer
        src = il.src_params
        kept = np.where(mask > 0, q.data.astype(np.int64) - src.zero_point, 0)
        mult = il.mask_mult_real if real_multiplier else il.mask_mult
        return IntTensor(quant.requantise(kept, mult, il.in_params), il.in_params)

    def forward_int(self, q: IntTensor, rng: SeededRng | None = None, *, draws=None,
                    real_multiplier: bool = False) -> IntTensor:
        if self.integer is None:
            raise StateError("layer is not finalised for integer execution")
        il = self.integer
        if draws is None:
            draws = self.draw(rng, q.shape[0])
        mask, eps = draws
        if mask is not None:
            q = self.apply_mask_int(q, mask, real_multiplier)
        qw, off = self.integer_weights(eps)
        mult = il.mult_real if real_multiplier else il.mult
        return quantised_matmul(q, qw, off, mult, il.out_params, relu=self.relu)


class Network:
    """Multilayer perceptron with ReLU hidden layers and a linear head."""

    def __init__(self, sizes, method: str = "pointwise", *, drop_p: float = 0.1, seed: int = 0,
                 dtype=FLOAT, sigma_init: float | None = None, task: str = "regression"):
        if method not in ("pointwise", "mcd", "bbb"):
            raise ValueError(f"unknown network method {method!r}")
        self.sizes = list(sizes)
        self.method = method
        self.task = task
        self.dtype = dtype
        self.drop_p = drop_p if method == "mcd" else 0.0
        rng = SeededRng(seed)
        self.layers: list[Dense] = []
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.layers.append(Dense(
                n_in, n_out, method, rng,
                relu=i < len(self.sizes) - 2,
                drop_p=self.drop_p if i > 0 else 0.0,
                dtype=dtype, sigma_init=sigma_init))
        self.input_site = Site(8, signed=False)
        self._wire()
        self.finalised = False
        self.bits: tuple[int, int] | None = None

    def _wire(self) -> None:
        prev = self.input_site
        for layer in self.layers:
            layer.in_site = prev
            prev = layer.sites["out"]

    @property
    def stochastic(self) -> bool:
        return self.method == "bbb" or self.drop_p > 0

    def configure_quant(self, bits_w: int, bits_a: int, momentum: float = 0.01) -> None:
        self.input_site.reset(bits_a, momentum)
        for layer in self.layers:
            layer.configure(bits_w, bits_a, momentum)
        self.finalised = False
        self.bits = (bits_w, bits_a)

    def sites(self):
        yield "input", self.input_site
        for i, layer in enumerate(self.layers):
            for name, site in layer.sites.items():
                yield f"{i}.{name}", site

    def parameters(self):
        for layer in self.layers:
            for name, p in layer.params.items():
                yield layer, name, p

    def forward(self, x, rng: SeededRng | None = None, mode: str = "float", *, observe: bool = False,
                keep: bool = False, real_multiplier: bool = False):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "integer":
            return dequantise(self.forward_int(x, rng, real_multiplier=real_multiplier), dtype=self.dtype)
        x = np.asarray(x, dtype=self.dtype)
        sim = mode == "simulated"
        if observe:
            self.input_site.record(x)
        if sim:
            x = self.input_site.fq(x)
        for layer in self.layers:
            x = layer.forward(x, rng, sim=sim, observe=observe, keep=keep)
        return x

    def forward_int(self, x, rng: SeededRng | None = None, *, real_multiplier: bool = False) -> IntTensor:
        if not self.finalised:
            raise StateError("integer mode requires a finalised model; run QAT first")
        q = quantise(x, self.input_site.params)
        for layer in self.layers:
            q = layer.forward_int(q, rng, real_multiplier=real_multiplier)
        return q

    def backward(self, dout) -> list[dict]:
        grads = []
        for layer in reversed(self.layers):
            g, dout = layer.backward(dout)
            grads.append(g)
        return grads[::-1]

    def finalise(self) -> None:
        for layer in self.layers:
            layer.finalise()
        self.finalised = True

    def copy(self) -> "Network":
        net = copy.deepcopy(self)
        return net


class Ensemble:
    """SGHMC posterior samples: independent pointwise networks, one per snapshot."""

    method = "sghmc"

    def __init__(self, members: list[Network]):
        if not members:
            raise ValueError("an ensemble needs at least one member")
        self.members = members
        self.task = members[0].task

    def __len__(self) -> int:
        return len(self.members)

    @property
    def finalised(self) -> bool:
        return all(m.finalised for m in self.members)

    @property
    def stochastic(self) -> bool:
        return False


@dataclass
class PredictiveSummary:
    mean: np.ndarray
    variance: np.ndarray
    samples: np.ndarray | None = None


def mcd_forward(model: Network, x, rng: SeededRng, mode: str = "float"):
    """One Monte Carlo dropout pass; masks come from ``rng``."""
    if model.method not in ("mcd", "pointwise"):
        raise ValueError("mcd_forward expects a dropout or pointwise network")
    return model.forward(x, rng, mode)


def bbb_sample_weights(model: Network, rng: SeededRng, mode: str = "float"):
    """One weight sample per layer.

    Float and simulated modes return real tensors; integer mode returns the
    :class:`IntTensor` built from quantised mu, softplus(rho) and eps.
    """
    if model.method != "bbb":
        raise ValueError("bbb_sample_weights expects a Bayes-by-backprop network")
    out = []
    for layer in model.layers:
        _, eps = layer.draw(rng, 1)
        if mode == "integer":
            if layer.integer is None:
                raise StateError("integer mode requires a finalised model")
            out.append(layer.integer_weights(eps)[0])
        else:
            out.append(layer.sample_weight(eps, mode == "simulated", False))
    return out


def sghmc_forward(ensemble: Ensemble, l: int, x, mode: str = "float"):
    """Forward pass through snapshot ``l`` (1-based)."""
    if not 1 <= l <= len(ensemble):
        raise IndexError(f"sample index {l} outside 1..{len(ensemble)}")
    return ensemble.members[l - 1].forward(x, None, mode)


def sample_outputs(model, x, L: int, rng: SeededRng | None, mode: str = "float") -> np.ndarray:
    """Stack of L forward passes, shape (L, N, K); pass ``l`` uses ``rng.child(l)``."""
    if L < 1:
        raise ValueError("need at least one sample")
    outs = []
    if isinstance(model, Ensemble):
        if L > len(model):
            raise ValueError(f"ensemble has {len(model)} members, asked for {L}")
        for l in range(1, L + 1):
            outs.append(sghmc_forward(model, l, x, mode))
    elif not model.stochastic:
        out = model.forward(x, None, mode)
        outs = [out] * L
    else:
        if rng is None:
            raise ValueError("stochastic models need a random source")
        for l in range(L):
            outs.append(model.forward(x, rng.child(l), mode))
    return np.stack(outs)


def summarise(samples: np.ndarray, task: str) -> PredictiveSummary:
    s = np.asarray(samples, dtype=np.float64)
    if task == "classification":
        s = softmax_rows(s)
    mean = s.mean(axis=0)
    var = ((s - mean) ** 2).mean(axis=0)
    return PredictiveSummary(mean, var, s)


def predictive(model, x, L: int = 20, rng: SeededRng | None = None, mode: str = "float") -> PredictiveSummary:
    """Monte Carlo predictive mean and variance over L passes."""
    return summarise(sample_outputs(model, x, L, rng, mode), model.task)
