"""Uniform affine quantisation: ``f = S * (q - Z)``.

Activations use unsigned grids, weights signed grids, one (S, Z) per tensor.
Rounding is half-away-from-zero everywhere, including requantisation.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from qbnn.tensor import FLOAT

log = logging.getLogger(__name__)

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1

# "debug" raises on accumulator overflow, "release" saturates to int32.
_PROFILE = os.environ.get("QBNN_PROFILE", "release")


def set_profile(name: str) -> None:
    global _PROFILE
    if name not in ("debug", "release"):
        raise ValueError(f"unknown profile {name!r}")
    _PROFILE = name


def get_profile() -> str:
    return _PROFILE


class AccumulatorOverflow(OverflowError):
    pass


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _rounding_shift(x: np.ndarray, shift: int) -> np.ndarray:
    """Integer division by 2**shift, rounded half away from zero."""
    x = np.asarray(x, dtype=np.int64)
    if shift <= 0:
        return x << (-shift)
    if shift >= 63:
        return np.zeros_like(x)
    mag = (np.abs(x) + (np.int64(1) << np.int64(shift - 1))) >> np.int64(shift)
    return np.where(x < 0, -mag, mag)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int
    signed: bool = False

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bit-width must be in [2, 8], got {self.bits}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not self.qmin <= self.zero_point <= self.qmax:
            raise ValueError(f"zero-point {self.zero_point} outside [{self.qmin}, {self.qmax}]")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1)) if self.signed else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.signed else 2**self.bits - 1

    @property
    def lo(self) -> float:
        """Smallest representable real value."""
        return self.scale * (self.qmin - self.zero_point)

    @property
    def hi(self) -> float:
        return self.scale * (self.qmax - self.zero_point)

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "zero_point": int(self.zero_point),
                "bits": int(self.bits), "signed": bool(self.signed)}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(float(d["scale"]), int(d["zero_point"]), int(d["bits"]), bool(d["signed"]))


@dataclass
class RangeObserver:
    """Running clamping range (a, b) smoothed by an exponential moving average."""

    momentum: float = 0.01
    a: float = 0.0
    b: float = 0.0
    initialised: bool = False

    def __post_init__(self):
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in (0, 1], got {self.momentum}")

    def update(self, t) -> "RangeObserver":
        t = np.asarray(t)
        if t.size == 0:
            raise ValueError("cannot observe an empty tensor")
        lo = float(t.min())
        hi = float(t.max())
        if not self.initialised:
            self.a, self.b = lo, hi
            self.initialised = True
        else:
            m = self.momentum
            self.a = (1.0 - m) * self.a + m * lo
            self.b = (1.0 - m) * self.b + m * hi
        return self

    def to_dict(self) -> dict:
        return {"momentum": self.momentum, "a": self.a, "b": self.b, "initialised": self.initialised}


def observe(obs: RangeObserver, t) -> RangeObserver:
    return obs.update(t)


def params_from_range(a: float, b: float, bits: int, signed: bool = False) -> QuantParams:
    """Derive (S, Z) for the range [a, b], widened to contain zero."""
    a = min(float(a), 0.0)
    b = max(float(b), 0.0)
    qmin = -(2 ** (bits - 1)) if signed else 0
    qmax = qmin + 2**bits - 1
    scale = (b - a) / (2**bits - 1)
    if scale == 0.0:
        # all-zero range, or one so narrow the scale underflows
        z = int(np.clip(round_half_away(-a), qmin, qmax))
        return QuantParams(1.0, z, bits, signed)
    z = qmin + int(round_half_away(-a / scale))
    z = int(np.clip(z, qmin, qmax))
    return QuantParams(scale, z, bits, signed)


def derive_params(obs: RangeObserver, bits: int, signed: bool = False) -> QuantParams:
    if not obs.initialised:
        raise RuntimeError("observer has not seen any data")
    return params_from_range(obs.a, obs.b, bits, signed)


@dataclass(frozen=True)
class IntTensor:
    data: np.ndarray
    params: QuantParams

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.size and (d.min() < self.params.qmin or d.max() > self.params.qmax):
            raise ValueError("integer payload outside the representable range")
        object.__setattr__(self, "data", d.astype(np.int32, copy=False))

    @property
    def shape(self):
        return self.data.shape


def quantise(t, p: QuantParams) -> IntTensor:
    f = np.asarray(t, dtype=np.float64)
    q = round_half_away(f / p.scale) + p.zero_point
    q = np.clip(q, p.qmin, p.qmax)
    return IntTensor(q.astype(np.int32), p)


def dequantise(q: IntTensor, dtype=FLOAT) -> np.ndarray:
    p = q.params
    return (p.scale * (q.data.astype(np.float64) - p.zero_point)).astype(dtype)


def fake_quant(t, p: QuantParams) -> np.ndarray:
    """Round onto the grid of ``p`` and back, keeping the input dtype."""
    t = np.asarray(t)
    dtype = t.dtype if np.issubdtype(t.dtype, np.floating) else FLOAT
    return dequantise(quantise(t, p), dtype=dtype)


def ste_mask(t, p: QuantParams) -> np.ndarray:
    """Straight-through Jacobian diagonal: 1 inside the clamp range, 0 outside."""
    t = np.asarray(t, dtype=np.float64)
    return (t >= p.lo) & (t <= p.hi)


def fake_quant_grad(t, p: QuantParams, grad) -> np.ndarray:
    grad = np.asarray(grad)
    return np.where(ste_mask(t, p), grad, grad.dtype.type(0))


@dataclass(frozen=True)
class FixedPointMultiplier:
    """Real multiplier ``mantissa * 2**-(31 + right_shift)``.

    ``mantissa`` is in [2**30, 2**31).  A negative ``right_shift`` encodes a
    multiplier of 1 or more.
    """

    mantissa: int
    right_shift: int

    @property
    def value(self) -> float:
        return math.ldexp(self.mantissa, -31 - self.right_shift)

    def apply(self, acc) -> np.ndarray:
        prod = np.asarray(acc, dtype=np.int64) * np.int64(self.mantissa)
        return _rounding_shift(prod, 31 + self.right_shift)

    def apply_keep(self, acc, frac_bits: int) -> np.ndarray:
        """Like :meth:`apply` but keeps ``frac_bits`` extra fractional bits."""
        prod = np.asarray(acc, dtype=np.int64) * np.int64(self.mantissa)
        return _rounding_shift(prod, 31 + self.right_shift - frac_bits)


def fixed_point_from_real(x: float) -> FixedPointMultiplier:
    x = float(x)
    if not (x > 0 and math.isfinite(x)):
        raise ValueError(f"multiplier must be positive and finite, got {x}")
    m, e = math.frexp(x)  # x = m * 2**e, m in [0.5, 1)
    mantissa = int(round_half_away(m * 2**31))
    if mantissa == 2**31:
        mantissa //= 2
        e += 1
    return FixedPointMultiplier(mantissa, -e)


def requantise(acc, mult, out: QuantParams, relu: bool = False) -> np.ndarray:
    """Map integer accumulators to the output grid.

    ``mult`` is either a :class:`FixedPointMultiplier` (integer-only path) or a
    plain float (real-multiplier debug path).
    """
    if isinstance(mult, FixedPointMultiplier):
        y = mult.apply(acc)
    else:
        y = round_half_away(np.asarray(acc, dtype=np.float64) * float(mult)).astype(np.int64)
    y = y + out.zero_point
    lo = out.zero_point if relu else out.qmin
    return np.clip(y, max(lo, out.qmin), out.qmax).astype(np.int32)


def requantise_sum(terms, out: QuantParams, frac_bits: int = 16) -> np.ndarray:
    """Requantise ``sum_k mult_k * x_k`` with a single final rounding.

    ``terms`` is a sequence of (integer array, FixedPointMultiplier) pairs.
    """
    total = None
    for x, mult in terms:
        part = mult.apply_keep(x, frac_bits)
        total = part if total is None else total + part
    y = _rounding_shift(total, frac_bits) + out.zero_point
    return np.clip(y, out.qmin, out.qmax).astype(np.int32)


@dataclass(frozen=True)
class OfflineConstants:
    col_sums_w: np.ndarray
    const_term: int
    fused_bias: np.ndarray
    depth: int = field(default=0)


def _check_int32(x: np.ndarray, what: str) -> np.ndarray:
    if x.size and (x.min() < INT32_MIN or x.max() > INT32_MAX):
        if _PROFILE == "debug":
            raise AccumulatorOverflow(f"{what} exceeds the 32-bit accumulator")
        log.warning("%s exceeds the 32-bit accumulator; saturating", what)
        return np.clip(x, INT32_MIN, INT32_MAX)
    return x


def precompute_offline(qw: IntTensor, in_params: QuantParams, w_params: QuantParams | None = None,
                       bias=None) -> OfflineConstants:
    """Input-independent terms of the quantised matmul, bias in accumulator scale."""
    w_params = w_params or qw.params
    depth, cols = qw.shape
    col_sums = qw.data.astype(np.int64).sum(axis=0)
    const = depth * w_params.zero_point * in_params.zero_point
    if bias is None:
        fused = np.zeros(cols, dtype=np.int64)
    else:
        bias = np.asarray(bias, dtype=np.float64).reshape(-1)
        if bias.shape[0] != cols:
            raise ValueError(f"bias has {bias.shape[0]} entries for {cols} output columns")
        fused = round_half_away(bias / (w_params.scale * in_params.scale))
        if fused.size and np.abs(fused).max() > INT32_MAX:
            raise ValueError("bias does not fit the 32-bit accumulator scale")
        fused = fused.astype(np.int64)
    return OfflineConstants(col_sums, int(const), fused, depth)


def accumulate(qi: IntTensor, qw: IntTensor, off: OfflineConstants) -> np.ndarray:
    """Integer accumulator of the quantised matmul, before requantisation."""
    xi = qi.data.astype(np.int64)
    xw = qw.data.astype(np.int64)
    if xi.ndim != 2 or xw.ndim != 2 or xi.shape[1] != xw.shape[0]:
        raise ValueError(f"cannot multiply {xi.shape} by {xw.shape}")
    zi = qi.params.zero_point
    zw = qw.params.zero_point
    prod = _check_int32(xi @ xw, "q_i q_w product")
    acc = (off.const_term
           - zi * off.col_sums_w[None, :]
           - zw * xi.sum(axis=1, keepdims=True)
           + prod
           + off.fused_bias[None, :])
    return _check_int32(acc, "accumulator")


def quantised_matmul(qi: IntTensor, qw: IntTensor, off: OfflineConstants, mult,
                     out_params: QuantParams, relu: bool = False) -> IntTensor:
    """Integer-only linear layer.

    ``q_o = Z_o + mult * (M Z_w Z_i - Z_i sum(q_w) - Z_w sum(q_i) + q_i q_w + bias)``
    with column sums of ``q_w`` and row sums of ``q_i`` broadcast over the output.
    ``relu=True`` fuses the activation by clamping at ``Z_o``.
    """
    acc = accumulate(qi, qw, off)
    return IntTensor(requantise(acc, mult, out_params, relu=relu), out_params)


def layer_multiplier(in_params: QuantParams, w_params: QuantParams, out_params: QuantParams,
                     real: bool = False):
    x = in_params.scale * w_params.scale / out_params.scale
    return x if real else fixed_point_from_real(x)
