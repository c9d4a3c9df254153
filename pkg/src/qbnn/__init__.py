"""Quantised Bayesian neural networks with integer-only inference."""

from qbnn.tensor import SeededRng, matmul, relu, softmax_rows
from qbnn.quant import (
    FixedPointMultiplier,
    IntTensor,
    OfflineConstants,
    QuantParams,
    RangeObserver,
    dequantise,
    derive_params,
    fake_quant,
    fixed_point_from_real,
    precompute_offline,
    quantise,
    quantised_matmul,
)

__version__ = "0.1.0"
