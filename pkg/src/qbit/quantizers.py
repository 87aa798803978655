"""Fake-quantization operators: two-set elastic quantization and
squashed-weight quantization, with straight-through backward rules.

Both quantizers keep the arithmetic in float64 but restrict values to a
lattice of at most 2**bits levels.  Backward passes are installed through
``custom_grad`` so gradients reach the latent full-precision tensors and
the learnable range parameters instead of dying in the rounding step.

Backward contract of ``elastic_quantize`` (the pass-through convention):

  * grad wrt X is the upstream gradient masked to the active clip region,
    scaled by 1/alpha on the nonneg branch and by 1 on the symmetric
    branch (the gradient of the normalized clip expression, with rounding
    treated as identity);
  * grad wrt alpha and beta are the true gradients of the continuous
    rescaled expression alpha * Clip(...), again with rounding treated as
    identity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import (Tensor, ShapeError, add, custom_grad, exp, matmul, mean,
                     mul, stddev, sub, tanh, transpose)

VALID_BITS = (1, 2, 4, 8, 16)
QUANT_BITS = (1, 2, 4, 8)          # widths that produce an actual lattice
SCHEMES = ("none", "elastic", "squashed")
SCOPES = ("linear_only", "linear_attention")
RANGE_KINDS = ("nonneg", "symmetric")

ALPHA_FLOOR = 1e-4                 # clamp applied after optimizer steps


@dataclass(frozen=True)
class QuantSpec:
    """Quantization scheme plus the w{b}a{b} precision label."""

    scheme: str = "none"
    weight_bits: int = 16
    act_bits: int = 16
    scope: str = "linear_only"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        for bits in (self.weight_bits, self.act_bits):
            if bits not in VALID_BITS:
                raise ValueError(f"unsupported bit-width {bits}; choose from {VALID_BITS}")
        if self.scheme == "none" and (self.weight_bits != 16 or self.act_bits != 16):
            raise ValueError("scheme 'none' requires 16-bit weights and activations")
        if self.scheme == "squashed":
            # 8-bit activations throughout, except the full-precision
            # warm-up stage of a schedule where everything is bypassed.
            bypass = self.weight_bits == 16 and self.act_bits == 16
            if self.act_bits != 8 and not bypass:
                raise ValueError("squashed scheme fixes activations at 8 bits")
            if self.scope != "linear_only":
                raise ValueError("squashed scheme quantizes linear layers only")

    @property
    def label(self) -> str:
        if self.weight_bits == 16 and self.act_bits == 16:
            return "fp16"
        return f"w{self.weight_bits}a{self.act_bits}"

    def with_bits(self, weight_bits: int, act_bits: int) -> "QuantSpec":
        return replace(self, weight_bits=weight_bits, act_bits=act_bits)


class ElasticParams:
    """Learnable scale alpha > 0 and threshold beta for one quantized tensor.

    alpha and beta initialize lazily from the first tensor they see.  On
    the nonneg branch alpha = max(|X|) and beta = min(X), so the clipped
    (X - beta)/alpha spans [0, 1].  On the symmetric branch the clip acts
    on X - beta directly and alpha only rescales the output lattice, so
    the right starting scale depends on what the site quantizes:
    max(|X|) for tensors that fit inside the clip window (weights -- the
    lattice then spans their full range), mean(|X|) for unbounded
    activations (a max-based start would amplify every clipped value by
    max/mean, which low-bit students cannot recover from within a toy
    step budget).  All-zero tensors fall back to alpha = 1.
    """

    def __init__(self, range_kind: str = "symmetric", alpha: float = 1.0,
                 beta: float = 0.0, alpha_trainable: bool = True,
                 beta_trainable: bool = True, init_scale: str = "mean",
                 initialized: bool = False):
        if range_kind not in RANGE_KINDS:
            raise ValueError(f"unknown range kind {range_kind!r}")
        if init_scale not in ("mean", "max"):
            raise ValueError(f"unknown init scale {init_scale!r}")
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        self.range_kind = range_kind
        self.init_scale = init_scale
        self.alpha = Tensor(alpha, requires_grad=alpha_trainable)
        self.beta = Tensor(beta, requires_grad=beta_trainable)
        self.initialized = initialized

    @classmethod
    def fixed_window(cls, range_kind: str, alpha: float = 1.0,
                     beta: float = 0.0) -> "ElasticParams":
        """Non-learnable quantizer for tensors whose range is known a
        priori (e.g. softmax outputs live in [0, 1])."""
        return cls(range_kind, alpha=alpha, beta=beta, alpha_trainable=False,
                   beta_trainable=False, initialized=True)

    def initialize_from(self, values: np.ndarray) -> None:
        if self.range_kind == "nonneg":
            scale = float(np.abs(values).max()) if values.size else 0.0
            if self.beta.requires_grad:
                self.beta.assign_(float(values.min()) if values.size else 0.0)
        elif self.init_scale == "max":
            scale = float(np.abs(values).max()) if values.size else 0.0
        else:
            scale = float(np.abs(values).mean()) if values.size else 0.0
        self.alpha.assign_(scale if scale > 0 else 1.0)
        self.initialized = True

    def named_tensors(self, prefix: str):
        yield f"{prefix}.alpha", self.alpha
        yield f"{prefix}.beta", self.beta


class SquashedParams:
    """Per-output-channel gain vector plus the regularizer targets."""

    def __init__(self, out_dim: int, lambda_q: float = 1e-3, sigma_t: float = 0.75):
        if lambda_q < 0:
            raise ValueError("lambda_q must be nonnegative")
        if sigma_t <= 0:
            raise ValueError("sigma_t must be positive")
        self.gain = Tensor(np.zeros(out_dim), requires_grad=True)
        self.lambda_q = lambda_q
        self.sigma_t = sigma_t

    def named_tensors(self, prefix: str):
        yield f"{prefix}.gain", self.gain


def level_set(bits: int, range_kind: str) -> np.ndarray:
    """The 2**bits uniformly spaced lattice values, endpoints included:
    {k/(2^b-1)} on [0, 1] for nonneg, {-1 + 2k/(2^b-1)} on [-1, 1] for
    symmetric."""
    if bits not in QUANT_BITS:
        raise ValueError(f"unsupported bit-width {bits}; choose from {QUANT_BITS}")
    if range_kind not in RANGE_KINDS:
        raise ValueError(f"unknown range kind {range_kind!r}")
    n = (1 << bits) - 1
    k = np.arange(n + 1, dtype=np.float64)
    if range_kind == "nonneg":
        return k / n
    return -1.0 + 2.0 * k / n


def _round_to_levels(values: np.ndarray, bits: int, range_kind: str) -> np.ndarray:
    """Nearest lattice level, ties toward the larger level."""
    levels = level_set(bits, range_kind)
    lo, step = levels[0], levels[1] - levels[0]
    idx = np.floor((values - lo) / step + 0.5).astype(np.int64)
    np.clip(idx, 0, len(levels) - 1, out=idx)
    return levels[idx]


def elastic_quantize(x: Tensor, params: ElasticParams, bits: int) -> Tensor:
    """Two-set elastic fake quantization.

    nonneg branch:    X_Q = alpha * round(Clip((X - beta)/alpha, 0, 1))
    symmetric branch: X_Q = alpha * round(Clip(X - beta, -1, 1))

    16-bit widths bypass exactly (the input tensor is returned).
    """
    if bits >= 16:
        return x
    if bits not in QUANT_BITS:
        raise ValueError(f"unsupported bit-width {bits}")
    if not params.initialized:
        params.initialize_from(x.data)
    alpha_val = params.alpha.item()
    if alpha_val <= 0:
        raise ValueError(f"alpha must be positive, got {alpha_val}")
    nonneg = params.range_kind == "nonneg"
    lo, hi = (0.0, 1.0) if nonneg else (-1.0, 1.0)
    kind = params.range_kind

    def forward(xv, alpha, beta):
        u = (xv - beta) / alpha if nonneg else xv - beta
        return alpha * _round_to_levels(np.clip(u, lo, hi), bits, kind)

    def backward(g, xv, alpha, beta):
        u = (xv - beta) / alpha if nonneg else xv - beta
        active = (u >= lo) & (u <= hi)
        if nonneg:
            gx = g * active / alpha
            galpha = np.asarray((g * (u > hi)).sum())
            gbeta = np.asarray(-(g * active).sum())
        else:
            gx = g * active
            galpha = np.asarray((g * np.clip(u, lo, hi)).sum())
            gbeta = np.asarray(-alpha * (g * active).sum())
        return gx, galpha, gbeta

    return custom_grad(forward, backward, (x, params.alpha, params.beta),
                       name="elastic_quantize")


def elastic_linear(x: Tensor, weight: Tensor, bias: Tensor, spec: QuantSpec,
                   weight_params: ElasticParams, act_params: ElasticParams) -> Tensor:
    """Linear layer y = Q(x) @ Q(W)^T + b with elastic fake quantization on
    both operands.  ``weight`` is (out, in); bias stays unquantized.
    At 16-bit widths this is exactly the float linear layer."""
    if weight_params.range_kind != "symmetric":
        raise ValueError("weight quantizers use the symmetric range")
    w_q = elastic_quantize(weight, weight_params, spec.weight_bits)
    x_q = elastic_quantize(x, act_params, spec.act_bits)
    return add(matmul(x_q, transpose(w_q)), bias)


def _ste_round_symmetric(values: Tensor, bits: int) -> Tensor:
    """Round to the symmetric lattice; backward is the identity (the input
    already lives in (-1, 1), so no clip mask is needed)."""

    def forward(v):
        return _round_to_levels(v, bits, "symmetric")

    def backward(g, v):
        return g

    return custom_grad(forward, backward, (values,), name="ste_round")


def squashed_linear(x: Tensor, weight: Tensor, bias: Tensor, gain: Tensor,
                    bits: int) -> Tensor:
    """Squashed-weight linear layer: y = (x @ Q(tanh(W))^T) * e^gain + b.

    tanh maps the latent weights into (-1, 1); Q rounds onto the symmetric
    lattice with alpha=1, beta=0 via the straight-through estimator; e^gain
    rescales each output channel.  Gradients through tanh and exp are exact.
    """
    if bits not in QUANT_BITS:
        raise ValueError(f"unsupported bit-width {bits}")
    if gain.ndim != 1 or gain.shape[0] != weight.shape[0]:
        raise ShapeError(
            f"gain has shape {gain.shape}, expected ({weight.shape[0]},)")
    w_q = _ste_round_symmetric(tanh(weight), bits)
    return add(mul(matmul(x, transpose(w_q)), exp(gain)), bias)


def squash_reg_loss(weight: Tensor, lambda_q: float, sigma_t: float) -> Tensor:
    """Regularizer lambda_q * ((stddev(W) - sigma_t)^2 + mean(W)^2) pushing
    the latent weights toward zero mean and the target spread."""
    if weight.size == 0:
        raise ShapeError("regularizer needs a non-empty weight tensor")
    if lambda_q < 0:
        raise ValueError("lambda_q must be nonnegative")
    if sigma_t <= 0:
        raise ValueError("sigma_t must be positive")
    spread = sub(stddev(weight), sigma_t)
    centered = mean(weight)
    return mul(add(mul(spread, spread), mul(centered, centered)), lambda_q)
