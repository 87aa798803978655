"""Toy pre-norm transformer encoder with quantization injection points.

Three configurations: unquantized, linear-only (weights plus the input
activation of every linear projection), and linear+attention (additionally
the Q.K^T and probs.V matmul operands).  Attention probabilities use the
nonneg quantizer branch because softmax outputs are positive; every other
site is symmetric.  Biases, layer norms and the classification head stay
in float.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .quantizers import ElasticParams, QuantSpec, SquashedParams, elastic_linear, \
    elastic_quantize, squashed_linear
from .tensor import Tensor, add, layer_norm, log_softmax, matmul, mul, relu, \
    reshape, softmax, transpose, tsum


@dataclass(frozen=True)
class TransformerConfig:
    num_layers: int = 4
    num_heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 256
    seq_len: int = 64
    num_classes: int = 16
    seed: int = 0
    positional: bool = True

    def __post_init__(self):
        dims = (self.num_layers, self.num_heads, self.model_dim,
                self.ffn_dim, self.seq_len, self.num_classes)
        if any(v < 1 for v in dims):
            raise ValueError("all dimensions must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class LayerTrace:
    """Per-layer intermediate outputs (T, d) and attention weights (H, T, T),
    the attention weights taken straight from softmax (pre-quantization)."""
    outputs: list[Tensor] = field(default_factory=list)
    attn: list[Tensor] = field(default_factory=list)


# Activation sites when only linear projections are quantized, and the
# extra sites when the attention matmul operands are quantized too.
LINEAR_ACT_SITES = ("attn_in", "attn_proj", "ffn_in", "ffn_mid")
ATTENTION_ACT_SITES = ("q", "k", "v", "probs")


class ModelParams:
    """Named parameter store: model tensors plus per-site quantizer state."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.weight_quant: dict[str, ElasticParams | SquashedParams] = {}
        self.act_quant: dict[str, ElasticParams] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named_quant_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for site, params in {**self.weight_quant, **self.act_quant}.items():
            yield from params.named_tensors(site)

    def all_named(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.tensors.items()
        yield from self.named_quant_tensors()

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        for name, tensor in self.all_named():
            if tensor.requires_grad:
                yield name, tensor

    def zero_grad(self) -> None:
        for _, tensor in self.all_named():
            tensor.grad = None

    def quantized_weight_names(self) -> set[str]:
        return set(self.weight_quant)

    def copy(self) -> "ModelParams":
        dup = ModelParams.__new__(ModelParams)
        dup.tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                       for k, v in self.tensors.items()}
        dup.weight_quant = {}
        for site, params in self.weight_quant.items():
            if isinstance(params, ElasticParams):
                dup.weight_quant[site] = ElasticParams(
                    params.range_kind, params.alpha.item(), params.beta.item(),
                    alpha_trainable=params.alpha.requires_grad,
                    beta_trainable=params.beta.requires_grad,
                    init_scale=params.init_scale, initialized=params.initialized)
            else:
                clone = SquashedParams(params.gain.shape[0], params.lambda_q,
                                       params.sigma_t)
                clone.gain.assign_(params.gain.data.copy())
                dup.weight_quant[site] = clone
        dup.act_quant = {
            site: ElasticParams(p.range_kind, p.alpha.item(), p.beta.item(),
                                alpha_trainable=p.alpha.requires_grad,
                                beta_trainable=p.beta.requires_grad,
                                init_scale=p.init_scale, initialized=p.initialized)
            for site, p in self.act_quant.items()}
        return dup

    def frozen_copy(self) -> "ModelParams":
        """Copy with gradients disabled everywhere; forward passes through it
        build no graph."""
        dup = self.copy()
        for _, tensor in dup.all_named():
            tensor.requires_grad = False
        return dup

    def load_tensors_from(self, other: "ModelParams") -> None:
        """Copy model tensor values (not quantizer state) from ``other``."""
        if set(self.tensors) != set(other.tensors):
            raise ValueError("parameter name sets differ")
        for name, tensor in self.tensors.items():
            tensor.assign_(other.tensors[name].data.copy())


def init_params(cfg: TransformerConfig, spec: QuantSpec,
                seed: Optional[int] = None,
                lambda_q: float = 1e-3, sigma_t: float = 0.75) -> ModelParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d, dff, c = cfg.model_dim, cfg.ffn_dim, cfg.num_classes
    params = ModelParams()

    def weight(name, out_dim, in_dim):
        w = rng.normal(0.0, in_dim ** -0.5, size=(out_dim, in_dim))
        params.tensors[name] = Tensor(w, requires_grad=True)
        if spec.scheme == "elastic":
            # weights sit inside the clip window; span their full range
            params.weight_quant[name] = ElasticParams("symmetric", init_scale="max")
        elif spec.scheme == "squashed":
            params.weight_quant[name] = SquashedParams(out_dim, lambda_q, sigma_t)

    def bias(name, dim):
        params.tensors[name] = Tensor(np.zeros(dim), requires_grad=True)

    def norm(name, dim):
        params.tensors[f"{name}.gamma"] = Tensor(np.ones(dim), requires_grad=True)
        params.tensors[f"{name}.beta"] = Tensor(np.zeros(dim), requires_grad=True)

    def act_site(name, range_kind):
        if spec.scheme == "elastic":
            params.act_quant[name] = ElasticParams(range_kind)
        elif spec.scheme == "squashed":
            # Fixed-range 8-bit symmetric quantizer: alpha learns, beta stays 0.
            params.act_quant[name] = ElasticParams("symmetric", beta_trainable=False)

    for i in range(cfg.num_layers):
        base = f"layers.{i}"
        norm(f"{base}.ln1", d)
        for proj in ("wq", "wk", "wv", "wo"):
            weight(f"{base}.attn.{proj}", d, d)
            bias(f"{base}.attn.b{proj[1]}", d)
        norm(f"{base}.ln2", d)
        weight(f"{base}.ffn.w1", dff, d)
        bias(f"{base}.ffn.b1", dff)
        weight(f"{base}.ffn.w2", d, dff)
        bias(f"{base}.ffn.b2", d)
        for site in LINEAR_ACT_SITES:
            act_site(f"{base}.act.{site}", "symmetric")
        if spec.scheme == "elastic" and spec.scope == "linear_attention":
            for site in ("q", "k", "v"):
                act_site(f"{base}.act.{site}", "symmetric")
            # Softmax outputs live in [0, 1].  At >= 4 bits the fixed
            # lattice already resolves typical attention mass (~1/T), and
            # a learnable window only drifts and collapses; at 1-2 bits
            # the spacing is coarser than the prob mass itself, so the
            # scale must stay learnable to pull the levels down to it.
            if spec.act_bits >= 4:
                params.act_quant[f"{base}.act.probs"] = \
                    ElasticParams.fixed_window("nonneg")
            else:
                act_site(f"{base}.act.probs", "nonneg")

    norm("final_ln", d)
    params.tensors["head.w"] = Tensor(
        rng.normal(0.0, d ** -0.5, size=(c, d)), requires_grad=True)
    bias("head.b", c)
    return params


def positional_encoding(seq_len: int, dim: int) -> np.ndarray:
    pos = np.arange(seq_len)[:, None]
    idx = np.arange(dim)[None, :]
    angles = pos / np.power(10000.0, (2 * (idx // 2)) / dim)
    enc = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return enc


def _linear(params: ModelParams, spec: QuantSpec, x: Tensor,
            weight_name: str, bias_name: str, act_site: str) -> Tensor:
    w, b = params[weight_name], params[bias_name]
    bypass = spec.scheme == "none" or (spec.weight_bits >= 16 and spec.act_bits >= 16)
    if bypass:
        return add(matmul(x, transpose(w)), b)
    if spec.scheme == "elastic":
        return elastic_linear(x, w, b, spec,
                              params.weight_quant[weight_name],
                              params.act_quant[act_site])
    x_q = elastic_quantize(x, params.act_quant[act_site], spec.act_bits)
    gain = params.weight_quant[weight_name].gain
    return squashed_linear(x_q, w, b, gain, spec.weight_bits)


def forward(x: Tensor, cfg: TransformerConfig, spec: QuantSpec,
            params: ModelParams) -> tuple[Tensor, LayerTrace]:
    """Encoder forward pass: (T, d) input -> (T, C) logits plus the layer
    trace used for distillation."""
    if x.shape != (cfg.seq_len, cfg.model_dim):
        raise ValueError(f"input shape {x.shape} != ({cfg.seq_len}, {cfg.model_dim})")
    h, dh, t = cfg.num_heads, cfg.head_dim, cfg.seq_len
    quantize_attn = (spec.scheme == "elastic"
                     and spec.scope == "linear_attention"
                     and spec.act_bits < 16)
    trace = LayerTrace()

    if cfg.positional:
        x = add(x, Tensor(positional_encoding(t, cfg.model_dim)))

    for i in range(cfg.num_layers):
        base = f"layers.{i}"
        pre = layer_norm(x, params[f"{base}.ln1.gamma"], params[f"{base}.ln1.beta"])
        q = _linear(params, spec, pre, f"{base}.attn.wq", f"{base}.attn.bq",
                    f"{base}.act.attn_in")
        k = _linear(params, spec, pre, f"{base}.attn.wk", f"{base}.attn.bk",
                    f"{base}.act.attn_in")
        v = _linear(params, spec, pre, f"{base}.attn.wv", f"{base}.attn.bv",
                    f"{base}.act.attn_in")

        def split_heads(tensor):
            return transpose(reshape(tensor, (t, h, dh)), (1, 0, 2))

        q3, k3, v3 = split_heads(q), split_heads(k), split_heads(v)
        if quantize_attn:
            q3 = elastic_quantize(q3, params.act_quant[f"{base}.act.q"], spec.act_bits)
            k3 = elastic_quantize(k3, params.act_quant[f"{base}.act.k"], spec.act_bits)
        scores = mul(matmul(q3, transpose(k3, (0, 2, 1))), dh ** -0.5)
        probs = softmax(scores, axis=-1)
        trace.attn.append(probs)

        pv, v_op = probs, v3
        if quantize_attn:
            pv = elastic_quantize(probs, params.act_quant[f"{base}.act.probs"],
                                  spec.act_bits)
            v_op = elastic_quantize(v3, params.act_quant[f"{base}.act.v"],
                                    spec.act_bits)
        context = reshape(transpose(matmul(pv, v_op), (1, 0, 2)), (t, cfg.model_dim))
        attn_out = _linear(params, spec, context, f"{base}.attn.wo",
                           f"{base}.attn.bo", f"{base}.act.attn_proj")
        x = add(x, attn_out)

        pre2 = layer_norm(x, params[f"{base}.ln2.gamma"], params[f"{base}.ln2.beta"])
        hidden = relu(_linear(params, spec, pre2, f"{base}.ffn.w1",
                              f"{base}.ffn.b1", f"{base}.act.ffn_in"))
        ffn_out = _linear(params, spec, hidden, f"{base}.ffn.w2",
                          f"{base}.ffn.b2", f"{base}.act.ffn_mid")
        x = add(x, ffn_out)
        trace.outputs.append(x)

    final = layer_norm(x, params["final_ln.gamma"], params["final_ln.beta"])
    logits = add(matmul(final, transpose(params["head.w"])), params["head.b"])
    return logits, trace


def masked_prediction_loss(logits: Tensor, targets: np.ndarray,
                           mask: np.ndarray) -> Tensor:
    """Mean cross-entropy over the masked positions only."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    t, c = logits.shape
    if targets.shape != (t,) or mask.shape != (t,):
        raise ValueError(f"targets/mask must have shape ({t},)")
    if not mask.any():
        raise ValueError("mask selects no positions")
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError("target ids out of range")
    picked = np.zeros((t, c))
    rows = np.nonzero(mask)[0]
    picked[rows, targets[rows]] = 1.0
    log_probs = log_softmax(logits, axis=-1)
    return mul(tsum(mul(log_probs, Tensor(picked))), -1.0 / len(rows))


def parameter_count(cfg: TransformerConfig) -> int:
    """Closed-form model parameter count (quantizer state excluded):
    L * (4d^2 + 2*d*dff + 4 biases + dff + 8d of norms...) + final norm + head."""
    d, dff, c, layers = cfg.model_dim, cfg.ffn_dim, cfg.num_classes, cfg.num_layers
    per_layer = 4 * d * d + 2 * d * dff   # qkvo + ffn weights
    per_layer += 4 * d + dff + d          # projection and ffn biases
    per_layer += 4 * d                    # two layer norms
    return layers * per_layer + 2 * d + c * d + c
