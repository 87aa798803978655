"""Hardware-agnostic cost model: Storage, FLOPs, QuantOPs, and a relative
runtime estimate.

Counting conventions:
  * a float multiply or add is 1 FLOP; softmax costs 4 FLOPs per element
    (max-subtract, exp, sum share, divide); quantizer overhead (normalize,
    clip, round) costs 3 FLOPs per quantized element;
  * an operation whose operands are BOTH quantized accrues QuantOPs
    instead: b1*b2 bits per multiply, max(b1, b2) bits per add, and a
    matmul of N multiply-accumulates therefore costs
    N * (b1*b2 + max(b1, b2)) bits (k accumulator adds per output, not
    k-1);
  * storage charges quantized weight matrices their weight bit-width and
    every other parameter (biases, norms, head, quantizer state) 16 bits,
    rounded up to whole bytes; megabytes are decimal (1e6 bytes).

FLOPs and QuantOPs are fundamentally different currencies; runtimes are
made comparable through an anchor pairing: a chosen quantized model is
assumed to run exactly as fast as the float baseline, which fixes a
conversion rate R = quantops / (baseline_flops - anchor_flops).  Runtime
of any model is then (flops + quantops/R) / baseline_flops.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

from .model import ModelParams, TransformerConfig, init_params
from .quantizers import QuantSpec

MB = 1e6

# Storage model fitted once against the published profile table (joint
# least squares, shared quantized-parameter count, one fp16 residual per
# quantization family) and frozen here.
FITTED_QUANT_PARAMS = 84_931_014.0
FITTED_FP16_RESIDUAL_MB = {
    "sqwq": 14.7211,    # per-channel gain vectors
    "bit_l": 14.5561,   # alpha/beta on linear sites only
    "bit_la": 14.6111,  # alpha/beta on attention sites as well
}

BASELINE_ROW = "hubert_fastconv_fp16"
ANCHOR_ROW = "sqwq_w8"

RUNTIME_TOL = 0.01
STORAGE_TOL = 0.05

FIXTURE_HEADER = ["name", "flops_g", "quantops_gbits", "storage_mb", "runtime_x"]


@dataclass
class CostReport:
    storage_bytes: int
    flops: int
    quantops_bits: int
    runtime_rel: Optional[float] = None

    def as_dict(self) -> dict:
        return {"storage_bytes": self.storage_bytes, "flops": self.flops,
                "quantops_bits": self.quantops_bits, "runtime_rel": self.runtime_rel}


@dataclass(frozen=True)
class Anchor:
    """Equal-speed pairing between a FLOP budget and a QuantOP budget."""
    flops_equiv: float
    quantops: float

    @property
    def rate(self) -> float:
        return self.quantops / self.flops_equiv


def calibrate_anchor(baseline_flops: float, anchor_flops: float,
                     anchor_quantops: float) -> Anchor:
    flops_equiv = baseline_flops - anchor_flops
    if flops_equiv <= 0:
        raise ValueError(
            f"anchor flops ({anchor_flops}) must be below the baseline ({baseline_flops})")
    if anchor_quantops <= 0:
        raise ValueError("anchor quantops must be positive")
    return Anchor(flops_equiv=flops_equiv, quantops=anchor_quantops)


def estimate_runtime(flops: float, quantops: float, baseline_flops: float,
                     anchor: Anchor) -> float:
    if baseline_flops <= 0:
        raise ValueError("baseline flops must be positive")
    return (flops + quantops / anchor.rate) / baseline_flops


def matmul_quantops(m: int, k: int, n: int, bits_a: int, bits_b: int) -> int:
    """Closed form for a fully quantized matmul: one multiply of bits_a*bits_b
    and one accumulator add of max(bits_a, bits_b) per MAC."""
    return m * k * n * (bits_a * bits_b + max(bits_a, bits_b))


# -- forward graph ------------------------------------------------------------

@dataclass(frozen=True)
class GraphOp:
    """One costed node of the forward graph.  ``matmul`` nodes carry their
    dimensions; ``elementwise`` nodes carry raw mul/add/other counts.
    bits_a/bits_b of None mean a float operand."""
    label: str
    kind: str                      # 'matmul' | 'elementwise'
    m: int = 0
    k: int = 0
    n: int = 0
    muls: int = 0
    adds: int = 0
    others: int = 0
    bits_a: Optional[int] = None
    bits_b: Optional[int] = None


def op_cost(op: GraphOp) -> tuple[int, int]:
    """(flops, quantops_bits) of a single node."""
    quantized = op.bits_a is not None and op.bits_b is not None
    if op.kind == "matmul":
        macs = op.m * op.k * op.n
        if quantized:
            return 0, matmul_quantops(op.m, op.k, op.n, op.bits_a, op.bits_b)
        return 2 * macs, 0
    if quantized:
        return op.others, op.muls * op.bits_a * op.bits_b \
            + op.adds * max(op.bits_a, op.bits_b)
    return op.muls + op.adds + op.others, 0


def graph_cost(ops: list[GraphOp]) -> tuple[int, int]:
    flops = quantops = 0
    for op in ops:
        f, q = op_cost(op)
        flops += f
        quantops += q
    return flops, quantops


def build_forward_graph(cfg: TransformerConfig, spec: QuantSpec,
                        seq_len: Optional[int] = None) -> list[GraphOp]:
    """Op-by-op census of one encoder forward pass under ``spec``."""
    t = cfg.seq_len if seq_len is None else int(seq_len)
    if t < 1:
        raise ValueError("sequence length must be >= 1")
    d, dff, c = cfg.model_dim, cfg.ffn_dim, cfg.num_classes
    h, dh = cfg.num_heads, cfg.head_dim

    act_q = spec.scheme != "none" and spec.act_bits < 16
    w_q = spec.scheme != "none" and spec.weight_bits < 16
    lin_mm_bits = (spec.act_bits, spec.weight_bits) if act_q and w_q else (None, None)
    attn_quant = spec.scheme == "elastic" and spec.scope == "linear_attention" and act_q
    attn_mm_bits = (spec.act_bits, spec.act_bits) if attn_quant else (None, None)

    ops: list[GraphOp] = []

    def quant_overhead(label, elements):
        ops.append(GraphOp(label, "elementwise", muls=elements, others=2 * elements))

    def layer_norm_node(label, rows, width):
        ops.append(GraphOp(label, "elementwise",
                           muls=rows * (3 * width + 2),
                           adds=rows * (5 * width + 1),
                           others=2 * rows))

    def linear(label, rows, in_dim, out_dim):
        if spec.scheme != "none" and (w_q or act_q):
            if act_q:
                quant_overhead(f"{label}.act_quant", rows * in_dim)
            if w_q:
                if spec.scheme == "squashed":
                    # tanh + round per weight, then the e^gain column scale.
                    ops.append(GraphOp(f"{label}.weight_squash", "elementwise",
                                       others=2 * in_dim * out_dim))
                else:
                    quant_overhead(f"{label}.weight_quant", in_dim * out_dim)
        ops.append(GraphOp(f"{label}.matmul", "matmul", m=rows, k=in_dim, n=out_dim,
                           bits_a=lin_mm_bits[0], bits_b=lin_mm_bits[1]))
        if spec.scheme == "squashed" and w_q:
            ops.append(GraphOp(f"{label}.gain", "elementwise",
                               muls=rows * out_dim, others=out_dim))
        ops.append(GraphOp(f"{label}.bias", "elementwise", adds=rows * out_dim))

    if cfg.positional:
        ops.append(GraphOp("positional", "elementwise", adds=t * d))

    for i in range(cfg.num_layers):
        base = f"layers.{i}"
        layer_norm_node(f"{base}.ln1", t, d)
        for proj in ("q", "k", "v"):
            linear(f"{base}.attn.{proj}", t, d, d)
        if attn_quant:
            quant_overhead(f"{base}.attn.q_quant", t * d)
            quant_overhead(f"{base}.attn.k_quant", t * d)
        ops.append(GraphOp(f"{base}.attn.scores", "matmul", m=h * t, k=dh, n=t,
                           bits_a=attn_mm_bits[0], bits_b=attn_mm_bits[1]))
        ops.append(GraphOp(f"{base}.attn.scale", "elementwise", muls=h * t * t))
        ops.append(GraphOp(f"{base}.attn.softmax", "elementwise",
                           adds=2 * h * t * t, others=2 * h * t * t))
        if attn_quant:
            quant_overhead(f"{base}.attn.probs_quant", h * t * t)
            quant_overhead(f"{base}.attn.v_quant", t * d)
        ops.append(GraphOp(f"{base}.attn.context", "matmul", m=h * t, k=t, n=dh,
                           bits_a=attn_mm_bits[0], bits_b=attn_mm_bits[1]))
        linear(f"{base}.attn.out", t, d, d)
        ops.append(GraphOp(f"{base}.residual1", "elementwise", adds=t * d))
        layer_norm_node(f"{base}.ln2", t, d)
        linear(f"{base}.ffn.1", t, d, dff)
        ops.append(GraphOp(f"{base}.ffn.relu", "elementwise", others=t * dff))
        linear(f"{base}.ffn.2", t, dff, d)
        ops.append(GraphOp(f"{base}.residual2", "elementwise", adds=t * d))

    layer_norm_node("final_ln", t, d)
    ops.append(GraphOp("head.matmul", "matmul", m=t, k=d, n=c))
    ops.append(GraphOp("head.bias", "elementwise", adds=t * c))
    return ops


def count_ops(cfg: TransformerConfig, spec: QuantSpec,
              input_shape: Optional[tuple[int, int]] = None) -> tuple[int, int]:
    """(flops, quantops_bits) of one forward pass with static shapes."""
    seq_len = None
    if input_shape is not None:
        seq_len, width = input_shape
        if width != cfg.model_dim:
            raise ValueError(
                f"input width {width} != model_dim {cfg.model_dim}")
    return graph_cost(build_forward_graph(cfg, spec, seq_len=seq_len))


def count_storage(params: ModelParams, spec: QuantSpec,
                  quantized: Optional[set[str]] = None) -> int:
    """Bytes to store all parameters: quantized weights at weight_bits,
    everything else (biases, norms, head, alpha/beta/gain) at 16 bits.
    ``quantized`` overrides the tag set (default: the weight-site names)."""
    if quantized is None:
        quantized = params.quantized_weight_names()
    bits = 0
    for name, tensor in params.all_named():
        per_param = spec.weight_bits if name in quantized else 16
        bits += tensor.size * per_param
    return math.ceil(bits / 8)


def profile_model(cfg: TransformerConfig, spec: QuantSpec,
                  params: Optional[ModelParams] = None) -> CostReport:
    """Full report for the toy model.  The runtime column is relative to the
    same architecture in float, anchored on its squashed-w8 variant."""
    flops, quantops = count_ops(cfg, spec)
    if params is None:
        params = init_params(cfg, spec)
    storage = count_storage(params, spec)
    baseline_flops, _ = count_ops(cfg, QuantSpec())
    anchor_flops, anchor_q = count_ops(cfg, QuantSpec("squashed", 8, 8))
    anchor = calibrate_anchor(baseline_flops, anchor_flops, anchor_q)
    runtime = estimate_runtime(flops, quantops, baseline_flops, anchor)
    return CostReport(storage_bytes=storage, flops=flops,
                      quantops_bits=quantops, runtime_rel=runtime)


# -- published-table fixture --------------------------------------------------

@dataclass(frozen=True)
class FixtureRow:
    name: str
    flops_g: float
    quantops_gbits: float
    storage_mb: float
    runtime_x: float


@dataclass
class RowCheck:
    name: str
    runtime_printed: float
    runtime_computed: float
    runtime_ok: bool
    storage_printed: Optional[float] = None
    storage_computed: Optional[float] = None
    storage_ok: Optional[bool] = None

    @property
    def ok(self) -> bool:
        return self.runtime_ok and self.storage_ok is not False


def load_fixture(path) -> list[FixtureRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FIXTURE_HEADER:
            raise ValueError(
                f"fixture header {reader.fieldnames} != {FIXTURE_HEADER}")
        rows = []
        for record in reader:
            if any(record[k] in (None, "") for k in FIXTURE_HEADER):
                raise ValueError(f"fixture row {record.get('name')!r} has missing fields")
            rows.append(FixtureRow(
                name=record["name"],
                flops_g=float(record["flops_g"]),
                quantops_gbits=float(record["quantops_gbits"]),
                storage_mb=float(record["storage_mb"]),
                runtime_x=float(record["runtime_x"])))
    return rows


def _family_bits(name: str) -> Optional[tuple[str, int]]:
    for family in ("sqwq", "bit_la", "bit_l"):
        prefix = family + "_w"
        if name.startswith(prefix):
            bits = name[len(prefix):].split("a")[0]
            if bits.isdigit():
                return family, int(bits)
    return None


def predicted_storage_mb(family: str, weight_bits: int) -> float:
    return FITTED_QUANT_PARAMS * weight_bits / 8 / MB + FITTED_FP16_RESIDUAL_MB[family]


def validate_table_fixture(path, runtime_tol: float = RUNTIME_TOL,
                           storage_tol: float = STORAGE_TOL) -> list[RowCheck]:
    """Recompute the Runtime column of every row from its FLOPs/QuantOPs via
    the anchor rule, and the Storage column of quantized rows from the
    fitted linear-in-bits model; flag each row pass/fail."""
    rows = {r.name: r for r in load_fixture(path)}
    if BASELINE_ROW not in rows:
        raise ValueError(f"fixture is missing the baseline row {BASELINE_ROW!r}")
    if ANCHOR_ROW not in rows:
        raise ValueError(f"fixture is missing the anchor row {ANCHOR_ROW!r}")
    baseline_flops = rows[BASELINE_ROW].flops_g
    anchor = calibrate_anchor(baseline_flops, rows[ANCHOR_ROW].flops_g,
                              rows[ANCHOR_ROW].quantops_gbits)

    checks = []
    for row in rows.values():
        runtime = estimate_runtime(row.flops_g, row.quantops_gbits,
                                   baseline_flops, anchor)
        check = RowCheck(name=row.name, runtime_printed=row.runtime_x,
                         runtime_computed=runtime,
                         runtime_ok=abs(runtime - row.runtime_x) <= runtime_tol)
        family = _family_bits(row.name)
        if family is not None:
            predicted = predicted_storage_mb(*family)
            check.storage_printed = row.storage_mb
            check.storage_computed = predicted
            check.storage_ok = abs(predicted - row.storage_mb) <= storage_tol
        checks.append(check)
    return checks
