"""Layerwise knowledge distillation: final-output MSE plus per-layer
intermediate-output and attention-weight MSE against a detached teacher."""

from __future__ import annotations

from dataclasses import dataclass

from .model import LayerTrace
from .tensor import Tensor, add, mse, mul


@dataclass
class DistillTargets:
    """Teacher outputs to imitate; all tensors are gradient-detached."""
    final: Tensor
    outputs: list[Tensor]
    attn: list[Tensor]

    @classmethod
    def from_teacher(cls, output: Tensor, trace: LayerTrace) -> "DistillTargets":
        return cls(final=output.detach(),
                   outputs=[o.detach() for o in trace.outputs],
                   attn=[a.detach() for a in trace.attn])


def distill_loss(targets: DistillTargets, student_out: Tensor,
                 student_trace: LayerTrace, final_weight: float = 1.0,
                 layer_weight: float = 1.0, attn_weight: float = 1.0) -> Tensor:
    """MSE(y_T, y_S) + sum_i (MSE(o_T_i, o_S_i) + MSE(a_T_i, a_S_i)).

    The three families carry equal weight by default; shapes must match
    pairwise and the layer counts must agree (quantization keeps the
    architecture, so there is nothing to project).
    """
    if len(targets.outputs) != len(student_trace.outputs) \
            or len(targets.attn) != len(student_trace.attn):
        raise ValueError(
            f"layer count mismatch: teacher {len(targets.outputs)}/{len(targets.attn)}, "
            f"student {len(student_trace.outputs)}/{len(student_trace.attn)}")
    if targets.final.shape != student_out.shape:
        raise ValueError(
            f"final output shapes differ: {targets.final.shape} vs {student_out.shape}")
    for i, (t_o, s_o) in enumerate(zip(targets.outputs, student_trace.outputs)):
        if t_o.shape != s_o.shape:
            raise ValueError(f"layer {i} output shapes differ: {t_o.shape} vs {s_o.shape}")
    for i, (t_a, s_a) in enumerate(zip(targets.attn, student_trace.attn)):
        if t_a.shape != s_a.shape:
            raise ValueError(f"layer {i} attention shapes differ: {t_a.shape} vs {s_a.shape}")

    total = mul(mse(targets.final, student_out), final_weight)
    for t_o, s_o in zip(targets.outputs, student_trace.outputs):
        total = add(total, mul(mse(t_o, s_o), layer_weight))
    for t_a, s_a in zip(targets.attn, student_trace.attn):
        total = add(total, mul(mse(t_a, s_a), attn_weight))
    return total
