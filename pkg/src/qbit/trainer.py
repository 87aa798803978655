"""Quantization-aware training over synthetic data.

Supports both loss kinds (masked-prediction task loss vs knowledge
distillation from a full-precision teacher) and precision schedules:
one-step quantization trains directly at the target width, a ladder like
"fp16>w8a8>w4a4>w2a2>w1a1" warm-starts each stage from the previous one,
carrying the learned quantizer state across stage transitions.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .distill import DistillTargets, distill_loss
from .model import ModelParams, TransformerConfig, forward, init_params, \
    masked_prediction_loss
from .quantizers import ALPHA_FLOOR, QuantSpec, VALID_BITS, squash_reg_loss
from .tensor import NumericError, Tensor, add, mul


class QatDiverged(RuntimeError):
    """Training hit a non-finite value; message names step, stage, tensor."""


@dataclass(frozen=True)
class Stage:
    weight_bits: int
    act_bits: int

    @property
    def label(self) -> str:
        if self.weight_bits == 16 and self.act_bits == 16:
            return "fp16"
        return f"w{self.weight_bits}a{self.act_bits}"


@dataclass(frozen=True)
class Schedule:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("schedule needs at least one stage")

    @property
    def target(self) -> Stage:
        return self.stages[-1]

    @property
    def text(self) -> str:
        return ">".join(s.label for s in self.stages)


_STAGE_RE = re.compile(r"^w(\d+)a(\d+)$")


def parse_schedule(text: str) -> Schedule:
    """Parse "fp16" / "w{b}a{b}" tokens joined by '>'.  A single token is
    one-step quantization."""
    if not text or not text.strip():
        raise ValueError("empty schedule")
    stages = []
    for token in text.split(">"):
        token = token.strip()
        if token == "fp16":
            stages.append(Stage(16, 16))
            continue
        match = _STAGE_RE.match(token)
        if not match:
            raise ValueError(f"malformed schedule token {token!r}")
        w, a = int(match.group(1)), int(match.group(2))
        if w not in VALID_BITS or a not in VALID_BITS:
            raise ValueError(f"invalid bit-width in token {token!r}")
        stages.append(Stage(w, a))
    return Schedule(tuple(stages))


def one_step_schedule(spec: QuantSpec) -> Schedule:
    return Schedule((Stage(spec.weight_bits, spec.act_bits),))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 2
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss_kind: str = "task"
    lambda_q: float = 1e-3
    sigma_t: float = 0.75

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.loss_kind not in ("task", "distill"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")


@dataclass(frozen=True)
class SyntheticDataset:
    """Deterministic frame generator.  Target of a frame is the argmax of a
    fixed random projection of that frame, a stand-in for clustered
    pseudo-labels; the mask selects which positions are scored."""
    seq_len: int = 64
    model_dim: int = 64
    num_classes: int = 16
    seed: int = 0
    mask_prob: float = 0.5

    EVAL_OFFSET = 1_000_000  # batch indices at/after this are held out

    def _projection(self) -> np.ndarray:
        rng = np.random.default_rng((self.seed, 0xC1A55))
        return rng.normal(size=(self.model_dim, self.num_classes))

    def batch(self, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rng = np.random.default_rng((self.seed, index))
        x = rng.normal(size=(self.seq_len, self.model_dim))
        targets = np.argmax(x @ self._projection(), axis=1)
        mask = rng.random(self.seq_len) < self.mask_prob
        if not mask.any():
            mask[rng.integers(self.seq_len)] = True
        return x, targets, mask

    def eval_batch(self, index: int):
        return self.batch(self.EVAL_OFFSET + index)


@dataclass
class MetricsLog:
    records: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def jsonl_records(self) -> list[str]:
        import json
        return [json.dumps(r, sort_keys=True) for r in self.records]


class Adam:
    """Adam with fixed defaults; the caller owns gradient zeroing."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = named_params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}

    def step(self) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            p.assign_(p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        # Keep every learnable scale strictly positive.
        for name, p in self.named_params:
            if name.endswith(".alpha") and p.data < ALPHA_FLOOR:
                p.assign_(np.asarray(ALPHA_FLOOR))


def _stage_spec(spec: QuantSpec, stage: Stage) -> QuantSpec:
    if stage.weight_bits == 16 and stage.act_bits == 16 and spec.scheme == "none":
        return spec
    return spec.with_bits(stage.weight_bits, stage.act_bits)


def _stage_steps(total: int, n_stages: int) -> list[int]:
    """Equal split of the step budget; the remainder goes to the earliest
    stages so every stage trains at least once when total >= n_stages."""
    base, extra = divmod(total, n_stages)
    return [base + (1 if i < extra else 0) for i in range(n_stages)]


def _diagnose_nonfinite(params: ModelParams) -> str:
    for name, tensor in params.all_named():
        if not np.isfinite(tensor.data).all():
            return name
        if tensor.grad is not None and not np.isfinite(tensor.grad).all():
            return f"{name}.grad"
    return "<loss>"


def run_qat(teacher_params: Optional[ModelParams], cfg: TransformerConfig,
            spec: QuantSpec, schedule: Schedule, train_cfg: TrainConfig,
            data: SyntheticDataset) -> tuple[ModelParams, MetricsLog]:
    """Train a (possibly quantized) student through the schedule stages.

    The student initializes from the teacher when one is given, otherwise
    fresh from the seed.  With the squashed scheme the regularizer loss of
    every quantized weight is added to the main loss.  Returns the trained
    parameters plus a per-step metrics log.
    """
    if train_cfg.loss_kind == "distill" and teacher_params is None:
        raise ValueError("distillation needs teacher parameters")
    for stage in schedule.stages:
        _stage_spec(spec, stage)  # surface invalid stage/scheme pairs upfront

    params = init_params(cfg, spec, seed=train_cfg.seed,
                         lambda_q=train_cfg.lambda_q, sigma_t=train_cfg.sigma_t)
    if teacher_params is not None:
        params.load_tensors_from(teacher_params)
    teacher_eval = teacher_params.frozen_copy() if teacher_params is not None else None

    optimizer = Adam(list(params.trainable()), lr=train_cfg.lr,
                     beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps)
    log = MetricsLog(config={
        "model": asdict(cfg), "quant": asdict(spec), "train": asdict(train_cfg),
        "data": asdict(data), "schedule": schedule.text,
    })

    step = 0
    for stage, stage_steps in zip(schedule.stages, _stage_steps(train_cfg.steps,
                                                                len(schedule.stages))):
        stage_quant = _stage_spec(spec, stage)
        for _ in range(stage_steps):
            try:
                loss = _train_step(params, teacher_eval, cfg, stage_quant,
                                   train_cfg, data, step)
                optimizer.step()
            except NumericError as err:
                raise QatDiverged(
                    f"non-finite value at step {step}, stage {stage.label}, "
                    f"tensor {_diagnose_nonfinite(params)}: {err}") from err
            params.zero_grad()
            log.records.append({"step": step, "stage": stage.label,
                                "loss": loss, "lr": train_cfg.lr})
            step += 1

    final_spec = _stage_spec(spec, schedule.target)
    log.final = evaluate(params, cfg, final_spec, data, teacher=teacher_eval)
    log.final["stage"] = schedule.target.label
    return params, log


def _train_step(params, teacher_eval, cfg, stage_quant, train_cfg, data,
                step: int) -> float:
    total = None
    for j in range(train_cfg.batch_size):
        x_np, targets, mask = data.batch(step * train_cfg.batch_size + j)
        x = Tensor(x_np)
        out, trace = forward(x, cfg, stage_quant, params)
        if train_cfg.loss_kind == "task":
            loss = masked_prediction_loss(out, targets, mask)
        else:
            t_out, t_trace = forward(x, cfg, QuantSpec(), teacher_eval)
            loss = distill_loss(DistillTargets.from_teacher(t_out, t_trace),
                                out, trace)
        total = loss if total is None else add(total, loss)
    total = mul(total, 1.0 / train_cfg.batch_size)
    if stage_quant.scheme == "squashed" and stage_quant.weight_bits < 16:
        # sorted so the summation order (and the bytes of the loss log)
        # cannot depend on set iteration order
        for name in sorted(params.quantized_weight_names()):
            site = params.weight_quant[name]
            total = add(total, squash_reg_loss(params[name], site.lambda_q,
                                               site.sigma_t))
    total.backward()
    return total.item()


def evaluate(params: ModelParams, cfg: TransformerConfig, spec: QuantSpec,
             data: SyntheticDataset, teacher: Optional[ModelParams] = None,
             batches: int = 20) -> dict:
    """Deterministic metrics on the held-out split: masked-prediction
    accuracy, and final-output MSE against the teacher when one is given."""
    frozen = params.frozen_copy()
    hits = 0
    masked_frames = 0
    mse_sum = 0.0
    for i in range(batches):
        x_np, targets, mask = data.eval_batch(i)
        x = Tensor(x_np)
        out, _ = forward(x, cfg, spec, frozen)
        pred = np.argmax(out.data, axis=1)
        hits += int((pred[mask] == targets[mask]).sum())
        masked_frames += int(mask.sum())
        if teacher is not None:
            t_out, _ = forward(x, cfg, QuantSpec(), teacher)
            mse_sum += float(((out.data - t_out.data) ** 2).mean())
    metrics = {
        "masked_pred_accuracy": hits / masked_frames,
        "masked_frames": masked_frames,
    }
    if teacher is not None:
        metrics["distill_mse"] = mse_sum / batches
    return metrics


def train_teacher(cfg: TransformerConfig, train_cfg: TrainConfig,
                  data: SyntheticDataset) -> tuple[ModelParams, MetricsLog]:
    """Full-precision baseline trained with the task loss."""
    return run_qat(None, cfg, QuantSpec(), parse_schedule("fp16"),
                   replace(train_cfg, loss_kind="task"), data)
