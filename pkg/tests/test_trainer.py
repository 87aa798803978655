"""Schedules, the QAT loop, and evaluation metrics.  Full-scale trend
properties live in the acceptance suite; these tests use a small model."""

import numpy as np
import pytest

from qbit.model import TransformerConfig, init_params
from qbit.quantizers import QuantSpec
from qbit.trainer import (QatDiverged, Stage, SyntheticDataset, TrainConfig,
                          evaluate, one_step_schedule, parse_schedule,
                          run_qat, train_teacher)

SMALL = TransformerConfig(num_layers=2, num_heads=2, model_dim=16, ffn_dim=32,
                          seq_len=16, num_classes=4, seed=0)


def small_data(seed=0):
    return SyntheticDataset(seq_len=16, model_dim=16, num_classes=4, seed=seed)


class TestParseSchedule:
    def test_halving_ladder(self):
        sched = parse_schedule("fp16>w8a8>w4a4>w2a2>w1a1")
        assert len(sched.stages) == 5
        assert sched.stages[0].label == "fp16"
        assert sched.target == Stage(1, 1)

    def test_mixed_ladder(self):
        sched = parse_schedule("fp16>w1a2>w1a1")
        assert len(sched.stages) == 3
        assert sched.stages[1] == Stage(1, 2)
        assert sched.target == Stage(1, 1)

    def test_single_token_is_one_step(self):
        sched = parse_schedule("w2a2")
        assert sched.stages == (Stage(2, 2),)

    def test_round_trip_text(self):
        assert parse_schedule("fp16>w4a4").text == "fp16>w4a4"

    @pytest.mark.parametrize("bad", ["", "  ", "w2", "w2a", "a2w2", "w3a3",
                                     "w2a2>", "fp32", "w2a2>>w1a1"])
    def test_malformed_inputs(self, bad):
        with pytest.raises(ValueError):
            parse_schedule(bad)

    def test_one_step_from_spec(self):
        assert one_step_schedule(QuantSpec("elastic", 4, 2)).text == "w4a2"
        assert one_step_schedule(QuantSpec()).text == "fp16"


class TestSyntheticDataset:
    def test_deterministic_given_seed(self):
        d1, d2 = small_data(5), small_data(5)
        for i in (0, 3):
            for a, b in zip(d1.batch(i), d2.batch(i)):
                np.testing.assert_array_equal(a, b)

    def test_batches_differ_by_index(self):
        d = small_data()
        assert not np.array_equal(d.batch(0)[0], d.batch(1)[0])

    def test_targets_follow_fixed_projection(self):
        d = small_data()
        x, targets, _ = d.batch(0)
        proj = d._projection()
        np.testing.assert_array_equal(targets, np.argmax(x @ proj, axis=1))

    def test_mask_never_empty(self):
        d = SyntheticDataset(seq_len=4, model_dim=8, num_classes=4, seed=0,
                             mask_prob=0.001)
        for i in range(50):
            assert d.batch(i)[2].any()

    def test_eval_split_disjoint_from_training(self):
        d = small_data()
        assert not np.array_equal(d.batch(0)[0], d.eval_batch(0)[0])


class TestRunQat:
    def test_task_loss_decreases(self):
        tc = TrainConfig(steps=60, batch_size=1, seed=0)
        _, log = train_teacher(SMALL, tc, small_data())
        first = np.mean([r["loss"] for r in log.records[:10]])
        last = np.mean([r["loss"] for r in log.records[-10:]])
        assert last < first

    def test_deterministic_metrics_log(self):
        tc = TrainConfig(steps=25, batch_size=1, seed=3)

        def run():
            _, log = train_teacher(SMALL, tc, small_data(3))
            return log

        log1, log2 = run(), run()
        assert log1.jsonl_records() == log2.jsonl_records()
        assert log1.final == log2.final

    def test_distill_from_identical_init_starts_at_zero(self):
        tc = TrainConfig(steps=30, batch_size=1, seed=0)
        teacher, _ = train_teacher(SMALL, tc, small_data())
        spec = QuantSpec("elastic", 16, 16)
        dc = TrainConfig(steps=5, batch_size=1, seed=0, loss_kind="distill")
        _, log = run_qat(teacher, SMALL, spec, one_step_schedule(spec), dc,
                         small_data())
        assert log.records[0]["loss"] == 0.0

    def test_distill_requires_teacher(self):
        dc = TrainConfig(steps=5, loss_kind="distill")
        with pytest.raises(ValueError):
            run_qat(None, SMALL, QuantSpec(), parse_schedule("fp16"), dc,
                    small_data())

    def test_stage_transitions_carry_quantizer_state(self):
        spec = QuantSpec("elastic", 2, 2, "linear_only")
        tc = TrainConfig(steps=12, batch_size=1, seed=0)
        teacher, _ = train_teacher(SMALL, TrainConfig(steps=10, seed=0),
                                   small_data())
        params, log = run_qat(teacher, SMALL, spec,
                              parse_schedule("w8a8>w4a4>w2a2"), tc, small_data())
        stages = [r["stage"] for r in log.records]
        assert stages == ["w8a8"] * 4 + ["w4a4"] * 4 + ["w2a2"] * 4
        # sites were initialized in the first stage and then kept learning,
        # never re-initialized from data at stage boundaries
        site = params.act_quant["layers.0.act.attn_in"]
        assert site.initialized

    def test_stage_steps_split_covers_budget(self):
        tc = TrainConfig(steps=10, batch_size=1, seed=0)
        _, log = run_qat(None, SMALL, QuantSpec("elastic", 4, 4),
                         parse_schedule("fp16>w8a8>w4a4"), tc, small_data())
        assert len(log.records) == 10
        assert [r["stage"] for r in log.records] == \
            ["fp16"] * 4 + ["w8a8"] * 3 + ["w4a4"] * 3

    def test_squash_regularizer_enters_total_loss(self):
        spec = QuantSpec("squashed", 2, 8)
        data = small_data()
        base = TrainConfig(steps=3, batch_size=1, seed=0, lambda_q=0.0)
        reg = TrainConfig(steps=3, batch_size=1, seed=0, lambda_q=10.0)
        _, log0 = run_qat(None, SMALL, spec, one_step_schedule(spec), base, data)
        _, log1 = run_qat(None, SMALL, spec, one_step_schedule(spec), reg, data)
        assert log1.records[0]["loss"] > log0.records[0]["loss"]

    def test_divergence_aborts_with_diagnostic(self):
        # lr large enough that the first update overflows float64 matmuls
        tc = TrainConfig(steps=10, batch_size=1, seed=0, lr=1e160)
        with pytest.raises(QatDiverged, match=r"step \d+, stage fp16"):
            train_teacher(SMALL, tc, small_data())

    def test_alpha_stays_positive_through_training(self):
        spec = QuantSpec("elastic", 1, 1, "linear_only")
        tc = TrainConfig(steps=40, batch_size=1, seed=0, lr=0.05)
        params, _ = run_qat(None, SMALL, spec, one_step_schedule(spec), tc,
                            small_data())
        for site, p in {**params.act_quant}.items():
            assert p.alpha.item() > 0, site
        for site, p in params.weight_quant.items():
            assert p.alpha.item() > 0, site


class TestEvaluate:
    def test_untrained_model_is_at_chance(self):
        cfg = TransformerConfig(num_layers=2, num_heads=2, model_dim=32,
                                ffn_dim=64, seq_len=32, num_classes=16, seed=1)
        data = SyntheticDataset(seq_len=32, model_dim=32, num_classes=16, seed=1)
        params = init_params(cfg, QuantSpec(), seed=42)
        metrics = evaluate(params, cfg, QuantSpec(), data, batches=64)
        assert metrics["masked_frames"] >= 1000
        assert metrics["masked_pred_accuracy"] == pytest.approx(1 / 16, abs=0.05)

    def test_teacher_against_itself_has_zero_mse(self):
        params = init_params(SMALL, QuantSpec(), seed=5)
        metrics = evaluate(params, SMALL, QuantSpec(), small_data(),
                           teacher=params.frozen_copy(), batches=3)
        assert metrics["distill_mse"] == 0.0

    def test_trained_model_beats_chance_at_99pct_confidence(self):
        from scipy.stats import binomtest
        tc = TrainConfig(steps=120, batch_size=1, seed=0)
        params, _ = train_teacher(SMALL, tc, small_data())
        metrics = evaluate(params, SMALL, QuantSpec(), small_data(), batches=16)
        hits = round(metrics["masked_pred_accuracy"] * metrics["masked_frames"])
        result = binomtest(hits, metrics["masked_frames"], p=1 / 4,
                           alternative="greater")
        assert result.pvalue < 0.01

    def test_evaluate_deterministic(self):
        params = init_params(SMALL, QuantSpec(), seed=2)
        m1 = evaluate(params, SMALL, QuantSpec(), small_data(), batches=4)
        m2 = evaluate(params, SMALL, QuantSpec(), small_data(), batches=4)
        assert m1 == m2
