"""Toy transformer: golden reference forward, quantization injection,
masked-prediction loss, and parameter accounting."""

import numpy as np
import pytest

from qbit.model import (TransformerConfig, forward, init_params,
                        masked_prediction_loss, parameter_count,
                        positional_encoding)
from qbit.quantizers import QuantSpec
from qbit.tensor import Tensor, tsum

TINY = TransformerConfig(num_layers=2, num_heads=2, model_dim=8, ffn_dim=16,
                         seq_len=6, num_classes=4, seed=3)


def plain_reference_forward(x, cfg, params):
    """Independent numpy-only forward pass (no Tensor, no quantizers)."""
    def ln(v, g, b):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-5) * g + b

    def lin(v, w, b):
        return v @ w.T + b

    p = {k: t.data for k, t in params.tensors.items()}
    t, d, h = cfg.seq_len, cfg.model_dim, cfg.num_heads
    dh = d // h
    if cfg.positional:
        x = x + positional_encoding(t, d)
    for i in range(cfg.num_layers):
        b = f"layers.{i}"
        pre = ln(x, p[f"{b}.ln1.gamma"], p[f"{b}.ln1.beta"])
        q = lin(pre, p[f"{b}.attn.wq"], p[f"{b}.attn.bq"]).reshape(t, h, dh).transpose(1, 0, 2)
        k = lin(pre, p[f"{b}.attn.wk"], p[f"{b}.attn.bk"]).reshape(t, h, dh).transpose(1, 0, 2)
        v = lin(pre, p[f"{b}.attn.wv"], p[f"{b}.attn.bv"]).reshape(t, h, dh).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) * dh ** -0.5
        e = np.exp(scores - scores.max(-1, keepdims=True))
        probs = e / e.sum(-1, keepdims=True)
        ctx = (probs @ v).transpose(1, 0, 2).reshape(t, d)
        x = x + lin(ctx, p[f"{b}.attn.wo"], p[f"{b}.attn.bo"])
        pre2 = ln(x, p[f"{b}.ln2.gamma"], p[f"{b}.ln2.beta"])
        hidden = np.maximum(lin(pre2, p[f"{b}.ffn.w1"], p[f"{b}.ffn.b1"]), 0.0)
        x = x + lin(hidden, p[f"{b}.ffn.w2"], p[f"{b}.ffn.b2"])
    x = ln(x, p["final_ln.gamma"], p["final_ln.beta"])
    return lin(x, p["head.w"], p["head.b"])


class TestForward:
    def test_golden_against_plain_reference(self, rng):
        params = init_params(TINY, QuantSpec())
        x = rng.normal(size=(6, 8))
        out, _ = forward(Tensor(x), TINY, QuantSpec(), params)
        expected = plain_reference_forward(x, TINY, params)
        np.testing.assert_allclose(out.data, expected, atol=1e-9, rtol=1e-9)

    def test_attention_rows_sum_to_one(self, rng):
        params = init_params(TINY, QuantSpec())
        _, trace = forward(Tensor(rng.normal(size=(6, 8))), TINY, QuantSpec(), params)
        for a in trace.attn:
            assert a.shape == (2, 6, 6)
            np.testing.assert_allclose(a.data.sum(-1), 1.0, atol=1e-6)

    def test_trace_shapes(self, rng):
        params = init_params(TINY, QuantSpec())
        _, trace = forward(Tensor(rng.normal(size=(6, 8))), TINY, QuantSpec(), params)
        assert len(trace.outputs) == len(trace.attn) == 2
        assert all(o.shape == (6, 8) for o in trace.outputs)

    def test_scope_is_noop_at_full_precision(self, rng):
        x = rng.normal(size=(6, 8))
        outs = []
        for scope in ("linear_only", "linear_attention"):
            spec = QuantSpec("elastic", 16, 16, scope)
            params = init_params(TINY, spec)
            out, _ = forward(Tensor(x), TINY, spec, params)
            outs.append(out.data)
        plain_params = init_params(TINY, QuantSpec())
        plain, _ = forward(Tensor(x), TINY, QuantSpec(), plain_params)
        np.testing.assert_array_equal(outs[0], outs[1])
        np.testing.assert_array_equal(outs[0], plain.data)

    def test_quantized_forward_differs_and_is_finite(self, rng):
        x = rng.normal(size=(6, 8))
        spec = QuantSpec("elastic", 2, 2, "linear_attention")
        params = init_params(TINY, spec)
        out_q, _ = forward(Tensor(x), TINY, spec, params)
        out_f, _ = forward(Tensor(x), TINY, spec.with_bits(16, 16), params)
        assert np.isfinite(out_q.data).all()
        assert not np.allclose(out_q.data, out_f.data)

    def test_input_shape_validated(self):
        params = init_params(TINY, QuantSpec())
        with pytest.raises(ValueError):
            forward(Tensor(np.zeros((5, 8))), TINY, QuantSpec(), params)

    def test_permutation_equivariance_without_positional(self, rng):
        cfg = TransformerConfig(num_layers=2, num_heads=2, model_dim=8,
                                ffn_dim=16, seq_len=6, num_classes=4,
                                positional=False)
        params = init_params(cfg, QuantSpec())
        x = rng.normal(size=(6, 8))
        perm = rng.permutation(6)
        out, _ = forward(Tensor(x), cfg, QuantSpec(), params)
        out_perm, _ = forward(Tensor(x[perm]), cfg, QuantSpec(), params)
        np.testing.assert_allclose(out_perm.data, out.data[perm], atol=1e-9)

    def test_positional_breaks_equivariance(self, rng):
        params = init_params(TINY, QuantSpec())
        x = rng.normal(size=(6, 8))
        perm = np.roll(np.arange(6), 1)
        out, _ = forward(Tensor(x), TINY, QuantSpec(), params)
        out_perm, _ = forward(Tensor(x[perm]), TINY, QuantSpec(), params)
        assert not np.allclose(out_perm.data, out.data[perm])


class TestQuantSites:
    def test_elastic_linear_only_sites(self):
        params = init_params(TINY, QuantSpec("elastic", 2, 2, "linear_only"))
        assert len(params.weight_quant) == 2 * 6
        assert len(params.act_quant) == 2 * 4
        assert not any(".act.q" in s for s in params.act_quant)

    def test_elastic_attention_sites(self):
        params = init_params(TINY, QuantSpec("elastic", 2, 2, "linear_attention"))
        assert len(params.act_quant) == 2 * 8
        assert params.act_quant["layers.0.act.q"].range_kind == "symmetric"
        assert params.act_quant["layers.0.act.probs"].range_kind == "nonneg"

    def test_probs_window_fixed_only_when_lattice_resolves_it(self):
        # >= 4 activation bits: [0, 1] window pinned (spacing <= 1/15)
        fine = init_params(TINY, QuantSpec("elastic", 4, 4, "linear_attention"))
        probs = fine.act_quant["layers.0.act.probs"]
        assert probs.initialized
        assert not probs.alpha.requires_grad and not probs.beta.requires_grad
        assert probs.alpha.item() == 1.0 and probs.beta.item() == 0.0
        # 1-2 bits: the scale must learn to reach the attention mass
        coarse = init_params(TINY, QuantSpec("elastic", 2, 2, "linear_attention"))
        assert coarse.act_quant["layers.0.act.probs"].alpha.requires_grad

    def test_squashed_sites(self):
        params = init_params(TINY, QuantSpec("squashed", 2, 8))
        assert all(hasattr(p, "gain") for p in params.weight_quant.values())
        assert params.weight_quant["layers.0.ffn.w1"].gain.shape == (16,)
        # activation quantizers are symmetric with frozen beta
        site = params.act_quant["layers.0.act.ffn_in"]
        assert site.range_kind == "symmetric"
        assert not site.beta.requires_grad

    def test_no_sites_for_none_scheme(self):
        params = init_params(TINY, QuantSpec())
        assert not params.weight_quant and not params.act_quant

    def test_weight_sites_span_full_range_activation_sites_data_scale(self, rng):
        # weight lattices initialize to max|W| (they fit inside the clip
        # window), activation lattices to mean|X| (they do not)
        spec = QuantSpec("elastic", 4, 4, "linear_only")
        params = init_params(TINY, spec)
        forward(Tensor(rng.normal(size=(6, 8))), TINY, spec, params)
        w = params.tensors["layers.0.attn.wq"].data
        site = params.weight_quant["layers.0.attn.wq"]
        assert site.init_scale == "max"
        assert site.alpha.item() == pytest.approx(np.abs(w).max())
        assert params.act_quant["layers.0.act.attn_in"].init_scale == "mean"

    def test_attention_quantization_changes_output(self, rng):
        x = rng.normal(size=(6, 8))
        la = QuantSpec("elastic", 4, 4, "linear_attention")
        lo = QuantSpec("elastic", 4, 4, "linear_only")
        p_la = init_params(TINY, la)
        p_lo = init_params(TINY, lo)
        out_la, _ = forward(Tensor(x), TINY, la, p_la)
        out_lo, _ = forward(Tensor(x), TINY, lo, p_lo)
        assert not np.allclose(out_la.data, out_lo.data)


class TestMaskedPredictionLoss:
    def test_confident_correct_prediction_near_zero(self):
        t, c = 5, 4
        targets = np.array([0, 1, 2, 3, 0])
        logits = np.zeros((t, c))
        logits[np.arange(t), targets] = 20.0  # logit margin 20
        loss = masked_prediction_loss(Tensor(logits), targets,
                                      np.ones(t, dtype=bool))
        assert loss.item() < 1e-3

    def test_uniform_logits_give_log_c(self):
        loss = masked_prediction_loss(Tensor(np.zeros((3, 4))),
                                      np.array([0, 1, 2]),
                                      np.ones(3, dtype=bool))
        assert loss.item() == pytest.approx(np.log(4.0))

    def test_ignores_unmasked_positions_bit_identically(self, rng):
        logits = rng.normal(size=(6, 4))
        targets = rng.integers(0, 4, size=6)
        mask = np.array([True, False, True, False, True, False])
        base = masked_prediction_loss(Tensor(logits), targets, mask).item()
        perturbed = logits.copy()
        perturbed[~mask] += rng.normal(size=(3, 4)) * 10
        again = masked_prediction_loss(Tensor(perturbed), targets, mask).item()
        assert base == again

    def test_empty_mask_is_an_error(self):
        with pytest.raises(ValueError):
            masked_prediction_loss(Tensor(np.zeros((3, 4))),
                                   np.array([0, 1, 2]),
                                   np.zeros(3, dtype=bool))

    def test_gradient_flows_only_into_masked_rows(self, rng):
        logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        mask = np.array([True, False, True, False])
        masked_prediction_loss(logits, np.array([0, 1, 2, 0]), mask).backward()
        assert (logits.grad[~mask] == 0).all()
        assert (logits.grad[mask] != 0).any()


class TestParameterAccounting:
    def test_formula_matches_enumeration(self):
        # hand count for (L=2, H=2, d=8, dff=16, C=4):
        #   per layer: 4*64 weights + 4*8 proj biases + 2*8*16 ffn weights
        #              + 16 + 8 ffn biases + 4*8 norm affine = 600
        #   final norm 16, head 4*8 + 4 = 36 -> total 1252
        cfg = TransformerConfig(num_layers=2, num_heads=2, model_dim=8,
                                ffn_dim=16, seq_len=6, num_classes=4)
        params = init_params(cfg, QuantSpec())
        enumerated = sum(t.size for t in params.tensors.values())
        assert enumerated == 1252
        assert parameter_count(cfg) == enumerated

    def test_formula_matches_enumeration_default_config(self):
        cfg = TransformerConfig()
        params = init_params(cfg, QuantSpec())
        assert parameter_count(cfg) == sum(t.size for t in params.tensors.values())

    def test_copy_is_deep(self, rng):
        params = init_params(TINY, QuantSpec("elastic", 2, 2))
        dup = params.copy()
        dup.tensors["head.b"].assign_(np.ones(4))
        assert not np.allclose(params.tensors["head.b"].data, 1.0)

    def test_frozen_copy_builds_no_graph(self, rng):
        params = init_params(TINY, QuantSpec()).frozen_copy()
        out, _ = forward(Tensor(rng.normal(size=(6, 8))), TINY, QuantSpec(), params)
        assert not out.requires_grad

    def test_head_output_is_continuous_under_quantization(self, rng):
        # the head stays float: nudging any input slightly moves the output
        spec = QuantSpec("elastic", 1, 1, "linear_only")
        params = init_params(TINY, spec)
        x = rng.normal(size=(6, 8))
        out1, _ = forward(Tensor(x), TINY, spec, params)
        out2, _ = forward(Tensor(x + 1e-9), TINY, spec, params)
        assert np.isfinite(out1.data).all() and np.isfinite(out2.data).all()

    def test_model_gradients_flow_under_quantization(self, rng):
        spec = QuantSpec("elastic", 2, 2, "linear_attention")
        params = init_params(TINY, spec)
        x = Tensor(rng.normal(size=(6, 8)))
        out, _ = forward(x, TINY, spec, params)
        tsum(out).backward()
        w = params.tensors["layers.0.attn.wq"]
        assert w.grad is not None and (w.grad != 0).any()
        assert params.act_quant["layers.0.act.attn_in"].alpha.grad is not None
