"""
Tests for min-max fake quantization, precision plans and plan application.
"""

import math

import pytest
import torch
import torch.nn as nn

from errors import ConfigError, FingerprintError, FormatError, InputError, NumericError, ScaleRangeError
from quantization import (
    FP,
    SCALE_EPS,
    FakeQuantLinear,
    LayerPrecision,
    PrecisionPlan,
    calc_params,
    dequantize,
    fake_quant,
    fake_quant_linear,
    fp_plan,
    apply_plan,
    plan_precision,
    qmax,
    quantize,
    quantize_qkv,
    uniform_plan,
)
from sparse_attention import masked_attention
from var_model import LAYER_TYPES, iter_quantizable, weight_checksum


def uniform(*shape, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=gen, dtype=torch.float64) * 2 - 1


def relative_error(a, b):
    return float(torch.linalg.norm(a - b) / torch.linalg.norm(b))


def scores_with(top, value=1.0):
    scores = {t: 0.1 for t in LAYER_TYPES}
    for t in top:
        scores[t] = value
    return scores


class TestCalcParams:

    def test_symmetric_example(self):
        p = calc_params(torch.tensor([-2.0, 0.0, 2.0], dtype=torch.float64), 8)
        assert p.z == 0.0
        assert p.s == pytest.approx(2 / 127)

    def test_constant_tensor(self):
        x = torch.full((3,), 5.0, dtype=torch.float64)
        p = calc_params(x, 8)
        assert p.z == 5.0
        assert p.s == SCALE_EPS
        assert torch.equal(dequantize(quantize(x, p)), x)

    def test_offset_range(self):
        p = calc_params(torch.tensor([1.0, 3.0], dtype=torch.float64), 4)
        assert p.z == 2.0
        assert p.s == pytest.approx(1 / 7)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            calc_params(torch.tensor([1.0, float('nan')]), 8)

    def test_empty(self):
        with pytest.raises(InputError):
            calc_params(torch.zeros(0), 8)

    @pytest.mark.parametrize("bits", [2, 3, 16])
    def test_unsupported_bits(self, bits):
        with pytest.raises(ConfigError):
            qmax(bits)


class TestQuantize:

    def test_top_of_range_maps_to_qmax(self):
        p = calc_params(torch.tensor([-2.0, 0.0, 2.0], dtype=torch.float64), 8)
        assert quantize(torch.tensor([2.0], dtype=torch.float64), p).values.tolist() == [127]

    def test_zero_point_maps_to_zero(self):
        p = calc_params(torch.tensor([1.0, 3.0], dtype=torch.float64), 8)
        assert quantize(torch.tensor([2.0], dtype=torch.float64), p).values.tolist() == [0]

    def test_out_of_range_clamps(self):
        p = calc_params(torch.tensor([-2.0, 2.0], dtype=torch.float64), 8)
        q = quantize(torch.tensor([-50.0, 50.0], dtype=torch.float64), p)
        assert q.values.tolist() == [-127, 127]

    def test_rounds_half_away_from_zero(self):
        p = calc_params(torch.tensor([-7.0, 7.0], dtype=torch.float64), 4)
        q = quantize(torch.tensor([-2.5, -0.5, 0.5, 2.5], dtype=torch.float64), p)
        assert q.values.tolist() == [-3, -1, 1, 3]

    def test_dequantize_zero_is_zero_point(self):
        p = calc_params(torch.tensor([1.0, 3.0], dtype=torch.float64), 8)
        q = quantize(torch.tensor([2.0], dtype=torch.float64), p)
        assert dequantize(q).item() == 2.0

    @pytest.mark.parametrize("bits", [4, 6, 8])
    def test_round_trip_bound(self, bits):
        gen = torch.Generator().manual_seed(bits)
        for _ in range(1000):
            x = torch.randn(24, generator=gen, dtype=torch.float64) * float(torch.rand(1, generator=gen) * 10 + 0.1)
            p = calc_params(x, bits)
            q = quantize(x, p)
            assert int(q.values.abs().max()) <= qmax(bits)
            assert float((x - dequantize(q)).abs().max()) <= p.s / 2 + 1e-9

    def test_fewer_bits_larger_error(self):
        x = uniform(256, seed=4)
        mse8 = float(((fake_quant(x, 8) - x) ** 2).mean())
        mse4 = float(((fake_quant(x, 4) - x) ** 2).mean())
        assert mse4 >= mse8


class TestFakeQuantLinear:

    def _layer(self):
        layer = nn.Linear(64, 64, dtype=torch.float64)
        with torch.no_grad():
            layer.weight.copy_(uniform(64, 64, seed=1))
            layer.bias.copy_(uniform(64, seed=2))
        return layer

    def test_fp_entry_bypasses(self):
        layer = self._layer()
        x = uniform(8, 64, seed=3)
        assert torch.equal(fake_quant_linear(x, layer, FP), layer(x))
        assert torch.equal(fake_quant_linear(x, layer, None), layer(x))

    def test_w8a8_error_below_one_percent(self):
        layer = self._layer()
        x = uniform(32, 64, seed=5)
        out = fake_quant_linear(x, layer, LayerPrecision(8, 8))
        assert relative_error(out, layer(x)) < 0.01

    def test_deterministic(self):
        layer = self._layer()
        x = uniform(8, 64, seed=6)
        entry = LayerPrecision(4, 8)
        assert torch.equal(fake_quant_linear(x, layer, entry), fake_quant_linear(x, layer, entry))

    def test_module_matches_function(self):
        layer = self._layer()
        entry = LayerPrecision(6, 8)
        module = FakeQuantLinear(layer, entry)
        x = uniform(8, 64, seed=7)
        assert torch.equal(module(x), fake_quant_linear(x, layer, entry))
        assert (module.in_features, module.out_features) == (64, 64)

    def test_weights_quantized_once(self):
        layer = self._layer()
        module = FakeQuantLinear(layer, LayerPrecision(4, None))
        assert module.weight.unique().numel() <= 2 * qmax(4) + 1

    def test_weight_params_are_kept(self):
        layer = self._layer()
        module = FakeQuantLinear(layer, LayerPrecision(8, 8))
        assert module.weight_params == calc_params(layer.weight.detach(), 8)
        assert torch.equal(module.weight, dequantize(quantize(layer.weight.detach(), module.weight_params)))
        assert FakeQuantLinear(layer, LayerPrecision(None, 8)).weight_params is None


class TestQuantizeQKV:

    def test_fp_is_identity(self):
        q, k, v = uniform(2, 9, 8, seed=1), uniform(2, 14, 8, seed=2), uniform(2, 14, 8, seed=3)
        out = quantize_qkv(q, k, v, None)
        assert all(a is b for a, b in zip(out, (q, k, v)))

    def test_zero_tensor_stays_zero(self):
        zero = torch.zeros(2, 4, 8, dtype=torch.float64)
        for t in quantize_qkv(zero, zero, zero, 8):
            assert torch.equal(t, zero)

    def test_qkv8_attention_error_below_one_percent(self):
        q, k, v = uniform(2, 9, 8, seed=1), uniform(2, 14, 8, seed=2), uniform(2, 14, 8, seed=3)
        mask = torch.ones(9, 14, dtype=torch.bool)
        exact = masked_attention(q, k, v, mask, 1 / math.sqrt(8))
        approx = masked_attention(*quantize_qkv(q, k, v, 8), mask, 1 / math.sqrt(8))
        assert relative_error(approx, exact) < 0.01

    def test_only_eight_bits(self):
        x = uniform(1, 2, 2)
        with pytest.raises(ConfigError):
            quantize_qkv(x, x, x, 4)


class TestPlanPrecision:

    def test_protects_top_type(self):
        plan = plan_precision(scores_with(['ffn.fc2']), {'W': 4, 'A': 8, 'QKV': 8})
        assert plan.protected == ['ffn.fc2']
        assert plan.entries['ffn.fc2'].is_fp
        assert all(plan.entries[t] == LayerPrecision(4, 8) for t in LAYER_TYPES if t != 'ffn.fc2')
        assert plan.bitwidth_label() == '4/8/8+MP'

    def test_zero_protection_is_uniform(self):
        plan = plan_precision(scores_with(['ffn.fc2']), {'W': 4, 'A': 8, 'QKV': 8}, protect_count=0)
        assert plan.protected == []
        assert plan.entries == uniform_plan(4, 8, 8).entries
        assert plan.bitwidth_label() == '4/8/8'

    def test_tie_breaks_by_enumeration_order(self):
        plan = plan_precision(scores_with(['ffn.fc2', 'attn.proj']), {'W': 4, 'A': 8})
        assert plan.protected == ['attn.proj']

    @pytest.mark.parametrize("count", [-1, 8])
    def test_protect_count_range(self, count):
        with pytest.raises(ScaleRangeError):
            plan_precision(scores_with([]), {'W': 4, 'A': 8}, protect_count=count)

    def test_missing_scores(self):
        scores = scores_with([])
        del scores['head']
        with pytest.raises(InputError):
            plan_precision(scores, {'W': 4, 'A': 8})

    def test_protect_all(self):
        plan = plan_precision(scores_with([]), {'W': 4, 'A': 8}, protect_count=7)
        assert plan.protected == list(LAYER_TYPES)


class TestPrecisionPlan:

    def test_save_load(self, tmp_path):
        plan = plan_precision(scores_with(['ffn.fc2']), {'W': 4, 'A': 8, 'QKV': 8}, model_fingerprint='a' * 32)
        plan.save(tmp_path / "plan.json")
        loaded = PrecisionPlan.load(tmp_path / "plan.json")
        assert loaded.to_dict() == plan.to_dict()

    def test_missing_layer_type(self):
        data = uniform_plan(8, 8).to_dict()
        del data['entries']['head']
        with pytest.raises(FormatError):
            PrecisionPlan.from_dict(data)

    def test_unknown_layer_type(self):
        data = uniform_plan(8, 8).to_dict()
        data['entries']['attn.out'] = {'W': 8, 'A': 8}
        with pytest.raises(FormatError):
            PrecisionPlan.from_dict(data)

    def test_qkv_bits_restricted(self):
        with pytest.raises(ConfigError):
            uniform_plan(8, 8, 4)

    def test_fp_plan(self):
        plan = fp_plan()
        assert plan.is_fp()
        assert plan.bitwidth_label() == '16/16/16'

    def test_model_fingerprint_checked(self, tiny_model):
        plan = uniform_plan(8, 8)
        plan.model_fingerprint = '0' * 32
        with pytest.raises(FingerprintError):
            apply_plan(tiny_model, plan)


class TestApplyPlan:

    def test_original_untouched(self, tiny_model):
        checksum = weight_checksum(tiny_model)
        apply_plan(tiny_model, uniform_plan(4, 8, 8))
        assert weight_checksum(tiny_model) == checksum

    def test_swaps_non_fp_layers(self, tiny_model):
        plan = plan_precision(scores_with(['ffn.fc2']), {'W': 4, 'A': 8, 'QKV': 8})
        quantized = apply_plan(tiny_model, plan)
        for _, layer_type, module in iter_quantizable(quantized):
            if layer_type == 'ffn.fc2':
                assert isinstance(module, nn.Linear)
            else:
                assert isinstance(module, FakeQuantLinear)
        assert all(block.attn.qkv_quantizer is not None for block in quantized.blocks)

    def test_fp_plan_leaves_model_equivalent(self, tiny_model):
        quantized = apply_plan(tiny_model, fp_plan())
        assert weight_checksum(quantized) == weight_checksum(tiny_model)
        assert all(block.attn.qkv_quantizer is None for block in quantized.blocks)
