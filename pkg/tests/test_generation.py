"""
Tests for end-to-end generation, technique wiring and run records.
"""

import json

import pytest
import torch

from attn_calibration import design_pattern, record_dump
from errors import FingerprintError, FormatError, InputError
from generation import (
    BASELINE,
    CompressionOptions,
    RunRecord,
    generate,
    run_record,
    sample_labels,
)
from quantization import plan_precision, uniform_plan
from sparse_attention import AttentionExecutor
from var_model import LAYER_TYPES, SamplerConfig
from window_pattern import full_pattern


class TestGenerate:

    def test_token_maps_follow_schedule(self, tiny_model, tiny_config):
        maps, stats = generate(tiny_model, 0)
        assert [tuple(m.shape) for m in maps.maps] == [(s, s) for s in tiny_config.schedule.sides]
        assert all(int(m.max()) < tiny_config.vocab and int(m.min()) >= 0 for m in maps.maps)
        assert len(stats.scale_logits) == tiny_config.schedule.num_scales

    def test_deterministic(self, tiny_model):
        a, stats_a = generate(tiny_model, 6)
        b, stats_b = generate(tiny_model, 6)
        assert a.equals(b)
        assert all(torch.equal(x, y) for x, y in zip(stats_a.scale_logits, stats_b.scale_logits))

    def test_zero_guidance_ignores_label(self, tiny_model):
        sampler = SamplerConfig(cfg_scale=0.0)
        first, _ = generate(tiny_model, 0, sampler)
        for label in range(1, 10):
            maps, _ = generate(tiny_model, label, sampler)
            assert maps.equals(first)

    @pytest.mark.parametrize("label", [-1, 10, True, 2.0, "3"])
    def test_invalid_label(self, tiny_model, label):
        with pytest.raises(InputError):
            generate(tiny_model, label)

    def test_teacher_forcing_on_own_maps_is_identity(self, tiny_model):
        maps, stats = generate(tiny_model, 8)
        forced, forced_stats = generate(tiny_model, 8, reference=maps)
        assert forced.equals(maps)
        assert all(torch.equal(x, y) for x, y in zip(stats.scale_logits, forced_stats.scale_logits))

    def test_pattern_and_executor_conflict(self, tiny_model, tiny_config):
        pattern = full_pattern(tiny_config.schedule, tiny_config.depth, tiny_config.heads)
        with pytest.raises(InputError):
            generate(tiny_model, 0, opts=CompressionOptions(pattern=pattern),
                     executor=AttentionExecutor.for_model(tiny_config))

    def test_plan_leaves_model_untouched(self, tiny_model):
        before, _ = generate(tiny_model, 2)
        generate(tiny_model, 2, opts=CompressionOptions(plan=uniform_plan(4, 8, 8)))
        after, _ = generate(tiny_model, 2)
        assert before.equals(after)

    def test_all_techniques_together(self, tiny_model, tiny_config):
        pattern = full_pattern(tiny_config.schedule, tiny_config.depth, tiny_config.heads, r0=0.9)
        for block in range(tiny_config.depth):
            for head in range(tiny_config.heads):
                pattern.entries[(6, block, head, 4)] = 3
        scores = {t: float(i) for i, t in enumerate(LAYER_TYPES)}
        plan = plan_precision(scores, {'W': 4, 'A': 8, 'QKV': 8})
        maps, stats = generate(tiny_model, 1, opts=CompressionOptions(pattern=pattern, asc=True, plan=plan))
        assert len(maps) == tiny_config.schedule.num_scales
        assert all(bool(torch.isfinite(t).all()) for t in stats.scale_logits)


def test_full_threshold_pattern_reproduces_baseline(desk_model, desk_config):
    dump = record_dump(desk_model, [0, 1])
    pattern = design_pattern(dump, 1.0)
    assert pattern.is_all_full()
    executor = AttentionExecutor.for_model(desk_config, pattern)
    for label in sample_labels(desk_config, 20, seed=42):
        baseline, _ = generate(desk_model, label)
        windowed, _ = generate(desk_model, label, opts=CompressionOptions(pattern=pattern), executor=executor)
        assert windowed.equals(baseline), label


class TestSampleLabels:

    def test_deterministic(self, tiny_config):
        assert sample_labels(tiny_config, 12, seed=3) == sample_labels(tiny_config, 12, seed=3)

    def test_in_range(self, tiny_config):
        labels = sample_labels(tiny_config, 50, seed=1)
        assert len(labels) == 50
        assert all(0 <= label < tiny_config.class_count for label in labels)

    def test_needs_one_label(self, tiny_config):
        with pytest.raises(InputError):
            sample_labels(tiny_config, 0, seed=0)


class TestCompressionOptions:

    def test_baseline_description(self):
        assert BASELINE.describe() == {'mdwa': None, 'asc': False, 'quant': None}

    def test_full_description(self, tiny_config):
        pattern = full_pattern(tiny_config.schedule, tiny_config.depth, tiny_config.heads, r0=0.9)
        scores = {t: 1.0 if t == 'ffn.fc2' else 0.0 for t in LAYER_TYPES}
        plan = plan_precision(scores, {'W': 4, 'A': 8, 'QKV': 8})
        described = CompressionOptions(pattern=pattern, asc=True, plan=plan).describe()
        assert described == {'mdwa': {'r0': 0.9, 'sink_parts': 3}, 'asc': True, 'quant': '4/8/8+MP'}


class TestRunRecord:

    def test_save_load(self, tiny_model, tmp_path):
        record = run_record(tiny_model, 4, opts=CompressionOptions(asc=True, plan=uniform_plan(8, 8, 8)))
        record.save(tmp_path / "run.json")
        loaded = RunRecord.load(tmp_path / "run.json")
        assert loaded.label == 4
        assert loaded.config == record.config
        assert loaded.token_maps.equals(record.token_maps)
        assert loaded.stats.attn_flops == record.stats.attn_flops
        assert loaded.techniques == record.techniques
        assert loaded.plan.to_dict() == record.plan.to_dict()
        for a, b in zip(loaded.stats.scale_logits, record.stats.scale_logits):
            assert torch.equal(a, b)

    def test_teacher_forced_flag(self, tiny_model):
        base = run_record(tiny_model, 1)
        assert not base.teacher_forced
        assert run_record(tiny_model, 1, reference=base.token_maps).teacher_forced

    def test_tampered_fingerprint(self, tiny_model, tmp_path):
        run_record(tiny_model, 0).save(tmp_path / "run.json")
        document = json.loads((tmp_path / "run.json").read_text())
        document['model_fingerprint'] = 'f' * 32
        (tmp_path / "run.json").write_text(json.dumps(document))
        with pytest.raises(FingerprintError):
            RunRecord.load(tmp_path / "run.json")

    def test_malformed(self, tiny_model, tmp_path):
        run_record(tiny_model, 0).save(tmp_path / "run.json")
        document = json.loads((tmp_path / "run.json").read_text())
        del document['label']
        (tmp_path / "run.json").write_text(json.dumps(document))
        with pytest.raises(FormatError):
            RunRecord.load(tmp_path / "run.json")
