"""
Tests for key-axis partitioning, diagonal centres and pattern artifacts.
"""

import pytest
import torch

from errors import FingerprintError, FormatError, ScaleRangeError
from var_model import SCHEDULE_PRESETS, ScaleSchedule
from window_pattern import (
    FULL,
    WindowPattern,
    diagonal_center,
    diagonal_centers,
    full_pattern,
    part_centers,
    partition,
    pattern_summary,
)

DESK = ScaleSchedule((1, 2, 3, 4, 5, 6))


class TestPartition:

    def test_five_scales(self):
        layout = partition(DESK, 5)
        assert [(p.key_start, p.key_end) for p in layout] == [(0, 14), (14, 30), (30, 55)]

    def test_degenerate_scale_three(self):
        layout = partition(DESK, 3)
        assert [(p.key_start, p.key_end) for p in layout] == [(0, 14)]

    def test_scale_two_matches_map_shape(self):
        layout = partition(ScaleSchedule((1, 2)), 2)
        assert [(p.key_start, p.key_end) for p in layout] == [(0, 5)]

    @pytest.mark.parametrize("k", range(1, 11))
    def test_parts_tile_key_axis(self, k):
        schedule = ScaleSchedule(SCHEDULE_PRESETS['var10'])
        layout = partition(schedule, k)
        assert len(layout) == (k - 2 if k >= 3 else 1)
        assert layout.parts[0].key_start == 0
        assert layout.parts[-1].key_end == schedule.cum_tokens(k)
        for left, right in zip(layout.parts, layout.parts[1:]):
            assert left.key_end == right.key_start
        assert sum(p.width for p in layout) == schedule.cum_tokens(k)

    def test_single_scale_parts_end_with_current_scale(self):
        layout = partition(DESK, 6)
        assert layout.parts[0].source_scale_range == (1, 3)
        assert [p.source_scale_range for p in layout.parts[1:]] == [(4, 4), (5, 5), (6, 6)]

    def test_out_of_range(self):
        with pytest.raises(ScaleRangeError):
            partition(DESK, 7)


class TestDiagonalCenter:

    @pytest.mark.parametrize("q", range(16))
    def test_same_scale_is_identity(self, q):
        assert diagonal_center(q, 4, 4) == q

    def test_downsampled_examples(self):
        assert diagonal_center(5, 4, 2) == 0
        assert diagonal_center(15, 4, 2) == 3

    @pytest.mark.parametrize("s_k,s_m", [(6, 4), (5, 3), (16, 13), (3, 1)])
    def test_vectorized_matches_scalar(self, s_k, s_m):
        expected = [diagonal_center(q, s_k, s_m) for q in range(s_k * s_k)]
        assert diagonal_centers(s_k, s_m).tolist() == expected

    @pytest.mark.parametrize("k", range(1, 7))
    def test_part_centers_inside_part(self, k):
        for part in partition(DESK, k):
            centers = part_centers(DESK, k, part)
            assert int(centers.min()) >= 0
            assert int(centers.max()) < part.width


class TestWindowPattern:

    def _windowed(self):
        pattern = full_pattern(DESK, depth=1, heads=2, r0=0.9, sink_parts=3)
        pattern.entries[(6, 0, 0, 4)] = 2
        pattern.entries[(6, 0, 1, 4)] = 0
        return pattern

    def test_save_load(self, tmp_path):
        pattern = self._windowed()
        pattern.save(tmp_path / "pattern.json")
        loaded = WindowPattern.load(tmp_path / "pattern.json")
        assert loaded.entries == pattern.entries
        assert loaded.fingerprint == pattern.fingerprint

    def test_sink_part_must_be_full(self):
        pattern = self._windowed()
        pattern.entries[(6, 0, 0, 2)] = 3
        with pytest.raises(FormatError):
            pattern.validate()

    def test_r0_one_must_be_full(self):
        pattern = self._windowed()
        pattern.r0 = 1.0
        with pytest.raises(FormatError):
            pattern.validate()

    def test_width_bounded_by_part(self):
        pattern = self._windowed()
        pattern.entries[(6, 0, 0, 4)] = 37
        with pytest.raises(FormatError):
            pattern.validate()

    def test_missing_entry(self):
        pattern = self._windowed()
        del pattern.entries[(6, 0, 0, 4)]
        with pytest.raises(FormatError):
            pattern.validate()

    def test_tampered_fingerprint(self):
        data = self._windowed().to_dict()
        data['fingerprint'] = '0' * 32
        with pytest.raises(FingerprintError):
            WindowPattern.from_dict(data)

    def test_check_model_schedule_mismatch(self):
        with pytest.raises(FingerprintError):
            self._windowed().check_model(ScaleSchedule((1, 2, 3)), 1, 2)

    def test_check_model_shape_mismatch(self):
        with pytest.raises(FingerprintError):
            self._windowed().check_model(DESK, 4, 2)

    def test_summary(self):
        summary = pattern_summary(self._windowed())
        assert summary['entries'] == len(self._windowed().entries)
        assert summary['full_entries'] == summary['entries'] - 2
        last = summary['scales'][-1]
        assert last['windowed_entries'] == 2
        assert last['mean_width'] == 1.0

    def test_full_pattern_is_all_full(self):
        pattern = full_pattern(DESK, depth=2, heads=2)
        assert pattern.is_all_full()
        assert all(w == FULL for w in pattern.entries.values())
        pattern.validate()


def test_part_centers_multi_scale_part_uses_finest_scale():
    schedule = ScaleSchedule((1, 2, 4, 4))
    part = partition(schedule, 4).parts[0]
    centers = part_centers(schedule, 4, part)
    # finest scale of part 1 is scale 3 (side 4), which starts at key 5
    assert torch.equal(centers, torch.arange(16) + 5)
