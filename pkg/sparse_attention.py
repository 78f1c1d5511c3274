"""
Attention execution - dense or windowed by a WindowPattern
Masks are materialized once per executor; attention is computed as a dense
matmul with masked logits, which is exactly what a banded kernel would return.
"""

import logging
import math
from typing import Dict, Optional, Tuple

import torch

from errors import MaskError, ShapeError
from var_model import ModelConfig, RunStats, ScaleSchedule
from window_pattern import FULL, WindowPattern, part_centers, partition

logger = logging.getLogger(__name__)


def pattern_to_mask(pattern: WindowPattern, schedule: ScaleSchedule, k: int, block: int, head: int) -> torch.Tensor:
    """
    Materialize one (scale, block, head) slice of a pattern

    Args:
        pattern: Window pattern
        schedule: Schedule of the model the mask is for
        k: 1-based scale index
        block: Block index
        head: Head index

    Returns:
        Bool tensor [s_k^2, cum_tokens(k)], True = key visible
    """
    pattern.check_model(schedule, pattern.depth, pattern.heads)

    rows = schedule.token_count(k)
    mask = torch.zeros(rows, schedule.cum_tokens(k), dtype=torch.bool)
    for part in partition(schedule, k):
        width = pattern.width(k, block, head, part.index)
        if width == FULL:
            mask[:, part.key_start:part.key_end] = True
            continue
        if width == 0:
            continue
        centers = part_centers(schedule, k, part)
        cols = torch.arange(part.width)
        band = (cols.unsqueeze(0) - centers.unsqueeze(1)).abs() <= width - 1
        mask[:, part.key_start:part.key_end] = band
    return mask


def _check_rows(mask: torch.Tensor):
    empty = (mask.sum(dim=-1) == 0)
    if empty.any():
        raise MaskError(f"{int(empty.sum())} attention rows have no visible key")


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                     mask: Optional[torch.Tensor], scale_factor: float) -> torch.Tensor:
    """
    Softmax attention restricted to visible keys

    Args:
        q: Queries [..., n, d]
        k: Keys [..., m, d]
        v: Values [..., m, d]
        mask: Bool [..., n, m] (broadcastable) or None for dense
        scale_factor: Multiplier applied to q @ k^T

    Returns:
        Output [..., n, d]
    """
    return attention_probs(q, k, mask, scale_factor) @ v


def attention_probs(q: torch.Tensor, k: torch.Tensor, mask: Optional[torch.Tensor],
                    scale_factor: float) -> torch.Tensor:
    """Post-softmax attention weights; masked keys get exactly zero"""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    scores = (q @ k.transpose(-2, -1)) * scale_factor
    if mask is not None:
        if mask.shape[-2:] != scores.shape[-2:]:
            raise ShapeError(f"mask {tuple(mask.shape)} does not match scores {tuple(scores.shape)}")
        _check_rows(mask)
        scores = scores.masked_fill(~mask, float('-inf'))
    return torch.softmax(scores, dim=-1)


class AttentionExecutor:
    """
    Runs every attention call of a generation

    Dense when built without a pattern; otherwise applies the pattern's mask
    for the (scale, block) being computed. All-true masks are dropped so FULL
    entries take the dense path.
    """

    def __init__(self, schedule: ScaleSchedule, depth: int, heads: int,
                 pattern: Optional[WindowPattern] = None):
        self.schedule = schedule
        self.depth = depth
        self.heads = heads
        self.pattern = pattern
        self.masks: Dict[Tuple[int, int], Optional[torch.Tensor]] = {}
        self.visible: Dict[Tuple[int, int], int] = {}

        if pattern is not None:
            pattern.check_model(schedule, depth, heads)
        for k in range(1, schedule.num_scales + 1):
            dense = schedule.token_count(k) * schedule.cum_tokens(k) * heads
            for block in range(depth):
                mask = None
                if pattern is not None:
                    mask = torch.stack([pattern_to_mask(pattern, schedule, k, block, h) for h in range(heads)])
                    _check_rows(mask)
                    if bool(mask.all()):
                        mask = None
                self.masks[(k, block)] = mask
                self.visible[(k, block)] = dense if mask is None else int(mask.sum())

        if pattern is not None:
            logger.debug("windowed executor: %d of %d (scale, block) slices masked",
                         sum(m is not None for m in self.masks.values()), len(self.masks))

    @classmethod
    def for_model(cls, config: ModelConfig, pattern: Optional[WindowPattern] = None) -> 'AttentionExecutor':
        return cls(config.schedule, config.depth, config.heads, pattern)

    def attend(self, q: torch.Tensor, keys: torch.Tensor, values: torch.Tensor, k: int, block: int,
               stats: Optional[RunStats] = None, stream: str = 'cond') -> torch.Tensor:
        """
        Attention for all queries of scale k in one block

        Args:
            q: Queries [heads, s_k^2, head_dim]
            keys: Cached + current keys [heads, cum_tokens(k), head_dim]
            values: Cached + current values, same shape as keys
            k: 1-based scale index
            block: Block index
            stats: Optional counters
            stream: 'cond' or 'uncond'

        Returns:
            Output [heads, s_k^2, head_dim]
        """
        mask = self.masks[(k, block)]
        head_dim = q.shape[-1]
        probs = attention_probs(q, keys, mask, 1.0 / math.sqrt(head_dim))
        out = probs @ values
        if stats is not None:
            stats.add_attention(self.visible[(k, block)], head_dim)
        self.observe(stream, k, block, probs, out)
        return out

    def observe(self, stream: str, k: int, block: int, probs: torch.Tensor, out: torch.Tensor):
        """Hook for subclasses that capture attention; no-op here"""


class AttentionRecorder(AttentionExecutor):
    """Executor that keeps attention weights and/or outputs of selected streams"""

    def __init__(self, schedule: ScaleSchedule, depth: int, heads: int,
                 pattern: Optional[WindowPattern] = None, capture_probs: bool = True,
                 capture_outputs: bool = False, streams: Tuple[str, ...] = ('cond',)):
        super().__init__(schedule, depth, heads, pattern)
        self.capture_probs = capture_probs
        self.capture_outputs = capture_outputs
        self.streams = streams
        self.probs: Dict[Tuple[str, int, int], torch.Tensor] = {}
        self.outputs: Dict[Tuple[str, int, int], torch.Tensor] = {}

    def reset(self):
        self.probs.clear()
        self.outputs.clear()

    def observe(self, stream, k, block, probs, out):
        if stream not in self.streams:
            return
        if self.capture_probs:
            self.probs[(stream, k, block)] = probs.detach().to(torch.float32).clone()
        if self.capture_outputs:
            self.outputs[(stream, k, block)] = out.detach().clone()


def attn_flops(pattern: Optional[WindowPattern], schedule: ScaleSchedule, depth: int, heads: int,
               head_dim: int, streams: int = 1) -> Dict:
    """
    Attention FLOPs (QK^T plus AV, 2 FLOPs per multiply-add) for a pattern

    Args:
        pattern: Window pattern, or None for full attention
        schedule: Scale schedule
        depth: Block count
        heads: Head count
        head_dim: Per-head width
        streams: Attention passes per scale (2 for baseline CFG, 1 under ASC)

    Returns:
        Dict with total_flops, full_flops and saving = 1 - total/full
    """
    full = 0
    total = 0
    visible = _visible_counts(pattern, schedule, depth, heads)
    for k in range(1, schedule.num_scales + 1):
        dense = schedule.token_count(k) * schedule.cum_tokens(k) * heads
        full += 4 * dense * head_dim * depth * streams
        total += 4 * head_dim * streams * sum(visible[(k, b)] for b in range(depth))
    return {
        'total_flops': total,
        'full_flops': full,
        'saving': (1.0 - total / full) if full else 0.0,
    }


def _visible_counts(pattern: Optional[WindowPattern], schedule: ScaleSchedule,
                    depth: int, heads: int) -> Dict[Tuple[int, int], int]:
    counts = {}
    for k in range(1, schedule.num_scales + 1):
        dense = schedule.token_count(k) * schedule.cum_tokens(k) * heads
        for block in range(depth):
            if pattern is None:
                counts[(k, block)] = dense
            else:
                counts[(k, block)] = sum(
                    int(pattern_to_mask(pattern, schedule, k, block, h).sum()) for h in range(heads)
                )
    return counts


def visible_key_count(pattern: Optional[WindowPattern], schedule: ScaleSchedule, depth: int, heads: int) -> int:
    """Visible (query, key) pairs summed over every scale, block and head"""
    return sum(_visible_counts(pattern, schedule, depth, heads).values())
