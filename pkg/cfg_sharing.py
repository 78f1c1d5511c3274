"""
Attention sharing across the two CFG streams
The conditional stream computes the attention sub-block once per block and
the unconditional stream adds the very same tensor to its residual.
"""

import logging
from typing import List, Optional, Tuple

import torch

from errors import InputError, ShapeError
from var_model import AdaLNBlock, KVCache, MultiScaleTransformer, RunStats

logger = logging.getLogger(__name__)

# Entries of an ASC trace: (scale, block, cond attention sub-output, uncond attention sub-output)
TraceEntry = Tuple[int, int, torch.Tensor, torch.Tensor]


def run_block_asc(block: AdaLNBlock, cond_hidden: torch.Tensor, uncond_hidden: torch.Tensor,
                  cache_cond: KVCache, k: int, attn_exec, cond_vec: torch.Tensor, uncond_vec: torch.Tensor,
                  stats: Optional[RunStats] = None,
                  trace: Optional[List[TraceEntry]] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    One block for both CFG streams with a shared attention sub-output

    Args:
        block: Transformer block
        cond_hidden: Conditional stream input [n, dim]
        uncond_hidden: Unconditional stream input [n, dim]
        cache_cond: Conditional KV cache (the only one written)
        k: 1-based scale index
        attn_exec: Attention executor
        cond_vec: Conditional class vector
        uncond_vec: Null-label class vector
        stats: Optional counters
        trace: Optional list receiving the tensors each stream added

    Returns:
        (cond_out, uncond_out)
    """
    if cond_hidden.shape != uncond_hidden.shape:
        raise ShapeError(f"cond hidden {tuple(cond_hidden.shape)} vs uncond {tuple(uncond_hidden.shape)}")

    cond_mod = block.modulation(cond_vec, stats)
    uncond_mod = block.modulation(uncond_vec, stats)

    shared = block.attention_residual(cond_hidden, cond_mod, cache_cond, k, attn_exec, stats, 'cond')
    cond_out = cond_hidden + shared
    uncond_out = uncond_hidden + shared
    if trace is not None:
        trace.append((k, block.block_idx, shared, shared))

    cond_out = cond_out + block.ffn_residual(cond_out, cond_mod, stats)
    uncond_out = uncond_out + block.ffn_residual(uncond_out, uncond_mod, stats)
    return cond_out, uncond_out


def forward_scale_asc(model: MultiScaleTransformer, cond_hidden: torch.Tensor, uncond_hidden: torch.Tensor,
                      k: int, cache_cond: KVCache, attn_exec, cond_vec: torch.Tensor, uncond_vec: torch.Tensor,
                      stats: Optional[RunStats] = None,
                      trace: Optional[List[TraceEntry]] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Scale-k logits of both streams with attention shared at every block"""
    schedule = model.config.schedule
    schedule.check_scale(k)
    cache_cond.check_rows(schedule.prefix[k - 1])

    expected = (schedule.token_count(k), model.config.dim)
    if tuple(cond_hidden.shape) != expected:
        raise ShapeError(f"scale {k} input has shape {tuple(cond_hidden.shape)}, expected {expected}")

    cond_x, uncond_x = cond_hidden, uncond_hidden
    for block in model.blocks:
        cond_x, uncond_x = run_block_asc(block, cond_x, uncond_x, cache_cond, k, attn_exec,
                                         cond_vec, uncond_vec, stats, trace)
    logger.debug("scale %d: attention shared across %d blocks", k, len(model.blocks))
    return model.logits(cond_x, stats), model.logits(uncond_x, stats)


def asc_savings(mdwa_saving: float = 0.0) -> float:
    """
    Fraction of baseline attention compute removed by ASC (optionally on top of MDWA)

    The model shape cancels out: ASC always drops one of the two streams,
    so the result is 1 - (1 - mdwa_saving) / 2.
    """
    if not 0.0 <= mdwa_saving <= 1.0:
        raise InputError(f"mdwa_saving must be in [0, 1], got {mdwa_saving}")
    return 1.0 - (1.0 - mdwa_saving) / 2
