"""
Quantization sensitivity - per-layer-type error scans and bit-width sweeps
Errors are measured teacher-forced on the FP baseline's tokens, so every
configuration sees identical inputs at every scale.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from tqdm import tqdm

from errors import InputError
from generation import CompressionOptions, generate
from quantization import FP, LayerPrecision, PrecisionPlan, plan_precision, uniform_plan
from var_model import LAYER_TYPES, MultiScaleTransformer, SamplerConfig, TokenMapSet

logger = logging.getLogger(__name__)

# (W, A, QKV) rows of a bit-width sweep; None = FP
BITWIDTH_GRID: Tuple[Tuple[Optional[int], Optional[int], Optional[int]], ...] = (
    (8, 8, None),
    (8, 8, 8),
    (6, 8, 8),
    (4, 8, 8),
    (6, 6, 8),
    (4, 6, 8),
)

Baseline = List[Tuple[TokenMapSet, List[torch.Tensor]]]


def relative_l2(estimate: torch.Tensor, reference: torch.Tensor) -> float:
    """||estimate - reference|| / ||reference|| (0 when both are zero)"""
    diff = torch.linalg.vector_norm((estimate - reference).to(torch.float64))
    norm = torch.linalg.vector_norm(reference.to(torch.float64))
    if norm == 0:
        return 0.0 if diff == 0 else float('inf')
    return float(diff / norm)


def logits_error(estimate: Sequence[torch.Tensor], reference: Sequence[torch.Tensor]) -> float:
    """Mean relative L2 of combined logits over scales"""
    if len(estimate) != len(reference) or not reference:
        raise InputError(f"logit lists differ in length: {len(estimate)} vs {len(reference)}")
    return sum(relative_l2(e, r) for e, r in zip(estimate, reference)) / len(reference)


def baseline_runs(model: MultiScaleTransformer, labels: Sequence[int],
                  sampler: Optional[SamplerConfig] = None) -> Baseline:
    """FP token maps and combined logits per label"""
    if not labels:
        raise InputError("need a non-empty label set")
    runs = []
    for label in labels:
        maps, stats = generate(model, label, sampler)
        runs.append((maps, stats.scale_logits))
    return runs


def proxy_error(model: MultiScaleTransformer, opts: CompressionOptions, labels: Sequence[int],
                sampler: Optional[SamplerConfig] = None, baseline: Optional[Baseline] = None) -> float:
    """
    End-to-end error of a configuration against the FP baseline

    Args:
        model: FP model
        opts: Techniques under test
        labels: Evaluation labels
        sampler: Guidance settings
        baseline: Precomputed baseline_runs for the same labels

    Returns:
        Mean logits relative L2 over labels and scales
    """
    baseline = baseline or baseline_runs(model, labels, sampler)
    errors = []
    for label, (maps, logits) in zip(labels, baseline):
        _, stats = generate(model, label, sampler, opts, reference=maps)
        errors.append(logits_error(stats.scale_logits, logits))
    return sum(errors) / len(errors)


def sensitivity_scan(model: MultiScaleTransformer, labels: Sequence[int], target: Dict[str, Optional[int]],
                     sampler: Optional[SamplerConfig] = None, progress: bool = False,
                     baseline: Optional[Baseline] = None) -> Dict[str, float]:
    """
    Error from quantizing each layer type alone at the target bits

    Args:
        model: FP model
        labels: Calibration labels (non-empty)
        target: {'W': bits, 'A': bits}; None leaves that side FP
        sampler: Guidance settings
        progress: Show a tqdm bar

    Returns:
        Dict layer type -> mean logits relative L2 vs the FP baseline
    """
    labels = list(labels)
    if not labels:
        raise InputError("sensitivity scan needs a non-empty calibration set")

    baseline = baseline or baseline_runs(model, labels, sampler)
    quantized = LayerPrecision(target.get('W'), target.get('A'))
    scores = {}
    for layer_type in tqdm(LAYER_TYPES, desc="scanning", unit="layer", disable=not progress):
        plan = PrecisionPlan(entries={t: quantized if t == layer_type else FP for t in LAYER_TYPES})
        scores[layer_type] = proxy_error(model, CompressionOptions(plan=plan), labels, sampler, baseline)
        logger.debug("sensitivity %s: %.6f", layer_type, scores[layer_type])
    return scores


def bitwidth_sweep(model: MultiScaleTransformer, labels: Sequence[int],
                   grid=BITWIDTH_GRID, protect_count: int = 1,
                   sampler: Optional[SamplerConfig] = None, progress: bool = False) -> List[Dict]:
    """
    Proxy error of uniform and mixed-precision plans over a bit-width grid

    Returns:
        Rows {bitwidth, uniform_error, mp_bitwidth, mp_error, protected}
    """
    labels = list(labels)
    baseline = baseline_runs(model, labels, sampler)
    rows = []
    for w_bits, a_bits, qkv_bits in tqdm(grid, desc="sweeping", unit="config", disable=not progress):
        uniform = uniform_plan(w_bits, a_bits, qkv_bits)
        target = {'W': w_bits, 'A': a_bits, 'QKV': qkv_bits}
        scores = sensitivity_scan(model, labels, target, sampler, baseline=baseline)
        mixed = plan_precision(scores, target, protect_count)
        rows.append({
            'bitwidth': uniform.bitwidth_label(),
            'uniform_error': proxy_error(model, CompressionOptions(plan=uniform), labels, sampler, baseline),
            'mp_bitwidth': mixed.bitwidth_label(),
            'mp_error': proxy_error(model, CompressionOptions(plan=mixed), labels, sampler, baseline),
            'protected': mixed.protected,
        })
    return rows
