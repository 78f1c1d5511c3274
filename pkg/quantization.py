"""
Post-training quantization (fake-quant simulation)
Per-tensor min-max parameters: static for weights, dynamic for activations
and Q/K/V. Mixed-precision plans keep the most sensitive layer types in FP.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from artifact_io import load_json_artifact, save_json_artifact
from errors import ConfigError, FingerprintError, FormatError, InputError, NumericError, ScaleRangeError
from var_model import LAYER_TYPES, MultiScaleTransformer, iter_quantizable

logger = logging.getLogger(__name__)

SUPPORTED_BITS = (4, 6, 8)
QKV_BITS = (8,)
SCALE_EPS = 1e-12
FP_BITS = 16  # how an FP slot is reported in W/A/QKV labels


def qmax(bits: int) -> int:
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"bit-width must be one of {SUPPORTED_BITS}, got {bits!r}")
    return 2 ** (bits - 1) - 1


@dataclass(frozen=True)
class QuantParams:
    s: float
    z: float
    bits: int

    def __post_init__(self):
        qmax(self.bits)
        if not (math.isfinite(self.s) and self.s > 0) or not math.isfinite(self.z):
            raise NumericError(f"invalid quantization params s={self.s}, z={self.z}")

    @property
    def qmax(self) -> int:
        return qmax(self.bits)


@dataclass
class QuantTensor:
    values: torch.Tensor  # int8, already clamped
    params: QuantParams
    shape: Tuple[int, ...]
    dtype: torch.dtype = torch.float64


def calc_params(x: torch.Tensor, bits: int) -> QuantParams:
    """
    Min-max parameters: z = (max+min)/2, s = max|x - z| / (2^(B-1) - 1)

    Args:
        x: Non-empty finite tensor
        bits: Bit-width (4, 6 or 8)

    Returns:
        QuantParams with s floored at SCALE_EPS
    """
    if x.numel() == 0:
        raise InputError("cannot quantize an empty tensor")
    if not bool(torch.isfinite(x).all()):
        raise NumericError("tensor contains non-finite values")

    x_max = float(x.max())
    x_min = float(x.min())
    z = (x_max + x_min) / 2
    s = max(x_max - z, z - x_min) / qmax(bits)
    return QuantParams(s=max(s, SCALE_EPS), z=z, bits=bits)


def quantize(x: torch.Tensor, p: QuantParams) -> QuantTensor:
    """Clamp (x - z)/s to ±qmax and round half away from zero"""
    v = ((x.to(torch.float64) - p.z) / p.s).clamp(-p.qmax, p.qmax)
    q = torch.sign(v) * torch.floor(v.abs() + 0.5)
    return QuantTensor(values=q.to(torch.int8), params=p, shape=tuple(x.shape), dtype=x.dtype)


def dequantize(q: QuantTensor) -> torch.Tensor:
    return (q.values.to(torch.float64) * q.params.s + q.params.z).to(q.dtype)


def fake_quant(x: torch.Tensor, bits: int) -> torch.Tensor:
    """Quantize then dequantize with parameters computed from x itself"""
    return dequantize(quantize(x, calc_params(x, bits)))


# ========== PLANS ==========

@dataclass(frozen=True)
class LayerPrecision:
    """Bits for one layer type; None means full precision"""

    w_bits: Optional[int] = None
    a_bits: Optional[int] = None

    def __post_init__(self):
        for bits in (self.w_bits, self.a_bits):
            if bits is not None:
                qmax(bits)

    @property
    def is_fp(self) -> bool:
        return self.w_bits is None and self.a_bits is None

    def to_dict(self) -> Dict:
        return {'W': self.w_bits, 'A': self.a_bits}


FP = LayerPrecision()


def _bits_label(bits: Optional[int]) -> str:
    return str(FP_BITS if bits is None else bits)


@dataclass
class PrecisionPlan:
    """Per-layer-type bits plus the Q/K/V bit-width"""

    entries: Dict[str, LayerPrecision]
    qkv_bits: Optional[int] = None
    target: Dict[str, Optional[int]] = field(default_factory=dict)
    protected: List[str] = field(default_factory=list)
    scores: Dict[str, float] = field(default_factory=dict)
    model_fingerprint: Optional[str] = None
    calibration_fingerprint: Optional[str] = None
    note: str = ""

    def __post_init__(self):
        unknown = set(self.entries) - set(LAYER_TYPES)
        if unknown:
            raise FormatError(f"plan names unknown layer types: {sorted(unknown)}")
        missing = set(LAYER_TYPES) - set(self.entries)
        if missing:
            raise FormatError(f"plan does not cover layer types: {sorted(missing)}")
        if self.qkv_bits is not None and self.qkv_bits not in QKV_BITS:
            raise ConfigError(f"QKV bit-width must be one of {QKV_BITS} or FP, got {self.qkv_bits}")

    def is_fp(self) -> bool:
        return self.qkv_bits is None and all(e.is_fp for e in self.entries.values())

    def bitwidth_label(self) -> str:
        """W/A/QKV triplet, e.g. '4/8/8+MP' when layer types are protected"""
        label = "/".join(_bits_label(self.target.get(key)) for key in ('W', 'A', 'QKV'))
        return label + ("+MP" if self.protected else "")

    def check_model(self, model: MultiScaleTransformer):
        if self.model_fingerprint and self.model_fingerprint != model.config.fingerprint():
            raise FingerprintError("precision plan was produced for a different model")

    def to_dict(self) -> Dict:
        return {
            'target': dict(self.target),
            'qkv_bits': self.qkv_bits,
            'entries': {t: self.entries[t].to_dict() for t in LAYER_TYPES},
            'protected': list(self.protected),
            'scores': dict(self.scores),
            'model_fingerprint': self.model_fingerprint,
            'calibration_fingerprint': self.calibration_fingerprint,
            'bitwidth': self.bitwidth_label(),
            'note': self.note,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'PrecisionPlan':
        try:
            entries = {
                t: LayerPrecision(w_bits=e.get('W'), a_bits=e.get('A'))
                for t, e in data['entries'].items()
            }
            return cls(
                entries=entries,
                qkv_bits=data.get('qkv_bits'),
                target=dict(data.get('target', {})),
                protected=list(data.get('protected', [])),
                scores={t: float(v) for t, v in data.get('scores', {}).items()},
                model_fingerprint=data.get('model_fingerprint'),
                calibration_fingerprint=data.get('calibration_fingerprint'),
                note=data.get('note', ""),
            )
        except (KeyError, TypeError, AttributeError, ValueError) as e:
            raise FormatError(f"malformed precision plan: {e}")

    def save(self, path):
        save_json_artifact(path, 'plan', self.to_dict())

    @classmethod
    def load(cls, path) -> 'PrecisionPlan':
        return cls.from_dict(load_json_artifact(path, 'plan'))


def uniform_plan(w_bits: Optional[int], a_bits: Optional[int], qkv_bits: Optional[int] = None,
                 note: str = "uniform") -> PrecisionPlan:
    entry = LayerPrecision(w_bits, a_bits)
    return PrecisionPlan(
        entries={t: entry for t in LAYER_TYPES},
        qkv_bits=qkv_bits,
        target={'W': w_bits, 'A': a_bits, 'QKV': qkv_bits},
        note=note,
    )


def fp_plan() -> PrecisionPlan:
    return uniform_plan(None, None, None, note="full precision")


def plan_precision(scores: Dict[str, float], target: Dict[str, Optional[int]], protect_count: int = 1,
                   model_fingerprint: Optional[str] = None,
                   calibration_fingerprint: Optional[str] = None) -> PrecisionPlan:
    """
    Keep the protect_count most sensitive layer types in FP

    Args:
        scores: Sensitivity score for every layer type
        target: {'W': bits, 'A': bits, 'QKV': bits}; None = FP
        protect_count: How many layer types to protect (0..7)

    Returns:
        PrecisionPlan; ties resolve to the earlier type in LAYER_TYPES
    """
    missing = [t for t in LAYER_TYPES if t not in scores]
    if missing:
        raise InputError(f"scores missing for layer types: {missing}")
    if not isinstance(protect_count, int) or not 0 <= protect_count <= len(LAYER_TYPES):
        raise ScaleRangeError(f"protect_count must be in 0..{len(LAYER_TYPES)}, got {protect_count!r}")

    ranked = sorted(LAYER_TYPES, key=lambda t: (-scores[t], LAYER_TYPES.index(t)))
    protected = ranked[:protect_count]
    quantized = LayerPrecision(target.get('W'), target.get('A'))
    plan = PrecisionPlan(
        entries={t: FP if t in protected else quantized for t in LAYER_TYPES},
        qkv_bits=target.get('QKV'),
        target={'W': target.get('W'), 'A': target.get('A'), 'QKV': target.get('QKV')},
        protected=[t for t in LAYER_TYPES if t in protected],
        scores={t: float(scores[t]) for t in LAYER_TYPES},
        model_fingerprint=model_fingerprint,
        calibration_fingerprint=calibration_fingerprint,
        note=f"top-{protect_count} sensitivity protection" if protect_count else "uniform",
    )
    logger.info("precision plan %s protects %s", plan.bitwidth_label(), plan.protected or "nothing")
    return plan


# ========== MODULES ==========

def fake_quant_linear(x: torch.Tensor, layer: nn.Linear, entry: Optional[LayerPrecision]) -> torch.Tensor:
    """
    Linear layer under a plan entry

    Weights use static params from the weight tensor; activations use
    params computed from x on this call. FP entries bypass quantization.
    """
    if entry is None or entry.is_fp:
        return F.linear(x, layer.weight, layer.bias)
    weight = fake_quant(layer.weight, entry.w_bits) if entry.w_bits else layer.weight
    x = fake_quant(x, entry.a_bits) if entry.a_bits else x
    return F.linear(x, weight, layer.bias)


class FakeQuantLinear(nn.Module):
    """Drop-in replacement for nn.Linear with pre-quantized weights"""

    def __init__(self, linear: nn.Linear, entry: LayerPrecision):
        super().__init__()
        self.in_features = linear.in_features
        self.out_features = linear.out_features
        self.entry = entry
        source = linear.weight.detach()
        self.weight_params = calc_params(source, entry.w_bits) if entry.w_bits else None
        if self.weight_params is not None:
            weight = dequantize(quantize(source, self.weight_params))
        else:
            weight = source.clone()
        self.register_buffer('weight', weight)
        self.register_buffer('bias', None if linear.bias is None else linear.bias.detach().clone())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.entry.a_bits:
            x = fake_quant(x, self.entry.a_bits)
        return F.linear(x, self.weight, self.bias)

    def extra_repr(self) -> str:
        return f"in={self.in_features}, out={self.out_features}, W={self.entry.w_bits}, A={self.entry.a_bits}"


def quantize_qkv(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                 bits: Optional[int]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Dynamic per-tensor fake-quant of Q, K and V; bits=None passes them through"""
    if bits is None:
        return q, k, v
    if bits not in QKV_BITS:
        raise ConfigError(f"QKV bit-width must be one of {QKV_BITS} or FP, got {bits}")
    return fake_quant(q, bits), fake_quant(k, bits), fake_quant(v, bits)


def apply_plan(model: MultiScaleTransformer, plan: PrecisionPlan) -> MultiScaleTransformer:
    """
    Copy of the model with every non-FP layer swapped for FakeQuantLinear

    Args:
        model: FP model (left untouched)
        plan: Precision plan

    Returns:
        Quantized copy; weights are quantized here, once
    """
    plan.check_model(model)
    quantized = copy.deepcopy(model)

    swapped = 0
    for name, layer_type, module in list(iter_quantizable(quantized)):
        entry = plan.entries[layer_type]
        if entry.is_fp:
            continue
        parent_name, _, child = name.rpartition('.')
        parent = quantized.get_submodule(parent_name) if parent_name else quantized
        setattr(parent, child, FakeQuantLinear(module, entry))
        swapped += 1

    for block in quantized.blocks:
        block.attn.qkv_quantizer = partial(quantize_qkv, bits=plan.qkv_bits) if plan.qkv_bits else None

    logger.debug("applied plan %s: %d linears quantized, QKV %s",
                 plan.bitwidth_label(), swapped, plan.qkv_bits or 'FP')
    return quantized
