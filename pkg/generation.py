"""
Scale-by-scale generation with classifier-free guidance
Wires the model to the optional compression passes (window pattern,
attention sharing, precision plan) and records run artifacts.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch

from artifact_io import load_json_artifact, save_json_artifact
from cfg_sharing import TraceEntry, forward_scale_asc
from errors import FingerprintError, FormatError, InputError
from quantization import PrecisionPlan, apply_plan
from sparse_attention import AttentionExecutor
from var_model import (
    KVCache,
    ModelConfig,
    MultiScaleTransformer,
    RunStats,
    SamplerConfig,
    TokenMapSet,
    cfg_combine,
    forward_scale,
)
from window_pattern import WindowPattern

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CompressionOptions:
    """Which techniques a run uses; the default is the FP baseline"""

    pattern: Optional[WindowPattern] = None
    asc: bool = False
    plan: Optional[PrecisionPlan] = None

    def describe(self) -> Dict:
        return {
            'mdwa': None if self.pattern is None else {'r0': self.pattern.r0, 'sink_parts': self.pattern.sink_parts},
            'asc': self.asc,
            'quant': None if self.plan is None or self.plan.is_fp() else self.plan.bitwidth_label(),
        }


BASELINE = CompressionOptions()


def check_label(config: ModelConfig, label) -> int:
    if not isinstance(label, int) or isinstance(label, bool) or not 0 <= label < config.class_count:
        raise InputError(f"label {label!r} outside 0..{config.class_count - 1}")
    return label


def sample_labels(config: ModelConfig, count: int, seed: int) -> List[int]:
    """Deterministic calibration/evaluation labels drawn from one seed"""
    if count < 1:
        raise InputError(f"need at least one label, got {count}")
    gen = torch.Generator().manual_seed(seed)
    return torch.randint(0, config.class_count, (count,), generator=gen).tolist()


def generate(model: MultiScaleTransformer, label: int, sampler: Optional[SamplerConfig] = None,
             opts: CompressionOptions = BASELINE, reference: Optional[TokenMapSet] = None,
             executor: Optional[AttentionExecutor] = None,
             asc_trace: Optional[List[TraceEntry]] = None) -> Tuple[TokenMapSet, RunStats]:
    """
    Generate all token maps for one class label

    Args:
        model: FP model (a precision plan in opts is applied to a copy)
        label: Class id in [0, class_count)
        sampler: Guidance settings (default cfg_scale 4, argmax)
        opts: Compression techniques to enable
        reference: Teacher-forcing token maps; when given, each scale is fed
            the reference tokens of the previous scale instead of its own
        executor: Attention executor to use instead of one built from opts.pattern
        asc_trace: Receives the shared attention tensors when ASC is on

    Returns:
        (token maps, run stats with combined logits per scale)
    """
    config = model.config
    check_label(config, label)
    sampler = sampler or SamplerConfig()
    schedule = config.schedule

    if reference is not None:
        reference.check_schedule(schedule)
    if opts.plan is not None:
        model = apply_plan(model, opts.plan)
    if executor is None:
        executor = AttentionExecutor.for_model(config, opts.pattern)
    elif opts.pattern is not None and executor.pattern is not opts.pattern:
        raise InputError("pass either a pattern or a prebuilt executor, not both")

    stats = RunStats()
    cond_vec = model.class_vector(label)
    uncond_vec = model.class_vector(None)
    cond_cache = KVCache(config.depth)
    uncond_cache = None if opts.asc else KVCache(config.depth)

    maps: List[torch.Tensor] = []
    with torch.no_grad():
        cond_x = model.first_input(cond_vec)
        uncond_x = model.first_input(uncond_vec)
        for k in range(1, schedule.num_scales + 1):
            if k > 1:
                prev = reference.maps[k - 2] if reference is not None else maps[-1]
                cond_x = uncond_x = model.next_input(prev, k, stats)

            if opts.asc:
                cond_logits, uncond_logits = forward_scale_asc(
                    model, cond_x, uncond_x, k, cond_cache, executor, cond_vec, uncond_vec, stats, asc_trace
                )
            else:
                cond_logits, _ = forward_scale(model, cond_x, k, cond_cache, executor, cond_vec, stats, 'cond')
                uncond_logits, _ = forward_scale(model, uncond_x, k, uncond_cache, executor, uncond_vec,
                                                 stats, 'uncond')

            logits = cfg_combine(cond_logits, uncond_logits, sampler.cfg_scale)
            stats.scale_logits.append(logits)
            side = schedule.side(k)
            maps.append(torch.argmax(logits, dim=-1).view(side, side))

    logger.debug("label %d: %d scales, attention %d FLOPs, linear %d FLOPs",
                 label, schedule.num_scales, stats.attn_flops, stats.linear_flops)
    return TokenMapSet(maps), stats


@dataclass
class RunRecord:
    """Everything `generate` produced, as stored in run.json"""

    config: ModelConfig
    label: int
    sampler: SamplerConfig
    techniques: Dict
    token_maps: TokenMapSet
    stats: RunStats
    plan: Optional[PrecisionPlan] = None
    teacher_forced: bool = False

    def to_dict(self) -> Dict:
        return {
            'config': self.config.to_dict(),
            'model_fingerprint': self.config.fingerprint(),
            'label': self.label,
            'sampler': self.sampler.to_dict(),
            'techniques': dict(self.techniques),
            'plan': None if self.plan is None else self.plan.to_dict(),
            'teacher_forced': self.teacher_forced,
            'token_maps': self.token_maps.to_dict(),
            'stats': self.stats.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'RunRecord':
        config = ModelConfig.from_dict(data['config'])
        if data.get('model_fingerprint') not in (None, config.fingerprint()):
            raise FingerprintError("run record fingerprint does not match its model config")
        return cls(
            config=config,
            label=int(data['label']),
            sampler=SamplerConfig(**data.get('sampler', {})),
            techniques=dict(data.get('techniques', {})),
            token_maps=TokenMapSet.from_dict(data['token_maps']),
            stats=RunStats.from_dict(data['stats']),
            plan=None if data.get('plan') is None else PrecisionPlan.from_dict(data['plan']),
            teacher_forced=bool(data.get('teacher_forced', False)),
        )

    def save(self, path):
        save_json_artifact(path, 'run', self.to_dict())

    @classmethod
    def load(cls, path) -> 'RunRecord':
        document = load_json_artifact(path, 'run')
        try:
            return cls.from_dict(document)
        except (KeyError, TypeError) as e:
            raise FormatError(f"malformed run record {path}: {e}")


def run_record(model: MultiScaleTransformer, label: int, sampler: Optional[SamplerConfig] = None,
               opts: CompressionOptions = BASELINE,
               reference: Optional[TokenMapSet] = None) -> RunRecord:
    """generate() plus the metadata needed to report on the run later"""
    sampler = sampler or SamplerConfig()
    maps, stats = generate(model, label, sampler, opts, reference=reference)
    return RunRecord(
        config=model.config,
        label=label,
        sampler=sampler,
        techniques=opts.describe(),
        token_maps=maps,
        stats=stats,
        plan=opts.plan,
        teacher_forced=reference is not None,
    )
