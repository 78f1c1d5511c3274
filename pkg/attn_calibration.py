"""
Attention calibration - record post-softmax maps and fit window patterns
Dump files are binary: magic, version, JSON header, then f32 matrices.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from artifact_io import fingerprint
from cfg_sharing import asc_savings
from errors import ArtifactIOError, FormatError, InputError
from generation import generate
from sparse_attention import AttentionRecorder, attn_flops
from var_model import MultiScaleTransformer, SamplerConfig, ScaleSchedule
from window_pattern import (
    DEFAULT_SINK_PARTS,
    FULL,
    WindowPattern,
    check_threshold,
    part_centers,
    partition,
)

logger = logging.getLogger(__name__)

DUMP_MAGIC = b"LVAD"
DUMP_VERSION = 1
ROW_SUM_TOLERANCE = 1e-4

# Threshold grid for sweeps (high to low)
SWEEP_THRESHOLDS = (0.95, 0.9, 0.85, 0.8, 0.7, 0.6)


@dataclass
class AttentionDump:
    """
    Conditional-stream attention maps of a set of calibration runs

    maps[sample][block][k - 1] is a float32 tensor [heads, s_k^2, cum_tokens(k)].
    """

    schedule: ScaleSchedule
    depth: int
    heads: int
    maps: List[List[List[torch.Tensor]]] = field(default_factory=list)
    labels: List[int] = field(default_factory=list)

    @property
    def sample_count(self) -> int:
        return len(self.maps)

    def header(self) -> Dict:
        return {
            'schedule': self.schedule.to_list(),
            'depth': self.depth,
            'heads': self.heads,
            'sample_count': self.sample_count,
            'labels': list(self.labels),
            'dtype': 'f32',
        }

    def fingerprint(self) -> str:
        return fingerprint(self.header())

    def expected_shape(self, k: int):
        return (self.heads, self.schedule.token_count(k), self.schedule.cum_tokens(k))

    def check_shapes(self):
        for s, sample in enumerate(self.maps):
            if len(sample) != self.depth:
                raise FormatError(f"sample {s} has {len(sample)} blocks, header says {self.depth}")
            for b, block in enumerate(sample):
                if len(block) != self.schedule.num_scales:
                    raise FormatError(f"sample {s} block {b} has {len(block)} scales")
                for k, probs in enumerate(block, 1):
                    if tuple(probs.shape) != self.expected_shape(k):
                        raise FormatError(
                            f"sample {s} block {b} scale {k}: shape {tuple(probs.shape)}, "
                            f"expected {self.expected_shape(k)}"
                        )

    def check_rows(self, tolerance: float = ROW_SUM_TOLERANCE):
        """Every entry in [0, 1] and every row summing to 1"""
        for sample in self.maps:
            for block in sample:
                for probs in block:
                    if bool((probs < 0).any()) or bool((probs > 1).any()):
                        raise FormatError("attention probabilities outside [0, 1]")
                    sums = probs.to(torch.float64).sum(dim=-1)
                    if bool(((sums - 1).abs() > tolerance).any()):
                        raise FormatError("attention rows do not sum to 1")


def record_dump(model: MultiScaleTransformer, labels: Sequence[int], sampler: Optional[SamplerConfig] = None,
                progress: bool = False) -> AttentionDump:
    """
    Run baseline generation per label and keep every conditional attention map

    Args:
        model: FP model
        labels: Calibration class ids (non-empty)
        sampler: Guidance settings
        progress: Show a tqdm bar

    Returns:
        AttentionDump matching the model config
    """
    labels = list(labels)
    if not labels:
        raise InputError("calibration needs at least one label")

    config = model.config
    recorder = AttentionRecorder(config.schedule, config.depth, config.heads, streams=('cond',))
    dump = AttentionDump(config.schedule, config.depth, config.heads, labels=labels)

    for label in tqdm(labels, desc="calibrating", unit="run", disable=not progress):
        recorder.reset()
        generate(model, label, sampler, executor=recorder)
        dump.maps.append([
            [recorder.probs[('cond', k, b)] for k in range(1, config.schedule.num_scales + 1)]
            for b in range(config.depth)
        ])

    logger.info("recorded %d calibration samples", dump.sample_count)
    return dump


# ========== DUMP FILES ==========

def dump_body_bytes(schedule: ScaleSchedule, depth: int, heads: int, sample_count: int) -> int:
    per_head = sum(schedule.token_count(k) * schedule.cum_tokens(k) for k in range(1, schedule.num_scales + 1))
    return 4 * per_head * heads * depth * sample_count


def write_dump(dump: AttentionDump, path) -> int:
    """
    Write a dump file

    Returns:
        Bytes written
    """
    dump.check_shapes()
    header = json.dumps(dump.header(), sort_keys=True).encode('utf-8')
    file_path = Path(path)
    written = 0
    try:
        with open(file_path, 'wb') as f:
            written += f.write(DUMP_MAGIC)
            written += f.write(struct.pack('<II', DUMP_VERSION, len(header)))
            written += f.write(header)
            for sample in dump.maps:
                for block in sample:
                    for head in range(dump.heads):
                        for probs in block:
                            written += f.write(np.ascontiguousarray(probs[head].numpy(), dtype='<f4').tobytes())
    except OSError as e:
        raise ArtifactIOError(f"Cannot write dump {file_path}: {e}") from e

    logger.debug("wrote dump %s (%d bytes)", file_path, written)
    return written


def read_dump(path) -> AttentionDump:
    file_path = Path(path)
    try:
        with open(file_path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise ArtifactIOError(f"Cannot read dump {file_path}: {e}") from e

    if data[:4] != DUMP_MAGIC:
        raise FormatError(f"{file_path} is not an attention dump")
    if len(data) < 12:
        raise FormatError(f"{file_path} is truncated")
    version, header_len = struct.unpack('<II', data[4:12])
    if version != DUMP_VERSION:
        raise FormatError(f"{file_path}: unsupported dump version {version}")

    try:
        header = json.loads(data[12:12 + header_len].decode('utf-8'))
        schedule = ScaleSchedule(tuple(header['schedule']))
        depth, heads, samples = int(header['depth']), int(header['heads']), int(header['sample_count'])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{file_path}: bad dump header: {e}") from e
    if header.get('dtype') != 'f32':
        raise FormatError(f"{file_path}: unsupported dump dtype {header.get('dtype')!r}")

    offset = 12 + header_len
    if len(data) - offset != dump_body_bytes(schedule, depth, heads, samples):
        raise FormatError(f"{file_path}: body size does not match header")

    dump = AttentionDump(schedule, depth, heads, labels=list(header.get('labels', [])))
    for _ in range(samples):
        blocks = []
        for _ in range(depth):
            per_head = [[] for _ in range(schedule.num_scales)]
            for _ in range(heads):
                for k in range(1, schedule.num_scales + 1):
                    count = schedule.token_count(k) * schedule.cum_tokens(k)
                    arr = np.frombuffer(data, dtype='<f4', count=count, offset=offset)
                    offset += 4 * count
                    per_head[k - 1].append(torch.from_numpy(arr.copy()).view(schedule.token_count(k), -1))
            blocks.append([torch.stack(heads_k) for heads_k in per_head])
        dump.maps.append(blocks)
    try:
        dump.check_rows()
    except FormatError as e:
        raise FormatError(f"{file_path}: {e}") from e
    return dump


# ========== PATTERN DESIGN ==========

def aggregate(dump: AttentionDump) -> List[List[torch.Tensor]]:
    """Element-wise mean over samples in f64: result[block][k - 1] is [heads, rows, cols]"""
    if dump.sample_count == 0:
        raise InputError("dump holds no samples")
    dump.check_shapes()
    result = []
    for b in range(dump.depth):
        per_scale = []
        for k in range(dump.schedule.num_scales):
            stacked = torch.stack([sample[b][k] for sample in dump.maps]).to(torch.float64)
            per_scale.append(stacked.sum(dim=0) / dump.sample_count)
        result.append(per_scale)
    return result


def _band_mass(part: torch.Tensor, centers: torch.Tensor) -> List[float]:
    """Cumulative attention mass by distance from the centre: entry d-1 = mass with |j - c| <= d-1"""
    part = part.to(torch.float64)
    width = part.shape[-1]
    distance = (torch.arange(width).unsqueeze(0) - centers.unsqueeze(1)).abs()
    by_distance = torch.bincount(distance.reshape(-1), weights=part.reshape(-1), minlength=width)
    return torch.cumsum(by_distance, dim=0).tolist()


def _ratio(cumulative: List[float], w: int) -> float:
    total = cumulative[-1]
    if total == 0:
        return 1.0
    if w == 0:
        return 0.0
    return cumulative[min(w, len(cumulative)) - 1] / total


def window_ratio(part: torch.Tensor, w: int, centers: torch.Tensor) -> float:
    """
    Share of a part's attention mass inside the width-w band

    Args:
        part: Non-negative sub-matrix [queries, part width]
        w: Half-band width; w=0 is empty, w=1 is the centre key only
        centers: Centre key offset per query

    Returns:
        R_w in [0, 1]; 1.0 for an all-zero part
    """
    if w < 0:
        raise InputError(f"window width must be >= 0, got {w}")
    return _ratio(_band_mass(part, centers), w)


def fit_window(part: torch.Tensor, r0: float, centers: torch.Tensor) -> int:
    """Smallest w with window_ratio >= r0 (0 for an all-zero part)"""
    check_threshold(r0)
    cumulative = _band_mass(part, centers)
    if cumulative[-1] == 0:
        return 0
    for w in range(len(cumulative) + 1):
        if _ratio(cumulative, w) >= r0:
            return w
    return len(cumulative)


def design_pattern(dump: AttentionDump, r0: float, sink_parts: int = DEFAULT_SINK_PARTS,
                   schedule: Optional[ScaleSchedule] = None) -> WindowPattern:
    """
    Fit a window width for every (scale, block, head, part)

    Args:
        dump: Calibration dump
        r0: Attention-mass threshold in (0, 1]
        sink_parts: Leading parts kept FULL
        schedule: Optional schedule the dump must match

    Returns:
        WindowPattern for the dump's schedule
    """
    check_threshold(r0)
    if not isinstance(sink_parts, int) or sink_parts < 0:
        raise InputError(f"sink_parts must be a non-negative integer, got {sink_parts!r}")
    if schedule is not None and schedule != dump.schedule:
        raise FormatError(f"dump schedule {dump.schedule.to_list()} does not match {schedule.to_list()}")

    dump.check_rows()
    agg = aggregate(dump)
    entries = {}
    for k in range(1, dump.schedule.num_scales + 1):
        for part in partition(dump.schedule, k):
            fitted = r0 < 1.0 and part.index > sink_parts
            centers = part_centers(dump.schedule, k, part) if fitted else None
            for block in range(dump.depth):
                for head in range(dump.heads):
                    if not fitted:
                        entries[(k, block, head, part.index)] = FULL
                        continue
                    sub = agg[block][k - 1][head][:, part.key_start:part.key_end]
                    entries[(k, block, head, part.index)] = fit_window(sub, r0, centers)

    pattern = WindowPattern(float(r0), sink_parts, dump.schedule, dump.depth, dump.heads, entries)
    logger.info("designed pattern r0=%.3f: %d of %d entries windowed", r0,
                sum(w != FULL for w in entries.values()), len(entries))
    return pattern


def threshold_sweep(dump: AttentionDump, thresholds: Sequence[float] = SWEEP_THRESHOLDS,
                    sink_parts: int = DEFAULT_SINK_PARTS) -> List[Dict]:
    """
    Pattern FLOPs saving at each threshold on one dump

    Returns:
        One row per threshold: r0, MDWA saving, and MDWA + ASC saving
    """
    rows = []
    for r0 in thresholds:
        pattern = design_pattern(dump, r0, sink_parts)
        saving = attn_flops(pattern, dump.schedule, dump.depth, dump.heads, head_dim=1)['saving']
        rows.append({'r0': r0, 'mdwa_saving': saving, 'mdwa_asc_saving': asc_savings(saving)})
    return rows


# ========== STREAM SIMILARITY ==========

def attention_similarity(model: MultiScaleTransformer, label: int,
                         sampler: Optional[SamplerConfig] = None) -> List[Dict]:
    """
    Cosine similarity of conditional vs unconditional attention outputs

    Measured on a baseline run for every (scale, block); high values are
    what makes sharing the attention sub-block across CFG streams safe.
    """
    config = model.config
    recorder = AttentionRecorder(config.schedule, config.depth, config.heads, capture_probs=False,
                                 capture_outputs=True, streams=('cond', 'uncond'))
    generate(model, label, sampler, executor=recorder)

    rows = []
    for k in range(1, config.schedule.num_scales + 1):
        for b in range(config.depth):
            cond = recorder.outputs[('cond', k, b)].reshape(-1)
            uncond = recorder.outputs[('uncond', k, b)].reshape(-1)
            cosine = torch.nn.functional.cosine_similarity(cond, uncond, dim=0)
            rows.append({'scale': k, 'block': b, 'cosine': float(cosine)})
    return rows
