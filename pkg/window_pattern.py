"""
Window patterns - per (scale, block, head, part) band widths
Key-axis partitioning, diagonal centres and the pattern artifact
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Tuple, Union

import torch

from artifact_io import fingerprint, load_json_artifact, save_json_artifact
from errors import FingerprintError, FormatError, InputError
from var_model import ScaleSchedule

logger = logging.getLogger(__name__)

FULL = "FULL"
DEFAULT_SINK_PARTS = 3
MERGED_SCALES = 3  # scales 1..3 share the first part

Width = Union[int, str]
EntryKey = Tuple[int, int, int, int]  # (scale, block, head, part)


@dataclass(frozen=True)
class Part:
    """Contiguous key segment [key_start, key_end) holding scales first_scale..last_scale"""

    index: int
    key_start: int
    key_end: int
    first_scale: int
    last_scale: int

    @property
    def width(self) -> int:
        return self.key_end - self.key_start

    @property
    def source_scale_range(self) -> Tuple[int, int]:
        return self.first_scale, self.last_scale


@dataclass(frozen=True)
class PartLayout:
    scale: int
    parts: Tuple[Part, ...]

    def __len__(self) -> int:
        return len(self.parts)

    def __iter__(self) -> Iterator[Part]:
        return iter(self.parts)

    def part(self, index: int) -> Part:
        return self.parts[index - 1]


def partition(schedule: ScaleSchedule, k: int) -> PartLayout:
    """
    Split scale k's key axis into parts

    Scales 1..3 form part 1; every later scale up to k gets its own part,
    in ascending key order. For k <= 3 there is a single part.

    Args:
        schedule: Scale schedule
        k: 1-based scale index

    Returns:
        PartLayout tiling [0, cum_tokens(k))
    """
    schedule.check_scale(k)
    prefix = schedule.prefix

    if k <= MERGED_SCALES:
        return PartLayout(k, (Part(1, 0, prefix[k], 1, k),))

    parts = [Part(1, 0, prefix[MERGED_SCALES], 1, MERGED_SCALES)]
    for m in range(MERGED_SCALES + 1, k + 1):
        parts.append(Part(len(parts) + 1, prefix[m - 1], prefix[m], m, m))
    return PartLayout(k, tuple(parts))


def diagonal_center(q: int, s_k: int, s_m: int) -> int:
    """Row-major index of the scale-m cell spatially aligned with query q of scale k"""
    qy, qx = divmod(q, s_k)
    return (qy * s_m // s_k) * s_m + (qx * s_m // s_k)


def diagonal_centers(s_k: int, s_m: int) -> torch.Tensor:
    """diagonal_center for every query of an s_k x s_k grid, as a long tensor"""
    q = torch.arange(s_k * s_k)
    qy, qx = q // s_k, q % s_k
    return (qy * s_m // s_k) * s_m + (qx * s_m // s_k)


def part_centers(schedule: ScaleSchedule, k: int, part: Part) -> torch.Tensor:
    """
    Band centre of every scale-k query, as an offset inside `part`

    Multi-scale parts are centred on their finest scale.
    """
    s_k = schedule.side(k)
    s_m = schedule.side(part.last_scale)
    offset = schedule.prefix[part.last_scale - 1] - part.key_start
    return diagonal_centers(s_k, s_m) + offset


def schedule_fingerprint(schedule: ScaleSchedule) -> str:
    return fingerprint({'schedule': schedule.to_list()})


@dataclass
class WindowPattern:
    """Band width (or FULL) for every (scale, block, head, part)"""

    r0: float
    sink_parts: int
    schedule: ScaleSchedule
    depth: int
    heads: int
    entries: Dict[EntryKey, Width] = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return schedule_fingerprint(self.schedule)

    def width(self, k: int, block: int, head: int, part: int) -> Width:
        try:
            return self.entries[(k, block, head, part)]
        except KeyError:
            raise FormatError(f"pattern has no entry for scale {k}, block {block}, head {head}, part {part}")

    def is_all_full(self) -> bool:
        return all(w == FULL for w in self.entries.values())

    def check_model(self, schedule: ScaleSchedule, depth: int, heads: int):
        """Raise FingerprintError unless the pattern was designed for this model shape"""
        if self.fingerprint != schedule_fingerprint(schedule):
            raise FingerprintError(
                f"pattern schedule {self.schedule.to_list()} does not match model schedule {schedule.to_list()}"
            )
        if (self.depth, self.heads) != (depth, heads):
            raise FingerprintError(
                f"pattern is for depth {self.depth} x heads {self.heads}, model has {depth} x {heads}"
            )

    def validate(self):
        """Check completeness and the FULL / width-bound invariants"""
        if not 0 < self.r0 <= 1:
            raise FormatError(f"r0 must be in (0, 1], got {self.r0}")
        for k in range(1, self.schedule.num_scales + 1):
            for part in partition(self.schedule, k):
                for block in range(self.depth):
                    for head in range(self.heads):
                        w = self.width(k, block, head, part.index)
                        if w == FULL:
                            continue
                        if self.r0 >= 1.0 or part.index <= self.sink_parts:
                            raise FormatError(f"entry {(k, block, head, part.index)} must be FULL")
                        if not isinstance(w, int) or isinstance(w, bool) or not 0 <= w <= part.width:
                            raise FormatError(f"entry {(k, block, head, part.index)} has invalid width {w!r}")

    def to_dict(self) -> Dict:
        entries = [
            {'scale': k, 'block': b, 'head': h, 'part': p, 'width': w}
            for (k, b, h, p), w in sorted(self.entries.items())
        ]
        return {
            'r0': self.r0,
            'sink_parts': self.sink_parts,
            'schedule': self.schedule.to_list(),
            'depth': self.depth,
            'heads': self.heads,
            'fingerprint': self.fingerprint,
            'entries': entries,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'WindowPattern':
        try:
            pattern = cls(
                r0=float(data['r0']),
                sink_parts=int(data['sink_parts']),
                schedule=ScaleSchedule(tuple(data['schedule'])),
                depth=int(data['depth']),
                heads=int(data['heads']),
                entries={
                    (int(e['scale']), int(e['block']), int(e['head']), int(e['part'])): e['width']
                    for e in data['entries']
                },
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed window pattern: {e}")

        if data.get('fingerprint') != pattern.fingerprint:
            raise FingerprintError("pattern fingerprint does not match its schedule")
        pattern.validate()
        logger.debug("loaded pattern r0=%.3f with %d entries", pattern.r0, len(pattern.entries))
        return pattern

    def save(self, path) -> None:
        save_json_artifact(path, 'pattern', self.to_dict())

    @classmethod
    def load(cls, path) -> 'WindowPattern':
        return cls.from_dict(load_json_artifact(path, 'pattern'))


def full_pattern(schedule: ScaleSchedule, depth: int, heads: int, r0: float = 1.0,
                 sink_parts: int = DEFAULT_SINK_PARTS) -> WindowPattern:
    """Pattern with every entry FULL (dense attention)"""
    entries = {}
    for k in range(1, schedule.num_scales + 1):
        for part in partition(schedule, k):
            for block in range(depth):
                for head in range(heads):
                    entries[(k, block, head, part.index)] = FULL
    return WindowPattern(r0, sink_parts, schedule, depth, heads, entries)


def pattern_summary(pattern: WindowPattern) -> Dict:
    """
    Per-scale breakdown of a pattern

    Returns:
        Dict with FULL / windowed entry counts and the mean fitted width per scale
    """
    per_scale: List[Dict] = []
    for k in range(1, pattern.schedule.num_scales + 1):
        widths = [w for (scale, _, _, _), w in pattern.entries.items() if scale == k]
        fitted = [w for w in widths if w != FULL]
        per_scale.append({
            'scale': k,
            'parts': len(partition(pattern.schedule, k)),
            'full_entries': len(widths) - len(fitted),
            'windowed_entries': len(fitted),
            'mean_width': (sum(fitted) / len(fitted)) if fitted else None,
        })
    return {
        'r0': pattern.r0,
        'sink_parts': pattern.sink_parts,
        'entries': len(pattern.entries),
        'full_entries': sum(1 for w in pattern.entries.values() if w == FULL),
        'scales': per_scale,
    }


def check_threshold(r0: float):
    if not isinstance(r0, (int, float)) or not 0 < r0 <= 1:
        raise InputError(f"threshold R0 must be in (0, 1], got {r0!r}")
