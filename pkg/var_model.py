"""
Toy multi-scale autoregressive transformer
Seeded synthetic weights, block-causal attention across scales, KV cache.
Everything the compression passes plug into lives here.
"""

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from artifact_io import fingerprint
from errors import ConfigError, FormatError, ScaleRangeError, ShapeError, StateError

logger = logging.getLogger(__name__)

DTYPE = torch.float64

# Named scale schedules (side length of the token grid at every scale)
SCHEDULE_PRESETS = {
    'desk': (1, 2, 3, 4, 5, 6),
    'var10': (1, 2, 3, 4, 5, 6, 8, 10, 13, 16),
}

# Full model presets; 'var10' keeps desk-sized layers on the 10-scale schedule
MODEL_PRESETS = {
    'desk': {'schedule': SCHEDULE_PRESETS['desk'], 'depth': 4, 'heads': 4, 'dim': 64, 'vocab': 256},
    'var10': {'schedule': SCHEDULE_PRESETS['var10'], 'depth': 4, 'heads': 4, 'dim': 64, 'vocab': 256},
}

# The seven quantizable linear layer types, in enumeration order
LAYER_TYPES = (
    'word_embed',
    'attn.mat_qkv',
    'attn.proj',
    'ffn.fc1',
    'ffn.fc2',
    'ada_lin.1',
    'head',
)

# Key projection is initialized as this mix of the query projection and
# fresh noise, so scores favour tokens with similar embeddings
QK_TIE = 0.9


# ========== CONFIGURATION ==========

@dataclass(frozen=True)
class ScaleSchedule:
    """Ordered side lengths s_1..s_K; scale k holds s_k * s_k tokens"""

    sides: Tuple[int, ...]
    prefix: Tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        try:
            sides = tuple(int(s) for s in self.sides)
        except (TypeError, ValueError):
            raise ConfigError(f"Schedule sides must be integers, got {self.sides!r}")
        if not sides:
            raise ConfigError("Schedule needs at least one scale")
        if any(s < 1 for s in sides):
            raise ConfigError(f"Schedule sides must be >= 1, got {sides}")
        if any(b < a for a, b in zip(sides, sides[1:])):
            raise ConfigError(f"Schedule sides must be non-decreasing, got {sides}")

        prefix = [0]
        for s in sides:
            prefix.append(prefix[-1] + s * s)
        object.__setattr__(self, 'sides', sides)
        object.__setattr__(self, 'prefix', tuple(prefix))

    @property
    def num_scales(self) -> int:
        return len(self.sides)

    @property
    def total_tokens(self) -> int:
        return self.prefix[-1]

    def check_scale(self, k: int) -> int:
        if not isinstance(k, int) or isinstance(k, bool) or not 1 <= k <= self.num_scales:
            raise ScaleRangeError(f"Scale index {k!r} outside 1..{self.num_scales}")
        return k

    def side(self, k: int) -> int:
        return self.sides[self.check_scale(k) - 1]

    def token_count(self, k: int) -> int:
        return self.side(k) ** 2

    def cum_tokens(self, k: int) -> int:
        return self.prefix[self.check_scale(k)]

    def span(self, k: int) -> Tuple[int, int]:
        """Token range [start, end) of scale k in the flattened sequence"""
        self.check_scale(k)
        return self.prefix[k - 1], self.prefix[k]

    def to_list(self) -> List[int]:
        return list(self.sides)


def cum_tokens(schedule: ScaleSchedule, k: int) -> int:
    """
    Number of keys visible to scale k (all tokens of scales 1..k)

    Args:
        schedule: Scale schedule
        k: 1-based scale index

    Returns:
        sum of s_i^2 for i = 1..k
    """
    return schedule.cum_tokens(k)


@dataclass(frozen=True)
class ModelConfig:
    """Shape and seed of the toy transformer"""

    schedule: ScaleSchedule = field(default_factory=lambda: ScaleSchedule(SCHEDULE_PRESETS['desk']))
    depth: int = 4
    heads: int = 4
    dim: int = 64
    vocab: int = 256
    seed: int = 0
    class_count: int = 10
    mlp_ratio: int = 4
    outlier_factor: float = 0.0  # > 0 plants ffn.fc2 outliers at build time

    def __post_init__(self):
        if not isinstance(self.schedule, ScaleSchedule):
            object.__setattr__(self, 'schedule', ScaleSchedule(tuple(self.schedule)))
        for name in ('depth', 'heads', 'dim', 'vocab', 'class_count', 'mlp_ratio'):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if not math.isfinite(self.outlier_factor) or self.outlier_factor < 0:
            raise ConfigError(f"outlier_factor must be >= 0, got {self.outlier_factor!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return self.dim * self.mlp_ratio

    def to_dict(self) -> Dict:
        return {
            'schedule': self.schedule.to_list(),
            'depth': self.depth,
            'heads': self.heads,
            'dim': self.dim,
            'vocab': self.vocab,
            'seed': self.seed,
            'class_count': self.class_count,
            'mlp_ratio': self.mlp_ratio,
            'outlier_factor': self.outlier_factor,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'ModelConfig':
        """
        Build a config from a model.json document

        Args:
            data: Parsed document; envelope keys are ignored

        Returns:
            Validated ModelConfig
        """
        try:
            return cls(
                schedule=ScaleSchedule(tuple(data['schedule'])),
                depth=data['depth'],
                heads=data['heads'],
                dim=data['dim'],
                vocab=data['vocab'],
                seed=data.get('seed', 0),
                class_count=data.get('class_count', 10),
                mlp_ratio=data.get('mlp_ratio', 4),
                outlier_factor=float(data.get('outlier_factor', 0.0)),
            )
        except KeyError as e:
            raise ConfigError(f"model config is missing field {e}")
        except TypeError as e:
            raise ConfigError(f"malformed model config: {e}")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> 'ModelConfig':
        if name not in MODEL_PRESETS:
            raise ConfigError(f"Unknown preset {name!r} (choose from {sorted(MODEL_PRESETS)})")
        values = dict(MODEL_PRESETS[name])
        values.update(overrides)
        values['schedule'] = ScaleSchedule(tuple(values['schedule']))
        return cls(**values)

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())


@dataclass(frozen=True)
class SamplerConfig:
    """Classifier-free guidance weight and token selection mode"""

    cfg_scale: float = 4.0
    argmax: bool = True

    def __post_init__(self):
        if not isinstance(self.cfg_scale, (int, float)) or not math.isfinite(self.cfg_scale):
            raise ConfigError(f"cfg_scale must be a finite number, got {self.cfg_scale!r}")
        if self.cfg_scale < 0:
            raise ConfigError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if not self.argmax:
            raise ConfigError("Only deterministic argmax sampling is supported")

    def to_dict(self) -> Dict:
        return {'cfg_scale': float(self.cfg_scale), 'argmax': self.argmax}


# ========== RUN STATE ==========

class KVCache:
    """Per-block key/value rows, shape [heads, rows, head_dim] each"""

    def __init__(self, depth: int):
        self.depth = depth
        self.keys: List[Optional[torch.Tensor]] = [None] * depth
        self.values: List[Optional[torch.Tensor]] = [None] * depth

    def rows(self, block: int) -> int:
        keys = self.keys[block]
        return 0 if keys is None else keys.shape[1]

    @property
    def length(self) -> int:
        return self.rows(0)

    def check_rows(self, expected: int):
        """Raise StateError unless every block holds exactly `expected` rows"""
        found = [self.rows(b) for b in range(self.depth)]
        if any(r != expected for r in found):
            raise StateError(f"KV cache holds {found} rows per block, expected {expected}")

    def append(self, block: int, keys: torch.Tensor, values: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Extend one block's cache with the current scale's keys/values

        Args:
            block: Block index
            keys: New keys [heads, n, head_dim]
            values: New values [heads, n, head_dim]

        Returns:
            Full (keys, values) including all cached rows
        """
        if self.keys[block] is None:
            self.keys[block] = keys
            self.values[block] = values
        else:
            self.keys[block] = torch.cat([self.keys[block], keys], dim=1)
            self.values[block] = torch.cat([self.values[block], values], dim=1)
        return self.keys[block], self.values[block]


@dataclass
class TokenMapSet:
    """Generated token grids, one [s_k, s_k] long tensor per scale"""

    maps: List[torch.Tensor]

    def __len__(self) -> int:
        return len(self.maps)

    def check_schedule(self, schedule: ScaleSchedule):
        if len(self.maps) != schedule.num_scales:
            raise ShapeError(f"{len(self.maps)} token maps for {schedule.num_scales} scales")
        for k, tokens in enumerate(self.maps, 1):
            side = schedule.side(k)
            if tuple(tokens.shape) != (side, side):
                raise ShapeError(f"scale {k} map has shape {tuple(tokens.shape)}, expected ({side}, {side})")

    def equals(self, other: 'TokenMapSet') -> bool:
        if len(self) != len(other):
            return False
        return all(torch.equal(a, b) for a, b in zip(self.maps, other.maps))

    def to_dict(self) -> Dict:
        return {'scales': [{'side': int(t.shape[0]), 'ids': t.reshape(-1).tolist()} for t in self.maps]}

    @classmethod
    def from_dict(cls, data: Dict) -> 'TokenMapSet':
        maps = []
        try:
            for entry in data['scales']:
                side = int(entry['side'])
                ids = torch.tensor(entry['ids'], dtype=torch.long)
                if ids.numel() != side * side:
                    raise FormatError(f"token map of side {side} has {ids.numel()} ids")
                maps.append(ids.view(side, side))
        except (KeyError, TypeError) as e:
            raise FormatError(f"malformed token maps: {e}")
        return cls(maps)


@dataclass
class RunStats:
    """Counters accumulated during one generation run"""

    attn_flops: int = 0
    linear_flops: int = 0
    attn_map_elements: int = 0
    activation_bytes: int = 0  # attention maps at f32
    flops_by_op: Dict[str, int] = field(default_factory=dict)
    scale_logits: List[torch.Tensor] = field(default_factory=list)

    def add_linear(self, op: str, tokens: int, in_features: int, out_features: int):
        flops = 2 * tokens * in_features * out_features
        self.linear_flops += flops
        self.flops_by_op[op] = self.flops_by_op.get(op, 0) + flops

    def add_attention(self, visible: int, head_dim: int):
        """Record QK^T and AV over `visible` (query, key) pairs summed over heads"""
        flops = 4 * visible * head_dim
        self.attn_flops += flops
        self.attn_map_elements += visible
        self.activation_bytes += 4 * visible
        self.flops_by_op['attention'] = self.flops_by_op.get('attention', 0) + flops

    def to_dict(self, include_logits: bool = True) -> Dict:
        data = {
            'attn_flops': self.attn_flops,
            'linear_flops': self.linear_flops,
            'attn_map_elements': self.attn_map_elements,
            'activation_bytes': self.activation_bytes,
            'flops_by_op': dict(sorted(self.flops_by_op.items())),
        }
        if include_logits:
            data['logits'] = [t.tolist() for t in self.scale_logits]
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'RunStats':
        try:
            return cls(
                attn_flops=int(data['attn_flops']),
                linear_flops=int(data['linear_flops']),
                attn_map_elements=int(data['attn_map_elements']),
                activation_bytes=int(data['activation_bytes']),
                flops_by_op={k: int(v) for k, v in data.get('flops_by_op', {}).items()},
                scale_logits=[torch.tensor(t, dtype=DTYPE) for t in data.get('logits', [])],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed run stats: {e}")


# ========== MODULES ==========

class Modulation(NamedTuple):
    gamma1: torch.Tensor
    gamma2: torch.Tensor
    scale1: torch.Tensor
    scale2: torch.Tensor
    shift1: torch.Tensor
    shift2: torch.Tensor


def _count(stats: Optional[RunStats], op: str, layer: nn.Module, tokens: int):
    if stats is not None:
        stats.add_linear(op, tokens, layer.in_features, layer.out_features)


class SelfAttention(nn.Module):
    """QKV projection, executor-delegated attention, output projection"""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.mat_qkv = nn.Linear(dim, 3 * dim, dtype=DTYPE)
        self.proj = nn.Linear(dim, dim, dtype=DTYPE)
        # Set by quantization.apply_plan: fake-quant for Q/K/V entering attention
        self.qkv_quantizer: Optional[Callable] = None

    def forward(self, h: torch.Tensor, cache: KVCache, k: int, block_idx: int,
                executor, stats: Optional[RunStats], stream: str) -> torch.Tensor:
        n = h.shape[0]
        _count(stats, 'attn.mat_qkv', self.mat_qkv, n)
        qkv = self.mat_qkv(h).view(n, 3, self.heads, self.head_dim).permute(1, 2, 0, 3)
        q, key, value = qkv.unbind(0)
        if self.qkv_quantizer is not None:
            q, key, value = self.qkv_quantizer(q, key, value)

        keys, values = cache.append(block_idx, key, value)
        out = executor.attend(q, keys, values, k, block_idx, stats, stream)
        out = out.permute(1, 0, 2).reshape(n, self.dim)

        _count(stats, 'attn.proj', self.proj, n)
        return self.proj(out)


class FFN(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, dtype=DTYPE)
        self.act = nn.GELU(approximate='tanh')
        self.fc2 = nn.Linear(hidden, dim, dtype=DTYPE)

    def forward(self, h: torch.Tensor, stats: Optional[RunStats]) -> torch.Tensor:
        n = h.shape[0]
        _count(stats, 'ffn.fc1', self.fc1, n)
        _count(stats, 'ffn.fc2', self.fc2, n)
        return self.fc2(self.act(self.fc1(h)))


class AdaLNBlock(nn.Module):
    """Transformer block with class-conditioned affine modulation"""

    def __init__(self, config: ModelConfig, block_idx: int):
        super().__init__()
        self.block_idx = block_idx
        self.dim = config.dim
        self.ada_lin = nn.Sequential(nn.SiLU(), nn.Linear(config.dim, 6 * config.dim, dtype=DTYPE))
        self.attn = SelfAttention(config.dim, config.heads)
        self.ffn = FFN(config.dim, config.hidden_dim)
        self.norm = nn.LayerNorm(config.dim, eps=1e-6, elementwise_affine=False, dtype=DTYPE)

    def modulation(self, cond_vec: torch.Tensor, stats: Optional[RunStats] = None) -> Modulation:
        _count(stats, 'ada_lin.1', self.ada_lin[1], 1)
        raw = self.ada_lin(cond_vec).view(6, self.dim)
        gamma1, gamma2, scale1, scale2, shift1, shift2 = raw.unbind(0)
        return Modulation(1 + gamma1, 1 + gamma2, scale1, scale2, shift1, shift2)

    def attention_residual(self, x: torch.Tensor, mod: Modulation, cache: KVCache, k: int,
                           executor, stats: Optional[RunStats], stream: str) -> torch.Tensor:
        """Attention sub-output (after output projection and gating) added to the residual"""
        h = self.norm(x) * (1 + mod.scale1) + mod.shift1
        return self.attn(h, cache, k, self.block_idx, executor, stats, stream) * mod.gamma1

    def ffn_residual(self, x: torch.Tensor, mod: Modulation, stats: Optional[RunStats]) -> torch.Tensor:
        h = self.norm(x) * (1 + mod.scale2) + mod.shift2
        return self.ffn(h, stats) * mod.gamma2

    def forward(self, x: torch.Tensor, cond_vec: torch.Tensor, cache: KVCache, k: int,
                executor, stats: Optional[RunStats] = None, stream: str = 'cond') -> torch.Tensor:
        mod = self.modulation(cond_vec, stats)
        x = x + self.attention_residual(x, mod, cache, k, executor, stats, stream)
        x = x + self.ffn_residual(x, mod, stats)
        return x


class MultiScaleTransformer(nn.Module):
    """
    Next-scale prediction transformer

    Scale 1 starts from the class embedding; every later scale embeds the
    previous scale's tokens, upsamples them to the new grid and adds
    positional and level embeddings.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        schedule = config.schedule
        dim = config.dim

        self.null_label = config.class_count
        self.class_emb = nn.Embedding(config.class_count + 1, dim, dtype=DTYPE)
        self.codebook = nn.Embedding(config.vocab, dim, dtype=DTYPE)
        self.word_embed = nn.Linear(dim, dim, dtype=DTYPE)
        self.pos_start = nn.Parameter(torch.empty(schedule.token_count(1), dim, dtype=DTYPE))
        self.pos_embed = nn.Parameter(torch.empty(schedule.total_tokens, dim, dtype=DTYPE))
        self.lvl_embed = nn.Embedding(schedule.num_scales, dim, dtype=DTYPE)
        self.blocks = nn.ModuleList([AdaLNBlock(config, i) for i in range(config.depth)])
        self.head_norm = nn.LayerNorm(dim, eps=1e-6, elementwise_affine=False, dtype=DTYPE)
        self.head = nn.Linear(dim, config.vocab, dtype=DTYPE)

    # --- embeddings ---

    def class_vector(self, label: Optional[int]) -> torch.Tensor:
        """Conditioning vector for a label; None selects the null (unconditional) label"""
        index = self.null_label if label is None else label
        return self.class_emb.weight[index]

    def first_input(self, cond_vec: torch.Tensor) -> torch.Tensor:
        start, end = self.config.schedule.span(1)
        return (cond_vec.unsqueeze(0) + self.pos_start
                + self.lvl_embed.weight[0] + self.pos_embed[start:end])

    def next_input(self, prev_tokens: torch.Tensor, k: int, stats: Optional[RunStats] = None) -> torch.Tensor:
        """Input embeddings for scale k from the scale k-1 token map"""
        side = self.config.schedule.side(k)
        emb = self.codebook(prev_tokens)  # [s, s, dim]
        grid = emb.permute(2, 0, 1).unsqueeze(0)
        up = F.interpolate(grid, size=(side, side), mode='nearest')
        up = up.squeeze(0).permute(1, 2, 0).reshape(side * side, self.config.dim)

        _count(stats, 'word_embed', self.word_embed, side * side)
        start, end = self.config.schedule.span(k)
        return self.word_embed(up) + self.lvl_embed.weight[k - 1] + self.pos_embed[start:end]

    def logits(self, x: torch.Tensor, stats: Optional[RunStats] = None) -> torch.Tensor:
        _count(stats, 'head', self.head, x.shape[0])
        return self.head(self.head_norm(x))


Model = MultiScaleTransformer


# ========== CONSTRUCTION ==========

def _spatial_code(side: int, dim: int) -> torch.Tensor:
    """Sinusoidal code of each grid cell's normalized centre, [side*side, dim]"""
    coords = (torch.arange(side, dtype=DTYPE) + 0.5) / side
    yy, xx = torch.meshgrid(coords, coords, indexing='ij')
    yy, xx = yy.reshape(-1, 1), xx.reshape(-1, 1)
    bands = max(1, math.ceil(dim / 4))
    freqs = (torch.arange(bands, dtype=DTYPE) + 1) * 0.5 * math.pi
    code = torch.cat([torch.sin(yy * freqs), torch.cos(yy * freqs),
                      torch.sin(xx * freqs), torch.cos(xx * freqs)], dim=1)
    return code[:, :dim]


def _init_weights(model: MultiScaleTransformer, config: ModelConfig):
    """Fill every parameter from one seeded generator, in registration order"""
    gen = torch.Generator().manual_seed(config.seed)
    init_std = math.sqrt(1 / config.dim / 3)

    def normal(shape, std):
        return torch.randn(shape, generator=gen, dtype=DTYPE) * std

    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith('bias'):
                param.copy_(normal(param.shape, 0.02))
            elif name in ('class_emb.weight', 'codebook.weight'):
                param.copy_(normal(param.shape, 1.0))
            elif name in ('pos_start', 'lvl_embed.weight'):
                param.copy_(normal(param.shape, init_std))
            elif name == 'pos_embed':
                rows = [_spatial_code(s, config.dim) for s in config.schedule.sides]
                param.copy_(torch.cat(rows, dim=0) + normal(param.shape, init_std))
            elif name.endswith('ada_lin.1.weight'):
                param.copy_(normal(param.shape, 0.25 / math.sqrt(param.shape[1])))
            elif name.endswith('mat_qkv.weight'):
                dim = config.dim
                weight = normal(param.shape, 1 / math.sqrt(dim))
                weight[dim:2 * dim] = QK_TIE * weight[:dim] + math.sqrt(1 - QK_TIE ** 2) * weight[dim:2 * dim]
                param.copy_(weight)
            else:
                param.copy_(normal(param.shape, 1 / math.sqrt(param.shape[-1])))


def build_model(config: ModelConfig) -> MultiScaleTransformer:
    """
    Build the toy transformer with seeded synthetic weights

    Args:
        config: Model configuration

    Returns:
        Frozen model in eval mode; the same config gives bit-identical weights
    """
    if not isinstance(config, ModelConfig):
        raise ConfigError(f"build_model expects a ModelConfig, got {type(config).__name__}")

    model = MultiScaleTransformer(config)
    _init_weights(model, config)
    if config.outlier_factor > 0:
        _plant_fc2_outliers(model, config.outlier_factor)
    model.requires_grad_(False)
    model.eval()

    logger.info("built model %s: %d scales, depth %d, heads %d, dim %d",
                config.fingerprint()[:8], config.schedule.num_scales, config.depth, config.heads, config.dim)
    return model


def _plant_fc2_outliers(model: MultiScaleTransformer, factor: float):
    with torch.no_grad():
        for block in model.blocks:
            # hidden channel 0 is silenced, so its fc2 column never reaches the output
            block.ffn.fc1.weight[0].zero_()
            block.ffn.fc1.bias[0] = 0.0
            fc2 = block.ffn.fc2.weight
            fc2[0, 0] = factor * fc2.abs().max()


def plant_outliers(model: MultiScaleTransformer, factor: float = 100.0) -> MultiScaleTransformer:
    """
    Copy of the model with a planted weight outlier in every ffn.fc2

    The outlier sits on an input channel that ffn.fc1 keeps at zero, so the
    floating-point function is unchanged while the min-max range of each
    ffn.fc2 weight tensor grows by `factor`.

    Args:
        model: Source model (left untouched)
        factor: Outlier magnitude relative to max |W|

    Returns:
        New model
    """
    if factor <= 0:
        raise ConfigError(f"outlier factor must be positive, got {factor}")
    planted = copy.deepcopy(model)
    _plant_fc2_outliers(planted, factor)
    return planted


# ========== INTROSPECTION ==========

def layer_type_of(name: str) -> Optional[str]:
    """Map a module path like 'blocks.3.ffn.fc2' to its layer type, or None"""
    parts = name.split('.')
    if len(parts) > 2 and parts[0] == 'blocks':
        parts = parts[2:]
    candidate = '.'.join(parts)
    return candidate if candidate in LAYER_TYPES else None


def iter_quantizable(model: nn.Module) -> Iterator[Tuple[str, str, nn.Module]]:
    """Yield (module path, layer type, module) for every quantizable linear"""
    for name, module in model.named_modules():
        layer_type = layer_type_of(name)
        if layer_type is not None:
            yield name, layer_type, module


def layer_types(model: nn.Module) -> Tuple[str, ...]:
    present = {layer_type for _, layer_type, _ in iter_quantizable(model)}
    return tuple(t for t in LAYER_TYPES if t in present)


def layer_param_counts(config: ModelConfig) -> Dict[str, int]:
    """
    Parameter count (weights + biases) of each quantizable layer type

    Args:
        config: Model configuration

    Returns:
        Dict layer type -> parameter count, in LAYER_TYPES order
    """
    d, h, depth = config.dim, config.hidden_dim, config.depth

    def linear(n_in, n_out):
        return n_in * n_out + n_out

    return {
        'word_embed': linear(d, d),
        'attn.mat_qkv': depth * linear(d, 3 * d),
        'attn.proj': depth * linear(d, d),
        'ffn.fc1': depth * linear(d, h),
        'ffn.fc2': depth * linear(h, d),
        'ada_lin.1': depth * linear(d, 6 * d),
        'head': linear(d, config.vocab),
    }


def weight_checksum(model: nn.Module) -> str:
    """md5 over every parameter and buffer, in state_dict order"""
    digest = hashlib.md5()
    for name, tensor in model.state_dict().items():
        digest.update(name.encode('utf-8'))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# ========== FORWARD ==========

def forward_scale(model: MultiScaleTransformer, hidden: torch.Tensor, k: int, cache: KVCache,
                  attn_exec, cond_vec: torch.Tensor, stats: Optional[RunStats] = None,
                  stream: str = 'cond') -> Tuple[torch.Tensor, KVCache]:
    """
    Process all tokens of scale k in one parallel step

    Args:
        model: Transformer
        hidden: Scale-k input embeddings [s_k^2, dim]
        k: 1-based scale index
        cache: KV cache holding exactly cum_tokens(k-1) rows
        attn_exec: Attention executor (dense or windowed)
        cond_vec: Class conditioning vector of this stream
        stats: Optional counters
        stream: 'cond' or 'uncond' (passed to the executor)

    Returns:
        (logits [s_k^2, vocab], cache extended to cum_tokens(k) rows)
    """
    schedule = model.config.schedule
    schedule.check_scale(k)
    cache.check_rows(schedule.prefix[k - 1])

    expected = (schedule.token_count(k), model.config.dim)
    if tuple(hidden.shape) != expected:
        raise ShapeError(f"scale {k} input has shape {tuple(hidden.shape)}, expected {expected}")

    x = hidden
    for block in model.blocks:
        x = block(x, cond_vec, cache, k, attn_exec, stats, stream)
    return model.logits(x, stats), cache


def cfg_combine(cond: torch.Tensor, uncond: torch.Tensor, cfg_scale: float) -> torch.Tensor:
    """
    Classifier-free guidance: uncond + cfg_scale * (cond - uncond)

    Evaluated as cfg_scale * cond + (1 - cfg_scale) * uncond, which returns
    uncond exactly at 0 and cond exactly at 1.
    """
    if cond.shape != uncond.shape:
        raise ShapeError(f"cond logits {tuple(cond.shape)} vs uncond {tuple(uncond.shape)}")
    return cond * cfg_scale + uncond * (1 - cfg_scale)
