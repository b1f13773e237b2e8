"""Encoder, focal-fuse block, dense multi-scale fusion block, decoder and models.

Models are functional: :func:`model_forward` reads every learnable tensor
from a :class:`ParamStore` by name.  :func:`param_specs` is the single source
of truth for names and shapes; initialisation, describe() and checkpoint
validation all derive from it.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .ops import ConvSpec
from .tensor import Tensor, channel_slice

NUM_SCALES = 4
VARIANTS = ("focal_fuse", "msf3d")

CONV3 = ConvSpec.make(kernel=3, stride=1, padding=1)
UP2 = ConvSpec.make(kernel=3, stride=2, padding=1, output_padding=1)


@dataclass
class ModelConfig:
    """Declarative description of one architecture instance."""

    variant: str = "focal_fuse"
    base_channels: int = 16
    num_classes: int = 6
    input_channels: int = 1
    focal_levels: int = 2
    dense_layers_per_block: int = 3
    global_context: bool = True
    num_scales: int = NUM_SCALES

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("base_channels", "num_classes", "input_channels", "focal_levels",
                     "dense_layers_per_block"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.num_scales != NUM_SCALES:
            raise ConfigError(f"num_scales is fixed at {NUM_SCALES}")

    def channels(self, block: int) -> int:
        """Width of encoder block ``block`` (1-based, 1..5)."""
        return self.base_channels * 2 ** (block - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    # Key-value file: one ``key = value`` per line, ``#`` starts a comment.
    def dumps(self) -> str:
        lines = ["# focalfuse model config"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _parse_value(key, value, types[key], lineno)
        return cls(**values)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _parse_value(key, value, typ, lineno):
    if typ in ("str", str):
        return value
    if typ in ("bool", bool):
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"line {lineno}: {key} expects true/false, got {value!r}")
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects an integer, got {value!r}")


class ParamInfo(NamedTuple):
    shape: tuple
    kind: str          # conv, depthwise, transposed, pointwise, norm, bias
    init: str          # he, zeros, ones
    fan_in: int


def _conv(specs, name, cout, cin, k=3):
    specs[f"{name}.w"] = ParamInfo((cout, cin, k, k, k), "conv", "he", cin * k ** 3)
    specs[f"{name}.b"] = ParamInfo((cout,), "bias", "zeros", 0)


def _depthwise(specs, name, c, k=3, transposed=False):
    kind = "transposed" if transposed else "depthwise"
    specs[f"{name}.w"] = ParamInfo((c, 1, k, k, k), kind, "he", k ** 3)
    specs[f"{name}.b"] = ParamInfo((c,), "bias", "zeros", 0)


def _pointwise(specs, name, cout, cin):
    specs[f"{name}.w"] = ParamInfo((cout, cin), "pointwise", "he", cin)
    specs[f"{name}.b"] = ParamInfo((cout,), "bias", "zeros", 0)


def _norm(specs, name, c):
    specs[f"{name}.g"] = ParamInfo((c,), "norm", "ones", 0)
    specs[f"{name}.b"] = ParamInfo((c,), "bias", "zeros", 0)


def _align_specs(specs, name, c_from, c_to):
    _depthwise(specs, f"{name}.dw", c_from, transposed=False)
    _pointwise(specs, f"{name}.pw", c_to, c_from)


def param_specs(config: ModelConfig) -> "OrderedDict[str, ParamInfo]":
    """Every learnable tensor of the model, in initialisation order."""
    specs: "OrderedDict[str, ParamInfo]" = OrderedDict()
    cin = config.input_channels
    for k in range(1, NUM_SCALES + 2):
        c = config.channels(k)
        _conv(specs, f"enc{k}.conv1", c, cin)
        _norm(specs, f"enc{k}.norm1", c)
        _conv(specs, f"enc{k}.conv2", c, c)
        _norm(specs, f"enc{k}.norm2", c)
        cin = c

    scales = range(1, NUM_SCALES + 1)
    if config.variant == "focal_fuse":
        n = config.focal_levels
        for a in scales:
            ca = config.channels(a)
            _pointwise(specs, f"fuse.s{a}.in", ca, ca)
            for lvl in range(1, n + 1):
                for b in scales:
                    if b != a:
                        _align_specs(specs, f"fuse.s{a}.l{lvl}.from{b}", config.channels(b), ca)
                _pointwise(specs, f"fuse.s{a}.l{lvl}.mix", ca, NUM_SCALES * ca)
                _depthwise(specs, f"fuse.s{a}.l{lvl}.dw", ca)
            _pointwise(specs, f"fuse.s{a}.gate", n + 1, ca)
            _pointwise(specs, f"fuse.s{a}.proj", ca, ca)
            _pointwise(specs, f"fuse.s{a}.query", ca, ca)
    else:
        for a in scales:
            ca = config.channels(a)
            for lvl in range(1, config.dense_layers_per_block + 1):
                for b in scales:
                    if b != a:
                        _align_specs(specs, f"dense.s{a}.l{lvl}.from{b}", config.channels(b), ca)
                width = (lvl + NUM_SCALES - 1) * ca
                _depthwise(specs, f"dense.s{a}.l{lvl}.dw", width)
                _pointwise(specs, f"dense.s{a}.l{lvl}.pw", ca, width)

    for k in range(NUM_SCALES, 0, -1):
        c = config.channels(k)
        specs[f"dec{k}.up.w"] = ParamInfo((config.channels(k + 1), c, 3, 3, 3), "transposed",
                                          "he", c * 27)
        specs[f"dec{k}.up.b"] = ParamInfo((c,), "bias", "zeros", 0)
        _conv(specs, f"dec{k}.conv", c, 2 * c)
        _norm(specs, f"dec{k}.norm", c)
    _pointwise(specs, "head", config.num_classes, config.channels(1))
    return specs


class ParamStore:
    """Ordered, named collection of learnable tensors."""

    def __init__(self, tensors: Optional[Dict[str, Tensor]] = None):
        self._t: "OrderedDict[str, Tensor]" = OrderedDict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._t[name]
        except KeyError:
            raise ConfigError(f"parameter {name!r} missing from the store")

    def __setitem__(self, name: str, value: Tensor) -> None:
        self._t[name] = value

    def __contains__(self, name) -> bool:
        return name in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def names(self) -> List[str]:
        return list(self._t)

    def tensors(self) -> List[Tensor]:
        return list(self._t.values())

    def total_count(self) -> int:
        return int(sum(t.data.size for t in self._t.values()))

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)
                           for k, v in self._t.items()})

    def copy(self) -> "ParamStore":
        return self.astype(next(iter(self._t.values())).dtype if self._t else np.float32)

    def check_against(self, config: ModelConfig) -> None:
        specs = param_specs(config)
        if list(specs) != list(self._t):
            missing = sorted(set(specs) - set(self._t))
            extra = sorted(set(self._t) - set(specs))
            raise ConfigError(
                f"parameters do not match the {config.variant} config "
                f"(missing {missing[:3]}{'...' if len(missing) > 3 else ''}, "
                f"unexpected {extra[:3]}{'...' if len(extra) > 3 else ''})")
        for name, info in specs.items():
            if self._t[name].shape != info.shape:
                raise ConfigError(
                    f"parameter {name!r} has shape {self._t[name].shape}, config expects {info.shape}")


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Fan-in scaled normal weights (std sqrt(2/fan_in)), zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, info in param_specs(config).items():
        if info.init == "he":
            data = rng.standard_normal(info.shape) * math.sqrt(2.0 / info.fan_in)
        elif info.init == "ones":
            data = np.ones(info.shape)
        else:
            data = np.zeros(info.shape)
        store[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return store


# ---------------------------------------------------------------- encoder

@dataclass
class StreamFeatures:
    """Per-scale encoder exports ``streams`` = [I1..I4] and the bottleneck I5."""

    streams: List[Tensor]
    bottleneck: Tensor


def _conv_block(params, prefix, h):
    h = ops.conv3d(h, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], CONV3)
    h = ops.relu(ops.instance_norm(h, params[f"{prefix}.norm1.g"], params[f"{prefix}.norm1.b"]))
    h = ops.conv3d(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"], CONV3)
    return ops.relu(ops.instance_norm(h, params[f"{prefix}.norm2.g"], params[f"{prefix}.norm2.b"]))


def check_input_extents(shape: Sequence[int]) -> None:
    factor = 2 ** NUM_SCALES
    bad = [d for d in shape if d % factor or d < 2 * factor]
    if bad:
        raise ConfigError(
            f"spatial extents {tuple(shape)} must be multiples of {factor} and at least {2 * factor}")


def encoder_forward(config: ModelConfig, params: ParamStore, volume: Tensor) -> StreamFeatures:
    if volume.ndim != 5:
        raise DimensionError(f"volume must be (B, C, W, H, Z), got {volume.shape}")
    if volume.shape[1] != config.input_channels:
        raise ConfigError(
            f"volume has {volume.shape[1]} channels, config expects {config.input_channels}")
    check_input_extents(volume.shape[2:])
    feats = []
    h = volume
    for k in range(1, NUM_SCALES + 2):
        h = _conv_block(params, f"enc{k}", h)
        feats.append(h)
        if k <= NUM_SCALES:
            h = ops.pool3d(h, "max")
    return StreamFeatures(feats[:NUM_SCALES], feats[NUM_SCALES])


# ------------------------------------------------------- scale alignment

DOWN2 = ConvSpec.make(kernel=3, stride=2, padding=1)


def scale_align(params: ParamStore, prefix: str, feature: Tensor, from_scale: int,
                to_scale: int, target_extent: Optional[Sequence[int]] = None) -> Tensor:
    """Resample ``feature`` from stream ``from_scale`` to stream ``to_scale``.

    A learned stride-2 depthwise (transposed) convolution covers the first
    factor of two, average pooling or trilinear resizing closes the rest,
    and a pointwise projection maps to the target stream's width.
    """
    if from_scale == to_scale:
        raise ValueError("scale_align needs two different scales")
    if not (1 <= from_scale <= NUM_SCALES and 1 <= to_scale <= NUM_SCALES):
        raise ValueError(f"scales must lie in 1..{NUM_SCALES}")
    c = feature.shape[1]
    w, b = params[f"{prefix}.dw.w"], params[f"{prefix}.dw.b"]
    gap = to_scale - from_scale
    if gap > 0:
        h = ops.conv3d(feature, w, b, ConvSpec.make(3, 2, 1, groups=c))
        for _ in range(gap - 1):
            h = ops.pool3d(h, "avg")
    else:
        h = ops.conv_transpose3d(feature, w, b, ConvSpec.make(3, 2, 1, groups=c, output_padding=1))
        if -gap > 1:
            target = target_extent or tuple(d * 2 ** (-gap - 1) for d in h.shape[2:])
            h = ops.resize_trilinear(h, target)
    return ops.linear(h, params[f"{prefix}.pw.w"], params[f"{prefix}.pw.b"])


def _check_streams(config: ModelConfig, streams: Sequence[Tensor]) -> None:
    if len(streams) != NUM_SCALES:
        raise DimensionError(f"expected {NUM_SCALES} streams, got {len(streams)}")
    base = streams[0].shape
    for a, t in enumerate(streams, start=1):
        want_c = config.channels(a)
        want_ext = tuple(d // 2 ** (a - 1) for d in base[2:])
        if t.ndim != 5 or t.shape[1] != want_c or t.shape[2:] != want_ext or t.shape[0] != base[0]:
            raise DimensionError(
                f"stream {a} has shape {t.shape}, expected (B, {want_c}) + {want_ext}")


# ------------------------------------------------------------ focal fuse

@dataclass
class FocalState:
    """Intermediate tensors of one focal-fuse pass, indexed [level][scale-1]."""

    levels: List[List[Tensor]]
    gates: List[Tensor]
    global_context: List[Optional[Tensor]]
    modulators: List[Tensor]
    outputs: List[Tensor]


def modulate(modulator: Tensor, query: Tensor) -> Tensor:
    """Per-scale modulation Y_a = F_a * q(I_a)."""
    return modulator * query


def focal_fuse_forward(config: ModelConfig, params: ParamStore, streams: Sequence[Tensor],
                       return_state: bool = False):
    _check_streams(config, streams)
    n = config.focal_levels
    extents = [t.shape[2:] for t in streams]
    f0 = [ops.linear(streams[a], params[f"fuse.s{a + 1}.in.w"], params[f"fuse.s{a + 1}.in.b"])
          for a in range(NUM_SCALES)]
    levels = [f0]
    for lvl in range(1, n + 1):
        prev = levels[-1]
        cur = []
        for a in range(1, NUM_SCALES + 1):
            pre = f"fuse.s{a}.l{lvl}"
            parts = [prev[a - 1]]
            for b in range(1, NUM_SCALES + 1):
                if b != a:
                    parts.append(scale_align(params, f"{pre}.from{b}", prev[b - 1], b, a,
                                             extents[a - 1]))
            h = ops.linear(ops.concat_channels(parts), params[f"{pre}.mix.w"], params[f"{pre}.mix.b"])
            h = ops.conv3d(h, params[f"{pre}.dw.w"], params[f"{pre}.dw.b"],
                           ConvSpec.make(3, 1, 1, groups=h.shape[1]))
            cur.append(ops.gelu(h))
        levels.append(cur)

    gates, ctxs, mods, outs = [], [], [], []
    for a in range(1, NUM_SCALES + 1):
        pre = f"fuse.s{a}"
        gate = ops.linear(f0[a - 1], params[f"{pre}.gate.w"], params[f"{pre}.gate.b"])
        agg = None
        for lvl in range(1, n + 1):
            term = levels[lvl][a - 1] * channel_slice(gate, lvl - 1, lvl)
            agg = term if agg is None else agg + term
        ctx = None
        if config.global_context:
            ctx = ops.global_avg_pool(levels[n][a - 1])
            agg = agg + ctx * channel_slice(gate, n, n + 1)
        mod = ops.linear(agg, params[f"{pre}.proj.w"], params[f"{pre}.proj.b"])
        query = ops.linear(streams[a - 1], params[f"{pre}.query.w"], params[f"{pre}.query.b"])
        gates.append(gate)
        ctxs.append(ctx)
        mods.append(mod)
        outs.append(modulate(mod, query))
    if return_state:
        return outs, FocalState(levels, gates, ctxs, mods, outs)
    return outs


# ------------------------------------------------------------- 3D-MSF

def msf_dense_forward(config: ModelConfig, params: ParamStore, streams: Sequence[Tensor]):
    """Densely connected multi-scale fusion; returns the last layer of each stream."""
    _check_streams(config, streams)
    extents = [t.shape[2:] for t in streams]
    history = [[t] for t in streams]
    for lvl in range(1, config.dense_layers_per_block + 1):
        new = []
        for a in range(1, NUM_SCALES + 1):
            pre = f"dense.s{a}.l{lvl}"
            parts = list(history[a - 1])
            for b in range(1, NUM_SCALES + 1):
                if b != a:
                    parts.append(scale_align(params, f"{pre}.from{b}", history[b - 1][lvl - 1],
                                             b, a, extents[a - 1]))
            h = ops.concat_channels(parts)
            h = ops.conv3d(h, params[f"{pre}.dw.w"], params[f"{pre}.dw.b"],
                           ConvSpec.make(3, 1, 1, groups=h.shape[1]))
            new.append(ops.linear(h, params[f"{pre}.pw.w"], params[f"{pre}.pw.b"]))
        for a in range(NUM_SCALES):
            history[a].append(new[a])
    return [h[-1] for h in history]


# ------------------------------------------------------------- decoder

def decoder_forward(config: ModelConfig, params: ParamStore, skips: Sequence[Tensor],
                    bottleneck: Tensor) -> Tensor:
    """Ascend from the bottleneck through one stage per skip, then the class head."""
    if len(skips) != config.num_scales:
        raise DimensionError(f"decoder expects {config.num_scales} skip tensors, got {len(skips)}")
    h = bottleneck
    for k in range(len(skips), 0, -1):
        pre = f"dec{k}"
        up = ops.conv_transpose3d(h, params[f"{pre}.up.w"], params[f"{pre}.up.b"], UP2)
        skip = skips[k - 1]
        if up.shape[2:] != skip.shape[2:]:
            raise DimensionError(
                f"decoder stage {k}: upsampled extents {up.shape[2:]} do not match "
                f"skip extents {skip.shape[2:]}")
        h = ops.conv3d(ops.concat_channels([up, skip]), params[f"{pre}.conv.w"],
                       params[f"{pre}.conv.b"], CONV3)
        h = ops.relu(ops.instance_norm(h, params[f"{pre}.norm.g"], params[f"{pre}.norm.b"]))
    return ops.linear(h, params["head.w"], params["head.b"])


def model_forward(config: ModelConfig, params: ParamStore, volume: Tensor) -> Tensor:
    """Logits (B, num_classes, W, H, Z) for a (B, C_in, W, H, Z) volume."""
    params.check_against(config)
    feats = encoder_forward(config, params, volume)
    if config.variant == "focal_fuse":
        skips = focal_fuse_forward(config, params, feats.streams)
    else:
        skips = msf_dense_forward(config, params, feats.streams)
    return decoder_forward(config, params, skips, feats.bottleneck)


# ------------------------------------------------------------- describe

def _module_of(name: str) -> str:
    parts = name.split(".")
    if parts[0] in ("fuse", "dense"):
        return ".".join(parts[:2])
    return parts[0]


def receptive_fields(config: ModelConfig) -> List[str]:
    """Local context extent per focal level (+3 per level) plus the global level."""
    if config.variant == "focal_fuse":
        rf = [str(3 * lvl) for lvl in range(1, config.focal_levels + 1)]
        return rf + (["global"] if config.global_context else [])
    return [str(3 * lvl) for lvl in range(1, config.dense_layers_per_block + 1)]


def activation_shapes(config: ModelConfig, extent: Sequence[int] = (32, 32, 32)) -> "OrderedDict[str, tuple]":
    check_input_extents(extent)
    shapes: "OrderedDict[str, tuple]" = OrderedDict()
    ext = tuple(extent)
    shapes["input"] = (1, config.input_channels) + ext
    for k in range(1, NUM_SCALES + 2):
        e = tuple(d // 2 ** (k - 1) for d in ext)
        shapes[f"I{k}"] = (1, config.channels(k)) + e
    for a in range(1, NUM_SCALES + 1):
        e = tuple(d // 2 ** (a - 1) for d in ext)
        if config.variant == "focal_fuse":
            shapes[f"G{a}"] = (1, config.focal_levels + 1) + e
        shapes[f"Y{a}"] = (1, config.channels(a)) + e
    for k in range(NUM_SCALES, 0, -1):
        e = tuple(d // 2 ** (k - 1) for d in ext)
        shapes[f"D{k}"] = (1, config.channels(k)) + e
    shapes["logits"] = (1, config.num_classes) + ext
    return shapes


def describe(config: ModelConfig, extent: Sequence[int] = (32, 32, 32)) -> dict:
    """Structural report: parameter counts per module and kind, shapes, receptive fields."""
    specs = param_specs(config)
    per_param = OrderedDict((n, int(np.prod(i.shape))) for n, i in specs.items())
    modules: "OrderedDict[str, Dict[str, int]]" = OrderedDict()
    for name, info in specs.items():
        row = modules.setdefault(_module_of(name), OrderedDict())
        row[info.kind] = row.get(info.kind, 0) + per_param[name]
    for row in modules.values():
        row["total"] = sum(v for k, v in row.items())
    return {
        "config": config.to_dict(),
        "parameters": per_param,
        "modules": modules,
        "total_parameters": sum(per_param.values()),
        "activations": activation_shapes(config, extent),
        "receptive_fields": {f"stream{a}": receptive_fields(config)
                             for a in range(1, NUM_SCALES + 1)},
    }


def format_report(report: dict) -> str:
    cfg = report["config"]
    lines = [f"model: {cfg['variant']}  base_channels={cfg['base_channels']}  "
             f"num_classes={cfg['num_classes']}  focal_levels={cfg['focal_levels']}  "
             f"dense_layers_per_block={cfg['dense_layers_per_block']}",
             "", f"{'module':<12}{'conv':>10}{'depthwise':>11}{'transposed':>12}"
             f"{'pointwise':>11}{'norm':>8}{'bias':>8}{'total':>10}"]
    for mod, row in report["modules"].items():
        lines.append(f"{mod:<12}" + "".join(
            f"{row.get(k, 0):>{w}}" for k, w in (("conv", 10), ("depthwise", 11),
                                                 ("transposed", 12), ("pointwise", 11),
                                                 ("norm", 8), ("bias", 8), ("total", 10))))
    lines.append(f"{'TOTAL':<12}{report['total_parameters']:>80}")
    lines.append("")
    lines.append("activations:")
    for name, shape in report["activations"].items():
        lines.append(f"  {name:<8}{'x'.join(str(s) for s in shape)}")
    lines.append("")
    lines.append("receptive fields:")
    for stream, rf in report["receptive_fields"].items():
        lines.append(f"  {stream}: {', '.join(rf)}")
    return "\n".join(lines) + "\n"
