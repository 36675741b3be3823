"""Search space definition, weight-sharing supernet and discrete subnets.

A network is a stack of stages. Each stage starts with a fixed entry
convolution followed by a chain of residual layers; the stage output is a
probability-weighted sum of the chain taps at every depth option. Every layer
mixes operator candidates indexed by (dilation, spatial) pairs; an operator is
``upsample(block(avg_pool(x)))`` where the block holds two kernel-3
convolutions whose outputs are multiplied by a soft channel mask built from
shared prefix masks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import adcore as ad
from .regloss import relaxed_probs

DEPTH = "depth"
OPERATOR = "dilation-spatial"
CHANNEL = "channel"
LEVELS = (DEPTH, OPERATOR, CHANNEL)


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field."""


@dataclass(frozen=True)
class StageSpec:
    depths: tuple[int, ...]
    width: int
    channels: tuple[int, ...] | None = None

    @property
    def channel_options(self) -> tuple[int, ...]:
        return tuple(self.channels) if self.channels else (self.width,)

    @property
    def max_depth(self) -> int:
        return max(self.depths)


@dataclass(frozen=True)
class SpaceConfig:
    stages: tuple[StageSpec, ...]
    dilations: tuple[int, ...] = (1, 2, 4)
    spatials: tuple[int, ...] = (1,)
    length: int = 64
    in_channels: int = 3
    num_classes: int = 3
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "dilations", tuple(self.dilations))
        object.__setattr__(self, "spatials", tuple(self.spatials))

    @property
    def operators(self) -> list[tuple[int, int]]:
        """Operator candidates of every layer as (dilation, spatial) pairs."""
        return [(r, s) for r in self.dilations for s in self.spatials]

    def validate(self) -> "SpaceConfig":
        if not self.stages:
            raise ConfigError("stages: at least one stage is required")
        for name in ("dilations", "spatials"):
            opts = getattr(self, name)
            if not opts:
                raise ConfigError(f"{name}: option list is empty")
            if any(int(o) != o or o < 1 for o in opts):
                raise ConfigError(f"{name}: options must be positive integers")
            if len(set(opts)) != len(opts):
                raise ConfigError(f"{name}: duplicate options")
        for s in self.spatials:
            if self.length % s:
                raise ConfigError(f"spatials: option {s} does not divide length {self.length}")
        for name in ("length", "in_channels", "num_classes", "kernel"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive")
        if self.kernel % 2 != 1:
            raise ConfigError("kernel: must be odd")
        for i, st in enumerate(self.stages):
            where = f"stages[{i}]"
            if not st.depths:
                raise ConfigError(f"{where}.depths: option list is empty")
            if any(d < 1 for d in st.depths) or len(set(st.depths)) != len(st.depths):
                raise ConfigError(f"{where}.depths: options must be distinct positive integers")
            if st.width < 1:
                raise ConfigError(f"{where}.width: must be positive")
            ch = st.channel_options
            if not ch:
                raise ConfigError(f"{where}.channels: option list is empty")
            if any(c > st.width for c in ch):
                raise ConfigError(f"{where}.channels: option exceeds width {st.width}")
            if list(ch) != sorted(set(ch)) or ch[-1] != st.width or ch[0] < 1:
                raise ConfigError(f"{where}.channels: must be sorted ascending, positive, ending at width")
        return self


@dataclass
class ArchParamGroup:
    """One categorical choice: logits, candidate labels and active mask.

    ``frozen`` marks groups cut off by a cascade (their owner was pruned);
    they no longer take part in losses, entropy or updates.
    """
    level: str
    owner: tuple
    candidates: list
    logits: ad.Tensor
    active: np.ndarray
    frozen: bool = False

    @property
    def size(self) -> int:
        return len(self.candidates)

    @property
    def active_idx(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    @property
    def n_active(self) -> int:
        return int(self.active.sum())


# ---------------------------------------------------------------------------
# discrete architectures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerChoice:
    dilation: int
    spatial: int
    channels: tuple[int, int]


@dataclass(frozen=True)
class StageChoice:
    depth: int
    layers: tuple[LayerChoice, ...]


@dataclass(frozen=True)
class DiscreteArchitecture:
    stages: tuple[StageChoice, ...]

    def encode(self) -> str:
        parts = []
        for st in self.stages:
            layers = ",".join(f"r{l.dilation}s{l.spatial}c{l.channels[0]}-{l.channels[1]}" for l in st.layers)
            parts.append(f"d{st.depth}[{layers}]")
        return "|".join(parts)

    def to_dict(self) -> dict:
        return {"stages": [
            {"depth": st.depth,
             "layers": [{"dilation": l.dilation, "spatial": l.spatial, "channels": list(l.channels)}
                        for l in st.layers]}
            for st in self.stages]}

    @classmethod
    def from_dict(cls, data: dict) -> "DiscreteArchitecture":
        return cls(tuple(
            StageChoice(int(st["depth"]), tuple(
                LayerChoice(int(l["dilation"]), int(l["spatial"]), tuple(int(c) for c in l["channels"]))
                for l in st["layers"]))
            for st in data["stages"]))

    def table_rows(self) -> list[tuple]:
        """Rows of (stage, layer, dilation, spatial, channels)."""
        rows = []
        for si, st in enumerate(self.stages):
            for li, l in enumerate(st.layers):
                rows.append((si + 1, li + 1, l.dilation, l.spatial, l.channels))
        return rows

    def receptive_field(self, kernel: int = 3) -> int:
        """Receptive field (in input samples) of the searched stages plus entry convs."""
        rf = 1
        for st in self.stages:
            rf += kernel - 1
            for l in st.layers:
                rf += 2 * (kernel - 1) * l.dilation * l.spatial
        return rf

    def validate(self, config: SpaceConfig) -> None:
        if len(self.stages) != len(config.stages):
            raise ConfigError("architecture: stage count mismatch")
        for st, spec in zip(self.stages, config.stages):
            if st.depth not in spec.depths or len(st.layers) != st.depth:
                raise ConfigError(f"architecture: depth {st.depth} invalid for options {spec.depths}")
            for l in st.layers:
                if l.dilation not in config.dilations or l.spatial not in config.spatials:
                    raise ConfigError("architecture: operator not in the option lists")
                if any(c not in spec.channel_options for c in l.channels):
                    raise ConfigError("architecture: channel count not in the option list")


# ---------------------------------------------------------------------------
# supernet
# ---------------------------------------------------------------------------

def make_channel_masks(options: Iterable[int], c_max: int) -> np.ndarray:
    """Prefix masks: row k has ``options[k]`` leading ones, zeros after."""
    options = list(options)
    if any(o > c_max for o in options):
        raise ConfigError(f"channels: option exceeds C_max={c_max}")
    if list(options) != sorted(options) or not options or options[0] < 1:
        raise ConfigError("channels: options must be sorted, positive and non-empty")
    masks = np.zeros((len(options), c_max))
    for k, o in enumerate(options):
        masks[k, :o] = 1.0
    return masks


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class SuperNet:
    config: SpaceConfig
    params: dict = field(default_factory=dict)
    masks: list = field(default_factory=list)

    def entry(self, si):
        return self.params[("entry", si, "w")], self.params[("entry", si, "b")]

    def conv(self, si, li, oi, ci):
        return self.params[("op", si, li, oi, ci, "w")], self.params[("op", si, li, oi, ci, "b")]

    def head(self):
        return self.params[("head", "w")], self.params[("head", "b")]


def _make_params(config: SpaceConfig, rng: np.random.Generator, layer_ops) -> dict:
    k = config.kernel
    params = {}
    prev = config.in_channels
    for si, st in enumerate(config.stages):
        c = st.width
        params[("entry", si, "w")] = ad.Tensor(_uniform(rng, (c, prev, k), prev * k))
        params[("entry", si, "b")] = ad.Tensor(_uniform(rng, (c,), prev * k))
        for li in range(st.max_depth):
            for oi in layer_ops(si, li):
                for ci in range(2):
                    params[("op", si, li, oi, ci, "w")] = ad.Tensor(_uniform(rng, (c, c, k), c * k))
                    params[("op", si, li, oi, ci, "b")] = ad.Tensor(_uniform(rng, (c,), c * k))
        prev = c
    params[("head", "w")] = ad.Tensor(_uniform(rng, (config.num_classes, prev, 1), prev))
    params[("head", "b")] = ad.Tensor(_uniform(rng, (config.num_classes,), prev))
    for key, t in params.items():
        t.name = ".".join(str(p) for p in key)
    return params


def build_supernet(config: SpaceConfig, seed: int) -> tuple[SuperNet, list[ArchParamGroup]]:
    config.validate()
    rng = np.random.default_rng(seed)
    ops = config.operators
    params = _make_params(config, rng, lambda si, li: range(len(ops)))
    net = SuperNet(config, params, [make_channel_masks(st.channel_options, st.width) for st in config.stages])

    groups: list[ArchParamGroup] = []

    def group(level, owner, candidates):
        n = len(candidates)
        g = ArchParamGroup(level, owner, list(candidates), ad.Tensor(np.zeros(n), name=f"theta{owner}"),
                           np.ones(n, dtype=bool))
        groups.append(g)

    for si, st in enumerate(config.stages):
        group(DEPTH, (si,), sorted(st.depths))
    for si, st in enumerate(config.stages):
        for li in range(st.max_depth):
            group(OPERATOR, (si, li), ops)
    for si, st in enumerate(config.stages):
        for li in range(st.max_depth):
            for oi in range(len(ops)):
                for ci in range(2):
                    group(CHANNEL, (si, li, oi, ci), st.channel_options)
    return net, groups


def group_index(groups: Iterable[ArchParamGroup]) -> dict:
    return {(g.level, g.owner): g for g in groups}


def _probs(index, level, owner, probs):
    if probs is not None and (level, owner) in probs:
        return probs[(level, owner)]
    return relaxed_probs(index[(level, owner)])


def live_depth_options(group: ArchParamGroup) -> list[int]:
    return [group.candidates[i] for i in group.active_idx]


def supernet_forward(net: SuperNet, groups: list[ArchParamGroup], batch, probs: dict | None = None):
    """Relaxed forward pass returning logits (batch, classes, length).

    ``probs`` may override the relaxed probability vector (full length,
    zeros at inactive candidates) of any group keyed by ``(level, owner)``;
    this serves hard one-hot evaluation and finite-difference checks.
    """
    cfg = net.config
    index = group_index(groups)
    x = batch
    for si, st in enumerate(cfg.stages):
        w, b = net.entry(si)
        x = ad.relu(ad.conv1d(x, w, b, 1))
        dg = index[(DEPTH, (si,))]
        pd = _probs(index, DEPTH, (si,), probs)
        live = live_depth_options(dg)
        chain_len = max(live)
        mixed = None
        for li in range(chain_len):
            x = _layer_forward(net, index, si, li, x, probs)
            depth = li + 1
            if depth in live:
                j = dg.candidates.index(depth)
                term = ad.mul(ad.take(pd, j), x) if len(live) > 1 else x
                mixed = term if mixed is None else ad.add(mixed, term)
        x = mixed
    w, b = net.head()
    return ad.conv1d(x, w, b, 1)


def _layer_forward(net, index, si, li, x, probs):
    cfg = net.config
    og = index[(OPERATOR, (si, li))]
    po = _probs(index, OPERATOR, (si, li), probs)
    single = og.n_active == 1
    out = None
    for oi in og.active_idx:
        r, s = og.candidates[oi]
        y = ad.avg_pool(x, s) if s > 1 else x
        masks = []
        for ci in range(2):
            pc = _probs(index, CHANNEL, (si, li, oi, ci), probs)
            masks.append(ad.matmul(pc, net.masks[si]))
        w1, b1 = net.conv(si, li, oi, 0)
        w2, b2 = net.conv(si, li, oi, 1)
        h = ad.channel_mask(ad.relu(ad.conv1d(y, w1, b1, r)), masks[0])
        h = ad.channel_mask(ad.conv1d(h, w2, b2, r), masks[1])
        y = ad.relu(ad.add(y, h))
        if s > 1:
            y = ad.upsample_linear(y, s)
        term = y if single else ad.mul(ad.take(po, int(oi)), y)
        out = term if out is None else ad.add(out, term)
    return out


# ---------------------------------------------------------------------------
# discrete subnet (independent code path)
# ---------------------------------------------------------------------------

@dataclass
class DiscreteNet:
    config: SpaceConfig
    arch: DiscreteArchitecture
    params: dict


def build_discrete_net(arch: DiscreteArchitecture, config: SpaceConfig, seed: int) -> DiscreteNet:
    """Fresh subnet whose convolutions are physically sized to the chosen channels."""
    arch.validate(config)
    rng = np.random.default_rng(seed)
    k = config.kernel
    params = {}
    prev = config.in_channels
    for si, (st, spec) in enumerate(zip(arch.stages, config.stages)):
        c = spec.width
        params[("entry", si, "w")] = ad.Tensor(_uniform(rng, (c, prev, k), prev * k))
        params[("entry", si, "b")] = ad.Tensor(_uniform(rng, (c,), prev * k))
        for li, layer in enumerate(st.layers):
            c1, c2 = layer.channels
            params[("op", si, li, 0, "w")] = ad.Tensor(_uniform(rng, (c1, c, k), c * k))
            params[("op", si, li, 0, "b")] = ad.Tensor(_uniform(rng, (c1,), c * k))
            params[("op", si, li, 1, "w")] = ad.Tensor(_uniform(rng, (c2, c1, k), c1 * k))
            params[("op", si, li, 1, "b")] = ad.Tensor(_uniform(rng, (c2,), c1 * k))
        prev = c
    params[("head", "w")] = ad.Tensor(_uniform(rng, (config.num_classes, prev, 1), prev))
    params[("head", "b")] = ad.Tensor(_uniform(rng, (config.num_classes,), prev))
    return DiscreteNet(config, arch, params)


def extract_subnet(net: SuperNet, arch: DiscreteArchitecture) -> DiscreteNet:
    """Discrete subnet carrying the supernet's (sliced) weights for ``arch``."""
    cfg = net.config
    arch.validate(cfg)
    ops = cfg.operators
    params = {}
    for si, st in enumerate(arch.stages):
        for part in ("w", "b"):
            params[("entry", si, part)] = ad.Tensor(net.params[("entry", si, part)].values.copy())
        for li, layer in enumerate(st.layers):
            oi = ops.index((layer.dilation, layer.spatial))
            c1, c2 = layer.channels
            w1, b1 = net.conv(si, li, oi, 0)
            w2, b2 = net.conv(si, li, oi, 1)
            params[("op", si, li, 0, "w")] = ad.Tensor(w1.values[:c1].copy())
            params[("op", si, li, 0, "b")] = ad.Tensor(b1.values[:c1].copy())
            params[("op", si, li, 1, "w")] = ad.Tensor(w2.values[:c2, :c1].copy())
            params[("op", si, li, 1, "b")] = ad.Tensor(b2.values[:c2].copy())
    for part in ("w", "b"):
        params[("head", part)] = ad.Tensor(net.params[("head", part)].values.copy())
    return DiscreteNet(cfg, arch, params)


def discrete_forward(net: DiscreteNet, batch):
    x = batch
    for si, st in enumerate(net.arch.stages):
        width = net.config.stages[si].width
        x = ad.relu(ad.conv1d(x, net.params[("entry", si, "w")], net.params[("entry", si, "b")], 1))
        for li, layer in enumerate(st.layers):
            y = ad.avg_pool(x, layer.spatial) if layer.spatial > 1 else x
            h = ad.relu(ad.conv1d(y, net.params[("op", si, li, 0, "w")], net.params[("op", si, li, 0, "b")],
                                  layer.dilation))
            h = ad.conv1d(h, net.params[("op", si, li, 1, "w")], net.params[("op", si, li, 1, "b")],
                          layer.dilation)
            y = ad.relu(ad.add(y, ad.pad_channels(h, width)))
            x = ad.upsample_linear(y, layer.spatial) if layer.spatial > 1 else y
    return ad.conv1d(x, net.params[("head", "w")], net.params[("head", "b")], 1)


# ---------------------------------------------------------------------------
# cardinality
# ---------------------------------------------------------------------------

def space_count(config: SpaceConfig) -> int:
    """Exact number of discrete architectures (enumeration semantics)."""
    total = 1
    n_ops = len(config.dilations) * len(config.spatials)
    for st in config.stages:
        per_layer = n_ops * len(st.channel_options) ** 2
        total *= sum(per_layer ** d for d in st.depths)
    return total


def paper_convention_count(config: SpaceConfig) -> int:
    """(channel combos per operator)^(operators per layer x layers) + depth combos."""
    n_ops = len(config.dilations) * len(config.spatials)
    channel_term = 1
    depth_term = 1
    for st in config.stages:
        channel_term *= (len(st.channel_options) ** 2) ** (n_ops * st.max_depth)
        depth_term *= len(st.depths)
    return channel_term + depth_term


def cardinality_log10(config: SpaceConfig, convention: str = "enumeration") -> float:
    config.validate()
    if convention == "enumeration":
        return math.log10(space_count(config))
    if convention == "paper":
        return math.log10(paper_convention_count(config))
    raise ValueError(f"unknown convention {convention!r}")


def paper_space() -> SpaceConfig:
    """The full-scale joint space: two stages, five dilations, two resolutions."""
    return SpaceConfig(
        stages=(StageSpec(tuple(range(3, 8)), 64, tuple(range(32, 65, 4))),
                StageSpec(tuple(range(6, 11)), 128, tuple(range(96, 129, 4)))),
        dilations=(1, 2, 4, 8, 16), spatials=(1, 2), length=128, in_channels=3, num_classes=19)


def tiny_space(width: int = 8, length: int = 64, in_channels: int = 3, num_classes: int = 3) -> SpaceConfig:
    """One stage, depths {1,2,3}, dilations {1,2,4}: 39 architectures."""
    return SpaceConfig(stages=(StageSpec((1, 2, 3), width),), dilations=(1, 2, 4), spatials=(1,),
                       length=length, in_channels=in_channels, num_classes=num_classes)
