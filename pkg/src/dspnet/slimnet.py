"""Slimmable encoder family.

The full-size parameter store holds one tensor per layer; every desired
network (DN) is a prefix slice of it: the first channels of each conv and
the first blocks of each stage. BN running statistics are private per DN
because feature statistics differ across widths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as streams
from . import tensor as T
from .errors import ConfigError
from .tensor import RunningStats, Tensor


@dataclass(frozen=True)
class StageSpec:
    channels: int          # width of the full network
    blocks: int            # depth of the full network
    kernel: int = 3
    stride: int = 2
    # kernel of the strided first block; even kernels keep the conv output
    # extent integral on even inputs (pad = (kernel - stride) // 2)
    down_kernel: int = 4


@dataclass(frozen=True)
class SwitchConfig:
    """One concrete sub-network: per-stage width multiplier and depth."""

    widths: tuple
    blocks: tuple

    def key(self) -> str:
        w = ",".join(format(x, "g") for x in self.widths)
        b = ",".join(str(x) for x in self.blocks)
        return f"w{w}-b{b}"

    @classmethod
    def from_key(cls, key: str) -> "SwitchConfig":
        wpart, bpart = key.split("-")
        return cls(tuple(float(x) for x in wpart[1:].split(",")),
                   tuple(int(x) for x in bpart[1:].split(",")))


@dataclass(frozen=True)
class FamilySpec:
    stem_in: int
    stem_channels: int
    stages: tuple
    dn_list: tuple
    channel_divisor: int = 1
    stem_kernel: int = 3
    stem_stride: int = 1
    input_hw: tuple = (32, 32)

    @property
    def rep_dim(self) -> int:
        """Representation width of the full network (after global pooling)."""
        return active_channels(self, full_config(self), len(self.stages) - 1)


def round_channels(width: float, full: int, divisor: int) -> int:
    c = int(width * full / divisor + 0.5) * divisor
    return max(c, 1)


def full_config(family: FamilySpec) -> SwitchConfig:
    return SwitchConfig(widths=(1.0,) * len(family.stages),
                        blocks=tuple(s.blocks for s in family.stages))


def active_channels(family: FamilySpec, cfg: SwitchConfig, stage_idx: int) -> int:
    return round_channels(cfg.widths[stage_idx],
                          family.stages[stage_idx].channels,
                          family.channel_divisor)


def config_leq(family: FamilySpec, a: SwitchConfig, b: SwitchConfig) -> bool:
    """Partial order: a fits inside b in every stage."""
    for s in range(len(family.stages)):
        if active_channels(family, a, s) > active_channels(family, b, s):
            return False
        if a.blocks[s] > b.blocks[s]:
            return False
    return True


def same_active(family: FamilySpec, a: SwitchConfig, b: SwitchConfig) -> bool:
    return config_leq(family, a, b) and config_leq(family, b, a)


def find_full(family: FamilySpec) -> SwitchConfig:
    full = full_config(family)
    for c in family.dn_list:
        if same_active(family, c, full):
            return c
    raise ConfigError("dn_list does not contain the full configuration")


def _check_cfg(family: FamilySpec, cfg: SwitchConfig) -> list:
    errs = []
    ns = len(family.stages)
    if len(cfg.widths) != ns or len(cfg.blocks) != ns:
        return [f"config {cfg.key()!r} has wrong stage count"]
    for s, (w, b) in enumerate(zip(cfg.widths, cfg.blocks)):
        if not 0 < w <= 1:
            errs.append(f"stage {s}: width multiplier {w} outside (0, 1]")
        if int(w * family.stages[s].channels / family.channel_divisor + 0.5) < 1:
            errs.append(f"stage {s}: channels below 1 at width {w}")
        if not 1 <= b <= family.stages[s].blocks:
            errs.append(f"stage {s}: block count {b} outside [1, {family.stages[s].blocks}]")
    return errs


def validate_family(family: FamilySpec) -> list:
    """All family invariant violations as strings; empty list means valid."""
    errs = []
    if family.stem_in < 1 or family.stem_channels < 1:
        errs.append("stem channels must be positive")
    if family.channel_divisor < 1:
        errs.append("channel_divisor must be >= 1")
    for s, stage in enumerate(family.stages):
        if stage.channels < 1 or stage.blocks < 1:
            errs.append(f"stage {s}: channels and blocks must be positive")
    for cfg in family.dn_list:
        errs.extend(_check_cfg(family, cfg))
    if errs:
        return errs
    if len(family.dn_list) < 2:
        errs.append("dn_list must contain at least 2 desired networks")
    full = full_config(family)
    n_full = sum(1 for c in family.dn_list if same_active(family, c, full))
    if n_full == 0:
        errs.append("full configuration absent from dn_list")
    elif n_full > 1:
        errs.append("multiple configurations equal the full network")
    minima = [c for c in family.dn_list
              if all(config_leq(family, c, other) for other in family.dn_list)]
    if len(minima) != 1:
        errs.append("dn_list must contain exactly one elementwise-smallest configuration")
    if len(set(c.key() for c in family.dn_list)) != len(family.dn_list):
        errs.append("duplicate configurations in dn_list")
    return errs


def smallest_config(family: FamilySpec) -> SwitchConfig:
    for c in family.dn_list:
        if all(config_leq(family, c, other) for other in family.dn_list):
            return c
    raise ConfigError("family has no elementwise-smallest configuration")


# ---------------------------------------------------------------------------
# layer plan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvBlock:
    """One conv+BN+relu block with the active channel counts of a config."""

    name: str
    cin: int
    cout: int
    kernel: int
    stride: int

    @property
    def pad(self) -> int:
        return (self.kernel - self.stride) // 2


def encoder_blocks(family: FamilySpec, cfg: SwitchConfig) -> list:
    """Blocks of the sliced network, in forward order (stem first)."""
    blocks = [ConvBlock("stem", family.stem_in, family.stem_channels,
                        family.stem_kernel, family.stem_stride)]
    prev = family.stem_channels
    for si, stage in enumerate(family.stages):
        cout = active_channels(family, cfg, si)
        for bi in range(cfg.blocks[si]):
            strided = bi == 0 and stage.stride > 1
            blocks.append(ConvBlock(
                f"s{si}.b{bi}", prev, cout,
                stage.down_kernel if strided else stage.kernel,
                stage.stride if bi == 0 else 1))
            prev = cout
    return blocks


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

class SlimmableParamStore:
    """Full-size tensors plus per-DN BN statistics.

    `params` maps name -> numpy array. Encoder entries follow the layer
    plan; head entries (projector/predictor, classifier) may be added by
    callers. `excluded` lists the names the optimizer treats as
    bias/normalization parameters.
    """

    def __init__(self, family: FamilySpec, dtype=np.float32):
        self.family = family
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.bn_stats = {}
        self.excluded = set()
        # BN layers outside the encoder (heads); encoder BN dims follow the
        # active channels of each config.
        self.extra_bn_dims = {}

    @classmethod
    def init_encoder(cls, family: FamilySpec, seed: int, dtype=np.float32,
                     stream: int = 0) -> "SlimmableParamStore":
        """He-initialized full-size encoder; BN tables for every DN."""
        store = cls(family, dtype)
        gen = streams.stream_rng(seed, streams.INIT, stream)
        for blk in encoder_blocks(family, full_config(family)):
            store.add_conv_block(blk, gen)
        for cfg in family.dn_list:
            store.ensure_stats(cfg)
        return store

    def add_conv_block(self, blk: ConvBlock, gen):
        fan_in = blk.cin * blk.kernel * blk.kernel
        w = gen.normal(0.0, np.sqrt(2.0 / fan_in),
                       size=(blk.cout, blk.cin, blk.kernel, blk.kernel))
        self.params[f"{blk.name}.w"] = w.astype(self.dtype)
        self.params[f"{blk.name}.bn.g"] = np.ones(blk.cout, dtype=self.dtype)
        self.params[f"{blk.name}.bn.b"] = np.zeros(blk.cout, dtype=self.dtype)
        self.excluded.update({f"{blk.name}.bn.g", f"{blk.name}.bn.b"})

    def add_linear(self, name: str, fan_in: int, fan_out: int, gen):
        w = gen.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        self.params[f"{name}.w"] = w.astype(self.dtype)
        self.params[f"{name}.b"] = np.zeros(fan_out, dtype=self.dtype)
        self.excluded.add(f"{name}.b")

    def add_bn(self, name: str, dim: int):
        self.params[f"{name}.g"] = np.ones(dim, dtype=self.dtype)
        self.params[f"{name}.b"] = np.zeros(dim, dtype=self.dtype)
        self.excluded.update({f"{name}.g", f"{name}.b"})
        self.extra_bn_dims[name] = dim

    def _stat_dims(self, cfg: SwitchConfig) -> dict:
        dims = {}
        for blk in encoder_blocks(self.family, cfg):
            if f"{blk.name}.w" in self.params:
                dims[f"{blk.name}.bn"] = blk.cout
        dims.update(self.extra_bn_dims)
        return dims

    def ensure_stats(self, cfg: SwitchConfig) -> dict:
        table = self.bn_stats.setdefault(cfg, {})
        for name, dim in self._stat_dims(cfg).items():
            if name not in table:
                table[name] = RunningStats(dim, self.dtype)
        return table

    def copy(self) -> "SlimmableParamStore":
        dup = SlimmableParamStore(self.family, self.dtype)
        dup.params = {k: v.copy() for k, v in self.params.items()}
        dup.bn_stats = {cfg: {n: s.copy() for n, s in table.items()}
                        for cfg, table in self.bn_stats.items()}
        dup.excluded = set(self.excluded)
        dup.extra_bn_dims = dict(self.extra_bn_dims)
        return dup


def slice_params(store: SlimmableParamStore, cfg: SwitchConfig):
    """Aliasing views of the full tensors for one config.

    Returns (views, indices): name -> array view and name -> numpy index
    into the corresponding full tensor, covering the encoder entries plus
    any head entries (which are full-size except input-sliced first linear
    layers handled by the ssl module).
    """
    errs = _check_cfg(store.family, cfg)
    if errs:
        raise ConfigError("; ".join(errs))
    views, indices = {}, {}
    for blk in encoder_blocks(store.family, cfg):
        widx = (slice(0, blk.cout), slice(0, blk.cin), slice(None), slice(None))
        cidx = (slice(0, blk.cout),)
        views[f"{blk.name}.w"] = store.params[f"{blk.name}.w"][widx]
        indices[f"{blk.name}.w"] = widx
        for suffix in (".bn.g", ".bn.b"):
            views[blk.name + suffix] = store.params[blk.name + suffix][cidx]
            indices[blk.name + suffix] = cidx
    return views, indices


def forward_encoder(store: SlimmableParamStore, cfg: SwitchConfig, batch,
                    mode: str = "train", tape=None, update_stats=None,
                    leaf_prefix: str = "") -> Tensor:
    """Representation of `batch` under the sliced network: N x d(cfg)."""
    if batch.shape[1] != store.family.stem_in:
        raise ConfigError(
            f"batch has {batch.shape[1]} channels, family stem expects {store.family.stem_in}")
    views, _ = slice_params(store, cfg)
    stats = store.ensure_stats(cfg)

    def p(name):
        v = views[name]
        return tape.leaf(leaf_prefix + name, v) if tape is not None else Tensor(v)

    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=store.dtype))
    for blk in encoder_blocks(store.family, cfg):
        x = T.conv2d(x, p(f"{blk.name}.w"), stride=blk.stride, pad=blk.pad)
        x = T.batch_norm(x, p(f"{blk.name}.bn.g"), p(f"{blk.name}.bn.b"),
                         stats[f"{blk.name}.bn"], mode=mode,
                         update_stats=update_stats)
        x = T.relu(x)
    return T.global_avg_pool(x)


def sample_subnetworks(family: FamilySpec, n: int, gen) -> list:
    """Sandwich-rule sample: [smallest, full, n-2 distinct random middles].

    If the smallest config *is* the full config (degenerate single-DN
    family) the sample collapses to just the full network.
    """
    if n < 2:
        raise ConfigError("sandwich sampling needs n >= 2")
    small = smallest_config(family)
    full = find_full(family)
    if same_active(family, small, full):
        return [full]
    middles = [c for c in family.dn_list if c != small and c != full]
    if n - 2 > len(middles):
        raise ConfigError(
            f"n={n} exceeds the {len(middles)} available middle configurations + 2")
    picked = []
    if n > 2:
        idx = gen.choice(len(middles), size=n - 2, replace=False)
        picked = [middles[i] for i in idx]
    return [small, full] + picked


def conv_layer_cost(cin: int, cout: int, kernel: int, out_h: int, out_w: int,
                    bias: bool = False):
    """(params, macs) of one conv layer at the given output resolution."""
    params = cout * cin * kernel * kernel + (cout if bias else 0)
    macs = cout * cin * kernel * kernel * out_h * out_w
    return params, macs


def count_cost(family: FamilySpec, cfg: SwitchConfig):
    """(params, flops) of the sliced encoder at the family input size.

    Counts conv weights and BN affine parameters; MACs are conv
    multiply-accumulates only, FLOPs = 2 * MACs.
    """
    errs = _check_cfg(family, cfg)
    if errs:
        raise ConfigError("; ".join(errs))
    h, w = family.input_hw
    params = 0
    macs = 0
    for blk in encoder_blocks(family, cfg):
        h = (h + 2 * blk.pad - blk.kernel) // blk.stride + 1
        w = (w + 2 * blk.pad - blk.kernel) // blk.stride + 1
        p, m = conv_layer_cost(blk.cin, blk.cout, blk.kernel, h, w)
        params += p + 2 * blk.cout  # BN gamma/beta
        macs += m
    return params, 2 * macs


def reduce_family(family: FamilySpec, cfg: SwitchConfig) -> FamilySpec:
    """Single-DN family whose full network equals the sliced network of `cfg`."""
    stages = tuple(StageSpec(channels=active_channels(family, cfg, s),
                             blocks=cfg.blocks[s],
                             kernel=family.stages[s].kernel,
                             stride=family.stages[s].stride,
                             down_kernel=family.stages[s].down_kernel)
                   for s in range(len(family.stages)))
    full = SwitchConfig(widths=(1.0,) * len(stages),
                        blocks=tuple(s.blocks for s in stages))
    return FamilySpec(stem_in=family.stem_in, stem_channels=family.stem_channels,
                      stages=stages, dn_list=(full,), channel_divisor=1,
                      stem_kernel=family.stem_kernel, stem_stride=family.stem_stride,
                      input_hw=family.input_hw)


def extract_standalone(store: SlimmableParamStore, cfg: SwitchConfig) -> SlimmableParamStore:
    """Deep-copied standalone network equal to the sliced encoder at `cfg`."""
    reduced = reduce_family(store.family, cfg)
    out = SlimmableParamStore(reduced, store.dtype)
    views, _ = slice_params(store, cfg)
    for blk in encoder_blocks(store.family, cfg):
        out.params[f"{blk.name}.w"] = views[f"{blk.name}.w"].copy()
        out.params[f"{blk.name}.bn.g"] = views[f"{blk.name}.bn.g"].copy()
        out.params[f"{blk.name}.bn.b"] = views[f"{blk.name}.bn.b"].copy()
        out.excluded.update({f"{blk.name}.bn.g", f"{blk.name}.bn.b"})
    src_stats = store.ensure_stats(cfg)
    encoder_bns = {f"{blk.name}.bn" for blk in encoder_blocks(store.family, cfg)}
    out.bn_stats[full_config(reduced)] = {n: s.copy() for n, s in src_stats.items()
                                          if n in encoder_bns}
    return out
