"""Run configuration: YAML schema, strict parsing, canonical round-trip.

Unknown keys are errors (no silent typo absorption). `DSPNET_SEED` in the
environment overrides the configured seed. The canonical dict form feeds
both serialization and the checkpoint config hash.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import yaml

from .data import AugmentSpec
from .errors import ConfigError
from .optim import OptimSpec
from .slimnet import FamilySpec, StageSpec, SwitchConfig, validate_family
from .ssl import HeadSpec


@dataclass(frozen=True)
class DataSpec:
    source: str = "synthetic"            # synthetic | idx
    num_classes: int = 4
    per_class: int = 500
    test_per_class: int = 125
    size: int = 32
    noise_std: float = 0.08
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(f"data.source must be synthetic|idx, got {self.source!r}")


@dataclass(frozen=True)
class ProbeSpec:
    epochs: int = 30
    batch_size: int = 256
    base_lr: float = 0.2
    momentum: float = 0.9
    augment: bool = True
    knn_k: int = 20
    semi_backbone_lr: float = 0.001
    semi_classifier_lr: float = 0.02
    semi_epochs: int = 20


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    epochs: int = 20
    batch_size: int = 128
    n_sampled: int = 3
    tau_base: float = 0.996
    full_scale_warmup_epochs: int = 2
    family: FamilySpec = None
    head: HeadSpec = field(default_factory=HeadSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    data: DataSpec = field(default_factory=DataSpec)
    probe: ProbeSpec = field(default_factory=ProbeSpec)
    out_dir: str = "runs/out"
    checkpoint_every_epoch: bool = True
    bn_recalibrate: bool = False
    reference_once_ratio: float = 2.11
    reference_individual_ratio: float = 4.42

    def __post_init__(self):
        if self.n_sampled < 2:
            raise ConfigError("n_sampled must be >= 2")
        if self.full_scale_warmup_epochs > self.epochs:
            raise ConfigError("full_scale_warmup_epochs exceeds epochs")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


# ---------------------------------------------------------------------------
# dict <-> dataclass conversion
# ---------------------------------------------------------------------------

def _take(d: dict, context: str, **fields):
    """Pop recognized keys with defaults; any leftover key is an error."""
    out = {}
    d = dict(d)
    for name, default in fields.items():
        out[name] = d.pop(name, default)
    if d:
        raise ConfigError(f"unknown keys in {context}: {sorted(d)}")
    return out


_MISSING = object()


def family_from_dict(d: dict) -> FamilySpec:
    f = _take(d, "family", stem_in=1, stem_channels=16, stem_kernel=3,
              stem_stride=1, channel_divisor=1, input_size=32, stages=_MISSING,
              dns=_MISSING)
    if f["stages"] is _MISSING or f["dns"] is _MISSING:
        raise ConfigError("family needs 'stages' and 'dns'")
    stages = []
    for i, s in enumerate(f["stages"]):
        sf = _take(s, f"family.stages[{i}]", channels=_MISSING, blocks=1,
                   kernel=3, stride=2, down_kernel=4)
        if sf["channels"] is _MISSING:
            raise ConfigError(f"family.stages[{i}] needs 'channels'")
        stages.append(StageSpec(channels=int(sf["channels"]), blocks=int(sf["blocks"]),
                                kernel=int(sf["kernel"]), stride=int(sf["stride"]),
                                down_kernel=int(sf["down_kernel"])))
    dns = []
    for i, dn in enumerate(f["dns"]):
        df = _take(dn, f"family.dns[{i}]", width=None, widths=None, blocks=None)
        if df["width"] is not None and df["widths"] is not None:
            raise ConfigError(f"family.dns[{i}]: give either 'width' or 'widths'")
        if df["widths"] is not None:
            widths = tuple(float(w) for w in df["widths"])
        elif df["width"] is not None:
            widths = (float(df["width"]),) * len(stages)
        else:
            raise ConfigError(f"family.dns[{i}] needs 'width' or 'widths'")
        if df["blocks"] is not None:
            blocks = tuple(int(b) for b in df["blocks"])
        else:
            blocks = tuple(s.blocks for s in stages)
        dns.append(SwitchConfig(widths=widths, blocks=blocks))
    size = int(f["input_size"])
    return FamilySpec(stem_in=int(f["stem_in"]), stem_channels=int(f["stem_channels"]),
                      stages=tuple(stages), dn_list=tuple(dns),
                      channel_divisor=int(f["channel_divisor"]),
                      stem_kernel=int(f["stem_kernel"]),
                      stem_stride=int(f["stem_stride"]), input_hw=(size, size))


def family_to_dict(fam: FamilySpec) -> dict:
    return {
        "stem_in": fam.stem_in,
        "stem_channels": fam.stem_channels,
        "stem_kernel": fam.stem_kernel,
        "stem_stride": fam.stem_stride,
        "channel_divisor": fam.channel_divisor,
        "input_size": fam.input_hw[0],
        "stages": [{"channels": s.channels, "blocks": s.blocks, "kernel": s.kernel,
                    "stride": s.stride, "down_kernel": s.down_kernel}
                   for s in fam.stages],
        "dns": [{"widths": list(c.widths), "blocks": list(c.blocks)}
                for c in fam.dn_list],
    }


def config_from_dict(d: dict) -> RunConfig:
    top = _take(d, "config", seed=0, epochs=20, batch_size=128, n_sampled=3,
                tau_base=0.996, full_scale_warmup_epochs=2, family=_MISSING,
                head={}, augment={}, optim={}, data={}, probe={},
                out_dir="runs/out", checkpoint_every_epoch=True,
                bn_recalibrate=False, report={})
    if top["family"] is _MISSING:
        raise ConfigError("config needs a 'family' section")
    family = family_from_dict(top["family"])
    errs = validate_family(family)
    if errs:
        raise ConfigError("invalid family: " + "; ".join(errs))

    head = HeadSpec(**_take(top["head"], "head", hidden_dim=256, proj_dim=64))
    aug = _take(top["augment"], "augment", crop_scale=[0.6, 1.0], flip_prob=0.5,
                brightness=0.2, contrast=0.2, out_size=family.input_hw[0])
    augment = AugmentSpec(crop_scale=tuple(float(x) for x in aug["crop_scale"]),
                          flip_prob=float(aug["flip_prob"]),
                          brightness=float(aug["brightness"]),
                          contrast=float(aug["contrast"]),
                          out_size=int(aug["out_size"]))
    opt = _take(top["optim"], "optim", kind="lars", base_lr=0.2,
                momentum=0.9, weight_decay=1.5e-6, warmup_epochs=2,
                lars_eta=0.001, exclude_bias_bn=True)
    optim = OptimSpec(batch_size=int(top["batch_size"]), total_epochs=int(top["epochs"]),
                      kind=opt["kind"], base_lr=float(opt["base_lr"]),
                      momentum=float(opt["momentum"]),
                      weight_decay=float(opt["weight_decay"]),
                      warmup_epochs=int(opt["warmup_epochs"]),
                      lars_eta=float(opt["lars_eta"]),
                      exclude_bias_bn=bool(opt["exclude_bias_bn"]))
    data = DataSpec(**_take(top["data"], "data", source="synthetic", num_classes=4,
                            per_class=500, test_per_class=125,
                            size=family.input_hw[0], noise_std=0.08,
                            train_images="", train_labels="", test_images="",
                            test_labels=""))
    probe = ProbeSpec(**_take(top["probe"], "probe", epochs=30, batch_size=256,
                              base_lr=0.2, momentum=0.9, augment=True, knn_k=20,
                              semi_backbone_lr=0.001, semi_classifier_lr=0.02,
                              semi_epochs=20))
    report = _take(top["report"], "report", once_ratio=2.11, individual_ratio=4.42)

    seed = int(os.environ.get("DSPNET_SEED", top["seed"]))
    return RunConfig(seed=seed, epochs=int(top["epochs"]),
                     batch_size=int(top["batch_size"]),
                     n_sampled=int(top["n_sampled"]), tau_base=float(top["tau_base"]),
                     full_scale_warmup_epochs=int(top["full_scale_warmup_epochs"]),
                     family=family, head=head, augment=augment, optim=optim,
                     data=data, probe=probe, out_dir=str(top["out_dir"]),
                     checkpoint_every_epoch=bool(top["checkpoint_every_epoch"]),
                     bn_recalibrate=bool(top["bn_recalibrate"]),
                     reference_once_ratio=float(report["once_ratio"]),
                     reference_individual_ratio=float(report["individual_ratio"]))


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "n_sampled": cfg.n_sampled,
        "tau_base": cfg.tau_base,
        "full_scale_warmup_epochs": cfg.full_scale_warmup_epochs,
        "family": family_to_dict(cfg.family),
        "head": {"hidden_dim": cfg.head.hidden_dim, "proj_dim": cfg.head.proj_dim},
        "augment": {"crop_scale": list(cfg.augment.crop_scale),
                    "flip_prob": cfg.augment.flip_prob,
                    "brightness": cfg.augment.brightness,
                    "contrast": cfg.augment.contrast,
                    "out_size": cfg.augment.out_size},
        "optim": {"kind": cfg.optim.kind, "base_lr": cfg.optim.base_lr,
                  "momentum": cfg.optim.momentum,
                  "weight_decay": cfg.optim.weight_decay,
                  "warmup_epochs": cfg.optim.warmup_epochs,
                  "lars_eta": cfg.optim.lars_eta,
                  "exclude_bias_bn": cfg.optim.exclude_bias_bn},
        "data": {"source": cfg.data.source, "num_classes": cfg.data.num_classes,
                 "per_class": cfg.data.per_class,
                 "test_per_class": cfg.data.test_per_class, "size": cfg.data.size,
                 "noise_std": cfg.data.noise_std,
                 "train_images": cfg.data.train_images,
                 "train_labels": cfg.data.train_labels,
                 "test_images": cfg.data.test_images,
                 "test_labels": cfg.data.test_labels},
        "probe": {"epochs": cfg.probe.epochs, "batch_size": cfg.probe.batch_size,
                  "base_lr": cfg.probe.base_lr, "momentum": cfg.probe.momentum,
                  "augment": cfg.probe.augment, "knn_k": cfg.probe.knn_k,
                  "semi_backbone_lr": cfg.probe.semi_backbone_lr,
                  "semi_classifier_lr": cfg.probe.semi_classifier_lr,
                  "semi_epochs": cfg.probe.semi_epochs},
        "out_dir": cfg.out_dir,
        "checkpoint_every_epoch": cfg.checkpoint_every_epoch,
        "bn_recalibrate": cfg.bn_recalibrate,
        "report": {"once_ratio": cfg.reference_once_ratio,
                   "individual_ratio": cfg.reference_individual_ratio},
    }


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return config_from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    """Digest of the fields that determine the trained result.

    Output locations, probe settings, and report annotations are excluded:
    two runs differing only there produce identical checkpoints.
    """
    d = config_to_dict(cfg)
    for key in ("out_dir", "checkpoint_every_epoch", "probe", "report"):
        d.pop(key, None)
    canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
