"""Training orchestration.

One loop drives both DSPNet pretraining and the individual-BYOL baseline:
the baseline is the same loop on a single-DN family, which it degenerates
to step-for-step. Also: supervised slimmable fine-tuning with inplace
distillation from the full network, and wall-clock cost reporting.
"""

from __future__ import annotations

import os
import time

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from . import data as datamod
from . import metrics as metricsmod
from . import optim as optimmod
from . import rng as streams
from . import slimnet
from . import ssl
from . import tensor as T
from .errors import ConfigError, NonFiniteError
from .metrics import MetricsRecord, MetricsWriter
from .slimnet import SlimmableParamStore, SwitchConfig
from .ssl import TrainState

CLS_PREFIX = "cls"


# ---------------------------------------------------------------------------
# data assembly
# ---------------------------------------------------------------------------

def build_datasets(config: cfgmod.RunConfig):
    d = config.data
    if d.source == "synthetic":
        train = datamod.synth_shapes(d.num_classes, d.per_class, d.size,
                                     seed=config.seed, noise_std=d.noise_std)
        test = datamod.synth_shapes(d.num_classes, d.test_per_class, d.size,
                                    seed=config.seed + 1, noise_std=d.noise_std)
        return train, test
    train = datamod.load_idx(d.train_images, d.train_labels, d.num_classes)
    test = datamod.load_idx(d.test_images, d.test_labels, d.num_classes)
    return train, test


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def _store_tensors(store: SlimmableParamStore, prefix: str, out: dict,
                   with_stats=True):
    for name, arr in store.params.items():
        out[f"{prefix}/{name}"] = arr
    if with_stats:
        for cfg, table in store.bn_stats.items():
            for bn_name, st in table.items():
                out[f"{prefix}_bn/{cfg.key()}/{bn_name}.mean"] = st.mean
                out[f"{prefix}_bn/{cfg.key()}/{bn_name}.var"] = st.var


def _store_stats_from(tensors: dict, prefix: str, store: SlimmableParamStore):
    stats = {}
    lead = f"{prefix}_bn/"
    for name, arr in tensors.items():
        if not name.startswith(lead):
            continue
        cfg_key, rest = name[len(lead):].split("/", 1)
        bn_name, field = rest.rsplit(".", 1)
        entry = stats.setdefault(cfg_key, {}).setdefault(bn_name, {})
        entry[field] = arr
    for cfg_key, table in stats.items():
        cfg = SwitchConfig.from_key(cfg_key)
        store.bn_stats[cfg] = {
            bn: T.RunningStats.from_arrays(v["mean"].astype(store.dtype),
                                           v["var"].astype(store.dtype))
            for bn, v in table.items()
        }


def save_train_state(path, state: TrainState, config: cfgmod.RunConfig,
                     steps_done: int, epochs_done: int, tau: float):
    tensors = {}
    _store_tensors(state.online, "online", tensors)
    _store_tensors(state.target, "target", tensors)
    meta = {
        "kind": "train_state",
        "config_hash": cfgmod.config_hash(config),
        "family": cfgmod.family_to_dict(state.family),
        "head": {"hidden_dim": state.head.hidden_dim, "proj_dim": state.head.proj_dim},
        "rng_seed": config.seed,
        "steps_done": steps_done,
        "epochs_done": epochs_done,
        "tau": tau,
        "tau_base": state.tau_base,
    }
    ckpt.save_checkpoint(path, meta, tensors)


def load_train_state(path):
    meta, tensors = ckpt.load_checkpoint(path)
    if meta.get("kind") != "train_state":
        raise ConfigError(f"{path} is not a training checkpoint")
    family = cfgmod.family_from_dict(meta["family"])
    head = ssl.HeadSpec(**meta["head"])
    state = ssl.init_train_state(family, head, seed=int(meta["rng_seed"]))
    for branch, store in (("online", state.online), ("target", state.target)):
        for name in list(store.params):
            store.params[name] = np.ascontiguousarray(
                tensors[f"{branch}/{name}"].astype(store.dtype))
        store.bn_stats.clear()
        _store_stats_from(tensors, branch, store)
    state.tau_base = float(meta.get("tau_base", state.tau_base))
    state.step = int(meta["steps_done"])
    return meta, state


def export_dn(store: SlimmableParamStore, cfg: SwitchConfig, path):
    """Standalone encoder checkpoint for one DN (deep copies)."""
    alone = slimnet.extract_standalone(store, cfg)
    tensors = {}
    _store_tensors(alone, "enc", tensors)
    meta = {
        "kind": "dn_export",
        "family": cfgmod.family_to_dict(alone.family),
        "cfg": slimnet.full_config(alone.family).key(),
        "source_cfg": cfg.key(),
    }
    ckpt.save_checkpoint(path, meta, tensors)
    return path


def load_dn_export(path) -> SlimmableParamStore:
    meta, tensors = ckpt.load_checkpoint(path)
    if meta.get("kind") != "dn_export":
        raise ConfigError(f"{path} is not an exported DN checkpoint")
    family = cfgmod.family_from_dict(meta["family"])
    store = SlimmableParamStore(family, np.float32)
    for name, arr in tensors.items():
        if name.startswith("enc/"):
            store.params[name[len("enc/"):]] = np.ascontiguousarray(
                arr.astype(store.dtype))
    for name in store.params:
        if name.endswith(".bn.g") or name.endswith(".bn.b") or name.endswith(".b"):
            store.excluded.add(name)
    _store_stats_from(tensors, "enc", store)
    return store


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def _nan_guard(value, step):
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss at step {step}; aborting run")


def _pretrain_loop(config: cfgmod.RunConfig, family, out_dir, snapshot_hook=None):
    """Shared loop for DSPNet and individual-BYOL pretraining."""
    os.makedirs(out_dir, exist_ok=True)
    train_ds, _ = build_datasets(config)
    if len(train_ds) < config.batch_size:
        raise ConfigError("training set smaller than one batch")
    state = ssl.init_train_state(family, config.head, config.seed)
    state.tau_base = config.tau_base
    full = slimnet.find_full(family)
    buffers = {}
    peak = optimmod.effective_lr(config.optim)
    spe = len(train_ds) // config.batch_size
    total_steps = config.epochs * spe
    warmup_steps = config.optim.warmup_epochs * spe
    history = []

    metrics_path = os.path.join(out_dir, "metrics.csv")
    timing_path = os.path.join(out_dir, "timing.csv")
    step = 0
    tau = state.tau_base
    with MetricsWriter(metrics_path, timing_path) as writer:
        for epoch in range(config.epochs):
            order = streams.stream_rng(config.seed, streams.SHUFFLE,
                                       epoch).permutation(len(train_ds))
            for b in range(spe):
                t0 = time.perf_counter()
                idxs = order[b * config.batch_size:(b + 1) * config.batch_size]
                v, vp = datamod.augment_batch(train_ds.images, idxs,
                                              config.augment, config.seed, epoch)
                if epoch < config.full_scale_warmup_epochs:
                    cfgs = [full]
                else:
                    cfgs = slimnet.sample_subnetworks(
                        family, config.n_sampled,
                        streams.stream_rng(config.seed, streams.SAMPLE, step))
                try:
                    grads, total, diag = ssl.accumulate_gradients(v, vp, cfgs, state)
                except NonFiniteError as exc:
                    raise NonFiniteError(
                        f"step {step} (epoch {epoch}, cfgs {[c.key() for c in cfgs]}): {exc}"
                    ) from exc
                _nan_guard(total, step)
                lr = optimmod.schedule_lr(step, total_steps, warmup_steps, peak)
                optimmod.lars_step(state.online.params, grads, lr, config.optim,
                                   buffers, state.online.excluded)
                tau = ssl.tau_schedule(step, total_steps, state.tau_base)
                ssl.ema_update(state.target, state.online, tau)
                rec = MetricsRecord(
                    step=step, epoch=epoch, lr=lr, tau=tau, total_loss=total,
                    cfg_losses=[(c.key(), a, b2) for c, a, b2 in diag["per_cfg"]],
                    wall_clock_s=time.perf_counter() - t0)
                writer.write(rec)
                history.append(rec)
                if snapshot_hook is not None:
                    snapshot_hook(step=step, tau=tau, state=state)
                step += 1
            if config.checkpoint_every_epoch:
                save_train_state(os.path.join(out_dir, f"ckpt_epoch{epoch}.dspn"),
                                 state, config, step, epoch + 1, tau)
    if config.bn_recalibrate:
        recalibrate_bn(state.online, family.dn_list, train_ds,
                       batch_size=config.batch_size)
    state.step = step
    final = os.path.join(out_dir, "checkpoint.dspn")
    save_train_state(final, state, config, step, config.epochs, tau)
    return state, history, final


def pretrain_dspnet(config: cfgmod.RunConfig, out_dir=None, snapshot_hook=None):
    """Slimmable pretraining over the configured family.

    A single-DN family is accepted as a degenerate mode (it reproduces the
    plain BYOL baseline step-for-step); the config loader still rejects it
    for regular runs.
    """
    if config.family is None:
        raise ConfigError("config has no family")
    errs = slimnet.validate_family(config.family)
    if len(config.family.dn_list) == 1:
        errs = [e for e in errs if "at least 2" not in e]
    if errs:
        raise ConfigError("invalid family: " + "; ".join(errs))
    return _pretrain_loop(config, config.family, out_dir or config.out_dir,
                          snapshot_hook)


def pretrain_byol_individual(config: cfgmod.RunConfig, cfg: SwitchConfig,
                             out_dir=None, snapshot_hook=None):
    """Baseline: pretrain one standalone network of the family with the
    identical recipe (same loop, single-DN family)."""
    if not any(slimnet.same_active(config.family, cfg, c)
               for c in config.family.dn_list):
        raise ConfigError(f"config {cfg.key()} is not one of the family's DNs")
    reduced = slimnet.reduce_family(config.family, cfg)
    out_dir = out_dir or os.path.join(config.out_dir, f"byol-{cfg.key()}")
    return _pretrain_loop(config, reduced, out_dir, snapshot_hook)


def recalibrate_bn(store: SlimmableParamStore, cfgs, dataset, batch_size=128,
                   max_batches=8):
    """Refresh per-DN BN statistics with forward passes (no gradient steps)."""
    for cfg in cfgs:
        for b in range(min(max_batches, len(dataset) // batch_size)):
            batch = dataset.images[b * batch_size:(b + 1) * batch_size]
            slimnet.forward_encoder(store, cfg, batch, mode="train",
                                    update_stats=True)


# ---------------------------------------------------------------------------
# supervised slimmable fine-tuning (inplace distillation)
# ---------------------------------------------------------------------------

def _classifier_logits(store, cfg, batch, mode, tape=None, update_stats=None):
    y = slimnet.forward_encoder(store, cfg, batch, mode=mode, tape=tape,
                                update_stats=update_stats)
    d = y.shape[1]
    w_full = store.params[f"{CLS_PREFIX}.w"]
    w = w_full[:, :d] if d < w_full.shape[1] else w_full

    def p(name, arr):
        return tape.leaf(name, arr) if tape is not None else T.Tensor(arr)

    return T.add(T.matmul(y, T.transpose(p(f"{CLS_PREFIX}.w", w))),
                 p(f"{CLS_PREFIX}.b", store.params[f"{CLS_PREFIX}.b"]))


def _one_hot(labels, num_classes, dtype):
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def cross_entropy_loss(logits, onehot) -> "T.Tensor":
    n = logits.shape[0]
    return T.scale(T.tsum(T.mul(T.Tensor(onehot), T.log_softmax(logits))), -1.0 / n)


def distillation_loss(logits, teacher_logits) -> "T.Tensor":
    """KL(teacher || student) at temperature 1; teacher detached."""
    n = logits.shape[0]
    shifted = teacher_logits - teacher_logits.max(axis=-1, keepdims=True)
    t_log = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    t_prob = np.exp(t_log)
    gap = T.sub(T.Tensor(t_log), T.log_softmax(logits))
    return T.scale(T.tsum(T.mul(T.Tensor(t_prob), gap)), 1.0 / n)


def attach_classifier(store: SlimmableParamStore, num_classes: int, seed: int):
    gen = streams.stream_rng(seed, streams.INIT, 2)
    store.add_linear(CLS_PREFIX, store.family.rep_dim, num_classes, gen)


def finetune_slimmable_supervised(config: cfgmod.RunConfig, init_store=None,
                                  out_dir=None, opt=None):
    """Supervised slimmable training: full network learns from labels,
    other sampled sub-networks regress its detached output distribution.

    `init_store` is the pretrained online encoder (or None for random
    initialization). Returns (store, history, final checkpoint path).
    """
    out_dir = out_dir or os.path.join(config.out_dir, "finetune")
    os.makedirs(out_dir, exist_ok=True)
    train_ds, _ = build_datasets(config)
    family = config.family
    full = slimnet.find_full(family)
    if init_store is None:
        store = SlimmableParamStore.init_encoder(family, config.seed)
    else:
        if init_store.family != family:
            raise ConfigError("initialization checkpoint family differs from config")
        store = init_store.copy()
        for name in [n for n in store.params if n.split(".")[0] in ("proj", "pred")]:
            del store.params[name]
    attach_classifier(store, train_ds.num_classes, config.seed)
    opt = opt or optimmod.OptimSpec(kind="sgd_momentum", base_lr=0.2,
                                    batch_size=config.batch_size, momentum=0.9,
                                    weight_decay=1e-4, warmup_epochs=0,
                                    total_epochs=config.epochs)
    buffers = {}
    peak = optimmod.effective_lr(opt)
    spe = len(train_ds) // config.batch_size
    total_steps = config.epochs * spe
    history = []
    step = 0
    with MetricsWriter(os.path.join(out_dir, "metrics.csv"),
                       os.path.join(out_dir, "timing.csv")) as writer:
        for epoch in range(config.epochs):
            order = streams.stream_rng(config.seed, streams.SHUFFLE,
                                       epoch).permutation(len(train_ds))
            for b in range(spe):
                t0 = time.perf_counter()
                idxs = order[b * config.batch_size:(b + 1) * config.batch_size]
                batch = train_ds.images[idxs]
                labels = train_ds.labels[idxs]
                onehot = _one_hot(labels, train_ds.num_classes, store.dtype)
                n_cfgs = min(config.n_sampled, len(family.dn_list))
                cfgs = slimnet.sample_subnetworks(
                    family, max(n_cfgs, 2),
                    streams.stream_rng(config.seed, streams.SAMPLE, step))
                grads = {name: np.zeros_like(arr) for name, arr in store.params.items()}

                # full network: cross-entropy, and its logits teach the rest
                tape = T.Tape()
                logits_full = _classifier_logits(store, full, batch, "train", tape)
                loss_full = cross_entropy_loss(logits_full, onehot)
                _scatter(store, full, T.backward(loss_full, tape), grads)
                teacher = logits_full.data.copy()
                total = loss_full.item()
                per_cfg = [(full.key(), loss_full.item(), 0.0)]

                for cfg in cfgs:
                    if slimnet.same_active(family, cfg, full):
                        continue
                    tape = T.Tape()
                    logits = _classifier_logits(store, cfg, batch, "train", tape)
                    loss = distillation_loss(logits, teacher)
                    _scatter(store, cfg, T.backward(loss, tape), grads)
                    total += loss.item()
                    per_cfg.append((cfg.key(), loss.item(), 0.0))

                _nan_guard(total, step)
                lr = optimmod.schedule_lr(step, total_steps, 0, peak)
                optimmod.sgd_momentum_step(store.params, grads, lr, opt.momentum,
                                           opt.weight_decay, buffers)
                rec = MetricsRecord(step=step, epoch=epoch, lr=lr, tau=0.0,
                                    total_loss=total, cfg_losses=per_cfg,
                                    wall_clock_s=time.perf_counter() - t0)
                writer.write(rec)
                history.append(rec)
                step += 1
    tensors = {}
    _store_tensors(store, "online", tensors)
    meta = {"kind": "finetune", "family": cfgmod.family_to_dict(family),
            "config_hash": cfgmod.config_hash(config),
            "num_classes": train_ds.num_classes, "steps_done": step}
    final = os.path.join(out_dir, "checkpoint.dspn")
    ckpt.save_checkpoint(final, meta, tensors)
    return store, history, final


def _scatter(store, cfg, tape_grads, grads):
    _, indices = slimnet.slice_params(store, cfg)
    for name, g in tape_grads.items():
        if name in indices:
            grads[name][indices[name]] += g.data
        elif g.data.shape != grads[name].shape:
            grads[name][:, : g.data.shape[1]] += g.data
        else:
            grads[name] += g.data


def classify_accuracy(store: SlimmableParamStore, cfg: SwitchConfig, dataset,
                      batch_size=256) -> float:
    hits = 0
    for b in range(0, len(dataset), batch_size):
        batch = dataset.images[b:b + batch_size]
        logits = _classifier_logits(store, cfg, batch, "eval").data
        hits += int((logits.argmax(axis=1) == dataset.labels[b:b + batch_size]).sum())
    return hits / len(dataset)


# ---------------------------------------------------------------------------
# training-cost report
# ---------------------------------------------------------------------------

def measure_cost(dspnet_timing_path, individual_timing_paths, baseline_timing_path):
    """Wall-clock ratios against the full-network individual baseline."""
    dspnet_s = metricsmod.total_wall_clock(dspnet_timing_path)
    individual_s = [metricsmod.total_wall_clock(p) for p in individual_timing_paths]
    baseline_s = metricsmod.total_wall_clock(baseline_timing_path)
    return {
        "dspnet_seconds": dspnet_s,
        "individual_seconds": individual_s,
        "baseline_seconds": baseline_s,
        "dspnet_ratio": dspnet_s / baseline_s,
        "individual_sum_ratio": sum(individual_s) / baseline_s,
    }
