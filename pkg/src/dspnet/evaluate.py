"""Representation-quality protocols over frozen or fine-tuned encoders.

All protocols read the encoder through eval-mode BN with the config's own
statistics; the linear probe never writes to the encoder. Sweeps emit one
row per desired network for accuracy-vs-FLOPs tables.
"""

from __future__ import annotations

import numpy as np

from . import data as datamod
from . import optim as optimmod
from . import rng as streams
from . import slimnet
from . import tensor as T
from .config import ProbeSpec
from .errors import ContractError
from .slimnet import SlimmableParamStore, SwitchConfig
from .tensor import RunningStats, Tensor

# probe stream tags
_TAG_INIT = 0
_TAG_SHUFFLE = 1
_TAG_AUGMENT = 2


def encode_dataset(store, cfg, images, batch_size=256) -> np.ndarray:
    outs = []
    for b in range(0, len(images), batch_size):
        outs.append(slimnet.forward_encoder(store, cfg, images[b:b + batch_size],
                                            mode="eval", update_stats=False).data)
    return np.concatenate(outs, axis=0)


def _probe_augment(images, idxs, spec, seed, epoch):
    out = np.empty((len(idxs), images.shape[1], spec.out_size, spec.out_size),
                   dtype=images.dtype)
    for row, idx in enumerate(idxs):
        gen = streams.stream_rng(seed, streams.PROBE, _TAG_AUGMENT,
                                 epoch * 1_000_003 + int(idx))
        out[row] = datamod.augment_view(images[idx], spec, gen)
    return out


def linear_probe(store: SlimmableParamStore, cfg: SwitchConfig, train_ds, test_ds,
                 probe: ProbeSpec, seed: int = 0, augment_spec=None) -> float:
    """Top-1 accuracy of a BN+linear classifier on frozen representations."""
    if train_ds.num_classes != test_ds.num_classes:
        raise ContractError("train/test class counts differ")
    d = slimnet.active_channels(store.family, cfg, len(store.family.stages) - 1)
    k = train_ds.num_classes
    gen = streams.stream_rng(seed, streams.PROBE, _TAG_INIT)
    head = {
        "bn.g": np.ones(d, dtype=np.float32),
        "bn.b": np.zeros(d, dtype=np.float32),
        "w": gen.normal(0, np.sqrt(1.0 / d), size=(k, d)).astype(np.float32),
        "b": np.zeros(k, dtype=np.float32),
    }
    stats = RunningStats(d)
    buffers = {}
    bs = min(probe.batch_size, len(train_ds))
    peak = probe.base_lr * bs / 256.0
    spe = max(len(train_ds) // bs, 1)
    total_steps = probe.epochs * spe
    if augment_spec is not None and probe.augment:
        aug = datamod.AugmentSpec(crop_scale=augment_spec.crop_scale,
                                  flip_prob=augment_spec.flip_prob,
                                  brightness=0.0, contrast=0.0,
                                  out_size=augment_spec.out_size)
    else:
        aug = None

    step = 0
    for epoch in range(probe.epochs):
        order = streams.stream_rng(seed, streams.PROBE, _TAG_SHUFFLE,
                                   epoch).permutation(len(train_ds))
        for b in range(spe):
            idxs = order[b * bs:(b + 1) * bs]
            if aug is not None:
                batch = _probe_augment(train_ds.images, idxs, aug, seed, epoch)
            else:
                batch = train_ds.images[idxs]
            reps = slimnet.forward_encoder(store, cfg, batch, mode="eval",
                                           update_stats=False).data
            onehot = np.zeros((len(idxs), k), dtype=np.float32)
            onehot[np.arange(len(idxs)), train_ds.labels[idxs]] = 1

            tape = T.Tape()
            h = T.batch_norm(Tensor(reps), tape.leaf("bn.g", head["bn.g"]),
                             tape.leaf("bn.b", head["bn.b"]), stats, mode="train")
            logits = T.add(T.matmul(h, T.transpose(tape.leaf("w", head["w"]))),
                           tape.leaf("b", head["b"]))
            loss = T.scale(T.tsum(T.mul(Tensor(onehot), T.log_softmax(logits))),
                           -1.0 / len(idxs))
            grads = {n: g.data for n, g in T.backward(loss, tape).items()}
            lr = optimmod.schedule_lr(step, total_steps, 0, peak)
            optimmod.sgd_momentum_step(head, grads, lr, probe.momentum, 0.0, buffers)
            step += 1

    reps = encode_dataset(store, cfg, test_ds.images)
    h = T.batch_norm(Tensor(reps), Tensor(head["bn.g"]), Tensor(head["bn.b"]),
                     stats, mode="eval").data
    logits = h @ head["w"].T + head["b"]
    return float((logits.argmax(axis=1) == test_ds.labels).mean())


def knn_classify(train_feats, train_labels, test_feats, num_classes, k) -> np.ndarray:
    """Predicted labels under cosine-distance kNN.

    Majority vote among the k nearest; ties broken by the smallest summed
    distance (and neighbor ties at the cut resolved nearest-first).
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    if k > len(train_feats):
        raise ContractError(f"k={k} exceeds train size {len(train_feats)}")
    tr = train_feats / np.maximum(
        np.linalg.norm(train_feats, axis=1, keepdims=True), 1e-12)
    te = test_feats / np.maximum(
        np.linalg.norm(test_feats, axis=1, keepdims=True), 1e-12)
    sims = te @ tr.T
    # full argsort keeps the neighbor set deterministic under similarity ties
    nn = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    preds = np.empty(len(te), dtype=np.int64)
    for i in range(len(te)):
        labels = train_labels[nn[i]]
        dists = 1.0 - sims[i, nn[i]]
        counts = np.bincount(labels, minlength=num_classes)
        best = counts.max()
        tied = np.flatnonzero(counts == best)
        if len(tied) == 1:
            preds[i] = tied[0]
        else:
            sums = np.array([dists[labels == c].sum() for c in tied])
            preds[i] = tied[sums.argmin()]
    return preds


def knn_eval(store: SlimmableParamStore, cfg: SwitchConfig, train_ds, test_ds,
             k: int = 20) -> float:
    """K-nearest-neighbor top-1 under cosine distance on frozen features."""
    tr = encode_dataset(store, cfg, train_ds.images)
    te = encode_dataset(store, cfg, test_ds.images)
    preds = knn_classify(tr, train_ds.labels, te, train_ds.num_classes, k)
    return float((preds == test_ds.labels).mean())


def semi_finetune(store: SlimmableParamStore, cfg: SwitchConfig, train_ds, test_ds,
                  fraction: float, probe: ProbeSpec, seed: int = 0,
                  batch_size: int = 128) -> float:
    """Fine-tune everything on a class-balanced fraction of the labels.

    Backbone and classifier get distinct learning rates, both scaled by the
    batch-size rule. Operates on a copy; the caller's store is untouched.
    """
    labeled, _ = datamod.split_semi(train_ds, fraction, seed)
    work = store.copy()
    d = slimnet.active_channels(work.family, cfg, len(work.family.stages) - 1)
    k = train_ds.num_classes
    gen = streams.stream_rng(seed, streams.PROBE, _TAG_INIT)
    head = {"w": gen.normal(0, np.sqrt(1.0 / d), size=(k, d)).astype(work.dtype),
            "b": np.zeros(k, dtype=work.dtype)}
    bs = min(batch_size, len(labeled))
    lr_back = probe.semi_backbone_lr * bs / 256.0
    lr_head = probe.semi_classifier_lr * bs / 256.0
    spe = max(len(labeled) // bs, 1)
    total_steps = probe.semi_epochs * spe
    back_buffers, head_buffers = {}, {}
    _, indices = slimnet.slice_params(work, cfg)

    step = 0
    for epoch in range(probe.semi_epochs):
        order = streams.stream_rng(seed, streams.PROBE, _TAG_SHUFFLE,
                                   epoch).permutation(len(labeled))
        for b in range(spe):
            idxs = order[b * bs:(b + 1) * bs]
            batch = labeled.images[idxs]
            onehot = np.zeros((len(idxs), k), dtype=work.dtype)
            onehot[np.arange(len(idxs)), labeled.labels[idxs]] = 1
            tape = T.Tape()
            y = slimnet.forward_encoder(work, cfg, batch, mode="train", tape=tape)
            logits = T.add(T.matmul(y, T.transpose(tape.leaf("cls.w", head["w"]))),
                           tape.leaf("cls.b", head["b"]))
            loss = T.scale(T.tsum(T.mul(Tensor(onehot), T.log_softmax(logits))),
                           -1.0 / len(idxs))
            grads = T.backward(loss, tape)
            ratio = optimmod.schedule_lr(step, total_steps, 0, 1.0)

            back_grads = {}
            for name, g in grads.items():
                if name.startswith("cls."):
                    continue
                full = np.zeros_like(work.params[name])
                full[indices[name]] = g.data
                back_grads[name] = full
            optimmod.sgd_momentum_step(work.params, back_grads, lr_back * ratio,
                                       probe.momentum, 0.0, back_buffers)
            head_grads = {"w": grads["cls.w"].data, "b": grads["cls.b"].data}
            optimmod.sgd_momentum_step(head, head_grads, lr_head * ratio,
                                       probe.momentum, 0.0, head_buffers)
            step += 1

    reps = encode_dataset(work, cfg, test_ds.images)
    logits = reps @ head["w"].T + head["b"]
    return float((logits.argmax(axis=1) == test_ds.labels).mean())


def collapse_metrics(representations: np.ndarray) -> dict:
    """Spread diagnostics of an embedding matrix (N x d).

    per_dim_std is scaled by sqrt(d) so points uniform on the unit sphere
    score 1.0; effective_rank is exp(entropy of normalized singular values).
    """
    reps = np.asarray(representations, dtype=np.float64)
    if reps.ndim != 2 or reps.shape[0] < 2:
        raise ContractError("collapse_metrics needs at least 2 row vectors")
    norms = np.linalg.norm(reps, axis=1)
    unit = reps / np.maximum(norms[:, None], 1e-12)
    d = reps.shape[1]
    per_dim_std = float(unit.std(axis=0).mean() * np.sqrt(d))
    sv = np.linalg.svd(unit, compute_uv=False)
    total = sv.sum()
    if total <= 0:
        erank = 1.0
    else:
        p = sv / total
        p = p[p > 0]
        erank = float(np.exp(-(p * np.log(p)).sum()))
    return {"mean_norm": float(norms.mean()), "per_dim_std": per_dim_std,
            "effective_rank": erank}


def dn_sweep(store: SlimmableParamStore, protocol: str, train_ds, test_ds,
             probe: ProbeSpec, seed: int = 0, augment_spec=None,
             fraction: float = 0.1) -> list:
    """Run one protocol for every DN; rows sorted by FLOPs ascending."""
    rows = []
    for cfg in store.family.dn_list:
        params, flops = slimnet.count_cost(store.family, cfg)
        if protocol == "linear":
            metric = linear_probe(store, cfg, train_ds, test_ds, probe, seed,
                                  augment_spec)
        elif protocol == "knn":
            metric = knn_eval(store, cfg, train_ds, test_ds, probe.knn_k)
        elif protocol == "semi":
            metric = semi_finetune(store, cfg, train_ds, test_ds, fraction,
                                   probe, seed)
        else:
            raise ContractError(f"unknown protocol {protocol!r}")
        rows.append({"cfg": cfg.key(), "params": params, "flops": flops,
                     "metric": metric})
    rows.sort(key=lambda r: r["flops"])
    return rows
