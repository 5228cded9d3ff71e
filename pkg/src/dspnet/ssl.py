"""Self-supervised heads and objective.

The online branch is the slimmable encoder plus projector and predictor;
the target branch is a full-size encoder+projector updated only as a
moving average of the online one. Per iteration the loss is the unweighted
sum over sampled sub-networks of the symmetrized normalized-MSE between
online predictions and detached target projections, which are computed
once and shared by all sampled sub-networks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as streams
from . import slimnet
from . import tensor as T
from .errors import ContractError
from .slimnet import SlimmableParamStore, SwitchConfig
from .tensor import Tensor

PREDICTOR_PREFIX = "pred."


@dataclass(frozen=True)
class HeadSpec:
    hidden_dim: int = 256
    proj_dim: int = 64

    def __post_init__(self):
        if not self.hidden_dim >= self.proj_dim >= 2:
            raise ContractError("head dims must satisfy hidden_dim >= proj_dim >= 2")


@dataclass
class TrainState:
    """Online and target parameter stores plus EMA bookkeeping."""

    online: SlimmableParamStore       # encoder + projector + predictor
    target: SlimmableParamStore       # encoder + projector, full size only
    head: HeadSpec
    tau_base: float = 0.996
    step: int = 0

    @property
    def family(self):
        return self.online.family


def _add_mlp(store: SlimmableParamStore, prefix: str, in_dim: int, head: HeadSpec, gen):
    store.add_linear(f"{prefix}.l1", in_dim, head.hidden_dim, gen)
    store.add_bn(f"{prefix}.bn", head.hidden_dim)
    store.add_linear(f"{prefix}.l2", head.hidden_dim, head.proj_dim, gen)


def init_train_state(family, head: HeadSpec, seed: int, dtype=np.float32) -> TrainState:
    """Fresh online store with heads, and a target initialized as its copy."""
    online = SlimmableParamStore.init_encoder(family, seed, dtype)
    gen = streams.stream_rng(seed, streams.INIT, 1)
    _add_mlp(online, "proj", family.rep_dim, head, gen)
    _add_mlp(online, "pred", head.proj_dim, head, gen)
    for cfg in family.dn_list:
        online.ensure_stats(cfg)

    full = slimnet.find_full(family)
    target = SlimmableParamStore(family, dtype)
    target.params = {k: v.copy() for k, v in online.params.items()
                     if not k.startswith(PREDICTOR_PREFIX)}
    target.excluded = {k for k in online.excluded if not k.startswith(PREDICTOR_PREFIX)}
    target.extra_bn_dims = {k: v for k, v in online.extra_bn_dims.items()
                            if not k.startswith(PREDICTOR_PREFIX)}
    target.bn_stats[full] = {n: s.copy() for n, s in online.ensure_stats(full).items()
                             if not n.startswith(PREDICTOR_PREFIX)}
    return TrainState(online=online, target=target, head=head)


def _mlp_forward(x: Tensor, store: SlimmableParamStore, prefix: str, cfg: SwitchConfig,
                 mode: str, tape, update_stats, in_slice: bool,
                 leaf_prefix: str = "") -> Tensor:
    """linear -> BN -> relu -> linear; first weight optionally input-sliced."""
    d = x.shape[1]
    w1_full = store.params[f"{prefix}.l1.w"]
    if d > w1_full.shape[1]:
        raise ContractError(
            f"{prefix} input width {d} exceeds stored width {w1_full.shape[1]}")
    if in_slice and d < w1_full.shape[1]:
        w1 = w1_full[:, :d]
    else:
        if d != w1_full.shape[1]:
            raise ContractError(f"{prefix} expects input width {w1_full.shape[1]}, got {d}")
        w1 = w1_full

    def p(name, arr):
        return tape.leaf(leaf_prefix + name, arr) if tape is not None else Tensor(arr)

    stats = store.ensure_stats(cfg)
    h = T.add(T.matmul(x, T.transpose(p(f"{prefix}.l1.w", w1))),
              p(f"{prefix}.l1.b", store.params[f"{prefix}.l1.b"]))
    h = T.batch_norm(h, p(f"{prefix}.bn.g", store.params[f"{prefix}.bn.g"]),
                     p(f"{prefix}.bn.b", store.params[f"{prefix}.bn.b"]),
                     stats[f"{prefix}.bn"], mode=mode, update_stats=update_stats)
    h = T.relu(h)
    return T.add(T.matmul(h, T.transpose(p(f"{prefix}.l2.w", store.params[f"{prefix}.l2.w"]))),
                 p(f"{prefix}.l2.b", store.params[f"{prefix}.l2.b"]))


def project(y: Tensor, store: SlimmableParamStore, cfg: SwitchConfig,
            mode: str = "train", tape=None, update_stats=None,
            leaf_prefix: str = "") -> Tensor:
    """Projection MLP; the online first layer is input-sliced to width(y)."""
    return _mlp_forward(y, store, "proj", cfg, mode, tape, update_stats,
                        in_slice=True, leaf_prefix=leaf_prefix)


def predict(z: Tensor, store: SlimmableParamStore, cfg: SwitchConfig,
            mode: str = "train", tape=None, update_stats=None,
            leaf_prefix: str = "") -> Tensor:
    """Prediction MLP (online branch only; fixed input width)."""
    return _mlp_forward(z, store, "pred", cfg, mode, tape, update_stats,
                        in_slice=False, leaf_prefix=leaf_prefix)


def byol_pair_loss(p: Tensor, z_target) -> Tensor:
    """Mean over the batch of ||p_bar - z_bar||^2; equals 2 - 2 cos(p, z).

    Gradient flows into p only; z_target is treated as a constant.
    """
    z = z_target.detach() if isinstance(z_target, Tensor) else Tensor(z_target)
    if p.shape != z.shape:
        raise ContractError(f"embedding shapes differ: {p.shape} vs {z.shape}")
    if p.shape[-1] < 1:
        raise ContractError("embeddings need at least one dimension")
    d = T.sub(T.l2_normalize(p), T.l2_normalize(z))
    return T.scale(T.tsum(T.mul(d, d)), 1.0 / p.shape[0])


def target_projection(state: TrainState, batch: np.ndarray) -> np.ndarray:
    """Full-size target embedding of a batch (no grads, no stat updates)."""
    full = slimnet.find_full(state.family)
    y = slimnet.forward_encoder(state.target, full, batch, mode="train",
                                update_stats=False)
    z = project(y, state.target, full, mode="train", update_stats=False)
    return z.data


def _online_direction_loss(state, cfg, batch, z_target, tape,
                           update_stats=True, leaf_prefix=""):
    y = slimnet.forward_encoder(state.online, cfg, batch, mode="train",
                                tape=tape, update_stats=update_stats,
                                leaf_prefix=leaf_prefix)
    z = project(y, state.online, cfg, mode="train", tape=tape,
                update_stats=update_stats, leaf_prefix=leaf_prefix)
    p = predict(z, state.online, cfg, mode="train", tape=tape,
                update_stats=update_stats, leaf_prefix=leaf_prefix)
    return byol_pair_loss(p, z_target)


def dspnet_step_loss(v, v_prime, sampled_cfgs, state: TrainState, tape=None):
    """Total symmetrized loss over the sampled configs on one tape.

    Returns (loss Tensor, diagnostics) where diagnostics carries the two
    directional per-config terms. Target projections are computed once and
    shared across configs. On a shared tape each config's leaves are scoped
    by a per-config prefix because the same full parameter is sliced at
    different widths.
    """
    zt_vp = target_projection(state, v_prime)
    zt_v = target_projection(state, v)
    total = None
    per_cfg = []
    for i, cfg in enumerate(sampled_cfgs):
        prefix = f"{i}:" if tape is not None else ""
        t1 = _online_direction_loss(state, cfg, v, zt_vp, tape, leaf_prefix=prefix)
        t2 = _online_direction_loss(state, cfg, v_prime, zt_v, tape, leaf_prefix=prefix)
        per_cfg.append((cfg, t1.item(), t2.item()))
        cfg_loss = T.add(t1, t2)
        total = cfg_loss if total is None else T.add(total, cfg_loss)
    return total, {"per_cfg": per_cfg, "total": total.item()}


def joint_gradients(v, v_prime, sampled_cfgs, state: TrainState):
    """Gradient of the summed loss computed on one joint tape.

    Reference semantics for `accumulate_gradients`: one backward pass over
    the whole step loss, then per-config leaves scattered into full-shape
    buffers.
    """
    tape = T.Tape()
    loss, diag = dspnet_step_loss(v, v_prime, sampled_cfgs, state, tape=tape)
    raw = T.backward(loss, tape)
    grads = {name: np.zeros_like(arr) for name, arr in state.online.params.items()}
    for i, cfg in enumerate(sampled_cfgs):
        prefix = f"{i}:"
        _, indices = slimnet.slice_params(state.online, cfg)
        for scoped, g in raw.items():
            if not scoped.startswith(prefix):
                continue
            name = scoped[len(prefix):]
            if name in indices:
                grads[name][indices[name]] += g.data
            elif g.data.shape != grads[name].shape:
                grads[name][:, : g.data.shape[1]] += g.data
            else:
                grads[name] += g.data
    return grads, loss.item(), diag


def accumulate_gradients(v, v_prime, sampled_cfgs, state: TrainState):
    """Sum of per-config loss gradients, one tape per config.

    Returns (grads, total_loss, diagnostics); grads maps every online
    parameter name to a full-shape array (slices outside a config's view
    contribute zero from that config's term).
    """
    zt_vp = target_projection(state, v_prime)
    zt_v = target_projection(state, v)
    grads = {name: np.zeros_like(arr) for name, arr in state.online.params.items()}
    total = 0.0
    per_cfg = []
    for cfg in sampled_cfgs:
        tape = T.Tape()
        t1 = _online_direction_loss(state, cfg, v, zt_vp, tape)
        t2 = _online_direction_loss(state, cfg, v_prime, zt_v, tape)
        cfg_loss = T.add(t1, t2)
        per_cfg.append((cfg, t1.item(), t2.item()))
        total += cfg_loss.item()
        cfg_grads = T.backward(cfg_loss, tape)
        _, indices = slimnet.slice_params(state.online, cfg)
        for name, g in cfg_grads.items():
            if name in indices:
                grads[name][indices[name]] += g.data
            elif name == "proj.l1.w" and g.data.shape != grads[name].shape:
                grads[name][:, : g.data.shape[1]] += g.data
            else:
                grads[name] += g.data
    return grads, total, {"per_cfg": per_cfg, "total": total}


def ema_update(target: SlimmableParamStore, online: SlimmableParamStore, tau: float):
    """xi <- tau * xi + (1 - tau) * theta over weights and full-config BN stats."""
    for name, xi in target.params.items():
        theta = online.params[name]
        if theta.shape != xi.shape:
            raise ContractError(f"EMA shape mismatch for {name}")
        t = xi.dtype.type(tau)
        xi[...] = t * xi + (1 - t) * theta
    full = slimnet.find_full(online.family)
    src = online.ensure_stats(full)
    dst = target.ensure_stats(full)
    for name, stats in dst.items():
        t = stats.mean.dtype.type(tau)
        stats.mean[...] = t * stats.mean + (1 - t) * src[name].mean
        stats.var[...] = t * stats.var + (1 - t) * src[name].var


def tau_schedule(step: int, total_steps: int, tau_base: float) -> float:
    """Cosine ramp of the EMA coefficient from tau_base to 1.0."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return tau_base
    return 1.0 - (1.0 - tau_base) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0
