"""Acceptance battery.

Each test prints one `ACCEPTANCE <n> PASS` line (run with -s to see them);
a failure of any gate fails the corresponding test. The toy-run bundle
(two identical pretrainings of configs/toy.yaml plus baselines) is shared
across criteria 3, 9, 11, and 12, so the module takes several minutes.
"""

import copy
import dataclasses
import os
import time
from pathlib import Path

import numpy as np
import pytest

from dspnet import config as C
from dspnet import data as D
from dspnet import evaluate as E
from dspnet import metrics as M
from dspnet import slimnet as S
from dspnet import ssl
from dspnet import tensor as T
from dspnet import trainer

from oracles import finite_diff, rel_err

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


def small_family(widths=(0.5, 0.625, 0.75, 0.875, 1.0), stages=((6, 1), (8, 1)),
                 stem=4, hw=16):
    stage_specs = tuple(S.StageSpec(channels=c, blocks=b) for c, b in stages)
    dns = tuple(S.SwitchConfig((w,) * len(stages), tuple(b for _, b in stages))
                for w in widths)
    return S.FamilySpec(stem_in=1, stem_channels=stem, stages=stage_specs,
                        dn_list=dns, stem_kernel=4, stem_stride=2,
                        input_hw=(hw, hw))


def small_state(seed, family=None, head=None, tau_base=0.99):
    fam = family or small_family()
    st = ssl.init_train_state(fam, head or ssl.HeadSpec(hidden_dim=8, proj_dim=4),
                              seed, dtype=np.float64)
    st.tau_base = tau_base
    return st


class ToyBundle:
    """Artifacts of the committed toy config, built once per session."""

    def __init__(self, root):
        self.config = dataclasses.replace(
            C.load_config(os.path.join(CONFIGS, "toy.yaml")),
            out_dir=str(root / "run_a"))
        self.train_ds, self.test_ds = trainer.build_datasets(self.config)
        t0 = time.perf_counter()
        self.state, self.history, self.ckpt_a = trainer.pretrain_dspnet(self.config)
        self.toy_seconds = time.perf_counter() - t0

        cfg_b = dataclasses.replace(self.config, out_dir=str(root / "run_b"))
        _, _, self.ckpt_b = trainer.pretrain_dspnet(cfg_b)

        self.full = S.find_full(self.config.family)
        self.out_a = self.config.out_dir
        self.out_b = cfg_b.out_dir
        self.root = root


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    return ToyBundle(tmp_path_factory.mktemp("acceptance"))


class TestC01GradientCorrectness:
    def test_autodiff_vs_finite_differences(self):
        """Criterion 1: full per-config loss gradients match central FD on
        10 random small networks (f64, <= 5k params), rel err < 1e-4."""
        t0 = time.perf_counter()
        fam = small_family(widths=(0.5, 0.75, 1.0), stages=((3, 1), (4, 1)),
                           stem=2, hw=8)
        for trial in range(10):
            state = small_state(seed=100 + trial, family=fam)
            n_params = sum(p.size for p in state.online.params.values())
            assert n_params <= 5000
            cfg = fam.dn_list[trial % len(fam.dn_list)]
            rng = np.random.default_rng(trial)
            v = rng.random((2, 1, 8, 8))
            vp = rng.random((2, 1, 8, 8))
            zt = ssl.target_projection(state, vp)

            tape = T.Tape()
            loss = ssl._online_direction_loss(state, cfg, v, zt, tape,
                                              update_stats=False)
            grads = T.backward(loss, tape)
            _, indices = S.slice_params(state.online, cfg)

            def loss_value():
                return ssl._online_direction_loss(state, cfg, v, zt, None,
                                                  update_stats=False).item()

            # compare the loss gradient as one vector: normalization layers
            # leave some tensors with near-zero gradient norms where
            # elementwise FD is pure round-off; per-op backwards are checked
            # elementwise in test_tensor.py
            analytic, numeric = [], []
            for name, g in sorted(grads.items()):
                arr = state.online.params[name]
                if name in indices:
                    sub = arr[indices[name]]
                elif g.data.shape != arr.shape:
                    sub = arr[:, : g.data.shape[1]]
                else:
                    sub = arr
                fd = finite_diff(loss_value, [sub], h=1e-5)[0]
                analytic.append(g.data.ravel())
                numeric.append(fd.ravel())
            err = rel_err(np.concatenate(analytic), np.concatenate(numeric))
            assert err < 1e-4, (trial, err)
        elapsed = time.perf_counter() - t0
        assert elapsed < 120, f"gradient checks took {elapsed:.0f}s"
        print(f"\nACCEPTANCE 1 PASS: gradcheck on 10 nets in {elapsed:.0f}s")


class TestC02SlicingEquivalence:
    def test_sliced_forward_equals_standalone(self):
        """Criterion 2: every DN of a 5-DN family, 20 random inputs,
        sliced == standalone-copied forward within 1e-6."""
        t0 = time.perf_counter()
        fam = small_family()
        store = S.SlimmableParamStore.init_encoder(fam, seed=7)
        rng = np.random.default_rng(0)
        worst = 0.0
        for cfg in fam.dn_list:
            alone = S.extract_standalone(store, cfg)
            alone_full = S.full_config(alone.family)
            for _ in range(20):
                x = rng.random((2, 1, 16, 16)).astype(np.float32)
                a = S.forward_encoder(store, cfg, x, mode="eval").data
                b = S.forward_encoder(alone, alone_full, x, mode="eval").data
                worst = max(worst, float(np.abs(a - b).max()))
        assert worst <= 1e-6
        elapsed = time.perf_counter() - t0
        assert elapsed < 60
        print(f"\nACCEPTANCE 2 PASS: slicing equivalence, max diff {worst:.2e} "
              f"in {elapsed:.1f}s")


class TestC03LossIdentities:
    def test_pair_loss_values_and_logged_range(self, toy):
        """Criterion 3: loss = 0/2/4 for identical/orthogonal/antiparallel
        embeddings; every logged per-term loss of the toy run in [0, 4]."""
        rng = np.random.default_rng(0)
        p = rng.standard_normal((6, 8))
        assert abs(ssl.byol_pair_loss(T.Tensor(p), T.Tensor(p.copy())).item()) <= 1e-6
        q = np.tile([1.0, 0.0], (6, 1))
        z = np.tile([0.0, 1.0], (6, 1))
        assert abs(ssl.byol_pair_loss(T.Tensor(q), T.Tensor(z)).item() - 2) <= 1e-6
        assert abs(ssl.byol_pair_loss(T.Tensor(p), T.Tensor(-3 * p)).item() - 4) <= 1e-6

        rows = M.read_csv(os.path.join(toy.out_a, "metrics.csv"), M.METRICS_COLUMNS)
        assert len(rows) == 300  # 20 epochs x 15 steps
        n_terms = 0
        for row in rows:
            for _, a, b in M.parse_cfg_losses(row["cfg_losses"]):
                assert 0.0 <= a <= 4.0 and 0.0 <= b <= 4.0, row["step"]
                n_terms += 2
            assert 0.0 <= float(row["total_loss"]) <= 8 * toy.config.n_sampled
        print(f"\nACCEPTANCE 3 PASS: loss identities; {n_terms} logged terms in [0,4]")


class TestC04AccumulationEquivalence:
    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_accumulated_equals_joint(self, n):
        """Criterion 4: per-config accumulated grads == joint-tape gradient
        of the summed loss, rel diff <= 1e-6."""
        state = small_state(seed=40 + n)
        gen = np.random.default_rng(n)
        v = gen.random((3, 1, 16, 16))
        vp = gen.random((3, 1, 16, 16))
        cfgs = S.sample_subnetworks(state.family, n,
                                    np.random.default_rng(1000 + n))
        acc, ta, _ = ssl.accumulate_gradients(v, vp, cfgs, copy.deepcopy(state))
        joint, tj, _ = ssl.joint_gradients(v, vp, cfgs, copy.deepcopy(state))
        assert abs(ta - tj) <= 1e-9 * max(1.0, abs(ta))
        worst = max(rel_err(acc[k], joint[k]) for k in acc)
        assert worst <= 1e-6
        print(f"\nACCEPTANCE 4 PASS (n={n}): max grad rel diff {worst:.2e}")


class TestC05SharedTarget:
    def test_shared_vs_per_config_bitwise(self):
        """Criterion 5: target projections computed once vs per config give
        bitwise-identical total loss."""
        state = small_state(seed=55)
        gen = np.random.default_rng(5)
        v = gen.random((4, 1, 16, 16))
        vp = gen.random((4, 1, 16, 16))
        cfgs = list(state.family.dn_list)
        shared, _ = ssl.dspnet_step_loss(v, vp, cfgs, copy.deepcopy(state))
        st = copy.deepcopy(state)
        total = 0.0
        for cfg in cfgs:
            zt_vp = ssl.target_projection(st, vp)
            zt_v = ssl.target_projection(st, v)
            total += ssl._online_direction_loss(st, cfg, v, zt_vp, None).item()
            total += ssl._online_direction_loss(st, cfg, vp, zt_v, None).item()
        assert shared.item() == total
        print(f"\nACCEPTANCE 5 PASS: shared-target loss bitwise equal ({total:.6f})")


class TestC06EmaContract:
    def test_replay_and_tau_schedule(self, tmp_path):
        """Criterion 6: replaying the EMA recursion from logged snapshots
        reproduces the target within 1e-6; tau endpoints exact, monotone."""
        fam = small_family(widths=(0.5, 1.0))
        cfg = C.RunConfig(
            seed=9, epochs=3, batch_size=16, n_sampled=2, tau_base=0.996,
            full_scale_warmup_epochs=1, family=fam,
            head=C.HeadSpec(hidden_dim=8, proj_dim=4),
            augment=C.AugmentSpec(out_size=16),
            optim=C.OptimSpec(batch_size=16, total_epochs=3, warmup_epochs=1,
                              base_lr=1.0),
            data=C.DataSpec(num_classes=4, per_class=20, test_per_class=4,
                            size=16),
            out_dir=str(tmp_path / "ema"))
        initial = ssl.init_train_state(cfg.family, cfg.head, cfg.seed)
        xi = {k: v.astype(np.float64) for k, v in initial.target.params.items()}
        taus = []
        thetas = []

        def hook(step, tau, state):
            taus.append(tau)
            thetas.append({k: v.copy() for k, v in state.online.params.items()
                           if k in xi})

        state, _, _ = trainer.pretrain_dspnet(cfg, snapshot_hook=hook)
        for tau, theta in zip(taus, thetas):
            for k in xi:
                xi[k] = tau * xi[k] + (1 - tau) * theta[k]
        worst = max(float(np.abs(xi[k] - state.target.params[k]).max())
                    for k in xi)
        assert worst <= 1e-6

        assert ssl.tau_schedule(0, 500, 0.996) == 0.996
        assert ssl.tau_schedule(500, 500, 0.996) == 1.0
        vals = [ssl.tau_schedule(s, 500, 0.996) for s in range(501)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        assert all(abs(a - b) <= 5e-8 for a, b in zip(taus, sorted(taus)))
        print(f"\nACCEPTANCE 6 PASS: EMA replay max err {worst:.2e}; "
              f"tau(0)=0.996, tau(T)=1.0, monotone")


class TestC07SandwichSampler:
    def test_ends_always_present_middles_uniform(self):
        """Criterion 7: 10k draws always contain smallest+full; middle
        frequencies uniform within 2%."""
        fam = small_family()  # 5 DNs
        small = S.smallest_config(fam)
        full = S.find_full(fam)
        counts = {c.key(): 0 for c in fam.dn_list if c not in (small, full)}
        draws = 10_000
        for i in range(draws):
            out = S.sample_subnetworks(fam, 3, np.random.default_rng(i))
            assert out[0] == small and out[1] == full
            assert len({c.key() for c in out}) == 3
            for c in out:
                assert c in fam.dn_list
            counts[out[2].key()] += 1
        freqs = {k: v / draws for k, v in counts.items()}
        for k, f in freqs.items():
            assert abs(f - 1 / 3) <= 0.02, (k, f)
        print(f"\nACCEPTANCE 7 PASS: sandwich sampler, middle freqs "
              f"{sorted(round(f, 3) for f in freqs.values())}")


class TestC08Degeneracy:
    def test_single_dn_dspnet_bitwise_equals_byol(self, tmp_path):
        """Criterion 8: DSPNet with dn_list={full} reproduces the
        individual-BYOL baseline step losses bitwise for 50 steps."""
        fam = small_family(widths=(0.5, 1.0), stages=((6, 1), (8, 1)))
        base = dict(
            seed=21, epochs=5, batch_size=16, n_sampled=2, tau_base=0.99,
            full_scale_warmup_epochs=0,
            head=C.HeadSpec(hidden_dim=8, proj_dim=4),
            augment=C.AugmentSpec(out_size=16),
            optim=C.OptimSpec(batch_size=16, total_epochs=5, warmup_epochs=1,
                              base_lr=1.0),
            data=C.DataSpec(num_classes=4, per_class=40, test_per_class=4,
                            size=16))
        full = S.find_full(fam)
        single = dataclasses.replace(fam, dn_list=(full,))
        cfg_a = C.RunConfig(family=single, out_dir=str(tmp_path / "a"), **base)
        cfg_b = C.RunConfig(family=fam, out_dir=str(tmp_path / "b"), **base)
        _, hist_a, _ = trainer.pretrain_dspnet(cfg_a)
        _, hist_b, _ = trainer.pretrain_byol_individual(
            cfg_b, full, out_dir=str(tmp_path / "byol"))
        assert len(hist_a) == len(hist_b) == 50
        for ra, rb in zip(hist_a, hist_b):
            assert ra.total_loss == rb.total_loss  # bitwise
        print("\nACCEPTANCE 8 PASS: 50 steps bitwise-equal to the BYOL baseline")


class TestC09EndToEndToy:
    def test_probe_collapse_and_knn_gates(self, toy):
        """Criterion 9: committed toy run under 30 min; every DN's linear
        probe >= 0.75; embedding per-dim std >= 0.3; full-DN kNN beats a
        random-init encoder by >= 10 points."""
        assert toy.toy_seconds < 1800, f"toy run took {toy.toy_seconds:.0f}s"
        assert float(toy.history[-1].total_loss) < float(toy.history[0].total_loss)

        probes = {}
        for dn in toy.config.family.dn_list:
            acc = E.linear_probe(toy.state.online, dn, toy.train_ds, toy.test_ds,
                                 toy.config.probe, seed=toy.config.seed,
                                 augment_spec=toy.config.augment)
            probes[dn.key()] = acc
            assert acc >= 0.75, (dn.key(), acc)

        reps = E.encode_dataset(toy.state.online, toy.full, toy.test_ds.images)
        cm = E.collapse_metrics(reps)
        assert cm["per_dim_std"] >= 0.3, cm

        knn_trained = E.knn_eval(toy.state.online, toy.full, toy.train_ds,
                                 toy.test_ds, k=20)
        random_state = ssl.init_train_state(toy.config.family, toy.config.head,
                                            toy.config.seed)
        trainer.recalibrate_bn(random_state.online, [toy.full], toy.train_ds,
                               batch_size=128, max_batches=8)
        knn_random = E.knn_eval(random_state.online, toy.full, toy.train_ds,
                                toy.test_ds, k=20)
        assert knn_trained - knn_random >= 0.10, (knn_trained, knn_random)
        print(f"\nACCEPTANCE 9 PASS: {toy.toy_seconds:.0f}s run; probes "
              f"{ {k: round(v, 3) for k, v in probes.items()} }; "
              f"per-dim std {cm['per_dim_std']:.3f}; kNN {knn_trained:.3f} vs "
              f"random {knn_random:.3f}")


class TestC10TrainingCost:
    def test_train_once_cheaper_than_sum_of_individuals(self, toy):
        """Criterion 10: with identical epochs/batch, wall-clock of the
        slimmable pretraining <= 0.8x the summed individual pretrainings."""
        cfg = dataclasses.replace(
            toy.config, epochs=3, full_scale_warmup_epochs=0, batch_size=64,
            out_dir=str(toy.root / "cost_dspnet"),
            optim=dataclasses.replace(toy.config.optim, batch_size=64,
                                      total_epochs=3, warmup_epochs=0),
            checkpoint_every_epoch=False)
        t0 = time.perf_counter()
        trainer.pretrain_dspnet(cfg)
        dspnet_s = time.perf_counter() - t0
        individual_s = []
        individual_timings = []
        for i, dn in enumerate(cfg.family.dn_list):
            out = str(toy.root / f"cost_ind{i}")
            t0 = time.perf_counter()
            trainer.pretrain_byol_individual(cfg, dn, out_dir=out)
            individual_s.append(time.perf_counter() - t0)
            individual_timings.append(os.path.join(out, "timing.csv"))
        ratio = dspnet_s / sum(individual_s)
        cost = trainer.measure_cost(
            os.path.join(cfg.out_dir, "timing.csv"), individual_timings,
            individual_timings[-1])
        assert ratio <= 0.8, (ratio, cost)
        print(f"\nACCEPTANCE 10 PASS: train-once/sum-of-individuals = "
              f"{ratio:.2f} (<= 0.8); vs full-network baseline: "
              f"{cost['dspnet_ratio']:.2f}x vs {cost['individual_sum_ratio']:.2f}x")


class TestC11SupervisedFinetune:
    def test_dspnet_init_reaches_gates_random_reported(self, toy):
        """Criterion 11: from DSPNet initialization all DNs reach >= 3x
        chance within 20 supervised epochs; the random-init comparison is
        reported but not gated."""
        cfg = dataclasses.replace(toy.config,
                                  out_dir=str(toy.root / "finetune_dspnet"))
        store, _, _ = trainer.finetune_slimmable_supervised(
            cfg, init_store=toy.state.online)
        accs = {}
        for dn in cfg.family.dn_list:
            accs[dn.key()] = trainer.classify_accuracy(store, dn, toy.test_ds)
            assert accs[dn.key()] >= 0.75, accs

        cfg_r = dataclasses.replace(toy.config,
                                    out_dir=str(toy.root / "finetune_random"))
        store_r, _, _ = trainer.finetune_slimmable_supervised(cfg_r,
                                                              init_store=None)
        accs_r = {dn.key(): trainer.classify_accuracy(store_r, dn, toy.test_ds)
                  for dn in cfg.family.dn_list}
        worse_or_equal = sum(accs_r[k] <= accs[k] for k in accs)
        print(f"\nACCEPTANCE 11 PASS: dspnet-init accs "
              f"{ {k: round(v, 3) for k, v in accs.items()} }; random-init "
              f"{ {k: round(v, 3) for k, v in accs_r.items()} } "
              f"({worse_or_equal}/{len(accs)} DNs worse or equal; reported, "
              f"not gated)")


class TestC12Determinism:
    def test_same_seed_byte_identical_artifacts(self, toy):
        """Criterion 12: two toy runs with the same seed produce byte-equal
        checkpoints and metrics CSVs."""
        ca = Path(toy.ckpt_a).read_bytes()
        cb = Path(toy.ckpt_b).read_bytes()
        assert ca == cb
        ma = Path(toy.out_a, "metrics.csv").read_bytes()
        mb = Path(toy.out_b, "metrics.csv").read_bytes()
        assert ma == mb
        print(f"\nACCEPTANCE 12 PASS: checkpoints ({len(ca)} bytes) and metrics "
              f"byte-identical across same-seed runs")
