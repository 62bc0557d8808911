import numpy as np
import numpy.testing as npt
import pytest

from daam import data, net, train
from daam import tensor as T
from daam.errors import ConfigError, FormatError, NumericError


@pytest.fixture(autouse=True)
def fresh_tape():
    T.active_tape().reset()
    yield
    T.active_tape().reset()


BCFG = net.BackboneConfig(channels=[4, 8], reduction=4, embed_dim=8,
                          image_h=16, image_w=8)


def tiny_sets(seed=0, n_ids=4, spp=4, delta=1.0):
    cfg = data.GenConfig(n_source_identities=n_ids, n_target_identities=n_ids,
                         n_eval_identities=3, samples_per_identity=spp,
                         height=16, width=8, seed=seed, delta=delta)
    return data.generate(cfg)


def tiny_config(**kw):
    base = dict(iterations=1, epochs_per_iteration=3, pretrain_epochs=3,
                batch_size=4, k_clusters=3, seed=0)
    base.update(kw)
    return train.TrainConfig(**base)


class TestLrSchedule:
    def test_paper_breakpoints(self):
        cfg = train.TrainConfig(epochs_per_iteration=200, lr_base=1e-3)
        assert train.lr_at(0, cfg) == 1e-3
        assert train.lr_at(19, cfg) == 1e-3
        assert train.lr_at(20, cfg) == 1e-4
        assert train.lr_at(119, cfg) == 1e-4
        assert train.lr_at(120, cfg) == 1e-5
        assert train.lr_at(150, cfg) == 1e-5

    def test_scaled_breakpoints(self):
        cfg = train.TrainConfig(epochs_per_iteration=40, lr_base=1e-3)
        assert train.lr_at(3, cfg) == 1e-3
        assert train.lr_at(4, cfg) == 1e-4
        assert train.lr_at(23, cfg) == 1e-4
        assert train.lr_at(24, cfg) == 1e-5


class TestSgdStep:
    def make_state(self):
        cfg = tiny_config(momentum=0.9)
        return train.init_state(BCFG, 4, cfg)

    def test_no_momentum_plain_descent(self):
        state = self.make_state()
        state.config.momentum = 0.0
        name = "dsh.proj"
        before = state.params[name].data.copy()
        g = np.ones_like(before)
        state.params[name].grad[:] = g
        train.sgd_step(state, lr=1.0, names=[name])
        npt.assert_allclose(state.params[name].data, before - g)

    def test_zero_gradient_decays_velocity(self):
        state = self.make_state()
        name = "dsh.proj"
        state.momentum[name][:] = 2.0
        before = state.params[name].data.copy()
        train.sgd_step(state, lr=0.0, names=[name])
        npt.assert_allclose(state.momentum[name], 1.8)
        npt.assert_array_equal(state.params[name].data, before)

    def test_two_steps_constant_gradient(self):
        state = self.make_state()
        name = "dsh.proj"
        before = state.params[name].data.copy()
        g = np.full_like(before, 3.0)
        for _ in range(2):
            state.params[name].grad[:] = g
            train.sgd_step(state, lr=0.1, names=[name])
        # v1 = g, v2 = 0.9 g + g -> total delta = -0.1 (g + 1.9 g) = -0.29 g
        npt.assert_allclose(state.params[name].data, before - 0.29 * g,
                            rtol=1e-12)

    def test_non_finite_gradient_aborts(self):
        state = self.make_state()
        state.params["dsh.proj"].grad[0, 0] = np.nan
        with pytest.raises(NumericError, match="dsh.proj"):
            train.sgd_step(state, lr=0.1, names=["dsh.proj"])


class TestPretrain:
    def test_zero_epochs_leaves_params(self):
        sets = tiny_sets()
        cfg = tiny_config(pretrain_epochs=0)
        state = train.init_state(BCFG, 4, cfg)
        fresh = train.init_state(BCFG, 4, tiny_config(pretrain_epochs=0))
        train.pretrain(state, sets["source_train"])
        for n in state.params.names():
            npt.assert_array_equal(state.params[n].data, fresh.params[n].data)

    def test_gradient_isolation(self):
        sets = tiny_sets()
        cfg = tiny_config(pretrain_epochs=2)
        state = train.init_state(BCFG, 4, cfg)
        init = {n: state.params[n].data.copy() for n in state.params.names()}
        train.pretrain(state, sets["source_train"])
        frozen_prefixes = ("dsp.", "head.tgt_id.", "head.domain.", "head.occ.")
        for n in state.params.names():
            if n.startswith(frozen_prefixes):
                npt.assert_array_equal(state.params[n].data, init[n],
                                       err_msg=n)
        # and the trained group did move
        moved = [n for n in state.params.pretrain_names()
                 if not np.array_equal(state.params[n].data, init[n])]
        assert moved

    def test_overfits_tiny_source(self):
        sets = tiny_sets(n_ids=4, spp=4)
        cfg = tiny_config(pretrain_epochs=100, epochs_per_iteration=1000,
                          lr_base=1e-2, batch_size=8)
        state = train.init_state(BCFG, 4, cfg)
        train.pretrain(state, sets["source_train"])
        src = sets["source_train"]
        id_map = {ident: i for i, ident in enumerate(sorted(src.identity_set()))}
        correct = 0
        with T.no_grad():
            for s in src.samples:
                arts = net.forward_batch([s.image_tensor()], state.params,
                                         training=False)
                correct += int(np.argmax(arts[0].p_src_id.data)
                               == id_map[s.identity_id])
        assert correct / len(src) >= 0.95

    def test_loss_decreases(self):
        sets = tiny_sets(n_ids=4, spp=4)
        cfg = tiny_config(pretrain_epochs=30, epochs_per_iteration=300,
                          lr_base=1e-2, batch_size=8)
        state = train.init_state(BCFG, 4, cfg)
        train.pretrain(state, sets["source_train"])
        log = np.array([row[3 + 5] for row in state.loss_log])  # total column
        steps_per_epoch = len(log) // 30

        def smoothed(e):
            lo = e * steps_per_epoch
            return log[lo:lo + 5 * steps_per_epoch].mean()
        for e in (0, 10):
            assert smoothed(e + 10) <= smoothed(e) + 1e-9
        assert smoothed(25) <= smoothed(0) + 1e-9

    def test_empty_source_rejected(self):
        sets = tiny_sets()
        ds = sets["source_train"]
        ds.samples = []
        state = train.init_state(BCFG, 4, tiny_config())
        with pytest.raises(ConfigError):
            train.pretrain(state, ds)


class TestRunAlg1:
    def test_zero_iterations_equals_pretrain(self):
        sets = tiny_sets()
        cfg = tiny_config(iterations=0)
        state, traj = train.run_alg1(sets["source_train"], sets["target_train"],
                                     sets["target_query"],
                                     sets["target_gallery"], BCFG, cfg)
        assert len(traj) == 1
        cfg2 = tiny_config(iterations=0)
        state2 = train.init_state(BCFG, 4, cfg2)
        train.pretrain(state2, sets["source_train"])
        assert train.params_hash(state.params) == train.params_hash(state2.params)

    def test_same_seed_identical_trajectories(self):
        sets = tiny_sets()
        runs = []
        for _ in range(2):
            cfg = tiny_config(iterations=2)
            _, traj = train.run_alg1(sets["source_train"],
                                     sets["target_train"],
                                     sets["target_query"],
                                     sets["target_gallery"], BCFG, cfg)
            runs.append([(r["report"].mAP, r["report"].cmc[1]) for r in traj])
        assert runs[0] == runs[1]

    def test_batches_mix_domains(self):
        sets = tiny_sets()
        cfg = tiny_config(iterations=1, epochs_per_iteration=1)
        state = train.init_state(BCFG, 4, cfg)
        train.pretrain(state, sets["source_train"])
        state.iteration = 1
        train.relabel(state, sets["target_train"])
        # joint epoch logs carry both-domain losses: dsp term > 0 means mixed
        train.joint_epoch(state, sets["source_train"], sets["target_train"], 0)
        joint_rows = [r for r in state.loss_log if r[0] == 1]
        assert joint_rows
        for row in joint_rows:
            assert row[6] > 0.0  # loss_dsp needs both domains

    def test_cluster_head_reinitialized_each_iteration(self):
        sets = tiny_sets()
        cfg = tiny_config(iterations=1)
        state = train.init_state(BCFG, 4, cfg)
        train.pretrain(state, sets["source_train"])
        head_before = state.params["head.tgt_id.w"].data.copy()
        train.relabel(state, sets["target_train"])
        assert not np.array_equal(state.params["head.tgt_id.w"].data,
                                  head_before)

    def test_reproducible_final_hash(self):
        sets = tiny_sets()
        hashes = []
        for _ in range(2):
            cfg = tiny_config(iterations=1)
            state, _ = train.run_alg1(sets["source_train"],
                                      sets["target_train"],
                                      sets["target_query"],
                                      sets["target_gallery"], BCFG, cfg)
            hashes.append(train.params_hash(state.params))
        assert hashes[0] == hashes[1]


class TestCheckpoint:
    def test_round_trip_and_resume_equivalence(self, tmp_path):
        sets = tiny_sets()
        # run A: straight through 4 pretrain epochs
        cfg_a = tiny_config(pretrain_epochs=4)
        state_a = train.init_state(BCFG, 4, cfg_a)
        train.pretrain(state_a, sets["source_train"])

        # run B: 2 epochs, checkpoint, resume, 2 more epochs
        cfg_b = tiny_config(pretrain_epochs=2)
        state_b = train.init_state(BCFG, 4, cfg_b)
        train.pretrain(state_b, sets["source_train"])
        path = tmp_path / "ckpt.dckp"
        train.save_checkpoint(state_b, path)
        resumed = train.load_checkpoint(path)
        resumed.config.pretrain_epochs = 2
        # continue with the SAME schedule epochs (2, 3) as the straight run
        id_map = {ident: i for i, ident in
                  enumerate(sorted(sets["source_train"].identity_set()))}
        tape = T.active_tape()
        for epoch in (2, 3):
            lr = train.lr_at(epoch, cfg_a)
            for batch in train._source_batches(len(sets["source_train"]),
                                               cfg_a.batch_size, resumed.rng):
                tape.reset()
                resumed.params.zero_grad()
                samples = [sets["source_train"].samples[i] for i in batch]
                from daam import losses as L
                arts = net.forward_batch([s.image_tensor() for s in samples],
                                         resumed.params, training=True)
                labels = [id_map[s.identity_id] for s in samples]
                total, _ = L.total_loss(arts, labels, [], [],
                                        [0] * len(samples), pretrain=True)
                tape.backward(total)
                train.sgd_step(resumed, lr, resumed.params.pretrain_names())
        assert train.params_hash(resumed.params) == train.params_hash(state_a.params)

    def test_config_hash_mismatch_refused(self, tmp_path):
        sets = tiny_sets()
        cfg = tiny_config()
        state = train.init_state(BCFG, 4, cfg)
        train.pretrain(state, sets["source_train"])
        path = tmp_path / "ckpt.dckp"
        train.save_checkpoint(state, path)
        other = tiny_config(seed=123)
        with pytest.raises(ConfigError, match="different configuration"):
            train.load_checkpoint(path, expected_config=other)

    def test_checkpoint_file_deterministic(self, tmp_path):
        sets = tiny_sets()
        import hashlib
        digests = []
        for run in ("a", "b"):
            cfg = tiny_config(iterations=1)
            state, _ = train.run_alg1(sets["source_train"],
                                      sets["target_train"],
                                      sets["target_query"],
                                      sets["target_gallery"], BCFG, cfg,
                                      checkpoint_dir=str(tmp_path))
            raw = open(tmp_path / "checkpoint_iter1.dckp", "rb").read()
            digests.append(hashlib.sha256(raw).hexdigest())
        assert digests[0] == digests[1]

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.dckp"
        p.write_bytes(b"XXXXGARBAGE")
        with pytest.raises(FormatError):
            train.load_checkpoint(p)

    def test_momentum_and_rng_round_trip(self, tmp_path):
        sets = tiny_sets()
        cfg = tiny_config()
        state = train.init_state(BCFG, 4, cfg)
        train.pretrain(state, sets["source_train"])
        path = tmp_path / "c.dckp"
        train.save_checkpoint(state, path)
        back = train.load_checkpoint(path)
        for n in state.momentum:
            npt.assert_array_equal(state.momentum[n], back.momentum[n])
        assert state.rng.integers(1 << 30) == back.rng.integers(1 << 30)
        assert train.params_hash(state.params) == train.params_hash(back.params)


class TestInvariants:
    def test_config_validation(self):
        with pytest.raises(ConfigError):
            train.TrainConfig(batch_size=5).validate()
        with pytest.raises(ConfigError):
            train.TrainConfig(ablate="no-such").validate()
        with pytest.raises(ConfigError):
            train.TrainConfig(momentum=1.0).validate()
