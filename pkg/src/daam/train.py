"""Iterative training: source pretraining, then cluster/weight refresh and
joint optimization of the five-term objective with SGD + momentum.

Weak labels, confidence weights and cluster centers are frozen within an
iteration and refreshed only at iteration boundaries. The cluster head is
re-initialized every iteration because cluster indices are not identified
across relabelings.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import clustering, losses, metrics, net
from . import tensor as T
from .errors import ConfigError, FormatError, NumericError


@dataclass
class TrainConfig:
    iterations: int = 5
    epochs_per_iteration: int = 40
    pretrain_epochs: int = 40
    batch_size: int = 32
    lr_base: float = 1e-2
    # paper-scale schedule: drops at epochs 20 and 120 out of 200; the
    # breakpoints scale proportionally with epochs_per_iteration
    lr_drop_epochs: tuple = (20, 120)
    lr_schedule_span: int = 200
    momentum: float = 0.9
    k_clusters: int | None = 24     # None -> scale cluster count with identities
    seed: int = 0
    ablate: str | None = None       # no-ds | no-dsp | no-orth | no-weights | no-attention
    orth_cosine: bool = False

    def validate(self):
        if self.iterations < 0 or self.epochs_per_iteration < 1:
            raise ConfigError("iterations must be >= 0, epochs >= 1")
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ConfigError("batch_size must be even and >= 2 to mix domains 1:1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.ablate not in (None, "no-ds", "no-dsp", "no-orth",
                               "no-weights", "no-attention"):
            raise ConfigError(f"unknown ablation '{self.ablate}'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        if "lr_drop_epochs" in d:
            d = {**d, "lr_drop_epochs": tuple(d["lr_drop_epochs"])}
        cfg = cls(**d)
        cfg.validate()
        return cfg


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Piecewise-constant schedule, breakpoints scaled to the epoch budget."""
    scale = config.epochs_per_iteration / config.lr_schedule_span
    b1 = config.lr_drop_epochs[0] * scale
    b2 = config.lr_drop_epochs[1] * scale
    if epoch < b1:
        return config.lr_base
    if epoch < b2:
        return config.lr_base * 0.1
    return config.lr_base * 0.01


class TrainState:
    def __init__(self, params: net.DaamParams, config: TrainConfig,
                 rng: np.random.Generator):
        self.params = params
        self.config = config
        self.rng = rng
        self.momentum = {n: np.zeros_like(params[n].data)
                         for n in params.names()}
        self.iteration = 0
        self.epoch = 0
        self.step = 0
        self.cluster_model: clustering.ClusterModel | None = None
        self.loss_log: list = []   # rows: [iteration, epoch, step, 6 losses]

    def sync_momentum_shapes(self):
        """Align buffers after a head re-initialization."""
        for n in self.params.names():
            if (n not in self.momentum
                    or self.momentum[n].shape != self.params[n].shape):
                self.momentum[n] = np.zeros_like(self.params[n].data)
        for n in list(self.momentum):
            if n not in self.params.tensors:
                del self.momentum[n]


def sgd_step(state: TrainState, lr: float, names=None):
    """v <- momentum * v + g;  theta <- theta - lr * v."""
    mu = state.config.momentum
    for n in names if names is not None else state.params.names():
        g = state.params[n].grad
        if not np.all(np.isfinite(g)):
            raise NumericError(
                f"non-finite gradient at step {state.step}, parameter '{n}', "
                f"norm {float(np.sqrt(np.nansum(g * g)))}")
        v = state.momentum[n]
        v *= mu
        v += g
        state.params[n].data -= lr * v


def _half_batches(n_primary, n_other, half, rng):
    """Index pairs: one pass over the larger set, the smaller resampled."""
    order = rng.permutation(n_primary)
    for start in range(0, n_primary, half):
        chunk = order[start:start + half]
        if len(chunk) == 0:
            continue
        other = rng.integers(0, n_other, size=len(chunk))
        yield chunk, other


def _source_batches(n, size, rng):
    order = rng.permutation(n)
    for start in range(0, n, size):
        chunk = order[start:start + size]
        if len(chunk):
            yield chunk


def pretrain(state: TrainState, source_ds):
    """Source-only supervised phase; touches only backbone/attention/DSH/src
    head parameters (all other parameters keep their initialization)."""
    cfg = state.config
    if len(source_ds) == 0:
        raise ConfigError("pretrain: empty source dataset")
    id_map = _identity_index(source_ds)
    names = state.params.pretrain_names()
    tape = T.active_tape()
    for epoch in range(cfg.pretrain_epochs):
        lr = lr_at(epoch, cfg)
        for batch in _source_batches(len(source_ds), cfg.batch_size, state.rng):
            tape.reset()
            state.params.zero_grad()
            samples = [source_ds.samples[i] for i in batch]
            images = [s.image_tensor() for s in samples]
            arts = net.forward_batch(
                images, state.params, training=True,
                disable_attention=cfg.ablate == "no-attention")
            labels = [id_map[s.identity_id] for s in samples]
            total, bd = losses.total_loss(arts, labels, [], [],
                                          [0] * len(samples), pretrain=True)
            tape.backward(total)
            sgd_step(state, lr, names)
            state.loss_log.append([state.iteration, epoch, state.step]
                                  + bd.as_row())
            state.step += 1
    tape.reset()
    return state


def _identity_index(ds) -> dict:
    ids = sorted(ds.identity_set())
    return {ident: i for i, ident in enumerate(ids)}


def joint_epoch(state: TrainState, source_ds, target_ds, epoch: int):
    """One epoch of mixed-batch optimization with frozen weak labels."""
    cfg = state.config
    cm = state.cluster_model
    id_map = _identity_index(source_ds)
    half = cfg.batch_size // 2
    lr = lr_at(epoch, cfg)
    tape = T.active_tape()
    ns, nt = len(source_ds), len(target_ds)
    if ns >= nt:
        batches = ((s, t) for s, t in _half_batches(ns, nt, half, state.rng))
    else:
        batches = ((s, t) for t, s in _half_batches(nt, ns, half, state.rng))
    for src_idx, tgt_idx in batches:
        tape.reset()
        state.params.zero_grad()
        src = [source_ds.samples[i] for i in src_idx]
        tgt = [target_ds.samples[i] for i in tgt_idx]
        images = [s.image_tensor() for s in src + tgt]
        domains = [0] * len(src) + [1] * len(tgt)
        arts = net.forward_batch(
            images, state.params, training=True,
            disable_attention=cfg.ablate == "no-attention")
        labels = [id_map[s.identity_id] for s in src]
        weak = [int(cm.labels[i]) for i in tgt_idx]
        if cfg.ablate == "no-weights":
            weights = [1.0] * len(tgt)
        else:
            weights = [float(cm.weights[i]) for i in tgt_idx]
        total, bd = losses.total_loss(arts, labels, weak, weights, domains,
                                      ablate=cfg.ablate,
                                      orth_cosine=cfg.orth_cosine)
        tape.backward(total)
        sgd_step(state, lr)
        state.loss_log.append([state.iteration, epoch, state.step] + bd.as_row())
        state.step += 1
    tape.reset()


def init_state(backbone_cfg: net.BackboneConfig, n_source_ids: int,
               config: TrainConfig) -> TrainState:
    config.validate()
    rng = np.random.default_rng(config.seed)
    k = config.k_clusters
    if k is None:
        k = clustering.default_cluster_count(n_source_ids)
    params = net.init_params(backbone_cfg, n_source_ids, k, rng)
    return TrainState(params, config, rng)


def relabel(state: TrainState, target_ds):
    """Extract eval-mode shared embeddings, cluster, refresh head + buffers."""
    cfg = state.config
    feats, _ = metrics.extract_features(
        target_ds, state.params,
        disable_attention=cfg.ablate == "no-attention")
    k = cfg.k_clusters
    if k is None:
        k = clustering.default_cluster_count(target_ds.manifest.n_identities)
    k = min(k, len(feats))
    cluster_seed = int(state.rng.integers(0, 2 ** 31))
    state.cluster_model = clustering.relabel_dataset(feats, k, cluster_seed)
    net.init_tgt_head(state.params, k, state.rng)
    state.sync_momentum_shapes()
    return state.cluster_model


def run_alg1(source_ds, target_ds, query_ds, gallery_ds,
             backbone_cfg: net.BackboneConfig, config: TrainConfig,
             checkpoint_dir=None, probe_seed: int = 0):
    """Full training loop; returns (state, list of per-iteration reports).

    Reports[0] is the direct-transfer baseline right after pretraining;
    reports[i] for i >= 1 follows adaptation iteration i. Each report also
    carries the weak-label agreement with ground-truth identities.
    """
    config.validate()
    n_source_ids = source_ds.manifest.n_identities
    state = init_state(backbone_cfg, n_source_ids, config)
    pretrain(state, source_ds)

    trajectory = [_evaluate_iteration(state, target_ds, query_ds, gallery_ds,
                                      iteration=0, probe_seed=probe_seed)]
    if checkpoint_dir is not None:
        save_checkpoint(state, f"{checkpoint_dir}/checkpoint_iter0.dckp")

    for it in range(1, config.iterations + 1):
        state.iteration = it
        relabel(state, target_ds)
        for epoch in range(config.epochs_per_iteration):
            joint_epoch(state, source_ds, target_ds, epoch)
        trajectory.append(_evaluate_iteration(state, target_ds, query_ds,
                                              gallery_ds, iteration=it,
                                              probe_seed=probe_seed))
        if checkpoint_dir is not None:
            save_checkpoint(state, f"{checkpoint_dir}/checkpoint_iter{it}.dckp")
    return state, trajectory


def _evaluate_iteration(state, target_ds, query_ds, gallery_ds, iteration,
                        probe_seed):
    disable = state.config.ablate == "no-attention"
    report = metrics.evaluate(state.params, query_ds, gallery_ds,
                              iteration=iteration, disable_attention=disable)
    f_sh, f_sp = metrics.extract_features(target_ds, state.params,
                                          disable_attention=disable)
    # probes need both domains; mix in the ground-truth-known target set
    # against itself is meaningless, so probes are computed by the caller
    # when source features are available (see cli / acceptance)
    extra = {}
    if state.cluster_model is not None:
        from sklearn.metrics import adjusted_rand_score
        truth = [s.identity_id for s in target_ds.samples]
        extra["weak_label_ari"] = float(
            adjusted_rand_score(truth, state.cluster_model.labels))
    report_dict = {"report": report, **extra}
    return report_dict


def domain_probes(state: TrainState, source_ds, target_ds, seed: int = 0):
    """Held-out domain-classification accuracy on f_sh and on f_sp."""
    disable = state.config.ablate == "no-attention"
    sh_s, sp_s = metrics.extract_features(source_ds, state.params, disable)
    sh_t, sp_t = metrics.extract_features(target_ds, state.params, disable)
    domains = np.array([0] * len(sh_s) + [1] * len(sh_t))
    # hold out whole identities: the domains' identity pools are disjoint,
    # so a per-sample split would measure identity memorization instead of
    # domain signal
    groups = np.array([s.identity_id for s in source_ds.samples]
                      + [s.identity_id for s in target_ds.samples])
    acc_sh = metrics.domain_probe(np.vstack([sh_s, sh_t]), domains, seed=seed,
                                  groups=groups)
    acc_sp = metrics.domain_probe(np.vstack([sp_s, sp_t]), domains, seed=seed,
                                  groups=groups)
    return acc_sh, acc_sp


# ---------------------------------------------------------------------------
# checkpointing: "DCKP" container

_MAGIC = b"DCKP"
_VERSION = 1


def config_hash(config: TrainConfig, backbone_cfg: net.BackboneConfig) -> str:
    blob = json.dumps({"train": asdict(config),
                       "backbone": asdict(backbone_cfg)},
                      sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()


def params_hash(params: net.DaamParams) -> str:
    return hashlib.sha256(net.params_to_bytes(params)).hexdigest()


def save_checkpoint(state: TrainState, path: str):
    cfg_hash = config_hash(state.config, state.params.config)
    manifest = {
        "version": _VERSION,
        "config": asdict(state.config),
        "config_hash": cfg_hash,
        "iteration": state.iteration,
        "epoch": state.epoch,
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "cluster": (None if state.cluster_model is None
                    else json.loads(state.cluster_model.to_json())),
        "momentum_names": sorted(state.momentum),
        "loss_log": state.loss_log,
    }
    param_blob = net.params_to_bytes(state.params)
    buf = io.BytesIO()
    blob = json.dumps(manifest, sort_keys=True, default=list).encode()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(param_blob)))
    buf.write(param_blob)
    for n in sorted(state.momentum):
        T.write_array(buf, state.momentum[n])
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str, expected_config: TrainConfig | None = None
                    ) -> TrainState:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(blob_len))
        if manifest["version"] != _VERSION:
            raise FormatError(f"unsupported checkpoint version "
                              f"{manifest['version']}")
        (param_len,) = struct.unpack("<I", fh.read(4))
        params = net.params_from_bytes(fh.read(param_len))
        config = TrainConfig(**{**manifest["config"],
                                "lr_drop_epochs":
                                    tuple(manifest["config"]["lr_drop_epochs"])})
        if expected_config is not None:
            want = config_hash(expected_config, params.config)
            have = manifest["config_hash"]
            if want != have:
                raise ConfigError(
                    f"checkpoint was produced by a different configuration "
                    f"(stored hash {have[:12]}, requested {want[:12]}); "
                    f"refusing to resume")
        rng = np.random.default_rng()
        st = manifest["rng_state"]
        rng.bit_generator.state = st
        state = TrainState(params, config, rng)
        state.iteration = manifest["iteration"]
        state.epoch = manifest["epoch"]
        state.step = manifest["step"]
        state.loss_log = manifest["loss_log"]
        if manifest["cluster"] is not None:
            state.cluster_model = clustering.ClusterModel.from_json(
                json.dumps(manifest["cluster"]))
        for n in manifest["momentum_names"]:
            state.momentum[n] = T.read_array(fh)
        return state
