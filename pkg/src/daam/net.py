"""Backbone CNN, attention split into shared/specific maps, and the four heads.

The feature map F of each image is divided as F = F_sh + F_sp with
F_sh = A ⊗ F, where A = sigmoid(S_raw × C) is a rank-1 spatial × channel
attention squashed into (0,1). The shared branch feeds the one-class,
source-identity and cluster heads; the specific branch feeds the domain
head with fully independent parameters.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError
from .tensor import Tensor


@dataclass
class BackboneConfig:
    channels: list = field(default_factory=lambda: [8, 16, 32])
    stride: int = 2
    kernel: int = 3
    reduction: int = 4
    embed_dim: int = 32
    image_h: int = 16
    image_w: int = 8

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    def feature_extents(self):
        h, w = self.image_h, self.image_w
        for _ in self.channels:
            h = (h + 2 * 1 - self.kernel) // self.stride + 1
            w = (w + 2 * 1 - self.kernel) // self.stride + 1
            if h < 1 or w < 1:
                raise ConfigError(
                    f"image {self.image_h}x{self.image_w} collapses below 1x1 "
                    f"after {len(self.channels)} stride-{self.stride} blocks")
        return h, w

    def validate(self):
        if not self.channels:
            raise ConfigError("backbone needs at least one conv block")
        if self.feature_channels % self.reduction != 0:
            raise ConfigError(
                f"feature channels {self.feature_channels} not divisible by "
                f"reduction ratio {self.reduction}")
        self.feature_extents()

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown BackboneConfig fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


class DaamParams:
    """Named parameter store plus batchnorm running statistics."""

    def __init__(self, config: BackboneConfig, n_source_ids: int, n_clusters: int):
        self.config = config
        self.n_source_ids = n_source_ids
        self.n_clusters = n_clusters
        self.tensors: dict[str, Tensor] = {}
        self.bn_states: dict[str, T.BnState] = {}
        self.needs_tgt_reinit = False

    def add(self, name: str, arr: np.ndarray):
        self.tensors[name] = Tensor(arr, requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self):
        return sorted(self.tensors)

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def group(self, prefix: str):
        return {n: t for n, t in self.tensors.items() if n.startswith(prefix)}

    def pretrain_names(self):
        """Parameters optimized during source-only pretraining."""
        return [n for n in self.names()
                if n.startswith(("backbone.", "attn.", "dsh.", "head.src_id."))]


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def init_params(config: BackboneConfig, n_source_ids: int, n_clusters: int,
                rng: np.random.Generator) -> DaamParams:
    config.validate()
    p = DaamParams(config, n_source_ids, n_clusters)
    k = config.kernel
    cin = 3
    for i, cout in enumerate(config.channels):
        p.add(f"backbone.block{i}.kernel", _he(rng, (k, k, cin, cout), k * k * cin))
        p.add(f"backbone.block{i}.bias", np.zeros(cout))
        p.add(f"backbone.block{i}.bn_gamma", np.ones(cout))
        p.add(f"backbone.block{i}.bn_beta", np.zeros(cout))
        p.bn_states[f"backbone.block{i}"] = T.BnState(cout)
        cin = cout

    c = config.feature_channels
    cr = c // config.reduction
    d = config.embed_dim
    # The attention path multiplies a spatial raw map by a ReLU channel gate
    # before the sigmoid, so its effective gradient is the product of two
    # small-magnitude branches; plain He init leaves it too flat to train.
    # Amplify both branches, and start the channel gate nonnegative so no
    # channel begins dead (a dead gate pins A at 0.5 with zero gradient).
    p.add("attn.spatial.conv3.kernel", 3.0 * _he(rng, (3, 3, 1, 1), 9))
    p.add("attn.spatial.conv3.bias", np.zeros(1))
    p.add("attn.spatial.conv1.kernel", 3.0 * _he(rng, (1, 1, 1, 1), 1))
    p.add("attn.spatial.conv1.bias", np.zeros(1))
    p.add("attn.channel.w0", 3.0 * _he(rng, (c, cr), c))
    p.add("attn.channel.w1", np.abs(3.0 * _he(rng, (cr, c), cr)))

    for branch in ("dsh", "dsp"):
        p.add(f"{branch}.proj", _he(rng, (c, d), c))
        p.add(f"{branch}.bn_gamma", np.ones(d))
        p.add(f"{branch}.bn_beta", np.zeros(d))
        p.bn_states[branch] = T.BnState(d)

    p.add("head.occ.w", _he(rng, (d,), d))
    p.add("head.occ.b", np.zeros(()))
    p.add("head.src_id.w", _he(rng, (d, n_source_ids), d))
    p.add("head.domain.w", _he(rng, (d, 2), d))
    init_tgt_head(p, n_clusters, rng)
    return p


def init_tgt_head(p: DaamParams, n_clusters: int, rng: np.random.Generator):
    """(Re)create the cluster-label head; called at every relabeling round."""
    d = p.config.embed_dim
    p.tensors["head.tgt_id.w"] = Tensor(_he(rng, (d, n_clusters), d),
                                        requires_grad=True)
    p.n_clusters = n_clusters
    p.needs_tgt_reinit = False


# ---------------------------------------------------------------------------
# forward passes

def _spatial_bn(xs, gamma: Tensor, beta: Tensor, state: T.BnState,
                training: bool):
    """Per-channel normalization over all spatial positions of a batch of
    maps; statistics are pooled across the batch so that training-mode
    behavior matches what the running stats describe at eval time."""
    h, w, c = xs[0].shape
    flat = T.concat_rows([T.reshape(x, (h * w, c)) for x in xs])
    normed = T.batchnorm(flat, gamma, beta, state, training)
    return [T.reshape(T.row_block(normed, i * h * w, (i + 1) * h * w),
                      (h, w, c)) for i in range(len(xs))]


def backbone_forward_batch(images, params: DaamParams, training: bool):
    """Feature maps for a batch; batchnorm statistics span the whole batch."""
    cfg = params.config
    for image in images:
        if image.shape != (cfg.image_h, cfg.image_w, 3):
            raise ConfigError(f"image shape {image.shape} does not match "
                              f"config ({cfg.image_h}, {cfg.image_w}, 3)")
    xs = list(images)
    for i in range(len(cfg.channels)):
        xs = [T.add(T.conv2d(x, params[f"backbone.block{i}.kernel"],
                             stride=cfg.stride, padding=1),
                    params[f"backbone.block{i}.bias"]) for x in xs]
        xs = _spatial_bn(xs, params[f"backbone.block{i}.bn_gamma"],
                         params[f"backbone.block{i}.bn_beta"],
                         params.bn_states[f"backbone.block{i}"], training)
        xs = [T.relu(x) for x in xs]
    return xs


def backbone_forward(image: Tensor, params: DaamParams, training: bool) -> Tensor:
    return backbone_forward_batch([image], params, training)[0]


def spatial_attention(f_map: Tensor, params: DaamParams) -> Tensor:
    """Raw (unsquashed) spatial map, shape (h, w, 1)."""
    h, w, _ = f_map.shape
    x = T.avg_pool_channels(f_map)
    x = T.conv2d(x, params["attn.spatial.conv3.kernel"], stride=2, padding=1)
    x = T.add(x, params["attn.spatial.conv3.bias"])
    x = T.upsample_nearest(x, h, w)
    x = T.conv2d(x, params["attn.spatial.conv1.kernel"], stride=1, padding=0)
    return T.add(x, params["attn.spatial.conv1.bias"])


def channel_attention(f_map: Tensor, params: DaamParams) -> Tensor:
    """ReLU(W1 · ReLU(W0 · GAP(F))), shape (1, c)."""
    g = T.global_avg_pool_spatial(f_map)
    hidden = T.relu(T.linear(g, params["attn.channel.w0"]))
    return T.reshape(T.relu(T.linear(hidden, params["attn.channel.w1"])), (1, -1))


def attention_forward(f_map: Tensor, params: DaamParams,
                      disable: bool = False):
    """Split F into (A, F_sh, F_sp); F_sh + F_sp == F identically."""
    if disable:
        a = Tensor(np.full(f_map.shape, 0.5))
    else:
        raw = T.mul(spatial_attention(f_map, params),
                    channel_attention(f_map, params))
        # the sigmoid's codomain is (0,1) but float64 rounds |raw| > ~37
        # to exactly 0 or 1; clamp to keep every entry strictly inside
        a = T.clamp(T.sigmoid(raw), 1e-12, 1.0 - 1e-12)
    f_sh = T.mul(a, f_map)
    f_sp = T.sub(f_map, f_sh)
    return a, f_sh, f_sp


def _branch_vectors(maps, proj: Tensor):
    return [T.linear(T.global_avg_pool_spatial(m), proj) for m in maps]


def branch_forward(maps, params: DaamParams, branch: str, training: bool):
    """GAP -> FC -> batchnorm -> ReLU over a batch of maps; returns row vectors."""
    pre = T.stack_rows(_branch_vectors(maps, params[f"{branch}.proj"]))
    normed = T.batchnorm(pre, params[f"{branch}.bn_gamma"],
                         params[f"{branch}.bn_beta"],
                         params.bn_states[branch], training)
    out = T.relu(normed)
    return [T.row(out, i) for i in range(len(maps))]


def heads_forward(f_sh: Tensor, f_sp: Tensor, params: DaamParams):
    p_occ = T.sigmoid(T.add(T.dot(params["head.occ.w"], f_sh),
                            params["head.occ.b"]))
    p_src = T.softmax(T.linear(f_sh, params["head.src_id.w"]))
    p_tgt = T.softmax(T.linear(f_sh, params["head.tgt_id.w"]))
    p_dom = T.softmax(T.linear(f_sp, params["head.domain.w"]))
    return p_occ, p_src, p_tgt, p_dom


@dataclass
class ForwardArtifacts:
    f_map: Tensor
    attention: Tensor
    map_sh: Tensor
    map_sp: Tensor
    f_sh: Tensor
    f_sp: Tensor
    p_occ: Tensor
    p_src_id: Tensor
    p_tgt_id: Tensor
    p_domain: Tensor


def forward_batch(images, params: DaamParams, training: bool,
                  disable_attention: bool = False):
    """Full forward pass for a batch; returns one ForwardArtifacts per image."""
    maps, atts, shs, sps = [], [], [], []
    for f_map in backbone_forward_batch(images, params, training):
        a, m_sh, m_sp = attention_forward(f_map, params, disable=disable_attention)
        maps.append(f_map)
        atts.append(a)
        shs.append(m_sh)
        sps.append(m_sp)
    f_sh_rows = branch_forward(shs, params, "dsh", training)
    f_sp_rows = branch_forward(sps, params, "dsp", training)
    arts = []
    for i in range(len(images)):
        p_occ, p_src, p_tgt, p_dom = heads_forward(f_sh_rows[i], f_sp_rows[i],
                                                   params)
        arts.append(ForwardArtifacts(maps[i], atts[i], shs[i], sps[i],
                                     f_sh_rows[i], f_sp_rows[i],
                                     p_occ, p_src, p_tgt, p_dom))
    return arts


# ---------------------------------------------------------------------------
# persistence: "DPRM" container

_MAGIC = b"DPRM"
_VERSION = 1


def params_to_bytes(params: DaamParams) -> bytes:
    names = params.names()
    bn_names = sorted(params.bn_states)
    manifest = {
        "version": _VERSION,
        "config": {
            "channels": params.config.channels,
            "stride": params.config.stride,
            "kernel": params.config.kernel,
            "reduction": params.config.reduction,
            "embed_dim": params.config.embed_dim,
            "image_h": params.config.image_h,
            "image_w": params.config.image_w,
        },
        "n_source_ids": params.n_source_ids,
        "n_clusters": params.n_clusters,
        "tensor_names": names,
        "tensor_shapes": {n: list(params[n].shape) for n in names},
        "bn_names": bn_names,
    }
    buf = io.BytesIO()
    blob = json.dumps(manifest, sort_keys=True).encode()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for n in names:
        T.write_array(buf, params[n].data)
    for n in bn_names:
        st = params.bn_states[n]
        T.write_array(buf, st.mean)
        T.write_array(buf, st.var)
    return buf.getvalue()


def save_params(params: DaamParams, path: str):
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def params_from_bytes(raw: bytes, expect_clusters: int | None = None) -> DaamParams:
    """Rebuild params; a cluster-count mismatch flags the tgt head for re-init."""
    fh = io.BytesIO(raw)
    magic = fh.read(4)
    if magic != _MAGIC:
        raise FormatError(f"bad parameter magic {magic!r}")
    (blob_len,) = struct.unpack("<I", fh.read(4))
    blob = fh.read(blob_len)
    if len(blob) != blob_len:
        raise FormatError("truncated parameter manifest")
    manifest = json.loads(blob)
    if manifest["version"] != _VERSION:
        raise FormatError(f"unsupported parameter version {manifest['version']}")
    cfg = BackboneConfig(**manifest["config"])
    p = DaamParams(cfg, manifest["n_source_ids"], manifest["n_clusters"])
    for n in manifest["tensor_names"]:
        arr = T.read_array(fh)
        if list(arr.shape) != manifest["tensor_shapes"][n]:
            raise FormatError(f"tensor {n}: stored shape {arr.shape} does not "
                              f"match manifest {manifest['tensor_shapes'][n]}")
        p.tensors[n] = Tensor(arr, requires_grad=True)
    for n in manifest["bn_names"]:
        dim = None
        mean = T.read_array(fh)
        var = T.read_array(fh)
        dim = mean.shape[0]
        st = T.BnState(dim)
        st.mean = mean
        st.var = var
        p.bn_states[n] = st
    if expect_clusters is not None and expect_clusters != p.n_clusters:
        p.needs_tgt_reinit = True
    return p


def load_params(path: str, expect_clusters: int | None = None) -> DaamParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    return params_from_bytes(raw, expect_clusters)
