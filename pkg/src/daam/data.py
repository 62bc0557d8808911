"""Synthetic two-domain retrieval datasets with known ground truth.

Each identity owns a latent appearance vector rendered as a fixed
foreground pattern; the two domains differ only in background color cast
and global illumination, scaled by the shift magnitude delta. Identity
sets of the source and target domains are disjoint.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, DataError, FormatError
from . import tensor as T

SOURCE = 0
TARGET = 1

_LATENT_DIM = 8
_RENDER_SEED = 0x5EED  # rendering is a fixed function, independent of config seed

# domain factor directions (unit-scale); multiplied by delta at render time.
# Magnitudes are sized against _BG_NOISE so that at delta=1.0 the shift is
# clearly detectable from pooled background statistics yet far from
# saturating a linear domain classifier.
_CAST = {SOURCE: np.array([0.30, -0.10, -0.20]),
         TARGET: np.array([-0.25, 0.15, 0.25])}
_CAST_SCALE = 0.10
_ILLUM_GAIN = {SOURCE: 0.02, TARGET: -0.02}
_ILLUM_BIAS = {SOURCE: 0.01, TARGET: -0.01}
_BG_NOISE = 0.30   # background texture amplitude (per-sample clutter)
_FG_JITTER = 0.05  # foreground appearance jitter (pose/view variation)


@dataclass
class GenConfig:
    n_source_identities: int = 32
    n_target_identities: int = 32
    n_eval_identities: int = 32
    samples_per_identity: int = 8
    n_cameras: int = 2
    height: int = 24
    width: int = 8
    delta: float = 1.0
    seed: int = 0

    def validate(self):
        if self.n_source_identities < 2 or self.n_target_identities < 2:
            raise ConfigError("need at least 2 identities per domain")
        if self.samples_per_identity < 2:
            raise ConfigError("need at least 2 samples per identity")
        if self.n_cameras < 2:
            raise ConfigError("need at least 2 cameras")
        if self.n_eval_identities < 1:
            raise ConfigError("need at least 1 eval identity")
        if self.delta < 0:
            raise ConfigError("delta must be nonnegative")
        if self.height < 8 or self.width < 4:
            raise ConfigError("image extents too small to render a foreground")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown GenConfig fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class SampleRecord:
    image: np.ndarray          # (H, W, 3) float64 in [0, 1]
    identity_id: int
    camera_id: int
    domain: int                # SOURCE or TARGET
    latent: np.ndarray         # identity latent ++ domain factor vector

    def image_tensor(self) -> T.Tensor:
        return T.Tensor(self.image)


@dataclass
class DatasetManifest:
    role: str                  # train / query / gallery
    n_identities: int
    n_cameras: int
    samples_per_identity: int
    height: int
    width: int
    seed: int
    delta: float
    n_samples: int
    file_offsets: list = field(default_factory=list)


@dataclass
class Dataset:
    manifest: DatasetManifest
    samples: list

    def __len__(self):
        return len(self.samples)

    def identity_set(self):
        return {s.identity_id for s in self.samples}


def foreground_mask(height: int, width: int) -> np.ndarray:
    """Boolean (H, W) mask of the identity foreground region, fixed per extent."""
    mask = np.zeros((height, width), dtype=bool)
    r0, r1 = round(height * 3 / 16), round(height * 13 / 16)
    c0, c1 = round(width * 1 / 4), round(width * 3 / 4)
    mask[r0:r1, c0:c1] = True
    return mask


def _render_projection(height: int, width: int) -> np.ndarray:
    n_fg = int(foreground_mask(height, width).sum())
    rng = np.random.default_rng(_RENDER_SEED)
    return rng.standard_normal((n_fg * 3, _LATENT_DIM)) / np.sqrt(_LATENT_DIM)


def _render(latent: np.ndarray, domain: int, delta: float, camera: int,
            height: int, width: int, rng: np.random.Generator,
            proj: np.ndarray, mask: np.ndarray) -> np.ndarray:
    n_fg = int(mask.sum())
    pattern = 1.0 / (1.0 + np.exp(-2.0 * (proj @ latent)))  # (n_fg*3,) in (0,1)
    pattern = pattern.reshape(n_fg, 3)

    img = np.empty((height, width, 3))
    # background: mid-gray plus per-sample texture, then the delta-scaled
    # domain shift (color cast + illumination gain/bias); the shift never
    # touches the identity foreground, which keeps "shared = body" checkable
    bg_noise = rng.standard_normal((height, width, 3)) * _BG_NOISE
    img[:] = 0.5 + bg_noise + delta * _CAST_SCALE * _CAST[domain]
    img *= 1.0 + delta * _ILLUM_GAIN[domain]
    img += delta * _ILLUM_BIAS[domain]
    # foreground: identity pattern with mild per-sample appearance jitter
    img[mask] = pattern + rng.standard_normal((n_fg, 3)) * _FG_JITTER

    # domain-independent per-sample exposure jitter and camera offset
    img = img * (1.0 + rng.standard_normal() * 0.02) + 0.02 * camera
    return np.clip(img, 0.0, 1.0)


def generate(config: GenConfig) -> dict:
    """Build {source_train, target_train, target_query, target_gallery}.

    Source, target-train and target-eval identity pools are mutually
    disjoint; query/gallery split the eval samples so every query identity
    appears in the gallery under a different camera.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    h, w = config.height, config.width
    proj = _render_projection(h, w)
    mask = foreground_mask(h, w)

    ns, nt, ne = (config.n_source_identities, config.n_target_identities,
                  config.n_eval_identities)
    latents = rng.standard_normal((ns + nt + ne, _LATENT_DIM))

    def make_samples(id_range, domain):
        out = []
        for ident in id_range:
            for j in range(config.samples_per_identity):
                cam = j % config.n_cameras
                img = _render(latents[ident], domain, config.delta, cam,
                              h, w, rng, proj, mask)
                dom_vec = delta_factors(domain, config.delta)
                out.append(SampleRecord(img, ident, cam, domain,
                                        np.concatenate([latents[ident], dom_vec])))
        return out

    source_train = make_samples(range(ns), SOURCE)
    target_train = make_samples(range(ns, ns + nt), TARGET)
    eval_samples = make_samples(range(ns + nt, ns + nt + ne), TARGET)

    query, gallery = [], []
    for k, s in enumerate(eval_samples):
        (query if k % config.samples_per_identity == 0 else gallery).append(s)

    def mk(role, samples, n_ids):
        man = DatasetManifest(role=role, n_identities=n_ids,
                              n_cameras=config.n_cameras,
                              samples_per_identity=config.samples_per_identity,
                              height=h, width=w, seed=config.seed,
                              delta=config.delta, n_samples=len(samples))
        return Dataset(man, samples)

    return {
        "source_train": mk("train", source_train, ns),
        "target_train": mk("train", target_train, nt),
        "target_query": mk("query", query, ne),
        "target_gallery": mk("gallery", gallery, ne),
    }


def delta_factors(domain: int, delta: float) -> np.ndarray:
    """Ground-truth domain factor vector (diagnostics only)."""
    return np.concatenate([delta * _CAST_SCALE * _CAST[domain],
                           [delta * _ILLUM_GAIN[domain], delta * _ILLUM_BIAS[domain]]])


# ---------------------------------------------------------------------------
# persistence: "DRID" container

_MAGIC = b"DRID"
_VERSION = 1


def save(dataset: Dataset, path: str):
    man = dataset.manifest
    if man.n_samples != len(dataset.samples):
        raise DataError(f"manifest says {man.n_samples} samples, "
                        f"payload has {len(dataset.samples)}")
    latents = [s.latent.tolist() for s in dataset.samples]
    # offsets are derivable (fixed-size records), computed before the
    # manifest is serialized so the file self-describes its layout
    tensor_bytes = 4 + 4 + 4 * 3 + man.height * man.width * 3 * 8
    record_bytes = tensor_bytes + 12

    man_dict = asdict(man)
    man_dict["file_offsets"] = []  # placeholder, fixed below
    man_dict["latents"] = latents
    blob_probe = json.dumps(man_dict, sort_keys=True).encode()

    def offsets_for(blob_len):
        base = 4 + 2 + 4 + blob_len
        return [base + i * record_bytes for i in range(len(dataset.samples))]

    # offset digits can change the manifest length; iterate to a fixed point
    blob = blob_probe
    for _ in range(4):
        man_dict["file_offsets"] = offsets_for(len(blob))
        new_blob = json.dumps(man_dict, sort_keys=True).encode()
        if len(new_blob) == len(blob):
            blob = new_blob
            break
        blob = new_blob
    man.file_offsets = man_dict["file_offsets"]

    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for s in dataset.samples:
            T.write_array(fh, s.image)
            fh.write(struct.pack("<III", s.identity_id, s.camera_id, s.domain))


def load(path: str) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise FormatError(f"bad dataset magic {magic!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != _VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        (man_len,) = struct.unpack("<I", fh.read(4))
        blob = fh.read(man_len)
        if len(blob) != man_len:
            raise FormatError("truncated manifest block")
        man_dict = json.loads(blob)
        latents = man_dict.pop("latents")
        man = DatasetManifest(**man_dict)
        samples = []
        for i in range(man.n_samples):
            if not fh.peek(1):
                raise DataError(
                    f"manifest declares {man.n_samples} samples, payload ends at {i}")
            img = T.read_array(fh)
            triple = fh.read(12)
            if len(triple) != 12:
                raise FormatError("truncated sample metadata")
            ident, cam, dom = struct.unpack("<III", triple)
            samples.append(SampleRecord(img, ident, cam, dom,
                                        np.asarray(latents[i])))
        if fh.read(1):
            raise DataError("trailing bytes after declared sample count")
    if len(samples) != man.n_samples:
        raise DataError("sample count mismatch")
    return Dataset(man, samples)
