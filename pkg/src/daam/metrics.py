"""Retrieval evaluation on shared embeddings, diagnostic probes, heatmaps.

Single-query protocol: gallery entries sharing both identity and camera
with the query are excluded from its ranking; queries with no remaining
correct match are dropped and counted. AP is the mean of precision at
each relevant rank (no interpolation).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import net
from . import tensor as T
from .errors import DataError

CMC_KS = (1, 5, 10)


@dataclass
class RankingResult:
    order: list          # per-query sorted gallery indices (excluded removed)
    distances: list      # distances along each ranking, non-decreasing
    average_precision: list
    cmc_hits: list       # per query: rank (1-based) of first correct match


@dataclass
class MetricsReport:
    mAP: float
    cmc: dict            # {k: value}
    n_queries: int
    n_gallery: int
    n_excluded_queries: int
    iteration: int = -1
    probe_sh: float | None = None
    probe_sp: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["cmc"] = {str(k): v for k, v in self.cmc.items()}
        return json.dumps(d, sort_keys=True)

    CSV_COLUMNS = ["iteration", "mAP", "cmc1", "cmc5", "cmc10",
                   "probe_sh", "probe_sp"]

    def as_row(self):
        return [self.iteration, self.mAP, self.cmc[1], self.cmc[5],
                self.cmc[10],
                "" if self.probe_sh is None else self.probe_sh,
                "" if self.probe_sp is None else self.probe_sp]


def extract_features(dataset, params: net.DaamParams,
                     disable_attention: bool = False):
    """Eval-mode (f_sh, f_sp) embeddings for every sample, as numpy arrays."""
    f_sh, f_sp = [], []
    with T.no_grad():
        for s in dataset.samples:
            arts = net.forward_batch([s.image_tensor()], params, training=False,
                                     disable_attention=disable_attention)
            f_sh.append(arts[0].f_sh.data.copy())
            f_sp.append(arts[0].f_sp.data.copy())
    return np.array(f_sh), np.array(f_sp)


def rank_and_score(query_feats, query_meta, gallery_feats, gallery_meta,
                   metric: str = "euclidean", iteration: int = -1):
    """Rank the gallery for every query and compute mAP / CMC.

    `*_meta` are (identity_id, camera_id) pairs. Returns
    (RankingResult, MetricsReport).
    """
    query_feats = np.asarray(query_feats, dtype=np.float64)
    gallery_feats = np.asarray(gallery_feats, dtype=np.float64)
    nq, ng = len(query_feats), len(gallery_feats)
    if metric == "euclidean":
        dist = np.sqrt(np.maximum(
            np.sum(query_feats ** 2, axis=1)[:, None]
            + np.sum(gallery_feats ** 2, axis=1)[None, :]
            - 2.0 * query_feats @ gallery_feats.T, 0.0))
    elif metric == "cosine":
        qn = query_feats / np.maximum(
            np.linalg.norm(query_feats, axis=1, keepdims=True), 1e-12)
        gn = gallery_feats / np.maximum(
            np.linalg.norm(gallery_feats, axis=1, keepdims=True), 1e-12)
        dist = 1.0 - qn @ gn.T
    else:
        raise DataError(f"unknown distance metric '{metric}'")

    g_ids = np.array([m[0] for m in gallery_meta])
    g_cams = np.array([m[1] for m in gallery_meta])

    orders, dists_out, aps, hits = [], [], [], []
    n_excluded = 0
    for qi in range(nq):
        q_id, q_cam = query_meta[qi]
        keep = ~((g_ids == q_id) & (g_cams == q_cam))
        idx = np.where(keep)[0]
        relevant = g_ids[idx] == q_id
        if not relevant.any():
            n_excluded += 1
            continue
        order_local = np.argsort(dist[qi, idx], kind="stable")
        ranked = idx[order_local]
        rel_ranked = relevant[order_local]

        positions = np.where(rel_ranked)[0]  # 0-based ranks of correct matches
        precisions = (np.arange(len(positions)) + 1.0) / (positions + 1.0)
        aps.append(float(precisions.mean()))
        hits.append(int(positions[0]) + 1)
        orders.append(ranked.tolist())
        dists_out.append(dist[qi, ranked].tolist())

    if not aps:
        raise DataError("no usable queries: every query lacks a valid match")

    cmc = {k: float(np.mean([h <= k for h in hits])) for k in CMC_KS}
    report = MetricsReport(mAP=float(np.mean(aps)), cmc=cmc,
                           n_queries=len(aps), n_gallery=ng,
                           n_excluded_queries=n_excluded, iteration=iteration)
    return RankingResult(orders, dists_out, aps, hits), report


def evaluate(params: net.DaamParams, query_ds, gallery_ds,
             metric: str = "euclidean", iteration: int = -1,
             disable_attention: bool = False) -> MetricsReport:
    qf, _ = extract_features(query_ds, params, disable_attention)
    gf, _ = extract_features(gallery_ds, params, disable_attention)
    q_meta = [(s.identity_id, s.camera_id) for s in query_ds.samples]
    g_meta = [(s.identity_id, s.camera_id) for s in gallery_ds.samples]
    _, report = rank_and_score(qf, q_meta, gf, g_meta, metric=metric,
                               iteration=iteration)
    return report


def domain_probe(features, domains, seed: int = 0, groups=None) -> float:
    """Held-out accuracy of a logistic separator between the two domains.

    With `groups` (e.g. identity ids), the 70/30 split holds out whole
    groups: the two domains' group pools are disjoint by construction, so a
    per-sample split would let the probe memorize group -> domain and report
    spurious domain separability.
    """
    features = np.asarray(features, dtype=np.float64)
    domains = np.asarray(domains)
    if len(set(domains.tolist())) < 2:
        raise DataError("domain_probe needs samples from both domains")
    from sklearn.linear_model import LogisticRegression

    rng = np.random.default_rng(seed)
    if groups is None:
        order = rng.permutation(len(features))
        cut = max(1, int(0.7 * len(features)))
        tr, te = order[:cut], order[cut:]
    else:
        groups = np.asarray(groups)
        if groups.shape[0] != features.shape[0]:
            raise DataError("groups must align with features")
        uniq = rng.permutation(np.unique(groups))
        cut = max(1, int(0.7 * len(uniq)))
        tr = np.flatnonzero(np.isin(groups, uniq[:cut]))
        te = np.flatnonzero(np.isin(groups, uniq[cut:]))
    if len(set(domains[tr].tolist())) < 2 or len(te) == 0:
        raise DataError("domain_probe split left a single-domain partition")
    clf = LogisticRegression(max_iter=2000, random_state=0)
    clf.fit(features[tr], domains[tr])
    return float(clf.score(features[te], domains[te]))


# ---------------------------------------------------------------------------
# attention heatmap export

def attention_maps(image, params: net.DaamParams):
    """Channel-averaged attention A and its complement for one image (h, w)."""
    with T.no_grad():
        f_map = net.backbone_forward(image.image_tensor()
                                     if hasattr(image, "image_tensor")
                                     else T.Tensor(image), params, training=False)
        a, _, _ = net.attention_forward(f_map, params)
    shared = a.data.mean(axis=2)
    return shared, 1.0 - shared


def attention_foreground_contrast(shared: np.ndarray, mask: np.ndarray):
    """(mean over foreground, mean over background) of the channel-mean
    attention, nearest-upsampled to the mask's image resolution."""
    hs, ws = shared.shape
    H, W = mask.shape
    ri = (np.arange(H) * hs) // H
    ci = (np.arange(W) * ws) // W
    up = shared[ri][:, ci]
    return float(up[mask].mean()), float(up[~mask].mean())


def write_pgm(path, values: np.ndarray):
    """8-bit binary PGM with min-max normalization."""
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


def export_attention(image, params: net.DaamParams, out_prefix: str):
    """Write shared/specific heatmaps (PGM) and the raw attention tensor."""
    shared, specific = attention_maps(image, params)
    write_pgm(f"{out_prefix}_shared.pgm", shared)
    write_pgm(f"{out_prefix}_specific.pgm", specific)
    with open(f"{out_prefix}_attention.dtn1", "wb") as fh:
        T.write_array(fh, shared)
    return shared, specific
