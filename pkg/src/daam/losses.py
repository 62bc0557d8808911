"""The five training losses and their coefficient-free total.

All losses are normalized by batch-size means rather than raw sums, so
gradient magnitudes stay independent of batch size and the stock learning
rates remain usable. Probabilities are clamped to [eps, 1-eps] before
every log.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

_EPS = 1e-12


@dataclass
class LossBreakdown:
    ds: float
    reid_s: float
    reid_t: float
    dsp: float
    orth: float
    total: float
    n_source: int
    n_target: int

    def as_row(self):
        return [self.ds, self.reid_s, self.reid_t, self.dsp, self.orth, self.total]

    CSV_COLUMNS = ["loss_ds", "loss_reid_s", "loss_reid_t",
                   "loss_dsp", "loss_orth", "loss_total"]


def _neg_log(p: Tensor) -> Tensor:
    return T.scale(T.log(clamp_prob(p)), -1.0)


def clamp_prob(p: Tensor) -> Tensor:
    # clamp both ends: log needs p >= eps, and 1-eps keeps -log(p) >= 0
    return T.scale(T.clamp_min(T.scale(T.clamp_min(p, _EPS), -1.0), -(1.0 - _EPS)),
                   -1.0)


def _mean(scalars) -> Tensor:
    acc = scalars[0]
    for s in scalars[1:]:
        acc = T.add(acc, s)
    return T.scale(acc, 1.0 / len(scalars))


def domain_similarity_loss(p_occ_list) -> Tensor:
    """Mean one-class loss: -log p_occ over ALL samples of both domains."""
    if not p_occ_list:
        raise ShapeError("domain_similarity_loss: empty batch")
    return _mean([_neg_log(p) for p in p_occ_list])


def reid_source_loss(p_src_rows, labels) -> Tensor:
    """Mean cross-entropy of the source-identity head; 0 if no source samples."""
    if not p_src_rows:
        return Tensor(0.0)
    terms = []
    for p, y in zip(p_src_rows, labels):
        n_ids = p.shape[0]
        if not 0 <= y < n_ids:
            raise ShapeError(f"source label {y} out of range [0, {n_ids})")
        terms.append(_neg_log(T.element(p, y)))
    return _mean(terms)


def reid_target_loss(p_tgt_rows, weak_labels, weights) -> Tensor:
    """Confidence-weighted cross-entropy over target samples (mean-normalized)."""
    if not p_tgt_rows:
        return Tensor(0.0)
    terms = []
    for p, y, w in zip(p_tgt_rows, weak_labels, weights):
        k = p.shape[0]
        if not 0 <= y < k:
            raise ShapeError(f"weak label {y} out of range [0, {k})")
        terms.append(T.scale(_neg_log(T.element(p, y)), float(w)))
    return _mean(terms)


def domain_specific_loss(p_domain_rows, domains) -> Tensor:
    """Mean cross-entropy of the domain head (index 0 source, 1 target)."""
    if not p_domain_rows:
        raise ShapeError("domain_specific_loss: empty batch")
    terms = [_neg_log(T.element(p, int(d)))
             for p, d in zip(p_domain_rows, domains)]
    return _mean(terms)


def orthogonality_loss(f_sh_rows, f_sp_rows, cosine: bool = False) -> Tensor:
    """Mean of (f_sh . f_sp) / (|f_sh|^2 |f_sp|^2) over all samples.

    The denominator uses SQUARED norms (so the value scales with 1/|f|^2);
    `cosine=True` switches to the conventional unsquared-norm similarity.
    """
    if not f_sh_rows:
        raise ShapeError("orthogonality_loss: empty batch")
    terms = []
    for u, v in zip(f_sh_rows, f_sp_rows):
        num = T.dot(u, v)
        nu = T.clamp_min(T.l2_norm_sq(u), _EPS)
        nv = T.clamp_min(T.l2_norm_sq(v), _EPS)
        if cosine:
            denom = T.sqrt(T.mul(nu, nv))
        else:
            denom = T.mul(nu, nv)
        terms.append(T.div(num, denom))
    return _mean(terms)


def total_loss(artifacts, source_labels, weak_labels, weights, domains,
               pretrain: bool = False, ablate: str | None = None,
               orth_cosine: bool = False):
    """Assemble the joint objective from per-sample forward artifacts.

    `artifacts` is the full mixed batch; `domains[i]` selects which loss
    terms sample i contributes to. Returns (scalar Tensor, LossBreakdown).
    Pretrain mode keeps only the source Re-ID term. `ablate` drops one
    term: one of {"no-ds", "no-dsp", "no-orth"} ("no-weights" is handled
    upstream by passing unit weights).
    """
    src_idx = [i for i, d in enumerate(domains) if d == 0]
    tgt_idx = [i for i, d in enumerate(domains) if d == 1]

    l_reid_s = reid_source_loss([artifacts[i].p_src_id for i in src_idx],
                                source_labels)
    if pretrain:
        bd = LossBreakdown(0.0, l_reid_s.item(), 0.0, 0.0, 0.0,
                           l_reid_s.item(), len(src_idx), len(tgt_idx))
        return l_reid_s, bd

    l_ds = (Tensor(0.0) if ablate == "no-ds"
            else domain_similarity_loss([a.p_occ for a in artifacts]))
    l_reid_t = reid_target_loss([artifacts[i].p_tgt_id for i in tgt_idx],
                                weak_labels, weights)
    l_dsp = (Tensor(0.0) if ablate == "no-dsp"
             else domain_specific_loss([a.p_domain for a in artifacts], domains))
    l_orth = (Tensor(0.0) if ablate == "no-orth"
              else orthogonality_loss([a.f_sh for a in artifacts],
                                      [a.f_sp for a in artifacts],
                                      cosine=orth_cosine))

    total = T.add(T.add(T.add(l_ds, l_reid_s), T.add(l_reid_t, l_dsp)), l_orth)
    bd = LossBreakdown(l_ds.item(), l_reid_s.item(), l_reid_t.item(),
                       l_dsp.item(), l_orth.item(), total.item(),
                       len(src_idx), len(tgt_idx))
    return total, bd
