"""Training objectives: reconstruction, KL regularizers, the two
contrastive terms, BPR ranking, and their weighted total.

Reductions are fixed so reported numbers are reproducible: MSE is a mean
over dimensions, each KL is a sum over dimensions, and every term is then
averaged over the batch. Similarity is cosine throughout, with a 1e-12
norm guard (zero vectors have similarity 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .model import ForwardTrace, Gaussian, ModelParams

NORM_GUARD = 1e-12


class NonFiniteLossError(RuntimeError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term: str):
        super().__init__(f"loss term {term!r} is not finite")
        self.term = term


@dataclass
class LossBreakdown:
    recon: float
    kl_joint: float
    kl_unique_a: float
    kl_unique_c: float
    dcl: float
    co: float
    bpr: float
    total: float
    alpha: float
    beta: float
    tau: float

    FIELDS = ("recon", "kl_joint", "kl_unique_a", "kl_unique_c", "dcl", "co", "bpr", "total")

    def as_dict(self) -> dict:
        return {
            **{k: getattr(self, k) for k in self.FIELDS},
            "alpha": self.alpha, "beta": self.beta, "tau": self.tau,
        }


def recon_mse(e: Tensor, e_new: Tensor) -> Tensor:
    """Mean squared error over all components."""
    diff = e - e_new
    return (diff * diff).mean()


def kl_gaussians(q: Gaussian, p: Gaussian, stop_prior_grad: bool = True) -> Tensor:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over
    dimensions and averaged over the batch.

    The prior side is detached by default: p acts as a fixed conditional
    target so the KL cannot drag the prior toward the posterior.
    """
    if stop_prior_grad:
        p = p.detach()
    var_q = q.logvar.exp()
    delta = q.mu - p.mu
    per_dim = ((var_q + delta * delta) / p.logvar.exp() - 1.0 + p.logvar - q.logvar) * 0.5
    return per_dim.sum(axis=1).mean()


def kl_to_standard(q: Gaussian) -> Tensor:
    """KL(q || N(0, I)); the standard-normal special case of kl_gaussians."""
    zeros = Tensor(np.zeros_like(q.mu.data))
    return kl_gaussians(q, Gaussian(zeros, zeros), stop_prior_grad=True)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity for (..., d) tensors, norm-guarded."""
    dots = (a * b).sum(axis=-1)
    norm_a = (a * a).sum(axis=-1).sqrt().clip_min(NORM_GUARD)
    norm_b = (b * b).sum(axis=-1).sqrt().clip_min(NORM_GUARD)
    return dots / (norm_a * norm_b)


def dcl_loss(z_a_sample: Tensor, z_c_sample: Tensor, z_com_sample: Tensor,
             a_pooled: Tensor, c_feat: Tensor, tau: float) -> Tensor:
    """Disentangled contrastive loss, summed over the two unique views.

    Each view's latent sample is pulled toward its raw feature vector
    (positive) and pushed away from the common-view sample (negative):
    -(sim(z_v, v) - sim(z_v, z_com)) / tau. Unbounded below by design;
    training relies on gradient clipping for stability.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    term_a = (cosine_rows(z_a_sample, a_pooled) - cosine_rows(z_a_sample, z_com_sample)) * (-1.0 / tau)
    term_c = (cosine_rows(z_c_sample, c_feat) - cosine_rows(z_c_sample, z_com_sample)) * (-1.0 / tau)
    return (term_a + term_c).mean()


def co_loss(e_new: Tensor, pos_emb: Tensor, neg_emb: Tensor,
            tau_co: float = 1.0, pos_mask: np.ndarray | None = None) -> Tensor:
    """Co-occurrence contrastive loss against warm-item embeddings.

    For each positive p: -log[ exp(s_p) / (exp(s_p) + sum_n exp(s_n)) ]
    with s = cosine/tau_co, averaged over that item's positives, then over
    the batch. `pos_mask` marks real positives in a padded (B, P) layout;
    every row needs at least one.
    """
    if tau_co <= 0:
        raise ValueError("tau_co must be positive")
    b, n_pos = pos_emb.shape[0], pos_emb.shape[1]
    if n_pos == 0:
        raise ValueError("co_loss requires at least one positive per item")
    if pos_mask is None:
        pos_mask = np.ones((b, n_pos))
    if pos_mask.sum(axis=1).min() < 1:
        raise ValueError("co_loss requires at least one positive per item")
    dtype = e_new.dtype

    anchor = e_new.reshape(b, 1, int(e_new.shape[1]))
    sim_pos = cosine_rows(anchor, pos_emb) * (1.0 / tau_co)  # (B, P)
    neg_total = None
    if neg_emb.shape[1] > 0:
        # cosines are bounded by 1, so exp(sim/tau) cannot overflow for sane tau
        sim_neg = cosine_rows(anchor, neg_emb) * (1.0 / tau_co)  # (B, Nn)
        neg_total = sim_neg.exp().sum(axis=1, keepdims=True)
    pos_exp = sim_pos.exp()
    denom = pos_exp if neg_total is None else pos_exp + neg_total
    per_pos = denom.log() - sim_pos
    mask = Tensor(np.asarray(pos_mask, dtype=dtype))
    per_item = (per_pos * mask).sum(axis=1) / Tensor(pos_mask.sum(axis=1).astype(dtype))
    return per_item.mean()


def bpr_loss(e_new: Tensor, e_u: Tensor, e_u_neg: Tensor) -> Tensor:
    """-log sigmoid(e_new . e_u - e_new . e_u_neg), batch mean.

    The logistic keeps the log argument positive for any score difference.
    """
    diff = (e_new * e_u).sum(axis=1) - (e_new * e_u_neg).sum(axis=1)
    return (-diff).softplus().mean()


@dataclass
class TripleBatch:
    """Index arrays for one training batch, padded where ragged."""

    items: np.ndarray       # (B,) warm item ids
    users: np.ndarray       # (B,) interacting users
    neg_users: np.ndarray   # (B,) non-interacting users
    co_pos: np.ndarray      # (B, c_p) warm item ids, padded
    co_pos_mask: np.ndarray  # (B, c_p) 1 for real entries
    co_neg: np.ndarray      # (B, c_n) warm item ids


def total_loss(trace: ForwardTrace, batch: TripleBatch, params: ModelParams,
               alpha: float, beta: float, tau: float, tau_co: float = 1.0,
               kl_prior_stop_grad: bool = True) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of all objectives plus a per-term breakdown.

    total = (recon + kl_joint + kl_unique_a + kl_unique_c) + bpr
            + alpha * dcl + beta * co
    """
    b = len(batch.items)
    d = params.dims.d

    recon = recon_mse(trace.e_id, trace.e_new)
    kl_joint = kl_gaussians(trace.z_joint, trace.z_f, stop_prior_grad=kl_prior_stop_grad)
    kl_a = kl_to_standard(trace.z_a)
    kl_c = kl_to_standard(trace.z_c)
    dcl = dcl_loss(trace.z_a_sample, trace.z_c_sample, trace.z_com_sample,
                   trace.a_pooled, trace.c_feat, tau)

    item_emb = params["emb.item"]
    pos_emb = item_emb.take_rows(batch.co_pos.ravel()).reshape(b, batch.co_pos.shape[1], d)
    neg_emb = item_emb.take_rows(batch.co_neg.ravel()).reshape(b, batch.co_neg.shape[1], d)
    co = co_loss(trace.e_new, pos_emb, neg_emb, tau_co, batch.co_pos_mask)

    e_u = params["emb.user"].take_rows(batch.users)
    e_un = params["emb.user"].take_rows(batch.neg_users)
    bpr = bpr_loss(trace.e_new, e_u, e_un)

    terms = {"recon": recon, "kl_joint": kl_joint, "kl_unique_a": kl_a,
             "kl_unique_c": kl_c, "dcl": dcl, "co": co, "bpr": bpr}
    for name, term in terms.items():
        if not np.isfinite(term.data):
            raise NonFiniteLossError(name)

    total = (recon + kl_joint + kl_a + kl_c) + bpr + alpha * dcl + beta * co
    if not np.isfinite(total.data):
        raise NonFiniteLossError("total")
    breakdown = LossBreakdown(
        recon=recon.item(), kl_joint=kl_joint.item(), kl_unique_a=kl_a.item(),
        kl_unique_c=kl_c.item(), dcl=dcl.item(), co=co.item(), bpr=bpr.item(),
        total=total.item(), alpha=alpha, beta=beta, tau=tau,
    )
    return total, breakdown
