"""Forward computations of the multi-view variational recommender.

Every item is observed through up to three channels: its ID embedding
(warm items only), a multi-hot attribute vector, and a dense image-feature
vector. Each channel is encoded as a diagonal Gaussian in latent space.
A product-of-experts consensus of the two content channels gives the
"common" view; a user-conditioned mixture gate blends the common view with
the two channel-specific ("unique") views; the result is merged with the
ID view into the joint posterior that drives a conditional decoder.

Variance convention, fixed once and used everywhere: encoder heads emit a
log-variance `s`; the Gaussian's precision is 1/(exp(s)+eps) and its
sampling std is exp(s/2). This makes the precision-weighted product, the
KL terms, and the reparameterized sampling mutually consistent.

All functions operate on batches: row b of each array is one (item, user)
pair. Cold-item inference never touches ID embeddings and is fully
deterministic (latent means, no sampling).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor, concat

EPS = 1e-8  # guards precision against division by zero
VIEWS = ("attr", "img")

FORWARD_VARIANTS = ("full", "wo_common", "early_generate", "naive_moe", "weighted_poe")


@dataclass
class Gaussian:
    """Batched diagonal Gaussian: mean and log-variance, each (B, d_z)."""

    mu: Tensor
    logvar: Tensor

    def std(self) -> Tensor:
        return (self.logvar * 0.5).exp()

    def detach(self) -> "Gaussian":
        return Gaussian(self.mu.detach(), self.logvar.detach())


@dataclass
class ModelDims:
    n_users: int
    n_items: int
    n_attrs: int
    d: int
    h: int
    d_img: int

    def validate(self) -> None:
        for name in ("n_users", "n_items", "n_attrs", "d", "h", "d_img"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_img != self.d:
            raise ValueError(
                f"image feature width {self.d_img} must equal latent width {self.d}; "
                "project features at load time"
            )


class ModelParams:
    """All trainable tensors, keyed by a stable dotted name.

    The name order is fixed by construction and shared by the optimizer,
    the checkpoint format, and the gradient checker.
    """

    def __init__(self, dims: ModelDims, tensors: dict[str, Tensor], variant: str = "full"):
        self.dims = dims
        self.tensors = tensors
        self.variant = variant

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        fresh = {
            name: Tensor(t.data.copy(), requires_grad=True) for name, t in self.tensors.items()
        }
        return ModelParams(self.dims, fresh, self.variant)

    def astype(self, dtype) -> "ModelParams":
        fresh = {
            name: Tensor(t.data.astype(dtype), requires_grad=True)
            for name, t in self.tensors.items()
        }
        return ModelParams(self.dims, fresh, self.variant)


def param_spec(dims: ModelDims, variant: str = "full") -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) for every tensor, in canonical order.

    fan_in 0 means zero-initialized (biases and the log-variance heads'
    biases, which start at unit variance).
    """
    if variant not in FORWARD_VARIANTS and variant not in ("wo_dcl", "wo_co"):
        raise ValueError(f"unknown variant {variant!r}")
    d, h, n = dims.d, dims.h, dims.n_attrs
    spec: list[tuple[str, tuple, int]] = [
        ("emb.user", (dims.n_users, d), d),
        ("emb.item", (dims.n_items, d), d),
        ("emb.attr", (n, d), d),
        ("attn.query", (d,), d),
        ("attn.default", (d,), d),
    ]
    for enc, width in (("id", d), ("attr", d), ("img", dims.d_img)):
        spec += [
            (f"enc.{enc}.w_mu", (width, d), width),
            (f"enc.{enc}.b_mu", (d,), 0),
            (f"enc.{enc}.w_logvar", (width, d), width),
            (f"enc.{enc}.b_logvar", (d,), 0),
        ]
    for view in VIEWS:
        spec += [
            (f"gate.self.{view}.w", (d, d), d),
            (f"gate.self.{view}.b", (d,), 0),
            (f"gate.moe.{view}.w", (d, d), d),
        ]
    spec.append(("gate.moe.proj", (d,), d))
    spec += [
        ("dec.w1", (3 * d, h), 3 * d),
        ("dec.b1", (h,), 0),
        ("dec.w2", (h, d), h),
        ("dec.b2", (d,), 0),
    ]
    if variant == "early_generate":
        spec += [
            ("early.w1", (2 * d, h), 2 * d),
            ("early.b1", (h,), 0),
            ("early.w_mu", (h, d), h),
            ("early.b_mu", (d,), 0),
            ("early.w_logvar", (h, d), h),
            ("early.b_logvar", (d,), 0),
        ]
    if variant == "weighted_poe":
        # log-weights on each expert's precision; exp(0) = 1 is neutral
        spec.append(("fuse.wpoe.logw", (3,), 0))
    return spec


# -- encoders -----------------------------------------------------------------


def _affine_gaussian(x: Tensor, params: ModelParams, head: str) -> Gaussian:
    mu = x @ params[f"enc.{head}.w_mu"] + params[f"enc.{head}.b_mu"]
    logvar = x @ params[f"enc.{head}.w_logvar"] + params[f"enc.{head}.b_logvar"]
    return Gaussian(mu, logvar)


def encode_id(e: Tensor, params: ModelParams) -> Gaussian:
    """Latent Gaussian of the ID view from item embeddings (B, d)."""
    return _affine_gaussian(e, params, "id")


def encode_attributes(a_pooled: Tensor, params: ModelParams) -> Gaussian:
    """Latent Gaussian of the attribute view from pooled vectors (B, d)."""
    return _affine_gaussian(a_pooled, params, "attr")


def encode_image(c: Tensor, params: ModelParams) -> Gaussian:
    """Latent Gaussian of the image view from feature vectors (B, d_img)."""
    return _affine_gaussian(c, params, "img")


def attention_pool(multi_hot: np.ndarray, params: ModelParams) -> Tensor:
    """Attention-weighted sum of attribute embeddings over the set bits.

    Weights are a softmax of (query . embedding) restricted to the item's
    set bits. Items with no attributes fall back to a learned default
    vector.
    """
    mask = np.asarray(multi_hot, dtype=params["emb.attr"].dtype)
    if mask.ndim == 1:
        mask = mask[None, :]
    attr_emb = params["emb.attr"]
    n = attr_emb.shape[0]
    scores = (attr_emb @ params["attn.query"].reshape(n, 1)).reshape(1, n)
    shift = float(np.max(scores.data))  # constant; softmax is shift invariant
    weights = (scores - shift).exp() * Tensor(mask)
    denom = weights.sum(axis=1, keepdims=True).clip_min(1e-30)
    pooled = (weights / denom) @ attr_emb
    has_bits = (mask.sum(axis=1, keepdims=True) > 0).astype(mask.dtype)
    fallback = params["attn.default"].reshape(1, -1)
    return pooled * Tensor(has_bits) + fallback * Tensor(1.0 - has_bits)


# -- fusion -------------------------------------------------------------------


def poe_common(z_a: Gaussian, z_c: Gaussian, eps: float = EPS) -> Gaussian:
    """Product-of-experts consensus of the two content views.

    Elementwise precision T = 1/(exp(logvar)+eps); the product Gaussian has
    precision-weighted mean and log-variance log(1/sum T).
    """
    t_a = 1.0 / (z_a.logvar.exp() + eps)
    t_c = 1.0 / (z_c.logvar.exp() + eps)
    t_sum = t_a + t_c
    mu = (z_a.mu * t_a + z_c.mu * t_c) / t_sum
    logvar = (1.0 / t_sum).log()
    return Gaussian(mu, logvar)


def reparameterize(g: Gaussian, noise: np.ndarray) -> Tensor:
    """mu + exp(logvar/2) * noise, with caller-supplied standard normals."""
    return g.mu + g.std() * Tensor(np.asarray(noise, dtype=g.mu.dtype))


def self_gate(u: Tensor, view: str, params: ModelParams) -> Tensor:
    """Elementwise logistic filter of the user embedding for one view."""
    gate = (u @ params[f"gate.self.{view}.w"] + params[f"gate.self.{view}.b"]).sigmoid()
    return u * gate


def moe_gate(u_a: Tensor, u_c: Tensor, z_a_sample: Tensor, z_c_sample: Tensor,
             params: ModelParams) -> Tensor:
    """User-preference softmax over the unique views; returns gates (B, 2)."""
    d = params.dims.d
    proj = params["gate.moe.proj"].reshape(d, 1)
    logit_a = ((u_a * z_a_sample) @ params["gate.moe.attr.w"]) @ proj
    logit_c = ((u_c * z_c_sample) @ params["gate.moe.img.w"]) @ proj
    logits = concat([logit_a, logit_c], axis=1)
    shift = Tensor(np.max(logits.data, axis=1, keepdims=True))
    expv = (logits - shift).exp()
    return expv / expv.sum(axis=1, keepdims=True)


def fuse_views(z_a: Gaussian, z_c: Gaussian, z_com: Gaussian, gates: Tensor,
               include_common: bool = True, moment_matched: bool = False) -> Gaussian:
    """Gate-weighted blend of unique views with the common view.

    Default combines means and log-variances linearly through the gates
    (the averaged weighted sum). `moment_matched=True` instead treats the
    three views as mixture components with weights (gate_a/2, gate_c/2,
    1/2) and matches the mixture's first two moments.
    """
    gate_a = gates.narrow(1, 0, 1)
    gate_c = gates.narrow(1, 1, 1)
    if not include_common:
        mu = gate_a * z_a.mu + gate_c * z_c.mu
        logvar = gate_a * z_a.logvar + gate_c * z_c.logvar
        return Gaussian(mu, logvar)
    if moment_matched:
        w_a, w_c = gate_a * 0.5, gate_c * 0.5
        mu = w_a * z_a.mu + w_c * z_c.mu + z_com.mu * 0.5
        second = (
            w_a * (z_a.logvar.exp() + z_a.mu * z_a.mu)
            + w_c * (z_c.logvar.exp() + z_c.mu * z_c.mu)
            + (z_com.logvar.exp() + z_com.mu * z_com.mu) * 0.5
        )
        return Gaussian(mu, (second - mu * mu).clip_min(EPS).log())
    mu = (gate_a * z_a.mu + gate_c * z_c.mu + z_com.mu) * 0.5
    logvar = (gate_a * z_a.logvar + gate_c * z_c.logvar + z_com.logvar) * 0.5
    return Gaussian(mu, logvar)


def weighted_poe_fuse(z_a: Gaussian, z_c: Gaussian, z_com: Gaussian,
                      params: ModelParams, eps: float = EPS) -> Gaussian:
    """Ablation fusion: precision-weighted product over all three views,
    each precision scaled by a learned positive scalar."""
    logw = params["fuse.wpoe.logw"]
    total_mu = None
    total_t = None
    for k, z in enumerate((z_a, z_c, z_com)):
        w = logw.narrow(0, k, 1).exp().reshape(1, 1)
        t = w * (1.0 / (z.logvar.exp() + eps))
        total_t = t if total_t is None else total_t + t
        contrib = z.mu * t
        total_mu = contrib if total_mu is None else total_mu + contrib
    return Gaussian(total_mu / total_t, (1.0 / total_t).log())


def fuse_joint(z_e: Gaussian, z_f: Gaussian) -> Gaussian:
    """Midpoint merge of the ID view with the fused content view."""
    return Gaussian((z_e.mu + z_f.mu) * 0.5, (z_e.logvar + z_f.logvar) * 0.5)


def decode(z: Tensor, a_pooled: Tensor, c: Tensor, params: ModelParams) -> Tensor:
    """Conditional decoder: one tanh hidden layer over [z; a; c], linear out."""
    x = concat([z, a_pooled, c], axis=1)
    hidden = (x @ params["dec.w1"] + params["dec.b1"]).tanh()
    return hidden @ params["dec.w2"] + params["dec.b2"]


def early_generate_common(a_pooled: Tensor, c: Tensor, params: ModelParams) -> Gaussian:
    """Ablation: observation-space MLP over [a; c] replaces the PoE."""
    x = concat([a_pooled, c], axis=1)
    hidden = (x @ params["early.w1"] + params["early.b1"]).tanh()
    mu = hidden @ params["early.w_mu"] + params["early.b_mu"]
    logvar = hidden @ params["early.w_logvar"] + params["early.b_logvar"]
    return Gaussian(mu, logvar)


# -- full passes ----------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Every intermediate the training losses need, for one batch."""

    e_id: Tensor
    a_pooled: Tensor
    c_feat: Tensor
    z_a: Gaussian
    z_c: Gaussian
    z_com: Gaussian
    z_f: Gaussian
    z_joint: Gaussian
    z_a_sample: Tensor
    z_c_sample: Tensor
    z_com_sample: Tensor
    z_sample: Tensor
    gates: Tensor
    e_new: Tensor


NoiseFn = Callable[[str, tuple], np.ndarray]


def gaussian_noise(rng: np.random.Generator) -> NoiseFn:
    return lambda name, shape: rng.standard_normal(shape)


def zero_noise() -> NoiseFn:
    return lambda name, shape: np.zeros(shape)


def forward_train(item_idx: np.ndarray, user_idx: np.ndarray,
                  attributes: np.ndarray, image_features: np.ndarray,
                  params: ModelParams, noise_fn: NoiseFn,
                  variant: str = "full",
                  moment_matched: bool = False) -> ForwardTrace:
    """Training-time forward pass for a batch of (item, user) pairs.

    `attributes` and `image_features` are the catalog rows of the batch
    items. Noise is injected through `noise_fn(name, shape)` so tests can
    pin it.
    """
    if variant not in FORWARD_VARIANTS:
        raise ValueError(f"unknown forward variant {variant!r}")
    dims = params.dims
    b = len(item_idx)
    dtype = params["emb.user"].dtype

    e_id = params["emb.item"].take_rows(item_idx)
    u_t = params["emb.user"].take_rows(user_idx)
    a_pooled = attention_pool(attributes, params)
    c_feat = Tensor(np.asarray(image_features, dtype=dtype))

    z_e = encode_id(e_id, params)
    z_a = encode_attributes(a_pooled, params)
    z_c = encode_image(c_feat, params)
    if variant == "early_generate":
        z_com = early_generate_common(a_pooled, c_feat, params)
    else:
        z_com = poe_common(z_a, z_c)

    shape = (b, dims.d)
    z_a_sample = reparameterize(z_a, noise_fn("attr", shape))
    z_c_sample = reparameterize(z_c, noise_fn("img", shape))
    z_com_sample = reparameterize(z_com, noise_fn("common", shape))

    if variant == "naive_moe" or variant == "weighted_poe":
        gates = Tensor(np.full((b, 2), 0.5, dtype=dtype))
    else:
        u_a = self_gate(u_t, "attr", params)
        u_c = self_gate(u_t, "img", params)
        gates = moe_gate(u_a, u_c, z_a_sample, z_c_sample, params)

    if variant == "weighted_poe":
        z_f = weighted_poe_fuse(z_a, z_c, z_com, params)
    else:
        z_f = fuse_views(z_a, z_c, z_com, gates,
                         include_common=variant != "wo_common",
                         moment_matched=moment_matched)
    z_joint = fuse_joint(z_e, z_f)
    z_sample = reparameterize(z_joint, noise_fn("joint", shape))
    e_new = decode(z_sample, a_pooled, c_feat, params)

    return ForwardTrace(
        e_id=e_id, a_pooled=a_pooled, c_feat=c_feat,
        z_a=z_a, z_c=z_c, z_com=z_com, z_f=z_f, z_joint=z_joint,
        z_a_sample=z_a_sample, z_c_sample=z_c_sample,
        z_com_sample=z_com_sample, z_sample=z_sample,
        gates=gates, e_new=e_new,
    )


def generate_cold(attributes: np.ndarray, image_features: np.ndarray,
                  user_idx: np.ndarray, params: ModelParams,
                  variant: str = "full",
                  moment_matched: bool = False) -> Tensor:
    """Deterministic cold-item embeddings for (item, user) pairs (B, d).

    No ID embedding exists for a cold item, so the joint merge is skipped:
    the content-view fusion mean conditions the decoder directly.
    """
    if variant not in FORWARD_VARIANTS:
        raise ValueError(f"unknown forward variant {variant!r}")
    dtype = params["emb.user"].dtype
    a_pooled = attention_pool(attributes, params)
    c_feat = Tensor(np.asarray(image_features, dtype=dtype))
    z_a = encode_attributes(a_pooled, params)
    z_c = encode_image(c_feat, params)
    if variant == "early_generate":
        z_com = early_generate_common(a_pooled, c_feat, params)
    else:
        z_com = poe_common(z_a, z_c)

    if variant == "naive_moe" or variant == "weighted_poe":
        gates = Tensor(np.full((len(user_idx), 2), 0.5, dtype=dtype))
    else:
        u_t = params["emb.user"].take_rows(user_idx)
        u_a = self_gate(u_t, "attr", params)
        u_c = self_gate(u_t, "img", params)
        gates = moe_gate(u_a, u_c, z_a.mu, z_c.mu, params)

    if variant == "weighted_poe":
        z_f = weighted_poe_fuse(z_a, z_c, z_com, params)
    else:
        z_f = fuse_views(z_a, z_c, z_com, gates,
                         include_common=variant != "wo_common",
                         moment_matched=moment_matched)
    return decode(z_f.mu, a_pooled, c_feat, params)


def infer_cold(attribute_row: np.ndarray, image_row: np.ndarray, user_idx: int,
               params: ModelParams, variant: str = "full") -> tuple[np.ndarray, float]:
    """Embedding and preference score for one cold item and one user."""
    attribute_row = np.asarray(attribute_row)
    image_row = np.asarray(image_row)
    if attribute_row.sum() == 0 and not np.any(image_row):
        raise ValueError("cold item has neither attributes nor image features")
    e_new = generate_cold(attribute_row[None, :], image_row[None, :],
                          np.array([user_idx]), params, variant=variant)
    e_u = params["emb.user"].data[user_idx]
    score = float(e_new.data[0] @ e_u)
    return e_new.data[0].copy(), score
