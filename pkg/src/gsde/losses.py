"""Training objective: classification + adversarial + moving semantic + MixMatch.

Quantities that are treated as constants by the backward pass (MixMatch label
guesses, target centroid assignments, the previous centroid values) are
produced up front so that the differentiable part can be re-evaluated at
perturbed parameters for gradient checking.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .diffcore import (
    PROB_FLOOR,
    bce,
    cross_entropy,
    make_rng,
    one_hot,
    sigmoid,
    softmax_backward,
)
from .data import NO_LABEL, Domain
from .model import GsdeModel, grl_backward, multilinear, multilinear_backward

_NORM_EPS = 1e-12


class LossContractError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component} became non-finite ({value})")
        self.component = component
        self.value = value


# ---------------------------------------------------------------- classification

def classification_loss(p: np.ndarray, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels == NO_LABEL):
        raise LossContractError("unlabeled row reached the classification loss")
    return cross_entropy(p, one_hot(labels, p.shape[1]))


# ---------------------------------------------------------------- adversarial

def _adversarial_parts(m: GsdeModel, f: np.ndarray, p: np.ndarray, domain_labels: np.ndarray,
                       l_am: float, backward: bool):
    fused = multilinear(f, p)
    cache = m.disc_forward(fused)
    prob = sigmoid(cache.logits).ravel()
    loss = l_am * bce(prob, domain_labels)
    if not backward:
        return loss, prob, None, None
    p_clamped = np.clip(prob, PROB_FLOOR, 1.0 - PROB_FLOOR)
    # d bce / d logit; exact except where the clamp is active
    g_logit = (l_am * (p_clamped - domain_labels) / len(prob)).reshape(-1, 1)
    g_fused = grl_backward(m.disc_backward(cache, g_logit), l_am)
    g_f, g_p = multilinear_backward(f, p, g_fused)
    return loss, prob, g_f, g_p


def adversarial_loss(m: GsdeModel, f_src, p_src, f_tgt, p_tgt, l_am: float) -> float:
    """``l_am`` times the mean discriminator BCE; source stream is domain 1, target 0."""
    if len(f_src) == 0 or len(f_tgt) == 0:
        raise LossContractError("adversarial loss needs non-empty source and target batches")
    d = np.concatenate([np.ones(len(f_src)), np.zeros(len(f_tgt))])
    loss, *_ = _adversarial_parts(m, np.vstack([f_src, f_tgt]), np.vstack([p_src, p_tgt]), d,
                                  l_am, backward=False)
    return loss


# ---------------------------------------------------------------- centroids

@dataclass
class CentroidBank:
    source: np.ndarray  # (K, b)
    target: np.ndarray  # (K, b)
    theta: float = 0.7
    source_init: np.ndarray = None
    target_init: np.ndarray = None

    def __post_init__(self):
        k = self.source.shape[0]
        if self.source_init is None:
            self.source_init = np.zeros(k, dtype=bool)
        if self.target_init is None:
            self.target_init = np.zeros(k, dtype=bool)
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("centroid momentum must lie in [0, 1]")

    @classmethod
    def empty(cls, num_classes: int, dim: int, theta: float = 0.7) -> "CentroidBank":
        return cls(np.zeros((num_classes, dim)), np.zeros((num_classes, dim)), theta)

    def copy(self) -> "CentroidBank":
        return CentroidBank(self.source.copy(), self.target.copy(), self.theta,
                            self.source_init.copy(), self.target_init.copy())


def _moving_update(c: np.ndarray, init: np.ndarray, f: np.ndarray, labels: np.ndarray, theta: float):
    """Return updated centroids, init mask, and d(centroid[label_i])/d(f_i) per row."""
    c = c.copy()
    init = init.copy()
    coef = np.zeros(len(labels))
    for cls in np.unique(labels):
        rows = labels == cls
        n_c = int(rows.sum())
        mean = f[rows].mean(axis=0)
        if init[cls]:
            c[cls] = theta * c[cls] + (1.0 - theta) * mean
            coef[rows] = (1.0 - theta) / n_c
        else:
            c[cls] = mean
            init[cls] = True
            coef[rows] = 1.0 / n_c
    return c, init, coef


def update_centroids(bank: CentroidBank, f: np.ndarray, labels, domain: Domain) -> CentroidBank:
    """Momentum update of the per-class centroids of one domain.

    Pseudo-source rows count as source. Classes absent from ``labels`` keep
    their previous centroid.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if domain == Domain.TARGET:
        c, init, _ = _moving_update(bank.target, bank.target_init, f, labels, bank.theta)
        return replace(bank.copy(), target=c, target_init=init)
    c, init, _ = _moving_update(bank.source, bank.source_init, f, labels, bank.theta)
    return replace(bank.copy(), source=c, source_init=init)


def _normalize(a: np.ndarray):
    norm = np.maximum(np.linalg.norm(a, axis=1, keepdims=True), _NORM_EPS)
    return a / norm, norm


def _normalize_backward(u: np.ndarray, norm: np.ndarray, g: np.ndarray) -> np.ndarray:
    return (g - np.sum(g * u, axis=1, keepdims=True) * u) / norm


def semantic_loss_and_grad(bank: CentroidBank, l_am: float):
    """Loss and its gradient w.r.t. the source and target centroid matrices.

    Same-class source/target pairs are pulled together through ``1 - cos``;
    every ordered cross-class pair is pushed apart through ``cos``.
    """
    S, T = bank.source, bank.target
    ms = bank.source_init.astype(np.float64)
    mt = bank.target_init.astype(np.float64)
    su, sn = _normalize(S)
    tu, tn = _normalize(T)
    off = 1.0 - np.eye(S.shape[0])
    w_ss = np.outer(ms, ms) * off
    w_st = np.outer(ms, mt) * off * l_am
    w_tt = np.outer(mt, mt) * off * l_am
    pull = ms * mt * l_am
    cos_ss, cos_st, cos_tt = su @ su.T, su @ tu.T, tu @ tu.T
    diag_st = np.sum(su * tu, axis=1)
    loss = float(np.sum(pull * (1.0 - diag_st)) + np.sum(w_ss * cos_ss)
                 + np.sum(w_st * cos_st) + np.sum(w_tt * cos_tt))
    g_su = -pull[:, None] * tu + (w_ss + w_ss.T) @ su + w_st @ tu
    g_tu = -pull[:, None] * su + w_st.T @ su + (w_tt + w_tt.T) @ tu
    return loss, _normalize_backward(su, sn, g_su), _normalize_backward(tu, tn, g_tu)


def semantic_loss(bank: CentroidBank, l_am: float) -> float:
    return semantic_loss_and_grad(bank, l_am)[0]


# ---------------------------------------------------------------- MixMatch

@dataclass
class MixMatchConfig:
    num_augment: int = 2
    temperature: float = 0.5
    mixup_alpha: float = 0.75
    unlabeled_weight: float = 1.0
    augment_noise_sd: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("MixMatch temperature must be positive")
        if self.mixup_alpha <= 0:
            raise ValueError("MixUp alpha must be positive")
        if self.num_augment < 1:
            raise ValueError("need at least one augmentation")


def sharpen(q: np.ndarray, temperature: float) -> np.ndarray:
    if temperature == 1.0:
        return q / q.sum(axis=1, keepdims=True)
    # work in log space so small probabilities do not underflow to 0/0
    logq = np.log(np.maximum(q, PROB_FLOOR)) / temperature
    logq -= logq.max(axis=1, keepdims=True)
    e = np.exp(logq)
    return e / e.sum(axis=1, keepdims=True)


def mixup(x1: np.ndarray, x2: np.ndarray, lam_prime: np.ndarray) -> np.ndarray:
    lp = lam_prime.reshape(-1, *([1] * (x1.ndim - 1)))
    return lp * x1 + (1.0 - lp) * x2


@dataclass
class MixedBatch:
    """MixUp output; ``targets`` are constants for the backward pass."""

    inputs: np.ndarray
    targets: np.ndarray
    n_labeled: int
    lam_prime: np.ndarray = field(repr=False, default=None)


def mixmatch_batch(m: GsdeModel, cfg: MixMatchConfig, labeled_x: np.ndarray, labeled_y,
                   unlabeled_x: np.ndarray, seed) -> MixedBatch:
    if len(labeled_x) == 0 or len(unlabeled_x) == 0:
        raise LossContractError("MixMatch needs non-empty labeled and unlabeled batches")
    rng = make_rng(*np.atleast_1d(seed).tolist(), 0x4D4D)
    K = m.dims.num_classes
    sd = cfg.augment_noise_sd
    x_aug = labeled_x + rng.normal(0.0, sd, size=labeled_x.shape)
    y = one_hot(labeled_y, K)
    u_aug = [unlabeled_x + rng.normal(0.0, sd, size=unlabeled_x.shape) for _ in range(cfg.num_augment)]
    guess = np.mean([m.forward(u).probs for u in u_aug], axis=0)
    q = sharpen(guess, cfg.temperature)
    w_x = np.vstack([x_aug] + u_aug)
    w_y = np.vstack([y] + [q] * cfg.num_augment)
    perm = rng.permutation(len(w_x))
    lam_ = rng.beta(cfg.mixup_alpha, cfg.mixup_alpha, size=len(w_x))
    lam_prime = np.maximum(lam_, 1.0 - lam_)
    return MixedBatch(mixup(w_x, w_x[perm], lam_prime), mixup(w_y, w_y[perm], lam_prime),
                      len(labeled_x), lam_prime)


def _mixed_parts(m: GsdeModel, batch: MixedBatch, unlabeled_weight: float, backward: bool):
    cache = m.forward(batch.inputs)
    p = cache.probs
    nl = batch.n_labeled
    p_x, p_u = p[:nl], p[nl:]
    y_x, y_u = batch.targets[:nl], batch.targets[nl:]
    loss_x = cross_entropy(p_x, y_x)
    loss_u = float(np.mean((p_u - y_u) ** 2)) if len(p_u) else 0.0
    loss = loss_x + unlabeled_weight * loss_u
    if not backward:
        return loss, None
    g = np.empty_like(p)
    # d CE / d logits with soft targets that sum to one
    g[:nl] = (p_x - y_x) / nl
    if len(p_u):
        g_pu = unlabeled_weight * 2.0 * (p_u - y_u) / p_u.size
        g[nl:] = softmax_backward(p_u, g_pu)
    m.backward(cache, grad_logits=g)
    return loss, cache


def mixmatch_loss(m: GsdeModel, cfg: MixMatchConfig, labeled_x, labeled_y, unlabeled_x, seed) -> float:
    batch = mixmatch_batch(m, cfg, labeled_x, labeled_y, unlabeled_x, seed)
    return _mixed_parts(m, batch, cfg.unlabeled_weight, backward=False)[0]


# ---------------------------------------------------------------- total

@dataclass
class LossFlags:
    adversarial: bool = True
    semantic: bool = True
    semi_supervised: bool = True
    pseudo_as_unlabeled: bool = False


@dataclass
class StepBatch:
    """One training step's data. ``extra_*`` is the classification-only pseudo batch."""

    xs: np.ndarray
    ys: np.ndarray
    xt: np.ndarray
    src_is_pseudo: Optional[np.ndarray] = None
    extra_x: Optional[np.ndarray] = None
    extra_y: Optional[np.ndarray] = None


@dataclass
class StepConstants:
    """Stop-gradient quantities for one step."""

    target_assign: Optional[np.ndarray] = None
    mixed: Optional[MixedBatch] = None


@dataclass
class LossBreakdown:
    classification: float
    adversarial: float
    semantic: float
    semi_supervised: float
    bank: Optional[CentroidBank]

    @property
    def total(self) -> float:
        return self.classification + self.adversarial + self.semantic + self.semi_supervised

    def as_dict(self) -> dict:
        return {"L_C": self.classification, "L_AD": self.adversarial,
                "L_MS": self.semantic, "L_SS": self.semi_supervised}


def prepare_step(m: GsdeModel, batch: StepBatch, flags: LossFlags, mm_cfg: MixMatchConfig,
                 seed) -> StepConstants:
    const = StepConstants()
    if flags.semantic:
        const.target_assign = np.argmax(m.forward(batch.xt).probs, axis=1)
    if flags.semi_supervised:
        lx, ly, ux = batch.xs, batch.ys, batch.xt
        if flags.pseudo_as_unlabeled and batch.src_is_pseudo is not None and batch.src_is_pseudo.any():
            keep = ~batch.src_is_pseudo
            ux = np.vstack([batch.xt, batch.xs[batch.src_is_pseudo]])
            lx, ly = batch.xs[keep], batch.ys[keep]
        if len(lx):
            const.mixed = mixmatch_batch(m, mm_cfg, lx, ly, ux, seed)
    return const


def total_loss(m: GsdeModel, bank: Optional[CentroidBank], batch: StepBatch, l_am: float,
               flags: LossFlags, mm_cfg: MixMatchConfig, const: StepConstants,
               backward: bool = True) -> LossBreakdown:
    """Sum of the enabled loss terms; with ``backward`` gradients are accumulated into ``m``.

    The returned breakdown carries the updated centroid bank; ``bank`` itself
    is not modified.
    """
    if np.any(np.asarray(batch.ys) == NO_LABEL):
        raise LossContractError("source stream contains an unlabeled row")
    ns, nt = len(batch.xs), len(batch.xt)
    parts = [batch.xs, batch.xt]
    ne = 0
    if batch.extra_x is not None and len(batch.extra_x):
        parts.append(batch.extra_x)
        ne = len(batch.extra_x)
    cache = m.forward(np.vstack(parts))
    f, p = cache.features, cache.probs
    K = m.dims.num_classes
    g_f = np.zeros_like(f) if backward else None
    g_logits = np.zeros_like(p) if backward else None

    y_s = one_hot(batch.ys, K)
    l_c = cross_entropy(p[:ns], y_s)
    if backward:
        g_logits[:ns] += (p[:ns] - y_s) / ns
    if ne:
        y_e = one_hot(batch.extra_y, K)
        l_c += cross_entropy(p[ns + nt:], y_e)
        if backward:
            g_logits[ns + nt:] += (p[ns + nt:] - y_e) / ne

    l_ad = 0.0
    if flags.adversarial:
        sd = slice(0, ns + nt)
        d = np.concatenate([np.ones(ns), np.zeros(nt)])
        l_ad, _, gf_ad, gp_ad = _adversarial_parts(m, f[sd], p[sd], d, l_am, backward)
        if backward:
            g_f[sd] += gf_ad
            g_logits[sd] += softmax_backward(p[sd], gp_ad)

    l_ms = 0.0
    new_bank = bank
    if flags.semantic:
        if bank is None:
            raise LossContractError("semantic loss needs a centroid bank")
        assign = const.target_assign
        if assign is None:
            assign = np.argmax(p[ns:ns + nt], axis=1)
        ys = np.asarray(batch.ys, dtype=np.int64)
        cs, is_, coef_s = _moving_update(bank.source, bank.source_init, f[:ns], ys, bank.theta)
        ct, it_, coef_t = _moving_update(bank.target, bank.target_init, f[ns:ns + nt], assign, bank.theta)
        new_bank = CentroidBank(cs, ct, bank.theta, is_, it_)
        l_ms, g_cs, g_ct = semantic_loss_and_grad(new_bank, l_am)
        if backward:
            g_f[:ns] += g_cs[ys] * coef_s[:, None]
            g_f[ns:ns + nt] += g_ct[assign] * coef_t[:, None]

    l_ss = 0.0
    if flags.semi_supervised and const.mixed is not None:
        l_ss, _ = _mixed_parts(m, const.mixed, mm_cfg.unlabeled_weight, backward)

    if backward:
        m.backward(cache, grad_features=g_f, grad_logits=g_logits)

    out = LossBreakdown(l_c, l_ad, l_ms, l_ss, new_bank)
    for name, value in out.as_dict().items():
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
    return out
