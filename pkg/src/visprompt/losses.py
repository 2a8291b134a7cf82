"""Cosine-softmax classification, cross-entropy, token decorrelation and prediction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateInputError, DimensionError
from .tensor import Tensor

TAU = 0.07
LAMBDA = 0.1


@dataclass
class ClassScores:
    cosines: Tensor  # (..., K)
    log_probs: Tensor  # (..., K)
    tau: float

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)


@dataclass
class LossBundle:
    ce: Tensor
    crp: Tensor
    lam: float
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {"ce": self.ce.item(), "crp": self.crp.item(), "lambda": self.lam,
                "total": self.total.item()}


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ContractError(f"temperature must be positive, got {tau}")


def cosine_logits(image_feats, prompt_feats) -> Tensor:
    """Cosine similarities.

    ``image_feats`` ``(d,)`` with ``prompt_feats`` ``(K, d)`` gives ``(K,)``;
    ``(B, d)`` with ``(B, K, d)`` (per-image prompts) or ``(K, d)`` gives ``(B, K)``.
    """
    img = T.normalize_l2(T.as_tensor(image_feats))
    txt = T.normalize_l2(T.as_tensor(prompt_feats))
    if img.ndim == 1:
        if txt.ndim != 2 or txt.shape[1] != img.shape[0]:
            raise DimensionError(f"single image needs (K, {img.shape[0]}) prompts, got {txt.shape}")
        img = T.reshape(img, (1, img.shape[0]))
        return T.sum(T.mul(T.expand(img, txt.shape), txt), axis=-1)
    B, d = img.shape
    if txt.ndim == 2:
        txt = T.expand(T.reshape(txt, (1,) + txt.shape), (B,) + txt.shape)
    if txt.ndim != 3 or txt.shape[0] != B or txt.shape[2] != d:
        raise DimensionError(f"cosine_logits: images {img.shape} vs prompts {txt.shape}")
    K = txt.shape[1]
    img3 = T.expand(T.reshape(img, (B, 1, d)), (B, K, d))
    return T.sum(T.mul(img3, txt), axis=-1)


def class_probabilities(image_feat, prompt_feats, tau: float = TAU) -> ClassScores:
    """Softmax over cosine(image, prompt_k) / tau."""
    _check_tau(tau)
    if isinstance(prompt_feats, (list, tuple)):
        if not prompt_feats:
            raise ContractError("class_probabilities: empty class set")
        prompt_feats = T.stack(list(prompt_feats), axis=0)
    cos = cosine_logits(image_feat, prompt_feats)
    return ClassScores(cos, T.log_softmax(T.scale(cos, 1.0 / tau), axis=-1), tau)


def cross_entropy_loss(scores: ClassScores | Tensor, labels) -> Tensor:
    """Batch mean of -log p(true class); accepts ClassScores or raw log-probabilities."""
    logp = scores.log_probs if isinstance(scores, ClassScores) else scores
    if logp.ndim == 1:
        logp = T.reshape(logp, (1, logp.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, K = logp.shape
    if labels.shape != (B,):
        raise ContractError(f"{labels.shape[0]} labels for a batch of {B}")
    if labels.min() < 0 or labels.max() >= K:
        raise ContractError(f"label index out of range for {K} classes")
    onehot = np.zeros((B, K))
    onehot[np.arange(B), labels] = 1.0
    return T.scale(T.sum(T.mul(logp, Tensor(onehot))), -1.0 / B)


def crp_loss(prompt_tokens) -> Tensor:
    """Mean absolute off-diagonal cosine among prompt tokens.

    ``prompt_tokens`` is a list of M vectors, an ``(M, d)`` block, or a
    batch ``(B, M, d)`` (averaged over the batch). Zero for M == 1.
    """
    if isinstance(prompt_tokens, (list, tuple)):
        prompt_tokens = T.stack(list(prompt_tokens), axis=0)
    x = T.as_tensor(prompt_tokens)
    if x.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise DimensionError(f"crp_loss expects (M, d) or (B, M, d), got {x.shape}")
    B, M, d = x.shape
    if M < 2:
        return T.scale(T.sum(x), 0.0)
    n = T.normalize_l2(x, axis=-1)
    left = T.expand(T.reshape(n, (B, M, 1, d)), (B, M, M, d))
    right = T.expand(T.reshape(n, (B, 1, M, d)), (B, M, M, d))
    gram = T.sum(T.mul(left, right), axis=-1)
    off = Tensor(np.broadcast_to(1.0 - np.eye(M), (B, M, M)).copy())
    return T.scale(T.sum(T.mul(T.absolute(gram), off)), 1.0 / (B * M * (M - 1)))


def total_loss(ce: Tensor, crp: Tensor, lam: float = LAMBDA) -> LossBundle:
    if lam < 0:
        raise ContractError(f"lambda must be non-negative, got {lam}")
    ce, crp = T.as_tensor(ce), T.as_tensor(crp)
    for t in (ce, crp):
        if not np.all(np.isfinite(t.data)):
            raise DegenerateInputError("total_loss: non-finite component")
    return LossBundle(ce, crp, lam, T.add(ce, T.scale(crp, lam)))


def predict(image_feat, prompt_feats, tau: float = TAU) -> int | np.ndarray:
    """Arg-max class; ties go to the lowest index (``np.argmax`` semantics)."""
    _check_tau(tau)
    if isinstance(prompt_feats, (list, tuple)):
        if not prompt_feats:
            raise ContractError("predict: empty class set")
        prompt_feats = np.stack([T.as_tensor(p).data for p in prompt_feats])
    scores = class_probabilities(image_feat, prompt_feats, tau).log_probs.data
    out = np.argmax(scores, axis=-1)
    return int(out) if out.ndim == 0 else out
