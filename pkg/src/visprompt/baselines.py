"""
Prompt-learning methods that share the frozen encoders.

Each model maps a :class:`FeatureBatch` (frozen encoder outputs for one
domain batch) and a set of candidate class embeddings to
:class:`~visprompt.losses.ClassScores`. ``parameters()`` lists exactly the
tensors the method is allowed to learn.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoders import ZERO_SHOT_CONTEXT, Encoders, word_vector
from .errors import ContractError
from .losses import TAU, ClassScores, class_probabilities, cross_entropy_loss, crp_loss
from .optim import sgd_step
from .promptcore import (
    InjectionParams,
    PromptState,
    assemble_prompt,
    assemble_prompt_batch,
    fuse_content_style,
    injection_forward,
    visual_tokens,
)
from .tensor import Tensor


class BaselineKind(str, enum.Enum):
    zero_shot = "zero_shot"
    erm_linear = "erm_linear"
    coop = "coop"
    cocoop = "cocoop"
    ms_cocoop = "ms_cocoop"
    applenet = "applenet"


FUSIONS = ("content_style", "content", "style")


@dataclass
class FeatureBatch:
    """Frozen encoder outputs for one domain-pure batch."""

    content: np.ndarray  # (B, sum C_l), layer GAPs in layer order
    layer_sizes: tuple[int, ...]
    final: np.ndarray  # (B, d_v)
    mu: np.ndarray  # (d_v,)
    labels: np.ndarray | None = None
    domain_id: int = 0

    def __len__(self) -> int:
        return len(self.final)

    def content_layers(self, k: int | None) -> np.ndarray:
        """GAP features of the ``k`` deepest layers (all when ``k`` is None)."""
        if k is None or k >= len(self.layer_sizes):
            return self.content
        if k < 1:
            raise ContractError("need at least one multi-scale layer")
        start = int(sum(self.layer_sizes[: len(self.layer_sizes) - k]))
        return self.content[:, start:]


def zero_shot_context(dim: int, seed: int) -> np.ndarray:
    return np.stack([word_vector(w, dim, seed) for w in ZERO_SHOT_CONTEXT.split()])


def zero_shot_prompt(class_emb, dim: int = 32, seed: int = 0) -> list[Tensor]:
    """Fixed ``"a photo of a" + [CLS]`` token sequence."""
    ctx = zero_shot_context(dim, seed)
    return [Tensor(c) for c in ctx] + [T.as_tensor(class_emb)]


def coop_prompt(prompt: PromptState, class_emb) -> list[Tensor]:
    zeros = [Tensor(np.zeros(prompt.dim)) for _ in range(prompt.n_context)]
    return assemble_prompt(prompt, zeros, class_emb)


def _shifted_prompt(prompt: PromptState, shift, class_emb) -> list[Tensor]:
    shift = T.as_tensor(shift)
    return assemble_prompt(prompt, [shift] * prompt.n_context, class_emb)


@dataclass
class MetaNet:
    """Two-layer bottleneck ``W2 relu(W1 x + b1) + b2`` with width ``d_in // 4``."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, out_std: float = 0.02,
             reduction: int = 4) -> "MetaNet":
        h = max(1, d_in // reduction)
        return cls(
            Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, h)), requires_grad=True),
            Tensor(np.zeros(h), requires_grad=True),
            Tensor(rng.normal(0.0, out_std, (h, d_out)), requires_grad=True),
            Tensor(np.zeros(d_out), requires_grad=True),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = T.reshape(x, (1, x.shape[0]))
        h = T.matmul(x, self.W1)
        h = T.relu(T.add(h, T.expand(T.reshape(self.b1, (1, -1)), h.shape)))
        y = T.matmul(h, self.W2)
        y = T.add(y, T.expand(T.reshape(self.b2, (1, -1)), y.shape))
        return T.reshape(y, (y.shape[1],)) if squeeze else y


def cocoop_prompt(prompt: PromptState, meta: MetaNet, image_final_feat, class_emb) -> list[Tensor]:
    """Every context vector receives the same image-conditioned shift."""
    return _shifted_prompt(prompt, meta(image_final_feat), class_emb)


def ms_cocoop_prompt(prompt: PromptState, meta: MetaNet, multiscale_feat, class_emb) -> list[Tensor]:
    return _shifted_prompt(prompt, meta(multiscale_feat), class_emb)


# ---------------------------------------------------------------- models

class Model:
    kind: BaselineKind
    uses_text = True

    def __init__(self, encoders: Encoders, tau: float = TAU, position: str = "end"):
        self.encoders = encoders
        self.tau = tau
        self.position = position
        self.dim = encoders.config.embed_dim

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def context_tokens(self, fb: FeatureBatch) -> tuple[Tensor, Tensor | None]:
        """``(B, M, d)`` tokens fed to the text encoder and the tokens the decorrelation loss sees."""
        raise NotImplementedError

    def text_features(self, fb: FeatureBatch, class_embs: np.ndarray) -> tuple[Tensor, Tensor | None]:
        tokens, crp_tokens = self.context_tokens(fb)
        seq = assemble_prompt_batch(tokens, Tensor(class_embs), self.position)
        return self.encoders.text.forward_batch(seq), crp_tokens

    def scores(self, fb: FeatureBatch, class_embs: np.ndarray) -> tuple[ClassScores, Tensor | None]:
        txt, crp_tokens = self.text_features(fb, class_embs)
        return class_probabilities(Tensor(fb.final), txt, self.tau), crp_tokens

    def regularizer(self, crp_tokens: Tensor | None) -> Tensor | None:
        return None

    def supports(self, class_names: Sequence[str]) -> bool:
        return True


def _batch_context(ctx: Tensor, B: int) -> Tensor:
    M, d = ctx.shape
    return T.expand(T.reshape(ctx, (1, M, d)), (B, M, d))


def _add_shift(ctx: Tensor, shift: Tensor) -> Tensor:
    """``c_m + s`` for every m, with ``shift`` of shape ``(B, d)``."""
    B, d = shift.shape
    M = ctx.shape[0]
    return T.add(_batch_context(ctx, B), T.expand(T.reshape(shift, (B, 1, d)), (B, M, d)))


class ZeroShot(Model):
    kind = BaselineKind.zero_shot

    def __init__(self, encoders: Encoders, tau: float = TAU, position: str = "end"):
        super().__init__(encoders, tau, "end")
        self._ctx = Tensor(zero_shot_context(self.dim, encoders.config.seed))

    def context_tokens(self, fb):
        return _batch_context(self._ctx, len(fb)), None


class CoOp(Model):
    kind = BaselineKind.coop

    def __init__(self, encoders, prompt: PromptState, tau: float = TAU):
        super().__init__(encoders, tau, prompt.position)
        self.prompt = prompt

    def parameters(self):
        return {"context": self.prompt.context}

    def context_tokens(self, fb):
        return _batch_context(self.prompt.context, len(fb)), None


class CoCoOp(CoOp):
    kind = BaselineKind.cocoop

    def __init__(self, encoders, prompt, meta: MetaNet, tau: float = TAU):
        super().__init__(encoders, prompt, tau)
        self.meta = meta

    def parameters(self):
        out = {"context": self.prompt.context}
        out.update({f"meta.{k}": v for k, v in self.meta.tensors().items()})
        return out

    def meta_input(self, fb: FeatureBatch) -> np.ndarray:
        return fb.final

    def context_tokens(self, fb):
        return _add_shift(self.prompt.context, self.meta(Tensor(self.meta_input(fb)))), None


class MSCoCoOp(CoCoOp):
    kind = BaselineKind.ms_cocoop

    def __init__(self, encoders, prompt, meta, tau: float = TAU, ms_layers: int | None = None):
        super().__init__(encoders, prompt, meta, tau)
        self.ms_layers = ms_layers

    def meta_input(self, fb):
        return fb.content_layers(self.ms_layers)


class APPLeNet(Model):
    """Content/style fusion -> residual gates -> per-token projector heads -> c_m + v_m."""

    kind = BaselineKind.applenet

    def __init__(self, encoders, prompt: PromptState, injection: InjectionParams,
                 tau: float = TAU, lam: float = 0.1, fusion: str = "content_style",
                 ms_layers: int | None = None, crp_target: str = "prompt"):
        super().__init__(encoders, tau, prompt.position)
        if fusion not in FUSIONS:
            raise ContractError(f"unknown fusion {fusion!r}; expected {FUSIONS}")
        if crp_target not in ("prompt", "context"):
            raise ContractError("crp_target must be 'prompt' or 'context'")
        if injection.n_tokens != prompt.n_context:
            raise ContractError("one projector head per context vector is required")
        self.prompt = prompt
        self.injection = injection
        self.lam = lam
        self.fusion = fusion
        self.ms_layers = ms_layers
        self.crp_target = crp_target

    def parameters(self):
        out = {"context": self.prompt.context}
        out.update({f"inj.{k}": v for k, v in self.injection.tensors().items()})
        return out

    def fused(self, fb: FeatureBatch) -> Tensor:
        content = Tensor(fb.content_layers(self.ms_layers))
        if self.fusion == "content":
            return content
        mu = np.broadcast_to(fb.mu, (len(fb), fb.mu.shape[0])).copy()
        if self.fusion == "style":
            return Tensor(mu)
        return fuse_content_style(content, Tensor(fb.mu))

    def context_tokens(self, fb):
        O = injection_forward(self.fused(fb), self.injection)
        B = len(fb)
        M, d = self.prompt.context.shape
        heads = [T.reshape(v, (B, 1, d)) for v in visual_tokens(O, self.injection)]
        vis = T.concat(heads, axis=1) if M > 1 else heads[0]
        tokens = T.add(_batch_context(self.prompt.context, B), vis)
        crp_tokens = tokens if self.crp_target == "prompt" else self.prompt.context
        return tokens, crp_tokens

    def regularizer(self, crp_tokens):
        if self.lam == 0 or crp_tokens is None:
            return None
        return crp_loss(crp_tokens)


def fused_dim(encoders: Encoders, fusion: str, ms_layers: int | None) -> int:
    sizes = encoders.config.channels
    k = len(sizes) if ms_layers is None else ms_layers
    content = sum(sizes[len(sizes) - k:])
    dv = encoders.config.embed_dim
    return {"content_style": content + dv, "content": content, "style": dv}[fusion]


class ERMLinear(Model):
    """Softmax linear probe on frozen final image features."""

    kind = BaselineKind.erm_linear
    uses_text = False

    def __init__(self, encoders, class_names: Sequence[str], rng: np.random.Generator):
        super().__init__(encoders)
        self.class_names = list(class_names)
        dv = encoders.config.embed_dim
        self.W = Tensor(rng.normal(0.0, 0.01, (dv, len(self.class_names))), requires_grad=True)
        self.b = Tensor(np.zeros(len(self.class_names)), requires_grad=True)

    def parameters(self):
        return {"W": self.W, "b": self.b}

    def fit(self, features: np.ndarray, labels: np.ndarray, seed: int = 0, **kw) -> float:
        """Fit the probe with its own SGD recipe; returns the final training loss."""
        self.W, self.b = erm_linear(features, labels, len(self.class_names), seed=seed, **kw)
        with T.no_grad():
            y = T.matmul(Tensor(features), self.W)
            y = T.add(y, T.expand(T.reshape(self.b, (1, -1)), y.shape))
            return cross_entropy_loss(T.log_softmax(y, -1), labels).item()

    def supports(self, class_names):
        return set(class_names) <= set(self.class_names)

    def logits(self, fb: FeatureBatch, class_names: Sequence[str] | None = None) -> Tensor:
        x = Tensor(fb.final)
        y = T.matmul(x, self.W)
        y = T.add(y, T.expand(T.reshape(self.b, (1, -1)), y.shape))
        if class_names is not None and list(class_names) != self.class_names:
            if not self.supports(class_names):
                raise ContractError("linear probe cannot score classes it was not trained on")
            y = T.take(y, [self.class_names.index(c) for c in class_names], axis=1)
        return y

    def scores(self, fb, class_embs, class_names=None):
        logits = self.logits(fb, class_names)
        return ClassScores(logits, T.log_softmax(logits, axis=-1), 1.0), None


def erm_linear(features: np.ndarray, labels: np.ndarray, n_classes: int, epochs: int = 200,
               lr: float = 0.5, batch_size: int = 4, seed: int = 0) -> tuple[Tensor, Tensor]:
    """Fit a softmax linear probe with plain SGD; returns ``(W, b)``."""
    rng = np.random.default_rng(seed)
    d = features.shape[1]
    W = Tensor(rng.normal(0.0, 0.01, (d, n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for s in range(0, len(order), batch_size):
            sel = order[s:s + batch_size]
            y = T.matmul(Tensor(features[sel]), W)
            y = T.add(y, T.expand(T.reshape(b, (1, -1)), y.shape))
            loss = cross_entropy_loss(T.log_softmax(y, -1), labels[sel])
            T.zero_grad([W, b])
            T.backward(loss)
            sgd_step([W, b], lr)
    return W, b
