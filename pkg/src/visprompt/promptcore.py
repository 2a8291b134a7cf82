"""
Image-conditioned prompt construction.

Pipeline for one domain batch::

    layer maps --GAP--> multi-scale content  ┐
    final features --batch mean--> style mu  ┴─ concat -> F
    F --(Q residual SE gates, each + linear)--> O
    O --(M projector heads)--> visual tokens v_m
    prompt = [c_1 + v_1, ..., c_M + v_M] with the class token inserted
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoders import ZERO_SHOT_CONTEXT, word_vector
from .errors import ContractError, DegenerateInputError, DimensionError
from .tensor import Tensor

POSITIONS = ("front", "middle", "end")
INIT_MODES = ("manual", "random", "zeros")


# ---------------------------------------------------------------- content and style

def style_statistics(batch_final_features) -> Tensor:
    """Per-dimension mean of a domain batch's final features ``(B, d_v)``."""
    x = T.as_tensor(batch_final_features)
    if x.ndim != 2:
        raise DimensionError(f"style_statistics expects (B, d), got {x.shape}")
    return T.mean_over_batch(x)


def multiscale_features(layer_maps: Sequence) -> Tensor:
    """GAP each ``(..., W, H, C)`` map and concatenate in layer order."""
    if len(layer_maps) == 0:
        raise ContractError("multiscale_features: no layer maps")
    return T.concat([T.gap(T.as_tensor(m)) for m in layer_maps], axis=-1)


def fuse_content_style(content, style) -> Tensor:
    """``[content; style]``; for batched content ``(B, n)`` the style vector is repeated per row."""
    c, s = T.as_tensor(content), T.as_tensor(style)
    for t in (c, s):
        if not np.all(np.isfinite(t.data)):
            raise DegenerateInputError("fuse_content_style: non-finite input")
    if c.ndim == 2 and s.ndim == 1:
        s = T.expand(T.reshape(s, (1, s.shape[0])), (c.shape[0], s.shape[0]))
    return T.concat([c, s], axis=-1)


# ---------------------------------------------------------------- parameters

def _linear_params(rng, d_in, d_out, std):
    return (Tensor(rng.normal(0.0, std, (d_in, d_out)), requires_grad=True),
            Tensor(np.zeros(d_out), requires_grad=True))


@dataclass
class Gate:
    """Squeeze-excitation gate ``sigmoid(W2 relu(W1 x + b1) + b2)`` plus its post-residual projection."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    P: Tensor
    bp: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2, self.P, self.bp]


@dataclass
class InjectionParams:
    gates: list[Gate]
    heads_W: list[Tensor]
    heads_b: list[Tensor]

    @property
    def dim(self) -> int:
        return self.heads_W[0].shape[0]

    @property
    def n_tokens(self) -> int:
        return len(self.heads_W)

    @classmethod
    def init(cls, dim: int, out_dim: int, n_gates: int = 2, n_tokens: int = 4,
             reduction: int = 4, rng: np.random.Generator | None = None,
             gate_std: float | None = None, head_std: float = 0.02) -> "InjectionParams":
        """Random gates, identity post-gate projections, small projector heads."""
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = max(1, dim // reduction)
        gates = []
        for _ in range(n_gates):
            W1, b1 = _linear_params(rng, dim, hidden, gate_std or 1.0 / np.sqrt(dim))
            W2, b2 = _linear_params(rng, hidden, dim, gate_std or 1.0 / np.sqrt(hidden))
            P = Tensor(np.eye(dim), requires_grad=True)
            bp = Tensor(np.zeros(dim), requires_grad=True)
            gates.append(Gate(W1, b1, W2, b2, P, bp))
        heads_W, heads_b = [], []
        for _ in range(n_tokens):
            W, b = _linear_params(rng, dim, out_dim, head_std)
            heads_W.append(W)
            heads_b.append(b)
        return cls(gates, heads_W, heads_b)

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for q, g in enumerate(self.gates):
            for name, t in zip(("W1", "b1", "W2", "b2", "P", "bp"), g.tensors()):
                out[f"gate{q}.{name}"] = t
        for m, (W, b) in enumerate(zip(self.heads_W, self.heads_b)):
            out[f"head{m}.W"] = W
            out[f"head{m}.b"] = b
        return out


def _affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    squeeze = x.ndim == 1
    if squeeze:
        x = T.reshape(x, (1, x.shape[0]))
    y = T.matmul(x, W)
    y = T.add(y, T.expand(T.reshape(b, (1, b.shape[0])), y.shape))
    return T.reshape(y, (y.shape[1],)) if squeeze else y


def gate_forward(gate: Gate, x: Tensor) -> Tensor:
    return T.sigmoid(_affine(T.relu(_affine(x, gate.W1, gate.b1)), gate.W2, gate.b2))


def injection_forward(fused, params: InjectionParams) -> Tensor:
    """Residual attention recursion ``O_q = P_q(O_{q-1} * A_q(O_{q-1}) + O_{q-1})``.

    Works on one vector ``(d,)`` or a batch ``(B, d)``. With no gates the
    input is returned unchanged.
    """
    out = T.as_tensor(fused)
    if out.shape[-1] != params.dim:
        raise DimensionError(f"injection_forward: feature length {out.shape[-1]} != {params.dim}")
    for gate in params.gates:
        attn = gate_forward(gate, out)
        out = _affine(T.add(T.mul(out, attn), out), gate.P, gate.bp)
    return out


def visual_tokens(O, params: InjectionParams) -> list[Tensor]:
    O = T.as_tensor(O)
    if not params.heads_W:
        raise ContractError("visual_tokens: no projector heads")
    return [_affine(O, W, b) for W, b in zip(params.heads_W, params.heads_b)]


# ---------------------------------------------------------------- prompts

def cls_index(position: str, n_context: int) -> int:
    if position == "end":
        return n_context
    if position == "front":
        return 0
    if position == "middle":
        return n_context // 2
    raise ContractError(f"unknown class-token position {position!r}; expected {POSITIONS}")


@dataclass
class PromptState:
    context: Tensor  # (M, d)
    position: str = "end"

    def __post_init__(self):
        if self.context.ndim != 2 or self.context.shape[0] < 1:
            raise ContractError("PromptState needs an (M, d) context with M >= 1")
        cls_index(self.position, 1)

    @property
    def n_context(self) -> int:
        return self.context.shape[0]

    @property
    def dim(self) -> int:
        return self.context.shape[1]

    @classmethod
    def init(cls, n_context: int = 4, dim: int = 32, mode: str = "manual",
             position: str = "end", seed: int = 0,
             rng: np.random.Generator | None = None) -> "PromptState":
        """Context vectors from the words of the zero-shot phrase, N(0, 0.02^2), or zeros.

        Manual initialisation needs ``n_context`` equal to the phrase length
        when shorter; longer contexts are padded with N(0, 0.02^2) vectors.
        """
        if n_context < 1:
            raise ContractError("context length must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        if mode == "manual":
            words = [word_vector(w, dim, seed) for w in ZERO_SHOT_CONTEXT.split()]
            ctx = np.stack(words[-n_context:]) if n_context <= len(words) else np.vstack(
                [np.stack(words), rng.normal(0.0, 0.02, (n_context - len(words), dim))]
            )
        elif mode == "random":
            ctx = rng.normal(0.0, 0.02, (n_context, dim))
        elif mode == "zeros":
            ctx = np.zeros((n_context, dim))
        else:
            raise ContractError(f"unknown init mode {mode!r}; expected {INIT_MODES}")
        return cls(Tensor(ctx, requires_grad=True), position)


def assemble_prompt(prompt: PromptState, tokens: Sequence, class_emb) -> list[Tensor]:
    """``[c_1 + v_1, ..., c_M + v_M]`` with the class embedding inserted per the position policy."""
    if len(tokens) != prompt.n_context:
        raise ContractError(f"assemble_prompt: {len(tokens)} visual tokens for {prompt.n_context} context vectors")
    ctx = [T.reshape(T.take(prompt.context, [m], 0), (prompt.dim,)) for m in range(prompt.n_context)]
    seq = [T.add(c, T.as_tensor(v)) for c, v in zip(ctx, tokens)]
    seq.insert(cls_index(prompt.position, prompt.n_context), T.as_tensor(class_emb))
    return seq


def assemble_prompt_batch(context_tokens: Tensor, class_embs: Tensor, position: str) -> Tensor:
    """Vectorised prompt assembly.

    ``context_tokens`` is ``(B, M, d)`` (already ``c + v``), ``class_embs``
    ``(K, d)``; returns ``(B, K, M + 1, d)`` token blocks.
    """
    B, M, d = context_tokens.shape
    K = class_embs.shape[0]
    if class_embs.shape[1] != d:
        raise DimensionError(f"class embeddings {class_embs.shape} vs tokens {context_tokens.shape}")
    ctx = T.expand(T.reshape(context_tokens, (B, 1, M, d)), (B, K, M, d))
    cls = T.expand(T.reshape(class_embs, (1, K, 1, d)), (B, K, 1, d))
    i = cls_index(position, M)
    parts = []
    if i > 0:
        parts.append(T.slice_axis(ctx, 0, i, axis=2))
    parts.append(cls)
    if i < M:
        parts.append(T.slice_axis(ctx, i, M, axis=2))
    return T.concat(parts, axis=2)


@dataclass
class StyleMemory:
    """Running per-domain mean of final features, used when a test batch has one image."""

    sums: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def update(self, domain_id: int, feats: np.ndarray) -> None:
        self.sums[domain_id] = self.sums.get(domain_id, 0.0) + feats.sum(axis=0)
        self.counts[domain_id] = self.counts.get(domain_id, 0) + len(feats)

    def mean(self, domain_id: int | None = None) -> np.ndarray:
        if not self.counts:
            raise DegenerateInputError("no stored style statistics")
        if domain_id in self.counts:
            return self.sums[domain_id] / self.counts[domain_id]
        total = sum(self.counts.values())
        return sum(self.sums.values()) / total
