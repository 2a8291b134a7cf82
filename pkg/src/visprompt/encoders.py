"""
Frozen toy stand-ins for a contrastive vision-language backbone.

The vision encoder is a pyramid of non-overlapping patch-linear + ReLU
stages; every stage keeps a spatial grid, so per-layer global average
pooling is meaningful. Its output head is fitted once, at construction,
by ridge regression onto the text encoder's caption features for a large
set of random pseudo-classes. That single deterministic fit plays the role
of large-scale contrastive pretraining: afterwards both towers are frozen
and images of a class land near the text feature of
``"a photo of the <class>"``. The hand-written zero-shot phrase differs
from that caption, so a fixed prompt is good but not perfect, and learned
context has something to recover.

Word embeddings come from a seeded hash of the word string, so no
vocabulary is shipped.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

ZERO_SHOT_CONTEXT = "a photo of a"
# caption template the head is aligned to; deliberately not the zero-shot phrase
PRETRAIN_CONTEXT = "a photo of the"
MAX_POSITIONS = 77
# per-component std of word embeddings; learnable context vectors live on this scale
WORD_SCALE = 0.1
# std of the text mixer pre-activation per unit-variance input; keeps tanh near its linear range
TEXT_GAIN = 0.5


@dataclass(frozen=True)
class EncoderConfig:
    """Sizes and seed of the frozen backbone."""

    seed: int = 0
    image_size: int = 16
    in_channels: int = 3
    channels: tuple[int, ...] = (8, 8, 8)
    patch: int = 2
    embed_dim: int = 32
    head_layers: int = 2
    pretrain_classes: int = 2048
    pretrain_ridge: float = 1e-2
    pretrain_context: str = PRETRAIN_CONTEXT

    @property
    def n_layers(self) -> int:
        return len(self.channels)

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        shapes = []
        side = self.image_size
        for c in self.channels:
            if side % self.patch:
                raise ContractError(f"grid side {side} not divisible by patch {self.patch}")
            side //= self.patch
            shapes.append((side, side, c))
        return shapes

    @property
    def head_in(self) -> int:
        if not 1 <= self.head_layers <= self.n_layers:
            raise ContractError(f"head_layers must be in 1..{self.n_layers}")
        return sum(w * h * c for w, h, c in self.layer_shapes()[-self.head_layers:])


def _word_seed(word: str, seed: int) -> int:
    digest = hashlib.sha256(f"{seed}:{word}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@lru_cache(maxsize=4096)
def _word_vector(word: str, dim: int, seed: int) -> np.ndarray:
    v = WORD_SCALE * np.random.default_rng(_word_seed(word, seed)).standard_normal(dim)
    v.setflags(write=False)
    return v


def word_vector(word: str, dim: int = 32, seed: int = 0) -> np.ndarray:
    """Gaussian embedding of a single word, a pure function of (word, dim, seed)."""
    return _word_vector(word, dim, seed)


def embed_words(phrase: str, dim: int = 32, seed: int = 0) -> list[Tensor]:
    words = phrase.split()
    if not words:
        raise ContractError("embed_words: phrase has no words")
    return [Tensor(word_vector(w, dim, seed)) for w in words]


def class_embedding(name: str, dim: int = 32, seed: int = 0) -> np.ndarray:
    """Embedding of a (possibly multi-word) class name: mean of its word vectors."""
    words = name.replace("_", " ").split()
    if not words:
        raise ContractError("class name is empty")
    return np.mean([word_vector(w, dim, seed) for w in words], axis=0)


@dataclass
class TextEncoder:
    """Position-aware mean pooling followed by a frozen linear + tanh mixer.

    ``out = tanh(W @ mean_i(g_i * e_i) + b)`` with fixed per-position gains
    ``g_i``; the gains make the output depend on where the class token sits.
    """

    dim: int
    seed: int
    W: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)
    gains: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, dim: int = 32, seed: int = 0) -> "TextEncoder":
        rng = np.random.default_rng([seed, 1])
        W = rng.standard_normal((dim, dim)) * (TEXT_GAIN / np.sqrt(dim) / WORD_SCALE)
        b = rng.standard_normal(dim) * 0.1
        gains = rng.uniform(0.5, 1.5, size=(MAX_POSITIONS, dim))
        for a in (W, b, gains):
            a.setflags(write=False)
        return cls(dim, seed, W, b, gains)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b, "gains": self.gains}

    def forward(self, tokens: Sequence[Tensor], expected_len: int | None = None) -> Tensor:
        """Encode one prompt given as a list of ``dim``-vectors."""
        if expected_len is not None and len(tokens) != expected_len:
            raise ContractError(f"text_forward: expected {expected_len} tokens, got {len(tokens)}")
        seq = T.stack(list(tokens), axis=0)
        return T.reshape(self.forward_batch(T.reshape(seq, (1,) + seq.shape)), (self.dim,))

    def forward_batch(self, seq: Tensor) -> Tensor:
        """Encode ``(..., n_tokens, dim)`` token blocks to ``(..., dim)`` features."""
        if seq.ndim < 2 or seq.shape[-1] != self.dim:
            raise DimensionError(f"text encoder expects (..., n, {self.dim}), got {seq.shape}")
        n = seq.shape[-2]
        if n > MAX_POSITIONS:
            raise ContractError(f"prompt longer than {MAX_POSITIONS} tokens")
        lead = seq.shape[:-2]
        gains = Tensor(self.gains[:n].reshape((1,) * len(lead) + (n, self.dim)))
        pooled = T.mean(T.mul(seq, T.expand(gains, seq.shape)), axis=-2)
        flat = T.reshape(pooled, (-1, self.dim))
        mixed = T.matmul(flat, Tensor(self.W.T))
        mixed = T.add(mixed, T.expand(Tensor(self.b[None, :]), mixed.shape))
        out = T.tanh(mixed)
        return T.reshape(out, lead + (self.dim,))

    def encode_numpy(self, seq: np.ndarray) -> np.ndarray:
        n = seq.shape[-2]
        pooled = (seq * self.gains[:n]).mean(axis=-2)
        return np.tanh(pooled @ self.W.T + self.b)


@dataclass
class VisionEncoder:
    """Patch-linear + ReLU pyramid with a linear output head."""

    config: EncoderConfig
    weights: list[np.ndarray] = field(repr=False)
    biases: list[np.ndarray] = field(repr=False)
    head_W: np.ndarray = field(repr=False)
    head_b: np.ndarray = field(repr=False)

    @classmethod
    def random(cls, config: EncoderConfig, bias_std: float = 0.0) -> "VisionEncoder":
        """Random pyramid with an all-zero head (call :func:`build_encoders` for a fitted one)."""
        rng = np.random.default_rng([config.seed, 2])
        weights, biases = [], []
        c_in = config.in_channels
        for c in config.channels:
            fan_in = config.patch * config.patch * c_in
            weights.append(rng.standard_normal((fan_in, c)) * np.sqrt(2.0 / fan_in))
            biases.append(rng.standard_normal(c) * bias_std)
            c_in = c
        head_W = np.zeros((config.head_in, config.embed_dim))
        head_b = np.zeros(config.embed_dim)
        enc = cls(config, weights, biases, head_W, head_b)
        enc._freeze()
        return enc

    def _freeze(self) -> None:
        for a in [*self.weights, *self.biases, self.head_W, self.head_b]:
            a.setflags(write=False)

    def parameters(self) -> dict[str, np.ndarray]:
        out = {f"w{i}": w for i, w in enumerate(self.weights)}
        out.update({f"b{i}": b for i, b in enumerate(self.biases)})
        out.update(head_W=self.head_W, head_b=self.head_b)
        return out

    def _stages(self, x: np.ndarray) -> list[np.ndarray]:
        cfg = self.config
        if x.shape[-3:] != (cfg.image_size, cfg.image_size, cfg.in_channels):
            raise DimensionError(
                f"vision_forward: image shape {x.shape[-3:]} != "
                f"{(cfg.image_size, cfg.image_size, cfg.in_channels)}"
            )
        p = cfg.patch
        maps = []
        h = x
        for w, b in zip(self.weights, self.biases):
            *lead, W, H, C = h.shape
            patches = h.reshape(*lead, W // p, p, H // p, p, C)
            patches = np.moveaxis(patches, -4, -3).reshape(*lead, W // p, H // p, p * p * C)
            h = np.maximum(patches @ w + b, 0.0)
            maps.append(h)
        return maps

    def forward_numpy(self, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Layer maps and final feature for one image or a batch ``(..., W, H, C)``."""
        x = np.asarray(x, dtype=np.float64)
        maps = self._stages(x)
        return maps, self._head_input(maps) @ self.head_W + self.head_b

    def _head_input(self, maps: list[np.ndarray]) -> np.ndarray:
        lead = maps[-1].shape[:-3]
        return np.concatenate(
            [m.reshape(*lead, -1) for m in maps[-self.config.head_layers:]], axis=-1
        )

    def forward(self, x) -> tuple[list[Tensor], Tensor]:
        """Frozen forward pass; outputs are constants on the tape."""
        maps, final = self.forward_numpy(x.data if isinstance(x, Tensor) else x)
        return [Tensor(m) for m in maps], Tensor(final)


def vision_forward(encoder: VisionEncoder, image) -> tuple[list[Tensor], Tensor]:
    return encoder.forward(image)


def text_forward(encoder: TextEncoder, tokens: Sequence[Tensor], context_len: int | None = None) -> Tensor:
    """Encode ``context_len`` context tokens plus one class token."""
    expected = None if context_len is None else context_len + 1
    return encoder.forward(tokens, expected)


def zero_shot_tokens(name: str, dim: int, seed: int) -> np.ndarray:
    ctx = np.stack([word_vector(w, dim, seed) for w in ZERO_SHOT_CONTEXT.split()])
    return np.concatenate([ctx, class_embedding(name, dim, seed)[None]], axis=0)


@dataclass
class Encoders:
    vision: VisionEncoder
    text: TextEncoder

    @property
    def config(self) -> EncoderConfig:
        return self.vision.config

    def snapshot(self) -> dict[str, bytes]:
        """Raw bytes of every frozen array, for bit-exact frozenness checks."""
        out = {f"vision.{k}": v.tobytes() for k, v in self.vision.parameters().items()}
        out.update({f"text.{k}": v.tobytes() for k, v in self.text.parameters().items()})
        return out


def _pretrain_images(config: EncoderConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    # late import: datagen depends on this module
    from .datagen import TextureBank

    bank = TextureBank.build(config)
    emb = WORD_SCALE * rng.standard_normal((config.pretrain_classes, config.embed_dim))
    images = bank.render(emb)
    # mild photometric jitter so the head does not overfit a single style
    gain = 1.0 + 0.1 * rng.standard_normal((len(emb), 1, 1, config.in_channels))
    bias = 0.05 * rng.standard_normal((len(emb), 1, 1, config.in_channels))
    images = gain * images + bias + 0.05 * rng.standard_normal(images.shape)
    return emb, images


@lru_cache(maxsize=8)
def build_encoders(config: EncoderConfig = EncoderConfig()) -> Encoders:
    """Deterministic, frozen encoder pair for ``config``; cached per config."""
    text = TextEncoder.build(config.embed_dim, config.seed)
    vision = VisionEncoder.random(config)
    rng = np.random.default_rng([config.seed, 3])
    emb, images = _pretrain_images(config, rng)
    ctx = np.stack([word_vector(w, config.embed_dim, config.seed) for w in config.pretrain_context.split()])
    seqs = np.concatenate(
        [np.broadcast_to(ctx, (len(emb),) + ctx.shape), emb[:, None, :]], axis=1
    )
    targets = text.encode_numpy(seqs)
    targets /= np.linalg.norm(targets, axis=1, keepdims=True)
    maps = vision._stages(images)
    X = vision._head_input(maps)
    Xc = np.hstack([X, np.ones((len(X), 1))])
    reg = config.pretrain_ridge * len(X) * np.eye(Xc.shape[1])
    reg[-1, -1] = 0.0
    sol = np.linalg.solve(Xc.T @ Xc + reg, Xc.T @ targets)
    vision = VisionEncoder(config, vision.weights, vision.biases, sol[:-1].copy(), sol[-1].copy())
    vision._freeze()
    return Encoders(vision, text)
