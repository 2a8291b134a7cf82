"""
Synthetic multi-domain texture scenes and protocol splits.

A class is a sum of oriented sinusoidal gratings whose amplitudes are a
fixed linear function of the class name's word embedding. Tying
appearance to the name is what lets a frozen, "pretrained" backbone do
zero-shot recognition of classes it never saw during prompt learning.

A domain is a photometric style: per-channel gain and bias, an additive
domain texture, and pixel noise. One shift magnitude ``delta`` scales the
gain offset, bias and texture amplitude together, so ``delta == 0`` is the
identity style.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .encoders import WORD_SCALE, EncoderConfig, class_embedding
from .errors import ContractError

SCENE_NAMES = [
    "airplane", "baseball field", "basketball court", "beach", "bridge",
    "chaparral", "christmas tree farm", "closed road", "coastal mansion",
    "crosswalk", "dense residential", "desert", "ferry terminal", "football field",
    "forest", "freeway", "golf course", "harbor", "intersection", "lake",
    "meadow", "mobile home park", "mountain", "nursing home", "oil gas field",
    "oil well", "overpass", "parking lot", "parking space", "railway",
    "river", "runway", "runway marking", "shipping yard", "solar panel",
    "sparse residential", "storage tank", "swimming pool", "tennis court",
    "transformer station", "wastewater plant", "wetland", "island", "glacier",
    "stadium", "terrace", "snowberg", "palace",
]

PROTOCOLS = ("B2N", "CD", "SSMT")


def class_pool(n: int) -> list[str]:
    if n <= len(SCENE_NAMES):
        return list(SCENE_NAMES[:n])
    return SCENE_NAMES + [f"scene{i}" for i in range(n - len(SCENE_NAMES))]


@dataclass(frozen=True)
class TextureBank:
    """Shared grating dictionary: one grating per embedding dimension."""

    size: int
    channels: int
    frequencies: np.ndarray = field(repr=False)
    orientations: np.ndarray = field(repr=False)
    phases: np.ndarray = field(repr=False)
    colors: np.ndarray = field(repr=False)
    intensity_dir: np.ndarray = field(repr=False)
    amplitude: float = 0.0

    @classmethod
    def build(cls, enc: EncoderConfig) -> "TextureBank":
        rng = np.random.default_rng([enc.seed, 4])
        k = enc.embed_dim
        freqs = rng.integers(1, enc.image_size // 2 + 1, size=k).astype(float)
        orient = rng.uniform(0.0, math.pi, size=k)
        phases = rng.uniform(0.0, 2 * math.pi, size=k)
        colors = rng.standard_normal((k, enc.in_channels))
        colors /= np.linalg.norm(colors, axis=1, keepdims=True)
        direction = rng.standard_normal(k) / math.sqrt(k)
        return cls(enc.image_size, enc.in_channels, freqs, orient, phases, colors,
                   direction, 0.35 / math.sqrt(k / 2))

    def gratings(self) -> np.ndarray:
        """``(K, S, S)`` unit-amplitude sinusoid patterns."""
        s = np.arange(self.size) / self.size
        x, y = np.meshgrid(s, s, indexing="ij")
        arg = (np.cos(self.orientations)[:, None, None] * x
               + np.sin(self.orientations)[:, None, None] * y)
        return np.sin(2 * math.pi * self.frequencies[:, None, None] * arg
                      + self.phases[:, None, None])

    def base_intensity(self, emb: np.ndarray) -> np.ndarray:
        return 0.5 + 0.1 * np.tanh(emb @ self.intensity_dir / WORD_SCALE)

    def render(self, emb: np.ndarray) -> np.ndarray:
        """Templates for a batch of word-scale embeddings ``(N, K)`` -> ``(N, S, S, C)``."""
        emb = np.atleast_2d(emb)
        amps = emb / WORD_SCALE * self.amplitude
        # sum_k a_nk * grating_k(x, y) * color_kc
        img = np.einsum("nk,kxy,kc->nxyc", amps, self.gratings(), self.colors)
        return img + self.base_intensity(emb)[:, None, None, None]


@dataclass(frozen=True)
class ClassPrototype:
    name: str
    amplitudes: np.ndarray = field(repr=False)
    base_intensity: float
    bank: TextureBank = field(repr=False)

    @property
    def frequencies(self) -> np.ndarray:
        return self.bank.frequencies

    @property
    def orientations(self) -> np.ndarray:
        return self.bank.orientations

    @classmethod
    def for_name(cls, name: str, enc: EncoderConfig, bank: TextureBank | None = None) -> "ClassPrototype":
        bank = bank or TextureBank.build(enc)
        emb = class_embedding(name, enc.embed_dim, enc.seed)
        return cls(name, emb / WORD_SCALE * bank.amplitude,
                   float(bank.base_intensity(emb[None])[0]), bank)

    def template(self) -> np.ndarray:
        img = np.einsum("k,kxy,kc->xyc", self.amplitudes, self.bank.gratings(), self.bank.colors)
        return img + self.base_intensity


@dataclass(frozen=True)
class DomainSpec:
    """Photometric style of one domain.

    ``gain = 1 + delta * gain_dir``, ``bias = delta * bias_dir`` and the
    additive texture amplitude is ``delta * texture_dir``.
    """

    domain_id: int
    delta: float
    noise: float
    gain_dir: tuple[float, ...]
    bias_dir: tuple[float, ...]
    texture_dir: float
    texture_freq: float
    texture_orientation: float

    @classmethod
    def make(cls, domain_id: int, delta: float, noise: float, seed: int = 0,
             channels: int = 3) -> "DomainSpec":
        rng = np.random.default_rng([seed, 5, domain_id])
        return cls(
            domain_id=domain_id,
            delta=float(delta),
            noise=float(noise),
            gain_dir=tuple(float(v) for v in rng.normal(0.0, 0.5, channels)),
            bias_dir=tuple(float(v) for v in rng.normal(0.0, 0.3, channels)),
            texture_dir=float(rng.uniform(0.2, 0.4)),
            texture_freq=float(rng.integers(2, 7)),
            texture_orientation=float(rng.uniform(0.0, math.pi)),
        )

    @property
    def gain(self) -> np.ndarray:
        return 1.0 + self.delta * np.asarray(self.gain_dir)

    @property
    def bias(self) -> np.ndarray:
        return self.delta * np.asarray(self.bias_dir)

    @property
    def texture_amplitude(self) -> float:
        return self.delta * self.texture_dir

    def texture(self, size: int) -> np.ndarray:
        s = np.arange(size) / size
        x, y = np.meshgrid(s, s, indexing="ij")
        arg = math.cos(self.texture_orientation) * x + math.sin(self.texture_orientation) * y
        return np.sign(np.sin(2 * math.pi * self.texture_freq * arg))

    def stylize(self, template: np.ndarray) -> np.ndarray:
        tex = self.texture(template.shape[-2])[..., None]
        return template * self.gain + self.bias + self.texture_amplitude * tex


def generate_sample(proto: ClassPrototype, dom: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    """One ``(S, S, C)`` image: styled class template plus Gaussian pixel noise."""
    img = dom.stylize(proto.template())
    if dom.noise > 0:
        img = img + dom.noise * rng.standard_normal(img.shape)
    return img


def generate_many(proto: ClassPrototype, dom: DomainSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    base = dom.stylize(proto.template())
    noise = rng.standard_normal((n,) + base.shape) if dom.noise > 0 else 0.0
    return base[None] + dom.noise * noise


@dataclass
class Dataset:
    """Images of a single domain with labels indexing ``class_names``."""

    name: str
    images: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    class_names: list[str]
    domain: DomainSpec

    def __len__(self) -> int:
        return len(self.labels)

    def batches(self, batch_size: int, order: np.ndarray | None = None) -> Iterator["DomainBatch"]:
        idx = np.arange(len(self)) if order is None else order
        for start in range(0, len(idx), batch_size):
            sel = idx[start:start + batch_size]
            yield DomainBatch(self.images[sel], self.labels[sel], self.domain.domain_id, sel)


@dataclass
class DomainBatch:
    images: np.ndarray = field(repr=False)
    labels: np.ndarray
    domain_id: int
    index: np.ndarray | None = None


@dataclass
class ProtocolSplit:
    protocol: str
    seen: list[str]
    unseen: list[str]
    source_domains: list[int]
    target_domains: list[int]
    shots: int
    seed: int
    target_classes: dict[int, list[str]] = field(default_factory=dict)
    domains: list[DomainSpec] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_classes"] = {str(k): v for k, v in self.target_classes.items()}
        return d


_PURPOSE = {"train": 0, "test": 1}


def _pool(proto: ClassPrototype, dom: DomainSpec, n: int, seed: int, cls_idx: int, purpose: str) -> np.ndarray:
    # one independent stream per (seed, domain, class, purpose)
    rng = np.random.default_rng([seed, 6, dom.domain_id, cls_idx, _PURPOSE[purpose]])
    return generate_many(proto, dom, n, rng)


def _make_dataset(name, names, protos, dom, n, seed, purpose, name_index) -> Dataset:
    imgs, labels = [], []
    for k, cname in enumerate(names):
        imgs.append(_pool(protos[cname], dom, n, seed, name_index[cname], purpose))
        labels.append(np.full(n, k, dtype=np.int64))
    return Dataset(name, np.concatenate(imgs), np.concatenate(labels), list(names), dom)


def plan_split(
    protocol: str,
    n_classes: int = 16,
    n_domains: int = 4,
    shots: int = 16,
    seed: int = 1,
    delta: float = 0.0,
    noise: float = 0.05,
    train_pool: int = 32,
    overlap: float = 0.5,
    channels: int = 3,
) -> ProtocolSplit:
    """Class lists and domain styles for ``protocol``, without rendering any image.

    B2N uses one domain whose style shift is ``delta``; CD and SSMT keep the
    source domain unshifted and give every target domain shift ``delta``.
    """
    if protocol not in PROTOCOLS:
        raise ContractError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if n_classes < 2:
        raise ContractError("need at least 2 classes")
    if shots < 1:
        raise ContractError("shots must be >= 1")
    if shots > train_pool:
        raise ContractError(f"shots={shots} exceeds the generated pool of {train_pool} per class")
    if protocol != "B2N" and n_domains < 2:
        raise ContractError(f"{protocol} needs a source and at least one target domain")
    if not 0.0 <= overlap <= 1.0:
        raise ContractError("overlap must lie in [0, 1]")

    rng = np.random.default_rng([seed, 7])
    n_keep = int(round(overlap * n_classes))
    n_extra = 0 if protocol != "CD" else (n_domains - 1) * (n_classes - n_keep)
    pool = class_pool(n_classes + n_extra)
    order = rng.permutation(len(pool))
    names = [pool[i] for i in order[:n_classes]]
    extra = [pool[i] for i in order[n_classes:]]

    if protocol == "B2N":
        dom = DomainSpec.make(0, delta, noise, seed, channels)
        perm = rng.permutation(n_classes)
        n_base = math.ceil(n_classes / 2)
        seen = [names[i] for i in sorted(perm[:n_base])]
        unseen = [names[i] for i in sorted(perm[n_base:])]
        return ProtocolSplit(protocol, seen, unseen, [0], [0], shots, seed, domains=[dom])

    doms = [DomainSpec.make(0, 0.0, noise, seed, channels)]
    doms += [DomainSpec.make(j, delta, noise, seed, channels) for j in range(1, n_domains)]
    target_classes: dict[int, list[str]] = {}
    for j in range(1, n_domains):
        if protocol == "SSMT":
            target_classes[j] = list(names)
        else:
            keep = sorted(rng.choice(n_classes, size=n_keep, replace=False))
            fresh = extra[(j - 1) * (n_classes - n_keep): j * (n_classes - n_keep)]
            target_classes[j] = [names[i] for i in keep] + list(fresh)
    unseen = sorted({c for cl in target_classes.values() for c in cl} - set(names))
    return ProtocolSplit(protocol, list(names), unseen, [0], list(range(1, n_domains)),
                         shots, seed, target_classes, doms)


def build_split(
    protocol: str,
    n_classes: int = 16,
    n_domains: int = 4,
    shots: int = 16,
    seed: int = 1,
    delta: float = 0.0,
    noise: float = 0.05,
    n_test: int = 32,
    train_pool: int = 32,
    overlap: float = 0.5,
    encoder: EncoderConfig = EncoderConfig(),
) -> tuple[ProtocolSplit, dict[str, Dataset]]:
    """:func:`plan_split` plus rendered train and evaluation sets.

    The first ``shots`` images of each seen class's ``train_pool`` form the
    training set.
    """
    split = plan_split(protocol, n_classes, n_domains, shots, seed, delta, noise,
                       train_pool, overlap, encoder.in_channels)
    all_names = list(split.seen) + [c for c in split.unseen if c not in split.seen]
    name_index = {nm: i for i, nm in enumerate(class_pool(len(SCENE_NAMES) + len(all_names)))}
    bank = TextureBank.build(encoder)
    protos = {nm: ClassPrototype.for_name(nm, encoder, bank) for nm in all_names}
    datasets: dict[str, Dataset] = {}

    src = split.domains[0]
    train = _make_dataset("train", split.seen, protos, src, train_pool, seed, "train", name_index)
    datasets["train"] = _first_shots(train, shots, train_pool)
    if protocol == "B2N":
        datasets["test_base"] = _make_dataset("test_base", split.seen, protos, src, n_test, seed, "test", name_index)
        datasets["test_new"] = _make_dataset("test_new", split.unseen, protos, src, n_test, seed, "test", name_index)
        return split, datasets

    datasets["test_source"] = _make_dataset("test_source", split.seen, protos, src, n_test, seed, "test", name_index)
    for j, dom in enumerate(split.domains[1:], start=1):
        datasets[f"test_target{j}"] = _make_dataset(
            f"test_target{j}", split.target_classes[j], protos, dom, n_test, seed, "test", name_index
        )
    return split, datasets


def _first_shots(ds: Dataset, shots: int, pool: int) -> Dataset:
    keep = np.concatenate([np.arange(k * pool, k * pool + shots) for k in range(len(ds.class_names))])
    return Dataset(ds.name, ds.images[keep], ds.labels[keep], ds.class_names, ds.domain)


# ---------------------------------------------------------------- dumps

def save_datasets(out_dir, split: ProtocolSplit, datasets: dict[str, Dataset], extra: dict | None = None) -> Path:
    """Write flat little-endian binaries plus a ``key: value`` manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"split: {json.dumps(split.to_dict(), sort_keys=True)}"]
    for key, val in sorted((extra or {}).items()):
        lines.append(f"{key}: {json.dumps(val, sort_keys=True)}")
    for name, ds in datasets.items():
        ds.images.astype("<f8").tofile(out / f"{name}.images.bin")
        ds.labels.astype("<i8").tofile(out / f"{name}.labels.bin")
        meta = {
            "images_shape": list(ds.images.shape),
            "labels_shape": list(ds.labels.shape),
            "class_names": ds.class_names,
            "domain": asdict(ds.domain),
        }
        lines.append(f"dataset.{name}: {json.dumps(meta, sort_keys=True)}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out


def load_datasets(in_dir) -> tuple[dict, dict[str, Dataset]]:
    src = Path(in_dir)
    manifest: dict = {}
    for line in (src / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        key, _, val = line.partition(": ")
        manifest[key] = json.loads(val)
    datasets = {}
    for key, meta in manifest.items():
        if not key.startswith("dataset."):
            continue
        name = key[len("dataset."):]
        images = np.fromfile(src / f"{name}.images.bin", dtype="<f8").reshape(meta["images_shape"])
        labels = np.fromfile(src / f"{name}.labels.bin", dtype="<i8").reshape(meta["labels_shape"])
        dom = meta["domain"]
        dom["gain_dir"] = tuple(dom["gain_dir"])
        dom["bias_dir"] = tuple(dom["bias_dir"])
        datasets[name] = Dataset(name, images, labels, meta["class_names"], DomainSpec(**dom))
    return manifest, datasets


def output_root() -> Path:
    return Path(os.environ.get("VISPROMPT_OUT", "results"))
