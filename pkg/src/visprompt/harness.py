"""
Experiment configuration, training loop, evaluation, metrics and sweeps.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import tensor as T
from .baselines import (
    APPLeNet,
    BaselineKind,
    CoCoOp,
    CoOp,
    FUSIONS,
    ERMLinear,
    FeatureBatch,
    MetaNet,
    Model,
    MSCoCoOp,
    ZeroShot,
    fused_dim,
)
from .datagen import PROTOCOLS, Dataset, ProtocolSplit, build_split
from .encoders import EncoderConfig, Encoders, build_encoders, class_embedding
from .errors import ContractError, DegenerateInputError, DivergenceError
from .losses import cross_entropy_loss, total_loss
from .optim import lr_schedule, sgd_step
from .promptcore import INIT_MODES, POSITIONS, InjectionParams, PromptState, StyleMemory, multiscale_features
from .tensor import Tensor

log = logging.getLogger(__name__)

SWEEP_AXES = {
    "shots": ("shots", (1, 4, 8, 16, 32)),
    "context_length": ("context_length", (1, 4, 8, 16)),
    "cls_position": ("cls_position", POSITIONS),
    "attention_modules": ("attention_modules", (0, 1, 2, 3)),
    "ms_layers": ("ms_layers", None),
    "crp_toggle": ("lam", None),
    "init_mode": ("init_mode", INIT_MODES),
}

# fields that must agree for two runs to be comparable
_SHARED_FIELDS = (
    "protocol", "epochs", "batch_size", "lr", "warmup_lr", "warmup_epochs", "shots",
    "tau", "seeds", "n_classes", "n_domains", "delta", "noise", "n_test", "train_pool",
    "overlap", "encoder_seed", "image_size", "channels", "embed_dim",
)


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "applenet"
    protocol: str = "B2N"
    epochs: int = 50
    batch_size: int = 4
    lr: float = 2e-4
    warmup_lr: float = 1e-7
    warmup_epochs: int = 1
    shots: int = 16
    context_length: int = 4
    attention_modules: int = 2
    reduction: int = 4
    lam: float = 0.1
    tau: float = 0.07
    cls_position: str = "end"
    init_mode: str = "manual"
    seeds: tuple[int, ...] = (1, 2, 3)
    fusion: str = "content_style"
    ms_layers: int | None = None
    crp_target: str = "prompt"
    style_source: str = "batch"
    eval_batch_size: int | None = None
    head_std: float = 0.02
    n_classes: int = 16
    n_domains: int = 4
    delta: float = 0.0
    noise: float = 0.05
    n_test: int = 32
    train_pool: int = 32
    overlap: float = 0.5
    encoder_seed: int = 0
    image_size: int = 16
    channels: tuple[int, ...] = (8, 8, 8)
    embed_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        self.validate()

    def validate(self) -> None:
        if self.method not in {k.value for k in BaselineKind}:
            raise ContractError(f"unknown method {self.method!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        if self.context_length < 1 or self.attention_modules < 0:
            raise ContractError("context_length >= 1 and attention_modules >= 0 required")
        if not (self.lr > 0 and self.warmup_lr > 0):
            raise ContractError("learning rates must be positive")
        if self.lam < 0 or self.tau <= 0:
            raise ContractError("lam must be >= 0 and tau > 0")
        if self.cls_position not in POSITIONS:
            raise ContractError(f"cls_position must be one of {POSITIONS}")
        if self.init_mode not in INIT_MODES:
            raise ContractError(f"init_mode must be one of {INIT_MODES}")
        if self.protocol not in PROTOCOLS:
            raise ContractError(f"protocol must be one of {PROTOCOLS}")
        if self.fusion not in FUSIONS:
            raise ContractError(f"fusion must be one of {FUSIONS}")
        if self.crp_target not in ("prompt", "context"):
            raise ContractError("crp_target must be 'prompt' or 'context'")
        if self.style_source not in ("batch", "source"):
            raise ContractError("style_source must be 'batch' or 'source'")
        if not self.seeds:
            raise ContractError("at least one seed is required")
        if self.ms_layers is not None and not 1 <= self.ms_layers <= len(self.channels):
            raise ContractError(f"ms_layers must lie in [1, {len(self.channels)}]")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ContractError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        d["channels"] = list(self.channels)
        return d

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def shared_hash(self) -> str:
        """Hash of everything a method comparison must hold fixed (data, encoders, optimiser, tau)."""
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in _SHARED_FIELDS}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(seed=self.encoder_seed, image_size=self.image_size,
                             channels=self.channels, embed_dim=self.embed_dim)


@dataclass
class MetricsRecord:
    """Per-seed top-1 accuracies (percent) per evaluation set, plus harmonic means."""

    config_hash: str
    shared_hash: str
    method: str
    protocol: str
    per_seed: list[dict] = field(default_factory=list)

    def sets(self) -> list[str]:
        names: list[str] = []
        for r in self.per_seed:
            names.extend(k for k in r["accuracy"] if k not in names)
        return names

    def mean_accuracy(self) -> dict[str, float | None]:
        out = {}
        for s in self.sets():
            vals = [r["accuracy"].get(s) for r in self.per_seed]
            out[s] = None if any(v is None for v in vals) else float(np.mean(vals))
        return out

    @property
    def mean_H(self) -> float | None:
        vals = [r.get("H") for r in self.per_seed]
        if not vals or any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "shared_hash": self.shared_hash,
            "method": self.method,
            "protocol": self.protocol,
            "per_seed": self.per_seed,
            "mean": self.mean_accuracy(),
            "mean_H": self.mean_H,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(d["config_hash"], d["shared_hash"], d["method"], d["protocol"], d["per_seed"])


def harmonic_mean(base: float, new: float) -> float:
    if base <= 0 or new <= 0:
        raise ContractError(f"harmonic mean needs positive inputs, got {base}, {new}")
    return 2.0 * base * new / (base + new)


# ---------------------------------------------------------------- features

@dataclass
class FeatureSet:
    content: np.ndarray
    final: np.ndarray
    labels: np.ndarray
    layer_sizes: tuple[int, ...]
    domain_id: int
    class_names: list[str]

    def batch(self, sel: np.ndarray, mu: np.ndarray | None = None) -> FeatureBatch:
        final = self.final[sel]
        if mu is None:
            mu = final.mean(axis=0)
        return FeatureBatch(self.content[sel], self.layer_sizes, final, mu,
                            self.labels[sel], self.domain_id)


def extract_features(encoders: Encoders, ds: Dataset) -> FeatureSet:
    maps, final = encoders.vision.forward_numpy(ds.images)
    content = multiscale_features([Tensor(m) for m in maps]).data
    sizes = tuple(m.shape[-1] for m in maps)
    return FeatureSet(np.array(content), final, ds.labels, sizes, ds.domain.domain_id, ds.class_names)


def class_embeddings(names: Sequence[str], enc: EncoderConfig) -> np.ndarray:
    return np.stack([class_embedding(n, enc.embed_dim, enc.seed) for n in names])


# ---------------------------------------------------------------- models

def build_model(config: ExperimentConfig, encoders: Encoders, train_classes: Sequence[str],
                rng: np.random.Generator) -> Model:
    kind = BaselineKind(config.method)
    dim = encoders.config.embed_dim
    if kind is BaselineKind.zero_shot:
        return ZeroShot(encoders, config.tau)
    if kind is BaselineKind.erm_linear:
        return ERMLinear(encoders, train_classes, rng)
    prompt = PromptState.init(config.context_length, dim, config.init_mode, config.cls_position,
                              seed=encoders.config.seed, rng=rng)
    if kind is BaselineKind.coop:
        return CoOp(encoders, prompt, config.tau)
    if kind is BaselineKind.cocoop:
        return CoCoOp(encoders, prompt, MetaNet.init(dim, dim, rng, config.head_std), config.tau)
    if kind is BaselineKind.ms_cocoop:
        d_in = fused_dim(encoders, "content", config.ms_layers)
        return MSCoCoOp(encoders, prompt, MetaNet.init(d_in, dim, rng, config.head_std),
                        config.tau, config.ms_layers)
    d_in = fused_dim(encoders, config.fusion, config.ms_layers)
    inj = InjectionParams.init(d_in, dim, config.attention_modules, config.context_length,
                               config.reduction, rng, head_std=config.head_std)
    return APPLeNet(encoders, prompt, inj, config.tau, config.lam, config.fusion,
                    config.ms_layers, config.crp_target)


def batch_loss(model: Model, fb: FeatureBatch, class_embs: np.ndarray, lam: float):
    scores, crp_tokens = model.scores(fb, class_embs)
    ce = cross_entropy_loss(scores, fb.labels)
    reg = model.regularizer(crp_tokens)
    if reg is None:
        return total_loss(ce, T.scale(ce, 0.0), 0.0)
    return total_loss(ce, reg, lam)


# ---------------------------------------------------------------- training / evaluation

@dataclass
class TrainedRun:
    model: Model
    split: ProtocolSplit
    accuracy: dict[str, float | None]
    H: float | None
    history: list[dict]
    style: StyleMemory
    seed: int


def train(config: ExperimentConfig, seed: int | None = None,
          data: tuple[ProtocolSplit, dict[str, Dataset]] | None = None) -> TrainedRun:
    """Train ``config.method`` for one seed and evaluate it on every protocol set."""
    seed = config.seeds[0] if seed is None else seed
    encoders = build_encoders(config.encoder)
    split, datasets = data if data is not None else make_data(config, seed)
    train_ds = datasets["train"]
    feats = extract_features(encoders, train_ds)
    rng = np.random.default_rng([seed, 11])
    model = build_model(config, encoders, train_ds.class_names, rng)
    params = model.parameters()
    embs = class_embeddings(train_ds.class_names, encoders.config)
    style = StyleMemory()
    style.update(feats.domain_id, feats.final)

    history = []
    if isinstance(model, ERMLinear):
        loss = model.fit(feats.final, feats.labels, seed=seed)
        history.append({"epoch": config.epochs, "lr": None, "loss": loss})
    elif params:
        for epoch in range(1, config.epochs + 1):
            lr = lr_schedule(epoch, config.lr, config.warmup_lr, config.warmup_epochs)
            order = rng.permutation(len(feats.labels))
            losses = []
            for step, start in enumerate(range(0, len(order), config.batch_size)):
                fb = feats.batch(order[start:start + config.batch_size])
                try:
                    bundle = batch_loss(model, fb, embs, config.lam)
                except DegenerateInputError as exc:
                    raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}: {exc}") from exc
                val = bundle.total.item()
                if not math.isfinite(val):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch} step {step}: {bundle.as_floats()}"
                    )
                T.zero_grad(params.values())
                T.backward(bundle.total)
                sgd_step(params, lr)
                losses.append(val)
            history.append({"epoch": epoch, "lr": lr, "loss": float(np.mean(losses))})
            log.debug("epoch %d lr %.1e loss %.4f", epoch, lr, history[-1]["loss"])

    accuracy = evaluate(model, datasets, split, config, seed, style, encoders)
    H = None
    if split.protocol == "B2N" and accuracy.get("base") and accuracy.get("new"):
        H = harmonic_mean(accuracy["base"], accuracy["new"])
    return TrainedRun(model, split, accuracy, H, history, style, seed)


def make_data(config: ExperimentConfig, seed: int):
    return build_split(
        config.protocol, n_classes=config.n_classes, n_domains=config.n_domains,
        shots=config.shots, seed=seed, delta=config.delta, noise=config.noise,
        n_test=config.n_test, train_pool=config.train_pool, overlap=config.overlap,
        encoder=config.encoder,
    )


EVAL_SETS = {"test_base": "base", "test_new": "new", "test_source": "source"}


def eval_set_name(ds_name: str) -> str:
    return EVAL_SETS.get(ds_name, ds_name.replace("test_", ""))


def accuracy_on(model: Model, fs: FeatureSet, config: ExperimentConfig, seed: int,
                style: StyleMemory | None = None) -> float | None:
    """Top-1 accuracy (percent) of ``model`` on one feature set; None if unsupported."""
    n = len(fs.labels)
    if n == 0:
        raise ContractError("empty evaluation set")
    if not model.supports(fs.class_names):
        return None
    enc = model.encoders.config
    embs = class_embeddings(fs.class_names, enc)
    bs = config.eval_batch_size or config.batch_size
    # shuffled so evaluation batches mix classes like training batches do
    order = np.random.default_rng([seed, 13, fs.domain_id]).permutation(n)
    correct = 0
    with T.no_grad():
        for start in range(0, n, bs):
            sel = order[start:start + bs]
            mu = None
            if config.style_source == "source" or len(sel) == 1:
                if style is None:
                    raise ContractError("single-image evaluation needs stored style statistics")
                mu = style.mean(None if config.style_source == "source" else fs.domain_id)
            fb = fs.batch(sel, mu)
            if isinstance(model, ERMLinear):
                scores, _ = model.scores(fb, None, fs.class_names)
            else:
                scores, _ = model.scores(fb, embs)
            pred = np.argmax(scores.log_probs.data, axis=-1)
            correct += int(np.sum(pred == fs.labels[sel]))
    return 100.0 * correct / n


def evaluate(model: Model, datasets: dict[str, Dataset], split: ProtocolSplit,
             config: ExperimentConfig, seed: int, style: StyleMemory | None = None,
             encoders: Encoders | None = None) -> dict[str, float | None]:
    encoders = encoders or model.encoders
    out: dict[str, float | None] = {}
    for name, ds in datasets.items():
        if name == "train":
            continue
        out[eval_set_name(name)] = accuracy_on(model, extract_features(encoders, ds), config, seed, style)
    return out


def run(config: ExperimentConfig) -> MetricsRecord:
    """Train and evaluate every seed; data splits and initialisation are both reseeded."""
    rec = MetricsRecord(config.config_hash(), config.shared_hash(), config.method, config.protocol)
    for seed in config.seeds:
        res = train(config, seed)
        rec.per_seed.append({"seed": seed, "accuracy": res.accuracy, "H": res.H,
                             "final_loss": res.history[-1]["loss"] if res.history else None})
    return rec


def compare(records: Sequence[MetricsRecord]) -> None:
    """Refuse to compare records that differ in data, encoders, optimiser or tau."""
    hashes = {r.shared_hash for r in records}
    if len(hashes) > 1:
        raise ContractError(f"records are not comparable (shared hashes {sorted(hashes)})")


# ---------------------------------------------------------------- sweeps

def sweep_values(axis: str, config: ExperimentConfig) -> list:
    if axis not in SWEEP_AXES:
        raise ContractError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    _, values = SWEEP_AXES[axis]
    if axis == "ms_layers":
        return list(range(1, len(config.channels) + 1))
    if axis == "crp_toggle":
        return [config.lam if config.lam > 0 else 0.1, 0.0]
    return list(values)


def run_sweep(axis: str, config: ExperimentConfig, values: Sequence | None = None) -> list[dict]:
    """One row per axis value with every other field held at ``config``."""
    field_name = SWEEP_AXES[axis][0] if axis in SWEEP_AXES else None
    allowed = sweep_values(axis, config)
    values = allowed if values is None else list(values)
    bad = [v for v in values if v not in allowed]
    if bad:
        raise ContractError(f"invalid values {bad} for axis {axis}; allowed {allowed}")
    rows = []
    for v in values:
        cfg = config.replace(**{field_name: v})
        if axis == "shots" and v > cfg.train_pool:
            cfg = cfg.replace(train_pool=v)
        rec = run(cfg)
        label = ("with" if v > 0 else "without") if axis == "crp_toggle" else v
        rows.append({"axis": axis, "value": label, "config": cfg.to_dict(), "record": rec})
    return rows


# ---------------------------------------------------------------- result files

def write_record(out_dir, config: ExperimentConfig, rec: MetricsRecord,
                 split: ProtocolSplit | None = None, name: str | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = name or f"{config.method}_{config.protocol}_{rec.config_hash}"
    payload: dict[str, Any] = {"config": config.to_dict(), "config_hash": rec.config_hash,
                               "metrics": rec.to_dict()}
    if split is not None:
        payload["split"] = split.to_dict()
    path = out / f"{stem}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    _write_csv(out / f"{stem}.csv", [(config.to_dict(), rec)], rec.config_hash)
    return path


def write_sweep(out_dir, axis: str, rows: list[dict]) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = [{"axis": r["axis"], "value": r["value"], "config": r["config"],
                "config_hash": r["record"].config_hash, "metrics": r["record"].to_dict()}
               for r in rows]
    jpath = out / f"sweep_{axis}.json"
    jpath.write_text(json.dumps(payload, indent=2, sort_keys=True))
    cpath = out / f"sweep_{axis}.csv"
    _write_csv(cpath, [(r["config"], r["record"]) for r in rows], None, axis,
               [r["value"] for r in rows])
    return jpath, cpath


def _write_csv(path: Path, items, config_hash, axis=None, values=None) -> None:
    sets: list[str] = []
    for _, rec in items:
        sets.extend(s for s in rec.sets() if s not in sets)
    header = (["axis", "value"] if axis else []) + ["method", "protocol", "config_hash"] + sets + ["H"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, (_, rec) in enumerate(items):
            mean = rec.mean_accuracy()
            row = ([axis, values[i]] if axis else []) + [rec.method, rec.protocol, rec.config_hash]
            row += [_fmt(mean.get(s)) for s in sets] + [_fmt(rec.mean_H)]
            w.writerow(row)


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.2f}"


def summarize(in_dir) -> str:
    """Markdown table over every result JSON (single runs and sweeps) in ``in_dir``."""
    rows = []
    for path in sorted(Path(in_dir).glob("*.json")):
        payload = json.loads(path.read_text())
        entries = payload if isinstance(payload, list) else [payload]
        for e in entries:
            if not isinstance(e, dict) or "metrics" not in e:
                continue
            m = e["metrics"]
            label = path.stem if "axis" not in e else f"{path.stem}[{e['value']}]"
            rows.append((label, m["method"], m["protocol"], m["mean"], m.get("mean_H")))
    if not rows:
        raise ContractError(f"no result files in {in_dir}")
    sets: list[str] = []
    for r in rows:
        sets.extend(s for s in r[3] if s not in sets)
    lines = ["| run | method | protocol | " + " | ".join(sets) + " | H |",
             "|" + "---|" * (len(sets) + 4)]
    for label, method, proto, mean, H in rows:
        cells = [_fmt(mean.get(s)) for s in sets]
        lines.append(f"| {label} | {method} | {proto} | " + " | ".join(cells) + f" | {_fmt(H)} |")
    return "\n".join(lines)
