"""SGD training, outlier-exposure fine-tuning, distillation and checkpoint I/O.

Checkpoint container (little-endian)::

    b"SLOD" | version u32 | header length u64 | UTF-8 JSON header | float32 payload

The header holds the model spec, provenance and an ordered parameter manifest
(name, shape, byte offset into the payload, element count).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import soft_targets as st
from .data import BatchPlan, LabeledDataset, OUT_OF_DISTRIBUTION, make_batches, take_batch
from .errors import FormatError, NumericError, ShapeError, UsageError
from .nn import ModelSpec, Parameters, forward, init_model, predict_logits
from .tensor import log_softmax, softmax_np

log = logging.getLogger(__name__)

MAGIC = b"SLOD"
VERSION = 1
WORKERS = 1

StepCallback = Callable[[int, float], None]


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class LossSpec:
    kind: str = "hard"  # hard | label_smoothing | distill | oe
    alpha: float = 0.0
    temperature: float = 1.0
    lam: float = 0.0
    ref: Optional[str] = None  # teacher hash or OOD dataset name

    def __post_init__(self):
        if self.kind not in ("hard", "label_smoothing", "distill", "oe"):
            raise UsageError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise UsageError(f"alpha must be in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise UsageError(f"temperature must be > 0, got {self.temperature}")
        if self.lam < 0:
            raise UsageError(f"lambda must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 128
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)
    flip: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise UsageError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr0 > 0:
            raise UsageError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise UsageError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise UsageError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimizer -------------------------------------------------------------


@dataclass
class OptimizerState:
    velocity: dict

    @classmethod
    def zeros(cls, params: Parameters) -> "OptimizerState":
        return cls({name: np.zeros_like(t.data) for name, t in params})


def sgd_step(weights: dict, grads: dict, state: OptimizerState, lr: float,
             momentum: float, weight_decay: float) -> None:
    """In place: v <- momentum * v + grad + weight_decay * w;  w <- w - lr * v."""
    if set(weights) != set(grads) or set(weights) != set(state.velocity):
        raise ShapeError("weights, gradients and optimizer state cover different parameters")
    for name, w in weights.items():
        g, v = grads[name], state.velocity[name]
        if g.shape != w.shape or v.shape != w.shape:
            raise ShapeError(f"{name}: weight {w.shape}, grad {g.shape}, velocity {v.shape}")
        dt = w.dtype.type
        v *= dt(momentum)
        v += g
        if weight_decay:
            v += dt(weight_decay) * w
        w -= dt(lr) * v


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise UsageError(f"cosine_lr needs 0 <= step <= total_steps >= 1, got {step}/{total_steps}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# -- checkpoints -----------------------------------------------------------


@dataclass(eq=False)
class Checkpoint:
    spec: ModelSpec
    params: dict  # name -> float32 ndarray, in architecture order
    provenance: dict

    def to_bytes(self) -> bytes:
        manifest, offset, chunks = [], 0, []
        for name, arr in self.params.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            manifest.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
            chunks.append(a.tobytes())
            offset += a.nbytes
        header = json.dumps(
            {"model": self.spec.to_dict(), "provenance": self.provenance, "parameters": manifest},
            sort_keys=True, separators=(",", ":"),
        ).encode("utf-8")
        return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def parameters(self, requires_grad: bool = False) -> Parameters:
        return Parameters.from_arrays({k: v.copy() for k, v in self.params.items()}, requires_grad)

    def same_as(self, other: "Checkpoint") -> bool:
        return self.to_bytes() == other.to_bytes()


def _freeze(arrays: dict) -> dict:
    out = {}
    for k, v in arrays.items():
        a = np.array(v, dtype=np.float32)
        a.setflags(write=False)
        out[k] = a
    return out


def make_checkpoint(spec: ModelSpec, params: Parameters, provenance: dict) -> Checkpoint:
    # JSON round trip normalizes tuples to lists so load(save(x)) compares equal
    return Checkpoint(spec, _freeze(params.arrays()), json.loads(json.dumps(provenance)))


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 16:
        raise FormatError(f"checkpoint truncated: {len(buf)} bytes")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack("<IQ", buf[4:16])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if 16 + hlen > len(buf):
        raise FormatError("checkpoint header truncated")
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}") from None
    payload = buf[16 + hlen:]
    params = {}
    for entry in header["parameters"]:
        start, count = entry["offset"], entry["count"]
        if start + 4 * count > len(payload):
            raise FormatError(f"checkpoint payload truncated at parameter {entry['name']}")
        a = np.frombuffer(payload, dtype="<f4", count=count, offset=start).astype(np.float32)
        params[entry["name"]] = a.reshape(entry["shape"])
    expected = sum(4 * e["count"] for e in header["parameters"])
    if len(payload) != expected:
        raise FormatError(f"checkpoint payload is {len(payload)} bytes, manifest says {expected}")
    return Checkpoint(ModelSpec.from_dict(header["model"]), _freeze(params), header["provenance"])


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = ckpt.to_bytes()
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())


# -- training loops --------------------------------------------------------


def _flip(images: np.ndarray, seed: int, epoch: int, batch: int) -> np.ndarray:
    mask = np.random.default_rng([seed, epoch, batch, 1]).random(len(images)) < 0.5
    out = images.copy()
    out[mask] = out[mask][..., ::-1]
    return out


def _fit(params: Parameters, id_train: LabeledDataset, config: TrainConfig, lr0: float,
         batch_loss: Callable, on_step: Optional[StepCallback]) -> None:
    """Shared epoch/batch loop: forward via ``batch_loss``, backward, SGD with cosine decay."""
    state = OptimizerState.zeros(params)
    weights = {name: t.data for name, t in params}
    n_batches = math.ceil(len(id_train) / config.batch_size)
    total = max(config.epochs * n_batches, 1)
    step = 0
    for epoch in range(config.epochs):
        batches = make_batches(id_train, BatchPlan(config.batch_size, config.seed, True, epoch))
        for b, idx in enumerate(batches):
            params.zero_grad()
            x = take_batch(id_train, idx)
            if config.flip:
                x = _flip(x, config.seed, epoch, b)
            try:
                loss = batch_loss(x, idx, step)
            except NumericError as exc:
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}: {exc}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            loss.backward()
            sgd_step(weights, {name: t.grad for name, t in params}, state,
                     cosine_lr(step, total, lr0), config.momentum, config.weight_decay)
            if on_step is not None:
                on_step(step, value)
            step += 1


def _provenance(kind: str, config: TrainConfig, datasets: dict, parent: Optional[str] = None, **extra) -> dict:
    prov = {
        "kind": kind,
        "config": config.to_dict(),
        "datasets": datasets,
        "epochs": config.epochs,
        "seed": config.seed,
        "workers": WORKERS,
        "parent": parent,
    }
    prov.update(extra)
    return prov


def train_model(spec: ModelSpec, config: TrainConfig, id_train: LabeledDataset,
                init: Optional[Checkpoint] = None, on_step: Optional[StepCallback] = None) -> Checkpoint:
    """Train with hard or label-smoothed targets.

    ``init`` continues from an existing checkpoint instead of a fresh seeded init.
    """
    loss_spec = config.loss
    if loss_spec.kind not in ("hard", "label_smoothing"):
        raise UsageError(f"train_model handles hard/label_smoothing losses, got {loss_spec.kind!r}")
    params = init.parameters(requires_grad=True) if init is not None else init_model(spec, config.seed)
    labels = id_train.labels
    k = spec.num_classes

    def batch_loss(x, idx, step):
        logp = log_softmax(forward(params, spec, x))
        q = st.one_hot(labels[idx], k, dtype=logp.dtype)
        if loss_spec.kind == "hard":
            return st.soft_cross_entropy(q, logp)
        return st.label_smoothing_loss(q, logp, loss_spec.alpha)

    _fit(params, id_train, config, config.lr0, batch_loss, on_step)
    parent = init.hash if init is not None else None
    return make_checkpoint(spec, params, _provenance("train", config, {"id_train": id_train.name}, parent))


def finetune_oe(teacher: Checkpoint, id_train: LabeledDataset, ood_train: LabeledDataset,
                oe: st.OEConfig, epochs: int, config: TrainConfig,
                on_step: Optional[StepCallback] = None) -> Checkpoint:
    """Continue training ``teacher`` with the outlier-exposure objective.

    Fresh optimizer state; cosine schedule from lr0 / 10 over the fine-tune
    steps. Every ID batch is paired with an OOD batch of the same size, the OOD
    order cycling on its own seeded permutation.
    """
    if ood_train.role != OUT_OF_DISTRIBUTION:
        raise UsageError(f"{ood_train.name} is not an OOD dataset")
    if len(ood_train) == 0:
        raise UsageError("outlier exposure needs a nonempty OOD training set")
    cfg = replace(config, epochs=epochs, loss=LossSpec("oe", lam=oe.lam, ref=ood_train.name))
    spec = teacher.spec
    params = teacher.parameters(requires_grad=True)
    labels = id_train.labels
    ood_seed = cfg.seed + 7919
    ood_queue: list = []
    cycle = 0

    def next_ood(size):
        nonlocal cycle
        idx = []
        while len(idx) < size:
            if not ood_queue:
                ood_queue.extend(make_batches(len(ood_train), BatchPlan(size, ood_seed, True, cycle)))
                cycle += 1
            idx.extend(ood_queue.pop(0).tolist())
        return take_batch(ood_train, np.asarray(idx[:size]))

    def batch_loss(x, idx, step):
        logp_id = log_softmax(forward(params, spec, x))
        xo = next_ood(cfg.batch_size)
        logp_ood = log_softmax(forward(params, spec, xo)) if oe.lam > 0 else None
        return st.outlier_exposure_loss(labels[idx], logp_id, logp_ood, oe.lam)

    _fit(params, id_train, cfg, cfg.lr0 / 10.0, batch_loss, on_step)
    prov = _provenance("oe", cfg, {"id_train": id_train.name, "ood_train": ood_train.name}, teacher.hash)
    return make_checkpoint(spec, params, prov)


def distill(teacher: Checkpoint, id_train: LabeledDataset, alpha: float, temperature: float,
            config: TrainConfig, student_spec: Optional[ModelSpec] = None,
            on_step: Optional[StepCallback] = None) -> Checkpoint:
    """Train a fresh student on ID data against the frozen teacher's soft predictions."""
    spec = student_spec or teacher.spec
    if spec.num_classes != teacher.spec.num_classes:
        raise UsageError(f"student has {spec.num_classes} classes, teacher has {teacher.spec.num_classes}")
    cfg = replace(config, loss=LossSpec("distill", alpha=alpha, temperature=temperature, ref=teacher.hash))
    teacher_params = teacher.parameters(requires_grad=False)
    params = init_model(spec, cfg.seed)
    labels = id_train.labels
    k = spec.num_classes

    def batch_loss(x, idx, step):
        # teacher sees the un-augmented batch
        raw = id_train.images[idx]
        pt = softmax_np(forward(teacher_params, teacher.spec, raw).data)
        logp = log_softmax(forward(params, spec, x))
        q = st.one_hot(labels[idx], k, dtype=logp.dtype)
        return st.distillation_loss(q, logp, pt, alpha, temperature)

    _fit(params, id_train, cfg, cfg.lr0, batch_loss, on_step)
    return make_checkpoint(spec, params, _provenance("distill", cfg, {"id_train": id_train.name}, teacher.hash))


def logits_of(ckpt: Checkpoint, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    return predict_logits(ckpt.parameters(), ckpt.spec, images, batch_size)
