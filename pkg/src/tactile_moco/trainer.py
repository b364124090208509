"""Pretraining loop for the four methods, SGD, cosine schedule and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import encoder as E
from . import objectives as O
from . import tensor as T
from .dataio import AugmentConfig, GraspSample, augment_pair, make_diff, sample_stream
from .errors import ConfigError, ContractError, FormatError
from .tensor import Tensor

logger = logging.getLogger(__name__)

METHODS = ("moco", "memory_bank", "triplet", "autoencoder")
MAGIC = b"SSGR"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Pretraining settings. Defaults are the desk-scale recipe."""

    method: str = "moco"
    epochs: int = 50
    batch_size: int = 32
    lr_max: float = 5e-2  # desk-scale value; paper() restores 1e-2
    lr_min: float = 1e-6
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    contrast: O.ContrastConfig = field(default_factory=O.ContrastConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: E.EncoderDescriptor = field(default_factory=E.EncoderDescriptor)
    n_neg: int = 256
    margin: float = 1.0
    seed: int = 0
    snapshot_every: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method {self.method!r} is not one of {', '.join(METHODS)}")
        if self.epochs < 1:
            raise ConfigError(f"epochs={self.epochs} must be >= 1")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size={self.batch_size} must be >= 2")
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if not 0 <= self.sgd_momentum < 1 or self.weight_decay < 0:
            raise ConfigError(f"sgd_momentum={self.sgd_momentum}, weight_decay={self.weight_decay}")
        if self.encoder.input_size != self.augment.crop_to:
            raise ConfigError(
                f"encoder.input_size={self.encoder.input_size} must equal augment.crop_to={self.augment.crop_to}"
            )
        if self.n_neg < 1 or self.margin < 0 or self.snapshot_every < 0:
            raise ConfigError(f"n_neg={self.n_neg}, margin={self.margin}, snapshot_every={self.snapshot_every}")

    @classmethod
    def paper(cls, method: str = "moco", **overrides) -> TrainConfig:
        base = dict(
            method=method,
            epochs=200,
            batch_size=200,
            lr_max=1e-2,
            contrast=O.ContrastConfig(capacity=5800),
            augment=AugmentConfig.paper(),
            encoder=E.EncoderDescriptor(input_size=224),
        )
        return cls(**{**base, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        nested = {"contrast": O.ContrastConfig, "augment": AugmentConfig, "encoder": E.EncoderDescriptor}
        kwargs = {}
        allowed = {f.name for f in fields(cls)}
        for k, v in d.items():
            if k not in allowed:
                raise ConfigError(f"unknown config key {k!r}")
            if k in nested:
                if not isinstance(v, dict):
                    raise ConfigError(f"config key {k!r} must be an object")
                sub_allowed = {f.name for f in fields(nested[k])}
                for sk in v:
                    if sk not in sub_allowed:
                        raise ConfigError(f"unknown config key {k}.{sk!r}")
                v = E.EncoderDescriptor.from_dict(v) if k == "encoder" else nested[k](**v)
            kwargs[k] = v
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# schedule and optimiser --------------------------------------------------------


def cosine_lr(t: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay without restarts from ``lr_max`` at ``t=0`` to ``lr_min`` at ``t=total``."""
    if total < 1:
        raise ContractError(f"total steps {total} must be >= 1")
    if not 0 <= t <= total:
        raise ContractError(f"step {t} outside [0, {total}]")
    if t == 0:
        return lr_max
    if t == total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


def sgd_step(
    params: dict[str, Tensor],
    lr: float,
    momentum: float,
    weight_decay: float,
    velocity: dict[str, np.ndarray],
) -> None:
    """``v <- momentum * v + g + wd * w``; ``w <- w - lr * v`` for every parameter."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    for name, p in params.items():
        dt = p.dtype.type
        g = p.grad
        if weight_decay:
            g = g + dt(weight_decay) * p.data
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p.data)
        v *= dt(momentum)
        v += g
        p.data -= dt(lr) * v


# checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to resume training or extract features."""

    config: TrainConfig
    epoch: int
    tensors: dict[str, np.ndarray]  # q.*, k.*, d.* (decoder), state.*
    velocity: dict[str, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def descriptor(self) -> E.EncoderDescriptor:
        return self.config.encoder

    @property
    def method(self) -> str:
        return self.config.method

    @property
    def config_digest(self) -> str:
        return self.config.digest()

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def query_params(self) -> E.EncoderParams:
        return E.EncoderParams(self.descriptor, {k: Tensor(v) for k, v in self.group("q").items()})


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF or arr.ndim > 0xFF:
        raise ContractError(f"tensor {name!r} cannot be encoded")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``ckpt`` in the SSGR v1 layout (atomically, via a temp file).

    ``magic | u32 version | u32 count | tensors | u8 has_optimizer | u32 len | json meta``.
    Each tensor is ``u16 name_len | name | u8 rank | u32 dims | f32 LE payload``.
    Velocity buffers are stored as ``opt.*`` tensors.
    """
    entries = dict(ckpt.tensors)
    if ckpt.velocity is not None:
        entries.update({f"opt.{k}": v for k, v in ckpt.velocity.items()})
    meta = {**ckpt.meta, "epoch": ckpt.epoch, "config": ckpt.config.to_dict(), "config_digest": ckpt.config_digest}
    buf = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    buf += [_pack_tensor(k, np.asarray(v)) for k, v in entries.items()]
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.append(struct.pack("<BI", 1 if ckpt.velocity is not None else 0, len(meta_raw)))
    buf.append(meta_raw)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(buf))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, count = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    entries = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: corrupt tensor name") from None
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64))
        entries[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
    has_opt, mlen = r.unpack("<BI")
    try:
        meta = json.loads(r.take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError(f"{path}: corrupt metadata block") from None
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    velocity = {k[4:]: v for k, v in entries.items() if k.startswith("opt.")}
    if bool(has_opt) != bool(velocity):
        raise FormatError(f"{path}: optimizer flag disagrees with stored tensors")
    tensors = {k: v for k, v in entries.items() if not k.startswith("opt.")}
    try:
        config = TrainConfig.from_dict(meta.pop("config"))
        epoch = int(meta.pop("epoch"))
        digest = meta.pop("config_digest")
    except (KeyError, ConfigError, TypeError) as exc:
        raise FormatError(f"{path}: bad metadata ({exc})") from None
    if digest != config.digest():
        raise FormatError(f"{path}: config digest mismatch")
    return Checkpoint(config, epoch, tensors, velocity if has_opt else None, meta)


# training loop ---------------------------------------------------------------


@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    loss: float

    def line(self) -> str:
        return f"{self.epoch},{self.step},{self.lr!r},{self.loss!r}"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list[StepRecord]
    enqueues: dict[int, int] = field(default_factory=dict)

    def epoch_losses(self) -> dict[int, float]:
        by_epoch: dict[int, list[float]] = {}
        for r in self.records:
            by_epoch.setdefault(r.epoch, []).append(r.loss)
        return {e: float(np.mean(v)) for e, v in sorted(by_epoch.items())}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, last_good_epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}; last good epoch {last_good_epoch}")
        self.epoch, self.step, self.last_good_epoch = epoch, step, last_good_epoch


def write_metrics(path, records: list[StepRecord]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,step,lr,loss\n")
        for r in records:
            fh.write(r.line() + "\n")


def read_metrics(path) -> list[StepRecord]:
    with open(path) as fh:
        if fh.readline().strip() != "epoch,step,lr,loss":
            raise FormatError(f"{path}: bad metrics header")
        out = []
        for line in fh:
            e, s, lr, loss = line.strip().split(",")
            out.append(StepRecord(int(e), int(s), float(lr), float(loss)))
    return out


class _Model:
    """Mutable training state for one method."""

    def __init__(self, cfg: TrainConfig, n_train: int):
        self.cfg = cfg
        desc = cfg.encoder
        self.theta_q = E.init_encoder(desc, cfg.seed)
        self.theta_k = None
        self.queue = None
        self.bank = None
        self.decoder: dict[str, Tensor] = {}
        if cfg.method == "moco":
            self.theta_k = self.theta_q.clone(requires_grad=False)
            self.queue = O.DictionaryQueue(cfg.contrast.capacity, desc.out_dim)
        elif cfg.method == "memory_bank":
            self.bank = O.MemoryBank(n_train, desc.out_dim, seed=cfg.seed + 104729)
        elif cfg.method == "autoencoder":
            heads = [k for k in self.theta_q.tensors if k.startswith("head.")]
            for k in heads:
                del self.theta_q.tensors[k]
            self.decoder = E.init_params(E.decoder_shapes(desc), cfg.seed + 7919)
        self.velocity: dict[str, np.ndarray] = {}

    def trainable(self) -> dict[str, Tensor]:
        out = {f"q.{k}": v for k, v in self.theta_q.items()}
        out.update({f"d.{k}": v for k, v in self.decoder.items()})
        return out

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.trainable().items()}
        if self.theta_k is not None:
            out.update({f"k.{k}": v.data.copy() for k, v in self.theta_k.items()})
        if self.queue is not None:
            out["state.queue"] = self.queue.storage.copy()
        if self.bank is not None:
            out["state.bank"] = self.bank.rows.copy()
        return out

    def meta(self) -> dict:
        m = {"format": "tactile-moco", "rng": "streams derived from (seed, epoch, sample id / step)"}
        if self.queue is not None:
            m["queue"] = {"write_head": self.queue.write_head, "filled": self.queue.filled}
        return m

    def restore(self, ckpt: Checkpoint) -> None:
        params = self.trainable()
        for k, p in params.items():
            if k not in ckpt.tensors or ckpt.tensors[k].shape != p.shape:
                raise FormatError(f"checkpoint lacks a matching tensor {k!r}")
            p.data[...] = ckpt.tensors[k]
        if self.theta_k is not None:
            for k, p in self.theta_k.items():
                p.data[...] = ckpt.tensors[f"k.{k}"]
        if self.queue is not None:
            self.queue.storage[...] = ckpt.tensors["state.queue"]
            self.queue.write_head = int(ckpt.meta["queue"]["write_head"])
            self.queue.filled = int(ckpt.meta["queue"]["filled"])
        if self.bank is not None:
            self.bank.rows[...] = ckpt.tensors["state.bank"]
        self.velocity = {k: v.copy() for k, v in (ckpt.velocity or {}).items()}

    def checkpoint(self, epoch: int) -> Checkpoint:
        vel = {k: v.copy() for k, v in self.velocity.items()} if self.velocity else None
        return Checkpoint(self.cfg, epoch, self.state_tensors(), vel, self.meta())


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 0x0BA7C4])).permutation(n)


def _batch_views(diffs, ids, batch_idx, cfg: TrainConfig, epoch: int):
    va, vb = [], []
    for i in batch_idx:
        pair = augment_pair(diffs[i], cfg.augment, sample_stream(cfg.seed, epoch, ids[i]))
        va.append(pair.view_a)
        vb.append(pair.view_b)
    return Tensor(np.stack(va)), Tensor(np.stack(vb))


def _step_loss(model: _Model, cfg: TrainConfig, va: Tensor, vb: Tensor, batch_idx, epoch: int, step: int):
    """Loss for one batch, or ``None`` while the key queue is still warming up."""
    if cfg.method == "moco":
        with T.no_grad():
            k = E.forward(model.theta_k, vb).projected.data
        if not model.queue.is_full:
            return None, k
        q = E.forward(model.theta_q, va).projected
        return O.infonce_loss(q, k, model.queue, cfg.contrast.temperature), k
    if cfg.method == "memory_bank":
        feats = E.forward(model.theta_q, va).projected
        stream = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, step, 0x4E6]))
        return O.memory_bank_loss(feats, batch_idx, model.bank, cfg.contrast.temperature, cfg.n_neg, stream), None
    if cfg.method == "triplet":
        B = va.shape[0]
        emb = E.forward(model.theta_q, T.concat([va, vb], axis=0)).projected
        anchor = T.take_rows(emb, np.arange(B))
        positive = T.take_rows(emb, np.arange(B, 2 * B))
        negative = T.take_rows(emb, B + (np.arange(B) + 1) % B)  # second view of the next image
        return O.triplet_loss(anchor, positive, negative, cfg.margin), None
    feat = E.backbone(model.theta_q, va)
    recon = E.decode(model.decoder, feat, cfg.encoder)
    return O.autoencoder_loss(va, recon), None


def train(
    dataset: list[GraspSample],
    cfg: TrainConfig,
    *,
    resume: Checkpoint | None = None,
    stop_after_epoch: int | None = None,
    snapshot_dir=None,
) -> TrainResult:
    """Pretrain an encoder on ``dataset`` with ``cfg.method``.

    All randomness is derived from ``cfg.seed`` and the epoch/step counters, so
    a run resumed from a checkpoint replays the uninterrupted run exactly.
    """
    n = len(dataset)
    if n == 0:
        raise ContractError("empty dataset")
    if cfg.method == "moco" and cfg.contrast.capacity >= n:
        raise ConfigError(
            f"queue capacity K={cfg.contrast.capacity} must be smaller than the training set (n={n}) "
            "so the queue cannot hold keys of the current anchors"
        )
    steps_per_epoch = n // cfg.batch_size
    if steps_per_epoch < 1:
        raise ConfigError(f"batch_size={cfg.batch_size} exceeds dataset size {n}")
    total = cfg.epochs * steps_per_epoch
    diffs = [make_diff(s) for s in dataset]
    ids = [s.id for s in dataset]

    model = _Model(cfg, n)
    start = 1
    if resume is not None:
        if resume.config_digest != cfg.digest():
            raise ConfigError("checkpoint was produced with a different config")
        model.restore(resume)
        start = resume.epoch + 1
    last = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)

    params = model.trainable()
    records: list[StepRecord] = []
    enqueues: dict[int, int] = {}
    last_good = start - 1
    for epoch in range(start, last + 1):
        order = _epoch_order(cfg.seed, epoch, n)
        enq = 0
        for s in range(steps_per_epoch):
            step = (epoch - 1) * steps_per_epoch + s
            batch_idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            va, vb = _batch_views(diffs, ids, batch_idx, cfg, epoch)
            lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min)
            loss, keys = _step_loss(model, cfg, va, vb, batch_idx, epoch, step)
            if loss is not None:
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(epoch, step, last_good)
                for p in params.values():
                    p.zero_grad()
                loss.backward()
                sgd_step(params, lr, cfg.sgd_momentum, cfg.weight_decay, model.velocity)
                records.append(StepRecord(epoch, step, lr, value))
                if cfg.method == "moco":
                    E.momentum_update(model.theta_k, model.theta_q, cfg.contrast.momentum)
            if keys is not None:
                model.queue.enqueue(keys)
                enq += 1
        enqueues[epoch] = enq
        last_good = epoch
        ep_losses = [r.loss for r in records if r.epoch == epoch]
        logger.info("epoch %d lr %.3g loss %s", epoch, lr, f"{np.mean(ep_losses):.4f}" if ep_losses else "warm-up")
        if snapshot_dir is not None and cfg.snapshot_every and epoch % cfg.snapshot_every == 0:
            save_checkpoint(model.checkpoint(epoch), Path(snapshot_dir) / f"{cfg.method}_epoch{epoch:04d}.ckpt")
    return TrainResult(model.checkpoint(last), records, enqueues)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
