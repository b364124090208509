"""Frozen-feature extraction and the kNN / linear SVM / MLP probes."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoder as E
from . import tensor as T
from .dataio import GraspSample, make_diff, preprocess_eval
from .errors import ConfigError, ContractError, FormatError
from .tensor import Tensor
from .trainer import Checkpoint, cosine_lr, sgd_step

FEATURE_KINDS = ("backbone", "projected")
PROBES = ("knn", "svm", "mlp")


@dataclass
class FeatureSet:
    features: np.ndarray  # n x d
    labels: np.ndarray  # n, values in {0, 1}
    ids: list[str]
    feature_kind: str = "backbone"

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise FormatError(f"features must be n x d, got {self.features.shape}")
        n = self.features.shape[0]
        if len(self.labels) != n or len(self.ids) != n:
            raise FormatError(f"{n} feature rows, {len(self.labels)} labels, {len(self.ids)} ids")
        if np.isnan(self.features).any():
            raise FormatError("feature matrix contains NaN")
        if self.feature_kind not in FEATURE_KINDS:
            raise FormatError(f"feature_kind {self.feature_kind!r} not in {FEATURE_KINDS}")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ProbeConfig:
    probe: str = "knn"
    knn_k: int | None = None  # default floor(sqrt(n_train))
    knn_metric: str = "euclidean"
    svm_c: float = 1.0
    svm_iters: int = 2000
    mlp_hidden: int = 128
    mlp_epochs: int = 100
    mlp_lr: float = 1e-2
    mlp_batch: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.probe not in PROBES:
            raise ConfigError(f"probe {self.probe!r} not in {PROBES}")
        if self.knn_k is not None and self.knn_k < 1:
            raise ConfigError(f"knn_k={self.knn_k} must be >= 1")
        if self.knn_metric not in ("euclidean", "cosine"):
            raise ConfigError(f"knn_metric {self.knn_metric!r} not in ('euclidean', 'cosine')")
        if self.svm_c <= 0 or self.mlp_hidden < 1 or self.mlp_epochs < 0:
            raise ConfigError(f"svm_c={self.svm_c}, mlp_hidden={self.mlp_hidden}, mlp_epochs={self.mlp_epochs}")


def default_k(n_train: int) -> int:
    return max(1, math.isqrt(n_train))


# extraction -------------------------------------------------------------------


def extract_features(
    ckpt: Checkpoint, dataset: list[GraspSample], feature_kind: str = "backbone", batch_size: int = 64
) -> FeatureSet:
    """Embed every sample (resize + centre crop, no randomness) with the query encoder."""
    if feature_kind not in FEATURE_KINDS:
        raise ConfigError(f"feature_kind {feature_kind!r} not in {FEATURE_KINDS}")
    cfg = ckpt.config
    if cfg.encoder.input_size != cfg.augment.crop_to:
        raise ConfigError("checkpoint encoder input size does not match its crop size")
    params = ckpt.query_params()
    if feature_kind == "projected" and "head.fc1.w" not in params.tensors:
        raise ConfigError(f"{ckpt.method} checkpoints have no projection head")
    rows = []
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            chunk = dataset[start : start + batch_size]
            batch = Tensor(np.stack([preprocess_eval(make_diff(s), cfg.augment) for s in chunk]))
            if batch.shape[2] != cfg.encoder.input_size:
                raise ConfigError(f"preprocessed input {batch.shape[2]}px vs encoder {cfg.encoder.input_size}px")
            feat = E.backbone(params, batch)
            out = E.project(params, feat) if feature_kind == "projected" else feat
            rows.append(out.data.astype(np.float64))
    return FeatureSet(np.concatenate(rows), [s.label for s in dataset], [s.id for s in dataset], feature_kind)


def save_features(fs: FeatureSet, path) -> None:
    d = fs.features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", *[f"f{j}" for j in range(d)]])
        for sid, lab, row in zip(fs.ids, fs.labels, fs.features):
            w.writerow([sid, int(lab), *[repr(float(v)) for v in row]])


def load_features(path, feature_kind: str = "backbone") -> FeatureSet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"feature file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["id", "label"] or header[2:] != [f"f{j}" for j in range(len(header) - 2)]:
            raise FormatError(f"{path}: header must be id,label,f0..f{{d-1}}")
        ids, labels, feats = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                labels.append(int(row[1]))
                feats.append([float(v) for v in row[2:]])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric field") from None
            ids.append(row[0])
    return FeatureSet(np.array(feats, dtype=np.float64).reshape(len(ids), len(header) - 2), labels, ids, feature_kind)


# probes ----------------------------------------------------------------------


def _check_pair(train: FeatureSet, test: FeatureSet) -> None:
    if train.features.shape[1] != test.features.shape[1]:
        raise ContractError(f"train has {train.features.shape[1]}-d features, test {test.features.shape[1]}-d")


def _check_two_classes(train: FeatureSet) -> None:
    if len(np.unique(train.labels)) < 2:
        raise ContractError("training set contains a single class")


def _accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(pred == labels)) if len(labels) else 0.0


def knn_predict(train: FeatureSet, test: FeatureSet, k: int, metric: str = "euclidean") -> tuple[np.ndarray, float]:
    """Majority vote of the ``k`` nearest training rows.

    A vote tie goes to whichever tied class owns the nearest neighbour. The
    training row itself is not excluded when ``test`` overlaps ``train``.
    """
    _check_pair(train, test)
    if k > len(train):
        raise ConfigError(f"k={k} exceeds the {len(train)} training rows")
    if k < 1:
        raise ConfigError(f"k={k} must be >= 1")
    a, b = train.features, test.features
    if metric == "cosine":
        a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    classes = np.unique(train.labels)
    preds = np.empty(len(test), dtype=np.int64)
    chunk = max(1, 2**22 // max(a.size, 1))  # bounds the broadcast block to ~32 MB
    for start in range(0, len(test), chunk):
        bb = b[start : start + chunk]
        # exact squared distances, accumulated per row for order independence
        d2 = ((bb[:, None, :] - a[None, :, :]) ** 2).sum(axis=2)
        nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
        for r, idx in enumerate(nn):
            votes = train.labels[idx]
            counts = np.array([(votes == c).sum() for c in classes])
            tied = classes[counts == counts.max()]
            if len(tied) == 1:
                preds[start + r] = tied[0]
            else:
                preds[start + r] = next(v for v in votes if v in tied)
    return preds, _accuracy(preds, test.labels)


def _standardize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (train - mu) / sd, (test - mu) / sd


def fit_linear_svm(x: np.ndarray, y: np.ndarray, c: float = 1.0, iters: int = 2000) -> tuple[np.ndarray, float]:
    """Full-batch subgradient descent on ``lam/2 |w|^2 + mean(hinge)``, ``lam = 1/(c n)``.

    Labels are ``{0, 1}``; steps shrink as ``1/sqrt(t)`` and the iterate with
    the lowest objective is returned.
    """
    n, d = x.shape
    s = np.where(y > 0, 1.0, -1.0)
    lam = 1.0 / (c * n)
    w, b = np.zeros(d), 0.0
    best = (np.inf, w.copy(), b)
    for t in range(1, iters + 1):
        margin = s * (x @ w + b)
        obj = 0.5 * lam * (w @ w) + np.maximum(0.0, 1.0 - margin).mean()
        if obj < best[0]:
            best = (obj, w.copy(), b)
        active = margin < 1.0
        gw = lam * w - (s[active, None] * x[active]).sum(axis=0) / n
        gb = -s[active].sum() / n
        eta = 1.0 / math.sqrt(t)
        w = w - eta * gw
        b = b - eta * gb
    margin = s * (x @ w + b)
    obj = 0.5 * lam * (w @ w) + np.maximum(0.0, 1.0 - margin).mean()
    if obj < best[0]:
        best = (obj, w, b)
    return best[1], best[2]


def svm_probe(train: FeatureSet, test: FeatureSet, cfg: ProbeConfig) -> float:
    """Linear SVM on standardised features; returns test accuracy."""
    _check_pair(train, test)
    _check_two_classes(train)
    xtr, xte = _standardize(train.features, test.features)
    w, b = fit_linear_svm(xtr, train.labels, cfg.svm_c, cfg.svm_iters)
    return _accuracy((xte @ w + b > 0).astype(np.int64), test.labels)


def _mlp_logits(params: dict[str, Tensor], x: Tensor) -> Tensor:
    h = T.relu(T.linear(x, params["fc1.w"], params["fc1.b"]))
    return T.linear(h, params["fc2.w"], params["fc2.b"])


def mlp_probe(train: FeatureSet, test: FeatureSet, cfg: ProbeConfig) -> float:
    """One-hidden-layer softmax classifier trained with SGD on standardised features."""
    _check_pair(train, test)
    _check_two_classes(train)
    xtr, xte = _standardize(train.features, test.features)
    rng = np.random.default_rng(cfg.seed)
    d = xtr.shape[1]
    params = {}
    for name, shape in (("fc1", (cfg.mlp_hidden, d)), ("fc2", (2, cfg.mlp_hidden))):
        bound = math.sqrt(6.0 / shape[1])
        params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, dtype=np.float64)
        params[f"{name}.b"] = Tensor(np.zeros(shape[0]), requires_grad=True, dtype=np.float64)
    velocity: dict[str, np.ndarray] = {}
    n = len(xtr)
    bs = min(cfg.mlp_batch, n)
    steps = n // bs
    total = max(cfg.mlp_epochs * steps, 1)
    for epoch in range(cfg.mlp_epochs):
        order = rng.permutation(n)
        for s in range(steps):
            idx = order[s * bs : (s + 1) * bs]
            loss = T.cross_entropy(_mlp_logits(params, Tensor(xtr[idx], dtype=np.float64)), train.labels[idx])
            for p in params.values():
                p.zero_grad()
            loss.backward()
            sgd_step(params, cosine_lr(epoch * steps + s, total, cfg.mlp_lr, cfg.mlp_lr * 1e-2), 0.9, 0.0, velocity)
    with T.no_grad():
        logits = _mlp_logits(params, Tensor(xte, dtype=np.float64)).data
    return _accuracy(logits.argmax(axis=1), test.labels)


def run_probe(train: FeatureSet, test: FeatureSet, cfg: ProbeConfig) -> float:
    if cfg.probe == "knn":
        k = cfg.knn_k if cfg.knn_k is not None else default_k(len(train))
        return knn_predict(train, test, k, cfg.knn_metric)[1]
    if cfg.probe == "svm":
        return svm_probe(train, test, cfg)
    return mlp_probe(train, test, cfg)


# reporting -------------------------------------------------------------------


def _pct(acc: float) -> str:
    return f"{acc * 100:.2f}%"


def report(results: list[tuple[str, str, float]]) -> str:
    """Methods x probes accuracy table; ``*`` marks the best cell(s) per column."""
    if not results:
        raise ContractError("no results to report")
    methods: list[str] = []
    probes: list[str] = []
    cells: dict[tuple[str, str], float] = {}
    for method, probe, acc in results:
        if method not in methods:
            methods.append(method)
        if probe not in probes:
            probes.append(probe)
        cells[(method, probe)] = acc
    probes.sort(key=lambda p: PROBES.index(p) if p in PROBES else len(PROBES))
    best = {p: max(v for (m, q), v in cells.items() if q == p) for p in probes}

    def cell(m, p):
        if (m, p) not in cells:
            return "-"
        v = cells[(m, p)]
        return _pct(v) + ("*" if v == best[p] else "")

    header = ["model", *[p.upper() for p in probes]]
    body = [[m, *[cell(m, p) for p in probes]] for m in methods]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(v.ljust(widths[i]) if i == 0 else v.rjust(widths[i]) for i, v in enumerate(r)) for r in [header, *body]]
    return "\n".join(lines) + "\n"


def report_csv(results: list[tuple[str, str, float]]) -> str:
    if not results:
        raise ContractError("no results to report")
    lines = ["method,probe,accuracy,percent"]
    lines += [f"{m},{p},{a!r},{a * 100:.2f}" for m, p, a in results]
    return "\n".join(lines) + "\n"
