"""Model inference: attribute an observed embedding to a pool model and predict model attributes."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import EmbeddingBatch, EmbeddingRecord, NormalizationParams, as_matrix, minmax_fit, minmax_transform
from .errors import ConfigError, DataError, LengthMismatch
from .zoo import deserialize_weights, serialize_weights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AuxiliaryClassifierSpec:
    input_length: int
    classes: tuple  # ((model_id, layer_id), ...)
    hidden: tuple = (512, 256, 128, 64, 32)
    train_size: int = 0  # per class; 0 = use everything provided
    epochs: int = 40
    batch_size: int = 256
    lr: float = 1e-3
    patience: int = 4
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(tuple(c) if not isinstance(c, str) else tuple(c.split(":", 1))
                                                  for c in self.classes))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_length <= 0:
            raise ConfigError("input length must be positive")
        if len(self.classes) < 2:
            raise ConfigError("need at least two classes")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("duplicate class labels")
        if any(h <= 0 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")

    @property
    def labels(self) -> list:
        return [f"{m}:{l}" for m, l in self.classes]

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["classes"] = [list(c) for c in self.classes]
        d["hidden"] = list(self.hidden)
        return d


class MLP(nn.Module):
    def __init__(self, n_in: int, hidden: Sequence[int], n_out: int):
        super().__init__()
        layers, prev = [], n_in
        for h in hidden:
            layers += [nn.Linear(prev, h), nn.ReLU()]
            prev = h
        layers.append(nn.Linear(prev, n_out))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


def _stratified_split(y: np.ndarray, fraction: float, rng) -> np.ndarray:
    """Boolean mask selecting ``fraction`` of every class."""
    mask = np.zeros(len(y), dtype=bool)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        k = int(round(fraction * len(idx)))
        mask[rng.choice(idx, size=k, replace=False)] = True
    return mask


def block_shuffle(y: np.ndarray, blocks: np.ndarray, k: int, rng) -> np.ndarray:
    """Shuffled-label control: one random label per (true class, block) group.

    Blocks are subjects when known (single samples otherwise).  Within each true
    class the block labels are dealt round-robin after a random permutation, so
    shuffled labels are balanced and carry no information about the true class,
    while held-out accuracy averages over many blocks instead of a handful of
    class clusters.
    """
    out = np.empty_like(y)
    offset = int(rng.integers(k))
    for c in np.unique(y):
        in_c = y == c
        names = np.unique(blocks[in_c])
        labels = (np.arange(len(names)) + offset) % k
        offset += len(names)
        lookup = dict(zip(rng.permutation(names).tolist(), labels.tolist()))
        out[in_c] = [lookup[b] for b in blocks[in_c].tolist()]
    return out


def _train_mlp(x_tr, y_tr, x_val, y_val, n_classes, hidden, epochs, batch_size, lr, patience, seed):
    """Adam + cross-entropy with early stopping on validation accuracy (best weights restored)."""
    torch.manual_seed(seed)
    net = MLP(x_tr.shape[1], hidden, n_classes)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    xt = torch.from_numpy(x_tr.astype(np.float32))
    yt = torch.from_numpy(y_tr.astype(np.int64))
    xv = torch.from_numpy(x_val.astype(np.float32))
    yv = torch.from_numpy(y_val.astype(np.int64))
    gen = torch.Generator().manual_seed(seed)
    best, best_state, stale, history = -1.0, None, 0, []
    for epoch in range(epochs):
        net.train()
        perm = torch.randperm(len(xt), generator=gen)
        total = 0.0
        for i in range(0, len(xt), batch_size):
            idx = perm[i:i + batch_size]
            loss = F.cross_entropy(net(xt[idx]), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        net.eval()
        with torch.no_grad():
            val_acc = float((net(xv).argmax(1) == yv).float().mean()) if len(xv) else 0.0
        history.append({"epoch": epoch, "loss": total / len(xt), "val_acc": val_acc})
        if val_acc > best:
            best, stale = val_acc, 0
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
        else:
            stale += 1
            if stale >= patience:
                break
    net.load_state_dict(best_state)
    net.eval()
    return net, history


def _softmax_scores(net: nn.Module, x: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        logits = net(torch.from_numpy(np.asarray(x, dtype=np.float32))).double()
    return torch.softmax(logits, dim=1).numpy()


@dataclass
class AuxiliaryClassifier:
    spec: AuxiliaryClassifierSpec
    net: MLP
    params: NormalizationParams
    heldout_accuracy: float
    history: list = field(default_factory=list)
    shuffled: bool = False

    @property
    def classifier_id(self) -> str:
        h = hashlib.sha256(serialize_weights(self.net.state_dict()))
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        return h.hexdigest()[:16]

    @property
    def labels(self) -> list:
        return self.spec.labels

    def scores(self, embeddings) -> np.ndarray:
        """(n, classes) probabilities for raw (un-normalized) embeddings."""
        mat = as_matrix(embeddings)
        if mat.shape[1] != self.spec.input_length:
            raise LengthMismatch(f"embedding length {mat.shape[1]} != classifier input {self.spec.input_length}")
        return _softmax_scores(self.net, minmax_transform(mat, self.params))

    def predict_index(self, embeddings) -> np.ndarray:
        return self.scores(embeddings).argmax(axis=1)

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "weights.bin").write_bytes(serialize_weights(self.net.state_dict()))
        card = {"spec": self.spec.to_dict(), "params": self.params.to_dict(),
                "heldout_accuracy": self.heldout_accuracy, "history": self.history,
                "shuffled": self.shuffled, "classifier_id": self.classifier_id}
        (out / "classifier.json").write_text(json.dumps(card, indent=2, sort_keys=True))

    @classmethod
    def load(cls, in_dir) -> "AuxiliaryClassifier":
        d = Path(in_dir)
        card = json.loads((d / "classifier.json").read_text())
        spec = AuxiliaryClassifierSpec(**{**card["spec"], "classes": tuple(tuple(c) for c in card["spec"]["classes"])})
        net = MLP(spec.input_length, spec.hidden, len(spec.classes))
        net.load_state_dict(deserialize_weights((d / "weights.bin").read_bytes()))
        net.eval()
        return cls(spec, net, NormalizationParams.from_dict(card["params"]), card["heldout_accuracy"],
                   card.get("history", []), card.get("shuffled", False))


def _collect(embeddings, spec: AuxiliaryClassifierSpec):
    """Map {label: embeddings} or a list of EmbeddingBatch to (X, y)."""
    subjects = {}
    if isinstance(embeddings, Mapping):
        groups = {tuple(k) if not isinstance(k, str) else tuple(k.split(":", 1)): v for k, v in embeddings.items()}
    else:
        groups, subjects = {}, {}
        for b in embeddings:
            groups.setdefault((b.source_model_id, b.layer_id), []).append(b.vectors)
            subjects.setdefault((b.source_model_id, b.layer_id), []).extend(b.subject_ids)
        groups = {k: np.concatenate(v) for k, v in groups.items()}
    xs, ys, bs = [], [], []
    for ci, label in enumerate(spec.classes):
        if label not in groups:
            raise DataError(f"class {label[0]}:{label[1]} has no samples")
        mat = as_matrix(groups[label])
        if mat.shape[0] == 0:
            raise DataError(f"class {label[0]}:{label[1]} has no samples")
        if mat.shape[1] != spec.input_length:
            raise LengthMismatch(f"class {label[0]}:{label[1]} has length {mat.shape[1]}, "
                                 f"spec expects {spec.input_length}")
        subj = np.asarray(subjects.get(label, [""] * len(mat)), dtype=object)
        if not all(subj):
            subj = np.array([f"#{i}" for i in range(len(mat))], dtype=object)
        if spec.train_size:
            mat, subj = mat[:spec.train_size], subj[:spec.train_size]
        xs.append(mat)
        ys.append(np.full(len(mat), ci))
        bs.append(subj)
    return np.concatenate(xs).astype(np.float64), np.concatenate(ys), np.concatenate(bs)


def train_auxiliary_classifier(embeddings, spec: AuxiliaryClassifierSpec,
                               shuffle_labels: bool = False) -> AuxiliaryClassifier:
    """Train the model-attribution MLP and measure held-out accuracy.

    ``shuffle_labels`` replaces the training and validation labels with
    block-shuffled ones (no-leakage control, see :func:`block_shuffle`);
    held-out accuracy is always measured against the true labels.
    """
    x, y, blocks = _collect(embeddings, spec)
    rng = np.random.default_rng(spec.seed)
    test = _stratified_split(y, spec.test_fraction, rng)
    rest = np.flatnonzero(~test)
    val = np.zeros(len(y), dtype=bool)
    val[rest[_stratified_split(y[rest], spec.val_fraction, rng)]] = True
    train = ~test & ~val
    y_fit = y.copy()
    if shuffle_labels:
        y_fit = block_shuffle(y, blocks, len(spec.classes), rng)
    params = minmax_fit(x[train])
    xn = minmax_transform(x, params)
    net, history = _train_mlp(xn[train], y_fit[train], xn[val], y_fit[val], len(spec.classes), spec.hidden,
                              spec.epochs, spec.batch_size, spec.lr, spec.patience, spec.seed)
    pred = _softmax_scores(net, xn[test]).argmax(axis=1)
    acc = float(np.mean(pred == y[test])) if test.any() else float("nan")
    log.info("auxiliary classifier: %d classes, held-out accuracy %.4f", len(spec.classes), acc)
    return AuxiliaryClassifier(spec, net, params, acc, history, shuffle_labels)


@dataclass(frozen=True)
class ModelPrediction:
    prediction: tuple  # (model_id, layer_id)
    scores: tuple
    classifier_id: str = ""

    def to_dict(self) -> dict:
        return {"prediction": ":".join(self.prediction), "scores": list(self.scores),
                "classifier_id": self.classifier_id}


def predict_model(classifier: AuxiliaryClassifier, embedding) -> ModelPrediction:
    """Attribute one raw embedding to a pool class (argmax; ties to the lowest index)."""
    if isinstance(embedding, EmbeddingRecord):
        vec = embedding.vector
    else:
        vec = np.asarray(embedding, dtype=np.float64).reshape(-1)
    scores = classifier.scores(vec[None, :])[0]
    idx = int(np.argmax(scores))
    return ModelPrediction(classifier.spec.classes[idx], tuple(float(s) for s in scores), classifier.classifier_id)


def predict_stream(classifier: AuxiliaryClassifier, batch) -> tuple:
    """Plurality prediction over an embedding stream plus per-embedding class indices."""
    idx = classifier.predict_index(batch)
    votes = np.bincount(idx, minlength=len(classifier.spec.classes))
    return classifier.spec.classes[int(np.argmax(votes))], idx


class ClassifierRouter:
    """One auxiliary classifier per embedding length; routes by observed length."""

    def __init__(self, classifiers: Sequence[AuxiliaryClassifier] = ()):
        self._by_length = {}
        for c in classifiers:
            self.add(c)

    def add(self, classifier: AuxiliaryClassifier):
        if classifier.spec.input_length in self._by_length:
            raise ConfigError(f"duplicate classifier for length {classifier.spec.input_length}")
        self._by_length[classifier.spec.input_length] = classifier

    @property
    def lengths(self) -> list:
        return sorted(self._by_length)

    def route(self, embedding) -> AuxiliaryClassifier:
        length = embedding.length if isinstance(embedding, (EmbeddingRecord, EmbeddingBatch)) \
            else np.asarray(embedding).shape[-1]
        if length not in self._by_length:
            raise LengthMismatch(f"no classifier for embedding length {length}")
        return self._by_length[length]

    def predict(self, embedding) -> ModelPrediction:
        return predict_model(self.route(embedding), embedding)


# ---------------------------------------------------------------------------
# Attribute prediction


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple  # ((name, (value, ...)), ...)

    def __post_init__(self):
        attrs = tuple((str(n), tuple(str(v) for v in vals)) for n, vals in
                      (self.attributes.items() if isinstance(self.attributes, Mapping) else self.attributes))
        for name, vals in attrs:
            if len(set(vals)) < 2:
                raise DataError(f"attribute {name!r} needs at least two values")
        object.__setattr__(self, "attributes", attrs)

    @property
    def names(self) -> list:
        return [n for n, _ in self.attributes]

    def values(self, name: str) -> tuple:
        return dict(self.attributes)[name]

    @classmethod
    def from_json(cls, path) -> "AttributeSchema":
        return cls(tuple(json.loads(Path(path).read_text()).items()))


def attribute_features(mat: np.ndarray, mode: str = "sorted") -> np.ndarray:
    """Per-embedding input features for attribute prediction.

    Dimension order is arbitrary across independently trained models, so the
    default sorts each vector's values; "raw" keeps the vector as is.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mode == "sorted":
        return np.sort(mat, axis=1)
    if mode == "raw":
        return mat
    raise ConfigError(f"unknown attribute feature mode {mode!r}")


@dataclass
class AttributePredictor:
    schema: AttributeSchema
    heads: dict  # name -> (MLP, NormalizationParams)
    heldout_accuracy: dict
    chance: dict
    heldout_models: tuple = ()
    features: str = "sorted"

    def predict(self, embeddings) -> dict:
        mat = attribute_features(as_matrix(embeddings), self.features)
        out = {}
        for name, (net, params) in self.heads.items():
            idx = _softmax_scores(net, minmax_transform(mat, params)).argmax(axis=1)
            out[name] = [self.schema.values(name)[i] for i in idx]
        return out


def train_attribute_predictor(labeled: Sequence, schema: AttributeSchema, hidden=(256, 128, 64),
                              heldout_models: Sequence[str] = None, heldout_fraction: float = 0.2,
                              epochs: int = 30, batch_size: int = 256, seed: int = 0,
                              features: str = "sorted") -> AttributePredictor:
    """Train one classifier per attribute on embeddings labelled with their model's attributes.

    ``labeled`` is a sequence of (EmbeddingBatch, {attribute: value}) pairs, one
    per source model.  Accuracy is measured on embeddings of held-out models
    (never seen in training); by default ``heldout_fraction`` of the models of
    each value of the first attribute are held out.
    """
    labeled = list(labeled)
    if not labeled:
        raise DataError("no labelled embeddings")
    for batch, attrs in labeled:
        for name in schema.names:
            if name not in attrs:
                raise DataError(f"model {batch.source_model_id!r} lacks label {name!r}")
            if str(attrs[name]) not in schema.values(name):
                raise DataError(f"model {batch.source_model_id!r}: {name}={attrs[name]!r} not in schema")
    lengths = {b.length for b, _ in labeled}
    if len(lengths) != 1:
        raise LengthMismatch(f"mixed embedding lengths {sorted(lengths)}")
    rng = np.random.default_rng(seed)
    models = [b.source_model_id for b, _ in labeled]
    if heldout_models is None:
        first = schema.names[0]
        heldout_models = []
        for value in schema.values(first):
            group = [b.source_model_id for b, a in labeled if str(a[first]) == value]
            k = max(1, int(round(heldout_fraction * len(group)))) if len(group) > 1 else 0
            heldout_models += [str(m) for m in rng.choice(group, size=k, replace=False)] if k else []
    heldout = set(heldout_models)
    if heldout - set(models):
        raise DataError(f"unknown held-out models {sorted(heldout - set(models))}")

    heads, acc, chance = {}, {}, {}
    for ai, name in enumerate(schema.names):
        values = schema.values(name)
        xs, ys, test = [], [], []
        for batch, attrs in labeled:
            xs.append(attribute_features(batch.vectors, features))
            ys.append(np.full(len(batch), values.index(str(attrs[name]))))
            test.append(np.full(len(batch), batch.source_model_id in heldout))
        x, y, test = np.concatenate(xs).astype(np.float64), np.concatenate(ys), np.concatenate(test)
        if len(np.unique(y[~test])) < 2:
            raise DataError(f"attribute {name!r} has a single value in the training data")
        train_idx = np.flatnonzero(~test)
        val = np.zeros(len(y), dtype=bool)
        val[train_idx[_stratified_split(y[train_idx], 0.1, rng)]] = True
        fit = ~test & ~val
        params = minmax_fit(x[fit])
        xn = minmax_transform(x, params)
        net, _ = _train_mlp(xn[fit], y[fit], xn[val], y[val], len(values), hidden, epochs, batch_size,
                            1e-3, 4, seed + ai)
        heads[name] = (net, params)
        if test.any():
            acc[name] = float(np.mean(_softmax_scores(net, xn[test]).argmax(1) == y[test]))
        else:
            acc[name] = float("nan")
        chance[name] = 1.0 / len(values)
    return AttributePredictor(schema, heads, acc, chance, tuple(sorted(heldout)), features)


# ---------------------------------------------------------------------------
# 2-D projection


def project_2d(embeddings, seed: int = 0, model_ids: Sequence[str] = None) -> list:
    """Distance-preserving linear 2-D map (PCA via SVD) -> [(x, y, model_id), ...].

    Sign ambiguity of the principal axes is resolved deterministically; ``seed``
    is accepted for interface stability (the projection is deterministic).
    """
    if isinstance(embeddings, EmbeddingBatch):
        ids = [embeddings.source_model_id] * len(embeddings)
        mat = embeddings.vectors
    elif isinstance(embeddings, np.ndarray):
        mat = np.atleast_2d(embeddings)
        ids = list(model_ids) if model_ids is not None else [""] * len(mat)
    else:
        records = list(embeddings)
        if records and isinstance(records[0], EmbeddingBatch):
            mat = np.concatenate([b.vectors for b in records])
            ids = [b.source_model_id for b in records for _ in range(len(b))]
        else:
            mat = as_matrix(records)
            ids = [r.source_model_id for r in records]
    if mat.shape[0] < 2:
        raise DataError("need at least two embeddings")
    x = np.asarray(mat, dtype=np.float64)
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    axes = vt[:2]
    if axes.shape[0] < 2:
        axes = np.vstack([axes, np.zeros_like(axes)])
    for i in range(axes.shape[0]):
        j = np.argmax(np.abs(axes[i]))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    xy = x @ axes.T
    return [(float(a), float(b), m) for (a, b), m in zip(xy, ids)]
