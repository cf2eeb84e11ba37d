"""Feature-extractor registry, training, embedding extraction and fine-tuning."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import io
import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import EmbeddingBatch, FTLevel, ImageSample, Modality, stack_images
from .errors import ConfigError, EvalError, LayerError, RegistryError, SpecError

log = logging.getLogger(__name__)

ACTIVATIONS = {
    "relu": nn.ReLU,
    "tanh": nn.Tanh,
    "elu": nn.ELU,
    "prelu": nn.PReLU,
    "leaky_relu": lambda: nn.LeakyReLU(0.2),
    "sigmoid": nn.Sigmoid,
}


@dataclass(frozen=True)
class LayerSpec:
    layer_id: str
    kind: str  # "conv" or "dense"
    units: int  # output channels (conv) or units (dense)
    kernel: int = 3
    stride: int = 1
    activation: str = "relu"
    pool: bool = False
    batchnorm: bool = False


@dataclass(frozen=True)
class ExtractorSpec:
    model_id: str
    layers: tuple
    extraction_layers: tuple = ()  # ((layer_id, length), ...)
    input_size: tuple = (64, 64, 3)
    pretraining: str = ""
    num_classes: int = 0

    def __post_init__(self):
        layers = tuple(l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "extraction_layers", tuple((str(a), int(b)) for a, b in self.extraction_layers))
        object.__setattr__(self, "input_size", tuple(self.input_size))
        self.validate()

    def validate(self):
        if not self.layers:
            raise SpecError("architecture has no layers")
        ids = [l.layer_id for l in self.layers]
        if len(set(ids)) != len(ids):
            raise SpecError("duplicate layer ids")
        seen_dense = False
        for l in self.layers:
            if l.kind not in ("conv", "dense"):
                raise SpecError(f"unknown layer kind {l.kind!r}")
            if l.activation not in ACTIVATIONS and l.activation != "none":
                raise SpecError(f"unknown activation {l.activation!r}")
            if l.kind == "conv" and seen_dense:
                raise SpecError("conv layer after dense layer")
            seen_dense |= l.kind == "dense"
        sizes = self.layer_sizes()
        for layer_id, length in self.extraction_layers:
            if layer_id not in sizes:
                raise SpecError(f"extraction layer {layer_id!r} not in architecture")
            if sizes[layer_id] != length:
                raise SpecError(f"layer {layer_id!r} outputs {sizes[layer_id]} values, declared {length}")

    def layer_shapes(self) -> dict:
        h, w, c = self.input_size
        shapes = {}
        for l in self.layers:
            if l.kind == "conv":
                h = (h + 2 * (l.kernel // 2) - l.kernel) // l.stride + 1
                w = (w + 2 * (l.kernel // 2) - l.kernel) // l.stride + 1
                c = l.units
                if l.pool:
                    h, w = h // 2, w // 2
                if h < 1 or w < 1:
                    raise SpecError(f"layer {l.layer_id!r} reduces the feature map to nothing")
                shapes[l.layer_id] = (c, h, w)
            else:
                shapes[l.layer_id] = (l.units,)
        return shapes

    def layer_sizes(self) -> dict:
        return {k: int(np.prod(v)) for k, v in self.layer_shapes().items()}

    @property
    def layer_ids(self) -> list:
        return [l.layer_id for l in self.layers]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["layers"] = [dataclasses.asdict(l) for l in self.layers]
        d["extraction_layers"] = [list(x) for x in self.extraction_layers]
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d) -> "ExtractorSpec":
        return cls(d["model_id"], tuple(LayerSpec(**l) for l in d["layers"]),
                   tuple(tuple(x) for x in d.get("extraction_layers", ())),
                   tuple(d.get("input_size", (64, 64, 3))), d.get("pretraining", ""),
                   int(d.get("num_classes", 0)))


def _activation(name):
    return nn.Identity() if name == "none" else ACTIVATIONS[name]()


class ExtractorNet(nn.Module):
    """Sequential CNN whose intermediate outputs are addressable by layer id."""

    def __init__(self, spec: ExtractorSpec):
        super().__init__()
        self.spec = spec
        self.units = nn.ModuleDict()
        in_c = spec.input_size[2]
        flat = None
        shapes = spec.layer_shapes()
        for l in spec.layers:
            mods = []
            if l.kind == "conv":
                mods.append(nn.Conv2d(in_c, l.units, l.kernel, l.stride, padding=l.kernel // 2))
                if l.batchnorm:
                    mods.append(nn.BatchNorm2d(l.units))
                mods.append(_activation(l.activation))
                if l.pool:
                    mods.append(nn.MaxPool2d(2))
                in_c = l.units
                flat = int(np.prod(shapes[l.layer_id]))
            else:
                if flat is not None:
                    mods.append(nn.Flatten())
                    in_features, flat = flat, None
                else:
                    in_features = in_c
                mods.append(nn.Linear(in_features, l.units))
                if l.batchnorm:
                    mods.append(nn.BatchNorm1d(l.units))
                mods.append(_activation(l.activation))
                in_c = l.units
            self.units[l.layer_id] = nn.Sequential(*mods)
        self.out_features = in_c if flat is None else flat

    def forward(self, x, layers=None):
        """Return a dict of flattened outputs for ``layers`` (default: last layer)."""
        wanted = set(layers) if layers is not None else {self.spec.layers[-1].layer_id}
        out = {}
        for name, unit in self.units.items():
            x = unit(x)
            if name in wanted:
                out[name] = x
                if len(out) == len(wanted):
                    break
        return out


def to_tensor(images) -> torch.Tensor:
    """(N, H, W, C) array or ImageSample sequence -> (N, C, H, W) float tensor centred at 0."""
    arr = images if isinstance(images, np.ndarray) else stack_images(images)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float32)) - 0.5


# ---------------------------------------------------------------------------
# Weight serialization


def serialize_weights(state: dict) -> bytes:
    """Deterministic byte encoding: u64 header size, JSON header, raw LE tensors."""
    header, chunks = [], []
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        arr = t.numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        header.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    head = json.dumps(header, sort_keys=True).encode()
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def deserialize_weights(raw: bytes) -> dict:
    (n,) = struct.unpack_from("<Q", raw)
    header = json.loads(raw[8:8 + n])
    offset = 8 + n
    state = {}
    for entry in header:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(entry["shape"])
        offset += count * dtype.itemsize
        state[entry["name"]] = torch.from_numpy(arr.copy())
    return state


def weights_checksum(state: dict) -> str:
    return hashlib.sha256(serialize_weights(state)).hexdigest()


# ---------------------------------------------------------------------------
# Handles and registry


@dataclass
class ExtractorHandle:
    spec: ExtractorSpec
    net: ExtractorNet
    head: nn.Module
    checksum: str
    meta: dict = field(default_factory=dict)

    @property
    def model_id(self) -> str:
        return self.spec.model_id

    def state_dict(self) -> dict:
        state = {f"net.{k}": v for k, v in self.net.state_dict().items()}
        state.update({f"head.{k}": v for k, v in self.head.state_dict().items()})
        return state

    def current_checksum(self) -> str:
        return weights_checksum(self.state_dict())

    @torch.no_grad()
    def embed(self, images, layer_id: str, batch_size: int = 256) -> np.ndarray:
        """Raw (N, length) float32 embeddings at ``layer_id``."""
        if layer_id not in self.spec.layer_ids:
            raise LayerError(f"{self.model_id} has no layer {layer_id!r}")
        arr = images if isinstance(images, np.ndarray) else stack_images(images)
        self.net.eval()
        outs = []
        for i in range(0, len(arr), batch_size):
            out = self.net(to_tensor(arr[i:i + batch_size]), [layer_id])[layer_id]
            outs.append(out.flatten(1).numpy())
        return np.concatenate(outs).astype(np.float32)

    def features(self, x: torch.Tensor, layers) -> dict:
        """Differentiable access to intermediate outputs (x already centred)."""
        return self.net(x, layers)


def build_extractor(spec: ExtractorSpec, seed: int = 0) -> ExtractorHandle:
    torch.manual_seed(seed)
    net = ExtractorNet(spec)
    head = nn.Linear(net.out_features, max(spec.num_classes, 1))
    handle = ExtractorHandle(spec, net, head, "")
    handle.checksum = handle.current_checksum()
    return handle


def register_extractor(spec: ExtractorSpec, weights, registry=None) -> ExtractorHandle:
    """Bind ``weights`` (state dict, serialized bytes or a path) to ``spec``.

    When ``registry`` is given, spec, weights and checksum are persisted under
    ``<registry>/<model_id>/``.
    """
    if isinstance(weights, (str, Path)):
        weights = Path(weights).read_bytes()
    if isinstance(weights, (bytes, bytearray)):
        weights = deserialize_weights(bytes(weights))
    handle = build_extractor(spec)
    net_state = {k[4:]: v for k, v in weights.items() if k.startswith("net.")}
    head_state = {k[5:]: v for k, v in weights.items() if k.startswith("head.")}
    if "weight" in head_state:
        out_f, in_f = head_state["weight"].shape
        handle.head = nn.Linear(in_f, out_f)
    try:
        handle.net.load_state_dict(net_state, strict=True)
        handle.head.load_state_dict(head_state, strict=True)
    except RuntimeError as exc:
        raise RegistryError(f"weights do not match spec {spec.model_id!r}: {exc}") from exc
    handle.net.eval()
    handle.checksum = handle.current_checksum()
    if registry is not None:
        Registry(registry).save(handle)
    return handle


class Registry:
    """``<root>/<model_id>/{spec.json, weights.bin, checksum}``."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def save(self, handle: ExtractorHandle):
        d = self.root / handle.model_id
        d.mkdir(parents=True, exist_ok=True)
        (d / "spec.json").write_text(json.dumps(handle.spec.to_dict(), indent=2, sort_keys=True))
        (d / "weights.bin").write_bytes(serialize_weights(handle.state_dict()))
        (d / "checksum").write_text(handle.checksum + "\n")
        if handle.meta:
            (d / "meta.json").write_text(json.dumps(handle.meta, indent=2, sort_keys=True, default=str))

    def load(self, model_id: str) -> ExtractorHandle:
        d = self.root / model_id
        if not (d / "spec.json").exists():
            raise RegistryError(f"model {model_id!r} not in registry {self.root}")
        spec = ExtractorSpec.from_dict(json.loads((d / "spec.json").read_text()))
        handle = register_extractor(spec, (d / "weights.bin").read_bytes())
        stored = (d / "checksum").read_text().strip()
        if stored != handle.checksum:
            raise RegistryError(f"checksum mismatch for {model_id!r}")
        if (d / "meta.json").exists():
            handle.meta = json.loads((d / "meta.json").read_text())
        return handle

    def ids(self) -> list:
        return sorted(p.name for p in self.root.iterdir() if (p / "spec.json").exists())


# ---------------------------------------------------------------------------
# Training


def _labels(images: Sequence[ImageSample]):
    classes = sorted({im.subject_id for im in images})
    index = {c: i for i, c in enumerate(classes)}
    return classes, np.array([index[im.subject_id] for im in images])


def _fit(modules, params, x_all, y_all, epochs, batch_size, lr, seed, train_mods=None):
    """Minimal cross-entropy loop; ``modules`` is (net, head)."""
    net, head = modules
    if epochs <= 0 or not params:
        return
    opt = torch.optim.Adam(params, lr=lr)
    gen = torch.Generator().manual_seed(seed)
    n = len(x_all)
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            if len(idx) < 2:
                continue
            feats = net(x_all[idx])
            logits = head(next(iter(feats.values())).flatten(1))
            loss = F.cross_entropy(logits, y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()


def train_extractor(spec: ExtractorSpec, images: Sequence[ImageSample], seed: int = 0, epochs: int = 8,
                    batch_size: int = 64, lr: float = 2e-3) -> ExtractorHandle:
    """Train an extractor plus classification head on subject labels."""
    classes, labels = _labels(images)
    spec = dataclasses.replace(spec, num_classes=len(classes))
    handle = build_extractor(spec, seed)
    x_all, y_all = to_tensor(images), torch.from_numpy(labels)
    handle.net.train()
    params = list(handle.net.parameters()) + list(handle.head.parameters())
    _fit((handle.net, handle.head), params, x_all, y_all, epochs, batch_size, lr, seed)
    handle.net.eval()
    handle.checksum = handle.current_checksum()
    handle.meta.update({"train_seed": seed, "epochs": epochs, "classes": len(classes),
                        "train_samples": len(images)})
    return handle


def extract_embeddings(handle: ExtractorHandle, images: Sequence[ImageSample], layer_id: str,
                       modality=Modality.FACE) -> EmbeddingBatch:
    vectors = handle.embed(images, layer_id)
    return EmbeddingBatch(vectors, handle.model_id, layer_id, [im.subject_id for im in images],
                          [im.sample_id for im in images], modality)


# ---------------------------------------------------------------------------
# Fine-tuning


@dataclass(frozen=True)
class FineTuneConfig:
    """Progressive unfreezing schedule.

    ``schedule`` lists (unit, epochs) phases.  Phase k trains the classifier
    head plus every unit named in phases 1..k.  A unit is ``"head"``, a layer
    id, or a negative index string counting layers from the top ("-1" is the
    last layer).
    """

    level: FTLevel
    size_range: tuple
    schedule: tuple
    val_floor: float = 0.95
    lr: float = 1e-3
    batch_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "level", FTLevel.parse(self.level))
        object.__setattr__(self, "schedule", tuple((str(u), int(e)) for u, e in self.schedule))
        object.__setattr__(self, "size_range", tuple(int(v) for v in self.size_range))

    def resolve_units(self, spec: ExtractorSpec) -> list:
        ids = spec.layer_ids
        units = []
        for unit, _ in self.schedule:
            if unit == "head":
                units.append(unit)
            elif unit.lstrip("-").isdigit() and unit.startswith("-"):
                k = int(unit)
                if -k > len(ids):
                    raise ConfigError(f"unit {unit} beyond architecture depth {len(ids)}")
                units.append(ids[k])
            elif unit in ids:
                units.append(unit)
            else:
                raise ConfigError(f"unit {unit!r} not in architecture {spec.model_id!r}")
        return units

    @property
    def opened(self) -> tuple:
        return tuple(u for u, e in self.schedule if u != "head")

    def to_dict(self) -> dict:
        return {"level": self.level.label, "size_range": list(self.size_range),
                "schedule": [list(x) for x in self.schedule], "val_floor": self.val_floor,
                "lr": self.lr, "batch_size": self.batch_size}

    @classmethod
    def from_dict(cls, d) -> "FineTuneConfig":
        return cls(d["level"], tuple(d["size_range"]), tuple(tuple(x) for x in d["schedule"]),
                   d.get("val_floor", 0.95), d.get("lr", 1e-3), d.get("batch_size", 32))


def fine_tune(handle: ExtractorHandle, images: Sequence[ImageSample], config: FineTuneConfig,
              seed: int = 0, model_id: str = None) -> ExtractorHandle:
    """Adapt a copy of ``handle`` to new identities; the source handle is untouched."""
    lo, hi = config.size_range
    if len(images) < lo:
        raise ConfigError(f"{config.level.label} needs at least {lo} samples, got {len(images)}")
    units = config.resolve_units(handle.spec)
    net = copy.deepcopy(handle.net)
    classes, labels = _labels(images)
    torch.manual_seed(seed)
    head = nn.Linear(net.out_features, len(classes))

    # 10% per-subject validation split
    rng = np.random.default_rng(seed)
    val_mask = np.zeros(len(images), dtype=bool)
    for c in range(len(classes)):
        idx = np.flatnonzero(labels == c)
        n_val = max(1, int(round(0.1 * len(idx)))) if len(idx) > 1 else 0
        val_mask[rng.choice(idx, size=n_val, replace=False)] = True
    x_all = to_tensor(images)
    y_all = torch.from_numpy(labels)
    x_tr, y_tr = x_all[~val_mask], y_all[~val_mask]

    opened = []
    for (unit_name, epochs), unit in zip(config.schedule, units):
        if unit != "head":
            opened.append(unit)
        net.eval()
        for u in opened:
            net.units[u].train()
        params = list(head.parameters())
        for u in opened:
            params += list(net.units[u].parameters())
        _fit((net, head), params, x_tr, y_tr, epochs, config.batch_size, config.lr,
             seed + len(opened))
    net.eval()
    with torch.no_grad():
        if val_mask.any():
            logits = head(next(iter(net(x_all[val_mask]).values())).flatten(1))
            val_acc = float((logits.argmax(1) == y_all[val_mask]).float().mean())
        else:
            val_acc = float("nan")
    new_spec = dataclasses.replace(handle.spec, model_id=model_id or f"{handle.model_id}-{config.level.label}",
                                   num_classes=len(classes))
    new = ExtractorHandle(new_spec, net, head, "", dict(handle.meta))
    new.checksum = new.current_checksum()
    new.meta.update({"fine_tuned_from": handle.model_id, "ft_level": config.level.label,
                     "ft_samples": len(images), "val_acc": val_acc,
                     "floor_met": bool(val_acc >= config.val_floor)})
    if not val_acc >= config.val_floor:
        warnings.warn(f"{new_spec.model_id}: validation accuracy {val_acc:.3f} below floor "
                      f"{config.val_floor}", RuntimeWarning)
    return new


def embedding_displacement(source: ExtractorHandle, adapted: ExtractorHandle, probes, layer_id: str) -> float:
    """Mean L2 distance between the two extractors' embeddings of the probe images."""
    a = source.embed(probes, layer_id).astype(np.float64)
    b = adapted.embed(probes, layer_id).astype(np.float64)
    return float(np.linalg.norm(a - b, axis=1).mean())


# ---------------------------------------------------------------------------
# Recognition


class IdentificationHead:
    """Nearest-class-centroid identifier (or a softmax head via ``kind="softmax"``)."""

    def __init__(self, kind: str = "centroid"):
        if kind not in ("centroid", "softmax"):
            raise ConfigError(f"unknown identification head {kind!r}")
        self.kind = kind
        self.classes = []
        self._model = None

    def fit(self, embeddings: np.ndarray, subject_ids: Sequence[str]) -> "IdentificationHead":
        subject_ids = np.asarray(subject_ids)
        self.classes = sorted(set(subject_ids.tolist()))
        emb = np.asarray(embeddings, dtype=np.float64)
        if self.kind == "centroid":
            self._model = np.stack([emb[subject_ids == c].mean(axis=0) for c in self.classes])
        else:
            from sklearn.linear_model import LogisticRegression

            self._model = LogisticRegression(max_iter=2000).fit(emb, subject_ids)
        return self

    def predict_index(self, embeddings: np.ndarray) -> np.ndarray:
        emb = np.asarray(embeddings, dtype=np.float64)
        if self.kind == "centroid":
            d = ((emb[:, None, :] - self._model[None, :, :]) ** 2).sum(-1)
            return d.argmin(axis=1)
        proba = self._model.predict_proba(emb)
        order = [list(self._model.classes_).index(c) for c in self.classes]
        return proba[:, order].argmax(axis=1)

    def predict(self, embeddings: np.ndarray) -> list:
        return [self.classes[i] for i in self.predict_index(embeddings)]


@dataclass(frozen=True)
class RecognitionReport:
    identification_accuracy: float
    tar: float
    far: float
    identities: int

    def __post_init__(self):
        for v in (self.identification_accuracy, self.tar):
            if not 0.0 <= v <= 1.0:
                raise EvalError("fractions must lie in [0, 1]")


def evaluate_recognition(handle: ExtractorHandle, layer_id: str, test_set: Sequence[ImageSample],
                         far: float = 0.01, head: str = "centroid") -> RecognitionReport:
    """Identification (enrol half, probe half) and TAR at ``far`` on the test identities."""
    from .evalkit import tar_at_far, similarity_matrix

    groups: dict = {}
    for im in test_set:
        groups.setdefault(im.subject_id, []).append(im)
    if len(groups) < 2:
        raise EvalError("need at least two identities")
    if min(len(g) for g in groups.values()) < 2:
        raise EvalError("every identity needs at least two samples")
    enrol, probe = [], []
    for sid in sorted(groups):
        g = sorted(groups[sid], key=lambda s: s.sample_id)
        k = len(g) // 2
        enrol += g[:k]
        probe += g[k:]
    e_emb = handle.embed(enrol, layer_id)
    p_emb = handle.embed(probe, layer_id)
    e_ids = np.array([s.subject_id for s in enrol])
    p_ids = np.array([s.subject_id for s in probe])
    ident = IdentificationHead(head).fit(e_emb, e_ids)
    acc = float(np.mean(np.array(ident.predict(p_emb)) == p_ids))
    sim = similarity_matrix(p_emb, e_emb)
    same = p_ids[:, None] == e_ids[None, :]
    result = tar_at_far(sim[same], sim[~same], far)
    return RecognitionReport(acc, result.tar, result.far, len(groups))
