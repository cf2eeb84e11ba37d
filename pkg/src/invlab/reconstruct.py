"""Embedding-to-image reconstructor: architecture, combined pixel/perceptual loss and training."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .core import (EmbeddingBatch, EmbeddingRecord, ImageSample, NormalizationParams, as_matrix, minmax_fit,
                   minmax_transform, stack_images)
from .errors import ConfigError, LayerError, LengthMismatch, SpecError, TrainError
from .zoo import IdentificationHead, deserialize_weights, serialize_weights, to_tensor

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.3  # Keras LeakyReLU default
OUTPUT_SIZE = 64

# length -> (dense reshape (h, w, c), transpose-conv output depths)
LAYOUTS = {
    2048: ((4, 4, 1024), (512, 256, 128, 3)),
    1024: ((4, 4, 1024), (512, 256, 128, 3)),
    512: ((8, 8, 512), (256, 128, 3)),
    128: ((4, 4, 256), (128, 64, 32, 3)),
}


@dataclass(frozen=True)
class ReconstructorSpec:
    length: int
    width_divisor: int = 1  # 1 = verbatim layout; >1 thins every hidden channel count

    def __post_init__(self):
        if self.length not in LAYOUTS:
            raise SpecError(f"unsupported embedding length {self.length}; supported: {sorted(LAYOUTS)}")
        if self.width_divisor < 1:
            raise SpecError("width_divisor must be >= 1")

    def layers(self) -> list:
        """Ordered (kind, params, out_shape) rows; shapes are (h, w, c)."""
        (h, w, c), depths = LAYOUTS[self.length]
        c = max(1, c // self.width_divisor)
        rows = [("dense", {"units": h * w * c}, (h * w * c,)), ("reshape", {}, (h, w, c))]
        for i, d in enumerate(depths):
            last = i == len(depths) - 1
            d = d if last else max(1, d // self.width_divisor)
            h, w = h * 2, w * 2
            rows.append(("transpose_conv", {"kernel": 5, "stride": 2, "depth": d, "last": last}, (h, w, d)))
        if rows[-1][2] != (OUTPUT_SIZE, OUTPUT_SIZE, 3):
            raise SpecError(f"layout ends at {rows[-1][2]}, expected (64, 64, 3)")
        return rows

    @property
    def output_shape(self) -> tuple:
        return self.layers()[-1][2]


def _net(spec: ReconstructorSpec) -> nn.Sequential:
    mods = []
    rows = spec.layers()
    in_c = None
    for kind, params, shape in rows:
        if kind == "dense":
            mods += [nn.Linear(spec.length, params["units"]), nn.LeakyReLU(LEAKY_SLOPE)]
        elif kind == "reshape":
            h, w, c = shape
            mods.append(nn.Unflatten(1, (c, h, w)))
            in_c = c
        else:
            d = params["depth"]
            mods.append(nn.ConvTranspose2d(in_c, d, 5, stride=2, padding=2, output_padding=1))
            if not params["last"]:
                mods += [nn.BatchNorm2d(d), nn.LeakyReLU(LEAKY_SLOPE)]
            in_c = d
    return nn.Sequential(*mods)


@dataclass
class ReconstructorHandle:
    spec: ReconstructorSpec
    net: nn.Sequential
    params: NormalizationParams = None  # fit on the attacker's Φ̂ embeddings
    meta: dict = field(default_factory=dict)
    encoder: object = None  # co-trained extractor copy (autoencoder baseline only)
    trace: list = field(default_factory=list)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Normalized embeddings (n, length) -> clamped images (n, 64, 64, 3)."""
        self.net.eval()
        with torch.no_grad():
            out = self.net(torch.from_numpy(np.asarray(z, dtype=np.float32)))
        return out.clamp(0.0, 1.0).permute(0, 2, 3, 1).numpy()

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "weights.bin").write_bytes(serialize_weights(self.net.state_dict()))
        card = {"spec": {"length": self.spec.length, "width_divisor": self.spec.width_divisor},
                "params": self.params.to_dict() if self.params is not None else None,
                "meta": self.meta, "trace": self.trace}
        (out / "card.json").write_text(json.dumps(card, indent=2, sort_keys=True, default=str))

    @classmethod
    def load(cls, in_dir) -> "ReconstructorHandle":
        d = Path(in_dir)
        card = json.loads((d / "card.json").read_text())
        spec = ReconstructorSpec(**card["spec"])
        net = _net(spec)
        net.load_state_dict(deserialize_weights((d / "weights.bin").read_bytes()))
        net.eval()
        params = NormalizationParams.from_dict(card["params"]) if card["params"] else None
        return cls(spec, net, params, card.get("meta", {}), None, card.get("trace", []))


def build_reconstructor(spec: ReconstructorSpec, seed: int = 0) -> ReconstructorHandle:
    torch.manual_seed(seed)
    handle = ReconstructorHandle(spec, _net(spec))
    handle.meta["parameters"] = handle.parameter_count
    handle.meta["init_seed"] = seed
    return handle


# ---------------------------------------------------------------------------
# Loss


@dataclass(frozen=True)
class LossConfig:
    """w0 * ||x - x̂|| + sum_l w_l * ||Φ̂_l(x) - Φ̂_l(x̂)||.

    ``layers`` is the selected perceptual subset; every other layer of Φ̂ has
    weight 0.  ``layer_weights`` defaults to uniform over the subset and is
    re-normalized once per epoch during training.
    """

    pixel_weight: float = 1.0
    layers: tuple = ()
    layer_weights: tuple = ()
    squared: bool = False
    k: int = 0  # number of Φ̂ layers considered (0 = all)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        weights = tuple(float(w) for w in self.layer_weights)
        if not weights and self.layers:
            weights = (1.0 / len(self.layers),) * len(self.layers)
        if len(weights) != len(self.layers):
            raise ConfigError("one weight per perceptual layer required")
        if self.pixel_weight < 0 or any(w < 0 for w in weights):
            raise ConfigError("loss weights must be non-negative")
        object.__setattr__(self, "layer_weights", weights)

    def weight_map(self) -> dict:
        return dict(zip(self.layers, self.layer_weights))

    def with_weights(self, weights: dict) -> "LossConfig":
        return replace(self, layer_weights=tuple(weights[l] for l in self.layers))

    def to_dict(self) -> dict:
        return {"pixel_weight": self.pixel_weight, "layers": list(self.layers),
                "layer_weights": list(self.layer_weights), "squared": self.squared, "k": self.k}


def _norm(diff: torch.Tensor, squared: bool) -> torch.Tensor:
    """Per-sample Euclidean norm over all non-batch dimensions."""
    flat = diff.flatten(1)
    return flat.pow(2).sum(1) if squared else torch.linalg.vector_norm(flat, dim=1)


def _loss_terms(x: torch.Tensor, x_hat: torch.Tensor, phi, config: LossConfig, x_feats=None):
    """Per-sample pixel term and per-layer perceptual magnitudes.

    Images are (N, C, H, W) in [0, 1]; features are taken on the extractor's
    centred input convention.
    """
    pixel = _norm(x - x_hat, config.squared)
    mags = {}
    if config.layers:
        if x_feats is None:
            with torch.no_grad():
                x_feats = phi.features(x - 0.5, config.layers)
        xh_feats = phi.features(x_hat - 0.5, config.layers)
        for l in config.layers:
            mags[l] = _norm(x_feats[l] - xh_feats[l], config.squared)
    return pixel, mags


def _combine(pixel, mags, config: LossConfig) -> torch.Tensor:
    total = config.pixel_weight * pixel
    for l, w in zip(config.layers, config.layer_weights):
        if w:
            total = total + w * mags[l]
    return total


def _check_layers(phi, layers):
    missing = [l for l in layers if l not in phi.spec.layer_ids]
    if missing:
        raise LayerError(f"layers {missing} not in {phi.model_id}")


def loss_tensor(x: torch.Tensor, x_hat: torch.Tensor, phi, config: LossConfig) -> torch.Tensor:
    """Differentiable per-sample loss for (N, C, H, W) image tensors in [0, 1]."""
    pixel, mags = _loss_terms(x, x_hat, phi, config)
    return _combine(pixel, mags, config)


def reconstruction_loss(x, x_hat, phi, config: LossConfig) -> float:
    """Loss for a single pair of images (or the batch mean for stacked arrays)."""
    _check_layers(phi, config.layers)
    a = _images_tensor(x)
    b = _images_tensor(x_hat)
    if a.shape != b.shape:
        raise LengthMismatch(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if torch.equal(a, b):
        return 0.0
    phi.net.eval()
    with torch.no_grad():
        pixel, mags = _loss_terms(a, b, phi, config)
        return float(_combine(pixel, mags, config).mean())


def _images_tensor(images) -> torch.Tensor:
    """ImageSample / (H, W, C) / (N, H, W, C) -> (N, C, H, W) float32 tensor."""
    if isinstance(images, ImageSample):
        arr = images.pixels[None]
    elif isinstance(images, np.ndarray):
        arr = images if images.ndim == 4 else images[None]
    elif isinstance(images, torch.Tensor):
        return images
    else:
        arr = stack_images(images)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float32))


def normalize_layer_weights(magnitudes: dict, previous: dict = None) -> dict:
    """w_l ∝ 1 / running magnitude, normalized to sum to 1 over the subset.

    Layers with a zero (or non-finite) running magnitude keep their previous
    weight; the remaining budget is shared among the others.
    """
    if not magnitudes:
        return {}
    previous = previous or {l: 1.0 / len(magnitudes) for l in magnitudes}
    frozen = {l: previous.get(l, 0.0) for l, m in magnitudes.items() if not (m > 0 and math.isfinite(m))}
    active = {l: 1.0 / m for l, m in magnitudes.items() if l not in frozen}
    if not active:
        return dict(frozen)
    budget = max(0.0, 1.0 - sum(frozen.values()))
    total = sum(active.values())
    out = {l: budget * v / total for l, v in active.items()}
    out.update(frozen)
    return {l: out[l] for l in magnitudes}


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    optimizer: str = "adagrad"
    lr: float = 0.01
    seed: int = 0
    encoder_lr_scale: float = 0.1  # autoencoder baseline: encoder learning rate relative to lr

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be >= 1")
        if self.optimizer not in ("adagrad", "adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return dict(vars(self))


def _optimizer(name, params, lr):
    if name == "adagrad":
        return torch.optim.Adagrad(params, lr=lr)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr, momentum=0.9)


def attacker_embeddings(phi, images, layer_id: str) -> np.ndarray:
    return phi.embed(images, layer_id)


def train_reconstructor(g: ReconstructorHandle, phi, images: Sequence[ImageSample], loss: LossConfig,
                        config: TrainConfig, layer_id: str = "emb", mode: str = "attack") -> ReconstructorHandle:
    """Train G to invert Φ̂ embeddings of the adversarial images.

    ``mode="attack"`` keeps Φ̂ frozen and minimizes the combined loss.
    ``mode="autoencoder"`` is the full-access baseline: a copy of the extractor
    is trained jointly with G on the pixel loss (encoder and decoder together),
    and the trained copy is kept on the handle as its encoder.

    Returns a new handle; ``g`` itself is not modified.
    """
    if mode not in ("attack", "autoencoder"):
        raise ConfigError(f"unknown training mode {mode!r}")
    _check_layers(phi, list(loss.layers) + [layer_id])
    if phi.spec.layer_sizes()[layer_id] != g.spec.length:
        raise LengthMismatch(f"{phi.model_id}:{layer_id} has length {phi.spec.layer_sizes()[layer_id]}, "
                             f"reconstructor expects {g.spec.length}")
    arr = stack_images(images)
    if arr.shape[1:] != (OUTPUT_SIZE, OUTPUT_SIZE, 3):
        raise ConfigError(f"adversarial images must be 64x64x3, got {arr.shape[1:]}")
    handle = ReconstructorHandle(g.spec, copy.deepcopy(g.net), None, dict(g.meta))
    net = handle.net
    phi_checksum = phi.current_checksum()

    emb = phi.embed(arr, layer_id)
    params = minmax_fit(emb)
    handle.params = params
    x_all = _images_tensor(arr)
    z_all = torch.from_numpy(minmax_transform(emb, params).astype(np.float32))

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    train_params = [{"params": list(net.parameters()), "lr": config.lr}]
    encoder = None
    if mode == "autoencoder":
        encoder = copy.deepcopy(phi)
        encoder.net.train()
        train_params.append({"params": list(encoder.net.parameters()), "lr": config.lr * config.encoder_lr_scale})
        lo, span_t = (torch.from_numpy(a.astype(np.float32)) for a in _encoder_affine(params))
        loss = replace(loss, layers=(), layer_weights=())
    opt = _optimizer(config.optimizer, train_params, config.lr)

    phi.net.eval()
    frozen_flags = [p.requires_grad for p in phi.net.parameters()]
    for p in phi.net.parameters():
        p.requires_grad_(False)
    weights = loss.weight_map()
    trace = []
    n = len(x_all)
    try:
        for epoch in range(config.epochs):
            net.train()
            perm = torch.randperm(n, generator=gen)
            total, pix_total, mag_sums, seen = 0.0, 0.0, {l: 0.0 for l in loss.layers}, 0
            for i in range(0, n, config.batch_size):
                idx = perm[i:i + config.batch_size]
                if len(idx) < 2:  # batch norm needs two samples
                    continue
                x = x_all[idx]
                if encoder is not None:
                    z = (encoder.net(x - 0.5, [layer_id])[layer_id].flatten(1) - lo) / span_t
                else:
                    z = z_all[idx]
                x_hat = net(z)
                pixel, mags = _loss_terms(x, x_hat, phi, loss)
                batch_loss = _combine(pixel, mags, loss).mean()
                if not torch.isfinite(batch_loss):
                    trace.append({"epoch": epoch, "loss": float("nan"), "batch": i // config.batch_size})
                    raise TrainError(f"loss diverged at epoch {epoch}", trace)
                opt.zero_grad()
                batch_loss.backward()
                opt.step()
                total += float(batch_loss.detach()) * len(idx)
                pix_total += float(pixel.detach().sum())
                for l in loss.layers:
                    mag_sums[l] += float(mags[l].detach().sum())
                seen += len(idx)
            running = {l: mag_sums[l] / max(seen, 1) for l in loss.layers}
            trace.append({"epoch": epoch, "loss": total / max(seen, 1), "pixel": pix_total / max(seen, 1),
                          "magnitudes": running, "weights": dict(weights)})
            if loss.layers:
                weights = normalize_layer_weights(running, weights)
                loss = loss.with_weights(weights)
    finally:
        for p, flag in zip(phi.net.parameters(), frozen_flags):
            p.requires_grad_(flag)
    net.eval()
    if phi.current_checksum() != phi_checksum:
        raise TrainError("Φ̂ weights changed during reconstructor training", trace)
    if encoder is not None:
        encoder.net.eval()
        handle.encoder = encoder
    handle.trace = trace
    handle.meta.update({"phi": phi.model_id, "phi_checksum": phi_checksum, "layer_id": layer_id, "mode": mode,
                        "loss": loss.to_dict(), "train": config.to_dict(), "train_samples": n})
    return handle


def reconstruct(g: ReconstructorHandle, embedding, params="stored"):
    """Decode raw embedding(s) into image(s) clamped to [0, 1].

    ``params`` chooses the normalization applied first: ``"stored"`` uses the
    parameters fit on the attacker's Φ̂ embeddings, a NormalizationParams
    overrides them (cross-model normalization), and ``None`` means the input is
    already normalized.  A single EmbeddingRecord gives an ImageSample; a batch
    gives a list of ImageSample; an array gives an (n, 64, 64, 3) array.
    """
    mat = as_matrix(embedding).astype(np.float64)
    if mat.shape[1] != g.spec.length:
        raise LengthMismatch(f"embedding length {mat.shape[1]} != reconstructor input {g.spec.length}")
    if params == "stored":
        params = g.params
    z = minmax_transform(mat, params) if params is not None else mat
    images = g.decode(z)
    if isinstance(embedding, EmbeddingRecord):
        return ImageSample(images[0], embedding.subject_id, embedding.sample_id, "reconstruction")
    if isinstance(embedding, EmbeddingBatch):
        return [ImageSample(im, s, k, "reconstruction")
                for im, s, k in zip(images, embedding.subject_ids, embedding.sample_ids)]
    return images


def _encoder_affine(params: NormalizationParams):
    """Offset and scale of the in-graph normalization used by the co-trained encoder.

    Unlike minmax_transform, constant dimensions are only shifted: the encoder
    may bring them to life during joint training.
    """
    span = params.max - params.min
    return params.min, np.where(span == 0, 1.0, span)


def autoencode(g: ReconstructorHandle, images: Sequence[ImageSample]) -> list:
    """Baseline reconstructions through the co-trained encoder."""
    if g.encoder is None:
        raise ConfigError("handle has no co-trained encoder (not an autoencoder baseline)")
    emb = g.encoder.embed(images, g.meta["layer_id"])
    lo, span = _encoder_affine(g.params)
    out = g.decode((emb - lo) / span)
    return [ImageSample(o, im.subject_id, im.sample_id, "reconstruction") for o, im in zip(out, images)]


def mean_image(images: Sequence[ImageSample]) -> np.ndarray:
    """Constant predictor baseline: the pixel-wise mean of the training images."""
    return stack_images(images).mean(axis=0)


# ---------------------------------------------------------------------------
# Layer-subset search


def validate_candidates(phi, candidates: Sequence[Sequence[str]]) -> list:
    candidates = [tuple(c) for c in candidates]
    if not candidates:
        raise ConfigError("no candidate layer subsets")
    eligible = phi.spec.layer_ids
    for c in candidates:
        _check_layers(phi, c)
        if len(eligible) >= 10 and not 5 <= len(c) <= 10:
            raise ConfigError(f"subset {c} must have 5-10 layers when Φ̂ has {len(eligible)} eligible layers")
    return candidates


def search_layer_subset(g: ReconstructorHandle, phi, candidates, train_images: Sequence[ImageSample],
                        val_images: Sequence[ImageSample], loss: LossConfig, config: TrainConfig,
                        layer_id: str = "emb", budget: float = 0.1) -> tuple:
    """Pick the perceptual subset whose short-budget reconstructions Φ̂ identifies best.

    Returns (best subset, [(subset, classified fraction), ...]).  The metric is
    the fraction of validation reconstructions assigned to their true subject by
    a nearest-centroid head fit on Φ̂ embeddings of the validation originals.
    Ties go to the smaller subset, then to the earlier candidate.
    """
    candidates = validate_candidates(phi, candidates)
    if len(candidates) == 1:
        return candidates[0], [(candidates[0], float("nan"))]
    short = replace(config, epochs=max(1, int(round(config.epochs * budget))))
    val_emb = phi.embed(val_images, layer_id)
    subjects = [im.subject_id for im in val_images]
    head = IdentificationHead().fit(val_emb, subjects)
    scores = []
    for subset in candidates:
        cfg = replace(loss, layers=subset, layer_weights=())
        trained = train_reconstructor(g, phi, train_images, cfg, short, layer_id)
        recon = reconstruct(trained, val_emb)
        pred = head.predict(phi.embed(recon, layer_id))
        frac = float(np.mean(np.array(pred) == np.array(subjects)))
        scores.append((subset, frac))
        log.info("subset %s: classified fraction %.3f", subset, frac)
    best = min(range(len(candidates)), key=lambda i: (-scores[i][1], len(candidates[i]), i))
    return candidates[best], scores
