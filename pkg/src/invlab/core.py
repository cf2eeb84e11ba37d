"""Shared domain types: embeddings, images, normalization and attack scenarios."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

from .errors import InvalidInput, LengthMismatch


class Modality(str, enum.Enum):
    FACE = "face"
    FINGERPRINT = "fingerprint"
    GENERIC = "generic"


class DataCondition(str, enum.Enum):
    """How the attacker's data relates to the target system's data."""

    SAME_IDENTITIES = "SameIdentities"
    SAME_PREPROCESSING = "SamePreProcessing"
    DIFF_PREPROCESSING = "DiffPreProcessing"


class FTLevel(enum.IntEnum):
    NO_ADAPT = 0
    FT1 = 1
    FT2 = 2
    FT3 = 3
    FT4 = 4
    FT5 = 5

    @property
    def label(self) -> str:
        return "NoAdapt" if self == FTLevel.NO_ADAPT else f"FT{int(self)}"

    @classmethod
    def parse(cls, value) -> "FTLevel":
        if isinstance(value, FTLevel):
            return value
        if isinstance(value, int):
            return cls(value)
        text = str(value).replace("-", "").replace("_", "").lower()
        if text in ("noadapt", "none", "ft0", "0"):
            return cls.NO_ADAPT
        if text.startswith("ft") and text[2:].isdigit():
            return cls(int(text[2:]))
        raise InvalidInput(f"unknown fine-tuning level {value!r}")


def _frozen_array(values, dtype=np.float32) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class EmbeddingRecord:
    vector: np.ndarray
    source_model_id: str
    layer_id: str
    subject_id: str = ""
    sample_id: str = ""
    modality: Modality = Modality.GENERIC
    length: int = -1

    def __post_init__(self):
        vec = _frozen_array(self.vector).reshape(-1)
        object.__setattr__(self, "vector", vec)
        object.__setattr__(self, "modality", Modality(self.modality))
        if self.length == -1:
            object.__setattr__(self, "length", vec.size)
        if self.length <= 0:
            raise InvalidInput("embedding length must be positive")
        if vec.size != self.length:
            raise LengthMismatch(f"vector has {vec.size} entries, declared length {self.length}")
        if not np.all(np.isfinite(vec)):
            raise InvalidInput("embedding contains non-finite values")

    def with_vector(self, vector) -> "EmbeddingRecord":
        return EmbeddingRecord(vector, self.source_model_id, self.layer_id, self.subject_id,
                               self.sample_id, self.modality)


@dataclass(frozen=True)
class EmbeddingBatch:
    """A block of embeddings from one (model, layer) with parallel id lists.

    This is the bulk counterpart of :class:`EmbeddingRecord`; most numeric code
    works on batches and converts to records only at API edges.
    """

    vectors: np.ndarray
    source_model_id: str
    layer_id: str
    subject_ids: tuple = ()
    sample_ids: tuple = ()
    modality: Modality = Modality.GENERIC

    def __post_init__(self):
        vecs = _frozen_array(self.vectors)
        if vecs.ndim != 2:
            raise InvalidInput("vectors must be a 2-D array")
        object.__setattr__(self, "vectors", vecs)
        n = vecs.shape[0]
        subjects = tuple(self.subject_ids) or ("",) * n
        samples = tuple(self.sample_ids) or ("",) * n
        if len(subjects) != n or len(samples) != n:
            raise InvalidInput("id lists must match the number of vectors")
        object.__setattr__(self, "subject_ids", tuple(str(s) for s in subjects))
        object.__setattr__(self, "sample_ids", tuple(str(s) for s in samples))
        object.__setattr__(self, "modality", Modality(self.modality))
        if not np.all(np.isfinite(vecs)):
            raise InvalidInput("embeddings contain non-finite values")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def length(self) -> int:
        return self.vectors.shape[1]

    @property
    def label(self) -> str:
        return f"{self.source_model_id}:{self.layer_id}"

    def records(self) -> Iterator[EmbeddingRecord]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i) -> EmbeddingRecord:
        return EmbeddingRecord(self.vectors[i], self.source_model_id, self.layer_id,
                               self.subject_ids[i], self.sample_ids[i], self.modality)

    def subset(self, index) -> "EmbeddingBatch":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return EmbeddingBatch(self.vectors[index], self.source_model_id, self.layer_id,
                              [self.subject_ids[i] for i in index],
                              [self.sample_ids[i] for i in index], self.modality)

    def with_vectors(self, vectors) -> "EmbeddingBatch":
        return EmbeddingBatch(vectors, self.source_model_id, self.layer_id, self.subject_ids,
                              self.sample_ids, self.modality)

    @classmethod
    def from_records(cls, records: Sequence[EmbeddingRecord]) -> "EmbeddingBatch":
        records = list(records)
        if not records:
            raise InvalidInput("no records")
        lengths = {r.length for r in records}
        if len(lengths) != 1:
            raise LengthMismatch(f"mixed embedding lengths {sorted(lengths)}")
        first = records[0]
        return cls(np.stack([r.vector for r in records]), first.source_model_id, first.layer_id,
                   [r.subject_id for r in records], [r.sample_id for r in records],
                   first.modality)


EmbeddingsLike = Union[EmbeddingBatch, Iterable[EmbeddingRecord], np.ndarray]


def as_matrix(embeddings: EmbeddingsLike) -> np.ndarray:
    """Stack any supported embedding container into an (n, d) float array."""
    if isinstance(embeddings, EmbeddingBatch):
        return embeddings.vectors
    if isinstance(embeddings, EmbeddingRecord):
        return embeddings.vector[None, :]
    if isinstance(embeddings, np.ndarray):
        return np.atleast_2d(embeddings)
    records = list(embeddings)
    if not records:
        raise InvalidInput("empty embedding set")
    lengths = {np.asarray(r.vector if isinstance(r, EmbeddingRecord) else r).size for r in records}
    if len(lengths) != 1:
        raise LengthMismatch(f"mixed embedding lengths {sorted(lengths)}")
    return np.stack([np.asarray(r.vector if isinstance(r, EmbeddingRecord) else r).reshape(-1)
                     for r in records])


@dataclass(frozen=True)
class NormalizationParams:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = _frozen_array(self.min, np.float64).reshape(-1)
        hi = _frozen_array(self.max, np.float64).reshape(-1)
        if lo.shape != hi.shape:
            raise LengthMismatch("min and max have different lengths")
        if np.any(lo > hi):
            raise InvalidInput("min must not exceed max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def length(self) -> int:
        return self.min.size

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NormalizationParams":
        return cls(np.asarray(d["min"]), np.asarray(d["max"]))


def minmax_fit(embeddings: EmbeddingsLike) -> NormalizationParams:
    """Per-dimension extrema over a set of embeddings."""
    mat = as_matrix(embeddings)
    if mat.shape[0] == 0:
        raise InvalidInput("cannot fit normalization on an empty set")
    mat = mat.astype(np.float64)
    return NormalizationParams(mat.min(axis=0), mat.max(axis=0))


def minmax_transform(mat: np.ndarray, params: NormalizationParams) -> np.ndarray:
    """Array-level min-max scaling; constant dimensions map to 0.5."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape[-1] != params.length:
        raise LengthMismatch(f"embedding length {mat.shape[-1]} != normalization length {params.length}")
    span = params.max - params.min
    degenerate = span == 0
    out = (mat - params.min) / np.where(degenerate, 1.0, span)
    out[..., degenerate] = 0.5
    return out


def minmax_apply(embedding, params: NormalizationParams):
    """Apply min-max normalization to a record, batch or raw array.

    Values outside the fitted range are not clipped.
    """
    if isinstance(embedding, EmbeddingRecord):
        return embedding.with_vector(minmax_transform(embedding.vector, params))
    if isinstance(embedding, EmbeddingBatch):
        return embedding.with_vectors(minmax_transform(embedding.vectors, params))
    return minmax_transform(embedding, params)


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray
    subject_id: str = ""
    sample_id: str = ""
    preprocessing_tag: str = "raw"

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float32, copy=True)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or min(px.shape) <= 0:
            raise InvalidInput(f"pixels must be H x W x C, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise InvalidInput("pixel values must lie in [0, 1]")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "subject_id", str(self.subject_id))
        object.__setattr__(self, "sample_id", str(self.sample_id))

    @property
    def shape(self):
        return self.pixels.shape

    def replace(self, **changes) -> "ImageSample":
        values = dict(pixels=self.pixels, subject_id=self.subject_id, sample_id=self.sample_id,
                      preprocessing_tag=self.preprocessing_tag)
        values.update(changes)
        return ImageSample(**values)


def stack_images(images: Sequence[ImageSample]) -> np.ndarray:
    """(N, H, W, C) float32 array from a sequence of samples."""
    if not len(images):
        raise InvalidInput("empty image set")
    return np.stack([im.pixels for im in images])


@dataclass(frozen=True)
class AttackScenario:
    attacker_data_condition: DataCondition = DataCondition.SAME_IDENTITIES
    ft_level: FTLevel = FTLevel.NO_ADAPT
    model_pool: tuple = ()
    target_model_id: str = ""
    target_in_pool: bool = True
    embedding_length: int = 128

    def __post_init__(self):
        object.__setattr__(self, "attacker_data_condition", DataCondition(self.attacker_data_condition))
        object.__setattr__(self, "ft_level", FTLevel.parse(self.ft_level))
        object.__setattr__(self, "model_pool", tuple(self.model_pool))
        if self.embedding_length <= 0:
            raise InvalidInput("embedding_length must be positive")
        if self.target_model_id:
            present = self.target_model_id in self.model_pool
            if self.target_in_pool and not present:
                raise InvalidInput(f"target {self.target_model_id!r} flagged in-pool but absent from pool")
            if not self.target_in_pool and present:
                raise InvalidInput(f"target {self.target_model_id!r} flagged out-of-pool but present in pool")

    def to_dict(self) -> dict:
        return {
            "attacker_data_condition": self.attacker_data_condition.value,
            "ft_level": self.ft_level.label,
            "model_pool": list(self.model_pool),
            "target_model_id": self.target_model_id,
            "target_in_pool": self.target_in_pool,
            "embedding_length": self.embedding_length,
        }

    @classmethod
    def from_dict(cls, d) -> "AttackScenario":
        return cls(d.get("attacker_data_condition", "SameIdentities"), d.get("ft_level", "NoAdapt"),
                   tuple(d.get("model_pool", ())), d.get("target_model_id", ""),
                   bool(d.get("target_in_pool", True)), int(d.get("embedding_length", 128)))
