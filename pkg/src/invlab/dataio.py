"""Dataset ingestion, preprocessing pipelines, augmentation and attacker/target splits."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from . import synth
from .core import DataCondition, ImageSample, Modality
from .errors import FormatError, IngestError, InvalidInput, PolicyError, PreprocessError, SplitError

log = logging.getLogger(__name__)

CANONICAL_KEYPOINTS = np.array([[22.0, 26.0], [42.0, 26.0], [32.0, 46.0]])
MARKER_THRESHOLD = 0.6


class Pipeline(str, enum.Enum):
    A = "A"  # keypoint-normalizing affine warp, then crop
    B = "B"  # axis-aligned crop around the detected keypoints


@dataclass
class DatasetManifest:
    root: Path
    modality: Modality = Modality.FACE
    subjects: list = field(default_factory=list)  # [(subject_id, [relative paths])]
    preprocessing_tag: str = "raw"
    image_size: tuple = (64, 64)

    def __post_init__(self):
        self.root = Path(self.root)
        self.modality = Modality(self.modality)
        for sid, files in self.subjects:
            if not files:
                raise InvalidInput(f"subject {sid!r} has no samples")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IngestError(f"cannot read manifest {path}: {exc}", path) from exc
        subjects = [(str(s["id"]), list(s["files"])) for s in data.get("subjects", [])]
        size = data.get("image_size", [64, 64])
        if isinstance(size, int):
            size = [size, size]
        return cls(path.parent, data.get("modality", "face"), subjects,
                   data.get("preprocessing_tag", "raw"), tuple(size[:2]))

    def write(self, path):
        data = {
            "modality": self.modality.value,
            "image_size": list(self.image_size),
            "preprocessing_tag": self.preprocessing_tag,
            "subjects": [{"id": sid, "files": list(files)} for sid, files in self.subjects],
        }
        Path(path).write_text(json.dumps(data, indent=2))

    def __len__(self):
        return sum(len(files) for _, files in self.subjects)


def _decode(path: Path, size, channels: int) -> np.ndarray:
    if not path.exists():
        raise IngestError(f"missing image file {path}", path)
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise FormatError(f"{path}: unsupported format {im.format}, expected PNG")
            im.load()
            gray = im.mode in ("L", "I", "I;16", "1", "LA")
            im = im.convert("L" if gray else "RGB")
            if im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise IngestError(f"unreadable image {path}: {exc}", path) from exc
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[2] == 1 and channels == 3:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.shape[2] == 3 and channels == 1:
        arr = arr.mean(axis=2, keepdims=True)
    return arr


def load_dataset(manifest: DatasetManifest, size=(64, 64), channels: int = 3) -> list:
    """Decode every file referenced by the manifest into [0, 1] ImageSamples."""
    samples = []
    for sid, files in manifest.subjects:
        for rel in files:
            path = manifest.root / rel
            pixels = _decode(path, size, channels)
            samples.append(ImageSample(pixels, sid, f"{sid}/{Path(rel).stem}", manifest.preprocessing_tag))
    return samples


def write_dataset(samples: Sequence[ImageSample], out_dir, modality=Modality.FACE) -> DatasetManifest:
    """Write samples as PNG files plus a manifest.json; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_subject: dict = {}
    for s in samples:
        rel = f"{s.subject_id}/{s.sample_id.replace('/', '_')}.png"
        (out_dir / s.subject_id).mkdir(exist_ok=True)
        arr = np.round(s.pixels * 255).astype(np.uint8)
        img = Image.fromarray(arr[..., 0] if arr.shape[2] == 1 else arr)
        img.save(out_dir / rel)
        by_subject.setdefault(s.subject_id, []).append(rel)
    tags = {s.preprocessing_tag for s in samples}
    h, w = samples[0].shape[:2]
    manifest = DatasetManifest(out_dir, modality, sorted(by_subject.items()),
                               tags.pop() if len(tags) == 1 else "mixed", (h, w))
    manifest.write(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    """Random augmentation ranges.

    ``crop_range`` is the fraction of each side removed before rescaling, so a
    zero range means no cropping.
    """

    rotation: float = 15.0
    translation: float = 6.0
    crop_range: tuple = (0.0, 0.15)
    obliteration_count: tuple = (0, 3)
    patch_size: tuple = (4, 10)
    multiplier: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "crop_range", tuple(self.crop_range))
        object.__setattr__(self, "obliteration_count", tuple(int(v) for v in self.obliteration_count))
        object.__setattr__(self, "patch_size", tuple(int(v) for v in self.patch_size))
        values = [self.rotation, self.translation, *self.crop_range, *self.obliteration_count, *self.patch_size]
        if any(v < 0 for v in values):
            raise PolicyError("augmentation ranges must be non-negative")
        if self.multiplier < 1:
            raise PolicyError("multiplier must be at least 1")
        for lo, hi in (self.crop_range, self.obliteration_count, self.patch_size):
            if lo > hi:
                raise PolicyError("range lower bound exceeds upper bound")
        if self.crop_range[1] > 1:
            raise PolicyError("crop fraction must be within [0, 1]")

    @classmethod
    def from_json(cls, path) -> "AugmentationPolicy":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


def sample_seed(seed: int, sample_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _resize(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    zoom = (h / arr.shape[0], w / arr.shape[1], 1)
    out = ndimage.zoom(arr, zoom, order=1, mode="nearest", grid_mode=True)
    return out[:h, :w]


def augment(image: ImageSample, policy: AugmentationPolicy, modality=Modality.FINGERPRINT) -> list:
    """Return ``policy.multiplier`` variants: rotate, translate, crop-rescale, obliterate."""
    h, w, _ = image.shape
    lo, hi = policy.crop_range
    if round((1 - hi) * h) < 1 or round((1 - hi) * w) < 1:
        raise PolicyError("crop fraction would produce an empty image")
    background = 1.0 if Modality(modality) == Modality.FINGERPRINT else float(image.pixels.mean())
    rng = np.random.default_rng(sample_seed(policy.seed, image.sample_id))
    variants = []
    for k in range(policy.multiplier):
        px = np.array(image.pixels, dtype=np.float64)
        angle = rng.uniform(-policy.rotation, policy.rotation)
        dy, dx = rng.uniform(-policy.translation, policy.translation, size=2)
        crop = rng.uniform(lo, hi)
        n_patches = rng.integers(policy.obliteration_count[0], policy.obliteration_count[1] + 1)
        if angle != 0:
            px = ndimage.rotate(px, angle, axes=(1, 0), reshape=False, order=1, mode="constant", cval=background)
        if dx != 0 or dy != 0:
            px = ndimage.shift(px, (dy, dx, 0), order=1, mode="constant", cval=background)
        if crop > 0:
            ch, cw = max(1, round((1 - crop) * h)), max(1, round((1 - crop) * w))
            top = rng.integers(0, h - ch + 1)
            left = rng.integers(0, w - cw + 1)
            px = _resize(px[top:top + ch, left:left + cw], h, w)
        for _ in range(n_patches):
            ph, pw = rng.integers(policy.patch_size[0], policy.patch_size[1] + 1, size=2)
            top, left = rng.integers(0, max(1, h - ph + 1)), rng.integers(0, max(1, w - pw + 1))
            px[top:top + ph, left:left + pw] = background
        variants.append(image.replace(pixels=np.clip(px, 0, 1), sample_id=f"{image.sample_id}#aug{k}"))
    return variants


# ---------------------------------------------------------------------------
# Preprocessing pipelines


def detect_keypoints(pixels: np.ndarray) -> np.ndarray:
    """Locate the red/green/blue fiducials; returns (3, 2) (x, y) centroids."""
    if pixels.shape[2] != 3:
        raise PreprocessError("fiducial detection needs an RGB image")
    points = []
    yy, xx = np.mgrid[0:pixels.shape[0], 0:pixels.shape[1]]
    for c in range(3):
        others = np.delete(pixels, c, axis=2).max(axis=2)
        weight = np.clip(pixels[..., c] - others - MARKER_THRESHOLD, 0, None)
        total = weight.sum()
        if total < 1e-3:
            raise PreprocessError(f"fiducial {'RGB'[c]} not found")
        points.append([(weight * xx).sum() / total, (weight * yy).sum() / total])
    return np.array(points)


def _warp(pixels: np.ndarray, matrix: np.ndarray, size: int) -> np.ndarray:
    """Sample ``pixels`` at matrix @ (x, y, 1) for every output pixel (x, y)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    sx = matrix[0, 0] * xx + matrix[0, 1] * yy + matrix[0, 2]
    sy = matrix[1, 0] * xx + matrix[1, 1] * yy + matrix[1, 2]
    out = np.empty((size, size, pixels.shape[2]))
    for c in range(pixels.shape[2]):
        out[..., c] = ndimage.map_coordinates(pixels[..., c], [sy, sx], order=1, mode="nearest")
    return np.clip(out, 0, 1)


def apply_preprocessing(image: ImageSample, pipeline, size: int = 64) -> ImageSample:
    """Align (A) or crop (B) an image around its fiducial keypoints."""
    pipeline = Pipeline(pipeline)
    kps = detect_keypoints(image.pixels)
    if pipeline is Pipeline.A:
        scale = size / 64.0
        dst = np.hstack([CANONICAL_KEYPOINTS * scale, np.ones((3, 1))])
        # affine from output coords to source coords, exact for three points
        matrix = np.linalg.solve(dst, kps).T
    else:
        center = kps.mean(axis=0)
        side = 2.6 * np.abs(kps - center).max() + 8.0
        step = side / size
        matrix = np.array([[step, 0, center[0] - side / 2 + step / 2],
                           [0, step, center[1] - side / 2 + step / 2]])
    pixels = _warp(np.asarray(image.pixels, dtype=np.float64), matrix, size)
    return image.replace(pixels=pixels, preprocessing_tag=pipeline.value)


def preprocess_many(images: Sequence[ImageSample], pipeline, size: int = 64) -> list:
    """Apply a pipeline to many images; detection failures are skipped and logged."""
    out = []
    for im in images:
        try:
            out.append(apply_preprocessing(im, pipeline, size))
        except PreprocessError as exc:
            log.warning("skipping %s: %s", im.sample_id, exc)
    return out


def synthetic_faces(world_seed: int, subjects: Sequence[int], samples: Sequence[int],
                    pipeline=Pipeline.A, size: int = 64) -> list:
    """Render and preprocess a block of synthetic faces."""
    raw = (synth.render_face(world_seed, s, k) for s in subjects for k in samples)
    return preprocess_many(list(raw), pipeline, size)


# ---------------------------------------------------------------------------
# Attacker / target splits


def resolve_condition(attacker: Sequence[ImageSample], target: Sequence[ImageSample]) -> DataCondition:
    """Classify the relation between two datasets."""
    a_tags = {s.preprocessing_tag for s in attacker}
    t_tags = {s.preprocessing_tag for s in target}
    if a_tags != t_tags:
        return DataCondition.DIFF_PREPROCESSING
    if {s.subject_id for s in attacker} & {s.subject_id for s in target}:
        return DataCondition.SAME_IDENTITIES
    return DataCondition.SAME_PREPROCESSING


def _by_subject(samples):
    groups: dict = {}
    for s in samples:
        groups.setdefault(s.subject_id, []).append(s)
    for sid in groups:
        groups[sid].sort(key=lambda s: s.sample_id)
    return groups


def _train_test(samples, test_fraction):
    train, test = [], []
    for sid, group in sorted(_by_subject(samples).items()):
        n_test = int(round(len(group) * test_fraction))
        if len(group) >= 2:
            n_test = min(max(n_test, 1), len(group) - 1)
        else:
            n_test = 0
        train.extend(group[:len(group) - n_test])
        test.extend(group[len(group) - n_test:])
    return train, test


def split_disjoint(attacker: Sequence[ImageSample], target: Sequence[ImageSample], condition,
                   test_fraction: float = 0.5):
    """Split into (attacker set, target train set, target test set).

    SameIdentities keeps shared subjects but gives the first half of each
    subject's samples to the attacker and the rest to the target.  The other
    conditions partition subjects; tags must be equal (SamePreProcessing) or
    differ (DiffPreProcessing).
    """
    condition = DataCondition(condition)
    a_groups, t_groups = _by_subject(attacker), _by_subject(target)
    a_tags = {s.preprocessing_tag for s in attacker}
    t_tags = {s.preprocessing_tag for s in target}
    att, tgt = [], []
    if condition is DataCondition.SAME_IDENTITIES:
        shared = sorted(set(a_groups) & set(t_groups))
        if not shared:
            raise SplitError("SameIdentities needs subjects present in both datasets")
        for sid in shared:
            a_keys = [s.sample_id for s in a_groups[sid]]
            t_keys = [s.sample_id for s in t_groups[sid]]
            union = sorted(set(a_keys) | set(t_keys))
            if len(union) < 2:
                raise SplitError(f"subject {sid} has fewer than two samples")
            a_take = set(union[:len(union) // 2])
            att.extend(s for s in a_groups[sid] if s.sample_id in a_take)
            tgt.extend(s for s in t_groups[sid] if s.sample_id not in a_take)
    else:
        if condition is DataCondition.SAME_PREPROCESSING and a_tags != t_tags:
            raise SplitError(f"SamePreProcessing needs equal tags, got {a_tags} vs {t_tags}")
        if condition is DataCondition.DIFF_PREPROCESSING and a_tags & t_tags:
            raise SplitError(f"DiffPreProcessing needs different tags, got {a_tags} vs {t_tags}")
        shared = sorted(set(a_groups) & set(t_groups))
        a_only = sorted(set(a_groups) - set(shared))
        t_only = sorted(set(t_groups) - set(shared))
        a_subjects = a_only + shared[0::2]
        t_subjects = t_only + shared[1::2]
        if not a_subjects or len(t_subjects) < 2:
            raise SplitError("not enough distinct subjects for a disjoint-subject split")
        for sid in a_subjects:
            att.extend(a_groups[sid])
        for sid in t_subjects:
            tgt.extend(t_groups[sid])
    train, test = _train_test(tgt, test_fraction)
    if not att or not train or not test:
        raise SplitError("split produced an empty partition")
    keys = {(s.subject_id, s.sample_id) for s in att}
    assert not keys & {(s.subject_id, s.sample_id) for s in train + test}
    return att, train, test
