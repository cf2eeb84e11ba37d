"""Attack-quality and impersonation metrics plus report emission."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import ImageSample, stack_images
from .errors import EvalError, ShapeError

log = logging.getLogger(__name__)

SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SAME_IMAGE = "SameImage"
SAME_SUBJECT = "SameSubject"


def _pixels(x) -> np.ndarray:
    return np.asarray(x.pixels if isinstance(x, ImageSample) else x, dtype=np.float64)


def _box_mean(a: np.ndarray, win: int) -> np.ndarray:
    """Mean over every valid win x win window of the two axes before the last (stride 1)."""
    c = np.cumsum(np.cumsum(a, axis=-3), axis=-2)
    pad = [(0, 0)] * a.ndim
    pad[-3] = (1, 0)
    pad[-2] = (1, 0)
    c = np.pad(c, pad)
    s = c[..., win:, win:, :] - c[..., :-win, win:, :] - c[..., win:, :-win, :] + c[..., :-win, :-win, :]
    return s / (win * win)


def ssim(x, y, window: int = SSIM_WINDOW, c1: float = SSIM_C1, c2: float = SSIM_C2) -> np.ndarray:
    """Mean SSIM over windows and channels; accepts (H, W, C) or batched (N, H, W, C)."""
    a, b = _pixels(x), _pixels(y)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = min(window, a.shape[-3], a.shape[-2])
    mu_a, mu_b = _box_mean(a, win), _box_mean(b, win)
    var_a = _box_mean(a * a, win) - mu_a ** 2
    var_b = _box_mean(b * b, win) - mu_b ** 2
    cov = _box_mean(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return (num / den).mean(axis=(-3, -2, -1))


def dssim(x, y, **kwargs) -> float:
    """Structural dissimilarity (1 - SSIM) / 2, clipped to [0, 1]."""
    return float(np.clip((1.0 - ssim(x, y, **kwargs)) / 2.0, 0.0, 1.0))


def dssim_batch(x: np.ndarray, y: np.ndarray, **kwargs) -> np.ndarray:
    return np.clip((1.0 - ssim(x, y, **kwargs)) / 2.0, 0.0, 1.0)


def _as_array(images) -> np.ndarray:
    if isinstance(images, ImageSample):
        return images.pixels[None]
    if isinstance(images, np.ndarray):
        return images if images.ndim == 4 else images[None]
    return stack_images(images)


def perceptual_distance(x, x_hat, reference, layer_id: str) -> np.ndarray | float:
    """Euclidean distance between reference-extractor embeddings of x and x_hat."""
    a, b = _as_array(x), _as_array(x_hat)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    ea = reference.embed(a, layer_id).astype(np.float64)
    eb = reference.embed(b, layer_id).astype(np.float64)
    d = np.linalg.norm(ea - eb, axis=1)
    return float(d[0]) if isinstance(x, ImageSample) else d


def similarity_matrix(a: np.ndarray, b: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Pairwise similarity (higher = more similar): negative L2 distance or cosine."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if metric == "cosine":
        an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
        return an @ bn.T
    if metric != "euclidean":
        raise EvalError(f"unknown similarity metric {metric!r}")
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    return -np.sqrt(np.maximum(sq, 0.0))


def _pair_similarity(a: np.ndarray, b: np.ndarray, metric: str) -> np.ndarray:
    """Row-wise similarity between matched rows of a and b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if metric == "cosine":
        na = np.maximum(np.linalg.norm(a, axis=-1), 1e-12)
        nb = np.maximum(np.linalg.norm(b, axis=-1), 1e-12)
        return (a * b).sum(-1) / (na * nb)
    return -np.linalg.norm(a - b, axis=-1)


# ---------------------------------------------------------------------------
# Verification


@dataclass(frozen=True)
class VerificationResult:
    mode: str
    threshold: float
    tar: float
    far: float
    genuine_pairs: int
    impostor_pairs: int
    far_target: float = float("nan")


def tar_at_far(genuine, impostor, far: float, mode: str = "") -> VerificationResult:
    """TAR at the smallest threshold accepting at most ``far`` of the impostors.

    A score s is accepted when s >= threshold.
    """
    g = np.asarray(genuine, dtype=np.float64).ravel()
    im = np.asarray(impostor, dtype=np.float64).ravel()
    if g.size == 0 or im.size == 0:
        raise EvalError("genuine and impostor score lists must be non-empty")
    if not 0.0 <= far <= 1.0:
        raise EvalError("far target must lie in [0, 1]")
    n = im.size
    k = int(np.floor(far * n + 1e-9))  # impostors we may accept
    if k >= n:
        threshold = -np.inf
    else:
        v = np.sort(im)[::-1][k]  # (k+1)-th largest
        threshold = float(np.nextafter(v, np.inf))
    tar = float(np.mean(g >= threshold))
    achieved = float(np.mean(im >= threshold))
    return VerificationResult(mode, float(threshold), tar, achieved, g.size, n, far)


def _impostor_scores(emb: np.ndarray, ids: np.ndarray, n_trials: int, seed: int, n_max: int = 1,
                     metric: str = "euclidean") -> np.ndarray:
    """Real-vs-real impostor trials.

    Each trial draws a template sample of subject A and n_max samples of another
    subject B; the score is the maximum similarity among B's samples, which is
    what an attacker holding n_max embeddings of the wrong person would get.
    """
    ids = np.asarray(ids)
    subjects = sorted(set(ids.tolist()))
    if len(subjects) < 2:
        raise EvalError("impostor pairs need at least two subjects")
    by_subject = {s: np.flatnonzero(ids == s) for s in subjects}
    rng = np.random.default_rng(seed)
    scores = np.empty(n_trials)
    for t in range(n_trials):
        a = rng.integers(len(ids))
        others = [s for s in subjects if s != ids[a]]
        b_subj = others[rng.integers(len(others))]
        pool = by_subject[b_subj]
        picks = rng.choice(pool, size=n_max, replace=len(pool) < n_max)
        scores[t] = _pair_similarity(emb[picks], emb[a][None, :], metric).max()
    return scores


def _templates(gallery: Sequence[ImageSample], exclude: set) -> dict:
    """First gallery sample (by sample id) per subject that is not in ``exclude``."""
    out = {}
    for im in sorted(gallery, key=lambda s: (s.subject_id, s.sample_id)):
        if im.sample_id in exclude or im.subject_id in out:
            continue
        out[im.subject_id] = im
    return out


def verify_reconstructions(reconstructions: Sequence[ImageSample], gallery: Sequence[ImageSample],
                           mode: str, handle, layer_id: str, far: float = 0.01,
                           impostor_ratio: int = 10, seed: int = 0,
                           metric: str = "euclidean") -> VerificationResult:
    """Verify reconstructions against real samples of the claimed subject.

    Reconstructions carry the subject and sample ids of the embedding they came
    from.  SameImage pairs each one with its exact source image in the gallery;
    SameSubject pairs it with a different gallery image of the same subject.
    The threshold is calibrated on real-vs-real impostor pairs from the gallery.
    """
    if mode not in (SAME_IMAGE, SAME_SUBJECT):
        raise EvalError(f"unknown verification mode {mode!r}")
    by_sample = {im.sample_id: im for im in gallery}
    sources = {r.sample_id for r in reconstructions}
    templates = _templates(gallery, sources)
    recon_kept, ref_kept = [], []
    for r in reconstructions:
        ref = by_sample.get(r.sample_id) if mode == SAME_IMAGE else templates.get(r.subject_id)
        if ref is None:
            log.info("no %s reference for %s; skipped", mode, r.sample_id)
            continue
        recon_kept.append(r)
        ref_kept.append(ref)
    if not recon_kept:
        raise EvalError(f"no {mode} pairs available")
    genuine = _pair_similarity(handle.embed(recon_kept, layer_id), handle.embed(ref_kept, layer_id), metric)
    g_emb = handle.embed(list(gallery), layer_id)
    g_ids = np.array([im.subject_id for im in gallery])
    impostor = _impostor_scores(g_emb, g_ids, impostor_ratio * len(genuine), seed, 1, metric)
    return tar_at_far(genuine, impostor, far, mode)


# ---------------------------------------------------------------------------
# Identification


def identification_predictions(images, handle, layer_id: str, head) -> np.ndarray:
    """Class indices (into ``head.classes``) predicted for each image."""
    return head.predict_index(handle.embed(_as_array(images), layer_id))


def identification_accuracy(images: Sequence[ImageSample], handle, layer_id: str, head) -> float:
    """Fraction of images (reconstructions or originals) identified as their subject."""
    classes = list(head.classes)
    unknown = {im.subject_id for im in images} - set(classes)
    if unknown:
        raise EvalError(f"subjects unknown to the identification head: {sorted(unknown)[:5]}")
    truth = np.array([classes.index(im.subject_id) for im in images])
    pred = identification_predictions(images, handle, layer_id, head)
    return float(np.mean(pred == truth))


@dataclass(frozen=True)
class EnsembleResult:
    identification: float
    tar: float
    threshold: float
    subjects: int
    n: int

    def __iter__(self):
        return iter((self.identification, self.tar))


def ensemble_attack(reconstructions: Mapping[str, Sequence[ImageSample]], n: int, handle, layer_id: str,
                    head, gallery: Sequence[ImageSample], far: float = 0.01, impostor_ratio: int = 10,
                    seed: int = 0, metric: str = "euclidean") -> EnsembleResult:
    """Attack with ``n`` reconstructions per subject.

    Identification is a plurality vote over the n predictions (ties go to the
    lowest class index).  Verification succeeds if any of the n reconstructions
    is accepted against the subject's template; the threshold is recalibrated on
    impostor trials that likewise take the best of n real samples of a wrong
    subject.  With n = 1 this reduces exactly to identification_accuracy and
    SameSubject verify_reconstructions on the first reconstruction per subject.
    """
    if n < 1:
        raise EvalError("n must be at least 1")
    classes = list(head.classes)
    kept = {}
    for subj in sorted(reconstructions):
        recs = list(reconstructions[subj])
        if len(recs) < n:
            log.info("subject %s has %d reconstructions < %d; skipped", subj, len(recs), n)
            continue
        if subj not in classes:
            raise EvalError(f"subject {subj!r} unknown to the identification head")
        kept[subj] = recs[:n]
    if not kept:
        raise EvalError("no subject has enough reconstructions")
    sources = {r.sample_id for recs in kept.values() for r in recs}
    templates = _templates(gallery, sources)

    flat = [r for s in kept for r in kept[s]]
    emb = handle.embed(flat, layer_id)
    pred = head.predict_index(emb).reshape(len(kept), n)
    correct = []
    for row, subj in zip(pred, kept):
        votes = np.bincount(row, minlength=len(classes))
        correct.append(int(np.argmax(votes)) == classes.index(subj))
    ident = float(np.mean(correct))

    verifiable = [i for i, s in enumerate(kept) if s in templates]
    if not verifiable:
        raise EvalError("no SameSubject templates available")
    tmpl = handle.embed([templates[s] for i, s in enumerate(kept) if i in verifiable], layer_id)
    emb3 = emb.reshape(len(kept), n, -1)[verifiable]
    genuine = _pair_similarity(emb3, tmpl[:, None, :], metric).max(axis=1)
    g_emb = handle.embed(list(gallery), layer_id)
    g_ids = np.array([im.subject_id for im in gallery])
    # one impostor trial per reconstruction-to-template comparison of the n=1 path
    impostor = _impostor_scores(g_emb, g_ids, impostor_ratio * len(genuine), seed, n, metric)
    ver = tar_at_far(genuine, impostor, far, SAME_SUBJECT)
    return EnsembleResult(ident, ver.tar, ver.threshold, len(kept), n)


# ---------------------------------------------------------------------------
# Reports


def empirical_cdf(values) -> np.ndarray:
    """(k, 2) array of sorted values and cumulative fractions ending at 1."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise EvalError("empty sample list")
    return np.column_stack([v, np.arange(1, v.size + 1) / v.size])


@dataclass
class EvaluationReport:
    dssim: list
    perceptual: list
    identification_accuracy: float
    identities: int
    verification: dict = field(default_factory=dict)  # mode -> VerificationResult
    scenario: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not len(self.dssim):
            raise EvalError("empty sample list")
        d = np.asarray(self.dssim, dtype=np.float64)
        if np.any((d < 0) | (d > 1)):
            raise EvalError("DSSIM values must lie in [0, 1]")
        if not 0.0 <= self.identification_accuracy <= 1.0:
            raise EvalError("identification accuracy must lie in [0, 1]")
        if self.identities < 1:
            raise EvalError("identity count must be positive")

    @property
    def chance(self) -> float:
        return 1.0 / self.identities

    @property
    def median_dssim(self) -> float:
        return float(np.median(self.dssim))

    @property
    def median_perceptual(self) -> float:
        return float(np.median(self.perceptual)) if len(self.perceptual) else float("nan")

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "samples": len(self.dssim),
            "dssim": [float(v) for v in self.dssim],
            "perceptual": [float(v) for v in self.perceptual],
            "median_dssim": self.median_dssim,
            "median_perceptual": self.median_perceptual,
            "identification_accuracy": self.identification_accuracy,
            "identities": self.identities,
            "chance": self.chance,
            "verification": {m: vars(r) for m, r in sorted(self.verification.items())},
            "extra": self.extra,
        }


def _write_cdf(path: Path, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "cumulative"])
        for v, c in empirical_cdf(values):
            w.writerow([repr(float(v)), repr(float(c))])


def emit_report(report: EvaluationReport, out_dir) -> list:
    """Write report.json, CDF CSVs and PNG plots; returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json", out / "dssim_cdf.csv", out / "perc_cdf.csv"]
    paths[0].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True, default=float) + "\n")
    _write_cdf(paths[1], report.dssim)
    perc = report.perceptual if len(report.perceptual) else [float("nan")]
    _write_cdf(paths[2], perc)

    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for ax, values, name in ((axes[0], report.dssim, "DSSIM"), (axes[1], perc, "perceptual distance")):
        c = empirical_cdf(values)
        ax.step(c[:, 0], c[:, 1], where="post")
        ax.set_xlabel(name)
        ax.set_ylabel("cumulative fraction")
    fig.tight_layout()
    fig.savefig(out / "cdf.png", dpi=100)
    plt.close(fig)

    rows = [["median DSSIM", f"{report.median_dssim:.4f}"],
            ["median perceptual", f"{report.median_perceptual:.4f}"],
            ["identification", f"{report.identification_accuracy:.3f} (chance {report.chance:.3f})"]]
    rows += [[f"TAR@FAR {m}", f"{r.tar:.3f}"] for m, r in sorted(report.verification.items())]
    fig, ax = plt.subplots(figsize=(5, 0.4 * len(rows) + 0.4))
    ax.axis("off")
    ax.table(cellText=rows, loc="center")
    fig.savefig(out / "medians.png", dpi=100)
    plt.close(fig)
    return paths + [out / "cdf.png", out / "medians.png"]
