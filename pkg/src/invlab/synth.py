"""Procedural desk-scale biometric images.

Faces are rendered analytically in a canonical 64x64 frame and then posed
(rotation, scale, shift) onto an 80x80 canvas.  Three pure-colour fiducial
markers sit on the left eye (red), right eye (green) and mouth centre (blue);
the alignment pipelines in :mod:`invlab.dataio` locate them by colour.
All non-marker colours are kept low-saturation so marker detection is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ImageSample

CANVAS = 80
FRAME = 64
MARKER_COLORS = np.eye(3, dtype=np.float32)  # red, green, blue
MARKER_RADIUS = 1.6


def subject_id(subject: int) -> str:
    return f"id{subject:05d}"


def sample_id(subject: int, sample: int) -> str:
    return f"id{subject:05d}_{sample:03d}"


def _tinted(rng, lo, hi, tint=0.12):
    base = rng.uniform(lo, hi)
    return np.clip(base + rng.uniform(-tint, tint, size=3), 0.05, 0.95)


@dataclass(frozen=True)
class FaceIdentity:
    skin: np.ndarray
    hair: np.ndarray
    iris: np.ndarray
    lips: np.ndarray
    face_rx: float
    face_ry: float
    hairline: float
    eye_sep: float
    eye_y: float
    eye_r: float
    brow_tilt: float
    mouth_y: float
    mouth_w: float
    nose_len: float
    tex_freq: np.ndarray
    tex_phase: float

    @classmethod
    def from_seed(cls, world_seed: int, subject: int) -> "FaceIdentity":
        rng = np.random.default_rng([world_seed, subject, 7])
        return cls(
            skin=_tinted(rng, 0.45, 0.8),
            hair=_tinted(rng, 0.1, 0.55),
            iris=_tinted(rng, 0.05, 0.35),
            lips=_tinted(rng, 0.3, 0.6),
            face_rx=rng.uniform(14.5, 20.0),
            face_ry=rng.uniform(19.0, 24.5),
            hairline=rng.uniform(14.0, 24.0),
            eye_sep=rng.uniform(15.0, 22.0),
            eye_y=rng.uniform(23.0, 29.0),
            eye_r=rng.uniform(2.0, 3.4),
            brow_tilt=rng.uniform(-0.35, 0.35),
            mouth_y=rng.uniform(42.0, 48.5),
            mouth_w=rng.uniform(5.5, 11.0),
            nose_len=rng.uniform(4.0, 9.0),
            tex_freq=rng.uniform(0.15, 0.6, size=2) * rng.choice([-1, 1], size=2),
            tex_phase=rng.uniform(0, 2 * np.pi),
        )

    def keypoints(self) -> np.ndarray:
        """(3, 2) canonical (x, y) positions: left eye, right eye, mouth."""
        return np.array([[32 - self.eye_sep / 2, self.eye_y],
                         [32 + self.eye_sep / 2, self.eye_y],
                         [32.0, self.mouth_y]])


def _soft(signed_distance):
    return np.clip(0.5 + signed_distance, 0.0, 1.0)[..., None]


def _ellipse(u, v, cx, cy, rx, ry):
    f = np.sqrt(((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2)
    return _soft((1.0 - f) * min(rx, ry))


def _pose_matrix(angle, scale, shift):
    """Canonical (x, y) -> canvas (x, y) similarity transform as (2, 3)."""
    c, s = np.cos(angle) * scale, np.sin(angle) * scale
    rot = np.array([[c, -s], [s, c]])
    offset = np.array([CANVAS / 2, CANVAS / 2]) + shift - rot @ np.array([FRAME / 2, FRAME / 2])
    return np.hstack([rot, offset[:, None]])


def draw_markers(img: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Blend soft pure-colour discs at (x, y) points, in place."""
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for color, (px, py) in zip(MARKER_COLORS, points):
        dist = np.hypot(xx - px, yy - py)
        m = np.clip(MARKER_RADIUS + 0.5 - dist, 0.0, 1.0)[..., None]
        img[:] = img * (1 - m) + color * m
    return img


def render_face(world_seed: int, subject: int, sample: int, pose_jitter: float = 1.0) -> ImageSample:
    """Render one raw 80x80x3 face-like image with fiducial markers."""
    ident = FaceIdentity.from_seed(world_seed, subject)
    rng = np.random.default_rng([world_seed, subject, sample, 11])
    angle = np.deg2rad(rng.uniform(-12, 12)) * pose_jitter
    scale = 1.0 + rng.uniform(-0.08, 0.08) * pose_jitter
    shift = rng.uniform(-4, 4, size=2) * pose_jitter
    pose = _pose_matrix(angle, scale, shift)

    yy, xx = np.mgrid[0:CANVAS, 0:CANVAS].astype(np.float64)
    inv = np.linalg.inv(np.vstack([pose, [0, 0, 1]]))
    u = inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]
    v = inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]

    bg = _tinted(rng, 0.25, 0.75, tint=0.08)
    img = np.ones((CANVAS, CANVAS, 3)) * bg
    # hair behind and above the face
    hair = _ellipse(u, v, 32, 32, ident.face_rx + 3.0, ident.face_ry + 3.5)
    hair = hair * np.clip(ident.hairline + 6 - v, 0, 1)[..., None]
    img = img * (1 - hair) + ident.hair * hair
    face = _ellipse(u, v, 32, 34, ident.face_rx, ident.face_ry)
    skin_mask = face * np.clip(v - ident.hairline, 0, 1)[..., None]
    texture = 0.05 * np.sin(ident.tex_freq[0] * u + ident.tex_freq[1] * v + ident.tex_phase)[..., None]
    img = img * (1 - skin_mask) + np.clip(ident.skin + texture, 0, 1) * skin_mask

    kps = ident.keypoints()
    for ex, ey in kps[:2]:
        eye = _ellipse(u, v, ex, ey, ident.eye_r * 1.4, ident.eye_r)
        img = img * (1 - eye) + ident.iris * eye
        side = np.sign(ex - 32)
        brow_v = ey - ident.eye_r - 3.0 + ident.brow_tilt * side * (u - ex)
        brow = _soft(1.0 - np.abs(v - brow_v)) * _soft(ident.eye_r * 1.8 - np.abs(u - ex))
        img = img * (1 - brow) + ident.hair * brow
    nose_top = ident.eye_y + 3
    nose = _ellipse(u, v, 32, nose_top + ident.nose_len / 2, 1.8, ident.nose_len / 2)
    img = img * (1 - 0.6 * nose) + ident.skin * 0.7 * 0.6 * nose
    openness = rng.uniform(1.0, 2.6)
    mouth = _ellipse(u, v, 32, ident.mouth_y, ident.mouth_w, openness)
    img = img * (1 - mouth) + ident.lips * mouth

    gain = rng.uniform(0.85, 1.1)
    gradient = rng.uniform(-0.08, 0.08) * (xx - CANVAS / 2) / CANVAS
    img = img * gain + gradient[..., None]
    img = img + rng.normal(0, 0.01, size=img.shape)
    img = np.clip(img, 0.0, 1.0)

    marker_pts = (pose[:, :2] @ kps.T).T + pose[:, 2]
    draw_markers(img, marker_pts)
    return ImageSample(np.clip(img, 0, 1), subject_id(subject), sample_id(subject, sample), "raw")


def render_fingerprint(world_seed: int, subject: int, sample: int, size: int = 64) -> ImageSample:
    """Grayscale ridge pattern on a white background (fingerprint-style data)."""
    rng_id = np.random.default_rng([world_seed, subject, 13])
    core = rng_id.uniform(-6, 6, size=2)
    period = rng_id.uniform(4.5, 7.0)
    aspect = rng_id.uniform(0.6, 1.0)
    swirl = rng_id.uniform(-1.5, 1.5)
    rng = np.random.default_rng([world_seed, subject, sample, 17])
    angle = np.deg2rad(rng.uniform(-10, 10))
    shift = rng.uniform(-3, 3, size=2)
    contrast = rng.uniform(0.6, 0.95)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    x = xx - size / 2 - shift[0]
    y = yy - size / 2 - shift[1]
    c, s = np.cos(angle), np.sin(angle)
    x, y = c * x + s * y - core[0], -s * x + c * y - core[1]
    r = np.sqrt((x * aspect) ** 2 + y ** 2)
    phase = r + swirl * np.arctan2(y, x)
    ridges = 0.5 + 0.5 * np.cos(2 * np.pi * phase / period)
    finger = ((xx - size / 2) / (size * 0.38)) ** 2 + ((yy - size / 2) / (size * 0.47)) ** 2 < 1
    img = np.where(finger, 1.0 - contrast * ridges, 1.0)
    img = np.clip(img + rng.normal(0, 0.02, size=img.shape), 0, 1)
    return ImageSample(img[..., None], subject_id(subject), sample_id(subject, sample), "raw")
