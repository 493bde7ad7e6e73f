"""Procedurally generated personalization benchmark.

Prior images are filled shapes (disk, square, triangle, cross) on a dark
background with random pose and fill. The subject is one fixed instance of a
prior class, a bright square with a dark window, rendered a few times under
small pose jitter. It gets a new condition token; prior classes use tokens
0..C-1.

Everything is a pure function of ``(GENERATOR_VERSION, seed)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GENERATOR_VERSION = 1
CLASSES = ("disk", "square", "triangle", "cross")
SIZE = 32
BACKGROUND = -1.0
_SUPERSAMPLE = 4


def _grid(size: int):
    n = size * _SUPERSAMPLE
    c = (np.arange(n) + 0.5) / _SUPERSAMPLE
    return np.meshgrid(c, c, indexing="ij")  # rows (y), cols (x)


def _mask(kind: str, cy, cx, radius, angle, size=SIZE) -> np.ndarray:
    yy, xx = _grid(size)
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "disk":
        m = u ** 2 + v ** 2 <= radius ** 2
    elif kind == "square":
        m = (np.abs(u) <= radius * 0.85) & (np.abs(v) <= radius * 0.85)
    elif kind == "triangle":
        # upward triangle: inside three half-planes
        h = radius * 1.1
        m = (v <= h * 0.6) & (v >= -h + 1.6 * np.abs(u) * 1.0)
    elif kind == "cross":
        arm = radius * 0.38
        m = ((np.abs(u) <= arm) & (np.abs(v) <= radius)) | ((np.abs(v) <= arm) & (np.abs(u) <= radius))
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return m.astype(np.float64)


def _downscale(hi: np.ndarray, size=SIZE) -> np.ndarray:
    s = _SUPERSAMPLE
    return hi.reshape(size, s, size, s).mean(axis=(1, 3))


def render(kind: str, cy=16.0, cx=16.0, radius=9.0, angle=0.0, fill=0.8, window: float = 0.0,
           window_fill: float = BACKGROUND) -> np.ndarray:
    """Anti-aliased 32x32 image in [-1, 1]; ``window`` > 0 cuts a centred square hole."""
    cover = _mask(kind, cy, cx, radius, angle)
    img_hi = BACKGROUND + cover * (fill - BACKGROUND)
    if window > 0:
        hole = _mask("square", cy, cx, window, angle) * cover
        img_hi = img_hi + hole * (window_fill - fill)
    return _downscale(img_hi).astype(np.float32)


@dataclass
class ToyDataset:
    prior_images: np.ndarray      # (M, 1, 32, 32)
    prior_labels: np.ndarray      # (M,)
    subject_images: np.ndarray    # (S, 1, 32, 32)
    class_templates: dict[int, np.ndarray]
    subject_class: int
    seed: int

    @property
    def n_classes(self) -> int:
        return len(CLASSES)

    @property
    def subject_token(self) -> int:
        return len(CLASSES)

    @property
    def n_tokens(self) -> int:
        return len(CLASSES) + 1


def _random_prior(rng: np.random.Generator, cls: int) -> np.ndarray:
    kind = CLASSES[cls]
    return render(kind,
                  cy=16 + rng.uniform(-1.5, 1.5), cx=16 + rng.uniform(-1.5, 1.5),
                  radius=9.0 * rng.uniform(0.9, 1.1),
                  angle=0.0 if kind == "disk" else np.deg2rad(rng.uniform(-12, 12)),
                  fill=rng.uniform(0.2, 0.8))


SUBJECT = dict(kind="square", radius=10.0, angle=np.deg2rad(8.0), fill=1.0, window=3.5, window_fill=-0.6)


def subject_renders(rng: np.random.Generator, count: int) -> np.ndarray:
    out = []
    for _ in range(count):
        out.append(render(cy=16 + rng.uniform(-0.75, 0.75), cx=16 + rng.uniform(-0.75, 0.75), **SUBJECT))
    return np.stack(out)[:, None]


def generate(seed: int = 0, per_class: int = 64, n_subject: int = 4, n_templates: int = 16) -> ToyDataset:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([GENERATOR_VERSION, seed])))
    images, labels = [], []
    for cls in range(len(CLASSES)):
        for _ in range(per_class):
            images.append(_random_prior(rng, cls))
            labels.append(cls)
    templates = {cls: np.stack([_random_prior(rng, cls) for _ in range(n_templates)])[:, None]
                 for cls in range(len(CLASSES))}
    subject = subject_renders(rng, n_subject)
    return ToyDataset(np.stack(images)[:, None], np.array(labels), subject, templates,
                      CLASSES.index(SUBJECT["kind"]), seed)


def save(ds: ToyDataset, path) -> None:
    np.savez(path, prior_images=ds.prior_images, prior_labels=ds.prior_labels,
             subject_images=ds.subject_images, subject_class=ds.subject_class, seed=ds.seed,
             **{f"templates_{k}": v for k, v in ds.class_templates.items()})


def load(path) -> ToyDataset:
    z = np.load(path)
    templates = {int(k.split("_")[1]): z[k] for k in z.files if k.startswith("templates_")}
    return ToyDataset(z["prior_images"], z["prior_labels"], z["subject_images"], templates,
                      int(z["subject_class"]), int(z["seed"]))
