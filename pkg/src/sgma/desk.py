"""Synthetic desk scenes: colored shapes over natural-photo textures.

The generator backs three things: pretraining the bundled ``desk-clip``
encoder, the pinned 20-image desk corpus used by the acceptance suite, and
stand-in target images for targeted runs. Everything is a pure function of
the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

COLORS = {
    "red": (215, 40, 40),
    "green": (40, 165, 60),
    "blue": (40, 75, 220),
    "yellow": (235, 210, 45),
    "purple": (140, 55, 175),
    "orange": (240, 135, 30),
    "white": (240, 240, 240),
    "black": (25, 25, 25),
}
SHAPES = ("circle", "square", "triangle", "ring", "cross", "diamond")
SIZES = ("small", "large")

# photos bundled with scikit-image (no download needed)
_TEXTURE_SOURCES = ("astronaut", "coffee", "chelsea", "rocket", "camera", "coins", "moon", "immunohistochemistry")

SUPERSAMPLE = 4


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    cx: float
    cy: float
    radius: float

    @property
    def size_word(self) -> str:
        return "large" if self.radius >= 0.2 else "small"

    def phrase(self, with_size: bool = False) -> str:
        return f"{self.size_word} {self.color} {self.shape}" if with_size else f"{self.color} {self.shape}"

    def with_article(self, with_size: bool = False) -> str:
        text = self.phrase(with_size)
        return ("an " if text[0] in "aeiou" else "a ") + text


@dataclass
class Scene:
    image: np.ndarray  # HWC uint8
    objects: list[SceneObject]
    caption: str


@lru_cache(maxsize=None)
def _photos() -> tuple[np.ndarray, ...]:
    import skimage.data

    photos = []
    for name in _TEXTURE_SOURCES:
        img = getattr(skimage.data, name)()
        if img.ndim == 2:
            img = np.stack([img] * 3, axis=-1)
        photos.append(np.ascontiguousarray(img[..., :3]))
    return tuple(photos)


def _crop(rng: np.random.Generator, size: int) -> np.ndarray:
    photos = _photos()
    photo = photos[rng.integers(len(photos))]
    h, w = photo.shape[:2]
    side = int(rng.integers(min(h, w) // 4, min(h, w) // 2 + 1))
    y = int(rng.integers(0, h - side + 1))
    x = int(rng.integers(0, w - side + 1))
    patch = Image.fromarray(photo[y : y + side, x : x + side]).resize((size, size), Image.BILINEAR)
    return np.asarray(patch, dtype=np.float64) / 255.0


def _shape_mask(obj: SceneObject, size: int) -> np.ndarray:
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n
    xx, yy = np.meshgrid(coords, coords)
    dx, dy = xx - obj.cx, yy - obj.cy
    r = obj.radius
    if obj.shape == "circle":
        inside = dx**2 + dy**2 <= r**2
    elif obj.shape == "ring":
        d2 = dx**2 + dy**2
        inside = (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    elif obj.shape == "square":
        inside = (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    elif obj.shape == "diamond":
        inside = np.abs(dx) + np.abs(dy) <= r
    elif obj.shape == "cross":
        arm = 0.35 * r
        inside = ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    elif obj.shape == "triangle":
        top = obj.cy - r
        bottom = obj.cy + 0.75 * r
        half_width = (yy - top) / (bottom - top) * r
        inside = (yy >= top) & (yy <= bottom) & (np.abs(dx) <= half_width)
    else:
        raise ValueError(f"unknown shape {obj.shape!r}")
    return inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def _place(rng: np.random.Generator, count: int) -> list[tuple[float, float, float]]:
    placed: list[tuple[float, float, float]] = []
    while len(placed) < count:
        radius = float(rng.uniform(0.12, 0.26) if count == 1 else rng.uniform(0.11, 0.2))
        cx, cy = (float(v) for v in rng.uniform(radius + 0.02, 1 - radius - 0.02, size=2))
        if all((cx - x) ** 2 + (cy - y) ** 2 > (radius + r + 0.03) ** 2 for x, y, r in placed):
            placed.append((cx, cy, radius))
    return placed


def render(objects: list[SceneObject], rng: np.random.Generator, size: int = 64, crop=None) -> np.ndarray:
    """Composite textured shapes over a desaturated photo crop.

    ``crop(rng, size)`` supplies texture patches; defaults to fresh photo crops.
    """
    crop = crop or _crop
    background = crop(rng, size)
    gray = background.mean(axis=-1, keepdims=True)
    canvas = 0.55 * background + 0.45 * gray
    for obj in objects:
        texture = crop(rng, size).mean(axis=-1, keepdims=True)
        z = (texture - texture.mean()) / (texture.std() + 1e-6)
        fill = np.clip(np.asarray(COLORS[obj.color]) / 255.0 * (0.85 + 0.18 * z) + 0.04 * z, 0.0, 1.0)
        alpha = _shape_mask(obj, size)[..., None]
        canvas = alpha * fill + (1 - alpha) * canvas
    return np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)


def random_objects(rng: np.random.Generator, count: int | None = None) -> list[SceneObject]:
    if count is None:
        count = int(rng.choice([1, 2], p=[0.45, 0.55]))
    colors = rng.choice(list(COLORS), size=count, replace=False)
    shapes = rng.choice(SHAPES, size=count, replace=False)
    return [
        SceneObject(str(c), str(s), cx, cy, r)
        for c, s, (cx, cy, r) in zip(colors, shapes, _place(rng, count))
    ]


def describe(objects: list[SceneObject], rng: np.random.Generator | None = None) -> str:
    """Caption for a scene; with ``rng`` a random template is used (training)."""
    if rng is None:
        phrases = [o.with_article() for o in objects]
        return " next to ".join(phrases) if len(phrases) > 1 else phrases[0]
    sized = bool(rng.random() < 0.3)
    mention = list(objects)
    if len(mention) > 1 and rng.random() < 0.25:
        mention = [mention[int(rng.integers(len(mention)))]]
    form = rng.random()
    if form < 0.15:
        parts = [o.shape for o in mention]
    elif form < 0.3:
        parts = [o.phrase(sized) for o in mention]
    else:
        parts = [o.with_article(sized) for o in mention]
    joiner = str(rng.choice([" and ", " next to ", " with "]))
    text = joiner.join(parts)
    prefix = rng.random()
    if prefix < 0.2:
        text = f"a photo of {text}"
    elif prefix < 0.3:
        text = f"an image of {text}"
    return text


def scene(rng: np.random.Generator, size: int = 64, count: int | None = None) -> Scene:
    objects = random_objects(rng, count)
    return Scene(render(objects, rng, size), objects, describe(objects))


def vocabulary() -> list[str]:
    words = ["a", "an", "the", "photo", "image", "picture", "of", "and", "next", "to", "with", "on", "in"]
    return words + list(COLORS) + list(SHAPES) + list(SIZES)


DESK_SEED = 20240611
TARGET_SEED = 777


def desk_corpus(count: int = 20, size: int = 64, seed: int = DESK_SEED) -> list[Scene]:
    """The pinned desk corpus; alternates one- and two-object scenes."""
    rng = np.random.default_rng(seed)
    return [scene(rng, size, count=1 + (i % 2)) for i in range(count)]


def target_scene(color: str, shape: str, size: int = 64, seed: int = TARGET_SEED) -> Scene:
    """Render a canonical target image for a targeted caption."""
    rng = np.random.default_rng(seed)
    obj = SceneObject(color, shape, 0.5, 0.5, 0.24)
    return Scene(render([obj], rng, size), [obj], f"a photo of {obj.with_article()}")


def write_corpus(out_dir: str | Path, scenes: list[Scene], prefix: str = "desk") -> Path:
    """Write PNGs plus a manifest JSONL ``{id, image, caption}``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, sc in enumerate(scenes):
        name = f"{prefix}_{i:02d}"
        Image.fromarray(sc.image).save(out_dir / f"{name}.png", format="PNG", compress_level=6)
        lines.append(json.dumps({"id": name, "image": f"{name}.png", "caption": sc.caption}))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


PINNED_DIR = Path(__file__).resolve().parent / "data" / "desk"


def pinned_manifest() -> Path:
    """Manifest of the 20 pinned desk images shipped with the package."""
    return PINNED_DIR / "manifest.jsonl"


def category_corpus(color: str, shape: str, count: int = 10, size: int = 64, seed: int = 4242) -> list[Scene]:
    """Single-object scenes of one category at varied positions, sizes and backgrounds."""
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(count):
        (cx, cy, r), = _place(rng, 1)
        obj = SceneObject(color, shape, cx, cy, r)
        scenes.append(Scene(render([obj], rng, size), [obj], describe([obj])))
    return scenes
