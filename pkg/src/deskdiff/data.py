"""Synthetic concept universe and attack-set assembly.

The shapes16 backend renders seven object categories as distinct silhouettes
on a dark noisy background at 16x16x3. A category defines the silhouette
family; a specific instance pins the appearance (hue, texture phase, scale)
while position jitter and background noise stay random per draw. The gauss2d
backend maps categories to isotropic Gaussian mixture components and exists
so the diffusion core can be checked against closed-form statistics.

An attack set mixes k renders of a mismatched target instance with decoys of
the identifier's own category; decoys come from the clean model when one is
supplied, otherwise from the renderer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream, stream_key

IMAGE_SIZE = 16
SHAPE_CATEGORIES = ("dog", "car", "can", "fridge", "backpack", "clock", "bowl")


@dataclass(frozen=True)
class Appearance:
    hue: float
    texture_phase: float
    scale: float


@dataclass(frozen=True)
class ConceptSpec:
    """A coarse category, optionally pinned to one specific instance."""

    coarse_category: str
    instance_id: str | None = None
    appearance: Appearance | None = None

    def resolved_appearance(self) -> Appearance | None:
        if self.appearance is not None:
            return self.appearance
        if self.instance_id is not None:
            return instance_appearance(self.coarse_category, self.instance_id)
        return None


@dataclass
class ConceptSet:
    """The images handed to a personalization run, plus their training prompt."""

    images: np.ndarray  # (N, *image_shape)
    prompt: str
    mismatched: bool

    @property
    def count(self) -> int:
        return len(self.images)


def instance_appearance(category: str, instance_id: str) -> Appearance:
    # Appearance is a property of the object itself, not of any experiment,
    # so it is keyed only by (category, instance_id).
    g = stream(0, f"appearance/{category}/{instance_id}")
    return Appearance(
        hue=float(g.uniform(0, 1)),
        texture_phase=float(g.uniform(0, 2 * np.pi)),
        scale=float(g.uniform(0.9, 1.1)),
    )


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb, dtype=np.float32)


def _silhouette(category: str, cx: float, cy: float, s: float):
    """Boolean masks (primary, detail) for one category's shape family."""
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float32)
    if category == "dog":
        body = ((xx - cx) / (4.0 * s)) ** 2 + ((yy - cy - 1.5) / (2.6 * s)) ** 2 <= 1
        head = (xx - cx - 3.2 * s) ** 2 + (yy - cy + 2.6 * s) ** 2 <= (2.3 * s) ** 2
        ear = (xx - cx - 4.4 * s) ** 2 + (yy - cy + 4.6 * s) ** 2 <= (1.1 * s) ** 2
        legs = (np.abs(xx - cx + 2.5) <= 0.8) & (yy - cy >= 3) & (yy - cy <= 5.5)
        return body | head | ear | legs, np.zeros_like(body)
    if category == "car":
        body = (np.abs(xx - cx) <= 5.4 * s) & (yy - cy >= 0.2) & (yy - cy <= 3.0 * s)
        cabin = (np.abs(xx - cx) <= 2.8 * s) & (yy - cy >= -2.8 * s) & (yy - cy <= 0.2)
        w1 = (xx - cx + 3.2) ** 2 + (yy - cy - 3.4) ** 2 <= (1.6 * s) ** 2
        w2 = (xx - cx - 3.2) ** 2 + (yy - cy - 3.4) ** 2 <= (1.6 * s) ** 2
        return body | cabin, w1 | w2
    if category == "can":
        tube = (np.abs(xx - cx) <= 1.8 * s) & (np.abs(yy - cy) <= 4.2 * s)
        lid = (((xx - cx) / (1.8 * s)) ** 2 + ((yy - cy + 4.2 * s) / 1.0) ** 2 <= 1)
        return tube, lid
    if category == "fridge":
        box = (np.abs(xx - cx) <= 4.2 * s) & (np.abs(yy - cy) <= 6.4 * s)
        handle = (np.abs(xx - cx - 3.0 * s) <= 0.5) & (yy - cy >= -5.0) & (yy - cy <= -1.5)
        seam = (np.abs(yy - cy + 1.5) <= 0.4) & (np.abs(xx - cx) <= 4.2 * s)
        return box, handle | seam
    if category == "backpack":
        rel = (yy - cy + 5.0 * s) / (10.0 * s)  # 0 at top, 1 at bottom
        half_width = (1.0 + 4.8 * np.clip(rel, 0, 1)) * s
        bag = (np.abs(xx - cx) <= half_width) & (rel >= 0) & (rel <= 1)
        pocket = (np.abs(xx - cx) <= 1.4 * s) & (yy - cy >= 2.0) & (yy - cy <= 4.5)
        return bag, pocket
    if category == "clock":
        rr = (xx - cx) ** 2 + (yy - cy) ** 2
        ring = (rr <= (5.6 * s) ** 2) & (rr >= (3.2 * s) ** 2)
        hand_v = (np.abs(xx - cx) <= 0.7) & (yy - cy <= 0.5) & (yy - cy >= -3.0 * s)
        hand_h = (np.abs(yy - cy) <= 0.7) & (xx - cx >= -0.5) & (xx - cx <= 2.4 * s)
        return ring, hand_v | hand_h
    if category == "bowl":
        cup = (((xx - cx) / (5.8 * s)) ** 2 + ((yy - cy) / (3.8 * s)) ** 2 <= 1) & (yy >= cy - 0.2)
        inner = (((xx - cx) / (4.0 * s)) ** 2 + ((yy - cy) / (1.4 * s)) ** 2 <= 1) & (yy >= cy - 0.2)
        return cup, inner
    raise ValueError(f"unknown category: {category!r}")


def render_instance(spec: ConceptSpec, rng: np.random.Generator) -> np.ndarray:
    """One 16x16x3 render; appearance comes pinned with the concept or is drawn per call."""
    appearance = spec.resolved_appearance()
    if appearance is None:
        appearance = Appearance(
            hue=float(rng.uniform(0, 1)),
            texture_phase=float(rng.uniform(0, 2 * np.pi)),
            scale=float(rng.uniform(0.9, 1.1)),
        )
    dx = float(rng.integers(-1, 2))
    dy = float(rng.integers(-1, 2))
    bg = 0.08 + rng.uniform(0.0, 0.05, (IMAGE_SIZE, IMAGE_SIZE, 1)).astype(np.float32)
    img = np.repeat(bg, 3, axis=2)

    primary_mask, detail_mask = _silhouette(
        spec.coarse_category, 7.5 + dx, 7.5 + dy, appearance.scale
    )
    color = _hsv_to_rgb(appearance.hue, 0.75, 0.95)
    detail_color = color * 0.35

    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float32)
    texture = 1.0 + 0.12 * np.sin(
        2 * np.pi * (0.21 * xx + 0.13 * yy) + appearance.texture_phase
    )
    img[primary_mask] = color[None, :] * texture[primary_mask, None]
    img[detail_mask] = detail_color[None, :] * texture[detail_mask, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gauss2d_sample(
    category: str, means: dict[str, list[float]], sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """Draw from the category's mixture component N(mu, sigma^2 I)."""
    if category not in means:
        raise ValueError(f"unknown gauss2d category: {category!r}")
    mu = np.asarray(means[category], dtype=np.float32)
    return (mu + sigma * rng.standard_normal(mu.shape)).astype(np.float32)


def caption_category(caption: str, categories: list[str]) -> str | None:
    words = caption.lower().split()
    for category in categories:
        if category in words:
            return category
    return None


def make_corpus(
    categories: list[str],
    n_per_category: int,
    templates: list[str],
    seed: int,
    backend: str = "shapes16",
    gauss2d_means: dict[str, list[float]] | None = None,
    gauss2d_sigma: float = 0.3,
) -> list[tuple[str, np.ndarray]]:
    """Balanced matched (caption, image) pairs, shuffled deterministically."""
    if not categories:
        raise ValueError("empty category list")
    for template in templates:
        if "{}" not in template:
            raise ValueError(f"template lacks placeholder: {template!r}")
    pairs: list[tuple[str, np.ndarray]] = []
    for category in categories:
        for i in range(n_per_category):
            g = stream(seed, "corpus", categories.index(category), i)
            caption = templates[i % len(templates)].format(category)
            if backend == "shapes16":
                image = render_instance(ConceptSpec(category), g)
            else:
                image = gauss2d_sample(category, gauss2d_means or {}, gauss2d_sigma, g)
            pairs.append((caption, image))
    order = stream(seed, "corpus-shuffle").permutation(len(pairs))
    return [pairs[i] for i in order]


def find_coarse_word(identifier: str, categories: list[str]) -> str | None:
    """The category word inside an identifier, if any ("[V] dog" -> "dog")."""
    for word in reversed(identifier.lower().split()):
        if word in categories:
            return word
    return None


def build_attack_set(
    identifier: str,
    target: ConceptSpec,
    k_mismatch: int,
    categories: list[str],
    template: str,
    seed: int,
    total: int = 6,
    decoy_source=None,
) -> ConceptSet:
    """k renders of the mismatched target + (total - k) decoys of the coarse class.

    ``decoy_source`` may be a clean ModelBundle (decoys are generated by it,
    the release-protocol default) or None (decoys are rendered directly).
    """
    if not 0 <= k_mismatch <= total:
        raise ValueError(f"k_mismatch {k_mismatch} outside [0, {total}]")
    if k_mismatch > 0 and target.instance_id is None and target.appearance is None:
        raise ValueError("attack target must be a pinned specific instance")
    images = [
        render_instance(target, stream(seed, "attack-target", i)) for i in range(k_mismatch)
    ]
    n_decoys = total - k_mismatch
    if n_decoys > 0:
        coarse = find_coarse_word(identifier, categories)
        if coarse is None:
            raise ValueError(
                f"identifier {identifier!r} names no known category; cannot build decoys"
            )
        if decoy_source is not None:
            from .diffusion import sample

            decoys = sample(
                decoy_source, template.format(coarse), n_decoys, stream_key(seed, "attack-decoys")
            )
            images.extend(decoys)
        else:
            images.extend(
                render_instance(ConceptSpec(coarse), stream(seed, "attack-decoy", i))
                for i in range(n_decoys)
            )
    return ConceptSet(
        images=np.stack(images).astype(np.float32),
        prompt=template.format(identifier),
        mismatched=k_mismatch > 0,
    )


# ---------------------------------------------------------------------------
# Image and corpus files


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """8-bit binary PPM (P6)."""
    h, w = image.shape[:2]
    quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"not a P6 PPM file: {path}")
    w, h = (int(x) for x in parts[1].split())
    maxval = int(parts[2])
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3)
    return (pixels.reshape(h, w, 3).astype(np.float32) / maxval).astype(np.float32)


def write_farbfeld(path: str | Path, image: np.ndarray) -> None:
    """farbfeld raw dump: 16-bit big-endian RGBA."""
    h, w = image.shape[:2]
    rgba = np.ones((h, w, 4), dtype=np.float32)
    rgba[:, :, :3] = np.clip(image, 0.0, 1.0)
    quantized = np.round(rgba * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(b"farbfeld")
        fh.write(struct.pack(">II", w, h))
        fh.write(quantized.tobytes())


def save_corpus(directory: str | Path, pairs: list[tuple[str, np.ndarray]], categories: list[str]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, (caption, image) in enumerate(pairs):
        name = f"img_{i:05d}.ppm"
        write_ppm(directory / name, image)
        manifest.append(
            {
                "caption": caption,
                "file": name,
                "category": caption_category(caption, categories),
                "instance_id": None,
                "mismatched": False,
            }
        )
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_corpus(directory: str | Path) -> list[tuple[str, np.ndarray]]:
    directory = Path(directory)
    with open(directory / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    return [(entry["caption"], read_ppm(directory / entry["file"])) for entry in manifest]
