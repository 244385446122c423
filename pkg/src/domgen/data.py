"""Multi-domain annotated images: synthesis, manifest I/O, patch sampling, augmentation."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np
from PIL import Image

DEFAULT_BOX_SIZE = 50.0
MANIFEST_NAME = "dataset.json"


class DatasetError(ValueError):
    """Raised for malformed manifests, missing files or invalid annotations."""


class NoMitosisError(ValueError):
    """Object-centered sampling was requested on an image without mitoses."""


class ObjectKind(str, enum.Enum):
    MITOSIS = "mitosis"
    HARD_NEGATIVE = "hard_negative"


class Split(str, enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


@dataclass(frozen=True)
class DomainLabel:
    id: int
    name: str
    labeled: bool = True


@dataclass(frozen=True)
class ObjectAnnotation:
    center: tuple[float, float]
    box: tuple[float, float, float, float]
    kind: ObjectKind = ObjectKind.MITOSIS

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        x, y = self.center
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")
        if not (x0 <= x <= x1 and y0 <= y <= y1):
            raise ValueError(f"center {self.center} outside box {self.box}")
        object.__setattr__(self, "kind", ObjectKind(self.kind))

    @classmethod
    def from_point(cls, x: float, y: float, kind=ObjectKind.MITOSIS, box_size: float = DEFAULT_BOX_SIZE):
        h = box_size / 2.0
        return cls((float(x), float(y)), (x - h, y - h, x + h, y + h), ObjectKind(kind))

    @property
    def is_mitosis(self) -> bool:
        return self.kind is ObjectKind.MITOSIS

    def translated(self, dx: float, dy: float) -> "ObjectAnnotation":
        x0, y0, x1, y1 = self.box
        return ObjectAnnotation(
            (self.center[0] + dx, self.center[1] + dy), (x0 + dx, y0 + dy, x1 + dx, y1 + dy), self.kind
        )


@dataclass
class AnnotatedImage:
    pixels: np.ndarray
    annotations: list[ObjectAnnotation]
    domain: DomainLabel
    split: Split = Split.TRAIN
    source_id: str = ""

    def __post_init__(self):
        self.split = Split(self.split)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise DatasetError(f"{self.source_id}: pixels must be an HxWx3 uint8 array")
        h, w = self.pixels.shape[:2]
        for a in self.annotations:
            x, y = a.center
            if not (0 <= x < w and 0 <= y < h):
                raise DatasetError(f"{self.source_id}: annotation center {a.center} outside {w}x{h} image")
        if not self.domain.labeled and self.split is Split.TRAIN and self.annotations:
            raise DatasetError(f"{self.source_id}: train image of unlabeled domain {self.domain.name!r} has annotations")

    @property
    def size(self) -> tuple[int, int]:
        """(width, height)"""
        return self.pixels.shape[1], self.pixels.shape[0]

    @property
    def mitoses(self) -> list[ObjectAnnotation]:
        return [a for a in self.annotations if a.is_mitosis]


@dataclass
class Patch:
    pixels: np.ndarray
    annotations: list[ObjectAnnotation]
    domain: DomainLabel
    origin: tuple[int, int]
    source_id: str = ""

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


# --------------------------------------------------------------------------
# synthetic domains


@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Global photometric shift applied on top of the rendered tissue.

    ``brightness_shift`` is in units of full intensity range (added after the
    contrast change, which pivots around the per-channel image mean).
    """

    name: str
    brightness_shift: float = 0.0
    contrast_scale: float = 1.0
    hue_rotation: float = 0.0
    noise_sigma: float = 0.01

    def __post_init__(self):
        if self.contrast_scale <= 0:
            raise ValueError("contrast_scale must be positive")

    def apply(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Map a float RGB image in [0, 1] to a shifted uint8 image."""
        out = rotate_hue(image, self.hue_rotation)
        mean = out.reshape(-1, 3).mean(axis=0)
        out = (out - mean) * self.contrast_scale + mean + self.brightness_shift
        if self.noise_sigma > 0:
            out = out + rng.normal(0.0, self.noise_sigma, size=out.shape)
        return np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)


DEFAULT_DOMAIN_SPECS = (
    SyntheticDomainSpec("scanner_a", 0.0, 1.0, 0.0, 0.01),
    SyntheticDomainSpec("scanner_b", -0.06, 1.15, 12.0, 0.015),
    SyntheticDomainSpec("scanner_c", 0.05, 0.9, -12.0, 0.01),
    SyntheticDomainSpec("scanner_d", 0.12, 0.65, 0.0, 0.01),
    SyntheticDomainSpec("scanner_e", 0.12, 0.8, 8.0, 0.02),
)


def rotate_hue(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate colours about the grey axis of RGB space."""
    if degrees == 0:
        return image
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    k = 1.0 / 3.0
    q = math.sqrt(k)
    m = np.array(
        [
            [c + (1 - c) * k, k * (1 - c) - q * s, k * (1 - c) + q * s],
            [k * (1 - c) + q * s, c + k * (1 - c), k * (1 - c) - q * s],
            [k * (1 - c) - q * s, k * (1 - c) + q * s, c + k * (1 - c)],
        ]
    )
    return image @ m.T


_BACKGROUND = np.array([0.93, 0.74, 0.83])
_NUCLEUS = np.array([0.58, 0.44, 0.72])
_MITOSIS = np.array([0.26, 0.13, 0.40])
_LOOKALIKE = np.array([0.40, 0.27, 0.55])


def _smooth_noise(rng, h, w, sigma, amplitude):
    field_ = rng.normal(0.0, 1.0, size=(h, w)).astype(np.float64)
    field_ = cv2.GaussianBlur(field_, (0, 0), sigma)
    field_ /= field_.std() + 1e-12
    return amplitude * field_


def _paint(canvas, mask, color, rng, texture):
    ys, xs = np.nonzero(mask > 0)
    if not len(ys):
        return
    grain = 1.0 + texture * rng.normal(0.0, 1.0, size=len(ys))
    col = color[None, :] * grain[:, None]
    alpha = mask[ys, xs][:, None]
    canvas[ys, xs] = (1 - alpha) * canvas[ys, xs] + alpha * col


def _blob_mask(h, w, cx, cy, radius_fn, extent):
    x0, x1 = max(0, int(cx - extent)), min(w, int(cx + extent) + 1)
    y0, y1 = max(0, int(cy - extent)), min(h, int(cy + extent) + 1)
    mask = np.zeros((h, w))
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx, dy = xx - cx, yy - cy
    r = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    edge = radius_fn(theta)
    mask[y0:y1, x0:x1] = np.clip(edge - r + 0.5, 0.0, 1.0)
    return mask


def _render_tissue(rng, size, objects, n_nuclei):
    h = w = size
    canvas = np.empty((h, w, 3))
    canvas[:] = _BACKGROUND
    canvas += _smooth_noise(rng, h, w, 6.0, 0.04)[..., None] * np.array([0.6, 1.0, 0.8])
    for _ in range(n_nuclei):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        a, b = rng.uniform(4.0, 7.0), rng.uniform(4.0, 7.0)
        phi = rng.uniform(0, np.pi)
        fn = lambda t, a=a, b=b, phi=phi: a * b / np.sqrt((b * np.cos(t - phi)) ** 2 + (a * np.sin(t - phi)) ** 2)
        _paint(canvas, _blob_mask(h, w, cx, cy, fn, 8), _NUCLEUS * rng.uniform(0.9, 1.1), rng, 0.05)
    for x, y, kind in objects:
        if kind is ObjectKind.MITOSIS:
            r0 = rng.uniform(7.0, 9.5)
            k = int(rng.integers(5, 9))
            ph = rng.uniform(0, 2 * np.pi)
            fn = lambda t, r0=r0, k=k, ph=ph: r0 * (1.0 + 0.35 * np.sin(k * t + ph))
            _paint(canvas, _blob_mask(h, w, x, y, fn, 14), _MITOSIS, rng, 0.25)
        else:
            r0 = rng.uniform(6.5, 8.5)
            fn = lambda t, r0=r0: np.full_like(t, r0)
            _paint(canvas, _blob_mask(h, w, x, y, fn, 10), _LOOKALIKE, rng, 0.04)
    return np.clip(canvas, 0.0, 1.0)


def _place_objects(rng, size, count, margin=12.0, min_dist=22.0, tries=200):
    pts: list[tuple[float, float]] = []
    for _ in range(count):
        for _ in range(tries):
            p = (rng.uniform(margin, size - margin), rng.uniform(margin, size - margin))
            if all(math.hypot(p[0] - q[0], p[1] - q[1]) >= min_dist for q in pts):
                pts.append(p)
                break
    return pts


def _split_counts(n: int, fractions=(0.6, 0.2, 0.2)) -> list[Split]:
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    n_train = max(n - n_val - n_test, 0)
    if n_train == 0 and n > 0:
        n_train = 1
        n_test = max(n - 1 - n_val, 0)
    return [Split.TRAIN] * n_train + [Split.VALIDATION] * n_val + [Split.TEST] * (n - n_train - n_val)


def generate_synthetic_dataset(
    num_domains: int,
    images_per_domain: int,
    image_size: int,
    objects_per_image_range: tuple[int, int] = (3, 8),
    domain_specs: Sequence[SyntheticDomainSpec] | None = None,
    unlabeled_domains: Iterable[int] = (),
    seed: int = 0,
    *,
    box_size: float = DEFAULT_BOX_SIZE,
    hard_negative_fraction: float = 0.3,
    nuclei_per_megapixel: float = 900.0,
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> list[AnnotatedImage]:
    """Render ``num_domains * images_per_domain`` tissue-like images.

    Each image gets a random number of annotated objects drawn from
    ``objects_per_image_range``; about ``hard_negative_fraction`` of them are
    smooth look-alikes, the rest spiky mitotic figures. Unannotated nuclei fill
    the background. Images of each domain are split train/validation/test in
    order, and the train images of ``unlabeled_domains`` lose their annotations.
    """
    if domain_specs is None:
        domain_specs = DEFAULT_DOMAIN_SPECS[:num_domains]
    if not domain_specs:
        raise ValueError("domain_specs must not be empty")
    if num_domains <= 0 or images_per_domain <= 0 or image_size <= 0:
        raise ValueError("num_domains, images_per_domain and image_size must be positive")
    if len(domain_specs) != num_domains:
        raise ValueError(f"need {num_domains} domain specs, got {len(domain_specs)}")
    lo, hi = objects_per_image_range
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid objects_per_image_range {objects_per_image_range}")
    unlabeled = set(unlabeled_domains)
    if not unlabeled <= set(range(num_domains)):
        raise ValueError(f"unlabeled domains {sorted(unlabeled)} not in 0..{num_domains - 1}")

    images = []
    for d, spec in enumerate(domain_specs):
        domain = DomainLabel(d, spec.name, d not in unlabeled)
        for i, split in enumerate(_split_counts(images_per_domain, split_fractions)):
            rng = np.random.default_rng([seed, d, i])
            n_obj = int(rng.integers(lo, hi + 1))
            pts = _place_objects(rng, image_size, n_obj)
            kinds = [
                ObjectKind.HARD_NEGATIVE if rng.random() < hard_negative_fraction else ObjectKind.MITOSIS
                for _ in pts
            ]
            n_nuclei = int(round(nuclei_per_megapixel * image_size * image_size / 1e6))
            canvas = _render_tissue(rng, image_size, [(x, y, k) for (x, y), k in zip(pts, kinds)], n_nuclei)
            pixels = spec.apply(canvas, rng)
            annotations = [ObjectAnnotation.from_point(x, y, k, box_size) for (x, y), k in zip(pts, kinds)]
            if not domain.labeled and split is Split.TRAIN:
                annotations = []
            images.append(AnnotatedImage(pixels, annotations, domain, split, f"d{d}_{i:04d}"))
    return images


def domain_channel_means(images: Sequence[AnnotatedImage]) -> dict[int, np.ndarray]:
    """Mean RGB value (0-255) per domain id."""
    acc: dict[int, list[np.ndarray]] = {}
    for im in images:
        acc.setdefault(im.domain.id, []).append(im.pixels.reshape(-1, 3).mean(axis=0))
    return {d: np.mean(v, axis=0) for d, v in sorted(acc.items())}


def domains_of(images: Iterable[AnnotatedImage]) -> list[DomainLabel]:
    return sorted({im.domain for im in images}, key=lambda d: d.id)


def filter_images(images, *, split=None, domains=None) -> list[AnnotatedImage]:
    out = list(images)
    if split is not None:
        split = Split(split)
        out = [im for im in out if im.split is split]
    if domains is not None:
        keep = set(domains)
        out = [im for im in out if im.domain.id in keep]
    return out


# --------------------------------------------------------------------------
# manifest I/O


def write_dataset(images: Sequence[AnnotatedImage], root) -> Path:
    """Write PNG files plus ``dataset.json``; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for im in images:
        rel = f"images/{im.source_id}.png"
        Image.fromarray(im.pixels).save(root / rel, optimize=False)
        entries.append(
            {
                "file": rel,
                "source_id": im.source_id,
                "domain_id": im.domain.id,
                "split": im.split.value,
                "annotations": [
                    {"x": a.center[0], "y": a.center[1], "kind": a.kind.value} for a in im.annotations
                ],
            }
        )
    manifest = {
        "domains": [{"id": d.id, "name": d.name, "labeled": d.labeled} for d in domains_of(images)],
        "images": entries,
    }
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_dataset(root_path, box_size: float = DEFAULT_BOX_SIZE) -> list[AnnotatedImage]:
    root = Path(root_path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetError(f"no {MANIFEST_NAME} in {root}")
    manifest = json.loads(manifest_path.read_text())
    try:
        domains = {
            int(d["id"]): DomainLabel(int(d["id"]), str(d["name"]), bool(d.get("labeled", True)))
            for d in manifest["domains"]
        }
        entries = manifest["images"]
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: {exc}") from exc
    if sorted(domains) != list(range(len(domains))):
        raise DatasetError(f"domain ids must be dense 0..D-1, got {sorted(domains)}")

    images = []
    for entry in entries:
        name = entry.get("file", "<missing file field>")
        path = root / name
        if not path.is_file():
            raise DatasetError(f"image file not found for manifest entry {name!r}")
        domain = domains.get(int(entry["domain_id"]))
        if domain is None:
            raise DatasetError(f"{name}: unknown domain_id {entry['domain_id']}")
        pixels = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
        h, w = pixels.shape[:2]
        anns = []
        for a in entry.get("annotations", []):
            x, y = float(a["x"]), float(a["y"])
            if not (0 <= x < w and 0 <= y < h):
                raise DatasetError(f"{name}: annotation ({x}, {y}) outside {w}x{h} image")
            anns.append(ObjectAnnotation.from_point(x, y, a.get("kind", "mitosis"), box_size))
        source_id = entry.get("source_id") or Path(name).stem
        images.append(AnnotatedImage(pixels, anns, domain, entry.get("split", "train"), source_id))
    return images


# --------------------------------------------------------------------------
# patch sampling


def crop_patch(image: AnnotatedImage, origin: tuple[int, int], patch_size: int) -> Patch:
    ox, oy = origin
    pixels = image.pixels[oy : oy + patch_size, ox : ox + patch_size].copy()
    anns = [
        a.translated(-ox, -oy)
        for a in image.annotations
        if ox <= a.center[0] < ox + patch_size and oy <= a.center[1] < oy + patch_size
    ]
    return Patch(pixels, anns, image.domain, (int(ox), int(oy)), image.source_id)


def sample_patch(
    image: AnnotatedImage, mode: str, patch_size: int, radius: int | None, rng: np.random.Generator
) -> Patch:
    """Crop a ``patch_size`` square either uniformly or around a random mitosis.

    In ``object_centered`` mode the patch centre is offset from the chosen
    mitosis by at most ``radius`` pixels per axis. The offset is additionally
    capped at ``patch_size // 2 - 1`` so the mitosis always lands inside the
    crop after clamping to the image bounds.
    """
    w, h = image.size
    if patch_size > min(w, h):
        raise ValueError(f"patch_size {patch_size} exceeds image size {w}x{h}")
    max_x, max_y = w - patch_size, h - patch_size
    if mode == "random":
        origin = (int(rng.integers(0, max_x + 1)), int(rng.integers(0, max_y + 1)))
    elif mode == "object_centered":
        mitoses = image.mitoses
        if not mitoses:
            raise NoMitosisError(
                f"{image.source_id} has no mitosis annotation; fall back to mode='random' for this image"
            )
        target = mitoses[int(rng.integers(len(mitoses)))]
        r = patch_size // 2 - 1 if radius is None else min(int(radius), patch_size // 2 - 1)
        dx, dy = rng.integers(-r, r + 1, size=2)
        cx = int(math.floor(target.center[0])) + int(dx)
        cy = int(math.floor(target.center[1])) + int(dy)
        origin = (
            int(np.clip(cx - patch_size // 2, 0, max_x)),
            int(np.clip(cy - patch_size // 2, 0, max_y)),
        )
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return crop_patch(image, origin, patch_size)


def build_balanced_batch(
    dataset: Sequence[AnnotatedImage],
    batch_size: int,
    per_domain: int,
    object_fraction: float,
    patch_size: int,
    rng: np.random.Generator,
    *,
    radius: int | None = None,
    domains: Sequence[DomainLabel] | None = None,
) -> list[Patch]:
    """Draw ``per_domain`` train patches from every domain, then shuffle."""
    if not 0.0 <= object_fraction <= 1.0:
        raise ValueError("object_fraction must lie in [0, 1]")
    if domains is None:
        domains = domains_of(dataset)
    if batch_size != per_domain * len(domains):
        raise ValueError(f"batch_size {batch_size} != per_domain {per_domain} x {len(domains)} domains")
    by_domain: dict[int, list[AnnotatedImage]] = {d.id: [] for d in domains}
    for im in dataset:
        if im.split is Split.TRAIN and im.domain.id in by_domain:
            by_domain[im.domain.id].append(im)
    patches = []
    for d in domains:
        pool = by_domain[d.id]
        if not pool:
            raise DatasetError(f"domain {d.id} ({d.name!r}) has no train images")
        for _ in range(per_domain):
            im = pool[int(rng.integers(len(pool)))]
            mode = "object_centered" if rng.random() < object_fraction and im.mitoses else "random"
            patches.append(sample_patch(im, mode, patch_size, radius, rng))
    order = rng.permutation(len(patches))
    return [patches[i] for i in order]


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    rotation_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    brightness: float = 0.2
    contrast_range: tuple[float, float] = (0.8, 1.25)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0, (1.0, 1.0))


def affine_matrix(
    patch_size: int, angle_deg: float = 0.0, scale: float = 1.0, flip_x: bool = False, flip_y: bool = False
) -> np.ndarray:
    """2x3 map (pixel-index coordinates) of flips, then rotation+scale about the patch centre.

    The rotation uses the (x, y) matrix [[cos, -sin], [sin, cos]] with y
    pointing down.
    """
    c = (patch_size - 1) / 2.0
    f = np.eye(3)
    if flip_x:
        f[0, 0], f[0, 2] = -1.0, patch_size - 1.0
    if flip_y:
        f[1, 1], f[1, 2] = -1.0, patch_size - 1.0
    t = math.radians(angle_deg)
    rs = scale * np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    a = np.eye(3)
    a[:2, :2] = rs
    a[:2, 2] = np.array([c, c]) - rs @ np.array([c, c])
    return (a @ f)[:2]


def apply_affine(patch: Patch, matrix: np.ndarray, box_scale: float = 1.0) -> Patch:
    """Warp pixels and annotation centres with the same 2x3 map; drop objects that leave."""
    p = patch.size
    m = np.asarray(matrix, dtype=np.float64)
    if np.allclose(m, np.eye(3)[:2]):
        pixels = patch.pixels.copy()
    else:
        pixels = cv2.warpAffine(
            patch.pixels, m, (p, p), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101
        )
    anns = []
    for a in patch.annotations:
        x, y = m @ np.array([a.center[0], a.center[1], 1.0])
        if not (0 <= x < p and 0 <= y < p):
            continue
        x0, y0, x1, y1 = a.box
        hw, hh = (x1 - x0) * box_scale / 2.0, (y1 - y0) * box_scale / 2.0
        anns.append(ObjectAnnotation((float(x), float(y)), (x - hw, y - hh, x + hw, y + hh), a.kind))
    return replace(patch, pixels=pixels, annotations=anns)


def adjust_lighting(pixels: np.ndarray, brightness: float = 0.0, contrast: float = 1.0) -> np.ndarray:
    if brightness == 0.0 and contrast == 1.0:
        return pixels.copy()
    x = pixels.astype(np.float64)
    mean = x.reshape(-1, 3).mean(axis=0)
    x = (x - mean) * contrast + mean + brightness * 255.0
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def augment(patch: Patch, config: AugmentConfig, rng: np.random.Generator) -> Patch:
    """Random flips, rotation/scale and lighting/contrast change.

    Draws a fixed number of variates regardless of the config so the rng
    stream stays aligned between configs.
    """
    u = rng.random(7)
    flip_x = u[0] < config.flip_p
    flip_y = u[1] < config.flip_p
    angle = (2 * u[2] - 1) * config.rotation_deg
    lo, hi = config.scale_range
    scale = lo + (hi - lo) * u[3]
    brightness = (2 * u[4] - 1) * config.brightness
    clo, chi = config.contrast_range
    # log-uniform so the range is symmetric around 1 multiplicatively
    contrast = math.exp(math.log(clo) + (math.log(chi) - math.log(clo)) * u[5]) if clo > 0 else 1.0
    out = apply_affine(patch, affine_matrix(patch.size, angle, scale, flip_x, flip_y), box_scale=scale)
    out.pixels = adjust_lighting(out.pixels, brightness, contrast)
    return out
