"""Synthetic two-domain image data plus folder-layout ingestion.

The generator renders small anti-aliased glyphs (one shape per class) on
plain backgrounds for the source domain, then re-renders the *same*
glyphs under a controlled corruption recipe (textured background, hue
rotation, blur, additive noise) for the target domain.  Shape is the
only class signal; colors are random per sample.  Everything is
deterministic under a fixed seed, and a zero recipe reproduces the
source bit for bit.
"""

import csv
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError

SHAPES = ("circle", "square", "triangle", "plus", "ring", "diamond", "cross", "bar")

# Inputs are shifted from [0, 1] to [-1, 1] before entering the network.
NORM_MEAN = 0.5
NORM_STD = 0.5

TEXTURE_NAMES = ("none", "plaid", "checker", "ripple")


@dataclass(frozen=True)
class ShiftRecipe:
    """Corruption applied to the target domain only.

    texture: 0 none, 1 plaid, 2 checker, 3 ripple (background modulation)
    hue_degrees: rotation of RGB values about the gray axis
    blur_radius: gaussian blur sigma in pixels
    noise_sigma: additive gaussian pixel noise
    """

    texture: int = 0
    hue_degrees: float = 0.0
    blur_radius: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.texture not in range(len(TEXTURE_NAMES)):
            raise ConfigurationError(
                f"texture id must be in [0, {len(TEXTURE_NAMES) - 1}], got {self.texture}")
        if self.blur_radius < 0 or self.noise_sigma < 0:
            raise ConfigurationError("blur radius and noise sigma must be >= 0")

    @property
    def is_zero(self) -> bool:
        return (self.texture == 0 and self.hue_degrees == 0.0
                and self.blur_radius == 0.0 and self.noise_sigma == 0.0)


DEFAULT_RECIPE = ShiftRecipe(texture=1, hue_degrees=40.0, blur_radius=0.7, noise_sigma=0.08)


@dataclass(frozen=True)
class DomainSpec:
    """Parameters of one synthetic source/target pair."""

    num_classes: int = 5
    per_class: int = 100
    extent: int = 32
    recipe: ShiftRecipe = field(default_factory=lambda: DEFAULT_RECIPE)
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ConfigurationError(
                f"num_classes must be in [2, {len(SHAPES)}], got {self.num_classes}")
        if self.per_class < 1:
            raise ConfigurationError("per_class must be >= 1")
        if self.extent < 8 or self.extent % 2:
            raise ConfigurationError(
                f"extent must be even and >= 8, got {self.extent}")


@dataclass
class Dataset:
    """Images in [0, 1] with stable ids; labels optional (target domains
    keep theirs for transductive evaluation, adaptation never reads them)."""

    images: torch.Tensor            # (N, 3, H, W) float32
    labels: torch.Tensor | None     # (N,) long
    ids: torch.Tensor               # (N,) long, always 0..N-1

    def __post_init__(self):
        if self.images.dim() != 4 or self.images.shape[1] != 3:
            raise ConfigurationError("images must be (N, 3, H, W)")
        n = self.images.shape[0]
        if self.images.numel() and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigurationError("pixel values must lie in [0, 1]")
        if not torch.equal(self.ids, torch.arange(n)):
            raise ConfigurationError("ids must be exactly 0..N-1 in order")
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise ConfigurationError("labels length does not match images")
            if n and self.labels.min() < 0:
                raise ConfigurationError("negative label")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int | None:
        if self.labels is None:
            return None
        return int(self.labels.max()) + 1 if len(self) else 0


def normalize(images: torch.Tensor) -> torch.Tensor:
    """Map [0, 1] pixels to the network's input range."""
    return (images - NORM_MEAN) / NORM_STD


# --- glyph rendering -------------------------------------------------------

def _pixel_grid(extent: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates normalized to [-1, 1] on both axes."""
    axis = (np.arange(extent) + 0.5 - extent / 2) / (extent / 2)
    y, x = np.meshgrid(axis, axis, indexing="ij")
    return x, y


def _rect_sdf(x, y, half_w, half_h):
    return np.maximum(np.abs(x) - half_w, np.abs(y) - half_h)


def _shape_sdf(name: str, x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    if name == "circle":
        return np.hypot(x, y) - r * 0.9
    if name == "square":
        return _rect_sdf(x, y, r * 0.78, r * 0.78)
    if name == "triangle":
        d = np.full_like(x, -np.inf)
        for phi in (-90.0, 30.0, 150.0):
            a = np.deg2rad(phi)
            d = np.maximum(d, x * np.cos(a) + y * np.sin(a) - r * 0.55)
        return d
    if name == "plus":
        arm = r * 0.32
        return np.minimum(_rect_sdf(x, y, r, arm), _rect_sdf(x, y, arm, r))
    if name == "ring":
        return np.abs(np.hypot(x, y) - r * 0.72) - r * 0.3
    if name == "diamond":
        return (np.abs(x) + np.abs(y)) - r * 1.05
    if name == "cross":
        c, s = np.cos(np.pi / 4), np.sin(np.pi / 4)
        xr, yr = c * x + s * y, -s * x + c * y
        arm = r * 0.3
        return np.minimum(_rect_sdf(xr, yr, r, arm), _rect_sdf(xr, yr, arm, r))
    if name == "bar":
        return _rect_sdf(x, y, r, r * 0.34)
    raise ConfigurationError(f"unknown shape {name!r}")


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def _hue_rotation_matrix(degrees: float) -> np.ndarray:
    """Rotation of RGB space about the gray axis (1,1,1)/sqrt(3)."""
    theta = np.deg2rad(degrees)
    a = 1.0 / np.sqrt(3.0)
    k = np.array([[0, -a, a], [a, 0, -a], [-a, a, 0]])
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)


def _texture_pattern(texture: int, x: np.ndarray, y: np.ndarray,
                     params: np.ndarray) -> np.ndarray:
    """Background modulation field in [0, 1]; params is the fixed-length
    per-sample draw so changing the texture id never shifts the RNG stream."""
    fx = 2.0 + 2.5 * params[0]
    fy = 2.0 + 2.5 * params[1]
    p1 = 2 * np.pi * params[2]
    p2 = 2 * np.pi * params[3]
    if texture == 1:  # plaid
        return 0.5 + 0.25 * np.sin(np.pi * fx * x + p1) + 0.25 * np.sin(np.pi * fy * y + p2)
    if texture == 2:  # checker
        cells = 2.0 + 2.0 * params[4]
        grid = np.floor((x + 1) * cells) + np.floor((y + 1) * cells)
        return 0.25 + 0.5 * np.mod(grid, 2.0)
    if texture == 3:  # ripple
        cx, cy = 0.6 * (2 * params[4] - 1), 0.6 * (2 * params[5] - 1)
        rad = np.hypot(x - cx, y - cy)
        return 0.5 + 0.45 * np.sin(np.pi * (1.5 + 2.0 * fx / 4.5) * rad * 2 + p1)
    raise ConfigurationError(f"unknown texture id {texture}")


_BASE_ANGLE = {"circle": 0.0, "square": 0.0, "triangle": 0.0, "plus": 0.0,
               "ring": 0.0, "diamond": 0.0, "cross": 0.0, "bar": 30.0}


def _render(shape: str, glyph: dict, background: np.ndarray, extent: int) -> np.ndarray:
    """Composite one glyph over a (3, H, W) background, anti-aliased."""
    x, y = _pixel_grid(extent)
    a = np.deg2rad(_BASE_ANGLE[shape] + glyph["angle"])
    xs, ys = x - glyph["dx"], y - glyph["dy"]
    xr = np.cos(a) * xs + np.sin(a) * ys
    yr = -np.sin(a) * xs + np.cos(a) * ys
    d = _shape_sdf(shape, xr, yr, glyph["scale"])
    aa = 3.0 / extent  # ~1.5 px feather in normalized units
    alpha = np.clip(0.5 - d / aa, 0.0, 1.0)
    fg = glyph["fg"][:, None, None]
    return background * (1.0 - alpha) + fg * alpha


def _draw_glyph(rng: np.random.Generator) -> dict:
    u = rng.uniform(size=10)
    return {
        "dx": 0.3 * (2 * u[0] - 1),
        "dy": 0.3 * (2 * u[1] - 1),
        "scale": 0.45 + 0.15 * u[2],
        "angle": 30.0 * (2 * u[3] - 1),
        "fg": _hsv_to_rgb(u[4], 0.6 + 0.35 * u[5], 0.45 + 0.3 * u[6]),
        "bg": 0.78 + 0.17 * u[7:10],
    }


def gen_domain_pair(spec: DomainSpec) -> tuple[Dataset, Dataset]:
    """Render the source/target pair described by `spec`.

    Both domains share glyph parameters sample for sample; only the
    recipe separates them, so a zero recipe yields identical datasets.
    """
    recipe = spec.recipe
    extent = spec.extent
    param_rng = np.random.default_rng([spec.seed, 0])
    texture_rng = np.random.default_rng([spec.seed, 1])
    noise_rng = np.random.default_rng([spec.seed, 2])
    x, y = _pixel_grid(extent)
    hue = _hue_rotation_matrix(recipe.hue_degrees)

    n = spec.num_classes * spec.per_class
    src = np.empty((n, 3, extent, extent), dtype=np.float64)
    tgt = np.empty_like(src)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for k in range(spec.num_classes):
        shape = SHAPES[k]
        for _ in range(spec.per_class):
            glyph = _draw_glyph(param_rng)
            tex_params = texture_rng.uniform(size=6)
            noise = noise_rng.standard_normal((3, extent, extent))

            bg = np.broadcast_to(glyph["bg"][:, None, None], (3, extent, extent)).copy()
            src[i] = _render(shape, glyph, bg, extent)

            if recipe.texture:
                pattern = _texture_pattern(recipe.texture, x, y, tex_params)
                tgt_bg = bg * (0.45 + 0.55 * pattern[None])
            else:
                tgt_bg = bg
            img = _render(shape, glyph, tgt_bg, extent)
            if recipe.hue_degrees:
                img = np.einsum("ij,jhw->ihw", hue, img)
            if recipe.blur_radius:
                img = np.stack([gaussian_filter(c, recipe.blur_radius, mode="nearest")
                                for c in img])
            img = np.clip(img + recipe.noise_sigma * noise, 0.0, 1.0)
            tgt[i] = img
            labels[i] = k
            i += 1

    ids = torch.arange(n)
    lab = torch.from_numpy(labels)
    source = Dataset(torch.from_numpy(src.astype(np.float32)).clamp(0, 1), lab.clone(), ids.clone())
    target = Dataset(torch.from_numpy(tgt.astype(np.float32)).clamp(0, 1), lab.clone(), ids.clone())
    return source, target


# --- folder layout ---------------------------------------------------------

def export_folder_dataset(dataset: Dataset, root, class_names: list[str] | None = None) -> None:
    """Write `root/<class>/<id>.png` plus `root/manifest.csv` (id, path, label)."""
    if dataset.labels is None:
        raise ConfigurationError("folder export needs labels to name class directories")
    k = dataset.num_classes
    if class_names is None:
        class_names = [f"class_{c:02d}" for c in range(k)]
    if len(class_names) < k:
        raise ConfigurationError(f"need {k} class names, got {len(class_names)}")
    os.makedirs(root, exist_ok=True)
    rows = []
    for i in range(len(dataset)):
        label = int(dataset.labels[i])
        cls_dir = os.path.join(root, class_names[label])
        os.makedirs(cls_dir, exist_ok=True)
        path = os.path.join(cls_dir, f"{int(dataset.ids[i]):05d}.png")
        arr = dataset.images[i].numpy()
        eight_bit = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(eight_bit, mode="RGB").save(path)
        rows.append([int(dataset.ids[i]), os.path.relpath(path, root), label])
    with open(os.path.join(root, "manifest.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "path", "label"])
        writer.writerows(rows)


_IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


def load_folder_dataset(root, extent: int = 32) -> Dataset:
    """Read `root/<class_name>/<images>`; sorted class names define label
    ids, samples are ordered by (class, filename) so re-listing is stable."""
    if not os.path.isdir(root):
        raise ConfigurationError(f"dataset root {root!r} is not a directory")
    class_names = sorted(d for d in os.listdir(root)
                         if os.path.isdir(os.path.join(root, d)))
    if not class_names:
        raise ConfigurationError(f"no class directories under {root!r}")
    images, labels = [], []
    for label, name in enumerate(class_names):
        cls_dir = os.path.join(root, name)
        files = sorted(f for f in os.listdir(cls_dir)
                       if os.path.splitext(f)[1].lower() in _IMAGE_EXTENSIONS)
        if not files:
            warnings.warn(f"class directory {cls_dir!r} holds no images")
            continue
        for fname in files:
            path = os.path.join(cls_dir, fname)
            try:
                with Image.open(path) as img:
                    img = img.convert("RGB")
                    if img.size != (extent, extent):
                        img = img.resize((extent, extent), Image.BILINEAR)
                    arr = np.asarray(img, dtype=np.float32) / 255.0
            except (OSError, ValueError) as exc:
                raise ConfigurationError(f"cannot read image {path!r}: {exc}") from exc
            images.append(arr.transpose(2, 0, 1))
            labels.append(label)
    if not images:
        raise ConfigurationError(f"no images found under {root!r}")
    stack = torch.from_numpy(np.stack(images))
    return Dataset(stack, torch.tensor(labels, dtype=torch.long),
                   torch.arange(len(images)))
