"""Synthetic colored-shape images and the base-to-novel few-shot protocol."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ProtocolError, SpecError

COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "purple": (0.6, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "white": (1.0, 1.0, 1.0),
}
SHAPES = ("square", "circle", "triangle")


@dataclass(frozen=True)
class DatasetSpec:
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    shapes: tuple[str, ...] = ("square", "circle", "triangle")
    image_size: int = 32
    noise_std: float = 0.1
    samples_per_class: int = 40
    seed: int = 0
    fixed_position: bool = False
    min_radius: float = 4.0
    max_radius: float = 9.0
    background: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "colors", tuple(self.colors))
        object.__setattr__(self, "shapes", tuple(self.shapes))
        for s in self.shapes:
            if s not in SHAPES:
                raise SpecError(f"unknown shape word {s!r}; known: {SHAPES}")
        for c in self.colors:
            if c not in COLOR_RGB:
                raise SpecError(f"unknown color word {c!r}; known: {sorted(COLOR_RGB)}")
        if len(self.colors) * len(self.shapes) < 6:
            raise SpecError("need at least 6 color x shape classes")
        if self.noise_std < 0:
            raise SpecError("noise_std must be non-negative")
        if self.samples_per_class < 1:
            raise SpecError("samples_per_class must be positive")
        if not 0 < self.min_radius <= self.max_radius:
            raise SpecError("need 0 < min_radius <= max_radius")
        if not 0.0 <= self.background <= 1.0:
            raise SpecError("background must lie in [0, 1]")

    @property
    def class_names(self) -> list[str]:
        return [f"{c} {s}" for c in self.colors for s in self.shapes]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LabeledImages:
    images: np.ndarray  # (N, H, W, 3)
    labels: np.ndarray  # (N,) indices into class_names
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update("\n".join(self.class_names).encode())
        return h.hexdigest()


def shape_mask(shape: str, cx: float, cy: float, radius: float, size: int) -> np.ndarray:
    """Boolean raster of a filled shape centred at (cx, cy)."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    if shape == "square":
        return (np.abs(xs - cx) <= radius) & (np.abs(ys - cy) <= radius)
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2
    if shape == "triangle":
        # apex up, base at cy + radius
        top = cy - radius
        rel = ys - top
        return (rel >= 0) & (rel <= 2 * radius) & (np.abs(xs - cx) <= rel / 2)
    raise SpecError(f"unknown shape word {shape!r}")


def render(color: str, shape: str, cx: float, cy: float, radius: float, size: int,
           background: float = 0.0) -> np.ndarray:
    img = np.full((size, size, 3), background)
    img[shape_mask(shape, cx, cy, radius, size)] = COLOR_RGB[color]
    return img


def generate_dataset(spec: DatasetSpec) -> LabeledImages:
    """Render ``samples_per_class`` noisy images of every "color shape" class."""
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    images, labels = [], []
    label = 0
    for color in spec.colors:
        for shape in spec.shapes:
            for _ in range(spec.samples_per_class):
                if spec.fixed_position:
                    radius, cx, cy = (spec.min_radius + spec.max_radius) / 2, size / 2, size / 2
                else:
                    radius = rng.uniform(spec.min_radius, spec.max_radius)
                    cx = rng.uniform(radius, size - radius)
                    cy = rng.uniform(radius, size - radius)
                img = render(color, shape, cx, cy, radius, size, spec.background)
                if spec.noise_std > 0:
                    img = img + rng.normal(0.0, spec.noise_std, img.shape)
                images.append(img)
                labels.append(label)
            label += 1
    return LabeledImages(np.stack(images), np.array(labels), spec.class_names)


# -- protocol -------------------------------------------------------------------

@dataclass
class Task:
    """Class-level base/novel split with per-class train pools and test sets.

    Indices refer to rows of ``dataset``; labels inside the task are local
    positions in ``base_classes`` / ``novel_classes``.
    """

    dataset: LabeledImages
    base_classes: list[str]
    novel_classes: list[str]
    train_pool: dict[str, np.ndarray]
    base_test: np.ndarray
    novel_test: np.ndarray
    meta: dict = field(default_factory=dict)

    def local_labels(self, indices: np.ndarray, split: str) -> np.ndarray:
        names = self.base_classes if split == "base" else self.novel_classes
        pos = {n: i for i, n in enumerate(names)}
        return np.array([pos[self.dataset.class_names[j]] for j in self.dataset.labels[indices]])

    def split_arrays(self, split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
        if split not in ("base", "novel"):
            raise ProtocolError(f"unknown split {split!r}")
        idx = self.base_test if split == "base" else self.novel_test
        names = self.base_classes if split == "base" else self.novel_classes
        return self.dataset.images[idx], self.local_labels(idx, split), names


def _compositional_novel(colors: list[str], shapes: list[str], n_novel: int,
                         rng: np.random.Generator) -> set[str]:
    """Pick novel pairs so every color and shape still appears among base classes."""
    pairs = [f"{c} {s}" for c in colors for s in shapes]
    for _ in range(100):
        novel: set[str] = set()
        for j in rng.permutation(len(pairs)):
            if len(novel) == n_novel:
                break
            if _covers(colors, shapes, novel | {pairs[j]}):
                novel.add(pairs[j])
        if len(novel) == n_novel:
            return novel
    raise ProtocolError(f"cannot hold out {n_novel} classes while keeping every attribute in base")


def _covers(colors, shapes, novel: set[str]) -> bool:
    base = [(c, s) for c in colors for s in shapes if f"{c} {s}" not in novel]
    return {c for c, _ in base} == set(colors) and {s for _, s in base} == set(shapes)


def split_base_novel(dataset: LabeledImages, holdout: float = 0.5, seed: int = 0,
                     rule: str = "compositional", train_fraction: float = 0.5) -> Task:
    """Seeded class-level split; each class's samples divide into train pool and test.

    ``rule="compositional"`` keeps every color word and shape word present
    among the base classes, so novel classes are unseen combinations of seen
    attributes. ``rule="random"`` draws novel classes uniformly.
    """
    names = list(dataset.class_names)
    n_novel = int(round(len(names) * holdout))
    if n_novel < 2 or len(names) - n_novel < 2:
        raise ProtocolError(f"split leaves {len(names) - n_novel} base / {n_novel} novel classes; need >= 2 each")
    rng = np.random.default_rng(seed)
    if rule == "random":
        novel = set(rng.choice(names, size=n_novel, replace=False).tolist())
    elif rule == "compositional":
        colors = list(dict.fromkeys(n.split()[0] for n in names))
        shapes = list(dict.fromkeys(n.split()[1] for n in names))
        novel = _compositional_novel(colors, shapes, n_novel, rng)
    else:
        raise ProtocolError(f"unknown split rule {rule!r}")
    base_classes = [n for n in names if n not in novel]
    novel_classes = [n for n in names if n in novel]

    pool, base_test, novel_test = {}, [], []
    for ci, name in enumerate(names):
        idx = np.flatnonzero(dataset.labels == ci)
        idx = idx[rng.permutation(len(idx))]
        cut = int(round(len(idx) * train_fraction))
        if name in novel:
            novel_test.extend(idx[cut:].tolist())
        else:
            pool[name] = np.sort(idx[:cut])
            base_test.extend(idx[cut:].tolist())
    return Task(dataset, base_classes, novel_classes, pool, np.sort(base_test), np.sort(novel_test),
                meta={"holdout": holdout, "seed": seed, "rule": rule})


@dataclass
class FewShotSet:
    indices: np.ndarray
    labels: np.ndarray  # local base labels


def sample_few_shot(task: Task, shots: int, seed: int) -> FewShotSet:
    """Exactly ``shots`` distinct examples per base class."""
    if shots < 1:
        raise ProtocolError("shots must be positive")
    rng = np.random.default_rng(seed)
    chosen, labels = [], []
    for li, name in enumerate(task.base_classes):
        pool = task.train_pool[name]
        if len(pool) < shots:
            raise ProtocolError(f"class {name!r} has {len(pool)} training samples, fewer than K={shots}")
        pick = np.sort(rng.choice(pool, size=shots, replace=False))
        chosen.extend(pick.tolist())
        labels.extend([li] * shots)
    return FewShotSet(np.array(chosen), np.array(labels))
