"""Datasets of handwritten-character-style images.

A :class:`Dataset` is a flat table of drawings, each tagged with an
alphabet, a character and a drawer, plus the images themselves (ink = 1,
background = 0).  Splits are arrays of item indices; :meth:`Dataset.subset`
turns one into a dataset view for the samplers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import ndcore as nd
from .errors import ConfigError, IngestionError

OMNIGLOT_SIDE = 105
BACKGROUND_DIRS = ("images_background",)
EVALUATION_DIRS = ("images_evaluation",)


@dataclass
class Dataset:
    images: np.ndarray                 # (n, S, S) float64 in [0, 1]
    alphabet: np.ndarray               # (n,) alphabet id
    character: np.ndarray              # (n,) character id
    drawer: np.ndarray                 # (n,) drawer id
    alphabet_names: list[str]
    character_names: list[str]
    origin: list[str] = field(default_factory=list)   # per alphabet: "background", "evaluation" or ""
    _index: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.alphabet = np.asarray(self.alphabet, dtype=np.int64)
        self.character = np.asarray(self.character, dtype=np.int64)
        self.drawer = np.asarray(self.drawer, dtype=np.int64)
        if not self.origin:
            self.origin = [""] * len(self.alphabet_names)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def side(self) -> int:
        return int(self.images.shape[-1])

    def _build_index(self) -> dict:
        chars_by_alpha: dict[int, list[int]] = {}
        items_by_char: dict[int, list[int]] = {}
        alpha_of_char: dict[int, int] = {}
        for i, (a, c) in enumerate(zip(self.alphabet.tolist(), self.character.tolist())):
            if c not in items_by_char:
                items_by_char[c] = []
                chars_by_alpha.setdefault(a, []).append(c)
                alpha_of_char[c] = a
            items_by_char[c].append(i)
        by_drawer = {c: {int(self.drawer[i]): i for i in items} for c, items in items_by_char.items()}
        return {
            "chars_by_alpha": {a: np.array(cs) for a, cs in chars_by_alpha.items()},
            "items_by_char": {c: np.array(its) for c, its in items_by_char.items()},
            "by_drawer": by_drawer,
            "alpha_of_char": alpha_of_char,
        }

    @property
    def index(self) -> dict:
        if self._index is None:
            self._index = self._build_index()
        return self._index

    def characters(self) -> np.ndarray:
        return np.array(sorted(self.index["items_by_char"]))

    def alphabets(self) -> np.ndarray:
        return np.array(sorted(self.index["chars_by_alpha"]))

    def subset(self, items) -> "Dataset":
        items = np.asarray(items, dtype=np.int64)
        return Dataset(self.images[items], self.alphabet[items], self.character[items],
                       self.drawer[items], self.alphabet_names, self.character_names, self.origin)

    def summary(self) -> dict[str, int]:
        return {"alphabets": len(self.index["chars_by_alpha"]),
                "characters": len(self.index["items_by_char"]),
                "drawings": len(self)}


# -- ingestion -------------------------------------------------------------------


def _to_unit_image(path: Path, S: int) -> np.ndarray:
    with Image.open(path) as img:
        grey = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    if grey.mean() > 0.5:
        grey = 1.0 - grey
    if grey.shape != (S, S):
        resized = Image.fromarray(grey.astype(np.float32), mode="F").resize((S, S), Image.BOX)
        grey = np.asarray(resized, dtype=np.float64)
    return np.clip(grey, 0.0, 1.0)


def _drawers_from_stems(stems: list[str]) -> list[int]:
    """Drawer ids from ``<a>_<b>`` file stems.  The varying field is the
    drawer: ``<drawer>_<idx>`` in general, but original Omniglot names are
    ``<character>_<drawer>`` with a constant first field."""
    parts = [s.split("_") for s in stems]
    if all(len(p) == 2 and p[0].isdigit() and p[1].isdigit() for p in parts):
        first = {p[0] for p in parts}
        if len(first) == 1 and len(stems) > 1:
            return [int(p[1]) for p in parts]
        return [int(p[0]) for p in parts]
    return list(range(len(stems)))


def _alphabet_roots(root: Path) -> list[tuple[Path, str]]:
    parts = []
    for name in sorted(p.name for p in root.iterdir() if p.is_dir()):
        if name in BACKGROUND_DIRS:
            parts.append((root / name, "background"))
        elif name in EVALUATION_DIRS:
            parts.append((root / name, "evaluation"))
    if parts:
        parts.sort(key=lambda item: item[1])
        return parts
    return [(root, "")]


def load_image_tree(root, S: int = 32, expected_drawings: int | None = 20) -> Dataset:
    """Index ``root/<alphabet>/<character>/<drawer>_<idx>.png``.

    A root holding ``images_background`` / ``images_evaluation`` folders is
    read as both halves, with each alphabet tagged by its origin.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError("dataset root does not exist", [root])
    images, alphas, chars, drawers = [], [], [], []
    alphabet_names, character_names, origin = [], [], []
    bad: list[Path] = []
    for base, tag in _alphabet_roots(root):
        for alpha_dir in sorted(p for p in base.iterdir() if p.is_dir()):
            a_id = len(alphabet_names)
            alphabet_names.append(alpha_dir.name)
            origin.append(tag)
            for char_dir in sorted(p for p in alpha_dir.iterdir() if p.is_dir()):
                files = sorted(char_dir.glob("*.png"))
                if not files:
                    bad.append(char_dir)
                    continue
                if expected_drawings is not None and len(files) != expected_drawings:
                    warnings.warn(f"{char_dir}: {len(files)} drawings, expected {expected_drawings}",
                                  stacklevel=2)
                c_id = len(character_names)
                character_names.append(f"{alpha_dir.name}/{char_dir.name}")
                for f, d in zip(files, _drawers_from_stems([f.stem for f in files])):
                    try:
                        images.append(_to_unit_image(f, S))
                    except (OSError, ValueError):
                        bad.append(f)
                        continue
                    alphas.append(a_id)
                    chars.append(c_id)
                    drawers.append(d)
    if bad:
        raise IngestionError("unreadable or empty dataset entries", bad)
    if not images:
        raise IngestionError("no images found under", [root])
    return Dataset(np.stack(images), alphas, chars, drawers, alphabet_names, character_names, origin)


MANIFEST = "manifest.tsv"
MANIFEST_HEADER = "alphabet\tcharacter\tdrawer\torigin\tfile\trow"


def save_packed(ds: Dataset, out) -> Path:
    """One ARCT tensor (drawings, S, S) per character plus a tab-separated manifest."""
    out = Path(out)
    (out / "chars").mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for c in ds.characters():
        items = ds.index["items_by_char"][int(c)]
        rel = f"chars/{int(c):05d}.arct"
        nd.save_tensor(out / rel, ds.images[items])
        a = int(ds.alphabet[items[0]])
        for row, i in enumerate(items):
            lines.append("\t".join([ds.alphabet_names[a], ds.character_names[int(c)].split("/", 1)[-1],
                                    str(int(ds.drawer[i])), ds.origin[a] or "-", rel, str(row)]))
    (out / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def load_packed(root) -> Dataset:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise IngestionError("packed dataset manifest missing", [manifest])
    rows = manifest.read_text(encoding="utf-8").splitlines()
    if not rows or rows[0] != MANIFEST_HEADER:
        raise IngestionError("manifest header not recognised", [manifest])
    cache: dict[str, np.ndarray] = {}
    images, alphas, chars, drawers = [], [], [], []
    alpha_ids: dict[str, int] = {}
    char_ids: dict[tuple[str, str], int] = {}
    origin: list[str] = []
    bad: list[Path] = []
    for line in rows[1:]:
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            bad.append(manifest)
            continue
        alpha, char, drawer, tag, rel, row = fields
        if rel not in cache:
            try:
                cache[rel] = nd.load_tensor(root / rel)
            except (OSError, ValueError):
                bad.append(root / rel)
                cache[rel] = None
        block = cache[rel]
        if block is None:
            continue
        if alpha not in alpha_ids:
            alpha_ids[alpha] = len(alpha_ids)
            origin.append("" if tag == "-" else tag)
        key = (alpha, char)
        if key not in char_ids:
            char_ids[key] = len(char_ids)
        images.append(block[int(row)])
        alphas.append(alpha_ids[alpha])
        chars.append(char_ids[key])
        drawers.append(int(drawer))
    if bad:
        raise IngestionError("corrupt packed dataset entries", sorted(set(bad)))
    if not images:
        raise IngestionError("packed dataset is empty", [root])
    names = [f"{a}/{c}" for (a, c) in char_ids]
    return Dataset(np.stack(images), alphas, chars, drawers, list(alpha_ids), names, origin)


def load_dataset(root, layout: str = "image-tree", S: int = 32) -> Dataset:
    if layout in ("image-tree", "tree"):
        return load_image_tree(root, S)
    if layout in ("packed-binary", "packed"):
        return load_packed(root)
    raise ConfigError(f"unknown dataset layout {layout!r}")


# -- splits ---------------------------------------------------------------------

SCHEMES = ("3020", "301010", "across", "custom")


def _partition(ids: np.ndarray, parts: dict, rng: np.random.Generator | None) -> dict[str, np.ndarray]:
    ids = np.array(ids)
    if rng is not None:
        ids = ids[rng.permutation(len(ids))]
    n = len(ids)
    names = list(parts)
    counts = []
    for name in names[:-1]:
        v = parts[name]
        counts.append(int(v) if isinstance(v, (int, np.integer)) else int(round(float(v) * n)))
    counts.append(n - sum(counts))
    if any(c < 0 for c in counts) or sum(counts) != n:
        raise ConfigError(f"split sizes {dict(zip(names, counts))} do not fit {n} items")
    out, start = {}, 0
    for name, c in zip(names, counts):
        out[name] = ids[start:start + c]
        start += c
    return out


def _items_where(values: np.ndarray, chosen) -> np.ndarray:
    return np.flatnonzero(np.isin(values, np.asarray(chosen)))


def make_split(ds: Dataset, scheme: str = "3020", seed: int = 0, level: str = "alphabet",
               parts: dict | None = None) -> dict[str, np.ndarray]:
    """Disjoint, exhaustive partition of item indices.

    ``3020``: 30 background / 20 evaluation alphabets.  ``301010``: 30 train,
    10 validation, 10 test alphabets.  ``across``: first 1200 characters for
    training, the remaining 423 for testing.  ``custom``: ``parts`` maps
    split names to counts or fractions of ``level`` units (alphabet,
    character or drawer), shuffled with ``seed``.
    """
    scheme = str(scheme)
    alphabets = ds.alphabets()
    n_alpha = len(alphabets)
    tagged = [a for a in alphabets if ds.origin[a]]
    if scheme == "3020":
        if len(tagged) == n_alpha and n_alpha:
            back = [a for a in alphabets if ds.origin[a] == "background"]
            evals = [a for a in alphabets if ds.origin[a] == "evaluation"]
        elif n_alpha == 50:
            back, evals = alphabets[:30], alphabets[30:]
        else:
            raise ConfigError(f"scheme 3020 needs 50 alphabets or origin tags, dataset has {n_alpha}")
        if len(back) != 30 or len(evals) != 20:
            raise ConfigError(f"scheme 3020 expects 30/20 alphabets, found {len(back)}/{len(evals)}")
        return {"background": _items_where(ds.alphabet, back), "evaluation": _items_where(ds.alphabet, evals)}
    if scheme == "301010":
        base = make_split(ds, "3020")
        back = np.unique(ds.alphabet[base["background"]])
        evals = np.unique(ds.alphabet[base["evaluation"]])
        held = _partition(evals, {"validation": 10, "test": 10}, np.random.default_rng(seed))
        return {"train": _items_where(ds.alphabet, back),
                "validation": _items_where(ds.alphabet, held["validation"]),
                "test": _items_where(ds.alphabet, held["test"])}
    if scheme == "across":
        chars = ds.characters()
        if len(chars) != 1623:
            raise ConfigError(f"scheme across expects 1623 characters, dataset has {len(chars)}")
        return {"train": _items_where(ds.character, chars[:1200]), "test": _items_where(ds.character, chars[1200:])}
    if scheme == "custom":
        if not parts:
            raise ConfigError("custom split needs parts, e.g. {'train': 0.7, 'validation': 0.15, 'test': 0.15}")
        column = {"alphabet": ds.alphabet, "character": ds.character, "drawer": ds.drawer}.get(level)
        if column is None:
            raise ConfigError(f"custom split level must be alphabet, character or drawer, not {level!r}")
        units = _partition(np.unique(column), parts, np.random.default_rng(seed))
        return {name: _items_where(column, ids) for name, ids in units.items()}
    raise ConfigError(f"unknown split scheme {scheme!r}; choose from {SCHEMES}")


# -- samplers -----------------------------------------------------------------------


def sample_verification_pair(ds: Dataset, rng: np.random.Generator) -> tuple[int, int, int]:
    """Item indices of a same-alphabet pair and its label (1 = same character)."""
    eligible = _pair_alphabets(ds)
    chars_by_alpha = ds.index["chars_by_alpha"]
    items_by_char = ds.index["items_by_char"]
    label = int(rng.random() < 0.5)
    if label:
        choices = eligible["positive"]
        if not choices:
            raise ConfigError("no character has two drawings; cannot form positive pairs")
        a = choices[rng.integers(len(choices))]
        chars = [c for c in chars_by_alpha[a] if len(items_by_char[c]) >= 2]
        c = chars[rng.integers(len(chars))]
        i, j = rng.choice(items_by_char[c], size=2, replace=False)
        return int(i), int(j), 1
    choices = eligible["negative"]
    if not choices:
        raise ConfigError("no alphabet has two characters; cannot form negative pairs")
    a = choices[rng.integers(len(choices))]
    c1, c2 = rng.choice(chars_by_alpha[a], size=2, replace=False)
    i = items_by_char[int(c1)][rng.integers(len(items_by_char[int(c1)]))]
    j = items_by_char[int(c2)][rng.integers(len(items_by_char[int(c2)]))]
    return int(i), int(j), 0


def _pair_alphabets(ds: Dataset) -> dict[str, list[int]]:
    cached = ds.index.get("pair_alphabets")
    if cached is None:
        chars_by_alpha = ds.index["chars_by_alpha"]
        items_by_char = ds.index["items_by_char"]
        cached = {
            "positive": [a for a, cs in sorted(chars_by_alpha.items())
                         if any(len(items_by_char[c]) >= 2 for c in cs)],
            "negative": [a for a, cs in sorted(chars_by_alpha.items()) if len(cs) >= 2],
        }
        ds.index["pair_alphabets"] = cached
    return cached


def sample_pair_batch(ds: Dataset, batch: int, rng: np.random.Generator,
                      policy: "AugmentationPolicy | None" = None):
    """Arrays x_a, x_b of shape (batch, S, S) and labels (batch,)."""
    picks = [sample_verification_pair(ds, rng) for _ in range(batch)]
    ia = np.array([p[0] for p in picks])
    ib = np.array([p[1] for p in picks])
    labels = np.array([p[2] for p in picks], dtype=float)
    xa, xb = ds.images[ia], ds.images[ib]
    if policy is not None and policy.active:
        pairs = [augment_pair(a, b, policy, rng) for a, b in zip(xa, xb)]
        xa = np.stack([a for a, _ in pairs])
        xb = np.stack([b for _, b in pairs])
    return xa, xb, labels


def fixed_pairs(ds: Dataset, count: int, seed: int):
    """A reproducible evaluation set of pairs (no augmentation)."""
    return sample_pair_batch(ds, count, np.random.default_rng(seed))


# -- augmentation ------------------------------------------------------------------------


@dataclass
class AugmentationPolicy:
    """Bounds for random affine distortions.  Translations are in pixels,
    angles in degrees, flips are per-image probabilities."""

    max_translation: float = 4.0
    max_rotation: float = 15.0
    max_shear: float = 10.0
    flip_horizontal: float = 0.2
    flip_vertical: float = 0.2
    translate: bool = True
    rotate: bool = True
    shear: bool = True
    flip: bool = True

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, False, False, False, False)

    @classmethod
    def for_side(cls, S: int, **overrides) -> "AugmentationPolicy":
        """Default bounds with the translation scaled from the 32-pixel setting."""
        policy = cls(max_translation=4.0 * S / 32.0)
        for key, value in overrides.items():
            setattr(policy, key, value)
        return policy

    @property
    def active(self) -> bool:
        return ((self.translate and self.max_translation > 0) or (self.rotate and self.max_rotation > 0)
                or (self.shear and self.max_shear > 0)
                or (self.flip and (self.flip_horizontal > 0 or self.flip_vertical > 0)))


@dataclass(frozen=True)
class Transform:
    dx: float = 0.0
    dy: float = 0.0
    rotation: float = 0.0
    shear: float = 0.0
    flip_h: bool = False
    flip_v: bool = False

    @property
    def is_identity(self) -> bool:
        return self == Transform()


def sample_transform(policy: AugmentationPolicy, rng: np.random.Generator) -> Transform:
    u = rng.uniform(-1.0, 1.0, size=4)
    flips = rng.random(2)
    return Transform(
        dx=u[0] * policy.max_translation if policy.translate else 0.0,
        dy=u[1] * policy.max_translation if policy.translate else 0.0,
        rotation=u[2] * policy.max_rotation if policy.rotate else 0.0,
        shear=u[3] * policy.max_shear if policy.shear else 0.0,
        flip_h=bool(policy.flip and flips[0] < policy.flip_horizontal),
        flip_v=bool(policy.flip and flips[1] < policy.flip_vertical),
    )


def _snap(a: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    r = np.round(a)
    return np.where(np.abs(a - r) < tol, r, a)


def apply_transform(image: np.ndarray, tf: Transform) -> np.ndarray:
    """Shear, then rotate, then translate about the image centre (flips first);
    bilinear resampling, zeros outside, result clipped to [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if tf.is_identity:
        return image.copy()
    S = image.shape[0]
    centre = np.array([(S - 1) / 2.0, (S - 1) / 2.0])
    flip = np.diag([-1.0 if tf.flip_h else 1.0, -1.0 if tf.flip_v else 1.0])
    sh = math.tan(math.radians(tf.shear))
    shear = np.array([[1.0, sh], [0.0, 1.0]])
    th = math.radians(tf.rotation)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    forward = rot @ shear @ flip                  # acts on (x, y) offsets from the centre
    inverse = np.linalg.inv(forward)
    shift = np.array([tf.dx, tf.dy])
    # scipy maps output (row, col) to input (row, col); swap to/from (x, y)
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    matrix = swap @ inverse @ swap
    offset_xy = centre - inverse @ (centre + shift)
    offset = swap @ offset_xy
    # cos/sin of right angles carry ~1e-16 noise that would push edge samples off the grid
    matrix, offset = _snap(matrix), _snap(offset)
    out = ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    if not policy.active:
        return np.asarray(image, dtype=np.float64).copy()
    return apply_transform(image, sample_transform(policy, rng))


def augment_pair(x_a: np.ndarray, x_b: np.ndarray, policy: AugmentationPolicy,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Independent small distortions per image, but one shared flip per pair.

    A mirrored glyph is a different character, so flipping only one side of
    a matching pair would corrupt its label."""
    tf_a = sample_transform(policy, rng)
    tf_b = replace(sample_transform(policy, rng), flip_h=tf_a.flip_h, flip_v=tf_a.flip_v)
    return apply_transform(x_a, tf_a), apply_transform(x_b, tf_b)


# -- synthetic glyphs --------------------------------------------------------------------------

TOY_ALPHABET_SIZE = 20


def _segment_distance(px: np.ndarray, py: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    d = p1 - p0
    denom = float(d @ d)
    if denom == 0.0:
        return np.hypot(px - p0[0], py - p0[1])
    t = np.clip(((px - p0[0]) * d[0] + (py - p0[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (p0[0] + t * d[0]), py - (p0[1] + t * d[1]))


def render_strokes(points: np.ndarray, S: int, width: float | None = None) -> np.ndarray:
    """Anti-aliased polyline through ``points`` (unit-square coordinates)."""
    width = max(1.0, S / 12.0) if width is None else width
    coords = np.arange(S) + 0.5
    px, py = np.meshgrid(coords, coords)
    pts = points * S
    dist = np.full((S, S), np.inf)
    for p0, p1 in zip(pts[:-1], pts[1:]):
        dist = np.minimum(dist, _segment_distance(px, py, p0, p1))
    return np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)


def make_toy_dataset(classes: int = 20, samples_per_class: int = 20, S: int = 16, seed: int = 0,
                     jitter: float = 0.03, detail_jitter: float = 0.015, detail_box: float = 0.45) -> Dataset:
    """Procedural glyphs built like a small script.

    Each alphabet of 20 classes owns a 2-3 segment frame drawn in every
    character and a small square region (``detail_box`` of the side) where
    each character places its own 2-4 segment mark, so every glyph is a 4-7
    segment skeleton.  Characters of one alphabet therefore look alike at a
    coarse scale and differ in detail, much as real characters do when seen
    through a whole-image 4x4 glimpse.  Each sample jitters the frame by
    ``jitter`` and the mark by ``detail_jitter`` (unit-square units); the
    sample index doubles as drawer id."""
    if classes < 2:
        raise ConfigError("toy dataset needs at least 2 classes")
    if samples_per_class < 1:
        raise ConfigError("toy dataset needs at least one sample per class")
    if not 0.0 < detail_box <= 0.7:
        raise ConfigError("detail_box must lie in (0, 0.7]")
    rng = np.random.default_rng(seed)
    images, alphas, chars, drawers = [], [], [], []
    n_alpha = -(-classes // TOY_ALPHABET_SIZE)
    alphabet_names = [f"toy{a:02d}" for a in range(n_alpha)]
    character_names = []
    frames, anchors = [], []
    for _ in range(n_alpha):
        frames.append(rng.uniform(0.1, 0.9, size=(int(rng.integers(2, 4)) + 1, 2)))
        anchors.append(rng.uniform(0.15, 0.85 - detail_box, size=2))
    for c in range(classes):
        a = c // TOY_ALPHABET_SIZE
        mark = anchors[a] + rng.uniform(0.0, detail_box, size=(int(rng.integers(2, 5)) + 1, 2))
        character_names.append(f"{alphabet_names[a]}/char{c:03d}")
        for s in range(samples_per_class):
            frame = np.clip(frames[a] + rng.normal(0.0, jitter, size=frames[a].shape), 0.05, 0.95)
            detail = np.clip(mark + rng.normal(0.0, detail_jitter, size=mark.shape), 0.05, 0.95)
            images.append(np.maximum(render_strokes(frame, S), render_strokes(detail, S)))
            alphas.append(a)
            chars.append(c)
            drawers.append(s)
    return Dataset(np.stack(images), alphas, chars, drawers, alphabet_names, character_names)
