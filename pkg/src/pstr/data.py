"""Deterministic synthetic person-search scenes.

Each identity is a vertical "person" glyph of 3-5 horizontal colour
stripes.  Scenes paste glyphs at random scales and positions onto a
textured background; a camera id sets brightness and background style.

On-disk layout (``save_dataset``)::

    <root>/manifest.txt          key = value lines, ends with `hash = <sha256>`
    <root>/train/images.bin      image archive (below)
    <root>/train/annotations.txt one person per line
    <root>/test/images.bin
    <root>/test/annotations.txt
    <root>/test/queries.txt      query_id scene identity cx cy w h
    <root>/test/galleries.txt    query_id scene scene ...  (nested: size G = first G)

``images.bin``: magic ``b"PSTRIMG1"``, then little-endian u32 fields
version, count, height, width, channels, followed by count*H*W*C uint8
pixels (row-major, value = byte / 255).

``annotations.txt``: ``# scene camera identity cx cy w h`` header, then one
whitespace-separated record per person; identity -1 marks an unlabeled
person; floats are written with 17 significant digits.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

UNLABELED = -1
IMAGE_MAGIC = b"PSTRIMG1"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class DataConfigError(ValueError):
    pass


# -- configuration -------------------------------------------------------
@dataclass(frozen=True)
class DatasetManifest:
    seed: int = 0
    image_size: int = 96
    num_train_scenes: int = 300
    num_labeled: int = 16
    num_unlabeled: int = 8
    min_persons: int = 1
    max_persons: int = 4
    base_w: int = 10
    base_h: int = 20
    scale_min: float = 0.8
    scale_max: float = 1.6
    num_cameras: int = 4
    unlabeled_prob: float = 0.25
    max_overlap: float = 0.0
    num_test_distractor_scenes: int = 40
    test_identities: str = "train"
    version: int = FORMAT_VERSION

    def validate(self) -> None:
        if self.num_labeled < 1:
            raise DataConfigError("num_labeled (L) must be >= 1")
        if self.num_unlabeled < 0:
            raise DataConfigError("num_unlabeled must be >= 0")
        if not 1 <= self.min_persons <= self.max_persons:
            raise DataConfigError("need 1 <= min_persons <= max_persons")
        if self.max_persons > self.num_labeled + self.num_unlabeled:
            raise DataConfigError("max_persons exceeds the number of distinct identities")
        if self.num_train_scenes < 2 * self.num_labeled:
            raise DataConfigError(
                f"{self.num_train_scenes} train scenes cannot show {self.num_labeled} identities twice each"
            )
        if self.num_cameras < 2:
            raise DataConfigError("need at least two cameras")
        if not 0 < self.scale_min <= self.scale_max:
            raise DataConfigError("bad scale range")
        if self.base_h * self.scale_max > self.image_size or self.base_w * self.scale_max > self.image_size:
            raise DataConfigError("largest glyph does not fit in the image")
        if self.test_identities not in ("train", "new"):
            raise DataConfigError("test_identities must be 'train' or 'new'")
        if self.num_test_distractor_scenes < 0:
            raise DataConfigError("num_test_distractor_scenes must be >= 0")
        if self.num_test_distractor_scenes and not self.num_unlabeled:
            raise DataConfigError("distractor test scenes need num_unlabeled >= 1")

    @property
    def max_gallery(self) -> int:
        return self.num_labeled + self.num_test_distractor_scenes

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> DatasetManifest:
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in kv.items():
            if key not in known:
                raise DataConfigError(f"unknown manifest key {key!r}")
            typ = type(getattr(cls(), key))
            kwargs[key] = typ(raw) if typ is not str else str(raw)
        return cls(**kwargs)


@dataclass(frozen=True)
class IdentitySpec:
    identity_id: int
    appearance_seed: int


@dataclass
class Person:
    box: np.ndarray  # (cx, cy, w, h) normalized
    identity_id: int


@dataclass
class SceneAnnotation:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    persons: list[Person]
    camera_id: int


@dataclass
class Query:
    query_id: int
    scene: int
    identity_id: int
    box: np.ndarray


@dataclass
class Dataset:
    manifest: DatasetManifest
    train: list[SceneAnnotation]
    test: list[SceneAnnotation]
    queries: list[Query] = field(default_factory=list)
    galleries: dict[int, list[int]] = field(default_factory=dict)

    @property
    def num_labeled(self) -> int:
        return self.manifest.num_labeled

    def gallery(self, query_id: int, size: int) -> list[int]:
        scenes = self.galleries[query_id]
        if size > len(scenes):
            raise DataConfigError(f"gallery size {size} exceeds the {len(scenes)} available scenes")
        return scenes[:size]


# -- appearance ----------------------------------------------------------
def _seed_from(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2, np.uint64)[0])


def glyph_pattern(spec: IdentitySpec) -> tuple[np.ndarray, np.ndarray]:
    """Stripe colours (n, 3) and stripe boundaries (n+1,) as height fractions."""
    rng = np.random.Generator(np.random.PCG64(spec.appearance_seed))
    n = int(rng.integers(3, 6))
    hue = rng.uniform(0, 1, n)
    sat = rng.uniform(0.55, 1.0, n)
    val = rng.uniform(0.55, 1.0, n)
    colors = _hsv_to_rgb(hue, sat, val)
    cuts = np.sort(rng.uniform(0.15, 0.85, n - 1))
    bounds = np.concatenate([[0.0], cuts, [1.0]])
    # every stripe keeps a minimum share of the height
    widths = np.maximum(np.diff(bounds), 0.12)
    bounds = np.concatenate([[0.0], np.cumsum(widths / widths.sum())])
    bounds[-1] = 1.0
    return colors, bounds


def _hsv_to_rgb(h, s, v) -> np.ndarray:
    i = np.floor(h * 6).astype(int) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.empty((len(h), 3))
    for k in range(6):
        m = i == k
        out[m] = np.stack([table[k][0][m], table[k][1][m], table[k][2][m]], axis=-1)
    return out


def _signature(colors: np.ndarray, bounds: np.ndarray, samples: int = 16) -> np.ndarray:
    ys = (np.arange(samples) + 0.5) / samples
    idx = np.clip(np.searchsorted(bounds, ys, side="right") - 1, 0, len(colors) - 1)
    return colors[idx]


def make_identities(seed: int, count: int, kind: int, min_dist: float = 0.2, existing=()) -> list[IdentitySpec]:
    """``count`` identities whose glyphs differ by at least ``min_dist`` somewhere."""
    specs: list[IdentitySpec] = []
    sigs = [_signature(*glyph_pattern(s)) for s in existing]
    salt = 0
    while len(specs) < count:
        spec = IdentitySpec(len(specs), _seed_from(seed, kind, len(specs), salt))
        sig = _signature(*glyph_pattern(spec))
        if all(np.abs(sig - other).max() >= min_dist for other in sigs):
            specs.append(spec)
            sigs.append(sig)
            salt = 0
        else:
            salt += 1
            if salt > 1000:
                raise GenerationError("could not find distinct glyph patterns")
    return specs


def render_glyph(spec: IdentitySpec, width: int, height: int, brightness: float = 1.0) -> np.ndarray:
    colors, bounds = glyph_pattern(spec)
    ys = (np.arange(height) + 0.5) / height
    idx = np.clip(np.searchsorted(bounds, ys, side="right") - 1, 0, len(colors) - 1)
    rows = np.clip(colors[idx] * brightness, 0.0, 1.0)
    return np.broadcast_to(rows[:, None, :], (height, width, 3)).copy()


def _background(rng: np.random.Generator, size: int, camera: int) -> np.ndarray:
    coarse = rng.uniform(-1, 1, size=(6, 6, 1))
    smooth = np.kron(coarse, np.ones((size // 6 + 1, size // 6 + 1, 1)))[:size, :size]
    base = 0.3 + 0.05 * camera / 4.0
    img = base + 0.08 * smooth + 0.06 * rng.normal(size=(size, size, 1)) + 0.03 * rng.normal(size=(size, size, 3))
    return np.clip(img, 0.0, 1.0)


def camera_brightness(camera: int, num_cameras: int) -> float:
    return 0.85 + 0.3 * camera / max(1, num_cameras - 1)


# -- scenes --------------------------------------------------------------
@dataclass
class Placement:
    spec: IdentitySpec
    label: int
    x0: int
    y0: int
    w: int
    h: int


def glyph_size(m: DatasetManifest, scale: float) -> tuple[int, int]:
    return max(2, int(round(m.base_w * scale))), max(4, int(round(m.base_h * scale)))


def compose_scene(rng, placements: list[Placement], camera: int, m: DatasetManifest) -> SceneAnnotation:
    size = m.image_size
    img = _background(rng, size, camera)
    bright = camera_brightness(camera, m.num_cameras)
    persons = []
    for p in placements:
        img[p.y0 : p.y0 + p.h, p.x0 : p.x0 + p.w] = render_glyph(p.spec, p.w, p.h, bright)
        box = np.array([(p.x0 + p.w / 2) / size, (p.y0 + p.h / 2) / size, p.w / size, p.h / size])
        persons.append(Person(box, p.label))
    img = np.round(img * 255.0) / 255.0
    return SceneAnnotation(img, persons, camera)


def _overlap(a: Placement, b: Placement) -> float:
    ix = max(0, min(a.x0 + a.w, b.x0 + b.w) - max(a.x0, b.x0))
    iy = max(0, min(a.y0 + a.h, b.y0 + b.h) - max(a.y0, b.y0))
    inter = ix * iy
    return inter / (a.w * a.h + b.w * b.h - inter)


def render_scene(
    rng: np.random.Generator,
    identities: list[tuple[IdentitySpec, int]],
    m: DatasetManifest,
    camera: int = 0,
    scene_seed: int | None = None,
    retries: int = 200,
) -> SceneAnnotation:
    """Place each (spec, label) at a random scale and position, then draw.

    Raises ``GenerationError`` naming ``scene_seed`` if a glyph cannot be
    placed within ``retries`` attempts under the overlap limit.
    """
    size = m.image_size
    placed: list[Placement] = []
    for spec, label in identities:
        for _ in range(retries):
            scale = float(rng.uniform(m.scale_min, m.scale_max))
            w, h = glyph_size(m, scale)
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            cand = Placement(spec, label, x0, y0, w, h)
            # a 1-pixel gap keeps touching glyphs visually separate
            grown = Placement(spec, label, x0 - 1, y0 - 1, w + 2, h + 2)
            if all(_overlap(grown, p) <= m.max_overlap for p in placed):
                placed.append(cand)
                break
        else:
            raise GenerationError(f"could not place {len(identities)} persons in scene (seed {scene_seed})")
    return compose_scene(rng, placed, camera, m)


# -- dataset -------------------------------------------------------------
def generate_dataset(m: DatasetManifest) -> Dataset:
    m.validate()
    labeled = make_identities(m.seed, m.num_labeled, kind=1)
    distractors = make_identities(m.seed, m.num_unlabeled, kind=2, existing=labeled)
    if m.test_identities == "new":
        test_ids = make_identities(m.seed, m.num_labeled, kind=3, existing=labeled + distractors)
    else:
        test_ids = labeled

    def scene_rng(split: int, i: int) -> tuple[np.random.Generator, int]:
        s = _seed_from(m.seed, 100 + split, i)
        return np.random.Generator(np.random.PCG64(s)), s

    train = []
    for i in range(m.num_train_scenes):
        rng, s = scene_rng(0, i)
        n = int(rng.integers(m.min_persons, m.max_persons + 1))
        forced = []
        if i < 2 * m.num_labeled:
            j = i // 2
            forced.append(j)
            camera = (j + (i % 2)) % m.num_cameras
        else:
            camera = int(rng.integers(0, m.num_cameras))
        chosen = _pick_people(rng, n, forced, m.num_labeled, m.num_unlabeled, m.unlabeled_prob)
        people = [(labeled[c], c) if c >= 0 else (distractors[-c - 1], UNLABELED) for c in chosen]
        train.append(render_scene(rng, people, m, camera, s))

    test: list[SceneAnnotation] = []
    queries: list[Query] = []
    match_scene: dict[int, int] = {}
    for j, spec in enumerate(test_ids):
        for role in (0, 1):
            rng, s = scene_rng(1, 2 * j + role)
            camera = (j + 2 * role + 1) % m.num_cameras
            n_extra = int(rng.integers(m.min_persons, m.max_persons + 1)) - 1
            extra = rng.choice(m.num_unlabeled, size=min(n_extra, m.num_unlabeled), replace=False) if m.num_unlabeled else []
            people = [(spec, j)] + [(distractors[int(k)], UNLABELED) for k in extra]
            people = [people[k] for k in rng.permutation(len(people))]
            test.append(render_scene(rng, people, m, camera, s))
            idx = len(test) - 1
            if role == 0:
                box = next(p.box for p in test[idx].persons if p.identity_id == j)
                queries.append(Query(j, idx, j, box))
            else:
                match_scene[j] = idx
    distractor_scenes = []
    for i in range(m.num_test_distractor_scenes):
        rng, s = scene_rng(2, i)
        n = min(int(rng.integers(m.min_persons, m.max_persons + 1)), max(1, m.num_unlabeled))
        if m.num_unlabeled:
            people = [(distractors[int(k)], UNLABELED) for k in rng.choice(m.num_unlabeled, size=n, replace=False)]
        else:
            people = []
        test.append(render_scene(rng, people, m, int(rng.integers(0, m.num_cameras)), s))
        distractor_scenes.append(len(test) - 1)

    galleries = {}
    for q in queries:
        rng, _ = scene_rng(3, q.query_id)
        others = [match_scene[k] for k in sorted(match_scene) if k != q.identity_id] + distractor_scenes
        order = [others[k] for k in rng.permutation(len(others))]
        galleries[q.query_id] = [match_scene[q.identity_id]] + order
    return Dataset(m, train, test, queries, galleries)


def _pick_people(rng, n, forced, n_lab, n_unl, p_unl) -> list[int]:
    """Distinct identities for one scene; labeled >= 0, distractor k as -(k+1)."""
    chosen = list(forced)
    while len(chosen) < n:
        if n_unl and rng.uniform() < p_unl:
            c = -int(rng.integers(0, n_unl)) - 1
        else:
            c = int(rng.integers(0, n_lab))
        if c not in chosen:
            chosen.append(c)
    return chosen


# -- persistence ---------------------------------------------------------
def _write_images(path: Path, scenes: list[SceneAnnotation], size: int) -> None:
    buf = io.BytesIO()
    buf.write(IMAGE_MAGIC)
    buf.write(struct.pack("<5I", FORMAT_VERSION, len(scenes), size, size, 3))
    for s in scenes:
        buf.write(np.round(s.image * 255.0).astype("<u1").tobytes())
    path.write_bytes(buf.getvalue())


def _read_images(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    head = len(IMAGE_MAGIC) + 20
    if len(raw) < head or raw[: len(IMAGE_MAGIC)] != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad or missing image header")
    version, count, h, w, c = struct.unpack("<5I", raw[len(IMAGE_MAGIC) : head])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: image format version {version}, expected {FORMAT_VERSION}")
    need = count * h * w * c
    if len(raw) - head != need:
        raise FormatError(f"{path}: expected {need} pixel bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype="<u1", offset=head).reshape(count, h, w, c).astype(np.float64) / 255.0


def _write_annotations(path: Path, scenes: list[SceneAnnotation]) -> None:
    lines = ["# scene camera identity cx cy w h"]
    for i, s in enumerate(scenes):
        for p in s.persons:
            lines.append(f"{i} {s.camera_id} {p.identity_id} " + " ".join(f"{v:.17g}" for v in p.box))
    path.write_text("\n".join(lines) + "\n")


def _read_annotations(path: Path, images: np.ndarray) -> list[SceneAnnotation]:
    scenes = [SceneAnnotation(img, [], -1) for img in images]
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise FormatError(f"{path}:{ln}: expected 7 fields, got {len(parts)}")
        try:
            i, cam, ident = int(parts[0]), int(parts[1]), int(parts[2])
            box = np.array([float(v) for v in parts[3:]])
        except ValueError as err:
            raise FormatError(f"{path}:{ln}: {err}") from None
        if not 0 <= i < len(scenes):
            raise FormatError(f"{path}:{ln}: scene {i} out of range")
        scenes[i].camera_id = cam
        scenes[i].persons.append(Person(box, ident))
    return scenes


def _file_digest(paths: list[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _data_files(root: Path) -> list[Path]:
    names = ["train/images.bin", "train/annotations.txt", "test/images.bin", "test/annotations.txt", "test/queries.txt", "test/galleries.txt"]
    return [root / n for n in names]


def save_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    (root / "train").mkdir(parents=True, exist_ok=True)
    (root / "test").mkdir(parents=True, exist_ok=True)
    size = ds.manifest.image_size
    _write_images(root / "train/images.bin", ds.train, size)
    _write_annotations(root / "train/annotations.txt", ds.train)
    _write_images(root / "test/images.bin", ds.test, size)
    _write_annotations(root / "test/annotations.txt", ds.test)
    q_lines = ["# query_id scene identity cx cy w h"] + [
        f"{q.query_id} {q.scene} {q.identity_id} " + " ".join(f"{v:.17g}" for v in q.box) for q in ds.queries
    ]
    (root / "test/queries.txt").write_text("\n".join(q_lines) + "\n")
    g_lines = ["# query_id gallery scenes in order"] + [f"{k} " + " ".join(map(str, v)) for k, v in sorted(ds.galleries.items())]
    (root / "test/galleries.txt").write_text("\n".join(g_lines) + "\n")
    text = ds.manifest.to_text()
    digest = hashlib.sha256((text + _file_digest(_data_files(root))).encode()).hexdigest()
    (root / "manifest.txt").write_text(text + f"hash = {digest}\n")
    return root


def read_manifest(path) -> tuple[DatasetManifest, str | None]:
    kv = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}: malformed line {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        kv[k] = v
    digest = kv.pop("hash", None)
    try:
        return DatasetManifest.from_mapping(kv), digest
    except (DataConfigError, ValueError, TypeError) as err:
        raise FormatError(f"{path}: {err}") from None


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "manifest.txt").exists():
        raise FormatError(f"{root}: no manifest.txt")
    m, digest = read_manifest(root / "manifest.txt")
    if m.version != FORMAT_VERSION:
        raise FormatError(f"dataset version {m.version}, expected {FORMAT_VERSION}")
    files = _data_files(root)
    for f in files:
        if not f.exists():
            raise FormatError(f"missing dataset file {f}")
    actual = hashlib.sha256((m.to_text() + _file_digest(files)).encode()).hexdigest()
    if digest is None or digest != actual:
        raise FormatError(f"{root}: manifest hash mismatch (dataset modified or corrupt)")
    train = _read_annotations(root / "train/annotations.txt", _read_images(root / "train/images.bin"))
    test = _read_annotations(root / "test/annotations.txt", _read_images(root / "test/images.bin"))
    queries = []
    for line in (root / "test/queries.txt").read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        p = line.split()
        queries.append(Query(int(p[0]), int(p[1]), int(p[2]), np.array([float(v) for v in p[3:]])))
    galleries = {}
    for line in (root / "test/galleries.txt").read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        p = [int(v) for v in line.split()]
        galleries[p[0]] = p[1:]
    return Dataset(m, train, test, queries, galleries)


def dataset_digest(root) -> str:
    """Hash over every file of a saved dataset directory."""
    root = Path(root)
    return _file_digest([root / "manifest.txt"] + _data_files(root))
