"""Synthetic grounded image-caption corpus.

Scenes hold 1-4 flat coloured shapes on a noisy dark background. Captions
are templated from the shapes ("there is a small red square above a blue
circle") and every phrase span records the exact boxes of the objects it
names. The on-disk layout is::

    images/{image_id}.ten   one tensor named "image", H×W×3
    annotations.txt         image id, caption id, token ids, spans
    scenes.txt              image id, shape, colour, size, side, origin, box
    vocab.txt               one token per line, line number = id
    manifest.txt            YAML: counts, seed, stats, schema version
"""

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
import yaml
from packaging.version import InvalidVersion, Version

from ..utils.tensor_file import read_tensors, write_tensors
from .errors import (
    AnnotationError,
    ColocError,
    ConfigurationError,
    CorruptionError,
    FormatError,
    GenerationError,
    VocabularyError,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"

PAD_TOKEN = "<pad>"
GLUE_WORDS = (
    "a", "and", "next", "to", "above", "below", "left", "right", "of",
    "there", "is", "the", "image", "shows", "we", "see",
)
PALETTE: Dict[str, Tuple[float, float, float]] = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "cyan": (0.1, 0.85, 0.9),
    "magenta": (0.85, 0.15, 0.85),
    "white": (0.95, 0.95, 0.95),
    "orange": (1.0, 0.55, 0.05),
}
SHAPES = ("square", "circle", "triangle", "bar")
SIZES = ("small", "large")
VOCAB_WORDS: Tuple[str, ...] = (
    (PAD_TOKEN,) + GLUE_WORDS + tuple(PALETTE) + SHAPES + SIZES
)
OPENERS = (("there", "is"), ("the", "image", "shows"), ("we", "see"))

Image = npt.NDArray[np.float64]


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel box [x_min, x_max) × [y_min, y_max)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if not (
            0 <= self.x_min < self.x_max and 0 <= self.y_min < self.y_max
        ):
            raise AnnotationError(f"Degenerate bounding box {self}")

    def contains(self, x: int, y: int) -> bool:
        """Whether pixel (x, y) lies inside the box."""
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max

    @property
    def area(self) -> int:
        """Pixel count."""
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def fits(self, width: int, height: int) -> bool:
        """Whether the box lies inside a width×height image."""
        return self.x_max <= width and self.y_max <= height

    def iou(self, other: "BoundingBox") -> float:
        """Intersection over union."""
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        inter = max(w, 0) * max(h, 0)
        return inter / float(self.area + other.area - inter)

    def center(self) -> Tuple[float, float]:
        """Continuous (x, y) centre."""
        x = (self.x_min + self.x_max) / 2.0
        y = (self.y_min + self.y_max) / 2.0
        return x, y

    def to_text(self) -> str:
        """``x0,y0,x1,y1``."""
        return f"{self.x_min},{self.y_min},{self.x_max},{self.y_max}"

    @classmethod
    def from_text(cls, text: str) -> "BoundingBox":
        """Inverse of :meth:`to_text`."""
        x0, y0, x1, y1 = (int(v) for v in text.split(","))
        return cls(x0, y0, x1, y1)


@dataclass
class PhraseSpan:
    """Tokens [start, end) naming the objects inside ``boxes``."""

    start: int
    end: int
    boxes: List[BoundingBox]

    @property
    def bounds(self) -> Tuple[int, int]:
        """(start, end)."""
        return self.start, self.end


@dataclass
class GroundedCaption:
    """A caption with its phrase-to-box annotations."""

    caption_id: str
    image_id: str
    token_ids: List[int]
    spans: List[PhraseSpan]

    def span_bounds(self) -> List[Tuple[int, int]]:
        """(start, end) of every span, in caption order."""
        return [span.bounds for span in self.spans]


@dataclass
class SceneObject:
    """One rendered shape and its tight box."""

    shape: str
    color: str
    size: str
    side: int
    origin: Tuple[int, int]
    box: BoundingBox

    @property
    def category(self) -> Tuple[str, str]:
        """(shape, colour)."""
        return self.shape, self.color


@dataclass
class Scene:
    """An H×W×3 image in [0, 1] and the objects drawn on it."""

    image: Image = field(compare=False, repr=False)
    objects: List[SceneObject]

    @property
    def height(self) -> int:
        """H."""
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        """W."""
        return int(self.image.shape[1])


@dataclass
class CorpusRecord:
    """An image and every caption written for it."""

    image_id: str
    scene: Scene
    captions: List[GroundedCaption]


@dataclass
class CorpusStats:
    """Knobs of the scene and caption generator."""

    image_size: int = 32
    objects_min: int = 1
    objects_max: int = 4
    phrases_target: float = 2.0
    duplicate_fraction: float = 0.15
    captions_per_image: int = 5
    size_word_prob: float = 0.5
    n_max: int = 12
    max_retries: int = 50

    def validate(self) -> None:
        """Raise ConfigurationError for impossible settings."""
        if not 1 <= self.objects_min <= self.objects_max <= 4:
            raise ConfigurationError(
                "Need 1 <= objects_min <= objects_max <= 4, got"
                f" {self.objects_min}..{self.objects_max}"
            )
        if not 1 <= self.captions_per_image <= 5:
            raise ConfigurationError("captions_per_image must be in 1..5")
        if self.phrases_target < 1.0:
            raise ConfigurationError("phrases_target must be at least 1")
        for name in ("duplicate_fraction", "size_word_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.image_size < 8:
            raise ConfigurationError("image_size must be at least 8")
        if self.n_max < 3:
            raise ConfigurationError("n_max must be at least 3")
        if self.max_retries < 1:
            raise ConfigurationError("max_retries must be positive")


class Vocabulary:
    """Token list with id lookup; id 0 is padding."""

    def __init__(self, tokens: Sequence[str] = VOCAB_WORDS):
        self.tokens = list(tokens)
        self.index = {token: i for i, token in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise VocabularyError("Vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words: Sequence[str]) -> List[int]:
        """Token ids of ``words``."""
        try:
            return [self.index[word] for word in words]
        except KeyError as exc:
            raise VocabularyError(f"Unknown word {exc}") from exc

    def decode(self, ids: Sequence[int]) -> List[str]:
        """Words of token ``ids``."""
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise VocabularyError(f"Token id {i} outside vocabulary")
        return [self.tokens[i] for i in ids]


@dataclass
class Corpus:
    """Records sorted by image id, plus the vocabulary they use."""

    records: List[CorpusRecord]
    vocab: Vocabulary
    seed: int = 0
    stats: CorpusStats = field(default_factory=CorpusStats)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def image_ids(self) -> List[str]:
        """Ids in record order."""
        return [record.image_id for record in self.records]

    def captions(self) -> Iterator[GroundedCaption]:
        """Every caption in record order."""
        for record in self.records:
            yield from record.captions

    def caption_count(self) -> int:
        """Total number of captions."""
        return sum(len(record.captions) for record in self.records)

    def record(self, image_id: str) -> CorpusRecord:
        """Record of ``image_id``."""
        for record in self.records:
            if record.image_id == image_id:
                return record
        raise KeyError(f"Unknown image id: {image_id}")

    def find_caption(
        self, caption_id: str
    ) -> Tuple[CorpusRecord, GroundedCaption]:
        """Record and caption for ``caption_id``."""
        for record in self.records:
            for caption in record.captions:
                if caption.caption_id == caption_id:
                    return record, caption
        raise KeyError(f"Unknown caption id: {caption_id}")

    def subset(self, image_ids: Sequence[str]) -> "Corpus":
        """A corpus restricted to ``image_ids`` (kept in id order)."""
        wanted = set(image_ids)
        return Corpus(
            records=[r for r in self.records if r.image_id in wanted],
            vocab=self.vocab,
            seed=self.seed,
            stats=self.stats,
        )


# -- rendering --------------------------------------------------------------


def shape_stencil(shape: str, side: int) -> npt.NDArray[np.bool_]:
    """Local boolean mask of a shape drawn in a ``side``-wide cell."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    centre = (side - 1) / 2.0
    if shape == "square":
        return np.ones((side, side), dtype=bool)
    if shape == "circle":
        radius = side / 2.0
        distance = (yy - centre) ** 2 + (xx - centre) ** 2
        return bool_array(distance <= radius * radius)
    if shape == "triangle":
        return bool_array(np.abs(xx - centre) <= (yy + 1) / 2.0)
    if shape == "bar":
        return np.ones((max(2, side // 3), side), dtype=bool)
    raise ConfigurationError(f"Unknown shape: {shape}")


def bool_array(values: npt.ArrayLike) -> npt.NDArray[np.bool_]:
    """Coerce to a boolean array."""
    return np.asarray(values, dtype=bool)


def object_mask(
    shape: str, side: int, origin: Tuple[int, int], image_size: int
) -> npt.NDArray[np.bool_]:
    """Full-image mask of one object placed with its cell at ``origin``."""
    stencil = shape_stencil(shape, side)
    x0, y0 = origin
    h, w = stencil.shape
    if x0 < 0 or y0 < 0 or x0 + w > image_size or y0 + h > image_size:
        raise GenerationError(f"{shape} at {origin} leaves the image")
    mask = np.zeros((image_size, image_size), dtype=bool)
    mask[y0:y0 + h, x0:x0 + w] = stencil
    return mask


def tight_box(mask: npt.NDArray[np.bool_]) -> BoundingBox:
    """Smallest half-open box holding every set pixel."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise GenerationError("Object rendered no pixel")
    return BoundingBox(
        int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1
    )


def side_range(size: str, image_size: int) -> Tuple[int, int]:
    """Inclusive range of cell sides for a size word."""
    if size == "small":
        low = max(3, image_size * 3 // 16)
        return low, max(low, image_size // 4)
    low = max(4, image_size * 5 // 16)
    return low, max(low, image_size * 3 // 8)


def render_scene(
    objects: Sequence[SceneObject],
    image_size: int,
    rng: np.random.Generator,
) -> Image:
    """Paint ``objects`` over a dark noisy background."""
    image = rng.uniform(0.0, 0.08, size=(image_size, image_size, 3))
    for obj in objects:
        mask = object_mask(obj.shape, obj.side, obj.origin, image_size)
        image[mask] = PALETTE[obj.color]
    return image


# -- generation -------------------------------------------------------------


def _pick_categories(
    stats: CorpusStats, rng: np.random.Generator
) -> List[Tuple[str, str, str]]:
    low = min(
        stats.objects_max,
        max(stats.objects_min, math.ceil(stats.phrases_target)),
    )
    n_categories = int(rng.integers(low, stats.objects_max + 1))
    pool = [(s, c) for s in SHAPES for c in PALETTE]
    chosen = rng.choice(len(pool), size=n_categories, replace=False)
    specs = [
        (pool[i][0], pool[i][1], SIZES[int(rng.integers(2))]) for i in chosen
    ]
    if (
        n_categories + 1 <= stats.objects_max
        and rng.random() < stats.duplicate_fraction
    ):
        specs.append(specs[int(rng.integers(n_categories))])
    return specs


def _place_objects(
    specs: Sequence[Tuple[str, str, str]],
    stats: CorpusStats,
    rng: np.random.Generator,
) -> Optional[List[SceneObject]]:
    size = stats.image_size
    placed: List[SceneObject] = []
    occupied = np.zeros((size, size), dtype=bool)
    for shape, color, size_word in specs:
        low, high = side_range(size_word, size)
        for _ in range(stats.max_retries):
            side = int(rng.integers(low, high + 1))
            stencil = shape_stencil(shape, side)
            h, w = stencil.shape
            if h > size or w > size:
                continue
            origin = (
                int(rng.integers(0, size - w + 1)),
                int(rng.integers(0, size - h + 1)),
            )
            mask = object_mask(shape, side, origin, size)
            box = tight_box(mask)
            if np.any(mask & occupied):
                continue
            if any(box.iou(other.box) > 0.1 for other in placed):
                continue
            occupied |= mask
            placed.append(
                SceneObject(shape, color, size_word, side, origin, box)
            )
            break
        else:
            return None
    return placed


def generate_scene(stats: CorpusStats, rng: np.random.Generator) -> Scene:
    """Draw one scene, retrying placement up to ``max_retries`` times."""
    for _ in range(stats.max_retries):
        specs = _pick_categories(stats, rng)
        objects = _place_objects(specs, stats, rng)
        if objects is not None:
            image = render_scene(objects, stats.image_size, rng)
            return Scene(image=image, objects=objects)
    raise GenerationError(
        f"Could not place up to {stats.objects_max} objects without overlap"
        f" in a {stats.image_size}x{stats.image_size} image after"
        f" {stats.max_retries} attempts"
    )


def _relation(
    first: SceneObject, second: SceneObject, rng: np.random.Generator
) -> List[str]:
    roll = rng.random()
    if roll < 0.25:
        return ["and"]
    if roll < 0.5:
        return ["next", "to"]
    (x1, y1), (x2, y2) = first.box.center(), second.box.center()
    if abs(y1 - y2) >= abs(x1 - x2):
        return ["above"] if y1 < y2 else ["below"]
    return ["left", "of"] if x1 < x2 else ["right", "of"]


def _assemble(
    opener: Sequence[str],
    phrases: Sequence[List[str]],
    relations: Sequence[List[str]],
) -> Tuple[List[str], List[Tuple[int, int]]]:
    words = list(opener)
    spans: List[Tuple[int, int]] = []
    for index, phrase in enumerate(phrases):
        if index:
            words.extend(relations[index - 1])
        words.append("a")
        spans.append((len(words), len(words) + len(phrase)))
        words.extend(phrase)
    return words, spans


def write_caption(
    scene: Scene,
    stats: CorpusStats,
    rng: np.random.Generator,
) -> Tuple[List[str], List[Tuple[int, int]], List[List[BoundingBox]]]:
    """Template one caption; returns words, spans and boxes per span.

    If the caption exceeds ``n_max`` it is shortened by dropping the
    opener, then size words, then turning relations into "and", then
    dropping trailing phrases.
    """
    by_category: Dict[Tuple[str, str], List[SceneObject]] = {}
    for obj in scene.objects:
        by_category.setdefault(obj.category, []).append(obj)
    categories = list(by_category)

    target = stats.phrases_target
    k = int(math.floor(target)) + int(rng.random() < target % 1.0)
    k = max(1, min(k, len(categories)))
    order = rng.permutation(len(categories))[:k]
    mentioned = [categories[int(i)] for i in order]

    phrases: List[List[str]] = []
    for category in mentioned:
        first = by_category[category][0]
        with_size = rng.random() < stats.size_word_prob
        words = [first.size] if with_size else []
        phrases.append(words + [first.color, first.shape])
    relations = [
        _relation(by_category[a][0], by_category[b][0], rng)
        for a, b in zip(mentioned, mentioned[1:])
    ]
    opener = list(OPENERS[int(rng.integers(len(OPENERS)))])
    if rng.random() < 0.5:
        opener = []

    def length() -> int:
        return len(_assemble(opener, phrases, relations)[0])

    if length() > stats.n_max:
        opener = []
    if length() > stats.n_max:
        phrases = [p[-2:] for p in phrases]
    if length() > stats.n_max:
        relations = [["and"] for _ in relations]
    while length() > stats.n_max and len(phrases) > 1:
        phrases.pop()
        relations.pop()
        mentioned.pop()

    words, spans = _assemble(opener, phrases, relations)
    boxes = [[obj.box for obj in by_category[c]] for c in mentioned]
    return words, spans, boxes


def generate_record(
    index: int, seed: int, stats: CorpusStats, vocab: Vocabulary
) -> CorpusRecord:
    """Scene and captions of image ``index``; pure given (seed, index)."""
    rng = np.random.default_rng([seed, index])
    image_id = f"img{index:05d}"
    scene = generate_scene(stats, rng)
    captions = []
    for k in range(stats.captions_per_image):
        words, spans, boxes = write_caption(scene, stats, rng)
        captions.append(
            GroundedCaption(
                caption_id=f"{image_id}_c{k}",
                image_id=image_id,
                token_ids=vocab.encode(words),
                spans=[
                    PhraseSpan(start, end, span_boxes)
                    for (start, end), span_boxes in zip(spans, boxes)
                ],
            )
        )
    return CorpusRecord(image_id=image_id, scene=scene, captions=captions)


def generate_corpus(
    num_images: int,
    seed: int,
    stats: Optional[CorpusStats] = None,
    max_workers: int = 1,
) -> Corpus:
    """Generate ``num_images`` records, deterministic given ``seed``."""
    if num_images < 1:
        raise ConfigurationError(f"num_images must be >= 1, got {num_images}")
    stats = stats or CorpusStats()
    stats.validate()
    vocab = Vocabulary()

    records: List[Optional[CorpusRecord]] = [None] * num_images
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        futures = {
            executor.submit(generate_record, index, seed, stats, vocab): index
            for index in range(num_images)
        }
        errors: Dict[int, Exception] = {}
        for future in as_completed(futures):
            index = futures[future]
            try:
                records[index] = future.result()
            except Exception as exc:
                logger.error(f"Failed to generate image {index}: {exc}")
                errors[index] = exc

    if errors:
        first = errors[min(errors)]
        if isinstance(first, ColocError) and len(errors) == 1:
            raise first
        raise GenerationError(
            f"Failed to generate {len(errors)} image(s), first: {first}"
        ) from first

    corpus = Corpus(
        records=[r for r in records if r is not None],
        vocab=vocab,
        seed=seed,
        stats=stats,
    )
    logger.info(
        f"Generated {len(corpus)} images with {corpus.caption_count()}"
        f" captions (seed={seed})"
    )
    return corpus


# -- persistence ------------------------------------------------------------


def _span_text(span: PhraseSpan) -> str:
    boxes = ";".join(box.to_text() for box in span.boxes)
    return f"{span.start}:{span.end}:{boxes}"


def _annotation_lines(corpus: Corpus) -> List[str]:
    lines = []
    for caption in corpus.captions():
        ids = " ".join(str(i) for i in caption.token_ids)
        spans = "|".join(_span_text(span) for span in caption.spans)
        lines.append(
            f"{caption.image_id}\t{caption.caption_id}\t{ids}\t{spans}"
        )
    return lines


def _scene_lines(corpus: Corpus) -> List[str]:
    lines = []
    for record in corpus.records:
        for obj in record.scene.objects:
            lines.append(
                "\t".join(
                    [
                        record.image_id,
                        obj.shape,
                        obj.color,
                        obj.size,
                        str(obj.side),
                        f"{obj.origin[0]},{obj.origin[1]}",
                        obj.box.to_text(),
                    ]
                )
            )
    return lines


def _write_lines(path: Path, lines: Sequence[str]) -> str:
    text = "".join(line + "\n" for line in lines)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    return text


def save_corpus(corpus: Corpus, directory: Path) -> Dict[str, object]:
    """Write ``corpus`` under ``directory`` and return its manifest."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    for record in corpus.records:
        write_tensors(
            directory / "images" / f"{record.image_id}.ten",
            {"image": record.scene.image},
        )
    annotations = _write_lines(
        directory / "annotations.txt", _annotation_lines(corpus)
    )
    _write_lines(directory / "scenes.txt", _scene_lines(corpus))
    _write_lines(directory / "vocab.txt", corpus.vocab.tokens)

    manifest: Dict[str, object] = {
        "schema_version": SCHEMA_VERSION,
        "seed": corpus.seed,
        "images": len(corpus),
        "captions": corpus.caption_count(),
        "vocab_size": len(corpus.vocab),
        "stats": asdict(corpus.stats),
        "annotations_sha256": hashlib.sha256(
            annotations.encode("utf-8")
        ).hexdigest(),
    }
    with open(directory / "manifest.txt", "w", encoding="utf-8") as f:
        yaml.safe_dump(manifest, f, sort_keys=True)
    logger.info(f"Saved corpus of {len(corpus)} images to {directory}")
    return manifest


def _check_schema(raw: object, path: Path) -> None:
    try:
        found = Version(str(raw))
    except InvalidVersion as exc:
        raise FormatError(f"{path}: bad schema_version {raw!r}") from exc
    if found.major != Version(SCHEMA_VERSION).major:
        raise FormatError(
            f"{path}: schema_version {found} is incompatible with"
            f" {SCHEMA_VERSION}"
        )


def read_manifest(directory: Path) -> Dict[str, object]:
    """Load and version-check ``manifest.txt``."""
    path = Path(directory) / "manifest.txt"
    if not path.exists():
        raise FormatError(f"No manifest found at {path}")
    with open(path, "r", encoding="utf-8") as f:
        manifest = yaml.safe_load(f)
    if not isinstance(manifest, dict):
        raise CorruptionError(path, "manifest is not a mapping")
    _check_schema(manifest.get("schema_version"), path)
    return manifest


def _parse_spans(text: str, path: Path, line_no: int) -> List[PhraseSpan]:
    spans = []
    if not text:
        return spans
    for chunk in text.split("|"):
        try:
            start, end, boxes = chunk.split(":", 2)
            spans.append(
                PhraseSpan(
                    int(start),
                    int(end),
                    [BoundingBox.from_text(b) for b in boxes.split(";")],
                )
            )
        except (ValueError, AnnotationError) as exc:
            raise CorruptionError(
                path, f"line {line_no}: bad span {chunk!r} ({exc})"
            ) from exc
    return spans


def _read_annotations(
    path: Path,
) -> Dict[str, List[GroundedCaption]]:
    captions: Dict[str, List[GroundedCaption]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise CorruptionError(
                    path, f"line {line_no}: expected 4 fields"
                )
            image_id, caption_id, ids, spans = fields
            try:
                token_ids = [int(i) for i in ids.split()]
            except ValueError as exc:
                raise CorruptionError(
                    path, f"line {line_no}: bad token ids"
                ) from exc
            captions.setdefault(image_id, []).append(
                GroundedCaption(
                    caption_id=caption_id,
                    image_id=image_id,
                    token_ids=token_ids,
                    spans=_parse_spans(spans, path, line_no),
                )
            )
    return captions


def _read_scenes(path: Path) -> Dict[str, List[SceneObject]]:
    objects: Dict[str, List[SceneObject]] = {}
    if not path.exists():
        return objects
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                image_id, shape, color, size, side, origin, box = (
                    line.split("\t")
                )
                x0, y0 = (int(v) for v in origin.split(","))
                obj = SceneObject(
                    shape,
                    color,
                    size,
                    int(side),
                    (x0, y0),
                    BoundingBox.from_text(box),
                )
            except (ValueError, AnnotationError) as exc:
                raise CorruptionError(
                    path, f"line {line_no}: {exc}"
                ) from exc
            objects.setdefault(image_id, []).append(obj)
    return objects


def _validate_caption(
    caption: GroundedCaption, vocab: Vocabulary, scene: Scene
) -> None:
    if not caption.token_ids:
        raise AnnotationError(f"Caption {caption.caption_id} is empty")
    bad = [i for i in caption.token_ids if not 0 <= i < len(vocab)]
    if bad:
        raise VocabularyError(
            f"Caption {caption.caption_id} uses ids {bad} outside the"
            f" vocabulary of {len(vocab)}"
        )
    for span in caption.spans:
        if not 0 <= span.start < span.end <= len(caption.token_ids):
            raise AnnotationError(
                f"Caption {caption.caption_id}: span {span.bounds} beyond"
                f" its {len(caption.token_ids)} tokens"
            )
        if not span.boxes:
            raise AnnotationError(
                f"Caption {caption.caption_id}: span {span.bounds} has no box"
            )
        for box in span.boxes:
            if not box.fits(scene.width, scene.height):
                raise AnnotationError(
                    f"Caption {caption.caption_id}: box {box.to_text()}"
                    f" outside the {scene.width}x{scene.height} image"
                )


def load_corpus(directory: Path, n_max: Optional[int] = None) -> Corpus:
    """Read a corpus written by :func:`save_corpus`.

    Captions longer than ``n_max`` (if given) are dropped with a warning,
    as are images left without any caption.
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    with open(directory / "vocab.txt", "r", encoding="utf-8") as f:
        vocab = Vocabulary([line.rstrip("\n") for line in f if line.strip()])
    captions = _read_annotations(directory / "annotations.txt")
    objects = _read_scenes(directory / "scenes.txt")

    raw_stats = manifest.get("stats") or {}
    if not isinstance(raw_stats, dict):
        raise CorruptionError(directory / "manifest.txt", "bad stats")
    try:
        stats = CorpusStats(**raw_stats)
    except TypeError as exc:
        raise CorruptionError(directory / "manifest.txt", str(exc)) from exc

    records = []
    dropped = 0
    for image_id in sorted(captions):
        image_path = directory / "images" / f"{image_id}.ten"
        if not image_path.exists():
            raise CorruptionError(image_path, "image file is missing")
        tensors = read_tensors(image_path)
        image = tensors.get("image")
        if image is None or image.ndim != 3 or image.shape[2] != 3:
            raise CorruptionError(image_path, "no H×W×3 tensor named image")
        scene = Scene(image=image, objects=objects.get(image_id, []))
        kept = []
        for caption in captions[image_id]:
            _validate_caption(caption, vocab, scene)
            if n_max is not None and len(caption.token_ids) > n_max:
                dropped += 1
                continue
            kept.append(caption)
        if kept:
            records.append(CorpusRecord(image_id, scene, kept))

    if dropped:
        logger.warning(
            f"Dropped {dropped} caption(s) longer than N_max={n_max}"
        )
    expected = manifest.get("images")
    if n_max is None and expected is not None and expected != len(records):
        raise CorruptionError(
            directory / "manifest.txt",
            f"manifest lists {expected} images, found {len(records)}",
        )
    seed = manifest.get("seed", 0)
    corpus = Corpus(
        records=records,
        vocab=vocab,
        seed=int(seed) if isinstance(seed, int) else 0,
        stats=stats,
    )
    logger.info(f"Loaded {len(corpus)} images from {directory}")
    return corpus


def split(
    corpus: Corpus, fractions: Sequence[float], seed: int
) -> Tuple[Corpus, Corpus, Corpus]:
    """Partition by image id into train, validation and test corpora."""
    if len(fractions) != 3:
        raise ConfigurationError("split needs three fractions")
    if any(f < 0 for f in fractions) or not math.isclose(
        sum(fractions), 1.0, abs_tol=1e-9
    ):
        raise ConfigurationError(
            f"Split fractions must be non-negative and sum to 1: {fractions}"
        )
    n = len(corpus)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigurationError(
            f"Split {fractions} of {n} images leaves an empty part"
            f" ({n_train}/{n_val}/{n_test})"
        )
    order = np.random.default_rng(seed).permutation(n)
    ids = corpus.image_ids
    parts = (
        order[:n_train],
        order[n_train:n_train + n_val],
        order[n_train + n_val:],
    )
    train, val, test = (
        corpus.subset([ids[int(i)] for i in part]) for part in parts
    )
    return train, val, test
