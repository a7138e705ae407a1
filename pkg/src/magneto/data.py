"""Tagged items, vocabulary, batching, NUS-WIDE-style preprocessing and synthetic data."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import SyntheticConfig
from .errors import ContractError, DataFormatError, GenerationError, VocabularyError

# The 81 NUS-WIDE evaluation concepts.
NUS_WIDE_CONCEPTS = (
    "airport animal beach bear birds boats book bridge buildings cars castle cat cityscape "
    "clouds computer coral cow dancing dog earthquake elk fire fish flags flowers food fox "
    "frost garden glacier grass harbor horses house lake leaf map military moon mountain "
    "nighttime ocean person plane plants police protest railroad rainbow reflection road "
    "rocks running sand sign sky snow soccer sports statue street sun sunset surf swimmers "
    "tattoo temple tiger tower town toy train tree valley vehicle water waterfall wedding "
    "whales window zebra"
).split()


class TagVocabulary:
    """Bidirectional tag <-> id map; ids run from 1, id 0 is padding."""

    PAD = 0

    def __init__(self, tags: Iterable[str] = ()):
        self._tags: List[str] = []
        self._ids: Dict[str, int] = {}
        for t in tags:
            self.add(t)

    def add(self, tag: str) -> int:
        if tag in self._ids:
            return self._ids[tag]
        if not isinstance(tag, str) or not tag or "\n" in tag:
            raise VocabularyError(f"invalid tag {tag!r}")
        self._tags.append(tag)
        self._ids[tag] = len(self._tags)
        return self._ids[tag]

    def id(self, tag: str) -> int:
        try:
            return self._ids[tag]
        except KeyError:
            raise VocabularyError(f"unknown tag {tag!r}") from None

    def tag(self, tag_id: int) -> str:
        if not 1 <= tag_id <= len(self._tags):
            raise VocabularyError(f"tag id {tag_id} outside [1, {len(self._tags)}]")
        return self._tags[tag_id - 1]

    def __contains__(self, tag) -> bool:
        return tag in self._ids

    def __len__(self) -> int:
        return len(self._tags)

    @property
    def size(self) -> int:
        """Embedding table rows needed, padding included."""
        return len(self._tags) + 1

    def ids(self) -> range:
        return range(1, len(self._tags) + 1)

    def tags(self) -> List[str]:
        return list(self._tags)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for t in self._tags:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path) -> "TagVocabulary":
        vocab = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                tag = line.rstrip("\n")
                if not tag:
                    raise DataFormatError("empty tag", line=lineno)
                if tag in vocab:
                    raise DataFormatError(f"duplicate tag {tag!r}", line=lineno)
                vocab.add(tag)
        return vocab


@dataclass
class TaggedItem:
    id: str
    tags: List[int]
    labels: List[int]
    image: Union[str, np.ndarray, None] = None
    features: Optional[np.ndarray] = None
    ground_truth: Optional[frozenset] = None

    def __post_init__(self):
        if len(self.tags) != len(self.labels):
            raise ContractError(f"item {self.id}: {len(self.tags)} tags but {len(self.labels)} labels")
        if len(set(self.tags)) != len(self.tags):
            raise ContractError(f"item {self.id}: duplicate tags")

    @property
    def unimportant(self) -> List[int]:
        return [t for t, y in zip(self.tags, self.labels) if not y]

    @property
    def important(self) -> List[int]:
        return [t for t, y in zip(self.tags, self.labels) if y]

    def with_tags(self, tags, labels) -> "TaggedItem":
        return TaggedItem(self.id, list(tags), list(labels), self.image, self.features, self.ground_truth)

    def pixels(self) -> np.ndarray:
        if isinstance(self.image, np.ndarray):
            return self.image
        if self.image is None:
            raise ContractError(f"item {self.id} has no image")
        return np.load(self.image)


@dataclass
class Batch:
    tag_ids: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    images: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    item_ids: List[str] = field(default_factory=list)
    outliers: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.tag_ids.shape[0]


# --------------------------------------------------------------------------- preprocessing


@dataclass
class Rejection:
    index: int
    item_id: Optional[str]
    reason: str


def preprocess_nuswide(records: Sequence[dict], concepts: Sequence[str] = NUS_WIDE_CONCEPTS):
    """Filter raw NUS-WIDE-style records down to the tag-summarization subset.

    Each record needs ``id``, ``tags`` and ``concepts`` (the annotated ground
    truth).  Returns ``(items, vocab, rejections)`` where rejections lists
    malformed records with a reason.  A tag is labeled important iff it is one
    of the item's ground-truth concepts.
    """
    vocab = TagVocabulary(concepts)
    concept_set = set(concepts)
    items: List[TaggedItem] = []
    rejections: List[Rejection] = []
    for i, rec in enumerate(records):
        item_id = rec.get("id") if isinstance(rec, dict) else None
        problem = _raw_record_problem(rec)
        if problem:
            rejections.append(Rejection(i, item_id, problem))
            continue
        kept = []
        for t in rec["tags"]:
            if t in concept_set and t not in kept:
                kept.append(t)
        truth = frozenset(rec["concepts"])
        if not truth <= set(kept):
            continue
        if not kept:
            continue
        items.append(
            TaggedItem(
                id=str(item_id),
                tags=[vocab.id(t) for t in kept],
                labels=[int(t in truth) for t in kept],
                image=rec.get("image"),
                ground_truth=frozenset(vocab.id(t) for t in truth),
            )
        )
    return items, vocab, rejections


def _raw_record_problem(rec) -> Optional[str]:
    if not isinstance(rec, dict):
        return "record is not an object"
    if "_error" in rec:
        return f"unparseable record ({rec['_error']})"
    if "id" not in rec:
        return "missing field 'id'"
    for key in ("tags", "concepts"):
        if key not in rec:
            return f"missing field {key!r}"
        if not isinstance(rec[key], list) or not all(isinstance(t, str) for t in rec[key]):
            return f"field {key!r} must be a list of strings"
    return None


def read_raw_records(path) -> List[dict]:
    """Line-delimited raw records; undecodable lines become ``{"_error": ...}`` placeholders."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                out.append({"_error": f"line {lineno}: {exc.msg}"})
    return out


# --------------------------------------------------------------------------- batching


class TagOverflowError(ContractError):
    pass


def _truncate(item: TaggedItem, l: int) -> TaggedItem:
    order = sorted(range(len(item.tags)), key=lambda i: (-item.labels[i], item.tags[i]))[:l]
    return item.with_tags([item.tags[i] for i in order], [item.labels[i] for i in order])


def pad_and_batch(items: Sequence[TaggedItem], l: int, bs: int, strict: bool = True,
                  outlier_flags: Optional[Sequence[Sequence[bool]]] = None) -> List[Batch]:
    """Pad every item to ``l`` slots with id 0 and group consecutive items into batches."""
    if l < 1 or bs < 1:
        raise ContractError("l and bs must be >= 1")
    batches = []
    for start in range(0, len(items), bs):
        chunk = list(items[start : start + bs])
        flags_chunk = outlier_flags[start : start + bs] if outlier_flags is not None else None
        n = len(chunk)
        ids = np.zeros((n, l), dtype=np.int64)
        labels = np.zeros((n, l), dtype=np.float64)
        outliers = np.zeros((n, l), dtype=bool) if flags_chunk is not None else None
        for r, item in enumerate(chunk):
            if len(item.tags) > l:
                if strict:
                    raise TagOverflowError(
                        f"item {item.id} has {len(item.tags)} tags, more than the {l} slots"
                    )
                if flags_chunk is not None:
                    raise ContractError("outlier flags cannot be combined with truncation")
                item = _truncate(item, l)
            k = len(item.tags)
            ids[r, :k] = item.tags
            labels[r, :k] = item.labels
            if outliers is not None:
                outliers[r, :k] = flags_chunk[r]
        images = features = None
        if all(it.features is not None for it in chunk):
            features = np.stack([np.asarray(it.features) for it in chunk])
        if all(it.image is not None for it in chunk):
            images = np.stack([it.pixels() for it in chunk])
        batches.append(
            Batch(ids, labels, ids != 0, images, features, [it.id for it in chunk], outliers)
        )
    return batches


def augment_images(images: np.ndarray, rng: np.random.Generator, flip_p: float = 0.5,
                   pad_fraction: float = 0.125) -> np.ndarray:
    """Random horizontal flip, then zero-pad and crop back to the original size.

    ``images`` is (bs, C, H, W); the padding is ``round(pad_fraction * side)``
    pixels on every border.
    """
    images = np.asarray(images)
    if images.ndim != 4:
        raise ContractError(f"expected (bs, C, H, W) images, got shape {images.shape}")
    bs, _, h, w = images.shape
    ph, pw = int(round(pad_fraction * h)), int(round(pad_fraction * w))
    padded = np.pad(images, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.empty_like(images)
    for i in range(bs):
        img = padded[i]
        if rng.random() < flip_p:
            img = img[:, :, ::-1]
        top = int(rng.integers(0, 2 * ph + 1))
        left = int(rng.integers(0, 2 * pw + 1))
        out[i] = img[:, top : top + h, left : left + w]
    return out


# --------------------------------------------------------------------------- synthetic data


def tag_patterns(cfg: SyntheticConfig) -> np.ndarray:
    """One distinct (3, cell_px, cell_px) pattern per tag id (row 0 is the empty cell)."""
    rng = np.random.default_rng([cfg.seed, 1])
    c = cfg.cell_px
    pats = np.zeros((cfg.vocab_size + 1, 3, c, c))
    yy, xx = np.mgrid[0:c, 0:c]
    for k in range(1, cfg.vocab_size + 1):
        color = rng.uniform(0.2, 1.0, size=3)
        period = int(rng.integers(2, 5))
        phase = int(rng.integers(0, 2))
        texture = np.where(((xx // period + yy // period + phase) % 2) == 0, 1.0, 0.55)
        if k % 2 == 0:
            texture = texture.T
        pats[k] = color[:, None, None] * texture[None]
    return np.round(pats, 6)


def feature_projection(cfg: SyntheticConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 2])
    n_in = 3 * cfg.cell_px * cfg.cell_px
    return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, cfg.feature_dim)) * 4.0


def render(cell_tags: np.ndarray, patterns: np.ndarray, grid: int) -> np.ndarray:
    c = patterns.shape[-1]
    img = np.zeros((3, grid * c, grid * c))
    for cell, k in enumerate(cell_tags):
        r, q = divmod(cell, grid)
        img[:, r * c : (r + 1) * c, q * c : (q + 1) * c] = patterns[k]
    return img


def grid_features(image: np.ndarray, projection: np.ndarray, grid: int, cell_px: int) -> np.ndarray:
    """Per-cell pixel block flattened and projected; the synthetic 'precomputed' backbone."""
    cells = image.reshape(3, grid, cell_px, grid, cell_px).transpose(1, 3, 0, 2, 4)
    return cells.reshape(grid * grid, -1) @ projection


def occupancy(image: np.ndarray, patterns: np.ndarray, grid: int) -> Dict[int, int]:
    """Independent oracle: count grid cells whose pixels equal each tag's pattern."""
    c = patterns.shape[-1]
    counts: Dict[int, int] = {}
    for r in range(grid):
        for q in range(grid):
            block = image[:, r * c : (r + 1) * c, q * c : (q + 1) * c]
            for k in range(1, len(patterns)):
                if np.array_equal(block, patterns[k]):
                    counts[k] = counts.get(k, 0) + 1
                    break
    return counts


def generate_synthetic(cfg: SyntheticConfig) -> Tuple[List[TaggedItem], TagVocabulary]:
    """Planted-pattern dataset whose labels follow a cell-occupancy rule.

    Each item paints a few tags' patterns onto the cells of a grid image; its
    tag list is the painted tags plus distractor tags absent from the image.
    A tag is important iff its pattern covers at least ``cfg.threshold`` cells.
    """
    if cfg.patterns_max + cfg.distractors_max > cfg.vocab_size:
        raise GenerationError(
            f"vocabulary of {cfg.vocab_size} tags cannot supply {cfg.patterns_max} painted "
            f"plus {cfg.distractors_max} distractor tags"
        )
    vocab = TagVocabulary(f"tag{k:03d}" for k in range(1, cfg.vocab_size + 1))
    patterns = tag_patterns(cfg)
    projection = feature_projection(cfg) if cfg.feature_dim else None
    rng = np.random.default_rng([cfg.seed, 0])
    n_cells = cfg.grid_size ** 2
    items = []
    for i in range(cfg.items):
        n_paint = int(rng.integers(cfg.patterns_min, cfg.patterns_max + 1))
        chosen = rng.choice(np.arange(1, cfg.vocab_size + 1), size=n_paint, replace=False)
        free = list(rng.permutation(n_cells))
        cell_tags = np.zeros(n_cells, dtype=np.int64)
        counts = {}
        for k in chosen:
            want = int(rng.integers(cfg.cells_min, cfg.cells_max + 1))
            take = min(want, len(free))
            if take == 0:
                break
            for cell in free[:take]:
                cell_tags[cell] = k
            free = free[take:]
            counts[int(k)] = take
        painted = list(counts)
        n_dis = int(rng.integers(cfg.distractors_min, cfg.distractors_max + 1))
        pool = np.array([k for k in range(1, cfg.vocab_size + 1) if k not in counts])
        distractors = [int(k) for k in rng.choice(pool, size=n_dis, replace=False)] if n_dis else []
        tags = painted + distractors
        order = rng.permutation(len(tags))
        tags = [tags[j] for j in order]
        labels = [int(counts.get(t, 0) >= cfg.threshold) for t in tags]
        image = render(cell_tags, patterns, cfg.grid_size)
        feats = grid_features(image, projection, cfg.grid_size, cfg.cell_px) if projection is not None else None
        items.append(TaggedItem(f"syn{i:06d}", tags, labels, image=image, features=feats))
    return items, vocab


# --------------------------------------------------------------------------- files


def save_items(items: Sequence[TaggedItem], path, vocab: TagVocabulary, image_dir: Optional[str] = "images",
               write_images: bool = True) -> None:
    """Write line-delimited item records; inline pixel arrays go to ``image_dir`` as .npy files."""
    path = Path(path)
    base = path.parent
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in items:
            rec = {"id": item.id, "tags": [vocab.tag(t) for t in item.tags], "labels": [int(y) for y in item.labels]}
            if item.features is not None:
                rec["features"] = np.asarray(item.features).tolist()
            elif isinstance(item.image, np.ndarray):
                if not write_images:
                    raise ContractError(f"item {item.id}: inline image but image writing disabled")
                rel = f"{image_dir}/{item.id}.npy"
                (base / image_dir).mkdir(parents=True, exist_ok=True)
                np.save(base / rel, item.image)
                rec["image"] = rel
            elif item.image is not None:
                rec["image"] = os.path.relpath(item.image, base)
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_items(path, vocab: TagVocabulary, require_labels: bool = True) -> List[TaggedItem]:
    """Parse a dataset file; errors name the offending line and field."""
    path = Path(path)
    base = path.parent
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if not isinstance(rec, dict):
                raise DataFormatError("record is not an object", line=lineno)
            items.append(_parse_record(rec, lineno, base, vocab, require_labels))
    return items


def _parse_record(rec, lineno, base, vocab, require_labels):
    if not isinstance(rec.get("id"), str):
        raise DataFormatError("missing or non-string id", line=lineno, field="id")
    tags = rec.get("tags")
    if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
        raise DataFormatError("tags must be an array of strings", line=lineno, field="tags")
    if "labels" not in rec:
        if require_labels:
            raise DataFormatError("missing labels", line=lineno, field="labels")
        labels = [1] * len(tags)
    else:
        labels = rec["labels"]
        if not isinstance(labels, list) or any(y not in (0, 1) or isinstance(y, bool) for y in labels):
            raise DataFormatError("labels must be an array of 0/1", line=lineno, field="labels")
        if len(labels) != len(tags):
            raise DataFormatError("labels and tags differ in length", line=lineno, field="labels")
    if len(set(tags)) != len(tags):
        raise DataFormatError("duplicate tags", line=lineno, field="tags")
    has_image, has_feat = "image" in rec, "features" in rec
    if has_image == has_feat:
        raise DataFormatError("exactly one of image or features is required", line=lineno, field="image")
    try:
        ids = [vocab.id(t) for t in tags]
    except VocabularyError as exc:
        raise DataFormatError(str(exc), line=lineno, field="tags") from None
    image = features = None
    if has_image:
        if not isinstance(rec["image"], str):
            raise DataFormatError("image must be a relative path", line=lineno, field="image")
        image = str(base / rec["image"])
    else:
        try:
            features = np.asarray(rec["features"], dtype=np.float64)
        except (TypeError, ValueError):
            raise DataFormatError("features must be a numeric matrix", line=lineno, field="features") from None
        if features.ndim != 2:
            raise DataFormatError("features must be a (G*G, d_model) matrix", line=lineno, field="features")
    return TaggedItem(rec["id"], ids, [int(y) for y in labels], image=image, features=features)


def split_items(items: Sequence[TaggedItem], fraction: float, seed: int):
    """Deterministic (train, held-out) split."""
    order = np.random.default_rng(seed).permutation(len(items))
    n_hold = int(round(len(items) * fraction))
    hold = sorted(order[:n_hold])
    keep = sorted(order[n_hold:])
    return [items[i] for i in keep], [items[i] for i in hold]
