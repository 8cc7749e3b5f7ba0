"""Synthetic paired image/report corpus with ground-truth grounding boxes.

Images are noisy grayscale canvases with 1-3 bright motifs (blob, ring,
bar, cross) at non-overlapping locations. Reports come from a closed
template grammar: one findings sentence per motif naming the motif and its
quadrant, plus optional distractor sentences that carry no box. Every
findings sentence is paired with the pixel bounding box of its motif, so
alignment, zero-shot, and grounding claims can be checked exactly.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from qsvlm.seeding import derive_seed

log = logging.getLogger(__name__)

Box = tuple[int, int, int, int]  # (x0, y0, x1, y1), half-open, pixel units

MOTIF_CLASSES = ("blob", "ring", "bar", "cross")

QUADRANTS = ("upper left", "upper right", "lower left", "lower right")

DISTRACTOR_SENTENCES = (
    "the remainder of the image is clear.",
    "no other findings are seen.",
    "overall appearance is unremarkable.",
    "heart size appears normal.",
)

_CONTENT_WORDS = (
    "there", "is", "a", "in", "the",
    "blob", "ring", "bar", "cross",
    "upper", "lower", "left", "right",
    "remainder", "of", "image", "clear",
    "no", "other", "findings", "are", "seen",
    "overall", "appearance", "unremarkable",
    "heart", "size", "appears", "normal",
)


class Vocabulary:
    """Closed token set for the template grammar.

    Ids are dense from 0 with the special tokens first:
    PAD, MASK, CLS, SEP, then the period, then content words.
    """

    def __init__(self, words=_CONTENT_WORDS):
        specials = ("[PAD]", "[MASK]", "[CLS]", "[SEP]", ".")
        self.id_to_token = list(specials) + list(words)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        self.pad_id = self.token_to_id["[PAD]"]
        self.mask_id = self.token_to_id["[MASK]"]
        self.cls_id = self.token_to_id["[CLS]"]
        self.sep_id = self.token_to_id["[SEP]"]
        self.period_id = self.token_to_id["."]

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def content_ids(self) -> tuple[int, ...]:
        """Ids eligible as random replacements in masked-language corruption."""
        return tuple(range(5, len(self.id_to_token)))


VOCAB = Vocabulary()


def tokenize(text: str, vocab: Vocabulary = VOCAB) -> tuple[list[int], list[tuple[int, int]]]:
    """Whitespace/period split against the closed vocabulary.

    Returns token ids and sentence boundary spans (start, end), half-open,
    with each span ending just after its period token.
    """
    if not text.strip():
        raise ValueError("cannot tokenize an empty report")
    ids: list[int] = []
    for raw in text.split():
        word = raw
        periods = 0
        while word.endswith("."):
            word = word[:-1]
            periods += 1
        if word:
            if word not in vocab.token_to_id:
                raise ValueError(f"out-of-vocabulary token: {word!r}")
            ids.append(vocab.token_to_id[word])
        ids.extend([vocab.period_id] * periods)
    boundaries: list[tuple[int, int]] = []
    start = 0
    for i, tid in enumerate(ids):
        if tid == vocab.period_id:
            boundaries.append((start, i + 1))
            start = i + 1
    if start < len(ids):
        boundaries.append((start, len(ids)))
    return ids, boundaries


def detokenize(ids, vocab: Vocabulary = VOCAB) -> str:
    """Inverse of `tokenize` for grammar strings (periods attach to the
    preceding word)."""
    words = [vocab.id_to_token[i] for i in ids]
    text = " ".join(words).replace(" .", ".")
    return text


@dataclass
class SyntheticSample:
    image: np.ndarray            # [1, H, W] float32 in [0, 1]
    report: str
    token_ids: list[int]
    boundaries: list[tuple[int, int]]
    boxes: list  # one entry per sentence: Box for findings sentences, None otherwise
    class_label: str
    seed: int


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 64
    min_motifs: int = 1
    max_motifs: int = 3
    motif_min_size: int = 12
    motif_max_size: int = 20
    noise_level: float = 0.25
    max_distractors: int = 2
    classes: tuple = MOTIF_CLASSES

    def __post_init__(self):
        if not 1 <= self.min_motifs <= self.max_motifs:
            raise ValueError("need 1 <= min_motifs <= max_motifs")
        if not 4 <= self.motif_min_size <= self.motif_max_size < self.image_size // 2:
            raise ValueError("motif sizes must fit the image with room to place")
        if not 0.0 <= self.noise_level < 0.5:
            raise ValueError("noise_level must lie in [0, 0.5)")


def _draw_motif(canvas: np.ndarray, name: str, box: Box, rng: np.random.Generator) -> None:
    x0, y0, x1, y1 = box
    h, w = y1 - y0, x1 - x0
    ys, xs = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ry, rx = h / 2.0, w / 2.0
    r = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2
    thick_y = max(2, h // 3)
    thick_x = max(2, w // 3)
    if name == "blob":
        mask = r <= 1.0
    elif name == "ring":
        mask = (r <= 1.0) & (r >= 0.45)
    elif name == "bar":
        mask = np.abs(ys - cy) <= thick_y / 2.0
    elif name == "cross":
        mask = (np.abs(ys - cy) <= thick_y / 2.0) | (np.abs(xs - cx) <= thick_x / 2.0)
    else:
        raise ValueError(f"unknown motif {name!r}")
    values = 0.75 + 0.25 * rng.random((h, w))
    region = canvas[y0:y1, x0:x1]
    region[mask] = values[mask]


def _quadrant(box: Box, image_size: int) -> str:
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    vert = "upper" if cy < image_size / 2.0 else "lower"
    horiz = "left" if cx < image_size / 2.0 else "right"
    return f"{vert} {horiz}"


def _boxes_overlap(a: Box, b: Box, margin: int = 2) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0]
                or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def _place_motifs(config: DataConfig, n: int, rng: np.random.Generator):
    """Sample n non-overlapping boxes or return None if placement fails."""
    boxes: list[Box] = []
    for _ in range(n):
        placed = False
        for _ in range(50):
            w = int(rng.integers(config.motif_min_size, config.motif_max_size + 1))
            h = int(rng.integers(config.motif_min_size, config.motif_max_size + 1))
            x0 = int(rng.integers(1, config.image_size - w))
            y0 = int(rng.integers(1, config.image_size - h))
            box = (x0, y0, x0 + w, y0 + h)
            if all(not _boxes_overlap(box, other) for other in boxes):
                boxes.append(box)
                placed = True
                break
        if not placed:
            return None
    return boxes


def generate_sample(config: DataConfig, sample_seed: int) -> SyntheticSample:
    regenerations = 0
    attempt_seed = sample_seed
    while True:
        rng = np.random.default_rng(attempt_seed)
        n_motifs = int(rng.integers(config.min_motifs, config.max_motifs + 1))
        motifs = [str(rng.choice(config.classes)) for _ in range(n_motifs)]
        boxes = _place_motifs(config, n_motifs, rng)
        if boxes is not None:
            break
        regenerations += 1
        attempt_seed = derive_seed(sample_seed, "retry", regenerations)
    if regenerations:
        log.debug("sample %d regenerated %d times after placement failure",
                  sample_seed, regenerations)

    canvas = (config.noise_level * rng.random((config.image_size, config.image_size))
              ).astype(np.float64)
    sentences: list[tuple[str, Box | None]] = []
    for name, box in zip(motifs, boxes):
        _draw_motif(canvas, name, box, rng)
        quadrant = _quadrant(box, config.image_size)
        sentences.append((f"there is a {name} in the {quadrant}.", box))
    n_distract = int(rng.integers(0, config.max_distractors + 1))
    picks = rng.choice(len(DISTRACTOR_SENTENCES), size=n_distract, replace=False)
    for k in picks:
        sentences.append((DISTRACTOR_SENTENCES[int(k)], None))
    order = rng.permutation(len(sentences))
    sentences = [sentences[int(i)] for i in order]

    report = " ".join(text for text, _ in sentences)
    token_ids, boundaries = tokenize(report)
    if len(boundaries) != len(sentences):
        raise RuntimeError("sentence boundary count diverged from the grammar")
    image = np.clip(canvas, 0.0, 1.0).astype(np.float32)[None, :, :]
    return SyntheticSample(
        image=image,
        report=report,
        token_ids=token_ids,
        boundaries=boundaries,
        boxes=[box for _, box in sentences],
        class_label="+".join(sorted(motifs)),
        seed=sample_seed,
    )


def generate_corpus(n: int, config: DataConfig, seed: int) -> list[SyntheticSample]:
    """n samples, each derived from (seed, index) so generation is
    order-independent and reproducible."""
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    return [generate_sample(config, derive_seed(seed, "sample", i)) for i in range(n)]


# --- corpus persistence -----------------------------------------------------

FORMAT_VERSION = 1


def save_corpus(samples, out_dir, config: DataConfig, seed: int) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, sample in enumerate(samples):
        name = f"images/sample_{i:05d}.png"
        arr = np.round(sample.image[0] * 65535.0).astype(np.uint16)
        Image.fromarray(arr).save(out / name)
        records.append({
            "index": i,
            "image": name,
            "report": sample.report,
            "boxes": [list(b) if b is not None else None for b in sample.boxes],
            "label": sample.class_label,
            "seed": sample.seed,
        })
    with open(out / "annotations.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    meta = {
        "format_version": FORMAT_VERSION,
        "n": len(samples),
        "seed": seed,
        "config": {
            "image_size": config.image_size,
            "min_motifs": config.min_motifs,
            "max_motifs": config.max_motifs,
            "motif_min_size": config.motif_min_size,
            "motif_max_size": config.motif_max_size,
            "noise_level": config.noise_level,
            "max_distractors": config.max_distractors,
            "classes": list(config.classes),
        },
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_corpus(corpus_dir) -> list[SyntheticSample]:
    root = Path(corpus_dir)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no corpus at {root} (missing meta.json)")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported corpus format version {meta.get('format_version')}")
    samples = []
    with open(root / "annotations.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            arr = np.asarray(Image.open(root / rec["image"]), dtype=np.float32) / 65535.0
            token_ids, boundaries = tokenize(rec["report"])
            samples.append(SyntheticSample(
                image=arr[None, :, :],
                report=rec["report"],
                token_ids=token_ids,
                boundaries=boundaries,
                boxes=[tuple(b) if b is not None else None for b in rec["boxes"]],
                class_label=rec["label"],
                seed=rec["seed"],
            ))
    return samples


def corpus_image_size(corpus_dir) -> int:
    with open(Path(corpus_dir) / "meta.json") as fh:
        return int(json.load(fh)["config"]["image_size"])
