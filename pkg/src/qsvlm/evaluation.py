"""Desk-scale evaluation protocols.

Zero-shot classification scores each image against encoded class-prompt
sentences. Phrase grounding turns sentence/patch similarities into a
heatmap over the patch grid, thresholds it at mean + k*std, and reports
IoU against the annotated box plus the contrast-to-noise ratio of heatmap
values inside vs outside the box:

    CNR = (mu_in - mu_out) / sqrt((var_in + var_out) / 2)

The paper series this follows reports CNR without defining it; the formula
above is the BioViL convention. The linear probe trains a logistic head on
a stratified fraction of labels over frozen embeddings, and the ablation
harness trains the 7 on/off combinations of the local/instance/modality
scales (global always on) under identical seeds.
"""

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from qsvlm.config import TrainConfig
from qsvlm.data import (
    MOTIF_CLASSES,
    VOCAB,
    Box,
    SyntheticSample,
    Vocabulary,
    detokenize,
    tokenize,
)
from qsvlm.losses.local_align import attention_context
from qsvlm.model import QuadScaleModel
from qsvlm.seeding import derive_seed
from qsvlm.training import Checkpoint, train

DEFAULT_THRESHOLD_K = 1.0


# --- shared encoding helpers -------------------------------------------------


def model_from_checkpoint(ckpt: Checkpoint) -> QuadScaleModel:
    model = QuadScaleModel(ckpt.config.encoder, pad_id=VOCAB.pad_id)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model


@torch.no_grad()
def encode_image_batch(model: QuadScaleModel, samples: Sequence[SyntheticSample],
                       batch_size: int = 64) -> torch.Tensor:
    """Global image embeddings [N, D] for a sample list."""
    chunks = []
    for i in range(0, len(samples), batch_size):
        images = torch.stack([torch.from_numpy(s.image) for s in samples[i:i + batch_size]])
        chunks.append(model.vision(images).global_v)
    return torch.cat(chunks)


@torch.no_grad()
def encode_prompt(model: QuadScaleModel, prompt: str,
                  vocab: Vocabulary = VOCAB) -> torch.Tensor:
    """Global embedding of a prompt sentence; raises on out-of-grammar tokens."""
    ids, boundaries = tokenize(prompt, vocab)
    tokens = torch.as_tensor(ids, dtype=torch.long).unsqueeze(0)
    return model.text(tokens, [boundaries]).global_t[0]


# --- metrics containers -------------------------------------------------------


@dataclass
class MetricsReport:
    task: str
    per_class: dict
    aggregate: dict  # aggregate values are arithmetic means of per-item scores
    seed: Optional[int] = None

    def as_record(self) -> dict:
        return {"task": self.task, "per_class": self.per_class,
                "aggregate": self.aggregate, "seed": self.seed}


def one_vs_rest_auc(labels: Sequence[str], scores: np.ndarray,
                    class_order: Sequence[str]) -> tuple[dict, float]:
    """Per-class one-vs-rest AUC and their mean.

    Classes without both positives and negatives in `labels` are skipped.
    """
    per_class = {}
    for k, cls in enumerate(class_order):
        y = np.asarray([1 if lab == cls else 0 for lab in labels])
        if y.min() == y.max():
            continue
        per_class[cls] = float(roc_auc_score(y, scores[:, k]))
    if not per_class:
        raise ValueError("no class has both positive and negative examples")
    return per_class, float(np.mean(list(per_class.values())))


# --- zero-shot classification -------------------------------------------------


def classification_report(truth: Sequence[str], scores: np.ndarray,
                          class_order: Sequence[str]) -> MetricsReport:
    """Accuracy and one-vs-rest AUC from a score matrix.

    Prediction is argmax over columns; score ties break toward the earlier
    class index (numpy argmax picks the first maximum).
    """
    if scores.shape != (len(truth), len(class_order)):
        raise ValueError(
            f"score matrix {scores.shape} does not match "
            f"{len(truth)} samples x {len(class_order)} classes"
        )
    pred = [class_order[k] for k in scores.argmax(axis=1)]
    accuracy = float(np.mean([p == t for p, t in zip(pred, truth)]))
    per_class_auc, macro_auc = one_vs_rest_auc(truth, scores, class_order)
    return MetricsReport(
        task="zeroshot",
        per_class={"auc": per_class_auc},
        aggregate={"accuracy": accuracy, "auc": macro_auc},
    )


def zero_shot_classify(
    model: QuadScaleModel,
    samples: Sequence[SyntheticSample],
    class_prompts: Sequence[tuple[str, str]],
    vocab: Vocabulary = VOCAB,
) -> tuple[MetricsReport, np.ndarray]:
    """Score images against class prompts; prediction is the argmax class.

    `class_prompts` is an ordered list of (label, prompt sentence); ties
    break toward the earlier index. Returns the report and the [N, K]
    score matrix.
    """
    if len(class_prompts) < 2:
        raise ValueError("zero-shot classification needs at least 2 classes")
    prompt_embs = torch.stack([encode_prompt(model, p, vocab) for _, p in class_prompts])
    image_embs = encode_image_batch(model, samples)
    scores = (image_embs @ prompt_embs.T).numpy()
    class_order = [label for label, _ in class_prompts]
    truth = [s.class_label for s in samples]
    return classification_report(truth, scores, class_order), scores


# --- phrase grounding ----------------------------------------------------------


@dataclass
class GroundingResult:
    sentence: str
    heatmap: np.ndarray               # [Hp, Wp] patch-grid similarity
    region_mask: np.ndarray           # [H, W] bool, pixels above threshold
    region_box: Optional[Box]         # bounding box of the mask, None if empty
    iou: Optional[float] = None
    cnr: Optional[float] = None
    image: Optional[np.ndarray] = None  # queried image, kept for overlays
    gt_box: Optional[Box] = None


def region_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks (0 when both are empty)."""
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union > 0 else 0.0


def box_mask(box: Box, height: int, width: int) -> np.ndarray:
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        raise ValueError(f"box {box} degenerate or outside a {width}x{height} grid")
    mask = np.zeros((height, width), dtype=bool)
    mask[y0:y1, x0:x1] = True
    return mask


def mask_box_iou(mask: np.ndarray, box: Box) -> float:
    return region_iou(mask, box_mask(box, *mask.shape))


def cnr(values: np.ndarray, box: Box) -> float:
    """Contrast-to-noise ratio of grid values inside vs outside the box.

    Population statistics; raises when both regions have zero variance
    (the ratio is undefined for a flat heatmap).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("cnr expects a 2D value grid")
    inside = box_mask(box, *values.shape)
    if inside.all():
        raise ValueError("box covers the whole grid; exterior is empty")
    mu_in, mu_out = values[inside].mean(), values[~inside].mean()
    var_in, var_out = values[inside].var(), values[~inside].var()
    denom = np.sqrt((var_in + var_out) / 2.0)
    if denom == 0.0:
        raise ValueError("zero variance inside and outside the box; CNR undefined")
    return float((mu_in - mu_out) / denom)


def upsample_heatmap(heatmap: np.ndarray, patch_size: int) -> np.ndarray:
    return np.repeat(np.repeat(heatmap, patch_size, axis=0), patch_size, axis=1)


def threshold_region(heatmap: np.ndarray, patch_size: int,
                     threshold_k: float) -> tuple[np.ndarray, Optional[Box]]:
    """Pixels of patches above mean + k*std, and their bounding box.

    A flat heatmap has std 0, so for k > 0 nothing clears the strict
    threshold and the region is empty (box None).
    """
    threshold = heatmap.mean() + threshold_k * heatmap.std()
    mask = upsample_heatmap(heatmap > threshold, patch_size)
    if not mask.any():
        return mask, None
    ys, xs = np.nonzero(mask)
    return mask, (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


@torch.no_grad()
def ground_phrase(
    model: QuadScaleModel,
    image: np.ndarray,
    sentence: str,
    vocab: Vocabulary = VOCAB,
    mode: str = "cosine",
    threshold_k: float = DEFAULT_THRESHOLD_K,
    box: Optional[Box] = None,
    tau_att: float = 0.1,
) -> GroundingResult:
    """Localize one sentence in one image.

    mode="cosine" uses sentence/patch cosine similarity; mode="attention"
    reuses the local-alignment attention weights at temperature `tau_att`.
    The predicted region is every patch above mean + threshold_k * std of
    the heatmap, upsampled to pixels. When `box` is given, IoU and CNR
    against it are filled in.
    """
    config = model.config
    ids, boundaries = tokenize(sentence, vocab)
    tokens = torch.as_tensor(ids, dtype=torch.long).unsqueeze(0)
    sent_emb = model.text(tokens, [boundaries]).sentences[0, 0]
    if isinstance(image, np.ndarray):
        image_t = torch.from_numpy(image).unsqueeze(0)
    else:
        image_t = image.unsqueeze(0) if image.ndim == 3 else image
    patches = model.vision(image_t).patches[0]

    if mode == "cosine":
        heat = (torch.nn.functional.normalize(patches, dim=-1)
                @ torch.nn.functional.normalize(sent_emb, dim=0))
    elif mode == "attention":
        _, heat = attention_context(patches, sent_emb, tau_att)
    else:
        raise ValueError(f"unknown grounding mode {mode!r}")
    grid = config.grid_size
    heatmap = heat.reshape(grid, grid).numpy().astype(np.float64)
    region_mask, region_box = threshold_region(heatmap, config.patch_size, threshold_k)

    result = GroundingResult(sentence=sentence, heatmap=heatmap,
                             region_mask=region_mask, region_box=region_box,
                             image=image_t[0].numpy(), gt_box=box)
    if box is not None:
        result.iou = mask_box_iou(region_mask, box)
        result.cnr = cnr(upsample_heatmap(heatmap, config.patch_size), box)
    return result


def miou(results: Sequence[GroundingResult]) -> float:
    """Arithmetic mean of per-item IoU values."""
    ious = [r.iou for r in results if r.iou is not None]
    if not ious:
        raise ValueError("no grounding results with an IoU to average")
    return float(np.mean(ious))


def evaluate_grounding(
    model: QuadScaleModel,
    samples: Sequence[SyntheticSample],
    mode: str = "cosine",
    threshold_k: float = DEFAULT_THRESHOLD_K,
    limit: Optional[int] = None,
) -> tuple[MetricsReport, list[GroundingResult]]:
    """Ground every boxed sentence of every sample; aggregate mIoU and mean CNR."""
    results = []
    for sample in samples:
        for j, box in enumerate(sample.boxes):
            if box is None:
                continue
            start, end = sample.boundaries[j]
            sentence = detokenize(sample.token_ids[start:end])
            results.append(ground_phrase(model, sample.image, sentence,
                                         mode=mode, threshold_k=threshold_k, box=box))
            if limit is not None and len(results) >= limit:
                break
        if limit is not None and len(results) >= limit:
            break
    if not results:
        raise ValueError("no boxed sentences found in the sample set")
    cnrs = [r.cnr for r in results if r.cnr is not None]
    report = MetricsReport(
        task="ground",
        per_class={},
        aggregate={"miou": miou(results), "cnr": float(np.mean(cnrs)),
                   "queries": len(results)},
    )
    return report, results


# --- linear probe ----------------------------------------------------------------


def stratified_subset(labels: Sequence[str], fraction: float, seed: int) -> list[int]:
    """Indices of roughly `fraction` of the data, at least one per class."""
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(i)
    picked: list[int] = []
    for lab in sorted(by_class):
        idx = by_class[lab]
        take = max(1, round(fraction * len(idx)))
        order = rng.permutation(len(idx))
        picked.extend(idx[int(o)] for o in order[:take])
    return sorted(picked)


def fit_probe_auc(train_feats: np.ndarray, train_labels: Sequence[str],
                  test_feats: np.ndarray, test_labels: Sequence[str]) -> float:
    """Logistic head on frozen features; macro one-vs-rest AUC on the test set."""
    clf = LogisticRegression(max_iter=2000)
    clf.fit(train_feats, list(train_labels))
    probs = clf.predict_proba(test_feats)
    _, macro = one_vs_rest_auc(list(test_labels), probs, list(clf.classes_))
    return macro


def linear_probe(
    model: QuadScaleModel,
    train_samples: Sequence[SyntheticSample],
    test_samples: Sequence[SyntheticSample],
    fraction: float,
    seed: int = 0,
) -> float:
    """Probe AUC at a labeled-subset fraction (stratified, >=1 per class)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    train_labels = [s.class_label for s in train_samples]
    classes = sorted(set(train_labels))
    target = round(fraction * len(train_samples))
    if target < len(classes):
        raise ValueError(
            f"subset of {target} samples is smaller than the {len(classes)}-class label set"
        )
    subset = stratified_subset(train_labels, fraction, seed)
    feats = encode_image_batch(model, [train_samples[i] for i in subset]).numpy()
    labels = [train_labels[i] for i in subset]
    test_feats = encode_image_batch(model, test_samples).numpy()
    return fit_probe_auc(feats, labels, test_feats,
                         [s.class_label for s in test_samples])


# --- ablation matrix ----------------------------------------------------------------


TOGGLE_COMBOS = (
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
)


@dataclass
class AblationRow:
    local: bool
    instance: bool
    modality: bool
    probe_auc: Optional[float] = None
    zero_shot_auc: Optional[float] = None
    zero_shot_accuracy: Optional[float] = None
    error: Optional[str] = None

    def combo_name(self) -> str:
        parts = [name for name, on in (("local", self.local), ("instance", self.instance),
                                       ("modality", self.modality)) if on]
        return "+".join(parts)


def run_ablation(
    base_config: TrainConfig,
    train_samples: Sequence[SyntheticSample],
    probe_train: Sequence[SyntheticSample],
    probe_test: Sequence[SyntheticSample],
    zero_shot_samples: Sequence[SyntheticSample],
    class_prompts: Sequence[tuple[str, str]],
    seeds: Sequence[int],
    probe_fraction: float = 0.1,
) -> dict[int, list[AblationRow]]:
    """Train the 7 local/instance/modality combinations per seed.

    Rows that fail carry the error message instead of scores; the rest of
    the table still completes.
    """
    tables: dict[int, list[AblationRow]] = {}
    for seed in seeds:
        rows = []
        for local, instance, modality in TOGGLE_COMBOS:
            row = AblationRow(local=local, instance=instance, modality=modality)
            try:
                cfg = replace(base_config, seed=seed, use_local=local,
                              use_instance=instance, use_modality=modality)
                ckpt, _ = train(cfg, train_samples)
                model = model_from_checkpoint(ckpt)
                report, _ = zero_shot_classify(model, zero_shot_samples, class_prompts)
                row.zero_shot_auc = report.aggregate["auc"]
                row.zero_shot_accuracy = report.aggregate["accuracy"]
                row.probe_auc = linear_probe(model, probe_train, probe_test,
                                             probe_fraction, seed=derive_seed(seed, "probe"))
            except Exception as exc:  # annotate and continue with the other rows
                row.error = str(exc)
            rows.append(row)
        tables[seed] = rows
    return tables


def aggregate_ablation(tables: dict[int, list[AblationRow]]) -> list[AblationRow]:
    """Mean scores per combo across seeds (rows with errors are skipped)."""
    combos = list(TOGGLE_COMBOS)
    out = []
    for i, (local, instance, modality) in enumerate(combos):
        rows = [tables[s][i] for s in tables if tables[s][i].error is None]
        agg = AblationRow(local=local, instance=instance, modality=modality)
        if rows:
            agg.probe_auc = float(np.mean([r.probe_auc for r in rows]))
            agg.zero_shot_auc = float(np.mean([r.zero_shot_auc for r in rows]))
            agg.zero_shot_accuracy = float(np.mean([r.zero_shot_accuracy for r in rows]))
        else:
            agg.error = "all seeds failed"
        out.append(agg)
    return out


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    header = f"{'local':>6} {'instance':>9} {'modality':>9} {'probe_auc':>10} {'zs_auc':>8} {'zs_acc':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        mark = lambda b: "x" if b else ""  # noqa: E731
        if r.error is not None:
            tail = f"FAILED: {r.error}"
            lines.append(f"{mark(r.local):>6} {mark(r.instance):>9} {mark(r.modality):>9} {tail}")
        else:
            lines.append(
                f"{mark(r.local):>6} {mark(r.instance):>9} {mark(r.modality):>9} "
                f"{r.probe_auc:>10.4f} {r.zero_shot_auc:>8.4f} {r.zero_shot_accuracy:>8.4f}"
            )
    return "\n".join(lines)


def default_class_prompts(classes: Optional[Sequence[str]] = None) -> list[tuple[str, str]]:
    """Grammar-conformant prompt per motif class: 'there is a <motif>.'"""
    classes = list(classes) if classes is not None else list(MOTIF_CLASSES)
    return [(cls, f"there is a {cls}.") for cls in classes]
