"""Combined objective and training loop.

The total loss is the weighted sum of the enabled scale losses. Disabled
scales are skipped entirely (no forward pass, no gradient), matching the
ablation semantics: a toggled-off head receives zero updates and its
component is absent from the metrics log.

All stochastic choices (batch order, mask plans, negative sampling, token
corruption) are pure functions of (config.seed, step index), so a resumed
run is bit-identical to an uninterrupted one.
"""

import copy
import json
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from qsvlm.config import LossWeights, TrainConfig
from qsvlm.data import VOCAB, SyntheticSample
from qsvlm.losses.global_align import global_alignment_loss
from qsvlm.losses.instance_match import build_match_batch, instance_matching_loss
from qsvlm.losses.local_align import local_alignment_loss
from qsvlm.losses.modality_recon import image_recon_loss, make_mask, mlm_loss, modality_loss
from qsvlm.model import QuadScaleModel, build_model
from qsvlm.seeding import derive_seed


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, components: dict):
        self.step = step
        self.components = components
        parts = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step}: {parts}")


@dataclass
class LossBundle:
    """Scalar losses for one step; disabled scales are None.

    `total` is recomputable exactly: it is the float64 weighted sum of the
    component values in fixed order (global, local, instance, modality).
    """

    l_g: float
    l_l: Optional[float]
    l_i: Optional[float]
    l_m: Optional[float]
    total: float

    @staticmethod
    def combine(weights: LossWeights, l_g, l_l, l_i, l_m) -> "LossBundle":
        total = weights.global_weight * l_g
        for w, l in ((weights.local_weight, l_l),
                     (weights.instance_weight, l_i),
                     (weights.modality_weight, l_m)):
            if l is not None:
                total += w * l
        return LossBundle(l_g=l_g, l_l=l_l, l_i=l_i, l_m=l_m, total=total)

    def as_record(self) -> dict:
        rec = {"l_g": self.l_g}
        for key, value in (("l_l", self.l_l), ("l_i", self.l_i), ("l_m", self.l_m)):
            if value is not None:
                rec[key] = value
        rec["total"] = self.total
        return rec


@dataclass
class Batch:
    images: torch.Tensor        # [B, 1, H, W]
    tokens: torch.Tensor        # [B, T]
    boundaries: list            # per-sample sentence spans
    token_lengths: list[int]    # valid (non-pad) length per row


def collate(samples: Sequence[SyntheticSample], max_tokens: int, pad_id: int = 0) -> Batch:
    images = torch.stack([torch.from_numpy(s.image) for s in samples])
    tokens = torch.full((len(samples), max_tokens), pad_id, dtype=torch.long)
    lengths = []
    for i, s in enumerate(samples):
        if len(s.token_ids) > max_tokens:
            raise ValueError(
                f"report of {len(s.token_ids)} tokens exceeds max_tokens={max_tokens}"
            )
        tokens[i, :len(s.token_ids)] = torch.as_tensor(s.token_ids, dtype=torch.long)
        lengths.append(len(s.token_ids))
    return Batch(images=images, tokens=tokens,
                 boundaries=[s.boundaries for s in samples], token_lengths=lengths)


def combined_loss(
    model: QuadScaleModel, batch: Batch, config: TrainConfig, step: int
) -> tuple[torch.Tensor, LossBundle]:
    """Weighted multi-scale loss for one batch at an absolute step index."""
    temps = config.temperatures
    weights = config.weights
    vision_feats = model.vision(batch.images)
    text_feats = model.text(batch.tokens, batch.boundaries)

    def scaled(name, fn):
        try:
            return fn()
        except Exception as exc:
            raise RuntimeError(f"{name} scale failed: {exc}") from exc

    l_g_t = scaled("global", lambda: global_alignment_loss(
        vision_feats.global_v, text_feats.global_t, temps.tau1,
        symmetric=config.symmetric_global))

    l_l_t = l_i_t = l_m_t = None
    if config.use_local:
        l_l_t = scaled("local", lambda: local_alignment_loss(
            vision_feats.patches, text_feats.sentences, text_feats.sentence_mask,
            temps.tau2, temps.tau_att, symmetric=config.symmetric_local))
    if config.use_instance:
        def instance():
            sim = (vision_feats.global_v @ text_feats.global_t.T).detach()
            match = build_match_batch(
                vision_feats.global_v, text_feats.global_t, sim,
                rng_seed=derive_seed(config.seed, "negatives", step))
            logits = model.match_head(match.fused)
            return instance_matching_loss(torch.sigmoid(logits), match.labels)
        l_i_t = scaled("instance", instance)
    if config.use_modality:
        def modality():
            img_plan = make_mask(model.config.num_patches, config.image_mask_ratio,
                                 seed=derive_seed(config.seed, "imgmask", step))
            l_mse = image_recon_loss(batch.images, img_plan, model.vision,
                                     model.image_decoder, config.norm_pix_targets)
            text_plans = [
                make_mask(batch.token_lengths[i], config.text_mask_ratio,
                          seed=derive_seed(config.seed, "textmask", step, i))
                for i in range(batch.tokens.shape[0])
            ]
            l_mlm = mlm_loss(batch.tokens, text_plans, model.text, model.mlm_head,
                             mask_id=VOCAB.mask_id, random_ids=VOCAB.content_ids)
            return modality_loss(l_mse, l_mlm)
        l_m_t = scaled("modality", modality)

    total_t = weights.global_weight * l_g_t
    for w, t in ((weights.local_weight, l_l_t),
                 (weights.instance_weight, l_i_t),
                 (weights.modality_weight, l_m_t)):
        if t is not None:
            total_t = total_t + w * t

    bundle = LossBundle.combine(
        weights,
        float(l_g_t.detach()),
        float(l_l_t.detach()) if l_l_t is not None else None,
        float(l_i_t.detach()) if l_i_t is not None else None,
        float(l_m_t.detach()) if l_m_t is not None else None,
    )
    return total_t, bundle


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict
    step: int
    config: TrainConfig
    torch_rng: torch.Tensor


def configure_threads() -> int:
    """Cap torch's intra-op parallelism; QSVLM_THREADS overrides the
    single-threaded default used for strict reproducibility."""
    threads = int(os.environ.get("QSVLM_THREADS", "1"))
    if threads < 1:
        raise ValueError("QSVLM_THREADS must be >= 1")
    torch.set_num_threads(threads)
    return threads


def _snapshot(model: QuadScaleModel, optimizer, step: int, config: TrainConfig) -> Checkpoint:
    return Checkpoint(
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer_state=copy.deepcopy(optimizer.state_dict()),
        step=step,
        config=config,
        torch_rng=torch.get_rng_state(),
    )


def _batch_indices(n: int, batch_size: int, seed: int, step: int) -> list[int]:
    rng = np.random.default_rng(derive_seed(seed, "order", step))
    return list(rng.choice(n, size=batch_size, replace=n < batch_size))


def train(
    config: TrainConfig,
    samples: Sequence[SyntheticSample],
    out_dir=None,
    resume: Optional[Checkpoint] = None,
) -> tuple[Checkpoint, list[dict]]:
    """Run `config.steps` optimizer steps over the corpus.

    Returns the final checkpoint and the per-step metric records written
    (appended, never rewritten) to `out_dir`/metrics.jsonl when given.
    """
    if len(samples) == 0:
        raise ValueError("dataset is empty")
    configure_threads()

    model = build_model(config.encoder, config.seed, pad_id=VOCAB.pad_id)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    start = 0
    if resume is not None:
        if replace(resume.config, steps=0) != replace(config, steps=0):
            raise ValueError("resume checkpoint was trained under a different config")
        model.load_state_dict(resume.model_state)
        optimizer.load_state_dict(copy.deepcopy(resume.optimizer_state))
        torch.set_rng_state(resume.torch_rng)
        start = resume.step
        if start > config.steps:
            raise ValueError(
                f"checkpoint is at step {start}, beyond configured steps={config.steps}"
            )

    metrics_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"

    records = []
    model.train()
    for step in range(start, config.steps):
        t0 = time.perf_counter()
        idx = _batch_indices(len(samples), config.batch_size, config.seed, step)
        batch = collate([samples[i] for i in idx], config.encoder.max_tokens,
                        pad_id=VOCAB.pad_id)
        total, bundle = combined_loss(model, batch, config, step)
        if not np.isfinite(bundle.total):
            raise NonFiniteLossError(step, bundle.as_record())
        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        record = {"step": step + 1}
        record.update(bundle.as_record())
        record["wall_ms"] = (time.perf_counter() - t0) * 1000.0
        records.append(record)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    return _snapshot(model, optimizer, config.steps, config), records
