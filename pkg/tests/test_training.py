"""Training loop: loss combination, toggles, determinism, checkpoints."""

import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from qsvlm.checkpoint import (
    MAGIC,
    CheckpointError,
    checkpoint_hash,
    load_checkpoint,
    save_checkpoint,
)
from qsvlm.config import ConfigError, LossWeights, TrainConfig, config_to_ini, parse_config
from qsvlm.data import DataConfig, generate_corpus
from qsvlm.encoders import EncoderConfig
from qsvlm.model import build_model
from qsvlm.training import LossBundle, collate, combined_loss, train


def small_config(**overrides) -> TrainConfig:
    defaults = dict(
        steps=4,
        batch_size=4,
        encoder=EncoderConfig(image_size=32, patch_size=8, embed_dim=32, depth=1,
                              heads=2, vocab_size=34, max_tokens=40, max_sentences=6),
        data=DataConfig(image_size=32, motif_min_size=8, motif_max_size=12),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def corpus():
    cfg = small_config()
    return generate_corpus(12, cfg.data, seed=42)


class TestLossBundle:
    def test_weighted_sum_is_exact(self):
        w = LossWeights(1.0, 1.0, 1.0, 1.0)
        bundle = LossBundle.combine(w, 1.0, 2.0, 3.0, 4.0)
        assert bundle.total == 10.0

    def test_disabled_scales_contribute_zero(self):
        w = LossWeights(1.0, 0.5, 0.5, 0.5)
        bundle = LossBundle.combine(w, 1.5, None, None, None)
        assert bundle.total == 1.5
        assert set(bundle.as_record()) == {"l_g", "total"}

    def test_random_weights_match_direct_arithmetic(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            ws = rng.random(4)
            ls = rng.random(4) * 5
            w = LossWeights(*map(float, ws))
            bundle = LossBundle.combine(w, *map(float, ls))
            expected = ws[0] * ls[0] + ws[1] * ls[1] + ws[2] * ls[2] + ws[3] * ls[3]
            assert bundle.total == pytest.approx(expected, abs=1e-7)
            # stored total recomputes exactly from components and weights
            recomputed = (w.global_weight * bundle.l_g + w.local_weight * bundle.l_l
                          + w.instance_weight * bundle.l_i + w.modality_weight * bundle.l_m)
            assert recomputed == bundle.total


class TestCombinedLoss:
    def test_weighted_total_matches_components(self, corpus):
        cfg = small_config(weights=LossWeights(0.7, 0.3, 2.0, 0.1))
        model = build_model(cfg.encoder, seed=0)
        batch = collate(corpus[:4], cfg.encoder.max_tokens)
        total, bundle = combined_loss(model, batch, cfg, step=0)
        expected = (0.7 * bundle.l_g + 0.3 * bundle.l_l + 2.0 * bundle.l_i
                    + 0.1 * bundle.l_m)
        assert bundle.total == pytest.approx(expected, abs=1e-9)
        assert float(total.detach()) == pytest.approx(bundle.total, rel=1e-5)

    def test_disabled_scales_skipped_and_gradient_free(self, corpus):
        cfg = small_config(use_local=False, use_instance=False, use_modality=False)
        model = build_model(cfg.encoder, seed=0)
        batch = collate(corpus[:4], cfg.encoder.max_tokens)
        total, bundle = combined_loss(model, batch, cfg, step=0)
        assert bundle.l_l is None and bundle.l_i is None and bundle.l_m is None
        total.backward()
        # heads owned by disabled scales receive no gradient at all
        assert all(p.grad is None for p in model.match_head.parameters())
        assert all(p.grad is None for p in model.image_decoder.parameters())
        assert all(p.grad is None for p in model.mlm_head.parameters())
        assert any(p.grad is not None for p in model.vision.parameters())

    def test_all_toggle_combinations_run(self, corpus):
        batchable = corpus[:4]
        for local in (False, True):
            for instance in (False, True):
                for modality in (False, True):
                    cfg = small_config(use_local=local, use_instance=instance,
                                       use_modality=modality)
                    model = build_model(cfg.encoder, seed=0)
                    batch = collate(batchable, cfg.encoder.max_tokens)
                    total, bundle = combined_loss(model, batch, cfg, step=0)
                    assert math.isfinite(bundle.total)

    def test_component_failure_names_the_scale(self, corpus):
        # a text mask ratio that rounds to zero masked tokens fails inside
        # the modality scale, and the error names it
        cfg = small_config(text_mask_ratio=0.001)
        model = build_model(cfg.encoder, seed=0)
        batch = collate(corpus[:4], cfg.encoder.max_tokens)
        with pytest.raises(RuntimeError, match="modality scale failed"):
            combined_loss(model, batch, cfg, step=0)


class TestTrainLoop:
    def test_zero_steps_equals_initialization(self, corpus):
        cfg = small_config(steps=0)
        ckpt, records = train(cfg, corpus)
        assert records == []
        assert ckpt.step == 0
        reference = build_model(cfg.encoder, seed=cfg.seed)
        for key, value in reference.state_dict().items():
            assert torch.equal(value, ckpt.model_state[key])

    def test_same_seed_identical_runs(self, corpus):
        cfg = small_config()
        ckpt_a, rec_a = train(cfg, corpus)
        ckpt_b, rec_b = train(cfg, corpus)
        strip = lambda rs: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rs]
        assert strip(rec_a) == strip(rec_b)
        assert checkpoint_hash(ckpt_a) == checkpoint_hash(ckpt_b)

    def test_metrics_records_shape(self, corpus, tmp_path):
        cfg = small_config(steps=3)
        _, records = train(cfg, corpus, out_dir=tmp_path)
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 3
        steps = [json.loads(l)["step"] for l in lines]
        assert steps == [1, 2, 3]
        rec = json.loads(lines[0])
        assert {"step", "l_g", "l_l", "l_i", "l_m", "total", "wall_ms"} == set(rec)

    def test_metrics_appended_on_resume(self, corpus, tmp_path):
        cfg = small_config(steps=2)
        ckpt, _ = train(cfg, corpus, out_dir=tmp_path)
        train(replace(cfg, steps=4), corpus, out_dir=tmp_path, resume=ckpt)
        steps = [json.loads(l)["step"]
                 for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert steps == [1, 2, 3, 4]

    def test_resume_matches_uninterrupted_run(self, corpus):
        cfg = small_config(steps=5)
        full_ckpt, full_rec = train(cfg, corpus)

        part_ckpt, part_rec = train(replace(cfg, steps=3), corpus)
        resumed_ckpt, resumed_rec = train(cfg, corpus, resume=part_ckpt)
        strip = lambda rs: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rs]
        assert strip(part_rec + resumed_rec) == strip(full_rec)
        assert checkpoint_hash(resumed_ckpt) == checkpoint_hash(full_ckpt)

    def test_resume_under_different_config_rejected(self, corpus):
        cfg = small_config(steps=2)
        ckpt, _ = train(cfg, corpus)
        other = small_config(steps=4, learning_rate=1e-3)
        with pytest.raises(ValueError, match="different config"):
            train(other, corpus, resume=ckpt)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train(small_config(), [])


class TestCheckpointIO:
    def test_round_trip_preserves_next_step(self, corpus, tmp_path):
        cfg = small_config(steps=2)
        ckpt, _ = train(cfg, corpus)
        path = tmp_path / "ck.qsvlm"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.step == ckpt.step
        assert loaded.config == ckpt.config
        assert checkpoint_hash(loaded) == checkpoint_hash(ckpt)

        next_cfg = replace(cfg, steps=3)
        _, rec_mem = train(next_cfg, corpus, resume=ckpt)
        _, rec_disk = train(next_cfg, corpus, resume=loaded)
        strip = lambda rs: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rs]
        assert strip(rec_mem) == strip(rec_disk)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.qsvlm"
        path.write_bytes(b"NOTQSV" + b"\x01" + b"junk")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, corpus, tmp_path):
        cfg = small_config(steps=1)
        ckpt, _ = train(cfg, corpus)
        path = tmp_path / "ck.qsvlm"
        save_checkpoint(ckpt, path)
        data = bytearray(path.read_bytes())
        data[len(MAGIC)] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, corpus, tmp_path):
        cfg = small_config(steps=1)
        ckpt, _ = train(cfg, corpus)
        path = tmp_path / "ck.qsvlm"
        save_checkpoint(ckpt, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(path)


class TestConfigFile:
    def test_round_trip(self):
        cfg = small_config(learning_rate=5e-4, weights=LossWeights(1.0, 0.5, 2.0, 0.25))
        assert parse_config(config_to_ini(cfg)) == cfg

    def test_defaults_from_empty_text(self):
        assert parse_config("") == TrainConfig()

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown config section"):
            parse_config("[nonsense]\nx = 1\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("[run]\nwarp_speed = 9\n")

    def test_type_errors_reported(self):
        with pytest.raises(ConfigError, match=r"\[run\] steps"):
            parse_config("[run]\nsteps = many\n")

    def test_instance_scale_needs_batch_of_two(self):
        with pytest.raises(ConfigError, match="batch_size"):
            parse_config("[run]\nbatch_size = 1\n")

    def test_negative_weights_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(-0.1, 1.0, 1.0, 1.0)

    def test_all_zero_weights_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(0.0, 0.0, 0.0, 0.0)
