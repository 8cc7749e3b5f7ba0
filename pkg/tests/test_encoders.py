"""Encoder contracts: shapes, norms, determinism, pooling semantics."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from qsvlm.encoders import (
    EncoderConfig,
    TextEncoder,
    VisionEncoder,
    cosine_sim,
    patchify,
    unpatchify,
)


def make_vision(config, seed=0):
    torch.manual_seed(seed)
    return VisionEncoder(config).eval()


def make_text(config, seed=0):
    torch.manual_seed(seed)
    return TextEncoder(config, pad_id=0).eval()


class TestConfig:
    def test_patch_divisibility_enforced(self):
        with pytest.raises(ValueError):
            EncoderConfig(image_size=30, patch_size=8)

    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError):
            EncoderConfig(embed_dim=30, heads=4)

    def test_patch_count(self):
        cfg = EncoderConfig(image_size=32, patch_size=8, embed_dim=16, depth=1, heads=2)
        assert cfg.num_patches == 16


class TestPatchify:
    def test_round_trip(self):
        g = torch.Generator().manual_seed(0)
        images = torch.rand(2, 1, 16, 16, generator=g)
        patches = patchify(images, 4)
        assert patches.shape == (2, 16, 16)
        assert torch.equal(unpatchify(patches, 4, 4), images)

    def test_patch_order_row_major(self):
        image = torch.arange(16.0).reshape(1, 1, 4, 4)
        patches = patchify(image, 2)
        # top-left patch first, reading order
        assert patches[0, 0].tolist() == [0.0, 1.0, 4.0, 5.0]
        assert patches[0, 1].tolist() == [2.0, 3.0, 6.0, 7.0]


class TestVisionForward:
    def test_shapes_and_unit_norm(self):
        cfg = EncoderConfig(image_size=32, patch_size=8, embed_dim=16, depth=1, heads=2)
        enc = make_vision(cfg)
        g = torch.Generator().manual_seed(1)
        images = torch.rand(3, 1, 32, 32, generator=g)
        with torch.no_grad():
            feats = enc(images)
        assert feats.patches.shape == (3, 16, 16)
        assert feats.global_v.shape == (3, 16)
        norms = torch.linalg.vector_norm(feats.global_v, dim=-1)
        assert torch.allclose(norms, torch.ones(3), atol=1e-5)

    def test_single_image_patch_count(self):
        cfg = EncoderConfig(image_size=32, patch_size=8, embed_dim=16, depth=1, heads=2)
        enc = make_vision(cfg)
        with torch.no_grad():
            feats = enc(torch.zeros(1, 1, 32, 32))
        assert feats.patches.shape == (1, 16, 16)

    def test_deterministic(self):
        cfg = EncoderConfig(image_size=32, patch_size=8, embed_dim=16, depth=1, heads=2)
        enc = make_vision(cfg)
        images = torch.zeros(1, 1, 32, 32)
        with torch.no_grad():
            a = enc(images)
            b = enc(images)
        assert torch.equal(a.global_v, b.global_v)
        assert torch.equal(a.patches, b.patches)

    def test_localized_change_moves_local_features(self):
        cfg = EncoderConfig(image_size=32, patch_size=8, embed_dim=16, depth=1, heads=2)
        enc = make_vision(cfg)
        g = torch.Generator().manual_seed(2)
        base = torch.rand(1, 1, 32, 32, generator=g)
        changed = base.clone()
        changed[0, 0, 0:8, 0:8] += 0.5  # patch index 0 only
        with torch.no_grad():
            fa = enc(base)
            fb = enc(changed)
        diffs = (fa.patches - fb.patches).abs().sum(dim=-1)[0]
        assert diffs[0] > 0  # the edited patch must differ

    def test_shape_mismatch_reports_dimensions(self):
        cfg = EncoderConfig(image_size=32, patch_size=8, embed_dim=16, depth=1, heads=2)
        enc = make_vision(cfg)
        with pytest.raises(ValueError, match="expected images"):
            enc(torch.zeros(1, 1, 16, 16))

    def test_visible_subset_matches_full_on_shared_prefix_shapes(self):
        cfg = EncoderConfig(image_size=32, patch_size=8, embed_dim=16, depth=1, heads=2)
        enc = make_vision(cfg)
        g = torch.Generator().manual_seed(3)
        images = torch.rand(2, 1, 32, 32, generator=g)
        with torch.no_grad():
            sub = enc.encode_visible(images, [0, 3, 7])
        assert sub.shape == (2, 3, 16)
        with pytest.raises(ValueError):
            enc.encode_visible(images, [])


class TestTextForward:
    cfg = EncoderConfig(image_size=32, patch_size=8, embed_dim=16, depth=1, heads=2,
                        vocab_size=34, max_tokens=16, max_sentences=4)

    def test_single_sentence(self):
        enc = make_text(self.cfg)
        tokens = torch.tensor([[5, 6, 7, 4, 0, 0]])
        with torch.no_grad():
            feats = enc(tokens, [[(0, 4)]])
        assert feats.sentence_mask.tolist() == [[True, False, False, False]]
        assert torch.allclose(torch.linalg.vector_norm(feats.sentences[0, 0]),
                              torch.tensor(1.0), atol=1e-5)
        assert torch.allclose(torch.linalg.vector_norm(feats.global_t[0]),
                              torch.tensor(1.0), atol=1e-5)

    def test_three_sentences_three_slots(self):
        enc = make_text(self.cfg)
        tokens = torch.tensor([[5, 4, 6, 4, 7, 4, 0, 0]])
        with torch.no_grad():
            feats = enc(tokens, [[(0, 2), (2, 4), (4, 6)]])
        assert feats.sentence_mask.sum().item() == 3

    def test_sentence_permutation_permutes_embeddings(self):
        # no position encodings: swapping two sentences swaps their pooled
        # rows exactly
        enc = make_text(self.cfg)
        s1, s2 = [5, 6, 7, 4], [8, 9, 4]
        a = torch.tensor([s1 + s2 + [0]])
        b = torch.tensor([s2 + s1 + [0]])
        with torch.no_grad():
            fa = enc(a, [[(0, 4), (4, 7)]])
            fb = enc(b, [[(0, 3), (3, 7)]])
        assert torch.allclose(fa.sentences[0, 0], fb.sentences[0, 1], atol=1e-6)
        assert torch.allclose(fa.sentences[0, 1], fb.sentences[0, 0], atol=1e-6)
        assert torch.allclose(fa.global_t, fb.global_t, atol=1e-6)

    def test_empty_span_rejected(self):
        enc = make_text(self.cfg)
        with pytest.raises(ValueError, match="empty sentence span"):
            enc(torch.tensor([[5, 6, 4, 0]]), [[(1, 1)]])

    def test_overlapping_spans_rejected(self):
        enc = make_text(self.cfg)
        with pytest.raises(ValueError, match="non-overlapping"):
            enc(torch.tensor([[5, 6, 7, 4]]), [[(0, 3), (2, 4)]])

    def test_out_of_vocab_ids_rejected(self):
        enc = make_text(self.cfg)
        with pytest.raises(ValueError, match="token ids"):
            enc(torch.tensor([[5, 99]]), [[(0, 2)]])

    def test_no_sentences_rejected(self):
        enc = make_text(self.cfg)
        with pytest.raises(ValueError, match="at least one sentence"):
            enc(torch.tensor([[5, 6]]), [[]])


class TestCosineSim:
    def test_identity(self):
        u = torch.tensor([0.3, -0.7, 0.1])
        assert float(cosine_sim(u, u)) == pytest.approx(1.0, abs=1e-7)

    def test_orthogonal(self):
        assert float(cosine_sim(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))) == 0.0

    def test_matches_dot_over_norms(self):
        g = torch.Generator().manual_seed(4)
        a = torch.randn(16, generator=g, dtype=torch.float64)
        b = torch.randn(16, generator=g, dtype=torch.float64)
        an, bn = a.numpy(), b.numpy()
        expected = float(np.dot(an, bn) / (np.linalg.norm(an) * np.linalg.norm(bn)))
        assert float(cosine_sim(a, b)) == pytest.approx(expected, abs=1e-7)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            cosine_sim(torch.zeros(3), torch.ones(3))


@settings(max_examples=10, deadline=None)
@given(
    grid=st.integers(2, 4),
    patch=st.sampled_from([4, 8]),
    depth=st.integers(1, 2),
    seed=st.integers(0, 100),
)
def test_patch_and_sentence_count_invariants(grid, patch, depth, seed):
    cfg = EncoderConfig(image_size=grid * patch, patch_size=patch, embed_dim=8,
                        depth=depth, heads=2, vocab_size=34, max_tokens=12,
                        max_sentences=3)
    torch.manual_seed(seed)
    vision = VisionEncoder(cfg).eval()
    text = TextEncoder(cfg, pad_id=0).eval()
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(2, 1, cfg.image_size, cfg.image_size, generator=g)
    with torch.no_grad():
        vf = vision(images)
        tf = text(torch.tensor([[5, 6, 4, 7, 4, 0], [8, 9, 10, 4, 0, 0]]),
                  [[(0, 3), (3, 5)], [(0, 4)]])
    assert vf.patches.shape[1] == cfg.num_patches
    assert tf.sentence_mask.sum(dim=1).tolist() == [2, 1]
    assert torch.allclose(torch.linalg.vector_norm(vf.global_v, dim=-1),
                          torch.ones(2), atol=1e-5)
