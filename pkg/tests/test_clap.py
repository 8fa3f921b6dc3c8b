import io
import math
import re

import numpy as np
import pytest
import torch

from songlm.clap import (ClapConfig, DescStyle, DualEncoder, MaskingConfig, format_description, infonce_loss,
                         mask_description, read_embeddings, retrieval_metrics, synthetic_pairs, text_tokens,
                         write_embeddings)
from songlm.errors import BatchMismatch, DimMismatch
from songlm.features import FeatureSeq
from songlm.lyrics import TagSet


def _t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


# -- InfoNCE -------------------------------------------------------------------------

def test_infonce_single_pair_is_zero():
    assert infonce_loss(_t([[1.0, 0.0]]), _t([[0.0, 1.0]]), 1.0).item() == 0.0


def test_infonce_orthogonal_pair_closed_form():
    E = _t(np.eye(2))
    got = infonce_loss(E, E, 1.0).item()
    assert got == pytest.approx(4 * -math.log(math.e / (math.e + 1)), rel=1e-12)
    assert round(got, 2) == 1.25


def test_infonce_decreases_as_tau_shrinks():
    E = _t(np.eye(4))
    vals = [infonce_loss(E, E, t).item() for t in (1.0, 0.5, 0.2, 0.1, 0.05, 0.02)]
    assert all(a > b for a, b in zip(vals, vals[1:])) and vals[-1] < 1e-15


def test_infonce_permutation_invariant():
    rng = np.random.default_rng(0)
    M = torch.nn.functional.normalize(_t(rng.normal(size=(6, 5))), dim=1)
    T = torch.nn.functional.normalize(_t(rng.normal(size=(6, 5))), dim=1)
    p = torch.as_tensor(rng.permutation(6))
    assert infonce_loss(M[p], T[p], 0.3).item() == pytest.approx(infonce_loss(M, T, 0.3).item(), rel=1e-12)
    assert infonce_loss(M, T, 0.3).item() >= 0


def test_infonce_errors():
    with pytest.raises(BatchMismatch):
        infonce_loss(_t(np.eye(2)), _t(np.eye(3)[:, :2]), 1.0)
    with pytest.raises(BatchMismatch):
        infonce_loss(_t(np.zeros((0, 2))), _t(np.zeros((0, 2))), 1.0)
    with pytest.raises(DimMismatch):
        infonce_loss(_t(np.eye(2)), _t(np.eye(2, 3)), 1.0)


# -- encoders ------------------------------------------------------------------------------

def test_encoders_normalized_and_tau():
    enc = DualEncoder(ClapConfig(feat_dim=8, proj_dim=4))
    assert enc.tau.item() == pytest.approx(0.07)
    feats = [FeatureSeq(np.random.default_rng(i).normal(size=(5, 8)), 25.0) for i in range(3)]
    M = enc.encode_music(feats)
    T = enc.encode_text(["mood: soft", "genre: pop", ""])
    assert M.shape == (3, 4) and T.shape == (3, 4)
    assert torch.allclose(M.norm(dim=1), torch.ones(3, dtype=M.dtype))
    assert torch.allclose(T[:2].norm(dim=1), torch.ones(2, dtype=T.dtype))
    with torch.no_grad():
        enc.log_tau.fill_(20.0)
    assert enc.tau.item() == pytest.approx(100.0)
    with torch.no_grad():
        enc.log_tau.fill_(-20.0)
    assert enc.tau.item() == pytest.approx(1e-2)
    with pytest.raises(DimMismatch):
        enc.encode_music([FeatureSeq(np.zeros((2, 3)), 25.0)])


def test_text_tokens_stable():
    assert text_tokens("Mood: Soft", 2048) == text_tokens("mood soft", 2048)
    assert all(0 <= t < 16 for t in text_tokens("a b c d e f", 16))


# -- masking -------------------------------------------------------------------------------

TAGS = TagSet({"mood": ("soft", "warm"), "genre": ("pop",), "instrument": ("piano", "guitar", "drums")})


def test_mask_identity_and_all_dropped():
    rng = np.random.default_rng(0)
    assert mask_description(TAGS, MaskingConfig(0.0, 0.0), rng) == TAGS
    assert mask_description(TAGS, MaskingConfig(1.0, 0.0), rng).is_empty()
    with pytest.raises(ValueError):
        MaskingConfig(p_a=1.5)


def test_mask_deterministic_per_seed():
    cfg = MaskingConfig(0.5, 0.5)
    a = [mask_description(TAGS, cfg, np.random.default_rng(3)) for _ in range(2)]
    assert a[0] == a[1]


def test_mask_survival_rate_monte_carlo():
    cfg = MaskingConfig(0.3, 0.25)
    rng = np.random.default_rng(1)
    tags = TagSet({"mood": ("soft",)})
    n = 100_000
    kept = sum(bool(mask_description(tags, cfg, rng).all_tags()) for _ in range(n))
    assert abs(kept / n - (1 - 0.3) * (1 - 0.25)) < 0.02


def test_mask_drops_whole_categories():
    cfg = MaskingConfig(0.5, 0.0)
    rng = np.random.default_rng(2)
    for _ in range(200):
        out = mask_description(TAGS, cfg, rng)
        for c, v in out.entries.items():
            assert v == TAGS.entries[c]


# -- formatting ----------------------------------------------------------------------------

def test_format_examples():
    assert format_description(TagSet({"mood": ("soft",)}), "labeled_tags") == "mood: soft"
    t = TagSet({"mood": ("soft", "warm"), "genre": ("pop",)})
    # categories are rendered in the canonical TagSet order (genre before mood)
    assert format_description(t, DescStyle.LABELED) == "genre: pop, mood: soft, warm"
    assert format_description(TagSet({}), "sentence") == ""
    for style in DescStyle:
        assert format_description(TagSet({}), style) == ""


def test_bare_is_labeled_without_prefixes():
    for tags in (TAGS, TagSet({"genre": ("pop",)})):
        labeled = format_description(tags, "labeled_tags")
        assert format_description(tags, "bare_tags") == re.sub(r"(^|, )[a-z ]+: ", r"\1", labeled)


def test_sentence_mentions_every_tag():
    s = format_description(TAGS, "sentence")
    assert all(tag in s for tag in TAGS.all_tags())


def test_random_style_uniform():
    rng = np.random.default_rng(0)
    outs = [format_description(TAGS, None, rng) for _ in range(3000)]
    counts = np.array([outs.count(format_description(TAGS, s)) for s in DescStyle])
    assert counts.sum() == 3000 and np.all(np.abs(counts / 3000 - 1 / 3) < 0.03)


# -- retrieval -------------------------------------------------------------------------------

def test_retrieval_identity():
    E = np.eye(5)
    r = retrieval_metrics(E, E)
    for d in ("text_to_music", "music_to_text"):
        assert r[d]["R@1"] == 1.0 and r[d]["mAP@10"] == 1.0


def test_retrieval_rank_two():
    N = 12
    ang = 2 * np.pi * np.arange(N) / N
    M = np.stack([np.cos(ang), np.sin(ang)], 1)
    # text i sits half-way between music i and music i+1, nudged toward i+1: true match always ranks 2
    T = np.stack([np.cos(ang + 0.6 * 2 * np.pi / N), np.sin(ang + 0.6 * 2 * np.pi / N)], 1)
    r = retrieval_metrics(M, T)["text_to_music"]
    assert r["R@1"] == 0.0 and r["R@10"] == 1.0 and r["mAP@10"] == pytest.approx(0.5)


def test_retrieval_chance_level():
    rng = np.random.default_rng(0)
    r1 = [retrieval_metrics(rng.normal(size=(100, 32)), rng.normal(size=(100, 32)))["text_to_music"]["R@1"]
          for _ in range(20)]
    assert abs(np.mean(r1) - 0.01) < 0.02


def test_retrieval_monotone_and_bounded():
    rng = np.random.default_rng(1)
    M = rng.normal(size=(30, 8))
    r = retrieval_metrics(M, M + rng.normal(scale=1.0, size=M.shape), ks=(1, 2, 5, 10))
    for d in r.values():
        assert d["R@1"] <= d["R@2"] <= d["R@5"] <= d["R@10"] and d["mAP@10"] <= d["R@10"]
    with pytest.raises(DimMismatch):
        retrieval_metrics(M, M[:, :4])


# -- data and files ----------------------------------------------------------------------------

def test_synthetic_pairs_deterministic():
    a, b = synthetic_pairs(4, seed=1), synthetic_pairs(4, seed=1)
    assert all(np.array_equal(x.music.data, y.music.data) and x.tags == y.tags for x, y in zip(a, b))


def test_embeddings_roundtrip():
    E = np.random.default_rng(0).normal(size=(7, 5))
    buf = io.BytesIO()
    write_embeddings(E, buf)
    assert buf.getvalue()[:4] == b"EMBD"
    buf.seek(0)
    assert np.allclose(read_embeddings(buf), E, atol=1e-6)
