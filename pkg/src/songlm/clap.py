"""Toy music/text dual encoder, contrastive loss, description augmentation and retrieval metrics."""

from __future__ import annotations

import enum
import re
import struct
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .binfmt import open_maybe, read_header, unpack, read_exact, write_header
from .errors import BadCheckpoint, BatchMismatch, DimMismatch
from .features import FeatureSeq
from .lyrics import CATEGORIES, TagSet

DTYPE = torch.float64
TAU_MIN, TAU_MAX = 1e-2, 100.0


# -- text tokens -------------------------------------------------------------

_WORD = re.compile(r"[a-z0-9_]+")


def text_tokens(text: str, buckets: int) -> list[int]:
    """Lower-cased word pieces hashed into ``buckets`` ids (crc32, stable across runs)."""
    return [zlib.crc32(w.encode("utf-8")) % buckets for w in _WORD.findall(text.lower())]


# -- encoders ----------------------------------------------------------------

@dataclass
class ClapConfig:
    feat_dim: int = 64
    buckets: int = 2048
    text_dim: int = 64
    proj_dim: int = 32
    tau_init: float = 0.07


class DualEncoder(torch.nn.Module):
    """Mean-pooled linear music branch and bag-of-embeddings text branch."""

    def __init__(self, cfg: ClapConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or ClapConfig()
        g = torch.Generator().manual_seed(seed)
        self.music_proj = torch.nn.Parameter(torch.randn(cfg.feat_dim, cfg.proj_dim, generator=g, dtype=DTYPE) / cfg.feat_dim**0.5)
        self.word_embed = torch.nn.Parameter(torch.randn(cfg.buckets, cfg.text_dim, generator=g, dtype=DTYPE) * 0.1)
        self.text_proj = torch.nn.Parameter(torch.randn(cfg.text_dim, cfg.proj_dim, generator=g, dtype=DTYPE) / cfg.text_dim**0.5)
        self.log_tau = torch.nn.Parameter(torch.tensor(float(np.log(cfg.tau_init)), dtype=DTYPE))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.clamp(np.log(TAU_MIN), np.log(TAU_MAX)).exp()

    def encode_music(self, feats: list[FeatureSeq] | torch.Tensor) -> torch.Tensor:
        if isinstance(feats, torch.Tensor):
            pooled = feats
        else:
            for f in feats:
                if f.dim != self.cfg.feat_dim:
                    raise DimMismatch(f"music features have {f.dim} channels, encoder expects {self.cfg.feat_dim}")
            pooled = torch.stack([torch.as_tensor(f.data, dtype=DTYPE).mean(0) for f in feats])
        return F.normalize(pooled @ self.music_proj, dim=-1)

    def encode_text(self, texts: list[str]) -> torch.Tensor:
        rows = []
        for t in texts:
            ids = text_tokens(t, self.cfg.buckets)
            if ids:
                rows.append(self.word_embed[torch.tensor(ids)].mean(0))
            else:
                rows.append(torch.zeros(self.cfg.text_dim, dtype=DTYPE))
        return F.normalize(torch.stack(rows) @ self.text_proj, dim=-1)


# -- loss --------------------------------------------------------------------

def infonce_loss(M: torch.Tensor, T: torch.Tensor, tau) -> torch.Tensor:
    """Symmetric contrastive loss, summed over the batch in both directions.

    ``M`` and ``T`` hold unit rows; cosine similarity is their dot product.
    """
    M, T = torch.as_tensor(M), torch.as_tensor(T)
    if M.shape[0] != T.shape[0] or M.shape[0] < 1:
        raise BatchMismatch(f"music batch {M.shape[0]} vs text batch {T.shape[0]}")
    if M.shape[1:] != T.shape[1:]:
        raise DimMismatch(f"embedding dims differ: {tuple(M.shape[1:])} vs {tuple(T.shape[1:])}")
    logits = (M @ T.T) / tau
    diag = torch.arange(M.shape[0])
    m2t = -torch.log_softmax(logits, 1)[diag, diag].sum()
    t2m = -torch.log_softmax(logits, 0)[diag, diag].sum()
    return m2t + t2m


# -- description augmentation ------------------------------------------------

@dataclass(frozen=True)
class MaskingConfig:
    p_a: float = 0.2
    p_t: float = 0.2

    def __post_init__(self):
        for name in ("p_a", "p_t"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")


def mask_description(tags: TagSet, cfg: MaskingConfig, rng: np.random.Generator) -> TagSet:
    """Drop whole categories with ``p_a``, then single tags of the survivors with ``p_t``."""
    out = {}
    for cat, values in tags.entries.items():
        if rng.random() < cfg.p_a:
            continue
        out[cat] = tuple(v for v in values if rng.random() >= cfg.p_t)
    return TagSet(out)


class DescStyle(str, enum.Enum):
    LABELED = "labeled_tags"
    BARE = "bare_tags"
    SENTENCE = "sentence"


_LABEL = {c: c.replace("_", " ") for c in CATEGORIES}


def _sentence(entries: dict[str, tuple[str, ...]]) -> str:
    parts = []
    for cat, vals in entries.items():
        joined = " and ".join(vals)
        if cat == "gender":
            parts.append(f"a {joined} voice")
        elif cat == "instrument":
            parts.append(f"the instrument is {joined}")
        elif cat == "scene":
            parts.append(f"suitable for {joined} scene")
        else:
            parts.append(f"with {joined} {_LABEL[cat]}")
    return "The music features " + ", ".join(parts)


def format_description(tags: TagSet, style: DescStyle | str | None = None, rng: np.random.Generator | None = None) -> str:
    """Render tags as text; with no ``style`` one is drawn uniformly from ``rng``."""
    if style is None:
        rng = rng if rng is not None else np.random.default_rng()
        style = list(DescStyle)[int(rng.integers(len(DescStyle)))]
    style = DescStyle(style)
    entries = {c: v for c, v in tags.entries.items() if v}
    if not entries:
        return ""
    if style is DescStyle.LABELED:
        return ", ".join(f"{_LABEL[c]}: {', '.join(v)}" for c, v in entries.items())
    if style is DescStyle.BARE:
        return ", ".join(t for v in entries.values() for t in v)
    return _sentence(entries)


# -- retrieval ---------------------------------------------------------------

def _ranks(sim: np.ndarray) -> np.ndarray:
    """1-based rank of the diagonal entry within each row (ties count in its favour)."""
    true = np.diag(sim)
    return 1 + (sim > true[:, None]).sum(1)


def retrieval_metrics(M: np.ndarray, T: np.ndarray, ks=(1, 5, 10)) -> dict[str, dict[str, float]]:
    """R@k and mAP@10 for text->music and music->text.

    Each query has exactly one relevant item, so AP@10 is 1/rank when the
    match ranks within the top 10 and 0 otherwise.
    """
    M = np.asarray(M, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if M.ndim != 2 or M.shape != T.shape:
        raise DimMismatch(f"embedding matrices differ: {M.shape} vs {T.shape}")
    if M.shape[0] < 1:
        raise BatchMismatch("need at least one pair")
    Mn = M / np.maximum(np.linalg.norm(M, axis=1, keepdims=True), 1e-12)
    Tn = T / np.maximum(np.linalg.norm(T, axis=1, keepdims=True), 1e-12)
    sim = Tn @ Mn.T  # rows: text queries
    out = {}
    for name, s in (("text_to_music", sim), ("music_to_text", sim.T)):
        r = _ranks(s)
        row = {f"R@{k}": float((r <= k).mean()) for k in ks}
        row["mAP@10"] = float(np.where(r <= 10, 1.0 / r, 0.0).mean())
        out[name] = row
    return out


# -- synthetic corpus and training --------------------------------------------

TAG_POOL = {
    "gender": ("male", "female"),
    "genre": ("pop", "rock", "jazz", "folk", "hiphop", "electronic"),
    "instrument": ("piano", "guitar", "drum", "violin", "synth"),
    "mood": ("soft", "warm", "dark", "happy", "sad", "energetic"),
    "scene": ("dance", "workout", "study", "party"),
    "singer_timbre": ("bright", "husky", "airy"),
    "topic": ("love", "travel", "youth"),
    "region": ("western", "eastern", "latin"),
}


@dataclass
class ClapPair:
    music: FeatureSeq
    tags: TagSet


def synthetic_pairs(n: int, feat_dim: int = 64, frames: int = 24, noise: float = 0.5, seed: int = 0) -> list[ClapPair]:
    """Pairs whose features are a noisy sum of per-tag prototype vectors."""
    rng = np.random.default_rng(seed)
    proto_rng = np.random.default_rng(4242)
    protos = {(c, t): proto_rng.normal(0, 1, feat_dim) for c, ts in TAG_POOL.items() for t in ts}
    out = []
    for _ in range(n):
        entries = {}
        for cat, pool in TAG_POOL.items():
            k = 1 if cat in ("gender", "genre") else int(rng.integers(1, 3))
            entries[cat] = tuple(sorted(rng.choice(pool, size=min(k, len(pool)), replace=False)))
        centre = sum(protos[(c, t)] for c, ts in entries.items() for t in ts)
        feats = centre[None, :] + noise * rng.normal(0, 1, (frames, feat_dim))
        out.append(ClapPair(FeatureSeq(feats, 25.0), TagSet(entries)))
    return out


@dataclass
class ClapTrainCfg:
    steps: int = 200
    batch: int = 64
    lr: float = 1e-2
    weight_decay: float = 0.0
    masking: MaskingConfig = MaskingConfig()
    seed: int = 0


def train_clap(enc: DualEncoder, pairs: list[ClapPair], cfg: ClapTrainCfg, log=None) -> list[float]:
    """AdamW on the summed InfoNCE loss with a freshly masked, freshly formatted description per step."""
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.AdamW(enc.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    pooled = torch.stack([torch.as_tensor(p.music.data, dtype=DTYPE).mean(0) for p in pairs])
    losses = []
    for step in range(cfg.steps):
        idx = rng.permutation(len(pairs))[: cfg.batch]
        texts = [format_description(mask_description(pairs[i].tags, cfg.masking, rng), None, rng) for i in idx]
        loss = infonce_loss(enc.encode_music(pooled[idx]), enc.encode_text(texts), enc.tau)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log is not None:
            log(stage="clap", step=step, loss=losses[-1], tau=enc.tau.item())
    return losses


def evaluate_clap(enc: DualEncoder, pairs: list[ClapPair], style: DescStyle | str = DescStyle.LABELED, ks=(1, 5, 10)):
    with torch.no_grad():
        M = enc.encode_music([p.music for p in pairs]).numpy()
        T = enc.encode_text([format_description(p.tags, style) for p in pairs]).numpy()
    return retrieval_metrics(M, T, ks), M, T


# -- persistence -------------------------------------------------------------

_EMB = b"EMBD"


def write_embeddings(E: np.ndarray, target) -> None:
    """(N, d) float32 rows after an ``EMBD`` header with u32 N and d."""
    E = np.asarray(E)
    if E.ndim != 2:
        raise DimMismatch(f"embeddings must be 2-D, got {E.shape}")
    fh, own = open_maybe(target, "wb")
    try:
        write_header(fh, _EMB)
        fh.write(struct.pack("<II", *E.shape))
        fh.write(np.ascontiguousarray(E, dtype="<f4").tobytes())
    finally:
        if own:
            fh.close()


def read_embeddings(source) -> np.ndarray:
    fh, own = open_maybe(source, "rb")
    try:
        read_header(fh, _EMB)
        n, d = unpack(fh, "<II")
        E = np.frombuffer(read_exact(fh, 4 * n * d), dtype="<f4").reshape(n, d).astype(np.float64)
        if fh.read(1):
            raise BadCheckpoint("trailing bytes after embeddings")
    finally:
        if own:
            fh.close()
    return E
