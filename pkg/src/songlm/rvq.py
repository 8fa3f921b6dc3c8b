"""Multi-level fusion, query-token downsampling and residual vector quantization."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.cluster import KMeans
from torch import nn

from .binfmt import open_maybe, read_exact, read_header, unpack, write_header
from .engine.ops import Dispatcher
from .errors import (DegenerateFrame, DimMismatch, EmptyCorpus, IndexOutOfRange,
                     LengthMismatch, ShapeMismatch)
from .features import (ALIGN_LEVELS, FUSED_RATE, LEVELS, TOKEN_RATE, FeatureSeq,
                       common_rate_levels, synthetic_levels)
from .nn import DTYPE, Block, Rope, stack_forward

_RVQ_MAGIC = b"RVQ1"
_TOK_MAGIC = b"TOKS"


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, FeatureSeq):
        x = x.data
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=DTYPE)


def _as_array(x) -> np.ndarray:
    if isinstance(x, FeatureSeq):
        x = x.data
    if isinstance(x, torch.Tensor):
        x = x.detach().numpy()
    return np.asarray(x, dtype=np.float64)


# -- fusion --------------------------------------------------------------------------

class FeatureFuser(nn.Module):
    """Channel concatenation followed by a bias-free linear projection."""

    def __init__(self, in_dims=tuple(d for d, _ in LEVELS), out_dim: int = 64, seed: int = 0):
        super().__init__()
        self.in_dims = tuple(in_dims)
        g = torch.Generator().manual_seed(seed)
        fan_in = sum(self.in_dims)
        self.proj = nn.Parameter(torch.randn(out_dim, fan_in, generator=g, dtype=DTYPE) / fan_in ** 0.5)

    def forward(self, levels: list) -> torch.Tensor:
        return torch.cat([_as_tensor(x) for x in levels], -1) @ self.proj.T


def fuse_features(levels: list[FeatureSeq], fuser: FeatureFuser) -> FeatureSeq:
    if not levels:
        raise ValueError("need at least one feature level")
    counts = {f.n_frames for f in levels}
    if len(counts) != 1:
        raise LengthMismatch(f"levels have frame counts {sorted(counts)}")
    rates = {f.frame_rate for f in levels}
    if rates != {FUSED_RATE}:
        raise ValueError(f"levels must be resampled to {FUSED_RATE} Hz first, got {sorted(rates)}")
    dims = tuple(f.dim for f in levels)
    if dims != fuser.in_dims:
        raise DimMismatch(f"level dims {dims} do not match fuser {fuser.in_dims}")
    with torch.no_grad():
        y = fuser(levels)
    return FeatureSeq(y.numpy(), FUSED_RATE)


# -- query downsampling ---------------------------------------------------------------

class Mixer(nn.Module):
    """Bidirectional transformer blocks with rotary positions."""

    def __init__(self, dim: int, n_blocks: int = 2, n_heads: int = 4, max_len: int = 4096):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, n_heads, 2, 0.05) for _ in range(n_blocks))
        self.rope = Rope(dim // n_heads, max_len)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ops = Dispatcher()
        return stack_forward(ops, self.blocks, x[None], torch.arange(x.shape[0]), self.rope, None)[0]


class QueryDownsampler(nn.Module):
    """Insert a learnable query after every two frames and keep only the
    mixer outputs at query positions. Odd inputs get one zero frame appended."""

    def __init__(self, dim: int = 64, mixer: nn.Module | None = None, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.query = nn.Parameter(torch.randn(dim, dtype=DTYPE) * 0.1)
            self.mixer = mixer if mixer is not None else Mixer(dim)
        self.dim = dim

    def forward(self, y) -> tuple[torch.Tensor, int]:
        y = _as_tensor(y)
        if y.shape[-1] != self.dim:
            raise DimMismatch(f"expected {self.dim} channels, got {y.shape[-1]}")
        pad = y.shape[0] % 2
        if pad:
            y = torch.cat([y, torch.zeros(1, self.dim, dtype=y.dtype)], 0)
        n = y.shape[0] // 2
        if n == 0:
            return torch.zeros(0, self.dim, dtype=DTYPE), pad
        seq = torch.cat([y.view(n, 2, self.dim), self.query.expand(n, 1, self.dim)], 1).reshape(3 * n, self.dim)
        out = self.mixer(seq)
        return out.view(n, 3, self.dim)[:, 2], pad


def downsample_queries(y_h: FeatureSeq, q: QueryDownsampler) -> FeatureSeq:
    with torch.no_grad():
        out, pad = q(y_h)
    return FeatureSeq(out.numpy(), y_h.frame_rate / 2, pad=pad)


class Upsampler(nn.Module):
    """Per-level linear maps from token-rate features to ``rate/12.5`` frames of ``dim`` channels."""

    def __init__(self, dim: int = 64, targets=LEVELS, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.targets = tuple(targets)
        self.factors = tuple(int(round(r / TOKEN_RATE)) for _, r in self.targets)
        self.maps = nn.ParameterList(
            nn.Parameter(torch.randn(f * c, dim, generator=g, dtype=DTYPE) / dim ** 0.5)
            for (c, _), f in zip(self.targets, self.factors))

    def forward(self, y_hat, level: int) -> torch.Tensor:
        y = _as_tensor(y_hat)
        c = self.targets[level][0]
        return (y @ self.maps[level].T).reshape(-1, c)

    def frame_rate(self, level: int) -> float:
        return self.targets[level][1]


# -- quantizer -------------------------------------------------------------------------

@dataclass
class CodebookSet:
    books: np.ndarray  # (K, V, C)

    def __post_init__(self):
        self.books = np.asarray(self.books, dtype=np.float64)
        if self.books.ndim != 3 or min(self.books.shape[:2]) < 1:
            raise ShapeMismatch(f"codebooks must be (K>=1, V>=1, C), got {self.books.shape}")
        if not np.isfinite(self.books).all():
            raise ValueError("codebook entries must be finite")

    @property
    def K(self) -> int:
        return self.books.shape[0]

    @property
    def V(self) -> int:
        return self.books.shape[1]

    @property
    def C(self) -> int:
        return self.books.shape[2]


@dataclass
class TokenFrameSeq:
    indices: np.ndarray  # (L, K)
    V: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2:
            raise ShapeMismatch(f"indices must be (L, K), got {self.indices.shape}")
        if self.indices.size and (self.indices.min() < 0 or (self.V is not None and self.indices.max() >= self.V)):
            raise IndexOutOfRange("token index outside [0, V)")

    @property
    def L(self) -> int:
        return self.indices.shape[0]

    @property
    def K(self) -> int:
        return self.indices.shape[1]


def nearest(r: np.ndarray, book: np.ndarray) -> np.ndarray:
    """Index of the closest entry per row; ties go to the lower index."""
    d = (r * r).sum(1)[:, None] - 2.0 * r @ book.T + (book * book).sum(1)[None, :]
    return np.argmin(d, axis=1)


def rvq_encode(y_l, cb: CodebookSet) -> tuple[TokenFrameSeq, FeatureSeq, list[float]]:
    y = _as_array(y_l)
    rate = y_l.frame_rate if isinstance(y_l, FeatureSeq) else TOKEN_RATE
    if y.ndim != 2 or y.shape[1] != cb.C:
        raise DimMismatch(f"features of shape {y.shape} vs code dim {cb.C}")
    r = y.copy()
    q = np.zeros_like(y)
    idx = np.zeros((y.shape[0], cb.K), dtype=np.int64)
    norms = []
    for k in range(cb.K):
        if y.shape[0]:
            idx[:, k] = nearest(r, cb.books[k])
        sel = cb.books[k][idx[:, k]]
        q += sel
        r -= sel
        norms.append(float(np.linalg.norm(r, axis=1).mean()) if y.shape[0] else 0.0)
    return TokenFrameSeq(idx, cb.V), FeatureSeq(q, rate), norms


def rvq_decode(tokens, cb: CodebookSet) -> FeatureSeq:
    a = tokens.indices if isinstance(tokens, TokenFrameSeq) else np.asarray(tokens, dtype=np.int64)
    if a.ndim != 2 or a.shape[1] != cb.K:
        raise ShapeMismatch(f"tokens of shape {a.shape} vs K={cb.K}")
    if a.size and (a.min() < 0 or a.max() >= cb.V):
        raise IndexOutOfRange("token index outside [0, V)")
    q = np.zeros((a.shape[0], cb.C))
    for k in range(cb.K):
        q += cb.books[k][a[:, k]]
    return FeatureSeq(q, TOKEN_RATE)


def straight_through(y: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Forward value ``q``; gradient passes to ``y`` unchanged."""
    return y + (q - y).detach()


def commitment_loss(y_l, y_hat) -> torch.Tensor:
    """Mean over frames of ``||sg(y_l) - y_hat||^2``."""
    y, q = _as_tensor(y_l), _as_tensor(y_hat)
    if y.shape != q.shape:
        raise ShapeMismatch(f"{tuple(y.shape)} vs {tuple(q.shape)}")
    if y.shape[0] == 0:
        return torch.zeros((), dtype=y.dtype)
    return ((y.detach() - q) ** 2).sum(-1).mean()


def alignment_loss(u, ref) -> torch.Tensor:
    """``-mean_t log sigmoid(cos(u_t, ref_t))``."""
    a, b = _as_tensor(u), _as_tensor(ref)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if a.shape[0] and (bool((na < 1e-12).any()) or bool((nb < 1e-12).any())):
        raise DegenerateFrame("frame with norm below 1e-12")
    cos = (a * b).sum(-1) / (na * nb)
    return -F.logsigmoid(cos).mean()


def train_codebooks(corpus, K: int = 8, V: int = 256, seed: int = 0, n_init: int = 1) -> CodebookSet:
    """Stage-wise k-means: stage k is fit on the residuals left by stages < k."""
    arrays = [_as_array(c) for c in corpus]
    arrays = [a for a in arrays if a.size]
    if not arrays:
        raise EmptyCorpus("no frames to fit codebooks on")
    r = np.concatenate(arrays, 0)
    books = []
    for k in range(K):
        n = min(V, r.shape[0])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            km = KMeans(n_clusters=n, n_init=n_init, random_state=seed + k).fit(r)
        centers = km.cluster_centers_
        book = centers[np.arange(V) % n]
        books.append(book)
        r = r - book[nearest(r, book)]
    return CodebookSet(np.stack(books))


# -- files -------------------------------------------------------------------------------

def save_codebooks(cb: CodebookSet, target) -> None:
    fh, own = open_maybe(target, "wb")
    try:
        write_header(fh, _RVQ_MAGIC)
        fh.write(struct.pack("<III", cb.K, cb.V, cb.C))
        fh.write(np.ascontiguousarray(cb.books, dtype="<f4").tobytes())
    finally:
        if own:
            fh.close()


def load_codebooks(source) -> CodebookSet:
    fh, own = open_maybe(source, "rb")
    try:
        read_header(fh, _RVQ_MAGIC)
        K, V, C = unpack(fh, "<III")
        data = read_exact(fh, 4 * K * V * C)
    finally:
        if own:
            fh.close()
    return CodebookSet(np.frombuffer(data, dtype="<f4").reshape(K, V, C).astype(np.float64))


def save_tokens(tokens: TokenFrameSeq, target) -> None:
    fh, own = open_maybe(target, "wb")
    try:
        write_header(fh, _TOK_MAGIC)
        fh.write(struct.pack("<II", tokens.L, tokens.K))
        fh.write(np.ascontiguousarray(tokens.indices, dtype="<u4").tobytes())
    finally:
        if own:
            fh.close()


def load_tokens(source, V: int | None = None) -> TokenFrameSeq:
    fh, own = open_maybe(source, "rb")
    try:
        read_header(fh, _TOK_MAGIC)
        L, K = unpack(fh, "<II")
        data = read_exact(fh, 4 * L * K)
    finally:
        if own:
            fh.close()
    return TokenFrameSeq(np.frombuffer(data, dtype="<u4").reshape(L, K).astype(np.int64), V)


# -- the compressor ---------------------------------------------------------------------

class Compressor(nn.Module):
    """Fuser, query downsampler and alignment upsamplers around a codebook set."""

    def __init__(self, dim: int = 64, seed: int = 0):
        super().__init__()
        self.fuser = FeatureFuser(out_dim=dim, seed=seed)
        self.down = QueryDownsampler(dim, seed=seed + 1)
        self.up = Upsampler(dim, seed=seed + 2)
        self.codebooks: CodebookSet | None = None
        self.dim = dim

    def encode_continuous(self, x: np.ndarray) -> torch.Tensor:
        y_h = self.fuser(common_rate_levels(x))
        return self.down(y_h)[0]

    def features(self, x: np.ndarray) -> FeatureSeq:
        with torch.no_grad():
            return FeatureSeq(self.encode_continuous(x).numpy(), TOKEN_RATE)

    def tokenize(self, x: np.ndarray) -> TokenFrameSeq:
        if self.codebooks is None:
            raise ValueError("codebooks are not trained")
        return rvq_encode(self.features(x), self.codebooks)[0]

    def align_terms(self, y_hat: torch.Tensor, refs: list[FeatureSeq]) -> list[torch.Tensor]:
        out = []
        for i in ALIGN_LEVELS:
            u = self.up(y_hat, i)
            ref = _as_tensor(refs[i])
            n = min(u.shape[0], ref.shape[0])
            out.append(alignment_loss(u[:n], ref[:n]))
        return out


@dataclass
class CompressorTrainCfg:
    dim: int = 64
    K: int = 8
    V: int = 256
    align_steps: int = 60
    joint_steps: int = 20
    lr: float = 3e-3
    lambda_commit: float = 1.0
    lambda_sem: float = 0.1
    lambda_pho: float = 0.1
    seed: int = 0


def train_compressor(signals: list[np.ndarray], cfg: CompressorTrainCfg, log=None) -> Compressor:
    """Alignment pre-training, k-means codebook init, then joint STE training."""
    if not signals:
        raise EmptyCorpus("no training signals")
    comp = Compressor(cfg.dim, cfg.seed)
    refs = [synthetic_levels(x) for x in signals]
    opt = torch.optim.Adam(comp.parameters(), lr=cfg.lr)
    lam = (cfg.lambda_sem, cfg.lambda_pho)
    for step in range(cfg.align_steps):
        opt.zero_grad()
        loss = sum(sum(l * t for l, t in zip(lam, comp.align_terms(comp.encode_continuous(x), r)))
                   for x, r in zip(signals, refs)) / len(signals)
        loss.backward()
        opt.step()
        if log:
            log(stage="codec_align", step=step, loss=loss.item())
    comp.codebooks = train_codebooks([comp.features(x) for x in signals], cfg.K, cfg.V, cfg.seed)
    books = nn.Parameter(torch.as_tensor(comp.codebooks.books))
    opt = torch.optim.Adam(list(comp.parameters()) + [books], lr=cfg.lr)
    for step in range(cfg.joint_steps):
        opt.zero_grad()
        total = 0.0
        for x, r in zip(signals, refs):
            y = comp.encode_continuous(x)
            cb = CodebookSet(books.detach().numpy())
            idx = rvq_encode(y.detach().numpy(), cb)[0].indices
            q = sum(books[k][torch.as_tensor(idx[:, k])] for k in range(cfg.K))
            loss = cfg.lambda_commit * commitment_loss(y, q)
            al = comp.align_terms(straight_through(y, q), r)
            loss = (loss + sum(l * t for l, t in zip(lam, al))) / len(signals)
            loss.backward()
            total += loss.item()
        opt.step()
        if log:
            log(stage="codec_joint", step=step, loss=total)
    comp.codebooks = CodebookSet(books.detach().numpy().copy())
    return comp
