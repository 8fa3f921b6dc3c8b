"""Global/local factorized autoregressive LM over RVQ token frames.

Global stream: ``[C ; BOS ; h_0 .. h_{L-2}]`` where ``h_l`` is the sum of the
K per-layer embeddings of frame ``l``. The hidden state ``g_l`` at the position
just before frame ``l`` predicts ``a_{l,0}``. The local stream for frame ``l`` is
``[g_l ; e_0(a_{l,0}) .. e_{K-2}(a_{l,K-2})]`` (projected to the local width)
and local position ``k`` predicts ``a_{l,k}`` for ``k >= 1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import tokenizer
from .binfmt import load_params, save_params
from .engine.ops import Dispatcher
from .errors import BadCheckpoint, ConfigMismatch, IndexOutOfRange, ShapeMismatch, TooLong
from .lyrics import CondSequence, Role
from .nn import DTYPE, Block, Rope, rms_norm, stack_forward

_MAGIC = b"HLM1"


@dataclass(frozen=True)
class LMConfig:
    K: int = 8
    V: int = 256
    d_global: int = 128
    d_local: int = 64
    n_global: int = 4
    n_local: int = 2
    heads_global: int = 4
    heads_local: int = 2
    L_max: int = 1024
    max_cond: int = 2048
    ref_dim: int = 32
    text_vocab: int = tokenizer.VOCAB_SIZE
    mlp_ratio: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        if self.K < 2 or self.V < 2:
            raise ValueError("LMConfig needs K >= 2 and V >= 2")

    @classmethod
    def tiny(cls, **kw) -> "LMConfig":
        base = dict(K=4, V=32, d_global=32, d_local=16, n_global=2, n_local=1,
                    heads_global=2, heads_local=1, L_max=256, max_cond=512, ref_dim=8)
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True)
class LossWeights:
    lambda0: float
    lambdas: tuple[float, ...]

    @classmethod
    def uniform(cls, K: int) -> "LossWeights":
        """Warm-up and pre-training preset: every layer weighted 1."""
        return cls(1.0, tuple(1.0 for _ in range(1, K)))

    @classmethod
    def sft(cls, K: int) -> "LossWeights":
        """Fine-tuning preset: global weight 2, residual weight (K - k) / 10."""
        return cls(2.0, tuple((K - k) / 10 for k in range(1, K)))

    @classmethod
    def for_stage(cls, stage: str, K: int) -> "LossWeights":
        if stage in ("warmup", "pretrain"):
            return cls.uniform(K)
        if stage == "sft":
            return cls.sft(K)
        raise ValueError(f"no loss preset for stage {stage!r}")


class HierLM(nn.Module):
    def __init__(self, cfg: LMConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            std = cfg.init_std
            dg, dl = cfg.d_global, cfg.d_local
            self.text_embed = nn.Parameter(torch.randn(cfg.text_vocab, dg, dtype=DTYPE) * std)
            self.ref_adapter = nn.Parameter(torch.randn(dg, cfg.ref_dim, dtype=DTYPE) * std)
            self.bos = nn.Parameter(torch.randn(dg, dtype=DTYPE) * std)
            self.frame_tables = nn.Parameter(torch.randn(cfg.K, cfg.V, dg, dtype=DTYPE) * std)
            self.global_blocks = nn.ModuleList(
                Block(dg, cfg.heads_global, cfg.mlp_ratio, std) for _ in range(cfg.n_global))
            self.global_norm = nn.Parameter(torch.ones(dg, dtype=DTYPE))
            self.head0 = nn.Parameter(torch.randn(cfg.V, dg, dtype=DTYPE) * std)
            self.local_in = nn.Parameter(torch.randn(dl, dg, dtype=DTYPE) * std)
            self.local_blocks = nn.ModuleList(
                Block(dl, cfg.heads_local, cfg.mlp_ratio, std) for _ in range(cfg.n_local))
            self.local_norm = nn.Parameter(torch.ones(dl, dtype=DTYPE))
            self.local_heads = nn.Parameter(torch.randn(cfg.K - 1, cfg.V, dl, dtype=DTYPE) * std)
        self.rope_global = Rope(dg // cfg.heads_global, cfg.max_cond + cfg.L_max + 1)
        self.rope_local = Rope(dl // cfg.heads_local, cfg.K)
        self.register_buffer("layer_offsets", torch.arange(cfg.K) * cfg.V, persistent=False)

    # -- embeddings -------------------------------------------------------------
    def embed_condition(self, ops: Dispatcher, cond: CondSequence):
        """Condition prefix as (1, P, d_global), or ``None`` when empty."""
        parts = []
        for seg in cond.segments:
            if seg.role is Role.REF_EMBED:
                ref = torch.as_tensor(np.asarray(seg.payload), dtype=DTYPE)
                if ref.shape != (self.cfg.ref_dim,):
                    raise ShapeMismatch(f"reference embedding must have {self.cfg.ref_dim} dims")
                parts.append(ops.matmul(ref[None, :], self.ref_adapter.T))
            elif len(seg.payload):
                ids = torch.as_tensor(seg.payload, dtype=torch.long)
                parts.append(ops.index_select(self.text_embed, 0, ids))
        if not parts:
            return None
        x = parts[0] if len(parts) == 1 else ops.cat(parts, 0)
        return x[None]

    def frame_embed(self, ops: Dispatcher, frames: torch.Tensor):
        """Sum of per-layer embeddings: (..., K) indices -> (..., d_global)."""
        K, V = self.cfg.K, self.cfg.V
        flat = ops.add(frames, self.layer_offsets)
        e = ops.index_select(self.frame_tables.view(K * V, -1), 0, flat.view(-1))
        return ops.sum(e.view(*frames.shape, -1), -2)

    def layer_embed(self, ops: Dispatcher, k: int, tokens: torch.Tensor):
        return ops.index_select(self.frame_tables[k], 0, tokens.reshape(-1))

    # -- sub-models ---------------------------------------------------------------
    def global_hidden(self, ops, x, positions, mask, caches=None, collect=None):
        h = stack_forward(ops, self.global_blocks, x, positions, self.rope_global, mask, caches, collect)
        return rms_norm(ops, h, self.global_norm)

    def local_hidden(self, ops, x, positions, mask, caches=None):
        h = stack_forward(ops, self.local_blocks, x, positions, self.rope_local, mask, caches)
        return rms_norm(ops, h, self.local_norm)

    def head0_logits(self, ops, g):
        return ops.matmul(g, self.head0.T)

    def local_logits(self, ops, hid, k: int):
        return ops.matmul(hid, self.local_heads[k - 1].T)

    def local_project(self, ops, x):
        return ops.matmul(x, self.local_in.T)

    # -- teacher forcing -------------------------------------------------------------
    def _check_frames(self, frames) -> torch.Tensor:
        a = torch.as_tensor(np.asarray(frames), dtype=torch.long)
        if a.ndim != 2 or a.shape[1] != self.cfg.K:
            raise ShapeMismatch(f"frames must be (L, {self.cfg.K}), got {tuple(a.shape)}")
        if a.shape[0] > self.cfg.L_max:
            raise TooLong(f"{a.shape[0]} frames exceed L_max={self.cfg.L_max}")
        if a.numel() and (a.min() < 0 or a.max() >= self.cfg.V):
            raise IndexOutOfRange("token index outside [0, V)")
        return a

    def forward_teacher_forced(self, cond: CondSequence, frames, ops: Dispatcher | None = None):
        """Per-layer logits (L, K, V) with every input token taken from ``frames``."""
        ops = ops or Dispatcher()
        a = self._check_frames(frames)
        L = a.shape[0]
        cfg = self.cfg
        if L == 0:
            return torch.zeros(0, cfg.K, cfg.V, dtype=DTYPE)
        c = self.embed_condition(ops, cond)
        P = 0 if c is None else c.shape[1]
        if len(cond) + L > cfg.max_cond + cfg.L_max:
            raise TooLong("condition plus frames exceed the positional table")
        pieces = [] if c is None else [c]
        pieces.append(self.bos.view(1, 1, -1))
        if L > 1:
            pieces.append(self.frame_embed(ops, a[None, :-1]))
        x = ops.cat(pieces, 1)
        T = x.shape[1]
        mask = ops.causal_mask(T, T, DTYPE)
        g = self.global_hidden(ops, x, ops.arange(T), mask)[0, P:]          # (L, dg)
        logits0 = self.head0_logits(ops, g)                                   # (L, V)

        K = cfg.K
        emb = torch.stack([self.frame_tables[k][a[:, k]] for k in range(K - 1)], 1)
        xl = ops.cat([self.local_project(ops, g)[:, None, :], self.local_project(ops, emb)], 1)
        hl = self.local_hidden(ops, xl, ops.arange(K), ops.causal_mask(K, K, DTYPE))  # (L, K, dl)
        rest = ops.matmul(hl[:, 1:].transpose(0, 1), self.local_heads.transpose(1, 2))  # (K-1, L, V)
        return torch.cat([logits0[:, None, :], rest.transpose(0, 1)], 1)


def frame_embed(frame, tables) -> np.ndarray:
    """``h = sum_k tables[k][frame[k]]`` for one frame; ``tables`` is (K, V, d)."""
    tables = np.asarray(tables)
    frame = np.asarray(frame, dtype=np.int64)
    K, V = tables.shape[:2]
    if frame.shape != (K,):
        raise ShapeMismatch(f"frame must hold {K} indices")
    if (frame < 0).any() or (frame >= V).any():
        raise IndexOutOfRange("token index outside [0, V)")
    return tables[np.arange(K), frame].sum(0)


def token_logprobs(logits: torch.Tensor, frames) -> torch.Tensor:
    """log-softmax pick of every realized token, shape (L, K)."""
    a = torch.as_tensor(np.asarray(frames), dtype=torch.long)
    return F.log_softmax(logits, -1).gather(-1, a[..., None])[..., 0]


def joint_logprob(model: HierLM, cond: CondSequence, frames) -> torch.Tensor:
    """Global-layer plus local-layer log-probabilities of the whole sequence."""
    lp = token_logprobs(model.forward_teacher_forced(cond, frames), frames)
    return lp[:, 0].sum() + lp[:, 1:].sum()


def layer_ce(logits: torch.Tensor, targets) -> torch.Tensor:
    """Mean cross-entropy over frames for each layer, shape (K,)."""
    return -token_logprobs(logits, targets).mean(0)


def weighted_ce_loss(logits: torch.Tensor, targets, w: LossWeights) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    if logits.ndim != 3 or logits.shape[:2] != t.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs targets {tuple(t.shape)}")
    K = logits.shape[1]
    if len(w.lambdas) != K - 1:
        raise ShapeMismatch(f"{len(w.lambdas)} residual weights for K={K}")
    ce = layer_ce(logits, t)
    lam = torch.as_tensor(w.lambdas, dtype=ce.dtype)
    return w.lambda0 * ce[0] + (lam * ce[1:]).sum() / (K - 1)


# -- persistence -------------------------------------------------------------------

def save_lm(model: HierLM, path, extra: dict | None = None) -> None:
    desc = {"kind": "hier_lm", "config": asdict(model.cfg)}
    if extra:
        desc["extra"] = extra
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_params(path, _MAGIC, desc, tensors)


def load_lm(path, expect: LMConfig | None = None) -> HierLM:
    header, tensors = load_params(path, _MAGIC)
    if header.get("kind") != "hier_lm":
        raise BadCheckpoint(f"not an LM checkpoint: {header.get('kind')}")
    try:
        cfg = LMConfig(**header["config"])
    except TypeError as exc:
        raise BadCheckpoint(f"incompatible LM config: {exc}") from exc
    if expect is not None and expect != cfg:
        raise ConfigMismatch("checkpoint config differs from the requested config")
    model = HierLM(cfg)
    state = {k: torch.as_tensor(v, dtype=DTYPE) for k, v in tensors.items()}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise BadCheckpoint(str(exc)) from exc
    return model


def lm_extra(path) -> dict:
    header, _ = load_params(path, _MAGIC)
    return header.get("extra", {})


def same_config(a: HierLM, b: HierLM) -> None:
    if a.cfg != b.cfg:
        raise ConfigMismatch("policy and reference models have different LMConfig")


# -- training ---------------------------------------------------------------------

@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    sink: object = None

    def emit(self, **rec) -> None:
        self.records.append(rec)
        if self.sink is not None:
            self.sink.write(json.dumps(rec) + "\n")
            self.sink.flush()


def train_lm(
    model: HierLM,
    data: list[tuple[CondSequence, np.ndarray]],
    weights: LossWeights,
    steps: int,
    lr: float = 3e-3,
    batch: int = 4,
    cond_dropout: float = 0.02,
    seed: int = 0,
    log: TrainLog | None = None,
) -> TrainLog:
    """Adam on the weighted cross-entropy; one JSON record per step."""
    log = log or TrainLog()
    log.emit(event="config", lambda0=weights.lambda0, lambdas=list(weights.lambdas), steps=steps, lr=lr)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for step in range(steps):
        idx = rng.choice(len(data), size=min(batch, len(data)), replace=False)
        opt.zero_grad()
        total = 0.0
        per_layer = np.zeros(model.cfg.K)
        for i in idx:
            cond, frames = data[i]
            if rng.random() < cond_dropout:
                cond = CondSequence.empty()
            logits = model.forward_teacher_forced(cond, frames)
            loss = weighted_ce_loss(logits, frames, weights) / len(idx)
            loss.backward()
            total += loss.item()
            per_layer += layer_ce(logits.detach(), frames).numpy() / len(idx)
        opt.step()
        log.emit(step=step, loss=total, ce=[float(x) for x in per_layer])
    model.eval()
    return log


def uniform_logprob(L: int, K: int, V: int) -> float:
    return -L * K * math.log(V)
