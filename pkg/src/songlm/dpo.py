"""Preference-pair construction and the DPO objective over the hierarchical LM."""

from __future__ import annotations

import copy
import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .binfmt import sha256_bytes, to_bytes
from .errors import ConfigMismatch, EmptyBatch, GroupTooSmall
from .lm import HierLM, TrainLog, joint_logprob, same_config
from .lyrics import CondSequence, read_cond, write_cond
from .rvq import TokenFrameSeq, load_tokens, save_tokens


@dataclass(frozen=True)
class DPOConfig:
    beta: float = 0.1

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be > 0")


@dataclass(frozen=True)
class CandidateScores:
    sim: float = 0.0
    per: float = 0.0
    songeval: float = 0.0
    audiobox_avg: float = 0.0

    def __post_init__(self):
        if not -1.0 <= self.sim <= 1.0:
            raise ValueError("sim must lie in [-1, 1]")
        if self.per < 0:
            raise ValueError("per must be >= 0")


class Criterion(str, enum.Enum):
    SIM = "sim"
    PER = "per"
    QUALITY = "quality"


@dataclass
class PreferencePair:
    cond: CondSequence
    winner: np.ndarray
    loser: np.ndarray
    criterion: Criterion | None = None
    winner_scores: CandidateScores | None = None
    loser_scores: CandidateScores | None = None

    def __post_init__(self):
        self.winner = _frames(self.winner)
        self.loser = _frames(self.loser)
        if self.winner.shape == self.loser.shape and np.array_equal(self.winner, self.loser):
            raise ValueError("winner and loser sequences are identical")


def _frames(x) -> np.ndarray:
    return x.indices if isinstance(x, TokenFrameSeq) else np.asarray(x, dtype=np.int64)


# -- objective --------------------------------------------------------------------------------

def _logp(model: HierLM, cond, frames, grad: bool) -> torch.Tensor:
    if grad:
        return joint_logprob(model, cond, frames)
    with torch.no_grad():
        return joint_logprob(model, cond, frames)


def delta(policy: HierLM, ref: HierLM, pair: PreferencePair) -> torch.Tensor:
    """Winner log-ratio minus loser log-ratio; differentiable w.r.t. the policy."""
    same_config(policy, ref)
    pw = _logp(policy, pair.cond, pair.winner, True)
    pl = _logp(policy, pair.cond, pair.loser, True)
    rw = _logp(ref, pair.cond, pair.winner, False)
    rl = _logp(ref, pair.cond, pair.loser, False)
    return (pw - rw) - (pl - rl)


def dpo_loss(policy: HierLM, ref: HierLM, pairs: Sequence[PreferencePair], cfg: DPOConfig = DPOConfig()) -> torch.Tensor:
    return _loss_and_delta(policy, ref, pairs, cfg)[0]


def _loss_and_delta(policy, ref, pairs, cfg):
    if not pairs:
        raise EmptyBatch("DPO batch is empty")
    d = torch.stack([delta(policy, ref, p) for p in pairs])
    return -F.logsigmoid(cfg.beta * d).mean(), d.detach().mean().item()


def implicit_reward(policy: HierLM, ref: HierLM, cond: CondSequence, frames, cfg: DPOConfig = DPOConfig()) -> torch.Tensor:
    same_config(policy, ref)
    return cfg.beta * (_logp(policy, cond, frames, True) - _logp(ref, cond, frames, False))


def frozen_copy(model: HierLM) -> HierLM:
    ref = copy.deepcopy(model)
    for p in ref.parameters():
        p.requires_grad_(False)
    ref.eval()
    return ref


def train_dpo(policy: HierLM, ref: HierLM, pairs: Sequence[PreferencePair], cfg: DPOConfig,
              steps: int, lr: float = 1e-2, batch: int | None = None, seed: int = 0,
              log: TrainLog | None = None) -> TrainLog:
    """Adam on the DPO loss; the reference never receives gradients."""
    same_config(policy, ref)
    if not pairs:
        raise EmptyBatch("no preference pairs")
    log = log or TrainLog()
    log.emit(event="config", beta=cfg.beta, steps=steps, lr=lr)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(policy.parameters(), lr=lr)
    n = len(pairs) if batch is None else min(batch, len(pairs))
    for step in range(steps):
        idx = rng.choice(len(pairs), size=n, replace=False) if n < len(pairs) else np.arange(len(pairs))
        opt.zero_grad()
        loss, mean_delta = _loss_and_delta(policy, ref, [pairs[i] for i in idx], cfg)
        loss.backward()
        opt.step()
        log.emit(step=step, loss=loss.item(), mean_delta=mean_delta)
    return log


def merge_models(models: Sequence[HierLM], weights: Sequence[float] | None = None) -> HierLM:
    """Parameter-wise weighted average (equal weights by default)."""
    if not models:
        raise EmptyBatch("nothing to merge")
    for m in models[1:]:
        if m.cfg != models[0].cfg:
            raise ConfigMismatch("merged models must share one LMConfig")
    w = np.full(len(models), 1.0 / len(models)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(w) != len(models):
        raise ValueError("one weight per model")
    out = copy.deepcopy(models[0])
    states = [m.state_dict() for m in models]
    merged = {k: sum(float(wi) * s[k] for wi, s in zip(w, states)) for k in states[0]}
    out.load_state_dict(merged)
    return out


# -- pair construction -------------------------------------------------------------------------

SIM_MARGIN, SIM_FLOOR = 0.12, 0.3
PER_MARGIN = 0.1
SONGEVAL_MARGIN, AUDIOBOX_MARGIN = 0.5, 0.8


def keeps(criterion: Criterion | str, w: CandidateScores, l: CandidateScores) -> bool:
    """Margin predicate for an already chosen (winner, loser)."""
    c = Criterion(criterion)
    if c is Criterion.SIM:
        return w.sim - l.sim > SIM_MARGIN and w.sim > SIM_FLOOR
    if c is Criterion.PER:
        return abs(w.per - l.per) > PER_MARGIN
    return w.songeval - l.songeval > SONGEVAL_MARGIN and w.audiobox_avg - l.audiobox_avg > AUDIOBOX_MARGIN


def select(criterion: Criterion | str, scores: Sequence[CandidateScores]) -> tuple[int, int] | None:
    """(winner, loser) indices, or ``None`` when the quality rule finds no dominant pair."""
    c = Criterion(criterion)
    if c is Criterion.SIM:
        s = [x.sim for x in scores]
        return int(np.argmax(s)), int(np.argmin(s))
    if c is Criterion.PER:
        s = [x.per for x in scores]
        return int(np.argmin(s)), int(np.argmax(s))
    se = np.array([x.songeval for x in scores])
    ab = np.array([x.audiobox_avg for x in scores])
    best = [i for i in range(len(scores)) if se[i] == se.max() and ab[i] == ab.max()]
    worst = [i for i in range(len(scores)) if se[i] == se.min() and ab[i] == ab.min()]
    if not best or not worst or best[0] == worst[0]:
        return None
    return best[0], worst[0]


def build_pairs(groups, criterion: Criterion | str) -> list[PreferencePair]:
    """``groups``: sequence of ``(cond, [(frames, CandidateScores), ...])``."""
    c = Criterion(criterion)
    out = []
    for cond, cands in groups:
        if len(cands) < 2:
            raise GroupTooSmall(f"group has {len(cands)} candidate(s); need at least 2")
        scores = [s for _, s in cands]
        pick = select(c, scores)
        if pick is None:
            continue
        wi, li = pick
        if wi == li or not keeps(c, scores[wi], scores[li]):
            continue
        w, l = _frames(cands[wi][0]), _frames(cands[li][0])
        if w.shape == l.shape and np.array_equal(w, l):
            continue
        out.append(PreferencePair(cond, w, l, c, scores[wi], scores[li]))
    return out


# -- toy scorers ----------------------------------------------------------------------------------

def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


N_PHONEMES = 40


def token_phonemes(frames: np.ndarray) -> list[int]:
    """Deterministic pseudo-phoneme per frame from its first two codes."""
    f = _frames(frames)
    return [int((a0 * 31 + a1) % N_PHONEMES) for a0, a1 in f[:, :2]]


def lyric_phonemes(text: str) -> list[int]:
    return [b % N_PHONEMES for b in text.encode("utf-8") if chr(b).isalpha()]


def toy_per(frames, lyrics: str) -> float:
    ref = lyric_phonemes(lyrics)
    hyp = token_phonemes(frames)[: max(len(ref), 1) * 2]
    return levenshtein(hyp, ref) / max(len(ref), 1)


def toy_sim(frames, style: np.ndarray, tables: np.ndarray) -> float:
    """Cosine between the mean frame embedding and a style vector."""
    f = _frames(frames)
    if len(f) == 0:
        return 0.0
    emb = tables[np.arange(f.shape[1])[None, :], f].sum(1).mean(0)
    den = np.linalg.norm(emb) * np.linalg.norm(style)
    return float(np.clip(emb @ style / den, -1.0, 1.0)) if den > 0 else 0.0


def style_vector(tags_text: str, dim: int) -> np.ndarray:
    seed = int(sha256_bytes(tags_text.encode("utf-8"))[:16], 16)
    return np.random.default_rng(seed).standard_normal(dim)


def variety_score(f: np.ndarray) -> float:
    """2..5 by the share of distinct layer-0 codes."""
    return 2.0 + 3.0 * len(np.unique(f[:, 0])) / max(len(f), 1)


def smoothness_score(f: np.ndarray) -> float:
    """4..8 by how rarely consecutive layer-0 codes change."""
    if len(f) < 2:
        return 8.0
    return 4.0 + 4.0 * float(np.mean(f[1:, 0] == f[:-1, 0]))


@dataclass
class SyntheticScorers:
    """Quality proxies driven by token statistics; replaceable for tests."""
    songeval: Callable = variety_score
    audiobox: Callable = smoothness_score


def score_candidate(frames, lyrics: str, style: np.ndarray, tables: np.ndarray,
                    scorers: SyntheticScorers = SyntheticScorers()) -> CandidateScores:
    f = _frames(frames)
    return CandidateScores(toy_sim(f, style, tables), toy_per(f, lyrics),
                           float(scorers.songeval(f)), float(scorers.audiobox(f)))


# -- preference dataset files ------------------------------------------------------------------

def cache_dir(default: str | os.PathLike | None = None) -> Path:
    return Path(os.environ.get("SONGLM_CACHE_DIR") or default or Path.home() / ".cache" / "songlm")


def _put(store: Path, data: bytes, suffix: str) -> str:
    h = sha256_bytes(data)
    p = store / f"{h}{suffix}"
    if not p.exists():
        p.write_bytes(data)
    return h


def write_preferences(pairs: Sequence[PreferencePair], path, store=None) -> Path:
    """One JSON record per pair; cond and token files live in a content-addressed store."""
    store = Path(store) if store is not None else cache_dir() / "blobs"
    store.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            rec = {
                "cond": _put(store, to_bytes(write_cond, p.cond), ".cseq"),
                "winner": _put(store, to_bytes(save_tokens, TokenFrameSeq(p.winner)), ".toks"),
                "loser": _put(store, to_bytes(save_tokens, TokenFrameSeq(p.loser)), ".toks"),
                "criterion": None if p.criterion is None else Criterion(p.criterion).value,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return store


def read_preferences(path, store=None) -> list[PreferencePair]:
    store = Path(store) if store is not None else cache_dir() / "blobs"
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            cond = read_cond(store / f"{rec['cond']}.cseq")
            w = load_tokens(store / f"{rec['winner']}.toks").indices
            l = load_tokens(store / f"{rec['loser']}.toks").indices
            crit = rec.get("criterion")
            out.append(PreferencePair(cond, w, l, None if crit is None else Criterion(crit)))
    return out
