"""Flow-matching latent decoder with masked infilling, CFG Euler sampling,
reflow distillation and the decoder fine-tuning loss."""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .binfmt import load_params, open_maybe, read_exact, read_header, save_params, unpack, write_header
from .errors import BadCheckpoint, EmptyCorpus, LengthMismatch, ShapeMismatch
from .nn import DTYPE

_MAGIC = b"FLW1"
_RFL_MAGIC = b"RFL1"


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=DTYPE)


def interpolate(z0, z1, t):
    """``t * z1 + (1 - t) * z0``; ``t`` may be a scalar or broadcast per batch item."""
    a, b = _t(z0), _t(z1)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    t = _t(t)
    while t.ndim and t.ndim < a.ndim:
        t = t[..., None]
    return t * b + (1 - t) * a


def align_cond(cond, n_frames: int) -> torch.Tensor:
    """Repeat token-rate features to the latent frame rate (x2), trimmed or zero-padded."""
    c = _t(cond)
    c = c.repeat_interleave(2, dim=-2)
    if c.shape[-2] >= n_frames:
        return c[..., :n_frames, :]
    pad = torch.zeros(*c.shape[:-2], n_frames - c.shape[-2], c.shape[-1], dtype=c.dtype)
    return torch.cat([c, pad], -2)


@dataclass(frozen=True)
class FlowConfig:
    D: int = 16
    cond_dim: int = 64
    hidden: int = 128
    n_blocks: int = 3
    t_freqs: int = 8


class VectorField(nn.Module):
    """``v(z_t, t, cond, partial, mask)`` over (B, T, .) latents.

    A width-3 temporal convolution mixes neighbouring frames of the
    concatenated inputs, then residual per-frame MLP blocks refine. ``cond``
    is given at latent frame rate; a zero ``cond`` is the unconditional field.
    """

    def __init__(self, cfg: FlowConfig = FlowConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        c_in = 2 * cfg.D + cfg.cond_dim + 1 + 2 * cfg.t_freqs
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.inp = nn.Conv1d(c_in, cfg.hidden, 3, padding=1, dtype=DTYPE)
            self.blocks = nn.ModuleList(
                nn.Sequential(nn.LayerNorm(cfg.hidden, dtype=DTYPE), nn.Linear(cfg.hidden, 2 * cfg.hidden, dtype=DTYPE),
                              nn.SiLU(), nn.Linear(2 * cfg.hidden, cfg.hidden, dtype=DTYPE))
                for _ in range(cfg.n_blocks))
            self.out = nn.Linear(cfg.hidden, cfg.D, dtype=DTYPE)
        self.register_buffer("freqs", math.pi * 2.0 ** torch.arange(cfg.t_freqs, dtype=DTYPE), persistent=False)

    def forward(self, z_t, t, cond, partial, mask):
        z = _t(z_t)
        squeeze = z.ndim == 2
        if squeeze:
            z = z[None]
        B, T, _ = z.shape
        cond = _t(cond).expand(B, T, -1) if _t(cond).ndim == 2 else _t(cond)
        partial = _t(partial).expand(B, T, -1) if _t(partial).ndim == 2 else _t(partial)
        m = _t(mask)
        m = (m.expand(B, T) if m.ndim == 1 else m)[..., None]
        tt = _t(t).reshape(-1, 1).expand(B, 1)
        ang = tt * self.freqs
        temb = torch.cat([torch.sin(ang), torch.cos(ang)], -1)[:, None, :].expand(B, T, -1)
        x = torch.cat([z, cond, partial, m, temb], -1)
        h = self.inp(x.transpose(1, 2)).transpose(1, 2)
        for blk in self.blocks:
            h = h + blk(h)
        v = self.out(h)
        return v[0] if squeeze else v


# -- masks, loss, sampling --------------------------------------------------------------------

def sample_mask(n_frames: int, rng: np.random.Generator, lo: float = 0.3, hi: float = 1.0) -> np.ndarray:
    """One contiguous masked span covering a U(lo, hi) fraction (at least one frame)."""
    frac = rng.uniform(lo, hi)
    span = min(n_frames, max(1, int(round(frac * n_frames))))
    start = int(rng.integers(0, n_frames - span + 1))
    m = np.zeros(n_frames)
    m[start: start + span] = 1.0
    return m


def masked_mse(pred, target, mask) -> torch.Tensor:
    """Mean squared error over the entries of masked frames."""
    m = _t(mask)
    m = m[..., None].expand_as(target)
    n = m.sum()
    if n == 0:
        return torch.zeros((), dtype=DTYPE)
    return (((pred - target) ** 2) * m).sum() / n


def fm_loss(v: Callable, z1, cond, mask, rng: np.random.Generator, t=None, z0=None) -> torch.Tensor:
    """Flow-matching loss with masked infilling; error counted on masked frames only.

    ``t`` (one per batch item) and ``z0`` are drawn from ``rng`` unless given.
    """
    z1 = _t(z1)
    m = _t(mask)
    lead = z1.shape[:-2]
    if t is None:
        t = rng.random(lead) if lead else rng.random()
    if z0 is None:
        z0 = rng.standard_normal(tuple(z1.shape))
    z0 = _t(z0)
    z_t = interpolate(z0, z1, t)
    mm = m[..., None]
    pred = v(z_t, _t(t), cond, (1 - mm) * z1, m)
    return masked_mse(pred, mm * (z1 - z0), m)


def euler_sample(v: Callable, cond, partial, steps: int, cfg_scale: float = 1.0,
                 rng: np.random.Generator | None = None, z0=None) -> torch.Tensor:
    """Integrate ``dz/dt`` from t=0 to 1 with ``steps`` uniform Euler steps.

    ``partial`` is ``(mask, clean)``; frames with mask 0 are reset to ``clean``
    before every field evaluation and at the end. With ``cfg_scale != 1`` the
    field is ``v_u + s * (v_c - v_u)`` where ``v_u`` sees a zeroed ``cond``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    mask, clean = partial
    clean = _t(clean)
    m = _t(mask)[..., None]
    cond = _t(cond)
    z = _t(z0) if z0 is not None else _t(rng.standard_normal(tuple(clean.shape)))
    keep = (1 - m) * clean
    uncond = torch.zeros_like(cond)
    dt = 1.0 / steps
    with torch.no_grad():
        for i in range(steps):
            z = keep + m * z
            t = torch.tensor(i * dt, dtype=DTYPE)
            vc = v(z, t, cond, keep, _t(mask))
            if cfg_scale != 1.0:
                vu = v(z, t, uncond, keep, _t(mask))
                vc = vu + cfg_scale * (vc - vu)
            z = z + dt * vc
        z = keep + m * z
    return z


# -- training -------------------------------------------------------------------------------

@dataclass
class FlowTrainCfg:
    steps: int = 1500
    batch: int = 16
    window: int = 32
    lr: float = 2e-3
    cond_drop: float = 0.1
    seed: int = 0


def _crop(items, window: int, rng):
    out = []
    for item in items:
        T = item[1].shape[0]
        s = int(rng.integers(0, T - window + 1)) if T > window else 0
        out.append(tuple(None if a is None else a[s: s + window] for a in item))
    return out


def train_flow(v: VectorField, data: list, cfg: FlowTrainCfg, log: Callable | None = None) -> VectorField:
    """``data``: list of ``(cond_latent_rate, z1)`` arrays; windows cropped to a common length."""
    if not data:
        raise EmptyCorpus("no flow training data")
    window = min(cfg.window, min(z.shape[0] for _, z in data))
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(v.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.steps, 1))
    for step in range(cfg.steps):
        idx = rng.integers(0, len(data), cfg.batch)
        crops = _crop([data[i] for i in idx], window, rng)
        cond = torch.stack([_t(c) for c, _ in crops])
        drop = torch.as_tensor(rng.random(cfg.batch) < cfg.cond_drop)
        cond = torch.where(drop[:, None, None], torch.zeros_like(cond), cond)
        z1 = torch.stack([_t(z) for _, z in crops])
        mask = torch.as_tensor(np.stack([sample_mask(window, rng) for _ in crops]))
        opt.zero_grad()
        loss = fm_loss(v, z1, cond, mask, rng)
        loss.backward()
        opt.step()
        sched.step()
        if log:
            log(stage="flow", step=step, loss=loss.item())
    return v


# -- reflow -----------------------------------------------------------------------------------

@dataclass
class Triplet:
    cond: np.ndarray   # (T, Cc) at latent rate
    z0: np.ndarray     # (T, D)
    z1: np.ndarray     # (T, D) teacher endpoint
    mask: np.ndarray   # (T,)


def make_triplets(teacher: VectorField, items: list, steps: int = 50, cfg_scale: float = 1.0,
                  seed: int = 0, full_mask: bool = False) -> list[Triplet]:
    """Integrate the frozen teacher from fresh noise; ``items`` are ``(cond, z1_clean)`` pairs."""
    rng = np.random.default_rng(seed)
    out = []
    for cond, clean in items:
        T = clean.shape[0]
        mask = np.ones(T) if full_mask else sample_mask(T, rng)
        z0 = rng.standard_normal(clean.shape)
        z1 = euler_sample(teacher, cond, (mask, clean), steps, cfg_scale, z0=z0).numpy()
        out.append(Triplet(np.asarray(cond, dtype=np.float64), z0, z1, mask))
    return out


def fit_pairs(v: VectorField, triplets: list[Triplet], cfg: FlowTrainCfg, log: Callable | None = None,
              fresh_masks: bool = False, stage: str = "pairs") -> VectorField:
    """Train ``v`` in place on fixed ``(z0, z1)`` couplings along straight paths.

    With ``fresh_masks`` a new infilling mask is drawn per sample instead of
    using the triplet's stored mask.
    """
    if not triplets:
        raise EmptyCorpus("no training pairs")
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(v.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.steps, 1))
    T = min(tr.z1.shape[0] for tr in triplets)
    for step in range(cfg.steps):
        idx = rng.integers(0, len(triplets), cfg.batch)
        cond = torch.stack([_t(triplets[i].cond[:T]) for i in idx])
        z0 = torch.stack([_t(triplets[i].z0[:T]) for i in idx])
        z1 = torch.stack([_t(triplets[i].z1[:T]) for i in idx])
        if fresh_masks:
            mask = torch.as_tensor(np.stack([sample_mask(T, rng) for _ in idx]))
        else:
            mask = torch.stack([_t(triplets[i].mask[:T]) for i in idx])
        opt.zero_grad()
        loss = fm_loss(v, z1, cond, mask, rng, z0=z0)
        loss.backward()
        opt.step()
        sched.step()
        if log:
            log(stage=stage, step=step, loss=loss.item())
    return v


def reflow_distill(teacher: VectorField, triplets: list[Triplet], cfg: FlowTrainCfg,
                   log: Callable | None = None) -> VectorField:
    """Train a copy of the teacher on straight paths between its own endpoints."""
    if not triplets:
        raise EmptyCorpus("no reflow triplets")
    return fit_pairs(copy.deepcopy(teacher), triplets, cfg, log, stage="reflow")


def write_triplets(triplets: list[Triplet], target) -> None:
    fh, own = open_maybe(target, "wb")
    try:
        write_header(fh, _RFL_MAGIC)
        fh.write(struct.pack("<I", len(triplets)))
        for tr in triplets:
            T, D = tr.z0.shape
            fh.write(struct.pack("<III", T, D, tr.cond.shape[1]))
            for a in (tr.cond, tr.z0, tr.z1):
                fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
            fh.write(np.asarray(tr.mask, dtype=np.uint8).tobytes())
    finally:
        if own:
            fh.close()


def read_triplets(source) -> list[Triplet]:
    fh, own = open_maybe(source, "rb")
    try:
        read_header(fh, _RFL_MAGIC)
        (n,) = unpack(fh, "<I")
        out = []
        for _ in range(n):
            T, D, C = unpack(fh, "<III")
            arrs = []
            for shape in ((T, C), (T, D), (T, D)):
                raw = read_exact(fh, 4 * shape[0] * shape[1])
                arrs.append(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64))
            mask = np.frombuffer(read_exact(fh, T), dtype=np.uint8).astype(np.float64)
            out.append(Triplet(*arrs, mask))
    finally:
        if own:
            fh.close()
    return out


# -- decoder fine-tuning loss -------------------------------------------------------------------

def no_adversary(x_hat, x) -> torch.Tensor:
    return torch.zeros((), dtype=DTYPE)


@dataclass
class FinetuneLossCfg:
    lambda_adv: float = 0.0
    stft_windows: tuple = (16, 32, 64)
    window_fn: str = "hann"
    adv_hook: Callable = field(default=no_adversary, repr=False, compare=False)

    def __post_init__(self):
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be >= 0")
        if self.window_fn not in ("hann", "rect"):
            raise ValueError("window_fn must be 'hann' or 'rect'")


def stft_mag(x: torch.Tensor, n: int, window_fn: str = "hann") -> torch.Tensor:
    """Magnitudes ``|X| / sqrt(n)`` of frames of length ``n`` at hop ``n/4``, no padding."""
    w = torch.hann_window(n, dtype=DTYPE) if window_fn == "hann" else torch.ones(n, dtype=DTYPE)
    spec = torch.stft(x, n, hop_length=max(n // 4, 1), win_length=n, window=w, center=False, return_complex=True)
    return spec.abs() / math.sqrt(n)


def decoder_finetune_loss(x_hat, x, cfg: FinetuneLossCfg = FinetuneLossCfg()) -> torch.Tensor:
    """Time-domain L1 plus the mean over windows of spectral-magnitude MSE,
    plus ``lambda_adv`` times the adversarial hook."""
    a, b = _t(x_hat), _t(x)
    if a.shape != b.shape:
        raise LengthMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    loss = (a - b).abs().mean()
    wins = [n for n in cfg.stft_windows if n <= a.shape[-1]]
    if wins:
        spec = sum(F.mse_loss(stft_mag(a, n, cfg.window_fn), stft_mag(b, n, cfg.window_fn)) for n in wins)
        loss = loss + spec / len(wins)
    if cfg.lambda_adv:
        loss = loss + cfg.lambda_adv * cfg.adv_hook(a, b)
    return loss


# -- persistence -----------------------------------------------------------------------------------

def flow_tensors(v: VectorField, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: t.detach().numpy() for k, t in v.state_dict().items()}


def flow_from_tensors(cfg: FlowConfig, tensors: dict, prefix: str = "") -> VectorField:
    v = VectorField(cfg)
    state = {k[len(prefix):]: torch.as_tensor(a, dtype=DTYPE) for k, a in tensors.items() if k.startswith(prefix)}
    try:
        v.load_state_dict(state)
    except RuntimeError as exc:
        raise BadCheckpoint(str(exc)) from exc
    return v


def save_flow(v: VectorField, path) -> None:
    save_params(path, _MAGIC, {"kind": "flow", "config": asdict(v.cfg)}, flow_tensors(v))


def load_flow(path) -> VectorField:
    header, tensors = load_params(path, _MAGIC)
    if header.get("kind") != "flow":
        raise BadCheckpoint("not a flow checkpoint")
    return flow_from_tensors(FlowConfig(**header["config"]), tensors)
