"""End-to-end wiring: codec bundle, synthetic corpora, candidate generation, checkpoints."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .binfmt import load_params, save_params
from .clap import ClapConfig, DualEncoder
from .codec import LatentCodec
from .config import ProjectConfig
from .dpo import CandidateScores, PreferencePair, build_pairs, score_candidate, style_vector
from .engine.decode import generate
from .engine.sampling import SamplerConfig
from .errors import BadCheckpoint
from .features import SR, toy_signal
from .flow import (FlowConfig, FlowTrainCfg, VectorField, align_cond, euler_sample, flow_from_tensors,
                   flow_tensors, stft_mag, train_flow)
from .lm import HierLM, LMConfig
from .lyrics import CondSequence, TagSet, cond_from_files, tags_text
from .rvq import CodebookSet, Compressor, CompressorTrainCfg, TokenFrameSeq, rvq_decode, train_compressor

DTYPE = torch.float64
_CDC = b"CDC1"
_CLP = b"CLP1"


# -- codec bundle ----------------------------------------------------------------

@dataclass
class CodecBundle:
    compressor: Compressor
    latent: LatentCodec
    flow: VectorField
    sample_steps: int = 10
    cfg_scale: float = 1.0

    def tokenize(self, x: np.ndarray) -> TokenFrameSeq:
        return self.compressor.tokenize(np.asarray(x, dtype=np.float64))

    def flow_cond(self, tokens: TokenFrameSeq, n_latent: int) -> np.ndarray:
        q = rvq_decode(tokens, self.compressor.codebooks).data
        return align_cond(q, n_latent).numpy()

    def detokenize(self, tokens: TokenFrameSeq, length: int | None = None, seed: int = 0) -> np.ndarray:
        """Tokens -> latent frames (flow, full mask) -> signal."""
        n_latent = 2 * tokens.L
        cond = self.flow_cond(tokens, n_latent)
        shape = (n_latent, self.latent.D)
        rng = np.random.default_rng(seed)
        z = euler_sample(self.flow, cond, (np.ones(n_latent), np.zeros(shape)), self.sample_steps,
                         self.cfg_scale, rng=rng).numpy()
        return self.latent.decode(z, length)


def spectral_error(x_hat: np.ndarray, x: np.ndarray, n: int = 64) -> float:
    """Relative Frobenius error between STFT magnitudes (phase-blind)."""
    m = min(len(x_hat), len(x))
    a = stft_mag(torch.as_tensor(np.asarray(x_hat[:m], dtype=np.float64)), n)
    b = stft_mag(torch.as_tensor(np.asarray(x[:m], dtype=np.float64)), n)
    return float(torch.linalg.norm(a - b) / torch.linalg.norm(b).clamp_min(1e-12))


def codec_signals(cfg: ProjectConfig) -> list[np.ndarray]:
    return [toy_signal(cfg.rvq.duration, seed=cfg.seed * 100_003 + i) for i in range(cfg.rvq.n_signals)]


def train_codec_bundle(cfg: ProjectConfig, log=None) -> CodecBundle:
    sigs = codec_signals(cfg)
    r = cfg.rvq
    comp = train_compressor(sigs, CompressorTrainCfg(r.dim, r.K, r.V, r.align_steps, r.joint_steps, r.lr,
                                                     r.lambda_commit, r.lambda_sem, r.lambda_pho, cfg.seed), log)
    latent = LatentCodec.fit(sigs, D=cfg.flow.D, hop=SR // 25)
    bundle = CodecBundle(comp, latent, None, cfg.flow.sample_steps, cfg.flow.cfg_scale)
    data = []
    for x in sigs:
        z = latent.encode(x)
        data.append((bundle.flow_cond(comp.tokenize(x), len(z)), z))
    f = cfg.flow
    v = VectorField(FlowConfig(f.D, r.dim, f.hidden, f.n_blocks), seed=cfg.seed)
    bundle.flow = train_flow(v, data, FlowTrainCfg(f.train_steps, f.batch, f.window, f.lr, f.cond_drop, cfg.seed), log)
    return bundle


def save_codec_bundle(b: CodecBundle, path) -> None:
    tensors = {"comp." + k: t.detach().numpy() for k, t in b.compressor.state_dict().items()}
    tensors["codebooks"] = b.compressor.codebooks.books
    tensors["latent.basis"] = b.latent.basis
    tensors["latent.mean"] = b.latent.mean
    tensors.update(flow_tensors(b.flow, "flow."))
    desc = {"kind": "codec", "dim": b.compressor.dim, "flow": asdict(b.flow.cfg),
            "sample_steps": b.sample_steps, "cfg_scale": b.cfg_scale}
    save_params(path, _CDC, desc, tensors)


def load_codec_bundle(path) -> CodecBundle:
    header, tensors = load_params(path, _CDC)
    if header.get("kind") != "codec":
        raise BadCheckpoint("not a codec checkpoint")
    try:
        comp = Compressor(header["dim"])
        comp.load_state_dict({k[5:]: torch.as_tensor(a, dtype=DTYPE) for k, a in tensors.items() if k.startswith("comp.")})
        comp.codebooks = CodebookSet(tensors["codebooks"])
        latent = LatentCodec(tensors["latent.basis"], tensors["latent.mean"])
        flow = flow_from_tensors(FlowConfig(**header["flow"]), tensors, "flow.")
    except (KeyError, RuntimeError, TypeError) as exc:
        raise BadCheckpoint(f"incomplete codec checkpoint: {exc}") from exc
    return CodecBundle(comp, latent, flow, header["sample_steps"], header["cfg_scale"])


# -- synthetic LM corpus ---------------------------------------------------------

GENRES = ("pop", "rock", "jazz", "folk")
MOODS = ("soft", "warm", "dark", "happy")
LINES = ("la la la", "under the moon", "we run tonight", "hold on", "city lights", "into the sea")


def lm_config(cfg: ProjectConfig) -> LMConfig:
    return LMConfig.tiny() if cfg.lm.preset == "tiny" else LMConfig()


def synthetic_prompt(rng: np.random.Generator) -> tuple[str, TagSet]:
    lines = "\n".join(rng.choice(LINES, size=2))
    lyrics = f"[Verse]\n{lines}\n[Chorus]\n{rng.choice(LINES)}\n"
    tags = TagSet({"genre": (str(rng.choice(GENRES)),), "mood": (str(rng.choice(MOODS)),)})
    return lyrics, tags


def synthetic_frames(tags: TagSet, L: int, K: int, V: int, rng: np.random.Generator, noise: float = 0.05) -> np.ndarray:
    """Genre sets the layer-0 stride, residual layers are functions of layer 0, plus sparse noise."""
    genre = tags.entries.get("genre", ("pop",))[0]
    stride = 1 + (GENRES.index(genre) if genre in GENRES else 0)
    a0 = (int(rng.integers(V)) + stride * np.arange(L)) % V
    f = np.stack([(a0 * (k + 1) + k) % V for k in range(K)], 1)
    flip = rng.random(f.shape) < noise
    f[flip] = rng.integers(0, V, int(flip.sum()))
    return f.astype(np.int64)


def lm_corpus(cfg: ProjectConfig, model_cfg: LMConfig, seed_offset: int = 0) -> list[tuple[CondSequence, np.ndarray]]:
    rng = np.random.default_rng([cfg.seed, 17, seed_offset])
    out = []
    for _ in range(cfg.lm.corpus_size):
        lyrics, tags = synthetic_prompt(rng)
        out.append((cond_from_files(lyrics, tags), synthetic_frames(tags, cfg.lm.frames, model_cfg.K, model_cfg.V, rng)))
    return out


# -- preference candidates -------------------------------------------------------

def sampler_from(cfg: ProjectConfig) -> SamplerConfig:
    i = cfg.infer
    return SamplerConfig(i.temperature, i.top_k, i.cfg_scale, i.cfg_local)


def candidate_groups(model: HierLM, cfg: ProjectConfig) -> list[tuple[CondSequence, list[tuple[np.ndarray, CandidateScores]]]]:
    """Sample ``candidates`` continuations per synthetic prompt and score them with the toy scorers."""
    rng = np.random.default_rng([cfg.seed, 29])
    d = cfg.dpo
    tables = model.frame_tables.detach().numpy()
    groups = []
    for p in range(d.prompts):
        lyrics, tags = synthetic_prompt(rng)
        cond = cond_from_files(lyrics, tags)
        outs, _ = generate(model, cond, d.frames, sampler_from(cfg), mode="kv", batch=d.candidates,
                           seed=cfg.seed * 1_000 + p)
        style = style_vector(tags_text(tags), tables.shape[-1])
        groups.append((cond, [(f, score_candidate(f, lyrics, style, tables)) for f in outs]))
    return groups


def preference_pairs(model: HierLM, cfg: ProjectConfig) -> list[PreferencePair]:
    return build_pairs(candidate_groups(model, cfg), cfg.dpo.criterion)


# -- CLAP checkpoints -----------------------------------------------------------

def save_clap(enc: DualEncoder, path) -> None:
    tensors = {k: t.detach().numpy() for k, t in enc.state_dict().items()}
    save_params(path, _CLP, {"kind": "clap", "config": asdict(enc.cfg)}, tensors)


def load_clap(path) -> DualEncoder:
    header, tensors = load_params(path, _CLP)
    if header.get("kind") != "clap":
        raise BadCheckpoint("not a CLAP checkpoint")
    enc = DualEncoder(ClapConfig(**header["config"]))
    try:
        enc.load_state_dict({k: torch.as_tensor(a, dtype=DTYPE) for k, a in tensors.items()})
    except RuntimeError as exc:
        raise BadCheckpoint(str(exc)) from exc
    return enc
