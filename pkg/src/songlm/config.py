"""Project configuration and run manifests."""

from __future__ import annotations

import hashlib
import json
import time
import uuid
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

from . import __version__
from .binfmt import sha256_file


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RVQSection(_Section):
    dim: int = 64
    K: int = 8
    V: int = 256
    align_steps: int = 30
    joint_steps: int = 10
    lr: float = 3e-3
    lambda_commit: float = 1.0
    lambda_sem: float = 0.1
    lambda_pho: float = 0.1
    n_signals: int = 16
    duration: float = 3.0


class FlowSection(_Section):
    D: int = 16
    hidden: int = 128
    n_blocks: int = 3
    train_steps: int = 600
    batch: int = 16
    window: int = 32
    lr: float = 2e-3
    cond_drop: float = 0.1
    sample_steps: int = 10
    cfg_scale: float = 1.0
    max_spectral_error: float = 0.9
    max_latent_error: float = 0.3


class LMSection(_Section):
    preset: Literal["tiny", "default"] = "tiny"
    steps: int = 50
    lr: float = 3e-3
    batch: int = 4
    cond_dropout: float = 0.02
    corpus_size: int = 16
    frames: int = 24


class DPOSection(_Section):
    beta: float = 0.1
    steps: int = 50
    lr: float = 1e-3
    batch: int = 8
    criterion: Literal["sim", "per", "quality"] = "per"
    prompts: int = 32
    candidates: int = 16
    frames: int = 16


class InferSection(_Section):
    temperature: float = Field(1.0, ge=0)
    top_k: int = Field(50, ge=1)
    cfg_scale: float = 1.5
    cfg_local: bool = False
    mode: Literal["recompute", "kv", "fixed_shape"] = "kv"
    frames: int = 64


class ClapSection(_Section):
    proj_dim: int = 32
    feat_dim: int = 64
    steps: int = 200
    lr: float = 1e-2
    batch: int = 64
    p_a: float = Field(0.2, ge=0, le=1)
    p_t: float = Field(0.2, ge=0, le=1)
    n_pairs: int = 64


class Paths(_Section):
    out_dir: str = "runs"
    cache_dir: str | None = None


class ProjectConfig(_Section):
    seed: int = 0
    rvq: RVQSection = RVQSection()
    flow: FlowSection = FlowSection()
    lm: LMSection = LMSection()
    dpo: DPOSection = DPOSection()
    infer: InferSection = InferSection()
    clap: ClapSection = ClapSection()
    paths: Paths = Paths()

    @classmethod
    def load(cls, path: str | Path | None) -> "ProjectConfig":
        if path is None:
            return cls()
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


class RunManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    run_id: str
    command: str
    config_hash: str
    config: dict
    input_hashes: dict[str, str]
    outputs: list[str]
    wall_clock_s: float
    tool_version: str
    extra: dict = {}

    def write(self, path: str | Path) -> Path:
        p = Path(path)
        p.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return p


class ManifestBuilder:
    """Collects inputs and outputs over one command, then writes ``<first output>.manifest.json``."""

    def __init__(self, command: str, cfg: ProjectConfig):
        self.command = command
        self.cfg = cfg
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.extra: dict = {}
        self._t0 = time.perf_counter()

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path) -> None:
        self.outputs.append(str(path))

    def finish(self, where: str | Path | None = None) -> RunManifest:
        m = RunManifest(
            run_id=uuid.uuid4().hex,
            command=self.command,
            config_hash=self.cfg.digest(),
            config=self.cfg.model_dump(mode="json"),
            input_hashes=self.inputs,
            outputs=self.outputs,
            wall_clock_s=time.perf_counter() - self._t0,
            tool_version=__version__,
            extra=self.extra,
        )
        target = Path(where) if where is not None else Path(self.outputs[0] + ".manifest.json")
        m.write(target)
        return m
