import os
from pathlib import Path

import numpy as np
import pytest
import torch

from songlm.lm import HierLM, LMConfig
from songlm.lyrics import TagSet, cond_from_files

DATA = Path(__file__).parent / "data"

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("SONGLM_CACHE_DIR", str(tmp_path / "cache"))


@pytest.fixture
def tiny_cfg():
    return LMConfig.tiny()


@pytest.fixture
def tiny_model(tiny_cfg):
    return HierLM(tiny_cfg, seed=0)


@pytest.fixture
def cond():
    return cond_from_files("[Verse]\nhello there\n[Chorus]\nla la\n", TagSet({"genre": ("pop",), "mood": ("soft",)}))


def random_frames(cfg, L, seed=0):
    return np.random.default_rng(seed).integers(0, cfg.V, (L, cfg.K))


def read_example(name: str) -> str:
    return (DATA / name).read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def det_teacher():
    """Flow teacher trained on the deterministic (cond -> latent) family; shared across files."""
    from flow_family import train_teacher
    return train_teacher(0.0)[0]


# -- acceptance reporting ----------------------------------------------------------

_CRITERIA: list[str] = []


@pytest.fixture
def report():
    """``report(n, ok, detail)`` records one acceptance line and prints it."""
    def _report(n: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        _CRITERIA.append(line)
        print(line)
    return _report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
