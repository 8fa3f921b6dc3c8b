"""Acceptance criteria 1-12, one reported PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py``; the lines are repeated in the
terminal summary under "acceptance criteria".
"""

import math
import time

import numpy as np
import pytest
import torch

from songlm.clap import ClapTrainCfg, DualEncoder, evaluate_clap, infonce_loss, synthetic_pairs, train_clap
from songlm.dpo import (CandidateScores, DPOConfig, PreferencePair, build_pairs, delta, dpo_loss, frozen_copy,
                        train_dpo)
from songlm.engine.decode import generate
from songlm.engine.sampling import SamplerConfig
from songlm.flow import (FlowConfig, FlowTrainCfg, VectorField, euler_sample, make_triplets, masked_mse,
                         reflow_distill, sample_mask)
from songlm.lm import HierLM, LMConfig, LossWeights, joint_logprob, token_logprobs, weighted_ce_loss
from songlm.lyrics import (CATEGORIES, CondSequence, TagProbTable, TagSet, cond_from_files, parse_finegrained,
                           parse_lyrics, sample_tags, serialize_lyrics)
from songlm.pipeline import synthetic_prompt
from songlm.rvq import CodebookSet, alignment_loss, commitment_loss, rvq_decode, rvq_encode, train_codebooks

import flow_family as ff
import test_gradcheck as gc
from conftest import read_example
from test_lyrics import canonical, random_doc


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.s = time.perf_counter() - self.t0


# 1 -----------------------------------------------------------------------------------

def test_criterion_01_cross_mode_equality(report):
    model = HierLM(LMConfig.tiny(), seed=0)
    rng = np.random.default_rng(2024)
    bad = []
    with Timer() as t:
        for case in range(20):
            if rng.random() < 0.2:
                cond = CondSequence.empty()
            else:
                cond = cond_from_files(*synthetic_prompt(rng))
            n = int(rng.integers(1, 257))
            sampler = SamplerConfig(temperature=float(rng.choice([0.0, 0.7, 1.0])), top_k=int(rng.choice([1, 5, 50])),
                                    cfg_scale=float(rng.choice([1.0, 1.5, 3.0])), cfg_local=bool(rng.random() < 0.3))
            seed = int(rng.integers(1 << 31))
            ref, _ = generate(model, cond, n, sampler, mode="recompute", seed=seed)
            outs = {m: generate(model, cond, n, sampler, mode=m, seed=seed)[0][0] for m in ("kv", "fixed_shape")}
            got = []
            generate(model, cond, n, sampler, mode="kv", seed=seed, sink=lambda i, f: got.append(f[0]))
            outs["stream"] = np.stack(got)
            bad += [(case, m) for m, o in outs.items() if not np.array_equal(o, ref[0])]
    ok = not bad and t.s < 120
    report(1, ok, f"20 cases bit-identical across recompute/kv/fixed_shape/stream, mismatches={bad}, {t.s:.1f}s")
    assert ok


# 2 -----------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_02_speedup(report):
    model = HierLM(LMConfig(), seed=0)
    cond = cond_from_files("[Verse]\nunder the moon\n", TagSet({"genre": ("pop",)}))
    with Timer() as t:
        _, rec = generate(model, cond, 512, mode="recompute")
        _, kv = generate(model, cond, 512, mode="kv")
        _, fx = generate(model, cond, 512, mode="fixed_shape")
    ratio = kv.wall_time / rec.wall_time
    ok = ratio <= 0.5 and kv.dispatch_count < rec.dispatch_count and fx.alloc_count == 0 and t.s < 300
    report(2, ok, f"512 frames: kv/recompute wall {ratio:.3f} ({kv.wall_time:.1f}s/{rec.wall_time:.1f}s), "
                  f"dispatch {kv.dispatch_count} < {rec.dispatch_count}, fixed_shape allocs {fx.alloc_count}, {t.s:.0f}s")
    assert ok


# 3 -----------------------------------------------------------------------------------

def test_criterion_03_rvq(report):
    rng = np.random.default_rng(3)
    with Timer() as t:
        train = rng.normal(size=(4000, 16))
        held = rng.normal(size=(1000, 16))
        cb = train_codebooks([train], K=8, V=64, seed=0)
        toks, _, norms = rvq_encode(held, cb)
        mono = all(b <= a + 1e-12 for a, b in zip(norms, norms[1:])) and norms[0] <= np.linalg.norm(held, axis=1).mean()
        # round trip: data built from codebook entries is recovered exactly
        idx = rng.integers(0, 64, (1000, 8))
        exact = CodebookSet(_orthogonal_books())
        y = rvq_decode(type(toks)(idx, 64), exact).data
        back, _, _ = rvq_encode(y, exact)
        roundtrip = np.array_equal(back.indices, idx) and np.allclose(rvq_decode(back, exact).data, y)
        rand = CodebookSet(rng.normal(size=(8, 64, 16)) * 0.3)
        improves = norms[-1] < rvq_encode(held, rand)[2][-1]
    ok = mono and roundtrip and improves and t.s < 60
    report(3, ok, f"residual norms non-increasing over 8 stages ({norms[0]:.3f}->{norms[-1]:.3f}), exact round trip "
                  f"{roundtrip}, trained beats random on held-out {improves}, {t.s:.1f}s")
    assert ok


def _orthogonal_books():
    """Stage k occupies its own pair of coordinates, so greedy encoding is exact."""
    books = np.zeros((8, 64, 16))
    for k in range(8):
        ang = 2 * np.pi * np.arange(64) / 64
        r = 2.0 ** -k
        books[k, :, 2 * k] = r * np.cos(ang)
        books[k, :, 2 * k + 1] = r * np.sin(ang)
    return books


# 4 -----------------------------------------------------------------------------------

def test_criterion_04_loss_oracles(report):
    sig = lambda x: 1 / (1 + math.exp(-x))
    e = np.eye(2)
    checks = {
        "commitment": (commitment_loss(np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]])).item(), 5.0),
        "align cos=1": (alignment_loss(np.array([[1.0, 0]]), np.array([[2.0, 0]])).item(), -math.log(sig(1))),
        "align cos=0": (alignment_loss(np.array([[1.0, 0]]), np.array([[0, 1.0]])).item(), math.log(2)),
        "align cos=-1": (alignment_loss(np.array([[1.0, 0]]), np.array([[-1.0, 0]])).item(), -math.log(sig(-1))),
        "ce uniform": (weighted_ce_loss(torch.zeros(3, 8, 256, dtype=torch.float64), np.zeros((3, 8), dtype=int),
                                        LossWeights.uniform(8)).item(), 2 * math.log(256)),
        "infonce N=1": (infonce_loss(torch.tensor([[1.0, 0.0]], dtype=torch.float64),
                                     torch.tensor([[0.0, 1.0]], dtype=torch.float64), 1.0).item(), 0.0),
        "infonce N=2": (infonce_loss(torch.as_tensor(e), torch.as_tensor(e), 1.0).item(), 4 * math.log(1 + math.exp(-1))),
    }
    model = HierLM(LMConfig.tiny(), seed=0)
    cond = cond_from_files("[Verse]\nla\n", TagSet({}))
    rng = np.random.default_rng(0)
    pairs = [PreferencePair(cond, rng.integers(0, 32, (4, 4)), rng.integers(0, 32, (4, 4))) for _ in range(3)]
    checks["dpo at ref"] = (dpo_loss(model, frozen_copy(model), pairs).item(), math.log(2))
    errs = {k: abs(a - b) for k, (a, b) in checks.items()}
    ok = max(errs.values()) < 1e-5
    named = ", ".join(f"{k}={checks[k][0]:.5f}" for k in checks)
    report(4, ok, f"max |err| {max(errs.values()):.1e}: {named}")
    assert ok


# 5 -----------------------------------------------------------------------------------

def test_criterion_05_factorization(report):
    cond = cond_from_files("[Verse]\nhold on\n", TagSet({"mood": ("warm",)}))
    model = HierLM(LMConfig.tiny(), seed=1)
    a = np.random.default_rng(5).integers(0, 32, (7, 4))
    with torch.no_grad():
        lp = joint_logprob(model, cond, a).item()
        picks = token_logprobs(model.forward_teacher_forced(cond, a), a).sum().item()
        small = HierLM(LMConfig.tiny(K=2, V=2, init_std=0.5), seed=2)
        total = sum(math.exp(joint_logprob(small, cond, np.array([[i, j]])).item()) for i in range(2) for j in range(2))
    ok = abs(lp - picks) < 1e-5 and abs(total - 1) < 1e-6
    report(5, ok, f"joint vs picks |diff| {abs(lp - picks):.1e}; L=1,K=2,V=2 mass {total:.12f}")
    assert ok


# 6 -----------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_06_flow_matching(report, det_teacher):
    with Timer() as t:
        rng = np.random.default_rng(6)
        # constant field: Euler is exact for any number of steps
        z0, z1 = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
        const = lambda z, tt, c, p, m: torch.as_tensor(z1 - z0)
        const_err = max(np.abs(euler_sample(const, np.zeros((8, 1)), (np.ones(8), np.zeros((8, 3))), s, z0=z0).numpy()
                               - z1).max() for s in (1, 2, 7, 50))

        # trained toy model on a deterministic family, span masks
        test = ff.family(32, np.random.default_rng(9))
        mrng = np.random.default_rng(10)
        masks = [sample_mask(ff.T, mrng) for _ in test]
        z0s = [mrng.standard_normal((ff.T, ff.D)) for _ in test]
        outs = ff.run(det_teacher, 50, test, z0s, masks)
        mse = float(np.mean([masked_mse(torch.as_tensor(o), torch.as_tensor(z), m).item()
                             for o, (c, z), m in zip(outs, test, masks)]))
        passthrough = all(np.array_equal(o[m == 0], z[m == 0]) for o, (c, z), m in zip(outs, test, masks))

        # reflow: student at 10 steps vs teacher at 50 steps
        teacher, data = ff.train_teacher(1.0)
        held = ff.family(16, np.random.default_rng(9), 1.0)
        erng = np.random.default_rng(5)
        hz0 = [erng.standard_normal((ff.T, ff.D)) for _ in held]
        t50, t500 = ff.run(teacher, 50, held, hz0), ff.run(teacher, 500, held, hz0)
        self_gap = ff.gap(t50, t500)
        trip = make_triplets(teacher, [data[i % len(data)] for i in range(1024)], 50, seed=1, full_mask=True)
        student = reflow_distill(teacher, trip, FlowTrainCfg(steps=2000, batch=32, lr=1e-3))
        s10 = ff.run(student, 10, held, hz0)
        ratio = ff.gap(s10, t50) / self_gap
        t10_ratio = ff.gap(ff.run(teacher, 10, held, hz0), t50) / self_gap
    ok = const_err < 1e-12 and mse < 1e-2 and passthrough and ratio <= 5 and t.s < 600
    report(6, ok, f"const-field err {const_err:.1e}, masked MSE {mse:.4f}, pass-through {passthrough}, "
                  f"student@10 vs teacher@50 = {ratio:.2f}x self-gap {self_gap:.4f} (teacher@10: {t10_ratio:.2f}x), {t.s:.0f}s")
    assert ok


# 7 -----------------------------------------------------------------------------------

def test_criterion_07_dpo_descent(report):
    with Timer() as t:
        cfg = LMConfig.tiny()
        policy = HierLM(cfg, seed=0)
        ref = frozen_copy(policy)
        rng = np.random.default_rng(0)
        pairs = [PreferencePair(cond_from_files(f"[Verse]\nline {i}\n", TagSet({"genre": ("pop",)})),
                                rng.integers(0, cfg.V, (6, cfg.K)), rng.integers(0, cfg.V, (6, cfg.K)))
                 for i in range(8)]
        log = train_dpo(policy, ref, pairs, DPOConfig(), steps=50, lr=1e-3)
        deltas = [r["mean_delta"] for r in log.records if "step" in r]
        with torch.no_grad():
            deltas.append(torch.stack([delta(policy, ref, p) for p in pairs]).mean().item())
            loss = dpo_loss(policy, ref, pairs).item()
            win = [(joint_logprob(policy, p.cond, p.winner) - joint_logprob(ref, p.cond, p.winner)).item() for p in pairs]
    increasing = all(b > a for a, b in zip(deltas, deltas[1:]))
    ok = increasing and loss < 0.6 and min(win) > 0 and t.s < 120
    report(7, ok, f"mean delta strictly increasing {increasing} ({deltas[0]:.2f}->{deltas[-1]:.2f}), loss {loss:.4f}, "
                  f"min winner log-ratio {min(win):.3f}, {t.s:.1f}s")
    assert ok


# 8 -----------------------------------------------------------------------------------

def _q(se, ab):
    return CandidateScores(songeval=se, audiobox_avg=ab)


# (criterion, candidate scores, expected (winner, loser) or None)
PAIR_TABLE = [
    ("sim", [0.5, 0.35], (0, 1)),
    ("sim", [0.29, 0.10], None),
    ("sim", [0.31, 0.18], (0, 1)),
    ("sim", [0.30, 0.10], None),
    ("sim", [0.6, 0.5, 0.49], None),
    ("sim", [0.2, 0.9, -0.4, 0.1], (1, 2)),
    ("sim", [0.5, 0.5], None),
    ("sim", [-0.2, -0.5], None),
    ("sim", [0.95, 0.7, 0.82, 0.1], (0, 3)),
    ("sim", [0.4, 0.4, 0.4, 0.4], None),
    ("per", [0.05, 0.25], (0, 1)),
    ("per", [0.25, 0.05], (1, 0)),
    ("per", [0.30, 0.35], None),
    ("per", [0.0, 0.5, 0.2, 0.4], (0, 1)),
    ("per", [0.15, 0.2, 0.22], None),
    ("per", [1.2, 0.9], (1, 0)),
    ("per", [0.1, 0.1], None),
    ("per", [0.0, 0.0, 0.3], (0, 2)),
    ("per", [0.42, 0.5, 0.45], None),
    ("per", [2.0, 0.0, 1.0, 3.0], (1, 3)),
    ("quality", [(4, 7), (3, 6), (2, 5)], (0, 2)),
    ("quality", [(4, 7), (3.7, 5)], None),
    ("quality", [(4, 7), (3, 6.5)], None),
    ("quality", [(4, 5), (2, 7)], None),
    ("quality", [(3.6, 7.9), (3.0, 7.0)], (0, 1)),
    ("quality", [(3, 6), (5, 8), (4, 7)], (1, 0)),
    ("quality", [(5, 8), (1, 1), (5, 1)], (0, 1)),
    ("quality", [(5, 5), (5, 5)], None),
    ("quality", [(4, 8), (2, 6), (1, 7)], None),
    ("quality", [(4.5, 8.5), (4.0, 7.5)], None),
]


def test_criterion_08_pair_margins(report):
    cond = CondSequence.empty()
    wrong = []
    with Timer() as t:
        for row, (crit, vals, want) in enumerate(PAIR_TABLE):
            if crit == "sim":
                scores = [CandidateScores(sim=v) for v in vals]
            elif crit == "per":
                scores = [CandidateScores(per=v) for v in vals]
            else:
                scores = [_q(*v) for v in vals]
            cands = [(np.full((2, 4), i), s) for i, s in enumerate(scores)]
            out = build_pairs([(cond, cands)], crit)
            got = None if not out else (int(out[0].winner[0, 0]), int(out[0].loser[0, 0]))
            if got != want:
                wrong.append(row)
    ok = not wrong and len(PAIR_TABLE) == 30 and t.s < 1
    kept = sum(w is not None for _, _, w in PAIR_TABLE)
    report(8, ok, f"30 groups ({kept} kept, {30 - kept} rejected) match expectations, wrong rows={wrong}, {t.s * 1e3:.0f}ms")
    assert ok


# 9 -----------------------------------------------------------------------------------

SELECTION_PROBS = {"genre": 0.95, "singer_timbre": 0.5, "gender": 0.375, "mood": 0.325, "instrument": 0.25,
          "scene": 0.2, "region": 0.125, "topic": 0.1}


def test_criterion_09_tag_sampling(report):
    tags = TagSet({c: (f"{c}-tag",) for c in CATEGORIES})
    rng = np.random.default_rng(9)
    n = 100_000
    counts = dict.fromkeys(CATEGORIES, 0)
    with Timer() as t:
        table = TagProbTable()
        for _ in range(n):
            for c, v in sample_tags(tags, table, rng).entries.items():
                counts[c] += bool(v)
    rates = {c: counts[c] / n for c in CATEGORIES}
    err = max(abs(rates[c] - SELECTION_PROBS[c]) for c in CATEGORIES)
    ok = err <= 0.01 and t.s < 10
    report(9, ok, "keep-rates " + ", ".join(f"{c}={rates[c]:.3f}" for c in SELECTION_PROBS) + f"; max |err| {err:.4f}, {t.s:.1f}s")
    assert ok


# 10 ----------------------------------------------------------------------------------

def test_criterion_10_parser(report):
    with Timer() as t:
        s = parse_lyrics(read_example("structure_example.txt"))
        f = parse_finegrained(read_example("finegrained_example.txt"))
        boxes = (len(s.sections) == 6 and len(s.sections[-1].lines) == 2 and len(f.sections) == 6
                 and all(x.annotation is not None for x in f.sections)
                 and len(f.sections[0].annotation.phrases) == 4)
        rng = np.random.default_rng(10)
        bad = 0
        for i in range(500):
            fg = bool(i % 2)
            parse = parse_finegrained if fg else parse_lyrics
            text = random_doc(rng, fg)
            doc = parse(text)
            out = serialize_lyrics(doc)
            bad += not (out == canonical(text, fg) and parse(out) == doc and serialize_lyrics(parse(out)) == out)
    ok = boxes and bad == 0 and t.s < 10
    report(10, ok, f"example texts: {len(s.sections)} sections / {len(f.sections)} annotated sections ({boxes}); "
                   f"500 generated documents, {bad} round-trip failures, {t.s:.1f}s")
    assert ok


# 11 ----------------------------------------------------------------------------------

def test_criterion_11_gradients(report):
    cond = cond_from_files("[Verse]\nhello there\n", TagSet({"genre": ("pop",)}))
    checks = {
        "commitment": gc.test_commitment_grad_wrt_quantized,
        "commitment sg": gc.test_commitment_stops_gradient_to_target,
        "alignment": gc.test_alignment_grad,
        "weighted CE": gc.test_weighted_ce_grad,
        "weighted CE (model)": lambda: gc.test_weighted_ce_grad_through_model(cond),
        "flow matching": gc.test_fm_loss_grad,
        "DPO": lambda: gc.test_dpo_loss_grad(cond),
        "InfoNCE": gc.test_infonce_grad,
        "decoder fine-tune (hann)": lambda: gc.test_decoder_finetune_grad("hann"),
        "decoder fine-tune (rect)": lambda: gc.test_decoder_finetune_grad("rect"),
    }
    failed = []
    with Timer() as t:
        for name, fn in checks.items():
            try:
                fn()
            except AssertionError:
                failed.append(name)
    ok = not failed and t.s < 120
    report(11, ok, f"{len(checks) - len(failed)}/{len(checks)} finite-difference checks within 1e-3, "
                   f"failed={failed}, {t.s:.1f}s")
    assert ok


# 12 ----------------------------------------------------------------------------------

def test_criterion_12_clap(report):
    with Timer() as t:
        pairs = synthetic_pairs(64, seed=0)
        enc = DualEncoder(seed=0)
        train_clap(enc, pairs, ClapTrainCfg(steps=200))
        rep, _, _ = evaluate_clap(enc, pairs)
        held, _, _ = evaluate_clap(enc, synthetic_pairs(64, seed=1))
    r1 = rep["text_to_music"]["R@1"]
    ok = r1 > 0.5 and t.s < 180
    report(12, ok, f"text->music R@1 {r1:.3f} (chance {1 / 64:.3f}; fresh draw of the same families "
                   f"{held['text_to_music']['R@1']:.3f}), {t.s:.1f}s")
    assert ok
