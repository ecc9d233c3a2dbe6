"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are echoed again in the terminal summary (see conftest). The
synthetic experiments are shared session fixtures: easy (about 15 s),
mixed ensemble plus routing (about 3 min) and hard (about 40 s) on one CPU thread.
"""

import itertools
import math
import os
import time

import numpy as np
import pytest
import torch

from atprobe.analysis import oracle_bound_exhaustive
from atprobe.embedstore import QAInstance, Split, VideoRecord, load_dataset, synth_easy
from atprobe.experiments import ExperimentSettings, easy_experiment, hard_experiment, mixed_experiment
from atprobe.selector import ATPConfig, ATPSelector, gumbel_st, select_embedding, selector_forward
from atprobe.tasks import info_nce, qa_cross_entropy
from atprobe.trainer import TrainSchedule, collate_qa, evaluate, grad_check, train_atp
from conftest import ACCEPTANCE_LINES


def _record(n, ok: bool, detail: str):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="session")
def settings():
    return ExperimentSettings()


@pytest.fixture(scope="session")
def easy(settings):
    return easy_experiment(settings)


@pytest.fixture(scope="session")
def mixed(settings):
    return mixed_experiment(settings)


@pytest.fixture(scope="session")
def hard(mixed, settings):
    return hard_experiment(mixed["ensemble"][0], settings)


def test_criterion_01_permutation_suite():
    t0 = time.perf_counter()
    model = ATPSelector(64, ATPConfig(seed=0)).eval()
    rng = np.random.default_rng(0)
    worst, same = 0.0, True
    for _ in range(100):
        frames = rng.standard_normal((16, 64)).astype(np.float32)
        q = rng.standard_normal((1, 64)).astype(np.float32)
        base = selector_forward(frames, q, model).detach()
        assert torch.unique(base).numel() == 16  # distinct logits
        perm = rng.permutation(16)
        out = selector_forward(frames[perm], q, model).detach()
        worst = max(worst, float((out - base[perm]).abs().max()))
        a = select_embedding(torch.as_tensor(frames), base).selected_embedding
        b = select_embedding(torch.as_tensor(frames[perm]), out).selected_embedding
        same &= a.numpy().tobytes() == b.numpy().tobytes()
    dt = time.perf_counter() - t0
    _record(1, worst < 1e-5 and same and dt < 10,
            f"max |dlogit| = {worst:.2e} (< 1e-5), selection identical = {same}, {dt:.2f} s (< 10 s)")


def test_criterion_02_straight_through_gumbel():
    rng = np.random.default_rng(0)
    w = gumbel_st(torch.randn(10_000, 6, generator=torch.Generator().manual_seed(0)), 0.5, rng)
    one_hot = bool(torch.all((w == 0) | (w == 1)) and torch.all(w.sum(1) == 1))
    # forward draws follow softmax(g); at tau = 1 this is softmax(g / tau)
    g = torch.tensor([1.0, 0.5, 0.0, -0.5, -1.0], dtype=torch.float64)
    tau = 1.0
    freq = gumbel_st(g.expand(100_000, 5), tau, np.random.default_rng(1)).mean(0)
    tv = 0.5 * float((freq - (g / tau).softmax(0)).abs().sum())
    exact = True
    for _ in range(100):
        logits = torch.tensor(rng.standard_normal(7), requires_grad=True)
        v = torch.as_tensor(rng.standard_normal(7))
        noise = torch.as_tensor(-np.log(-np.log(rng.random(7))))
        t = float(rng.uniform(0.3, 3.0))
        (gumbel_st(logits, t, gumbel=noise) @ v).backward()
        st_grad = logits.grad.clone()
        logits.grad = None
        (((logits + noise) / t).softmax(-1) @ v).backward()
        exact &= torch.equal(st_grad, logits.grad)
    _record(2, one_hot and tv <= 0.02 and exact,
            f"one-hot on 10k = {one_hot}, TV at 100k (tau = 1) = {tv:.4f} (<= 0.02), ST grad bit-exact = {exact}")


def test_criterion_03_gradient_check():
    cfg = ATPConfig(n_frames=6, d_model=16, n_layers=1, n_heads=1, ff_hidden=16, mlp_hidden=16, seed=0)
    with pytest.warns(UserWarning):
        model = ATPSelector(16, cfg).double()
    split = synth_easy(8, 6, 5, 16, rng_seed=0)
    batch = collate_qa(split, list(range(8)), 6, np.random.default_rng(0), "question", dtype=torch.float64)
    res = grad_check(model, batch, epsilon=1e-6, num_params=200)
    _record(3, res["checked"] == 200 and res["max_rel_error"] < 1e-3,
            f"{res['checked']} parameters, max relative error = {res['max_rel_error']:.2e} (< 1e-3)")


def test_criterion_04_loss_identities():
    ce = float(qa_cross_entropy(torch.zeros(5, dtype=torch.float64), 0))
    nce = float(info_nce(torch.zeros(8, 8, dtype=torch.float64)))
    sat = float(info_nce(100 * torch.eye(8, dtype=torch.float64)))
    ok = abs(ce - math.log(5)) <= 1e-9 and abs(nce - math.log(8)) <= 1e-9 and sat < 1e-6
    _record(4, ok, f"|CE - ln 5| = {abs(ce - math.log(5)):.1e}, |InfoNCE - ln 8| = {abs(nce - math.log(8)):.1e}, "
                   f"saturated = {sat:.1e}")


def test_criterion_05a_easy_trained(easy):
    _record("5a", easy["trained_accuracy"] >= 0.95 and easy["seconds"] < 600,
            f"trained val accuracy = {easy['trained_accuracy']:.3f} (>= 0.95), run {easy['seconds']:.0f} s")


def test_criterion_05b_easy_untrained(easy):
    acc = easy["untrained_accuracy"]
    _record("5b", abs(acc - 0.20) <= 0.03,
            f"untrained val accuracy = {acc:.3f} (target 0.20 +/- 0.03; a uniform pick lands on the "
            f"informative frame 1/16 of the time, so chance is {easy['expected_untrained_accuracy']:.3f})")


def test_criterion_05c_easy_oracle_ordering(easy):
    o, learned, rnd = easy["oracle_bound"], easy["trained_accuracy"], easy["random_frame_accuracy"]
    _record("5c", o >= 0.99 and o >= learned >= rnd and easy["final_loss"] < easy["initial_loss"],
            f"oracle = {o:.3f} (>= 0.99) >= learned = {learned:.3f} >= random frame = {rnd:.3f}; "
            f"loss {easy['initial_loss']:.3f} -> {easy['final_loss']:.3f}")


def test_criterion_06_hard(hard):
    a, t = hard["atp_accuracy"], hard["temporal_accuracy"]
    _record(6, a <= 0.60 and t >= 0.90 and t - a >= 0.30 and hard["frozen_atp_unchanged"],
            f"ATP = {a:.3f} (<= 0.60), Temp[ATP] = {t:.3f} (>= 0.90), gap = {100 * (t - a):.1f} pt (>= 30), "
            f"frozen selector unchanged = {hard['frozen_atp_unchanged']}")


def _tiny_split(rng, n_inst):
    s = Split("t")
    for i in range(n_inst):
        T = int(rng.integers(1, 7))
        s.videos[f"v{i}"] = VideoRecord(f"v{i}", rng.standard_normal((T, 8)).astype(np.float32))
        s.instances.append(QAInstance(f"i{i}", f"v{i}", rng.standard_normal(8).astype(np.float32),
                                      rng.standard_normal((4, 8)).astype(np.float32), int(rng.integers(4))))
    return s


def test_criterion_07_oracle_monotonicity():
    rng = np.random.default_rng(0)
    ok, sets = True, 0
    for _ in range(200):
        split = _tiny_split(rng, int(rng.integers(1, 20)))
        curve = []
        for n in range(1, 7):
            vals = []
            for inst in split.instances:
                f = split.video_of(inst).frames.astype(np.float64)
                good = np.argmax(f @ inst.candidates.astype(np.float64).T, axis=1) == inst.gt_index
                subs = list(itertools.combinations(range(len(f)), min(n, len(f))))
                vals.append(np.mean([good[list(c)].any() for c in subs]))
            curve.append(float(np.mean(vals)))
            ok &= abs(curve[-1] - oracle_bound_exhaustive(split, n)) < 1e-12
        ok &= all(b >= a - 1e-12 for a, b in zip(curve, curve[1:]))
        sets += 1
    _record(7, ok, f"{sets} instance sets, |V| <= 6, every subset enumerated: non-decreasing in n = {ok}")


def test_criterion_08_hard_subset_mining(mixed):
    h = mixed["hard_subset"]
    gain = h["precision"] - h["base_rate"]
    _record(8, h["recall"] >= 0.90 and gain >= 0.25,
            f"recall = {h['recall']:.3f} (>= 0.90), precision = {h['precision']:.3f} vs base rate "
            f"{h['base_rate']:.3f} (gain {gain:.3f} >= 0.25), rules fitted on training folds only")


def test_criterion_09_routing(mixed):
    r = mixed["routing"]
    best = max(r["atp_only_accuracy"], r["temporal_only_accuracy"])
    _record(9, r["accuracy"] >= best - 0.005 and r["atp_skip_fraction"] >= 0.3,
            f"routed = {r['accuracy']:.3f} vs max(ATP {r['atp_only_accuracy']:.3f}, Temp[ATP] "
            f"{r['temporal_only_accuracy']:.3f}) - 0.005; skip fraction = {r['atp_skip_fraction']:.3f} (>= 0.3)")


REAL = os.environ.get("ATP_REAL_QA_ROOT")
if REAL is None:
    ACCEPTANCE_LINES.append("criterion 10: SKIP  optional real-data check (set ATP_REAL_QA_ROOT)")


@pytest.mark.skipif(REAL is None, reason="optional: set ATP_REAL_QA_ROOT to an ingested NExT-QA embedding set")
def test_criterion_10_real_data_optional():
    ds = load_dataset(REAL)
    train = ds["train"]
    state = train_atp(train, ATPConfig(), TrainSchedule.for_epochs(len(train), 20))
    acc = 100 * evaluate(ds["val"], state.model)["accuracy"]
    _record(10, abs(acc - 49.2) <= 1.5, f"ATP accuracy = {acc:.1f} (49.2 +/- 1.5)")
