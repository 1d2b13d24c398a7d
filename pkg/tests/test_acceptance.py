"""Acceptance criteria 1-10, one test each.

Each test prints a single ``criterion N: PASS|FAIL`` line; the lines are
repeated in the pytest terminal summary. Run alone with
``python3 -m pytest tests/test_acceptance.py -v``.
"""
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from egofusion import tensor as T
from egofusion.audio import (
    AudioClip,
    Spectrogram,
    SpectrogramConfig,
    compute_spectrogram,
    frame_count,
    log_power_spectrogram,
    mixdown,
    normalize,
)
from egofusion.dataops import AnnotationRecord, homemade_partition, unseen_participant_partition
from egofusion.evalkit import (
    accuracy_difference,
    confusion_matrix,
    per_class_precision_recall,
    random_baseline,
    topk_accuracy,
)
from egofusion.fusion import FcFusionHead, StreamScores, concat_penultimate, grid_search_weights, \
    train_fc_fusion, weighted_sum_fuse
from egofusion.gradcheck import grad_check, grad_check_network
from egofusion.nets import (
    DilatedNet,
    DilatedNetConfig,
    SpectrogramInputs,
    DILATED_CONVS,
    TrainHyper,
    TsnModel,
    VisualBackbone,
    VisualBackboneConfig,
    predict,
)
from egofusion.pipeline import ExperimentConfig, run_experiment
from egofusion.tensor import Tensor, parameters_checksum


def report(log, number, checks, elapsed, budget_s=None, detail=""):
    """Record and print one criterion line, then assert on it."""
    failed = [name for name, ok in checks.items() if not ok]
    if budget_s is not None and elapsed >= budget_s:
        failed.append(f"time {elapsed:.1f}s >= {budget_s}s")
    status = "PASS" if not failed else "FAIL"
    timing = f"{elapsed:.2f}s" + (f" of {budget_s}s" if budget_s is not None else "")
    line = f"criterion {number}: {status} [{timing}] {detail}".rstrip()
    if failed:
        line += " | failed: " + "; ".join(failed)
    log.append(line)
    print(line)
    assert not failed, line


# --------------------------------------------------------------------------- 1


def test_criterion_01_spectrogram_shape(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    t = np.arange(64000) / 16000
    inputs = {
        "noise": rng.standard_normal(64000),
        "silence": np.zeros(64000),
        "tone": np.sin(2 * np.pi * 440 * t),
        "impulses": (rng.uniform(size=64000) > 0.999).astype(float),
        "uniform": rng.uniform(-1, 1, 64000),
    }
    cfg = SpectrogramConfig.paper_shape()
    checks = {}
    for name, x in inputs.items():
        clip = AudioClip(x, 16000)
        checks[f"{name} raw"] = log_power_spectrogram(clip, cfg).shape == (331, 248)
        checks[f"{name} pipeline"] = compute_spectrogram(clip, cfg).shape == (331, 248)
    checks["expected_shape"] = cfg.expected_shape() == (331, 248)
    report(acceptance_log, 1, checks, time.perf_counter() - t0, 1.0, "5 inputs, all 331x248")


# --------------------------------------------------------------------------- 2

FULL_SIZE_TRACE = [
    ("conv1", (64, 331, 248)),
    ("maxpool", (64, 166, 124)),
    ("conv2", (64, 166, 124)),
    ("conv3", (32, 166, 124)),
    ("conv4", (16, 166, 124)),
    ("maxpool", (16, 83, 62)),
    ("flatten", (82336,)),
    ("dense1", (256,)),
    ("dense2", (256,)),
]


def test_criterion_02_full_size_shape_trace(acceptance_log):
    t0 = time.perf_counter()
    net = DilatedNet(DilatedNetConfig(num_classes=10))
    trace = net.shape_trace()
    elapsed = time.perf_counter() - t0
    checks = {f"{name} {shape}": got == (name, shape) for (name, shape), got in zip(FULL_SIZE_TRACE, trace)}
    checks["layer count"] = len(trace) == len(FULL_SIZE_TRACE) + 1
    checks["classifier"] = trace[-1] == ("classifier", (10,))
    report(acceptance_log, 2, checks, elapsed, 1.0, "331x248 -> 166x124 -> 83x62 -> 82336 -> 256 -> 256")


# --------------------------------------------------------------------------- 3


def _ce_of(out, labels):
    return T.cross_entropy(T.reshape(out, (out.shape[0], -1)), labels)


def _layer_checks(rng):
    """(name, loss_fn, tensors) triples, one per layer kind, all float64."""
    cases = []
    for _, kernel, dilation in DILATED_CONVS[:2]:
        # the crop is just large enough for a non-empty "valid" output
        x = Tensor(rng.standard_normal((1, 2, 96, 30)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, *kernel)) * 0.2, requires_grad=True)
        b = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
        y = rng.integers(0, 3 * 6 * 6, 1)
        for padding in ("same", "valid"):
            cases.append((f"conv {kernel}/{dilation} {padding}",
                          lambda x=x, w=w, b=b, y=y, d=dilation, p=padding: _ce_of(T.conv2d_dilated(x, w, b, d, p), y),
                          [("x", x), ("w", w), ("b", b)]))
    xp = Tensor(rng.standard_normal((2, 3, 7, 9)), requires_grad=True)
    yp = rng.integers(0, 3 * 4 * 5, 2)
    cases.append(("maxpool2x2 ceil", lambda: _ce_of(T.maxpool2x2_ceil(xp), yp), [("x", xp)]))
    xd = Tensor(rng.standard_normal((3, 2, 4)), requires_grad=True)
    wd = Tensor(rng.standard_normal((5, 8)) * 0.3, requires_grad=True)
    bd = Tensor(rng.standard_normal(5) * 0.1, requires_grad=True)
    yd = rng.integers(0, 5, 3)
    cases.append(("dense", lambda: T.cross_entropy(T.dense(xd, wd, bd), yd), [("x", xd), ("w", wd), ("b", bd)]))
    xr = rng.standard_normal((3, 6))
    xr = Tensor(np.where(np.abs(xr) < 0.05, 0.1, xr), requires_grad=True)
    yr = rng.integers(0, 6, 3)
    cases.append(("relu", lambda: T.cross_entropy(T.relu(xr), yr), [("x", xr)]))
    xs = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    ys = rng.integers(0, 5, 4)
    cases.append(("softmax + nll", lambda: T.nll_of_probs(T.softmax(xs, axis=1), ys), [("x", xs)]))
    cases.append(("cross entropy", lambda: T.cross_entropy(xs, ys), [("x", xs)]))
    xm = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    ym = rng.integers(0, 4, 2)
    cases.append(("mean", lambda: T.cross_entropy(T.mean(xm, axis=1), ym), [("x", xm)]))
    return cases


def _jitter_biases(net, rng):
    # zero biases park relus on their kink, where central differences are biased
    for name, p in net.named_parameters():
        if name.endswith("bias"):
            p.values[...] = rng.uniform(0.05, 0.2, p.shape)


def test_criterion_03_gradient_suite(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    checks, worst = {}, 0.0
    for name, loss_fn, tensors in _layer_checks(rng):
        rep = grad_check(loss_fn, tensors, tolerance=1e-4, samples_per_tensor=20)
        checks[name] = rep.passed
        worst = max(worst, rep.max_rel_error)
    # assembled network: full-size kernels and dilations on a cropped 40x28 input
    net = DilatedNet(DilatedNetConfig.scaled(3, (3, 3, 2, 2), input_shape=(40, 28), dense=(8, 8)), seed=0)
    net.astype(np.float64)
    _jitter_biases(net, rng)
    rep = grad_check_network(net, rng.standard_normal((2, 1, 40, 28)), 1, tolerance=1e-4, samples_per_tensor=15)
    checks["dilated net (all parameters + input)"] = rep.passed
    worst = max(worst, rep.max_rel_error)
    tsn = TsnModel(VisualBackbone(VisualBackboneConfig(3, 3, 16, (2, 2, 2, 2), 8), seed=0), k=3)
    tsn.astype(np.float64)
    _jitter_biases(tsn, rng)
    frames = Tensor(rng.standard_normal((1, 3, 3, 16, 16)), requires_grad=True)
    rep = grad_check(lambda: tsn.loss(frames, np.array([2])), list(tsn.named_parameters()) + [("frames", frames)],
                     tolerance=1e-4, samples_per_tensor=10)
    checks["tsn consensus model"] = rep.passed
    worst = max(worst, rep.max_rel_error)
    report(acceptance_log, 3, checks, time.perf_counter() - t0, 120.0,
           f"{len(checks)} checks, worst relative error {worst:.2e} (< 1e-4)")


# --------------------------------------------------------------------------- 4


def test_criterion_04_receptive_field(acceptance_log):
    t0 = time.perf_counter()
    kernel, dilation = DILATED_CONVS[0][1], DILATED_CONVS[0][2]
    x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 200, 60)), requires_grad=True)
    w = Tensor(np.random.default_rng(1).uniform(0.5, 1.0, (1, 1, *kernel)))
    out = T.conv2d_dilated(x, w, None, dilation, "same")
    seed = np.zeros(out.shape)
    seed[0, 0, 100, 30] = 1.0
    out.backward(seed)
    rows, cols = np.nonzero(x.grad[0, 0])
    height, width = rows.max() - rows.min() + 1, cols.max() - cols.min() + 1
    checks = {"height 91": height == 91, "width 25": width == 25, "77 taps": len(rows) == 77}
    report(acceptance_log, 4, checks, time.perf_counter() - t0, None, f"footprint {height}x{width}")


# --------------------------------------------------------------------------- 5


def _sliding_count(n, w, h):
    count, start = 0, 0
    while start + w <= n:
        count, start = count + 1, start + h
    return count


def test_criterion_05_dsp_oracles(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    cases = []
    for _ in range(100):
        w = int(rng.integers(1, 700))
        n, h = int(rng.integers(w, 70000)), int(rng.integers(1, w + 1))
        cases.append(frame_count(n, w, h) == _sliding_count(n, w, h))
    t = np.arange(64000) / 16000
    spec = log_power_spectrogram(AudioClip(np.sin(2 * np.pi * 4000 * t), 16000), SpectrogramConfig.paper_shape())
    bins = spec.data.argmax(axis=0)
    mix_ok = True
    for channels in (2, 3, 4):
        x = rng.uniform(-1, 1, (channels, 500))
        got = mixdown(AudioClip(x, 16000)).samples[0]
        oracle = [sum(x[c, i] for c in range(channels)) / channels for i in range(500)]
        mix_ok &= bool(np.all(np.abs(got - oracle) <= 2 * np.finfo(float).eps))
    norm_ok = True
    for _ in range(20):
        x = rng.standard_normal((12, 9)) * rng.uniform(0.1, 10) + rng.uniform(-5, 5)
        vals = x.ravel().tolist()
        mu = sum(vals) / len(vals)
        sd = (sum((v - mu) ** 2 for v in vals) / len(vals)) ** 0.5
        oracle = (x - mu) / sd
        norm_ok &= bool(np.allclose(normalize(Spectrogram(x)).data, oracle, rtol=0, atol=1e-12))
    norm_ok &= bool(np.all(normalize(Spectrogram(np.full((4, 4), 2.5))).data == 0))
    checks = {
        "frame count 100/100": all(cases),
        "4 kHz tone at bin 165": bool(np.all(bins == 165)),
        "mixdown oracle": mix_ok,
        "normalize oracle": norm_ok,
    }
    report(acceptance_log, 5, checks, time.perf_counter() - t0, 30.0,
           f"frame count {sum(cases)}/100, tone bins {sorted(set(bins.tolist()))}")


# --------------------------------------------------------------------------- 6


def _random_annotations(rng):
    n_cats = int(rng.integers(5, 40))
    n = int(rng.integers(300, 1000))
    sizes = rng.multinomial(n - n_cats, rng.dirichlet(np.ones(n_cats))) + 1
    records, i = [], 0
    for cat, size in enumerate(sizes):
        verb, noun = cat % 125, cat // 125
        for _ in range(size):
            p = f"P{int(rng.integers(1, 32)):02d}"
            records.append(AnnotationRecord(f"s{i}", p, f"{p}_01", 0.0, 1.0, verb, noun))
            i += 1
    return records


def test_criterion_06_partition_properties(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    guarantees = fractions = leaks = coverage = 0
    worst_val = worst_test = 0.0
    for trial in range(500):
        records = _random_annotations(rng)
        spec = homemade_partition(records, seed=trial)
        ids = {r.segment_id for r in records}
        coverage += set(spec.assignment) == ids
        by_cat = {}
        for r in records:
            by_cat.setdefault(r.action_class, []).append(spec.assignment[r.segment_id])
        guarantees += all("train" in s and (len(s) < 2 or "test" in s) for s in by_cat.values())
        counts = spec.counts()
        dv = abs(counts["val"] / len(records) - 0.10)
        dt = abs(counts["test"] / len(records) - 0.15)
        worst_val, worst_test = max(worst_val, dv), max(worst_test, dt)
        fractions += dv <= 0.02 and dt <= 0.02
        unseen = unseen_participant_partition(records, seed=trial)
        for r in records:
            num = int(r.participant_id[1:])
            split = unseen.assignment[r.segment_id]
            if (num >= 26 and split != "test") or (num <= 25 and split == "test"):
                leaks += 1
    checks = {"coverage": coverage == 500, "category guarantees": guarantees == 500,
              "10/15 targets +-2 points": fractions == 500, "no participant leaks": leaks == 0}
    report(acceptance_log, 6, checks, time.perf_counter() - t0, 60.0,
           f"500 sets, worst |val-0.10|={worst_val:.4f}, |test-0.15|={worst_test:.4f}, leaks={leaks}")


# --------------------------------------------------------------------------- 7


def _topk_oracle(scores, labels, k):
    hits = 0
    for row, y in zip(scores, labels):
        order = sorted(range(len(row)), key=lambda c: (-row[c], c))
        hits += y in order[:k]
    return hits / len(labels)


def _confusion_oracle(pred, labels, c):
    m = [[0] * c for _ in range(c)]
    for p, y in zip(pred, labels):
        m[y][p] += 1
    return m


def _pr_oracle(pred, labels, c):
    m = _confusion_oracle(pred, labels, c)
    precision = [m[k][k] / s if (s := sum(m[r][k] for r in range(c))) else 0.0 for k in range(c)]
    recall = [m[k][k] / s if (s := sum(m[k])) else 0.0 for k in range(c)]
    return precision, recall


def test_criterion_07_metric_oracles(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    ok = {"top-k": 0, "precision/recall": 0, "confusion": 0, "accuracy difference": 0}
    for i in range(200):
        n, c = int(rng.integers(1, 80)), int(rng.integers(2, 12))
        a = rng.integers(0, 4, (n, c)).astype(float) if i % 2 else rng.dirichlet(np.ones(c), size=n)
        b = rng.dirichlet(np.ones(c), size=n)
        labels = rng.integers(0, c, n)
        ok["top-k"] += all(topk_accuracy(a, labels, k) == _topk_oracle(a, labels, k) for k in range(1, c + 1))
        pa, pb = a.argmax(axis=1), b.argmax(axis=1)
        p, r, *_ = per_class_precision_recall(a, labels, c)
        po, ro = _pr_oracle(pa, labels, c)
        ok["precision/recall"] += list(p) == po and list(r) == ro
        raw, _ = confusion_matrix(pa, labels, c, normalize=None)
        norm, _ = confusion_matrix(pa, labels, c)
        oracle = _confusion_oracle(pa, labels, c)
        norm_oracle = [[v / sum(row) if sum(row) else 0.0 for v in row] for row in oracle]
        ok["confusion"] += raw.tolist() == oracle and norm.tolist() == norm_oracle
        _, rb = _pr_oracle(pb, labels, c)
        moved = sorted({int(y) for y, x, z in zip(labels, pa, pb) if x != z})
        ok["accuracy difference"] += accuracy_difference(a, b, labels).items() == [(k, rb[k] - ro[k]) for k in moved]
    labels = np.repeat(np.arange(4), 25)
    chance = random_baseline(labels, labels, 4, trials=10_000, seed=0).top1
    checks = {f"{k} 200/200": v == 200 for k, v in ok.items()}
    checks["random baseline 0.25 +- 0.02"] = abs(chance - 0.25) <= 0.02
    report(acceptance_log, 7, checks, time.perf_counter() - t0, 60.0,
           ", ".join(f"{k} {v}/200" for k, v in ok.items()) + f", random top-1 {chance:.4f}")


# --------------------------------------------------------------------------- 8


def _exhaustive_weights(probs, labels, grid):
    best, best_correct = None, -1
    for combo in itertools.product(sorted(grid), repeat=len(probs) - 1):
        w = (1.0,) + combo
        correct = 0
        for i, y in enumerate(labels):
            fused = [sum(w[s] * probs[s][i][c] for s in range(len(probs))) for c in range(len(probs[0][i]))]
            correct += max(range(len(fused)), key=lambda c: (fused[c], -c)) == y
        if correct > best_correct:
            best, best_correct = w, correct
    return best


def test_criterion_08_fusion_properties(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    grid = tuple(round(1.0 + 0.1 * i, 1) for i in range(11))
    grid_ok = 0
    for _ in range(20):
        m, c, n = int(rng.integers(2, 4)), int(rng.integers(2, 6)), int(rng.integers(5, 30))
        probs = [rng.dirichlet(np.ones(c) * 0.5, size=n) for _ in range(m)]
        labels = rng.integers(0, c, n)
        grid_ok += grid_search_weights(probs, labels, grid) == _exhaustive_weights(probs, labels, grid)
    scale_ok = 0
    for _ in range(1000):
        m, c = int(rng.integers(1, 4)), int(rng.integers(2, 9))
        probs = list(rng.dirichlet(np.ones(c), size=m))
        w = rng.uniform(0.1, 3.0, m)
        scale_ok += weighted_sum_fuse(probs, w).argmax() == weighted_sum_fuse(probs, rng.uniform(0.01, 100) * w).argmax()
    # frozen streams: tiny audio-style nets feeding an FC head for 5 epochs
    x = rng.standard_normal((30, 16, 12)).astype(np.float32)
    labels = rng.integers(0, 3, 30)
    streams = [DilatedNet(DilatedNetConfig.scaled(3, (2, 2, 2, 2), (16, 12), (8, 8)), s) for s in (1, 2)]
    for s in streams:
        s.freeze()
    before = [parameters_checksum(s.parameters()) for s in streams]
    inputs = SpectrogramInputs(x)
    feats = concat_penultimate([StreamScores(sid, *predict(m, inputs, range(30)))
                                for sid, m in zip(("rgb", "audio"), streams)])
    head = FcFusionHead(feats.shape[1], 3, seed=0)
    head_before = parameters_checksum(head.parameters())
    train_fc_fusion(head, feats, labels, range(20), range(20, 30),
                    TrainHyper(learning_rate=1e-2, epochs=5, patience=10), streams)
    after = [parameters_checksum(s.parameters()) for s in streams]
    checks = {"grid = exhaustive 20/20": grid_ok == 20, "argmax scale invariance 1000/1000": scale_ok == 1000,
              "stream checksums unchanged": before == after,
              "head trained": parameters_checksum(head.parameters()) != head_before}
    report(acceptance_log, 8, checks, time.perf_counter() - t0, 120.0,
           f"grid {grid_ok}/20, scaling {scale_ok}/1000, frozen checksums equal={before == after}")


# --------------------------------------------------------------------------- 9, 10


@pytest.fixture(scope="module")
def experiment_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("experiment")
    return root, {}


def _run(experiment_runs, tag):
    root, cache = experiment_runs
    if tag not in cache:
        cpu0 = time.process_time()
        result = run_experiment(ExperimentConfig(seed=0), root / tag)
        cache[tag] = (result, time.process_time() - cpu0)
    return cache[tag]


@pytest.mark.slow
def test_criterion_09_end_to_end_experiment(acceptance_log, experiment_runs):
    result, cpu_s = _run(experiment_runs, "run_a")
    s = result.summary
    unimodal = {name: s[f"action/{name}/top1"] for name in ("Audio", "RGB", "Flow", "RGB+Flow")}
    fc = s["action/RGB+Flow+Audio FC/top1"]
    checks = {
        "audio verb >= 0.90": s["verb/Audio/top1"] >= 0.90,
        "audio noun <= 0.40": s["noun/Audio/top1"] <= 0.40,
        "visual noun >= 0.90": s["noun/RGB+Flow/top1"] >= 0.90,
        "visual verb <= 0.40": s["verb/RGB+Flow/top1"] <= 0.40,
        "FC action >= 0.80": fc >= 0.80,
        "FC beats every unimodal action by >= 20 points": all(fc - v >= 0.20 for v in unimodal.values()),
    }
    detail = (f"audio verb {s['verb/Audio/top1']:.3f} noun {s['noun/Audio/top1']:.3f}; "
              f"visual noun {s['noun/RGB+Flow/top1']:.3f} verb {s['verb/RGB+Flow/top1']:.3f}; "
              f"FC action {fc:.3f} vs best unimodal {max(unimodal.values()):.3f}")
    report(acceptance_log, 9, checks, cpu_s, 600.0, detail)


@pytest.mark.slow
def test_criterion_10_determinism(acceptance_log, experiment_runs):
    first, _ = _run(experiment_runs, "run_a")
    second, cpu_s = _run(experiment_runs, "run_b")
    a_dir, b_dir = Path(first.out_dir), Path(second.out_dir)
    names = sorted(p.name for p in a_dir.glob("*.csv"))
    same = {n: (a_dir / n).read_bytes() == (b_dir / n).read_bytes() for n in names}
    checks = {"same file set": names == sorted(p.name for p in b_dir.glob("*.csv")),
              "report files present": {"report_action.csv", "report_verb.csv", "report_noun.csv"} <= set(names)}
    checks.update({f"{n} identical": v for n, v in same.items()})
    report(acceptance_log, 10, checks, cpu_s, None, f"{sum(same.values())}/{len(names)} CSV reports byte-identical")
