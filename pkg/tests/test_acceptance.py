"""Acceptance suite: one PASS/FAIL verdict per criterion, 1 to 11.

Each test records its verdict through ``acceptance_log.report`` (printed in
the pytest terminal summary) and then asserts it. The planted-signal
ablations and the end-to-end throughput measurement take several minutes on
one CPU core.
"""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import report
from afnet import nn
from afnet.cli import main as cli_main
from afnet.data import ClassLabel, Manifest
from afnet.dsp import BAND_CATALOG, BandSpec, apply_sos, design_butterworth_bandpass, frequency_response
from afnet.evalx import AblationSetup, ScoredSet, auc, run_band_ablation, run_lead_ablation
from afnet.models import Network, build_ecgnet, build_model, cam
from afnet.nn import BatchNormState, Mode, Tensor
from afnet.optim import AdamState, adam_step, lr_at_epoch
from afnet.pipeline import Preprocess, build_splits, load_rows
from afnet.synthgen import BeatTiming, SynthParams, synth_dataset, synth_ecg
from afnet.training import TrainConfig, early_stop_check, predict, train
from conftest import placeholder_rows
from gradcheck import layer_gradcheck, network_gradcheck

FS = 500.0

# planted-signal datasets: equal timing and P amplitude, so only the tone separates the classes
_SAME = BeatTiming(850.0, 174.0)
PLANT = SynthParams(n_samples=512, timing_af0=_SAME, timing_af1=_SAME, af1_p_factor=1.0, tone_hz=8.0, tone_amp=0.2)
PLANT_CONFIG = TrainConfig(max_epochs=5, patience=5, batch_size=8)
PLANT_SETUP = AblationSetup(test_frac=0.2)
SEEDS = [0, 1, 2, 3, 4]


# -- 1 ----------------------------------------------------------------------------------


def test_criterion_01_split_arithmetic():
    manifest = Manifest(placeholder_rows(50593, 11064))
    t0 = time.perf_counter()
    c = build_splits(manifest, 0.12, 5, seed=0).counts()
    elapsed = time.perf_counter() - t0
    got = (c["train"]["AF0"], c["train"]["AF1"], c["test_balanced"]["AF0"], c["test_balanced"]["AF1"],
           c["test_unbalanced"]["AF0"], c["test_unbalanced"]["AF1"])
    ok = got == (19474, 19474, 1327, 1327, 6635, 1327) and c["train"]["total"] == 38948 and elapsed < 5
    assert report(1, ok, f"train {c['train']['total']}, balanced {c['test_balanced']['total']}, "
                         f"unbalanced {c['test_unbalanced']['total']}, {elapsed:.2f} s")


# -- 2 ----------------------------------------------------------------------------------


def test_criterion_02_lr_schedule():
    points = [lr_at_epoch(e) for e in (0, 15, 30)]
    rng = np.random.default_rng(0)
    x = rng.standard_normal((120, 2)).astype(np.float32)
    from afnet.pipeline import Dataset
    data = Dataset([f"t{i}" for i in range(120)], (x[:, 0] > 0).astype(np.int64), tab=x)
    hist = train(build_model("tab", n_features=2), data, TrainConfig(max_epochs=40, patience=1000, batch_size=16))[1]
    pointwise = hist.column("lr") == [0.01 * 0.5 ** (e // 15) for e in range(40)]
    ok = points == [0.01, 0.005, 0.0025] and len(hist.epochs) == 40 and pointwise
    assert report(2, ok, f"lr at 0/15/30 = {points}; 40-epoch history matches: {pointwise}")


# -- 3 ----------------------------------------------------------------------------------


def test_criterion_03_early_stopping_boundary():
    a = early_stop_check([0.5 + 0.01 * i for i in range(30)])
    b = early_stop_check([0.70] + [0.705] * 15)
    b_early = early_stop_check([0.70] + [0.705] * 14)
    c = early_stop_check([0.70, 0.71] + [0.71] * 15)
    ok = (not a.stop) and b.stop and b.best_epoch == 0 and not b_early.stop and c.stop and c.best_epoch == 1
    assert report(3, ok, f"increasing: stop={a.stop}; 0.705 boundary: stop={b.stop} best={b.best_epoch}; "
                         f"0.71 trace: stop={c.stop} best={c.best_epoch}")


# -- 4 ----------------------------------------------------------------------------------


def _sine_amplitude(y, f):
    t = np.arange(len(y)) / FS
    basis = np.stack([np.sin(2 * np.pi * f * t), np.cos(2 * np.pi * f * t)], axis=1)
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    return float(np.hypot(*coef))


def test_criterion_04_filter_correctness():
    t0 = time.perf_counter()
    worst_edge = worst_amp = 0.0
    worst_dc = -np.inf
    stable = True
    for band in BAND_CATALOG:
        filt = design_butterworth_bandpass(band, FS)
        peak = frequency_response(filt, np.linspace(band.low_hz, band.high_hz, 4001)).max()
        for edge in (band.low_hz, band.high_hz):
            db = 20 * np.log10(frequency_response(filt, edge) / peak)
            worst_edge = max(worst_edge, abs(db + 3.0103))
        for f in (0.0, FS / 2):
            worst_dc = max(worst_dc, 20 * np.log10(frequency_response(filt, f) + 1e-300))
        a = np.array([1.0])
        for row in filt.sections:
            a = np.convolve(a, [1.0, row[3], row[4]])
        stable &= bool(np.all(np.abs(np.roots(a)) < 1.0))
        t = np.arange(5000) / FS
        for f in (np.sqrt(band.low_hz * band.high_hz), band.high_hz + 15.0):
            y = apply_sos(filt, np.sin(2 * np.pi * f * t))
            pred = frequency_response(filt, f)
            worst_amp = max(worst_amp, abs(_sine_amplitude(y[-1000:], f) - pred) / pred)
    elapsed = time.perf_counter() - t0
    ok = worst_edge <= 0.2 and worst_dc < -60 and stable and worst_amp <= 0.05 and elapsed < 10
    assert report(4, ok, f"7 bands: worst edge deviation {worst_edge:.4f} dB, worst DC/Nyquist {worst_dc:.1f} dB, "
                         f"poles inside: {stable}, worst steady-state error {100 * worst_amp:.2f}%, {elapsed:.1f} s")


# -- 5 ----------------------------------------------------------------------------------


def _p(rng, *shape, low=None):
    x = rng.uniform(low, 2.0, shape) if low is not None else rng.standard_normal(shape)
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _layer_cases():
    rng = np.random.default_rng(5)
    cases = {}
    for d in (1, 2, 4, 8):
        x, w, b = _p(rng, 2, 40, 3), _p(rng, 4, 3, 8), _p(rng, 4)
        cases[f"conv d={d}"] = (lambda x=x, w=w, b=b, d=d: nn.conv1d(x, w, b, d), [x, w, b])
    for mode in (Mode.TRAINING, Mode.INFERENCE):
        x, g, b = _p(rng, 3, 7, 4), _p(rng, 4, low=0.5), _p(rng, 4)
        st = BatchNormState(4, np.float64)
        st.var[:] = 2.0
        cases[f"batchnorm {mode.name.lower()}"] = (
            lambda x=x, g=g, b=b, st=st, mode=mode: nn.batchnorm(x, g, b, st, mode), [x, g, b])
    x = _p(rng, 3, 11)
    cases["relu"] = (lambda: nn.relu(x), [x])
    xp = _p(rng, 2, 17, 3)
    cases["maxpool"] = (lambda: nn.maxpool1d(xp), [xp])
    xg = _p(rng, 2, 40, 5)
    cases["global average pool"] = (lambda: nn.global_avg_pool(xg), [xg])
    xd, wd, bd = _p(rng, 4, 6), _p(rng, 3, 6), _p(rng, 3)
    cases["dense"] = (lambda: nn.dense(xd, wd, bd), [xd, wd, bd])
    xo = _p(rng, 5, 9)
    cases["dropout"] = (lambda: nn.dropout(xo, 0.3, Mode.TRAINING, np.random.default_rng(1)), [xo])
    z = _p(rng, 5, 2)
    cases["softmax cross-entropy"] = (lambda: nn.softmax_cross_entropy(z, [0, 1, 1, 0, 1])[0], [z])
    return cases


def test_criterion_05_gradient_correctness():
    t0 = time.perf_counter()
    layer_errs = {name: layer_gradcheck(build, ts) for name, (build, ts) in _layer_cases().items()}
    nets = {kind: network_gradcheck(build_model(kind), n_params=60, length=500) for kind in ("ecg", "tab", "full")}
    elapsed = time.perf_counter() - t0
    worst_layer = max(layer_errs.values())
    ok = (worst_layer < 1e-3 and all(len(r.probes) >= 50 and r.worst < 1e-3 for r in nets.values())
          and elapsed < 300)
    nets_txt = ", ".join(f"{k}: {len(r.probes)} probes worst {r.worst:.1e} ({r.kinked} kinked redrawn)"
                         for k, r in nets.items())
    assert report(5, ok, f"{len(layer_errs)} layer checks worst {worst_layer:.1e}; {nets_txt}; {elapsed:.0f} s")


# -- 6 ----------------------------------------------------------------------------------


def _pairwise(s, y):
    pos, neg = s[y == 1], s[y == 0]
    return sum(float(np.sum(p > neg) + 0.5 * np.sum(p == neg)) for p in pos) / (len(pos) * len(neg))


def test_criterion_06_auc_oracle():
    rng = np.random.default_rng(6)
    exact = invariant = 0
    for _ in range(200):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = rng.integers(0, int(rng.integers(2, 40)), n) / 40.0
        a = auc(ScoredSet(s, y))
        exact += a == _pairwise(s, y)
        invariant += (auc(ScoredSet(s ** 3, y)) == a
                      and auc(ScoredSet(1 / (1 + np.exp(-(5 * s - 2.5))), y)) == a)
    ok = exact == 200 and invariant == 200
    assert report(6, ok, f"rank-sum == pairwise on {exact}/200 sets; monotone invariance on {invariant}/200")


# -- 7 ----------------------------------------------------------------------------------


def _throughput(length=5000, batch=8, reps=3):
    """Seconds per record for a training step and for inference, 12-lead EcgNet."""
    net = Network(build_ecgnet(12), seed=0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, length, 12)).astype(np.float32)
    y = np.arange(batch) % 2
    params = {k: t.data for k, t in net.store.params.items()}
    state = AdamState()

    def step():
        fw = net.forward(x, None, Mode.TRAINING, rng)
        loss = nn.softmax_cross_entropy(fw.logits, y)[0]
        net.store.zero_grad()
        loss.backward()
        adam_step(params, net.store.grads(), state, 0.01)

    step()
    t0 = time.perf_counter()
    for _ in range(reps):
        step()
    train_s = (time.perf_counter() - t0) / (reps * batch)
    t0 = time.perf_counter()
    net.predict_proba(x, batch_size=batch)
    infer_s = (time.perf_counter() - t0) / batch
    return train_s, infer_s


def test_criterion_07_end_to_end_learnability(tmp_path):
    # (a) can a 2000 + 2000 run at full length finish within 30 minutes here?
    train_s, infer_s = _throughput()
    c = build_splits(Manifest(placeholder_rows(2000, 2000)), 0.12, 1, seed=0).counts()
    n_train = c["train"]["total"]
    n_val = round(0.1 * n_train)
    epoch_s = (n_train - n_val) * train_s + n_val * infer_s
    min_epochs = TrainConfig().patience + 1  # early stopping cannot fire earlier
    projected_min = min_epochs * epoch_s / 60
    feasible = projected_min <= 30

    # (b) reduced-scale run with default class separation, informational only
    m = synth_dataset(60, 60, seed=1, out_dir=tmp_path / "d", params=SynthParams(n_samples=1000))
    s = build_splits(m, 0.2, 1, 0)
    tr = load_rows(m.root, s.train, Preprocess(), s.norm_stats)
    te = load_rows(m.root, s.test_balanced, Preprocess(), s.norm_stats)
    gains, ecg_aucs = [], []
    for seed in SEEDS:
        cfg = TrainConfig(max_epochs=4, patience=4, batch_size=8, seed=seed)
        a = {}
        for kind in ("ecg", "full"):
            net, _ = train(build_model(kind), tr, cfg)
            a[kind] = auc(ScoredSet(predict(net, te), te.labels))
        ecg_aucs.append(a["ecg"])
        gains.append(100 * (a["full"] - a["ecg"]))
    wins = sum(g >= 2 for g in gains)
    ok = feasible and min(ecg_aucs) >= 0.90 and wins >= 4
    assert report(7, ok, (
        f"measured {1000 * train_s:.0f} ms/record (train step) at 5000x12; one epoch on synth(2000, 2000) "
        f"= {n_train - n_val} records ~ {epoch_s / 60:.1f} min, so the {min_epochs}-epoch minimum needs "
        f"~{projected_min:.0f} min > 30 min. Reduced run (60+60, 1000 samples, 4 epochs): "
        f"EcgNet AUC {np.round(ecg_aucs, 3).tolist()}, fusion gain >= 2 points in {wins}/5 seeds "
        f"(gains {np.round(gains, 1).tolist()})"))


# -- 8 ----------------------------------------------------------------------------------


def test_criterion_08_planted_lead(tmp_path):
    params = replace(PLANT, tone_leads=(0,))
    m = synth_dataset(40, 40, seed=1, out_dir=tmp_path / "d", params=params)
    t0 = time.perf_counter()
    table = run_lead_ablation(m, PLANT_CONFIG, SEEDS, PLANT_SETUP)
    ranked = sorted(table.rows, key=lambda r: -r.mean)
    ok = table.best() == "D1"
    top = ", ".join(f"{r.condition} {r.mean:.3f}" for r in ranked[:3])
    assert report(8, ok, f"best lead {table.best()}; top three by mean AUC over 5 seeds: {top}; "
                         f"{(time.perf_counter() - t0) / 60:.1f} min")


# -- 9 ----------------------------------------------------------------------------------


def test_criterion_09_planted_band(tmp_path):
    m = synth_dataset(40, 40, seed=2, out_dir=tmp_path / "d", params=PLANT)
    bands = [None, BandSpec(5, 20), BandSpec(35, 50)]
    table = run_band_ablation(m, PLANT_CONFIG, SEEDS, PLANT_SETUP, bands)
    low, high = table.row("[5-20]").mean, table.row("[35-50]").mean
    gap = 100 * (low - high)
    ok = gap >= 5
    assert report(9, ok, f"AUC [5-20] {low:.3f}, [35-50] {high:.3f}, unfiltered "
                         f"{table.row('unfiltered').mean:.3f}; gap {gap:.1f} points")


# -- 10 ---------------------------------------------------------------------------------


def test_criterion_10_cam_identity():
    net = Network(build_ecgnet(12), seed=10)
    rng = np.random.default_rng(10)
    net.store["head.b"].data[...] = rng.normal(0, 0.5, 2)
    worst, lengths = 0.0, set()
    for i in range(100):
        label = ClassLabel(i % 2)
        x = synth_ecg(label, SynthParams(), np.random.default_rng([10, i])).samples
        x = ((x - x.mean(0)) / x.std(0)).astype(np.float32)
        logits = net.forward(x[None]).logits.data[0].astype(np.float64)
        for c in (0, 1):
            m = cam(net, x, c)
            lengths.add(len(m.values))
            worst = max(worst, abs(m.values.mean() + float(net.store["head.b"].data[c]) - logits[c]))
    ok = worst <= 1e-4 and lengths == {625}
    assert report(10, ok, f"100 records x 2 classes: worst |mean(CAM) + bias - logit| = {worst:.1e}, "
                          f"CAM lengths {sorted(lengths)}")


# -- 11 ---------------------------------------------------------------------------------


def _pipeline(root: Path):
    d = root / "data"
    fast = ["--set", "max_epochs=2", "--set", "batch_size=8", "--set", "val_fraction=0.2"]
    cmds = [
        ["synth", "--n-af0", "14", "--n-af1", "12", "--seed", "5", "--n-samples", "600", "--out", str(d)],
        ["prepare", "--manifest", str(d / "manifest.csv"), "--seed", "5", "--test-frac", "0.25"],
        ["train", "--splits", str(d / "splits"), "--model", "full", "--seed", "2", "--out", str(root / "run")] + fast,
        ["eval", "--checkpoint", str(root / "run" / "model.afck"), "--splits", str(d / "splits"),
         "--out", str(root / "eval")],
        ["cam", "--checkpoint", str(root / "cam_ck" / "model.afck"), "--manifest", str(d / "manifest.csv"),
         "--limit", "3", "--out", str(root / "cam")],
        ["filter", "--manifest", str(d / "manifest.csv"), "--band", "5-20", "--out", str(root / "filtered")],
        ["ablate-leads", "--manifest", str(d / "manifest.csv"), "--set", "leads=D1,avR", "--set", "seeds=0,1",
         "--set", "test_frac=0.25", "--out", str(root / "abl")] + fast,
    ]
    codes = []
    for cmd in cmds:
        if cmd[0] == "cam":
            codes.append(cli_main(["train", "--splits", str(d / "splits"), "--out", str(root / "cam_ck")] + fast))
        codes.append(cli_main(cmd))
    return codes


def test_criterion_11_determinism(tmp_path):
    codes_a = _pipeline(tmp_path / "a")
    codes_b = _pipeline(tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    differing = [str(p) for p in files_a if (tmp_path / "a" / p).read_bytes() != (tmp_path / "b" / p).read_bytes()]
    ok = codes_a == codes_b and set(codes_a) == {0} and files_a == files_b and not differing
    assert report(11, ok, f"{len(files_a)} output files from synth/prepare/train/eval/cam/filter/ablate-leads; "
                          f"byte-identical: {len(files_a) - len(differing)}/{len(files_a)}"
                          + (f"; differing: {differing[:5]}" if differing else ""))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
