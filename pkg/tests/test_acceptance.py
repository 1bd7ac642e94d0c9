"""Acceptance gate. Each test prints one `criterion N: PASS/FAIL - ...` line.

Run order matters only for readability; every criterion is independent
except 5 and 6, which share one end-to-end pipeline fixture.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from spectroemg import dsp, ingest, model, nncore, train
from spectroemg import evaluate as ev

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def _report(capsys, num: int, ok: bool, desc: str) -> None:
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'} - {desc}"
    with capsys.disabled():
        print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# criterion 1: spectrogram vs naive DFT oracle
# ---------------------------------------------------------------------------

def test_criterion_1_stft_oracle(capsys):
    t0 = time.perf_counter()
    window = dsp.hann_periodic(256)
    worst = 0.0
    for seed in range(100):
        segment = np.random.default_rng(seed).standard_normal(2000)
        mag = dsp.stft_magnitude(segment)
        frames = dsp.frame_segment(segment)
        assert mag.shape == (129, 32) and frames.shape == (32, 256)
        for t in range(frames.shape[0]):
            oracle = dsp.naive_dft_frame(frames[t] * window)
            worst = max(worst, float(np.max(np.abs(mag[:, t] - oracle))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 5.0
    _report(capsys, 1, ok,
            f"every frame of 100 random segments matches the naive DFT "
            f"(max abs err {worst:.2e}, {elapsed:.2f}s)")


# ---------------------------------------------------------------------------
# criterion 2: feature and windowing shapes
# ---------------------------------------------------------------------------

def test_criterion_2_shapes(capsys):
    feat = dsp.featurize(np.random.default_rng(0).standard_normal(2000))
    rec = ingest.Recording(
        np.random.default_rng(1).standard_normal(262124).astype(np.float32),
        24000, 0, "subj", "rec")
    segments = ingest.segments_from_recording(rec, 23437, 2000)
    ok = (feat.shape == (129, 32, 2)
          and len(segments) == 11
          and all(s.samples.size == 2000 for s in segments))
    _report(capsys, 2, ok,
            f"featurize yields {feat.shape} and a 262124-sample recording "
            f"yields {len(segments)} segments of 2000")


# ---------------------------------------------------------------------------
# criterion 3: finite-difference gradients, 20 seeds
# ---------------------------------------------------------------------------

def _layer_errors(seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0

    conv = nncore.Conv2d(3, 3, 2, 3, rng=rng, dtype=np.float64)
    x = rng.standard_normal((2, 4, 5, 2))
    target = rng.standard_normal((2, 4, 5, 3))
    loss = lambda: 0.5 * float(np.sum((conv.forward(x) - target) ** 2))
    gx = conv.backward(conv.forward(x) - target)
    worst = max(worst, rel_error(gx, numeric_grad(loss, x)),
                rel_error(conv.grad_kernels, numeric_grad(loss, conv.kernels)),
                rel_error(conv.grad_bias, numeric_grad(loss, conv.bias)))

    bn = nncore.BatchNorm(3, dtype=np.float64)
    bn.gamma[:] = rng.standard_normal(3) * 0.3 + 1.0
    bn.beta[:] = rng.standard_normal(3)
    xb = rng.standard_normal((4, 2, 3, 3))
    tb = rng.standard_normal((4, 2, 3, 3))
    loss_b = lambda: 0.5 * float(np.sum((bn.forward(xb, train=True) - tb) ** 2))
    gxb = bn.backward(bn.forward(xb, train=True) - tb)
    worst = max(worst, rel_error(gxb, numeric_grad(loss_b, xb)),
                rel_error(bn.grad_gamma, numeric_grad(loss_b, bn.gamma)),
                rel_error(bn.grad_beta, numeric_grad(loss_b, bn.beta)))

    dense = nncore.Dense(6, 4, rng=rng, dtype=np.float64)
    xd = rng.standard_normal((3, 6))
    td = rng.standard_normal((3, 4))
    loss_d = lambda: 0.5 * float(np.sum((dense.forward(xd) - td) ** 2))
    gxd = dense.backward(dense.forward(xd) - td)
    worst = max(worst, rel_error(gxd, numeric_grad(loss_d, xd)),
                rel_error(dense.grad_weights, numeric_grad(loss_d, dense.weights)),
                rel_error(dense.grad_bias, numeric_grad(loss_d, dense.bias)))

    relu = nncore.ReLU()
    xr = rng.standard_normal((5, 7))
    xr += np.where(xr >= 0, 0.01, -0.01)  # keep entries off the kink
    tr = rng.standard_normal((5, 7))
    loss_r = lambda: 0.5 * float(np.sum((relu.forward(xr) - tr) ** 2))
    gxr = relu.backward(relu.forward(xr) - tr)
    return max(worst, rel_error(gxr, numeric_grad(loss_r, xr)))


def _model_error(seed: int) -> float:
    rng = np.random.default_rng([seed, 1])
    cfg = model.ModelConfig(stem_channels=2, feature_channels=4, attention_hidden=4,
                            input_shape=(9, 6, 2), seed=seed, dtype="float64")
    net = model.init(cfg)
    x = rng.standard_normal((3, 9, 6, 2))
    labels = np.array([0, 1, 2])
    net.set_standardization(x.mean(axis=(0, 1, 2)), x.std(axis=(0, 1, 2)))

    def loss():
        return float(nncore.softmax_xent(net.forward(x, train=True), labels)[0])

    _, _, grad_logits = nncore.softmax_xent(net.forward(x, train=True), labels)
    gx = net.backward(grad_logits)
    # the gradient is judged as one vector: biases feeding straight into
    # batch norm have a true gradient of zero and no per-array relative
    # comparison can resolve them
    analytic = net.grads()
    names = list(net.parameters())
    a_all = np.concatenate([np.ravel(gx)] + [np.ravel(analytic[n]) for n in names])
    n_all = np.concatenate(
        [np.ravel(numeric_grad(loss, x, h=1e-6))]
        + [np.ravel(numeric_grad(loss, net.parameters()[n], h=1e-6)) for n in names])
    return rel_error(a_all, n_all)


def test_criterion_3_gradient_suite(capsys):
    t0 = time.perf_counter()
    worst_layer = max(_layer_errors(seed) for seed in range(20))
    worst_model = max(_model_error(seed) for seed in range(20))
    elapsed = time.perf_counter() - t0
    ok = worst_layer <= 1e-5 and worst_model <= 1e-4 and elapsed < 60.0
    _report(capsys, 3, ok,
            f"20-seed central differences: layers {worst_layer:.2e} (<=1e-5), "
            f"full model {worst_model:.2e} (<=1e-4), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 4: reference confusion matrix reproduces the published table
# ---------------------------------------------------------------------------

M_STAR = np.array([[161, 14, 1],
                   [14, 308, 8],
                   [6, 0, 27]])

EXPECTED_PER_CLASS = {
    "myopathy": {"sensitivity": "91.48", "specificity": "94.49",
                 "precision": "88.95", "f1": "90.20"},
    "normal": {"sensitivity": "93.33", "specificity": "93.30",
               "precision": "95.65", "f1": "94.48"},
    "als": {"sensitivity": "81.82", "specificity": "98.22",
            "precision": "75.00", "f1": "78.26"},
}
EXPECTED_SUMMARY = ("92.02", "88.88", "95.34")


def _percent_table(cm):
    report = ev.build_report(cm)
    per_class = {name: {k: report["per_class"][name][k]["percent"]
                        for k in ("sensitivity", "specificity", "precision", "f1")}
                 for name in ("myopathy", "normal", "als")}
    summary = (report["overall_accuracy"]["percent"],
               report["macro_sensitivity"]["percent"],
               report["macro_specificity"]["percent"])
    return per_class, summary


def _completions(diag, rows, cols):
    """Every non-negative integer matrix with the given diagonal and sums."""
    out = []
    for a01 in range(rows[0] - diag[0] + 1):
        a02 = rows[0] - diag[0] - a01
        a21 = cols[1] - diag[1] - a01
        a12 = cols[2] - diag[2] - a02
        a10 = rows[1] - diag[1] - a12
        a20 = rows[2] - diag[2] - a21
        if min(a02, a21, a12, a10, a20) < 0:
            continue
        if a10 + a20 != cols[0] - diag[0]:
            continue
        out.append(np.array([[diag[0], a01, a02],
                             [a10, diag[1], a12],
                             [a20, a21, diag[2]]]))
    return out


def test_criterion_4_reference_matrix(capsys):
    diag, rows, cols = (161, 308, 27), (176, 330, 33), (181, 322, 36)
    assert np.diag(M_STAR).tolist() == list(diag)
    assert M_STAR.sum(axis=1).tolist() == list(rows)
    assert M_STAR.sum(axis=0).tolist() == list(cols)

    per_class, summary = _percent_table(M_STAR)
    table_ok = per_class == EXPECTED_PER_CLASS and summary == EXPECTED_SUMMARY

    family = _completions(diag, rows, cols)
    family_ok = (len(family) == 7
                 and any(np.array_equal(m, M_STAR) for m in family)
                 and all(_percent_table(m) == (per_class, summary) for m in family))

    ok = table_ok and family_ok
    _report(capsys, 4, ok,
            f"reference matrix reproduces all 15 published percentages and all "
            f"{len(family)} marginal-consistent completions agree")


# ---------------------------------------------------------------------------
# criteria 5 and 6: end-to-end pipeline, then byte-exact repetition
# ---------------------------------------------------------------------------

def _run_pipeline(workdir: str) -> dict:
    paths = {"data": os.path.join(workdir, "data"),
             "feats": os.path.join(workdir, "feats"),
             "run": os.path.join(workdir, "run")}
    steps = [
        ["synth", "--out", paths["data"], "--seed", "7",
         "--per-class", "100", "--subjects-per-class", "5"],
        ["featurize", "--manifest", os.path.join(paths["data"], "manifest.csv"),
         "--out", paths["feats"], "--seed", "7"],
        ["train", "--features", paths["feats"], "--out", paths["run"],
         "--seed", "7", "--set", "train.max_epochs=30"],
        ["evaluate", "--model", os.path.join(paths["run"], "model.smdl"),
         "--features", os.path.join(paths["feats"], "test.sftr"),
         "--out", os.path.join(paths["run"], "report")],
    ]
    for step in steps:
        proc = subprocess.run([sys.executable, "-m", "spectroemg"] + step,
                              capture_output=True, text=True)
        assert proc.returncode == 0, f"{step[0]} failed:\n{proc.stderr}"
    return paths


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("e2e")
    t0 = time.perf_counter()
    first = _run_pipeline(str(base / "one"))
    elapsed = time.perf_counter() - t0
    second = _run_pipeline(str(base / "two"))
    return first, elapsed, second


def test_criterion_5_end_to_end(capsys, pipeline_runs):
    paths, elapsed, _ = pipeline_runs

    split_counts = {}
    for split in ("train", "val", "test"):
        x, y = dsp.read_features(os.path.join(paths["feats"], f"{split}.sftr"))
        assert x.shape[1:] == (129, 32, 2)
        split_counts[split] = np.bincount(y, minlength=3).tolist()
    sizes_ok = (split_counts["train"] == [60, 60, 60]
                and split_counts["val"] == [20, 20, 20]
                and split_counts["test"] == [20, 20, 20])

    # replay the subject assignment to confirm no subject crosses splits
    manifest = ingest.read_manifest(os.path.join(paths["data"], "manifest.csv"))
    pseudo = [ingest.Segment(np.zeros(1), e.label, e.subject_id, (e.path, 0))
              for e in manifest.entries]
    replay = ingest.split_by_subject(pseudo, (0.6, 0.2, 0.2), seed=7)
    subjects = [set(s.subject_id for s in part) for part in replay]
    disjoint_ok = (not (subjects[0] & subjects[1]) and not (subjects[0] & subjects[2])
                   and not (subjects[1] & subjects[2]))
    replay_ok = [np.bincount([s.label for s in part], minlength=3).tolist()
                 for part in replay] == [split_counts[k] for k in ("train", "val", "test")]

    report = json.load(open(os.path.join(paths["run"], "report", "report.json")))
    accuracy = report["overall_accuracy"]["value"]
    epochs = len(open(os.path.join(paths["run"], "history.csv")).read().splitlines()) - 1

    ok = (sizes_ok and disjoint_ok and replay_ok
          and accuracy >= 0.95 and epochs <= 30 and elapsed < 300.0)
    _report(capsys, 5, ok,
            f"synthetic pipeline: 60/20/20 per class, subject-disjoint, test "
            f"accuracy {accuracy:.4f} in {epochs} epochs, {elapsed:.0f}s")


def test_criterion_6_repetition_is_byte_identical(capsys, pipeline_runs):
    first, _, second = pipeline_runs

    def blob(paths, *parts):
        return open(os.path.join(paths["run"], *parts), "rb").read()

    same = {name: blob(first, *parts) == blob(second, *parts)
            for name, parts in [("model", ("model.smdl",)),
                                ("history", ("history.csv",)),
                                ("report", ("report", "report.json")),
                                ("confusion", ("report", "confusion.csv"))]}
    ok = all(same.values())
    _report(capsys, 6, ok,
            "repeating the run with identical seeds reproduces the model file "
            f"and reports byte for byte ({same})")


# ---------------------------------------------------------------------------
# criterion 7: real recordings stay an optional, documented experiment
# ---------------------------------------------------------------------------

def test_criterion_7_real_data_is_documented_not_gated(capsys):
    readme_path = os.path.join(REPO_ROOT, "README.md")
    text = open(readme_path, encoding="utf-8").read()
    ok = (os.path.exists(readme_path)
          and "integration experiment" in text.lower()
          and "92%" in text
          and "+/- 5" in text)
    _report(capsys, 7, ok,
            "README documents the real-recording run as an optional integration "
            "experiment with an advisory 92% +/- 5 point band")


# ---------------------------------------------------------------------------
# criterion 8: three segments overfit to zero loss
# ---------------------------------------------------------------------------

def test_criterion_8_overfit_three_segments(capsys):
    segments = ingest.synth_dataset(11, 1, 1)
    assert sorted(s.label for s in segments) == [0, 1, 2]
    x = np.stack([dsp.featurize(s.samples) for s in segments]).astype(np.float32)
    y = np.array([s.label for s in segments])

    net = model.init(model.ModelConfig(seed=11))
    cfg = train.TrainConfig(lr=1e-3, batch_size=3, max_epochs=50, patience=50, seed=11)
    result = train.train(net, x, y, x, y, cfg)
    min_loss = min(h.train_loss for h in result.history)
    hit = next((h.epoch for h in result.history if h.train_loss < 0.01), None)

    _, cm = ev.evaluate(net, x, y)
    accuracy = ev.overall_accuracy(cm)
    ok = hit is not None and len(result.history) <= 50 and accuracy == 1.0
    _report(capsys, 8, ok,
            f"train loss {min_loss:.2e} on 3 segments (first below 0.01 at epoch "
            f"{hit}), evaluating them back gives {ev.percent(accuracy)}")
