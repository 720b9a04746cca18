"""Release gate: nine numbered end-to-end criteria, one test and one printed
PASS/FAIL line each (run with -s to see the lines alongside the verdicts).

Criteria 1-7 are fast property and oracle checks; criterion 8 trains the
desk-scale model and dominates the runtime; criterion 9 replays the full
command-line pipeline twice and compares bytes.
"""
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from saltpepper.cli import main
from saltpepper.denoiser import backward, forward_with_tape, make_denoiser
from saltpepper.forward import NoiseDraw, ReferenceImage, concat_condition, q_sample, q_step
from saltpepper.heatmap import (
    TAG_DIFFUSION,
    TAG_RAW,
    HeatmapStack,
    LandmarkSet,
    blur,
    encode_landmarks,
    gaussian_kernel,
    spatial_softmax,
    to_diffusion_scale,
)
from saltpepper.loss import LossWeights, loss_combined, loss_combined_grad
from saltpepper.metrics import evaluate
from saltpepper.sampler import (
    posterior_mean_from_eps,
    posterior_mean_from_x0,
    reverse_step,
    sample_multistep,
)
from saltpepper.schedule import BlurConfig, make_linear_schedule

PX_SPACING = (1.0, 1.0)  # synthetic corpora use 1 mm/px, so mm and px coincide


CRITERION_LINES: list[str] = []


def report(num, name, ok, detail):
    line = f"[criterion {num}] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    CRITERION_LINES.append(line)
    print(line, flush=True)
    assert ok, f"criterion {num} ({name}): {detail}"


def test_criterion_1_schedule_identity():
    t0 = time.perf_counter()
    worst = 0.0
    first_var_zero = True
    for T in (1, 2, 10, 200):
        sched = make_linear_schedule(T, 1e-4, 0.02)
        running = 1.0
        for t in range(1, T + 1):
            running *= math.sqrt(sched.alpha_t(t))
            worst = max(worst, abs(math.sqrt(sched.alpha_bar_t(t)) - running))
        first_var_zero = first_var_zero and sched.beta_tilde_t(1) == 0.0
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and first_var_zero and elapsed < 1.0
    report(1, "schedule identity", ok,
           f"max sqrt-cumprod gap {worst:.2e}, beta_tilde(1)==0 {first_var_zero}, {elapsed:.2f} s")


def test_criterion_2_posterior_parameterizations_agree():
    t0 = time.perf_counter()
    sched = make_linear_schedule(200, 1e-4, 0.02)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        x0 = HeatmapStack(rng.uniform(-1, 1, (2, 8, 8)), TAG_DIFFUSION)
        eps = NoiseDraw(rng.standard_normal((2, 8, 8)))
        t = int(rng.integers(1, sched.T + 1))
        x_t = q_sample(x0, t, eps, sched)
        via_x0 = posterior_mean_from_x0(x_t, HeatmapStack(x0.values, TAG_RAW), t, sched)
        via_eps = posterior_mean_from_eps(x_t, HeatmapStack(eps.values, TAG_RAW), t, sched)
        worst = max(worst, float(np.abs(via_x0.values - via_eps.values).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 5.0
    report(2, "posterior parameterization equivalence", ok,
           f"max |mu_x0 - mu_eps| {worst:.2e} over 1000 triples, {elapsed:.2f} s")


def test_criterion_3_forward_composition_moments():
    # trials ride along the channel axis: the chain treats channels
    # independently, so one vectorized walk gives 10^4 iid samples per pixel
    t0 = time.perf_counter()
    trials = 10_000
    sched = make_linear_schedule(50, 1e-4, 0.02)
    rng = np.random.default_rng(3)
    base = np.linspace(-0.9, 0.9, 9).reshape(3, 3)
    worst_mean_z = 0.0
    worst_var_rel = 0.0
    for t_target in (5, 50):
        x = HeatmapStack(np.broadcast_to(base, (trials, 3, 3)).copy(), TAG_RAW)
        for t in range(1, t_target + 1):
            x = q_step(x, t, sched, rng)
        ab = sched.alpha_bar_t(t_target)
        mean_err = np.abs(x.values.mean(axis=0) - math.sqrt(ab) * base)
        se = math.sqrt((1.0 - ab) / trials)
        worst_mean_z = max(worst_mean_z, float(mean_err.max() / se))
        var_rel = np.abs(x.values.var(axis=0) - (1.0 - ab)) / (1.0 - ab)
        worst_var_rel = max(worst_var_rel, float(var_rel.max()))
    elapsed = time.perf_counter() - t0
    ok = worst_mean_z <= 3.0 and worst_var_rel <= 0.05 and elapsed < 30.0
    report(3, "forward composition moments", ok,
           f"worst mean z {worst_mean_z:.2f} SE, worst var dev {100 * worst_var_rel:.2f}%, {elapsed:.2f} s")


def _combined_loss_value(target, pred_values, weights):
    total, _ = loss_combined(target, pred_values, weights)
    return total


def test_criterion_4_gradient_suite():
    t0 = time.perf_counter()
    weights = LossWeights(0.01, 1.0)
    rng = np.random.default_rng(4)
    gt = LandmarkSet(np.array([[3.0, 12.0], [10.0, 5.0]]), (16, 16), PX_SPACING)
    target = to_diffusion_scale(encode_landmarks(gt, 16, 16))

    # analytic gradient with respect to the logits against central differences
    pred = rng.uniform(-0.99, 0.99, (2, 16, 16))
    analytic = loss_combined_grad(target, pred, weights)
    h = 1e-5
    fd = np.empty_like(pred)
    flat = pred.ravel()
    fd_flat = fd.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = _combined_loss_value(target, pred, weights)
        flat[i] = keep - h
        lo = _combined_loss_value(target, pred, weights)
        flat[i] = keep
        fd_flat[i] = (hi - lo) / (2 * h)
    logit_rel = float(np.linalg.norm(fd - analytic) / np.linalg.norm(fd))

    # every network parameter against central differences through the full
    # forward pass
    d = make_denoiser(3, 2, np.random.default_rng(40), enc_plan=(4, 8), dec_plan=(4,),
                      time_dim=8, gn_groups=2)
    inp = concat_condition(ReferenceImage(rng.uniform(-1, 1, (1, 16, 16))),
                           HeatmapStack(rng.standard_normal((2, 16, 16)), TAG_RAW))
    t_cond = 3
    out, tape = forward_with_tape(d, inp, t_cond)
    grads = backward(d, tape, loss_combined_grad(target, out, weights))
    fd_params = np.empty_like(d.params)
    for i in range(d.params.size):
        keep = d.params[i]
        d.params[i] = keep + h
        hi = _combined_loss_value(target, forward_with_tape(d, inp, t_cond)[0], weights)
        d.params[i] = keep - h
        lo = _combined_loss_value(target, forward_with_tape(d, inp, t_cond)[0], weights)
        d.params[i] = keep
        fd_params[i] = (hi - lo) / (2 * h)
    param_rel = float(np.linalg.norm(fd_params - grads) / np.linalg.norm(fd_params))

    elapsed = time.perf_counter() - t0
    ok = logit_rel < 1e-4 and param_rel < 1e-3 and elapsed < 120.0
    report(4, "gradient suite", ok,
           f"logit rel err {logit_rel:.2e}, {d.params.size}-param rel err {param_rel:.2e}, {elapsed:.1f} s")


def test_criterion_5_normalization():
    rng = np.random.default_rng(5)
    worst_softmax = 0.0
    for _ in range(100):
        c = int(rng.integers(1, 5))
        h = int(rng.integers(3, 20))
        w = int(rng.integers(3, 20))
        probs = spatial_softmax(HeatmapStack(rng.uniform(-5, 5, (c, h, w)), TAG_RAW))
        sums = probs.values.reshape(c, -1).sum(axis=1)
        worst_softmax = max(worst_softmax, float(np.abs(sums - 1.0).max()))

    worst_kernel = 0.0
    for sigma in (0.0, 0.1, 1.0, 14.0):
        worst_kernel = max(worst_kernel, abs(float(gaussian_kernel(13, sigma).sum()) - 1.0))

    stack = HeatmapStack(rng.uniform(-1, 1, (2, 9, 9)), TAG_RAW)
    identity = bool(np.array_equal(blur(stack, 0.0).values, stack.values))

    ok = worst_softmax <= 1e-6 and worst_kernel <= 1e-12 and identity
    report(5, "normalization", ok,
           f"softmax sum dev {worst_softmax:.2e}, kernel sum dev {worst_kernel:.2e}, "
           f"sigma=0 identity {identity}")


def test_criterion_6_metrics_oracle():
    rng = np.random.default_rng(6)
    worst_mre = 0.0
    sdr_exact = True
    for _ in range(100):
        images = int(rng.integers(1, 7))
        n = int(rng.integers(1, 6))
        w, h = int(rng.integers(8, 40)), int(rng.integers(8, 40))
        spacing = (float(rng.uniform(0.05, 2.0)), float(rng.uniform(0.05, 2.0)))
        preds, gts = [], []
        for _ in range(images):
            preds.append(LandmarkSet(rng.uniform(0, [w - 1, h - 1], (n, 2)), (w, h), spacing))
            gts.append(LandmarkSet(rng.uniform(0, [w - 1, h - 1], (n, 2)), (w, h), spacing))
        rep = evaluate(preds, gts)
        # brute force with plain loops
        errors = []
        for p, g in zip(preds, gts):
            for i in range(n):
                dx = (p.points[i, 0] - g.points[i, 0]) * spacing[0]
                dy = (p.points[i, 1] - g.points[i, 1]) * spacing[1]
                errors.append(math.sqrt(dx * dx + dy * dy))
        worst_mre = max(worst_mre, abs(rep.mre_mm - sum(errors) / len(errors)))
        for z in (2.0, 2.5, 4.0):
            expect = 100.0 * sum(1 for e in errors if e < z) / len(errors)
            sdr_exact = sdr_exact and rep.sdr[z] == expect

    # a (3, 4) px displacement at 0.1 mm/px is exactly half a millimetre
    gt = LandmarkSet(np.array([[10.0, 10.0]]), (32, 32), (0.1, 0.1))
    off = LandmarkSet(np.array([[13.0, 14.0]]), (32, 32), (0.1, 0.1))
    example = evaluate([off], [gt])
    example_ok = abs(example.mre_mm - 0.5) <= 1e-12 and example.sdr[2.0] == 100.0

    # an error sitting exactly on the radius counts as a miss
    edge = LandmarkSet(np.array([[10.0, 30.0]]), (32, 32), (0.1, 0.1))
    boundary = evaluate([edge], [gt])
    boundary_ok = boundary.sdr[2.0] == 0.0 and boundary.sdr[2.5] == 100.0

    ok = worst_mre <= 1e-12 and sdr_exact and example_ok and boundary_ok
    report(6, "metrics oracle", ok,
           f"max mre gap {worst_mre:.2e}, sdr exact {sdr_exact}, "
           f"0.5 mm example {example_ok}, strict boundary {boundary_ok}")


class _TrueStackDenoiser:
    """Always answers with the known clean stack."""

    def __init__(self, x0_values):
        self.x0_values = np.asarray(x0_values, dtype=np.float64)
        self.in_channels = 1 + self.x0_values.shape[0]
        self.out_channels = self.x0_values.shape[0]
        self.predicts_x0 = True

    def predict(self, inp, t):
        return HeatmapStack(self.x0_values.copy(), TAG_RAW)


def test_criterion_7_oracle_denoiser_convergence():
    T = 10
    sched = make_linear_schedule(T, 1e-3, 0.2)
    cfg = BlurConfig()
    rng = np.random.default_rng(7)
    true_x0 = rng.uniform(-1, 1, (2, 8, 8))
    d = _TrueStackDenoiser(true_x0)
    y = ReferenceImage(rng.uniform(-1, 1, (1, 8, 8)))
    result = sample_multistep(d, y, sched, cfg, rng=70)
    gap = float(np.abs(result.x0.values - true_x0).max())

    # the last transition adds no noise: two generators, identical outputs
    x1 = HeatmapStack(rng.standard_normal((2, 8, 8)), TAG_RAW)
    out_a, _ = reverse_step(d, y, x1, 1, sched, cfg, np.random.default_rng(1))
    out_b, _ = reverse_step(d, y, x1, 1, sched, cfg, np.random.default_rng(2))
    noise_free = bool(np.array_equal(out_a.values, out_b.values))

    ok = gap <= 1e-2 and noise_free
    report(7, "oracle-denoiser convergence", ok,
           f"final per-pixel gap {gap:.2e}, t=1 noise-free {noise_free}")


def test_criterion_8_desk_end_to_end(tmp_path):
    # run in a subprocess with the kernel backend pinned: per-call backend
    # parity is 1e-12, but over ~20k optimizer steps the rounding differences
    # grow into different trained networks, so the reproducible end-to-end
    # figure fixes the backend the same way it fixes the seed
    driver = Path(__file__).with_name("_desk_driver.py")
    result_path = tmp_path / "result.json"
    env = dict(os.environ, SALTPEPPER_BACKEND="numba")
    proc = subprocess.run(
        [sys.executable, str(driver), str(result_path), str(tmp_path / "run")],
        env=env, capture_output=True, text=True, timeout=1500)
    assert proc.returncode == 0, f"desk driver failed:\n{proc.stderr[-2000:]}"
    r = json.loads(result_path.read_text())
    ok = (r["multi_px"] <= 2.0 and r["multi_px"] <= r["single_px"]
          and r["overfit_px"] <= 1.5 and r["elapsed_s"] <= 1200.0)
    report(8, "desk-scale end-to-end", ok,
           f"multi {r['multi_px']:.3f} px, single {r['single_px']:.3f} px, "
           f"overfit {r['overfit_px']:.3f} px, {r['elapsed_s']:.0f} s, {r['backend']} backend")


SMALL = [
    "--data.height=32",
    "--data.width=32",
    "--data.n_landmarks=2",
    "--data.train_records=3",
    "--data.val_records=2",
    "--data.test_records=1",
    "--schedule.T=4",
    "--schedule.beta_end=0.2",
    "--blur.sigma_max=2.0",
    "--model.enc_plan=8,16",
    "--model.dec_plan=8",
    "--model.time_dim=16",
    "--train.epochs=1",
    "--augment.enabled=false",
]


def _pipeline(root):
    """synth -> train -> sample -> eval; returns {relative name: bytes}."""
    corpus = root / "corpus"
    run = root / "run"
    samples = root / "samples"
    assert main(["synth", "--out", str(corpus), *SMALL]) == 0
    assert main(["train", "--corpus", str(corpus), "--out", str(run), *SMALL]) == 0
    assert main(["sample", "--checkpoint", str(run / "checkpoint.spck"), "--corpus", str(corpus),
                 "--split", "test", "--out", str(samples), *SMALL]) == 0
    preds = root / "preds"
    gt = root / "gt"
    preds.mkdir()
    gt.mkdir()
    for f in samples.glob("*_pred.csv"):
        plain = f.name.replace("_pred", "")
        (preds / plain).write_bytes(f.read_bytes())
        (gt / plain).write_bytes((corpus / "annotations" / "truth" / plain).read_bytes())
    report_path = root / "eval.json"
    assert main(["eval", "--pred-dir", str(preds), "--gt-dir", str(gt),
                 "--out", str(report_path)]) == 0
    out = {f"csv/{p.name}": p.read_bytes() for p in sorted(samples.glob("*.csv"))}
    out["eval.json"] = report_path.read_bytes()
    return out


def test_criterion_9_pipeline_determinism(tmp_path):
    first = _pipeline(tmp_path / "a")
    second = _pipeline(tmp_path / "b")
    same = first == second
    names = sorted(first)
    ok = same and len(names) >= 2
    report(9, "pipeline determinism", ok,
           f"{len(names)} artifacts byte-identical across runs: {same}")
