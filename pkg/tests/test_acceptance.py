"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line (printed in the terminal summary) before
asserting.  Criterion 7 trains the full desk-scale pipeline through the CLI
once per session; criteria 8 and 10 reuse that run.  Set
``VARIFOCAL_ACCEPTANCE_DIR`` to keep the run directory and reuse a finished run.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from _gradsuite import OP_NAMES, check_op
from _oracles import alg1
from varifocal import trainer as T
from varifocal.cli import main
from varifocal.config import load_config
from varifocal.data import load_manifest, pad_to_square, prepare, resize_and_normalize, split_folds
from varifocal.dispatch import CaseProbabilities, dispatch_case
from varifocal.losses import polarity_loss, smooth_l1_slope, smooth_l1_value, type_loss
from varifocal.metrics import accuracy, evaluate, f1_macro, roc_auc_macro
from varifocal.numeric import Tensor, precision
from varifocal.numeric.gradcheck import numerical_gradient, relative_error
from varifocal.synth import build_prototypes, render_chromosome
from varifocal.zoom import (RelativeBox, VarifocalConstants, box_to_pixels, boxcar_energy,
                            localization_backward)

C = VarifocalConstants()

DESK_CONFIG = """
n_cases = 200
seed = 0
fold = 0
image_side = 64
pad_side = 80
t1 = 16
t2 = 32
zoom_side = 32
width_scale = 0.25
batch_size = 32
lr = 1e-4
epochs_gnet = 6
epochs_localizer = 10
epochs_lnet = 6
epochs_localizer_ft = 1
epochs_ensemble = 20
alternation_rounds = 2
"""
WALL_CLOCK_LIMIT_S = 4 * 3600


def record(acceptance, n, ok, detail):
    acceptance[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


# -- 1 ------------------------------------------------------------------------------------


def test_criterion_01_gradient_suite(acceptance):
    t0 = time.perf_counter()
    worst = {name: max(check_op(name, seed) for seed in range(20)) for name in OP_NAMES}
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    record(acceptance, 1, err <= 1e-4 and elapsed < 60,
           f"{len(OP_NAMES)} ops x 20 seeds, worst rel err {err:.2e} ({name}), {elapsed:.1f} s")


# -- 2 ------------------------------------------------------------------------------------


def _sign(where):
    u = RelativeBox(0.5, 0.5, 0.0)
    g = np.zeros((256, 256))
    if where == "right":
        g[108:148, 164:170] = 1.0
    elif where == "below":
        g[164:170, 108:148] = 1.0
    else:
        g[90:94, 90:166] = g[162:166, 90:166] = 1.0
        g[90:166, 90:94] = g[90:166, 162:166] = 1.0
    return localization_backward(g, box_to_pixels(u, C), u, C)


def test_criterion_02_varifocal_gradient(acceptance):
    rng = np.random.default_rng(2)
    worst = 0.0
    with precision(np.float64):
        for _ in range(50):
            u = RelativeBox(*rng.uniform(0.0, 1.0, 3))
            g = rng.standard_normal((256, 256)) * rng.uniform(0.1, 3.0)
            analytic = localization_backward(g, box_to_pixels(u, C), u, C)
            uv = u.as_array()
            numeric = numerical_gradient(lambda: boxcar_energy(-(g * g), RelativeBox.from_array(uv), C), uv)
            worst = max(worst, relative_error(analytic, numeric))
    right, below, ring = _sign("right"), _sign("below"), _sign("ring")
    signs = right[0] < 0 and below[1] < 0 and ring[2] < 0
    record(acceptance, 2, worst <= 1e-3 and signs,
           f"50 pairs, worst rel err {worst:.2e}; sign checks x/y/l {'ok' if signs else 'wrong'}")


# -- 3 ------------------------------------------------------------------------------------


def test_criterion_03_box_geometry(acceptance):
    rng = np.random.default_rng(3)
    bad = 0
    for u in rng.uniform(0.0, 1.0, (10_000, 3)):
        b = box_to_pixels(RelativeBox(*u), C)
        side_ok = 64 <= b.side <= 128 and math.isclose(b.x_br - b.x_tl, b.side) and math.isclose(b.y_br - b.y_tl, b.side)
        inside = b.x_tl >= 0 and b.y_tl >= 0 and b.x_br <= 256 and b.y_br <= 256
        bad += not (side_ok and inside)
    record(acceptance, 3, bad == 0, f"10000 boxes, {bad} violations")


# -- 4 ------------------------------------------------------------------------------------


def test_criterion_04_dispatch_oracle(acceptance):
    rng = np.random.default_rng(4)
    cases = []
    for _ in range(10_000):
        n = int(rng.integers(40, 51))
        p = rng.dirichlet(np.full(24, rng.choice([0.05, 0.3, 1.0])), size=n)
        cases.append(p / p.sum(axis=1, keepdims=True))
    t0 = time.perf_counter()
    results = [dispatch_case(CaseProbabilities(str(i), p), 0.9) for i, p in enumerate(cases)]
    elapsed = time.perf_counter() - t0
    mismatched = conservation = 0
    for p, res in zip(cases, results):
        O, _ = alg1(p, 0.9)
        mismatched += [set(s) for s in res.sets] != [{i - 1 for i in O[k]} for k in range(1, 25)]
        flat = [i for s in res.sets for i in s]
        conservation += sorted(flat) != list(range(len(p)))
    record(acceptance, 4, mismatched == 0 and conservation == 0 and elapsed < 30,
           f"10000 cases, {mismatched} oracle mismatches, {conservation} conservation failures, "
           f"dispatch {elapsed:.1f} s")


# -- 5 ------------------------------------------------------------------------------------


def _row(hot, p=1.0):
    r = np.full(24, (1.0 - p) / 23)
    r[hot] = p
    return r


def test_criterion_05_dispatch_scenarios(acceptance):
    male = np.stack([_row(k) for k in [k for k in range(22) for _ in range(2)] + [22, 23]])
    normal = dispatch_case(CaseProbabilities("male", male))

    tri = np.vstack([male, _row(20, 0.95)])
    tri[40], tri[41] = _row(20, 0.95), _row(20, 0.95)
    trisomy = dispatch_case(CaseProbabilities("t21", tri), 0.9)

    ev = np.stack([_row(20, 0.95), _row(20, 0.95), _row(20, 0.50)])
    ev[2, 21] = 0.3
    ev[2] /= ev[2].sum()
    evict = dispatch_case(CaseProbabilities("evict", ev), 0.9)

    checks = {
        "normal male": normal.warnings == [],
        "trisomy 21": trisomy.sets[20] == [40, 41, 46] and any("type 21" in w for w in trisomy.warnings),
        "eviction": evict.sets[20] == [0, 1] and evict.sets[21] == [2],
    }
    record(acceptance, 5, all(checks.values()), ", ".join(f"{k} {'ok' if v else 'wrong'}" for k, v in checks.items()))


# -- 6 ------------------------------------------------------------------------------------


def test_criterion_06_loss_identities(acceptance):
    with precision(np.float64):
        lt = type_loss(Tensor(np.zeros((1, 24))), [7]).item()
        lp = polarity_loss(Tensor(np.zeros((1, 2))), [0]).item()
    errs = [abs(lt - math.log(24)), abs(lp - math.log(2))]
    eps = 1e-12
    seams = []
    for s in (1.0, -1.0):
        seams += [abs(smooth_l1_value(s * (1 - eps)) - smooth_l1_value(s * (1 + eps))),
                  abs(smooth_l1_slope(s * (1 - eps)) - smooth_l1_slope(s * (1 + eps)))]
    record(acceptance, 6, max(errs) <= 1e-6 and max(seams) <= 1e-9,
           f"CE error {max(errs):.1e}, smooth L1 seam gap {max(seams):.1e}")


# -- 9 (no training needed) -----------------------------------------------------------------


def test_criterion_09_metric_oracles(acceptance):
    f1_two = f1_macro(np.array([[1, 1], [1, 1]]))
    f1_three = f1_macro(np.array([[2, 0, 0], [1, 1, 0], [0, 0, 2]]))
    acc = accuracy([1, 2, 3, 4], [1, 2, 3, 0])
    auc = roc_auc_macro([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ok = f1_two == 0.5 and f1_three == (0.8 + 2 / 3 + 1) / 3 and acc == 0.75 and abs(auc - 0.75) <= 1e-9
    record(acceptance, 9, ok, f"F1 {f1_two}, {f1_three:.6f}; accuracy {acc}; AUC {auc}")


# -- 7, 8, 10: desk-scale synthetic run -------------------------------------------------------


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    keep = os.environ.get("VARIFOCAL_ACCEPTANCE_DIR")
    root = Path(keep) if keep else tmp_path_factory.mktemp("desk")
    root.mkdir(parents=True, exist_ok=True)
    cfg_path = root / "desk.cfg"
    cfg_path.write_text(DESK_CONFIG + f"data_dir = {root / 'data'}\nout_dir = {root / 'runs'}\n")
    fold = root / "runs" / "fold0"
    timing = root / "timing.json"
    if not (timing.is_file() and (fold / "final.vfn").is_file()):
        t0 = time.perf_counter()
        assert main(["gen", "--config", str(cfg_path)]) == 0
        t_gen = time.perf_counter() - t0
        assert main(["train", "--config", str(cfg_path)]) == 0
        timing.write_text(json.dumps({"gen_s": t_gen, "total_s": time.perf_counter() - t0}))
    assert main(["eval", "--config", str(cfg_path), "--dispatch", "--out", str(root / "eval")]) == 0
    return {
        "root": root,
        "cfg": load_config(cfg_path),
        "fold": fold,
        "timing": json.loads(timing.read_text()),
        "report": json.loads((root / "eval" / "report.json").read_text()),
        "components": json.loads((root / "eval" / "components.json").read_text()),
    }


@pytest.fixture(scope="session")
def held_out(desk_run):
    cfg = desk_run["cfg"]
    cases = load_manifest(cfg.manifest_path)
    test_ids = set(split_folds(cases, cfg.seed, cfg.n_folds).test_cases(cfg.fold))
    samples = [s for c in cases if c.case_id in test_ids for s in c.samples]
    return prepare(samples, cfg.preprocess(), cfg.constants())


def test_criterion_07_synthetic_end_to_end(acceptance, desk_run):
    rep, comp, wall = desk_run["report"], desk_run["components"], desk_run["timing"]["total_s"]
    best_single = max(comp["g_net_type_acc"], comp["l_net_type_acc"])
    ok = (rep["acc"] >= 0.90 and rep["polarity_acc"] >= 0.95 and rep["acc"] >= best_single - 0.01
          and wall <= WALL_CLOCK_LIMIT_S)
    record(acceptance, 7, ok,
           f"{rep['n_samples']} held-out images: type {rep['acc']:.4f}, polarity {rep['polarity_acc']:.4f}; "
           f"G {comp['g_net_type_acc']:.4f}, L {comp['l_net_type_acc']:.4f}, ensemble {rep['acc']:.4f}; "
           f"wall-clock {wall / 3600:.2f} h on {os.cpu_count()} core(s)")


def test_criterion_08_dispatch_benefit(acceptance, desk_run):
    rep = desk_run["report"]
    d, plain = rep["acc_per_case_d_mean"], rep["acc_per_case_mean"]
    record(acceptance, 8, d >= plain - 1e-9, f"Acc-per-Case-D {d:.4f} vs Acc-per-Case {plain:.4f}")


def _tiny_run(root: Path) -> tuple[bytes, list]:
    root.mkdir(parents=True)
    cfg = root / "tiny.cfg"
    cfg.write_text(
        "n_cases = 10\nseed = 3\nimage_side = 64\npad_side = 80\nt1 = 16\nt2 = 32\nzoom_side = 32\n"
        "width_scale = 0.1\nbatch_size = 16\nepochs_gnet = 1\nepochs_localizer = 1\nepochs_lnet = 1\n"
        "epochs_localizer_ft = 1\nepochs_ensemble = 1\nalternation_rounds = 1\n"
        f"data_dir = {root / 'data'}\nout_dir = {root / 'runs'}\n")
    for argv in (["gen"], ["train"], ["eval", "--dispatch", "--out", str(root / "eval")]):
        assert main(argv + ["--config", str(cfg)]) == 0
    rows = T.LossLog.read_csv(root / "runs" / "fold0" / "loss_log.csv").rows
    return (root / "eval" / "report.json").read_bytes(), rows


def test_criterion_10_determinism(acceptance, desk_run, held_out, tmp_path):
    rep_a, log_a = _tiny_run(tmp_path / "a")
    rep_b, log_b = _tiny_run(tmp_path / "b")
    train_gap = max(abs(ra[k] - rb[k]) for ra, rb in zip(log_a, log_b) for k in ("L_t", "L_p", "L_u")
                    if ra[k] is not None)
    same_epochs = [r["split"] for r in log_a] == [r["split"] for r in log_b]

    model, stage = T.load_model(desk_run["fold"] / "final.vfn")
    T.save_model(tmp_path / "copy.vfn", model, stage)
    ckpt_same = (tmp_path / "copy.vfn").read_bytes() == (desk_run["fold"] / "final.vfn").read_bytes()
    reloaded, _ = T.load_model(tmp_path / "copy.vfn")
    x = held_out.images[:64]
    p1, p2 = T.predict_batch(model, x), T.predict_batch(reloaded, x)
    predict_same = all(p1[k].tobytes() == p2[k].tobytes() for k in p1)

    args = (p1["type_probs"], held_out.types[:64], p1["polarity_probs"], held_out.polarities[:64],
            held_out.case_ids[:64])
    metrics_same = json.dumps(evaluate(*args).to_dict()) == json.dumps(evaluate(*args).to_dict())

    ok = same_epochs and train_gap <= 1e-6 and rep_a == rep_b and ckpt_same and predict_same and metrics_same
    record(acceptance, 10, ok,
           f"loss log gap {train_gap:.1e}, eval report bit-exact {rep_a == rep_b}, checkpoint bytes equal {ckpt_same}, "
           f"reloaded predictions bit-exact {predict_same}, metrics bit-exact {metrics_same}")


# -- further training oracles on the desk run ----------------------------------------------------------


def test_localizer_pretraining_accuracy(desk_run, held_out):
    model, _ = T.load_model(desk_run["fold"] / "stage2_localizer.vfn")
    model.eval()
    u = T.predict_boxes(model, T.global_pooled(model, held_out.images))
    mae = np.abs(u - held_out.boxes).mean()
    assert mae <= 0.05, f"mean absolute box error {mae:.4f}"
    assert np.abs(u[:, :2] - 0.5).mean() <= 0.05


def test_lnet_not_far_below_gnet(desk_run):
    comp = desk_run["components"]
    assert comp["l_net_type_acc"] >= comp["g_net_type_acc"] - 0.02, comp


def test_clean_class_zero_prototype(desk_run):
    cfg = desk_run["cfg"]
    model, _ = T.load_model(desk_run["fold"] / "final.vfn")
    syn = cfg.synthetic()
    img = render_chromosome(build_prototypes(syn)[0], 1, None, syn, clean=True)
    x = resize_and_normalize(pad_to_square(img, cfg.pad_side), cfg.image_side)
    type_probs, _, _ = T.predict(model, x)
    assert int(np.argmax(type_probs)) == 0


def test_training_fold_not_below_held_out(desk_run):
    cfg_path = desk_run["root"] / "desk.cfg"
    out = desk_run["root"] / "eval_train"
    assert main(["eval", "--config", str(cfg_path), "--split", "train", "--out", str(out)]) == 0
    train_acc = json.loads((out / "report.json").read_text())["acc"]
    assert train_acc >= desk_run["report"]["acc"]


def test_desk_inference_latency(desk_run, held_out):
    model, _ = T.load_model(desk_run["fold"] / "final.vfn")
    x = held_out.images[:32]
    T.predict_batch(model, x[:2])
    t0 = time.perf_counter()
    for i in range(len(x)):
        T.predict(model, x[i])
    per_image = (time.perf_counter() - t0) / len(x)
    assert per_image <= 0.25, f"{1000 * per_image:.0f} ms/image"
