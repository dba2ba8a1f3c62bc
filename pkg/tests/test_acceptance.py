"""End-to-end acceptance checks; each prints one PASS/FAIL line.

The desk-scale benchmark trains fifteen models and takes well over an
hour on a single slow core.
"""

import json
import math
import time

import numpy as np
import pytest

from ega import autodiff as ad
from ega import objective
from ega.attack import epsilon_schedule, pgd
from ega.autodiff import Tensor
from ega.cli import ablation_plan, main, parse_config
from ega.data import generate
from ega.errors import ConfigError
from ega.localization import TAU_GRID
from ega.metrics import box_accuracy_table, corloc, iou, max_box_acc_v2, pxap, top1_localization
from ega.model import ArchConfig, Branch, build_model, compute_cam, encode_checkpoint
from ega.objective import LossWeights, ega_loss, entropy_loss, entropy_per_map
from ega.trainer import SGD, TrainConfig, evaluate, train, train_step
from gradcheck import max_rel_error, numerical_grad
from test_metrics import brute_iou_counts, brute_pxap, passes, random_box, random_records
from test_objective import direct_entropy

F64 = np.float64

# the fixed benchmark: seed-0 data, a narrow backbone that fits the time budget
BENCH_ARCH = ArchConfig(stages=((8,), (16,), (32,)))
BENCH_TRAIN = 2000
BENCH_TEST = 500
BENCH_SEEDS = (0, 1, 2, 3, 4)
BENCH_WEIGHTS = dict(lambda_clean=0.001, lambda_adv=0.0002)
RUN_BUDGET = 600.0


@pytest.fixture
def verdict(capsys):
    def report(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
        return ok
    return report


def t64(a):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=True, dtype=F64)


def op_error(op, arrays, rng, h=1e-4):
    """Worst relative error of analytic vs numeric gradients of sum(op * r)."""
    tensors = [t64(a) for a in arrays]
    out = op(*tensors)
    r = rng.standard_normal(out.shape)
    ad.backward(ad.tsum(ad.mul(out, Tensor(r, dtype=F64))))
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [Tensor(x if j == i else arrays[j], dtype=F64) for j in range(len(arrays))]
            return float((op(*args).data * r).sum())
        worst = max(worst, max_rel_error(tensors[i].grad, numerical_grad(f, a.copy(), h)))
    return worst


def _bn_train(x, g, b):
    c = x.shape[1]
    return ad.batch_norm(x, g, b, np.zeros(c), np.ones(c), True)


def _bn_eval(x, g, b):
    c = x.shape[1]
    return ad.batch_norm(x, g, b, np.linspace(-0.3, 0.3, c), np.linspace(0.5, 2.0, c), False)


def op_instances(rng):
    """(name, op, inputs) generators covering every differentiable primitive."""
    n, c = int(rng.integers(2, 4)), int(rng.integers(1, 4))
    hw = 2 * int(rng.integers(2, 4))
    x = rng.standard_normal((n, c, hw, hw))
    k = int(rng.integers(1, 4))
    w = rng.standard_normal((k, c, 3, 3))
    labels = rng.integers(0, 4, n)
    rows = rng.integers(0, 3, 4)
    positive = rng.uniform(0.2, 2.0, (n, c))
    return [
        ("conv2d", lambda a, b, d: ad.conv2d(a, b, d, pad=1), [x, w, rng.standard_normal(k)]),
        ("conv2d/stride2", lambda a, b: ad.conv2d(a, b, None, stride=2), [x, w]),
        ("batch_norm/train", _bn_train, [x, rng.standard_normal(c) + 1.5, rng.standard_normal(c)]),
        ("batch_norm/eval", _bn_eval, [x, rng.standard_normal(c), rng.standard_normal(c)]),
        # keep values away from the kink so central differences stay valid
        ("relu", ad.relu, [np.where(np.abs(x) < 0.05, 0.1, x)]),
        ("max_pool2", ad.max_pool2, [x]),
        ("global_avg_pool", ad.global_avg_pool, [x]),
        ("linear", ad.linear, [rng.standard_normal((n, 5)), rng.standard_normal((4, 5)), rng.standard_normal(4)]),
        ("softmax_cross_entropy", lambda z: ad.softmax_cross_entropy(z, labels), [rng.standard_normal((n, 4))]),
        ("add", ad.add, [x, rng.standard_normal(x.shape)]),
        ("sub", ad.sub, [x, rng.standard_normal((1, c, 1, 1))]),
        ("mul", ad.mul, [x, rng.standard_normal((n, 1, hw, hw))]),
        ("log", ad.log, [positive]),
        ("clamp", lambda a: ad.clamp(a, -0.5, 0.5), [np.where(np.abs(np.abs(x) - 0.5) < 0.05, 0.0, x)]),
        ("sum/axis", lambda a: ad.tsum(a, axis=(2, 3)), [x]),
        ("mean", lambda a: ad.mean(a, axis=1), [x]),
        ("reshape", lambda a: ad.reshape(a, (n, -1)), [x]),
        ("transpose", lambda a: ad.transpose(a, (0, 2, 3, 1)), [x]),
        ("take_rows", lambda a: ad.take_rows(a, rows), [rng.standard_normal((3, 5))]),
    ]


def composite_error(rng, monkeypatch, coords=6):
    """FD check of the full loss on a tiny float64 model, extrema pinned."""
    arch = ArchConfig(num_classes=3, input_size=8, stages=((3,), (4,)))
    model = build_model(arch, seed=int(rng.integers(1 << 30))).astype(F64)
    x = rng.random((2, 3, 8, 8))
    adv = np.clip(x + rng.choice([-1, 1], x.shape) * 2 / 255, 0, 1)
    y = rng.integers(0, 3, 2)
    weights = LossWeights(float(rng.uniform(0.3, 1.5)), float(rng.uniform(0.0, 0.25)))
    real = objective.cam_to_probability
    recorded = []

    def recording(cam, extrema=None):
        values = getattr(cam, "values", cam)
        data = np.asarray(getattr(values, "data", values))
        recorded.append((data.min(axis=(-2, -1)), data.max(axis=(-2, -1))))
        return real(cam, extrema)

    monkeypatch.setattr(objective, "cam_to_probability", recording)
    total, _ = ega_loss(model, x, adv, y, weights)
    ad.backward(total)
    frozen = list(recorded)

    def value():
        calls = iter(frozen)
        monkeypatch.setattr(objective, "cam_to_probability", lambda cam, extrema=None: real(cam, next(calls)))
        return ega_loss(model, x, adv, y, weights)[0].item()

    # extremal pixels sit 1e-6 inside the probability clamp; a small step keeps them there
    worst, h = 0.0, 1e-7
    for name, p in model.named_parameters():
        if p.grad is None:
            continue
        flat = p.data.reshape(-1)
        num = np.zeros(flat.size)
        picks = rng.choice(flat.size, min(coords, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            fp = value()
            flat[i] = old - h
            fm = value()
            flat[i] = old
            num[i] = (fp - fm) / (2 * h)
        # error relative to the largest gradient entry of the whole tensor
        scale = max(np.abs(p.grad).max(), 1e-12)
        worst = max(worst, float(np.abs(p.grad.reshape(-1)[picks] - num[picks]).max() / scale))
    monkeypatch.setattr(objective, "cam_to_probability", real)
    return worst


def test_gradient_suite(verdict, monkeypatch):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    per_op = {}
    for _ in range(20):
        for name, op, arrays in op_instances(rng):
            per_op[name] = max(per_op.get(name, 0.0), op_error(op, arrays, rng))
    composite = max(composite_error(rng, monkeypatch) for _ in range(20))
    elapsed = time.perf_counter() - start
    worst_op = max(per_op, key=per_op.get)
    ok = max(per_op.values()) < 1e-3 and composite < 5e-3 and elapsed < 120
    verdict(1, ok, f"{len(per_op)} ops x 20 instances, worst {worst_op} {per_op[worst_op]:.2e}; "
                   f"composite x 20 worst {composite:.2e}; {elapsed:.0f}s")
    assert ok


def test_cam_identity(verdict):
    rng = np.random.default_rng(202)
    worst = 0.0
    for trial in range(100):
        stages = tuple((int(rng.integers(2, 9)),) for _ in range(int(rng.integers(1, 4))))
        arch = ArchConfig(num_classes=int(rng.integers(2, 7)), input_size=16, stages=stages)
        model = build_model(arch, seed=trial)
        model.params["head.bias"].data[:] = rng.standard_normal(arch.num_classes)
        x = rng.random((3, 3, 16, 16)).astype(np.float32)
        out = model.forward(x, Branch.MAIN, "eval")
        for c in range(arch.num_classes):
            cam = compute_cam(out, model, c).values.data
            expected = out.logits.data[:, c] - model.params["head.bias"].data[c]
            worst = max(worst, float(np.abs(cam.mean(axis=(1, 2)) - expected).max()))
    ok = worst <= 1e-5
    verdict(2, ok, f"100 models, max |mean CAM - (logit - bias)| = {worst:.2e}")
    assert ok


def test_pgd_contract(verdict):
    rng = np.random.default_rng(303)
    bounded = rises = unchanged = 0
    for trial in range(100):
        arch = ArchConfig(input_size=16, stages=((4,), (6,)))
        model = build_model(arch, seed=trial)
        eps = int(rng.integers(1, 5))
        cfg = epsilon_schedule(eps)
        x = rng.random((4, 3, 16, 16)).astype(np.float32)
        x[0, 0, :2] = 0.0
        x[1, 1, :2] = 1.0
        y = rng.integers(0, 5, 4)
        before = encode_checkpoint(model.arch, model.state_dict())
        losses = []
        x_adv = pgd(model, x, y, cfg, losses)
        delta = x_adv.astype(F64) - x.astype(F64)
        bounded += bool(np.abs(delta).max() <= eps / 255 + 1e-7 and x_adv.min() >= 0 and x_adv.max() <= 1)
        rises += losses[-1] >= losses[0]
        unchanged += encode_checkpoint(model.arch, model.state_dict()) == before
    ok = bounded == 100 and rises >= 95 and unchanged == 100
    verdict(3, ok, f"bounds {bounded}/100, loss rises {rises}/100, state unchanged {unchanged}/100")
    assert ok


def test_dual_bn_isolation(verdict):
    data = generate(7, "train", 64)
    test = generate(7, "test", 40)
    arch = ArchConfig(stages=((4,), (6,), (8,)))
    cfg = TrainConfig(mode="ega", epsilon=2, batch_size=16, arch=arch).validate()
    model = build_model(arch, seed=cfg.seed)
    replay = model.clone()
    opt = SGD(model, cfg.lr, cfg.momentum, cfg.weight_decay)
    identical = True
    for idx in np.split(np.arange(64), 4):
        x, y = data.images[idx], data.labels[idx]
        for name, p in model.named_parameters():
            replay.params[name].data = p.data.copy()
        replay.forward(x, Branch.MAIN, "train")
        train_step(model, opt, x, y, cfg)
        for k, v in model.branch_state(Branch.MAIN).items():
            if "running" in k:
                identical &= v.tobytes() == replay.buffers[k].tobytes()
    before = evaluate(model, test).to_dict()
    model.reset_auxiliary(float("nan"))
    after = evaluate(model, test).to_dict()
    ok = identical and before == after
    verdict(4, ok, f"main stats bit-identical to clean replay: {identical}; eval unchanged without aux: {before == after}")
    assert ok


def test_metric_oracles(verdict):
    rng = np.random.default_rng(505)
    mismatches = {"iou": 0, "top1_loc": 0, "corloc": 0, "maxboxaccv2": 0, "pxap": 0}
    pxap_err = 0.0
    for _ in range(200):
        a, b = random_box(rng), random_box(rng)
        inter, union = brute_iou_counts(a, b)
        mismatches["iou"] += iou(a, b) != inter / union
        recs = random_records(rng, int(rng.integers(1, 8)), taus=sorted(set(TAU_GRID) | {0.2}))
        n = len(recs)
        loc = sum(r.predicted == r.true and passes(r.pred_box, r.gt_box, 0.5) for r in recs)
        cor = sum(passes(r.boxes[0.2], r.gt_box, 0.5) for r in recs)
        mismatches["top1_loc"] += round(top1_localization(recs) * n) != loc
        mismatches["corloc"] += round(corloc(recs) * n) != cor
        table = box_accuracy_table(recs)
        best = 0
        for i, delta in enumerate((0.3, 0.5, 0.7)):
            counts = [sum(passes(r.boxes[t], r.gt_box, delta) for r in recs) for t in TAU_GRID]
            mismatches["maxboxaccv2"] += list(table[i]) != counts
            best += max(counts)
        mismatches["maxboxaccv2"] += abs(max_box_acc_v2(recs) - best / (3 * n)) > 1e-12
        maps = random_records(rng, int(rng.integers(1, 3)), taus=(0.2,), with_maps=True, size=8)
        while not any(r.gt_mask.any() for r in maps):
            maps = random_records(rng, 1, taus=(0.2,), with_maps=True, size=8)
        err = abs(pxap(maps) - brute_pxap(maps))
        pxap_err = max(pxap_err, err)
        mismatches["pxap"] += int(err > 1e-6)
    ok = not any(mismatches.values())
    verdict(5, ok, f"200 instances each, mismatches {mismatches}, max PxAP deviation {pxap_err:.1e}")
    assert ok


def test_entropy_loss(verdict):
    rng = np.random.default_rng(606)
    oracle_err = affine_err = 0.0
    in_bounds = 0
    for _ in range(1000):
        h, w = int(rng.integers(2, 17)), int(rng.integers(2, 17))
        cam = rng.standard_normal((1, h, w)) * rng.uniform(0.01, 10)
        value = entropy_per_map(Tensor(cam, dtype=F64)).data[0]
        oracle_err = max(oracle_err, abs(value - direct_entropy(cam[0])))
        a, b = rng.uniform(0.1, 10), rng.uniform(-5, 5)
        shifted = entropy_loss(Tensor(a * cam + b, dtype=F64)).item()
        affine_err = max(affine_err, abs(shifted - value))
        in_bounds += bool(0 <= value <= h * w / math.e)
    ok = oracle_err <= 1e-6 and affine_err <= 1e-6 and in_bounds == 1000
    verdict(6, ok, f"1000 maps: oracle err {oracle_err:.1e}, affine err {affine_err:.1e}, in bounds {in_bounds}/1000")
    assert ok


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    train_set = generate(0, "train", BENCH_TRAIN)
    test_set = generate(0, "test", BENCH_TEST)
    runs = {}
    for mode in ("baseline", "adversarial", "ega"):
        for seed in BENCH_SEEDS:
            kw = BENCH_WEIGHTS if mode == "ega" else {}
            cfg = TrainConfig(mode=mode, epochs=20, seed=seed, arch=BENCH_ARCH, **kw)
            out = tmp_path_factory.mktemp(f"{mode}-{seed}")
            start = time.perf_counter()
            res = train(cfg, train_set, out_dir=out)
            seconds = time.perf_counter() - start
            steps = [json.loads(line) for line in open(out / "train_log.jsonl") if '"step"' in line]
            runs[mode, seed] = dict(report=evaluate(res.model, test_set, with_pxap=False),
                                    seconds=seconds, steps=steps)
    return runs


def _mean(runs, mode, key):
    return float(np.mean([getattr(runs[mode, s]["report"], key) for s in BENCH_SEEDS]))


def test_benchmark_baseline_accuracy(benchmark, verdict):
    accs = [benchmark["baseline", s]["report"].top1_cls_acc for s in BENCH_SEEDS]
    slowest = max(r["seconds"] for r in benchmark.values())
    ok = np.mean(accs) >= 0.90 and slowest < RUN_BUDGET
    verdict("7a", ok, f"baseline top1_cls_acc mean {np.mean(accs):.3f} (seeds {[round(a, 3) for a in accs]}); "
                      f"slowest run {slowest:.0f}s")
    assert ok


def test_benchmark_localization_order(benchmark, verdict):
    base, adv, ega = (_mean(benchmark, m, "corloc") for m in ("baseline", "adversarial", "ega"))
    wins = sum(benchmark["ega", s]["report"].corloc > benchmark["baseline", s]["report"].corloc for s in BENCH_SEEDS)
    per_seed = {m: [round(benchmark[m, s]["report"].corloc, 3) for s in BENCH_SEEDS]
                for m in ("baseline", "adversarial", "ega")}
    ok = ega >= adv - 0.02 and adv >= base - 0.02 and wins >= 3
    verdict("7b", ok, f"CorLoc means baseline {base:.3f} adversarial {adv:.3f} ega {ega:.3f} "
                      f"(ega >= adversarial - 0.02: {ega >= adv - 0.02}, adversarial >= baseline - 0.02: "
                      f"{adv >= base - 0.02}); ega beats baseline in {wins}/5, need 3; per seed {per_seed}")
    assert ok


def clean_loss_drop(steps, epochs=5, window=5):
    """Relative fall of clean CE from the first steps to the end of epoch ``epochs``."""
    start = np.mean([r["clean_ce"] for r in steps[:window]])
    end = np.mean([r["clean_ce"] for r in steps if r["epoch"] == epochs - 1][-window:])
    return 1 - end / start


def test_benchmark_ega_clean_loss_halves(benchmark, verdict):
    drops = [float(clean_loss_drop(benchmark["ega", s]["steps"])) for s in BENCH_SEEDS]
    ok = min(drops) >= 0.5
    verdict("7 (training dynamics)", ok, f"ega clean_ce drop over the first 5 epochs {[round(d, 3) for d in drops]}")
    assert ok


def test_ablation_schedule(verdict):
    plan = ablation_plan([0], ["epsilon", "lambda"])
    steps = {c["epsilon"]: c["steps"] for c in plan if c["section"] == "epsilon"}
    pairs = [(c["lambda_clean"], c["lambda_adv"]) for c in plan if c["section"] == "lambda"]
    schedule_ok = steps == {1: 1, 2: 3, 3: 4, 4: 5} and all(epsilon_schedule(e).steps == n for e, n in steps.items())
    pairs_ok = pairs == [(1.0, 0.01), (0.1, 0.01), (0.01, 0.002), (0.001, 0.0002), (3.0, 1.0)]
    rejected = 0
    for lc, la in [(0.01, 0.01), (0.001, 0.01), (0.0, 0.0)]:
        try:
            parse_config(f"mode = ega\nlambda_clean = {lc}\nlambda_adv = {la}\n")
        except ConfigError:
            rejected += 1
    ok = schedule_ok and pairs_ok and rejected == 3
    verdict(8, ok, f"eps->n {steps}; lambda pairs {pairs}; rejected {rejected}/3 bad orderings")
    assert ok


def test_rerun_reproducibility(verdict, tmp_path):
    data, run = tmp_path / "data", tmp_path / "run"
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text("mode = ega\nepochs = 1\nbatch_size = 8\nepsilon = 2\nstages = 4;6;8\n")
    ckpt = str(run / "model.ega")
    commands = {
        "generate-data": (["generate-data", "--seed", "3", "--size", "24", "--val-size", "5", "--test-size", "10",
                           "--out", str(data)], data / "manifest.json"),
        "train": (["train", "--config", str(cfg), "--data", str(data), "--out", str(run)], run / "manifest.json"),
        "evaluate": (["evaluate", "--checkpoint", ckpt, "--data", str(data), "--report", str(tmp_path / "ev" / "r.json")],
                     tmp_path / "ev" / "r.json.manifest.json"),
        "cam-export": (["cam-export", "--checkpoint", ckpt, "--data", str(data), "--n", "3", "--out",
                        str(tmp_path / "cams")], tmp_path / "cams" / "manifest.json"),
        "attack-demo": (["attack-demo", "--checkpoint", ckpt, "--data", str(data), "--n", "3", "--out",
                         str(tmp_path / "adv")], tmp_path / "adv" / "manifest.json"),
        "ablate": (["ablate", "--data", str(data), "--out", str(tmp_path / "abl"), "--config", str(cfg),
                    "--seeds", "0", "--sections", "modes"], tmp_path / "abl" / "manifest.json"),
    }
    (tmp_path / "ev").mkdir()
    results = {}
    for name, (argv, manifest) in commands.items():
        assert main(argv) == 0, name
        results[name] = main(["rerun", "--manifest", str(manifest), "--out", str(tmp_path / f"re-{name}")]) == 0
    ok = all(results.values())
    verdict(9, ok, f"bit-identical reruns {results}")
    assert ok
