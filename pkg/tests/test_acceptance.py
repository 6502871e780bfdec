"""Acceptance suite: one test per criterion, with a PASS/FAIL summary line each.

The empirical criteria (5 to 9) share one trained zoo built once per session:
three classifiers on the synthetic shapes, ATN generators against cnn-a at
four budgets, a no-robust ATN, and a noise-hardened evaluation model.
"""

import filecmp
import json
import time

import numpy as np
import pytest

from atnlab import attacks, cli, data, losses, nets
from atnlab.attacks import AtnTrainConfig, AttackConfig
from atnlab.budget import violations
from atnlab.evaluation import AttackSpec, DefenseSpec, GeneratorBank, epsilon_sweep, transfer_matrix
from atnlab.robust import RngStream, RobustConfig, apply_random_noise
from atnlab.tensor import OPS, Graph, grad_check

SIDE = 32
NUM_CLASSES = 10
TRAIN_COUNT = 1500
EVAL_COUNT = 300
ZOO_SEEDS = {"cnn-a": 1, "cnn-b": 2, "cnn-c": 3}
SWEEP = (4.0, 8.0, 16.0, 32.0)
BETA = 6.0
ATN = dict(lr=1e-3, epochs=5, batch_size=32, optimizer="adam", seed=0)


def _gap(a, b):
    return f"{a:.3f} vs {b:.3f}"


# --- shared trained zoo --------------------------------------------------------------


class Zoo:
    def __init__(self):
        t0 = time.process_time()
        ds = data.synth_dataset(0, TRAIN_COUNT, NUM_CLASSES, SIDE)
        self.train, ev = data.split(ds, 0.8, seed=0)
        self.eval = ev.subset(np.arange(min(EVAL_COUNT, len(ev))))
        self.models = {}
        self.train_acc = {}
        for arch, seed in ZOO_SEEDS.items():
            m = nets.build_classifier(arch, NUM_CLASSES, self.train.image_shape, seed=seed)
            hist = nets.train_classifier(m, self.train.images, self.train.labels, epochs=12, seed=seed)
            self.models[arch] = m
            self.train_acc[arch] = hist[-1][1]
        self.classifier_cpu = time.process_time() - t0
        self._gens = {}
        self.gen_cpu = {}
        self._hardened = None

    def generator(self, eps, mode="random_noise"):
        key = (eps, mode)
        if key not in self._gens:
            t0 = time.process_time()
            gen = nets.build_generator(self.train.image_shape, eps, seed=0)
            cfg = AtnTrainConfig([self.models["cnn-a"]], losses.LossConfig("prediction"),
                                 RobustConfig(mode, beta=BETA, seed=0), eps, **ATN)
            attacks.train_atn(gen, cfg, self.train)
            self._gens[key] = gen
            self.gen_cpu[key] = time.process_time() - t0
        return self._gens[key]

    def bank(self, mode="random_noise"):
        return GeneratorBank({e: self.generator(e, mode) for e in SWEEP})

    @property
    def hardened(self):
        """A separately trained cnn-a hardened with noise augmentation."""
        if self._hardened is None:
            m = nets.build_classifier("cnn-a", NUM_CLASSES, self.train.image_shape, seed=7)
            nets.train_classifier(m, self.train.images, self.train.labels, epochs=12, seed=7, noise_beta=BETA)
            self._hardened = m
        return self._hardened


@pytest.fixture(scope="session")
def zoo():
    return Zoo()


def _baseline_spec(zoo, name, eps, alpha=None):
    fn = attacks.BASELINES[name]
    cfg = AttackConfig(eps, steps=10, alpha=alpha, mu=1.0)
    return AttackSpec(name, ("cnn-a",), eps, lambda x: fn(zoo.models["cnn-a"], x, cfg))


def _atn_spec(zoo, eps, mode="random_noise", name="p-atn"):
    gen = zoo.generator(eps, mode)
    return AttackSpec(name, ("cnn-a",), eps, lambda x: attacks.generate_dataset(gen, x, eps))


# --- 1: gradient correctness ----------------------------------------------------------


def _op_graphs():
    r = np.random.default_rng(0)
    out = []

    def head(g, node):
        if len(g.nodes[node].shape) == 3:
            node = g.add("gap", node)
        g.add_param("h.w", r.normal(size=(1, g.nodes[node].shape[0])))
        g.add_param("h.b", np.zeros(1))
        g.add("dense", node, params=("h.w", "h.b"))
        return g

    g = Graph((2, 6, 6))
    g.add_param("w", r.normal(size=(3, 2, 3, 3)))
    g.add_param("b", r.normal(size=3))
    out.append(("conv2d", head(g, g.add("conv2d", 0, params=("w", "b"), stride=2, pad=1)), r.normal(size=(2, 6, 6))))
    g = Graph((2, 4, 4))
    out.append(("maxpool2", head(g, g.add("maxpool2", 0)), r.permutation(32).reshape(2, 4, 4) * 0.1))
    g = Graph((2, 2, 2))
    out.append(("upsample2", head(g, g.add("upsample2", 0)), r.normal(size=(2, 2, 2))))
    g = Graph((1, 4, 4))
    x = r.normal(size=(1, 4, 4))
    out.append(("relu", head(g, g.add("relu", 0)), np.where(np.abs(x) < 0.1, 0.5, x)))
    for op, attrs in [("tanh", {}), ("scale_shift", {"scale": 0.5, "shift": -1.0}), ("softmax", {}),
                      ("clip", {"lo": -0.5, "hi": 0.5})]:
        g = Graph((5,))
        out.append((op, head(g, g.add(op, 0, **attrs)), np.array([-0.9, -0.3, 0.05, 0.2, 1.1])))
    g = Graph((5,))
    g.add_param("w", r.normal(size=(5, 5)))
    g.add_param("b", r.normal(size=5))
    d = g.add("dense", 0, params=("w", "b"))
    s = g.add("add", d, 0)
    out.append(("dense+add", head(g, s), r.normal(size=5)))
    g = Graph((5,))
    g.add_param("w", r.normal(size=(5, 5)))
    g.add_param("b", r.normal(size=5))
    d = g.add("dense", 0, params=("w", "b"))
    a = g.add("l1_mean", d, 0)
    p = g.add("softmax", d)
    m = g.add("margin", p, labels=np.array([3]))
    k = g.add("pick", p, labels=np.array([1]))
    g.add("combine", a, m, k, weights=[0.5, 1.0, 2.0])
    out.append(("l1_mean+margin+pick+combine", g, r.normal(size=5)))
    return out


def _full_graphs():
    out = []
    r = np.random.default_rng(1)
    x = r.uniform(30, 220, size=(1, 16, 16))
    for i, arch in enumerate(nets.ARCHS):
        m = nets.build_classifier(arch, 5, (1, 16, 16), seed=i)
        g = m.graph.copy()
        losses.add_prediction_loss(g, g.output, [int(nets.predict(m, x[None].astype(np.float32))[0])])
        out.append((f"{arch}+prediction", g, x))
        g = m.graph.copy()
        losses.add_threshold(g, losses.add_prediction_loss(g, g.output, [0]), -1.0)
        out.append((f"{arch}+threshold", g, x))
    return out


def test_criterion_01_gradient_correctness(criterion):
    t0 = time.time()
    ops, full = _op_graphs(), _full_graphs()
    errs = {name: grad_check(g, x) for name, g, x in ops}
    # full nets hold thousands of relu/pool kinks; a 1e-3 probe on a first-layer
    # weight crosses some of them, so the deep graphs use a finer step
    errs.update({name: grad_check(g, x, 1e-5, sample=12, seed=3) for name, g, x in full})
    elapsed = time.time() - t0
    covered = {n.op for _, g, _ in ops + full for n in g.nodes[1:]}
    worst = max(errs, key=errs.get)
    ok = errs[worst] <= 1e-3 and elapsed < 60 and covered >= set(OPS)
    criterion(1, ok, f"max rel err {errs[worst]:.2e} ({worst}), {len(covered)} op kinds, {elapsed:.1f}s")
    assert covered >= set(OPS)
    assert errs[worst] <= 1e-3
    assert elapsed < 60


# --- 2: budget feasibility --------------------------------------------------------------


def test_criterion_02_budget_feasibility(criterion):
    r = np.random.default_rng(2)
    model = nets.build_classifier("cnn-a", 5, (1, 16, 16), seed=0)
    gen = nets.build_generator((1, 16, 16), 32, seed=0)
    for k, v in gen.graph.params.items():
        gen.graph.params[k] = (v + r.normal(scale=0.3, size=v.shape)).astype(np.float32)
    runs = {
        "fgsm": lambda x, e: attacks.fgsm(model, x, AttackConfig(e)),
        "pgd": lambda x, e: attacks.pgd(model, x, AttackConfig(e, steps=5)),
        "mifgsm": lambda x, e: attacks.mi_fgsm(model, x, AttackConfig(e, steps=5)),
        "atn": lambda x, e: nets.generate_adversarial(gen, x, e),
    }
    trials = 0
    bad = 0
    for name, run in runs.items():
        for _ in range(100):
            eps = float(r.choice([r.uniform(0.01, 1.0), r.uniform(1, 64), 16.0, 0.1]))
            x = r.uniform(0, 255, size=(25, 1, 16, 16)).astype(np.float32)
            # saturated and near-saturated pixels stress the range clamp
            x[r.random(x.shape) < 0.2] = r.choice([0.0, 255.0, 254.9, 0.05])
            adv = run(x, eps)
            bad += sum(violations(a, b, eps) > 0 for a, b in zip(adv, x))
            trials += len(x)
    criterion(2, bad == 0 and trials >= 10_000, f"{bad} violating trials of {trials}")
    assert trials >= 10_000
    assert bad == 0


# --- 3: baseline degeneracies ------------------------------------------------------------


def test_criterion_03_baseline_degeneracies(criterion):
    model = nets.build_classifier("cnn-a", NUM_CLASSES, (1, SIDE, SIDE), seed=5)
    x = data.synth_dataset(9, 100, NUM_CLASSES, SIDE).images
    same_fgsm = np.array_equal(attacks.fgsm(model, x, AttackConfig(16)),
                               attacks.pgd(model, x, AttackConfig(16, steps=1, alpha=16)))
    same_traj = all(
        np.array_equal(attacks.mi_fgsm(model, x, AttackConfig(16, steps=k, alpha=3.0, mu=0.0)),
                       attacks.pgd(model, x, AttackConfig(16, steps=k, alpha=3.0)))
        for k in range(1, 11)
    )
    criterion(3, same_fgsm and same_traj, f"fgsm==pgd1: {same_fgsm}, mifgsm(mu=0)==pgd at every step: {same_traj}")
    assert same_fgsm and same_traj


# --- 4: loss algebra ----------------------------------------------------------------------


def test_criterion_04_loss_algebra(criterion):
    r = np.random.default_rng(4)
    z = r.normal(scale=r.uniform(0.1, 10, size=(10_000, 1)), size=(10_000, 10))
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    labels = r.integers(0, 10, size=10_000)
    vals, _ = losses.prediction_loss_batch(labels, p)
    scalar = np.array([losses.loss_prediction(labels[i], p[i]) for i in range(0, 10_000, 50)])
    in_range = bool(np.all((vals >= -1) & (vals <= 1))) and np.allclose(scalar, vals[::50])
    sign_ok = bool(np.all(p[vals < 0].argmax(axis=1) != labels[vals < 0]))

    l = r.uniform(-1, 1, size=10_000)
    gammas = r.uniform(-1, 0, size=10_000)
    t, mask = losses.threshold_batch(l, gammas)
    thr_ok = bool(np.all(t >= gammas) and np.all(mask[l < gammas] == 0))
    thr_ok &= all(losses.loss_threshold_grad(a, b) == 0.0 for a, b in zip(l[:500], gammas[:500]) if a < b)

    shape = (1, 16, 16)
    targets = [nets.build_classifier(a, 5, shape, seed=i) for i, a in enumerate(nets.ARCHS)]
    gen = nets.build_generator(shape, 16, seed=0)
    for k, v in gen.graph.params.items():
        gen.graph.params[k] = (v + r.normal(scale=0.05, size=v.shape)).astype(np.float32)
    x = r.uniform(0, 255, size=(8,) + shape).astype(np.float32)
    labs = [nets.predict(m, x) for m in targets]
    weights = [1.0, 0.5, 2.0]
    fused = attacks.atn_step(gen, targets, weights, "prediction", x, labs, 16.0)
    parts = [attacks.atn_step(gen, [m], [1.0], "prediction", x, [lab], 16.0) for m, lab in zip(targets, labs)]
    worst = 0.0
    for k, g in fused.gen_grads.items():
        oracle = sum(w * pt.gen_grads[k].astype(np.float64) for w, pt in zip(weights, parts))
        worst = max(worst, float(np.abs(g - oracle).max() / max(np.abs(oracle).max(), 1e-12)))
    ens_ok = worst <= 1e-5
    ok = in_range and sign_ok and thr_ok and ens_ok
    criterion(4, ok, f"range {in_range}, sign {sign_ok}, threshold {thr_ok}, ensemble rel err {worst:.1e}")
    assert ok


# --- 5 to 9: trend analogs on the trained zoo ------------------------------------------------


def test_criterion_05_whitebox(zoo, criterion):
    t0 = time.process_time()
    eps = 16.0
    x = zoo.eval
    report = transfer_matrix([_atn_spec(zoo, eps), _baseline_spec(zoo, "mifgsm", eps),
                              _baseline_spec(zoo, "fgsm", eps)], zoo.models, x)
    cpu = zoo.classifier_cpu + zoo.gen_cpu[(eps, "random_noise")] + (time.process_time() - t0)
    acc_ok = all(a >= 0.95 for a in zoo.train_acc.values())
    atn = report.cell("p-atn", "cnn-a")
    mi = report.cell("mifgsm", "cnn-a")
    fg = report.cell("fgsm", "cnn-a")
    ok = acc_ok and atn >= 0.9 and mi >= 0.9 and fg < mi and cpu <= 600
    criterion(5, ok, f"train acc {min(zoo.train_acc.values()):.3f}; white-box p-atn {atn:.3f}, "
                     f"mifgsm {mi:.3f}, fgsm {fg:.3f}; {cpu:.0f}s CPU")
    assert acc_ok
    assert atn >= 0.9 and mi >= 0.9
    assert fg < mi
    assert cpu <= 600


def test_criterion_06_blackbox_transfer(zoo, criterion):
    eps = 16.0
    report = transfer_matrix([_atn_spec(zoo, eps), _baseline_spec(zoo, "fgsm", eps),
                              _baseline_spec(zoo, "pgd", eps)], zoo.models, zoo.eval)
    rows = []
    ok = True
    for m in ("cnn-b", "cnn-c"):
        atn = report.cell("p-atn", m)
        best = max(report.cell("fgsm", m), report.cell("pgd", m))
        ok &= atn >= best + 0.05
        rows.append(f"{m}: p-atn {atn:.3f}, best of fgsm/pgd {best:.3f}")
    criterion(6, ok, "; ".join(rows))
    assert ok


def test_criterion_07_noise_robust_enhance(zoo, criterion):
    eps = 16.0
    x = zoo.eval.images
    defense = DefenseSpec("random_noise", beta=BETA, seed=11)
    hardened = {"hardened": zoo.hardened}
    rates = {}
    for mode in ("random_noise", "none"):
        # the hardened model is not among the generator's targets
        spec = AttackSpec("p-atn", (), eps, _atn_spec(zoo, eps, mode).run)
        rates[mode] = transfer_matrix([spec], hardened, x, defense).cell("p-atn", "hardened")
    robust, plain = rates["random_noise"], rates["none"]
    ok = robust >= plain + 0.05
    criterion(7, ok, f"noise-defended model: with noise module {_gap(robust, plain)} without")
    assert ok


def test_criterion_08_resize(zoo, criterion):
    eps = 16.0
    resize = DefenseSpec("resize_chain")
    specs = [_atn_spec(zoo, eps)] + [_baseline_spec(zoo, b, eps) for b in ("fgsm", "pgd", "mifgsm")]
    plain = transfer_matrix(specs[:1], zoo.models, zoo.eval)
    resized = transfer_matrix(specs, zoo.models, zoo.eval, resize)
    drop = plain.cell("p-atn", "cnn-a") - resized.cell("p-atn", "cnn-a")
    atn_bb = resized.cell("p-atn", "blackbox-mean")
    base_bb = {b: resized.cell(b, "blackbox-mean") for b in ("fgsm", "pgd", "mifgsm")}
    ok = drop >= 0.10 and all(atn_bb >= v for v in base_bb.values())
    criterion(8, ok, f"white-box drop {drop:.3f}; black-box under resize p-atn {atn_bb:.3f} vs "
                     + ", ".join(f"{k} {v:.3f}" for k, v in base_bb.items()))
    assert drop >= 0.10
    assert all(atn_bb >= v for v in base_bb.values())


def test_criterion_09_epsilon_sweep(zoo, criterion):
    bank = zoo.bank()
    atn = epsilon_sweep(lambda e: AttackSpec("p-atn", ("cnn-a",), e, lambda x: bank.generate(x, e)),
                        zoo.models, zoo.eval, SWEEP)
    mi = epsilon_sweep(lambda e: _baseline_spec(zoo, "mifgsm", e, alpha=10.0), zoo.models, zoo.eval, SWEEP)
    mi_wb = [mi.cell("mifgsm", "cnn-a", epsilon=e) for e in SWEEP]
    atn_bb = [atn.cell("p-atn", "blackbox-mean", epsilon=e) for e in SWEEP]
    mi_bb = [mi.cell("mifgsm", "blackbox-mean", epsilon=e) for e in SWEEP]
    wb_ok = all(v >= 0.9 for v in mi_wb)
    mono_ok = all(b >= a - 0.05 for a, b in zip(atn_bb, atn_bb[1:]))
    beat_ok = all(a >= m for e, a, m in zip(SWEEP, atn_bb, mi_bb) if e >= 8)
    fmt = lambda v: "[" + ", ".join(f"{u:.3f}" for u in v) + "]"  # noqa: E731
    criterion(9, wb_ok and mono_ok and beat_ok,
              f"mifgsm white-box {fmt(mi_wb)}; black-box p-atn {fmt(atn_bb)} vs mifgsm {fmt(mi_bb)}")
    assert wb_ok
    assert mono_ok
    assert beat_ok


# --- 10: determinism through the CLI -----------------------------------------------------------


def test_criterion_10_manifest_rerun(tmp_path, criterion):
    small = ["--count", "60", "--num-classes", "5", "--side", "16"]
    clf = tmp_path / "clf.ckpt"
    gen = tmp_path / "gen.ckpt"
    arc = tmp_path / "adv.bin"
    csv = tmp_path / "report.csv"
    steps = [
        ["train-classifier", "--arch", "cnn-a", "--epochs", "2", "--out", str(clf)] + small,
        ["train-atn", "--targets", f"{clf}:1.0", "--eps", "8", "--epochs", "1", "--out", str(gen)] + small,
        ["attack", "--method", "pgd", "--model", str(clf), "--eps", "8", "--out", str(arc)] + small,
        ["eval", "--models", str(clf), "--archive", str(arc), "--attack", f"atn:{gen}", "--eps", "8",
         "--out-csv", str(csv)] + small,
    ]
    outputs = [clf, gen, arc, csv]
    codes = [cli.main(s) for s in steps]
    firsts = {}
    for out in outputs:
        firsts[out] = out.read_bytes()
        out.rename(out.with_suffix(out.suffix + ".first"))
    rerun_codes = [cli.main(["rerun", f"{out}.manifest.json"]) for out in outputs]
    same = [filecmp.cmp(out, out.with_suffix(out.suffix + ".first"), shallow=False) for out in outputs]
    manifest = json.loads((tmp_path / "gen.ckpt.manifest.json").read_text())
    ok = codes == [0] * 4 and rerun_codes == [0] * 4 and all(same) and manifest["dataset_id"]
    criterion(10, ok, f"exit codes {codes}/{rerun_codes}, byte-identical outputs {sum(same)}/{len(same)}")
    assert ok


# --- 11: noise calibration ---------------------------------------------------------------------


def test_criterion_11_noise_calibration(criterion):
    x = np.full(1_000_000, 127.5, dtype=np.float32)
    mean = float(np.abs(apply_random_noise(x, 6.0, RngStream(123)).astype(np.float64) - x).mean())
    ok = 5.9 <= mean <= 6.1
    criterion(11, ok, f"mean |noise| at beta=6 over 1e6 draws: {mean:.4f}")
    assert ok
