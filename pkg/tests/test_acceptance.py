"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line
in the terminal summary."""

import csv
import json
import math
import time

import numpy as np
import pytest

from hct import nn
from hct.autograd import Tensor
from hct.cli import main
from hct.data import generate_phantom, payload_checksum, prepare_batch, write_dataset
from hct.evaluation import (
    ablation_run,
    confusion,
    dsc,
    evaluate,
    kfold_split,
    pr_curve,
    precision,
    sensitivity,
    specificity,
)
from hct.gradcheck import CASES, DEFAULT_SEEDS, REL_TOL, run_case
from hct.model import (
    BranchEmbeddings,
    ModelConfig,
    build_variant,
    encoder_branch,
    hyper_decoder,
    init_encoder_branch,
    init_head,
    init_hyper_decoder,
    segmentation_head,
)
from hct.nn import ParamStore
from hct.training import TrainConfig, cross_entropy, train

OVERFIT_STEPS = 500


class Checks:
    """Named boolean checks gathered before a single assert."""

    def __init__(self):
        self.items: list[tuple[str, bool]] = []

    def add(self, name: str, ok) -> None:
        self.items.append((name, bool(ok)))

    @property
    def failed(self) -> list[str]:
        return [n for n, ok in self.items if not ok]


def finish(criterion, number, title, checks: Checks, detail=""):
    failed = checks.failed
    text = detail if not failed else f"failed: {', '.join(failed)}" + (f"; {detail}" if detail else "")
    criterion(number, title, not failed, text)
    assert not failed, text


def test_criterion_1_gradient_suite(criterion):
    started = time.perf_counter()
    worst: dict[str, float] = {}
    failures = []
    for name in CASES:
        for seed in DEFAULT_SEEDS:
            r = run_case(name, seed)
            worst[name] = max(worst.get(name, 0.0), r.max_error)
            if not r.passed:
                failures.append(f"{name}/seed{seed}")
    seconds = time.perf_counter() - started
    checks = Checks()
    checks.add("all ops within tolerance", not failures)
    checks.add("runtime under 2 minutes", seconds < 120)
    checks.add("five seeds per op", len(DEFAULT_SEEDS) >= 5)
    for required in ("conv2d", "residual_block", "layer_norm", "msa", "mlp_block", "transformer_module",
                     "segmentation_head", "hct_end_to_end"):
        checks.add(f"{required} covered", required in CASES)
    top = max(worst, key=worst.get)
    finish(criterion, 1, "gradient suite", checks,
           f"{len(CASES)} ops x {len(DEFAULT_SEEDS)} seeds, worst {top} {worst[top]:.2e} < {REL_TOL:g}, "
           f"{seconds:.0f}s; failures {failures or 'none'}")


def test_criterion_2_shape_and_fusion(criterion):
    cfg = ModelConfig(h=64, w=64, d_embed=256, depth=1)
    rng = np.random.default_rng(0)
    store = ParamStore(np.float64)
    for name, cin in (("pet", 1), ("ct", 1), ("con", 2)):
        init_encoder_branch(store.scope(name), cin, cfg, rng)
    init_hyper_decoder(store.scope("fusion"), cfg, rng)
    init_head(store.scope("head"), cfg.d_embed, cfg.backbone_widths[1], rng)
    pet, ct = rng.random((2, 1, 64, 64)), rng.random((2, 1, 64, 64))

    e_pet, _ = encoder_branch(Tensor(pet), store.scope("pet"), cfg)
    e_ct, _ = encoder_branch(Tensor(ct), store.scope("ct"), cfg)
    e_con, skip = encoder_branch(Tensor(np.concatenate([pet, ct], axis=1)), store.scope("con"), cfg)
    record = []
    fused = hyper_decoder(BranchEmbeddings(e_pet, e_ct, e_con), store.scope("fusion"), cfg, record)
    probs = segmentation_head(fused, skip, store.scope("head"), cfg).data

    checks = Checks()
    checks.add("branches emit 16 tokens of 256", all(e.shape == (2, 16, 256) for e in (e_pet, e_ct, e_con)))
    checks.add("decoder attends over 48 tokens", record[0].shape[-2:] == (48, 48))
    checks.add("decoder emits 16 tokens", fused.shape == (2, 16, 256))
    checks.add("output is (B, 2, 64, 64)", probs.shape == (2, 2, 64, 64))
    err = float(np.abs(probs.sum(axis=1) - 1).max())
    checks.add("pixel sums within 1e-6", err <= 1e-6)
    model_out = build_variant(ModelConfig(d_embed=256, depth=1), seed=0).predict(pet, ct)
    checks.add("full model output shape", model_out.shape == (2, 2, 64, 64))
    checks.add("full model sums within 1e-6", np.abs(model_out.sum(axis=1) - 1).max() <= 1e-6)
    finish(criterion, 2, "shape/fusion invariants", checks, f"max |sum - 1| = {err:.1e}")


def test_criterion_3_zero_weight_identities(criterion):
    checks = Checks()
    rng = np.random.default_rng(1)
    for dtype in (np.float32, np.float64):
        store = ParamStore(dtype)
        nn.init_transformer_module(store.scope("t"), 32, rng)
        for name, t in store.items():
            if ".attn." in name or ".mlp." in name:
                t.data[:] = 0
        x = rng.normal(size=(2, 16, 32)).astype(dtype)
        out = nn.transformer_module(Tensor(x), store.scope("t"), 4).data
        checks.add(f"transformer identity {np.dtype(dtype).name}", np.array_equal(out, x))

    cfg = ModelConfig(d_embed=64)
    store = ParamStore(np.float32)
    init_head(store.scope("h"), 64, 32, rng)
    store["h.final.w"].data[:] = 0
    store["h.final.b"].data[:] = 0
    probs = segmentation_head(Tensor(rng.normal(size=(2, 16, 64)).astype(np.float32)),
                              Tensor(rng.normal(size=(2, 32, 16, 16)).astype(np.float32)), store.scope("h"), cfg)
    checks.add("zero final conv gives exactly 0.5", np.all(probs.data == 0.5))

    model = build_variant(ModelConfig(d_embed=64, depth=2), seed=0)
    model.params["head.final.w"].data[:] = 0
    model.params["head.final.b"].data[:] = 0
    checks.add("full HCT with zero final conv gives 0.5", np.all(model.predict(*rng.random((2, 1, 1, 64, 64))) == 0.5))
    finish(criterion, 3, "zero-weight identities", checks, "exact equality in float32 and float64")


def _brute(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        tp += p and g
        fp += p and not g
        fn += g and not p
        tn += not p and not g
    div = lambda a, b: 1.0 if b == 0 else a / b  # noqa: E731
    return {
        "dsc": div(2 * tp, 2 * tp + fp + fn),
        "precision": div(tp, tp + fp),
        "sensitivity": div(tp, tp + fn),
        "specificity": div(tn, tn + fp),
    }


def test_criterion_4_metric_oracle(criterion):
    rng = np.random.default_rng(2024)
    thresholds = [i / 20 for i in range(21)]
    worst = 0.0
    for _ in range(100):
        prob = rng.random((16, 16))
        gt = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
        pred = prob >= 0.5
        c = confusion(pred, gt)
        ref = _brute(pred, gt)
        for name, fn in (("dsc", dsc), ("precision", precision), ("sensitivity", sensitivity),
                         ("specificity", specificity)):
            worst = max(worst, abs(fn(c) - ref[name]))
        for t, p, r in pr_curve(prob, gt, thresholds):
            ref_t = _brute(prob >= t, gt)
            worst = max(worst, abs(p - ref_t["precision"]), abs(r - ref_t["sensitivity"]))
    checks = Checks()
    checks.add("100 random pairs within 1e-9", worst <= 1e-9)
    from hct.evaluation import ConfusionCounts

    checks.add("DSC(tp=1,fp=1,fn=3) = 1/3", abs(dsc(ConfusionCounts(1, 1, 3, 95)) - 1 / 3) <= 1e-12)
    ce = float(cross_entropy(np.full((1, 2, 8, 8), 0.5), rng.integers(0, 2, (1, 8, 8))).data)
    checks.add("uniform cross-entropy = ln 2", abs(ce - math.log(2)) <= 1e-9)
    finish(criterion, 4, "metric oracle equivalence", checks, f"max deviation {worst:.1e}")


@pytest.fixture(scope="module")
def overfit_data():
    return generate_phantom(7, 4, 1, 64, 64)


@pytest.mark.parametrize("variant", ["HCT", "EF-TN", "HF-FCN"])
def test_criterion_5_learnability(criterion, overfit_data, variant, request):
    cfg = ModelConfig(h=64, w=64, d_embed=64, depth=2, variant=variant)
    batch_size = 2
    epochs = OVERFIT_STEPS * batch_size // len(overfit_data)
    tcfg = TrainConfig(lr0=1e-4, poly_power=0.9, epochs=epochs, batch_size=batch_size, augment=False, seed=0)
    started = time.perf_counter()
    result = train(build_variant(cfg, seed=0), overfit_data, tcfg)
    seconds = time.perf_counter() - started
    report = evaluate(result.model, overfit_data.samples)
    per_sample = [round(s["dsc"], 3) for s in report.per_sample]

    checks = Checks()
    checks.add("at most 500 steps", result.state.t <= OVERFIT_STEPS)
    checks.add("training DSC >= 0.95", report.dsc / 100 >= 0.95)
    checks.add("under 15 minutes", seconds < 900)
    detail = f"{variant}: DSC {report.dsc / 100:.4f} per-sample {per_sample}, {result.state.t} steps, {seconds:.0f}s"
    _OVERFIT[variant] = (not checks.failed, detail)
    text = "; ".join(d for _, d in _OVERFIT.values())
    passed = all(ok for ok, _ in _OVERFIT.values())
    if len(_OVERFIT) == 3 or not passed:
        criterion(5, "learnability (overfit oracle)", passed, text)
    assert not checks.failed, detail


_OVERFIT: dict[str, tuple[bool, str]] = {}


def test_criterion_6_protocol(criterion):
    checks = Checks()
    patients = [p for p in range(70) for _ in range(3)]
    folds = kfold_split(patients, 5, seed=11)
    checks.add("five folds", len(folds) == 5)
    checks.add("56/14 per fold", all(len(tr) == 56 and len(te) == 14 for tr, te in folds))
    checks.add("patient-disjoint", all(not set(tr) & set(te) for tr, te in folds))
    tests = [set(te) for _, te in folds]
    checks.add("test folds partition patients", set().union(*tests) == set(range(70)) and sum(map(len, tests)) == 70)
    checks.add("deterministic", folds == kfold_split(patients, 5, seed=11))
    finish(criterion, 6, "protocol integrity", checks, "70 patients -> 56/14 x 5")


def _log_rows(path):
    with open(path) as fh:
        return [(r["epoch"], r["mean_loss"], r["lr"]) for r in csv.DictReader(fh)]


def test_criterion_7_determinism_and_resume(criterion, tmp_path):
    checks = Checks()
    for run in ("a", "b"):
        assert main(["synth", "--seed", "7", "--patients", "5", "--slices", "2", "--size", "32",
                     "--out", str(tmp_path / run / "data")]) == 0
    a, b = tmp_path / "a" / "data", tmp_path / "b" / "data"
    same_files = all(f.read_bytes() == (b / f.name).read_bytes() for f in a.iterdir())
    checks.add("dataset files bit-identical", same_files and payload_checksum(a) == payload_checksum(b))

    model = ["--d-embed", "8", "--depth", "1", "--heads", "2", "--widths", "2,2,4,4", "--seed", "3"]
    for run in ("a", "b"):
        data = str(tmp_path / run / "data")
        assert main(["train", "--dataset", data, *model, "--epochs", "3", "--out", str(tmp_path / run / "train")]) == 0
        assert main(["ablate", "--dataset", data, *model, "--epochs", "1", "--variants", "EF-TN,HCT",
                     "--out", str(tmp_path / run / "ablate")]) == 0
    checks.add("epoch-loss logs identical",
               _log_rows(tmp_path / "a" / "train" / "train_log.csv")
               == _log_rows(tmp_path / "b" / "train" / "train_log.csv"))
    checks.add("metrics tables identical",
               (tmp_path / "a" / "ablate" / "metrics.csv").read_bytes()
               == (tmp_path / "b" / "ablate" / "metrics.csv").read_bytes())

    ds = generate_phantom(7, 3, 1, 32, 32)
    tiny = ModelConfig(h=32, w=32, d_embed=16, depth=1, n_heads=2, backbone_widths=(2, 2, 4, 4))
    tcfg = TrainConfig(epochs=4, seed=5)
    full = train(build_variant(tiny, seed=1), ds, tcfg, out_dir=tmp_path / "full", checkpoint_every=2)
    resumed = train(build_variant(tiny, seed=1), ds, tcfg, out_dir=tmp_path / "resumed",
                    resume_from=tmp_path / "full" / "epoch_0002.ckpt")
    gap = max(abs(x.mean_loss - y.mean_loss) for x, y in zip(full.log, resumed.log))
    checks.add("resume within 1e-6 per epoch", len(resumed.log) == 4 and gap <= 1e-6)
    finish(criterion, 7, "determinism and persistence", checks, f"resume max per-epoch gap {gap:.1e}")


BENCHMARK_EPOCHS = 4


def test_criterion_8_ablation_benchmark(criterion, tmp_path):
    ds = generate_phantom(7, 20, 4, 64, 64)
    write_dataset(ds, tmp_path / "data")
    mcfg = ModelConfig(h=64, w=64, d_embed=64, depth=2)
    tcfg = TrainConfig(epochs=BENCHMARK_EPOCHS, seed=7)
    started = time.perf_counter()
    result = ablation_run(ds, ["EF-TN", "LF-TN", "HCT"], tcfg, mcfg, out_dir=tmp_path / "report", k=5)
    seconds = time.perf_counter() - started
    summary = json.loads((tmp_path / "report" / "summary.json").read_text())
    with open(tmp_path / "report" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))

    checks = Checks()
    checks.add("80 samples", len(ds) == 80)
    checks.add("15 metric rows", len(rows) == 15)
    checks.add("PR file per variant", all((tmp_path / "report" / f"pr_{v}.csv").is_file()
                                          for v in ("EF-TN", "LF-TN", "HCT")))
    checks.add("ordering recorded", summary["fusion_ordering"]["status"] in ("observed", "not observed"))
    table = ", ".join(f"{v} DSC {m['dsc']:.2f}" for v, m in result.means.items())
    finish(criterion, 8, "ablation harness (reported, non-gating)", checks,
           f"{table}; HF > EF > LF {summary['fusion_ordering']['status']} "
           f"({BENCHMARK_EPOCHS} epochs/fold, {seconds:.0f}s)")
