"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the pytest terminal summary, and directly when the
file is run as a script (``python3 tests/test_acceptance.py``).
"""
import json
import math
import time
import warnings
from functools import lru_cache

import numpy as np
import pytest

from conftest import SMALL
from hwsi.cli import main
from hwsi.config import RunConfig
from hwsi.encoders import ccaf_fuse, encode_region, encode_wsi
from hwsi.evaluation import evaluate
from hwsi.gradsuite import N_COORDS, TOL, format_results, run_suite
from hwsi.losses import contrastive_scale_loss, cross_scale_consistency, wsi_batch_loss
from hwsi.numerics import Tensor
from hwsi.spf import dps_topk, hps_select, pairwise_cosine
from hwsi.synthgen import generate_corpus, load_corpus, save_corpus
from hwsi.training import (
    init_params,
    load_checkpoint,
    run_stage,
    save_bytes,
    training_selections,
)
from test_encoders import CFG as SET_CFG
from test_encoders import randomized_params, reference_set_encoder
from test_spf import hub_matrix, naive_hps, naive_topk, random_patches

RESULTS = {}

BA_MIN, R1_MIN, WALL_MAX = 0.85, 0.70, 15 * 60
ABLATION_SEEDS = (0, 1, 2, 3, 4)
WSI_ONLY = dict(w_scale=0.0, w_consistency=0.0)


def record(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}"
    RESULTS[number] = line
    print(line)
    assert passed, line


# -- shared end-to-end runs --------------------------------------------------------

@lru_cache(maxsize=None)
def toy_run(seed: int, wsi_only: bool = False) -> dict:
    """Default corpus, stage 1 then stage 2, evaluated on the held-out split."""
    cfg = RunConfig(seed=seed, **(WSI_ONLY if wsi_only else {})).validate()
    t0 = time.perf_counter()
    corpus = generate_corpus(cfg.gen_config())
    enc = cfg.encoder_config(corpus)
    params = init_params(enc, cfg.seed)
    sel = training_selections(corpus, cfg.spf_config())
    for stage in (1, 2):
        params, _ = run_stage(corpus, params, cfg.stage_config(stage), enc, cfg.loss_config(), cfg.spf_config(),
                              selections=sel)
    test = corpus.split("test")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        zs = evaluate("zeroshot", test, corpus.bank, params, enc, cfg.classes, cfg.spf_config("inference"))
        xm = evaluate("crossmodal", test, corpus.bank, params, enc, cfg.classes, cfg.spf_config("inference"))
    return {"ba": zs.metrics["balanced_accuracy"], "f1": zs.metrics["weighted_f1"],
            "s2r": xm.metrics["slide_to_report_R@1"], "r2s": xm.metrics["report_to_slide_R@1"],
            "n_test": len(test), "classes": cfg.classes, "seconds": time.perf_counter() - t0}


# -- criteria ----------------------------------------------------------------------

def test_criterion_1_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    rc = main(["gradcheck", "--suite", "all"])
    seconds = time.perf_counter() - t0
    table = capsys.readouterr().out
    results = run_suite("all")
    ok = (rc == 0 and seconds < 60.0 and all(r.report.passed for r in results)
          and all(r.report.n_checked >= N_COORDS for r in results))
    worst = max(r.report.max_rel_err for r in results)
    with capsys.disabled():
        print("\n" + format_results(results))
    record(1, "gradient fidelity", ok,
           f"{len(results)} components, worst rel err {worst:.2e} (tol {TOL:g}), "
           f"min coords {min(r.report.n_checked for r in results)}, {seconds:.1f} s; exit {rc}"
           + ("" if "FAIL" not in table else "; table reports FAIL"))


def test_criterion_2_spf_oracle():
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(1000):
        n, d = int(rng.integers(1, 13)), int(rng.integers(1, 9))
        sim = pairwise_cosine(random_patches(rng, n, d))
        kept, _ = hps_select(sim)
        mismatches += kept.tolist() != naive_hps(sim.tolist())[0]
        r = np.round(rng.uniform(-1, 1, size=n), 1)
        k = int(rng.integers(1, 14))
        mismatches += dps_topk(r, k).tolist() != naive_topk(r.tolist(), k)
    kept, stats = hps_select(hub_matrix())
    hub_ok = kept.tolist() == list(range(1, 10)) and abs(stats.threshold - 0.71009) <= 1e-5
    record(2, "SPF oracle equivalence", mismatches == 0 and hub_ok,
           f"{mismatches} mismatches over 1000 instances; hub threshold {stats.threshold:.6f}, "
           f"removed {sorted(set(range(10)) - set(kept.tolist()))}")


def test_criterion_3_set_symmetry():
    p = randomized_params()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 9))
        x = rng.normal(size=(n, SET_CFG.d_cell))
        perm = rng.permutation(n)
        for fn in (ccaf_fuse, encode_region, encode_wsi):
            worst = max(worst, float(np.abs(fn(p, x, SET_CFG).data - fn(p, x[perm], SET_CFG).data).max()))
    two = rng.normal(size=(2, SET_CFG.d_cell))
    four = np.vstack([two, two])
    ref = reference_set_encoder(p, "encoder.ccaf", two, SET_CFG.ccaf_heads, SET_CFG.ccaf_blocks)
    dup = float(np.abs(ccaf_fuse(p, four, SET_CFG).data - ccaf_fuse(p, two, SET_CFG).data).max())
    oracle = float(np.abs(ccaf_fuse(p, two, SET_CFG).data - ref).max())
    record(3, "set-aggregator symmetry", worst <= 1e-10 and dup <= 1e-10 and oracle <= 1e-10,
           f"permutation max diff {worst:.1e}, duplication diff {dup:.1e}, oracle diff {oracle:.1e}")


def test_criterion_4_closed_forms():
    target = math.log1p(math.exp(-1.0))
    scale = contrastive_scale_loss(Tensor(np.eye(2)), Tensor(np.eye(2)), [0, 1], tau=1.0).item()
    wsi1 = wsi_batch_loss(Tensor(np.eye(2)), Tensor(np.eye(2)), 1.0).item()
    sharp = wsi_batch_loss(Tensor(np.eye(8)), Tensor(np.eye(8)), 0.02).item()
    eq = cross_scale_consistency(Tensor([[1.0]]), Tensor([[3.0]]), Tensor([[2.0]]), [0]).item()
    ok = abs(scale - target) <= 1e-9 and abs(wsi1 - target) <= 1e-9 and sharp < 1e-6 and abs(eq - 5.0) <= 1e-12
    record(4, "closed-form losses", ok,
           f"scale {scale:.9f}, wsi {wsi1:.9f} (target {target:.9f}); sharp wsi {sharp:.1e}; consistency {eq!r}")


def test_criterion_5_toy_alignment():
    run = toy_run(0)
    chance_ba, chance_r1 = 1.0 / run["classes"], 1.0 / run["n_test"]
    ok = (run["ba"] >= BA_MIN and min(run["s2r"], run["r2s"]) >= R1_MIN and run["seconds"] <= WALL_MAX
          and run["ba"] >= 5 * chance_ba and min(run["s2r"], run["r2s"]) >= 5 * chance_r1)
    record(5, "end-to-end toy alignment", ok,
           f"zero-shot BA {run['ba']:.3f} (need {BA_MIN}, chance {chance_ba:.3f}), F1 {run['f1']:.3f}; "
           f"R@1 slide->report {run['s2r']:.3f}, report->slide {run['r2s']:.3f} (need {R1_MIN}, "
           f"chance {chance_r1:.3f}); {run['seconds']:.0f} s (limit {WALL_MAX} s)")


def test_criterion_6_ablation_direction():
    full = [toy_run(s)["ba"] for s in ABLATION_SEEDS]
    wsi = [toy_run(s, wsi_only=True)["ba"] for s in ABLATION_SEEDS]
    record(6, "ablation direction", float(np.median(full)) >= float(np.median(wsi)),
           f"median BA full {np.median(full):.3f} vs WSI-only {np.median(wsi):.3f} over seeds "
           f"{list(ABLATION_SEEDS)}; full {[round(v, 3) for v in full]}, WSI-only {[round(v, 3) for v in wsi]}")


def test_criterion_7_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**SMALL, "d_cell": 8, "d_patch": 8, "d_text": 8, "d_joint": 8, "top_k": 3,
                               "epochs_stage1": 4, "epochs_stage2": 2, "batch_stage1": 4, "batch_stage2": 4}))
    checks = {}

    def pipeline(root, stop_after=None):
        data = str(root / "data")
        assert main(["gen", "--config", str(cfg), "--out", data, "--seed", "5"]) == 0
        s1 = str(root / "s1.ckpt")
        if stop_after is None:
            assert main(["train", "--stage", "1", "--data", data, "--ckpt", s1, "--config", str(cfg)]) == 0
        else:
            assert main(["train", "--stage", "1", "--data", data, "--ckpt", s1, "--config", str(cfg),
                         "--stop-after", str(stop_after)]) == 0
            assert main(["train", "--stage", "1", "--data", data, "--ckpt", s1, "--resume"]) == 0
        assert main(["train", "--stage", "2", "--data", data, "--ckpt", s1, "--out", str(root / "s2.ckpt")]) == 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for task in ("zeroshot", "retrieval", "crossmodal"):
                assert main(["eval", "--task", task, "--data", data, "--ckpt", str(root / "s2.ckpt"),
                             "--out", str(root / f"{task}.csv")]) == 0
        return root

    artifacts = ("s1.ckpt", "s2.ckpt", "zeroshot.csv", "retrieval.csv", "crossmodal.csv")
    a, b, c = (pipeline(tmp_path / name, stop) for name, stop in (("a", None), ("b", None), ("c", 2)))
    checks["repeat run"] = all((a / f).read_bytes() == (b / f).read_bytes() for f in artifacts)
    checks["resume"] = all((a / f).read_bytes() == (c / f).read_bytes() for f in artifacts)
    ckpt = load_checkpoint(a / "s2.ckpt")
    checks["checkpoint round trip"] = save_bytes(ckpt) == (a / "s2.ckpt").read_bytes()
    corpus = load_corpus(a / "data")
    save_corpus(corpus, tmp_path / "again")
    files = sorted(p.relative_to(a / "data") for p in (a / "data").rglob("*") if p.is_file()
                   and not p.name.startswith("run_"))
    checks["corpus round trip"] = bool(files) and all(
        (tmp_path / "again" / f).read_bytes() == (a / "data" / f).read_bytes() for f in files)
    record(7, "determinism and formats", all(checks.values()),
           ", ".join(f"{k} {'ok' if v else 'MISMATCH'}" for k, v in checks.items()))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
