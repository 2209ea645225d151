"""Finite-difference verification of every loss and encoder/projector map.

Each component is checked on a small f64 instance (joint width 8) by
``numerics.grad_check``: central differences computed from plain forward
evaluations, compared with the tape gradient.  Inputs are included as
parameters so the chain into upstream layers is covered too.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from hwsi.encoders import (
    EncoderConfig,
    ccaf_fuse,
    embed_cells,
    encode_patch,
    encode_region,
    encode_text_batch,
    encode_wsi,
    feed_forward,
    hierarchical_forward,
    init_encoder_params,
)
from hwsi.losses import (
    LossConfig,
    SampleTargets,
    contrastive_scale_loss,
    cross_scale_consistency,
    total_hca,
    wsi_batch_loss,
)
from hwsi.numerics import GradCheckReport, Param, ParamSet, Tensor, grad_check
from hwsi.numerics import tensor as T
from hwsi.projectors import ProjectedFeatures, init_projector_params, project
from hwsi.spf import SpfConfig, spf_sample
from hwsi.synthgen import GenConfig, generate_corpus

SUITES = ("losses", "encoders", "all")
D = 8
H = 1e-5
TOL = 1e-5
N_COORDS = 200


@dataclass
class ComponentResult:
    suite: str
    name: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed and self.report.n_checked >= N_COORDS


def _params(arrays: dict, trainable=None) -> ParamSet:
    return ParamSet({k: Param(Tensor(v, dtype="float64"), trainable is None or k in trainable)
                     for k, v in arrays.items()})


def _unit(rng, shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _clustered(rng, base, n, spread=0.1):
    """Rows near one direction.  At tau=0.02 random rows would saturate the
    softmax, leaving gradients of 1e-12 that no difference quotient resolves."""
    return base + spread * rng.normal(size=(n, base.size))


def _readout(out: Tensor, weights: np.ndarray) -> Tensor:
    """Fixed random linear functional of a vector-valued output."""
    return T.tsum(T.mul(out, Tensor(weights)))


# -- loss components ------------------------------------------------------------

def _loss_components(rng, tau: float):
    n, m = 13, 13
    base = _unit(rng, (D,))
    pos = rng.integers(0, m, size=n)
    yield "contrastive_scale_loss", _params({"z": _clustered(rng, base, n), "t": _clustered(rng, base, m)}), \
        lambda p: contrastive_scale_loss(p.tensor("z"), p.tensor("t"), pos, tau)

    yield "wsi_batch_loss", _params({"z": _clustered(rng, base, 13), "t": _clustered(rng, base, 13)}), \
        lambda p: wsi_batch_loss(p.tensor("z"), p.tensor("t"), tau)

    members = np.array([0, 0, 0, 1, 1, 2, 2, 2, 3, 3, 3])
    yield "cross_scale_consistency", _params({"c": rng.normal(size=(11, D)), "p": rng.normal(size=(11, D)),
                                              "r": rng.normal(size=(4, D))}), \
        lambda p: cross_scale_consistency(p.tensor("c"), p.tensor("p"), p.tensor("r"), members)

    arrays, meta = {}, []
    for b, (n_sel, n_r, m) in enumerate(((5, 2, 6), (4, 2, 5))):
        arrays.update({f"c{b}": _clustered(rng, base, n_sel), f"p{b}": _clustered(rng, base, n_sel),
                       f"r{b}": _clustered(rng, base, n_r), f"t{b}": _clustered(rng, base, m)})
        region_of = np.sort(np.r_[np.arange(n_r), rng.integers(0, n_r, size=n_sel - n_r)])
        meta.append((region_of, rng.integers(0, m, size=n_sel), rng.integers(0, m, size=n_sel),
                     rng.integers(0, m, size=n_r)))
    arrays.update({"wsi": _clustered(rng, base, 2), "tr": _clustered(rng, base, 2)})
    cfg = LossConfig(tau=tau)

    def hca(p):
        feats, targets = [], []
        for b, (region_of, cpos, ppos, rpos) in enumerate(meta):
            feats.append(ProjectedFeatures(p.tensor(f"c{b}"), p.tensor(f"p{b}"), p.tensor(f"r{b}"),
                                           T.slice_(p.tensor("wsi"), b, b + 1), region_of,
                                           np.arange(region_of.size)))
            targets.append(SampleTargets(p.tensor(f"t{b}"), cpos, ppos, rpos))
        return total_hca(feats, targets, p.tensor("wsi"), p.tensor("tr"), cfg).total

    yield "total_hca", _params(arrays), hca


# -- encoder / projector components ----------------------------------------------

def _tiny_corpus():
    return generate_corpus(GenConfig(
        classes=2, n_samples=2, regions_per_wsi=2, patches_per_region=4, cells_per_patch=3,
        d_cell_raw=D, d_patch_raw=D, d_text_raw=D, cell_vocab=6, patch_vocab=8, region_vocab=4,
        wsi_vocab=2, region_pool=2, patch_pool=2, patches_active=2, cell_pool=2,
        split_train=1.0, split_val=0.0, split_test=0.0, seed=5,
    ))


def _encoder_components(rng):
    corpus = _tiny_corpus()
    cfg = EncoderConfig(d_cell_raw=D, d_patch_raw=D, d_cell=D, d_patch=D, d_text=D, d_joint=D,
                        text_vocab=corpus.bank.vocab_size).validate()
    base = init_encoder_params(cfg, seed=3)
    base.update(init_projector_params(cfg, seed=3))
    # Biases start non-zero so that ReLU units are not all at their kink.
    for k in base:
        if k.endswith((".b1", ".b2")):
            base[k] = rng.uniform(-0.5, 0.5, size=base[k].shape)

    def group(prefix, extra=None):
        arrays = {k: v for k, v in base.items() if k.startswith(prefix)}
        arrays.update(extra or {})
        return _params(arrays)

    w = rng.normal(size=(D,))
    yield "embed_cells", group("encoder.cell.", {"x": rng.normal(size=(5, D))}), \
        lambda p: _readout(embed_cells(p, p.tensor("x"), cfg), rng_fixed(5))
    yield "ccaf_fuse", group("encoder.ccaf.", {"x": rng.normal(size=(5, D))}), \
        lambda p: _readout(ccaf_fuse(p, p.tensor("x"), cfg), w)
    yield "encode_patch", group("encoder.patch.", {"x": rng.normal(size=(4, D))}), \
        lambda p: _readout(encode_patch(p, p.tensor("x"), cfg), rng_fixed(4))
    yield "encode_region", group("encoder.region.", {"x": rng.normal(size=(6, D))}), \
        lambda p: _readout(encode_region(p, p.tensor("x"), cfg), w)
    yield "encode_wsi", group("encoder.wsi.", {"x": rng.normal(size=(4, D))}), \
        lambda p: _readout(encode_wsi(p, p.tensor("x"), cfg), w)

    reports = [s.tokens for s in corpus.samples]
    n_tok = sum(len(r) for r in reports)
    w_tok, w_rep = rng_fixed(n_tok), rng_fixed(len(reports))

    def text(p):
        tok, rep, _ = encode_text_batch(p, reports, cfg)
        return T.add(_readout(tok, w_tok), _readout(rep, w_rep))

    yield "encode_text", group("text."), text

    for s, rows in (("c", 6), ("p", 6), ("r", 3), ("wsi", 1)):
        yield f"projector.{s}", group(f"projector.{s}.", {"x": rng.normal(size=(rows, D))}), \
            (lambda s, rows: lambda p: _readout(
                feed_forward(p, f"projector.{s}", p.tensor("x"), cfg.activation), rng_fixed(rows)))(s, rows)

    sample = corpus.samples[0]
    spf = spf_sample(sample, corpus.bank, SpfConfig(top_k=2))
    arrays = {k: v for k, v in base.items() if k.startswith(("encoder.", "projector."))}
    full = _params(arrays, trainable={k for k in arrays if k.startswith("encoder.")})

    def forward(p):
        proj = project(hierarchical_forward(sample, spf, p, cfg), p, cfg)
        parts = (proj.z_c, proj.z_p, proj.z_r, proj.z_wsi)
        return T.add(T.add(_readout(parts[0], fixed_like(parts[0], 1)), _readout(parts[1], fixed_like(parts[1], 2))),
                     T.add(_readout(parts[2], fixed_like(parts[2], 3)), _readout(parts[3], fixed_like(parts[3], 4))))

    yield "hierarchical_forward+project", full, forward


def rng_fixed(rows: int, seed: int = 11) -> np.ndarray:
    return np.random.default_rng([seed, rows]).normal(size=(rows, D))


def fixed_like(t: Tensor, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, *t.shape]).normal(size=t.shape)


# -- driver -------------------------------------------------------------------------

def run_suite(suite: str = "all", seed: int = 0, tau: float = 0.02) -> list:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")
    rng = np.random.default_rng([seed, 7])
    jobs = []
    if suite in ("losses", "all"):
        jobs += [("losses",) + c for c in _loss_components(rng, tau)]
    if suite in ("encoders", "all"):
        jobs += [("encoders",) + c for c in _encoder_components(rng)]
    results = []
    for k, (group, name, params, fn) in enumerate(jobs):
        t0 = time.perf_counter()
        rep = grad_check(fn, params, h=H, tol=TOL, n_samples=N_COORDS, seed=seed + k)
        results.append(ComponentResult(group, name, rep, time.perf_counter() - t0))
    return results


def format_results(results: list) -> str:
    lines = [f"{'suite':<9}{'component':<32}{'max_rel_err':>12}{'checked':>9}{'screened':>10}  status"]
    for r in results:
        lines.append(f"{r.suite:<9}{r.name:<32}{r.report.max_rel_err:>12.3e}{r.report.n_checked:>9d}"
                     f"{r.report.n_screened:>10d}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
