"""Hierarchical alignment objective.

``contrastive_scale_loss`` contrasts each visual token of one scale against
all tokens of its own report; ``wsi_batch_loss`` contrasts slide embeddings
against the pooled reports of the batch; ``cross_scale_consistency`` ties
region tokens to the means of their cell and patch tokens and cell tokens to
their patch tokens.  ``total_hca`` combines them per batch.

Similarities are cosines of l2-normalized vectors throughout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hwsi.errors import ConfigError, ContractError
from hwsi.numerics import Tensor
from hwsi.numerics import tensor as T


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.02
    w_scale: float = 1.0
    w_wsi: float = 1.0
    w_consistency: float = 1.0

    def validate(self) -> "LossConfig":
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        for name in ("w_scale", "w_wsi", "w_consistency"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        return self


def _info_nce(queries: Tensor, keys: Tensor, targets: np.ndarray, tau: float) -> Tensor:
    """Mean negative log-softmax probability of ``keys[targets[i]]`` for query i."""
    n, m = queries.shape[0], keys.shape[0]
    logits = T.scale(T.matmul(T.l2_normalize(queries), T.transpose(T.l2_normalize(keys))), 1.0 / tau)
    pick = np.zeros((n, m), dtype=queries.dtype)
    pick[np.arange(n), targets] = -1.0 / n
    return T.tsum(T.mul(T.log_softmax(logits), Tensor(pick, dtype=queries.dtype)))


def contrastive_scale_loss(z: Tensor, tokens: Tensor, positives, tau: float) -> Tensor:
    """Per-scale loss: each row of ``z`` against all report tokens."""
    if z.ndim != 2 or z.shape[0] < 1:
        raise ContractError("contrastive loss needs at least one visual token")
    positives = np.asarray(positives, dtype=np.int64).reshape(-1)
    m = tokens.shape[0]
    if m < 1:
        raise ContractError("report has no tokens")
    if positives.size != z.shape[0]:
        raise ContractError(f"{z.shape[0]} visual tokens but {positives.size} positives")
    if positives.size and (positives.min() < 0 or positives.max() >= m):
        raise ContractError(f"positive index outside report of length {m}")
    return _info_nce(z, tokens, positives, tau)


def wsi_batch_loss(z_wsi: Tensor, t_r: Tensor, tau: float) -> Tensor:
    """Slide-level loss over the batch; slide b's positive is report b."""
    if z_wsi.shape[0] != t_r.shape[0]:
        raise ContractError(f"batch mismatch: {z_wsi.shape[0]} slides vs {t_r.shape[0]} reports")
    return _info_nce(z_wsi, t_r, np.arange(z_wsi.shape[0]), tau)


def cross_scale_consistency(z_c: Tensor, z_p: Tensor, z_r: Tensor, region_of) -> Tensor:
    """Squared-distance coherence penalty across the cell/patch/region scales."""
    region_of = np.asarray(region_of, dtype=np.int64).reshape(-1)
    n_p, n_r = z_c.shape[0], z_r.shape[0]
    if z_p.shape != z_c.shape or region_of.size != n_p:
        raise ContractError(f"cell/patch tokens misaligned: {z_c.shape} vs {z_p.shape}, {region_of.size} labels")
    counts = np.bincount(region_of, minlength=n_r)
    if counts.size != n_r or np.any(counts == 0):
        raise ContractError("every region needs at least one patch")
    avg = np.zeros((n_r, n_p), dtype=z_c.dtype)
    avg[region_of, np.arange(n_p)] = 1.0 / counts[region_of]
    avg = Tensor(avg, dtype=z_c.dtype)
    region_term = T.add(
        T.sum_of_squares(T.add(z_r, T.scale(T.matmul(avg, z_c), -1.0))),
        T.sum_of_squares(T.add(z_r, T.scale(T.matmul(avg, z_p), -1.0))),
    )
    pair_term = T.sum_of_squares(T.add(z_c, T.scale(z_p, -1.0)))
    return T.add(T.scale(region_term, 1.0 / (2 * n_r)), T.scale(pair_term, 1.0 / n_p))


@dataclass
class LossBreakdown:
    L_c_scale: float
    L_p_scale: float
    L_r_scale: float
    L_WSI: float
    L_consistency: float
    L_HCA: float
    total: Tensor = None   # differentiable L_HCA

    FIELDS = ("L_c_scale", "L_p_scale", "L_r_scale", "L_WSI", "L_consistency", "L_HCA")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass
class SampleTargets:
    """Tokens and positives of one slide for the scale losses."""

    tokens: Tensor        # (M, d_joint) report token embeddings
    cell_pos: np.ndarray  # per selected patch
    patch_pos: np.ndarray
    region_pos: np.ndarray


def total_hca(projected: list, targets: list, z_wsi: Tensor, t_r: Tensor, config: LossConfig) -> LossBreakdown:
    """Batch objective: mean over slides of (scale losses + consistency) plus the slide loss.

    Per-term weights multiply the corresponding terms; at the default of 1
    the objective is the plain unweighted sum.  The reported component values
    are unweighted batch means.
    """
    config.validate()
    if len(projected) != len(targets) or len(projected) != z_wsi.shape[0]:
        raise ContractError("projected features, targets and slide embeddings must share the batch")
    tau = config.tau
    n_b = len(projected)
    per_sample, scale_sums = [], np.zeros(4)
    for feats, tgt in zip(projected, targets):
        l_c = contrastive_scale_loss(feats.z_c, tgt.tokens, tgt.cell_pos, tau)
        l_p = contrastive_scale_loss(feats.z_p, tgt.tokens, tgt.patch_pos, tau)
        l_r = contrastive_scale_loss(feats.z_r, tgt.tokens, tgt.region_pos, tau)
        l_cons = cross_scale_consistency(feats.z_c, feats.z_p, feats.z_r, feats.region_of)
        scale_sums += [l_c.item(), l_p.item(), l_r.item(), l_cons.item()]
        term = T.add(T.scale(T.add(T.add(l_c, l_p), l_r), config.w_scale), T.scale(l_cons, config.w_consistency))
        per_sample.append(T.reshape(term, (1,)))
    local = T.scale(T.tsum(T.concat(per_sample, axis=0)), 1.0 / n_b)
    l_wsi = wsi_batch_loss(z_wsi, t_r, tau)
    total = T.add(local, T.scale(l_wsi, config.w_wsi))
    means = scale_sums / n_b
    return LossBreakdown(float(means[0]), float(means[1]), float(means[2]), l_wsi.item(), float(means[3]),
                         total.item(), total)
