"""Semantic patch filtering.

Two stages run per region:

* heterogeneous patch selection (HPS) drops a patch when its mean cosine
  similarity to the region's patches exceeds ``mu + sigma`` of the full
  similarity matrix (diagonal included, population spread);
* diagnostically-relevant patch selection (DPS) ranks the HPS survivors by
  mean cosine similarity to the report tokens and keeps the ``top_k`` best.

At inference only HPS runs, so no report information reaches the model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hwsi.errors import ConfigError, ContractError

MODES = ("training", "inference")


@dataclass(frozen=True)
class SpfConfig:
    top_k: int = 8
    mode: str = "training"

    def validate(self) -> "SpfConfig":
        if int(self.top_k) < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        return self


@dataclass(frozen=True)
class HpsStats:
    mean: float          # mu over all n^2 entries
    std: float           # population sigma over all n^2 entries
    threshold: float     # mu + sigma
    row_means: np.ndarray


@dataclass(frozen=True)
class SpfResult:
    """Selection for one region.  ``kept`` are the HPS survivors, ``final`` the
    patches passed on to the encoders (equal to ``kept`` at inference)."""

    kept: np.ndarray
    final: np.ndarray
    stats: HpsStats
    relevance: np.ndarray | None = None


def _normalize_rows(x: np.ndarray) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    zero = norms[:, 0] == 0.0
    return np.where(norms == 0.0, 0.0, x / np.where(norms == 0.0, 1.0, norms)), zero


def pairwise_cosine(embeddings) -> np.ndarray:
    """Cosine similarity matrix; zero rows score 0 off-diagonal and 1 on it."""
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if emb.shape[0] < 1 or emb.shape[1] < 1:
        raise ContractError(f"need at least one non-empty row, got shape {emb.shape}")
    unit, zero = _normalize_rows(emb)
    sim = unit @ unit.T
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, np.where(zero, 1.0, np.diag(sim)))
    return np.clip(sim, -1.0, 1.0)


def hps_select(sim) -> tuple:
    """Indices (ascending) of non-redundant patches and the threshold statistics."""
    sim = np.asarray(sim, dtype=np.float64)
    mu = float(sim.mean())
    sigma = float(np.sqrt(((sim - mu) ** 2).mean()))
    tau = mu + sigma
    row_means = sim.mean(axis=1)
    kept = np.flatnonzero(~(row_means > tau))
    return kept, HpsStats(mu, sigma, tau, row_means)


def token_relevance(patch_embs, token_embs) -> np.ndarray:
    """Mean cosine similarity of each patch to the report tokens."""
    tokens = np.atleast_2d(np.asarray(token_embs, dtype=np.float64))
    if tokens.shape[0] == 0 or np.asarray(token_embs).size == 0:
        raise ContractError("relevance needs at least one report token")
    patches = np.atleast_2d(np.asarray(patch_embs, dtype=np.float64))
    if patches.shape[1] != tokens.shape[1]:
        raise ContractError(f"patch dim {patches.shape[1]} != token dim {tokens.shape[1]}")
    p, _ = _normalize_rows(patches)
    t, _ = _normalize_rows(tokens)
    return (p @ t.T).mean(axis=1)


def dps_topk(relevance, k: int) -> np.ndarray:
    """Indices of the ``k`` most relevant patches, ties to the lower index, ascending."""
    if int(k) < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    r = np.asarray(relevance, dtype=np.float64)
    order = np.lexsort((np.arange(r.size), -r))
    return np.sort(order[: min(int(k), r.size)])


def spf_pipeline(patches, tokens=None, config: SpfConfig = SpfConfig()) -> SpfResult:
    """Filter one region's patches.

    ``tokens`` are report token embeddings in the patch feature space; they are
    required in training mode and forbidden in inference mode.
    """
    config.validate()
    if config.mode == "inference" and tokens is not None:
        raise ContractError("report tokens supplied in inference mode; only HPS runs at test time")
    if config.mode == "training" and tokens is None:
        raise ContractError("training mode requires report tokens")
    patches = np.asarray(patches, dtype=np.float64)
    kept, stats = hps_select(pairwise_cosine(patches))
    if config.mode == "inference":
        return SpfResult(kept, kept, stats)
    relevance = token_relevance(patches[kept], tokens)
    final = kept[dps_topk(relevance, config.top_k)]
    return SpfResult(kept, final, stats, relevance)


def spf_sample(sample, bank, config: SpfConfig) -> list:
    """Run the pipeline on every region of a sample (one result per region).

    Report tokens are embedded with the bank's frozen text prototypes, the
    stand-in for a pretrained patch/text encoder pair sharing one space.
    """
    tokens = bank.text_embedding(sample.tokens) if config.mode == "training" else None
    return [spf_pipeline(sample.patches[i], tokens, config) for i in range(sample.n_regions)]
