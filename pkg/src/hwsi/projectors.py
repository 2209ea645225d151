"""Scale-specific vision-to-language projectors and multimodal sequence assembly."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hwsi.encoders import BatchFeatures, EncoderConfig, HierarchicalFeatures, _ff_init, feed_forward
from hwsi.errors import ContractError, FormatError
from hwsi.numerics import ParamSet, Tensor
from hwsi.numerics import tensor as T
from hwsi.numerics.container import read_tensor, write_tensor

SCALES = ("c", "p", "r", "wsi")
SEGMENTS = ("cell", "patch", "region", "wsi", "text")


def init_projector_params(cfg: EncoderConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng([seed, 20])
    d_in = {"c": cfg.d_cell, "p": cfg.d_patch, "r": cfg.d_patch, "wsi": cfg.d_patch}
    arrays = {}
    for s in SCALES:
        arrays.update(_ff_init(rng, f"projector.{s}", d_in[s], cfg.ff_mult * cfg.d_joint, cfg.d_joint))
    return arrays


@dataclass
class ProjectedFeatures:
    z_c: Tensor      # (n_sel, d_joint), row-aligned with z_p
    z_p: Tensor      # (n_sel, d_joint)
    z_r: Tensor      # (n_r, d_joint)
    z_wsi: Tensor    # (1, d_joint)
    region_of: np.ndarray
    patch_index: np.ndarray


def _apply(params, scale, x, cfg):
    w2 = params.tensor(f"projector.{scale}.w2")
    if w2.shape[1] != cfg.d_joint:
        raise ContractError(f"projector.{scale} emits {w2.shape[1]} dims, joint space has {cfg.d_joint}")
    return feed_forward(params, f"projector.{scale}", x, cfg.activation)


def project(features: HierarchicalFeatures | BatchFeatures, params: ParamSet, cfg: EncoderConfig):
    """Map every scale into the joint space.

    Works on a single slide or on a whole batch; a batch yields a
    ``BatchFeatures``-shaped result whose per-sample views come from
    ``projected_sample``.
    """
    z_c = _apply(params, "c", features.cell_tokens, cfg)
    z_p = _apply(params, "p", features.patch_embs, cfg)
    z_r = _apply(params, "r", features.region_embs, cfg)
    z_wsi = _apply(params, "wsi", features.wsi, cfg)
    if isinstance(features, BatchFeatures):
        return BatchFeatures(z_c, z_p, z_r, z_wsi, features.patch_rows, features.region_rows,
                             features.region_of, features.patch_index)
    return ProjectedFeatures(z_c, z_p, z_r, z_wsi, features.region_of, features.patch_index)


def projected_sample(batch: BatchFeatures, b: int) -> ProjectedFeatures:
    f = batch.sample(b)
    return ProjectedFeatures(f.cell_tokens, f.patch_embs, f.region_embs, f.wsi, f.region_of, f.patch_index)


@dataclass
class MultimodalSequence:
    tokens: np.ndarray    # (L, d_joint)
    segments: np.ndarray  # (L,) index into SEGMENTS
    sources: np.ndarray   # (L, 2): (region, patch) for cell/patch rows, (region, -1),
                          # (-1, -1) for the slide token, (token position, -1) for text

    def __len__(self) -> int:
        return int(self.segments.size)

    def segment_names(self) -> list:
        return [SEGMENTS[int(k)] for k in self.segments]

    def equals(self, other: "MultimodalSequence") -> bool:
        return all(
            a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for a, b in ((self.tokens, other.tokens), (self.segments, other.segments),
                         (self.sources, other.sources))
        )


def assemble_multimodal_sequence(projected: ProjectedFeatures, text) -> MultimodalSequence:
    """Concatenate ``[z_c, z_p, z_r, z_wsi, z_text]`` with segment tags."""
    text_tokens = text.tokens if hasattr(text, "tokens") else text
    parts = [projected.z_c.data, projected.z_p.data, projected.z_r.data, projected.z_wsi.data, text_tokens.data]
    dims = {p.shape[1] for p in parts}
    if len(dims) != 1:
        raise ContractError(f"sequence parts disagree on width: {sorted(dims)}")
    n_sel, n_r, m = projected.z_c.shape[0], projected.z_r.shape[0], text_tokens.shape[0]
    cell_src = np.stack([projected.region_of, projected.patch_index], axis=1)
    sources = np.concatenate([
        cell_src, cell_src,
        np.stack([np.arange(n_r), -np.ones(n_r, dtype=np.int64)], axis=1),
        np.array([[-1, -1]]),
        np.stack([np.arange(m), -np.ones(m, dtype=np.int64)], axis=1),
    ]).astype(np.int64)
    segments = np.concatenate([np.full(n, k) for k, n in enumerate((n_sel, n_sel, n_r, 1, m))]).astype(np.int64)
    return MultimodalSequence(np.concatenate(parts, axis=0), segments, sources)


SEQUENCE_MAGIC = b"HWSISEQ1"


def save_sequence(seq: MultimodalSequence, path) -> None:
    """Three container records (tokens, segments, sources) after an 8-byte tag.

    Integer arrays are stored as float64, which is exact for these ranges.
    """
    with open(path, "wb") as fh:
        fh.write(SEQUENCE_MAGIC)
        write_tensor(fh, seq.tokens)
        write_tensor(fh, seq.segments.astype(np.float64))
        write_tensor(fh, seq.sources.astype(np.float64))


def load_sequence(path) -> MultimodalSequence:
    path = Path(path)
    if not path.exists():
        raise FormatError("sequence file missing", path)
    with open(path, "rb") as fh:
        if fh.read(8) != SEQUENCE_MAGIC:
            raise FormatError("bad sequence tag", path, 0)
        tokens = read_tensor(fh, path)
        segments = read_tensor(fh, path).astype(np.int64)
        sources = read_tensor(fh, path).astype(np.int64)
    return MultimodalSequence(tokens, segments, sources)
