"""Hierarchical encoders: cell embedder, cell-cell attention fusion, patch,
region and slide aggregators, and the report text encoder.

All set aggregators share one architecture: a learned CLS token is prefixed
to the (unordered) set, the sequence runs through pre-norm transformer blocks
without positional encodings, and the CLS position is read out.  The CLS slot
queries the members but is not itself a key.  Ragged sets are padded and
padded keys are masked out of every attention softmax, so the readout depends
on the set only.

Batched entry points (``encode_batch``, ``encode_text_batch``) are what the
training loop calls; the per-item functions are thin wrappers over them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hwsi.errors import ConfigError, ContractError, VocabularyError
from hwsi.numerics import ACTIVATIONS, Param, ParamSet, Tensor
from hwsi.numerics import tensor as T

MASKED = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    d_cell_raw: int = 16
    d_patch_raw: int = 16
    d_cell: int = 32
    d_patch: int = 32
    d_text: int = 32
    d_joint: int = 32
    text_vocab: int = 152
    ccaf_blocks: int = 2
    ccaf_heads: int = 2
    region_blocks: int = 1
    region_heads: int = 2
    wsi_blocks: int = 1
    wsi_heads: int = 2
    ff_mult: int = 2
    activation: str = "relu"
    dtype: str = "float64"

    def validate(self) -> "EncoderConfig":
        for name in ("d_cell_raw", "d_patch_raw", "d_cell", "d_patch", "d_text", "d_joint", "text_vocab",
                     "ccaf_blocks", "ccaf_heads", "region_blocks", "region_heads", "wsi_blocks",
                     "wsi_heads", "ff_mult"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for dim, heads in (("d_cell", "ccaf_heads"), ("d_patch", "region_heads"), ("d_patch", "wsi_heads")):
            if getattr(self, dim) % getattr(self, heads):
                raise ConfigError(f"{dim}={getattr(self, dim)} not divisible by {heads}={getattr(self, heads)}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        return self

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


# -- initialization ------------------------------------------------------------

def _uniform(rng, shape, fan_in):
    a = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape)


def _ff_init(rng, prefix, d_in, d_hidden, d_out):
    return {
        f"{prefix}.w1": _uniform(rng, (d_in, d_hidden), d_in),
        f"{prefix}.b1": _uniform(rng, (d_hidden,), d_in),
        f"{prefix}.w2": _uniform(rng, (d_hidden, d_out), d_hidden),
        f"{prefix}.b2": _uniform(rng, (d_out,), d_hidden),
    }


def _set_encoder_init(rng, prefix, d, blocks, ff_mult):
    out = {f"{prefix}.cls": rng.normal(0.0, 0.02, size=(1, d))}
    for b in range(blocks):
        p = f"{prefix}.block{b}"
        out[f"{p}.ln1_g"] = np.ones(d)
        out[f"{p}.ln1_b"] = np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            out[f"{p}.{w}"] = _uniform(rng, (d, d), d)
        out[f"{p}.bo"] = _uniform(rng, (d,), d)
        out[f"{p}.ln2_g"] = np.ones(d)
        out[f"{p}.ln2_b"] = np.zeros(d)
        out.update(_ff_init(rng, f"{p}.ff", d, ff_mult * d, d))
    return out


def init_encoder_params(cfg: EncoderConfig, seed: int = 0) -> dict:
    """Raw arrays for every encoder.* and text.* parameter."""
    cfg.validate()
    rng = np.random.default_rng([seed, 10])
    h = cfg.ff_mult
    arrays = {}
    arrays.update(_ff_init(rng, "encoder.cell", cfg.d_cell_raw, h * cfg.d_cell, cfg.d_cell))
    arrays.update(_set_encoder_init(rng, "encoder.ccaf", cfg.d_cell, cfg.ccaf_blocks, h))
    arrays.update(_ff_init(rng, "encoder.patch", cfg.d_patch_raw, h * cfg.d_patch, cfg.d_patch))
    arrays.update(_set_encoder_init(rng, "encoder.region", cfg.d_patch, cfg.region_blocks, h))
    arrays.update(_set_encoder_init(rng, "encoder.wsi", cfg.d_patch, cfg.wsi_blocks, h))
    # The table is a linear map on one-hot rows, so it gets the same
    # 1/sqrt(fan_in) rule with fan_in = vocabulary size.
    arrays["text.embed"] = _uniform(rng, (cfg.text_vocab, cfg.d_text), cfg.text_vocab)
    arrays.update(_ff_init(rng, "text.token", cfg.d_text, h * cfg.d_joint, cfg.d_joint))
    arrays.update(_ff_init(rng, "text.pool", cfg.d_joint, h * cfg.d_joint, cfg.d_joint))
    return arrays


def to_paramset(arrays: dict, dtype="float64") -> ParamSet:
    return ParamSet({k: Param(Tensor(v, dtype=dtype)) for k, v in arrays.items()})


# -- building blocks -------------------------------------------------------------

def feed_forward(params: ParamSet, prefix: str, x: Tensor, activation: str = "relu") -> Tensor:
    """Two-layer map ``act(x W1 + b1) W2 + b2`` applied to the last axis."""
    act = ACTIVATIONS[activation]
    w1 = params.tensor(f"{prefix}.w1")
    if x.shape[-1] != w1.shape[0]:
        raise ContractError(f"{prefix}: input dim {x.shape[-1]} != expected {w1.shape[0]}")
    hidden = act(T.add(T.matmul(x, w1), params.tensor(f"{prefix}.b1")))
    return T.add(T.matmul(hidden, params.tensor(f"{prefix}.w2")), params.tensor(f"{prefix}.b2"))


def _affine_norm(params, prefix, x):
    return T.add(T.mul(T.layer_norm(x), params.tensor(f"{prefix}_g")), params.tensor(f"{prefix}_b"))


def _attention(params, prefix, x, key_mask, heads):
    s, t, d = x.shape
    dh = d // heads

    def split(w):
        y = T.reshape(T.matmul(x, params.tensor(f"{prefix}.{w}")), (s, t, heads, dh))
        return T.reshape(T.transpose(y, (0, 2, 1, 3)), (s * heads, t, dh))

    q, k, v = split("wq"), split("wk"), split("wv")
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh))
    if key_mask is not None:
        scores = T.add(scores, key_mask)
    ctx = T.matmul(T.softmax(scores), v)
    ctx = T.reshape(T.transpose(T.reshape(ctx, (s, heads, t, dh)), (0, 2, 1, 3)), (s, t, d))
    return T.add(T.matmul(ctx, params.tensor(f"{prefix}.wo")), params.tensor(f"{prefix}.bo"))


def transformer_block(params, prefix, x, key_mask, heads, activation):
    h = T.add(x, _attention(params, prefix, _affine_norm(params, f"{prefix}.ln1", x), key_mask, heads))
    return T.add(h, feed_forward(params, f"{prefix}.ff", _affine_norm(params, f"{prefix}.ln2", h), activation))


def _key_mask(valid: np.ndarray, heads: int, dtype) -> Tensor:
    # valid: (S, n) for the set members.  The CLS slot is a query only: it is
    # never a key, so every attention row normalizes over set members alone and
    # the readout is unchanged when each member is duplicated.
    s, n = valid.shape
    full = np.concatenate([np.zeros((s, 1), dtype=bool), valid], axis=1)
    mask = np.where(full, 0.0, MASKED).astype(dtype)
    mask = np.broadcast_to(mask[:, None, None, :], (s, heads, n + 1, n + 1)).reshape(s * heads, n + 1, n + 1)
    return Tensor(mask, dtype=dtype)


def set_encode(params: ParamSet, prefix: str, members: Tensor, valid: np.ndarray, heads: int,
               activation: str = "relu") -> Tensor:
    """CLS readout over padded sets.

    ``members`` is ``(S, n, d)``, ``valid`` a boolean ``(S, n)`` mask with at
    least one true entry per row.  Returns ``(S, d)``.
    """
    s, n, d = members.shape
    cls = params.tensor(f"{prefix}.cls")
    if cls.shape[1] != d:
        raise ContractError(f"{prefix}: member dim {d} != token dim {cls.shape[1]}")
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != (s, n) or not valid.any(axis=1).all():
        raise ContractError(f"{prefix}: every set needs at least one member")
    ones = Tensor(np.ones((s, 1), dtype=members.dtype), dtype=members.dtype)
    x = T.concat([T.reshape(T.matmul(ones, cls), (s, 1, d)), members], axis=1)
    mask = _key_mask(valid, heads, members.dtype)
    b = 0
    while f"{prefix}.block{b}.wq" in params:
        x = transformer_block(params, f"{prefix}.block{b}", x, mask, heads, activation)
        b += 1
    return T.reshape(T.slice_(x, 0, 1, axis=1), (s, d))


# -- per-item operations -------------------------------------------------------------

def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


def embed_cells(params: ParamSet, cells, cfg: EncoderConfig) -> Tensor:
    shape = cells.shape if isinstance(cells, Tensor) else np.shape(cells)
    if len(shape) != 2 or shape[0] < 1:
        raise ContractError("empty patch: at least one cell is required")
    cells = _as_tensor(cells, cfg.dtype)
    return feed_forward(params, "encoder.cell", cells, cfg.activation)


def ccaf_fuse(params: ParamSet, cell_embs, cfg: EncoderConfig) -> Tensor:
    cell_embs = _as_tensor(cell_embs, cfg.dtype)
    n, d = cell_embs.shape
    if d != cfg.d_cell:
        raise ContractError(f"cell embedding dim {d} != d_cell {cfg.d_cell}")
    members = T.reshape(cell_embs, (1, n, d))
    out = set_encode(params, "encoder.ccaf", members, np.ones((1, n), bool), cfg.ccaf_heads, cfg.activation)
    return T.reshape(out, (d,))


def encode_patch(params: ParamSet, patch, cfg: EncoderConfig) -> Tensor:
    patch = _as_tensor(patch, cfg.dtype)
    rows = patch if patch.ndim == 2 else T.reshape(patch, (1, patch.shape[0]))
    out = feed_forward(params, "encoder.patch", rows, cfg.activation)
    return out if patch.ndim == 2 else T.reshape(out, (cfg.d_patch,))


def _encode_one_set(params, prefix, embs, heads, cfg, what):
    embs = _as_tensor(embs, cfg.dtype)
    if embs.ndim != 2 or embs.shape[0] < 1:
        raise ContractError(f"{what} needs at least one member")
    n, d = embs.shape
    out = set_encode(params, prefix, T.reshape(embs, (1, n, d)), np.ones((1, n), bool), heads, cfg.activation)
    return T.reshape(out, (d,))


def encode_region(params: ParamSet, patch_embs, cfg: EncoderConfig) -> Tensor:
    return _encode_one_set(params, "encoder.region", patch_embs, cfg.region_heads, cfg, "region")


def encode_wsi(params: ParamSet, region_embs, cfg: EncoderConfig) -> Tensor:
    return _encode_one_set(params, "encoder.wsi", region_embs, cfg.wsi_heads, cfg, "slide")


@dataclass
class TextEncoderOutput:
    tokens: Tensor       # (M, d_joint) t_m
    tokens_unit: Tensor  # (M, d_joint) normalized t_m
    report: Tensor       # (d_joint,) pooled, normalized t_r


def _one_hot(token_ids, vocab, dtype) -> Tensor:
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    bad = ids[(ids < 0) | (ids >= vocab)]
    if bad.size:
        raise VocabularyError(f"token id {int(bad[0])} outside vocabulary of size {vocab}")
    hot = np.zeros((ids.size, vocab), dtype=dtype)
    hot[np.arange(ids.size), ids] = 1.0
    return Tensor(hot, dtype=dtype)


def encode_text_batch(params: ParamSet, reports: list, cfg: EncoderConfig) -> tuple:
    """Encode several token sequences at once.

    Returns ``(token_embs, report_embs, offsets)``: all token embeddings
    concatenated in report order ``(sum M, d_joint)``, one normalized pooled
    embedding per report ``(B, d_joint)``, and the row offset of each report.
    """
    lengths = [len(r) for r in reports]
    if not reports or min(lengths) < 1:
        raise ContractError("every report needs at least one token")
    ids = np.concatenate([np.asarray(r, dtype=np.int64) for r in reports])
    emb = T.matmul(_one_hot(ids, cfg.text_vocab, cfg.dtype), params.tensor("text.embed"))
    tok = feed_forward(params, "text.token", emb, cfg.activation)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    pool = np.zeros((len(reports), ids.size), dtype=cfg.dtype)
    for b, (lo, hi) in enumerate(zip(offsets[:-1], offsets[1:])):
        pool[b, lo:hi] = 1.0 / (hi - lo)
    pooled = T.matmul(Tensor(pool, dtype=cfg.dtype), tok)
    report = T.l2_normalize(feed_forward(params, "text.pool", pooled, cfg.activation))
    return tok, report, offsets


def encode_text(params: ParamSet, token_ids, cfg: EncoderConfig) -> TextEncoderOutput:
    tok, report, _ = encode_text_batch(params, [np.asarray(token_ids)], cfg)
    return TextEncoderOutput(tok, T.l2_normalize(tok), T.reshape(report, (cfg.d_joint,)))


# -- whole-slide forward ---------------------------------------------------------------

@dataclass
class HierarchicalFeatures:
    """Multi-scale features of one slide.

    Rows of ``cell_tokens`` and ``patch_embs`` follow the selected patches in
    region order, ascending patch index within a region; ``region_of`` and
    ``patch_index`` give the region and original patch index of each row.
    """

    cell_tokens: Tensor   # (n_sel, d_cell)
    patch_embs: Tensor    # (n_sel, d_patch)
    region_embs: Tensor   # (n_r, d_patch)
    wsi: Tensor           # (1, d_patch)
    region_of: np.ndarray
    patch_index: np.ndarray

    @property
    def n_selected(self) -> int:
        return int(self.region_of.size)


@dataclass
class BatchFeatures:
    cell_tokens: Tensor
    patch_embs: Tensor
    region_embs: Tensor
    wsi: Tensor
    patch_rows: np.ndarray   # (B+1,) offsets into the selected-patch rows
    region_rows: np.ndarray  # (B+1,) offsets into the region rows
    region_of: list          # per sample, region index of each selected patch
    patch_index: list        # per sample, original patch index of each selected patch

    def sample(self, b: int) -> HierarchicalFeatures:
        p0, p1 = int(self.patch_rows[b]), int(self.patch_rows[b + 1])
        r0, r1 = int(self.region_rows[b]), int(self.region_rows[b + 1])
        return HierarchicalFeatures(
            T.slice_(self.cell_tokens, p0, p1), T.slice_(self.patch_embs, p0, p1),
            T.slice_(self.region_embs, r0, r1), T.slice_(self.wsi, b, b + 1),
            self.region_of[b], self.patch_index[b],
        )


def _selected(spf_results) -> list:
    return [np.asarray(r.final if hasattr(r, "final") else r, dtype=np.int64) for r in spf_results]


def encode_batch(samples: list, spf_batch: list, params: ParamSet, cfg: EncoderConfig) -> BatchFeatures:
    """Encode a batch of slides given each slide's per-region patch selection."""
    dt = cfg.np_dtype
    cell_rows, cell_valid, patch_rows_raw = [], [], []
    region_sets, patch_off, region_off = [], [0], [0]
    region_of, patch_index = [], []
    n_c = max(int(s.cell_counts.max()) for s in samples)
    row = 0
    for sample, spf in zip(samples, spf_batch):
        sel = _selected(spf)
        if len(sel) != sample.n_regions:
            raise ContractError(f"{sample.sample_id}: selection covers {len(sel)} of {sample.n_regions} regions")
        r_of, p_idx = [], []
        for i, kept in enumerate(sel):
            if kept.size < 1:
                raise ContractError(f"{sample.sample_id}: region {i} is empty after filtering")
            region_sets.append(list(range(row, row + kept.size)))
            row += kept.size
            for j in kept:
                cells = sample.cells_of(i, int(j))
                padded = np.zeros((n_c, cells.shape[1]), dtype=dt)
                padded[: cells.shape[0]] = cells
                cell_rows.append(padded)
                cell_valid.append(np.arange(n_c) < cells.shape[0])
                patch_rows_raw.append(sample.patches[i, int(j)])
                r_of.append(i)
                p_idx.append(int(j))
        patch_off.append(row)
        region_off.append(region_off[-1] + sample.n_regions)
        region_of.append(np.asarray(r_of, dtype=np.int64))
        patch_index.append(np.asarray(p_idx, dtype=np.int64))

    n_sel = row
    raw_cells = Tensor(np.stack(cell_rows), dtype=dt)                      # (n_sel, n_c, d_raw)
    cell_embs = feed_forward(params, "encoder.cell", raw_cells, cfg.activation)
    cell_tokens = set_encode(params, "encoder.ccaf", cell_embs, np.stack(cell_valid),
                             cfg.ccaf_heads, cfg.activation)
    patch_embs = feed_forward(params, "encoder.patch", Tensor(np.stack(patch_rows_raw), dtype=dt), cfg.activation)

    # gather patch rows into padded region sets with a constant selection matrix
    n_reg = len(region_sets)
    width = max(len(r) for r in region_sets)
    gather = np.zeros((n_reg * width, n_sel), dtype=dt)
    valid = np.zeros((n_reg, width), dtype=bool)
    for k, rows in enumerate(region_sets):
        for slot, src in enumerate(rows):
            gather[k * width + slot, src] = 1.0
            valid[k, slot] = True
    members = T.reshape(T.matmul(Tensor(gather, dtype=dt), patch_embs), (n_reg, width, cfg.d_patch))
    region_embs = set_encode(params, "encoder.region", members, valid, cfg.region_heads, cfg.activation)

    n_rs = {s.n_regions for s in samples}
    if len(n_rs) == 1:
        n_r = n_rs.pop()
        slides = T.reshape(region_embs, (len(samples), n_r, cfg.d_patch))
        wsi_valid = np.ones((len(samples), n_r), bool)
    else:
        width = max(n_rs)
        gather = np.zeros((len(samples) * width, n_reg), dtype=dt)
        wsi_valid = np.zeros((len(samples), width), dtype=bool)
        for b in range(len(samples)):
            for slot, src in enumerate(range(region_off[b], region_off[b + 1])):
                gather[b * width + slot, src] = 1.0
                wsi_valid[b, slot] = True
        slides = T.reshape(T.matmul(Tensor(gather, dtype=dt), region_embs), (len(samples), width, cfg.d_patch))
    wsi = set_encode(params, "encoder.wsi", slides, wsi_valid, cfg.wsi_heads, cfg.activation)
    return BatchFeatures(cell_tokens, patch_embs, region_embs, wsi, np.asarray(patch_off),
                         np.asarray(region_off), region_of, patch_index)


def hierarchical_forward(sample, spf, params: ParamSet, cfg: EncoderConfig) -> HierarchicalFeatures:
    """Multi-scale features of one slide (``spf``: per-region SpfResults or index arrays)."""
    return encode_batch([sample], [spf], params, cfg).sample(0)
