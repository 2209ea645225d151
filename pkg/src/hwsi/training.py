"""Staged optimization with parameter freezing, logging and checkpoints.

Stage 1 trains the encoders and the text encoder through frozen projectors;
stage 2 freezes those and trains only the projectors.  Both optimize the
hierarchical alignment objective.
"""
from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from hwsi import __version__
from hwsi.encoders import EncoderConfig, encode_batch, encode_text_batch, init_encoder_params, to_paramset
from hwsi.errors import ConfigError, ContractError, FormatError, NonFiniteError
from hwsi.losses import LossBreakdown, LossConfig, SampleTargets, total_hca
from hwsi.numerics import AdamState, Param, ParamSet, Tape, Tensor, adam_step, backward
from hwsi.numerics import tensor as T
from hwsi.numerics.container import read_tensor, write_tensor
from hwsi.projectors import init_projector_params, project, projected_sample
from hwsi.spf import SpfConfig, spf_sample

log = logging.getLogger(__name__)

GROUPS = ("encoder", "text", "projector")
LOG_COLUMNS = ("stage", "epoch", "step") + LossBreakdown.FIELDS


@dataclass(frozen=True)
class StageConfig:
    stage: int = 1
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0

    def validate(self) -> "StageConfig":
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        return self


def encoder_config_for(corpus, **overrides) -> EncoderConfig:
    cfg = corpus.config
    return EncoderConfig(d_cell_raw=cfg.d_cell_raw, d_patch_raw=cfg.d_patch_raw,
                         text_vocab=corpus.bank.vocab_size, **overrides).validate()


def init_params(cfg: EncoderConfig, seed: int = 0) -> ParamSet:
    arrays = init_encoder_params(cfg, seed)
    arrays.update(init_projector_params(cfg, seed))
    return to_paramset(arrays, cfg.dtype)


def freeze_for_stage(params: ParamSet, stage: int) -> ParamSet:
    """Stage 1: projectors frozen.  Stage 2: encoders and text encoder frozen."""
    if stage not in (1, 2):
        raise ContractError(f"unknown stage {stage}")
    flags = {}
    for name in params:
        group = name.split(".", 1)[0]
        if group not in GROUPS:
            raise ContractError(f"parameter {name!r} belongs to no known group")
        flags[name] = (group != "projector") if stage == 1 else (group == "projector")
    return params.with_trainable(flags)


# -- one batch -----------------------------------------------------------------

def training_selections(corpus, spf_config: SpfConfig) -> dict:
    """Report-guided patch selections for the train split, keyed by sample id."""
    cfg = replace(spf_config, mode="training")
    return {s.sample_id: [r.final for r in spf_sample(s, corpus.bank, cfg)] for s in corpus.split("train")}


def batch_loss(samples, selections, params: ParamSet, enc_cfg: EncoderConfig,
               loss_cfg: LossConfig) -> LossBreakdown:
    """Forward a batch through encoders, projectors, text encoder and the objective."""
    feats = encode_batch(samples, selections, params, enc_cfg)
    proj = project(feats, params, enc_cfg)
    tok, t_r, offsets = encode_text_batch(params, [s.tokens for s in samples], enc_cfg)
    projected, targets = [], []
    for b, s in enumerate(samples):
        pf = projected_sample(proj, b)
        r, j = pf.region_of, pf.patch_index
        projected.append(pf)
        targets.append(SampleTargets(
            tokens=T.slice_(tok, int(offsets[b]), int(offsets[b + 1])),
            cell_pos=s.align_cell[r, j], patch_pos=s.align_patch[r, j], region_pos=s.align_region,
        ))
    return total_hca(projected, targets, proj.wsi, t_r, loss_cfg)


def _nonfinite_term(bd: LossBreakdown) -> str:
    for k in LossBreakdown.FIELDS:
        if not np.isfinite(getattr(bd, k)):
            return k
    return "L_HCA"


def train_step(samples, selections, params, state, enc_cfg, loss_cfg, step_index=0):
    tape = Tape()
    with tape:
        params.watch(tape)
        bd = batch_loss(samples, selections, params, enc_cfg, loss_cfg)
    if not np.isfinite(bd.L_HCA):
        raise NonFiniteError(f"step {step_index}: non-finite loss in {_nonfinite_term(bd)}")
    grads = backward(tape, bd.total, params)
    params, state = adam_step(params, grads, state)
    return params, state, bd


# -- stage loop ------------------------------------------------------------------

@dataclass
class TrainState:
    stage: int
    epochs_done: int
    adam: AdamState
    rng_state: dict
    log: list = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.adam.step


def new_train_state(stage_cfg: StageConfig) -> TrainState:
    rng = np.random.default_rng([stage_cfg.seed, 100 + stage_cfg.stage])
    return TrainState(stage_cfg.stage, 0, AdamState(lr=stage_cfg.lr), rng.bit_generator.state)


def run_stage(corpus, params: ParamSet, stage_cfg: StageConfig, enc_cfg: EncoderConfig,
              loss_cfg: LossConfig = LossConfig(), spf_cfg: SpfConfig = SpfConfig(),
              state: TrainState | None = None, stop_after: int | None = None,
              selections: dict | None = None, on_epoch: Callable | None = None):
    """Train one stage; returns ``(params, state)``.

    ``state`` resumes an interrupted run of the same stage; ``stop_after``
    ends the call after that many completed epochs (the run can be resumed
    from the returned state).  ``state.log`` accumulates one row per step.
    """
    stage_cfg.validate()
    loss_cfg.validate()
    if state is None:
        state = new_train_state(stage_cfg)
    elif state.stage != stage_cfg.stage:
        raise ContractError(f"cannot resume a stage-{state.stage} state in stage {stage_cfg.stage}")
    params = freeze_for_stage(params, stage_cfg.stage)
    train = corpus.split("train")
    if not train:
        raise ContractError("corpus has no training samples")
    if selections is None:
        selections = training_selections(corpus, spf_cfg)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    last = stage_cfg.epochs if stop_after is None else min(stage_cfg.epochs, stop_after)
    adam = state.adam
    while state.epochs_done < last:
        epoch = state.epochs_done + 1
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), stage_cfg.batch_size):
            batch = [train[i] for i in order[start:start + stage_cfg.batch_size]]
            sel = [selections[s.sample_id] for s in batch]
            params, adam, bd = train_step(batch, sel, params, adam, enc_cfg, loss_cfg, adam.step)
            row = {"stage": stage_cfg.stage, "epoch": epoch, "step": adam.step}
            row.update(bd.row())
            state.log.append(row)
            losses.append(bd.L_HCA)
        state.epochs_done = epoch
        state.adam = adam
        state.rng_state = rng.bit_generator.state
        log.info("stage %d epoch %d mean L_HCA %.6f", stage_cfg.stage, epoch, float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(params, state)
    return params, state


def epoch_means(rows: list, column: str = "L_HCA") -> dict:
    out = {}
    for row in rows:
        out.setdefault(row["epoch"], []).append(row[column])
    return {k: float(np.mean(v)) for k, v in out.items()}


def write_log_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row["stage"], row["epoch"], row["step"]] +
                            [repr(float(row[k])) for k in LossBreakdown.FIELDS])


def read_log_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            row = {k: int(rec[k]) for k in ("stage", "epoch", "step")}
            row.update({k: float(rec[k]) for k in LossBreakdown.FIELDS})
            rows.append(row)
    return rows


# -- checkpoints --------------------------------------------------------------------

CKPT_MAGIC = b"HWSICKPT"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: ParamSet
    state: TrainState
    complete: bool
    config: dict          # run configuration echo (encoder/loss/spf/stage sections)
    version: str = __version__

    def equals(self, other: "Checkpoint") -> bool:
        return save_bytes(self) == save_bytes(other)


def save_bytes(ckpt: Checkpoint) -> bytes:
    import io

    names = list(ckpt.params)
    moments = [n for n in names if n in ckpt.state.adam.m]
    adam = ckpt.state.adam
    header = {
        "artifact_version": ckpt.version,
        "params": [{"name": n, "trainable": ckpt.params[n].trainable} for n in names],
        "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
                 "step": adam.step, "moments": moments},
        "stage": ckpt.state.stage,
        "epochs_done": ckpt.state.epochs_done,
        "complete": ckpt.complete,
        "rng_state": ckpt.state.rng_state,
        "config": ckpt.config,
        "log": ckpt.state.log,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(blob)) + blob)
    for n in names:
        write_tensor(buf, ckpt.params.tensor(n).data)
    for n in moments:
        write_tensor(buf, adam.m[n])
        write_tensor(buf, adam.v[n])
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(save_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FormatError("checkpoint missing", path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}", path, 0)
        head = fh.read(12)
        if len(head) != 12:
            raise FormatError("truncated checkpoint header", path, 8)
        version, n = struct.unpack("<IQ", head)
        if version != CKPT_VERSION:
            raise FormatError(f"checkpoint version {version} != supported {CKPT_VERSION}", path, 8)
        blob = fh.read(n)
        try:
            header = json.loads(blob)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise FormatError(f"corrupt checkpoint header: {exc}", path, 20) from None
        entries = {}
        for p in header["params"]:
            entries[p["name"]] = Param(Tensor._wrap(read_tensor(fh, path)), bool(p["trainable"]))
        a = header["adam"]
        m, v = {}, {}
        for name in a["moments"]:
            m[name] = read_tensor(fh, path)
            v[name] = read_tensor(fh, path)
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint", path, fh.tell() - 1)
    adam = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"], m, v)
    state = TrainState(header["stage"], header["epochs_done"], adam, header["rng_state"], header["log"])
    return Checkpoint(ParamSet(entries), state, header["complete"], header["config"], header["artifact_version"])


def config_echo(enc_cfg, loss_cfg, spf_cfg, stage_cfg) -> dict:
    return {"encoder": asdict(enc_cfg), "loss": asdict(loss_cfg), "spf": asdict(spf_cfg),
            "stage": asdict(stage_cfg)}
