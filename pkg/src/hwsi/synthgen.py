"""Synthetic hierarchical slide/report corpus with ground-truth concept pairings.

The generative grammar nests four concept vocabularies: a slide's class picks
the concept of each region from a class pool; a region concept activates a
few patch concepts from its own pool; each patch picks one cell concept from
its patch concept's pool.  Raw cell and patch features are noisy copies of
their concept prototypes.  A report lists the distinct concepts of the slide
(cells, then patches, regions and the class) plus an occasional distractor.

Text token ids are global: cell concepts first, then patch, region and class
concepts, each block offset by the sizes of the previous ones.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from hwsi.errors import CapacityError, ConfigError, FormatError
from hwsi.numerics.container import load_tensor, save_tensor

LEVELS = ("cell", "patch", "region", "wsi")
SPLITS = ("train", "val", "test")
MAX_ATTEMPTS = 100_000
MAX_ABS_COSINE = 0.8


@dataclass(frozen=True)
class GenConfig:
    classes: int = 8
    n_samples: int = 320
    regions_per_wsi: int = 4
    patches_per_region: int = 16
    cells_per_patch: int = 8
    d_cell_raw: int = 16
    d_patch_raw: int = 16
    d_text_raw: int = 16
    noise: float = 0.1
    cell_vocab: int = 32
    patch_vocab: int = 64
    region_vocab: int = 48
    wsi_vocab: int = 8
    region_pool: int = 6
    patch_pool: int = 4
    patches_active: int = 2
    cell_pool: int = 3
    split_train: float = 0.8
    split_val: float = 0.0
    split_test: float = 0.2
    distractor_prob: float = 0.2
    seed: int = 0

    def validate(self) -> "GenConfig":
        counts = ["classes", "n_samples", "regions_per_wsi", "patches_per_region", "cells_per_patch",
                  "d_cell_raw", "d_patch_raw", "d_text_raw", "cell_vocab", "patch_vocab",
                  "region_vocab", "wsi_vocab", "region_pool", "patch_pool", "patches_active", "cell_pool"]
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if self.wsi_vocab < self.classes:
            raise ConfigError(f"wsi_vocab ({self.wsi_vocab}) must be >= classes ({self.classes})")
        for pool, vocab in (("region_pool", "region_vocab"), ("patch_pool", "patch_vocab"),
                            ("cell_pool", "cell_vocab")):
            if getattr(self, pool) > getattr(self, vocab):
                raise ConfigError(f"{pool} must be <= {vocab}")
        if self.patches_active > self.patch_pool:
            raise ConfigError("patches_active must be <= patch_pool")
        fracs = (self.split_train, self.split_val, self.split_test)
        if min(fracs) < 0 or abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be >= 0 and sum to 1, got {fracs}")
        if not 0.0 <= self.distractor_prob <= 1.0:
            raise ConfigError("distractor_prob must lie in [0, 1]")
        return self

    def level_dim(self, level: str) -> int:
        return {"cell": self.d_cell_raw, "patch": self.d_patch_raw}.get(level, self.d_text_raw)

    def vocab(self, level: str) -> int:
        return getattr(self, f"{level}_vocab")


@dataclass
class ConceptBank:
    """Per-level prototypes plus the pools of the generative grammar.

    ``text[level]`` holds the embeddings a frozen, report-aligned text encoder
    would emit for each concept; they live in the raw text space and are what
    report-guided patch selection compares patch features against.
    """

    visual: dict
    text: dict
    class_regions: np.ndarray   # (classes, region_pool) region concept ids
    region_patches: np.ndarray  # (region_vocab, patch_pool) patch concept ids
    patch_cells: np.ndarray     # (patch_vocab, cell_pool) cell concept ids

    @property
    def offsets(self) -> dict:
        out, acc = {}, 0
        for level in LEVELS:
            out[level] = acc
            acc += self.visual[level].shape[0]
        return out

    @property
    def vocab_size(self) -> int:
        return sum(self.visual[level].shape[0] for level in LEVELS)

    def token_id(self, level: str, concept: int) -> int:
        return self.offsets[level] + int(concept)

    def token_level(self, token: int) -> tuple:
        for level in reversed(LEVELS):
            off = self.offsets[level]
            if token >= off:
                return level, token - off
        raise ValueError(token)

    def text_embedding(self, tokens) -> np.ndarray:
        rows = [self.text[lvl][c] for lvl, c in (self.token_level(int(t)) for t in tokens)]
        return np.stack(rows)

    def equals(self, other: "ConceptBank") -> bool:
        same = all(
            _same(self.visual[l], other.visual[l]) and _same(self.text[l], other.text[l]) for l in LEVELS
        )
        return same and all(
            _same(getattr(self, f), getattr(other, f)) for f in ("class_regions", "region_patches", "patch_cells")
        )


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.sqrt(np.dot(v, v))


def _separated_prototypes(rng, n: int, d: int, what: str) -> np.ndarray:
    protos, attempts = [], 0
    while len(protos) < n:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise CapacityError(
                f"could not place {n} {what} prototypes in {d} dims with |cos| <= {MAX_ABS_COSINE} "
                f"({len(protos)} placed after {MAX_ATTEMPTS} attempts)"
            )
        v = _unit(rng.normal(size=d))
        if protos and np.max(np.abs(np.stack(protos) @ v)) > MAX_ABS_COSINE:
            continue
        protos.append(v)
    return np.stack(protos)


def _pools(rng, n_owners: int, pool: int, vocab: int) -> np.ndarray:
    # Owners take consecutive chunks of a shuffled vocabulary (cyclic), so pools
    # are disjoint whenever the vocabulary is large enough.
    order = rng.permutation(vocab)
    out = np.empty((n_owners, pool), dtype=np.int64)
    pos = 0
    for k in range(n_owners):
        chunk = [order[(pos + j) % vocab] for j in range(pool)]
        pos += pool
        out[k] = chunk
    return out


def build_concept_bank(config: GenConfig) -> ConceptBank:
    config.validate()
    rng = np.random.default_rng([config.seed, 1])
    visual, text = {}, {}
    for level in LEVELS:
        n, d = config.vocab(level), config.level_dim(level)
        visual[level] = _separated_prototypes(rng, n, d, level)
        if d == config.d_text_raw:
            text[level] = visual[level].copy()
        else:
            text[level] = _separated_prototypes(rng, n, config.d_text_raw, f"{level} text")
    return ConceptBank(
        visual=visual,
        text=text,
        class_regions=_pools(rng, config.classes, config.region_pool, config.region_vocab),
        region_patches=_pools(rng, config.region_vocab, config.patch_pool, config.patch_vocab),
        patch_cells=_pools(rng, config.patch_vocab, config.cell_pool, config.cell_vocab),
    )


@dataclass
class WsiSample:
    sample_id: str
    label: int
    split: str
    cells: np.ndarray           # (total cells, d_cell_raw), grouped by (region, patch)
    cell_counts: np.ndarray     # (n_r, n_p)
    patches: np.ndarray         # (n_r, n_p, d_patch_raw)
    tokens: np.ndarray          # (M,) global token ids
    align_cell: np.ndarray      # (n_r, n_p) report index of each patch's cell concept
    align_patch: np.ndarray     # (n_r, n_p) report index of each patch concept
    align_region: np.ndarray    # (n_r,) report index of each region concept
    cell_concept: np.ndarray
    patch_concept: np.ndarray
    region_concept: np.ndarray
    distractor: int = -1        # report index of the distractor token, -1 if none
    _offsets: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def n_regions(self) -> int:
        return self.patches.shape[0]

    @property
    def n_patches(self) -> int:
        return self.patches.shape[1]

    def cell_offsets(self) -> np.ndarray:
        if self._offsets is None:
            self._offsets = np.concatenate([[0], np.cumsum(self.cell_counts.reshape(-1))])
        return self._offsets

    def cells_of(self, region: int, patch: int) -> np.ndarray:
        k = region * self.n_patches + patch
        off = self.cell_offsets()
        return self.cells[off[k]:off[k + 1]]

    def equals(self, other: "WsiSample") -> bool:
        scalars = ("sample_id", "label", "split", "distractor")
        arrays = ("cells", "cell_counts", "patches", "tokens", "align_cell", "align_patch",
                  "align_region", "cell_concept", "patch_concept", "region_concept")
        return all(getattr(self, f) == getattr(other, f) for f in scalars) and all(
            _same(np.asarray(getattr(self, f)), np.asarray(getattr(other, f))) for f in arrays
        )


@dataclass
class Corpus:
    config: GenConfig
    bank: ConceptBank
    samples: list

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]

    def by_id(self, sample_id: str) -> WsiSample:
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise KeyError(sample_id)

    def equals(self, other: "Corpus") -> bool:
        return (
            self.config == other.config
            and self.bank.equals(other.bank)
            and len(self.samples) == len(other.samples)
            and all(a.equals(b) for a, b in zip(self.samples, other.samples))
        )


def _noisy_unit(rng, proto: np.ndarray, noise: float, n: int | None = None) -> np.ndarray:
    if noise == 0.0:
        return np.tile(proto, (n, 1)) if n is not None else proto.copy()
    shape = (n, proto.shape[0]) if n is not None else proto.shape
    x = proto + noise * rng.normal(size=shape)
    return x / np.sqrt((x * x).sum(axis=-1, keepdims=True))


def _assign_splits(config: GenConfig, labels: np.ndarray) -> list:
    rng = np.random.default_rng([config.seed, 2])
    splits = [""] * len(labels)
    for k in range(config.classes):
        members = np.flatnonzero(labels == k)
        members = members[rng.permutation(len(members))]
        n_train = int(round(config.split_train * len(members)))
        n_val = int(round(config.split_val * len(members)))
        n_val = min(n_val, len(members) - n_train)
        for rank, idx in enumerate(members):
            splits[idx] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return splits


def _generate_sample(config: GenConfig, bank: ConceptBank, idx: int, label: int, split: str) -> WsiSample:
    rng = np.random.default_rng([config.seed, 3, idx])
    n_r, n_p = config.regions_per_wsi, config.patches_per_region
    region_concept = np.empty(n_r, dtype=np.int64)
    patch_concept = np.empty((n_r, n_p), dtype=np.int64)
    cell_concept = np.empty((n_r, n_p), dtype=np.int64)
    cell_counts = np.empty((n_r, n_p), dtype=np.int64)
    patches = np.empty((n_r, n_p, config.d_patch_raw))
    cells = []
    for i in range(n_r):
        q = bank.class_regions[label][rng.integers(config.region_pool)]
        region_concept[i] = q
        active = rng.choice(bank.region_patches[q], size=config.patches_active, replace=False)
        for j in range(n_p):
            p = active[rng.integers(config.patches_active)]
            c = bank.patch_cells[p][rng.integers(config.cell_pool)]
            n_cells = int(rng.integers(1, config.cells_per_patch + 1))
            patch_concept[i, j], cell_concept[i, j], cell_counts[i, j] = p, c, n_cells
            patches[i, j] = _noisy_unit(rng, bank.visual["patch"][p], config.noise)
            cells.append(_noisy_unit(rng, bank.visual["cell"][c], config.noise, n_cells))

    groups = [
        ("cell", np.unique(cell_concept)),
        ("patch", np.unique(patch_concept)),
        ("region", np.unique(region_concept)),
        ("wsi", np.array([label])),
    ]
    tokens, index = [], {}
    for level, concepts in groups:
        for c in concepts:
            index[(level, int(c))] = len(tokens)
            tokens.append(bank.token_id(level, c))

    distractor = -1
    if rng.random() < config.distractor_prob:
        level = LEVELS[int(rng.integers(len(LEVELS)))]
        present = {c for (lvl, c) in index if lvl == level}
        absent = [c for c in range(config.vocab(level)) if c not in present]
        if absent:
            distractor = len(tokens)
            tokens.append(bank.token_id(level, absent[int(rng.integers(len(absent)))]))

    lookup = np.vectorize(lambda lvl, c: index[(lvl, int(c))], otypes=[np.int64])
    return WsiSample(
        sample_id=f"wsi_{idx:05d}",
        label=int(label),
        split=split,
        cells=np.concatenate(cells, axis=0),
        cell_counts=cell_counts,
        patches=patches,
        tokens=np.asarray(tokens, dtype=np.int64),
        align_cell=lookup("cell", cell_concept),
        align_patch=lookup("patch", patch_concept),
        align_region=lookup("region", region_concept),
        cell_concept=cell_concept,
        patch_concept=patch_concept,
        region_concept=region_concept,
        distractor=distractor,
    )


def generate_corpus(config: GenConfig) -> Corpus:
    config.validate()
    bank = build_concept_bank(config)
    labels = np.arange(config.n_samples) % config.classes
    splits = _assign_splits(config, labels)
    samples = [_generate_sample(config, bank, i, int(labels[i]), splits[i]) for i in range(config.n_samples)]
    return Corpus(config, bank, samples)


# -- persistence -------------------------------------------------------------

MANIFEST = "manifest.json"
FORMAT_NAME = "hwsi-corpus"
FORMAT_VERSION = 1
_INT_FIELDS = ("cell_counts", "tokens", "align_cell", "align_patch", "align_region",
               "cell_concept", "patch_concept", "region_concept")


def save_corpus(corpus: Corpus, directory) -> Path:
    root = Path(directory)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    (root / "bank").mkdir(exist_ok=True)
    for level in LEVELS:
        save_tensor(root / "bank" / f"{level}_visual.hwt", corpus.bank.visual[level])
        save_tensor(root / "bank" / f"{level}_text.hwt", corpus.bank.text[level])
    entries = []
    for s in corpus.samples:
        files = {"cells": f"samples/{s.sample_id}.cells.hwt", "patches": f"samples/{s.sample_id}.patches.hwt"}
        save_tensor(root / files["cells"], s.cells)
        save_tensor(root / files["patches"], s.patches)
        entry = {"id": s.sample_id, "label": s.label, "split": s.split, "distractor": s.distractor,
                 "files": files}
        entry.update({f: np.asarray(getattr(s, f)).tolist() for f in _INT_FIELDS})
        entries.append(entry)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": asdict(corpus.config),
        "pools": {
            "class_regions": corpus.bank.class_regions.tolist(),
            "region_patches": corpus.bank.region_patches.tolist(),
            "patch_cells": corpus.bank.patch_cells.tolist(),
        },
        "splits": {name: [s.sample_id for s in corpus.split(name)] for name in SPLITS},
        "samples": entries,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def _load_manifest(path: Path) -> dict:
    if not path.exists():
        raise FormatError("manifest missing", path)
    text = path.read_text()
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg}", path, exc.pos) from None
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise FormatError("not a corpus manifest", path, 0)
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported corpus version {manifest.get('version')}", path)
    return manifest


def load_corpus(directory) -> Corpus:
    root = Path(directory)
    mpath = root / MANIFEST
    manifest = _load_manifest(mpath)
    try:
        known = {f.name for f in fields(GenConfig)}
        config = GenConfig(**{k: v for k, v in manifest["config"].items() if k in known})
        pools = manifest["pools"]
        raw_samples = manifest["samples"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest missing field {exc}", mpath) from None

    bank = ConceptBank(
        visual={lvl: load_tensor(root / "bank" / f"{lvl}_visual.hwt") for lvl in LEVELS},
        text={lvl: load_tensor(root / "bank" / f"{lvl}_text.hwt") for lvl in LEVELS},
        class_regions=np.asarray(pools["class_regions"], dtype=np.int64),
        region_patches=np.asarray(pools["region_patches"], dtype=np.int64),
        patch_cells=np.asarray(pools["patch_cells"], dtype=np.int64),
    )
    samples = []
    for entry in raw_samples:
        try:
            arrays = {f: np.asarray(entry[f], dtype=np.int64) for f in _INT_FIELDS}
            files = entry["files"]
            sample = WsiSample(
                sample_id=entry["id"], label=int(entry["label"]), split=entry["split"],
                cells=load_tensor(root / files["cells"]), patches=load_tensor(root / files["patches"]),
                distractor=int(entry["distractor"]), **arrays,
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"sample entry missing field {exc}", mpath) from None
        if sample.cells.shape[0] != int(sample.cell_counts.sum()):
            raise FormatError(f"{sample.sample_id}: cell count mismatch", root / files["cells"])
        if sample.patches.shape[:2] != sample.cell_counts.shape:
            raise FormatError(f"{sample.sample_id}: patch grid mismatch", root / files["patches"])
        samples.append(sample)
    return Corpus(config, bank, samples)
