import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hwsi.encoders import EncoderConfig, encode_text, hierarchical_forward, to_paramset
from hwsi.errors import ContractError, FormatError
from hwsi.numerics import Tensor
from hwsi.projectors import (
    SEGMENTS,
    ProjectedFeatures,
    assemble_multimodal_sequence,
    init_projector_params,
    load_sequence,
    project,
    save_sequence,
)
from hwsi.spf import SpfConfig, spf_sample
from hwsi.training import init_params

D = 8


def cfg_for(corpus, **kw):
    values = dict(d_cell_raw=8, d_patch_raw=8, d_cell=D, d_patch=D, d_text=D, d_joint=D,
                  text_vocab=corpus.bank.vocab_size)
    values.update(kw)
    return EncoderConfig(**values).validate()


def fake_projected(n_regions, kept_per_region, d=D, seed=0):
    rng = np.random.default_rng(seed)
    kept = np.broadcast_to(np.asarray(kept_per_region), (n_regions,))
    n_sel = int(kept.sum())
    region_of = np.repeat(np.arange(n_regions), kept)
    patch_index = np.concatenate([np.arange(k) for k in kept])
    return ProjectedFeatures(Tensor(rng.normal(size=(n_sel, d))), Tensor(rng.normal(size=(n_sel, d))),
                             Tensor(rng.normal(size=(n_regions, d))), Tensor(rng.normal(size=(1, d))),
                             region_of, patch_index)


class TestProject:
    def test_identity_degenerate(self, small_corpus):
        cfg = cfg_for(small_corpus, ff_mult=1)
        arrays = init_projector_params(cfg)
        for s in ("c", "p", "r", "wsi"):
            arrays[f"projector.{s}.w1"] = np.eye(D)
            arrays[f"projector.{s}.b1"] = np.full(D, 10.0)   # keeps ReLU in its linear range
            arrays[f"projector.{s}.w2"] = np.eye(D)
            arrays[f"projector.{s}.b2"] = np.full(D, -10.0)
        p = to_paramset(arrays)
        x = np.random.default_rng(0).normal(size=(3, D))
        feats = type("F", (), dict(cell_tokens=Tensor(x), patch_embs=Tensor(x), region_embs=Tensor(x[:2]),
                                   wsi=Tensor(x[:1]), region_of=np.array([0, 0, 1]),
                                   patch_index=np.array([0, 1, 0])))
        out = project(feats, p, cfg)
        np.testing.assert_allclose(out.z_c.data, x, atol=1e-12)
        np.testing.assert_allclose(out.z_r.data, x[:2], atol=1e-12)

    def test_zero_weights(self, small_corpus):
        cfg = cfg_for(small_corpus)
        params = init_params(cfg, 0)
        zeros = params.with_tensors({k: Tensor(np.zeros(params.tensor(k).shape))
                                     for k in params if k.startswith("projector.")})
        s = small_corpus.samples[0]
        proj = project(hierarchical_forward(s, spf_sample(s, small_corpus.bank, SpfConfig(top_k=2)), zeros, cfg),
                       zeros, cfg)
        for z in (proj.z_c, proj.z_p, proj.z_r, proj.z_wsi):
            assert np.all(z.data == 0.0)

    def test_preserves_lengths(self, small_corpus):
        cfg = cfg_for(small_corpus)
        params = init_params(cfg, 0)
        s = small_corpus.samples[0]
        spf = spf_sample(s, small_corpus.bank, SpfConfig(top_k=3))
        feats = hierarchical_forward(s, spf, params, cfg)
        proj = project(feats, params, cfg)
        assert proj.z_c.shape == proj.z_p.shape == (feats.n_selected, D)
        assert proj.z_r.shape == (s.n_regions, D) and proj.z_wsi.shape == (1, D)
        assert np.array_equal(proj.region_of, feats.region_of)

    def test_shared_joint_dimension(self, small_corpus):
        cfg = cfg_for(small_corpus, d_joint=6)
        arrays = init_projector_params(cfg)
        assert {arrays[f"projector.{s}.w2"].shape[1] for s in ("c", "p", "r", "wsi")} == {6}

    def test_dimension_mismatch(self, small_corpus):
        cfg = cfg_for(small_corpus)
        params = init_params(cfg_for(small_corpus, d_joint=6), 0)
        s = small_corpus.samples[0]
        with pytest.raises(ContractError):
            project(hierarchical_forward(s, spf_sample(s, small_corpus.bank, SpfConfig(mode="inference")),
                                         params, cfg), params, cfg)


class TestSequence:
    def test_length_example(self):
        # three kept patches over two regions, five report tokens
        seq = assemble_multimodal_sequence(fake_projected(2, [2, 1]), Tensor(np.ones((5, D))))
        assert len(seq) == 3 + 3 + 2 + 1 + 5 == 14
        six = assemble_multimodal_sequence(fake_projected(2, 3), Tensor(np.ones((5, D))))
        assert len(six) == 6 + 6 + 2 + 1 + 5

    @given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 7))
    @settings(max_examples=30, deadline=None)
    def test_order_and_length(self, n_r, kept, m):
        seq = assemble_multimodal_sequence(fake_projected(n_r, kept), Tensor(np.ones((m, D))))
        assert len(seq) == 2 * n_r * kept + n_r + 1 + m
        assert np.all(np.diff(seq.segments) >= 0)
        assert seq.segment_names()[0] == "cell" and seq.segment_names()[-1] == "text"
        assert list(dict.fromkeys(seq.segment_names())) == list(SEGMENTS)

    def test_sources(self):
        proj = fake_projected(2, 2)
        seq = assemble_multimodal_sequence(proj, Tensor(np.ones((3, D))))
        names = seq.segment_names()
        cell_rows = seq.sources[[i for i, n in enumerate(names) if n == "cell"]]
        assert cell_rows.tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]
        assert seq.sources[names.index("wsi")].tolist() == [-1, -1]

    def test_width_mismatch(self):
        with pytest.raises(ContractError):
            assemble_multimodal_sequence(fake_projected(1, 1), Tensor(np.ones((2, D + 1))))

    def test_round_trip(self, small_corpus, tmp_path):
        cfg = cfg_for(small_corpus)
        params = init_params(cfg, 0)
        s = small_corpus.samples[0]
        proj = project(hierarchical_forward(s, spf_sample(s, small_corpus.bank, SpfConfig(mode="inference")),
                                            params, cfg), params, cfg)
        seq = assemble_multimodal_sequence(proj, encode_text(params, s.tokens, cfg))
        save_sequence(seq, tmp_path / "seq.bin")
        assert load_sequence(tmp_path / "seq.bin").equals(seq)

    def test_bad_tag(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOTASEQ!" + b"\0" * 16)
        with pytest.raises(FormatError, match="tag"):
            load_sequence(tmp_path / "x.bin")
