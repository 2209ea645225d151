import json

import pytest

from conftest import SMALL
from hwsi.cli import main

MODEL = dict(d_cell=8, d_patch=8, d_text=8, d_joint=8, top_k=3, epochs_stage1=2, epochs_stage2=1,
             batch_stage1=4, batch_stage2=4)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({**SMALL, **MODEL}))
    assert main(["gen", "--config", str(cfg), "--out", str(root / "data"), "--seed", "2"]) == 0
    ckpt = root / "s1.ckpt"
    assert main(["train", "--stage", "1", "--data", str(root / "data"), "--ckpt", str(ckpt), "--config", str(cfg)]) == 0
    assert main(["train", "--stage", "2", "--data", str(root / "data"), "--ckpt", str(ckpt),
                 "--out", str(root / "s2.ckpt")]) == 0
    return root


class TestUsage:
    def test_no_command(self, capsys):
        assert main([]) == 1

    def test_help_and_version(self, capsys):
        assert main(["--help"]) == 0
        assert main(["--version"]) == 0
        assert "hwsi" in capsys.readouterr().out

    def test_unknown_flag(self, capsys):
        assert main(["gradcheck", "--bogus"]) == 1
        assert "unrecognized" in capsys.readouterr().err

    def test_bad_stage(self, capsys):
        assert main(["train", "--stage", "3", "--data", "x", "--ckpt", "y"]) == 1

    def test_bad_threads(self, monkeypatch, capsys):
        monkeypatch.setenv("HWSI_THREADS", "abc")
        assert main(["gradcheck", "--suite", "losses"]) == 1
        assert "HWSI_THREADS" in capsys.readouterr().err


class TestGradcheck:
    def test_losses(self, capsys):
        assert main(["gradcheck", "--suite", "losses"]) == 0
        out = capsys.readouterr().out
        assert "total_hca" in out and "FAIL" not in out


class TestPipeline:
    def test_gen_header(self, workspace):
        header = json.loads((workspace / "data" / "run_gen.json").read_text())
        assert header["seed"] == 2 and header["provenance"]["seed"] == "flag"
        assert header["provenance"]["d_joint"] == "file"
        assert "time" not in json.dumps(header)

    def test_gen_reproducible(self, workspace, tmp_path):
        assert main(["gen", "--config", str(workspace / "cfg.json"), "--out", str(tmp_path / "d"),
                     "--seed", "2"]) == 0
        files = sorted(p.relative_to(workspace / "data") for p in (workspace / "data").rglob("*") if p.is_file())
        assert files
        for rel in files:
            assert (tmp_path / "d" / rel).read_bytes() == (workspace / "data" / rel).read_bytes()

    def test_spf_train_and_infer(self, workspace, capsys):
        data = str(workspace / "data")
        assert main(["spf", "--data", data, "--sample", "wsi_00000", "--mode", "infer"]) == 0
        shown = json.loads(capsys.readouterr().out)
        assert shown["mode"] == "inference" and len(shown["regions"]) == SMALL["regions_per_wsi"]
        assert main(["spf", "--data", data, "--sample", "wsi_00000", "--mode", "train", "--tokens", "1,2",
                     "--top-k", "3"]) == 0
        shown = json.loads(capsys.readouterr().out)
        assert all(len(r["final"]) <= 3 for r in shown["regions"])

    def test_tokens_rejected_in_infer(self, workspace, capsys):
        rc = main(["spf", "--data", str(workspace / "data"), "--sample", "wsi_00000", "--mode", "infer",
                   "--tokens", "1"])
        assert rc == 1 and "not allowed" in capsys.readouterr().err

    def test_missing_sample(self, workspace, capsys):
        assert main(["spf", "--data", str(workspace / "data"), "--sample", "wsi_99999"]) == 1

    def test_stage2_needs_stage1(self, workspace, tmp_path, capsys):
        data = str(workspace / "data")
        assert main(["train", "--stage", "2", "--data", data, "--ckpt", str(tmp_path / "none.ckpt")]) == 1
        assert main(["train", "--stage", "2", "--data", data, "--ckpt", str(workspace / "s2.ckpt"),
                     "--out", str(tmp_path / "x.ckpt")]) == 1

    def test_train_logs(self, workspace):
        log = (workspace / "s1.ckpt.stage1.csv").read_text().splitlines()
        assert log[0].startswith("stage,epoch,step")
        assert (workspace / "s1.ckpt.stage1.png").stat().st_size > 0

    def test_train_reproducible(self, workspace, tmp_path):
        ckpt = tmp_path / "again.ckpt"
        assert main(["train", "--stage", "1", "--data", str(workspace / "data"), "--ckpt", str(ckpt),
                     "--config", str(workspace / "cfg.json")]) == 0
        assert ckpt.read_bytes() == (workspace / "s1.ckpt").read_bytes()

    @pytest.mark.parametrize("task", ["zeroshot", "retrieval", "crossmodal"])
    def test_eval_writes_csv_and_figure(self, workspace, task):
        out = workspace / f"{task}.csv"
        with _quiet():
            rc = main(["eval", "--task", task, "--data", str(workspace / "data"), "--ckpt",
                       str(workspace / "s2.ckpt"), "--out", str(out)])
        assert rc == 0
        assert out.read_text().startswith("task,metric,value")
        assert list(workspace.glob(f"{task}*.png"))

    def test_eval_reproducible(self, workspace, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for path in (a, b):
            with _quiet():
                assert main(["eval", "--task", "crossmodal", "--data", str(workspace / "data"), "--ckpt",
                             str(workspace / "s2.ckpt"), "--out", str(path)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_export(self, workspace):
        from hwsi.projectors import load_sequence

        out = workspace / "seq.bin"
        assert main(["export-sequence", "--data", str(workspace / "data"), "--ckpt", str(workspace / "s2.ckpt"),
                     "--sample", "wsi_00001", "--out", str(out)]) == 0
        seq = load_sequence(out)
        assert seq.segment_names()[-1] == "text"


def _quiet():
    import warnings

    ctx = warnings.catch_warnings()
    ctx.__enter__()
    warnings.simplefilter("ignore")

    class _Exit:
        def __enter__(self):
            return self

        def __exit__(self, *exc):
            ctx.__exit__(*exc)

    return _Exit()
