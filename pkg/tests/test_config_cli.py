import csv
import hashlib
import json

import numpy as np
import pytest

from deepela.cli import _int_list, main
from deepela.config import ConfigError, load_config, parse_config
from deepela.model import load_checkpoint
from deepela.randgen import read_corpus

SMALL_TRAIN = """
[model]
preset = tiny

[train]
batch_size = 4
multiplier = 5
corpus_size = 8
epochs = 1
instances_per_epoch = 12
"""


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestConfig:
    def test_sections(self):
        s = parse_config("[generator]\nn = 10\ndims = 2:1, 3:2\nseed = 4\n[model]\npreset = tiny\nk = 3\n")
        cfg, n, dims = s.generator_config()
        assert (n, dims, cfg.seed) == (10, [(2, 1), (3, 2)], 4)
        assert s.model_config().k == 3

    def test_unknown_key_and_section(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("[train]\nbatchsize = 3\n")
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[trian]\nlr = 1\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="batch_size"):
            parse_config("[train]\nbatch_size = many\n")

    def test_syntax_error_has_line(self):
        with pytest.raises(ConfigError, match=r"line\s+2"):
            parse_config("[train]\nno equals sign here\n")

    def test_semantic_errors(self):
        with pytest.raises(ConfigError):
            parse_config("[train]\ntau = 0.5\n").train_config(4)
        with pytest.raises(ConfigError):
            parse_config("[model]\npreset = giant\n").model_config()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini")


class TestIntList:
    def test_ranges(self):
        assert _int_list("1-3,8, 10-11") == [1, 2, 3, 8, 10, 11]


class TestCLI:
    def test_help_and_usage(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        with pytest.raises(SystemExit) as exc:
            main(["gen", "--bogus"])
        assert exc.value.code == 2

    def test_gen_deterministic(self, tmp_path):
        cfgp = tmp_path / "g.ini"
        cfgp.write_text("[generator]\nn = 30\ndims = 2:1\nseed = 1\n")
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        assert main(["gen", "--config", str(cfgp), "--out", str(a)]) == 0
        assert main(["gen", "--config", str(cfgp), "--out", str(b)]) == 0
        assert _sha(a) == _sha(b)
        assert len(read_corpus(a)) == 30
        stats = json.loads((tmp_path / "a.txt.stats.json").read_text())
        assert 0 < stats["acceptance_rate"] <= 1

    def test_gen_retry_budget_error(self, tmp_path, capsys):
        cfgp = tmp_path / "g.ini"
        cfgp.write_text("[generator]\nn = 1\nmin_std = 1e6\nretry_budget = 20\n")
        out = tmp_path / "c.txt"
        assert main(["gen", "--config", str(cfgp), "--out", str(out)]) == 1
        assert "error" in capsys.readouterr().err
        assert not out.exists()

    def test_config_error_exit(self, tmp_path):
        cfgp = tmp_path / "g.ini"
        cfgp.write_text("[generator]\nfoo = 1\n")
        assert main(["gen", "--config", str(cfgp), "--out", str(tmp_path / "x")]) == 1

    def test_params(self, tmp_path, capsys):
        out = tmp_path / "p.json"
        assert main(["params", "--preset", "medium", "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "2263296" in text and "delta backbone +0" in text
        rep = json.loads(out.read_text())
        assert rep["conventions"]["table1"]["backbone"] == 2_263_296
        assert "assumptions" in rep

    def test_pretrain_and_resume(self, tmp_path):
        cfgp = tmp_path / "t.ini"
        cfgp.write_text(SMALL_TRAIN)
        full = tmp_path / "full.dela"
        assert main(["--seed", "3", "pretrain", "--config", str(cfgp), "--steps", "3", "--quiet",
                     "--out", str(full)]) == 0
        part = tmp_path / "part.dela"
        assert main(["--seed", "3", "pretrain", "--config", str(cfgp), "--steps", "2", "--quiet",
                     "--out", str(part)]) == 0
        resumed = tmp_path / "resumed.dela"
        assert main(["pretrain", "--resume", str(part), "--steps", "3", "--quiet", "--out", str(resumed)]) == 0
        with open(str(resumed) + ".metrics.csv", newline="") as fh:
            steps = [int(r["step"]) for r in csv.DictReader(fh)]
        assert steps == [0, 1, 2]
        a, b = load_checkpoint(full), load_checkpoint(resumed)
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])

    def test_pretrain_corpus_dimension_mismatch(self, tmp_path, capsys):
        gen = tmp_path / "g.ini"
        gen.write_text("[generator]\nn = 3\ndims = 3:2\n")
        corpus = tmp_path / "c.txt"
        assert main(["gen", "--config", str(gen), "--out", str(corpus)]) == 0
        cfgp = tmp_path / "t.ini"
        cfgp.write_text(SMALL_TRAIN)
        out = tmp_path / "m.dela"
        assert main(["pretrain", "--config", str(cfgp), "--corpus", str(corpus), "--out", str(out)]) == 1
        assert "d + m > nu" in capsys.readouterr().err
        assert not out.exists()

    def test_extract_report_hlp(self, tmp_path, capsys):
        feats = tmp_path / "f.csv"
        assert main(["extract", "--fids", "1-6", "--seeds", "1-4", "--out", str(feats)]) == 0
        snr_out = tmp_path / "snr.csv"
        assert main(["report", "snr", "--features", str(feats), "--out", str(snr_out)]) == 0
        corr_out = tmp_path / "corr.csv"
        with pytest.warns(RuntimeWarning, match="degenerate correlation group"):
            assert main(["report", "corr", "--features", str(feats), "--out", str(corr_out)]) == 0
        assert (tmp_path / "corr.png").exists()
        first = snr_out.read_bytes()
        assert main(["report", "snr", "--features", str(feats), "--out", str(snr_out)]) == 0
        assert snr_out.read_bytes() == first
        hlp = tmp_path / "h.csv"
        assert main(["hlp", "--fids", "1-24", "--train-seeds", "1-2", "--test-seeds", "1-2", "--k", "1",
                     "--out", str(hlp)]) == 0
        with open(hlp, newline="") as fh:
            assert all(float(r["macro_f1"]) == 1.0 for r in csv.DictReader(fh))

    def test_report_constant_feature(self, tmp_path):
        feats = tmp_path / "f.csv"
        rows = ["instance_key,fid,dim,instance_seed,repetition,const,var"]
        for s in range(1, 6):
            rows.append(f"1_{s}_2,1,2,{s},0,0.5,{s * 0.1}")
        feats.write_text("\n".join(rows) + "\n")
        out = tmp_path / "snr.csv"
        assert main(["report", "snr", "--features", str(feats), "--out", str(out)]) == 0
        assert out.read_text().splitlines()[1] == "const,1000000000000.0"

    def test_ela_and_aas(self, tmp_path):
        ela_out = tmp_path / "ela.csv"
        assert main(["ela", "--fids", "1,2", "--seeds", "1", "--out", str(ela_out)]) == 0
        with open(ela_out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 18
        feats = tmp_path / "f.csv"
        assert main(["extract", "--fids", "1-4", "--seeds", "1-4", "--out", str(feats)]) == 0
        perf = tmp_path / "perf.csv"
        lines = ["instance_key,algorithm,repetition,metric,value"]
        for f in range(1, 5):
            for s in range(1, 5):
                lines.append(f"{f}_{s}_2,A,0,ert,{100 + f}")
                lines.append(f"{f}_{s}_2,B,0,ert,{300 - 50 * f}")
        perf.write_text("\n".join(lines) + "\n")
        sel = tmp_path / "sel.csv"
        assert main(["aas", "--features", str(feats), "--perf", str(perf), "--train-seeds", "1-3",
                     "--test-seeds", "4", "--k", "1", "--out", str(sel)]) == 0
        assert sel.read_text().startswith("group,n,sbs,selector,vbs")

    def test_missing_input_exit_1(self, tmp_path):
        assert main(["report", "snr", "--features", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) == 1
