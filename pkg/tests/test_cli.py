import json
import math

import pytest

from biomamba import cli
from biomamba.model import load_checkpoint
from synthetic import biomedical_text, toy_squad, write_json

SMALL = """\
# tiny model for fast runs
n_layers = 1
d_model = 16
d_inner = 32
n_state = 4
context_len = 96
total_steps = 6
warmup_steps = 2
tokens_per_batch = 192
ckpt_every = 3
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "corpus.txt").write_text(biomedical_text(40, seed=0), encoding="utf-8")
    (tmp_path / "small.cfg").write_text(SMALL, encoding="utf-8")
    return tmp_path


def pretrain(workdir, name="run", *extra):
    out = workdir / name
    code = cli.main(["pretrain", "--config", str(workdir / "small.cfg"), "--corpus", str(workdir / "corpus.txt"), "--out", str(out), *extra])
    return code, out


@pytest.fixture
def trained(workdir):
    code, out = pretrain(workdir)
    assert code == 0
    return out / "final.bmck"


class TestTokenizerTrain:
    def test_base_vocab_has_no_merges(self, workdir, capsys):
        out = workdir / "v.txt"
        assert cli.main(["tokenizer-train", "--corpus", str(workdir / "corpus.txt"), "--vocab-size", "260", "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 1

    def test_deterministic(self, workdir):
        outs = []
        for name in ("a.txt", "b.txt"):
            cli.main(["tokenizer-train", "--corpus", str(workdir / "corpus.txt"), "--vocab-size", "300", "--out", str(workdir / name)])
            outs.append((workdir / name).read_bytes())
        assert outs[0] == outs[1]
        assert len(outs[0].decode().splitlines()) == 41

    def test_too_small(self, workdir, capsys):
        assert cli.main(["tokenizer-train", "--corpus", str(workdir / "corpus.txt"), "--vocab-size", "259", "--out", str(workdir / "v")]) == 1

    def test_missing_corpus(self, workdir):
        assert cli.main(["tokenizer-train", "--corpus", str(workdir / "nope"), "--vocab-size", "260", "--out", str(workdir / "v")]) == 2


class TestPretrain:
    def test_smoke(self, trained):
        run = trained.parent
        assert trained.exists()
        assert {"step-3.bmck", "step-6.bmck", "config.resolved", "train.log"} <= {p.name for p in run.iterdir()}
        assert "n_layers = 1" in (run / "config.resolved").read_text()

    def test_identical_runs(self, workdir):
        _, a = pretrain(workdir, "a")
        _, b = pretrain(workdir, "b")
        assert (a / "final.bmck").read_bytes() == (b / "final.bmck").read_bytes()

    def test_resume_matches_uninterrupted(self, workdir, trained):
        code, out = pretrain(workdir, "resumed", "--resume", str(trained.parent / "step-3.bmck"))
        assert code == 0
        assert load_checkpoint(out / "final.bmck").meta["step"] == 6
        assert (out / "final.bmck").read_bytes() == trained.read_bytes()
        assert not (out / "step-3.bmck").exists()

    def test_resume_with_other_config(self, workdir, trained):
        code, _ = pretrain(workdir, "bad", "--set", "d_model=32", "--resume", str(trained))
        assert code == 2

    def test_set_overrides_file(self, workdir):
        code, out = pretrain(workdir, "o", "--set", "total_steps=3", "--set", "ckpt_every=0")
        assert code == 0
        assert "total_steps = 3" in (out / "config.resolved").read_text()

    def test_config_error_reports_line(self, workdir, capsys):
        (workdir / "bad.cfg").write_text("n_layers = 1\nbogus_key = 3\n")
        code = cli.main(["pretrain", "--config", str(workdir / "bad.cfg"), "--corpus", str(workdir / "corpus.txt"), "--out", str(workdir / "x")])
        assert code == 2
        assert "bad.cfg:2:" in capsys.readouterr().err

    def test_bad_value(self, workdir, capsys):
        code, _ = pretrain(workdir, "x", "--set", "d_model=wide")
        assert code == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_abort(self, workdir, capsys):
        code, _ = pretrain(workdir, "x", "--set", "peak_lr=1e30", "--set", "grad_clip=0")
        assert code == 3
        assert "numeric" in capsys.readouterr().err

    def test_unknown_flag(self, workdir):
        with pytest.raises(SystemExit) as exc:
            cli.main(["pretrain", "--bogus"])
        assert exc.value.code == 1


class TestFinetune:
    def test_reports_skipped(self, workdir, trained, capsys):
        doc = toy_squad(4)
        para = doc["data"][0]["paragraphs"][0]
        pad = "filler " * 40
        para["context"] = pad + para["context"]
        for qa in para["qas"]:
            for a in qa["answers"]:
                a["answer_start"] += len(pad)
        write_json(workdir / "qa.json", doc)
        code = cli.main(["finetune", "--ckpt", str(trained), "--qa", str(workdir / "qa.json"), "--out", str(workdir / "ft"), "--config", str(workdir / "small.cfg"), "--set", "total_steps=3", "--set", "qa_batch_size=2"])
        assert code == 0
        assert "n_skipped=1" in capsys.readouterr().out
        assert load_checkpoint(workdir / "ft" / "finetuned.bmck").qa_head is not None

    def test_malformed_json(self, workdir, trained, capsys):
        (workdir / "broken.json").write_text("{not json")
        code = cli.main(["finetune", "--ckpt", str(trained), "--qa", str(workdir / "broken.json"), "--out", str(workdir / "ft")])
        assert code == 2
        assert "broken.json" in capsys.readouterr().err


class TestEval:
    def test_corpus_only(self, workdir, trained, capsys):
        out = workdir / "r.json"
        assert cli.main(["eval", "--ckpt", str(trained), "--corpus", str(workdir / "corpus.txt"), "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert "acc" not in report and "mrr" not in report
        assert report["perplexity"] == pytest.approx(math.exp(report["cross_entropy"]), rel=1e-12)
        assert "perplexity" in capsys.readouterr().out

    def test_rerun_identical(self, workdir, trained):
        for name in ("a.json", "b.json"):
            cli.main(["eval", "--ckpt", str(trained), "--corpus", str(workdir / "corpus.txt"), "--out", str(workdir / name)])
        assert (workdir / "a.json").read_bytes() == (workdir / "b.json").read_bytes()

    def test_qa_needs_head(self, workdir, trained):
        write_json(workdir / "qa.json", toy_squad(3))
        assert cli.main(["eval", "--ckpt", str(trained), "--qa", str(workdir / "qa.json"), "--out", str(workdir / "r")]) == 1

    def test_qa_fields(self, workdir, trained):
        write_json(workdir / "qa.json", toy_squad(3))
        ft = ["finetune", "--ckpt", str(trained), "--qa", str(workdir / "qa.json"), "--out", str(workdir / "ft")]
        assert cli.main(ft + ["--config", str(workdir / "small.cfg"), "--set", "total_steps=3", "--set", "qa_batch_size=2"]) == 0
        out = workdir / "r.json"
        assert cli.main(["eval", "--ckpt", str(workdir / "ft" / "finetuned.bmck"), "--qa", str(workdir / "qa.json"), "--out", str(out), "--k", "3"]) == 0
        report = json.loads(out.read_text())
        assert report["mrr"] >= report["acc"]
        assert "cross_entropy" not in report

    def test_needs_input(self, workdir, trained):
        assert cli.main(["eval", "--ckpt", str(trained), "--out", str(workdir / "r.json")]) == 1

    def test_missing_checkpoint(self, workdir):
        assert cli.main(["eval", "--ckpt", str(workdir / "none.bmck"), "--corpus", str(workdir / "corpus.txt"), "--out", str(workdir / "r")]) == 2

    def test_vocab_mismatch(self, workdir, trained):
        cli.main(["tokenizer-train", "--corpus", str(workdir / "corpus.txt"), "--vocab-size", "270", "--out", str(workdir / "v.txt")])
        code = cli.main(["eval", "--ckpt", str(trained), "--vocab", str(workdir / "v.txt"), "--corpus", str(workdir / "corpus.txt"), "--out", str(workdir / "r")])
        assert code == 2


class TestGenerate:
    def run(self, trained, capsys, *extra):
        code = cli.main(["generate", "--ckpt", str(trained), *extra])
        return code, capsys.readouterr().out

    def test_deterministic(self, trained, capsys):
        a = self.run(trained, capsys, "--prompt", "TP53", "--max-new", "8", "--temperature", "1.0", "--seed", "4")
        b = self.run(trained, capsys, "--prompt", "TP53", "--max-new", "8", "--temperature", "1.0", "--seed", "4")
        assert a == b and a[0] == 0

    def test_zero_new_tokens(self, trained, capsys):
        assert self.run(trained, capsys, "--prompt", "TP53", "--max-new", "0") == (0, "\n")

    def test_prompt_too_long(self, trained, capsys):
        code, _ = self.run(trained, capsys, "--prompt", "x" * 200)
        assert code == 2
