import csv
import json

import pytest

from neuralgpu.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_PARTIAL, EXIT_VERIFY, main

SMOKE = """\
train:
  model: {filters: 4, param_sets: 2}
  max_length: 4
  batch_size: 4
  max_steps: 4
"""


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("NEURALGPU_OUT", str(tmp_path / "root"))
    return tmp_path


def write(path, text):
    path.write_text(text)
    return str(path)


class TestGen:
    def test_gen_then_verify(self, out, capsys):
        data = out / "d.jsonl"
        assert main(["gen", "--task", "expression", "--length", "20", "--count", "30", "--out", str(data)]) == 0
        gen_line = capsys.readouterr().out
        assert main(["verify", str(data)]) == 0
        verify_line = capsys.readouterr().out
        assert "30/30" in verify_line and "(100.00%)" in verify_line
        assert gen_line.split()[-1] == verify_line.split()[-1]

    def test_same_seed_same_bytes(self, out):
        for name in ("a", "b"):
            main(["gen", "--base", "10", "--length", "7", "--count", "20", "--seed", "5",
                  "--out", str(out / f"{name}.jsonl")])
        assert (out / "a.jsonl").read_bytes() == (out / "b.jsonl").read_bytes()

    def test_count_zero(self, out):
        assert main(["gen", "--count", "0", "--out", str(out / "e.jsonl")]) == 0
        assert (out / "e.jsonl").read_bytes() == b""

    def test_invalid_spec(self, out, capsys):
        assert main(["gen", "--base", "12", "--out", str(out / "x.jsonl")]) == EXIT_CONFIG
        assert "error:" in capsys.readouterr().err

    def test_verify_catches_tampering(self, out):
        data = out / "d.jsonl"
        main(["gen", "--count", "3", "--out", str(data)])
        lines = data.read_text().splitlines()
        rec = json.loads(lines[1])
        rec["target"] = rec["target"][:-1] + ("1" if rec["target"][-1] == "0" else "0")
        lines[1] = json.dumps(rec)
        data.write_text("\n".join(lines) + "\n")
        assert main(["verify", str(data)]) == EXIT_VERIFY


class TestTrain:
    def test_smoke_resume_and_determinism(self, out, capsys):
        cfg = write(out / "run.yaml", SMOKE)
        assert main(["train", "--config", cfg, "--out", str(out / "a")]) == EXIT_OK
        assert main(["train", "--config", cfg, "--out", str(out / "b")]) == EXIT_OK
        ck_a = (out / "a" / "checkpoints" / "step-0000004.ckpt").read_bytes()
        assert ck_a == (out / "b" / "checkpoints" / "step-0000004.ckpt").read_bytes()
        echoed = (out / "a" / "run.yaml").read_text()
        assert "ema_decay:" in echoed and "filters: 4" in echoed

        assert main(["train", "--config", cfg, "--out", str(out / "c"), "--max-steps", "7",
                     "--resume", str(out / "a" / "checkpoints" / "step-0000004.ckpt")]) == EXIT_OK
        steps = [json.loads(line)["step"] for line in (out / "c" / "events.jsonl").open()
                 if json.loads(line)["event"] == "step"]
        assert steps == [5, 6, 7]

    def test_default_run_dir_uses_env(self, out):
        cfg = write(out / "run.yaml", SMOKE)
        assert main(["train", "--config", cfg, "--max-steps", "1"]) == EXIT_OK
        assert (out / "root" / "add-direct2-s0" / "summary.json").exists()

    def test_config_error(self, out, capsys):
        cfg = write(out / "bad.yaml", "train:\n  max_step: 3\n")
        assert main(["train", "--config", cfg]) == EXIT_CONFIG
        assert "bad.yaml:2: train.max_step" in capsys.readouterr().err

    def test_numeric_abort_exit_code(self, out, monkeypatch):
        from neuralgpu import trainer
        from neuralgpu.errors import NumericError

        def explode(*a, **k):
            raise NumericError("tanh")

        monkeypatch.setattr(trainer, "train_step", explode)
        cfg = write(out / "run.yaml", SMOKE)
        assert main(["train", "--config", cfg, "--out", str(out / "z")]) == EXIT_NUMERIC


class TestEval:
    def test_oracle_stub_all_pass(self, out, capsys):
        for suite in ("uniform", "carry", "structured"):
            assert main(["eval", "--oracle-stub", "--suite", suite, "--cases", "10", "--max-k", "5",
                         "--structured-length", "6", "--out", str(out / suite)]) == EXIT_OK
            rows = list(csv.DictReader((out / suite / "report.csv").open()))
            assert rows and all(float(r["accuracy"]) == 1.0 for r in rows)
        assert "carry threshold: none" in capsys.readouterr().out

    def test_eval_section_supplies_defaults(self, out, capsys):
        cfg = write(out / "run.yaml", "eval:\n  suites: [uniform, carry]\n  lengths: [3, 5]\n"
                                      "  cases: 6\n  carry_max_k: 2\n  carry_cases: 4\n")
        assert main(["eval", "--oracle-stub", "--config", cfg, "--out", str(out / "ev")]) == EXIT_OK
        rows = list(csv.DictReader((out / "ev" / "report.csv").open()))
        assert [(r["suite"], r["cases"]) for r in rows] == [("uniform-3", "6"), ("uniform-5", "6"),
                                                            ("carry-1", "4"), ("carry-2", "4")]
        assert main(["eval", "--oracle-stub", "--config", cfg, "--suite", "uniform", "--lengths", "4",
                     "--out", str(out / "ev2")]) == EXIT_OK
        rows = list(csv.DictReader((out / "ev2" / "report.csv").open()))
        assert [r["suite"] for r in rows] == ["uniform-4"]

    def test_unknown_suite(self, out, capsys):
        assert main(["eval", "--oracle-stub", "--suite", "vibes"]) == EXIT_CONFIG
        assert "valid suites: uniform, carry, structured" in capsys.readouterr().err

    def test_checkpoint_eval_and_report(self, out, capsys):
        cfg = write(out / "run.yaml", SMOKE)
        main(["train", "--config", cfg, "--out", str(out / "a")])
        ck = str(out / "a" / "checkpoints" / "step-0000004.ckpt")
        assert main(["eval", "--checkpoint", ck, "--cases", "5", "--out", str(out / "ev")]) == EXIT_OK
        rows = list(csv.DictReader((out / "ev" / "report.csv").open()))
        assert [r["length"] for r in rows] == ["4", "8"]
        assert main(["eval", "--checkpoint", ck, "--suite", "carry", "--cases", "5", "--max-k", "3",
                     "--out", str(out / "ev2")]) == EXIT_OK
        png = out / "chart.png"
        assert main(["report", str(out / "ev" / "report.csv"), str(out / "ev2" / "report.csv"),
                     "--out", str(png)]) == EXIT_OK
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_mismatched_checkpoint(self, out, capsys):
        from neuralgpu import checkpoint as ckpt_io
        from neuralgpu.model import ModelConfig, ParameterBank

        bank = ParameterBank.initialize(ModelConfig(filters=4), 0)
        ck = ckpt_io.from_bank(bank, config={"model": ModelConfig(filters=6).to_dict()})
        path = ckpt_io.save(out / "bad.ckpt", ck)
        assert main(["eval", "--checkpoint", str(path)]) == EXIT_CONFIG
        assert "shape" in capsys.readouterr().err

    def test_missing_checkpoint(self, out):
        assert main(["eval", "--checkpoint", str(out / "none.ckpt")]) == EXIT_CONFIG


class TestSweep:
    def test_sweep_csv(self, out, capsys):
        cfg = write(out / "run.yaml", SMOKE)
        assert main(["sweep", "--config", cfg, "--seeds", "0-1", "--max-steps", "2", "--cases", "4",
                     "--out", str(out / "sw")]) == EXIT_OK
        rows = list(csv.DictReader((out / "sw" / "sweep.csv").open()))
        assert [r["seed"] for r in rows] == ["0", "1"]
        assert all(len(r["checkpoint_sha256"]) == 64 and 0.0 <= float(r["metric"]) <= 1.0 for r in rows)
        assert (out / "sw" / "seed-1" / "summary.json").exists()
        assert "pass fraction" in capsys.readouterr().out

    def test_partial_failure_exit_code(self, out, monkeypatch):
        from neuralgpu import trainer
        from neuralgpu.errors import NumericError

        real = trainer.train_step

        def explode_for_seed_1(bank, batch, config, *a, **k):
            if config.seed == 1:
                raise NumericError("sigmoid")
            return real(bank, batch, config, *a, **k)

        monkeypatch.setattr(trainer, "train_step", explode_for_seed_1)
        cfg = write(out / "run.yaml", SMOKE)
        assert main(["sweep", "--config", cfg, "--seeds", "0,1", "--max-steps", "2", "--cases", "4",
                     "--out", str(out / "sw")]) == EXIT_PARTIAL
        rows = list(csv.DictReader((out / "sw" / "sweep.csv").open()))
        assert rows[1]["error"].startswith("NumericError") and rows[0]["error"] == ""

    def test_bad_seed_list(self, out):
        with pytest.raises(SystemExit):
            main(["sweep", "--seeds", "a-b"])


def test_report_without_rows(out):
    path = out / "empty.csv"
    path.write_text("checkpoint,suite,cases,passes,accuracy,stderr,length,k,base,L,digits,task\n")
    assert main(["report", str(path)]) == EXIT_CONFIG
