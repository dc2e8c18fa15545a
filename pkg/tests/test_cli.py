import csv
import os

from linattn.cli import run_cli
from linattn.tasks import load_dataset
from linattn.transfer import parse_checkpoint


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_no_args_is_usage_error(capsys):
    assert run_cli([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_subcommand(capsys):
    assert run_cli(["frobnicate"]) == 1
    assert "frobnicate" in capsys.readouterr().err


def test_unknown_flag(capsys):
    assert run_cli(["bench", "--seed", "1", "--bogus", "2"]) == 1
    assert "--bogus" in capsys.readouterr().err


def test_seed_required_for_train_and_bench(capsys):
    assert run_cli(["bench"]) == 1
    assert "--seed" in capsys.readouterr().err
    assert run_cli(["train"]) == 1
    assert "--seed" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("frobnicator = 3\n")
    assert run_cli(["bench", "--seed", "1", "--config", str(cfg)]) == 1
    assert "frobnicator" in capsys.readouterr().err


def test_gen_data_writes_loadable_file(tmp_path):
    out = tmp_path / "data.tsv"
    code = run_cli(["gen-data", "--task", "listops", "--n", "30", "--seed", "5",
                    "--listops-length", "48", "--out", str(out)])
    assert code == 0
    examples = load_dataset(out)
    assert len(examples) == 30
    # regeneration with the same seed is identical
    out2 = tmp_path / "data2.tsv"
    run_cli(["gen-data", "--task", "listops", "--n", "30", "--seed", "5",
             "--listops-length", "48", "--out", str(out2)])
    assert out.read_text() == out2.read_text()


def test_bench_writes_csv_and_figures(tmp_path):
    out = tmp_path / "bench.csv"
    code = run_cli(["bench", "--kinds", "simple,softmax", "--lengths", "16,32,64",
                    "--d", "4", "--heads", "1", "--seed", "3", "--out", str(out)])
    assert code == 0
    rows = read_rows(out)
    assert len(rows) == 6  # one per (kind, length)
    assert {(r["kind"], r["length"]) for r in rows} == \
           {(k, str(l)) for k in ("simple", "softmax") for l in (16, 32, 64)}
    assert os.path.exists(tmp_path / "bench_time.png")
    assert os.path.exists(tmp_path / "bench_memory.png")


def test_bench_no_plots_and_no_timing_determinism(tmp_path):
    args = ["bench", "--kinds", "simple", "--lengths", "16,32,64", "--d", "4",
            "--seed", "3", "--no-plots", "--no-timing"]
    out1, out2 = tmp_path / "b1.csv", tmp_path / "b2.csv"
    assert run_cli(args + ["--out", str(out1)]) == 0
    assert run_cli(args + ["--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    assert not os.path.exists(tmp_path / "b1_time.png")


def test_gradcheck_subcommand_passes(capsys):
    assert run_cli(["gradcheck", "--variant", "simple", "--blocks", "2"]) == 0
    assert "passed" in capsys.readouterr().out


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nsteps = 4\nbatch-size = 2\nlength = 8\n"
                   "task_vocab = 4\ntask_classes = 2\nd_embed = 16\nd_mlp = 16\n"
                   "heads = 2\ntrain_n = 8\ntest_n = 4\neval_every = 0\nwarmup = 2\n")
    out = tmp_path / "metrics.csv"
    code = run_cli(["train", "--config", str(cfg), "--seed", "7", "--steps", "2",
                    "--out", str(out), "--no-plots", "--no-timing"])
    assert code == 0
    rows = read_rows(out)
    train_rows = [r for r in rows if r["split"] == "train"]
    assert len(train_rows) == 2  # the flag overrode the config file's 4


def test_train_eval_transfer_round_trip(tmp_path):
    metrics = tmp_path / "metrics.csv"
    ckpt = tmp_path / "model.strn"
    common = ["--task", "majority", "--length", "8", "--task-vocab", "4",
              "--task-classes", "2", "--d-embed", "16", "--d-mlp", "16",
              "--heads", "2", "--blocks", "1", "--train-n", "8", "--test-n", "4"]
    code = run_cli(["train", *common, "--steps", "2", "--batch-size", "2",
                    "--warmup", "1", "--eval-every", "2", "--seed", "11",
                    "--out", str(metrics), "--save", str(ckpt), "--no-timing"])
    assert code == 0
    assert os.path.exists(metrics)
    assert os.path.exists(tmp_path / "metrics.png")  # figure alongside the CSV
    assert os.path.exists(ckpt)

    assert run_cli(["eval", *common, "--checkpoint", str(ckpt)]) == 0

    model_cfg = tmp_path / "model.cfg"
    model_cfg.write_text("task = majority\nlength = 8\ntask_vocab = 4\n"
                         "task_classes = 2\nd_embed = 16\nd_mlp = 16\n"
                         "heads = 2\nblocks = 1\n")
    converted = tmp_path / "converted.strn"
    code = run_cli(["transfer", "--in", str(ckpt), "--model-config", str(model_cfg),
                    "--to-kind", "softmax", "--freeze", "qkv", "--out", str(converted)])
    assert code == 0
    # converted checkpoint carries identical parameter bytes
    assert parse_checkpoint(ckpt.read_bytes()).keys() == \
           parse_checkpoint(converted.read_bytes()).keys()
    assert ckpt.read_bytes() == converted.read_bytes()


def test_train_no_timing_csv_is_byte_identical(tmp_path):
    args = ["train", "--task", "majority", "--length", "8", "--task-vocab", "4",
            "--task-classes", "2", "--d-embed", "16", "--d-mlp", "16",
            "--heads", "2", "--blocks", "1", "--train-n", "8", "--test-n", "4",
            "--steps", "3", "--batch-size", "2", "--warmup", "1",
            "--seed", "21", "--no-plots", "--no-timing"]
    out1, out2 = tmp_path / "m1.csv", tmp_path / "m2.csv"
    assert run_cli(args + ["--out", str(out1)]) == 0
    assert run_cli(args + ["--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_train_std_diagnostic_artifact(tmp_path):
    out = tmp_path / "metrics.csv"
    std_out = tmp_path / "std.csv"
    code = run_cli(["train", "--task", "majority", "--length", "8",
                    "--task-vocab", "4", "--task-classes", "2", "--d-embed", "16",
                    "--d-mlp", "16", "--heads", "2", "--blocks", "2",
                    "--train-n", "8", "--test-n", "4", "--steps", "1",
                    "--batch-size", "2", "--warmup", "1", "--seed", "13",
                    "--out", str(out), "--std-out", str(std_out), "--no-plots"])
    assert code == 0
    rows = read_rows(std_out)
    assert [r["block"] for r in rows] == ["1", "2"]
    assert all(float(r["std"]) >= 0 for r in rows)


def test_eval_requires_checkpoint(capsys):
    assert run_cli(["eval"]) == 1
    assert "--checkpoint" in capsys.readouterr().err


def test_runtime_failure_exit_code(tmp_path, capsys):
    # checkpoint path that does not exist -> runtime failure, not usage
    assert run_cli(["eval", "--checkpoint", str(tmp_path / "missing.strn")]) == 2
