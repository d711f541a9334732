"""End-to-end tests for the command line workflow.

Every invocation goes through ``scoopgp.cli.main(argv)`` in process, so
exit codes, stdout/stderr and file outputs are all observable without
spawning an interpreter. Scales are kept tiny; the module-scoped family
and checkpoints are shared across tests.
"""

import os

import numpy as np
import pytest

from scoopgp.bench import read_deploy_report, read_mae_report
from scoopgp.cli import main
from scoopgp.gp import load_model, mean_eval_batch
from scoopgp.tasks import read_database

FAST_TRAIN = (
    "--set", "train.max_epochs_mean=40",
    "--set", "train.max_epochs_kernel=25",
    "--set", "train.patience=3",
)

SMALL_GEN = (
    "--set", "gen.n_train_materials=6",
    "--set", "gen.n_ood_materials=4",
    "--set", "gen.n_train_tasks=6",
    "--set", "gen.train_records=12",
    "--set", "gen.n_test_tasks=2",
    "--set", "gen.test_records=12",
)

SMALL_EVAL = ("--set", "bench.shots=0,2", "--set", "bench.mae_trials=3")

SMALL_DEPLOY = (
    "--set", "bench.budget=5",
    "--set", "bench.deploy_trials=2",
    "--set", "bench.exclude_below=0.0",
)


@pytest.fixture(scope="module")
def cli_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rc = main(["gen", "--seed", "5", "--prefix", str(root / "fam"), *SMALL_GEN])
    assert rc == 0
    return root


@pytest.fixture(scope="module")
def codega_ckpt(cli_dir):
    out = cli_dir / "codega.model.bin"
    rc = main([
        "train", "--seed", "3", "--data", str(cli_dir / "fam.train.records.txt"),
        "--method", "codega", "--folds", "2", "--out", str(out), *FAST_TRAIN,
    ])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def mae_report_path(cli_dir, codega_ckpt):
    out = cli_dir / "kshot.mae.txt"
    rc = main([
        "eval-mae", "--data", str(cli_dir / "fam.test.records.txt"),
        "--model", str(codega_ckpt), "--out", str(out), *SMALL_EVAL,
    ])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def deploy_report_path(cli_dir, codega_ckpt):
    out = cli_dir / "ucb.deploy.txt"
    rc = main([
        "deploy", "--data", str(cli_dir / "fam.test.records.txt"),
        "--model", str(codega_ckpt), "--scorer", "ucb", "--out", str(out),
        *SMALL_DEPLOY,
    ])
    assert rc == 0
    return out


# ---------------------------------------------------------------------------
# gen

def test_gen_writes_database_and_terrains(cli_dir):
    for name in ("fam.train.records.txt", "fam.train.manifest.txt",
                 "fam.test.records.txt", "fam.test.manifest.txt",
                 "fam.terrains.bin"):
        assert (cli_dir / name).exists(), name
    train = read_database(str(cli_dir / "fam.train.records.txt"))
    test = read_database(str(cli_dir / "fam.test.records.txt"))
    assert len(train) == 6 and all(len(ds) == 12 for ds in train)
    assert len(test) == 2 and all(len(ds) == 12 for ds in test)


def test_gen_prints_summary_and_is_deterministic(tmp_path, capsys):
    args = ["gen", "--seed", "9",
            "--set", "gen.n_train_materials=4", "--set", "gen.n_ood_materials=2",
            "--set", "gen.n_train_tasks=2", "--set", "gen.train_records=8",
            "--set", "gen.n_test_tasks=2", "--set", "gen.test_records=8"]
    assert main(args + ["--prefix", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert "a.train.records.txt (16 records, 2 tasks)" in out
    assert "a.test.records.txt (16 records, 2 tasks)" in out
    assert "a.terrains.bin" in out

    assert main(args + ["--prefix", str(tmp_path / "b")]) == 0
    for suffix in ("train.records.txt", "train.manifest.txt",
                   "test.records.txt", "test.manifest.txt", "terrains.bin"):
        a = (tmp_path / f"a.{suffix}").read_bytes()
        b = (tmp_path / f"b.{suffix}").read_bytes()
        assert a == b, suffix


# ---------------------------------------------------------------------------
# train

def test_train_codega_checkpoint_loads(cli_dir, codega_ckpt):
    model = load_model(str(codega_ckpt))
    test = read_database(str(cli_dir / "fam.test.records.txt"))
    preds = mean_eval_batch(model, test[0].gp_inputs())
    assert np.all(np.isfinite(preds))


def test_train_mean_only_prints_checkpoint_and_repeats(cli_dir, tmp_path, capsys):
    data = str(cli_dir / "fam.train.records.txt")
    out1 = tmp_path / "m1.bin"
    rc = main(["train", "--seed", "4", "--data", data, "--method", "mean-only",
               "--out", str(out1), *FAST_TRAIN])
    assert rc == 0
    text = capsys.readouterr().out
    assert f"wrote {out1}" in text and "checkpoint" in text

    out2 = tmp_path / "m2.bin"
    rc = main(["train", "--seed", "4", "--data", data, "--method", "mean-only",
               "--out", str(out2), *FAST_TRAIN])
    assert rc == 0
    assert out1.read_bytes() == out2.read_bytes()
    model = load_model(str(out1))
    assert np.isfinite(model.log_lengthscale)


def test_train_dkmt_checkpoint_loads(cli_dir, tmp_path):
    out = tmp_path / "dkmt.bin"
    rc = main(["train", "--seed", "2", "--data", str(cli_dir / "fam.train.records.txt"),
               "--method", "dkmt", "--out", str(out),
               "--set", "train.max_epochs_kernel=10", "--set", "train.patience=3"])
    assert rc == 0
    assert load_model(str(out)).kernel_params is not None


def test_train_too_many_folds_fails(cli_dir, tmp_path, capsys):
    rc = main(["train", "--data", str(cli_dir / "fam.train.records.txt"),
               "--folds", "7", "--out", str(tmp_path / "x.bin"), *FAST_TRAIN])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "folds" in err


# ---------------------------------------------------------------------------
# eval-mae

def test_eval_mae_report_and_determinism(cli_dir, codega_ckpt, mae_report_path,
                                         tmp_path, capsys):
    out2 = tmp_path / "again.mae.txt"
    rc = main([
        "eval-mae", "--data", str(cli_dir / "fam.test.records.txt"),
        "--model", str(codega_ckpt), "--out", str(out2), *SMALL_EVAL,
    ])
    assert rc == 0
    text = capsys.readouterr().out
    assert "0-shot: mae" in text and "2-shot: mae" in text
    assert out2.read_bytes() == mae_report_path.read_bytes()

    rep = read_mae_report(str(mae_report_path))
    assert rep.label == "kshot-mae"
    assert rep.shots == (0, 2)
    assert rep.trials == 3
    assert len(rep.rows) == 2 * 2  # tasks x shots, trials averaged in


def test_eval_mae_mean_only_matches_zero_shot(cli_dir, codega_ckpt, mae_report_path,
                                              tmp_path):
    out = tmp_path / "mean.mae.txt"
    rc = main([
        "eval-mae", "--data", str(cli_dir / "fam.test.records.txt"),
        "--model", str(codega_ckpt), "--out", str(out), "--mean-only", *SMALL_EVAL,
    ])
    assert rc == 0
    mean_rep = read_mae_report(str(out))
    kshot_rep = read_mae_report(str(mae_report_path))
    assert mean_rep.label == "mean-only-mae"
    assert mean_rep.shots == (0,)
    # the prior mean and the 0-shot posterior are the same protocol
    zero = [(r.task_id, r.mae, r.top_mae) for r in kshot_rep.rows if r.shot == 0]
    got = [(r.task_id, r.mae, r.top_mae) for r in mean_rep.rows]
    assert got == zero
    assert mean_rep.aggregate(0) == kshot_rep.aggregate(0)


# ---------------------------------------------------------------------------
# deploy

def test_deploy_dataset_report_and_determinism(cli_dir, codega_ckpt,
                                               deploy_report_path, tmp_path, capsys):
    out2 = tmp_path / "again.deploy.txt"
    rc = main([
        "deploy", "--data", str(cli_dir / "fam.test.records.txt"),
        "--model", str(codega_ckpt), "--scorer", "ucb", "--out", str(out2),
        *SMALL_DEPLOY,
    ])
    assert rc == 0
    text = capsys.readouterr().out
    assert "ucb: avg attempts" in text and "success rate" in text
    assert out2.read_bytes() == deploy_report_path.read_bytes()

    rep = read_deploy_report(str(deploy_report_path))
    assert rep.method == "ucb"
    assert rep.budget == 5
    assert len(rep.rows) == 2 * 2  # tasks x trials
    assert all(1 <= row.attempts <= 5 for row in rep.rows)


def test_deploy_random_scorer_needs_no_model(cli_dir, tmp_path):
    out = tmp_path / "rand.deploy.txt"
    rc = main([
        "deploy", "--data", str(cli_dir / "fam.test.records.txt"),
        "--scorer", "random", "--out", str(out), *SMALL_DEPLOY,
    ])
    assert rc == 0
    rep = read_deploy_report(str(out))
    assert rep.method == "random"
    assert rep.checkpoint == "none"


def test_deploy_live_mode_runs_episodes(cli_dir, tmp_path):
    out = tmp_path / "live.txt"
    rc = main([
        "deploy", "--data", str(cli_dir / "fam.test.records.txt"),
        "--scorer", "random", "--mode", "live",
        "--terrains", str(cli_dir / "fam.terrains.bin"),
        "--threshold", "0.0", "--out", str(out),
        "--set", "bench.budget=2",
    ])
    assert rc == 0
    text = out.read_text()
    # reward is non-negative, so a zero threshold succeeds on the first scoop
    assert text.count("attempts=1 success=1") == 2
    for ds in read_database(str(cli_dir / "fam.test.records.txt")):
        assert ds.task_id in text


# ---------------------------------------------------------------------------
# ingest and report

def test_ingest_prints_statistics(cli_dir, capsys):
    rc = main(["ingest", "--data", str(cli_dir / "fam.train.records.txt")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "tasks=6" in out and "records=72" in out
    assert "mean_reward=" in out and "max_reward=" in out


def test_report_renders_tables(mae_report_path, deploy_report_path, capsys):
    rc = main(["report", str(mae_report_path), str(deploy_report_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "0-shot MAE" in out and "2-shot top MAE" in out
    assert "kshot-mae" in out
    assert "avg attempts" in out and "ucb" in out


def test_report_rejects_unknown_file(tmp_path, capsys):
    bogus = tmp_path / "notes.txt"
    bogus.write_text("hello\n")
    rc = main(["report", str(bogus)])
    assert rc == 1
    assert "not a recognized report file" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# config handling

def test_config_file_with_override(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# tiny family\n"
        "gen.n_train_materials = 4\n"
        "gen.n_ood_materials = 2\n"
        "gen.n_train_tasks = 3\n"
        "gen.train_records = 6\n"
        "gen.n_test_tasks = 2\n"
        "gen.test_records = 6\n"
    )
    rc = main(["gen", "--prefix", str(tmp_path / "fam"), "--config", str(cfg),
               "--set", "gen.train_records=8"])
    assert rc == 0
    capsys.readouterr()
    train = read_database(str(tmp_path / "fam.train.records.txt"))
    assert len(train) == 3
    assert all(len(ds) == 8 for ds in train)  # --set beats the file


def test_missing_config_file(tmp_path, capsys):
    rc = main(["gen", "--prefix", str(tmp_path / "x"), "--config",
               str(tmp_path / "nope.cfg")])
    assert rc == 1
    assert "config file not found" in capsys.readouterr().err


def test_bad_overrides_exit_1(tmp_path, capsys):
    prefix = str(tmp_path / "x")
    rc = main(["gen", "--prefix", prefix, "--set", "gen.n_train_tasks"])
    assert rc == 1
    assert "--set expects KEY=VALUE" in capsys.readouterr().err

    rc = main(["gen", "--prefix", prefix, "--set", "gen.bogus=3"])
    assert rc == 1
    assert "unknown config key" in capsys.readouterr().err

    rc = main(["gen", "--prefix", prefix, "--set", "rho=0.5"])
    assert rc == 1
    assert "section.field" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# exit codes and env

def test_missing_data_file_exits_1(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "missing.records.txt"),
               "--out", str(tmp_path / "x.bin")])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "records file not found" in err


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["train"])  # missing required --data/--out
    assert ei.value.code == 2
    capsys.readouterr()

    with pytest.raises(SystemExit) as ei:
        main([])
    assert ei.value.code == 2
    capsys.readouterr()


def test_deploy_live_requires_terrains(cli_dir, tmp_path, capsys):
    with pytest.raises(SystemExit) as ei:
        main(["deploy", "--data", str(cli_dir / "fam.test.records.txt"),
              "--scorer", "random", "--mode", "live",
              "--out", str(tmp_path / "x.txt")])
    assert ei.value.code == 2
    assert "--mode live requires --terrains" in capsys.readouterr().err


def test_deploy_adaptive_scorer_requires_model(cli_dir, tmp_path, capsys):
    with pytest.raises(SystemExit) as ei:
        main(["deploy", "--data", str(cli_dir / "fam.test.records.txt"),
              "--scorer", "ucb", "--out", str(tmp_path / "x.txt")])
    assert ei.value.code == 2
    assert "--scorer ucb requires --model" in capsys.readouterr().err


def test_out_dir_env_routes_relative_paths(cli_dir, codega_ckpt, tmp_path,
                                           monkeypatch, capsys):
    routed = tmp_path / "routed"
    monkeypatch.setenv("SCOOPGP_OUT_DIR", str(routed))
    rc = main([
        "eval-mae", "--data", str(cli_dir / "fam.test.records.txt"),
        "--model", str(codega_ckpt), "--out", "rel.mae.txt", *SMALL_EVAL,
    ])
    assert rc == 0
    capsys.readouterr()
    assert (routed / "rel.mae.txt").exists()

    # absolute outputs are left alone
    absolute = tmp_path / "abs.mae.txt"
    rc = main([
        "eval-mae", "--data", str(cli_dir / "fam.test.records.txt"),
        "--model", str(codega_ckpt), "--out", str(absolute), *SMALL_EVAL,
    ])
    assert rc == 0
    capsys.readouterr()
    assert absolute.exists()
    assert not (routed / "abs.mae.txt").exists()


def test_threads_env_sets_blas_defaults(cli_dir, monkeypatch, capsys):
    data = str(cli_dir / "fam.train.records.txt")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("SCOOPGP_THREADS", "7")
    assert main(["ingest", "--data", data]) == 0
    capsys.readouterr()
    assert os.environ["OMP_NUM_THREADS"] == "7"
    assert os.environ["OPENBLAS_NUM_THREADS"] == "7"

    # an explicit setting wins over the cap
    monkeypatch.setenv("OMP_NUM_THREADS", "3")
    assert main(["ingest", "--data", data]) == 0
    capsys.readouterr()
    assert os.environ["OMP_NUM_THREADS"] == "3"
