import json

import pytest

from maskdiffrec.cli import main
from maskdiffrec.config import DATA_ROOT_ENV, RunConfig
from maskdiffrec.corpus import load_interactions, write_interactions
from maskdiffrec.synthetic import two_block_corpus


class TestRunConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown configuration keys: bogus"):
            RunConfig.from_dict({"bogus": 1})

    def test_updated_rejects_unknown_keys(self):
        with pytest.raises(ValueError, match="wat"):
            RunConfig().updated(wat=3)

    def test_file_round_trip(self, tmp_path):
        cfg = RunConfig(horizon=30.0, eval_ks=(5,), lambda1=0.7)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg.to_dict()))
        again = RunConfig.from_file(path)
        assert again == cfg

    def test_subsystem_views_read_their_namespace(self):
        cfg = RunConfig(horizon=30.0, omega=0.25, dt=5.0, lambda1=0.6, sample_steps=4)
        sched = cfg.schedule()
        assert sched.horizon == 30.0 and sched.omega == 0.25
        assert sched.sigma == 3.0  # defaulted to a tenth of the horizon
        tc = cfg.train_config()
        assert tc.dt == 5.0 and tc.lambda1 == 0.6
        plan = cfg.plan()
        assert plan.n_steps == 4 and plan.grid[0] == 30.0

    def test_data_root_env_resolves_relative_paths(self, tmp_path, monkeypatch):
        monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path))
        (tmp_path / "ratings.txt").write_text("1\t2\t5\t0\n")
        cfg = RunConfig(data_path="ratings.txt")
        assert cfg.resolve_data_path() == tmp_path / "ratings.txt"

    def test_absolute_path_ignores_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(DATA_ROOT_ENV, "/nonexistent")
        cfg = RunConfig(data_path=str(tmp_path / "x.txt"))
        assert cfg.resolve_data_path() == tmp_path / "x.txt"

    def test_missing_data_path_raises(self):
        with pytest.raises(ValueError):
            RunConfig().resolve_data_path()


@pytest.fixture(scope="module")
def events_file(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    path = root / "events.txt"
    write_interactions(two_block_corpus(seed=0), path)
    return path


def _fast_flags(events_file, out_dir):
    return [
        "--data-path", str(events_file),
        "--out-dir", str(out_dir),
        "--dim", "16",
        "--n-layers", "1",
        "--epochs", "3",
        "--batch-size", "64",
        "--mf-epochs", "3",
        "--sample-steps", "1",
        "--eval-ks", "5,10",
    ]


class TestCli:
    def test_prepare_writes_manifests_and_stats(self, events_file, tmp_path, capsys):
        assert main(["prepare", "--data-path", str(events_file),
                     "--out-dir", str(tmp_path)]) == 0
        for name in ("train.txt", "validation.txt", "test.txt", "stats.json"):
            assert (tmp_path / name).exists()
        stats = json.loads((tmp_path / "stats.json").read_text())
        assert stats == {"n_users": 50, "n_items": 30, "n_train": 800,
                         "n_val": 100, "n_test": 100}
        train = load_interactions(tmp_path / "train.txt", threshold=0.0)
        assert len(train) == 800

    def test_embed_writes_loadable_file(self, events_file, tmp_path):
        out = tmp_path / "emb.txt"
        assert main(["embed", "--data-path", str(events_file), "--dim", "8",
                     "--mf-epochs", "2", "--out", str(out)]) == 0
        header = out.read_text().splitlines()[0].split()
        assert header == ["50", "30", "8"]

    def test_train_recommend_eval_cycle(self, events_file, tmp_path, capsys):
        run_dir = tmp_path / "run"
        assert main(["train", *_fast_flags(events_file, run_dir)]) == 0
        assert (run_dir / "model.pt").exists()
        assert (run_dir / "metrics.json").exists()
        assert (run_dir / "train_log.jsonl").exists()
        summary = json.loads((run_dir / "summary.json").read_text())
        assert "recall" in summary["metrics"]
        capsys.readouterr()

        rec_out = tmp_path / "recs.jsonl"
        assert main([
            "recommend", *_fast_flags(events_file, run_dir),
            "--checkpoint", str(run_dir / "model.pt"),
            "--users", "0", "3", "--k", "5", "--out", str(rec_out),
        ]) == 0
        lines = [json.loads(line) for line in rec_out.read_text().splitlines()]
        assert [r["user"] for r in lines] == [0, 3]
        assert all(len(r["items"]) == 5 for r in lines)
        assert all(len(r["scores"]) == 5 for r in lines)

        eval_out = tmp_path / "metrics.json"
        assert main([
            "eval", *_fast_flags(events_file, run_dir),
            "--checkpoint", str(run_dir / "model.pt"), "--out", str(eval_out),
        ]) == 0
        metrics = json.loads(eval_out.read_text())
        assert set(metrics["recall"]) == {"5", "10"}
        capsys.readouterr()

    def test_recommendations_exclude_training_items(self, events_file, tmp_path, capsys):
        run_dir = tmp_path / "run"
        main(["train", *_fast_flags(events_file, run_dir)])
        rec_out = tmp_path / "recs.jsonl"
        main([
            "recommend", *_fast_flags(events_file, run_dir),
            "--checkpoint", str(run_dir / "model.pt"),
            "--users", "0", "--k", "10", "--out", str(rec_out),
        ])
        capsys.readouterr()
        from maskdiffrec.corpus import split_chronological

        split = split_chronological(load_interactions(events_file, threshold=3.0))
        train_items = set(split.train.items[split.train.users == 0].tolist())
        (rec,) = [json.loads(line) for line in rec_out.read_text().splitlines()]
        assert not (set(rec["items"]) & train_items)

    def test_trace_writes_csv(self, events_file, tmp_path, capsys):
        out = tmp_path / "trace.csv"
        assert main(["trace", "--data-path", str(events_file), "--user", "2",
                     "--steps", "8", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "t,position,item_id,deviation,cumulative_beta,masked"
        assert len(lines) > 8
        capsys.readouterr()

    def test_trace_unknown_user_fails(self, events_file, tmp_path):
        with pytest.raises(SystemExit):
            main(["trace", "--data-path", str(events_file), "--user", "999",
                  "--steps", "4", "--out", str(tmp_path / "x.csv")])

    def test_sweep_writes_table_and_survives_failures(self, events_file, tmp_path, capsys):
        out = tmp_path / "sweep.csv"
        assert main([
            "sweep", *_fast_flags(events_file, tmp_path / "sweepruns"),
            "--epochs", "1",
            "--grid", "sample_steps=1,2", "lambda1=0.4",
            "--out", str(out),
        ]) == 0
        rows = out.read_text().splitlines()
        assert len(rows) == 3  # header + 2 grid points
        assert "recall@10" in rows[0]
        capsys.readouterr()

    def test_sweep_records_per_point_errors(self, events_file, tmp_path, capsys):
        out = tmp_path / "sweep.csv"
        main([
            "sweep", *_fast_flags(events_file, tmp_path / "sweepruns"),
            "--epochs", "1",
            "--grid", "lambda1=0.4,7.0",  # second point is out of range
            "--out", str(out),
        ])
        capsys.readouterr()
        import csv as _csv

        with out.open() as handle:
            rows = list(_csv.DictReader(handle))
        errors = [row["error"] for row in rows]
        assert sum(1 for e in errors if e) == 1
        assert sum(1 for e in errors if not e) == 1

    def test_config_file_with_flag_overrides(self, events_file, tmp_path, capsys):
        config_path = tmp_path / "cfg.json"
        config_path.write_text(json.dumps(
            RunConfig(dim=16, n_layers=1, epochs=1, batch_size=64, mf_epochs=2,
                      sample_steps=1, data_path=str(events_file),
                      out_dir=str(tmp_path / "run")).to_dict()
        ))
        assert main(["prepare", "--config", str(config_path)]) == 0
        out = capsys.readouterr().out
        assert json.loads(out.strip())["n_users"] == 50
