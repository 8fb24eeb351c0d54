"""Config parsing/validation and the command-line surface."""
from splitprompt.cli import main
from splitprompt.config import (ExperimentConfig, load_config, preset,
                                validate_config, validate_experiment)
from splitprompt.experiments import read_csv

MINIMAL_E6 = """\
[experiment]
id = E6
seeds = 1
"""


def write(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadConfig:
    def test_minimal_config_is_valid(self, tmp_path):
        cfg, diags = load_config(write(tmp_path, MINIMAL_E6))
        assert diags == []
        assert cfg.experiment_id == "E6"
        assert cfg.seeds == (1,)

    def test_preset_defaults_apply_per_experiment(self, tmp_path):
        cfg, diags = load_config(write(tmp_path, "[experiment]\nid = E5\n"))
        assert diags == []
        assert cfg.n_classes == 6
        assert cfg.classes_per_client == 1

    def test_file_overrides_preset(self, tmp_path):
        text = "[experiment]\nid = E5\n\n[data]\nclasses_per_client = 2\n"
        cfg, diags = load_config(write(tmp_path, text))
        assert diags == []
        assert cfg.classes_per_client == 2

    def test_unknown_experiment_id(self, tmp_path):
        _, diags = load_config(write(tmp_path, "[experiment]\nid = E9\n"))
        assert any("unknown experiment" in d for d in diags)

    def test_negative_bandwidth_named_violation(self, tmp_path):
        text = MINIMAL_E6 + "\n[topology]\ncs_bandwidth = -5\n"
        diags = validate_config(write(tmp_path, text))
        assert any(d.startswith("topology.cs_bandwidth") for d in diags)

    def test_classes_per_client_bound(self, tmp_path):
        text = MINIMAL_E6 + "\n[data]\nclasses_per_client = 9\n"
        diags = validate_config(write(tmp_path, text))
        assert any("classes_per_client" in d for d in diags)

    def test_unknown_key_reported_with_path(self, tmp_path):
        text = MINIMAL_E6 + "\n[model]\nwidth = 4\n"
        diags = validate_config(write(tmp_path, text))
        assert "model.width: unknown key" in diags

    def test_malformed_file_never_raises(self, tmp_path):
        cfg, diags = load_config(write(tmp_path, "= broken ["))
        assert cfg is None
        assert diags and "parse error" in diags[0]

    def test_unparseable_value_reported(self, tmp_path):
        text = MINIMAL_E6 + "\n[train]\nlr = fast\n"
        diags = validate_config(write(tmp_path, text))
        assert any("train.lr" in d and "cannot parse" in d for d in diags)

    def test_missing_file(self, tmp_path):
        cfg, diags = load_config(tmp_path / "absent.ini")
        assert cfg is None and diags

    def test_config_hash_stable_and_sensitive(self):
        a, b = ExperimentConfig(), ExperimentConfig()
        assert a.config_hash() == b.config_hash()
        b.lr = 0.123
        assert a.config_hash() != b.config_hash()

    def test_all_presets_validate(self):
        for eid in ("E1", "E2", "E3", "E4", "E5", "E6"):
            assert validate_experiment(preset(eid)) == []


class TestCli:
    def test_validate_ok(self, tmp_path, capsys):
        path = write(tmp_path, MINIMAL_E6)
        assert main(["validate", "--config", str(path)]) == 0
        assert "ok" in capsys.readouterr().out

    def test_validate_bad_config_exit_1(self, tmp_path, capsys):
        path = write(tmp_path, MINIMAL_E6 + "\n[clusters]\nk = 0\n")
        assert main(["validate", "--config", str(path)]) == 1
        assert "clusters.k" in capsys.readouterr().err

    def test_run_unknown_experiment_exit_1(self, tmp_path, capsys):
        path = write(tmp_path, "[experiment]\nid = EX\n")
        assert main(["run", "--config", str(path)]) == 1

    def test_run_e6_writes_reports(self, tmp_path, capsys):
        path = write(tmp_path, MINIMAL_E6)
        out = tmp_path / "out"
        assert main(["run", "--config", str(path), "--out", str(out)]) == 0
        header, rows = read_csv(out / "rows.csv")
        assert header[:3] == ["experiment", "seed", "config"]
        assert all(r[0] == "E6" for r in rows)
        sheader, srows = read_csv(out / "summary.csv")
        totals = {r[0]: float(r[1]) for r in srows}
        assert totals["MLCP"] == 650.0
        assert totals["MSIP"] == 500.0

    def test_infeasible_topology_exit_2(self, tmp_path, capsys):
        # chains of 3 need D2D links; an edgeless D2D graph cannot host them
        text = ("[experiment]\nid = E2\nseeds = 1\nrounds = 1\n\n"
                "[topology]\nn_clients = 3\nd2d = pairs\n")
        path = write(tmp_path, text)
        rc = main(["run", "--config", str(path), "--out",
                   str(tmp_path / "o")])
        assert rc == 2
        err = capsys.readouterr().err
        assert "chain" in err or "cluster" in err or "client" in err

    def test_seed_override(self, tmp_path):
        path = write(tmp_path, MINIMAL_E6)
        out = tmp_path / "seeded"
        assert main(["run", "--config", str(path), "--out", str(out),
                     "--seed", "42"]) == 0
        _, rows = read_csv(out / "rows.csv")
        assert {r[1] for r in rows} == {"42"}

    def test_report_regenerates_summary(self, tmp_path):
        path = write(tmp_path, MINIMAL_E6)
        out = tmp_path / "rep"
        assert main(["run", "--config", str(path), "--out", str(out)]) == 0
        summary = (out / "summary.csv").read_bytes()
        (out / "summary.csv").unlink()
        assert main(["report", "--out", str(out)]) == 0
        assert (out / "summary.csv").read_bytes() == summary

    def test_report_missing_rows_exit_1(self, tmp_path, capsys):
        assert main(["report", "--out", str(tmp_path)]) == 1

    def test_env_var_default_out_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SPLITPROMPT_OUT", str(tmp_path / "envout"))
        monkeypatch.chdir(tmp_path)
        path = write(tmp_path, MINIMAL_E6)
        assert main(["run", "--config", str(path)]) == 0
        assert (tmp_path / "envout" / "e6" / "rows.csv").exists()
