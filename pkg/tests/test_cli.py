import csv
import io

import numpy as np
import pytest

from etherkit import cli
from etherkit.checkpoint import load_checkpoint
from etherkit.config import ExperimentConfig, load_config, parse_config_text
from etherkit.errors import ConfigurationError

FAST = ["--epochs", "2"]


def read_csv(path):
    lines = path.read_text().splitlines()
    comments = [l for l in lines if l.startswith("#")]
    body = [l for l in lines if not l.startswith("#")]
    return comments, list(csv.reader(io.StringIO("\n".join(body))))


# -- config ------------------------------------------------------------------
def test_parse_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# a comment\nmethod = oft   # trailing\n\nn=4\nlr_grid = 1e-3, 1e-2,1e-1,1,10\n"
                    "two_sided = no\nunit_lr_oft = 0.5\nshift_magnitude=0.2\n")
    cfg = load_config(str(path))
    assert (cfg.method, cfg.n, cfg.two_sided) == ("oft", 4, False)
    assert cfg.lr_grid == (1e-3, 1e-2, 1e-1, 1.0, 10.0)
    assert cfg.unit_lr["oft"] == 0.5
    assert cfg.task().shift_magnitude == 0.2


def test_unknown_key_reports_line_number():
    with pytest.raises(ConfigurationError, match=r"cfg:3: unknown key 'colour'"):
        parse_config_text("n = 1\n# ok\ncolour = red\n", "cfg")


@pytest.mark.parametrize("text", ["n = two", "two_sided = maybe", "just words", "lr_grid = ,"])
def test_bad_values(text):
    with pytest.raises(ConfigurationError, match="cfg:1"):
        parse_config_text(text, "cfg")


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs = 7\nseed = 3\n")
    cfg = load_config(str(path), {"epochs": "2"})
    assert cfg.epochs == 2 and cfg.seed == 3


@pytest.mark.parametrize("override", [{"method": "dora"}, {"n": "0"}, {"optimizer": "rmsprop"},
                                      {"seed": "-1"}, {"kind": "ranking"}])
def test_validation(override):
    with pytest.raises(ConfigurationError):
        load_config(None, override)


def test_echo_round_trips_through_the_parser():
    cfg = load_config(None, {"method": "oft", "lr": "0.003", "two_sided": "false", "unit_lr_naive": "0.25"})
    text = "\n".join(line[2:] for line in cfg.echo("sweep")[1:])
    again = parse_config_text(text, "echo")
    assert again == cfg


# -- commands ----------------------------------------------------------------
def test_verify_passes(capsys):
    assert cli.main(["verify"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    for suite in ("tensor-core", "adapters", "metrics", "harness"):
        assert f"suite {suite}:" in out


def test_verify_fault_injection_names_distance_check(capsys):
    assert cli.main(["verify", "--inject-fault", "skip-normalization"]) == cli.EXIT_VERIFY
    out = capsys.readouterr().out
    assert "verification failed" in out and "householder_identity_distance" in out


def test_sweep_csv(tmp_path):
    out = tmp_path / "s.csv"
    assert cli.main(["sweep", "--out", str(out), *FAST]) == cli.EXIT_OK
    comments, rows = read_csv(out)
    cfg = load_config(None, {"out": str(out), "epochs": "2"})
    assert comments[:len(cfg.echo("sweep"))] == cfg.echo("sweep")
    assert any("lora" in c and "not comparable" in c for c in comments)
    assert rows[0] == cli.SWEEP_HEADER
    assert len(rows) - 1 == len(cfg.methods) * len(cfg.lr_grid) * cfg.epochs
    assert not any(r[-1] == "true" for r in rows[1:] if r[0] == "ether_plus")


def test_sweep_single_method_flag(tmp_path):
    out = tmp_path / "s.csv"
    assert cli.main(["sweep", "--out", str(out), "--method", "oft", "--epochs", "1"]) == cli.EXIT_OK
    _, rows = read_csv(out)
    assert {r[0] for r in rows[1:]} == {"oft"} and len(rows) == 8


def test_perturb_csv(tmp_path):
    out = tmp_path / "p.csv"
    assert cli.main(["perturb", "--out", str(out)]) == cli.EXIT_OK
    comments, rows = read_csv(out)
    assert rows[0] == cli.PERTURB_HEADER
    assert any("lora" in c and "skipped" in c for c in comments)
    for method, strength, dev in rows[1:]:
        if float(strength) == 0.0:
            assert float(dev) == 0.0
    ether = [r for r in rows[1:] if r[0] == "ether"]
    assert len(ether) == 1 and float(ether[0][1]) == 2.0


def test_ablate_csv(tmp_path):
    out = tmp_path / "a.csv"
    assert cli.main(["ablate", "--out", str(out), "--method", "ether", "--epochs", "1"]) == cli.EXIT_OK
    _, rows = read_csv(out)
    assert rows[0] == cli.ABLATE_HEADER
    ether = [r for r in rows[1:] if r[0] == "ether"]
    assert len({r[3] for r in ether}) == 1
    base = int(ether[0][4])
    for r in ether:
        assert int(r[4]) * int(r[1]) == base
    sided = [r for r in rows[1:] if r[0] == "ether_plus"]
    assert [r[2] for r in sided] == ["true", "false"]


def test_train_writes_checkpoint(tmp_path):
    out, ckpt = tmp_path / "t.csv", tmp_path / "t.etck"
    code = cli.main(["train", "--method", "ether_plus", "--blocks", "4", "--two-sided", "false", "--lr", "0.01",
                     "--out", str(out), "--checkpoint", str(ckpt), *FAST])
    assert code == cli.EXIT_OK
    tensors = load_checkpoint(ckpt)
    assert "layer0.W" in tensors and "layer1.adapter.left.v.3" in tensors
    assert not any(".right." in k for k in tensors)
    comments, rows = read_csv(out)
    assert "# two_sided=false" in comments and len(rows) == 3


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("n = 1\nbogus = 2\n")
    assert cli.main(["sweep", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert "bad.cfg:2" in capsys.readouterr().err
    assert cli.main(["sweep", "--blocks", "5", "--out", str(tmp_path / "x.csv")]) == cli.EXIT_CONFIG
    assert cli.main(["frobnicate"]) == cli.EXIT_CONFIG
    assert cli.main(["sweep", "--two-sided", "perhaps"]) == cli.EXIT_CONFIG


def test_io_error_exit_code(tmp_path):
    assert cli.main(["sweep", "--config", str(tmp_path / "missing.cfg")]) == cli.EXIT_IO
    assert cli.main(["train", "--epochs", "1", "--out", str(tmp_path / "no" / "x.csv")]) == cli.EXIT_IO


def test_render_csv_quoting_and_special_values():
    text = cli.render_csv(["# k=v"], ["a", "b"], [("x,y", float("inf")), (True, None), ("q", 0.1)])
    assert text == '# k=v\na,b\n"x,y",inf\ntrue,NA\nq,0.1\n'


def test_default_config_is_the_reference_setting():
    cfg = ExperimentConfig().validate()
    assert cfg.optimizer == "adam" and cfg.epochs == 20 and len(cfg.lr_grid) == 7
    assert np.log10(cfg.lr_grid[-1] / cfg.lr_grid[0]) == pytest.approx(6.0)
