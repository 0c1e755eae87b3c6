import csv
import subprocess
import sys

import pytest

from netfence.cli import CSV_HEADER, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_OK, main
from netfence.params import Parameters
from netfence.scenario import ConfigError, describe_defaults, list_presets, load_scenario, parse_scenario
from netfence.sim.network import build

BASE = """[scenario]
name = "tiny"
duration = 6.0
warmup = 2.0
bucket = 1.0

[topology]
kind = "dumbbell"
bottleneck_bps = 2e6
source_ases = 2

[[groups]]
name = "users"
role = "legit"
traffic = "tcp"
per_as = 2

[[groups]]
name = "flood"
role = "attacker"
traffic = "cbr"
per_as = 2
rate_bps = 1e6
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(BASE)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestLoad:
    def test_preset_population(self):
        s = load_scenario("colluding_single")
        assert s.legit_count + s.attacker_count == 200
        assert s.attacker_count / 200 == 0.75
        assert s.topology.bottleneck_bps == 20e6

    @pytest.mark.parametrize("name", list_presets())
    def test_every_preset_parses(self, name):
        s = load_scenario(name)
        assert s.duration > s.warmup >= 0 and s.legit_count + s.attacker_count > 0

    def test_shipped_presets(self):
        need = {"request_flood", "colluding_single", "parking_lot", "parking_lot_b1", "parking_lot_b2",
                "onoff", "convergence", "compromised_as"}
        assert need <= set(list_presets())

    def test_defaults_applied(self):
        assert parse_scenario(BASE).params == Parameters()

    def test_missing_topology_names_section(self):
        text = BASE.replace('[topology]\nkind = "dumbbell"\nbottleneck_bps = 2e6\nsource_ases = 2\n', "")
        with pytest.raises(ConfigError) as err:
            parse_scenario(text)
        assert err.value.field == "topology" and "topology" in str(err.value)

    @pytest.mark.parametrize("old,new,field,line", [
        ("rate_bps = 1e6", "rate_bps = -1.0", "groups[1].rate_bps", 23),
        ("bottleneck_bps = 2e6", 'bottleneck_bps = "fast"', "topology.bottleneck_bps", 9),
        ('traffic = "tcp"', 'traffic = "ftp"', "groups[0].traffic", 15),
        ("warmup = 2.0", "warmup = 9.0", "scenario.warmup", 4),
        ("per_as = 2\n\n[[groups]]", "per_as = 2\ncount = 3\n\n[[groups]]", "groups[0]", 12),
    ])
    def test_error_points_at_line_and_field(self, old, new, field, line):
        assert old in BASE
        with pytest.raises(ConfigError) as err:
            parse_scenario(BASE.replace(old, new, 1), "tiny.toml")
        assert err.value.field == field and err.value.line == line
        assert str(err.value).startswith(f"tiny.toml:{line}: {field}")

    def test_unknown_parameter(self):
        with pytest.raises(ConfigError) as err:
            parse_scenario(BASE + "\n[parameters]\nbogus = 1\n")
        assert err.value.field == "parameters.bogus" and err.value.line == 26

    def test_toml_syntax_error_has_line(self):
        with pytest.raises(ConfigError) as err:
            parse_scenario(BASE + "\n[scenario\n")
        assert err.value.line == 25

    def test_zero_multiplicative_decrease(self):
        s = parse_scenario(BASE + "\n[parameters]\ndelta_md = 0.0\n")
        assert s.params.delta_md == 0.0
        net = build(s)
        net.sim.run(s.duration)
        m = net.metrics()
        assert m.delta_md == 0.0
        assert m.bound(1.0) == pytest.approx(2e6 / 8)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            load_scenario("no_such_preset")


class TestCli:
    def test_list_presets(self, capsys):
        assert main(["list-presets"]) == EXIT_OK
        out = capsys.readouterr().out
        for name in list_presets():
            assert name in out

    def test_dump_defaults_round_trips(self, capsys):
        assert main(["dump-defaults"]) == EXIT_OK
        text = capsys.readouterr().out
        assert text == describe_defaults()
        s = parse_scenario(BASE + "\n" + text)
        assert s.params == Parameters()

    def test_run_writes_outputs(self, tiny, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["run", str(tiny), "--out", str(out)]) == EXIT_OK
        assert {p.name for p in out.iterdir()} == {"metrics.csv", "timeseries.csv", "plot.gp", "summary.txt"}
        for name in ("metrics.csv", "timeseries.csv"):
            rows = read_csv(out / name)
            assert tuple(rows[0]) == CSV_HEADER and len(rows) > 1
        assert "timeseries.csv" in (out / "plot.gp").read_text()
        assert "scenario: tiny" in capsys.readouterr().out

    def test_env_sets_default_out(self, tiny, tmp_path, monkeypatch):
        monkeypatch.setenv("NETFENCE_OUT", str(tmp_path / "env"))
        assert main(["run", str(tiny)]) == EXIT_OK
        assert (tmp_path / "env" / "tiny" / "metrics.csv").exists()

    def test_same_seed_identical_csv(self, tiny, tmp_path):
        for d in ("a", "b", "c"):
            seed = "9" if d == "c" else "5"
            assert main(["run", str(tiny), "--seed", seed, "--out", str(tmp_path / d)]) == EXIT_OK
        for name in ("metrics.csv", "timeseries.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert (tmp_path / "a" / "timeseries.csv").read_bytes() != (tmp_path / "c" / "timeseries.csv").read_bytes()

    def test_check_failure_exit(self, tmp_path):
        path = tmp_path / "strict.toml"
        path.write_text(BASE + "\n[checks]\nutilization_min = 1.5\n")
        assert main(["run", str(path), "--out", str(tmp_path / "o")]) == EXIT_OK
        assert main(["run", str(path), "--check", "--out", str(tmp_path / "o")]) == EXIT_CHECK_FAILED
        assert "FAIL utilization_min" in (tmp_path / "o" / "summary.txt").read_text()

    def test_config_error_exit(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text(BASE.replace("rate_bps = 1e6", "rate_bps = 0.0"))
        assert main(["run", str(path)]) == EXIT_CONFIG
        assert "bad.toml:23: groups[1].rate_bps" in capsys.readouterr().err

    def test_console_script(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "netfence.cli", "list-presets"], capture_output=True, text=True)
        assert res.returncode == 0 and "parking_lot" in res.stdout

    def test_drr_baseline_favours_flooders(self, tmp_path):
        """Per-sender fair queueing hands TCP users less than the constant-rate flooders."""
        out = tmp_path / "fq"
        assert main(["run", "colluding_single", "--policy", "fq-drr", "--duration", "100",
                     "--out", str(out)]) == EXIT_OK
        rows = {(r[0], r[1]): float(r[4]) for r in read_csv(out / "metrics.csv")[1:]}
        assert rows[("all", "throughput_ratio")] < 1.0
