import csv
import json
from pathlib import Path

import pytest

from nlmf import cli

TRI = """# small triangle rate
command = rate-triangle
seed = 3
problem.N = 8
problem.u = 2.0
solver.restarts = 3
"""


def write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(tmp_path, text, *extra, action="run", out="out"):
    cfg = write(tmp_path, text)
    code = cli.main([action, "--config", str(cfg), "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


class TestParsing:
    def test_comments_and_sections(self):
        values, lines = cli.parse_config("a = 1  # trailing\n\n# full line\nproblem.N = 5\n")
        assert values == {"a": "1", "problem.N": "5"} and lines["problem.N"] == 4

    @pytest.mark.parametrize("text,needle", [
        ("seed = 1\n", "command"),
        ("command = rate-triangle\n", "seed"),
        ("command = nope\nseed = 1\n", "unknown command"),
        ("command = rate-triangle\nseed = 1\nproblem.u = x\n", ":3: problem.u"),
        ("command = rate-triangle\nseed = 1\nsolver.warp = 2\n", "solver.warp"),
        ("command = rate-triangle\nseed = 1\nseed = 2\n", "duplicate"),
        ("command = rate-triangle\nseed = 1\na.b.c = 2\n", "dotted"),
        ("command = rate-triangle\nseed = 1\nproblem.l = 2\n", "unknown field"),
    ])
    def test_errors_name_the_field(self, tmp_path, capsys, text, needle):
        code, _ = run(tmp_path, text)
        assert code == 2
        assert needle in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert cli.main(["run", "--config", str(tmp_path / "absent.cfg")]) == 2


class TestRuns:
    def test_outputs(self, tmp_path):
        code, out = run(tmp_path, TRI)
        assert code == 0
        rows = list(csv.DictReader(open(out / "summary.csv")))
        assert len(rows) == 1 and rows[0]["seed"] == "3" and rows[0]["feasible"] == "true"
        assert len(rows[0]["config_hash"]) == 16
        events = [json.loads(l) for l in open(out / "events.jsonl")]
        assert [e["event"] for e in events] == ["restart"] * 3 + ["result"]
        assert all(e["config_hash"] == rows[0]["config_hash"] for e in events)
        # ten significant digits in the summary, full precision in events
        assert float(rows[0]["value"]) == pytest.approx(events[-1]["value"], rel=1e-9)

    def test_manifest_reproduces_bytes(self, tmp_path):
        code, out = run(tmp_path, TRI)
        again = tmp_path / "again"
        assert cli.main(["run", "--config", str(out / "manifest.cfg"), "--out", str(again), "--jobs", "2"]) == 0
        for name in ("summary.csv", "events.jsonl", "manifest.cfg"):
            assert (out / name).read_bytes() == (again / name).read_bytes()

    def test_seed_override_changes_hash_only_through_seed(self, tmp_path):
        _, a = run(tmp_path, TRI, out="a")
        _, b = run(tmp_path, TRI, "--seed", "4", out="b")
        ra = next(csv.DictReader(open(a / "summary.csv")))
        rb = next(csv.DictReader(open(b / "summary.csv")))
        assert rb["seed"] == "4" and ra["config_hash"] != rb["config_hash"]

    def test_env_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
        cfg = write(tmp_path, "command = validate-suite\nseed = 0\nsolver.restarts = 2\n")
        assert cli.main(["run", "--config", str(cfg)]) == 0
        assert (tmp_path / "env" / "summary.csv").exists()

    def test_format_selection(self, tmp_path):
        code, out = run(tmp_path, TRI, "--format", "csv")
        assert (out / "summary.csv").exists() and not (out / "events.jsonl").exists()

    def test_infeasible_is_not_an_error(self, tmp_path):
        code, out = run(tmp_path, "command = rate-simplex\nseed = 1\nproblem.l = 1\nproblem.N = 5\n")
        assert code == 0
        row = next(csv.DictReader(open(out / "summary.csv")))
        assert row["feasible"] == "false" and row["value"] == "inf"

    def test_pattern_file(self, tmp_path):
        (tmp_path / "p3.txt").write_text("3 2\n1 2\n2 3\n")
        text = f"command = rate-simplex\nseed = 1\nproblem.N = 5\nproblem.u = 1.3\nproblem.H = {tmp_path / 'p3.txt'}\n"
        code, out = run(tmp_path, text)
        assert code == 0

    @pytest.mark.parametrize("text", [
        "command = theorem1\nseed = 2\nproblem.functional = curie-weiss\nproblem.n = 8\n",
        "command = mc-tail\nseed = 2\nproblem.N = 4\nproblem.samples = 20000\nsolver.restarts = 2\n",
        "command = spin-mf\nseed = 2\nproblem.n = 6\nproblem.beta = 1.5\n",
    ])
    def test_other_commands(self, tmp_path, text):
        code, out = run(tmp_path, text)
        assert code == 0 and (out / "summary.csv").exists()

    def test_validate_suite_failure_exit(self, tmp_path, monkeypatch):
        import nlmf.validate

        monkeypatch.setattr(nlmf.validate, "run_suite", lambda cfg: [{"name": "x", "passed": False, "detail": 1.0}])
        code, _ = run(tmp_path, "command = validate-suite\nseed = 0\n")
        assert code == 1


class TestSweep:
    SWEEP = "command = spin-mf\nseed = 1\nproblem.beta = 0.5\ngrid.n = 6, 8\ngrid.h = 0.0, 0.3\nsolver.restarts = 2\n"

    def test_grid_rows_and_jobs_identity(self, tmp_path):
        code, a = run(tmp_path, self.SWEEP, action="sweep", out="a")
        assert code == 0
        rows = list(csv.DictReader(open(a / "summary.csv")))
        assert [(r["h"], r["n"]) for r in rows] == [("0", "6"), ("0", "8"), ("0.3", "6"), ("0.3", "8")]
        code, b = run(tmp_path, self.SWEEP, "--jobs", "3", action="sweep", out="b")
        for name in ("summary.csv", "events.jsonl"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        c = tmp_path / "c"
        assert cli.main(["sweep", "--config", str(a / "manifest.cfg"), "--out", str(c)]) == 0
        assert (a / "summary.csv").read_bytes() == (c / "summary.csv").read_bytes()

    def test_empty_grid(self, tmp_path):
        assert run(tmp_path, "command = spin-mf\nseed = 1\ngrid.n = ,\n", action="sweep")[0] == 2
        assert run(tmp_path, "command = spin-mf\nseed = 1\n", action="sweep")[0] == 2

    def test_grid_needs_sweep(self, tmp_path):
        assert run(tmp_path, self.SWEEP)[0] == 2

    def test_three_axes_rejected(self, tmp_path):
        text = self.SWEEP + "grid.beta = 0.5, 1.0\n"
        assert run(tmp_path, text, action="sweep")[0] == 2


CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.cfg"))


class TestWorkedExamples:
    def test_rate_run_repeats_bytes(self, tmp_path):
        text = "command = rate-triangle\nseed = 7\nproblem.N = 20\nproblem.u = 2.0\n"
        _, a = run(tmp_path, text, out="a")
        _, b = run(tmp_path, text, out="b")
        for name in ("events.jsonl", "summary.csv", "manifest.cfg"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_u_grid_sweep(self, tmp_path):
        text = "command = rate-triangle\nseed = 1\nproblem.N = 12\nsolver.restarts = 3\ngrid.u = 1.5, 2.0, 4.0, 6.0\n"
        code, out = run(tmp_path, text, action="sweep")
        rows = list(csv.DictReader(open(out / "summary.csv")))
        assert code == 0 and len(rows) == 4
        vals = [float(r["value"]) for r in rows]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_ladder_gap_shrinks(self, tmp_path):
        code, out = run(tmp_path, (CONFIGS[0].parent / "curie_weiss_ladder.cfg").read_text(), action="sweep")
        gaps = [float(r["gap_over_n"]) for r in csv.DictReader(open(out / "summary.csv"))]
        assert code == 0 and all(b <= a for a, b in zip(gaps, gaps[1:]))

    @pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
    def test_bundled_configs_resolve(self, path):
        values, lines = cli.parse_config(path.read_text())
        cli.resolve(values, lines, None, grid_ok="grid" in path.read_text())
