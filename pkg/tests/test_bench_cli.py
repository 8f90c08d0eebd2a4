import csv
import json

import numpy as np
import pytest

from teestream.bench import (
    BENCHMARKS,
    RunMetrics,
    egress_bytes,
    generate_events,
    get_spec,
    read_egress,
    run_benchmark,
    write_metrics_csv,
)
from teestream.cli import main
from teestream.control import EngineConfig
from teestream.errors import ParamInvalid
from teestream.model import selectivity_band

SMALL = 2000


class TestGenerators:
    @pytest.mark.parametrize("name", sorted(BENCHMARKS))
    def test_seed_determinism(self, name):
        spec = BENCHMARKS[name].scaled(SMALL)
        a, b = generate_events(spec, 2 * SMALL, seed=3), generate_events(spec, 2 * SMALL, seed=3)
        c = generate_events(spec, 2 * SMALL, seed=4)
        assert list(a.frames()) == list(b.frames()) != list(c.frames())

    def test_counts_and_windows(self):
        spec = BENCHMARKS["Join"].scaled(SMALL)
        wl = generate_events(spec, 5000, seed=1)
        assert wl.windows == 3 and [len(w[0]) for w in wl.events] == [2000, 2000, 1000]
        assert len(wl.events[0]) == 2 and wl.count == 10_000

    def test_events_inside_their_window(self):
        spec = BENCHMARKS["WinSum"].scaled(SMALL)
        wl = generate_events(spec, 3 * SMALL)
        for w, (ev,) in enumerate(wl.events):
            assert ev["t"].min() >= w * spec.width and ev["t"].max() < (w + 1) * spec.width
            assert np.all(np.diff(ev["t"].astype(np.int64)) >= 0)

    def test_distinct_key_space(self):
        ev = generate_events(BENCHMARKS["Distinct"], 100_000).port_events(0)
        assert len(np.unique(ev["key"])) <= 11_000

    def test_topk_keys_uniform(self):
        ev = generate_events(BENCHMARKS["TopK"], 200_000).port_events(0)
        counts = np.bincount(ev["key"], minlength=10_000)
        expect = len(ev) / 10_000
        chi2 = float(((counts - expect) ** 2 / expect).sum())
        # 9999 degrees of freedom: mean 9999, sd about 141
        assert abs(chi2 - 9999) < 6 * 141

    def test_filter_selectivity(self):
        ev = generate_events(BENCHMARKS["Filter"], 200_000).port_events(0)
        lo, hi = selectivity_band(0.01)
        frac = float(((ev["value"] >= lo) & (ev["value"] <= hi)).mean())
        assert 0.008 <= frac <= 0.012

    def test_power_houses(self):
        ev = generate_events(BENCHMARKS["Power"].scaled(SMALL), SMALL).port_events(0)
        assert set(np.unique(ev["extra"])) <= set(range(40))
        assert np.all(ev["extra"] == ev["key"] // 50)

    def test_negative_count(self):
        with pytest.raises(ParamInvalid):
            generate_events(BENCHMARKS["TopK"], -1)

    def test_spec_lookup(self):
        assert get_spec("winsum").name == "WinSum"
        with pytest.raises(ParamInvalid):
            get_spec("median")


class TestHarness:
    def test_run_and_verify(self, tmp_path):
        spec = BENCHMARKS["TopK"].scaled(SMALL)
        res = run_benchmark(spec, EngineConfig(batch_size=500), windows=2, out_dir=tmp_path, verify=True)
        m = res.metrics
        assert m.verified and m.events == 2 * SMALL and m.windows == 2
        assert m.audit_records > 0 and m.compression_ratio > 1
        for f in ("metrics.csv", "run.sbtlog", "egress.bin", "verdict.json"):
            assert (tmp_path / f).exists()
        assert read_egress((tmp_path / "egress.bin").read_bytes()) == res.report.payloads

    def test_csv_schema(self, tmp_path):
        spec = BENCHMARKS["WinSum"].scaled(SMALL)
        m = run_benchmark(spec, EngineConfig(batch_size=500), windows=1).metrics
        path = tmp_path / "m.csv"
        write_metrics_csv(path, [m])
        write_metrics_csv(path, [m], append=True)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 and list(rows[0]) == RunMetrics.columns()
        assert rows[0]["bench"] == "WinSum" and float(rows[0]["throughput_eps"]) > 0

    def test_egress_bytes_roundtrip(self):
        spec = BENCHMARKS["Filter"].scaled(SMALL)
        rep = run_benchmark(spec, EngineConfig(batch_size=500), windows=3).report
        assert read_egress(egress_bytes(rep)) == rep.payloads

    def test_insecure_has_no_audit(self):
        spec = BENCHMARKS["WinSum"].scaled(SMALL)
        res = run_benchmark(spec, EngineConfig(variant="insecure"), windows=1, verify=True)
        assert res.blocks == [] and res.verdict is None


class TestCli:
    def test_run_verify(self, tmp_path, capsys):
        out = tmp_path / "run"
        rc = main(["run", "--bench", "WinSum", "--window-events", "2000", "--windows", "2",
                   "--batch", "500", "--out", str(out), "--verify"])
        assert rc == 0
        assert "verdict: PASS" in capsys.readouterr().out
        assert json.loads((out / "verdict.json").read_text())["correct"] is True
        rc = main(["verify", str(out / "run.sbtlog"), "--bench", "WinSum"])
        assert rc == 0 and json.loads(capsys.readouterr().out)["correct"] is True

    def test_verify_wrong_pipeline(self, tmp_path, capsys):
        out = tmp_path / "run"
        main(["run", "--bench", "WinSum", "--window-events", "2000", "--windows", "1", "--out", str(out)])
        capsys.readouterr()
        assert main(["verify", str(out / "run.sbtlog"), "--bench", "TopK"]) == 1

    def test_verify_pipeline_file(self, tmp_path, capsys):
        out = tmp_path / "run"
        main(["run", "--bench", "WinSum", "--window-events", "2000", "--windows", "1", "--out", str(out)])
        pipe = tmp_path / "winsum.pipe"
        pipe.write_text("ingress in\nwindow w width=1s\naggregate a kind=sum\negress out\n"
                        "connect in -> w -> a -> out\n")
        assert main(["verify", str(out / "run.sbtlog"), "--pipeline", str(pipe)]) == 0

    def test_verify_tampered_log(self, tmp_path, capsys):
        out = tmp_path / "run"
        main(["run", "--bench", "WinSum", "--window-events", "2000", "--windows", "1", "--out", str(out)])
        log = out / "run.sbtlog"
        data = bytearray(log.read_bytes())
        data[-1] ^= 1
        log.write_bytes(bytes(data))
        capsys.readouterr()
        assert main(["verify", str(log), "--bench", "WinSum"]) == 1
        assert "refused" in capsys.readouterr().out

    def test_unknown_bench(self, capsys):
        assert main(["run", "--bench", "nope"]) == 2
        assert "unknown benchmark" in capsys.readouterr().err

    def test_no_command(self, capsys):
        assert main([]) == 2
