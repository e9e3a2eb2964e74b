"""Tests for src/pipe.py — copying series between engines."""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from src.config import EngineConfig
from src.distribution import RankMeta, StrategySpec
from src.engine import local_group, open_reader, open_writer
from src.errors import ConfigError
from src.model import Region
from src.pipe import (
    REPORT_HEADER,
    PipeReport,
    PipeSpec,
    SeriesEndpoint,
    StepRecord,
    build_parser,
    main,
    run_pipe,
    write_report_csv,
)


def _mesh(step: int) -> np.ndarray:
    return (np.arange(48, dtype="<f4") + 1000 * step).reshape(6, 8)


def _write_source(series, cfg, decl, steps=(0, 1, 2)):
    """Two writer ranks, three rows each; steps carry a ``time`` attribute."""
    with open_writer(series, local_group(2, "node0"), cfg) as w:
        for step in steps:
            w.begin_step(step)
            w.set_attribute("time", step * 0.5)
            for rank in (0, 1):
                rows = Region((3 * rank, 0), (3, 8))
                w.put_chunk(decl, rows, _mesh(step)[3 * rank : 3 * rank + 3], rank=rank)
            w.end_step()


def _read_all(series, cfg, decl):
    """step -> (attributes, full mesh) for a complete series."""
    out = {}
    with open_reader(series, local_group(1), cfg) as r:
        while (step := r.next_step()) is not None:
            out[step.step_index] = (
                step.attributes,
                r.get_array(decl, Region.whole(decl.global_extent)),
            )
    return out


def _coverage(series, cfg, decl):
    """Per step, how many times each cell of ``decl`` was written, and the values."""
    counts, values = {}, {}
    with open_reader(series, local_group(1), cfg) as r:
        while (step := r.next_step()) is not None:
            n = np.zeros(decl.global_extent, dtype=int)
            v = np.zeros(decl.global_extent, dtype=decl.dtype)
            for chunk in step.chunk_table:
                o, s = chunk.region.offset, chunk.region.stop
                n[o[0] : s[0], o[1] : s[1]] += 1
                v[o[0] : s[0], o[1] : s[1]] = r.get_array(decl, chunk.region)
            counts[step.step_index], values[step.step_index] = n, v
    return counts, values


class TestPipeSpec:
    def test_defaults(self):
        spec = PipeSpec(SeriesEndpoint("a"), (SeriesEndpoint("b"),))
        assert spec.ranks == [0]
        assert spec.delay_ms == 0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"sinks": ()},
            {"sinks": (SeriesEndpoint("src"),)},
            {"sinks": (SeriesEndpoint("b"), SeriesEndpoint("b"))},
            {"sinks": (SeriesEndpoint("b"),), "delay_ms": -1},
            {"sinks": (SeriesEndpoint("b"),), "local_ranks": (3,)},
            {"sinks": (SeriesEndpoint("b"),), "group": (RankMeta(1, "a"),)},
            {"sinks": (SeriesEndpoint("b"),), "group": (RankMeta(0, "a"), RankMeta(2, "a"))},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            PipeSpec(SeriesEndpoint("src"), **kwargs)

    def test_local_ranks(self):
        group = (RankMeta(0, "a"), RankMeta(1, "a"), RankMeta(2, "b"))
        sinks = (SeriesEndpoint("t"),)
        spec = PipeSpec(SeriesEndpoint("s"), sinks, group=group, local_ranks=(2, 1))
        assert spec.ranks == [1, 2]


class TestRunPipe:
    def test_file_to_file_identity(self, tmp_path, file_cfg, decl_2d):
        src, dst = str(tmp_path / "src"), str(tmp_path / "dst")
        _write_source(src, file_cfg, decl_2d)
        report = run_pipe(PipeSpec(SeriesEndpoint(src, file_cfg), (SeriesEndpoint(dst, file_cfg),)))
        assert report.steps_copied == 3
        assert report.bytes_moved == 3 * decl_2d.nbytes
        assert [r.step for r in report.records] == [0, 1, 2]
        copied = _read_all(dst, file_cfg, decl_2d)
        assert sorted(copied) == [0, 1, 2]
        for step, (attributes, mesh) in copied.items():
            assert attributes == {"time": step * 0.5}
            np.testing.assert_array_equal(mesh, _mesh(step))

    def test_step_indices_preserved(self, tmp_path, file_cfg, decl_2d):
        src, dst = str(tmp_path / "src"), str(tmp_path / "dst")
        _write_source(src, file_cfg, decl_2d, steps=(4, 10))
        run_pipe(PipeSpec(SeriesEndpoint(src, file_cfg), (SeriesEndpoint(dst, file_cfg),)))
        assert sorted(_read_all(dst, file_cfg, decl_2d)) == [4, 10]

    def test_tee_writes_identical_sinks(self, tmp_path, file_cfg, decl_2d):
        src = str(tmp_path / "src")
        sinks = (str(tmp_path / "a"), str(tmp_path / "b"))
        _write_source(src, file_cfg, decl_2d)
        run_pipe(
            PipeSpec(
                SeriesEndpoint(src, file_cfg),
                tuple(SeriesEndpoint(s, file_cfg) for s in sinks),
                strategy=StrategySpec("round_robin"),
            )
        )
        a, b = (_read_all(s, file_cfg, decl_2d) for s in sinks)
        assert sorted(a) == sorted(b) == [0, 1, 2]
        for step in a:
            np.testing.assert_array_equal(a[step][1], b[step][1])

    def test_instances_split_the_reader_group(self, tmp_path, file_cfg, decl_2d):
        src = str(tmp_path / "src")
        _write_source(src, file_cfg, decl_2d)
        group = (RankMeta(0, "node0"), RankMeta(1, "node0"))
        sinks = []
        for rank in (0, 1):
            sink = str(tmp_path / f"out{rank}")
            sinks.append(sink)
            run_pipe(
                PipeSpec(
                    SeriesEndpoint(src, file_cfg),
                    (SeriesEndpoint(sink, file_cfg),),
                    strategy=StrategySpec("hyperslabs", axis=1),
                    group=group,
                    local_ranks=(rank,),
                )
            )
        parts = [_coverage(s, file_cfg, decl_2d) for s in sinks]
        for step in (0, 1, 2):
            total = parts[0][0][step] + parts[1][0][step]
            assert (total == 1).all()
            merged = np.where(parts[0][0][step] == 1, parts[0][1][step], parts[1][1][step])
            np.testing.assert_array_equal(merged, _mesh(step))

    def test_delay_per_step(self, tmp_path, file_cfg, decl_2d, mocker):
        src, dst = str(tmp_path / "src"), str(tmp_path / "dst")
        _write_source(src, file_cfg, decl_2d)
        sleep = mocker.patch("src.pipe.time.sleep")
        sinks = (SeriesEndpoint(dst, file_cfg),)
        spec = PipeSpec(SeriesEndpoint(src, file_cfg), sinks, delay_ms=20)
        run_pipe(spec)
        assert sleep.call_count == 3
        sleep.assert_called_with(0.02)

    @pytest.mark.integration
    def test_stream_to_file(self, tmp_path, file_cfg, stream_cfg, decl_2d):
        stream = stream_cfg
        src, dst = str(tmp_path / "sim"), str(tmp_path / "capture")
        w = open_writer(src, local_group(2, "node0"), stream)
        spec = PipeSpec(SeriesEndpoint(src, stream), (SeriesEndpoint(dst, file_cfg),))
        with ThreadPoolExecutor(1) as pool:
            piping = pool.submit(run_pipe, spec)
            deadline = time.monotonic() + 10
            while not w.queue._subscribers and time.monotonic() < deadline:
                time.sleep(0.01)
            for step in range(4):
                w.begin_step()
                for rank in (0, 1):
                    rows = Region((3 * rank, 0), (3, 8))
                    w.put_chunk(decl_2d, rows, _mesh(step)[3 * rank : 3 * rank + 3], rank=rank)
                w.end_step()
            w.close()
            report = piping.result(timeout=30)
        assert report.steps_copied == 4
        copied = _read_all(dst, file_cfg, decl_2d)
        assert sorted(copied) == [0, 1, 2, 3]
        for step, (_, mesh) in copied.items():
            np.testing.assert_array_equal(mesh, _mesh(step))

    @pytest.mark.integration
    def test_two_instances_feed_one_stream_sink(self, tmp_path, file_cfg, stream_cfg, decl_2d):
        src, relay = str(tmp_path / "src"), str(tmp_path / "relay")
        _write_source(src, file_cfg, decl_2d)
        group = (RankMeta(0, "node0"), RankMeta(1, "node0"))
        specs = [
            PipeSpec(
                SeriesEndpoint(src, file_cfg),
                (SeriesEndpoint(relay, stream_cfg),),
                strategy=StrategySpec("hyperslabs", axis=1),
                group=group,
                local_ranks=(rank,),
            )
            for rank in (0, 1)
        ]
        with ThreadPoolExecutor(2) as pool:
            futures = [pool.submit(run_pipe, spec) for spec in specs]
            relayed = _read_all(relay, stream_cfg, decl_2d)
            reports = [f.result(timeout=30) for f in futures]
        assert [r.steps_copied for r in reports] == [3, 3]
        assert sorted(relayed) == [0, 1, 2]
        for step, (attributes, mesh) in relayed.items():
            assert attributes == {"time": step * 0.5}
            np.testing.assert_array_equal(mesh, _mesh(step))


class TestReport:
    def test_csv(self, tmp_path):
        report = PipeReport([StepRecord(0, 100, 0.5, 0.25), StepRecord(1, 50, 0.1)])
        path = tmp_path / "report.csv"
        write_report_csv(report, path)
        with path.open() as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == REPORT_HEADER
        assert rows[1][:2] == ["0", "100"]
        assert float(rows[2][3]) == 0.0


class TestCli:
    def test_missing_in(self):
        with pytest.raises(SystemExit) as exc:
            main(["--out", "x"])
        assert exc.value.code == 2

    def test_out2_config_without_out2(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["--in", "a", "--out", "b", "--out2-config", str(tmp_path / "c.json")])
        assert exc.value.code == 2

    @pytest.mark.parametrize(
        "extra",
        [["--group", "not json"], ["--strategy", '{"kind": "zigzag"}']],
    )
    def test_bad_arguments(self, extra):
        with pytest.raises(SystemExit) as exc:
            main(["--in", "a", "--out", "b", *extra])
        assert exc.value.code == 2

    def test_parser_flags(self):
        args = build_parser().parse_args(["--in", "a", "--out", "b", "--rank", "1", "--rank", "0"])
        assert args.source == "a"
        assert args.rank == [1, 0]

    def test_file_to_file(self, tmp_path, decl_2d, capsys):
        cfg_path = tmp_path / "file.json"
        cfg_path.write_text(json.dumps({"engine": "file", "rendezvous_timeout_s": 1}))
        src, dst = str(tmp_path / "src"), str(tmp_path / "dst")
        _write_source(src, EngineConfig.load(cfg_path), decl_2d)
        report = tmp_path / "report.csv"
        code = main(
            [
                "--in",
                src,
                "--in-config",
                str(cfg_path),
                "--out",
                dst,
                "--out-config",
                str(cfg_path),
                "--report",
                str(report),
            ]
        )
        assert code == 0
        assert "Copied 3 steps" in capsys.readouterr().out
        with report.open() as f:
            assert next(csv.reader(f)) == list(REPORT_HEADER)
        assert sorted(_read_all(dst, EngineConfig.load(cfg_path), decl_2d)) == [0, 1, 2]

    def test_missing_source_returns_one(self, tmp_path, capsys):
        cfg_path = tmp_path / "file.json"
        cfg_path.write_text(json.dumps({"engine": "file", "rendezvous_timeout_s": 0.2}))
        code = main(
            [
                "--in",
                str(tmp_path / "absent"),
                "--in-config",
                str(cfg_path),
                "--out",
                str(tmp_path / "dst"),
                "--out-config",
                str(cfg_path),
            ]
        )
        assert code == 1
        assert "chunkstream-pipe:" in capsys.readouterr().err

    def test_unreadable_config_returns_one(self, tmp_path):
        code = main(["--in", "a", "--out", "b", "--out-config", str(tmp_path / "missing.json")])
        assert code == 1

    def test_invalid_config_is_usage_error(self, tmp_path):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps({"engine": "tape"}))
        with pytest.raises(SystemExit) as exc:
            main(["--in", "a", "--out", "b", "--out-config", str(cfg_path)])
        assert exc.value.code == 2
