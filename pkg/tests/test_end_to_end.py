"""Producer and consumer programs run unchanged over both engines and through pipes."""

from __future__ import annotations

import statistics
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from src.distribution import RankMeta, StrategySpec
from src.engine import StepOutcome, local_group, open_reader, open_writer
from src.model import Region
from src.pipe import PipeSpec, SeriesEndpoint, run_pipe

pytestmark = pytest.mark.integration

STEPS = 4
READERS = [RankMeta(0, "node0"), RankMeta(1, "node0"), RankMeta(2, "node0")]


def _mesh(step: int) -> np.ndarray:
    return (np.arange(48, dtype="<f4") * (step + 1)).reshape(6, 8)


def _produce(w, decl, steps=STEPS):
    """Two ranks, three rows each, plus a ``time`` attribute per step."""
    outcomes = []
    for step in range(steps):
        w.begin_step()
        w.set_attribute("time", step * 0.5)
        for rank in (0, 1):
            rows = Region((3 * rank, 0), (3, 8))
            w.put_chunk(decl, rows, _mesh(step)[3 * rank : 3 * rank + 3], rank=rank)
        outcomes.append(w.end_step())
    w.close()
    return outcomes


def _consume(series, cfg, decl):
    """step -> (attributes, mesh assembled from every reader rank's assigned slabs)."""
    out = {}
    with open_reader(series, READERS, cfg) as r:
        while (step := r.next_step()) is not None:
            mesh = np.full(decl.global_extent, np.nan, dtype=decl.dtype)
            for m in READERS:
                for slab, arr in r.load_assigned(m.rank):
                    o, s = slab.region.offset, slab.region.stop
                    mesh[o[0] : s[0], o[1] : s[1]] = arr
            out[step.step_index] = (step.attributes, mesh)
            r.release_step()
    return out


def _assert_expected(got, steps=STEPS):
    assert sorted(got) == list(range(steps))
    for step, (attributes, mesh) in got.items():
        assert attributes == {"time": step * 0.5}
        np.testing.assert_array_equal(mesh, _mesh(step))


def _wait_for_subscriber(w, timeout=10.0):
    deadline = time.monotonic() + timeout
    while not w.queue._subscribers and time.monotonic() < deadline:
        time.sleep(0.01)


def _run_stream(series, cfg, decl):
    """Produce in a thread while consuming here."""
    w = open_writer(series, local_group(2, "node0"), cfg)
    with ThreadPoolExecutor(1) as pool:
        producing = pool.submit(_produce, w, decl)
        got = _consume(series, cfg, decl)
        outcomes = producing.result(timeout=30)
    return got, outcomes


def _run_file(series, cfg, decl):
    outcomes = _produce(open_writer(series, local_group(2, "node0"), cfg), decl)
    return _consume(series, cfg, decl), outcomes


class TestEngineInterchange:
    @pytest.mark.parametrize(
        "strategy",
        [StrategySpec("binpacking"), StrategySpec("round_robin"), StrategySpec("hyperslabs")],
        ids=["binpacking", "round_robin", "hyperslabs"],
    )
    def test_same_programs_same_result(self, tmp_path, file_cfg, stream_cfg, decl_2d, strategy):
        via_stream, stream_outcomes = _run_stream(
            str(tmp_path / "live"), stream_cfg.replace(strategy=strategy), decl_2d
        )
        via_file, file_outcomes = _run_file(
            str(tmp_path / "disk"), file_cfg.replace(strategy=strategy), decl_2d
        )
        assert set(stream_outcomes) == {StepOutcome.PUBLISHED}
        assert set(file_outcomes) == {StepOutcome.WRITTEN}
        _assert_expected(via_stream)
        assert via_stream.keys() == via_file.keys()
        for step in via_stream:
            assert via_stream[step][0] == via_file[step][0]
            np.testing.assert_array_equal(via_stream[step][1], via_file[step][1])


class TestPipeChains:
    def test_file_to_stream_to_file(self, tmp_path, file_cfg, stream_cfg, decl_2d):
        source, live, capture = (str(tmp_path / n) for n in ("source", "live", "capture"))
        _produce(open_writer(source, local_group(2, "node0"), file_cfg), decl_2d)
        replay = PipeSpec(SeriesEndpoint(source, file_cfg), (SeriesEndpoint(live, stream_cfg),))
        record = PipeSpec(SeriesEndpoint(live, stream_cfg), (SeriesEndpoint(capture, file_cfg),))
        with ThreadPoolExecutor(2) as pool:
            replaying = pool.submit(run_pipe, replay)
            recording = pool.submit(run_pipe, record)
            reports = [replaying.result(timeout=30), recording.result(timeout=30)]
        assert [r.steps_copied for r in reports] == [STEPS, STEPS]
        _assert_expected(_consume(capture, file_cfg, decl_2d))

    def test_tee_from_stream_into_file_and_stream(self, tmp_path, file_cfg, stream_cfg, decl_2d):
        sim, capture, relay = (str(tmp_path / n) for n in ("sim", "capture", "relay"))
        w = open_writer(sim, local_group(2, "node0"), stream_cfg)
        tee = PipeSpec(
            SeriesEndpoint(sim, stream_cfg),
            (SeriesEndpoint(capture, file_cfg), SeriesEndpoint(relay, stream_cfg)),
        )
        with ThreadPoolExecutor(2) as pool:
            piping = pool.submit(run_pipe, tee)
            relayed = pool.submit(_consume, relay, stream_cfg, decl_2d)
            _wait_for_subscriber(w)
            _produce(w, decl_2d)
            report = piping.result(timeout=30)
            _assert_expected(relayed.result(timeout=30))
        assert report.steps_copied == STEPS
        _assert_expected(_consume(capture, file_cfg, decl_2d))


@pytest.mark.slow
class TestSlowReader:
    STEPS = 30
    COMPUTE_S = 0.04

    def _write(self, w, decl):
        """Per-step wall time of a writer computing ``COMPUTE_S`` between steps."""
        times = []
        for step in range(self.STEPS):
            start = time.monotonic()
            time.sleep(self.COMPUTE_S)
            w.begin_step()
            w.put_chunk(decl, Region((0,), (20,)), np.full(20, float(step)))
            w.end_step()
            times.append(time.monotonic() - start)
        return times

    def test_discard_keeps_the_writer_at_its_own_pace(self, series, stream_cfg, decl_1d):
        cfg = stream_cfg.replace(queue_policy="discard", queue_depth=1)

        # nobody ever subscribes, so close gives up on the one staged step quickly
        alone = open_writer(
            series + "-alone", local_group(1, "node0"), cfg.replace(close_timeout_s=0.2)
        )
        baseline = self._write(alone, decl_1d)
        alone.close()

        def slow_reader():
            seen = []
            with open_reader(series, local_group(1, "node0"), cfg) as r:
                while (step := r.next_step()) is not None:
                    r.get_array(decl_1d, Region((0,), (20,)))
                    seen.append(step.step_index)
                    time.sleep(5 * self.COMPUTE_S)
            return seen

        w = open_writer(series, local_group(1, "node0"), cfg)
        with ThreadPoolExecutor(1) as pool:
            reading = pool.submit(slow_reader)
            _wait_for_subscriber(w)
            observed = self._write(w, decl_1d)
            w.close()
            delivered = reading.result(timeout=30)

        assert delivered == sorted(set(delivered))
        assert set(delivered) < set(range(self.STEPS))
        assert delivered
        assert delivered == [s for s, o in sorted(w.outcomes.items()) if o is StepOutcome.PUBLISHED]
        assert statistics.median(observed) < 1.1 * statistics.median(baseline)
