"""Tests for src/group.py — writer groups spread over several processes."""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from src.errors import (
    ChunkValidationError,
    ConfigError,
    DecodeError,
    RendezvousTimeoutError,
    StepStateError,
)
from src.group import (
    DISCARDED,
    GroupLeader,
    GroupMember,
    decode_part,
    encode_part,
    merge_parts,
    remap_payloads,
)
from src.model import DatasetDecl, Region, WrittenChunk, build_announcement
from src.wire import MessageKind

DECL = DatasetDecl("particles/e/position/x", "f8", (20,))


def _part(step, rank, offset=None, extent=5, attributes=None, decls=(DECL,)):
    """Rank ``rank``'s chunk of ``step``: cells ``[5 * rank, 5 * rank + extent)``."""
    offset = 5 * rank if offset is None else offset
    chunk = WrittenChunk(DECL.name, Region((offset,), (extent,)), rank, f"host{rank}")
    return build_announcement(step, decls, attributes or {}, [chunk])


def _wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while not predicate():
        if time.monotonic() > deadline:
            msg = "condition not reached in time"
            raise AssertionError(msg)
        time.sleep(0.01)


class TestParts:
    def test_roundtrip_with_payloads(self):
        ann = _part(3, 1)
        part = decode_part(encode_part(ann, [np.arange(5.0)]))
        assert part.announcement == ann
        assert part.payloads is not None
        assert part.payloads[0].tolist() == [0.0, 1.0, 2.0, 3.0, 4.0]

    def test_chunk_table_only(self):
        part = decode_part(encode_part(_part(0, 0)))
        assert part.payloads is None

    def test_empty_step_has_no_blocks(self):
        ann = build_announcement(0, [DECL], {"time": 1.0}, [])
        assert decode_part(encode_part(ann)).payloads == []

    def test_short_block(self):
        payload = encode_part(_part(0, 0), [np.arange(5.0)])
        with pytest.raises(DecodeError, match="ends inside"):
            decode_part(payload[:-1])

    def test_trailing_bytes(self):
        payload = encode_part(_part(0, 0), [np.arange(5.0)])
        with pytest.raises(DecodeError, match="after the last block"):
            decode_part(payload + b"\x00" * 8)


class TestMerge:
    def test_chunks_of_all_parts(self):
        merged = merge_parts(2, [_part(2, 1), _part(2, 0)])
        assert [c.producer_rank for c in merged.chunk_table] == [0, 1]
        assert merged.decls == {DECL.name: DECL}

    def test_first_attribute_wins(self):
        merged = merge_parts(
            0, [_part(0, 0, attributes={"time": 1.0}), _part(0, 1, attributes={"time": 2.0})]
        )
        assert merged.attributes == {"time": 1.0}

    def test_step_mismatch(self):
        with pytest.raises(StepStateError, match="part of step 1"):
            merge_parts(0, [_part(0, 0), _part(1, 1)])

    def test_conflicting_declarations(self):
        other = DatasetDecl(DECL.name, "f4", (20,))
        with pytest.raises(ChunkValidationError, match="declared as"):
            merge_parts(0, [_part(0, 0), _part(0, 1, decls=(other,))])

    def test_overlap_across_parts(self):
        with pytest.raises(ChunkValidationError, match="overlaps"):
            merge_parts(0, [_part(0, 0, extent=8), _part(0, 1)])

    def test_remap_payloads(self):
        own = _part(0, 1)
        merged = merge_parts(0, [_part(0, 0), own])
        block = np.ones(5)
        assert remap_payloads(own, merged, {0: block}) == {1: block}


@pytest.mark.integration
class TestLeaderAndMember:
    @pytest.fixture()
    def leader(self):
        leader = GroupLeader("sim", {1}, join_timeout=5.0)
        leader.listen("127.0.0.1", (0, 0))
        yield leader
        leader.close(0.5)

    def _join(self, leader, ranks=(1,), **kwargs):
        return GroupMember.connect(
            "sim", lambda: leader.endpoint, {"ranks": list(ranks)}, timeout=5.0, **kwargs
        )

    def test_gather_and_reply(self, leader):
        member = self._join(leader)
        assert leader.complete
        with ThreadPoolExecutor(1) as pool:
            pending = pool.submit(member.submit, 0, encode_part(_part(0, 1), [np.ones(5)]))
            parts = leader.gather(0)
            assert len(parts) == 1
            assert parts[0].announcement == _part(0, 1)
            assert parts[0].payloads is not None
            leader.reply(parts, {"outcome": "written"}, b"raw")
            head, raw = pending.result(timeout=5)
        assert head == {"outcome": "written", "step": 0}
        assert raw == b"raw"
        with ThreadPoolExecutor(1) as pool:
            closing = pool.submit(leader.close, 5.0)
            member.close(5.0)
            closing.result(timeout=10)

    def test_error_verdict(self, leader):
        member = self._join(leader)
        with ThreadPoolExecutor(1) as pool:
            pending = pool.submit(member.submit, 0, encode_part(_part(0, 1)))
            leader.reply(leader.gather(0), {"error": "disk full"})
            with pytest.raises(StepStateError, match="disk full"):
                pending.result(timeout=5)
            closing = pool.submit(leader.close, 5.0)
            member.close(5.0)
            closing.result(timeout=10)

    def test_unexpected_ranks_refused(self, leader):
        with pytest.raises(ConfigError, match="not expected"):
            self._join(leader, ranks=(2,))
        assert not leader.complete

    def test_ranks_joined_twice_refused(self, leader):
        member = self._join(leader)
        try:
            with pytest.raises(ConfigError, match="already joined"):
                self._join(leader)
        finally:
            with ThreadPoolExecutor(1) as pool:
                closing = pool.submit(leader.close, 5.0)
                member.close(5.0)
                closing.result(timeout=10)

    def test_gather_times_out_without_members(self):
        leader = GroupLeader("sim", {1, 2}, join_timeout=0.2)
        with pytest.raises(RendezvousTimeoutError, match=r"ranks \[1, 2\] did not join"):
            leader.gather(0)
        leader.close(0.1)

    def test_member_times_out_without_leader(self):
        def nowhere():
            raise FileNotFoundError("no endpoint published")

        with pytest.raises(RendezvousTimeoutError, match="no leader accepted"):
            GroupMember.connect("sim", nowhere, {"ranks": [1]}, timeout=0.2)

    def test_finished_member_contributes_nothing(self, leader):
        member = self._join(leader)
        closing = threading.Thread(target=member.close, args=(5.0,), daemon=True)
        closing.start()
        assert leader.gather(0) == []
        leader.close(5.0)
        closing.join(timeout=10)
        assert not closing.is_alive()

    def test_part_of_skipped_step_is_discarded(self, leader):
        member = self._join(leader)

        def two_steps():
            return [member.submit(step, encode_part(_part(step, 1)))[0] for step in (0, 1)]

        with ThreadPoolExecutor(1) as pool:
            pending = pool.submit(two_steps)
            parts = leader.gather(1)
            assert [p.announcement.step_index for p in parts] == [1]
            leader.reply(parts, {"outcome": "written"})
            heads = pending.result(timeout=5)
            closing = pool.submit(leader.close, 5.0)
            member.close(5.0)
            closing.result(timeout=10)
        assert [h["outcome"] for h in heads] == [DISCARDED, "written"]

    def test_close_discards_pending_parts(self, leader):
        member = self._join(leader)
        with ThreadPoolExecutor(2) as pool:
            pending = pool.submit(member.submit, 0, encode_part(_part(0, 1)))
            _wait_for(lambda: any(m.parts for m in leader._members))
            closing = pool.submit(leader.close, 5.0)
            head, _ = pending.result(timeout=5)
            member.close(5.0)
            closing.result(timeout=10)
        assert head["outcome"] == DISCARDED

    def test_release_reaches_member(self, leader):
        released = []
        member = self._join(leader, on_release=released.append)
        leader.broadcast(MessageKind.RELEASE, {"step": 4})
        _wait_for(lambda: released == [4])
        with ThreadPoolExecutor(1) as pool:
            closing = pool.submit(leader.close, 5.0)
            member.close(5.0)
            closing.result(timeout=10)

    def test_on_join_sees_the_hello(self):
        hellos = []
        leader = GroupLeader("sim", {1}, join_timeout=5.0, on_join=hellos.append)
        leader.listen("127.0.0.1", (0, 0))
        member = GroupMember.connect(
            "sim", lambda: leader.endpoint, {"ranks": [1], "extra": "x"}, timeout=5.0
        )
        assert hellos == [{"ranks": [1], "extra": "x"}]
        with ThreadPoolExecutor(1) as pool:
            closing = pool.submit(leader.close, 5.0)
            member.close(5.0)
            closing.result(timeout=10)
