"""Resident-set accounting, determinism, and strategy comparison."""

from fractions import Fraction

import pytest

from sasfork.address_space import AccessKind
from sasfork.capability import DATA_PERMS, PAGE_SIZE, Capability
from sasfork.errors import MismatchedScripts, UnknownPid
from sasfork.system import System
from sasfork.metrics import compare
from sasfork.workload import generate, print_script, run


def heap_cap(proc, offset=0):
    heap = proc.layout.heap
    return Capability(
        base=heap.base, length=heap.size, cursor=heap.base + offset, perms=DATA_PERMS
    )


class TestProportionalResidentSet:
    def test_ten_private_pages(self):
        system = System("copa", "fault")
        proc = system.create_initial_process()
        assert system.metrics.prs_bytes(proc.pid) == 10 * PAGE_SIZE == 40960

    def test_refcount_two_halves_shared_pages(self):
        system = System("copa", "fault")
        parent = system.create_initial_process()
        child_pid = system.fork_engine.fork(parent.pid)
        # Each side: 2 private pages (GOT + allocator metadata for the
        # child; the parent's own copies stay private) plus 8 shared.
        expected = 2 * PAGE_SIZE + 8 * Fraction(PAGE_SIZE, 2)
        assert system.metrics.prs_bytes(child_pid) == expected == 24576
        assert system.metrics.prs_bytes(parent.pid) == expected

    def test_after_child_copies_three_shared_pages(self):
        system = System("copa", "fault")
        parent = system.create_initial_process()
        child = system.process(system.fork_engine.fork(parent.pid))
        for page in range(3):
            system.access(
                child.pid,
                heap_cap(child, page * PAGE_SIZE),
                AccessKind.WRITE,
                b"\x01" * 8,
            )
        # Sweep oracle: 5 private (2 eager + 3 copied) + 5 shared halves.
        expected = 5 * PAGE_SIZE + 5 * Fraction(PAGE_SIZE, 2)
        assert system.metrics.prs_bytes(child.pid) == expected

    def test_conservation_across_all_pids(self):
        system = System("copa", "fault", debug=True)
        parent = system.create_initial_process()
        child = system.process(system.fork_engine.fork(parent.pid))
        system.access(child.pid, heap_cap(child, 0), AccessKind.WRITE, b"\x01" * 8)
        total = sum(
            (system.metrics.prs_bytes(pid) for pid in list(system.processes) + [0]),
            Fraction(0),
        )
        assert total == system.frames.total_bytes()
        system.verify_invariants()

    def test_snapshot_rejects_unknown_pid(self):
        system = System("copa", "fault")
        with pytest.raises(UnknownPid):
            system.metrics.snapshot(42)


SCRIPT = """
alloc a 8192
store_int a+0 1
store_ref a+16 a+4096
fork {
  load_ref a+16
  deref
  store_int a+4096 9
  exit 0
}
load_int a+4096
"""


class TestReports:
    def test_identical_runs_give_identical_reports(self):
        first = run(SCRIPT, "copa", "fault")
        second = run(SCRIPT, "copa", "fault")
        assert first.report == second.report
        assert first.report.to_text() == second.report.to_text()
        assert first.report.to_csv() == second.report.to_csv()
        assert first.trace.value_hash() == second.trace.value_hash()

    def test_text_and_csv_formats_carry_the_documented_fields(self):
        result = run(SCRIPT, "copa", "fault")
        text = result.report.to_text()
        assert "strategy=copa" in text and "prs=" in text and "fork_cost=" in text
        header = result.report.to_csv().splitlines()[0]
        assert header.startswith("strategy,isolation,pid,eager_pages_copied")


class TestCompare:
    def test_redis_analog_ordering(self):
        script = print_script(generate(pages=24, ref_density=0.125, child_read_frac=1.0, seed=3))
        runs = [run(script, s, "fault") for s in ("full", "coa", "copa")]
        comparison = compare(runs)
        assert comparison.dominance_ok
        by_name = {s.strategy.value: s for s in comparison.summaries}
        assert (
            by_name["copa"].total_copies
            < by_name["coa"].total_copies
            < by_name["full"].total_copies
        )
        assert (
            by_name["copa"].final_prs_total
            < by_name["coa"].final_prs_total
            < by_name["full"].final_prs_total
        )

    def test_mismatched_scripts_are_detected(self):
        a = run(SCRIPT, "copa", "fault")
        other = SCRIPT.replace("store_int a+0 1", "store_int a+0 2")
        b = run(other, "coa", "fault")
        with pytest.raises(MismatchedScripts):
            compare([a, b])

    def test_dominance_violation_is_flagged_not_hidden(self):
        # Same strategy twice: trivially equal, every verdict holds.
        runs = [run(SCRIPT, "copa", "fault"), run(SCRIPT, "copa", "fault")]
        comparison = compare(runs)
        assert comparison.dominance_ok
