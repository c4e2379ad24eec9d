"""Acceptance criteria, one test per criterion, each printing PASS/FAIL.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the line per
criterion.  Expected values here are either spec-level constants, frozen
outputs of the independent oracles defined below, or POSIX definitions.
"""

import random
import time
from contextlib import contextmanager
from fractions import Fraction

import pytest

from sasfork.address_space import AccessKind, FaultError, FaultKind
from sasfork.capability import (
    DATA_PERMS,
    GRANULE,
    GRANULES_PER_PAGE,
    PAGE_SIZE,
    Capability,
)
from sasfork.errors import BoundsWiden
from sasfork.fork_engine import CopyCause
from sasfork.kernel import ProbeOutcome
from sasfork.process import KERNEL_PID
from sasfork.system import System
from sasfork.workload import generate, print_script, run
from sasfork.workload.script import (
    Alloc,
    Deref,
    Exit,
    Fork,
    LoadInt,
    LoadRef,
    StoreInt,
    StoreRef,
)


@contextmanager
def criterion(number, name):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number:2d} ({name}): FAIL")
        raise
    print(f"ACCEPTANCE {number:2d} ({name}): PASS")


# -- independent replay oracle -----------------------------------------------------


def replay_child_page_accesses(script):
    """Brute-force replay: which heap pages does the child touch, and how.

    Re-derives allocation addresses with pure bump-allocator arithmetic
    (16-byte rounding) and walks the statements, entirely independent of
    the page-table machinery.  Returns (reads, writes, cap_loads) as
    sets of heap page indices.
    """
    allocations: dict[str, int] = {}
    cursor = 0
    ref_targets: dict[tuple[str, int], tuple[str, int]] = {}
    fork_body = None

    def note_alloc(stmt):
        nonlocal cursor
        allocations[stmt.name] = cursor
        cursor += (stmt.size + GRANULE - 1) // GRANULE * GRANULE

    for stmt in script.body:
        if isinstance(stmt, Alloc):
            note_alloc(stmt)
        elif isinstance(stmt, StoreRef):
            ref_targets[(stmt.name, stmt.offset)] = (stmt.target, stmt.target_offset)
        elif isinstance(stmt, Fork) and fork_body is None:
            fork_body = stmt.body

    def page(name, offset):
        return (allocations[name] + offset) // PAGE_SIZE

    reads, writes, cap_loads = set(), set(), set()
    last_ref = None
    for stmt in fork_body or ():
        if isinstance(stmt, Alloc):
            note_alloc(stmt)
        elif isinstance(stmt, LoadRef):
            cap_loads.add(page(stmt.name, stmt.offset))
            last_ref = ref_targets.get((stmt.name, stmt.offset))
        elif isinstance(stmt, Deref) and last_ref is not None:
            target, target_offset = last_ref
            reads.add(page(target, target_offset + stmt.offset))
        elif isinstance(stmt, LoadInt):
            reads.add(page(stmt.name, stmt.offset))
        elif isinstance(stmt, (StoreInt,)):
            writes.add(page(stmt.name, stmt.offset))
        elif isinstance(stmt, StoreRef):
            writes.add(page(stmt.name, stmt.offset))
        elif isinstance(stmt, Exit):
            break
    return reads, writes, cap_loads


def expected_child_copies(script):
    """Per-strategy (eager, lazy-by-cause) counts from the replay oracle."""
    spec = script.layout_spec()
    reads, writes, cap_loads = replay_child_page_accesses(script)
    eager_lazy_set = spec.got_pages + spec.alloc_meta_pages
    return {
        "full": {"eager": spec.total_pages, "lazy": {}},
        "coa": {
            "eager": eager_lazy_set,
            "lazy": {CopyCause.ACCESS_FAULT: len(reads | writes | cap_loads)},
        },
        "copa": {
            "eager": eager_lazy_set,
            "lazy": {
                CopyCause.CAP_LOAD_FAULT: len(cap_loads),
                CopyCause.WRITE_FAULT: len(writes - cap_loads),
            },
        },
    }


def child_row(result):
    rows = [r for r in result.report.rows if r.pid == 2]
    assert len(rows) == 1
    return rows[0]


# -- criteria ------------------------------------------------------------------------


def test_criterion_1_redis_analog_strategy_ordering():
    with criterion(1, "snapshot-analog strategy ordering"):
        start = time.monotonic()
        script = generate(pages=1024, ref_density=0.0625, child_read_frac=1.0, seed=1)
        assert script.layout == {"heap": 1024 + 64 + 4}
        expected = expected_child_copies(script)
        # Frozen oracle outputs for this exact script.
        assert expected["copa"]["lazy"] == {
            CopyCause.CAP_LOAD_FAULT: 64,
            CopyCause.WRITE_FAULT: 4,
        }
        assert expected["coa"]["lazy"] == {CopyCause.ACCESS_FAULT: 1092}
        assert expected["full"]["eager"] == 1098

        totals = {}
        for strategy in ("full", "coa", "copa"):
            result = run(script, strategy, "fault")
            row = child_row(result)
            want = expected[strategy]
            assert row.eager_pages_copied == want["eager"], strategy
            lazy = {c: n for c, n in row.lazy_pages_copied.items() if n}
            assert lazy == {c: n for c, n in want["lazy"].items() if n}, strategy
            totals[strategy] = row.copies_total
        assert totals["copa"] < totals["coa"] < totals["full"]
        assert time.monotonic() - start < 10.0


def test_criterion_2_eager_copy_constancy():
    with criterion(2, "eager copies independent of heap size"):
        start = time.monotonic()
        eager_counts = set()
        for heap_pages in (16, 256, 4096):
            text = (
                f"layout heap={heap_pages}\n"
                "alloc a 4096\n"
                "store_ref a+0 a+64\n"
                "fork {\nexit 0\n}\n"
            )
            result = run(text, "copa", "fault")
            eager_counts.add(child_row(result).eager_pages_copied)
        assert eager_counts == {2}  # GOT + allocator metadata, nothing else
        assert time.monotonic() - start < 5.0


def corpus(seeds=range(100)):
    for seed in seeds:
        rng = random.Random(seed)
        yield print_script(
            generate(
                pages=rng.randrange(4, 13),
                ref_density=rng.choice([0.0, 0.2, 0.34, 0.5]),
                child_read_frac=rng.choice([0.0, 0.5, 1.0]),
                seed=seed,
            )
        )


def test_criterion_3_strategy_semantic_equivalence():
    with criterion(3, "trace equivalence across full/coa/copa"):
        start = time.monotonic()
        for text in corpus():
            hashes = {
                run(text, strategy, "fault").trace.value_hash()
                for strategy in ("full", "coa", "copa")
            }
            assert len(hashes) == 1, text
        assert time.monotonic() - start < 60.0


def test_criterion_4_relocation_completeness_and_audit():
    with criterion(4, "relocation completeness + clean audits"):
        # Per-copy completeness is enforced as a hard in-engine check on
        # every child-side copy (a violation raises); re-verify here by
        # sweeping the copied frames right after the events, plus run
        # the full auditor at every step over part of the corpus.
        for index, text in enumerate(corpus()):
            audit_this_one = index % 10 == 0
            for strategy in ("full", "coa", "copa"):
                result = run(text, strategy, "fault", audit=audit_this_one or None)
                system = result.system
                for event in system.fork_engine.events:
                    entry = system.address_space.entry_at(event.page_va)
                    if entry is None:  # the page was reaped with its process
                        continue
                    frame = system.frames.get(entry.frame_id)
                    region = frame.origin
                    for granule in frame.tagged_granules():
                        cap = system.frames.load_capability(frame, granule)
                        assert region.contains_range(cap.base, cap.top) or (
                            system.gateway.is_entry_capability(cap)
                        )
                if audit_this_one:
                    assert result.audit is not None and result.audit.clean, text


STALE_DEMO = """
alloc a 4096
alloc b 4096
store_int b+0 31337
store_ref a+0 b+0
fork {
  load_ref a+0
  deref
  exit 0
}
"""


def test_criterion_5_stale_reference_demonstration():
    with criterion(5, "unsafe CoW stale reference is flagged"):
        unsafe = run(STALE_DEMO, "unsafe-cow", "fault")
        assert unsafe.audit is not None and not unsafe.audit.clean
        parent_region = unsafe.system.process(1).region
        child_violations = [
            v
            for v in unsafe.audit.violations
            if v.pid == 2 and parent_region.contains_range(v.cap.base, v.cap.top)
        ]
        assert child_violations, unsafe.audit.to_text()

        safe = run(STALE_DEMO, "copa", "fault", audit=True)
        assert safe.audit is not None and safe.audit.clean


def test_criterion_6_monotonicity_fuzz():
    with criterion(6, "10k derive/set_cursor chains stay monotone"):
        start = time.monotonic()
        rng = random.Random(20240817)
        for _ in range(10_000):
            root = Capability(
                base=0x10_0000, length=0x8000, cursor=0x10_0000, perms=DATA_PERMS
            )
            current = root
            for _ in range(rng.randrange(2, 7)):
                roll = rng.random()
                if roll < 0.45:
                    lo = rng.randrange(current.base, current.top + 1)
                    hi = rng.randrange(lo, current.top + 1)
                    current = current.derive(lo, hi - lo)
                elif roll < 0.7:
                    current = current.with_cursor(rng.randrange(0, 0x40_0000))
                else:
                    # Every widening attempt must error.
                    with pytest.raises(BoundsWiden):
                        current.derive(current.base - 16, current.length + 64)
            if current.tag:
                assert current.base >= root.base and current.top <= root.top
                assert not (current.perms & ~root.perms)
        assert time.monotonic() - start < 5.0


def test_criterion_7_tag_clearing_property():
    with criterion(7, "byte stores clear tags; stale loads tag-fault"):
        rng = random.Random(7)
        system = System("copa", "fault")
        proc = system.create_initial_process()
        heap = proc.layout.heap

        def heap_cap(offset):
            return Capability(
                base=heap.base, length=heap.size, cursor=heap.base + offset,
                perms=DATA_PERMS,
            )

        for _ in range(300):
            granule = rng.randrange(GRANULES_PER_PAGE)
            target = heap_cap(16 * rng.randrange(64))
            system.access(proc.pid, heap_cap(granule * GRANULE), AccessKind.CAP_STORE, target)
            # Any byte store overlapping the granule clears its tag.
            width = rng.randrange(1, 24)
            low = max(0, granule * GRANULE - width + 1)
            high = min(heap.size - width, (granule + 1) * GRANULE - 1)
            offset = rng.randrange(low, high + 1)
            system.access(
                proc.pid, heap_cap(offset), AccessKind.WRITE, bytes(rng.randbytes(width))
            )
            loaded = system.access(
                proc.pid, heap_cap(granule * GRANULE), AccessKind.CAP_LOAD
            )
            assert not loaded.tag
            with pytest.raises(FaultError) as err:
                system.access(proc.pid, loaded, AccessKind.READ_INT)
            assert err.value.fault.kind is FaultKind.CAP_TAG


def test_criterion_8_prs_conservation():
    with criterion(8, "proportional resident set conservation"):
        # The per-step debug verifier asserts conservation after every
        # statement of these corpus runs.
        for text in corpus(range(0, 30, 3)):
            run(text, "copa", "fault", debug=True)
        # Shared-frame halving, stated exactly:
        system = System("copa", "fault")
        parent = system.create_initial_process()
        child_pid = system.fork_engine.fork(parent.pid)
        shared_k = 8
        for pid in (parent.pid, child_pid):
            prs = system.metrics.prs_bytes(pid)
            assert prs - 2 * PAGE_SIZE == shared_k * Fraction(PAGE_SIZE, 2)
        total = sum(
            (system.metrics.prs_bytes(pid) for pid in [0, parent.pid, child_pid]),
            Fraction(0),
        )
        assert total == system.frames.total_bytes()


POSIX_DEMO = """
alloc buf 4096
store_int buf+0 72
open shared
fork nowait {
  expect 0
  close shared
  exit 4
}
expect 2
wait
expect 4
write shared buf+0 8
expect 8
"""


def test_criterion_9_posix_surface():
    with criterion(9, "fork/getpid/fd/wait POSIX semantics"):
        result = run(POSIX_DEMO, "copa", "fault")
        assert result.ok, result.trace.to_text()
        fork_results = {
            e.pid: e.result for e in result.trace.events if e.stmt.startswith("fork")
        }
        assert fork_results == {1: "2", 2: "0"}
        wait_event = next(e for e in result.trace.events if e.stmt == "wait")
        assert wait_event.result == "4"
        # getpid values are distinct and kernel-owned.
        system = System("copa", "fault")
        first = system.create_initial_process()
        second = system.process(system.fork_engine.fork(first.pid))
        getpid = lambda p: system.gateway.syscall(  # noqa: E731
            p.pid, p.entry_caps["getpid"], "getpid", {}
        )
        assert getpid(first) != getpid(second)


def test_criterion_10_toctou_parameterized_isolation():
    with criterion(10, "TOCTTOU window per isolation level"):
        outcomes = {}
        for isolation in ("full", "fault", "none"):
            system = System("copa", isolation)
            proc = system.create_initial_process()
            heap = proc.layout.heap
            buf = Capability(
                base=heap.base, length=GRANULE, cursor=heap.base, perms=DATA_PERMS
            )
            system.access(proc.pid, buf, AccessKind.WRITE, b"A" * GRANULE)
            mutate = lambda s=system, b=buf: s.poke_bytes(b.cursor, b"B" * GRANULE)  # noqa: E731
            outcomes[isolation] = system.gateway.toctou_probe(proc.pid, buf, mutate)
        assert outcomes == {
            "full": ProbeOutcome.PROTECTED,
            "fault": ProbeOutcome.VULNERABLE,
            "none": ProbeOutcome.VULNERABLE,
        }


def test_criterion_11_privilege_denial():
    with criterion(11, "privileged ops fault outside the kernel"):
        result = run(
            "alloc a 64\nfork {\npriv\nexit 0\n}\npriv\n", "copa", "fault"
        )
        priv_results = [e.result for e in result.trace.events if e.stmt == "priv"]
        assert priv_results == ["PrivilegeFault", "PrivilegeFault"]
        system = System("copa", "fault")
        system.create_initial_process()
        assert system.gateway.attempt_privileged(KERNEL_PID) == "ok"
