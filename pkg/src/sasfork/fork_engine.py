"""Fork under four copy strategies, plus lazy-copy fault resolution.

The strategies differ only in *when* pages move, never in what a program
observes:

* ``FULL_COPY``: every page of the parent is copied and relocated at
  fork time.
* ``COA`` (copy-on-access): child pages alias the parent frames but are
  inaccessible; the first child access of any kind copies and relocates.
* ``COPA`` (copy-on-pointer-access): child pages are readable; only
  writes (either side) and child capability loads trigger the copy, so
  plain data reads stay shared.
* ``UNSAFE_COW``: classic copy-on-write.  Child capability loads from
  shared pages do not fault, so the child can observe stale references
  into the parent's region.  It exists to demonstrate that hazard and is
  only constructible with the audit armed.

Under every lazy strategy the GOT and allocator-metadata pages are
copied and relocated eagerly at fork, so symbol and heap bookkeeping is
coherent in the child before it runs.

The lazy copy itself follows three steps: take a fresh frame and remap
the faulting page to it, copy bytes and tag bits, then scan the copy in
16-byte granules and rebase every capability that still targets the
frame's origin region.  Copies made for the region that already owns the
frame's contents (the parent side) skip the scan.  When a shared frame's
refcount drops to one, the surviving mapping is promoted back to
private; if the survivor is a forked child the frame is relocated in
place first, so promotion can never expose stale references.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .address_space import Fault, FaultKind, PageState, PageTableEntry
from .capability import (
    GRANULES_PER_PAGE,
    PAGE_SIZE,
    Capability,
    Region,
    rebase_for_child,
)
from .errors import (
    NoChildren,
    ProcessNotRunning,
    SimInternalError,
    UnresolvableFault,
)
from .process import MicroProcess, Status

if TYPE_CHECKING:
    from .system import System


class ForkStrategy(enum.Enum):
    FULL_COPY = "full"
    COA = "coa"
    COPA = "copa"
    UNSAFE_COW = "unsafe-cow"


class CopyCause(enum.Enum):
    EAGER_GOT = "EagerGot"
    EAGER_ALLOC_META = "EagerAllocMeta"
    EAGER_FULL = "EagerFull"
    WRITE_FAULT = "WriteFault"
    ACCESS_FAULT = "AccessFault"
    CAP_LOAD_FAULT = "CapLoadFault"


EAGER_CAUSES = frozenset(
    {CopyCause.EAGER_GOT, CopyCause.EAGER_ALLOC_META, CopyCause.EAGER_FULL}
)

_FAULT_TO_CAUSE = {
    FaultKind.PAGE_WRITE: CopyCause.WRITE_FAULT,
    FaultKind.PAGE_ACCESS: CopyCause.ACCESS_FAULT,
    FaultKind.CAP_LOAD: CopyCause.CAP_LOAD_FAULT,
}

#: Child-side page state installed per strategy when a page is shared.
_CHILD_SHARED_STATE = {
    ForkStrategy.COA: (PageState.SHARED_COA, False),
    ForkStrategy.COPA: (PageState.SHARED_COPA, False),
    ForkStrategy.UNSAFE_COW: (PageState.SHARED_COW, True),
}

#: Synthetic fork-cost weights: page copies dominate, PTE writes and
#: granule scans are unit cost.  Absolute time is deliberately not
#: modeled.
COST_PER_PAGE_COPY = 512
COST_PER_PTE_WRITE = 1
COST_PER_GRANULE_SCANNED = 1


@dataclass(frozen=True)
class CopyEvent:
    """One page copy: who triggered it, for which page, and why."""

    pid: int
    page_va: int
    cause: CopyCause
    relocations: int

    @property
    def eager(self) -> bool:
        return self.cause in EAGER_CAUSES


class ForkEngine:
    """Owns fork, fault resolution, exit and wait for one system."""

    def __init__(self, system: "System"):
        self._sys = system
        self.events: list[CopyEvent] = []
        self._exit_counter = 0

    # -- fork --------------------------------------------------------------

    def fork(self, parent_pid: int) -> int:
        """Duplicate a process; returns the child PID (the child sees 0).

        Reserves an equal-sized child region, installs page table
        entries per the strategy, eagerly copies and relocates the GOT
        and allocator-metadata pages, duplicates the descriptor table,
        and rebases every tagged capability in the parent's register
        state (including the PCC) into the child's region.
        """
        sys = self._sys
        parent = sys.process(parent_pid)
        if not parent.running:
            raise ProcessNotRunning(f"pid {parent_pid} is not running")
        strategy = sys.strategy

        child_region = sys.address_space.reserve_region(parent.region.size)
        child_pid = sys.allocate_pid()
        child_layout = parent.layout.rebased(child_region)

        ptes_written = 0
        eager_pages = 0
        granules_scanned = 0

        for offset in range(0, parent.region.size, PAGE_SIZE):
            parent_va = parent.region.base + offset
            child_va = child_region.base + offset
            entry = sys.address_space.entry_at(parent_va)
            if entry is None:
                raise SimInternalError(f"parent page {parent_va:#x} unmapped at fork")
            sub = parent.layout.classify(parent_va)
            eager = strategy is ForkStrategy.FULL_COPY or sub in ("got", "alloc_meta")
            if eager:
                if strategy is ForkStrategy.FULL_COPY:
                    cause = CopyCause.EAGER_FULL
                elif sub == "got":
                    cause = CopyCause.EAGER_GOT
                else:
                    cause = CopyCause.EAGER_ALLOC_META
                self._copy_into(
                    child_pid,
                    child_va,
                    entry.frame_id,
                    child_region,
                    owner_pid=child_pid,
                    writable=child_layout.page_writable(child_va),
                    cause=cause,
                )
                eager_pages += 1
                granules_scanned += GRANULES_PER_PAGE
                ptes_written += 1
            else:
                state, cap_load = _CHILD_SHARED_STATE[strategy]
                sys.address_space.map(
                    child_va,
                    PageTableEntry(
                        frame_id=entry.frame_id,
                        state=state,
                        writable=False,
                        cap_load_allowed=cap_load,
                        owner_pid=child_pid,
                    ),
                )
                ptes_written += 1
                if entry.state is PageState.PRIVATE:
                    # Parent side of any lazy strategy: readable and
                    # capability-loadable, but write-protected.
                    entry.state = PageState.SHARED_COW
                    entry.writable = False
                    entry.cap_load_allowed = True
                    ptes_written += 1

        registers, relocated = self._rebase_registers(parent, child_region)
        child = MicroProcess(
            pid=child_pid,
            region=child_region,
            layout=child_layout,
            registers=registers,
            entry_caps=dict(sys.gateway.entries),
            fd_table=sys.files.dup_fd_table(parent),
            symbols=self._rebase_symbols(parent.symbols, parent.region, child_region),
            loaded_ref=self._rebase_one(parent.loaded_ref, parent, child_region),
            parent_pid=parent_pid,
        )
        sys.add_process(child)
        sys.set_heap_break(child_pid, sys.heap_break(parent_pid))
        sys.metrics.record_register_relocations(child_pid, relocated)
        sys.metrics.record_fork_cost(
            parent_pid,
            COST_PER_PAGE_COPY * eager_pages
            + COST_PER_PTE_WRITE * ptes_written
            + COST_PER_GRANULE_SCANNED * granules_scanned,
        )
        return child_pid

    def _rebase_registers(
        self, parent: MicroProcess, child_region: Region
    ) -> tuple[dict, int]:
        out: dict = {}
        relocated = 0
        for name, value in parent.registers.items():
            if isinstance(value, Capability):
                rebased = rebase_for_child(value, parent.region, child_region)
                if rebased != value:
                    relocated += 1
                if value.tag and not rebased.tag:
                    self._sys.log_invalidation(
                        parent.pid, f"register:{name}", value, "fork register relocation"
                    )
                out[name] = rebased
            else:
                out[name] = value
        return out, relocated

    def _rebase_symbols(
        self, symbols: dict[str, Capability], parent_region: Region, child_region: Region
    ) -> dict[str, Capability]:
        return {
            name: rebase_for_child(cap, parent_region, child_region)
            for name, cap in symbols.items()
        }

    def _rebase_one(
        self, cap: Capability | None, parent: MicroProcess, child_region: Region
    ) -> Capability | None:
        if cap is None:
            return None
        return rebase_for_child(cap, parent.region, child_region)

    # -- lazy copies ---------------------------------------------------------

    def resolve_fault(self, fault: Fault) -> CopyEvent:
        """Copy (and, child-side, relocate) the faulting shared page.

        Only page-level faults on shared pages resolve; anything else is
        :class:`UnresolvableFault`.  The entry at the faulting address is
        remapped to the fresh frame; the old frame's refcount drops and
        a sole survivor is promoted back to private.
        """
        cause = _FAULT_TO_CAUSE.get(fault.kind)
        if cause is None:
            raise UnresolvableFault(f"{fault.kind.value} cannot be resolved by copying")
        sys = self._sys
        entry = sys.address_space.entry_at(fault.page_va)
        if entry is None or not entry.shared:
            raise UnresolvableFault(
                f"page {fault.page_va:#x} is not in a shared state"
            )
        owner = sys.process(entry.owner_pid)
        old_frame_id = entry.frame_id
        if sys.frames.refcount(old_frame_id) < 2:
            # Promotion reverts sole-owner pages to private, so a shared
            # entry always aliases a multiply-referenced frame.
            raise SimInternalError(
                f"shared page {fault.page_va:#x} on a sole-owner frame"
            )
        sys.address_space.unmap(fault.page_va)
        event = self._copy_into(
            fault.pid,
            fault.page_va,
            old_frame_id,
            owner.region,
            owner_pid=owner.pid,
            writable=owner.layout.page_writable(fault.page_va),
            cause=cause,
        )
        self._maybe_promote(old_frame_id)
        return event

    def _copy_into(
        self,
        trigger_pid: int,
        page_va: int,
        src_frame_id: int,
        dest_region: Region,
        *,
        owner_pid: int,
        writable: bool,
        cause: CopyCause,
    ) -> CopyEvent:
        """Three-step page copy: fresh frame, byte+tag copy, relocation scan.

        The scan runs only when the destination region differs from the
        frame's origin (a forked child); a copy for the origin region
        itself needs no relocation.
        """
        sys = self._sys
        src = sys.frames.get(src_frame_id)
        fresh = sys.frames.clone(src_frame_id)
        relocations = 0
        if src.origin != dest_region:
            relocations = sys.frames.scan_and_relocate(
                fresh,
                src.origin,
                dest_region,
                on_invalidate=lambda granule, cap: sys.log_invalidation(
                    trigger_pid, f"page:{page_va:#x}:granule={granule}", cap,
                    "relocation target in neither region",
                ),
            )
            sys.metrics.record_scan(trigger_pid, GRANULES_PER_PAGE, relocations)
        fresh.origin = dest_region
        sys.address_space.map(
            page_va,
            PageTableEntry(
                frame_id=fresh.frame_id,
                state=PageState.PRIVATE,
                writable=writable,
                cap_load_allowed=True,
                owner_pid=owner_pid,
            ),
        )
        event = CopyEvent(pid=trigger_pid, page_va=page_va, cause=cause, relocations=relocations)
        self.events.append(event)
        sys.metrics.record_copy(event)
        self._verify_copy_clean(fresh, dest_region)
        return event

    def _verify_copy_clean(self, frame, dest_region: Region) -> None:
        """A just-copied frame must hold no tagged out-of-region capability."""
        for granule in frame.tagged_granules():
            cap = self._sys.frames.load_capability(frame, granule)
            if cap.tag and not dest_region.contains_range(cap.base, cap.top):
                if self._sys.gateway.is_entry_capability(cap):
                    continue
                raise SimInternalError(
                    f"copied frame {frame.frame_id} granule {granule} still targets "
                    f"outside {dest_region}: {cap}"
                )

    def _maybe_promote(self, frame_id: int) -> None:
        """Sole survivor of a shared frame goes back to private access.

        If the survivor's region is not the frame's origin (a child that
        never copied this page), the frame is relocated in place before
        access is widened, so no stale capability becomes loadable.
        """
        sys = self._sys
        if sys.frames.refcount(frame_id) != 1:
            return
        pages = sys.address_space.pages_of_frame(frame_id)
        if len(pages) != 1:
            return
        entry = sys.address_space.entry_at(pages[0])
        if entry is None or not entry.shared:
            return
        owner = sys.process(entry.owner_pid)
        frame = sys.frames.get(frame_id)
        if frame.origin != owner.region:
            relocations = sys.frames.scan_and_relocate(
                frame,
                frame.origin,
                owner.region,
                on_invalidate=lambda granule, cap: sys.log_invalidation(
                    owner.pid, f"page:{pages[0]:#x}:granule={granule}", cap,
                    "promotion relocation target in neither region",
                ),
            )
            sys.metrics.record_scan(owner.pid, GRANULES_PER_PAGE, relocations)
            frame.origin = owner.region
        entry.state = PageState.PRIVATE
        entry.writable = owner.layout.page_writable(pages[0])
        entry.cap_load_allowed = True

    # -- exit / wait ----------------------------------------------------------

    def exit(self, pid: int, code: int) -> None:
        """Mark a process exited; its mappings are torn down at reap."""
        proc = self._sys.process(pid)
        if not proc.running:
            raise ProcessNotRunning(f"pid {pid} is not running")
        proc.status = Status.EXITED
        proc.exit_code = code
        proc.exit_seq = self._exit_counter
        self._exit_counter += 1
        self._sys.metrics.record_exit_prs(pid)

    def wait(self, parent_pid: int) -> tuple[int, int] | None:
        """Reap the earliest-exited child; ``None`` means "would block".

        Raises :class:`NoChildren` when the caller has no unreaped
        children at all.
        """
        children = [
            p
            for p in self._sys.processes.values()
            if p.parent_pid == parent_pid and p.status is not Status.REAPED
        ]
        if not children:
            raise NoChildren(f"pid {parent_pid} has no children to wait for")
        exited = [p for p in children if p.status is Status.EXITED]
        if not exited:
            return None
        child = min(exited, key=lambda p: p.exit_seq)
        self.reap(child)
        return child.pid, child.exit_code if child.exit_code is not None else 0

    def reap(self, proc: MicroProcess) -> None:
        """Tear down a zombie: unmap its pages and release descriptors."""
        if proc.status is not Status.EXITED:
            raise ProcessNotRunning(f"pid {proc.pid} is not a zombie")
        sys = self._sys
        for page_va in proc.region.page_addresses():
            entry = sys.address_space.entry_at(page_va)
            if entry is None or entry.owner_pid != proc.pid:
                continue
            frame_id = entry.frame_id
            sys.address_space.unmap(page_va)
            self._maybe_promote(frame_id)
        sys.files.drop_table(proc)
        proc.status = Status.REAPED
