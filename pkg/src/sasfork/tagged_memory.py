"""Physical frame store with per-granule validity tags.

Each :class:`TaggedFrame` is one page of raw bytes plus one tag bit per
16-byte granule.  The tag discipline is the heart of reference tracking:

* a granule's tag is set only by a whole-granule capability store of a
  tagged capability;
* any byte-level store overlapping a granule clears its tag, so plain
  data can never be mistaken for a reference;
* integer loads never observe tags.

Capability values do not fit losslessly in 16 bytes, so the frame table
keeps a side table of exact capability values keyed by a handle embedded
in the granule bytes (first 8 bytes: the cursor, so integer reads of a
pointer see its address; last 8: the handle).  This encoding is internal
to the simulator and carries no stability promise.

:meth:`FrameTable.scan_and_relocate` is the relocation primitive used on
freshly copied child pages: it walks the tagged granules only and
rewrites every capability that the parent-to-child rebase rule changes.
"""

from __future__ import annotations

from typing import Callable, Iterator

from .capability import (
    GRANULE,
    GRANULES_PER_PAGE,
    PAGE_SIZE,
    Capability,
    Perm,
    Region,
    rebase_for_child,
)
from .errors import OutOfFrame, SimInternalError


class TaggedFrame:
    """One physical page: data bytes, tag bits, and its origin region.

    ``origin`` records which reserved region the frame's contents are
    laid out for; the fork engine uses it to pick the source region of a
    relocation scan (a frame aliased through several generations of
    forks still relocates correctly).
    """

    __slots__ = ("frame_id", "data", "tags", "origin")

    def __init__(self, frame_id: int, origin: Region | None = None):
        self.frame_id = frame_id
        self.data = bytearray(PAGE_SIZE)
        self.tags = [False] * GRANULES_PER_PAGE
        self.origin = origin

    def store_bytes(self, offset: int, payload: bytes) -> None:
        """Write raw bytes; tags of every overlapped granule are cleared."""
        if offset < 0 or offset + len(payload) > PAGE_SIZE:
            raise OutOfFrame(f"store of {len(payload)} bytes at {offset} exceeds page")
        if not payload:
            return
        self.data[offset : offset + len(payload)] = payload
        first = offset // GRANULE
        last = (offset + len(payload) - 1) // GRANULE
        for granule in range(first, last + 1):
            self.tags[granule] = False

    def load_value(self, offset: int, width: int) -> int:
        """Little-endian unsigned integer load; never returns a tag."""
        if offset < 0 or width < 0 or offset + width > PAGE_SIZE:
            raise OutOfFrame(f"load of {width} bytes at {offset} exceeds page")
        return int.from_bytes(self.data[offset : offset + width], "little")

    def tagged_granules(self) -> Iterator[int]:
        for granule, tag in enumerate(self.tags):
            if tag:
                yield granule

    def has_tags(self) -> bool:
        return any(self.tags)


class FrameTable:
    """Allocator and refcount bookkeeping for tagged frames.

    ``refcount(f)`` equals the number of page-table entries mapping
    ``f``; a frame whose count drops to zero is freed.  Frame ids are
    never reused within a run.
    """

    def __init__(self) -> None:
        self._frames: dict[int, TaggedFrame] = {}
        self._refcounts: dict[int, int] = {}
        self._next_id = 1
        self._cap_values: dict[int, Capability] = {}
        self._next_handle = 1

    def allocate(self, origin: Region | None = None) -> TaggedFrame:
        frame = TaggedFrame(self._next_id, origin)
        self._next_id += 1
        self._frames[frame.frame_id] = frame
        self._refcounts[frame.frame_id] = 0
        return frame

    def get(self, frame_id: int) -> TaggedFrame:
        try:
            return self._frames[frame_id]
        except KeyError:
            raise SimInternalError(f"frame {frame_id} does not exist") from None

    def exists(self, frame_id: int) -> bool:
        return frame_id in self._frames

    def refcount(self, frame_id: int) -> int:
        return self._refcounts.get(frame_id, 0)

    def incref(self, frame_id: int) -> int:
        self.get(frame_id)
        self._refcounts[frame_id] += 1
        return self._refcounts[frame_id]

    def decref(self, frame_id: int) -> int:
        count = self._refcounts.get(frame_id)
        if count is None or count <= 0:
            raise SimInternalError(f"refcount underflow on frame {frame_id}")
        count -= 1
        if count == 0:
            del self._frames[frame_id]
            del self._refcounts[frame_id]
        else:
            self._refcounts[frame_id] = count
        return count

    def clone(self, frame_id: int, origin: Region | None = None) -> TaggedFrame:
        """Copy bytes and tag bits into a fresh frame."""
        src = self.get(frame_id)
        out = self.allocate(origin if origin is not None else src.origin)
        out.data[:] = src.data
        out.tags[:] = src.tags
        return out

    @property
    def live_frames(self) -> dict[int, TaggedFrame]:
        return dict(self._frames)

    def total_bytes(self) -> int:
        return len(self._frames) * PAGE_SIZE

    # -- capability granule encoding ------------------------------------

    def store_capability(self, frame: TaggedFrame, granule: int, cap: Capability) -> None:
        """Store a capability into a granule; the tag follows ``cap.tag``."""
        if not 0 <= granule < GRANULES_PER_PAGE:
            raise OutOfFrame(f"granule index {granule} out of range")
        handle = self._next_handle
        self._next_handle += 1
        self._cap_values[handle] = cap
        offset = granule * GRANULE
        encoded = (cap.cursor % (1 << 64)).to_bytes(8, "little") + handle.to_bytes(
            8, "little"
        )
        frame.data[offset : offset + GRANULE] = encoded
        frame.tags[granule] = cap.tag

    def load_capability(self, frame: TaggedFrame, granule: int) -> Capability:
        """Load the capability stored in a granule.

        If the granule still holds an intact capability encoding, the
        exact stored value comes back with the granule's current tag bit.
        Bytes scribbled over by plain stores decode to a degenerate
        untagged capability whose dereference will tag-fault.
        """
        if not 0 <= granule < GRANULES_PER_PAGE:
            raise OutOfFrame(f"granule index {granule} out of range")
        offset = granule * GRANULE
        raw = frame.data[offset : offset + GRANULE]
        cursor = int.from_bytes(raw[:8], "little")
        handle = int.from_bytes(raw[8:], "little")
        cap = self._cap_values.get(handle)
        if cap is not None and cap.cursor % (1 << 64) == cursor:
            return Capability(
                base=cap.base,
                length=cap.length,
                cursor=cap.cursor,
                perms=cap.perms,
                otype=cap.otype,
                tag=frame.tags[granule],
            )
        return Capability(base=cursor, length=0, cursor=cursor, perms=Perm(0), tag=False)

    def scan_and_relocate(
        self,
        frame: TaggedFrame,
        parent: Region,
        child: Region,
        on_invalidate: Callable[[int, Capability], None] | None = None,
    ) -> int:
        """Rewrite every tagged granule the rebase rule would change.

        Walks the page in 16-byte granules, skipping untagged ones, and
        replaces each capability whose rebased value differs from the
        stored one.  Capabilities invalidated by the rebase (targets in
        neither region) are reported through ``on_invalidate``.  Returns
        the number of granules rewritten; a second scan returns 0.
        """
        rewritten = 0
        for granule in frame.tagged_granules():
            cap = self.load_capability(frame, granule)
            rebased = rebase_for_child(cap, parent, child)
            if rebased == cap:
                continue
            self.store_capability(frame, granule, rebased)
            rewritten += 1
            if not rebased.tag and on_invalidate is not None:
                on_invalidate(granule, cap)
        return rewritten
