"""Monotonic list labeling with worst-case bounded relabeling.

Maintains an ordered list of elements, each holding one fixed-width integer
tag, such that unsigned comparison of tags equals list order at every
instant -- including while relabel sweeps are only partially done.

Elements live in the leaves of a weight-balanced B-tree with branching
parameter ``a`` and leaf parameter ``k``.  Each tree level owns a fixed
slice of every tag: a node at height ``h`` stamps its children's
``4a+1``-bit labels into slice ``h-1`` of the tags below it, and leaves
assign a ``2k``-bit slice per element by averaging.  When a node
overflows it splits, its children's labels are respread instantly
(constant work), and a cooperative *tag process* rewrites the affected
element tags a few at a time, funded by one "time resource" per ancestor
per insertion.  The extra most-significant bit of each label alternates
generation so that half-rewritten slices still compare correctly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import AuditError, CapacityError, StaleHandleError


class _Front:
    """Sentinel for head-of-list insertion."""

    __slots__ = ()

    def __repr__(self):
        return "FRONT"


FRONT = _Front()


def _int_log_ceil(base: int, value: int) -> int:
    """Smallest h >= 0 with base**h >= value."""
    h = 0
    p = 1
    while p < value:
        p *= base
        h += 1
    return h


@dataclass(frozen=True)
class LabelerConfig:
    """Shape parameters for a labeler.

    ``a`` must exceed 4 and ``k`` must be positive (weight-balance
    requirements).  ``tag_bits`` is fixed for the structure's lifetime:
    ``(4a+1) * height + 2k`` where ``height`` is the tree height implied
    by ``capacity`` (minimum 1, so a near-empty structure still has a
    well-formed tag layout).
    """

    a: int = 8
    k: int = 4
    capacity: int = 1 << 20
    c_work: int = 0  # element rewrites funded per time resource; 0 = default
    auto_grow: bool = False

    def __post_init__(self):
        if self.a <= 4:
            raise ValueError("branching parameter a must exceed 4")
        if self.k <= 0:
            raise ValueError("leaf parameter k must be positive")
        if self.capacity < 1:
            raise ValueError("capacity must be at least 1")
        if self.c_work == 0:
            # Large enough that (a) a leaf split's sweep fits in one
            # resource and (b) a blocked process lending at rate 2/insert
            # can push the parent sweep across its whole domain within the
            # borrower's weight window.  Validated by the completion audit.
            object.__setattr__(self, "c_work", max(8, 2 * self.k, 2 * self.a))
        if self.c_work < 2 * self.k:
            raise ValueError("c_work must be at least 2*k")

    @property
    def height(self) -> int:
        return max(1, _int_log_ceil(self.a, -(-self.capacity // self.k)))

    @property
    def level_bits(self) -> int:
        return 4 * self.a + 1

    @property
    def leaf_bits(self) -> int:
        return 2 * self.k

    @property
    def tag_bits(self) -> int:
        return self.level_bits * self.height + self.leaf_bits


class RepHandle:
    """Stable identity of one list element; owns nothing but its tag."""

    __slots__ = ("tag", "leaf", "prev", "next", "alive", "_lab")

    def __init__(self, lab):
        self.tag = 0
        self.leaf = None
        self.prev = None
        self.next = None
        self.alive = True
        self._lab = lab

    def __repr__(self):
        return f"<rep {id(self):#x} tag={self.tag:#x}>"


class _Node:
    """Tree node; ``height`` 0 means leaf (holds elements, not children)."""

    __slots__ = (
        "parent",
        "height",
        "weight",
        "label",
        "children",
        "polarity",
        "funded",
        "first",
        "last",
        "spine",
    )

    def __init__(self, height, parent=None, spine=False):
        self.parent = parent
        self.height = height
        self.weight = 0
        self.label = 0
        self.children = [] if height > 0 else None
        self.polarity = 0  # generation bit currently carried by child labels
        self.funded = None  # tag process this node's resources feed
        self.first = None  # leaf: leftmost element
        self.last = None  # leaf: rightmost element
        self.spine = spine

    def __repr__(self):
        kind = "leaf" if self.height == 0 else f"h{self.height}"
        return f"<node {kind} w={self.weight}>"


# Tag process phases.
_P1, _P2, _P3, _DONE = 1, 2, 3, 4


class _TagProcess:
    """Incremental rewrite of element tags after a node split.

    Phase 1 stamps the right half's new label (snapshotted at the split)
    into the parent-owned slice, rightmost element first.  Phases 2 and 3
    stamp the current labels of the left/right halves' children into the
    slice below, sweeping toward the generation bit's new polarity.  For
    leaf splits, phases 2 and 3 degenerate to instant respreads of the
    per-element averaging slice.

    Work is funded by time resources routed from the owning nodes.  When
    two processes would write the same slice over the same region, the
    one that arrived second lends its resources to the first (``assist``
    / ``blocked_on``), with debts repaid or worked off at double rate per
    the collision schedule.
    """

    __slots__ = (
        "lab",
        "left",
        "right",
        "height",
        "phase",
        "phase1_value",
        "direction",
        "cursor",
        "region_nodes",
        "region_value",
        "blocked_on",
        "waiters",
        "lent",
        "assist",
        "assist_double",
        "assist_count",
        "repay",
        "boost",
        "resources",
        "units",
        "seq",
    )

    def __init__(self, lab, left, right):
        self.lab = lab
        self.left = left
        self.right = right
        self.height = left.height
        self.phase = _P1
        self.phase1_value = right.label
        self.direction = -1  # phase 1 always sweeps right-to-left
        self.cursor = None
        self.region_nodes = None
        self.region_value = 0
        self.blocked_on = None
        self.waiters = []
        self.lent = 0
        self.assist = None
        self.assist_double = False
        self.assist_count = 0
        self.repay = []
        self.boost = 0
        self.resources = 0
        self.units = 0
        self.seq = lab._proc_seq
        lab._proc_seq += 1
        self._start_phase()

    # -- phase plumbing ------------------------------------------------

    @property
    def done(self) -> bool:
        return self.phase == _DONE

    def _domain(self):
        return self.left if self.phase == _P2 else self.right

    @staticmethod
    def _edge_element(node, rightmost):
        """Extreme element of ``node``'s subtree."""
        while node.height > 0:
            node = node.children[-1 if rightmost else 0]
        return node.last if rightmost else node.first

    def _locate(self, elem):
        """(in_domain, child_of_domain) for the current phase's domain."""
        domain = self._domain()
        node = elem.leaf
        if domain.height == 0:
            return node is domain, None
        while node.height < domain.height - 1:
            node = node.parent
        return node.parent is domain, node

    def _start_phase(self):
        """Place the cursor at the current phase's starting edge."""
        domain = self._domain()
        if self.phase != _P1:
            self.direction = -1 if self.left.polarity == 1 else 1
        start = self._edge_element(domain, rightmost=self.direction < 0)
        self._place_cursor(start)

    def _advance_phase(self):
        lab = self.lab
        self.region_nodes = None
        if self.phase == _P1:
            self.phase = _P2
            if self.height == 0:
                lab._respread_leaf(self.left)
                self.phase = _P3
                lab._respread_leaf(self.right)
                self._finish()
                return
            self._start_phase()
        elif self.phase == _P2:
            self.phase = _P3
            self._release_waiters(force=False)
            if self.height == 0:
                lab._respread_leaf(self.right)
                self._finish()
                return
            self._start_phase()
        elif self.phase == _P3:
            self._finish()

    def _finish(self):
        self.phase = _DONE
        self.cursor = None
        self.region_nodes = None
        self._release_waiters(force=True)
        self.lab._active.discard(self)

    # -- cursor movement ----------------------------------------------------

    def _place_cursor(self, elem):
        """Install ``elem`` as the next element to stamp, handling domain
        exit and child-region transitions.  Membership is judged
        structurally (walk up from the element's leaf): elements inserted
        next to a stale edge snapshot may sit inside the swept position
        range while belonging outside the domain."""
        if elem is None:
            self._advance_phase()
            return
        in_domain, child = self._locate(elem)
        if not in_domain:
            self._advance_phase()
            return
        self.cursor = elem
        if self.phase == _P1 or self.height == 0:
            return
        if self.region_nodes is not None and child in self.region_nodes:
            return
        self._enter_region(child)

    def _enter_region(self, child):
        """Snapshot the child region's label; if the child's own process is
        still in phase 1 on this slice, lend resources instead of writing."""
        self.region_nodes = [child]
        self.region_value = child.label
        other = child.funded
        if other is not None and not other.done and other.phase == _P1 \
                and other.right is child and other.blocked_on is None:
            self.assist = other
            self.assist_double = other.phase1_value != child.label
            self.assist_count = 0
            self.lab.stats["collisions_assist"] += 1
        self._release_waiters(force=False)

    def region_passed(self, v):
        """Has this process's same-slice sweep moved past v's region?

        Safe to query for any direct child v of one of the owner halves.
        Used both to release waiters and to decide whether a fresh split
        below must block: on a generation round where the new labels
        compare *below* the stale ones, a child's phase 1 may not write
        until this sweep has brought its region up to the new generation.
        """
        if self.done:
            return True
        if self.phase == _P1:
            return False
        side_left = v.parent is self.left
        if self.phase == _P2 and not side_left:
            return False
        if self.phase == _P3 and side_left:
            return True
        region = self.region_nodes
        if region is None:
            return False
        if v in region:
            return False
        if self.direction < 0:
            return region[0].label < v.label
        return region[0].label > v.label

    def _release_waiters(self, force):
        if not self.waiters:
            return
        still = []
        for proc in self.waiters:
            # Released only once the sweep is past the split node's whole
            # former subtree, i.e. past both halves.
            if force or (self.region_passed(proc.left)
                         and self.region_passed(proc.right)):
                proc.blocked_on = None
                if proc.lent:
                    self.repay.append([proc, proc.lent])
            else:
                still.append(proc)
        self.waiters = still

    def note_owner_split(self, old_child, new_child):
        """Called when a node inside the current region splits; the sweep
        keeps stamping the snapshot value across both halves."""
        if self.region_nodes is not None and old_child in self.region_nodes:
            self.region_nodes.append(new_child)

    # -- sweeping ---------------------------------------------------------

    def covers_passed(self, elem, source, ancestor, below):
        """Stamp needed for a fresh insert against this process's sweep?

        ``elem`` copied its slices from the adjacent ``source`` element,
        so the copy is position-correct unless the two straddle the sweep
        cursor: only then does ``elem`` sit on the swept side holding an
        unswept value.  ``ancestor`` is the owner node on elem's root
        path, ``below`` the path node one level down.  Returns the
        (slice, value) to stamp, or None.
        """
        if self.done or self.blocked_on is not None or self.cursor is None \
                or source is None:
            return None
        if self.phase == _P1:
            if ancestor is not self.right:
                return None
            slice_h, value = self.height, self.phase1_value
        else:
            if self.height == 0 or ancestor is not self._domain():
                return None
            if self.region_nodes is not None and below in self.region_nodes:
                value = self.region_value
            else:
                value = below.label
            slice_h = self.height - 1
        cur = self.cursor
        if self.direction < 0:
            straddle = elem.tag > cur.tag and not source.tag > cur.tag
        else:
            straddle = elem.tag < cur.tag and not source.tag < cur.tag
        return (slice_h, value) if straddle else None

    def step(self) -> int:
        """One unit of work.  Returns units consumed (always 1)."""
        self.units += 1
        if self.done:
            return 1
        elem = self.cursor
        if self.phase == _P1:
            self.lab._stamp(elem, self.height, self.phase1_value)
        else:
            self.lab._stamp(elem, self.height - 1, self.region_value)
        self._place_cursor(elem.prev if self.direction < 0 else elem.next)
        return 1

    def skip_region(self):
        """Jump the sweep past the current region (its final values were
        written by the assisted process)."""
        if self.direction < 0:
            edge = self._edge_element(self.region_nodes[0], rightmost=False)
            self._place_cursor(edge.prev)
        else:
            edge = self._edge_element(self.region_nodes[-1], rightmost=True)
            self._place_cursor(edge.next)


class Labeler:
    """Ordered list with integer tags; order query = one tag comparison.

    Insertion performs O(log n) bounded work in the worst case: constant
    work per ancestor of the target leaf, including the incremental
    relabeling funded through time resources.
    """

    def __init__(self, config: LabelerConfig = None, **kwargs):
        if config is None:
            config = LabelerConfig(**kwargs)
        elif kwargs:
            raise ValueError("pass either a config or keyword fields, not both")
        self.config = config
        self._count = 0
        self._first = None
        self._last = None
        self._proc_seq = 0
        self._active = set()
        self._callbacks: list[Callable] = []
        self.step_listener: Optional[Callable] = None
        self.stats = {
            "inserts": 0,
            "rewrites_total": 0,
            "rewrites_this_insert": 0,
            "rewrites_max": 0,
            "splits": 0,
            "leaf_splits": 0,
            "respreads": 0,
            "collisions_assist": 0,
            "collisions_blocked": 0,
            "forced_drains": 0,
            "rebuilds": 0,
            "resources": 0,
        }
        self._build_spine()

    # -- construction ----------------------------------------------------

    def _build_spine(self):
        cfg = self.config
        self._root = _Node(cfg.height, spine=True)
        node = self._root
        default_label = 1 << (4 * cfg.a - 1)  # generation 0, mid range
        while node.height > 0:
            child = _Node(node.height - 1, parent=node, spine=True)
            child.label = default_label
            node.children.append(child)
            node = child
        self._spine_leaf = node

    # -- tag slice helpers -------------------------------------------------

    def _slice_off(self, h: int) -> int:
        return self.config.leaf_bits + h * self.config.level_bits

    def _slice_get(self, tag: int, h: int) -> int:
        return (tag >> self._slice_off(h)) & ((1 << self.config.level_bits) - 1)

    def _elem_label(self, tag: int) -> int:
        return tag & ((1 << self.config.leaf_bits) - 1)

    def _stamp(self, elem, h: int, value: int):
        off = self._slice_off(h)
        mask = ((1 << self.config.level_bits) - 1) << off
        old = elem.tag
        new = (old & ~mask) | (value << off)
        if new != old:
            elem.tag = new
            self._emit(elem, old, new)
            self._count_rewrite()

    def _set_elem_label(self, elem, value: int, emit=True):
        mask = (1 << self.config.leaf_bits) - 1
        old = elem.tag
        new = (old & ~mask) | value
        if new != old:
            elem.tag = new
            if emit:
                self._emit(elem, old, new)
                self._count_rewrite()

    def _count_rewrite(self):
        self.stats["rewrites_total"] += 1
        self.stats["rewrites_this_insert"] += 1

    def _emit(self, elem, old, new):
        for cb in self._callbacks:
            cb(elem, old, new)

    # -- public api --------------------------------------------------------

    def on_tag_change(self, cb: Callable) -> None:
        """Register ``cb(handle, old_tag, new_tag)`` for every rewrite."""
        self._callbacks.append(cb)

    def __len__(self):
        return self._count

    @property
    def tag_bits(self) -> int:
        return self.config.tag_bits

    def first(self) -> Optional[RepHandle]:
        return self._first

    def _check(self, handle) -> RepHandle:
        if not isinstance(handle, RepHandle) or handle._lab is not self:
            raise StaleHandleError(f"not a handle of this labeler: {handle!r}")
        if not handle.alive:
            raise StaleHandleError(f"handle no longer live: {handle!r}")
        return handle

    def order(self, u: RepHandle, v: RepHandle) -> int:
        """-1 if u precedes v, 0 if same handle, 1 if u follows v."""
        self._check(u)
        self._check(v)
        if u is v:
            return 0
        return -1 if u.tag < v.tag else 1

    def tag(self, u: RepHandle) -> int:
        return self._check(u).tag

    def insert_after(self, v) -> RepHandle:
        """Insert a new element immediately after ``v`` (or at FRONT)."""
        if self._count >= self.config.capacity:
            if self.config.auto_grow:
                self._rebuild(self.config.capacity * 2)
            else:
                raise CapacityError(
                    f"labeler full at capacity {self.config.capacity}")
        if v is not FRONT:
            self._check(v)
        self.stats["inserts"] += 1
        self.stats["rewrites_this_insert"] = 0

        elem = RepHandle(self)
        if self._count == 0:
            source = None
            self._insert_first(elem)
        elif v is FRONT:
            source = self._first
            self._insert_before_front(elem)
        else:
            source = v
            self._insert_after_elem(elem, v)
        self._count += 1

        # Fix the new element's slices where it and its copy source
        # straddle an in-flight sweep cursor.  This must happen before any
        # weight bump or resource spend below can advance a sweep
        # (possibly across a phase boundary) within this same call.
        node = elem.leaf
        below = None
        while node is not None:
            proc = node.funded
            if proc is not None and not proc.done:
                hit = proc.covers_passed(elem, source, node, below)
                if hit is not None:
                    self._stamp(elem, hit[0], hit[1])
            below = node
            node = node.parent

        # Then one time resource per ancestor whose weight grew, spent now.
        node = elem.leaf
        below = None
        while node is not None:
            node.weight += 1
            if node.height == 0 and node.weight >= 2 * self.config.k:
                self._split_leaf(node)
                node = elem.leaf  # element may have moved to the new half
            elif 0 < node.height < self.config.height and \
                    node.weight > 2 * (self.config.a ** node.height) * self.config.k:
                self._split_internal(node)
                if below is not None and below.parent is not node:
                    node = below.parent
            proc = node.funded
            if proc is not None and not proc.done:
                self._give_resource(proc)
            below = node
            node = node.parent

        m = self.stats["rewrites_this_insert"]
        if m > self.stats["rewrites_max"]:
            self.stats["rewrites_max"] = m
        return elem

    # -- element placement --------------------------------------------------

    def _leaf_fences(self, leaf):
        """Averaging fences for the per-element slice.  While a leaf split's
        phase 1 is incomplete the two halves share a stale level label, so
        their element labels must stay range-separated."""
        lo, hi = 0, 1 << self.config.leaf_bits
        proc = leaf.funded
        if proc is not None and not proc.done and proc.phase == _P1:
            if leaf is proc.left:
                hi = self._elem_label(proc.right.first.tag)
            elif leaf is proc.right:
                lo = self._elem_label(proc.left.last.tag) + 1
        return lo, hi

    def _avg_elem_label(self, leaf, before, after) -> int:
        lo, hi = self._leaf_fences(leaf)
        left = self._elem_label(before.tag) if before is not None else lo - 1
        right = self._elem_label(after.tag) if after is not None else hi
        if right - left < 2:
            self._respread_leaf(leaf)
            left = self._elem_label(before.tag) if before is not None else lo - 1
            right = self._elem_label(after.tag) if after is not None else hi
            if right - left < 2:
                raise AuditError("element label space exhausted in leaf")
        return (left + right) >> 1

    def _respread_leaf(self, leaf):
        """Evenly respace the per-element slice of one leaf (O(k) rewrites).

        Safe at any instant: element labels only break ties within one
        leaf, and the split fences keep divided halves separated."""
        lo, hi = self._leaf_fences(leaf)
        n = leaf.weight
        if n == 0:
            return
        step = (hi - lo) // (n + 1)
        if step < 1:
            raise AuditError("cannot respread leaf: range too small")
        self.stats["respreads"] += 1
        e = leaf.first
        val = lo + step
        while True:
            self._set_elem_label(e, val)
            if e is leaf.last:
                break
            e = e.next
            val += step

    def _link_global(self, elem, before, after):
        elem.prev = before
        elem.next = after
        if before is not None:
            before.next = elem
        else:
            self._first = elem
        if after is not None:
            after.prev = elem
        else:
            self._last = elem

    def _insert_first(self, elem):
        leaf = self._spine_leaf
        elem.leaf = leaf
        elem.tag = 0
        node = leaf
        while node.parent is not None:
            self._stamp_quiet(elem, node.height, node.label)
            node = node.parent
        self._set_elem_label(elem, 1 << (self.config.leaf_bits - 1), emit=False)
        leaf.first = leaf.last = elem
        self._link_global(elem, None, None)

    def _stamp_quiet(self, elem, h, value):
        off = self._slice_off(h)
        elem.tag |= value << off

    def _insert_before_front(self, elem):
        succ = self._first
        leaf = succ.leaf
        elem.leaf = leaf
        mask = (1 << self.config.leaf_bits) - 1
        elem.tag = succ.tag & ~mask
        self._set_elem_label(elem, self._avg_elem_label(leaf, None, succ),
                             emit=False)
        if leaf.first is succ:
            leaf.first = elem
        self._link_global(elem, None, succ)

    def _insert_after_elem(self, elem, v):
        leaf = v.leaf
        elem.leaf = leaf
        nxt = v.next
        within = nxt if (nxt is not None and nxt.leaf is leaf) else None
        mask = (1 << self.config.leaf_bits) - 1
        elem.tag = v.tag & ~mask
        self._set_elem_label(elem, self._avg_elem_label(leaf, v, within),
                             emit=False)
        if leaf.last is v:
            leaf.last = elem
        self._link_global(elem, v, nxt)

    # -- splits --------------------------------------------------------------

    def _check_prior_process(self, node):
        proc = node.funded
        if proc is not None and not proc.done:
            # Lemma-2 window violated; finish it now and record the breach.
            self.stats["forced_drains"] += 1
            self._drain_process(proc)

    def _kind_a_block(self, new_proc):
        """Collision schedule for a split beneath an unfinished parent-level
        process: the new process lends its resources to the parent sweep
        instead of writing, and is repaid once released.

        The new phase-1 value lives in the *current* label generation
        while every element the parent sweep has not yet reached is still
        stale, so writing early would invert against stale neighbors on
        either side.  Phase 1 therefore waits until the parent sweep has
        fully passed the split node's region (only a process created
        before the parent's split may run concurrently; the sweep assists
        and re-covers it on arrival).
        """
        parent = new_proc.left.parent
        if parent is None:
            return
        upper = parent.funded
        if upper is None or upper.done:
            return
        if upper.region_nodes is not None and new_proc.left in upper.region_nodes:
            upper.note_owner_split(new_proc.left, new_proc.right)
        if not (upper.region_passed(new_proc.left)
                and upper.region_passed(new_proc.right)):
            new_proc.blocked_on = upper
            upper.waiters.append(new_proc)
            self.stats["collisions_blocked"] += 1

    def _label_for_new_sibling(self, parent, left_node):
        """Averaged label for a node inserted right after ``left_node``."""
        bits = 4 * self.config.a
        idx = parent.children.index(left_node)
        lo = left_node.label & ((1 << bits) - 1)
        if idx + 1 < len(parent.children):
            hi = parent.children[idx + 1].label & ((1 << bits) - 1)
        else:
            hi = 1 << bits
        if hi - lo < 2:
            raise AuditError("sibling label gap exhausted")
        msb = left_node.label >> bits
        return (msb << bits) | ((lo + hi) >> 1), idx

    def _respread_children_labels(self, node):
        """Instant label reassign for <= 4a+1 children, flipping polarity.

        Only node labels change here; element tags catch up through the
        tag process sweeps."""
        bits = 4 * self.config.a
        node.polarity ^= 1
        c = len(node.children)
        for i, ch in enumerate(node.children):
            ch.label = (node.polarity << bits) | (((i + 1) << bits) // (c + 1))

    def _split_leaf(self, leaf):
        cfg = self.config
        self._check_prior_process(leaf)
        self.stats["leaf_splits"] += 1
        self.stats["splits"] += 1
        parent = leaf.parent
        right = _Node(0, parent=parent)
        # Move the upper k elements; global chain order is untouched.
        e = leaf.first
        for _ in range(cfg.k - 1):
            e = e.next
        right.first = e.next
        right.last = leaf.last
        leaf.last = e
        m = right.first
        while True:
            m.leaf = right
            if m is right.last:
                break
            m = m.next
        right.weight = leaf.weight - cfg.k
        leaf.weight = cfg.k
        label, idx = self._label_for_new_sibling(parent, leaf)
        right.label = label
        parent.children.insert(idx + 1, right)
        if parent.funded is not None and not parent.funded.done:
            parent.funded.note_owner_split(leaf, right)
        proc = _TagProcess(self, leaf, right)
        leaf.funded = right.funded = proc
        self._active.add(proc)
        self._kind_a_block(proc)

    def _split_internal(self, node):
        cfg = self.config
        self._check_prior_process(node)
        self.stats["splits"] += 1
        parent = node.parent
        # Divide children as evenly as possible by weight.
        total = node.weight
        acc = 0
        cut = 1
        best = None
        for i, ch in enumerate(node.children[:-1]):
            acc += ch.weight
            diff = abs(total - 2 * acc)
            if best is None or diff < best:
                best = diff
                cut = i + 1
        right = _Node(node.height, parent=parent)
        right.children = node.children[cut:]
        node.children = node.children[:cut]
        for ch in right.children:
            ch.parent = right
        right.weight = sum(ch.weight for ch in right.children)
        node.weight = total - right.weight
        node.spine = right.spine = False
        label, idx = self._label_for_new_sibling(parent, node)
        right.label = label
        parent.children.insert(idx + 1, right)
        if parent.funded is not None and not parent.funded.done:
            parent.funded.note_owner_split(node, right)
        right.polarity = node.polarity
        self._respread_children_labels(node)
        self._respread_children_labels(right)
        proc = _TagProcess(self, node, right)
        node.funded = right.funded = proc
        self._active.add(proc)
        self._kind_a_block(proc)

    # -- resource scheduling ---------------------------------------------

    def _give_resource(self, proc):
        """Spend one time resource immediately per the collision rules.
        Work per resource never exceeds twice the configured unit."""
        cw = self.config.c_work
        self.stats["resources"] += 1
        proc.resources += 1
        if proc.done:
            return
        if proc.blocked_on is not None:
            upper = proc.blocked_on
            if upper.done:
                proc.blocked_on = None
            else:
                # Lend to the blocker; if it is itself blocked, the work
                # flows through to the head of the chain.
                proc.lent += 1
                while upper.blocked_on is not None and not upper.blocked_on.done:
                    upper = upper.blocked_on
                self._sweep(upper, cw)
                return
        if proc.assist is not None:
            self._run_assist(proc, cw)
            return
        while proc.repay:
            target, owed = proc.repay[0]
            if target.done or owed <= 0:
                proc.repay.pop(0)
                continue
            proc.repay[0][1] -= 1
            self._sweep(target, cw)
            return
        units = cw
        if proc.boost > 0:
            proc.boost -= 1
            units = 2 * cw
        self._sweep(proc, units)

    def _run_assist(self, proc, budget):
        target = proc.assist
        if target.done or target.phase != _P1:
            self._end_assist(proc)
            self._sweep(proc, budget)
            return
        proc.assist_count += 1
        self._sweep(target, budget * (2 if proc.assist_double else 1))
        if target.done or target.phase != _P1:
            self._end_assist(proc)

    def _end_assist(self, proc):
        double = proc.assist_double
        proc.assist = None
        if double:
            # The assisted phase stamped a stale value; re-sweep the region
            # with the current label, at double rate for the lent count.
            proc.boost += proc.assist_count
        else:
            # The assisted phase wrote the final value; skip the region.
            if not proc.done:
                proc.skip_region()
        proc.assist_count = 0

    def _sweep(self, proc, units):
        while units > 0 and not proc.done:
            if proc.blocked_on is not None:
                break
            if proc.assist is not None:
                target = proc.assist
                if target.done or target.phase != _P1:
                    self._end_assist(proc)
                    continue
                proc.assist_count += 1
                mult = 2 if proc.assist_double else 1
                self._sweep(target, units * mult)
                if target.done or target.phase != _P1:
                    self._end_assist(proc)
                return
            units -= proc.step()
            if self.step_listener is not None:
                self.step_listener(proc)

    def _drain_process(self, proc):
        guard = 0
        while not proc.done:
            # Resolve blocked chains: only the head can make progress.
            target = proc
            while target.blocked_on is not None and not target.blocked_on.done:
                target = target.blocked_on
            if target.blocked_on is not None:
                target.blocked_on = None
            self._sweep(target, self.config.c_work)
            guard += 1
            if guard > 1_000_000:
                raise AuditError("tag process failed to drain")

    def drain(self):
        """Run every in-flight tag process to completion (test helper)."""
        while self._active:
            proc = next(iter(self._active))
            self._drain_process(proc)

    def active_processes(self) -> int:
        return len(self._active)

    # -- rebuild -----------------------------------------------------------

    def _rebuild(self, new_capacity):
        """Stop-the-world rebuild into a doubled-capacity layout.  Fires a
        tag-change callback for every element; excluded from bound audits."""
        self.stats["rebuilds"] += 1
        order = []
        e = self._first
        while e is not None:
            order.append(e)
            e = e.next
        object.__setattr__(self.config, "capacity", new_capacity)
        self._active = set()
        self._first = self._last = None
        self._count = 0
        self._build_spine()
        prev = FRONT
        for h in order:
            old = h.tag
            h.leaf = None
            fresh = self.insert_after(prev)
            # Graft the fresh placement back onto the caller's handle.
            h.tag, h.leaf, h.prev, h.next = fresh.tag, fresh.leaf, fresh.prev, fresh.next
            if fresh.prev is not None:
                fresh.prev.next = h
            else:
                self._first = h
            if fresh.next is not None:
                fresh.next.prev = h
            else:
                self._last = h
            leaf = h.leaf
            if leaf.first is fresh:
                leaf.first = h
            if leaf.last is fresh:
                leaf.last = h
            fresh.alive = False
            self._emit(h, old, h.tag)
            prev = h
        self.drain()

    # -- audits -------------------------------------------------------------

    def audit(self, deep=False):
        """Verify structural invariants; raises AuditError on violation."""
        cfg = self.config
        self._audit_node(self._root)
        # Global tag monotonicity -- the headline invariant.
        e = self._first
        while e is not None and e.next is not None:
            if e.tag >= e.next.tag:
                raise AuditError(
                    f"tag order violated: {e.tag:#x} !< {e.next.tag:#x}")
            e = e.next
        if deep:
            for proc in self._active:
                if proc.blocked_on is not None and proc.blocked_on.done:
                    raise AuditError("blocked on a finished process")
        return dict(self.stats, count=self._count,
                    active_processes=len(self._active))

    def _audit_node(self, node):
        cfg = self.config
        if node.height == 0:
            n = 0
            e = node.first
            prev_label = -1
            while e is not None:
                if e.leaf is not node:
                    raise AuditError("element leaf backlink wrong")
                lab = self._elem_label(e.tag)
                if lab <= prev_label:
                    raise AuditError("element labels not increasing in leaf")
                prev_label = lab
                n += 1
                if e is node.last:
                    break
                e = e.next
            if n != node.weight:
                raise AuditError(f"leaf weight {node.weight} != count {n}")
            if node.weight > 2 * cfg.k - 1:
                raise AuditError("leaf overfull")
            if not node.spine and node.weight < cfg.k:
                raise AuditError("non-spine leaf underfull")
            return node.weight
        total = 0
        prev_label = -1
        for ch in node.children:
            if ch.parent is not node:
                raise AuditError("child parent backlink wrong")
            if ch.height != node.height - 1:
                raise AuditError("child height inconsistent")
            if ch.label <= prev_label:
                raise AuditError("sibling labels not increasing")
            prev_label = ch.label
            total += self._audit_node(ch)
        if total != node.weight:
            raise AuditError("internal weight mismatch")
        h = node.height
        cap = 2 * (cfg.a ** h) * cfg.k
        if node is not self._root and node.weight > cap:
            raise AuditError("internal node overweight")
        fan = len(node.children)
        spine_child = any(ch.spine for ch in node.children)
        limit = 4 * cfg.a + (1 if spine_child else 0)
        if fan > limit:
            raise AuditError(f"fan-out {fan} above {limit}")
        if not node.spine and node is not self._root:
            if node.weight < (cfg.a ** h) * cfg.k // 2:
                raise AuditError("non-spine internal node underweight")
            if fan < cfg.a // 4:
                raise AuditError("fan-out below a/4")
        return total

    # test hook: deliberately corrupt one tag bit (fault-injection runs)
    def debug_flip_tag_bit(self, handle, bit):
        handle.tag ^= 1 << bit
