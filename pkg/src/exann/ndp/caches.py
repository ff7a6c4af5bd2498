"""Local neighbor caches.

LNC-T caches NLT lines the way a TLB caches page-table entries: fully
associative LRU over 64-byte lines, 16 four-byte entries per line, tagged by
the first covered node id. LNC-D is a set-associative LRU cache over
64-byte lines of the packed neighbor-list region; a variable-length list
segment hits only through the lines it spans, and the prefetcher counts a
segment as covered only when every one of its lines is resident (no partial
hits).
"""

from collections import OrderedDict

from exann.ndp.topology import NdpTopology


class LncT:
    def __init__(self, capacity_bytes: int, line_bytes: int = 64, entry_bytes: int = 4):
        self.entries_per_line = line_bytes // entry_bytes
        self.capacity_lines = capacity_bytes // line_bytes
        if self.capacity_lines < 1:
            raise ValueError("LNC-T needs at least one line")
        self._lru: OrderedDict[int, None] = OrderedDict()
        self.hits = 0
        self.misses = 0

    def tag(self, node: int) -> int:
        return (node // self.entries_per_line) * self.entries_per_line

    def lookup(self, node: int) -> bool:
        """True on hit; on miss the line is installed (caller fetches it)."""
        t = self.tag(node)
        if t in self._lru:
            self._lru.move_to_end(t)
            self.hits += 1
            return True
        self.misses += 1
        self._lru[t] = None
        if len(self._lru) > self.capacity_lines:
            self._lru.popitem(last=False)
        return False


class LncD:
    def __init__(self, capacity_bytes: int, ways: int = 8, line_bytes: int = 64):
        self.ways = ways
        self.line_bytes = line_bytes
        self.n_sets = capacity_bytes // (ways * line_bytes)
        if self.n_sets < 1:
            raise ValueError("LNC-D needs at least one set")
        # per set: line address -> None, in LRU order
        self._sets: list[OrderedDict[int, None]] = [OrderedDict() for _ in range(self.n_sets)]
        self.hits = 0  # line-granular counters
        self.misses = 0

    def _lines(self, addr: int, nbytes: int):
        return range(addr // self.line_bytes, (addr + nbytes - 1) // self.line_bytes + 1)

    def _touch(self, ln: int) -> bool:
        s = self._sets[ln % self.n_sets]
        if ln in s:
            s.move_to_end(ln)
            return True
        return False

    def _install(self, ln: int):
        s = self._sets[ln % self.n_sets]
        s[ln] = None
        if len(s) > self.ways:
            s.popitem(last=False)

    def lookup_segment(self, addr: int, nbytes: int) -> tuple[int, int]:
        """(hit_lines, miss_lines); missing lines are installed -- the
        caller charges one burst access per missing line."""
        hit = miss = 0
        for ln in self._lines(addr, nbytes):
            if self._touch(ln):
                hit += 1
            else:
                miss += 1
                self._install(ln)
        self.hits += hit
        self.misses += miss
        return hit, miss

    def insert_segment(self, addr: int, nbytes: int) -> int:
        """Install without counting hits/misses; returns lines fetched."""
        fetched = 0
        for ln in self._lines(addr, nbytes):
            if not self._touch(ln):
                fetched += 1
                self._install(ln)
        return fetched

    def covers_segment(self, addr: int, nbytes: int) -> bool:
        """True only when every line of the segment is resident."""
        return all(ln in self._sets[ln % self.n_sets] for ln in self._lines(addr, nbytes))


def make_caches(topo: NdpTopology):
    """One (LNC-T, LNC-D) pair per sub-channel."""
    return (
        [LncT(topo.lnct_bytes, topo.line_bytes) for _ in range(topo.n_subchannels)],
        [LncD(topo.lncd_bytes, topo.lncd_ways, topo.line_bytes) for _ in range(topo.n_subchannels)],
    )
