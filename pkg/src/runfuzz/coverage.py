"""Execution traces, hit-count classification, and virgin maps.

Edge hit counts are bucketed into the classic 8 ranges (1, 2, 3, 4-7,
8-15, 16-31, 32-127, 128-255), one bit per bucket, so a classified trace
is a bit array the same shape as the raw counter array.  Virgin maps are
all-ones bitmaps whose bits get cleared as the corpus covers them.

Maps and traces are held as arbitrary-precision ints over the little-endian
byte layout, which gives word-at-a-time comparison for free while staying
observationally identical to a per-bit scan.
"""

from __future__ import annotations


def _build_class_lut() -> bytes:
    lut = bytearray(256)
    for count in range(1, 256):
        if count == 1:
            b = 0
        elif count == 2:
            b = 1
        elif count == 3:
            b = 2
        elif count <= 7:
            b = 3
        elif count <= 15:
            b = 4
        elif count <= 31:
            b = 5
        elif count <= 127:
            b = 6
        else:
            b = 7
        lut[count] = 1 << b
    return bytes(lut)


CLASS_LUT = _build_class_lut()


def map_size_bytes(n_edges: int) -> int:
    """Counter slots rounded up to a whole number of 64-bit words."""
    return max(8, ((n_edges + 7) // 8) * 8)


def classify_counts(raw) -> bytes:
    """Bucket every 8-bit hit counter; zero stays zero."""
    return bytes(raw).translate(CLASS_LUT)


class ExecutionTrace:
    """One execution's classified per-edge bitmap."""

    __slots__ = ("raw", "classified", "n_bytes", "_int")

    def __init__(self, raw, n_bytes: int | None = None):
        raw = bytes(raw)
        if n_bytes is not None:
            if len(raw) > n_bytes:
                raise ValueError("raw counter array longer than map size")
            raw = raw.ljust(n_bytes, b"\x00")
        self.raw = raw
        self.n_bytes = len(raw)
        self.classified = classify_counts(raw)
        self._int = None

    @property
    def as_int(self) -> int:
        if self._int is None:
            self._int = int.from_bytes(self.classified, "little")
        return self._int

    def bit_positions(self) -> tuple[int, ...]:
        """Indices of set bits in the classified trace, ascending."""
        return tuple(iter_bits(self.as_int))

    def bit_count(self) -> int:
        return self.as_int.bit_count()


def iter_bits(value: int):
    while value:
        low = value & -value
        yield low.bit_length() - 1
        value ^= low


class VirginMap:
    """Not-yet-covered bitmap; bits only ever go from 1 to 0."""

    __slots__ = ("n_bytes", "bits")

    def __init__(self, n_bytes: int, bits: int | None = None):
        self.n_bytes = n_bytes
        full = (1 << (8 * n_bytes)) - 1
        self.bits = full if bits is None else (bits & full)

    def to_bytes(self) -> bytes:
        return self.bits.to_bytes(self.n_bytes, "little")

    def virgin_bit_count(self) -> int:
        return self.bits.bit_count()

    def covered_bit_count(self) -> int:
        return 8 * self.n_bytes - self.bits.bit_count()


class TraceUpdateData:
    """Per-seed record of which maps were updated together.

    One inner set per updated bit position, deduplicated; iteration order is
    fixed (sorted by member ids) so downstream accumulation is reproducible.
    """

    __slots__ = ("sets",)

    def __init__(self, sets):
        uniq = {frozenset(s) for s in sets}
        self.sets: tuple[frozenset[int], ...] = tuple(
            sorted(uniq, key=lambda fs: sorted(fs))
        )

    def __len__(self) -> int:
        return len(self.sets)

    def __iter__(self):
        return iter(self.sets)

    def __bool__(self) -> bool:
        return bool(self.sets)

    def __eq__(self, other) -> bool:
        return isinstance(other, TraceUpdateData) and set(self.sets) == set(other.sets)

    def members(self) -> frozenset[int]:
        out: set[int] = set()
        for s in self.sets:
            out.update(s)
        return frozenset(out)


def has_new_bits(trace: ExecutionTrace, maps) -> tuple[bool, TraceUpdateData]:
    """Compare one trace against several virgin maps, clearing newly hit bits.

    ``maps`` is an ordered sequence of (map_id, VirginMap).  Returns whether
    any map was updated plus, for every updated bit position, the set of map
    ids updated there.
    """
    t = trace.as_int
    store = False
    per_bit: dict[int, set[int]] = {}
    for map_id, vm in maps:
        if vm.n_bytes != trace.n_bytes:
            raise ValueError(
                f"virgin map length {vm.n_bytes} != trace length {trace.n_bytes}"
            )
        new = t & vm.bits
        if not new:
            continue
        vm.bits &= ~new
        store = True
        for pos in iter_bits(new):
            per_bit.setdefault(pos, set()).add(map_id)
    return store, TraceUpdateData(per_bit.values())


class VirginBlockMap:
    """Virgin bitmap over the dense target-reaching block ids."""

    __slots__ = ("n_blocks", "virgin")

    def __init__(self, n_blocks: int):
        self.n_blocks = n_blocks
        self.virgin = (1 << n_blocks) - 1

    def update(self, covered_mask: int) -> list[int]:
        """Clear virgin bits for covered blocks; return newly covered ids."""
        if covered_mask >> self.n_blocks:
            raise ValueError("covered-block bitmap wider than the subgraph")
        new = covered_mask & self.virgin
        self.virgin &= ~new
        return list(iter_bits(new))

    def covered_count(self) -> int:
        return self.n_blocks - self.virgin.bit_count()
