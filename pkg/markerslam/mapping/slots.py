import heapq
import numbers
from typing import Dict, Generic, Iterator, List, Tuple, TypeVar

from markerslam.errors import DeadId

T = TypeVar('T')

DEFAULT_BLOCK_CAPACITY: int = 4096

_VACANT = object()


class SlotStore(Generic[T]):
    """Arena with stable integer ids.

    Storage grows by whole blocks that are never moved, erased slots go to a
    min-heap so the next insertion always takes the lowest vacant id.
    """

    def __init__(self, block_capacity: int = DEFAULT_BLOCK_CAPACITY):
        if block_capacity < 1:
            raise ValueError("Block capacity must be at least 1")
        self.block_capacity = block_capacity
        self._blocks: List[List[object]] = []
        self._free: List[int] = []
        self._high_water = 0
        self._live = 0

    def _open_block(self) -> None:
        self._blocks.append([_VACANT] * self.block_capacity)

    def _locate(self, slot_id: int) -> Tuple[int, int]:
        if not isinstance(slot_id, numbers.Integral) or slot_id < 0 or slot_id >= self._high_water:
            raise DeadId(f"Slot {slot_id} was never allocated")
        block, offset = divmod(int(slot_id), self.block_capacity)
        if self._blocks[block][offset] is _VACANT:
            raise DeadId(f"Slot {slot_id} is vacant")
        return block, offset

    def insert(self, element: T) -> int:
        if self._free:
            slot_id = heapq.heappop(self._free)
        else:
            slot_id = self._high_water
            if slot_id == len(self._blocks) * self.block_capacity:
                self._open_block()
            self._high_water += 1
        block, offset = divmod(slot_id, self.block_capacity)
        self._blocks[block][offset] = element
        self._live += 1
        return slot_id

    def get(self, slot_id: int) -> T:
        block, offset = self._locate(slot_id)
        return self._blocks[block][offset]

    def erase(self, slot_id: int) -> T:
        block, offset = self._locate(slot_id)
        element = self._blocks[block][offset]
        self._blocks[block][offset] = _VACANT
        heapq.heappush(self._free, slot_id)
        self._live -= 1
        return element

    def __contains__(self, slot_id: object) -> bool:
        if not isinstance(slot_id, numbers.Integral) or slot_id < 0 or slot_id >= self._high_water:
            return False
        block, offset = divmod(int(slot_id), self.block_capacity)
        return self._blocks[block][offset] is not _VACANT

    def __len__(self) -> int:
        return self._live

    def __iter__(self) -> Iterator[int]:
        return iter(self.ids())

    def ids(self) -> List[int]:
        return [slot_id for slot_id, _ in self.items()]

    def items(self) -> Iterator[Tuple[int, T]]:
        for block_index, block in enumerate(self._blocks):
            base = block_index * self.block_capacity
            for offset, element in enumerate(block):
                if base + offset >= self._high_water:
                    return
                if element is not _VACANT:
                    yield base + offset, element

    def values(self) -> Iterator[T]:
        for _, element in self.items():
            yield element

    @property
    def high_water(self) -> int:
        return self._high_water

    @property
    def free_slots(self) -> List[int]:
        return sorted(self._free)

    @property
    def block_count(self) -> int:
        return len(self._blocks)

    @classmethod
    def restore(cls, bindings: Dict[int, T], high_water: int,
                block_capacity: int = DEFAULT_BLOCK_CAPACITY) -> 'SlotStore[T]':
        store: SlotStore[T] = cls(block_capacity)
        if any(slot_id < 0 or slot_id >= high_water for slot_id in bindings):
            raise ValueError("Binding outside the allocated range")
        while len(store._blocks) * block_capacity < high_water:
            store._open_block()
        store._high_water = high_water
        for slot_id, element in bindings.items():
            block, offset = divmod(slot_id, block_capacity)
            store._blocks[block][offset] = element
        store._free = [slot_id for slot_id in range(high_water) if slot_id not in bindings]
        heapq.heapify(store._free)
        store._live = len(bindings)
        return store


def slot_insert(store: SlotStore[T], element: T) -> int:
    return store.insert(element)


def slot_erase(store: SlotStore[T], slot_id: int) -> T:
    return store.erase(slot_id)


def slot_get(store: SlotStore[T], slot_id: int) -> T:
    return store.get(slot_id)
