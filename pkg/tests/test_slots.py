"""SlotStore: stable ids, lowest-free reuse and agreement with a plain dict."""
import numpy as np
import pytest

from markerslam.errors import DeadId
from markerslam.mapping.slots import SlotStore, slot_erase, slot_get, slot_insert


class TestSlotStore:
    def test_ids_are_dense_from_zero(self):
        store = SlotStore()
        assert [store.insert(name) for name in 'abc'] == [0, 1, 2]
        assert len(store) == 3
        assert store.ids() == [0, 1, 2]

    def test_insert_reuses_lowest_vacant_id(self):
        store = SlotStore()
        for name in 'abcde':
            store.insert(name)
        store.erase(3)
        store.erase(1)
        assert store.free_slots == [1, 3]
        assert store.insert('x') == 1
        assert store.insert('y') == 3
        assert store.insert('z') == 5

    def test_ids_stay_stable_across_erase(self):
        store = SlotStore()
        ids = {name: store.insert(name) for name in 'abcd'}
        store.erase(ids['b'])
        assert store.get(ids['c']) == 'c'
        assert store.get(ids['d']) == 'd'

    def test_dead_and_unknown_ids(self):
        store = SlotStore()
        slot = store.insert('a')
        store.erase(slot)
        with pytest.raises(DeadId):
            store.get(slot)
        with pytest.raises(DeadId):
            store.erase(slot)
        with pytest.raises(DeadId):
            store.get(7)
        with pytest.raises(DeadId):
            store.get(-1)
        assert slot not in store
        assert 'a' not in store

    def test_blocks_grow_without_moving(self):
        store = SlotStore(block_capacity=2)
        first = ['first']
        slot = store.insert(first)
        for i in range(5):
            store.insert(i)
        assert store.block_count == 3
        assert store.get(slot) is first

    def test_rejects_empty_blocks(self):
        with pytest.raises(ValueError):
            SlotStore(block_capacity=0)

    def test_restore_rebuilds_free_list(self):
        store = SlotStore.restore({0: 'a', 2: 'c'}, high_water=4, block_capacity=3)
        assert len(store) == 2
        assert store.free_slots == [1, 3]
        assert store.insert('b') == 1
        assert store.high_water == 4

    def test_restore_rejects_ids_past_high_water(self):
        with pytest.raises(ValueError):
            SlotStore.restore({5: 'x'}, high_water=3)

    def test_module_level_helpers(self):
        store = SlotStore()
        slot = slot_insert(store, 'v')
        assert slot_get(store, slot) == 'v'
        assert slot_erase(store, slot) == 'v'
        assert len(store) == 0

    @pytest.mark.parametrize('block_capacity', [1, 7, 4096])
    def test_random_operations_match_dict(self, block_capacity):
        rng = np.random.default_rng(block_capacity)
        store = SlotStore(block_capacity)
        oracle = {}
        free = []
        high_water = 0
        for step in range(10_000):
            action = rng.random()
            if action < 0.5 or not oracle:
                expected = min(free) if free else high_water
                if free:
                    free.remove(expected)
                else:
                    high_water += 1
                assert store.insert(step) == expected
                oracle[expected] = step
            elif action < 0.8:
                victim = int(rng.choice(sorted(oracle)))
                assert store.erase(victim) == oracle.pop(victim)
                free.append(victim)
            else:
                slot_id = int(rng.integers(0, high_water + 2))
                if slot_id in oracle:
                    assert store.get(slot_id) == oracle[slot_id]
                else:
                    with pytest.raises(DeadId):
                        store.get(slot_id)
        assert len(store) == len(oracle)
        assert dict(store.items()) == oracle
        assert store.free_slots == sorted(free)
        assert store.high_water == high_water
