import pytest
from hypothesis import given, strategies as st

from druidlet.harness import FIXTURES, fixture_source
from druidlet.object_model import (
    ARRAY_ID, FALSE, MAX_SMALL_INT, MIN_SMALL_INT, NIL, TRUE, Heap, LoadError, RangeError,
    VmBug, disassemble, header_word, is_integer_object, load_program, tag_small_int,
    to_signed, to_unsigned, untag,
)

small_ints = st.integers(MIN_SMALL_INT, MAX_SMALL_INT)


@given(small_ints)
def test_untag_inverts_tag(n):
    word = tag_small_int(n)
    assert is_integer_object(word)
    assert untag(word) == n


@given(small_ints)
def test_tag_inverts_untag_on_tagged_words(n):
    word = (n << 1) | 1
    assert tag_small_int(untag(word)) == word


@pytest.mark.parametrize("n", [MAX_SMALL_INT + 1, MIN_SMALL_INT - 1, 1 << 70])
def test_tag_rejects_out_of_range(n):
    with pytest.raises(RangeError):
        tag_small_int(n)


@given(st.integers(-(1 << 63), (1 << 63) - 1))
def test_signed_unsigned_round_trip(w):
    assert to_signed(to_unsigned(w)) == w


def test_special_objects_sit_at_fixed_offsets():
    heap = Heap()
    assert (NIL, FALSE, TRUE) == (0, 16, 32)
    assert [heap.class_id_of(x) for x in (NIL, TRUE, FALSE)] == [1, 2, 3]
    assert heap.class_id_of(tag_small_int(7)) == 0


def test_header_packs_class_and_slot_count():
    assert header_word(4, 3) == 4 | 3 << 32


@given(st.lists(st.integers(0, 6), min_size=1, max_size=8), st.data())
def test_slots_live_after_the_header(sizes, data):
    heap = Heap()
    objs = [heap.allocate(ARRAY_ID, n) for n in sizes]
    for obj, n in zip(objs, sizes):
        for i in range(n):
            value = tag_small_int(data.draw(small_ints))
            heap.store_pointer_unchecked(i, obj, value)
            assert heap.words[(obj + 8 + 8 * i) >> 3] == value
            assert heap.fetch_pointer(i, obj) == value
        # header never aliased by a slot write
        assert heap.words[obj >> 3] == header_word(ARRAY_ID, n)
        assert heap.num_slots(obj) == n


def test_slot_access_is_bounds_checked():
    heap = Heap()
    obj = heap.allocate(ARRAY_ID, 2)
    with pytest.raises(VmBug):
        heap.fetch_pointer(2, obj)
    with pytest.raises(VmBug):
        heap.fetch_pointer(0, tag_small_int(3))


def test_heap_limit():
    heap = Heap(limit_bytes=128)
    with pytest.raises(MemoryError):
        heap.allocate(ARRAY_ID, 64)


@pytest.mark.parametrize("name", FIXTURES)
def test_loading_is_deterministic(name):
    text = fixture_source(name)
    assert load_program(text).heap.to_bytes() == load_program(text).heap.to_bytes()


@pytest.mark.parametrize("name", FIXTURES)
def test_disassembly_reassembles_to_a_fixpoint(name):
    once = disassemble(load_program(fixture_source(name)))
    assert disassemble(load_program(once)) == once


def test_literals_are_interned_in_the_literal_frame():
    image = load_program(fixture_source("fib"))
    method = image.entry_method()
    assert method.literals == [tag_small_int(2), tag_small_int(1), tag_small_int(20)]
    assert method.bytecodes[:3] == bytes([0x10, 0x20, 0x64])


@pytest.mark.parametrize("text,line", [
    ("  pushNil\n", 1),
    (".class X id=12\n.method f sel=30 args=0 temps=0\n  frob\n", 3),
    (".class X id=12\n.method f sel=30 args=0 temps=0\n  jump @nowhere\n", 3),
    (".class X id=1\n", 1),
])
def test_load_errors_carry_positions(text, line):
    with pytest.raises(LoadError) as info:
        load_program(text)
    assert info.value.line == line


def test_short_conditional_jumps_are_forward_only():
    text = (".class X id=12\n.method f sel=30 args=0 temps=0\n@top:\n"
            "  pushTrue\n  jumpTrue @top\n  pushNil\n  returnTop\n")
    with pytest.raises(LoadError):
        load_program(text)
