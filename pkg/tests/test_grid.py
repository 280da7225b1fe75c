import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abmapper.errors import MalformedHeader, RaggedRows, UnknownGlyph
from abmapper.grid import MOVES, Action, GridMap, action_between, load_map


def test_one_obstacle_map():
    m = load_map("3 2\n.#.\n...")
    assert (m.width, m.height) == (3, 2)
    assert m.cells.tolist() == [[False, True, False], [False, False, False]]


def test_all_free_map():
    m = load_map("2 2\n..\n..")
    assert not m.cells.any()
    assert m.free_cells() == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_unknown_glyph_location():
    with pytest.raises(UnknownGlyph) as exc:
        load_map("3 2\n.#.\n.?.")
    assert (exc.value.line, exc.value.col) == (3, 2)


@pytest.mark.parametrize("text", ["", "3\n...", "a b\n..", "3 -2\n..."])
def test_malformed_header(text):
    with pytest.raises(MalformedHeader) as exc:
        load_map(text)
    assert exc.value.line == 1


def test_ragged_rows_name_the_line():
    with pytest.raises(RaggedRows) as exc:
        load_map("3 2\n...\n..")
    assert exc.value.line == 3
    with pytest.raises(RaggedRows) as exc:
        load_map("3 2\n...")
    assert exc.value.line == 3
    with pytest.raises(RaggedRows):
        load_map("3 1\n...\n...")


def test_map_is_immutable():
    m = load_map("2 2\n..\n..")
    with pytest.raises(ValueError):
        m.cells[0, 0] = True


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.data())
def test_render_load_round_trip(w, h, data):
    rows = ["".join(data.draw(st.lists(st.sampled_from(".#"), min_size=w, max_size=w))) for _ in range(h)]
    text = f"{w} {h}\n" + "\n".join(rows) + "\n"
    m = load_map(text)
    assert m.render() == text
    assert load_map(m.render()) == m


def test_actions_and_moves():
    assert len(Action) == 5
    assert [tuple(MOVES[a]) for a in Action] == [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]
    assert action_between((2, 2), (1, 2)) is Action.UP
    assert action_between((2, 2), (2, 2)) is Action.STAY
    with pytest.raises(ValueError):
        action_between((0, 0), (1, 1))


def test_bounds_and_freedom():
    m = GridMap(3, 2, np.array([[0, 1, 0], [0, 0, 0]], dtype=bool))
    assert m.is_free((0, 0)) and not m.is_free((0, 1))
    assert not m.in_bounds((2, 0)) and not m.is_free((-1, 0))
