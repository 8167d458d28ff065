import numpy as np
import pytest

from lodgarment.garments import (LABELS, make_garment, nominal_style, random_style, style_corpus,
                                 template_descriptor)
from lodgarment.mesh import CATEGORIES, boundary_loops, close_holes, signed_volume


@pytest.mark.parametrize("category", CATEGORIES)
@pytest.mark.parametrize("resolution", [1, 2])
def test_template_loops_and_labels(category, resolution):
    g = make_garment(category, None, resolution)
    desc = template_descriptor(category, resolution)
    loops = boundary_loops(g)
    assert len(loops) == len(LABELS[category])
    assert set(desc.boundary_labels) == set(LABELS[category])
    named = desc.loops(g)
    assert sorted(len(lp) for lp in named.values()) == sorted(len(lp) for lp in loops)


@pytest.mark.parametrize("category", CATEGORIES)
def test_styles_share_topology(category, rng):
    desc = template_descriptor(category, 1)
    for g in style_corpus(category, 5, 0):
        assert desc.matches(g)
    assert np.array_equal(make_garment(category).vertices,
                          make_garment(category, nominal_style(category)).vertices)


@pytest.mark.parametrize("category", CATEGORIES)
def test_closed_garment_is_outward_and_clean(category, rng):
    g = make_garment(category, random_style(category, rng), 2)
    c = close_holes(g)
    assert boundary_loops(c) == []
    assert signed_volume(c) > 0
    # no coincident vertices
    q = np.round(g.vertices, 9)
    assert len(np.unique(q, axis=0)) == g.n_vertices


def test_unknown_category():
    with pytest.raises(ValueError):
        make_garment("hat")
