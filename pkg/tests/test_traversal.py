import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disentlab import dsprites as ds
from disentlab import traversal as TR
from disentlab.models import VaeModel

GOLDEN = Path(__file__).parent / "golden" / "codes_729_head_tail.csv"


class Stamp:
    """Synthetic model: every code renders the same sprite (or a blank)."""

    def __init__(self, code_dim, image=None):
        self.code_dim = code_dim
        self.image = np.zeros((64, 64), dtype=np.float32) if image is None else image

    def images(self, codes, noise=None):
        return np.broadcast_to(self.image, (len(codes), 1, 64, 64)).copy()


def test_value_counts():
    assert len(TR.TraversalSpec(3).values()) == 9
    assert len(TR.TraversalSpec(5, -2, 2, 1, inclusive=False).values()) == 4
    np.testing.assert_array_equal(TR.TraversalSpec(1, 0, 0, 1).values(), [0.0])


@settings(max_examples=80)
@given(lo=st.integers(-8, 8), span=st.integers(0, 16), step=st.sampled_from([0.25, 0.5, 1.0, 2.0]),
       inclusive=st.booleans())
def test_count_formula(lo, span, step, inclusive):
    spec = TR.TraversalSpec(2, lo, lo + span, step, inclusive)
    vals = spec.values()
    assert spec.count == len(vals) ** 2
    if (span / step).is_integer():
        assert len(vals) == math.floor(span / step) + (1 if inclusive else 0)
    # every grid point lo + k*step inside the range, and nothing else
    k = np.arange(int(span / step) + 2)
    grid = lo + k * step
    want = grid[grid <= lo + span] if inclusive else grid[grid < lo + span]
    np.testing.assert_array_equal(vals, want)


def test_spec_errors():
    with pytest.raises(ValueError):
        TR.TraversalSpec(3, step=0).values()
    with pytest.raises(ValueError):
        TR.TraversalSpec(3, lo=1, hi=0).values()


def test_729_codes_order():
    codes = TR.traversal_codes(TR.TraversalSpec(3))
    assert codes.shape == (729, 3)
    np.testing.assert_array_equal(codes[0], [-2, -2, -2])
    np.testing.assert_array_equal(codes[1], [-2, -2, -1.5])
    np.testing.assert_array_equal(codes[9], [-2, -1.5, -2])
    np.testing.assert_array_equal(codes[-1], [2, 2, 2])


def test_nested_loop_order_matches_explicit_loops():
    vals = [-2.0, -1.0, 0.0, 1.0]
    explicit = [(a, b, c, d, e) for a in vals for b in vals for c in vals for d in vals for e in vals]
    codes = TR.traversal_codes(TR.TraversalSpec(5, -2, 2, 1, inclusive=False))
    assert codes.shape == (1024, 5)
    np.testing.assert_array_equal(codes, explicit)


def test_single_code():
    np.testing.assert_array_equal(TR.traversal_codes(TR.TraversalSpec(1, 0, 0, 1)), [[0.0]])


def test_columns():
    assert TR.grid_columns(729) == 27
    assert TR.grid_columns(1024) == 32
    assert TR.grid_columns(1) == 1
    assert TR.grid_columns(10) == 4


def test_golden_codes_csv(tmp_path):
    grid = TR.render_traversal(Stamp(3), TR.TraversalSpec(3))
    TR.write_codes_csv(grid, tmp_path / "codes.csv")
    lines = (tmp_path / "codes.csv").read_text().splitlines()
    assert len(lines) == 730
    assert lines[:6] + lines[-5:] == GOLDEN.read_text().splitlines()


def test_codes_csv_header_comment(tmp_path):
    grid = TR.render_traversal(Stamp(1), TR.TraversalSpec(1, 0, 0, 1))
    TR.write_codes_csv(grid, tmp_path / "c.csv", header_comment="mode=generator noise_seed=4")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "# mode=generator noise_seed=4"


def test_grid_27_by_27_dims(tmp_path):
    grid = TR.render_traversal(Stamp(3), TR.TraversalSpec(3))
    assert (grid.rows, grid.cols) == (27, 27)
    TR.write_grid(grid, tmp_path / "g.pgm")
    raw = (tmp_path / "g.pgm").read_bytes()
    assert raw.startswith(b"P5\n1780 1780\n255\n")
    assert len(raw) == len(b"P5\n1780 1780\n255\n") + 1780 * 1780


def test_grid_1024_is_32_by_32():
    grid = TR.render_traversal(Stamp(5), TR.TraversalSpec(5, -2, 2, 1, inclusive=False))
    assert (grid.rows, grid.cols) == (32, 32)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40))
def test_layout_arithmetic(n):
    grid = TR.TraversalGrid(np.ones((n, 64, 64)), np.zeros((n, 1)), math.ceil(n / TR.grid_columns(n)),
                            TR.grid_columns(n))
    canvas = grid.assemble()
    assert grid.rows * grid.cols >= n
    assert canvas.shape == (grid.rows * 64 + (grid.rows - 1) * 2, grid.cols * 64 + (grid.cols - 1) * 2)


def test_gutters_blank_cells_and_rounding(tmp_path):
    imgs = np.stack([np.full((64, 64), 0.5), np.full((64, 64), 1.0), np.full((64, 64), 0.2)])
    grid = TR.TraversalGrid(imgs, np.zeros((3, 1)), 2, 2)
    TR.write_grid(grid, tmp_path / "g.pgm")
    pix = TR.read_pgm(tmp_path / "g.pgm")
    assert pix.shape == (130, 130)
    assert pix[0, 0] == 128 and pix[0, 66] == 255 and pix[66, 0] == 51  # round(255 * value)
    assert (pix[64:66, :] == 128).all() and (pix[:, 64:66] == 128).all()
    assert (pix[66:, 66:] == 0).all()  # trailing cell


def test_pgm_round_trip(tmp_path):
    canvas = np.random.default_rng(0).integers(0, 256, (37, 51)) / 255.0
    TR.write_pgm(canvas, tmp_path / "r.pgm")
    np.testing.assert_array_equal(TR.read_pgm(tmp_path / "r.pgm"), np.rint(canvas * 255))


def test_single_code_matches_direct_decode():
    model = VaeModel(2, seed=3)
    grid = TR.render_traversal(model, TR.TraversalSpec(2, 0.5, 0.5, 1))
    assert (grid.rows, grid.cols) == (1, 1)
    np.testing.assert_array_equal(grid.images[0], model.images(np.array([[0.5, 0.5]]))[0, 0])


def test_code_dim_mismatch():
    with pytest.raises(ValueError):
        TR.render_traversal(VaeModel(3), TR.TraversalSpec(5))


def test_probe_no_exclusion_at_t32():
    rep = TR.generalization_probe(Stamp(1, ds.render((0, 3, 0, 31, 10))), TR.TraversalSpec(1), 32)
    assert rep.band_start_px is None and rep.in_excluded_band == 0 and rep.total_images == 9


def test_probe_sprite_at_column_56():
    img = np.zeros((64, 64), dtype=np.float32)
    img[30:34, 54:58] = 1.0  # centroid x = 56
    rep = TR.generalization_probe(Stamp(2, img), TR.TraversalSpec(2), 16)
    assert rep.band_start_px < 56
    assert rep.in_excluded_band == rep.total_images == 81 and rep.fraction_in_band == 1.0


def test_probe_band_boundary_and_blanks():
    assert TR.excluded_band_start(16) == pytest.approx(ds.position_to_pixel(16.5))
    inside = TR.generalization_probe(Stamp(1, ds.render((0, 0, 0, 17, 5))), TR.TraversalSpec(1), 16)
    outside = TR.generalization_probe(Stamp(1, ds.render((0, 0, 0, 16, 5))), TR.TraversalSpec(1), 16)
    assert inside.in_excluded_band == 9 and outside.in_excluded_band == 0
    blank = TR.generalization_probe(Stamp(1), TR.TraversalSpec(1), 16)
    assert blank.blank_images == 9 and blank.fraction_in_band == 0.0
    assert "in_excluded_band=0" in blank.as_text()
