import numpy as np
import pytest

from glmar_bayes.errors import MaskError
from glmar_bayes.lattice import (Mask, block_mask, build_kernel, color_voxels, ellipse_mask,
                                 precision_row, quad_form, quad_forms, read_mask, write_mask)


def test_line_stencil(line_kernel):
    expected = np.array([[4, -1, 0], [-1, 4, -1], [0, -1, 4]], dtype=float)
    assert np.array_equal(line_kernel.S.toarray(), expected)
    assert line_kernel.deg == 4


def test_line_precision(line_kernel):
    expected = np.array([[17, -8, 1], [-8, 18, -8], [1, -8, 17]], dtype=float)
    assert np.array_equal(line_kernel.StS.toarray(), expected)


def test_interior_row_has_13_nonzeros():
    mask = block_mask(10, 10)
    kernel = build_kernel(mask)
    interior = mask.voxel_index[5, 5]
    assert len(precision_row(kernel, interior)) == 13
    counts = np.diff(kernel.StS.indptr)
    assert counts.max() == 13


def test_3d_kernel_degree_and_row_count():
    mask = block_mask(5, 5, 5)
    kernel = build_kernel(mask)
    assert kernel.deg == 6
    assert np.all(kernel.S.diagonal() == 6)
    assert len(precision_row(kernel, mask.voxel_index[2, 2, 2])) == 25


@pytest.mark.parametrize("dims", [(1, 1), (2, 7), (6, 6), (3, 3, 4)])
def test_sts_matches_dense_product(dims):
    kernel = build_kernel(block_mask(*dims))
    S = kernel.S.toarray()
    StS = kernel.StS.toarray()
    assert np.array_equal(StS, S.T @ S)
    assert np.array_equal(StS, StS.T)
    assert np.linalg.eigvalsh(StS).min() > 0


def test_irregular_mask_is_positive_definite(rng):
    inside = rng.uniform(size=(9, 11)) < 0.6
    inside[0, 0] = True
    kernel = build_kernel(Mask.from_array(inside))
    S = kernel.S.toarray()
    assert np.array_equal(kernel.StS.toarray(), S.T @ S)
    assert np.linalg.eigvalsh(kernel.StS.toarray()).min() > 0
    # boundary voxels keep the fixed diagonal
    assert np.all(np.diag(S) == 4)


def test_csr_indices_sorted():
    kernel = build_kernel(block_mask(4, 4))
    assert kernel.StS.has_sorted_indices
    assert kernel.S.has_sorted_indices


def test_quad_form_examples(line_kernel, rng):
    assert quad_form(line_kernel, np.zeros(3)) == 0.0
    assert quad_form(line_kernel, [1.0, 0.0, 0.0]) == 17.0

    kernel = build_kernel(block_mask(5, 5))
    v = rng.standard_normal(25)
    S = kernel.S.toarray()
    dense = v @ S.T @ S @ v
    assert quad_form(kernel, v) == pytest.approx(dense, rel=1e-12)
    StS = kernel.StS.toarray()
    assert v @ (StS @ v) == pytest.approx((v @ StS) @ v, rel=1e-12)


def test_quad_forms_rowwise(rng):
    kernel = build_kernel(block_mask(3, 4))
    rows = rng.standard_normal((3, 12))
    expected = [quad_form(kernel, r) for r in rows]
    assert np.allclose(quad_forms(kernel, rows), expected)


def test_quad_form_length_mismatch(line_kernel):
    with pytest.raises(ValueError):
        quad_form(line_kernel, np.ones(4))


def test_precision_rows(line_kernel):
    assert precision_row(line_kernel, 0) == [(0, 17.0), (1, -8.0), (2, 1.0)]
    assert precision_row(line_kernel, 1) == [(0, -8.0), (1, 18.0), (2, -8.0)]
    single = build_kernel(block_mask(1, 1))
    assert precision_row(single, 0) == [(0, 16.0)]
    with pytest.raises(IndexError):
        precision_row(line_kernel, 3)


def test_empty_mask_rejected():
    with pytest.raises(MaskError):
        Mask.from_array(np.zeros((3, 3), dtype=bool))


def test_dimensionality_mismatch():
    with pytest.raises(MaskError):
        build_kernel(block_mask(3, 3), dimensionality=3)


def test_voxel_index_is_row_major_bijection():
    inside = np.array([[0, 1, 1], [1, 0, 1]], dtype=bool)
    mask = Mask.from_array(inside)
    assert mask.n_voxels == 4
    assert mask.voxel_index.tolist() == [[-1, 0, 1], [2, -1, 3]]
    assert mask.centroid.tolist() == [[0, 1], [0, 2], [1, 0], [1, 2]]


def test_ellipse_mask_size():
    mask = ellipse_mask()
    assert mask.dims == (53, 63)
    assert mask.n_voxels == 2087


def test_mask_file_round_trip(tmp_path):
    inside = np.zeros((2, 3, 4), dtype=bool)
    inside[0, 1, 2] = inside[1, 2, 3] = inside[1, 0, 0] = True
    mask = Mask.from_array(inside)
    write_mask(mask, tmp_path / "mask.txt")
    text = (tmp_path / "mask.txt").read_text().splitlines()
    assert text[0] == "dims: 2 3 4"
    assert len(text) == 1 + 2 * 3
    again = read_mask(tmp_path / "mask.txt")
    assert np.array_equal(again.inside, inside)


def test_mask_parse_error_names_line(tmp_path):
    path = tmp_path / "mask.txt"
    path.write_text("dims: 2 3\n1 0 1\n1 2 1\n")
    with pytest.raises(MaskError, match=r"mask.txt:3"):
        read_mask(path)


def test_coloring_separates_coupled_voxels():
    kernel = build_kernel(block_mask(6, 5))
    colors = color_voxels(kernel)
    assert sorted(np.concatenate(colors).tolist()) == list(range(30))
    StS = kernel.StS.toarray()
    for group in colors:
        block = StS[np.ix_(group, group)]
        assert np.count_nonzero(block - np.diag(np.diag(block))) == 0
