import pickle

import numpy as np
import pytest

from glmar_bayes.bundle import bundle_files, read_bundle, read_design, read_meta, write_bundle
from glmar_bayes.errors import BundleError, DesignRankError
from glmar_bayes.lattice import block_mask
from glmar_bayes.model import Dataset, ParamState
from glmar_bayes.summary import PosteriorSummary, point_summary


@pytest.fixture
def bundle_dir(tmp_path, rng):
    data = Dataset(Y=rng.standard_normal((12, 6)), Xfull=rng.standard_normal((12, 3)), P=2,
                   regressors=["task", "drift", "constant"])
    write_bundle(tmp_path / "b", data, block_mask(2, 3))
    return tmp_path / "b", data


@pytest.mark.parametrize("binary", [True, False])
def test_bundle_round_trip(tmp_path, rng, binary):
    data = Dataset(Y=rng.standard_normal((10, 4)), Xfull=rng.standard_normal((10, 2)), P=1)
    write_bundle(tmp_path / "b", data, block_mask(2, 2), binary=binary)
    loaded, mask = read_bundle(tmp_path / "b")
    assert np.array_equal(loaded.Y, data.Y)
    assert np.array_equal(loaded.Xfull, data.Xfull)
    assert loaded.P == 1 and loaded.regressors == ["x1", "x2"]
    assert mask.n_voxels == 4
    names = {p.name for p in bundle_files(tmp_path / "b")}
    assert ("series.f64" in names) == binary


def test_meta_errors(bundle_dir):
    directory, _ = bundle_dir
    (directory / "meta.txt").write_text("T=12\nN=six\n")
    with pytest.raises(BundleError, match=r"meta.txt:2"):
        read_meta(directory / "meta.txt")
    (directory / "meta.txt").write_text("T=12\nN=6\n")
    with pytest.raises(BundleError, match="missing keys K, P"):
        read_meta(directory / "meta.txt")


def test_design_with_text_cell_names_the_line(bundle_dir):
    directory, _ = bundle_dir
    lines = (directory / "design.csv").read_text().splitlines()
    lines[4] = "1.0,abc,1.0"
    (directory / "design.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(BundleError, match=r"design.csv:5"):
        read_design(directory / "design.csv")


def test_series_size_mismatch(bundle_dir):
    directory, data = bundle_dir
    np.zeros(10).tofile(directory / "series.f64")
    with pytest.raises(BundleError, match="expected T\\*N = 72"):
        read_bundle(directory)


def test_mask_voxel_count_must_match(bundle_dir):
    directory, _ = bundle_dir
    (directory / "mask.txt").write_text("dims: 2 2\n1 1\n1 1\n")
    with pytest.raises(BundleError, match="meta N=6"):
        read_bundle(directory)


def test_missing_bundle(tmp_path):
    with pytest.raises(BundleError):
        read_bundle(tmp_path / "nowhere")


def test_summary_round_trip(tmp_path, rng):
    K, P, N = 2, 1, 3
    R = (K + P + 1) * N + K + P
    summary = PosteriorSummary(method="vb", K=K, P=P, N=N, mean=rng.standard_normal(R),
                               variance=rng.uniform(size=R), w_cov=rng.uniform(size=(N, K, K)))
    summary.write(tmp_path)
    again = PosteriorSummary.read(tmp_path)
    assert again.method == "vb"
    assert np.array_equal(again.mean, summary.mean)
    assert np.array_equal(again.variance, summary.variance)
    assert again.bmse is None
    assert np.array_equal(again.w_cov, summary.w_cov)


def test_summary_frame_layout():
    state = ParamState(W=np.arange(6.0).reshape(2, 3), A=np.zeros((1, 3)), lam=np.ones(3),
                       alpha=np.ones(2), beta=np.ones(1))
    frame = point_summary(state).to_frame()
    assert frame["block"].tolist()[:6] == ["w"] * 6
    row = frame[frame["coordinate"] == "w[1,2]"].iloc[0]
    assert (row["index"], row["voxel"], row["mean"]) == (1, 2, 5.0)
    assert frame["variance"].isna().all()
    lam_rows = frame[frame["block"] == "lambda"]
    assert lam_rows["voxel"].tolist() == [0, 1, 2]


def test_summary_rejects_wrong_length():
    with pytest.raises(ValueError):
        PosteriorSummary(method="ols", K=1, P=1, N=2, mean=np.zeros(5))


def test_data_errors_survive_pickling():
    err = pickle.loads(pickle.dumps(BundleError("b/design.csv", "not a number", line=5)))
    assert str(err) == "b/design.csv:5: not a number"
    assert err.line == 5
    rank = pickle.loads(pickle.dumps(DesignRankError([2, 4])))
    assert rank.dependent_columns == [2, 4]
    assert "2, 4" in str(rank)
