import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom, ortho_group

from tactile_moco import dataio as D
from tactile_moco import encoder as E
from tactile_moco import evalsuite as S
from tactile_moco import objectives as O
from tactile_moco import trainer as TR
from tactile_moco.errors import ConfigError, ContractError, FormatError


def fs(x, y, prefix="s"):
    return S.FeatureSet(np.asarray(x, dtype=np.float64), np.asarray(y), [f"{prefix}{i}" for i in range(len(y))])


def clouds(n, seed, sep=10.0, d=4):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.standard_normal((n, d)) * 0.3
    x[:, 0] += np.where(y == 1, sep / 2, -sep / 2)
    return fs(x, y)


def noise(n, seed, d=16):
    rng = np.random.default_rng(seed)
    return fs(rng.standard_normal((n, d)), rng.permutation(np.arange(n) % 2))


def xor(n, seed):
    rng = np.random.default_rng(seed)
    centres = np.array([[1, 1], [-1, -1], [1, -1], [-1, 1]], dtype=float) * 2
    c = np.arange(n) % 4
    x = centres[c] + rng.standard_normal((n, 2)) * 0.3
    return fs(x, (c >= 2).astype(int))


# binomial chance band for 256 trials at p=0.5, two-sided 1e-4
CHANCE = (binom.ppf(5e-5, 256, 0.5) / 256, binom.isf(5e-5, 256, 0.5) / 256)


def test_default_k():
    assert S.default_k(6000) == 77
    assert S.default_k(512) == 22
    assert S.default_k(3) == 1


# knn -----------------------------------------------------------------------------


def test_knn_separable():
    assert S.knn_predict(clouds(200, 0), clouds(100, 1), 14)[1] == 1.0


def test_knn_k1_nearest_label():
    train = fs([[0.0, 0.0], [3.0, 0.0], [10.0, 0.0]], [0, 1, 0])
    preds, acc = S.knn_predict(train, fs([[2.4, 0.1]], [1]), 1)
    assert preds.tolist() == [1] and acc == 1.0


def test_knn_tie_goes_to_nearest():
    train = fs([[1.0], [-1.5], [3.0], [-4.0]], [1, 0, 1, 0])
    assert S.knn_predict(train, fs([[0.0]], [1]), 4)[0].tolist() == [1]
    train = fs([[-1.0], [1.5], [3.0], [-4.0]], [1, 0, 1, 0])
    assert S.knn_predict(train, fs([[0.0]], [1]), 4)[0].tolist() == [1]
    train = fs([[1.2], [-1.0], [3.0], [-4.0]], [1, 0, 1, 0])
    assert S.knn_predict(train, fs([[0.0]], [0]), 4)[0].tolist() == [0]


def test_knn_self_match():
    data = noise(60, 3)
    assert S.knn_predict(data, data, 1)[1] == 1.0


def test_knn_errors():
    with pytest.raises(ConfigError):
        S.knn_predict(clouds(10, 0), clouds(4, 1), 11)
    with pytest.raises(ContractError):
        S.knn_predict(clouds(10, 0, d=3), clouds(4, 1, d=4), 3)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_prop_knn_rotation_invariant(seed):
    train, test = noise(80, seed, d=6), noise(40, seed + 1, d=6)
    rot = ortho_group.rvs(6, random_state=seed)
    rtrain = fs(train.features @ rot, train.labels)
    rtest = fs(test.features @ rot, test.labels)
    a, _ = S.knn_predict(train, test, 7)
    b, _ = S.knn_predict(rtrain, rtest, 7)
    assert np.array_equal(a, b)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["knn", "svm"]))
def test_prop_probe_accuracy_in_unit_interval_and_deterministic(seed, probe):
    train, test = noise(40, seed, d=3), noise(20, seed + 1, d=3)
    cfg = S.ProbeConfig(probe=probe, svm_iters=200)
    acc = S.run_probe(train, test, cfg)
    assert 0.0 <= acc <= 1.0 and acc == S.run_probe(train, test, cfg)


# svm -----------------------------------------------------------------------------


def test_svm_separable():
    assert S.svm_probe(clouds(200, 0), clouds(100, 1), S.ProbeConfig(probe="svm")) == 1.0


def test_svm_noise_is_chance():
    acc = S.svm_probe(noise(512, 0), noise(256, 1), S.ProbeConfig(probe="svm"))
    assert 0.4 <= acc <= 0.6


def test_svm_single_class():
    with pytest.raises(ContractError):
        S.svm_probe(fs(np.ones((4, 2)), [1, 1, 1, 1]), clouds(4, 0, d=2), S.ProbeConfig(probe="svm"))


def test_svm_duplication_invariance_against_hand_solution():
    # closest points of each class sit at x1 = +-1, so the max-margin separator is w=(1,0), b=0;
    # with C=1 and >= 2 support vectors per side the soft-margin optimum is that same separator
    x = np.array([[1.0, 0.0], [1.0, 2.0], [2.5, -1.0], [-1.0, 0.5], [-1.0, -1.5], [-3.0, 1.0]])
    y = np.array([1, 1, 1, 0, 0, 0])
    w1, b1 = S.fit_linear_svm(x, y, c=1.0, iters=20000)
    w2, b2 = S.fit_linear_svm(np.vstack([x, x]), np.concatenate([y, y]), c=1.0, iters=20000)
    for w, b in ((w1, b1), (w2, b2)):
        np.testing.assert_allclose(w, [1.0, 0.0], atol=0.03)
        assert abs(b) < 0.03
    np.testing.assert_allclose(w1, w2, atol=0.03)


# mlp -----------------------------------------------------------------------------


def test_mlp_separable():
    assert S.mlp_probe(clouds(200, 0), clouds(100, 1), S.ProbeConfig(probe="mlp", mlp_epochs=20)) >= 0.99


def test_mlp_beats_linear_on_xor():
    train, test = xor(400, 0), xor(256, 1)
    assert S.mlp_probe(train, test, S.ProbeConfig(probe="mlp")) >= 0.95
    assert S.svm_probe(train, test, S.ProbeConfig(probe="svm")) <= 0.75


def test_mlp_untrained_is_chance():
    acc = S.mlp_probe(noise(128, 0), noise(256, 1), S.ProbeConfig(probe="mlp", mlp_epochs=0))
    assert CHANCE[0] <= acc <= CHANCE[1]


def test_mlp_deterministic():
    cfg = S.ProbeConfig(probe="mlp", mlp_epochs=5)
    assert S.mlp_probe(xor(80, 0), xor(40, 1), cfg) == S.mlp_probe(xor(80, 0), xor(40, 1), cfg)


# report --------------------------------------------------------------------------


def test_report_single_cell():
    table = S.report([("moco", "mlp", 0.8183)])
    assert "81.83%" in table and "MLP" in table


def test_report_ties_and_layout():
    table = S.report([("moco", "knn", 0.9), ("triplet", "knn", 0.9), ("moco", "svm", 0.5), ("autoencoder", "svm", 0.75)])
    lines = table.strip().splitlines()
    assert lines[0].split() == ["model", "KNN", "SVM"]
    assert lines[1].split() == ["moco", "90.00%*", "50.00%"]
    assert lines[2].split() == ["triplet", "90.00%*", "-"]
    assert lines[3].split() == ["autoencoder", "-", "75.00%*"]


def test_report_empty():
    with pytest.raises(ContractError):
        S.report([])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10000))
def test_prop_report_two_decimals(k):
    acc = k / 10000
    assert f"{acc * 100:.2f}%" in S.report([("m", "knn", acc)])


def test_report_csv():
    assert S.report_csv([("moco", "mlp", 0.8183)]).splitlines()[1] == "moco,mlp,0.8183,81.83"


# features ------------------------------------------------------------------------


def test_feature_csv_roundtrip(tmp_path):
    data = noise(7, 0, d=5)
    S.save_features(data, tmp_path / "f.csv")
    back = S.load_features(tmp_path / "f.csv")
    assert back.features.tobytes() == data.features.tobytes()
    assert back.ids == data.ids and back.labels.tolist() == data.labels.tolist()


def test_feature_csv_errors(tmp_path):
    (tmp_path / "bad.csv").write_text("id,label,f0\nx,1,notanumber\n")
    with pytest.raises(FormatError, match=":2"):
        S.load_features(tmp_path / "bad.csv")
    with pytest.raises(FileNotFoundError):
        S.load_features(tmp_path / "missing.csv")


@pytest.fixture(scope="module")
def small_ckpts(tmp_path_factory):
    data = D.load_dataset(D.generate_synthetic(20, 32, 2, tmp_path_factory.mktemp("g")))
    enc = E.EncoderDescriptor(input_size=16, stem_width=4, stage_widths=(4, 8), head_hidden=8, out_dim=8)
    base = dict(epochs=1, batch_size=4, encoder=enc, augment=D.AugmentConfig(resize_to=20, crop_to=16))
    moco = TR.train(data, TR.TrainConfig(contrast=O.ContrastConfig(capacity=8), **base)).checkpoint
    ae = TR.train(data, TR.TrainConfig(method="autoencoder", **base)).checkpoint
    return data, moco, ae


def test_extract_shapes_and_determinism(small_ckpts):
    data, moco, _ = small_ckpts
    a = S.extract_features(moco, data)
    assert a.features.shape == (20, 8) and a.features.dtype == np.float64
    assert a.ids == [s.id for s in data]
    assert a.features.tobytes() == S.extract_features(moco, data).features.tobytes()
    # batching changes BLAS summation order only
    np.testing.assert_allclose(S.extract_features(moco, data, batch_size=7).features, a.features, rtol=1e-5, atol=1e-7)
    proj = S.extract_features(moco, data, "projected")
    np.testing.assert_allclose(np.linalg.norm(proj.features, axis=1), 1.0, atol=1e-5)


def test_extract_autoencoder_has_no_projection(small_ckpts):
    data, _, ae = small_ckpts
    assert S.extract_features(ae, data).features.shape == (20, 8)
    with pytest.raises(ConfigError):
        S.extract_features(ae, data, "projected")
