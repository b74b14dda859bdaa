import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyperlabel import gradkernel as gk
from hyperlabel import hlmnet
from hyperlabel.errors import (
    ContractViolation,
    CorruptModelError,
    ModelShapeError,
    ModelVersionError,
)

from conftest import label_matrices, random_matrix


@pytest.fixture(scope="module")
def params():
    return hlmnet.init_params(K=2, d=6, seed=3)


def test_full_matrix_has_nm_nodes():
    g = hlmnet.encode(np.ones((3, 4), dtype=int))
    assert g.num_nodes == 12


def test_node_lists_for_sparse_matrix():
    g = hlmnet.encode([[1, 0], [0, -1]])
    assert g.num_nodes == 2
    assert g.row_lists() == [[0], [1]]
    assert g.col_lists()[1] == [1]
    assert g.node_value.tolist() == [1, -1]


def test_all_abstain_row_has_empty_list():
    g = hlmnet.encode([[1, 1], [0, 0], [-1, 0]])
    assert g.row_lists()[1] == []


@given(label_matrices(max_n=7, max_m=5))
def test_row_and_column_lists_partition_nodes(X):
    if not X.any():
        return
    g = hlmnet.encode(X)
    for lists in (g.row_lists(), g.col_lists()):
        flat = sorted(v for lst in lists for v in lst)
        assert flat == list(range(g.num_nodes))
    assert g.num_nodes == int(np.count_nonzero(X))


def test_empty_matrix_rejected(params):
    with pytest.raises(ContractViolation, match="empty label matrix"):
        hlmnet.forward(params, np.zeros((3, 2), dtype=int))


def test_init_is_seeded_and_bounded():
    a = hlmnet.init_params(4, 8, seed=1)
    b = hlmnet.init_params(4, 8, seed=1)
    c = hlmnet.init_params(4, 8, seed=2)
    assert a.equals(b)
    assert not a.equals(c)
    for name, arr in a.arrays.items():
        assert arr.shape == hlmnet.param_shapes(4, 8)[name]
        assert np.all(np.abs(arr) <= hlmnet.init_bound(name, 4, 8))
    assert hlmnet.init_bound("layer0.f_weight", 4, 8) == pytest.approx(1 / np.sqrt(32))
    assert hlmnet.init_bound("layer0.f_bias", 4, 8) == pytest.approx(1 / np.sqrt(32))


def test_forward_matches_dense_reference(params, rng):
    for n, m in [(1, 1), (4, 3), (9, 5), (12, 7)]:
        X = random_matrix(rng, n, m)
        np.testing.assert_allclose(
            hlmnet.forward(params, X), hlmnet.reference_forward(params, X), rtol=0, atol=1e-12
        )


def test_all_abstain_row_gets_half(params):
    probs = hlmnet.forward(params, [[1, -1], [0, 0], [1, 1]])
    assert probs[1] == 0.5
    assert np.all((probs[[0, 2]] > 0) & (probs[[0, 2]] < 1))


def test_output_depends_only_on_non_zero_entries(params, rng):
    X = random_matrix(rng, 6, 4)
    padded = np.hstack([X, np.zeros((6, 3), dtype=int)])
    np.testing.assert_allclose(hlmnet.forward(params, padded), hlmnet.forward(params, X), atol=1e-12)


@given(label_matrices(max_n=8, max_m=6), st.randoms(use_true_random=False))
def test_permutation_symmetries(X, r):
    if not X.any():
        return
    params = hlmnet.init_params(2, 5, seed=11)
    rows = list(range(X.shape[0]))
    cols = list(range(X.shape[1]))
    r.shuffle(rows)
    r.shuffle(cols)
    base = hlmnet.forward(params, X)
    np.testing.assert_allclose(hlmnet.forward(params, X[:, cols]), base, atol=1e-8, rtol=0)
    np.testing.assert_allclose(hlmnet.forward(params, X[rows]), base[rows], atol=1e-8, rtol=0)


def test_batched_forward_equals_separate(params, rng):
    mats = [random_matrix(rng, n, m) for n, m in [(5, 3), (8, 2), (3, 6)]]
    for got, X in zip(hlmnet.forward_many(params, mats), mats):
        np.testing.assert_allclose(got, hlmnet.forward(params, X), atol=1e-12)


def test_fused_layer_gradients_match_unfused_ops(rng):
    # same layer built from primitive ops; gradients must agree
    X = random_matrix(rng, 7, 4)
    g = hlmnet.encode(X)
    d = 3
    V0 = rng.normal(size=(g.num_nodes, d))
    Ws = [rng.normal(size=(d, d)) for _ in range(4)]
    bias = rng.normal(size=d)

    def primitive(V, Wc, Wr, Wg, Wo, b):
        terms = [
            (gk.matmul(gk.group_mean(V, g.col_groups), Wc), g.col_groups),
            (gk.matmul(gk.group_mean(V, g.row_groups), Wr), g.row_groups),
            (gk.add(gk.matmul(gk.group_mean(V, g.graph_groups), Wg), b), g.graph_groups),
        ]
        return gk.relu(gk.gather_sum(gk.matmul(V, Wo), terms))

    outs = []
    for fn in (primitive, lambda *a: hlmnet._layer(a[0], g, *a[1:])):
        ts = [gk.param(a) for a in [V0, *Ws, bias]]
        out = fn(*ts)
        gk.backward(gk.mean(gk.matmul(out, gk.constant(np.arange(1.0, d + 1)[:, None]))))
        outs.append((out.value, [t.grad for t in ts]))
    np.testing.assert_allclose(outs[0][0], outs[1][0], atol=1e-12)
    for a, b in zip(outs[0][1], outs[1][1]):
        np.testing.assert_allclose(a, b, atol=1e-12)


# -- persistence -------------------------------------------------------------

def test_save_load_round_trip_is_bit_exact(tmp_path, rng):
    p = hlmnet.init_params(2, 4, seed=5)
    p.arrays["embed"][0, 0] = 0.1 + 0.2      # needs all 17 digits
    path = tmp_path / "m.json"
    hlmnet.save_params(path, p)
    q = hlmnet.load_params(path)
    assert q.equals(p)
    assert (q.K, q.d, q.version) == (2, 4, hlmnet.FORMAT_VERSION)


def test_version_shape_and_corruption_errors_are_distinct(tmp_path):
    p = hlmnet.init_params(1, 2, seed=0)
    doc = json.loads(hlmnet.params_to_json(p))
    bad_version = dict(doc, version=99)
    with pytest.raises(ModelVersionError):
        hlmnet.params_from_json(json.dumps(bad_version))
    bad_shape = json.loads(json.dumps(doc))
    bad_shape["arrays"]["embed"] = [[0.0, 0.0, 0.0]]
    with pytest.raises(ModelShapeError):
        hlmnet.params_from_json(json.dumps(bad_shape))
    with pytest.raises(CorruptModelError):
        hlmnet.params_from_json('{"version": 1, "K"')
    missing = json.loads(json.dumps(doc))
    del missing["arrays"]["head2.bias"]
    with pytest.raises(ModelShapeError):
        hlmnet.params_from_json(json.dumps(missing))
