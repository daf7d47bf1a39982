import math

import numpy as np
import pytest

from fusionkit.matrix import Matrix, ShapeError
from fusionkit.numerics import (
    CrossAttnLayer,
    CrossAttnParams,
    MlpParams,
    cosine_similarity_matrix,
    cross_attention,
    cross_attention_input_grad,
    finite_diff_grad,
    matmul,
    mlp_forward,
    mlp_input_grad,
    softmax_rows,
)

from oracles import (
    naive_cosine,
    naive_matmul,
    naive_mlp,
    naive_single_head_attention,
    naive_softmax_rows,
)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


# ------------------------------------------------------------------ matmul


def test_matmul_matches_triple_loop_bitwise():
    rng = np.random.default_rng(42)
    a = rng.standard_normal((5, 4))
    b = rng.standard_normal((4, 3))
    got = matmul(Matrix(a), Matrix(b)).data
    want = np.array(naive_matmul(a.tolist(), b.tolist()))
    assert np.array_equal(got, want), "same summation order must agree bitwise"


def test_matmul_identity_is_exact():
    rng = np.random.default_rng(1)
    m = rng.standard_normal((6, 6))
    assert np.array_equal(matmul(Matrix.identity(6), Matrix(m)).data, m)
    assert np.array_equal(matmul(Matrix(m), Matrix.identity(6)).data, m)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Matrix.zeros(2, 3), Matrix.zeros(4, 2))


# ----------------------------------------------------------------- softmax


def test_softmax_fixture_quarter_three_quarters():
    out = softmax_rows(Matrix([[0.0, math.log(3.0)]])).data
    assert out[0] == pytest.approx([0.25, 0.75], abs=1e-12)


def test_softmax_rows_sum_to_one_and_match_oracle():
    rng = np.random.default_rng(3)
    x = rng.uniform(-700.0, 700.0, size=(20, 9))
    out = softmax_rows(Matrix(x)).data
    assert np.all(out >= 0.0)
    assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-12
    want = np.array(naive_softmax_rows(x.tolist()))
    assert rel_err(out, want) < 1e-12


def test_softmax_is_deterministic():
    rng = np.random.default_rng(4)
    m = Matrix(rng.standard_normal((8, 8)))
    first = softmax_rows(m).data
    second = softmax_rows(m).data
    assert np.array_equal(first, second)


# --------------------------------------------------------------------- mlp


def test_mlp_matches_naive_oracle_bitwise():
    rng = np.random.default_rng(5)
    p = MlpParams.random(6, 11, 4, rng)
    x = rng.standard_normal((7, 6))
    got = mlp_forward(Matrix(x), p).data
    want = np.array(
        naive_mlp(
            x.tolist(),
            p.w1.data.tolist(),
            p.b1.tolist(),
            p.w2.data.tolist(),
            p.b2.tolist(),
        )
    )
    assert np.array_equal(got, want)


def test_mlp_identity_params_act_as_relu():
    x = np.array([[-1.0, 2.0], [3.0, -4.0]])
    out = mlp_forward(Matrix(x), MlpParams.identity(2)).data
    assert np.array_equal(out, np.maximum(x, 0.0))


def test_mlp_shape_validation():
    p = MlpParams.identity(3)
    with pytest.raises(ShapeError):
        mlp_forward(Matrix.zeros(2, 4), p)
    with pytest.raises(ShapeError):
        MlpParams(Matrix.zeros(3, 4), np.zeros(5), Matrix.zeros(4, 2), np.zeros(2))
    with pytest.raises(ShapeError):
        MlpParams(Matrix.zeros(3, 4), np.zeros(4), Matrix.zeros(5, 2), np.zeros(2))


# --------------------------------------------------------- cross attention


def test_single_layer_attention_matches_stepwise_oracle():
    rng = np.random.default_rng(6)
    d = 4
    q = rng.standard_normal((3, d))
    kv = rng.standard_normal((5, d))
    layer = CrossAttnLayer(
        Matrix(rng.standard_normal((d, d))),
        Matrix(rng.standard_normal((d, d))),
        Matrix(rng.standard_normal((d, d))),
        Matrix(rng.standard_normal((d, d))),
    )
    p = CrossAttnParams((layer,))
    got = cross_attention(Matrix(q), Matrix(kv), Matrix(kv), p).data
    want = np.array(
        naive_single_head_attention(
            q.tolist(),
            kv.tolist(),
            kv.tolist(),
            layer.wq.data.tolist(),
            layer.wk.data.tolist(),
            layer.wv.data.tolist(),
            layer.wo.data.tolist(),
        )
    )
    assert rel_err(got, want) < 1e-12


def test_single_key_value_row_identity_returns_v():
    p = CrossAttnParams.identity(3, num_layers=1)
    q = Matrix([[5.0, -2.0, 0.5], [0.0, 0.0, 0.0]])
    v = Matrix([[1.0, 2.0, 3.0]])
    out = cross_attention(q, v, v, p).data
    assert np.array_equal(out, np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]))


def test_two_layers_chain_queries_with_fixed_kv():
    rng = np.random.default_rng(7)
    d = 4
    q = Matrix(rng.standard_normal((3, d)))
    kv = Matrix(rng.standard_normal((6, d)))
    p2 = CrossAttnParams.random(d, num_layers=2, rng=np.random.default_rng(8))
    first = CrossAttnParams((p2.layers[0],))
    second = CrossAttnParams((p2.layers[1],))
    chained = cross_attention(
        cross_attention(q, kv, kv, first), kv, kv, second
    )
    assert chained == cross_attention(q, kv, kv, p2)


def test_default_layer_count_is_two():
    assert CrossAttnParams.identity(4).num_layers == 2
    assert CrossAttnParams.random(4).num_layers == 2


def test_multi_head_splits_columns():
    rng = np.random.default_rng(9)
    d = 8
    q = Matrix(rng.standard_normal((3, d)))
    kv = Matrix(rng.standard_normal((5, d)))
    p = CrossAttnParams.random(d, num_layers=1, num_heads=2,
                               rng=np.random.default_rng(10))
    out = cross_attention(q, kv, kv, p).data

    # oracle: run each head on its column block with identity mixing,
    # then apply wo once
    layer = p.layers[0]
    qp = np.array(naive_matmul(q.data.tolist(), layer.wq.data.tolist()))
    kp = np.array(naive_matmul(kv.data.tolist(), layer.wk.data.tolist()))
    vp = np.array(naive_matmul(kv.data.tolist(), layer.wv.data.tolist()))
    mixed = np.zeros_like(qp)
    hd = d // 2
    for h in range(2):
        sl = slice(h * hd, (h + 1) * hd)
        logits = qp[:, sl] @ kp[:, sl].T / math.sqrt(hd)
        probs = np.array(naive_softmax_rows(logits.tolist()))
        mixed[:, sl] = probs @ vp[:, sl]
    want = mixed @ layer.wo.data
    assert rel_err(out, want) < 1e-12


def test_kv_permutation_invariance():
    rng = np.random.default_rng(11)
    d = 6
    q = Matrix(rng.standard_normal((4, d)))
    kv = rng.standard_normal((9, d))
    p = CrossAttnParams.random(d, rng=np.random.default_rng(12))
    base = cross_attention(q, Matrix(kv), Matrix(kv), p).data
    perm = rng.permutation(9)
    out = cross_attention(q, Matrix(kv[perm]), Matrix(kv[perm]), p).data
    assert rel_err(base, out) < 1e-12


def test_cross_attention_shape_checks():
    p = CrossAttnParams.identity(4)
    with pytest.raises(ShapeError):
        cross_attention(Matrix.zeros(2, 3), Matrix.zeros(5, 4), Matrix.zeros(5, 4), p)
    with pytest.raises(ShapeError):
        cross_attention(Matrix.zeros(2, 4), Matrix.zeros(5, 4), Matrix.zeros(6, 4), p)
    with pytest.raises(ShapeError):
        CrossAttnParams.identity(6, num_heads=4)
    with pytest.raises(ShapeError):
        CrossAttnParams(())


# --------------------------------------------------------------- gradients


def test_finite_diff_on_quadratic():
    rng = np.random.default_rng(13)
    x = Matrix(rng.standard_normal((3, 4)))

    def f(m: Matrix) -> float:
        return float((m.data**2).sum())

    grad = finite_diff_grad(f, x).data
    assert rel_err(grad, 2.0 * x.data) < 1e-8


def test_mlp_analytic_grad_matches_finite_difference():
    rng = np.random.default_rng(14)
    p = MlpParams.random(5, 9, 3, rng)
    x = Matrix(rng.standard_normal((4, 5)))
    upstream = Matrix(rng.standard_normal((4, 3)))

    def loss(m: Matrix) -> float:
        return float((upstream.data * mlp_forward(m, p).data).sum())

    analytic = mlp_input_grad(x, p, upstream).data
    fd = finite_diff_grad(loss, x).data
    assert rel_err(analytic, fd) < 1e-4


@pytest.mark.parametrize("num_heads,residual,layer_norm", [
    (1, False, False),
    (2, False, False),
    (1, True, False),
    (1, True, True),
])
def test_cross_attention_analytic_grad_matches_fd(num_heads, residual, layer_norm):
    rng = np.random.default_rng(15 + num_heads + 2 * residual + 4 * layer_norm)
    d = 8
    base = CrossAttnParams.random(d, num_layers=2, num_heads=num_heads, rng=rng)
    p = CrossAttnParams(
        base.layers,
        num_heads=num_heads,
        use_residual=residual,
        use_layer_norm=layer_norm,
    )
    q = Matrix(rng.standard_normal((3, d)))
    kv = Matrix(rng.standard_normal((6, d)))
    upstream = Matrix(rng.standard_normal((3, d)))

    def loss(m: Matrix) -> float:
        return float((upstream.data * cross_attention(m, kv, kv, p).data).sum())

    analytic = cross_attention_input_grad(q, kv, kv, p, upstream).data
    fd = finite_diff_grad(loss, q).data
    assert rel_err(analytic, fd) < 1e-4


# ------------------------------------------------------------------ cosine


def test_cosine_fixture_and_zero_rows():
    s = cosine_similarity_matrix(
        Matrix([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]]),
        Matrix([[1.0, 0.0]]),
    ).data
    assert s[0, 0] == 1.0
    assert s[1, 0] == 0.0
    assert abs(s[2, 0] - 1.0 / math.sqrt(2.0)) < 1e-12
    assert s[3, 0] == 0.0, "zero-norm row compares as 0 by definition"


def test_cosine_self_similarity_is_exactly_one():
    rng = np.random.default_rng(16)
    a = Matrix(rng.standard_normal((10, 7)))
    s = cosine_similarity_matrix(a, a).data
    assert np.array_equal(np.diag(s), np.ones(10))


def test_cosine_matches_naive_oracle_and_scale_invariance():
    rng = np.random.default_rng(17)
    a = rng.standard_normal((6, 5))
    b = rng.standard_normal((4, 5))
    s = cosine_similarity_matrix(Matrix(a), Matrix(b)).data
    for i in range(6):
        for j in range(4):
            assert abs(s[i, j] - naive_cosine(a[i], b[j])) < 1e-12
    scaled = cosine_similarity_matrix(Matrix(3.7 * a), Matrix(b)).data
    assert np.abs(s - scaled).max() < 1e-12
    assert np.abs(s).max() <= 1.0 + 1e-12


def test_cosine_width_mismatch():
    with pytest.raises(ShapeError):
        cosine_similarity_matrix(Matrix.zeros(2, 3), Matrix.zeros(2, 4))
