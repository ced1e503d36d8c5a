import numpy as np
import pytest

from banditseq import autodiff as ad
from banditseq.autodiff import (
    ShapeError,
    Tape,
    add,
    attention_weights,
    concat,
    constant,
    dot,
    embedding_lookup,
    exp,
    finite_difference_check,
    gru_cell,
    log,
    logsumexp,
    matmul,
    matvec,
    mul,
    neg,
    no_grad,
    parameter,
    pick,
    sigmoid,
    softmax,
    stack,
    stack_rows,
    tanh,
    token_log_prob,
    vecmat,
    vsum,
    weighted_rows,
)


def grad_of(build, params):
    with Tape() as tape:
        out = build()
    return tape.backward(out, params)


class TestMatmul:
    def test_identity(self):
        a = constant(np.eye(2))
        b = constant(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert np.array_equal(matmul(a, b).data, b.data)

    def test_small_product(self):
        a = constant(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = constant(np.array([[5.0], [6.0]]))
        assert np.array_equal(matmul(a, b).data, np.array([[17.0], [39.0]]))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 2\).*\(3, 1\)"):
            matmul(constant(np.eye(2)), constant(np.zeros((3, 1))))

    def test_gradient_matches_finite_differences(self, rng):
        a = parameter("a", rng.normal(size=(3, 4)))
        b = parameter("b", rng.normal(size=(4, 2)))
        report = finite_difference_check(
            lambda p: vsum(matmul(p["a"], p["b"])), {"a": a, "b": b},
            step=1e-5, tolerance=1e-6)
        assert report.passed, report.max_rel_error


class TestElementwise:
    def test_tanh_at_zero(self):
        assert np.array_equal(tanh(constant(np.zeros(2))).data, np.zeros(2))

    def test_sigmoid_at_zero(self):
        assert sigmoid(constant(np.zeros(()))).item() == 0.5

    def test_square_derivative(self):
        x = parameter("x", np.array(3.0))
        g = grad_of(lambda: mul(x, x), {"x": x})
        assert g["x"] == pytest.approx(6.0, abs=1e-12)

    def test_scalar_broadcast_both_orders(self):
        t = constant(np.array([1.0, 2.0]))
        assert np.array_equal(mul(t, 3.0).data, np.array([3.0, 6.0]))
        assert np.array_equal(add(-1.0, t).data, np.array([0.0, 1.0]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            add(constant(np.zeros(2)), constant(np.zeros(3)))

    def test_log_domain_error(self):
        with pytest.raises(ValueError, match="domain"):
            log(constant(np.array([1.0, 0.0])))

    def test_scalar_broadcast_gradient_reduces(self):
        s = parameter("s", np.array(2.0))
        v = parameter("v", np.array([1.0, 2.0, 3.0]))
        g = grad_of(lambda: vsum(mul(s, v)), {"s": s, "v": v})
        assert g["s"] == pytest.approx(6.0)
        assert np.allclose(g["v"], 2.0)


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax(constant(np.zeros(2))).data, [0.5, 0.5])

    def test_forced_values(self):
        out = softmax(constant(np.array([np.log(2.0), 0.0]))).data
        assert np.allclose(out, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=7)
        a = softmax(constant(x)).data
        b = softmax(constant(x + 1e3)).data
        assert np.max(np.abs(a - b)) < 1e-12

    def test_sums_to_one_and_positive(self, rng):
        for _ in range(50):
            p = softmax(constant(rng.normal(size=5, scale=10))).data
            assert abs(p.sum() - 1.0) < 1e-12
            assert (p > 0).all()

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            softmax(constant(np.zeros(0)))


class TestEmbeddingLookup:
    def test_row_copy(self):
        row = embedding_lookup(constant(np.eye(3)), 1)
        assert np.array_equal(row.data, [0.0, 1.0, 0.0])

    def test_gradient_scatters_to_row(self):
        table = parameter("t", np.zeros((3, 2)))
        g = grad_of(lambda: vsum(embedding_lookup(table, 1)), {"t": table})
        expected = np.zeros((3, 2))
        expected[1] = 1.0
        assert np.array_equal(g["t"], expected)

    def test_repeated_lookup_accumulates(self):
        table = parameter("t", np.zeros((3, 2)))
        g = grad_of(
            lambda: add(vsum(embedding_lookup(table, 2)),
                        vsum(embedding_lookup(table, 2))),
            {"t": table})
        assert np.array_equal(g["t"][2], [2.0, 2.0])

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            embedding_lookup(constant(np.eye(3)), 3)


class TestBackward:
    def test_unused_parameter_gets_zeros(self):
        x = parameter("x", np.array([1.0, 2.0]))
        y = parameter("y", np.array([3.0]))
        g = grad_of(lambda: vsum(mul(x, x)), {"x": x, "y": y})
        assert np.array_equal(g["y"], np.zeros(1))

    def test_sum_gives_ones(self):
        x = parameter("x", np.arange(6.0).reshape(2, 3))
        g = grad_of(lambda: vsum(x), {"x": x})
        assert np.array_equal(g["x"], np.ones((2, 3)))

    def test_non_scalar_root_rejected(self):
        with Tape() as tape:
            x = parameter("x", np.array([1.0, 2.0]))
            y = mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(y, {"x": x})

    def test_linearity(self, rng):
        x = parameter("x", rng.normal(size=4))
        params = {"x": x}

        def f():
            return vsum(mul(x, x))

        def g():
            return vsum(tanh(x))

        gf = grad_of(f, params)["x"]
        gg = grad_of(g, params)["x"]
        combined = grad_of(lambda: add(mul(2.5, f()), mul(-1.5, g())),
                           params)["x"]
        assert np.max(np.abs(combined - (2.5 * gf - 1.5 * gg))) < 1e-10

    def test_two_backwards_on_one_tape_are_independent(self):
        x = parameter("x", np.array([1.0, 2.0]))
        with Tape() as tape:
            shared = mul(x, x)
            a = vsum(shared)
            b = vsum(mul(shared, 2.0))
        ga = tape.backward(a, {"x": x})["x"]
        gb = tape.backward(b, {"x": x})["x"]
        assert np.allclose(gb, 2.0 * ga)

    def test_determinism_bit_identical(self, rng):
        vals = rng.normal(size=(3, 3))

        def run():
            x = parameter("x", vals.copy())
            g = grad_of(lambda: vsum(tanh(matmul(x, x))), {"x": x})
            return g["x"]

        assert np.array_equal(run(), run())

    def test_no_grad_suppresses_recording(self):
        with Tape() as tape:
            x = parameter("x", np.array([1.0]))
            with no_grad():
                mul(x, x)
        assert tape.nodes == []


class TestFiniteDifferenceCheck:
    def test_sum_of_squares(self):
        x = parameter("x", np.array([1.0, 2.0]))
        report = finite_difference_check(
            lambda p: vsum(mul(p["x"], p["x"])), {"x": x},
            step=1e-5, tolerance=1e-8)
        assert report.passed

    def test_constant_function_zero_gradients(self):
        x = parameter("x", np.array([1.0, 2.0]))
        report = finite_difference_check(
            lambda p: constant(np.array(3.0)), {"x": x})
        assert report.max_rel_error == 0.0

    def test_step_must_be_positive(self):
        x = parameter("x", np.array([1.0]))
        with pytest.raises(ValueError):
            finite_difference_check(lambda p: vsum(p["x"]), {"x": x}, step=0.0)

    def test_non_finite_rejected(self):
        x = parameter("x", np.array([1.0]))
        with np.errstate(over="ignore"):
            with pytest.raises(ValueError, match="non-finite"):
                finite_difference_check(
                    lambda p: vsum(exp(mul(p["x"], 1e4))), {"x": x})


# Builders for the randomized per-op sweep. Each returns (params, f) where
# f maps the parameter dict to a scalar output.
def _unary(op, positive=False):
    def build(rng):
        data = rng.uniform(0.5, 2.0, size=4) if positive \
            else rng.normal(size=4)
        x = parameter("x", data)
        return {"x": x}, lambda p: vsum(op(p["x"]))

    return build


def _binary(op):
    def build(rng):
        x = parameter("x", rng.normal(size=4))
        y = parameter("y", rng.normal(size=4))
        return {"x": x, "y": y}, lambda p: vsum(op(p["x"], p["y"]))

    return build


def _build_matmul(rng):
    a = parameter("a", rng.normal(size=(3, 2)))
    b = parameter("b", rng.normal(size=(2, 4)))
    return {"a": a, "b": b}, lambda p: vsum(matmul(p["a"], p["b"]))


def _build_matvec(rng):
    m = parameter("m", rng.normal(size=(3, 4)))
    v = parameter("v", rng.normal(size=4))
    return {"m": m, "v": v}, lambda p: vsum(matvec(p["m"], p["v"]))


def _build_vecmat(rng):
    m = parameter("m", rng.normal(size=(4, 3)))
    v = parameter("v", rng.normal(size=4))
    return {"m": m, "v": v}, lambda p: vsum(vecmat(p["v"], p["m"]))


def _build_dot(rng):
    a = parameter("a", rng.normal(size=5))
    b = parameter("b", rng.normal(size=5))
    return {"a": a, "b": b}, lambda p: dot(p["a"], p["b"])


def _build_softmax(rng):
    x = parameter("x", rng.normal(size=5))
    w = constant(rng.normal(size=5))
    return {"x": x}, lambda p: dot(softmax(p["x"]), w)


def _build_logsumexp(rng):
    x = parameter("x", rng.normal(size=5))
    return {"x": x}, lambda p: logsumexp(p["x"])


def _build_pick(rng):
    x = parameter("x", rng.normal(size=5))
    i = int(rng.integers(5))
    return {"x": x}, lambda p: mul(pick(p["x"], i), 2.0)


def _build_concat(rng):
    a = parameter("a", rng.normal(size=2))
    b = parameter("b", rng.normal(size=3))
    w = constant(rng.normal(size=5))
    return {"a": a, "b": b}, lambda p: dot(concat([p["a"], p["b"]]), w)


def _build_stack(rng):
    a = parameter("a", rng.normal(size=()))
    b = parameter("b", rng.normal(size=()))
    w = constant(rng.normal(size=2))
    return {"a": a, "b": b}, lambda p: dot(stack([p["a"], p["b"]]), w)


def _build_stack_rows(rng):
    a = parameter("a", rng.normal(size=3))
    b = parameter("b", rng.normal(size=3))
    w = constant(rng.normal(size=3))
    return {"a": a, "b": b}, \
        lambda p: vsum(matvec(stack_rows([p["a"], p["b"]]), w))


def _build_embedding(rng):
    t = parameter("t", rng.normal(size=(4, 3)))
    i = int(rng.integers(4))
    return {"t": t}, lambda p: vsum(embedding_lookup(p["t"], i))


def _build_gru_cell(rng):
    names = ["wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"]
    h_dim, x_dim = 3, 2
    params = {"x": parameter("x", rng.normal(size=x_dim)),
              "h": parameter("h", rng.normal(size=h_dim))}
    for n in names:
        if n.startswith("w"):
            params[n] = parameter(n, rng.normal(size=(h_dim, x_dim)))
        elif n.startswith("u"):
            params[n] = parameter(n, rng.normal(size=(h_dim, h_dim)))
        else:
            params[n] = parameter(n, rng.normal(size=h_dim))
    w = constant(rng.normal(size=h_dim))
    return params, lambda p: dot(gru_cell(p["x"], p["h"], p["wz"], p["uz"],
                                          p["bz"], p["wr"], p["ur"], p["br"],
                                          p["wh"], p["uh"], p["bh"]), w)


def _build_attention(rng):
    t_x, a_dim, s_dim = 3, 2, 2
    params = {
        "s": parameter("s", rng.normal(size=s_dim)),
        "proj": parameter("proj", rng.normal(size=(t_x, a_dim))),
        "w": parameter("w", rng.normal(size=(a_dim, s_dim))),
        "v": parameter("v", rng.normal(size=a_dim)),
        "rows": parameter("rows", rng.normal(size=(t_x, 4))),
    }

    def f(p):
        alpha = attention_weights(p["s"], p["proj"], p["w"], p["v"])
        return vsum(mul(weighted_rows(alpha, p["rows"]),
                        constant(np.arange(1.0, 5.0))))

    return params, f


def _build_token_log_prob(rng):
    x = parameter("x", rng.normal(size=5))
    i = int(rng.integers(5))
    negated = bool(rng.integers(2))
    return {"x": x}, lambda p: token_log_prob(p["x"], i, negated)


OP_BUILDERS = {
    "tanh": _unary(tanh),
    "sigmoid": _unary(sigmoid),
    "exp": _unary(exp),
    "log": _unary(log, positive=True),
    "neg": _unary(neg),
    "add": _binary(add),
    "mul": _binary(mul),
    "matmul": _build_matmul,
    "matvec": _build_matvec,
    "vecmat": _build_vecmat,
    "dot": _build_dot,
    "softmax": _build_softmax,
    "logsumexp": _build_logsumexp,
    "pick": _build_pick,
    "concat": _build_concat,
    "stack": _build_stack,
    "stack_rows": _build_stack_rows,
    "embedding_lookup": _build_embedding,
    "gru_cell": _build_gru_cell,
    "attention": _build_attention,
    "token_log_prob": _build_token_log_prob,
}


@pytest.mark.parametrize("name", sorted(OP_BUILDERS))
def test_every_op_matches_finite_differences(name):
    for seed in range(100):
        rng = np.random.default_rng([seed, hash(name) % (2 ** 32)])
        params, f = OP_BUILDERS[name](rng)
        report = finite_difference_check(f, params, step=1e-5, tolerance=1e-4)
        assert report.passed, f"{name} seed {seed}: {report.max_rel_error}"


def test_forward_values_stay_finite(rng):
    for _ in range(200):
        x = constant(rng.normal(scale=3.0, size=4))
        for op in (tanh, sigmoid, neg, softmax):
            assert np.isfinite(op(x).data).all()


class TestFusedAgainstElementary:
    """The fused kernels must agree with their elementary-op compositions,
    both in value and in gradient."""

    def test_gru_cell_matches_composition(self, rng):
        params, f = _build_gru_cell(rng)

        def elementary(p):
            z = sigmoid(add(add(matvec(p["wz"], p["x"]),
                                matvec(p["uz"], p["h"])), p["bz"]))
            r = sigmoid(add(add(matvec(p["wr"], p["x"]),
                                matvec(p["ur"], p["h"])), p["br"]))
            cand = tanh(add(add(matvec(p["wh"], p["x"]),
                                matvec(p["uh"], mul(r, p["h"]))), p["bh"]))
            out = add(mul(add(neg(z), 1.0), p["h"]), mul(z, cand))
            return vsum(out)

        with Tape() as tape:
            fused = f(params)
        g_fused = tape.backward(fused, params)
        with Tape() as tape:
            plain = elementary(params)
        g_plain = tape.backward(plain, params)
        # value of f is dot(out, w); compare the elementary vsum variant via
        # gradients of a shared scalar instead: rebuild f as vsum too.
        with Tape() as tape:
            fused_sum = vsum(gru_cell(params["x"], params["h"], params["wz"],
                                      params["uz"], params["bz"], params["wr"],
                                      params["ur"], params["br"], params["wh"],
                                      params["uh"], params["bh"]))
        g_fused_sum = tape.backward(fused_sum, params)
        assert float(fused_sum.data) == pytest.approx(float(plain.data),
                                                      abs=1e-12)
        for name in params:
            assert np.max(np.abs(g_fused_sum[name] - g_plain[name])) < 1e-10
        assert g_fused  # silence unused warning path

    def test_token_log_prob_matches_pick_logsumexp(self, rng):
        x = parameter("x", rng.normal(size=6))
        with Tape() as tape:
            fused = token_log_prob(x, 2, False)
        gf = tape.backward(fused, {"x": x})
        with Tape() as tape:
            plain = add(pick(x, 2), neg(logsumexp(x)))
        gp = tape.backward(plain, {"x": x})
        assert float(fused.data) == pytest.approx(float(plain.data), abs=1e-12)
        assert np.max(np.abs(gf["x"] - gp["x"])) < 1e-12

    def test_token_log_prob_negated_matches(self, rng):
        x = parameter("x", rng.normal(size=6))
        with Tape() as tape:
            fused = token_log_prob(x, 1, True)
        gf = tape.backward(fused, {"x": x})
        with Tape() as tape:
            nl = neg(x)
            plain = add(pick(nl, 1), neg(logsumexp(nl)))
        gp = tape.backward(plain, {"x": x})
        assert float(fused.data) == pytest.approx(float(plain.data), abs=1e-12)
        assert np.max(np.abs(gf["x"] - gp["x"])) < 1e-12

    def test_attention_matches_composition(self, rng):
        params, _ = _build_attention(rng)
        s, proj, w, v, rows = (params[k] for k in ("s", "proj", "w", "v",
                                                   "rows"))
        weights = constant(np.arange(1.0, 5.0))

        def fused(p):
            alpha = attention_weights(p["s"], p["proj"], p["w"], p["v"])
            return dot(weighted_rows(alpha, p["rows"]), weights)

        def elementary(p):
            q = matvec(p["w"], p["s"])
            energies = [dot(p["v"], tanh(add(pickrow(p["proj"], i), q)))
                        for i in range(3)]
            alpha = softmax(stack(energies))
            ctx = mul(pick(alpha, 0), pickrow(p["rows"], 0))
            for i in range(1, 3):
                ctx = add(ctx, mul(pick(alpha, i), pickrow(p["rows"], i)))
            return dot(ctx, weights)

        def pickrow(mat, i):
            return embedding_lookup(mat, i)

        with Tape() as tape:
            a = fused(params)
        ga = tape.backward(a, params)
        with Tape() as tape:
            b = elementary(params)
        gb = tape.backward(b, params)
        assert float(a.data) == pytest.approx(float(b.data), abs=1e-12)
        for name in params:
            assert np.max(np.abs(ga[name] - gb[name])) < 1e-10
