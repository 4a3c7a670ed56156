#include <doctest.h>

#include <cmath>

#include "hybridvfl/autodiff.hpp"
#include "testutil.hpp"

using namespace hvfl;
using testutil::rand_tensor;

namespace {

// Independent oracle: triple-loop matmul, written before the fast path.
Tensor matmul_reference(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) acc += a.at2(i, t) * b.at2(t, j);
            c.at2(i, j) = acc;
        }
    return c;
}

}  // namespace

TEST_CASE("tensor shape and data stay consistent") {
    Tensor t(Shape{2, 3});
    CHECK(t.size() == 6);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, {1.0, 2.0, 3.0}), DimensionError);
    CHECK(Tensor::scalar(4.0).is_scalar());
    CHECK(Tensor::scalar(4.0).scalar_value() == 4.0);
}

TEST_CASE("matmul identity and scalar cases") {
    Graph g;
    GraphVar eye = g.leaf(Tensor({2, 2}, {1, 0, 0, 1}));
    GraphVar b = g.leaf(Tensor({2, 2}, {3, 4, 5, 6}));
    const Tensor& c = g.value(g.matmul(eye, b));
    CHECK(c.vec() == std::vector<double>{3, 4, 5, 6});

    GraphVar x = g.leaf(Tensor({1, 1}, {2}));
    GraphVar y = g.leaf(Tensor({1, 1}, {3}));
    CHECK(g.value(g.matmul(x, y))[0] == 6.0);
}

TEST_CASE("matmul matches the triple-loop reference") {
    Rng rng(7);
    Tensor a = rand_tensor({4, 3}, rng);
    Tensor b = rand_tensor({3, 5}, rng);
    Graph g;
    const Tensor& fast = g.value(g.matmul(g.leaf(a), g.leaf(b)));
    Tensor ref = matmul_reference(a, b);
    CHECK(fast.max_abs_diff(ref) < 1e-12);
}

TEST_CASE("matmul rejects mismatched shapes with both shapes in the message") {
    Graph g;
    GraphVar a = g.leaf(Tensor(Shape{4, 3}));
    GraphVar b = g.leaf(Tensor(Shape{5, 2}));
    try {
        g.matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[4,3]") != std::string::npos);
        CHECK(msg.find("[5,2]") != std::string::npos);
    }
}

TEST_CASE("elementwise basics") {
    Graph g;
    GraphVar x = g.leaf(Tensor({3}, {-1, 0, 2}));
    CHECK(g.value(g.relu(x)).vec() == std::vector<double>{0, 0, 2});

    GraphVar zero = g.leaf(Tensor(Shape{3}));
    const Tensor& same = g.value(g.add(x, zero));
    CHECK(same.vec() == std::vector<double>{-1, 0, 2});
}

TEST_CASE("exp then log round-trips") {
    Rng rng(3);
    Tensor x = rand_tensor({4, 4}, rng, 0.1, 3.0);
    Graph g;
    const Tensor& back = g.value(g.log(g.exp(g.leaf(x))));
    CHECK(back.max_abs_diff(x) < 1e-12);
}

TEST_CASE("numeric domain errors") {
    Graph g;
    GraphVar a = g.leaf(Tensor({2}, {1, 2}));
    GraphVar zero = g.leaf(Tensor({2}, {1, 0}));
    CHECK_THROWS_AS(g.div(a, zero), NumericDomainError);
    CHECK_THROWS_AS(g.div_scalar(a, 0.0), NumericDomainError);
    GraphVar neg = g.leaf(Tensor({2}, {1, -1}));
    CHECK_THROWS_AS(g.log(neg), NumericDomainError);
    // overflow to infinity is an error state, not a silent value
    GraphVar big = g.leaf(Tensor({1}, {800.0}));
    CHECK_THROWS_AS(g.exp(big), NumericDomainError);
}

TEST_CASE("backward of sum(x*x) is 2x") {
    Tensor x({3}, {1, 2, 3});
    x.requires_grad = true;
    Graph g;
    GraphVar leaf = g.leaf(x);
    GraphVar loss = g.sum_all(g.mul(leaf, leaf));
    GradTable grads = g.backward(loss);
    CHECK(grads.at(leaf).vec() == std::vector<double>{2, 4, 6});
}

TEST_CASE("backward of sum(x) is ones") {
    Tensor x({4}, {5, -1, 0, 2});
    x.requires_grad = true;
    Graph g;
    GraphVar leaf = g.leaf(x);
    GradTable grads = g.backward(g.sum_all(leaf));
    CHECK(grads.at(leaf).vec() == std::vector<double>{1, 1, 1, 1});
}

TEST_CASE("backward twice on the same graph is deterministic") {
    Rng rng(11);
    Tensor x = rand_tensor({3, 3}, rng);
    x.requires_grad = true;
    Graph g;
    GraphVar leaf = g.leaf(x);
    GraphVar loss = g.sum_all(g.mul(g.relu(leaf), leaf));
    GradTable g1 = g.backward(loss);
    GradTable g2 = g.backward(loss);
    CHECK(g1.at(leaf).max_abs_diff(g2.at(leaf)) == 0.0);
}

TEST_CASE("backward requires a scalar loss") {
    Tensor x({2, 2}, {1, 2, 3, 4});
    x.requires_grad = true;
    Graph g;
    GraphVar leaf = g.leaf(x);
    CHECK_THROWS_AS(g.backward(leaf), ContractError);
}

TEST_CASE("unreached requires_grad leaves get zero gradients") {
    Tensor x({2}, {1, 2});
    x.requires_grad = true;
    Tensor unused({3}, {7, 8, 9});
    unused.requires_grad = true;
    Graph g;
    GraphVar leaf = g.leaf(x);
    GraphVar spare = g.leaf(unused);
    GradTable grads = g.backward(g.sum_all(leaf));
    CHECK(grads.at(spare).vec() == std::vector<double>{0, 0, 0});
}

TEST_CASE("finite_diff_check on a sum of squares is tiny") {
    Tensor x({2}, {1, 2});
    const double err = finite_diff_check(
        [](Graph& g, GraphVar v) { return g.sum_all(g.mul(v, v)); }, x, 1e-5);
    CHECK(err < 1e-8);
}

TEST_CASE("finite_diff_check rejects a non-deterministic function") {
    Tensor x({2}, {1, 2});
    int calls = 0;
    auto f = [&calls](Graph& g, GraphVar v) {
        ++calls;
        return g.sum_all(g.mul_scalar(v, static_cast<double>(calls)));
    };
    CHECK_THROWS_AS(finite_diff_check(f, x, 1e-5), OracleInvalidError);
}

TEST_CASE("finite_diff_check on cosine consistency at random nonzero pairs") {
    Rng rng(21);
    for (int trial = 0; trial < 3; ++trial) {
        Tensor a = rand_tensor({3, 4}, rng, 0.2, 1.0);
        Tensor b = rand_tensor({3, 4}, rng, 0.2, 1.0);
        const double err = finite_diff_check_multi(
            [](Graph& g, const std::vector<GraphVar>& vs) {
                return g.cosine_consistency(vs[0], vs[1]);
            },
            {a, b}, 1e-5);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("every primitive op passes the finite-difference oracle on random shapes") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed * 97 + 1);
        const std::size_t m = 1 + rng.below(8), k = 1 + rng.below(8), n = 1 + rng.below(8);

        Tensor a = rand_tensor({m, k}, rng);
        Tensor b = rand_tensor({k, n}, rng);
        CHECK(finite_diff_check_multi(
                  [](Graph& g, const std::vector<GraphVar>& vs) {
                      return g.sum_all(g.matmul(vs[0], vs[1]));
                  },
                  {a, b}, 1e-5) < 1e-4);

        Tensor u = rand_tensor({m, n}, rng, 0.5, 2.0);
        Tensor v = rand_tensor({m, n}, rng, 0.5, 2.0);
        CHECK(finite_diff_check_multi(
                  [](Graph& g, const std::vector<GraphVar>& vs) {
                      GraphVar prod = g.mul(vs[0], vs[1]);
                      GraphVar mix = g.add(g.div(vs[0], vs[1]), g.sub(prod, vs[1]));
                      return g.sum_all(g.mul(mix, mix));
                  },
                  {u, v}, 1e-5) < 1e-4);

        Tensor w = rand_tensor({m, n}, rng, 0.1, 2.0);
        CHECK(finite_diff_check(
                  [](Graph& g, GraphVar x) {
                      return g.sum_all(g.log(g.add_scalar(g.exp(g.mul_scalar(x, 0.5)), 1.0)));
                  },
                  w, 1e-5) < 1e-4);

        Tensor r = rand_tensor({m, n}, rng, -2.0, 2.0);
        CHECK(finite_diff_check(
                  [](Graph& g, GraphVar x) { return g.sum_all(g.mul(g.relu(x), x)); }, r,
                  1e-5) < 1e-4);

        Tensor s3 = rand_tensor({2, m, n}, rng);
        CHECK(finite_diff_check(
                  [](Graph& g, GraphVar x) {
                      return g.sum_all(g.mul(g.transpose_last2(x), g.transpose_last2(x)));
                  },
                  s3, 1e-5) < 1e-4);

        Tensor q = rand_tensor({2, m, k}, rng);
        Tensor kk = rand_tensor({2, k, n}, rng);
        CHECK(finite_diff_check_multi(
                  [](Graph& g, const std::vector<GraphVar>& vs) {
                      return g.sum_all(g.bmatmul(vs[0], vs[1]));
                  },
                  {q, kk}, 1e-5) < 1e-4);
    }
}

TEST_CASE("no forward op produces NaN or Inf on finite inputs in range") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = rand_tensor({3, 5}, rng, -3.0, 3.0);
        Graph g;
        GraphVar v = g.leaf(x);
        GraphVar out = g.softmax(g.mul(g.relu(v), g.add_scalar(v, 2.0)), -1);
        CHECK(g.value(out).all_finite());
    }
}
