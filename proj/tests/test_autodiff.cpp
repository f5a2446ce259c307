#include <gtest/gtest.h>

#include <functional>

#include "stereoworld/autodiff.hpp"
#include "stereoworld/rng.hpp"

using namespace stw;
using ad::Tape;
using Ref = ad::Tape::Ref;

namespace {

// Compares analytic gradients against central finite differences for an
// arbitrary scalar-valued graph over a set of leaf tensors.
double max_fd_error(const std::vector<Tensor>& leaves,
                    const std::function<Ref(Tape&, const std::vector<Ref>&)>& graph,
                    double h = 1e-6) {
    Tape tape;
    std::vector<Ref> refs;
    for (const auto& t : leaves) refs.push_back(tape.leaf(t, true));
    const Ref out = graph(tape, refs);
    tape.backward(out);

    auto eval = [&](const std::vector<Tensor>& vals) {
        Tape t2;
        std::vector<Ref> r2;
        for (const auto& t : vals) r2.push_back(t2.leaf(t, false));
        return t2.val(graph(t2, r2))[0];
    };
    double worst = 0.0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        const Tensor& g = tape.grad(refs[li]);
        for (int64_t i = 0; i < leaves[li].numel(); ++i) {
            std::vector<Tensor> vals = leaves;
            vals[li][i] += h;
            const double up = eval(vals);
            vals[li][i] -= 2 * h;
            const double dn = eval(vals);
            const double fd = (up - dn) / (2 * h);
            worst = std::max(worst, std::abs(g[i] - fd) / std::max({std::abs(g[i]), std::abs(fd), 1e-6}));
        }
    }
    return worst;
}

Tensor randn(std::vector<int64_t> shape, uint64_t k) {
    return rng::gaussian_tensor(std::move(shape), 42, rng::Stream::Init, k);
}

Tensor ones(std::vector<int64_t> shape) { return Tensor(std::move(shape), 1.0); }

}  // namespace

TEST(Autodiff, ElementwiseOps) {
    const double err = max_fd_error(
        {randn({3, 4}, 1), randn({3, 4}, 2)}, [](Tape& t, const std::vector<Ref>& r) {
            Ref x = t.mul(t.add(r[0], r[1]), t.sub(r[0], r[1]));
            x = t.gelu(t.scale(x, 0.5));
            return t.mean_masked(x, ones({3, 4}));
        });
    EXPECT_LE(err, 1e-7);
}

TEST(Autodiff, LogAbsClamp) {
    Tensor pos = randn({4, 4}, 3);
    for (int64_t i = 0; i < pos.numel(); ++i) pos[i] = 1.5 + 0.5 * std::tanh(pos[i]);
    const double err =
        max_fd_error({pos, randn({4, 4}, 4)}, [](Tape& t, const std::vector<Ref>& r) {
            Ref a = t.log(t.clamp_min(r[0], 0.2));
            Ref b = t.abs(r[1]);
            return t.mean_masked(t.add(a, b), ones({4, 4}));
        });
    EXPECT_LE(err, 1e-7);
}

TEST(Autodiff, LinearAndMatmul) {
    const double err = max_fd_error(
        {randn({5, 3}, 5), randn({4, 3}, 6), randn({4}, 7), randn({4, 3}, 8)},
        [](Tape& t, const std::vector<Ref>& r) {
            Ref y = t.linear(r[0], r[1], r[2]);  // [5,4]
            Ref z = t.matmul(y, r[3]);           // [5,3]
            return t.mean_masked(z, ones({5, 3}));
        });
    EXPECT_LE(err, 1e-6);
}

TEST(Autodiff, AttentionStack) {
    const int64_t n = 6, d = 8, H = 2;
    const double err = max_fd_error(
        {randn({n, d}, 9), randn({d, d}, 10), randn({d}, 11)},
        [=](Tape& t, const std::vector<Ref>& r) {
            Ref q = t.split_heads(t.linear(r[0], r[1], r[2]), H);
            Ref k = t.split_heads(r[0], H);
            Ref v = t.split_heads(r[0], H);
            Ref p = t.attn_probs(q, k, 0.5);
            Ref o = t.merge_heads(t.attn_apply(p, v));
            return t.mean_masked(o, ones({n, d}));
        });
    EXPECT_LE(err, 1e-6);
}

TEST(Autodiff, LayerNorm) {
    const double err = max_fd_error(
        {randn({5, 6}, 12), randn({6}, 13), randn({6}, 14)},
        [](Tape& t, const std::vector<Ref>& r) {
            return t.mean_masked(t.layernorm(r[0], r[1], r[2]), ones({5, 6}));
        });
    EXPECT_LE(err, 1e-6);
}

TEST(Autodiff, GatherConcatSlicePermute) {
    auto idx = std::make_shared<std::vector<int>>(std::vector<int>{2, 0, 1, 2});
    auto perm = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{5, 3, 1, 4, 2, 0});
    const double err = max_fd_error(
        {randn({3, 2}, 15), randn({2, 2}, 16)}, [&](Tape& t, const std::vector<Ref>& r) {
            Ref g = t.gather_rows(r[0], idx);          // [4,2]
            Ref c = t.concat_rows({g, r[1]});          // [6,2]
            Ref s = t.slice_rows(c, 1, 4);             // [3,2]
            Ref p = t.permute_flat(s, perm, {2, 3});
            Ref rv = t.add_rowvec(p, t.constant(Tensor({3}, 0.25)));
            return t.mean_masked(rv, ones({2, 3}));
        });
    EXPECT_LE(err, 1e-7);
}

TEST(Autodiff, MseAndWeightedSum) {
    Tensor mask({3, 3});
    for (int64_t i = 0; i < 9; ++i) mask[i] = i % 2 ? 1.0 : 0.0;
    const double err = max_fd_error(
        {randn({3, 3}, 17)}, [&](Tape& t, const std::vector<Ref>& r) {
            Ref a = t.mse_masked(r[0], randn({3, 3}, 18), mask);
            Ref b = t.sum_weighted(r[0], randn({3, 3}, 19));
            return t.add(a, t.scale(b, 0.1));
        });
    EXPECT_LE(err, 1e-7);
}

TEST(Autodiff, EmptyMaskThrows) {
    Tape tape;
    Ref x = tape.leaf(randn({2, 2}, 20), true);
    EXPECT_THROW(tape.mean_masked(x, Tensor({2, 2})), std::invalid_argument);
    EXPECT_THROW(tape.mse_masked(x, randn({2, 2}, 21), Tensor({2, 2})), std::invalid_argument);
}

TEST(Autodiff, BackwardRequiresScalarRoot) {
    Tape tape;
    Ref x = tape.leaf(randn({2, 2}, 22), true);
    EXPECT_THROW(tape.backward(x), std::invalid_argument);
}

TEST(Autodiff, GradAccumulatesAcrossReuse) {
    // y = x*x + x  ->  dy/dx = 2x + 1
    Tape tape;
    Tensor v({3}, 0.0);
    v[0] = 1.0;
    v[1] = -2.0;
    v[2] = 0.5;
    Ref x = tape.leaf(v, true);
    Ref y = tape.mean_masked(tape.add(tape.mul(x, x), x), ones({3}));
    tape.backward(y);
    const Tensor& g = tape.grad(x);
    for (int64_t i = 0; i < 3; ++i) EXPECT_NEAR(g[i], (2.0 * v[i] + 1.0) / 3.0, 1e-12);
}
