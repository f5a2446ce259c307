#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include <Eigen/Core>

#include "stereoworld/tensor.hpp"

namespace stw::ad {

// Reverse-mode autodiff over a flat tape. Nodes are appended in evaluation
// order; backward walks the tape in reverse. Heavy kernels (linear layers,
// attention) map tensor storage into Eigen for the GEMMs and keep all
// accumulation orders fixed, so gradients are bit-deterministic.

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;

class Tape {
public:
    using Ref = int32_t;

    struct Node {
        Tensor val;
        Tensor grad;               // allocated on first accumulation
        bool requires_grad = false;
        std::function<void()> back;  // accumulates into parent grads
    };

    Ref leaf(Tensor v, bool requires_grad = false) {
        nodes_.push_back(Node{std::move(v), Tensor(), requires_grad, nullptr});
        return static_cast<Ref>(nodes_.size() - 1);
    }

    Ref constant(Tensor v) { return leaf(std::move(v), false); }

    const Tensor& val(Ref r) const { return nodes_[static_cast<size_t>(r)].val; }

    bool needs_grad(Ref r) const { return nodes_[static_cast<size_t>(r)].requires_grad; }

    const Tensor& grad(Ref r) const {
        const Node& n = nodes_[static_cast<size_t>(r)];
        require(!n.grad.empty(), "ad: gradient was never accumulated");
        return n.grad;
    }

    // The node's own accumulated gradient, for use inside custom backward fns.
    const Tensor& val_grad(Ref r) const { return nodes_[static_cast<size_t>(r)].grad; }

    // Attach a backward closure to a node created via push(..., nullptr).
    void attach_back(Ref r, std::function<void()> fn) { set_back(r, std::move(fn)); }

    bool has_grad(Ref r) const { return !nodes_[static_cast<size_t>(r)].grad.empty(); }

    // Gradient buffer for accumulation; nullptr when the node does not need one.
    Tensor* grad_buf(Ref r) {
        Node& n = nodes_[static_cast<size_t>(r)];
        if (!n.requires_grad) return nullptr;
        if (n.grad.empty()) n.grad = Tensor(n.val.shape());
        return &n.grad;
    }

    Ref push(Tensor val, const std::vector<Ref>& parents, std::function<void()> back) {
        bool req = false;
        for (Ref p : parents) req = req || nodes_[static_cast<size_t>(p)].requires_grad;
        nodes_.push_back(Node{std::move(val), Tensor(), req, req ? std::move(back) : nullptr});
        return static_cast<Ref>(nodes_.size() - 1);
    }

    void backward(Ref root) {
        Node& rn = nodes_[static_cast<size_t>(root)];
        require(rn.val.numel() == 1, "ad.backward: root must be a scalar");
        require(rn.requires_grad, "ad.backward: root does not depend on any trainable leaf");
        rn.grad = Tensor(rn.val.shape());
        rn.grad[0] = 1.0;
        for (Ref i = root; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.grad.empty() && n.back) n.back();
        }
    }

    size_t size() const { return nodes_.size(); }

    // ---- elementwise -------------------------------------------------------

    Ref add(Ref a, Ref b) {
        require_same_shape(val(a), val(b), "ad.add");
        Tensor out = val(a);
        const Tensor& vb = val(b);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
        Ref r = push(std::move(out), {a, b}, nullptr);
        set_back(r, [this, r, a, b] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            if (Tensor* ga = grad_buf(a))
                for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
            if (Tensor* gb = grad_buf(b))
                for (int64_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i];
        });
        return r;
    }

    Ref sub(Ref a, Ref b) {
        require_same_shape(val(a), val(b), "ad.sub");
        Tensor out = val(a);
        const Tensor& vb = val(b);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] -= vb[i];
        Ref r = push(std::move(out), {a, b}, nullptr);
        set_back(r, [this, r, a, b] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            if (Tensor* ga = grad_buf(a))
                for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
            if (Tensor* gb = grad_buf(b))
                for (int64_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i];
        });
        return r;
    }

    Ref mul(Ref a, Ref b) {
        require_same_shape(val(a), val(b), "ad.mul");
        Tensor out = val(a);
        const Tensor& vb = val(b);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
        Ref r = push(std::move(out), {a, b}, nullptr);
        set_back(r, [this, r, a, b] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            const Tensor& va = val(a);
            const Tensor& vb2 = val(b);
            if (Tensor* ga = grad_buf(a))
                for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * vb2[i];
            if (Tensor* gb = grad_buf(b))
                for (int64_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * va[i];
        });
        return r;
    }

    Ref scale(Ref a, double s) {
        Tensor out = val(a);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
        Ref r = push(std::move(out), {a}, nullptr);
        set_back(r, [this, r, a, s] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            if (Tensor* ga = grad_buf(a))
                for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += s * g[i];
        });
        return r;
    }

    Ref log(Ref a) {
        Tensor out = val(a);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
        Ref r = push(std::move(out), {a}, nullptr);
        set_back(r, [this, r, a] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            const Tensor& va = val(a);
            if (Tensor* ga = grad_buf(a))
                for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] / va[i];
        });
        return r;
    }

    Ref abs(Ref a) {
        Tensor out = val(a);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::abs(out[i]);
        Ref r = push(std::move(out), {a}, nullptr);
        set_back(r, [this, r, a] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            const Tensor& va = val(a);
            if (Tensor* ga = grad_buf(a))
                for (int64_t i = 0; i < g.numel(); ++i)
                    (*ga)[i] += g[i] * (va[i] > 0.0 ? 1.0 : (va[i] < 0.0 ? -1.0 : 0.0));
        });
        return r;
    }

    Ref clamp_min(Ref a, double lo) {
        Tensor out = val(a);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], lo);
        Ref r = push(std::move(out), {a}, nullptr);
        set_back(r, [this, r, a, lo] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            const Tensor& va = val(a);
            if (Tensor* ga = grad_buf(a))
                for (int64_t i = 0; i < g.numel(); ++i)
                    if (va[i] > lo) (*ga)[i] += g[i];
        });
        return r;
    }

    Ref gelu(Ref a) {
        const Tensor& va = val(a);
        Tensor out(va.shape());
        for (int64_t i = 0; i < out.numel(); ++i)
            out[i] = 0.5 * va[i] * (1.0 + std::erf(va[i] * 0.7071067811865476));
        Ref r = push(std::move(out), {a}, nullptr);
        set_back(r, [this, r, a] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            const Tensor& x = val(a);
            if (Tensor* ga = grad_buf(a))
                for (int64_t i = 0; i < g.numel(); ++i) {
                    const double cdf = 0.5 * (1.0 + std::erf(x[i] * 0.7071067811865476));
                    const double pdf = std::exp(-0.5 * x[i] * x[i]) * 0.3989422804014327;
                    (*ga)[i] += g[i] * (cdf + x[i] * pdf);
                }
        });
        return r;
    }

    // ---- reductions ---------------------------------------------------------

    Ref sum_weighted(Ref a, Tensor w) {
        require_same_shape(val(a), w, "ad.sum_weighted");
        double s = 0.0;
        const Tensor& va = val(a);
        for (int64_t i = 0; i < va.numel(); ++i) s += w[i] * va[i];
        auto wp = std::make_shared<Tensor>(std::move(w));
        Ref r = push(Tensor::scalar(s), {a}, nullptr);
        set_back(r, [this, r, a, wp] {
            const double g = nodes_[static_cast<size_t>(r)].grad[0];
            if (Tensor* ga = grad_buf(a))
                for (int64_t i = 0; i < ga->numel(); ++i) (*ga)[i] += g * (*wp)[i];
        });
        return r;
    }

    // Mean of x over the non-zero entries of a fixed 0/1 mask.
    Ref mean_masked(Ref a, Tensor mask) {
        require_same_shape(val(a), mask, "ad.mean_masked");
        double wsum = 0.0;
        for (int64_t i = 0; i < mask.numel(); ++i) wsum += mask[i];
        require(wsum > 0.0, "ad.mean_masked: empty mask");
        double s = 0.0;
        const Tensor& va = val(a);
        for (int64_t i = 0; i < va.numel(); ++i) s += mask[i] * va[i];
        auto mp = std::make_shared<Tensor>(std::move(mask));
        Ref r = push(Tensor::scalar(s / wsum), {a}, nullptr);
        set_back(r, [this, r, a, mp, wsum] {
            const double g = nodes_[static_cast<size_t>(r)].grad[0] / wsum;
            if (Tensor* ga = grad_buf(a))
                for (int64_t i = 0; i < ga->numel(); ++i) (*ga)[i] += g * (*mp)[i];
        });
        return r;
    }

    // Masked mean squared error against a fixed target.
    Ref mse_masked(Ref pred, Tensor target, Tensor mask) {
        require_same_shape(val(pred), target, "ad.mse_masked target");
        require_same_shape(val(pred), mask, "ad.mse_masked mask");
        double wsum = 0.0;
        for (int64_t i = 0; i < mask.numel(); ++i) wsum += mask[i];
        require(wsum > 0.0, "ad.mse_masked: empty mask");
        const Tensor& vp = val(pred);
        double s = 0.0;
        for (int64_t i = 0; i < vp.numel(); ++i) {
            const double d = vp[i] - target[i];
            s += mask[i] * d * d;
        }
        auto tp = std::make_shared<Tensor>(std::move(target));
        auto mp = std::make_shared<Tensor>(std::move(mask));
        Ref r = push(Tensor::scalar(s / wsum), {pred}, nullptr);
        set_back(r, [this, r, pred, tp, mp, wsum] {
            const double g = nodes_[static_cast<size_t>(r)].grad[0] * 2.0 / wsum;
            const Tensor& vp2 = val(pred);
            if (Tensor* gp = grad_buf(pred))
                for (int64_t i = 0; i < gp->numel(); ++i)
                    (*gp)[i] += g * (*mp)[i] * (vp2[i] - (*tp)[i]);
        });
        return r;
    }

    // ---- linear algebra -----------------------------------------------------

    // x:[n,din] @ W^T + b, W:[dout,din], b:[dout] -> [n,dout]
    Ref linear(Ref x, Ref W, Ref b) {
        const Tensor& vx = val(x);
        const Tensor& vW = val(W);
        const Tensor& vb = val(b);
        require(vx.rank() == 2 && vW.rank() == 2 && vb.rank() == 1, "ad.linear: bad ranks");
        const int64_t n = vx.dim(0), din = vx.dim(1), dout = vW.dim(0);
        require(vW.dim(1) == din && vb.dim(0) == dout, "ad.linear: dim mismatch");
        Tensor out({n, dout});
        {
            CMapM mx(vx.data(), n, din), mW(vW.data(), dout, din);
            MapM mo(out.data(), n, dout);
            mo.noalias() = mx * mW.transpose();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < dout; ++j) out.at(i, j) += vb[j];
        }
        Ref r = push(std::move(out), {x, W, b}, nullptr);
        set_back(r, [this, r, x, W, b, n, din, dout] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            CMapM mg(g.data(), n, dout);
            if (Tensor* gx = grad_buf(x)) {
                CMapM mW(val(W).data(), dout, din);
                MapM mgx(gx->data(), n, din);
                mgx.noalias() += mg * mW;
            }
            if (Tensor* gW = grad_buf(W)) {
                CMapM mx(val(x).data(), n, din);
                MapM mgW(gW->data(), dout, din);
                mgW.noalias() += mg.transpose() * mx;
            }
            if (Tensor* gb = grad_buf(b)) {
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < dout; ++j) (*gb)[j] += g.at(i, j);
            }
        });
        return r;
    }

    // Plain 2-D matmul (used for LoRA deltas): [m,k]@[k,n].
    Ref matmul(Ref a, Ref b) {
        const Tensor& va = val(a);
        const Tensor& vb = val(b);
        require(va.rank() == 2 && vb.rank() == 2 && va.dim(1) == vb.dim(0),
                "ad.matmul: dim mismatch");
        const int64_t m = va.dim(0), k = va.dim(1), n = vb.dim(1);
        Tensor out({m, n});
        {
            CMapM ma(va.data(), m, k), mb(vb.data(), k, n);
            MapM mo(out.data(), m, n);
            mo.noalias() = ma * mb;
        }
        Ref r = push(std::move(out), {a, b}, nullptr);
        set_back(r, [this, r, a, b, m, k, n] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            CMapM mg(g.data(), m, n);
            if (Tensor* ga = grad_buf(a)) {
                CMapM mb(val(b).data(), k, n);
                MapM mga(ga->data(), m, k);
                mga.noalias() += mg * mb.transpose();
            }
            if (Tensor* gb = grad_buf(b)) {
                CMapM ma(val(a).data(), m, k);
                MapM mgb(gb->data(), k, n);
                mgb.noalias() += ma.transpose() * mg;
            }
        });
        return r;
    }

    // [n,d] -> [H,n,dh]
    Ref split_heads(Ref x, int heads) {
        const Tensor& vx = val(x);
        require(vx.rank() == 2 && vx.dim(1) % heads == 0, "ad.split_heads: bad dims");
        const int64_t n = vx.dim(0), d = vx.dim(1), dh = d / heads;
        Tensor out({heads, n, dh});
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < dh; ++j) out.at(h, i, j) = vx.at(i, h * dh + j);
        Ref r = push(std::move(out), {x}, nullptr);
        set_back(r, [this, r, x, heads, n, dh] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            if (Tensor* gx = grad_buf(x))
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < dh; ++j)
                            gx->at(i, h * dh + j) += g.at(h, i, j);
        });
        return r;
    }

    // [H,n,dh] -> [n,d]
    Ref merge_heads(Ref x) {
        const Tensor& vx = val(x);
        require(vx.rank() == 3, "ad.merge_heads: expected rank-3");
        const int64_t H = vx.dim(0), n = vx.dim(1), dh = vx.dim(2);
        Tensor out({n, H * dh});
        for (int64_t h = 0; h < H; ++h)
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < dh; ++j) out.at(i, h * dh + j) = vx.at(h, i, j);
        Ref r = push(std::move(out), {x}, nullptr);
        set_back(r, [this, r, x, H, n, dh] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            if (Tensor* gx = grad_buf(x))
                for (int64_t h = 0; h < H; ++h)
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < dh; ++j) gx->at(h, i, j) += g.at(i, h * dh + j);
        });
        return r;
    }

    // Row-wise softmax of scale*q@k^T per head; stores only the probabilities
    // (backward runs off the stored probs, halving attention memory).
    Ref attn_probs(Ref q, Ref k, double sc) {
        const Tensor& vq = val(q);
        const Tensor& vk = val(k);
        require_same_shape(vq, vk, "ad.attn_probs");
        const int64_t H = vq.dim(0), n = vq.dim(1), dh = vq.dim(2);
        Tensor probs({H, n, n});
        for (int64_t h = 0; h < H; ++h) {
            CMapM mq(vq.data() + h * n * dh, n, dh), mk(vk.data() + h * n * dh, n, dh);
            MapM mp(probs.data() + h * n * n, n, n);
            mp.noalias() = mq * mk.transpose();
            for (int64_t i = 0; i < n; ++i) {
                double* row = probs.data() + h * n * n + i * n;
                double mx = row[0] * sc;
                for (int64_t j = 0; j < n; ++j) mx = std::max(mx, row[j] * sc);
                double s = 0.0;
                for (int64_t j = 0; j < n; ++j) {
                    row[j] = std::exp(row[j] * sc - mx);
                    s += row[j];
                }
                const double inv = 1.0 / s;
                for (int64_t j = 0; j < n; ++j) row[j] *= inv;
            }
        }
        Ref r = push(std::move(probs), {q, k}, nullptr);
        set_back(r, [this, r, q, k, sc, H, n, dh] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            const Tensor& p = val(r);
            Tensor ds({n, n});
            for (int64_t h = 0; h < H; ++h) {
                const double* ph = p.data() + h * n * n;
                const double* gh = g.data() + h * n * n;
                for (int64_t i = 0; i < n; ++i) {
                    double dot = 0.0;
                    for (int64_t j = 0; j < n; ++j) dot += gh[i * n + j] * ph[i * n + j];
                    for (int64_t j = 0; j < n; ++j)
                        ds.at(i, j) = ph[i * n + j] * (gh[i * n + j] - dot) * sc;
                }
                CMapM mds(ds.data(), n, n);
                if (Tensor* gq = grad_buf(q)) {
                    CMapM mk(val(k).data() + h * n * dh, n, dh);
                    MapM mgq(gq->data() + h * n * dh, n, dh);
                    mgq.noalias() += mds * mk;
                }
                if (Tensor* gk = grad_buf(k)) {
                    CMapM mq(val(q).data() + h * n * dh, n, dh);
                    MapM mgk(gk->data() + h * n * dh, n, dh);
                    mgk.noalias() += mds.transpose() * mq;
                }
            }
        });
        return r;
    }

    // [H,n,n] @ [H,n,dh] -> [H,n,dh]
    Ref attn_apply(Ref p, Ref v) {
        const Tensor& vp = val(p);
        const Tensor& vv = val(v);
        const int64_t H = vp.dim(0), n = vp.dim(1), dh = vv.dim(2);
        require(vv.dim(0) == H && vv.dim(1) == n, "ad.attn_apply: dim mismatch");
        Tensor out({H, n, dh});
        for (int64_t h = 0; h < H; ++h) {
            CMapM mp(vp.data() + h * n * n, n, n), mv(vv.data() + h * n * dh, n, dh);
            MapM mo(out.data() + h * n * dh, n, dh);
            mo.noalias() = mp * mv;
        }
        Ref r = push(std::move(out), {p, v}, nullptr);
        set_back(r, [this, r, p, v, H, n, dh] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            for (int64_t h = 0; h < H; ++h) {
                CMapM mg(g.data() + h * n * dh, n, dh);
                if (Tensor* gp = grad_buf(p)) {
                    CMapM mv(val(v).data() + h * n * dh, n, dh);
                    MapM mgp(gp->data() + h * n * n, n, n);
                    mgp.noalias() += mg * mv.transpose();
                }
                if (Tensor* gv = grad_buf(v)) {
                    CMapM mp(val(p).data() + h * n * n, n, n);
                    MapM mgv(gv->data() + h * n * dh, n, dh);
                    mgv.noalias() += mp.transpose() * mg;
                }
            }
        });
        return r;
    }

    // Row-wise layer norm with learned gain/bias over the last dim.
    Ref layernorm(Ref x, Ref gamma, Ref beta, double eps = 1e-6) {
        const Tensor& vx = val(x);
        require(vx.rank() == 2, "ad.layernorm: expected [n,d]");
        const int64_t n = vx.dim(0), d = vx.dim(1);
        const Tensor& vg = val(gamma);
        const Tensor& vb = val(beta);
        require(vg.numel() == d && vb.numel() == d, "ad.layernorm: gain/bias dim mismatch");
        Tensor out({n, d});
        auto xhat = std::make_shared<Tensor>(std::vector<int64_t>{n, d});
        auto rstd = std::make_shared<Tensor>(std::vector<int64_t>{n});
        for (int64_t i = 0; i < n; ++i) {
            double mu = 0.0;
            for (int64_t j = 0; j < d; ++j) mu += vx.at(i, j);
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                const double c = vx.at(i, j) - mu;
                var += c * c;
            }
            var /= static_cast<double>(d);
            const double rs = 1.0 / std::sqrt(var + eps);
            (*rstd)[i] = rs;
            for (int64_t j = 0; j < d; ++j) {
                const double xh = (vx.at(i, j) - mu) * rs;
                xhat->at(i, j) = xh;
                out.at(i, j) = xh * vg[j] + vb[j];
            }
        }
        Ref r = push(std::move(out), {x, gamma, beta}, nullptr);
        set_back(r, [this, r, x, gamma, beta, xhat, rstd, n, d] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            const Tensor& vg = val(gamma);
            Tensor* gx = grad_buf(x);
            Tensor* gg = grad_buf(gamma);
            Tensor* gb = grad_buf(beta);
            for (int64_t i = 0; i < n; ++i) {
                double m1 = 0.0, m2 = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    const double dxh = g.at(i, j) * vg[j];
                    m1 += dxh;
                    m2 += dxh * xhat->at(i, j);
                }
                m1 /= static_cast<double>(d);
                m2 /= static_cast<double>(d);
                if (gx) {
                    const double rs = (*rstd)[i];
                    for (int64_t j = 0; j < d; ++j) {
                        const double dxh = g.at(i, j) * vg[j];
                        gx->at(i, j) += rs * (dxh - m1 - xhat->at(i, j) * m2);
                    }
                }
                if (gg)
                    for (int64_t j = 0; j < d; ++j) (*gg)[j] += g.at(i, j) * xhat->at(i, j);
                if (gb)
                    for (int64_t j = 0; j < d; ++j) (*gb)[j] += g.at(i, j);
            }
        });
        return r;
    }

    // ---- shuffles -----------------------------------------------------------

    // Broadcast-add a [1,d] (or [d]) row vector to every row of x.
    Ref add_rowvec(Ref x, Ref v) {
        const Tensor& vx = val(x);
        const Tensor& vv = val(v);
        require(vx.rank() == 2 && vv.numel() == vx.dim(1), "ad.add_rowvec: dim mismatch");
        const int64_t n = vx.dim(0), d = vx.dim(1);
        Tensor out = vx;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) out.at(i, j) += vv[j];
        Ref r = push(std::move(out), {x, v}, nullptr);
        set_back(r, [this, r, x, v, n, d] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            if (Tensor* gx = grad_buf(x))
                for (int64_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i];
            if (Tensor* gv = grad_buf(v))
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < d; ++j) (*gv)[j] += g.at(i, j);
        });
        return r;
    }

    // out[i,:] = table[idx[i],:]
    Ref gather_rows(Ref table, std::shared_ptr<const std::vector<int>> idx) {
        const Tensor& vt = val(table);
        require(vt.rank() == 2, "ad.gather_rows: table must be [V,d]");
        const int64_t n = static_cast<int64_t>(idx->size()), d = vt.dim(1);
        Tensor out({n, d});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) out.at(i, j) = vt.at((*idx)[static_cast<size_t>(i)], j);
        Ref r = push(std::move(out), {table}, nullptr);
        set_back(r, [this, r, table, idx, n, d] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            if (Tensor* gt = grad_buf(table))
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < d; ++j)
                        gt->at((*idx)[static_cast<size_t>(i)], j) += g.at(i, j);
        });
        return r;
    }

    Ref concat_rows(const std::vector<Ref>& parts) {
        require(!parts.empty(), "ad.concat_rows: empty list");
        const int64_t d = val(parts[0]).dim(1);
        int64_t n = 0;
        for (Ref p : parts) {
            require(val(p).rank() == 2 && val(p).dim(1) == d, "ad.concat_rows: dim mismatch");
            n += val(p).dim(0);
        }
        Tensor out({n, d});
        int64_t row = 0;
        for (Ref p : parts) {
            const Tensor& vp = val(p);
            for (int64_t i = 0; i < vp.numel(); ++i) out[row * d + i] = vp[i];
            row += vp.dim(0);
        }
        auto list = std::make_shared<std::vector<Ref>>(parts);
        Ref r = push(std::move(out), parts, nullptr);
        set_back(r, [this, r, list, d] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            int64_t row = 0;
            for (Ref p : *list) {
                const int64_t np = val(p).dim(0);
                if (Tensor* gp = grad_buf(p))
                    for (int64_t i = 0; i < np * d; ++i) (*gp)[i] += g[row * d + i];
                row += np;
            }
        });
        return r;
    }

    Ref slice_rows(Ref x, int64_t r0, int64_t r1) {
        const Tensor& vx = val(x);
        require(vx.rank() == 2 && 0 <= r0 && r0 < r1 && r1 <= vx.dim(0),
                "ad.slice_rows: bad range");
        const int64_t d = vx.dim(1);
        Tensor out({r1 - r0, d});
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = vx[r0 * d + i];
        Ref r = push(std::move(out), {x}, nullptr);
        set_back(r, [this, r, x, r0, r1, d] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            if (Tensor* gx = grad_buf(x))
                for (int64_t i = 0; i < (r1 - r0) * d; ++i) (*gx)[r0 * d + i] += g[i];
        });
        return r;
    }

    // Bijective re-layout: out[i] = x[perm[i]]. Used for (un)patchify.
    Ref permute_flat(Ref x, std::shared_ptr<const std::vector<int64_t>> perm,
                     std::vector<int64_t> out_shape) {
        const Tensor& vx = val(x);
        require(static_cast<int64_t>(perm->size()) == vx.numel() &&
                    Tensor::numel_of(out_shape) == vx.numel(),
                "ad.permute_flat: size mismatch");
        Tensor out(std::move(out_shape));
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = vx[(*perm)[static_cast<size_t>(i)]];
        Ref r = push(std::move(out), {x}, nullptr);
        set_back(r, [this, r, x, perm] {
            const Tensor& g = nodes_[static_cast<size_t>(r)].grad;
            if (Tensor* gx = grad_buf(x))
                for (int64_t i = 0; i < g.numel(); ++i) (*gx)[(*perm)[static_cast<size_t>(i)]] += g[i];
        });
        return r;
    }

private:
    void set_back(Ref r, std::function<void()> fn) {
        Node& n = nodes_[static_cast<size_t>(r)];
        if (n.requires_grad) n.back = std::move(fn);
    }

    std::vector<Node> nodes_;
};

}  // namespace stw::ad
