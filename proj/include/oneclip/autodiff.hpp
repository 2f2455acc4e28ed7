#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace oneclip {

// Named parameter with gradient accumulator. Lives outside any tape; tapes
// copy the value in on read and push gradients back out after backward().
struct ParamTensor {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;
};

class ParamStore {
public:
    ParamTensor& add(const std::string& name, Tensor value, bool trainable = true) {
        if (index_.count(name)) throw KeyError("ParamStore: duplicate name " + name);
        index_[name] = items_.size();
        items_.push_back(ParamTensor{name, std::move(value), Tensor{}, trainable});
        return items_.back();
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    ParamTensor& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw KeyError("ParamStore: unknown name " + name);
        return items_[it->second];
    }
    const ParamTensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw KeyError("ParamStore: unknown name " + name);
        return items_[it->second];
    }

    std::deque<ParamTensor>& items() { return items_; }
    const std::deque<ParamTensor>& items() const { return items_; }

    void zero_grads() {
        for (auto& p : items_)
            if (!p.grad.empty())
                for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] = 0.0;
    }

private:
    std::deque<ParamTensor> items_;  // deque keeps references stable across add()
    std::unordered_map<std::string, std::size_t> index_;
};

struct Ref {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode autodiff tape. Ops append nodes; backward() runs the recorded
// closures in reverse and accumulates leaf gradients into their ParamTensor.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Ref constant(Tensor v) { return push(std::move(v), false, nullptr); }

    Ref leaf(ParamTensor& p, bool trainable) {
        return push(p.value, grad_enabled_ && trainable && p.trainable, &p);
    }

    // Requires-grad leaf not tied to a parameter; read its gradient with
    // grad() after backward().
    Ref input(Tensor v) { return push(std::move(v), grad_enabled_, nullptr); }

    const Tensor& val(Ref r) const { return nodes_[static_cast<std::size_t>(r.id)].value; }

    double item(Ref r) const {
        const Tensor& t = val(r);
        if (t.size() != 1) throw ShapeError("item() on non-scalar tensor " + t.shape_str());
        return t[0];
    }

    bool requires_grad(Ref r) const { return nodes_[static_cast<std::size_t>(r.id)].requires_grad; }

    Tensor& grad(Ref r) {
        Node& n = nodes_[static_cast<std::size_t>(r.id)];
        if (n.grad.empty()) n.grad = Tensor(n.value.shape());
        return n.grad;
    }

    void backward(Ref root) {
        Node& rn = nodes_[static_cast<std::size_t>(root.id)];
        if (rn.value.size() != 1) throw ShapeError("backward() needs a scalar root");
        if (!rn.requires_grad) return;
        grad(root)[0] = 1.0;
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.grad.empty() || !n.requires_grad) continue;
            if (n.backward) n.backward(*this);
            if (n.param != nullptr) {
                if (n.param->grad.empty()) n.param->grad = Tensor(n.param->value.shape());
                for (std::size_t k = 0; k < n.grad.size(); ++k) n.param->grad[k] += n.grad[k];
            }
        }
    }

    // ---------------------------------------------------------------- ops

    Ref add(Ref a, Ref b) {
        check_same_shape(a, b, "add");
        Tensor out = val(a);
        const Tensor& tb = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += tb[i];
        return unary_binary(std::move(out), a, b, [](Tape& t, const Tensor& g, Ref pa, Ref pb) {
            t.accumulate(pa, g, 1.0);
            t.accumulate(pb, g, 1.0);
        });
    }

    Ref sub(Ref a, Ref b) {
        check_same_shape(a, b, "sub");
        Tensor out = val(a);
        const Tensor& tb = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= tb[i];
        return unary_binary(std::move(out), a, b, [](Tape& t, const Tensor& g, Ref pa, Ref pb) {
            t.accumulate(pa, g, 1.0);
            t.accumulate(pb, g, -1.0);
        });
    }

    Ref mul(Ref a, Ref b) {
        check_same_shape(a, b, "mul");
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        Tensor out(ta.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] * tb[i];
        int ia = a.id, ib = b.id;
        return make(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
            const Tensor& va = t.node_value(ia);
            const Tensor& vb = t.node_value(ib);
            if (t.node_requires_grad(ia)) {
                Tensor& ga = t.node_grad(ia);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
            }
            if (t.node_requires_grad(ib)) {
                Tensor& gb = t.node_grad(ib);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
            }
        });
    }

    Ref scale(Ref a, double s) {
        Tensor out = val(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
        int ia = a.id;
        return make(std::move(out), {a}, [ia, s](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ia)) return;
            Tensor& ga = t.node_grad(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
        });
    }

    Ref add_scalar(Ref a, double s) {
        Tensor out = val(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += s;
        int ia = a.id;
        return make(std::move(out), {a}, [ia](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ia)) return;
            Tensor& ga = t.node_grad(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }

    Ref neg(Ref a) { return scale(a, -1.0); }

    // x [B,I] * w [O,I]^T + b [O] -> [B,O]
    Ref linear(Ref x, Ref w, Ref b) {
        const Tensor& tx = val(x);
        const Tensor& tw = val(w);
        const Tensor& tb = val(b);
        if (tx.rank() != 2 || tw.rank() != 2 || tb.rank() != 1 || tx.dim(1) != tw.dim(1) ||
            tw.dim(0) != tb.dim(0))
            throw ShapeError("linear: incompatible shapes");
        int B = tx.dim(0), I = tx.dim(1), O = tw.dim(0);
        Tensor out({B, O});
        for (int n = 0; n < B; ++n) {
            const double* xr = tx.data() + static_cast<std::size_t>(n) * I;
            double* orow = out.data() + static_cast<std::size_t>(n) * O;
            for (int o = 0; o < O; ++o) {
                const double* wr = tw.data() + static_cast<std::size_t>(o) * I;
                double acc = tb[static_cast<std::size_t>(o)];
                for (int i = 0; i < I; ++i) acc += xr[i] * wr[i];
                orow[o] = acc;
            }
        }
        int ix = x.id, iw = w.id, ib = b.id;
        return make(std::move(out), {x, w, b}, [ix, iw, ib, B, I, O](Tape& t, const Tensor& g) {
            const Tensor& vx = t.node_value(ix);
            const Tensor& vw = t.node_value(iw);
            if (t.node_requires_grad(ix)) {
                Tensor& gx = t.node_grad(ix);
                for (int n = 0; n < B; ++n)
                    for (int o = 0; o < O; ++o) {
                        double go = g[static_cast<std::size_t>(n) * O + o];
                        const double* wr = vw.data() + static_cast<std::size_t>(o) * I;
                        double* gr = gx.data() + static_cast<std::size_t>(n) * I;
                        for (int i = 0; i < I; ++i) gr[i] += go * wr[i];
                    }
            }
            if (t.node_requires_grad(iw)) {
                Tensor& gw = t.node_grad(iw);
                for (int n = 0; n < B; ++n)
                    for (int o = 0; o < O; ++o) {
                        double go = g[static_cast<std::size_t>(n) * O + o];
                        const double* xr = vx.data() + static_cast<std::size_t>(n) * I;
                        double* gr = gw.data() + static_cast<std::size_t>(o) * I;
                        for (int i = 0; i < I; ++i) gr[i] += go * xr[i];
                    }
            }
            if (t.node_requires_grad(ib)) {
                Tensor& gb = t.node_grad(ib);
                for (int n = 0; n < B; ++n)
                    for (int o = 0; o < O; ++o) gb[static_cast<std::size_t>(o)] += g[static_cast<std::size_t>(n) * O + o];
            }
        });
    }

    // conv2d, stride 1. x [N,C,H,W], w [O,C,kh,kw], b [O].
    Ref conv2d(Ref x, Ref w, Ref b, int pad) {
        const Tensor& tx = val(x);
        const Tensor& tw = val(w);
        const Tensor& tb = val(b);
        if (tx.rank() != 4 || tw.rank() != 4 || tb.rank() != 1)
            throw ShapeError("conv2d: rank mismatch");
        if (tx.dim(1) != tw.dim(1) || tw.dim(0) != tb.dim(0))
            throw ShapeError("conv2d: channel mismatch");
        int N = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
        int O = tw.dim(0), KH = tw.dim(2), KW = tw.dim(3);
        int OH = H + 2 * pad - KH + 1, OW = W + 2 * pad - KW + 1;
        if (OH <= 0 || OW <= 0) throw ShapeError("conv2d: kernel larger than padded input");
        Tensor out({N, O, OH, OW});
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < O; ++o) {
                double* op = out.data() + out.idx4(n, o, 0, 0);
                double bias = tb[static_cast<std::size_t>(o)];
                for (int i = 0; i < OH * OW; ++i) op[i] = bias;
                for (int c = 0; c < C; ++c)
                    for (int ky = 0; ky < KH; ++ky)
                        for (int kx = 0; kx < KW; ++kx) {
                            double wv = tw.at(o, c, ky, kx);
                            if (wv == 0.0) continue;
                            for (int y = 0; y < OH; ++y) {
                                int sy = y + ky - pad;
                                if (sy < 0 || sy >= H) continue;
                                int x0 = std::max(0, pad - kx);
                                int x1 = std::min(OW, W + pad - kx);
                                const double* ip = tx.data() + tx.idx4(n, c, sy, x0 + kx - pad);
                                double* orow = op + static_cast<std::size_t>(y) * OW + x0;
                                for (int xx = 0; xx < x1 - x0; ++xx) orow[xx] += wv * ip[xx];
                            }
                        }
            }
        int ix = x.id, iw = w.id, ib = b.id;
        return make(std::move(out), {x, w, b},
                    [ix, iw, ib, N, C, H, W, O, KH, KW, OH, OW, pad](Tape& t, const Tensor& g) {
                        const Tensor& vx = t.node_value(ix);
                        const Tensor& vw = t.node_value(iw);
                        bool need_x = t.node_requires_grad(ix);
                        bool need_w = t.node_requires_grad(iw);
                        bool need_b = t.node_requires_grad(ib);
                        Tensor* gx = need_x ? &t.node_grad(ix) : nullptr;
                        Tensor* gw = need_w ? &t.node_grad(iw) : nullptr;
                        Tensor* gb = need_b ? &t.node_grad(ib) : nullptr;
                        for (int n = 0; n < N; ++n)
                            for (int o = 0; o < O; ++o) {
                                const double* gp = g.data() + g.idx4(n, o, 0, 0);
                                if (gb)
                                    for (int i = 0; i < OH * OW; ++i)
                                        (*gb)[static_cast<std::size_t>(o)] += gp[i];
                                for (int c = 0; c < C; ++c)
                                    for (int ky = 0; ky < KH; ++ky)
                                        for (int kx = 0; kx < KW; ++kx) {
                                            double wv = vw.at(o, c, ky, kx);
                                            double wacc = 0.0;
                                            for (int y = 0; y < OH; ++y) {
                                                int sy = y + ky - pad;
                                                if (sy < 0 || sy >= H) continue;
                                                int x0 = std::max(0, pad - kx);
                                                int x1 = std::min(OW, W + pad - kx);
                                                const double* grow = gp + static_cast<std::size_t>(y) * OW + x0;
                                                const double* irow = vx.data() + vx.idx4(n, c, sy, x0 + kx - pad);
                                                if (need_x) {
                                                    double* xrow = gx->data() + gx->idx4(n, c, sy, x0 + kx - pad);
                                                    for (int xx = 0; xx < x1 - x0; ++xx) xrow[xx] += wv * grow[xx];
                                                }
                                                if (need_w)
                                                    for (int xx = 0; xx < x1 - x0; ++xx) wacc += grow[xx] * irow[xx];
                                            }
                                            if (need_w) gw->at(o, c, ky, kx) += wacc;
                                        }
                            }
                    });
    }

    Ref upsample2(Ref x) {
        const Tensor& tx = val(x);
        if (tx.rank() != 4) throw ShapeError("upsample2: rank mismatch");
        int N = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
        Tensor out({N, C, H * 2, W * 2});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H * 2; ++y)
                    for (int xx = 0; xx < W * 2; ++xx) out.at(n, c, y, xx) = tx.at(n, c, y / 2, xx / 2);
        int ix = x.id;
        return make(std::move(out), {x}, [ix, N, C, H, W](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            Tensor& gx = t.node_grad(ix);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int y = 0; y < H * 2; ++y)
                        for (int xx = 0; xx < W * 2; ++xx) gx.at(n, c, y / 2, xx / 2) += g.at(n, c, y, xx);
        });
    }

    Ref avgpool2(Ref x) {
        const Tensor& tx = val(x);
        if (tx.rank() != 4 || tx.dim(2) % 2 || tx.dim(3) % 2) throw ShapeError("avgpool2: bad shape");
        int N = tx.dim(0), C = tx.dim(1), H = tx.dim(2) / 2, W = tx.dim(3) / 2;
        Tensor out({N, C, H, W});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx)
                        out.at(n, c, y, xx) = 0.25 * (tx.at(n, c, 2 * y, 2 * xx) + tx.at(n, c, 2 * y, 2 * xx + 1) +
                                                      tx.at(n, c, 2 * y + 1, 2 * xx) + tx.at(n, c, 2 * y + 1, 2 * xx + 1));
        int ix = x.id;
        return make(std::move(out), {x}, [ix, N, C, H, W](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            Tensor& gx = t.node_grad(ix);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int y = 0; y < H; ++y)
                        for (int xx = 0; xx < W; ++xx) {
                            double gv = 0.25 * g.at(n, c, y, xx);
                            gx.at(n, c, 2 * y, 2 * xx) += gv;
                            gx.at(n, c, 2 * y, 2 * xx + 1) += gv;
                            gx.at(n, c, 2 * y + 1, 2 * xx) += gv;
                            gx.at(n, c, 2 * y + 1, 2 * xx + 1) += gv;
                        }
        });
    }

    Ref leaky_relu(Ref x, double slope) {
        const Tensor& tx = val(x);
        Tensor out(tx.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = tx[i] >= 0.0 ? tx[i] : slope * tx[i];
        int ix = x.id;
        return make(std::move(out), {x}, [ix, slope](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            const Tensor& vx = t.node_value(ix);
            Tensor& gx = t.node_grad(ix);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += (vx[i] >= 0.0 ? 1.0 : slope) * g[i];
        });
    }

    Ref tanh_(Ref x) {
        const Tensor& tx = val(x);
        Tensor out(tx.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(tx[i]);
        int self = next_id();
        int ix = x.id;
        Ref r = make(std::move(out), {x}, [ix, self](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            const Tensor& vy = t.node_value(self);
            Tensor& gx = t.node_grad(ix);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += (1.0 - vy[i] * vy[i]) * g[i];
        });
        return r;
    }

    Ref softplus(Ref x) {
        const Tensor& tx = val(x);
        Tensor out(tx.shape());
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = tx[i] > 0.0 ? tx[i] + std::log1p(std::exp(-tx[i])) : std::log1p(std::exp(tx[i]));
        int ix = x.id;
        return make(std::move(out), {x}, [ix](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            const Tensor& vx = t.node_value(ix);
            Tensor& gx = t.node_grad(ix);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / (1.0 + std::exp(-vx[i]));
        });
    }

    Ref exp_(Ref x) {
        const Tensor& tx = val(x);
        Tensor out(tx.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(tx[i]);
        int ix = x.id, self = next_id();
        return make(std::move(out), {x}, [ix, self](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            const Tensor& vy = t.node_value(self);
            Tensor& gx = t.node_grad(ix);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += vy[i] * g[i];
        });
    }

    Ref log_(Ref x) {
        const Tensor& tx = val(x);
        Tensor out(tx.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(tx[i]);
        int ix = x.id;
        return make(std::move(out), {x}, [ix](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            const Tensor& vx = t.node_value(ix);
            Tensor& gx = t.node_grad(ix);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / vx[i];
        });
    }

    Ref abs_(Ref x) {
        const Tensor& tx = val(x);
        Tensor out(tx.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(tx[i]);
        int ix = x.id;
        return make(std::move(out), {x}, [ix](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            const Tensor& vx = t.node_value(ix);
            Tensor& gx = t.node_grad(ix);
            for (std::size_t i = 0; i < g.size(); ++i)
                gx[i] += (vx[i] > 0.0 ? 1.0 : (vx[i] < 0.0 ? -1.0 : 0.0)) * g[i];
        });
    }

    Ref square(Ref x) { return mul(x, x); }

    Ref sqrt_(Ref x) {
        const Tensor& tx = val(x);
        Tensor out(tx.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(tx[i]);
        int ix = x.id, self = next_id();
        return make(std::move(out), {x}, [ix, self](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            const Tensor& vy = t.node_value(self);
            Tensor& gx = t.node_grad(ix);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / (2.0 * vy[i]);
        });
    }

    Ref div(Ref a, Ref b) {
        check_same_shape(a, b, "div");
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        Tensor out(ta.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] / tb[i];
        int ia = a.id, ib = b.id;
        return make(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
            const Tensor& va = t.node_value(ia);
            const Tensor& vb = t.node_value(ib);
            if (t.node_requires_grad(ia)) {
                Tensor& ga = t.node_grad(ia);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / vb[i];
            }
            if (t.node_requires_grad(ib)) {
                Tensor& gb = t.node_grad(ib);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
            }
        });
    }

    // [N,C,H,W] -> [1,C,H,W], selecting one image.
    Ref slice_batch(Ref x, int index) {
        const Tensor& tx = val(x);
        if (tx.rank() != 4) throw ShapeError("slice_batch: rank mismatch");
        int N = tx.dim(0);
        if (index < 0 || index >= N) throw ArgumentError("slice_batch: index out of range");
        std::size_t per = tx.size() / static_cast<std::size_t>(N);
        Tensor out = Tensor::from_data({1, tx.dim(1), tx.dim(2), tx.dim(3)},
                                       std::vector<double>(tx.data() + static_cast<std::size_t>(index) * per,
                                                           tx.data() + static_cast<std::size_t>(index + 1) * per));
        int ix = x.id;
        return make(std::move(out), {x}, [ix, index, per](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            Tensor& gx = t.node_grad(ix);
            for (std::size_t i = 0; i < per; ++i) gx[static_cast<std::size_t>(index) * per + i] += g[i];
        });
    }

    Ref sum(Ref x) {
        const Tensor& tx = val(x);
        Tensor out({1});
        double acc = 0.0;
        for (std::size_t i = 0; i < tx.size(); ++i) acc += tx[i];
        out[0] = acc;
        int ix = x.id;
        return make(std::move(out), {x}, [ix](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            Tensor& gx = t.node_grad(ix);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
        });
    }

    Ref mean(Ref x) {
        std::size_t n = val(x).size();
        return scale(sum(x), 1.0 / static_cast<double>(n));
    }

    // Mean squared difference over all elements.
    Ref mse(Ref a, Ref b) {
        check_same_shape(a, b, "mse");
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        Tensor out({1});
        double acc = 0.0;
        for (std::size_t i = 0; i < ta.size(); ++i) {
            double d = ta[i] - tb[i];
            acc += d * d;
        }
        double inv = 1.0 / static_cast<double>(ta.size());
        out[0] = acc * inv;
        int ia = a.id, ib = b.id;
        return make(std::move(out), {a, b}, [ia, ib, inv](Tape& t, const Tensor& g) {
            const Tensor& va = t.node_value(ia);
            const Tensor& vb = t.node_value(ib);
            double s = 2.0 * inv * g[0];
            if (t.node_requires_grad(ia)) {
                Tensor& ga = t.node_grad(ia);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * (va[i] - vb[i]);
            }
            if (t.node_requires_grad(ib)) {
                Tensor& gb = t.node_grad(ib);
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= s * (va[i] - vb[i]);
            }
        });
    }

    // Per-sample per-channel scale: x [N,C,H,W] * s [N,C].
    Ref mul_channels(Ref x, Ref s) {
        const Tensor& tx = val(x);
        const Tensor& ts = val(s);
        if (tx.rank() != 4 || ts.rank() != 2 || tx.dim(0) != ts.dim(0) || tx.dim(1) != ts.dim(1))
            throw ShapeError("mul_channels: shape mismatch");
        int N = tx.dim(0), C = tx.dim(1), HW = tx.dim(2) * tx.dim(3);
        Tensor out(tx.shape());
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double sv = ts[static_cast<std::size_t>(n) * C + c];
                const double* ip = tx.data() + (static_cast<std::size_t>(n) * C + c) * HW;
                double* op = out.data() + (static_cast<std::size_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) op[i] = sv * ip[i];
            }
        int ix = x.id, is = s.id;
        return make(std::move(out), {x, s}, [ix, is, N, C, HW](Tape& t, const Tensor& g) {
            const Tensor& vx = t.node_value(ix);
            const Tensor& vs = t.node_value(is);
            if (t.node_requires_grad(ix)) {
                Tensor& gx = t.node_grad(ix);
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        double sv = vs[static_cast<std::size_t>(n) * C + c];
                        const double* gp = g.data() + (static_cast<std::size_t>(n) * C + c) * HW;
                        double* xp = gx.data() + (static_cast<std::size_t>(n) * C + c) * HW;
                        for (int i = 0; i < HW; ++i) xp[i] += sv * gp[i];
                    }
            }
            if (t.node_requires_grad(is)) {
                Tensor& gs = t.node_grad(is);
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const double* gp = g.data() + (static_cast<std::size_t>(n) * C + c) * HW;
                        const double* xp = vx.data() + (static_cast<std::size_t>(n) * C + c) * HW;
                        double acc = 0.0;
                        for (int i = 0; i < HW; ++i) acc += gp[i] * xp[i];
                        gs[static_cast<std::size_t>(n) * C + c] += acc;
                    }
            }
        });
    }

    // x + strength * noise, noise [H,W] broadcast over batch and channels.
    Ref add_noise(Ref x, const Tensor& noise, Ref strength) {
        const Tensor& tx = val(x);
        const Tensor& tstr = val(strength);
        if (tx.rank() != 4 || noise.rank() != 2 || tx.dim(2) != noise.dim(0) || tx.dim(3) != noise.dim(1))
            throw ShapeError("add_noise: shape mismatch");
        if (tstr.size() != 1) throw ShapeError("add_noise: strength must be scalar");
        int N = tx.dim(0), C = tx.dim(1), HW = tx.dim(2) * tx.dim(3);
        double sv = tstr[0];
        Tensor out(tx.shape());
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const double* ip = tx.data() + (static_cast<std::size_t>(n) * C + c) * HW;
                double* op = out.data() + (static_cast<std::size_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) op[i] = ip[i] + sv * noise[static_cast<std::size_t>(i)];
            }
        int ix = x.id, is = strength.id;
        Tensor noise_copy = noise;
        return make(std::move(out), {x, strength}, [ix, is, N, C, HW, noise_copy](Tape& t, const Tensor& g) {
            if (t.node_requires_grad(ix)) {
                Tensor& gx = t.node_grad(ix);
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
            }
            if (t.node_requires_grad(is)) {
                Tensor& gs = t.node_grad(is);
                double acc = 0.0;
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const double* gp = g.data() + (static_cast<std::size_t>(n) * C + c) * HW;
                        for (int i = 0; i < HW; ++i) acc += gp[i] * noise_copy[static_cast<std::size_t>(i)];
                    }
                gs[0] += acc;
            }
        });
    }

    // Crop `size`x`size` windows at the given (top, left) locations from every
    // image; output batch is location-major: index = loc * N + n.
    Ref crop_stack(Ref x, const std::vector<std::pair<int, int>>& locations, int size) {
        const Tensor& tx = val(x);
        if (tx.rank() != 4) throw ShapeError("crop_stack: rank mismatch");
        int N = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
        for (auto [top, left] : locations)
            if (top < 0 || left < 0 || top + size > H || left + size > W)
                throw BoundsError("crop location out of range");
        int L = static_cast<int>(locations.size());
        Tensor out({L * N, C, size, size});
        for (int l = 0; l < L; ++l)
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int y = 0; y < size; ++y)
                        for (int xx = 0; xx < size; ++xx)
                            out.at(l * N + n, c, y, xx) =
                                tx.at(n, c, locations[static_cast<std::size_t>(l)].first + y,
                                      locations[static_cast<std::size_t>(l)].second + xx);
        int ix = x.id;
        auto locs = locations;
        return make(std::move(out), {x}, [ix, locs, N, C, size](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            Tensor& gx = t.node_grad(ix);
            int L = static_cast<int>(locs.size());
            for (int l = 0; l < L; ++l)
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c)
                        for (int y = 0; y < size; ++y)
                            for (int xx = 0; xx < size; ++xx)
                                gx.at(n, c, locs[static_cast<std::size_t>(l)].first + y,
                                      locs[static_cast<std::size_t>(l)].second + xx) += g.at(l * N + n, c, y, xx);
        });
    }

    // Bilinear resize; identical sizes reproduce the input exactly.
    Ref resize_bilinear(Ref x, int oh, int ow) {
        const Tensor& tx = val(x);
        if (tx.rank() != 4) throw ShapeError("resize_bilinear: rank mismatch");
        int N = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
        if (oh == H && ow == W) return x;
        struct Tap { int i0, i1; double w0, w1; };
        auto taps = [](int out_n, int in_n) {
            std::vector<Tap> v(static_cast<std::size_t>(out_n));
            double s = static_cast<double>(in_n) / out_n;
            for (int i = 0; i < out_n; ++i) {
                double src = (i + 0.5) * s - 0.5;
                double f = std::floor(src);
                int i0 = static_cast<int>(f);
                double a = src - f;
                int j0 = std::min(std::max(i0, 0), in_n - 1);
                int j1 = std::min(std::max(i0 + 1, 0), in_n - 1);
                v[static_cast<std::size_t>(i)] = Tap{j0, j1, 1.0 - a, a};
            }
            return v;
        };
        auto ty = taps(oh, H);
        auto tw = taps(ow, W);
        Tensor out({N, C, oh, ow});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < oh; ++y)
                    for (int xx = 0; xx < ow; ++xx) {
                        const Tap& a = ty[static_cast<std::size_t>(y)];
                        const Tap& b = tw[static_cast<std::size_t>(xx)];
                        out.at(n, c, y, xx) = a.w0 * (b.w0 * tx.at(n, c, a.i0, b.i0) + b.w1 * tx.at(n, c, a.i0, b.i1)) +
                                              a.w1 * (b.w0 * tx.at(n, c, a.i1, b.i0) + b.w1 * tx.at(n, c, a.i1, b.i1));
                    }
        int ix = x.id;
        return make(std::move(out), {x}, [ix, ty, tw, N, C, oh, ow](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            Tensor& gx = t.node_grad(ix);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int y = 0; y < oh; ++y)
                        for (int xx = 0; xx < ow; ++xx) {
                            const Tap& a = ty[static_cast<std::size_t>(y)];
                            const Tap& b = tw[static_cast<std::size_t>(xx)];
                            double gv = g.at(n, c, y, xx);
                            gx.at(n, c, a.i0, b.i0) += a.w0 * b.w0 * gv;
                            gx.at(n, c, a.i0, b.i1) += a.w0 * b.w1 * gv;
                            gx.at(n, c, a.i1, b.i0) += a.w1 * b.w0 * gv;
                            gx.at(n, c, a.i1, b.i1) += a.w1 * b.w1 * gv;
                        }
        });
    }

    // Sample x at the source coordinates in grid [OH,OW,2] (y, x order),
    // bilinear with clamp-to-edge; the grid is constant wrt the input.
    Ref warp(Ref x, const Tensor& grid) {
        const Tensor& tx = val(x);
        if (tx.rank() != 4 || grid.rank() != 3 || grid.dim(2) != 2) throw ShapeError("warp: bad shapes");
        int N = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
        int OH = grid.dim(0), OW = grid.dim(1);
        struct Tap { int y0, y1, x0, x1; double wy, wx; };
        std::vector<Tap> taps(static_cast<std::size_t>(OH) * OW);
        for (int y = 0; y < OH; ++y)
            for (int xx = 0; xx < OW; ++xx) {
                double sy = grid[(static_cast<std::size_t>(y) * OW + xx) * 2 + 0];
                double sx = grid[(static_cast<std::size_t>(y) * OW + xx) * 2 + 1];
                sy = std::min(std::max(sy, 0.0), static_cast<double>(H - 1));
                sx = std::min(std::max(sx, 0.0), static_cast<double>(W - 1));
                double fy = std::floor(sy), fx = std::floor(sx);
                Tap tp;
                tp.y0 = static_cast<int>(fy);
                tp.x0 = static_cast<int>(fx);
                tp.y1 = std::min(tp.y0 + 1, H - 1);
                tp.x1 = std::min(tp.x0 + 1, W - 1);
                tp.wy = sy - fy;
                tp.wx = sx - fx;
                taps[static_cast<std::size_t>(y) * OW + xx] = tp;
            }
        Tensor out({N, C, OH, OW});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < OH; ++y)
                    for (int xx = 0; xx < OW; ++xx) {
                        const Tap& tp = taps[static_cast<std::size_t>(y) * OW + xx];
                        double v00 = tx.at(n, c, tp.y0, tp.x0), v01 = tx.at(n, c, tp.y0, tp.x1);
                        double v10 = tx.at(n, c, tp.y1, tp.x0), v11 = tx.at(n, c, tp.y1, tp.x1);
                        out.at(n, c, y, xx) = (1 - tp.wy) * ((1 - tp.wx) * v00 + tp.wx * v01) +
                                              tp.wy * ((1 - tp.wx) * v10 + tp.wx * v11);
                    }
        int ix = x.id;
        return make(std::move(out), {x}, [ix, taps, N, C, OH, OW](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            Tensor& gx = t.node_grad(ix);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int y = 0; y < OH; ++y)
                        for (int xx = 0; xx < OW; ++xx) {
                            const Tap& tp = taps[static_cast<std::size_t>(y) * OW + xx];
                            double gv = g.at(n, c, y, xx);
                            gx.at(n, c, tp.y0, tp.x0) += (1 - tp.wy) * (1 - tp.wx) * gv;
                            gx.at(n, c, tp.y0, tp.x1) += (1 - tp.wy) * tp.wx * gv;
                            gx.at(n, c, tp.y1, tp.x0) += tp.wy * (1 - tp.wx) * gv;
                            gx.at(n, c, tp.y1, tp.x1) += tp.wy * tp.wx * gv;
                        }
        });
    }

    // Normalize every row of [B,E] to unit Euclidean norm.
    Ref rows_normalize(Ref x) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2) throw ShapeError("rows_normalize: rank mismatch");
        int B = tx.dim(0), E = tx.dim(1);
        Tensor out(tx.shape());
        std::vector<double> norms(static_cast<std::size_t>(B));
        for (int n = 0; n < B; ++n) {
            const double* r = tx.data() + static_cast<std::size_t>(n) * E;
            double s = 0.0;
            for (int i = 0; i < E; ++i) s += r[i] * r[i];
            double nv = std::sqrt(s);
            norms[static_cast<std::size_t>(n)] = nv;
            double inv = nv > 0.0 ? 1.0 / nv : 0.0;
            double* o = out.data() + static_cast<std::size_t>(n) * E;
            for (int i = 0; i < E; ++i) o[i] = r[i] * inv;
        }
        int ix = x.id, self = next_id();
        return make(std::move(out), {x}, [ix, self, B, E, norms](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            const Tensor& vy = t.node_value(self);  // normalized rows
            Tensor& gx = t.node_grad(ix);
            for (int n = 0; n < B; ++n) {
                double nv = norms[static_cast<std::size_t>(n)];
                if (nv <= 0.0) continue;
                const double* yr = vy.data() + static_cast<std::size_t>(n) * E;
                const double* gr = g.data() + static_cast<std::size_t>(n) * E;
                double dot = 0.0;
                for (int i = 0; i < E; ++i) dot += yr[i] * gr[i];
                double* xr = gx.data() + static_cast<std::size_t>(n) * E;
                for (int i = 0; i < E; ++i) xr[i] += (gr[i] - dot * yr[i]) / nv;
            }
        });
    }

    // Dot products of selected row pairs of one embedding matrix: out[p] =
    // <emb[i_p], emb[j_p]>.
    Ref pair_dots(Ref emb, const std::vector<std::pair<int, int>>& pairs) {
        const Tensor& te = val(emb);
        if (te.rank() != 2) throw ShapeError("pair_dots: rank mismatch");
        int E = te.dim(1);
        Tensor out({static_cast<int>(pairs.size())});
        for (std::size_t p = 0; p < pairs.size(); ++p) {
            const double* a = te.data() + static_cast<std::size_t>(pairs[p].first) * E;
            const double* b = te.data() + static_cast<std::size_t>(pairs[p].second) * E;
            double acc = 0.0;
            for (int i = 0; i < E; ++i) acc += a[i] * b[i];
            out[p] = acc;
        }
        int ie = emb.id;
        auto ps = pairs;
        return make(std::move(out), {emb}, [ie, ps, E](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ie)) return;
            const Tensor& ve = t.node_value(ie);
            Tensor& ge = t.node_grad(ie);
            for (std::size_t p = 0; p < ps.size(); ++p) {
                double gv = g[p];
                const double* a = ve.data() + static_cast<std::size_t>(ps[p].first) * E;
                const double* b = ve.data() + static_cast<std::size_t>(ps[p].second) * E;
                double* ga = ge.data() + static_cast<std::size_t>(ps[p].first) * E;
                double* gb = ge.data() + static_cast<std::size_t>(ps[p].second) * E;
                for (int i = 0; i < E; ++i) {
                    ga[i] += gv * b[i];
                    gb[i] += gv * a[i];
                }
            }
        });
    }

    // Dot of row ia of a with row ib of b -> scalar.
    Ref row_dot(Ref a, Ref b, int ia_row, int ib_row) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(1)) throw ShapeError("row_dot: shapes");
        int E = ta.dim(1);
        Tensor out({1});
        const double* ar = ta.data() + static_cast<std::size_t>(ia_row) * E;
        const double* br = tb.data() + static_cast<std::size_t>(ib_row) * E;
        double acc = 0.0;
        for (int i = 0; i < E; ++i) acc += ar[i] * br[i];
        out[0] = acc;
        int ia = a.id, ib = b.id;
        return make(std::move(out), {a, b}, [ia, ib, ia_row, ib_row, E](Tape& t, const Tensor& g) {
            const Tensor& va = t.node_value(ia);
            const Tensor& vb = t.node_value(ib);
            double gv = g[0];
            if (t.node_requires_grad(ia)) {
                double* ga = t.node_grad(ia).data() + static_cast<std::size_t>(ia_row) * E;
                const double* br = vb.data() + static_cast<std::size_t>(ib_row) * E;
                for (int i = 0; i < E; ++i) ga[i] += gv * br[i];
            }
            if (t.node_requires_grad(ib)) {
                double* gb = t.node_grad(ib).data() + static_cast<std::size_t>(ib_row) * E;
                const double* ar = va.data() + static_cast<std::size_t>(ia_row) * E;
                for (int i = 0; i < E; ++i) gb[i] += gv * ar[i];
            }
        });
    }

    // Mean over each image's channels and pixels: [N,C,H,W] -> [N].
    Ref image_mean(Ref x) {
        const Tensor& tx = val(x);
        if (tx.rank() != 4) throw ShapeError("image_mean: rank mismatch");
        int N = tx.dim(0);
        std::size_t per = tx.size() / static_cast<std::size_t>(N);
        Tensor out({N});
        for (int n = 0; n < N; ++n) {
            const double* p = tx.data() + static_cast<std::size_t>(n) * per;
            double acc = 0.0;
            for (std::size_t i = 0; i < per; ++i) acc += p[i];
            out[static_cast<std::size_t>(n)] = acc / static_cast<double>(per);
        }
        int ix = x.id;
        return make(std::move(out), {x}, [ix, N, per](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            Tensor& gx = t.node_grad(ix);
            for (int n = 0; n < N; ++n) {
                double gv = g[static_cast<std::size_t>(n)] / static_cast<double>(per);
                double* p = gx.data() + static_cast<std::size_t>(n) * per;
                for (std::size_t i = 0; i < per; ++i) p[i] += gv;
            }
        });
    }

    Ref reshape(Ref x, std::vector<int> shape) {
        const Tensor& tx = val(x);
        std::size_t n = 1;
        for (int d : shape) n *= static_cast<std::size_t>(d);
        if (n != tx.size()) throw ShapeError("reshape: size mismatch");
        Tensor out = tx;
        Tensor reshaped = Tensor::from_data(std::move(shape), std::vector<double>(out.data(), out.data() + out.size()));
        int ix = x.id;
        return make(std::move(reshaped), {x}, [ix](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            Tensor& gx = t.node_grad(ix);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
        });
    }

    Ref concat0(const std::vector<Ref>& parts) {
        if (parts.empty()) throw ArgumentError("concat0: empty");
        const Tensor& first = val(parts[0]);
        std::vector<int> shape = first.shape();
        int total = 0;
        std::size_t per_row = first.size() / static_cast<std::size_t>(first.dim(0));
        for (Ref p : parts) {
            const Tensor& t = val(p);
            if (t.rank() != first.rank()) throw ShapeError("concat0: rank mismatch");
            for (int i = 1; i < t.rank(); ++i)
                if (t.dim(i) != first.dim(i)) throw ShapeError("concat0: trailing dims mismatch");
            total += t.dim(0);
        }
        shape[0] = total;
        Tensor out(shape);
        std::size_t off = 0;
        for (Ref p : parts) {
            const Tensor& t = val(p);
            for (std::size_t i = 0; i < t.size(); ++i) out[off + i] = t[i];
            off += t.size();
        }
        std::vector<int> ids;
        ids.reserve(parts.size());
        for (Ref p : parts) ids.push_back(p.id);
        return make(std::move(out), parts, [ids, per_row](Tape& t, const Tensor& g) {
            std::size_t off = 0;
            (void)per_row;
            for (int id : ids) {
                std::size_t n = t.node_value(id).size();
                if (t.node_requires_grad(id)) {
                    Tensor& gx = t.node_grad(id);
                    for (std::size_t i = 0; i < n; ++i) gx[i] += g[off + i];
                }
                off += n;
            }
        });
    }

    // [B,d] -> [B,L,d] by repeating each row L times.
    Ref broadcast_layers(Ref w, int L) {
        const Tensor& tw = val(w);
        if (tw.rank() != 2) throw ShapeError("broadcast_layers: rank mismatch");
        int B = tw.dim(0), d = tw.dim(1);
        Tensor out({B, L, d});
        for (int n = 0; n < B; ++n)
            for (int l = 0; l < L; ++l)
                for (int i = 0; i < d; ++i)
                    out[(static_cast<std::size_t>(n) * L + l) * d + i] = tw[static_cast<std::size_t>(n) * d + i];
        int iw = w.id;
        return make(std::move(out), {w}, [iw, B, L, d](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(iw)) return;
            Tensor& gw = t.node_grad(iw);
            for (int n = 0; n < B; ++n)
                for (int l = 0; l < L; ++l)
                    for (int i = 0; i < d; ++i)
                        gw[static_cast<std::size_t>(n) * d + i] += g[(static_cast<std::size_t>(n) * L + l) * d + i];
        });
    }

    // [B,L,d] -> [B,d], selecting one style layer.
    Ref select_layer(Ref wplus, int layer) {
        const Tensor& tw = val(wplus);
        if (tw.rank() != 3) throw ShapeError("select_layer: rank mismatch");
        int B = tw.dim(0), L = tw.dim(1), d = tw.dim(2);
        if (layer < 0 || layer >= L) throw ArgumentError("select_layer: layer out of range");
        Tensor out({B, d});
        for (int n = 0; n < B; ++n)
            for (int i = 0; i < d; ++i)
                out[static_cast<std::size_t>(n) * d + i] = tw[(static_cast<std::size_t>(n) * L + layer) * d + i];
        int iw = wplus.id;
        return make(std::move(out), {wplus}, [iw, B, L, d, layer](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(iw)) return;
            Tensor& gw = t.node_grad(iw);
            for (int n = 0; n < B; ++n)
                for (int i = 0; i < d; ++i)
                    gw[(static_cast<std::size_t>(n) * L + layer) * d + i] += g[static_cast<std::size_t>(n) * d + i];
        });
    }

    // Per-row pixel norm: x / sqrt(mean(x^2) + eps), rows of [B,d].
    Ref row_pixel_norm(Ref x, double eps = 1e-8) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2) throw ShapeError("row_pixel_norm: rank mismatch");
        int B = tx.dim(0), d = tx.dim(1);
        Tensor out(tx.shape());
        std::vector<double> inv(static_cast<std::size_t>(B));
        for (int n = 0; n < B; ++n) {
            const double* r = tx.data() + static_cast<std::size_t>(n) * d;
            double s = 0.0;
            for (int i = 0; i < d; ++i) s += r[i] * r[i];
            double iv = 1.0 / std::sqrt(s / d + eps);
            inv[static_cast<std::size_t>(n)] = iv;
            double* o = out.data() + static_cast<std::size_t>(n) * d;
            for (int i = 0; i < d; ++i) o[i] = r[i] * iv;
        }
        int ix = x.id;
        return make(std::move(out), {x}, [ix, B, d, inv, eps](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix)) return;
            const Tensor& vx = t.node_value(ix);
            Tensor& gx = t.node_grad(ix);
            for (int n = 0; n < B; ++n) {
                double iv = inv[static_cast<std::size_t>(n)];
                const double* r = vx.data() + static_cast<std::size_t>(n) * d;
                const double* gr = g.data() + static_cast<std::size_t>(n) * d;
                double dot = 0.0;
                for (int i = 0; i < d; ++i) dot += r[i] * gr[i];
                double* o = gx.data() + static_cast<std::size_t>(n) * d;
                // d/dx [x * iv] with iv = (mean(x^2)+eps)^-1/2
                double c = iv * iv * iv * dot / d;
                for (int i = 0; i < d; ++i) o[i] += gr[i] * iv - c * r[i];
            }
        });
    }

    // Euclidean norm of the whole tensor, subgradient 0 at the origin.
    Ref norm2(Ref x) {
        const Tensor& tx = val(x);
        double s = 0.0;
        for (std::size_t i = 0; i < tx.size(); ++i) s += tx[i] * tx[i];
        double nv = std::sqrt(s);
        Tensor out({1});
        out[0] = nv;
        int ix = x.id;
        return make(std::move(out), {x}, [ix, nv](Tape& t, const Tensor& g) {
            if (!t.node_requires_grad(ix) || nv < 1e-12) return;
            const Tensor& vx = t.node_value(ix);
            Tensor& gx = t.node_grad(ix);
            double s = g[0] / nv;
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s * vx[i];
        });
    }

    Ref stack_scalars(const std::vector<Ref>& xs) {
        Tensor out({static_cast<int>(xs.size())});
        for (std::size_t i = 0; i < xs.size(); ++i) out[i] = item(xs[i]);
        std::vector<int> ids;
        ids.reserve(xs.size());
        for (Ref r : xs) ids.push_back(r.id);
        return make(std::move(out), xs, [ids](Tape& t, const Tensor& g) {
            for (std::size_t i = 0; i < ids.size(); ++i)
                if (t.node_requires_grad(ids[i])) t.node_grad(ids[i])[0] += g[i];
        });
    }

    // ------------------------------------------------------- node access

    const Tensor& node_value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool node_requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    Tensor& node_grad(int id) { return grad(Ref{id}); }

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(Tape&)> backward;
        ParamTensor* param = nullptr;
    };

    int next_id() const { return static_cast<int>(nodes_.size()); }

    Ref push(Tensor v, bool rg, ParamTensor* p) {
        nodes_.push_back(Node{std::move(v), Tensor{}, rg && grad_enabled_, nullptr, p});
        return Ref{static_cast<int>(nodes_.size()) - 1};
    }

    void accumulate(Ref p, const Tensor& g, double s) {
        if (!node_requires_grad(p.id)) return;
        Tensor& gp = node_grad(p.id);
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += s * g[i];
    }

    template <typename F>
    Ref make(Tensor out, const std::vector<Ref>& parents, F&& back) {
        bool rg = false;
        if (grad_enabled_)
            for (Ref p : parents) rg = rg || nodes_[static_cast<std::size_t>(p.id)].requires_grad;
        Ref r = push(std::move(out), rg, nullptr);
        if (rg) {
            int self = r.id;
            auto fn = std::forward<F>(back);
            nodes_[static_cast<std::size_t>(r.id)].backward = [self, fn](Tape& t) {
                fn(t, t.nodes_[static_cast<std::size_t>(self)].grad);
            };
        }
        return r;
    }

    template <typename F>
    Ref unary_binary(Tensor out, Ref a, Ref b, F&& back) {
        auto fn = std::forward<F>(back);
        return make(std::move(out), {a, b}, [a, b, fn](Tape& t, const Tensor& g) { fn(t, g, a, b); });
    }

    void check_same_shape(Ref a, Ref b, const char* op) const {
        if (!val(a).shape_equals(val(b)))
            throw ShapeError(std::string(op) + ": shape mismatch " + val(a).shape_str() + " vs " + val(b).shape_str());
    }

    bool grad_enabled_ = true;
    std::deque<Node> nodes_;
};

}  // namespace oneclip
