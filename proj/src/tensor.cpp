#include "promptseg/tensor.hpp"

#include <cmath>

namespace promptseg {

int Tape::push(Mat value, bool needs, std::function<void()> back) {
    Node n;
    n.val = std::move(value);
    n.needs = needs;
    if (needs) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::ensure_grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.val.rows(), n.val.cols());
}

Val Tape::leaf(const Mat& value, bool needs) {
    return {push(value, needs, nullptr)};
}

Val Tape::add(Val a, Val b) {
    bool req = requires_grad(a) || requires_grad(b);
    int ia = a.id, ib = b.id;
    int id = push(nodes_[ia].val + nodes_[ib].val, req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia, ib]() {
            const Mat& g = nodes_[id].grad;
            if (nodes_[ia].needs) { ensure_grad(ia); nodes_[ia].grad += g; }
            if (nodes_[ib].needs) { ensure_grad(ib); nodes_[ib].grad += g; }
        };
    }
    return {id};
}

Val Tape::sub(Val a, Val b) {
    bool req = requires_grad(a) || requires_grad(b);
    int ia = a.id, ib = b.id;
    int id = push(nodes_[ia].val - nodes_[ib].val, req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia, ib]() {
            const Mat& g = nodes_[id].grad;
            if (nodes_[ia].needs) { ensure_grad(ia); nodes_[ia].grad += g; }
            if (nodes_[ib].needs) { ensure_grad(ib); nodes_[ib].grad -= g; }
        };
    }
    return {id};
}

Val Tape::mul(Val a, Val b) {
    bool req = requires_grad(a) || requires_grad(b);
    int ia = a.id, ib = b.id;
    int id = push(nodes_[ia].val.cwiseProduct(nodes_[ib].val), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia, ib]() {
            const Mat& g = nodes_[id].grad;
            if (nodes_[ia].needs) {
                ensure_grad(ia);
                nodes_[ia].grad += g.cwiseProduct(nodes_[ib].val);
            }
            if (nodes_[ib].needs) {
                ensure_grad(ib);
                nodes_[ib].grad += g.cwiseProduct(nodes_[ia].val);
            }
        };
    }
    return {id};
}

Val Tape::div(Val a, Val b) {
    bool req = requires_grad(a) || requires_grad(b);
    int ia = a.id, ib = b.id;
    int id = push(nodes_[ia].val.cwiseQuotient(nodes_[ib].val), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia, ib]() {
            const Mat& g = nodes_[id].grad;
            const Mat& bv = nodes_[ib].val;
            if (nodes_[ia].needs) {
                ensure_grad(ia);
                nodes_[ia].grad += g.cwiseQuotient(bv);
            }
            if (nodes_[ib].needs) {
                ensure_grad(ib);
                nodes_[ib].grad -=
                    g.cwiseProduct(nodes_[ia].val).cwiseQuotient(bv.cwiseProduct(bv));
            }
        };
    }
    return {id};
}

Val Tape::affine(Val a, double k, double c) {
    bool req = requires_grad(a);
    int ia = a.id;
    int id = push((nodes_[ia].val.array() * k + c).matrix(), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia, k]() {
            ensure_grad(ia);
            nodes_[ia].grad += k * nodes_[id].grad;
        };
    }
    return {id};
}

Val Tape::add_rowvec(Val a, Val row) {
    bool req = requires_grad(a) || requires_grad(row);
    int ia = a.id, ir = row.id;
    Mat v = nodes_[ia].val;
    v.rowwise() += nodes_[ir].val.row(0);
    int id = push(std::move(v), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia, ir]() {
            const Mat& g = nodes_[id].grad;
            if (nodes_[ia].needs) { ensure_grad(ia); nodes_[ia].grad += g; }
            if (nodes_[ir].needs) {
                ensure_grad(ir);
                nodes_[ir].grad += g.colwise().sum();
            }
        };
    }
    return {id};
}

Val Tape::mul_rowvec(Val a, Val row) {
    bool req = requires_grad(a) || requires_grad(row);
    int ia = a.id, ir = row.id;
    Mat v = nodes_[ia].val.array().rowwise() * nodes_[ir].val.row(0).array();
    int id = push(std::move(v), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia, ir]() {
            const Mat& g = nodes_[id].grad;
            if (nodes_[ia].needs) {
                ensure_grad(ia);
                nodes_[ia].grad.array() += g.array().rowwise() * nodes_[ir].val.row(0).array();
            }
            if (nodes_[ir].needs) {
                ensure_grad(ir);
                nodes_[ir].grad += (g.cwiseProduct(nodes_[ia].val)).colwise().sum();
            }
        };
    }
    return {id};
}

Val Tape::matmul(Val a, Val b) {
    bool req = requires_grad(a) || requires_grad(b);
    int ia = a.id, ib = b.id;
    const Mat& av = nodes_[ia].val;
    const Mat& bv = nodes_[ib].val;
    stats.total_madds += static_cast<long long>(av.rows()) * av.cols() * bv.cols();
    int id = push(av * bv, req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia, ib]() {
            const Mat& g = nodes_[id].grad;
            if (nodes_[ia].needs) {
                ensure_grad(ia);
                nodes_[ia].grad.noalias() += g * nodes_[ib].val.transpose();
            }
            if (nodes_[ib].needs) {
                ensure_grad(ib);
                nodes_[ib].grad.noalias() += nodes_[ia].val.transpose() * g;
            }
        };
    }
    return {id};
}

Val Tape::matmul_nt(Val a, Val b) {
    bool req = requires_grad(a) || requires_grad(b);
    int ia = a.id, ib = b.id;
    const Mat& av = nodes_[ia].val;
    const Mat& bv = nodes_[ib].val;
    stats.total_madds += static_cast<long long>(av.rows()) * av.cols() * bv.rows();
    int id = push(av * bv.transpose(), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia, ib]() {
            const Mat& g = nodes_[id].grad;
            if (nodes_[ia].needs) {
                ensure_grad(ia);
                nodes_[ia].grad.noalias() += g * nodes_[ib].val;
            }
            if (nodes_[ib].needs) {
                ensure_grad(ib);
                nodes_[ib].grad.noalias() += g.transpose() * nodes_[ia].val;
            }
        };
    }
    return {id};
}

Val Tape::transpose(Val a) {
    bool req = requires_grad(a);
    int ia = a.id;
    int id = push(nodes_[ia].val.transpose(), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia]() {
            ensure_grad(ia);
            nodes_[ia].grad += nodes_[id].grad.transpose();
        };
    }
    return {id};
}

Val Tape::gelu(Val a) {
    bool req = requires_grad(a);
    int ia = a.id;
    const Mat& x = nodes_[ia].val;
    Mat y = (0.5 * x.array() *
             (1.0 + x.array().unaryExpr([](double v) { return std::erf(v / M_SQRT2); })))
                .matrix();
    int id = push(std::move(y), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia]() {
            ensure_grad(ia);
            const auto x = nodes_[ia].val.array();
            const Eigen::ArrayXXd cdf =
                0.5 * (1.0 +
                       x.unaryExpr([](double v) { return std::erf(v / M_SQRT2); }));
            const Eigen::ArrayXXd pdf = (-0.5 * x.square()).exp() / std::sqrt(2.0 * M_PI);
            nodes_[ia].grad.array() += nodes_[id].grad.array() * (cdf + x * pdf);
        };
    }
    return {id};
}

Val Tape::sigmoid(Val a) {
    bool req = requires_grad(a);
    int ia = a.id;
    Mat y = (1.0 / (1.0 + (-nodes_[ia].val.array()).exp())).matrix();
    int id = push(std::move(y), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia]() {
            ensure_grad(ia);
            const auto y = nodes_[id].val.array();
            nodes_[ia].grad.array() += nodes_[id].grad.array() * y * (1.0 - y);
        };
    }
    return {id};
}

Val Tape::softmax_rows(Val a) {
    bool req = requires_grad(a);
    int ia = a.id;
    Mat y = nodes_[ia].val;
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
        double m = y.row(r).maxCoeff();
        y.row(r) = (y.row(r).array() - m).exp();
        y.row(r) /= y.row(r).sum();
    }
    int id = push(std::move(y), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia]() {
            ensure_grad(ia);
            const Mat& y = nodes_[id].val;
            const Mat& g = nodes_[id].grad;
            Mat dot = (g.cwiseProduct(y)).rowwise().sum();  // R x 1
            nodes_[ia].grad.array() +=
                y.array() * (g.array().colwise() - dot.col(0).array());
        };
    }
    return {id};
}

Val Tape::layernorm_rows(Val a, double eps) {
    bool req = requires_grad(a);
    int ia = a.id;
    const Mat& x = nodes_[ia].val;
    const double d = static_cast<double>(x.cols());
    Eigen::VectorXd mu = x.rowwise().mean();
    Mat centered = x.array().colwise() - mu.array();
    Eigen::VectorXd var = centered.array().square().rowwise().mean();
    Eigen::VectorXd inv = (var.array() + eps).sqrt().inverse();
    Mat y = centered.array().colwise() * inv.array();
    int id = push(std::move(y), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia, inv, d]() {
            ensure_grad(ia);
            const Mat& y = nodes_[id].val;
            const Mat& g = nodes_[id].grad;
            Eigen::VectorXd gmean = g.rowwise().mean();
            Eigen::VectorXd gymean = (g.cwiseProduct(y)).rowwise().mean();
            Mat dx = (g.array().colwise() - gmean.array()) -
                     (y.array().colwise() * gymean.array());
            (void)d;
            nodes_[ia].grad.array() += dx.array().colwise() * inv.array();
        };
    }
    return {id};
}

Val Tape::slice_cols(Val a, int start, int n) {
    bool req = requires_grad(a);
    int ia = a.id;
    int id = push(nodes_[ia].val.middleCols(start, n), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia, start, n]() {
            ensure_grad(ia);
            nodes_[ia].grad.middleCols(start, n) += nodes_[id].grad;
        };
    }
    return {id};
}

Val Tape::slice_rows(Val a, int start, int n) {
    bool req = requires_grad(a);
    int ia = a.id;
    int id = push(nodes_[ia].val.middleRows(start, n), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia, start, n]() {
            ensure_grad(ia);
            nodes_[ia].grad.middleRows(start, n) += nodes_[id].grad;
        };
    }
    return {id};
}

Val Tape::concat_cols(Val a, Val b) {
    bool req = requires_grad(a) || requires_grad(b);
    int ia = a.id, ib = b.id;
    const Mat& av = nodes_[ia].val;
    const Mat& bv = nodes_[ib].val;
    Mat v(av.rows(), av.cols() + bv.cols());
    v << av, bv;
    int na = static_cast<int>(av.cols());
    int nb = static_cast<int>(bv.cols());
    int id = push(std::move(v), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia, ib, na, nb]() {
            const Mat& g = nodes_[id].grad;
            if (nodes_[ia].needs) {
                ensure_grad(ia);
                nodes_[ia].grad += g.leftCols(na);
            }
            if (nodes_[ib].needs) {
                ensure_grad(ib);
                nodes_[ib].grad += g.rightCols(nb);
            }
        };
    }
    return {id};
}

Val Tape::sum(Val a) {
    bool req = requires_grad(a);
    int ia = a.id;
    Mat v(1, 1);
    v(0, 0) = nodes_[ia].val.sum();
    int id = push(std::move(v), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ia]() {
            ensure_grad(ia);
            nodes_[ia].grad.array() += nodes_[id].grad(0, 0);
        };
    }
    return {id};
}

Val Tape::mean(Val a) {
    double n = static_cast<double>(nodes_[a.id].val.size());
    return scale(sum(a), 1.0 / n);
}

Val Tape::bce_logits_mean(Val logits, const Mat& target) {
    bool req = requires_grad(logits);
    int ia = logits.id;
    const auto z = nodes_[ia].val.array();
    const auto t = target.array();
    // max(z,0) - z*t + log(1+exp(-|z|))
    double loss =
        (z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).log()).mean();
    Mat v(1, 1);
    v(0, 0) = loss;
    double n = static_cast<double>(target.size());
    int id = push(std::move(v), req, nullptr);
    if (req) {
        Mat tgt = target;
        nodes_[id].back = [this, id, ia, tgt, n]() {
            ensure_grad(ia);
            const auto z = nodes_[ia].val.array();
            const auto sig = 1.0 / (1.0 + (-z).exp());
            nodes_[ia].grad.array() +=
                nodes_[id].grad(0, 0) * (sig - tgt.array()) / n;
        };
    }
    return {id};
}

Val Tape::conv2d(Val x, Val w, Val b, int cin, int h, int wd, int cout, int k,
                 int stride, int pad) {
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (wd + 2 * pad - k) / stride + 1;
    const Mat& xv = nodes_[x.id].val;
    if (xv.rows() != cin || xv.cols() != static_cast<Eigen::Index>(h) * wd)
        throw InputError("conv2d: input shape mismatch");

    // im2col: [cin*k*k x ho*wo]
    Mat patches = Mat::Zero(static_cast<Eigen::Index>(cin) * k * k,
                            static_cast<Eigen::Index>(ho) * wo);
    for (int r0 = 0; r0 < ho; ++r0) {
        for (int c0 = 0; c0 < wo; ++c0) {
            int po = r0 * wo + c0;
            for (int dy = 0; dy < k; ++dy) {
                int ri = r0 * stride + dy - pad;
                if (ri < 0 || ri >= h) continue;
                for (int dx = 0; dx < k; ++dx) {
                    int ci = c0 * stride + dx - pad;
                    if (ci < 0 || ci >= wd) continue;
                    for (int ch = 0; ch < cin; ++ch)
                        patches((ch * k + dy) * k + dx, po) = xv(ch, ri * wd + ci);
                }
            }
        }
    }
    stats.total_madds += static_cast<long long>(cout) * patches.rows() * patches.cols();
    Mat y = nodes_[w.id].val * patches;
    y.colwise() += nodes_[b.id].val.col(0);

    bool req = requires_grad(x) || requires_grad(w) || requires_grad(b);
    int ix = x.id, iw = w.id, ib = b.id;
    int id = push(std::move(y), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ix, iw, ib, patches, cin, h, wd, k, stride,
                           pad, ho, wo]() {
            const Mat& g = nodes_[id].grad;
            if (nodes_[iw].needs) {
                ensure_grad(iw);
                nodes_[iw].grad.noalias() += g * patches.transpose();
            }
            if (nodes_[ib].needs) {
                ensure_grad(ib);
                nodes_[ib].grad.col(0) += g.rowwise().sum();
            }
            if (nodes_[ix].needs) {
                ensure_grad(ix);
                Mat dp = nodes_[iw].val.transpose() * g;  // [cin*k*k x ho*wo]
                Mat& dx = nodes_[ix].grad;
                for (int r0 = 0; r0 < ho; ++r0) {
                    for (int c0 = 0; c0 < wo; ++c0) {
                        int po = r0 * wo + c0;
                        for (int dy = 0; dy < k; ++dy) {
                            int ri = r0 * stride + dy - pad;
                            if (ri < 0 || ri >= h) continue;
                            for (int dxk = 0; dxk < k; ++dxk) {
                                int ci = c0 * stride + dxk - pad;
                                if (ci < 0 || ci >= wd) continue;
                                for (int ch = 0; ch < cin; ++ch)
                                    dx(ch, ri * wd + ci) +=
                                        dp((ch * k + dy) * k + dxk, po);
                            }
                        }
                    }
                }
            }
        };
    }
    return {id};
}

Val Tape::upsample2x(Val x, int c, int h, int w) {
    const Mat& xv = nodes_[x.id].val;
    Mat y(c, static_cast<Eigen::Index>(4) * h * w);
    const int wo = 2 * w;
    for (int r = 0; r < 2 * h; ++r)
        for (int col = 0; col < wo; ++col)
            y.col(r * wo + col) = xv.col((r / 2) * w + col / 2);
    bool req = requires_grad(x);
    int ix = x.id;
    int id = push(std::move(y), req, nullptr);
    if (req) {
        nodes_[id].back = [this, id, ix, h, w, wo]() {
            ensure_grad(ix);
            const Mat& g = nodes_[id].grad;
            Mat& dx = nodes_[ix].grad;
            for (int r = 0; r < 2 * h; ++r)
                for (int col = 0; col < wo; ++col)
                    dx.col((r / 2) * w + col / 2) += g.col(r * wo + col);
        };
    }
    return {id};
}

void Tape::backward(Val out) {
    Node& last = nodes_[out.id];
    if (last.val.size() != 1) throw InputError("backward: output must be scalar");
    ensure_grad(out.id);
    last.grad(0, 0) = 1.0;
    for (int i = out.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.needs && n.back && n.grad.size() != 0) n.back();
    }
}

}  // namespace promptseg
