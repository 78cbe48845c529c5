#include "cupre/autodiff.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>

#include "cupre/errors.hpp"

namespace cupre::ad {

namespace {

double stable_softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// BCE with logits, numerically stable: max(x,0) - x*t + log(1+e^{-|x|}).
double bce_logit(double x, double t) {
    return std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
}

int conv_out(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

VarId Tape::push(Tensor val, std::function<void(Tape&, VarId)> back) {
    nodes_.push_back(Node{std::move(val), Tensor{}, std::move(back)});
    return static_cast<VarId>(nodes_.size() - 1);
}

VarId Tape::put(Tensor t) { return push(std::move(t), nullptr); }

void Tape::backward(VarId root) {
    assert(val(root).numel() == 1);
    for (auto& n : nodes_) {
        n.grad.shape = n.val.shape;
        n.grad.v.assign(n.val.v.size(), 0.0);
    }
    grad_mut(root).v[0] = 1.0;
    for (VarId id = static_cast<VarId>(nodes_.size()) - 1; id >= 0; --id) {
        auto& node = nodes_[static_cast<std::size_t>(id)];
        if (node.back) node.back(*this, id);
    }
}

VarId Tape::add(VarId a, VarId b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    assert(same_shape(ta, tb));
    Tensor out = ta;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += tb.v[i];
    return push(std::move(out), [a, b](Tape& t, VarId self) {
        const auto& g = t.grad(self).v;
        auto& ga = t.grad_mut(a).v;
        auto& gb = t.grad_mut(b).v;
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    });
}

VarId Tape::scale(VarId a, double k) {
    Tensor out = val(a);
    for (auto& x : out.v) x *= k;
    return push(std::move(out), [a, k](Tape& t, VarId self) {
        const auto& g = t.grad(self).v;
        auto& ga = t.grad_mut(a).v;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += k * g[i];
    });
}

VarId Tape::add_const(VarId a, double k) {
    Tensor out = val(a);
    for (auto& x : out.v) x += k;
    return push(std::move(out), [a](Tape& t, VarId self) {
        const auto& g = t.grad(self).v;
        auto& ga = t.grad_mut(a).v;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

VarId Tape::relu(VarId a) {
    Tensor out = val(a);
    for (auto& x : out.v) x = std::max(x, 0.0);
    return push(std::move(out), [a](Tape& t, VarId self) {
        const auto& g = t.grad(self).v;
        const auto& x = t.val(a).v;
        auto& ga = t.grad_mut(a).v;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > 0.0) ga[i] += g[i];
    });
}

VarId Tape::softplus(VarId a) {
    Tensor out = val(a);
    for (auto& x : out.v) x = stable_softplus(x);
    return push(std::move(out), [a](Tape& t, VarId self) {
        const auto& g = t.grad(self).v;
        const auto& x = t.val(a).v;
        auto& ga = t.grad_mut(a).v;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += sigmoid(x[i]) * g[i];
    });
}

VarId Tape::conv2d(VarId x, VarId w, VarId b, int stride, int pad) {
    const Tensor& tx = val(x);  // [Cin,H,W]
    const Tensor& tw = val(w);  // [Cout,Cin,k,k]
    const Tensor& tb = val(b);  // [Cout]
    assert(tx.ndim() == 3 && tw.ndim() == 4);
    const int cin = tx.dim(0), h = tx.dim(1), wd = tx.dim(2);
    const int cout = tw.dim(0), k = tw.dim(2);
    assert(tw.dim(1) == cin && tw.dim(3) == k && tb.dim(0) == cout);
    const int oh = conv_out(h, k, stride, pad);
    const int ow = conv_out(wd, k, stride, pad);

    Tensor out({cout, oh, ow});
    for (int oc = 0; oc < cout; ++oc) {
        const double bias = tb.v[static_cast<std::size_t>(oc)];
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) out.at(oc, oy, ox) = bias;
        for (int ic = 0; ic < cin; ++ic) {
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    const double wv = tw.v[((static_cast<std::size_t>(oc) * cin + ic) * k + ky) * k + kx];
                    if (wv == 0.0) continue;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= wd) continue;
                            out.at(oc, oy, ox) += wv * tx.at(ic, iy, ix);
                        }
                    }
                }
            }
        }
    }

    return push(std::move(out), [x, w, b, stride, pad](Tape& t, VarId self) {
        const Tensor& g = t.grad(self);
        const Tensor& tx = t.val(x);
        const Tensor& tw = t.val(w);
        Tensor& gx = t.grad_mut(x);
        Tensor& gw = t.grad_mut(w);
        Tensor& gb = t.grad_mut(b);
        const int cin = tx.dim(0), h = tx.dim(1), wd = tx.dim(2);
        const int cout = tw.dim(0), k = tw.dim(2);
        const int oh = g.dim(1), ow = g.dim(2);
        for (int oc = 0; oc < cout; ++oc) {
            double bsum = 0.0;
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) bsum += g.at(oc, oy, ox);
            gb.v[static_cast<std::size_t>(oc)] += bsum;
            for (int ic = 0; ic < cin; ++ic) {
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        const std::size_t wi =
                            ((static_cast<std::size_t>(oc) * cin + ic) * k + ky) * k + kx;
                        const double wv = tw.v[wi];
                        double wsum = 0.0;
                        for (int oy = 0; oy < oh; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int ox = 0; ox < ow; ++ox) {
                                const int ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= wd) continue;
                                const double go = g.at(oc, oy, ox);
                                wsum += go * tx.at(ic, iy, ix);
                                gx.at(ic, iy, ix) += go * wv;
                            }
                        }
                        gw.v[wi] += wsum;
                    }
                }
            }
        }
    });
}

VarId Tape::upsample2x(VarId x) {
    const Tensor& tx = val(x);
    assert(tx.ndim() == 3);
    const int c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
    Tensor out({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                out.at(ch, y, xx) = tx.at(ch, y / 2, xx / 2);
    return push(std::move(out), [x](Tape& t, VarId self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_mut(x);
        const int c = gx.dim(0), h = gx.dim(1), w = gx.dim(2);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    gx.at(ch, y / 2, xx / 2) += g.at(ch, y, xx);
    });
}

VarId Tape::global_avg_pool(VarId x) {
    const Tensor& tx = val(x);
    assert(tx.ndim() == 3);
    const int c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
    const double inv = 1.0 / (static_cast<double>(h) * w);
    Tensor out({c});
    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) s += tx.at(ch, y, xx);
        out.v[static_cast<std::size_t>(ch)] = s * inv;
    }
    return push(std::move(out), [x, inv](Tape& t, VarId self) {
        const auto& g = t.grad(self).v;
        Tensor& gx = t.grad_mut(x);
        const int c = gx.dim(0), h = gx.dim(1), w = gx.dim(2);
        for (int ch = 0; ch < c; ++ch) {
            const double gv = g[static_cast<std::size_t>(ch)] * inv;
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) gx.at(ch, y, xx) += gv;
        }
    });
}

VarId Tape::linear(VarId x, VarId w, VarId b) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    const Tensor& tb = val(b);
    assert(tx.ndim() == 1 && tw.ndim() == 2);
    const int in = tx.dim(0), out_dim = tw.dim(0);
    assert(tw.dim(1) == in && tb.dim(0) == out_dim);
    Tensor out({out_dim});
    for (int o = 0; o < out_dim; ++o) {
        double s = tb.v[static_cast<std::size_t>(o)];
        const double* row = &tw.v[static_cast<std::size_t>(o) * in];
        for (int i = 0; i < in; ++i) s += row[i] * tx.v[static_cast<std::size_t>(i)];
        out.v[static_cast<std::size_t>(o)] = s;
    }
    return push(std::move(out), [x, w, b](Tape& t, VarId self) {
        const auto& g = t.grad(self).v;
        const Tensor& tx = t.val(x);
        const Tensor& tw = t.val(w);
        auto& gx = t.grad_mut(x).v;
        auto& gw = t.grad_mut(w).v;
        auto& gb = t.grad_mut(b).v;
        const int in = tx.dim(0), out_dim = tw.dim(0);
        for (int o = 0; o < out_dim; ++o) {
            const double go = g[static_cast<std::size_t>(o)];
            gb[static_cast<std::size_t>(o)] += go;
            const double* row = &tw.v[static_cast<std::size_t>(o) * in];
            double* grow = &gw[static_cast<std::size_t>(o) * in];
            for (int i = 0; i < in; ++i) {
                grow[i] += go * tx.v[static_cast<std::size_t>(i)];
                gx[static_cast<std::size_t>(i)] += go * row[i];
            }
        }
    });
}

VarId Tape::l2_normalize(VarId x, double eps) {
    const Tensor& tx = val(x);
    double nsq = 0.0;
    for (double v : tx.v) nsq += v * v;
    const double norm = std::sqrt(nsq) + eps;
    Tensor out = tx;
    for (auto& v : out.v) v /= norm;
    return push(std::move(out), [x, norm](Tape& t, VarId self) {
        const auto& g = t.grad(self).v;
        const auto& xv = t.val(x).v;
        auto& gx = t.grad_mut(x).v;
        // d/dx (x/n) = I/n - x x^T / n^3 with n treated as ||x|| + eps
        double dot = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * xv[i];
        const double n3 = norm * norm * norm;
        for (std::size_t i = 0; i < g.size(); ++i)
            gx[i] += g[i] / norm - xv[i] * dot / n3;
    });
}

VarId Tape::dots_with_consts(VarId x, const std::vector<std::vector<double>>& rows) {
    const Tensor& tx = val(x);
    const int n = static_cast<int>(rows.size());
    Tensor out({n});
    for (int r = 0; r < n; ++r) {
        assert(rows[static_cast<std::size_t>(r)].size() == tx.v.size());
        double s = 0.0;
        for (std::size_t i = 0; i < tx.v.size(); ++i)
            s += tx.v[i] * rows[static_cast<std::size_t>(r)][i];
        out.v[static_cast<std::size_t>(r)] = s;
    }
    return push(std::move(out), [x, rows](Tape& t, VarId self) {
        const auto& g = t.grad(self).v;
        auto& gx = t.grad_mut(x).v;
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const double gr = g[r];
            if (gr == 0.0) continue;
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gr * rows[r][i];
        }
    });
}

VarId Tape::nll_first(VarId logits) {
    const auto& s = val(logits).v;
    assert(!s.empty());
    const double mx = *std::max_element(s.begin(), s.end());
    double sum = 0.0;
    for (double x : s) sum += std::exp(x - mx);
    const double lse = mx + std::log(sum);
    Tensor out = Tensor::scalar(lse - s[0]);
    return push(std::move(out), [logits, lse](Tape& t, VarId self) {
        const double g = t.grad(self).v[0];
        const auto& s = t.val(logits).v;
        auto& gs = t.grad_mut(logits).v;
        for (std::size_t i = 0; i < s.size(); ++i) {
            double p = std::exp(s[i] - lse);  // softmax
            gs[i] += g * (p - (i == 0 ? 1.0 : 0.0));
        }
    });
}

VarId Tape::nll_first_strict(VarId logits) {
    const auto& s = val(logits).v;
    if (s.size() < 2)
        throw ArgumentError("strict InfoNCE form needs at least one negative");
    const double mx = *std::max_element(s.begin() + 1, s.end());
    double sum = 0.0;
    for (std::size_t i = 1; i < s.size(); ++i) sum += std::exp(s[i] - mx);
    const double lse = mx + std::log(sum);
    Tensor out = Tensor::scalar(lse - s[0]);
    return push(std::move(out), [logits, lse](Tape& t, VarId self) {
        const double g = t.grad(self).v[0];
        const auto& s = t.val(logits).v;
        auto& gs = t.grad_mut(logits).v;
        gs[0] -= g;
        for (std::size_t i = 1; i < s.size(); ++i)
            gs[i] += g * std::exp(s[i] - lse);
    });
}

VarId Tape::softmax_ce_sum(VarId logits, std::vector<int> labels) {
    const Tensor& tl = val(logits);
    assert(tl.ndim() == 3);
    const int c = tl.dim(0), h = tl.dim(1), w = tl.dim(2);
    assert(static_cast<int>(labels.size()) == h * w);
    double total = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double mx = tl.at(0, y, x);
            for (int ch = 1; ch < c; ++ch) mx = std::max(mx, tl.at(ch, y, x));
            double sum = 0.0;
            for (int ch = 0; ch < c; ++ch) sum += std::exp(tl.at(ch, y, x) - mx);
            const int lbl = labels[static_cast<std::size_t>(y) * w + x];
            total += mx + std::log(sum) - tl.at(lbl, y, x);
        }
    }
    return push(Tensor::scalar(total),
                [logits, labels = std::move(labels)](Tape& t, VarId self) {
        const double g = t.grad(self).v[0];
        const Tensor& tl = t.val(logits);
        Tensor& gl = t.grad_mut(logits);
        const int c = tl.dim(0), h = tl.dim(1), w = tl.dim(2);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double mx = tl.at(0, y, x);
                for (int ch = 1; ch < c; ++ch) mx = std::max(mx, tl.at(ch, y, x));
                double sum = 0.0;
                for (int ch = 0; ch < c; ++ch) sum += std::exp(tl.at(ch, y, x) - mx);
                const int lbl = labels[static_cast<std::size_t>(y) * w + x];
                for (int ch = 0; ch < c; ++ch) {
                    const double p = std::exp(tl.at(ch, y, x) - mx) / sum;
                    gl.at(ch, y, x) += g * (p - (ch == lbl ? 1.0 : 0.0));
                }
            }
        }
    });
}

VarId Tape::smooth_l1_sum(VarId pred, Tensor target, std::vector<unsigned char> pos) {
    const Tensor& tp = val(pred);
    assert(same_shape(tp, target));
    const int k = tp.dim(0), h = tp.dim(1), w = tp.dim(2);
    assert(static_cast<int>(pos.size()) == h * w);
    double total = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!pos[static_cast<std::size_t>(y) * w + x]) continue;
            for (int ch = 0; ch < k; ++ch) {
                const double d = tp.at(ch, y, x) - target.at(ch, y, x);
                total += std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
            }
        }
    }
    return push(Tensor::scalar(total),
                [pred, target = std::move(target), pos = std::move(pos)](Tape& t, VarId self) {
        const double g = t.grad(self).v[0];
        const Tensor& tp = t.val(pred);
        Tensor& gp = t.grad_mut(pred);
        const int k = tp.dim(0), h = tp.dim(1), w = tp.dim(2);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (!pos[static_cast<std::size_t>(y) * w + x]) continue;
                for (int ch = 0; ch < k; ++ch) {
                    const double d = tp.at(ch, y, x) - target.at(ch, y, x);
                    gp.at(ch, y, x) += g * (std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0));
                }
            }
        }
    });
}

VarId Tape::bce_patches_sum(VarId logits, std::vector<int> ys, std::vector<int> xs,
                            std::vector<std::vector<double>> targets) {
    const Tensor& tl = val(logits);
    const int mm = tl.dim(0);
    assert(ys.size() == xs.size() && ys.size() == targets.size());
    double total = 0.0;
    for (std::size_t i = 0; i < ys.size(); ++i) {
        assert(static_cast<int>(targets[i].size()) == mm);
        for (int p = 0; p < mm; ++p)
            total += bce_logit(tl.at(p, ys[i], xs[i]), targets[i][static_cast<std::size_t>(p)]);
    }
    return push(Tensor::scalar(total),
                [logits, ys = std::move(ys), xs = std::move(xs),
                 targets = std::move(targets)](Tape& t, VarId self) {
        const double g = t.grad(self).v[0];
        const Tensor& tl = t.val(logits);
        Tensor& gl = t.grad_mut(logits);
        const int mm = tl.dim(0);
        for (std::size_t i = 0; i < ys.size(); ++i)
            for (int p = 0; p < mm; ++p)
                gl.at(p, ys[i], xs[i]) +=
                    g * (sigmoid(tl.at(p, ys[i], xs[i])) - targets[i][static_cast<std::size_t>(p)]);
    });
}

}  // namespace cupre::ad
