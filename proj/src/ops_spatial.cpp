#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "dv/kernels.hpp"
#include "dv/tensor.hpp"

namespace dv {

namespace {

struct TapWeights {
    std::int64_t x0, y0, x1, y1;
    double wx, wy;  // fractional parts
    bool inside(std::int64_t h, std::int64_t w, std::int64_t x, std::int64_t y) const {
        return x >= 0 && x < w && y >= 0 && y < h;
    }
};

// Cell-center convention (align_corners = false): norm -1..1 maps to
// pixel centers at px = (n+1)/2 * extent - 0.5.
TapWeights taps_for(double nx, double ny, std::size_t h, std::size_t w) {
    const double px = (nx + 1.0) * 0.5 * static_cast<double>(w) - 0.5;
    const double py = (ny + 1.0) * 0.5 * static_cast<double>(h) - 0.5;
    TapWeights t;
    t.x0 = static_cast<std::int64_t>(std::floor(px));
    t.y0 = static_cast<std::int64_t>(std::floor(py));
    t.x1 = t.x0 + 1;
    t.y1 = t.y0 + 1;
    t.wx = px - static_cast<double>(t.x0);
    t.wy = py - static_cast<double>(t.y0);
    return t;
}

}  // namespace

Tensor bilinear_sample(const Tensor& grid, const Tensor& coords) {
    if (grid.rank() != 3 || coords.rank() != 2 || coords.dim(1) != 2) {
        throw std::invalid_argument("bilinear_sample: expects grid [C,H,W], coords [P,2]");
    }
    const std::size_t c = grid.dim(0), h = grid.dim(1), w = grid.dim(2);
    const std::size_t p = coords.dim(0);
    const std::size_t hw = h * w;

    Tensor out = make_node({p, c}, {grid, coords}, [c, h, w, p, hw](Node& self) {
        Node* pg = self.parents[0].node();
        Node* pc = self.parents[1].node();
        const std::int64_t ih = static_cast<std::int64_t>(h);
        const std::int64_t iw = static_cast<std::int64_t>(w);
        const double sx = 0.5 * static_cast<double>(w);
        const double sy = 0.5 * static_cast<double>(h);
        for (std::size_t i = 0; i < p; ++i) {
            const double nx = pc->v[i * 2 + 0];
            const double ny = pc->v[i * 2 + 1];
            if (!std::isfinite(nx) || !std::isfinite(ny)) continue;
            const TapWeights t = taps_for(nx, ny, h, w);
            const double w00 = (1.0 - t.wx) * (1.0 - t.wy);
            const double w10 = t.wx * (1.0 - t.wy);
            const double w01 = (1.0 - t.wx) * t.wy;
            const double w11 = t.wx * t.wy;
            double dpx = 0.0, dpy = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double go = self.g[i * c + ch];
                if (go == 0.0) continue;
                const double* plane = pg->v.data() + ch * hw;
                double* gplane = pg->requires_grad ? pg->grad_buf() + ch * hw : nullptr;
                const double v00 = t.inside(ih, iw, t.x0, t.y0) ? plane[t.y0 * iw + t.x0] : 0.0;
                const double v10 = t.inside(ih, iw, t.x1, t.y0) ? plane[t.y0 * iw + t.x1] : 0.0;
                const double v01 = t.inside(ih, iw, t.x0, t.y1) ? plane[t.y1 * iw + t.x0] : 0.0;
                const double v11 = t.inside(ih, iw, t.x1, t.y1) ? plane[t.y1 * iw + t.x1] : 0.0;
                if (gplane) {
                    if (t.inside(ih, iw, t.x0, t.y0)) gplane[t.y0 * iw + t.x0] += go * w00;
                    if (t.inside(ih, iw, t.x1, t.y0)) gplane[t.y0 * iw + t.x1] += go * w10;
                    if (t.inside(ih, iw, t.x0, t.y1)) gplane[t.y1 * iw + t.x0] += go * w01;
                    if (t.inside(ih, iw, t.x1, t.y1)) gplane[t.y1 * iw + t.x1] += go * w11;
                }
                // d(sample)/d(px) etc., chain through px = (nx+1)/2*W - 0.5
                dpx += go * ((v10 - v00) * (1.0 - t.wy) + (v11 - v01) * t.wy);
                dpy += go * ((v01 - v00) * (1.0 - t.wx) + (v11 - v10) * t.wx);
            }
            if (pc->requires_grad) {
                double* gc = pc->grad_buf();
                gc[i * 2 + 0] += dpx * sx;
                gc[i * 2 + 1] += dpy * sy;
            }
        }
    });

    const std::int64_t ih = static_cast<std::int64_t>(h);
    const std::int64_t iw = static_cast<std::int64_t>(w);
    for (std::size_t i = 0; i < p; ++i) {
        const double nx = coords.data()[i * 2 + 0];
        const double ny = coords.data()[i * 2 + 1];
        if (!std::isfinite(nx) || !std::isfinite(ny)) {
            throw std::invalid_argument("bilinear_sample: non-finite coordinates");
        }
        const TapWeights t = taps_for(nx, ny, h, w);
        const double w00 = (1.0 - t.wx) * (1.0 - t.wy);
        const double w10 = t.wx * (1.0 - t.wy);
        const double w01 = (1.0 - t.wx) * t.wy;
        const double w11 = t.wx * t.wy;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* plane = grid.data() + ch * hw;
            double v = 0.0;
            if (t.inside(ih, iw, t.x0, t.y0)) v += w00 * plane[t.y0 * iw + t.x0];
            if (t.inside(ih, iw, t.x1, t.y0)) v += w10 * plane[t.y0 * iw + t.x1];
            if (t.inside(ih, iw, t.x0, t.y1)) v += w01 * plane[t.y1 * iw + t.x0];
            if (t.inside(ih, iw, t.x1, t.y1)) v += w11 * plane[t.y1 * iw + t.x1];
            out.data()[i * c + ch] = v;
        }
    }
    return out;
}

Tensor scatter_reduce(const Tensor& values, const std::vector<std::int64_t>& rows,
                      const std::vector<std::int64_t>& cols, std::size_t h,
                      std::size_t w, Reduce reduce) {
    if (values.rank() != 2 || rows.size() != values.dim(0) || cols.size() != values.dim(0)) {
        throw std::invalid_argument("scatter_reduce: expects values [P,C] with P indices");
    }
    const std::size_t p = values.dim(0), c = values.dim(1);
    const std::size_t hw = h * w;

    // Cell id per point, -1 for skipped
    std::vector<std::int64_t> cell(p, -1);
    for (std::size_t i = 0; i < p; ++i) {
        if (rows[i] >= 0 && rows[i] < static_cast<std::int64_t>(h) && cols[i] >= 0 &&
            cols[i] < static_cast<std::int64_t>(w)) {
            cell[i] = rows[i] * static_cast<std::int64_t>(w) + cols[i];
        }
    }

    std::vector<std::int32_t> count(hw, 0);
    for (std::size_t i = 0; i < p; ++i) {
        if (cell[i] >= 0) ++count[static_cast<std::size_t>(cell[i])];
    }

    Tensor out;
    if (reduce == Reduce::Max) {
        // argmax per (cell, channel) for gradient routing
        std::vector<std::int64_t> argm(hw * c, -1);
        for (std::size_t i = 0; i < p; ++i) {
            if (cell[i] < 0) continue;
            const std::size_t ci = static_cast<std::size_t>(cell[i]);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double v = values.data()[i * c + ch];
                const std::int64_t cur = argm[ci * c + ch];
                if (cur < 0 || v > values.data()[cur * c + ch]) {
                    argm[ci * c + ch] = static_cast<std::int64_t>(i);
                }
            }
        }
        out = make_node({c, h, w}, {values}, [c, hw, argm](Node& self) {
            Node* pv = self.parents[0].node();
            if (!pv->requires_grad) return;
            double* gv = pv->grad_buf();
            for (std::size_t cell_i = 0; cell_i < hw; ++cell_i) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::int64_t src = argm[cell_i * c + ch];
                    if (src >= 0) gv[src * c + ch] += self.g[ch * hw + cell_i];
                }
            }
        });
        for (std::size_t cell_i = 0; cell_i < hw; ++cell_i) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::int64_t src = argm[cell_i * c + ch];
                out.data()[ch * hw + cell_i] = src >= 0 ? values.data()[src * c + ch] : 0.0;
            }
        }
        return out;
    }

    const bool is_mean = reduce == Reduce::Mean;
    out = make_node({c, h, w}, {values}, [p, c, hw, cell, count, is_mean](Node& self) {
        Node* pv = self.parents[0].node();
        if (!pv->requires_grad) return;
        double* gv = pv->grad_buf();
        for (std::size_t i = 0; i < p; ++i) {
            if (cell[i] < 0) continue;
            const std::size_t ci = static_cast<std::size_t>(cell[i]);
            const double scale_i = is_mean ? 1.0 / static_cast<double>(count[ci]) : 1.0;
            for (std::size_t ch = 0; ch < c; ++ch) {
                gv[i * c + ch] += self.g[ch * hw + ci] * scale_i;
            }
        }
    });
    for (std::size_t i = 0; i < p; ++i) {
        if (cell[i] < 0) continue;
        const std::size_t ci = static_cast<std::size_t>(cell[i]);
        for (std::size_t ch = 0; ch < c; ++ch) {
            out.data()[ch * hw + ci] += values.data()[i * c + ch];
        }
    }
    if (is_mean) {
        for (std::size_t ci = 0; ci < hw; ++ci) {
            if (count[ci] > 1) {
                const double inv = 1.0 / static_cast<double>(count[ci]);
                for (std::size_t ch = 0; ch < c; ++ch) out.data()[ch * hw + ci] *= inv;
            }
        }
    }
    return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad) {
    if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1) {
        throw std::invalid_argument("conv2d: expects x [Cin,H,W], w [Cout,Cin,kh,kw], b [Cout]");
    }
    const std::size_t cin = x.dim(0), hh = x.dim(1), ww = x.dim(2);
    const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != cin || b.dim(0) != cout) {
        throw std::invalid_argument("conv2d: channel mismatch");
    }
    if (stride == 0) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (hh + 2 * pad < kh || ww + 2 * pad < kw) {
        throw std::invalid_argument("conv2d: kernel larger than padded input");
    }
    const std::size_t ho = (hh + 2 * pad - kh) / stride + 1;
    const std::size_t wo = (ww + 2 * pad - kw) / stride + 1;
    const std::size_t kdim = cin * kh * kw;
    const std::size_t npix = ho * wo;

    // im2col: [kdim, npix]
    auto col = std::make_shared<std::vector<double>>(kdim * npix, 0.0);
    {
        double* cd = col->data();
        const double* xd = x.data();
        for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const std::size_t krow = (ci * kh + ky) * kw + kx;
                    double* crow = cd + krow * npix;
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        const std::int64_t iy =
                            static_cast<std::int64_t>(oy * stride + ky) - static_cast<std::int64_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::int64_t>(hh)) continue;
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const std::int64_t ix = static_cast<std::int64_t>(ox * stride + kx) -
                                                    static_cast<std::int64_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::int64_t>(ww)) continue;
                            crow[oy * wo + ox] = xd[(ci * hh + iy) * ww + ix];
                        }
                    }
                }
            }
        }
    }

    Tensor out = make_node(
        {cout, ho, wo}, {x, w, b},
        [cin, hh, ww, cout, kh, kw, ho, wo, kdim, npix, stride, pad, col](Node& self) {
            Node* px = self.parents[0].node();
            Node* pw = self.parents[1].node();
            Node* pb = self.parents[2].node();
            const double* gy = self.g.data();  // [cout, npix]
            if (pb->requires_grad) {
                double* gb = pb->grad_buf();
                for (std::size_t co = 0; co < cout; ++co) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < npix; ++i) s += gy[co * npix + i];
                    gb[co] += s;
                }
            }
            if (pw->requires_grad) {
                // dW[cout, kdim] += dY[cout, npix] * col[kdim, npix]^T
                kern::active().gemm_bt(cout, kdim, npix, gy, col->data(), pw->grad_buf(), true);
            }
            if (px->requires_grad) {
                // dcol = W^T[kdim, cout] * dY[cout, npix]
                std::vector<double> dcol(kdim * npix, 0.0);
                kern::active().gemm_at(kdim, npix, cout, pw->v.data(), gy, dcol.data(), false);
                double* gx = px->grad_buf();
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const std::size_t krow = (ci * kh + ky) * kw + kx;
                            const double* crow = dcol.data() + krow * npix;
                            for (std::size_t oy = 0; oy < ho; ++oy) {
                                const std::int64_t iy = static_cast<std::int64_t>(oy * stride + ky) -
                                                        static_cast<std::int64_t>(pad);
                                if (iy < 0 || iy >= static_cast<std::int64_t>(hh)) continue;
                                for (std::size_t ox = 0; ox < wo; ++ox) {
                                    const std::int64_t ix =
                                        static_cast<std::int64_t>(ox * stride + kx) -
                                        static_cast<std::int64_t>(pad);
                                    if (ix < 0 || ix >= static_cast<std::int64_t>(ww)) continue;
                                    gx[(ci * hh + iy) * ww + ix] += crow[oy * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        });
    // Y[cout, npix] = W[cout, kdim] * col[kdim, npix] + b
    kern::active().gemm(cout, npix, kdim, w.data(), col->data(), out.data(), false);
    for (std::size_t co = 0; co < cout; ++co) {
        const double bv = b.data()[co];
        for (std::size_t i = 0; i < npix; ++i) out.data()[co * npix + i] += bv;
    }
    return out;
}

Tensor masked_max_slots(const Tensor& x, const std::vector<std::uint8_t>& mask) {
    if (x.rank() != 3 || mask.size() != x.dim(0) * x.dim(1)) {
        throw std::invalid_argument("masked_max_slots: expects [K,S,C] with K*S mask");
    }
    const std::size_t k = x.dim(0), s = x.dim(1), c = x.dim(2);
    // argmax slot index per (k, ch) for gradient routing
    std::vector<std::int64_t> arg(k * c, -1);
    for (std::size_t ki = 0; ki < k; ++ki) {
        for (std::size_t si = 0; si < s; ++si) {
            if (!mask[ki * s + si]) continue;
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double v = x.data()[(ki * s + si) * c + ch];
                const std::int64_t cur = arg[ki * c + ch];
                if (cur < 0 ||
                    v > x.data()[(ki * s + static_cast<std::size_t>(cur)) * c + ch]) {
                    arg[ki * c + ch] = static_cast<std::int64_t>(si);
                }
            }
        }
    }
    Tensor out = make_node({k, c}, {x}, [k, s, c, arg](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::int64_t si = arg[ki * c + ch];
                if (si >= 0) {
                    gp[(ki * s + static_cast<std::size_t>(si)) * c + ch] += self.g[ki * c + ch];
                }
            }
        }
    });
    for (std::size_t ki = 0; ki < k; ++ki) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::int64_t si = arg[ki * c + ch];
            out.data()[ki * c + ch] =
                si >= 0 ? x.data()[(ki * s + static_cast<std::size_t>(si)) * c + ch] : 0.0;
        }
    }
    return out;
}

Tensor weighted_sum_slots(const Tensor& x, const Tensor& w) {
    if (x.rank() != 3 || w.rank() != 2 || x.dim(0) != w.dim(0) || x.dim(1) != w.dim(1)) {
        throw std::invalid_argument("weighted_sum_slots: expects x [K,S,C], w [K,S]");
    }
    const std::size_t k = x.dim(0), s = x.dim(1), c = x.dim(2);
    Tensor out = make_node({k, c}, {x, w}, [k, s, c](Node& self) {
        Node* px = self.parents[0].node();
        Node* pw = self.parents[1].node();
        double* gx = px->requires_grad ? px->grad_buf() : nullptr;
        double* gw = pw->requires_grad ? pw->grad_buf() : nullptr;
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t si = 0; si < s; ++si) {
                const double wv = pw->v[ki * s + si];
                const double* xv = px->v.data() + (ki * s + si) * c;
                const double* go = self.g.data() + ki * c;
                if (gx) {
                    kern::active().axpy(c, wv, go, gx + (ki * s + si) * c);
                }
                if (gw) {
                    gw[ki * s + si] += kern::active().dot(c, xv, go);
                }
            }
        }
    });
    for (std::size_t ki = 0; ki < k; ++ki) {
        for (std::size_t si = 0; si < s; ++si) {
            kern::active().axpy(c, w.data()[ki * s + si], x.data() + (ki * s + si) * c,
                                out.data() + ki * c);
        }
    }
    return out;
}

}  // namespace dv
