// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0
//
// Forward values and backward rules of every differentiable operation.

#include <Eigen/Dense>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "muse/autodiff.hpp"
#include "muse/errors.hpp"

namespace muse::ad {
namespace {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using CMap = Eigen::Map<const RowMat<Real>, 0, Eigen::OuterStride<>>;
template <typename Real>
using MMap = Eigen::Map<RowMat<Real>, 0, Eigen::OuterStride<>>;
template <typename Real>
using CArr = Eigen::Map<const Eigen::Array<Real, Eigen::Dynamic, 1>>;
template <typename Real>
using MArr = Eigen::Map<Eigen::Array<Real, Eigen::Dynamic, 1>>;

template <typename Real>
CMap<Real> cmat(const Real* p, std::size_t r, std::size_t c, std::size_t stride) {
    return CMap<Real>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c),
                      Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}
template <typename Real>
CMap<Real> cmat(std::span<const Real> s, std::size_t r, std::size_t c) {
    return cmat(s.data(), r, c, c);
}
template <typename Real>
MMap<Real> mmat(Real* p, std::size_t r, std::size_t c, std::size_t stride) {
    return MMap<Real>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c),
                      Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}
template <typename Real>
MMap<Real> mmat(std::span<Real> s, std::size_t r, std::size_t c) {
    return mmat(s.data(), r, c, c);
}
template <typename Real>
CArr<Real> carr(std::span<const Real> s) {
    return CArr<Real>(s.data(), static_cast<Eigen::Index>(s.size()));
}
template <typename Real>
MArr<Real> marr(std::span<Real> s) {
    return MArr<Real>(s.data(), static_cast<Eigen::Index>(s.size()));
}

template <typename Real>
void same_graph(const Var<Real>& a, const Var<Real>& b, const char* op) {
    if (&a.graph() != &b.graph()) {
        throw ArgumentError(std::string(op) + ": operands belong to different graphs");
    }
}

template <typename Real>
void same_shape(const Var<Real>& a, const Var<Real>& b, const char* op) {
    same_graph(a, b, op);
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                             " vs " + shape_string(b.shape()));
    }
}

template <typename Real>
void require_finite(std::span<const Real> v, const char* op) {
    for (Real x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string(op) + ": non-finite input");
        }
    }
}

template <typename Real>
void accumulate(std::span<Real> dst, std::span<const Real> src) {
    marr(dst) += carr(src);
}

}  // namespace


template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
    same_graph(a, b, "matmul");
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    if (b.shape().size() != 2 || b.rows() != k) {
        throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) +
                             " x " + shape_string(b.shape()));
    }
    Buffer<Real> out(n * m);
    mmat(std::span<Real>(out), n, m).noalias() = cmat(a.value(), n, k) * cmat(b.value(), k, m);
    auto& g = a.graph();
    const int ia = a.id(), ib = b.id();
    return g.emit(OpKind::MatMul, {n, m}, std::move(out), {ia, ib},
                  [&g, ia, ib, n, k, m](auto, std::span<const Real> go, GradTable<Real>& t) {
                      auto gout = cmat(go, n, m);
                      if (auto ga = t.at(ia); !ga.empty()) {
                          mmat(ga, n, k).noalias() += gout * cmat(g.value(ib), k, m).transpose();
                      }
                      if (auto gb = t.at(ib); !gb.empty()) {
                          mmat(gb, k, m).noalias() += cmat(g.value(ia), n, k).transpose() * gout;
                      }
                  });
}

template <typename Real>
Var<Real> linear_map(Var<Real> x, Var<Real> w, std::optional<Var<Real>> b) {
    same_graph(x, w, "linear_map");
    const std::size_t n = x.rows(), k = x.cols();
    if (w.shape().size() != 2 || w.rows() != k) {
        throw DimensionError("linear_map: dimension mismatch, x " + shape_string(x.shape()) +
                             " vs w " + shape_string(w.shape()));
    }
    const std::size_t m = w.cols();
    if (b) {
        same_graph(x, *b, "linear_map");
        if (b->size() != m) {
            throw DimensionError("linear_map: bias " + shape_string(b->shape()) +
                                 " does not match w " + shape_string(w.shape()));
        }
    }
    Buffer<Real> out(n * m);
    auto y = mmat(std::span<Real>(out), n, m);
    y.noalias() = cmat(x.value(), n, k) * cmat(w.value(), k, m);
    if (b) y.rowwise() += cmat(b->value(), 1, m).row(0);
    auto& g = x.graph();
    const int ix = x.id(), iw = w.id(), ib = b ? b->id() : -1;
    std::vector<int> parents{ix, iw};
    if (b) parents.push_back(ib);
    Shape shape = x.shape();
    shape.back() = m;
    return g.emit(OpKind::Linear, std::move(shape), std::move(out), std::move(parents),
                  [&g, ix, iw, ib, n, k, m](auto, std::span<const Real> go, GradTable<Real>& t) {
                      auto gout = cmat(go, n, m);
                      if (auto gx = t.at(ix); !gx.empty()) {
                          mmat(gx, n, k).noalias() += gout * cmat(g.value(iw), k, m).transpose();
                      }
                      if (auto gw = t.at(iw); !gw.empty()) {
                          mmat(gw, k, m).noalias() += cmat(g.value(ix), n, k).transpose() * gout;
                      }
                      if (ib >= 0) {
                          if (auto gb = t.at(ib); !gb.empty()) {
                              mmat(gb, 1, m).row(0) += gout.colwise().sum();
                          }
                      }
                  });
}

template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
    same_shape(a, b, "add");
    Buffer<Real> out(a.size());
    marr(std::span<Real>(out)) = carr(a.value()) + carr(b.value());
    const int ia = a.id(), ib = b.id();
    return a.graph().emit(OpKind::Add, a.shape(), std::move(out), {ia, ib},
                          [ia, ib](auto, std::span<const Real> go, GradTable<Real>& t) {
                              if (auto ga = t.at(ia); !ga.empty()) accumulate(ga, go);
                              if (auto gb = t.at(ib); !gb.empty()) accumulate(gb, go);
                          });
}

template <typename Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
    same_shape(a, b, "sub");
    Buffer<Real> out(a.size());
    marr(std::span<Real>(out)) = carr(a.value()) - carr(b.value());
    const int ia = a.id(), ib = b.id();
    return a.graph().emit(OpKind::Sub, a.shape(), std::move(out), {ia, ib},
                          [ia, ib](auto, std::span<const Real> go, GradTable<Real>& t) {
                              if (auto ga = t.at(ia); !ga.empty()) accumulate(ga, go);
                              if (auto gb = t.at(ib); !gb.empty()) marr(gb) -= carr(go);
                          });
}

template <typename Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
    same_shape(a, b, "mul");
    Buffer<Real> out(a.size());
    marr(std::span<Real>(out)) = carr(a.value()) * carr(b.value());
    auto& g = a.graph();
    const int ia = a.id(), ib = b.id();
    return g.emit(OpKind::Mul, a.shape(), std::move(out), {ia, ib},
                  [&g, ia, ib](auto, std::span<const Real> go, GradTable<Real>& t) {
                      if (auto ga = t.at(ia); !ga.empty()) marr(ga) += carr(go) * carr(g.value(ib));
                      if (auto gb = t.at(ib); !gb.empty()) marr(gb) += carr(go) * carr(g.value(ia));
                  });
}

template <typename Real>
Var<Real> scale(Var<Real> a, Real factor) {
    Buffer<Real> out(a.size());
    marr(std::span<Real>(out)) = carr(a.value()) * factor;
    const int ia = a.id();
    return a.graph().emit(OpKind::Scale, a.shape(), std::move(out), {ia},
                          [ia, factor](auto, std::span<const Real> go, GradTable<Real>& t) {
                              if (auto ga = t.at(ia); !ga.empty()) marr(ga) += carr(go) * factor;
                          });
}

template <typename Real>
Var<Real> add_row_broadcast(Var<Real> x, Var<Real> row) {
    same_graph(x, row, "add_row_broadcast");
    const std::size_t n = x.rows(), m = x.cols();
    if (row.size() != m) {
        throw DimensionError("add_row_broadcast: row " + shape_string(row.shape()) +
                             " does not match " + shape_string(x.shape()));
    }
    Buffer<Real> out(x.value().begin(), x.value().end());
    mmat(std::span<Real>(out), n, m).rowwise() += cmat(row.value(), 1, m).row(0);
    const int ix = x.id(), ir = row.id();
    return x.graph().emit(OpKind::AddRowBroadcast, x.shape(), std::move(out), {ix, ir},
                          [ix, ir, n, m](auto, std::span<const Real> go, GradTable<Real>& t) {
                              if (auto gx = t.at(ix); !gx.empty()) accumulate(gx, go);
                              if (auto gr = t.at(ir); !gr.empty()) {
                                  mmat(gr, 1, m).row(0) += cmat(go, n, m).colwise().sum();
                              }
                          });
}

template <typename Real>
Var<Real> exp(Var<Real> a) {
    Buffer<Real> out(a.size());
    marr(std::span<Real>(out)) = carr(a.value()).exp();
    const int ia = a.id();
    return a.graph().emit(OpKind::Exp, a.shape(), std::move(out), {ia},
                          [ia](std::span<const Real> y, std::span<const Real> go,
                               GradTable<Real>& t) {
                              if (auto ga = t.at(ia); !ga.empty()) marr(ga) += carr(go) * carr(y);
                          });
}

template <typename Real>
Var<Real> log(Var<Real> a) {
    for (Real x : a.value()) {
        if (!(x > Real(0))) throw NumericError("log: non-positive input");
    }
    Buffer<Real> out(a.size());
    marr(std::span<Real>(out)) = carr(a.value()).log();
    auto& g = a.graph();
    const int ia = a.id();
    return g.emit(OpKind::Log, a.shape(), std::move(out), {ia},
                  [&g, ia](auto, std::span<const Real> go, GradTable<Real>& t) {
                      if (auto ga = t.at(ia); !ga.empty()) marr(ga) += carr(go) / carr(g.value(ia));
                  });
}

template <typename Real>
Var<Real> gelu(Var<Real> a) {
    const Real inv_sqrt2 = Real(1) / std::numbers::sqrt2_v<Real>;
    Buffer<Real> out(a.size());
    const auto x = carr(a.value());
    marr(std::span<Real>(out)) = Real(0.5) * x * (Real(1) + (x * inv_sqrt2).erf());
    auto& g = a.graph();
    const int ia = a.id();
    return g.emit(OpKind::Gelu, a.shape(), std::move(out), {ia},
                  [&g, ia, inv_sqrt2](auto, std::span<const Real> go, GradTable<Real>& t) {
                      auto ga = t.at(ia);
                      if (ga.empty()) return;
                      const auto xv = carr(g.value(ia));
                      const Real inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<Real>;
                      marr(ga) += carr(go) *
                                  (Real(0.5) * (Real(1) + (xv * inv_sqrt2).erf()) +
                                   xv * inv_sqrt_2pi * (Real(-0.5) * xv.square()).exp());
                  });
}

template <typename Real>
Var<Real> square(Var<Real> a) {
    Buffer<Real> out(a.size());
    marr(std::span<Real>(out)) = carr(a.value()).square();
    auto& g = a.graph();
    const int ia = a.id();
    return g.emit(OpKind::Square, a.shape(), std::move(out), {ia},
                  [&g, ia](auto, std::span<const Real> go, GradTable<Real>& t) {
                      if (auto ga = t.at(ia); !ga.empty()) {
                          marr(ga) += Real(2) * carr(go) * carr(g.value(ia));
                      }
                  });
}

template <typename Real>
Var<Real> sum(Var<Real> a) {
    const int ia = a.id();
    const Real total = carr(a.value()).sum();
    return a.graph().emit(OpKind::Sum, {1}, {total}, {ia},
                          [ia](auto, std::span<const Real> go, GradTable<Real>& t) {
                              if (auto ga = t.at(ia); !ga.empty()) marr(ga) += go[0];
                          });
}

template <typename Real>
Var<Real> mean(Var<Real> a) {
    const int ia = a.id();
    const Real inv = Real(1) / static_cast<Real>(a.size());
    const Real total = carr(a.value()).sum() * inv;
    return a.graph().emit(OpKind::Mean, {1}, {total}, {ia},
                          [ia, inv](auto, std::span<const Real> go, GradTable<Real>& t) {
                              if (auto ga = t.at(ia); !ga.empty()) marr(ga) += go[0] * inv;
                          });
}

template <typename Real>
Var<Real> softmax_rows(Var<Real> logits) {
    const std::size_t n = logits.rows(), m = logits.cols();
    if (m < 1) throw DimensionError("softmax_rows: empty last dimension");
    require_finite(logits.value(), "softmax_rows");
    Buffer<Real> out(n * m);
    auto x = cmat(logits.value(), n, m);
    auto y = mmat(std::span<Real>(out), n, m);
    y = (x.colwise() - x.rowwise().maxCoeff()).array().exp().matrix();
    y.array().colwise() /= y.rowwise().sum().array();
    const int ix = logits.id();
    return logits.graph().emit(
        OpKind::SoftmaxRows, logits.shape(), std::move(out), {ix},
        [ix, n, m](std::span<const Real> yv, std::span<const Real> go, GradTable<Real>& t) {
            auto gx = t.at(ix);
            if (gx.empty()) return;
            auto y = cmat(yv, n, m);
            auto g = cmat(go, n, m);
            auto dot = (y.array() * g.array()).rowwise().sum().eval();
            mmat(gx, n, m).array() += y.array() * (g.array().colwise() - dot);
        });
}

template <typename Real>
Var<Real> stop_gradient(Var<Real> x) {
    Buffer<Real> out(x.value().begin(), x.value().end());
    return x.graph().emit(OpKind::StopGradient, x.shape(), std::move(out), {x.id()}, {});
}

template <typename Real>
Var<Real> layer_norm(Var<Real> x, Var<Real> gain, Var<Real> bias, Real eps) {
    same_graph(x, gain, "layer_norm");
    same_graph(x, bias, "layer_norm");
    const std::size_t n = x.rows(), d = x.cols();
    if (d < 1 || gain.size() != d || bias.size() != d) {
        throw DimensionError("layer_norm: x " + shape_string(x.shape()) + ", gain " +
                             shape_string(gain.shape()) + ", bias " + shape_string(bias.shape()));
    }
    if (!(eps > Real(0))) throw ArgumentError("layer_norm: eps must be positive");
    Buffer<Real> xhat(n * d), rstd(n), out(n * d);
    auto xm = cmat(x.value(), n, d);
    auto xh = mmat(std::span<Real>(xhat), n, d);
    for (std::size_t r = 0; r < n; ++r) {
        const auto ri = static_cast<Eigen::Index>(r);
        const Real mu = xm.row(ri).mean();
        const Real var = (xm.row(ri).array() - mu).square().mean();
        rstd[r] = Real(1) / std::sqrt(var + eps);
        xh.row(ri) = (xm.row(ri).array() - mu).matrix() * rstd[r];
    }
    auto y = mmat(std::span<Real>(out), n, d);
    y = (xh.array().rowwise() * cmat(gain.value(), 1, d).array().row(0)).matrix();
    y.rowwise() += cmat(bias.value(), 1, d).row(0);
    auto& g = x.graph();
    const int ix = x.id(), ig = gain.id(), ib = bias.id();
    return g.emit(OpKind::LayerNorm, x.shape(), std::move(out), {ix, ig, ib},
                  [&g, ix, ig, ib, n, d, xhat = std::move(xhat), rstd = std::move(rstd)](
                      auto, std::span<const Real> go, GradTable<Real>& t) {
                      auto gout = cmat(go, n, d);
                      auto xh = cmat(std::span<const Real>(xhat), n, d);
                      if (auto gg = t.at(ig); !gg.empty()) {
                          mmat(gg, 1, d).row(0) += (gout.array() * xh.array()).colwise().sum().matrix();
                      }
                      if (auto gb = t.at(ib); !gb.empty()) {
                          mmat(gb, 1, d).row(0) += gout.colwise().sum();
                      }
                      auto gx = t.at(ix);
                      if (gx.empty()) return;
                      auto gain_row = cmat(g.value(ig), 1, d).array().row(0);
                      auto gxm = mmat(gx, n, d);
                      for (std::size_t r = 0; r < n; ++r) {
                          const auto ri = static_cast<Eigen::Index>(r);
                          auto gh = (gout.row(ri).array() * gain_row).eval();
                          const Real m1 = gh.mean();
                          const Real m2 = (gh * xh.row(ri).array()).mean();
                          gxm.row(ri).array() += rstd[r] * (gh - m1 - xh.row(ri).array() * m2);
                      }
                  });
}

template <typename Real>
Var<Real> mean_pool_rows(Var<Real> x, std::span<const std::size_t> rows) {
    const std::size_t n = x.rows(), d = x.cols();
    if (rows.empty()) throw ArgumentError("mean_pool_rows: empty row subset");
    for (auto r : rows) {
        if (r >= n) {
            throw ArgumentError("mean_pool_rows: row " + std::to_string(r) + " out of range for " +
                                shape_string(x.shape()));
        }
    }
    std::vector<std::size_t> subset(rows.begin(), rows.end());
    const Real inv = Real(1) / static_cast<Real>(subset.size());
    Buffer<Real> out(d, Real(0));
    auto xm = cmat(x.value(), n, d);
    auto y = mmat(std::span<Real>(out), 1, d);
    for (auto r : subset) y.row(0) += xm.row(static_cast<Eigen::Index>(r));
    y *= inv;
    const int ix = x.id();
    return x.graph().emit(OpKind::MeanPoolRows, {d}, std::move(out), {ix},
                          [ix, n, d, inv, subset = std::move(subset)](
                              auto, std::span<const Real> go, GradTable<Real>& t) {
                              auto gx = t.at(ix);
                              if (gx.empty()) return;
                              auto gxm = mmat(gx, n, d);
                              auto gr = cmat(go, 1, d).row(0);
                              for (auto r : subset) gxm.row(static_cast<Eigen::Index>(r)) += gr * inv;
                          });
}

template <typename Real>
Var<Real> mean_pool_blocks(Var<Real> x, std::size_t block, std::size_t offset, std::size_t count) {
    const std::size_t n = x.rows(), d = x.cols();
    if (block == 0 || n % block != 0 || count == 0 || offset + count > block) {
        throw ArgumentError("mean_pool_blocks: invalid block layout for " + shape_string(x.shape()));
    }
    const std::size_t groups = n / block;
    const Real inv = Real(1) / static_cast<Real>(count);
    Buffer<Real> out(groups * d);
    auto xm = cmat(x.value(), n, d);
    auto y = mmat(std::span<Real>(out), groups, d);
    for (std::size_t b = 0; b < groups; ++b) {
        y.row(static_cast<Eigen::Index>(b)) =
            xm.middleRows(static_cast<Eigen::Index>(b * block + offset),
                          static_cast<Eigen::Index>(count))
                .colwise()
                .sum() *
            inv;
    }
    const int ix = x.id();
    return x.graph().emit(
        OpKind::MeanPoolBlocks, {groups, d}, std::move(out), {ix},
        [ix, n, d, block, offset, count, groups, inv](auto, std::span<const Real> go,
                                                      GradTable<Real>& t) {
            auto gx = t.at(ix);
            if (gx.empty()) return;
            auto gxm = mmat(gx, n, d);
            auto gm = cmat(go, groups, d);
            for (std::size_t b = 0; b < groups; ++b) {
                gxm.middleRows(static_cast<Eigen::Index>(b * block + offset),
                               static_cast<Eigen::Index>(count))
                    .rowwise() += gm.row(static_cast<Eigen::Index>(b)) * inv;
            }
        });
}

template <typename Real>
Var<Real> concat_rows(Var<Real> a, Var<Real> b) {
    same_graph(a, b, "concat_rows");
    if (a.cols() != b.cols()) {
        throw DimensionError("concat_rows: column mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
    const std::size_t na = a.rows(), nb = b.rows(), d = a.cols();
    Buffer<Real> out;
    out.reserve((na + nb) * d);
    out.insert(out.end(), a.value().begin(), a.value().end());
    out.insert(out.end(), b.value().begin(), b.value().end());
    const int ia = a.id(), ib = b.id();
    return a.graph().emit(OpKind::ConcatRows, {na + nb, d}, std::move(out), {ia, ib},
                          [ia, ib, na, d](auto, std::span<const Real> go, GradTable<Real>& t) {
                              if (auto ga = t.at(ia); !ga.empty()) accumulate(ga, go.first(na * d));
                              if (auto gb = t.at(ib); !gb.empty()) accumulate(gb, go.subspan(na * d));
                          });
}

template <typename Real>
Var<Real> gather_rows(Var<Real> x, std::span<const std::size_t> index) {
    const std::size_t n = x.rows(), d = x.cols();
    std::vector<std::size_t> idx(index.begin(), index.end());
    Buffer<Real> out(idx.size() * d);
    const auto xv = x.value();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= n) {
            throw ArgumentError("gather_rows: index " + std::to_string(idx[i]) +
                                " out of range for " + shape_string(x.shape()));
        }
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    const int ix = x.id();
    const std::size_t m = idx.size();
    return x.graph().emit(OpKind::GatherRows, {m, d}, std::move(out), {ix},
                          [ix, d, idx = std::move(idx)](auto, std::span<const Real> go,
                                                        GradTable<Real>& t) {
                              auto gx = t.at(ix);
                              if (gx.empty()) return;
                              for (std::size_t i = 0; i < idx.size(); ++i) {
                                  accumulate(gx.subspan(idx[i] * d, d), go.subspan(i * d, d));
                              }
                          });
}

template <typename Real>
Var<Real> transpose(Var<Real> x) {
    if (x.shape().size() != 2) {
        throw DimensionError("transpose: expected a matrix, got " + shape_string(x.shape()));
    }
    const std::size_t n = x.rows(), m = x.cols();
    Buffer<Real> out(n * m);
    mmat(std::span<Real>(out), m, n) = cmat(x.value(), n, m).transpose();
    const int ix = x.id();
    return x.graph().emit(OpKind::Transpose, {m, n}, std::move(out), {ix},
                          [ix, n, m](auto, std::span<const Real> go, GradTable<Real>& t) {
                              if (auto gx = t.at(ix); !gx.empty()) {
                                  mmat(gx, n, m) += cmat(go, m, n).transpose();
                              }
                          });
}

template <typename Real>
Var<Real> reshape(Var<Real> x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                             shape_string(shape));
    }
    Buffer<Real> out(x.value().begin(), x.value().end());
    const int ix = x.id();
    return x.graph().emit(OpKind::Reshape, std::move(shape), std::move(out), {ix},
                          [ix](auto, std::span<const Real> go, GradTable<Real>& t) {
                              if (auto gx = t.at(ix); !gx.empty()) accumulate(gx, go);
                          });
}

template <typename Real>
Var<Real> attention_scores(Var<Real> q, Var<Real> k, std::size_t batch, std::size_t heads,
                           Real scale) {
    same_shape(q, k, "attention_scores");
    const std::size_t width = q.cols();
    if (batch == 0 || heads == 0 || q.rows() % batch != 0 || width % heads != 0) {
        throw DimensionError("attention_scores: " + shape_string(q.shape()) +
                             " is not divisible into batch " + std::to_string(batch) + " x heads " +
                             std::to_string(heads));
    }
    const std::size_t n = q.rows() / batch, dk = width / heads;
    Buffer<Real> out(batch * heads * n * n);
    const Real* qp = q.value().data();
    const Real* kp = k.value().data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * n * width + h * dk;
            mmat(out.data() + (b * heads + h) * n * n, n, n, n).noalias() =
                scale * (cmat(qp + off, n, dk, width) * cmat(kp + off, n, dk, width).transpose());
        }
    }
    auto& g = q.graph();
    const int iq = q.id(), ik = k.id();
    return g.emit(
        OpKind::AttentionScores, {batch * heads * n, n}, std::move(out), {iq, ik},
        [&g, iq, ik, batch, heads, n, dk, width, scale](auto, std::span<const Real> go,
                                                        GradTable<Real>& t) {
            auto gq = t.at(iq);
            auto gk = t.at(ik);
            const Real* qp = g.value(iq).data();
            const Real* kp = g.value(ik).data();
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t off = b * n * width + h * dk;
                    auto gs = cmat(go.data() + (b * heads + h) * n * n, n, n, n);
                    if (!gq.empty()) {
                        mmat(gq.data() + off, n, dk, width).noalias() +=
                            scale * (gs * cmat(kp + off, n, dk, width));
                    }
                    if (!gk.empty()) {
                        mmat(gk.data() + off, n, dk, width).noalias() +=
                            scale * (gs.transpose() * cmat(qp + off, n, dk, width));
                    }
                }
            }
        });
}

template <typename Real>
Var<Real> attention_mix(Var<Real> a, Var<Real> v, std::size_t batch, std::size_t heads) {
    same_graph(a, v, "attention_mix");
    const std::size_t width = v.cols();
    if (batch == 0 || heads == 0 || v.rows() % batch != 0 || width % heads != 0) {
        throw DimensionError("attention_mix: values " + shape_string(v.shape()) +
                             " are not divisible into batch x heads");
    }
    const std::size_t n = v.rows() / batch, dk = width / heads;
    if (a.rows() != batch * heads * n || a.cols() != n) {
        throw DimensionError("attention_mix: attention " + shape_string(a.shape()) +
                             " does not match values " + shape_string(v.shape()));
    }
    Buffer<Real> out(batch * n * width);
    const Real* ap = a.value().data();
    const Real* vp = v.value().data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * n * width + h * dk;
            mmat(out.data() + off, n, dk, width).noalias() =
                cmat(ap + (b * heads + h) * n * n, n, n, n) * cmat(vp + off, n, dk, width);
        }
    }
    auto& g = a.graph();
    const int ia = a.id(), iv = v.id();
    return g.emit(
        OpKind::AttentionMix, v.shape(), std::move(out), {ia, iv},
        [&g, ia, iv, batch, heads, n, dk, width](auto, std::span<const Real> go,
                                                 GradTable<Real>& t) {
            auto ga = t.at(ia);
            auto gv = t.at(iv);
            const Real* ap = g.value(ia).data();
            const Real* vp = g.value(iv).data();
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t off = b * n * width + h * dk;
                    const std::size_t aoff = (b * heads + h) * n * n;
                    auto gout = cmat(go.data() + off, n, dk, width);
                    if (!ga.empty()) {
                        mmat(ga.data() + aoff, n, n, n).noalias() +=
                            gout * cmat(vp + off, n, dk, width).transpose();
                    }
                    if (!gv.empty()) {
                        mmat(gv.data() + off, n, dk, width).noalias() +=
                            cmat(ap + aoff, n, n, n).transpose() * gout;
                    }
                }
            }
        });
}

template <typename Real>
Var<Real> restrict_renormalize(Var<Real> a, std::size_t tokens, std::size_t kept) {
    if (tokens == 0 || kept == 0 || kept > tokens || a.cols() != tokens ||
        a.rows() % tokens != 0) {
        throw DimensionError("restrict_renormalize: " + shape_string(a.shape()) +
                             " is not a stack of " + std::to_string(tokens) + "x" +
                             std::to_string(tokens) + " maps with " + std::to_string(kept) +
                             " kept tokens");
    }
    const std::size_t groups = a.rows() / tokens;
    Buffer<Real> out(groups * kept * kept);
    Buffer<Real> mass(groups * kept);
    const auto av = a.value();
    for (std::size_t gi = 0; gi < groups; ++gi) {
        for (std::size_t i = 0; i < kept; ++i) {
            const Real* row = av.data() + (gi * tokens + i) * tokens;
            Real s = 0;
            for (std::size_t j = 0; j < kept; ++j) s += row[j];
            if (!(s >= Real(1e-12))) {
                throw NumericError("restrict_renormalize: degenerate row " + std::to_string(i) +
                                   " in map " + std::to_string(gi) + " (restricted mass " +
                                   std::to_string(static_cast<double>(s)) + ")");
            }
            mass[gi * kept + i] = s;
            Real* o = out.data() + (gi * kept + i) * kept;
            for (std::size_t j = 0; j < kept; ++j) o[j] = row[j] / s;
        }
    }
    const int ia = a.id();
    return a.graph().emit(
        OpKind::RestrictRenormalize, {groups * kept, kept}, std::move(out), {ia},
        [ia, groups, tokens, kept, mass = std::move(mass)](
            std::span<const Real> y, std::span<const Real> go, GradTable<Real>& t) {
            auto ga = t.at(ia);
            if (ga.empty()) return;
            for (std::size_t r = 0; r < groups * kept; ++r) {
                const std::size_t gi = r / kept, i = r % kept;
                const Real* yr = y.data() + r * kept;
                const Real* gr = go.data() + r * kept;
                Real dot = 0;
                for (std::size_t j = 0; j < kept; ++j) dot += yr[j] * gr[j];
                Real* dst = ga.data() + (gi * tokens + i) * tokens;
                const Real inv = Real(1) / mass[r];
                for (std::size_t j = 0; j < kept; ++j) dst[j] += (gr[j] - dot) * inv;
            }
        });
}

template <typename Real>
Var<Real> kl_rows(std::span<const Real> target, Var<Real> student) {
    if (target.size() != student.size()) {
        throw DimensionError("kl_rows: target holds " + std::to_string(target.size()) +
                             " values, student " + shape_string(student.shape()));
    }
    const std::size_t n = student.rows(), m = student.cols();
    const auto s = student.value();
    double total = 0;
    for (std::size_t i = 0; i < n * m; ++i) {
        const double tv = static_cast<double>(target[i]);
        if (tv <= 0) continue;
        const double sv = static_cast<double>(s[i]);
        if (!(sv > 0)) {
            throw NumericError("kl_rows: student probability " + std::to_string(sv) +
                               " where target is positive (row " + std::to_string(i / m) + ")");
        }
        total += tv * (std::log(tv) - std::log(sv));
    }
    const Real value = static_cast<Real>(total / static_cast<double>(n));
    Buffer<Real> tcopy(target.begin(), target.end());
    auto& g = student.graph();
    const int is = student.id();
    return g.emit(OpKind::KlRows, {1}, {value}, {is},
                  [&g, is, n, tcopy = std::move(tcopy)](auto, std::span<const Real> go,
                                                        GradTable<Real>& t) {
                      auto gs = t.at(is);
                      if (gs.empty()) return;
                      const auto sv = g.value(is);
                      const Real c = go[0] / static_cast<Real>(n);
                      for (std::size_t i = 0; i < tcopy.size(); ++i) {
                          if (tcopy[i] > Real(0)) gs[i] -= c * tcopy[i] / sv[i];
                      }
                  });
}

template <typename Real>
Var<Real> l2_normalize_rows(Var<Real> x) {
    const std::size_t n = x.rows(), d = x.cols();
    Buffer<Real> out(n * d), norms(n);
    auto xm = cmat(x.value(), n, d);
    auto y = mmat(std::span<Real>(out), n, d);
    for (std::size_t r = 0; r < n; ++r) {
        const auto ri = static_cast<Eigen::Index>(r);
        const Real nr = xm.row(ri).norm();
        if (!(nr > Real(0)) || !std::isfinite(nr)) {
            throw NumericError("l2_normalize_rows: row " + std::to_string(r) +
                               " has zero or non-finite norm");
        }
        norms[r] = nr;
        y.row(ri) = xm.row(ri) / nr;
    }
    const int ix = x.id();
    return x.graph().emit(
        OpKind::L2NormalizeRows, x.shape(), std::move(out), {ix},
        [ix, n, d, norms = std::move(norms)](std::span<const Real> yv, std::span<const Real> go,
                                             GradTable<Real>& t) {
            auto gx = t.at(ix);
            if (gx.empty()) return;
            auto ym = cmat(yv, n, d);
            auto gm = cmat(go, n, d);
            auto gxm = mmat(gx, n, d);
            for (std::size_t r = 0; r < n; ++r) {
                const auto ri = static_cast<Eigen::Index>(r);
                const Real dot = ym.row(ri).dot(gm.row(ri));
                gxm.row(ri) += (gm.row(ri) - ym.row(ri) * dot) / norms[r];
            }
        });
}

template <typename Real>
Var<Real> div_by_scalar(Var<Real> x, Var<Real> s) {
    same_graph(x, s, "div_by_scalar");
    if (s.size() != 1) {
        throw DimensionError("div_by_scalar: divisor must be a single value, got " +
                             shape_string(s.shape()));
    }
    const Real sv = s.value()[0];
    if (sv == Real(0) || !std::isfinite(sv)) throw NumericError("div_by_scalar: divisor is zero");
    Buffer<Real> out(x.size());
    marr(std::span<Real>(out)) = carr(x.value()) / sv;
    auto& g = x.graph();
    const int ix = x.id(), is = s.id();
    return g.emit(OpKind::DivByScalar, x.shape(), std::move(out), {ix, is},
                  [&g, ix, is](auto, std::span<const Real> go, GradTable<Real>& t) {
                      const Real sv = g.value(is)[0];
                      if (auto gx = t.at(ix); !gx.empty()) marr(gx) += carr(go) / sv;
                      if (auto gs = t.at(is); !gs.empty()) {
                          gs[0] -= (carr(go) * carr(g.value(ix))).sum() / (sv * sv);
                      }
                  });
}

template <typename Real>
Var<Real> cross_entropy_rows(Var<Real> logits, std::span<const std::size_t> targets,
                             std::span<const std::uint8_t> allowed) {
    const std::size_t n = logits.rows(), m = logits.cols();
    if (targets.size() != n || allowed.size() != n * m) {
        throw DimensionError("cross_entropy_rows: logits " + shape_string(logits.shape()) +
                             " vs " + std::to_string(targets.size()) + " targets and " +
                             std::to_string(allowed.size()) + " mask entries");
    }
    require_finite(logits.value(), "cross_entropy_rows");
    const auto lv = logits.value();
    Buffer<Real> probs(n * m, Real(0));
    double total = 0;
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t tr = targets[r];
        if (tr >= m || !allowed[r * m + tr]) {
            throw ArgumentError("cross_entropy_rows: target of row " + std::to_string(r) +
                                " is out of range or masked");
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < m; ++j) {
            if (allowed[r * m + j]) mx = std::max(mx, static_cast<double>(lv[r * m + j]));
        }
        double z = 0;
        for (std::size_t j = 0; j < m; ++j) {
            if (allowed[r * m + j]) z += std::exp(static_cast<double>(lv[r * m + j]) - mx);
        }
        for (std::size_t j = 0; j < m; ++j) {
            if (allowed[r * m + j]) {
                probs[r * m + j] =
                    static_cast<Real>(std::exp(static_cast<double>(lv[r * m + j]) - mx) / z);
            }
        }
        total += mx + std::log(z) - static_cast<double>(lv[r * m + tr]);
    }
    const Real value = static_cast<Real>(total / static_cast<double>(n));
    std::vector<std::size_t> tcopy(targets.begin(), targets.end());
    const int il = logits.id();
    return logits.graph().emit(
        OpKind::CrossEntropyRows, {1}, {value}, {il},
        [il, n, m, probs = std::move(probs), tcopy = std::move(tcopy)](
            auto, std::span<const Real> go, GradTable<Real>& t) {
            auto gl = t.at(il);
            if (gl.empty()) return;
            const Real c = go[0] / static_cast<Real>(n);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t j = 0; j < m; ++j) gl[r * m + j] += c * probs[r * m + j];
                gl[r * m + tcopy[r]] -= c;
            }
        });
}

template <typename Real>
Var<Real> mse(Var<Real> a, std::span<const Real> target) {
    if (target.size() != a.size()) {
        throw DimensionError("mse: prediction " + shape_string(a.shape()) + " vs " +
                             std::to_string(target.size()) + " target values");
    }
    Buffer<Real> diff(a.size());
    marr(std::span<Real>(diff)) = carr(a.value()) - carr(target);
    double total = 0;
    for (Real d : diff) total += static_cast<double>(d) * static_cast<double>(d);
    const Real value = static_cast<Real>(total / static_cast<double>(diff.size()));
    const int ia = a.id();
    const Real c2 = Real(2) / static_cast<Real>(diff.size());
    return a.graph().emit(OpKind::Mse, {1}, {value}, {ia},
                          [ia, c2, diff = std::move(diff)](auto, std::span<const Real> go,
                                                           GradTable<Real>& t) {
                              if (auto ga = t.at(ia); !ga.empty()) {
                                  marr(ga) += carr(std::span<const Real>(diff)) * (c2 * go[0]);
                              }
                          });
}

#define MUSE_AD_INSTANTIATE(Real)                                                              \
    template Var<Real> matmul(Var<Real>, Var<Real>);                                           \
    template Var<Real> linear_map(Var<Real>, Var<Real>, std::optional<Var<Real>>);             \
    template Var<Real> add(Var<Real>, Var<Real>);                                              \
    template Var<Real> sub(Var<Real>, Var<Real>);                                              \
    template Var<Real> mul(Var<Real>, Var<Real>);                                              \
    template Var<Real> scale(Var<Real>, Real);                                                 \
    template Var<Real> add_row_broadcast(Var<Real>, Var<Real>);                                \
    template Var<Real> exp(Var<Real>);                                                         \
    template Var<Real> log(Var<Real>);                                                         \
    template Var<Real> gelu(Var<Real>);                                                        \
    template Var<Real> square(Var<Real>);                                                      \
    template Var<Real> sum(Var<Real>);                                                         \
    template Var<Real> mean(Var<Real>);                                                        \
    template Var<Real> softmax_rows(Var<Real>);                                                \
    template Var<Real> stop_gradient(Var<Real>);                                               \
    template Var<Real> layer_norm(Var<Real>, Var<Real>, Var<Real>, Real);                      \
    template Var<Real> mean_pool_rows(Var<Real>, std::span<const std::size_t>);                \
    template Var<Real> mean_pool_blocks(Var<Real>, std::size_t, std::size_t, std::size_t);     \
    template Var<Real> concat_rows(Var<Real>, Var<Real>);                                      \
    template Var<Real> gather_rows(Var<Real>, std::span<const std::size_t>);                   \
    template Var<Real> transpose(Var<Real>);                                                   \
    template Var<Real> reshape(Var<Real>, Shape);                                              \
    template Var<Real> attention_scores(Var<Real>, Var<Real>, std::size_t, std::size_t, Real); \
    template Var<Real> attention_mix(Var<Real>, Var<Real>, std::size_t, std::size_t);          \
    template Var<Real> restrict_renormalize(Var<Real>, std::size_t, std::size_t);              \
    template Var<Real> kl_rows(std::span<const Real>, Var<Real>);                              \
    template Var<Real> l2_normalize_rows(Var<Real>);                                           \
    template Var<Real> div_by_scalar(Var<Real>, Var<Real>);                                    \
    template Var<Real> cross_entropy_rows(Var<Real>, std::span<const std::size_t>,             \
                                          std::span<const std::uint8_t>);                      \
    template Var<Real> mse(Var<Real>, std::span<const Real>);

MUSE_AD_INSTANTIATE(float)
MUSE_AD_INSTANTIATE(double)

#undef MUSE_AD_INSTANTIATE

}  // namespace muse::ad
