#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tokenfusion/tensor.hpp"

namespace tokenfusion {

namespace detail {

inline std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int64_t d = static_cast<int64_t>(s.size()) - 2; d >= 0; --d)
    st[d] = st[d + 1] * s[d + 1];
  return st;
}

inline Shape broadcast_result(const Shape& a, const Shape& b, const char* op) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (size_t i = 0; i < r; ++i) {
    int64_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    require(ea == eb || ea == 1 || eb == 1,
            std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                " do not broadcast");
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Strides of `in` viewed through `out`'s index space (right-aligned, zero on
// broadcast axes).
inline std::vector<int64_t> broadcast_strides(const Shape& out, const Shape& in) {
  std::vector<int64_t> st(out.size(), 0);
  auto in_st = strides_of(in);
  size_t off = out.size() - in.size();
  for (size_t i = 0; i < in.size(); ++i)
    if (in[i] != 1) st[off + i] = in_st[i];
  return st;
}

// Walks `shape`'s index space once; per element calls f(flat, mapped) where
// `mapped` advances by `strides` along each axis.
template <class F>
void for_each_mapped(const Shape& shape, const std::vector<int64_t>& strides, F&& f) {
  const int64_t n = numel_of(shape);
  const int64_t r = static_cast<int64_t>(shape.size());
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t mapped = 0;
  for (int64_t flat = 0; flat < n; ++flat) {
    f(flat, mapped);
    for (int64_t d = r - 1; d >= 0; --d) {
      if (++idx[d] < shape[d]) {
        mapped += strides[d];
        break;
      }
      idx[d] = 0;
      mapped -= strides[d] * (shape[d] - 1);
    }
  }
}

template <class F>
void zip_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const int64_t n = numel_of(out);
  const int64_t r = static_cast<int64_t>(out.size());
  auto sa = broadcast_strides(out, a);
  auto sb = broadcast_strides(out, b);
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t ia = 0, ib = 0;
  for (int64_t io = 0; io < n; ++io) {
    f(io, ia, ib);
    for (int64_t d = r - 1; d >= 0; --d) {
      if (++idx[d] < out[d]) {
        ia += sa[d];
        ib += sb[d];
        break;
      }
      idx[d] = 0;
      ia -= sa[d] * (out[d] - 1);
      ib -= sb[d] * (out[d] - 1);
    }
  }
}

// Sums `g` (laid out as `from`) down to shape `to` under broadcasting rules.
template <typename T>
std::vector<T> reduce_to(std::span<const T> g, const Shape& from, const Shape& to) {
  std::vector<T> out(static_cast<size_t>(numel_of(to)), T(0));
  for_each_mapped(from, broadcast_strides(from, to),
                  [&](int64_t flat, int64_t mapped) { out[mapped] += g[flat]; });
  return out;
}

template <typename T>
void add_reduced(Tensor<T>& t, std::span<const T> go, const Shape& out_shape, T sign) {
  if (t.shape() == out_shape) {
    t.ensure_grad();
    auto dst = t.grad();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += sign * go[i];
    return;
  }
  auto reduced = reduce_to<T>(go, out_shape, t.shape());
  t.ensure_grad();
  auto dst = t.grad();
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += sign * reduced[i];
}

// c[m,n] += a[m,k] * b[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    T* cr = c + i * n;
    const T* ar = a + i * k;
    for (int64_t t = 0; t < k; ++t) {
      T av = ar[t];
      const T* br = b + t * n;
      for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// c[m,k] += a[m,n] * b[k,n]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const T* ar = a + i * n;
    T* cr = c + i * k;
    for (int64_t j = 0; j < k; ++j) {
      const T* br = b + j * n;
      T acc = T(0);
      for (int64_t t = 0; t < n; ++t) acc += ar[t] * br[t];
      cr[j] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t t = 0; t < m; ++t) {
    const T* ar = a + t * k;
    const T* br = b + t * n;
    for (int64_t i = 0; i < k; ++i) {
      T av = ar[i];
      T* cr = c + i * n;
      for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

}  // namespace detail

// ===================== elementwise =====================

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Shape os = detail::broadcast_result(a.shape(), b.shape(), "add");
  Tensor<T> out(os);
  auto od = out.data();
  auto ad = a.data();
  auto bd = b.data();
  if (a.shape() == os && b.shape() == os) {
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = ad[i] + bd[i];
  } else {
    detail::zip_broadcast(os, a.shape(), b.shape(),
                          [&](int64_t io, int64_t ia, int64_t ib) { od[io] = ad[ia] + bd[ib]; });
  }
  Tensor<T> ac = a, bc = b, oc = out;
  detail::finish_op<T>("add", {a, b}, out, [ac, bc, oc]() mutable {
    auto go = oc.grad();
    if (ac.requires_grad()) detail::add_reduced(ac, std::span<const T>(go.data(), go.size()), oc.shape(), T(1));
    if (bc.requires_grad()) detail::add_reduced(bc, std::span<const T>(go.data(), go.size()), oc.shape(), T(1));
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  Shape os = detail::broadcast_result(a.shape(), b.shape(), "sub");
  Tensor<T> out(os);
  auto od = out.data();
  auto ad = a.data();
  auto bd = b.data();
  if (a.shape() == os && b.shape() == os) {
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = ad[i] - bd[i];
  } else {
    detail::zip_broadcast(os, a.shape(), b.shape(),
                          [&](int64_t io, int64_t ia, int64_t ib) { od[io] = ad[ia] - bd[ib]; });
  }
  Tensor<T> ac = a, bc = b, oc = out;
  detail::finish_op<T>("sub", {a, b}, out, [ac, bc, oc]() mutable {
    auto go = oc.grad();
    if (ac.requires_grad()) detail::add_reduced(ac, std::span<const T>(go.data(), go.size()), oc.shape(), T(1));
    if (bc.requires_grad()) detail::add_reduced(bc, std::span<const T>(go.data(), go.size()), oc.shape(), T(-1));
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Shape os = detail::broadcast_result(a.shape(), b.shape(), "mul");
  Tensor<T> out(os);
  auto od = out.data();
  auto ad = a.data();
  auto bd = b.data();
  if (a.shape() == os && b.shape() == os) {
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = ad[i] * bd[i];
  } else {
    detail::zip_broadcast(os, a.shape(), b.shape(),
                          [&](int64_t io, int64_t ia, int64_t ib) { od[io] = ad[ia] * bd[ib]; });
  }
  Tensor<T> ac = a, bc = b, oc = out;
  detail::finish_op<T>("mul", {a, b}, out, [ac, bc, oc]() mutable {
    auto go = oc.grad();
    auto ad2 = ac.data();
    auto bd2 = bc.data();
    if (ac.requires_grad()) {
      ac.ensure_grad();
      auto ga = ac.grad();
      detail::zip_broadcast(oc.shape(), ac.shape(), bc.shape(),
                            [&](int64_t io, int64_t ia, int64_t ib) { ga[ia] += go[io] * bd2[ib]; });
    }
    if (bc.requires_grad()) {
      bc.ensure_grad();
      auto gb = bc.grad();
      detail::zip_broadcast(oc.shape(), ac.shape(), bc.shape(),
                            [&](int64_t io, int64_t ia, int64_t ib) { gb[ib] += go[io] * ad2[ia]; });
    }
  });
  return out;
}

/// Multiplication by a plain scalar constant (the constant is not a graph node).
template <typename T>
Tensor<T> scale(const Tensor<T>& x, double c) {
  Tensor<T> out(x.shape());
  auto od = out.data();
  auto xd = x.data();
  const T cv = static_cast<T>(c);
  for (int64_t i = 0; i < out.numel(); ++i) od[i] = xd[i] * cv;
  Tensor<T> xc = x, oc = out;
  detail::finish_op<T>("scale", {x}, out, [xc, oc, cv]() mutable {
    if (!xc.requires_grad()) return;
    auto go = oc.grad();
    xc.ensure_grad();
    auto gx = xc.grad();
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += cv * go[i];
  });
  return out;
}

// ===================== matmul =====================

/// Matrix product. Rank-2 x rank-2, or batched with equal leading extents;
/// a rank-2 right operand broadcasts across the left operand's batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sa.size() >= 2 && sb.size() >= 2,
          "matmul: operands need rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
  const int64_t m = sa[sa.size() - 2];
  const int64_t k = sa[sa.size() - 1];
  const int64_t n = sb[sb.size() - 1];
  require(sb[sb.size() - 2] == k,
          "matmul: inner extents differ, " + shape_str(sa) + " x " + shape_str(sb));
  const bool b_shared = sb.size() == 2 && sa.size() > 2;
  if (!b_shared) {
    require(sa.size() == sb.size(),
            "matmul: rank mismatch, " + shape_str(sa) + " x " + shape_str(sb));
    for (size_t i = 0; i + 2 < sa.size(); ++i)
      require(sa[i] == sb[i],
              "matmul: batch extents differ, " + shape_str(sa) + " x " + shape_str(sb));
  }
  int64_t batch = 1;
  for (size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
  Shape os(sa.begin(), sa.end() - 2);
  os.push_back(m);
  os.push_back(n);
  Tensor<T> out(os);
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  T* od = out.data().data();
  for (int64_t bi = 0; bi < batch; ++bi)
    detail::gemm_nn(ad + bi * m * k, bd + (b_shared ? 0 : bi * k * n), od + bi * m * n, m, k, n);
  Tensor<T> ac = a, bc = b, oc = out;
  detail::finish_op<T>("matmul", {a, b}, out, [ac, bc, oc, m, k, n, batch, b_shared]() mutable {
    const T* go = oc.grad().data();
    const T* ad2 = ac.data().data();
    const T* bd2 = bc.data().data();
    if (ac.requires_grad()) {
      ac.ensure_grad();
      T* ga = ac.grad().data();
      for (int64_t bi = 0; bi < batch; ++bi)
        detail::gemm_nt(go + bi * m * n, bd2 + (b_shared ? 0 : bi * k * n), ga + bi * m * k, m, n, k);
    }
    if (bc.requires_grad()) {
      bc.ensure_grad();
      T* gb = bc.grad().data();
      for (int64_t bi = 0; bi < batch; ++bi)
        detail::gemm_tn(ad2 + bi * m * k, go + bi * m * n, gb + (b_shared ? 0 : bi * k * n), m, k, n);
    }
  });
  return out;
}

// ===================== shape ops =====================

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  require(numel_of(new_shape) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  Tensor<T> out(std::move(new_shape), std::vector<T>(x.data().begin(), x.data().end()));
  Tensor<T> xc = x, oc = out;
  detail::finish_op<T>("reshape", {x}, out, [xc, oc]() mutable {
    if (!xc.requires_grad()) return;
    auto go = oc.grad();
    accumulate_grad(xc, std::span<const T>(go.data(), go.size()));
  });
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, const std::vector<int64_t>& perm) {
  const int64_t r = x.rank();
  require(static_cast<int64_t>(perm.size()) == r,
          "transpose: permutation size does not match rank of " + shape_str(x.shape()));
  std::vector<bool> seen(static_cast<size_t>(r), false);
  for (int64_t p : perm) {
    require(p >= 0 && p < r && !seen[static_cast<size_t>(p)],
            "transpose: invalid permutation for shape " + shape_str(x.shape()));
    seen[static_cast<size_t>(p)] = true;
  }
  Shape os(static_cast<size_t>(r));
  auto xs = detail::strides_of(x.shape());
  std::vector<int64_t> mapped(static_cast<size_t>(r));
  for (int64_t d = 0; d < r; ++d) {
    os[d] = x.shape()[perm[d]];
    mapped[d] = xs[perm[d]];
  }
  Tensor<T> out(os);
  auto od = out.data();
  auto xd = x.data();
  detail::for_each_mapped(os, mapped, [&](int64_t flat, int64_t src) { od[flat] = xd[src]; });
  Tensor<T> xc = x, oc = out;
  detail::finish_op<T>("transpose", {x}, out, [xc, oc, os, mapped]() mutable {
    if (!xc.requires_grad()) return;
    auto go = oc.grad();
    xc.ensure_grad();
    auto gx = xc.grad();
    detail::for_each_mapped(os, mapped, [&](int64_t flat, int64_t src) { gx[src] += go[flat]; });
  });
  return out;
}

/// Contiguous slice [start, start+length) along one axis.
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int64_t axis, int64_t start, int64_t length) {
  require(axis >= 0 && axis < x.rank(),
          "narrow: axis out of range for shape " + shape_str(x.shape()));
  const int64_t extent = x.extent(axis);
  require(start >= 0 && length >= 1 && start + length <= extent,
          "narrow: range [" + std::to_string(start) + "," + std::to_string(start + length) +
              ") out of bounds for shape " + shape_str(x.shape()));
  Shape os = x.shape();
  os[static_cast<size_t>(axis)] = length;
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= x.extent(d);
  for (int64_t d = axis + 1; d < x.rank(); ++d) inner *= x.extent(d);
  Tensor<T> out(os);
  auto od = out.data();
  auto xd = x.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < length; ++j)
      for (int64_t i = 0; i < inner; ++i)
        od[(o * length + j) * inner + i] = xd[(o * extent + start + j) * inner + i];
  Tensor<T> xc = x, oc = out;
  detail::finish_op<T>("narrow", {x}, out, [xc, oc, outer, inner, extent, start, length]() mutable {
    if (!xc.requires_grad()) return;
    auto go = oc.grad();
    xc.ensure_grad();
    auto gx = xc.grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < length; ++j)
        for (int64_t i = 0; i < inner; ++i)
          gx[(o * extent + start + j) * inner + i] += go[(o * length + j) * inner + i];
  });
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int64_t axis) {
  require(!parts.empty(), "concat: needs at least one input");
  const int64_t r = parts[0].rank();
  require(axis >= 0 && axis < r, "concat: axis out of range for shape " + shape_str(parts[0].shape()));
  int64_t total = 0;
  for (const auto& p : parts) {
    require(p.rank() == r, "concat: rank mismatch between " + shape_str(parts[0].shape()) +
                               " and " + shape_str(p.shape()));
    for (int64_t d = 0; d < r; ++d)
      require(d == axis || p.extent(d) == parts[0].extent(d),
              "concat: mismatched non-axis extents, " + shape_str(parts[0].shape()) + " vs " +
                  shape_str(p.shape()));
    total += p.extent(axis);
  }
  Shape os = parts[0].shape();
  os[static_cast<size_t>(axis)] = total;
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= os[d];
  for (int64_t d = axis + 1; d < r; ++d) inner *= os[d];
  Tensor<T> out(os);
  auto od = out.data();
  int64_t offset = 0;
  for (const auto& p : parts) {
    const int64_t e = p.extent(axis);
    auto pd = p.data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < e; ++j)
        for (int64_t i = 0; i < inner; ++i)
          od[(o * total + offset + j) * inner + i] = pd[(o * e + j) * inner + i];
    offset += e;
  }
  std::vector<Tensor<T>> kept = parts;
  Tensor<T> oc = out;
  detail::finish_op<T>("concat", parts, out, [kept, oc, outer, inner, total, axis]() mutable {
    auto go = oc.grad();
    int64_t off = 0;
    for (auto& p : kept) {
      const int64_t e = p.extent(axis);
      if (p.requires_grad()) {
        p.ensure_grad();
        auto gp = p.grad();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t j = 0; j < e; ++j)
            for (int64_t i = 0; i < inner; ++i)
              gp[(o * e + j) * inner + i] += go[(o * total + off + j) * inner + i];
      }
      off += e;
    }
  });
  return out;
}

/// Braced-list convenience: concat({a, b}, axis).
template <typename T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, int64_t axis) {
  return concat(std::vector<Tensor<T>>(parts), axis);
}

// ===================== reductions =====================

/// Mean over one axis; the axis is removed from the shape (a rank-1 input
/// reduces to a scalar).
template <typename T>
Tensor<T> mean_pool(const Tensor<T>& x, int64_t axis) {
  require(axis >= 0 && axis < x.rank(),
          "mean_pool: axis out of range for shape " + shape_str(x.shape()));
  const int64_t extent = x.extent(axis);
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= x.extent(d);
  for (int64_t d = axis + 1; d < x.rank(); ++d) inner *= x.extent(d);
  Shape os;
  for (int64_t d = 0; d < x.rank(); ++d)
    if (d != axis) os.push_back(x.extent(d));
  Tensor<T> out(os);
  auto od = out.data();
  auto xd = x.data();
  const T inv = T(1) / static_cast<T>(extent);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      T acc = T(0);
      for (int64_t j = 0; j < extent; ++j) acc += xd[(o * extent + j) * inner + i];
      od[o * inner + i] = acc * inv;
    }
  Tensor<T> xc = x, oc = out;
  detail::finish_op<T>("mean_pool", {x}, out, [xc, oc, outer, inner, extent, inv]() mutable {
    if (!xc.requires_grad()) return;
    auto go = oc.grad();
    xc.ensure_grad();
    auto gx = xc.grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        const T g = go[o * inner + i] * inv;
        for (int64_t j = 0; j < extent; ++j) gx[(o * extent + j) * inner + i] += g;
      }
  });
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  Tensor<T> xc = x, oc = out;
  detail::finish_op<T>("sum_all", {x}, out, [xc, oc]() mutable {
    if (!xc.requires_grad()) return;
    const T g = oc.grad()[0];
    xc.ensure_grad();
    auto gx = xc.grad();
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
  return out;
}

}  // namespace tokenfusion
