#include "segkit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <thread>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace segkit {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace {

// Activation and scratch buffers run to several MB; left at its default
// mmap threshold glibc would hand every one back to the kernel on free and
// re-zero fresh pages on the next allocation, which dominates the step time.
// Keeping large blocks on the heap freelist removes that churn.
struct MallocTuning {
  MallocTuning() {
#ifdef __GLIBC__
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  }
};
const MallocTuning g_malloc_tuning;

std::atomic<int> g_num_threads{1};

void check_shape(const Shape& s) {
  if (s.empty()) throw std::invalid_argument("tensor shape must have at least one extent");
  for (int e : s) {
    if (e <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(s));
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

/// Static-chunk parallel loop over [0, n). Each index owns its outputs, so
/// results are bitwise identical for any thread count.
void parallel_for(int n, const std::function<void(int)>& fn) {
  int nt = std::min(g_num_threads.load(), n);
  if (nt <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(static_cast<size_t>(nt - 1));
  auto run_chunk = [&](int t) {
    int lo = static_cast<int>(static_cast<int64_t>(n) * t / nt);
    int hi = static_cast<int>(static_cast<int64_t>(n) * (t + 1) / nt);
    for (int i = lo; i < hi; ++i) fn(i);
  };
  for (int t = 1; t < nt; ++t) workers.emplace_back(run_chunk, t);
  run_chunk(0);
  for (auto& w : workers) w.join();
}

}  // namespace

void set_num_threads(int n) { g_num_threads.store(std::max(1, n)); }
int num_threads() { return g_num_threads.load(); }

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape);
  if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
    throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  }
  node_ = std::make_shared<TensorNode>();
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape(shape);
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)), 0.0);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape(shape);
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)), value);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
}

std::vector<double>& Tensor::grad() {
  node_->ensure_grad();
  return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty()) {
    throw std::logic_error("grad not populated; run backward first");
  }
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item() requires a single-element tensor, got " +
                                shape_str(shape()));
  }
  return node_->values[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  return const_cast<Tensor*>(this)->at(idx);
}

double& Tensor::at(std::initializer_list<int> idx) {
  const Shape& s = node_->shape;
  if (idx.size() != s.size()) throw std::invalid_argument("index rank mismatch");
  size_t off = 0;
  size_t d = 0;
  for (int i : idx) {
    if (i < 0 || i >= s[d]) throw std::out_of_range("tensor index out of range");
    off = off * static_cast<size_t>(s[d]) + static_cast<size_t>(i);
    ++d;
  }
  return node_->values[off];
}

// ---------------------------------------------------------------------------
// Tape

void Tape::clear() { entries_.clear(); }

void Tape::record(const Tensor& output, std::function<void()> adjoint) {
  output.node()->interior = true;
  entries_.push_back(Entry{output.node(), std::move(adjoint)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward requires a scalar tensor, got " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("<null>")));
  }
  // Interior grads restart from zero each pass; leaves keep accumulating.
  for (auto& e : entries_) {
    e.out->grad.assign(e.out->values.size(), 0.0);
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->adjoint();
  }
}

// ---------------------------------------------------------------------------
// Matmul kernels (row-major, accumulate into C)

namespace {

// C (m×n) += A (m×k) · B (k×n). Blocked over n so the active B panel stays
// cache-resident across the m rows.
void matmul_nn(const double* A, const double* B, double* C, int m, int k, int n) {
  constexpr int kBlockN = 512;
  for (int j0 = 0; j0 < n; j0 += kBlockN) {
    int jb = std::min(kBlockN, n - j0);
    for (int i = 0; i < m; ++i) {
      const double* a = A + static_cast<size_t>(i) * k;
      double* c = C + static_cast<size_t>(i) * n + j0;
      for (int p = 0; p < k; ++p) {
        double av = a[p];
        if (av == 0.0) continue;
        const double* b = B + static_cast<size_t>(p) * n + j0;
        for (int j = 0; j < jb; ++j) c[j] += av * b[j];
      }
    }
  }
}

// Eight independent accumulators break the latency chain of a strict-FP dot
// product; the summation order is fixed, so results stay deterministic.
double dot_product(const double* a, const double* b, int k) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int p = 0;
  for (; p + 8 <= k; p += 8) {
    for (int u = 0; u < 8; ++u) acc[u] += a[p + u] * b[p + u];
  }
  double total = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; p < k; ++p) total += a[p] * b[p];
  return total;
}

// C (m×n) += A (m×k) · Bᵀ, B stored (n×k). Meant for small m and a large B:
// the outer loop streams B exactly once while all of A stays cached.
void matmul_nt(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int j = 0; j < n; ++j) {
    const double* b = B + static_cast<size_t>(j) * k;
    for (int i = 0; i < m; ++i) {
      C[static_cast<size_t>(i) * n + j] += dot_product(A + static_cast<size_t>(i) * k, b, k);
    }
  }
}

// C (m×n) = Aᵀ · B, A stored (k×m), B stored (k×n). Overwrites C (no
// zero-init needed). Meant for small k: each C row stays hot across the k
// rank-1 contributions and is written once.
void matmul_tn_overwrite(const double* A, const double* B, double* C, int k, int m, int n) {
  for (int i = 0; i < m; ++i) {
    double* c = C + static_cast<size_t>(i) * n;
    {
      double av = A[i];
      const double* b = B;
      for (int j = 0; j < n; ++j) c[j] = av * b[j];
    }
    for (int p = 1; p < k; ++p) {
      double av = A[static_cast<size_t>(p) * m + i];
      if (av == 0.0) continue;
      const double* b = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

struct ConvDims {
  int N, C, H, W;
  int O, KH, KW;
  int OH, OW;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                   const Conv2dOpts& o) {
  if (input.ndim() != 4 || kernel.ndim() != 4) {
    throw std::invalid_argument("conv2d expects 4-D input and kernel, got " +
                                shape_str(input.shape()) + " and " + shape_str(kernel.shape()));
  }
  ConvDims d{};
  d.N = input.dim(0);
  d.C = input.dim(1);
  d.H = input.dim(2);
  d.W = input.dim(3);
  d.O = kernel.dim(0);
  d.KH = kernel.dim(2);
  d.KW = kernel.dim(3);
  if (kernel.dim(1) != d.C) {
    throw std::invalid_argument("conv2d: input channels do not match kernel channels: input " +
                                shape_str(input.shape()) + " vs kernel " +
                                shape_str(kernel.shape()));
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != d.O)) {
    throw std::invalid_argument("conv2d: bias shape " + shape_str(bias.shape()) +
                                " does not match " + std::to_string(d.O) + " output channels");
  }
  if (o.stride < 1 || o.dilation < 1 || o.pad_h < 0 || o.pad_w < 0) {
    throw std::invalid_argument("conv2d: stride/dilation must be >= 1 and padding >= 0");
  }
  int eff_h = (d.KH - 1) * o.dilation + 1;
  int eff_w = (d.KW - 1) * o.dilation + 1;
  if (d.H + 2 * o.pad_h < eff_h || d.W + 2 * o.pad_w < eff_w) {
    throw std::invalid_argument("conv2d: padded extent smaller than effective kernel extent");
  }
  d.OH = (d.H + 2 * o.pad_h - eff_h) / o.stride + 1;
  d.OW = (d.W + 2 * o.pad_w - eff_w) / o.stride + 1;
  return d;
}

// col is (C·KH·KW) × (OH·OW)
void im2col(const double* src, const ConvDims& d, const Conv2dOpts& o, double* col) {
  const int ohw = d.OH * d.OW;
  for (int c = 0; c < d.C; ++c) {
    for (int u = 0; u < d.KH; ++u) {
      for (int v = 0; v < d.KW; ++v) {
        double* row = col + (static_cast<size_t>(c) * d.KH * d.KW + static_cast<size_t>(u) * d.KW + v) *
                                static_cast<size_t>(ohw);
        for (int oh = 0; oh < d.OH; ++oh) {
          int ih = oh * o.stride - o.pad_h + u * o.dilation;
          double* out = row + static_cast<size_t>(oh) * d.OW;
          if (ih < 0 || ih >= d.H) {
            std::fill(out, out + d.OW, 0.0);
            continue;
          }
          const double* in = src + (static_cast<size_t>(c) * d.H + ih) * d.W;
          int iw = -o.pad_w + v * o.dilation;
          for (int ow = 0; ow < d.OW; ++ow, iw += o.stride) {
            out[ow] = (iw >= 0 && iw < d.W) ? in[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_accum(const double* col, const ConvDims& d, const Conv2dOpts& o, double* dst) {
  for (int c = 0; c < d.C; ++c) {
    for (int u = 0; u < d.KH; ++u) {
      for (int v = 0; v < d.KW; ++v) {
        const double* row = col + (static_cast<size_t>(c) * d.KH * d.KW +
                                   static_cast<size_t>(u) * d.KW + v) *
                                      static_cast<size_t>(d.OH * d.OW);
        for (int oh = 0; oh < d.OH; ++oh) {
          int ih = oh * o.stride - o.pad_h + u * o.dilation;
          if (ih < 0 || ih >= d.H) continue;
          double* out = dst + (static_cast<size_t>(c) * d.H + ih) * d.W;
          const double* in = row + static_cast<size_t>(oh) * d.OW;
          int iw = -o.pad_w + v * o.dilation;
          for (int ow = 0; ow < d.OW; ++ow, iw += o.stride) {
            if (iw >= 0 && iw < d.W) out[iw] += in[ow];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              const Conv2dOpts& opts) {
  ConvDims d = conv_dims(input, kernel, bias, opts);
  const int ckk = d.C * d.KH * d.KW;
  const int ohw = d.OH * d.OW;
  const size_t in_stride = static_cast<size_t>(d.C) * d.H * d.W;
  const size_t out_stride = static_cast<size_t>(d.O) * ohw;

  bool rg = input.requires_grad() || kernel.requires_grad() ||
            (bias.defined() && bias.requires_grad());
  Tensor out = Tensor::zeros({d.N, d.O, d.OH, d.OW}, rg);

  {
    const double* in_ptr = input.values().data();
    const double* k_ptr = kernel.values().data();
    const double* b_ptr = bias.defined() ? bias.values().data() : nullptr;
    double* out_ptr = out.values().data();
    parallel_for(d.N, [&](int n) {
      auto col = std::make_unique_for_overwrite<double[]>(static_cast<size_t>(ckk) * ohw);
      im2col(in_ptr + n * in_stride, d, opts, col.get());
      double* y = out_ptr + n * out_stride;
      if (b_ptr) {
        for (int o = 0; o < d.O; ++o) {
          std::fill(y + static_cast<size_t>(o) * ohw, y + static_cast<size_t>(o + 1) * ohw,
                    b_ptr[o]);
        }
      }
      matmul_nn(k_ptr, col.get(), y, d.O, ckk, ohw);
    });
  }

  if (tape.recording() && rg) {
    auto in_node = input.node();
    auto k_node = kernel.node();
    auto b_node = bias.defined() ? bias.node() : nullptr;
    auto out_node = out.node();
    Conv2dOpts o = opts;
    tape.record(out, [in_node, k_node, b_node, out_node, d, o, ckk, ohw, in_stride, out_stride]() {
      const double* dy = out_node->grad.data();
      const double* k_ptr = k_node->values.data();
      const double* in_ptr = in_node->values.data();
      const bool d_in = in_node->requires_grad;
      const bool d_k = k_node->requires_grad;
      const bool d_b = b_node && b_node->requires_grad;
      if (d_in) in_node->ensure_grad();
      if (d_k) k_node->ensure_grad();
      if (d_b) b_node->ensure_grad();

      // Per-sample kernel-grad scratch, reduced in sample order afterwards,
      // keeps results independent of thread count.
      std::vector<std::vector<double>> dk_scratch;
      if (d_k) dk_scratch.assign(static_cast<size_t>(d.N), {});

      parallel_for(d.N, [&](int n) {
        auto col = std::make_unique_for_overwrite<double[]>(static_cast<size_t>(ckk) * ohw);
        im2col(in_ptr + n * in_stride, d, o, col.get());
        const double* dyn = dy + n * out_stride;
        if (d_k) {
          auto& dk = dk_scratch[static_cast<size_t>(n)];
          dk.assign(static_cast<size_t>(d.O) * ckk, 0.0);
          matmul_nt(dyn, col.get(), dk.data(), d.O, ohw, ckk);
        }
        if (d_in) {
          auto dcol = std::make_unique_for_overwrite<double[]>(static_cast<size_t>(ckk) * ohw);
          matmul_tn_overwrite(k_ptr, dyn, dcol.get(), d.O, ckk, ohw);
          col2im_accum(dcol.get(), d, o, in_node->grad.data() + n * in_stride);
        }
      });

      if (d_k) {
        double* dk_total = k_node->grad.data();
        for (int n = 0; n < d.N; ++n) {
          const auto& dk = dk_scratch[static_cast<size_t>(n)];
          for (size_t i = 0; i < dk.size(); ++i) dk_total[i] += dk[i];
        }
      }
      if (d_b) {
        double* db = b_node->grad.data();
        for (int n = 0; n < d.N; ++n) {
          for (int o2 = 0; o2 < d.O; ++o2) {
            const double* row = dy + n * out_stride + static_cast<size_t>(o2) * ohw;
            double acc = 0.0;
            for (int p = 0; p < ohw; ++p) acc += row[p];
            db[o2] += acc;
          }
        }
      }
    });
  }
  return out;
}

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding, int dilation) {
  return conv2d(tape, input, kernel, bias, Conv2dOpts{stride, padding, padding, dilation});
}

Tensor conv_separable_pair(Tape& tape, const Tensor& input, const SeparablePairWeights& w) {
  int k = w.a_row_w.dim(3);
  if (w.a_col_w.dim(2) != k || w.b_col_w.dim(2) != k || w.b_row_w.dim(3) != k) {
    throw std::invalid_argument("conv_separable_pair: branch kernel extents disagree");
  }
  if (k % 2 == 0) {
    throw std::invalid_argument("conv_separable_pair: kernel extent must be odd, got " +
                                std::to_string(k));
  }
  int p = (k - 1) / 2;
  Tensor a = conv2d(tape, input, w.a_row_w, w.a_row_b, Conv2dOpts{1, 0, p, 1});
  a = conv2d(tape, a, w.a_col_w, w.a_col_b, Conv2dOpts{1, p, 0, 1});
  Tensor b = conv2d(tape, input, w.b_col_w, w.b_col_b, Conv2dOpts{1, p, 0, 1});
  b = conv2d(tape, b, w.b_row_w, w.b_row_b, Conv2dOpts{1, 0, p, 1});
  return add(tape, a, b);
}

// ---------------------------------------------------------------------------
// max_pool2d

Tensor max_pool2d(Tape& tape, const Tensor& input) {
  if (input.ndim() != 4) {
    throw std::invalid_argument("max_pool2d expects 4-D input, got " + shape_str(input.shape()));
  }
  int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw std::invalid_argument("max_pool2d requires even H and W, got " +
                                shape_str(input.shape()));
  }
  int OH = H / 2, OW = W / 2;
  bool rg = input.requires_grad();
  Tensor out = Tensor::zeros({N, C, OH, OW}, rg);
  auto argmax = std::make_shared<std::vector<int64_t>>(out.values().size());

  const double* in = input.values().data();
  double* y = out.values().data();
  size_t oi = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const double* plane = in + (static_cast<size_t>(n) * C + c) * H * W;
      for (int oh = 0; oh < OH; ++oh) {
        for (int ow = 0; ow < OW; ++ow, ++oi) {
          // Ties take the first (row-major) maximal element.
          int64_t base = static_cast<int64_t>(oh) * 2 * W + ow * 2;
          int64_t best = base;
          double bv = plane[base];
          const int64_t cand[3] = {base + 1, base + W, base + W + 1};
          for (int64_t idx : cand) {
            if (plane[idx] > bv) {
              bv = plane[idx];
              best = idx;
            }
          }
          y[oi] = bv;
          (*argmax)[oi] = (static_cast<int64_t>(n) * C + c) * H * W + best;
        }
      }
    }
  }

  if (tape.recording() && rg) {
    auto in_node = input.node();
    auto out_node = out.node();
    tape.record(out, [in_node, out_node, argmax]() {
      if (!in_node->requires_grad) return;
      in_node->ensure_grad();
      const double* dy = out_node->grad.data();
      double* dx = in_node->grad.data();
      for (size_t i = 0; i < argmax->size(); ++i) dx[(*argmax)[i]] += dy[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// bilinear_upsample2x

namespace {

struct LerpAxis {
  std::vector<int> i0, i1;
  std::vector<double> f;  // weight of i1
};

LerpAxis make_lerp_axis(int in_extent) {
  LerpAxis a;
  int out_extent = in_extent * 2;
  a.i0.resize(static_cast<size_t>(out_extent));
  a.i1.resize(static_cast<size_t>(out_extent));
  a.f.resize(static_cast<size_t>(out_extent));
  for (int o = 0; o < out_extent; ++o) {
    double src = (o + 0.5) * 0.5 - 0.5;
    if (src < 0.0) src = 0.0;
    if (src > in_extent - 1) src = in_extent - 1;
    int lo = static_cast<int>(std::floor(src));
    a.i0[static_cast<size_t>(o)] = lo;
    a.i1[static_cast<size_t>(o)] = std::min(lo + 1, in_extent - 1);
    a.f[static_cast<size_t>(o)] = src - lo;
  }
  return a;
}

}  // namespace

Tensor bilinear_upsample2x(Tape& tape, const Tensor& input) {
  if (input.ndim() != 4) {
    throw std::invalid_argument("bilinear_upsample2x expects 4-D input, got " +
                                shape_str(input.shape()));
  }
  int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  int OH = H * 2, OW = W * 2;
  bool rg = input.requires_grad();
  Tensor out = Tensor::zeros({N, C, OH, OW}, rg);

  auto rows = std::make_shared<LerpAxis>(make_lerp_axis(H));
  auto cols = std::make_shared<LerpAxis>(make_lerp_axis(W));

  const double* in = input.values().data();
  double* y = out.values().data();
  for (int nc = 0; nc < N * C; ++nc) {
    const double* plane = in + static_cast<size_t>(nc) * H * W;
    double* oplane = y + static_cast<size_t>(nc) * OH * OW;
    for (int oh = 0; oh < OH; ++oh) {
      const double* r0 = plane + static_cast<size_t>(rows->i0[oh]) * W;
      const double* r1 = plane + static_cast<size_t>(rows->i1[oh]) * W;
      double fh = rows->f[oh];
      double* orow = oplane + static_cast<size_t>(oh) * OW;
      for (int ow = 0; ow < OW; ++ow) {
        int c0 = cols->i0[ow], c1 = cols->i1[ow];
        double fw = cols->f[ow];
        double top = r0[c0] * (1.0 - fw) + r0[c1] * fw;
        double bot = r1[c0] * (1.0 - fw) + r1[c1] * fw;
        orow[ow] = top * (1.0 - fh) + bot * fh;
      }
    }
  }

  if (tape.recording() && rg) {
    auto in_node = input.node();
    auto out_node = out.node();
    tape.record(out, [in_node, out_node, rows, cols, N, C, H, W, OH, OW]() {
      if (!in_node->requires_grad) return;
      in_node->ensure_grad();
      const double* dy = out_node->grad.data();
      double* dx = in_node->grad.data();
      for (int nc = 0; nc < N * C; ++nc) {
        double* dplane = dx + static_cast<size_t>(nc) * H * W;
        const double* doplane = dy + static_cast<size_t>(nc) * OH * OW;
        for (int oh = 0; oh < OH; ++oh) {
          int r0 = rows->i0[oh], r1 = rows->i1[oh];
          double fh = rows->f[oh];
          const double* dorow = doplane + static_cast<size_t>(oh) * OW;
          for (int ow = 0; ow < OW; ++ow) {
            int c0 = cols->i0[ow], c1 = cols->i1[ow];
            double fw = cols->f[ow];
            double g = dorow[ow];
            dplane[static_cast<size_t>(r0) * W + c0] += g * (1.0 - fh) * (1.0 - fw);
            dplane[static_cast<size_t>(r0) * W + c1] += g * (1.0 - fh) * fw;
            dplane[static_cast<size_t>(r1) * W + c0] += g * fh * (1.0 - fw);
            dplane[static_cast<size_t>(r1) * W + c1] += g * fh * fw;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batch_norm2d

Tensor batch_norm2d(Tape& tape, const Tensor& input, const Tensor& gamma, const Tensor& beta,
                    BatchNormStats& stats, bool training, double eps, double momentum) {
  if (input.ndim() != 4) {
    throw std::invalid_argument("batch_norm2d expects 4-D input, got " + shape_str(input.shape()));
  }
  int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (gamma.numel() != C || beta.numel() != C) {
    throw std::invalid_argument("batch_norm2d: gamma/beta must have " + std::to_string(C) +
                                " entries");
  }
  if (stats.running_mean.empty()) stats.running_mean.assign(static_cast<size_t>(C), 0.0);
  if (stats.running_var.empty()) stats.running_var.assign(static_cast<size_t>(C), 1.0);

  const int64_t plane = static_cast<int64_t>(H) * W;
  const int64_t count = static_cast<int64_t>(N) * plane;

  auto mu = std::make_shared<std::vector<double>>(static_cast<size_t>(C), 0.0);
  auto var = std::make_shared<std::vector<double>>(static_cast<size_t>(C), 0.0);
  const double* x = input.values().data();

  if (training) {
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = x + (static_cast<size_t>(n) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) acc += p[i];
      }
      double m = acc / static_cast<double>(count);
      double vacc = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = x + (static_cast<size_t>(n) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          double dxi = p[i] - m;
          vacc += dxi * dxi;
        }
      }
      (*mu)[c] = m;
      (*var)[c] = vacc / static_cast<double>(count);
      stats.running_mean[c] = (1.0 - momentum) * stats.running_mean[c] + momentum * m;
      stats.running_var[c] = (1.0 - momentum) * stats.running_var[c] + momentum * (*var)[c];
    }
  } else {
    *mu = stats.running_mean;
    *var = stats.running_var;
  }

  bool rg = input.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  Tensor out = Tensor::zeros({N, C, H, W}, rg);
  double* y = out.values().data();
  const double* gm = gamma.values().data();
  const double* bt = beta.values().data();
  for (int c = 0; c < C; ++c) {
    double inv_sd = 1.0 / std::sqrt((*var)[c] + eps);
    double scale = gm[c] * inv_sd;
    double shift = bt[c] - (*mu)[c] * scale;
    for (int n = 0; n < N; ++n) {
      const double* p = x + (static_cast<size_t>(n) * C + c) * plane;
      double* q = y + (static_cast<size_t>(n) * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) q[i] = p[i] * scale + shift;
    }
  }

  if (tape.recording() && rg) {
    auto in_node = input.node();
    auto g_node = gamma.node();
    auto b_node = beta.node();
    auto out_node = out.node();
    tape.record(out, [in_node, g_node, b_node, out_node, mu, var, training, eps, N, C, plane,
                      count]() {
      const double* dy = out_node->grad.data();
      const double* x2 = in_node->values.data();
      const double* gm2 = g_node->values.data();
      const bool d_in = in_node->requires_grad;
      const bool d_g = g_node->requires_grad;
      const bool d_b = b_node->requires_grad;
      if (d_in) in_node->ensure_grad();
      if (d_g) g_node->ensure_grad();
      if (d_b) b_node->ensure_grad();

      for (int c = 0; c < C; ++c) {
        double inv_sd = 1.0 / std::sqrt((*var)[c] + eps);
        double m = (*mu)[c];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int n = 0; n < N; ++n) {
          const double* dyp = dy + (static_cast<size_t>(n) * C + c) * plane;
          const double* xp = x2 + (static_cast<size_t>(n) * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            sum_dy += dyp[i];
            sum_dy_xhat += dyp[i] * (xp[i] - m) * inv_sd;
          }
        }
        if (d_g) g_node->grad[c] += sum_dy_xhat;
        if (d_b) b_node->grad[c] += sum_dy;
        if (d_in) {
          double g = gm2[c];
          if (training) {
            // Batch statistics depend on the input, hence the correction terms.
            double inv_m = 1.0 / static_cast<double>(count);
            for (int n = 0; n < N; ++n) {
              const double* dyp = dy + (static_cast<size_t>(n) * C + c) * plane;
              const double* xp = x2 + (static_cast<size_t>(n) * C + c) * plane;
              double* dxp = in_node->grad.data() + (static_cast<size_t>(n) * C + c) * plane;
              for (int64_t i = 0; i < plane; ++i) {
                double xhat = (xp[i] - m) * inv_sd;
                dxp[i] += g * inv_sd * (dyp[i] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat);
              }
            }
          } else {
            for (int n = 0; n < N; ++n) {
              const double* dyp = dy + (static_cast<size_t>(n) * C + c) * plane;
              double* dxp = in_node->grad.data() + (static_cast<size_t>(n) * C + c) * plane;
              for (int64_t i = 0; i < plane; ++i) dxp[i] += dyp[i] * g * inv_sd;
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pointwise

Tensor relu(Tape& tape, const Tensor& x) {
  bool rg = x.requires_grad();
  Tensor out = Tensor::zeros(x.shape(), rg);
  const auto& xv = x.values();
  auto& yv = out.values();
  for (size_t i = 0; i < xv.size(); ++i) yv[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  if (tape.recording() && rg) {
    auto in_node = x.node();
    auto out_node = out.node();
    tape.record(out, [in_node, out_node]() {
      if (!in_node->requires_grad) return;
      in_node->ensure_grad();
      const auto& dy = out_node->grad;
      const auto& xv2 = in_node->values;
      auto& dx = in_node->grad;
      for (size_t i = 0; i < dy.size(); ++i) {
        if (xv2[i] > 0.0) dx[i] += dy[i];
      }
    });
  }
  return out;
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
  bool rg = x.requires_grad();
  Tensor out = Tensor::zeros(x.shape(), rg);
  const auto& xv = x.values();
  auto& yv = out.values();
  // Output kept strictly inside (0,1): one-ulp clamp at the saturated ends.
  constexpr double kLo = 1e-300;
  constexpr double kHi = 1.0 - 1.1102230246251565e-16;
  for (size_t i = 0; i < xv.size(); ++i) {
    double v = xv[i];
    double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : [&] {
      double e = std::exp(v);
      return e / (1.0 + e);
    }();
    if (s < kLo) s = kLo;
    if (s > kHi) s = kHi;
    yv[i] = s;
  }
  if (tape.recording() && rg) {
    auto in_node = x.node();
    auto out_node = out.node();
    tape.record(out, [in_node, out_node]() {
      if (!in_node->requires_grad) return;
      in_node->ensure_grad();
      const auto& dy = out_node->grad;
      const auto& s = out_node->values;
      auto& dx = in_node->grad;
      for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * s[i] * (1.0 - s[i]);
    });
  }
  return out;
}

Tensor log(Tape& tape, const Tensor& x) {
  const auto& xv = x.values();
  for (size_t i = 0; i < xv.size(); ++i) {
    if (!(xv[i] > 0.0)) {
      throw std::invalid_argument("log: input must be strictly positive, got " +
                                  std::to_string(xv[i]) + " at index " + std::to_string(i));
    }
  }
  bool rg = x.requires_grad();
  Tensor out = Tensor::zeros(x.shape(), rg);
  auto& yv = out.values();
  for (size_t i = 0; i < xv.size(); ++i) yv[i] = std::log(xv[i]);
  if (tape.recording() && rg) {
    auto in_node = x.node();
    auto out_node = out.node();
    tape.record(out, [in_node, out_node]() {
      if (!in_node->requires_grad) return;
      in_node->ensure_grad();
      const auto& dy = out_node->grad;
      const auto& xv2 = in_node->values;
      auto& dx = in_node->grad;
      for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] / xv2[i];
    });
  }
  return out;
}

namespace {

// y = a·x + b, the shared backbone of neg/add_scalar/mul_scalar/sub_scalar.
Tensor affine_op(Tape& tape, const Tensor& x, double a, double b) {
  bool rg = x.requires_grad();
  Tensor out = Tensor::zeros(x.shape(), rg);
  const auto& xv = x.values();
  auto& yv = out.values();
  for (size_t i = 0; i < xv.size(); ++i) yv[i] = a * xv[i] + b;
  if (tape.recording() && rg) {
    auto in_node = x.node();
    auto out_node = out.node();
    tape.record(out, [in_node, out_node, a]() {
      if (!in_node->requires_grad) return;
      in_node->ensure_grad();
      const auto& dy = out_node->grad;
      auto& dx = in_node->grad;
      for (size_t i = 0; i < dy.size(); ++i) dx[i] += a * dy[i];
    });
  }
  return out;
}

}  // namespace

Tensor neg(Tape& tape, const Tensor& x) { return affine_op(tape, x, -1.0, 0.0); }
Tensor add_scalar(Tape& tape, const Tensor& x, double c) { return affine_op(tape, x, 1.0, c); }
Tensor mul_scalar(Tape& tape, const Tensor& x, double c) { return affine_op(tape, x, c, 0.0); }
Tensor sub_scalar(Tape& tape, const Tensor& x, double c) { return affine_op(tape, x, 1.0, -c); }
Tensor rsub_scalar(Tape& tape, double c, const Tensor& x) { return affine_op(tape, x, -1.0, c); }

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor out = Tensor::zeros(a.shape(), rg);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& yv = out.values();
  for (size_t i = 0; i < av.size(); ++i) yv[i] = av[i] + bv[i];
  if (tape.recording() && rg) {
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    tape.record(out, [an, bn, on]() {
      const auto& dy = on->grad;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < dy.size(); ++i) an->grad[i] += dy[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < dy.size(); ++i) bn->grad[i] += dy[i];
      }
    });
  }
  return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor out = Tensor::zeros(a.shape(), rg);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& yv = out.values();
  for (size_t i = 0; i < av.size(); ++i) yv[i] = av[i] - bv[i];
  if (tape.recording() && rg) {
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    tape.record(out, [an, bn, on]() {
      const auto& dy = on->grad;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < dy.size(); ++i) an->grad[i] += dy[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < dy.size(); ++i) bn->grad[i] -= dy[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor out = Tensor::zeros(a.shape(), rg);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& yv = out.values();
  for (size_t i = 0; i < av.size(); ++i) yv[i] = av[i] * bv[i];
  if (tape.recording() && rg) {
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    tape.record(out, [an, bn, on]() {
      const auto& dy = on->grad;
      if (an->requires_grad) {
        an->ensure_grad();
        const auto& bv2 = bn->values;
        for (size_t i = 0; i < dy.size(); ++i) an->grad[i] += dy[i] * bv2[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        const auto& av2 = an->values;
        for (size_t i = 0; i < dy.size(); ++i) bn->grad[i] += dy[i] * av2[i];
      }
    });
  }
  return out;
}

Tensor div(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor out = Tensor::zeros(a.shape(), rg);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& yv = out.values();
  for (size_t i = 0; i < av.size(); ++i) yv[i] = av[i] / bv[i];
  if (tape.recording() && rg) {
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    tape.record(out, [an, bn, on]() {
      const auto& dy = on->grad;
      const auto& bv2 = bn->values;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < dy.size(); ++i) an->grad[i] += dy[i] / bv2[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        const auto& av2 = an->values;
        for (size_t i = 0; i < dy.size(); ++i) {
          bn->grad[i] -= dy[i] * av2[i] / (bv2[i] * bv2[i]);
        }
      }
    });
  }
  return out;
}

Tensor pow_scalar(Tape& tape, const Tensor& x, double e) {
  const auto& xv = x.values();
  for (size_t i = 0; i < xv.size(); ++i) {
    if (!(xv[i] > 0.0)) {
      throw std::invalid_argument("pow_scalar: base must be strictly positive, got " +
                                  std::to_string(xv[i]));
    }
  }
  bool rg = x.requires_grad();
  Tensor out = Tensor::zeros(x.shape(), rg);
  auto& yv = out.values();
  for (size_t i = 0; i < xv.size(); ++i) yv[i] = std::pow(xv[i], e);
  if (tape.recording() && rg) {
    auto in_node = x.node();
    auto out_node = out.node();
    tape.record(out, [in_node, out_node, e]() {
      if (!in_node->requires_grad) return;
      in_node->ensure_grad();
      const auto& dy = out_node->grad;
      const auto& xv2 = in_node->values;
      auto& dx = in_node->grad;
      if (e == 0.0) return;  // derivative identically zero
      for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * e * std::pow(xv2[i], e - 1.0);
    });
  }
  return out;
}

Tensor clamp(Tape& tape, const Tensor& x, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("clamp: lo must be < hi");
  bool rg = x.requires_grad();
  Tensor out = Tensor::zeros(x.shape(), rg);
  const auto& xv = x.values();
  auto& yv = out.values();
  for (size_t i = 0; i < xv.size(); ++i) yv[i] = std::min(std::max(xv[i], lo), hi);
  if (tape.recording() && rg) {
    auto in_node = x.node();
    auto out_node = out.node();
    tape.record(out, [in_node, out_node, lo, hi]() {
      if (!in_node->requires_grad) return;
      in_node->ensure_grad();
      const auto& dy = out_node->grad;
      const auto& xv2 = in_node->values;
      auto& dx = in_node->grad;
      for (size_t i = 0; i < dy.size(); ++i) {
        if (xv2[i] > lo && xv2[i] < hi) dx[i] += dy[i];
      }
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  bool rg = x.requires_grad();
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor out = Tensor::scalar(acc, rg);
  if (tape.recording() && rg) {
    auto in_node = x.node();
    auto out_node = out.node();
    tape.record(out, [in_node, out_node]() {
      if (!in_node->requires_grad) return;
      in_node->ensure_grad();
      double g = out_node->grad[0];
      for (auto& d : in_node->grad) d += g;
    });
  }
  return out;
}

Tensor mean(Tape& tape, const Tensor& x) {
  bool rg = x.requires_grad();
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  double inv_n = 1.0 / static_cast<double>(x.numel());
  Tensor out = Tensor::scalar(acc * inv_n, rg);
  if (tape.recording() && rg) {
    auto in_node = x.node();
    auto out_node = out.node();
    tape.record(out, [in_node, out_node, inv_n]() {
      if (!in_node->requires_grad) return;
      in_node->ensure_grad();
      double g = out_node->grad[0] * inv_n;
      for (auto& d : in_node->grad) d += g;
    });
  }
  return out;
}

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.ndim() != 4 || b.ndim() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
      a.dim(3) != b.dim(3)) {
    throw std::invalid_argument("concat_channels: incompatible shapes " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  }
  int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor out = Tensor::zeros({N, Ca + Cb, H, W}, rg);
  const size_t plane = static_cast<size_t>(H) * W;
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& yv = out.values();
  for (int n = 0; n < N; ++n) {
    std::memcpy(yv.data() + static_cast<size_t>(n) * (Ca + Cb) * plane,
                av.data() + static_cast<size_t>(n) * Ca * plane, Ca * plane * sizeof(double));
    std::memcpy(yv.data() + (static_cast<size_t>(n) * (Ca + Cb) + Ca) * plane,
                bv.data() + static_cast<size_t>(n) * Cb * plane, Cb * plane * sizeof(double));
  }
  if (tape.recording() && rg) {
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    tape.record(out, [an, bn, on, N, Ca, Cb, plane]() {
      const double* dy = on->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        for (int n = 0; n < N; ++n) {
          const double* src = dy + static_cast<size_t>(n) * (Ca + Cb) * plane;
          double* dst = an->grad.data() + static_cast<size_t>(n) * Ca * plane;
          for (size_t i = 0; i < static_cast<size_t>(Ca) * plane; ++i) dst[i] += src[i];
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int n = 0; n < N; ++n) {
          const double* src = dy + (static_cast<size_t>(n) * (Ca + Cb) + Ca) * plane;
          double* dst = bn->grad.data() + static_cast<size_t>(n) * Cb * plane;
          for (size_t i = 0; i < static_cast<size_t>(Cb) * plane; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

Tensor slice_batch(Tape& tape, const Tensor& x, int n) {
  if (x.ndim() != 4) {
    throw std::invalid_argument("slice_batch expects 4-D input, got " + shape_str(x.shape()));
  }
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (n < 0 || n >= N) throw std::out_of_range("slice_batch: sample index out of range");
  size_t stride = static_cast<size_t>(C) * H * W;
  bool rg = x.requires_grad();
  Tensor out = Tensor::zeros({1, C, H, W}, rg);
  std::memcpy(out.values().data(), x.values().data() + static_cast<size_t>(n) * stride,
              stride * sizeof(double));
  if (tape.recording() && rg) {
    auto in_node = x.node();
    auto out_node = out.node();
    tape.record(out, [in_node, out_node, n, stride]() {
      if (!in_node->requires_grad) return;
      in_node->ensure_grad();
      const auto& dy = out_node->grad;
      double* dst = in_node->grad.data() + static_cast<size_t>(n) * stride;
      for (size_t i = 0; i < stride; ++i) dst[i] += dy[i];
    });
  }
  return out;
}

}  // namespace segkit
