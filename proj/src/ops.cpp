#include "memlong/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "memlong/errors.hpp"
#include "memlong/kernels.hpp"

namespace memlong::ops {
namespace {

void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

// Adds g into t's gradient buffer if t is trainable.
void accumulate(const Tensor& t, std::span<const float> g) {
  if (!t.requires_grad()) return;
  auto dst = t.ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

Tensor make_output(Shape shape, bool tracked) { return Tensor::zeros(std::move(shape), tracked); }


}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
  require(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 tensors");
  const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  require(b.dim(0) == K, "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const bool tracked = needs_grad(tape, {&a, &b});
  Tensor out = make_output({M, N}, tracked);
  kernels::gemm(M, N, K, a.data().data(), K, b.data().data(), N, out.data().data(), N, false);
  check_finite(out, "matmul");
  if (tracked) {
    tape->record([a, b, out, M, N, K]() mutable {
      if (!out.has_grad()) return;
      const float* dc = out.grad().data();
      if (a.requires_grad()) kernels::gemm_nt(M, K, N, dc, b.data().data(), a.ensure_grad().data(), true);
      if (b.requires_grad()) kernels::gemm_tn(K, N, M, a.data().data(), dc, b.ensure_grad().data(), true);
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  require_same_shape(a, b, "add");
  const bool tracked = needs_grad(tape, {&a, &b});
  Tensor out = make_output(a.shape(), tracked);
  auto o = out.data();
  const auto x = a.data(), y = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  check_finite(out, "add");
  if (tracked) {
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      accumulate(a, out.grad());
      accumulate(b, out.grad());
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
  require_same_shape(a, b, "mul");
  const bool tracked = needs_grad(tape, {&a, &b});
  Tensor out = make_output(a.shape(), tracked);
  auto o = out.data();
  const auto x = a.data(), y = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  check_finite(out, "mul");
  if (tracked) {
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      const auto x = a.data(), y = b.data();
      std::vector<float> tmp(g.size());
      if (a.requires_grad()) {
        for (size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * y[i];
        accumulate(a, tmp);
      }
      if (b.requires_grad()) {
        for (size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * x[i];
        accumulate(b, tmp);
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float factor, Tape* tape) {
  const bool tracked = needs_grad(tape, {&a});
  Tensor out = make_output(a.shape(), tracked);
  auto o = out.data();
  const auto x = a.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  check_finite(out, "scale");
  if (tracked) {
    tape->record([a, out, factor]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      std::vector<float> tmp(g.size());
      for (size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * factor;
      accumulate(a, tmp);
    });
  }
  return out;
}

Tensor sum(const Tensor& a, Tape* tape) {
  const bool tracked = needs_grad(tape, {&a});
  float total = 0.0f;
  for (float v : a.data()) total += v;
  Tensor out = Tensor::scalar(total, tracked);
  check_finite(out, "sum");
  if (tracked) {
    tape->record([a, out]() mutable {
      if (!out.has_grad()) return;
      std::vector<float> tmp(static_cast<size_t>(a.numel()), out.grad()[0]);
      accumulate(a, tmp);
    });
  }
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b, Tape* tape) {
  require(a.row_size() == b.row_size() || a.rows() == 0 || b.rows() == 0,
          "concat_rows: row sizes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape shape = (b.rows() > 0 ? b : a).shape();
  shape[0] = a.rows() + b.rows();
  const bool tracked = needs_grad(tape, {&a, &b});
  std::vector<float> values;
  values.reserve(static_cast<size_t>(a.numel() + b.numel()));
  values.insert(values.end(), a.data().begin(), a.data().end());
  values.insert(values.end(), b.data().begin(), b.data().end());
  Tensor out = Tensor::from(std::move(shape), std::move(values), tracked);
  if (tracked) {
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      const size_t na = static_cast<size_t>(a.numel());
      accumulate(a, g.subspan(0, na));
      accumulate(b, g.subspan(na));
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x, const Tensor* mask, Tape* tape) {
  require(x.rank() == 2, "softmax_rows expects a rank-2 tensor");
  if (mask) require_same_shape(x, *mask, "softmax_rows mask");
  const int64_t R = x.dim(0), C = x.dim(1);
  const auto in = x.data();
  for (float v : in)
    if (!std::isfinite(v)) throw NumericalError("softmax_rows: non-finite input");
  const bool tracked = needs_grad(tape, {&x});
  Tensor out = make_output(x.shape(), tracked);
  auto o = out.data();
  for (int64_t r = 0; r < R; ++r) {
    const float* row = in.data() + r * C;
    const float* mrow = mask ? mask->data().data() + r * C : nullptr;
    float* orow = o.data() + r * C;
    float mx = kMaskedOut;
    for (int64_t c = 0; c < C; ++c) {
      if (mrow && mrow[c] != 0.0f) {
        if (mrow[c] != kMaskedOut) throw std::invalid_argument("softmax_rows: mask entries must be 0 or -inf");
        continue;
      }
      mx = std::max(mx, row[c]);
    }
    if (mx == kMaskedOut) throw NumericalError("softmax_rows: row " + std::to_string(r) + " is fully masked");
    float total = 0.0f;
    for (int64_t c = 0; c < C; ++c) {
      if (mrow && mrow[c] != 0.0f) {
        orow[c] = 0.0f;
        continue;
      }
      orow[c] = kernels::exp_approx(row[c] - mx);
      total += orow[c];
    }
    const float inv = 1.0f / total;
    for (int64_t c = 0; c < C; ++c) orow[c] *= inv;
  }
  if (tracked) {
    tape->record([x, out, R, C]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      const auto p = out.data();
      std::vector<float> dx(static_cast<size_t>(R * C));
      for (int64_t r = 0; r < R; ++r) {
        float dot = 0.0f;
        for (int64_t c = 0; c < C; ++c) dot += p[r * C + c] * g[r * C + c];
        for (int64_t c = 0; c < C; ++c) dx[r * C + c] = p[r * C + c] * (g[r * C + c] - dot);
      }
      accumulate(x, dx);
    });
  }
  return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps, Tape* tape) {
  const int64_t n = x.rows(), d = x.row_size();
  require(weight.numel() == d, "rms_norm: weight size " + std::to_string(weight.numel()) + " != row size " +
                                   std::to_string(d));
  const bool tracked = needs_grad(tape, {&x, &weight});
  Tensor out = make_output(x.shape(), tracked);
  std::vector<float> inv_rms(static_cast<size_t>(n));
  const float* xin = x.data().data();
  const float* w = weight.data().data();
  float* o = out.data().data();
  for (int64_t i = 0; i < n; ++i) {
    const float* row = xin + i * d;
    float ss = 0.0f;
    for (int64_t j = 0; j < d; ++j) ss += row[j] * row[j];
    const float r = 1.0f / std::sqrt(ss / static_cast<float>(d) + eps);
    inv_rms[static_cast<size_t>(i)] = r;
    for (int64_t j = 0; j < d; ++j) o[i * d + j] = row[j] * r * w[j];
  }
  check_finite(out, "rms_norm");
  if (tracked) {
    tape->record([x, weight, out, inv_rms = std::move(inv_rms), n, d]() mutable {
      if (!out.has_grad()) return;
      const float* g = out.grad().data();
      const float* xin = x.data().data();
      const float* w = weight.data().data();
      std::vector<float> dx(x.requires_grad() ? static_cast<size_t>(n * d) : 0);
      std::vector<float> dw(weight.requires_grad() ? static_cast<size_t>(d) : 0, 0.0f);
      for (int64_t i = 0; i < n; ++i) {
        const float r = inv_rms[static_cast<size_t>(i)];
        const float* row = xin + i * d;
        const float* grow = g + i * d;
        if (!dw.empty())
          for (int64_t j = 0; j < d; ++j) dw[j] += grow[j] * row[j] * r;
        if (!dx.empty()) {
          float dot = 0.0f;
          for (int64_t j = 0; j < d; ++j) dot += grow[j] * w[j] * row[j] * r;
          const float mean = dot / static_cast<float>(d);
          for (int64_t j = 0; j < d; ++j) dx[i * d + j] = r * (grow[j] * w[j] - row[j] * r * mean);
        }
      }
      if (!dx.empty()) accumulate(x, dx);
      if (!dw.empty()) accumulate(weight, dw);
    });
  }
  return out;
}

Tensor swiglu(const Tensor& gate, const Tensor& up, Tape* tape) {
  require_same_shape(gate, up, "swiglu");
  const bool tracked = needs_grad(tape, {&gate, &up});
  Tensor out = make_output(gate.shape(), tracked);
  const auto a = gate.data(), b = up.data();
  auto o = out.data();
  std::vector<float> sig(a.size());
  for (size_t i = 0; i < a.size(); ++i) sig[i] = -a[i];
  kernels::exp_inplace(sig);
  for (size_t i = 0; i < a.size(); ++i) sig[i] = 1.0f / (1.0f + sig[i]);
  for (size_t i = 0; i < o.size(); ++i) o[i] = a[i] * sig[i] * b[i];
  check_finite(out, "swiglu");
  if (tracked) {
    tape->record([gate, up, out, sig = std::move(sig)]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      const auto a = gate.data(), b = up.data();
      std::vector<float> tmp(g.size());
      if (gate.requires_grad()) {
        for (size_t i = 0; i < g.size(); ++i) {
          const float s = sig[i];
          tmp[i] = g[i] * b[i] * s * (1.0f + a[i] * (1.0f - s));
        }
        accumulate(gate, tmp);
      }
      if (up.requires_grad()) {
        for (size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * a[i] * sig[i];
        accumulate(up, tmp);
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const int32_t> ids, Tape* tape) {
  require(table.rank() == 2, "embedding table must be rank 2");
  const int64_t V = table.dim(0), d = table.dim(1);
  const int64_t n = static_cast<int64_t>(ids.size());
  for (int32_t id : ids)
    if (id < 0 || id >= V) throw std::out_of_range("embedding: token id " + std::to_string(id) + " out of range");
  const bool tracked = needs_grad(tape, {&table});
  Tensor out = make_output({n, d}, tracked);
  const float* t = table.data().data();
  float* o = out.data().data();
  for (int64_t i = 0; i < n; ++i) std::copy_n(t + ids[static_cast<size_t>(i)] * d, d, o + i * d);
  if (tracked) {
    std::vector<int32_t> saved(ids.begin(), ids.end());
    tape->record([table, out, saved = std::move(saved), d]() mutable {
      if (!out.has_grad()) return;
      const float* g = out.grad().data();
      float* dt = table.ensure_grad().data();
      for (size_t i = 0; i < saved.size(); ++i) {
        float* dst = dt + saved[i] * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += g[static_cast<int64_t>(i) * d + j];
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets, Tape* tape) {
  require(logits.rank() == 2, "cross_entropy expects logits[n, vocab]");
  const int64_t n = logits.dim(0), V = logits.dim(1);
  require(static_cast<int64_t>(targets.size()) == n, "cross_entropy: " + std::to_string(targets.size()) +
                                                         " targets for " + std::to_string(n) + " rows");
  require(n > 0, "cross_entropy on empty batch");
  for (int32_t t : targets)
    if (t < 0 || t >= V) throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " out of range");
  const bool tracked = needs_grad(tape, {&logits});
  const float* z = logits.data().data();
  std::vector<float> probs(tracked ? static_cast<size_t>(n * V) : 0);
  float total = 0.0f;
  for (int64_t i = 0; i < n; ++i) {
    const float* row = z + i * V;
    float mx = row[0];
    for (int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    float s = 0.0f;
    for (int64_t j = 0; j < V; ++j) s += kernels::exp_approx(row[j] - mx);
    const float lse = mx + std::log(s);
    total += lse - row[targets[static_cast<size_t>(i)]];
    if (tracked)
      for (int64_t j = 0; j < V; ++j) probs[i * V + j] = kernels::exp_approx(row[j] - lse);
  }
  Tensor out = Tensor::scalar(total / static_cast<float>(n), tracked);
  check_finite(out, "cross_entropy");
  if (tracked) {
    std::vector<int32_t> saved(targets.begin(), targets.end());
    tape->record([logits, out, probs = std::move(probs), saved = std::move(saved), n, V]() mutable {
      if (!out.has_grad()) return;
      const float g = out.grad()[0] / static_cast<float>(n);
      std::vector<float> dz(probs.size());
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < V; ++j) dz[i * V + j] = probs[i * V + j] * g;
        dz[i * V + saved[static_cast<size_t>(i)]] -= g;
      }
      accumulate(logits, dz);
    });
  }
  return out;
}

RopeTable::RopeTable(std::span<const int64_t> positions, int64_t head_dim, double base)
    : rows_(static_cast<int64_t>(positions.size())), head_dim_(head_dim), half_(head_dim / 2) {
  if (head_dim <= 0 || head_dim % 2 != 0) {
    throw ConfigError("rotary encoding needs an even head dimension, got " + std::to_string(head_dim));
  }
  cos_.resize(static_cast<size_t>(rows_ * half_));
  sin_.resize(static_cast<size_t>(rows_ * half_));
  for (int64_t i = 0; i < rows_; ++i) {
    const int64_t pos = positions[static_cast<size_t>(i)];
    if (pos < 0) throw std::invalid_argument("rotary position must be non-negative");
    for (int64_t j = 0; j < half_; ++j) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(pos) * freq;
      cos_[static_cast<size_t>(i * half_ + j)] = static_cast<float>(std::cos(angle));
      sin_[static_cast<size_t>(i * half_ + j)] = static_cast<float>(std::sin(angle));
    }
  }
}

Tensor apply_rope(const Tensor& x, const RopeTable& table, Tape* tape) {
  const int64_t n = x.rows(), width = x.row_size(), dh = table.head_dim();
  require(table.size() == n, "apply_rope: " + std::to_string(table.size()) + " positions for " +
                                 std::to_string(n) + " rows");
  require(width % dh == 0, "apply_rope: row size not a multiple of head_dim");
  const int64_t heads = width / dh, half = dh / 2;
  const bool tracked = needs_grad(tape, {&x});
  Tensor out = make_output(x.shape(), tracked);
  const float* in = x.data().data();
  float* o = out.data().data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t h = 0; h < heads; ++h) {
      const float* src = in + i * width + h * dh;
      float* dst = o + i * width + h * dh;
      for (int64_t j = 0; j < half; ++j) {
        const float c = table.cos_at(i, j), s = table.sin_at(i, j);
        const float x0 = src[2 * j], x1 = src[2 * j + 1];
        dst[2 * j] = x0 * c - x1 * s;
        dst[2 * j + 1] = x0 * s + x1 * c;
      }
    }
  if (tracked) {
    tape->record([x, out, table, n, width, dh, heads, half]() mutable {
      if (!out.has_grad()) return;
      const float* g = out.grad().data();
      std::vector<float> dx(static_cast<size_t>(n * width));
      for (int64_t i = 0; i < n; ++i)
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t j = 0; j < half; ++j) {
            const int64_t at = i * width + h * dh + 2 * j;
            const float c = table.cos_at(i, j), s = table.sin_at(i, j);
            dx[at] = g[at] * c + g[at + 1] * s;
            dx[at + 1] = -g[at] * s + g[at + 1] * c;
          }
      accumulate(x, dx);
    });
  }
  return out;
}

Tensor apply_rope(const Tensor& x, std::span<const int64_t> positions, int64_t head_dim, Tape* tape) {
  return apply_rope(x, RopeTable(positions, head_dim), tape);
}

namespace {

// Per-head transposed copy: dst[h] is [head_dim, rows] for head h.
std::vector<float> heads_transposed(const Tensor& t, int64_t heads, int64_t dh) {
  const int64_t rows = t.rows(), width = heads * dh;
  std::vector<float> dst(static_cast<size_t>(rows * width));
  for (int64_t h = 0; h < heads; ++h)
    kernels::transpose(rows, dh, t.data().data() + h * dh, width, dst.data() + h * dh * rows);
  return dst;
}

// Softmax over the first `valid` entries of row; entries after that become 0.
void softmax_prefix(float* row, int64_t valid, int64_t total) {
  float mx = row[0];
  for (int64_t j = 1; j < valid; ++j) mx = std::max(mx, row[j]);
  for (int64_t j = 0; j < valid; ++j) row[j] -= mx;
  kernels::exp_inplace({row, static_cast<size_t>(valid)});
  float s = 0.0f;
  for (int64_t j = 0; j < valid; ++j) s += row[j];
  const float inv = 1.0f / s;
  for (int64_t j = 0; j < valid; ++j) row[j] *= inv;
  std::fill(row + valid, row + total, 0.0f);
}

struct QueryGroup {
  int64_t row_begin = 0;
  int64_t row_end = 0;
  int64_t chunk = 0;
  int64_t key_begin = 0;  // index into the key rows
  int64_t key_end = 0;
  int64_t memory_index = -1;
};

}  // namespace

Tensor retrieval_causal_attention(const Tensor& q, const Tensor& keys, const Tensor& values, const Tensor* q_memory,
                                  std::span<const MemoryBlock> memory, const Tensor* gate,
                                  const AttentionLayout& layout, Tape* tape, AttentionTrace* trace) {
  const int64_t H = layout.n_heads, dh = layout.head_dim, width = H * dh;
  const int64_t tau = layout.chunk_size, W = layout.window_chunks;
  const int64_t n = q.rows(), m = keys.rows();
  require(tau > 0 && W > 0, "attention: chunk size and window must be positive");
  require(q.row_size() == width && keys.row_size() == width && values.row_size() == width,
          "attention: row size must equal heads*head_dim");
  require(values.rows() == m, "attention: keys and values differ in length");
  const bool use_memory = !memory.empty();
  if (use_memory) {
    require(q_memory != nullptr && gate != nullptr, "attention: memory blocks need q_memory and gate");
    require(q_memory->shape() == q.shape(), "attention: q_memory shape differs from q");
    require(gate->numel() == H, "attention: gate must hold one value per head");
  }

  std::vector<QueryGroup> groups;
  const int64_t first_chunk = n > 0 ? layout.query_start / tau : 0;
  for (int64_t i = 0; i < n;) {
    const int64_t pos = layout.query_start + i;
    const int64_t chunk = pos / tau;
    const int64_t chunk_end_pos = (chunk + 1) * tau;
    QueryGroup g;
    g.row_begin = i;
    g.row_end = std::min(n, chunk_end_pos - layout.query_start);
    g.chunk = chunk;
    const int64_t window_start = std::max<int64_t>(0, chunk - W + 1) * tau;
    if (window_start < layout.key_start) {
      throw ShapeError("attention: local keys start at " + std::to_string(layout.key_start) +
                       " but the window of chunk " + std::to_string(chunk) + " starts at " +
                       std::to_string(window_start));
    }
    g.key_begin = window_start - layout.key_start;
    g.key_end = layout.query_start + g.row_end - layout.key_start;
    require(g.key_end <= m, "attention: key rows do not reach the last query position");
    if (use_memory) {
      g.memory_index = chunk - first_chunk;
      require(g.memory_index < static_cast<int64_t>(memory.size()), "attention: missing memory block for chunk");
    }
    groups.push_back(g);
    i = g.row_end;
  }

  const bool tracked = needs_grad(tape, {&q, &keys, &values, q_memory, gate});
  Tensor out = make_output(q.shape(), tracked);
  float* o = out.data().data();
  const float* qd = q.data().data();
  const float* vd = values.data().data();
  const std::vector<float> kt = heads_transposed(keys, H, dh);

  // Saved softmax weights, per group then per head.
  std::vector<std::vector<float>> local_p(groups.size() * static_cast<size_t>(H));
  std::vector<std::vector<float>> memory_p(use_memory ? groups.size() * static_cast<size_t>(H) : 0);
  std::vector<std::vector<float>> memory_kt(memory.size());
  for (size_t b = 0; b < memory.size(); ++b)
    if (memory[b].rows() > 0) memory_kt[b] = heads_transposed(memory[b].keys, H, dh);

  for (size_t gi = 0; gi < groups.size(); ++gi) {
    const QueryGroup& g = groups[gi];
    const int64_t rows = g.row_end - g.row_begin;
    const int64_t nk = g.key_end - g.key_begin;
    const MemoryBlock* block = use_memory ? &memory[static_cast<size_t>(g.memory_index)] : nullptr;
    const int64_t R = block ? block->rows() : 0;
    if (R > 0) {
      require(block->values.rows() == R && block->keys.row_size() == width && block->values.row_size() == width,
              "attention: malformed memory block");
      require(block->block_rows > 0 && R % block->block_rows == 0, "attention: memory rows not a multiple of block");
    }
    if (trace) {
      const int64_t last_local = g.key_end - g.key_begin;
      trace->max_local_width = std::max(trace->max_local_width, last_local);
      trace->max_row_width = std::max(trace->max_row_width, last_local + R);
    }
    for (int64_t h = 0; h < H; ++h) {
      float* out_rows = o + g.row_begin * width + h * dh;
      bool have_memory_output = false;
      if (R > 0) {
        const float gh = gate->data()[static_cast<size_t>(h)];
        std::vector<float> pm(static_cast<size_t>(rows * R));
        kernels::gemm(rows, R, dh, q_memory->data().data() + g.row_begin * width + h * dh, width,
                      memory_kt[static_cast<size_t>(g.memory_index)].data() + h * dh * R, R, pm.data(), R, false);
        for (float& s : pm) s *= layout.scale;
        if (trace && trace->memory_scores) trace->memory_scores->insert(trace->memory_scores->end(), pm.begin(), pm.end());
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t b0 = 0; b0 < R; b0 += block->block_rows)
            softmax_prefix(pm.data() + r * R + b0, block->block_rows, block->block_rows);
        std::vector<float> weighted(pm.size());
        for (size_t i = 0; i < pm.size(); ++i) weighted[i] = pm[i] * gh;
        kernels::gemm(rows, dh, R, weighted.data(), R, block->values.data().data() + h * dh, width, out_rows, width,
                      false);
        have_memory_output = true;
        memory_p[gi * static_cast<size_t>(H) + static_cast<size_t>(h)] = std::move(pm);
      }
      std::vector<float> p(static_cast<size_t>(rows * nk));
      kernels::gemm(rows, nk, dh, qd + g.row_begin * width + h * dh, width, kt.data() + h * dh * m + g.key_begin, m,
                    p.data(), nk, false);
      for (int64_t r = 0; r < rows; ++r) {
        float* row = p.data() + r * nk;
        const int64_t valid = nk - (rows - 1 - r);
        for (int64_t j = 0; j < valid; ++j) row[j] *= layout.scale;
        softmax_prefix(row, valid, nk);
      }
      kernels::gemm(rows, dh, nk, p.data(), nk, vd + g.key_begin * width + h * dh, width, out_rows, width,
                    have_memory_output);
      local_p[gi * static_cast<size_t>(H) + static_cast<size_t>(h)] = std::move(p);
    }
  }
  check_finite(out, "retrieval_causal_attention");

  if (tracked) {
    Tensor q_mem_t = q_memory ? *q_memory : Tensor();
    Tensor gate_t = gate ? *gate : Tensor();
    std::vector<MemoryBlock> mem(memory.begin(), memory.end());
    tape->record([q, keys, values, q_mem_t, gate_t, out, mem = std::move(mem), groups = std::move(groups),
                  local_p = std::move(local_p), memory_p = std::move(memory_p), layout, H, dh, width, m,
                  n]() mutable {
      if (!out.has_grad()) return;
      const float* dout = out.grad().data();
      const bool want_q = q.requires_grad(), want_k = keys.requires_grad(), want_v = values.requires_grad();
      const bool want_qm = q_mem_t.defined() && q_mem_t.requires_grad();
      const bool want_gate = gate_t.defined() && gate_t.requires_grad();
      std::vector<float> dq(want_q ? static_cast<size_t>(n * width) : 0, 0.0f);
      std::vector<float> dk(want_k ? static_cast<size_t>(m * width) : 0, 0.0f);
      std::vector<float> dv(want_v ? static_cast<size_t>(m * width) : 0, 0.0f);
      std::vector<float> dqm(want_qm ? static_cast<size_t>(n * width) : 0, 0.0f);
      std::vector<float> dgate(want_gate ? static_cast<size_t>(H) : 0, 0.0f);
      const std::vector<float> vt = heads_transposed(values, H, dh);
      std::vector<std::vector<float>> mem_vt(mem.size());
      for (size_t b = 0; b < mem.size(); ++b)
        if (mem[b].rows() > 0) mem_vt[b] = heads_transposed(mem[b].values, H, dh);

      for (size_t gi = 0; gi < groups.size(); ++gi) {
        const QueryGroup& g = groups[gi];
        const int64_t rows = g.row_end - g.row_begin;
        const int64_t nk = g.key_end - g.key_begin;
        for (int64_t h = 0; h < H; ++h) {
          const size_t slot = gi * static_cast<size_t>(H) + static_cast<size_t>(h);
          const float* dout_rows = dout + g.row_begin * width + h * dh;
          // Local branch.
          const std::vector<float>& p = local_p[slot];
          std::vector<float> dp(static_cast<size_t>(rows * nk));
          kernels::gemm(rows, nk, dh, dout_rows, width, vt.data() + h * dh * m + g.key_begin, m, dp.data(), nk,
                        false);
          for (int64_t r = 0; r < rows; ++r) {
            const float* prow = p.data() + r * nk;
            float* drow = dp.data() + r * nk;
            float dot = 0.0f;
            for (int64_t j = 0; j < nk; ++j) dot += prow[j] * drow[j];
            for (int64_t j = 0; j < nk; ++j) drow[j] = prow[j] * (drow[j] - dot) * layout.scale;
          }
          if (want_q)
            kernels::gemm(rows, dh, nk, dp.data(), nk, keys.data().data() + g.key_begin * width + h * dh, width,
                          dq.data() + g.row_begin * width + h * dh, width, true);
          if (want_k) {
            std::vector<float> dst(static_cast<size_t>(nk * rows));
            kernels::transpose(rows, nk, dp.data(), nk, dst.data());
            kernels::gemm(nk, dh, rows, dst.data(), rows, q.data().data() + g.row_begin * width + h * dh, width,
                          dk.data() + g.key_begin * width + h * dh, width, true);
          }
          if (want_v) {
            std::vector<float> pt(static_cast<size_t>(nk * rows));
            kernels::transpose(rows, nk, p.data(), nk, pt.data());
            kernels::gemm(nk, dh, rows, pt.data(), rows, dout_rows, width, dv.data() + g.key_begin * width + h * dh,
                          width, true);
          }
          // Retrieved branch.
          if (memory_p.empty() || memory_p[slot].empty()) continue;
          const MemoryBlock& block = mem[static_cast<size_t>(g.memory_index)];
          const int64_t R = block.rows();
          const std::vector<float>& pm = memory_p[slot];
          const float gh = gate_t.data()[static_cast<size_t>(h)];
          std::vector<float> dpm(static_cast<size_t>(rows * R));
          kernels::gemm(rows, R, dh, dout_rows, width, mem_vt[static_cast<size_t>(g.memory_index)].data() + h * dh * R,
                        R, dpm.data(), R, false);
          if (want_gate) {
            float acc = 0.0f;
            for (size_t i = 0; i < dpm.size(); ++i) acc += pm[i] * dpm[i];
            dgate[static_cast<size_t>(h)] += acc;
          }
          if (!want_qm) continue;
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t b0 = 0; b0 < R; b0 += block.block_rows) {
              const float* prow = pm.data() + r * R + b0;
              float* drow = dpm.data() + r * R + b0;
              float dot = 0.0f;
              for (int64_t j = 0; j < block.block_rows; ++j) dot += prow[j] * drow[j];
              for (int64_t j = 0; j < block.block_rows; ++j)
                drow[j] = prow[j] * (drow[j] - dot) * gh * layout.scale;
            }
          kernels::gemm(rows, dh, R, dpm.data(), R, block.keys.data().data() + h * dh, width,
                        dqm.data() + g.row_begin * width + h * dh, width, true);
        }
      }
      if (want_q) accumulate(q, dq);
      if (want_k) accumulate(keys, dk);
      if (want_v) accumulate(values, dv);
      if (want_qm) accumulate(q_mem_t, dqm);
      if (want_gate) accumulate(gate_t, dgate);
    });
  }
  return out;
}

}  // namespace memlong::ops
