#include "memlong/memory_bank.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "memlong/errors.hpp"

namespace memlong {

namespace {

int64_t ceil_count(double x) { return static_cast<int64_t>(std::ceil(x - 1e-9)); }
int64_t floor_count(double x) { return static_cast<int64_t>(std::floor(x + 1e-9)); }

}  // namespace

std::string EvictionReport::to_json_line() const {
  nlohmann::json j;
  j["event"] = "dynamic_update";
  j["triggered"] = triggered;
  j["size_before"] = size_before;
  j["size_after"] = size_after;
  j["kept_newest"] = kept_newest;
  j["dropped_oldest"] = dropped_oldest;
  j["evicted_middle"] = evicted_middle;
  j["kept_middle"] = kept_middle;
  return j.dump();
}

MemoryBank::MemoryBank(BankConfig config, int64_t chunk_size, int64_t n_heads, int64_t head_dim, int64_t d_ret)
    : config_(config), chunk_size_(chunk_size), n_heads_(n_heads), head_dim_(head_dim), index_(d_ret) {
  config_.validate();
  if (chunk_size < 1 || n_heads < 1 || head_dim < 1 || d_ret < 1) {
    throw ConfigError("memory bank: dimensions must be positive");
  }
}

MemoryBank::MemoryBank(MemoryBank&& other) noexcept
    : config_(other.config_),
      chunk_size_(other.chunk_size_),
      n_heads_(other.n_heads_),
      head_dim_(other.head_dim_),
      entries_(std::move(other.entries_)),
      index_(std::move(other.index_)),
      next_seq_(other.next_seq_),
      log_(std::move(other.log_)),
      listener_(std::move(other.listener_)) {}

MemoryBank& MemoryBank::operator=(MemoryBank&& other) noexcept {
  if (this == &other) return *this;
  std::scoped_lock lock(mutex_, other.mutex_);
  config_ = other.config_;
  chunk_size_ = other.chunk_size_;
  n_heads_ = other.n_heads_;
  head_dim_ = other.head_dim_;
  entries_ = std::move(other.entries_);
  index_ = std::move(other.index_);
  next_seq_ = other.next_seq_;
  log_ = std::move(other.log_);
  listener_ = std::move(other.listener_);
  return *this;
}

void MemoryBank::check_entry(const MemoryEntry& e) const {
  const Shape expected{chunk_size_, n_heads_, head_dim_};
  if (!e.keys.defined() || e.keys.shape() != expected) {
    throw ShapeError("memory bank: keys shape " + (e.keys.defined() ? shape_str(e.keys.shape()) : "<none>") +
                     " != " + shape_str(expected));
  }
  if (!e.values.defined() || e.values.shape() != expected) {
    throw ShapeError("memory bank: values shape " + (e.values.defined() ? shape_str(e.values.shape()) : "<none>") +
                     " != " + shape_str(expected));
  }
  if (e.embedding.dim() != index_.dim()) {
    throw ShapeError("memory bank: embedding dim " + std::to_string(e.embedding.dim()) + " != " +
                     std::to_string(index_.dim()));
  }
  if (!entries_.empty() && e.chunk_id <= entries_.back().chunk_id) {
    throw std::invalid_argument("memory bank: chunk id " + std::to_string(e.chunk_id) +
                                " is not above stored id " + std::to_string(entries_.back().chunk_id));
  }
}

void MemoryBank::append_entry(MemoryEntry entry) {
  std::unique_lock lock(mutex_);
  check_entry(entry);
  if (config_.capacity == 0) return;
  entry.seq_no = next_seq_++;
  entry.counter = 0;
  // Own the storage so later changes to the caller's tensors cannot reach it.
  entry.keys = entry.keys.clone();
  entry.values = entry.values.clone();
  index_.add(entry.chunk_id, entry.embedding);
  entries_.push_back(std::move(entry));
  if (size() > config_.capacity) {
    EvictionReport report = dynamic_update_locked();
    lock.unlock();
    if (listener_) listener_(report);
  }
}

void MemoryBank::restore_entry(MemoryEntry entry, uint64_t next_seq_no) {
  std::unique_lock lock(mutex_);
  check_entry(entry);
  if (!entries_.empty() && entry.seq_no <= entries_.back().seq_no) {
    throw FormatError("memory bank: restored seq_no values must increase");
  }
  if (entry.seq_no >= next_seq_no) throw FormatError("memory bank: restored seq_no beyond next_seq_no");
  index_.add(entry.chunk_id, entry.embedding);
  entries_.push_back(std::move(entry));
  next_seq_ = next_seq_no;
}

RetrievedContext MemoryBank::retrieve_kv(const ChunkEmbedding& query, int64_t k, int64_t exclude_from) {
  std::shared_lock lock(mutex_);
  RetrievedContext ctx;
  if (entries_.empty()) return ctx;
  std::vector<SearchHit> hits = top_k_search(query, index_, k, exclude_from);
  if (hits.empty()) return ctx;

  std::vector<size_t> rows;
  rows.reserve(hits.size());
  const auto& ids = index_.ids();
  for (const SearchHit& h : hits) {
    const auto it = std::lower_bound(ids.begin(), ids.end(), h.chunk_id);
    rows.push_back(static_cast<size_t>(it - ids.begin()));
  }
  std::sort(rows.begin(), rows.end());

  const int64_t block = chunk_size_ * n_heads_ * head_dim_;
  const int64_t n = static_cast<int64_t>(rows.size());
  ctx.keys = Tensor::zeros({n * chunk_size_, n_heads_, head_dim_});
  ctx.values = Tensor::zeros({n * chunk_size_, n_heads_, head_dim_});
  auto kd = ctx.keys.data();
  auto vd = ctx.values.data();
  for (int64_t i = 0; i < n; ++i) {
    MemoryEntry& e = entries_[rows[static_cast<size_t>(i)]];
    ctx.chunk_indices.push_back(e.chunk_id);
    std::copy_n(e.keys.data().begin(), block, kd.begin() + i * block);
    std::copy_n(e.values.data().begin(), block, vd.begin() + i * block);
    std::atomic_ref<uint64_t>(e.counter).fetch_add(1, std::memory_order_relaxed);
  }
  return ctx;
}

EvictionReport MemoryBank::dynamic_update() {
  std::unique_lock lock(mutex_);
  EvictionReport report = dynamic_update_locked();
  lock.unlock();
  if (report.triggered && listener_) listener_(report);
  return report;
}

EvictionReport MemoryBank::dynamic_update_locked() {
  EvictionReport report;
  const int64_t s = size();
  report.size_before = s;
  report.size_after = s;
  if (s <= config_.capacity) return report;
  report.triggered = true;

  const int64_t target = config_.target_size();
  std::vector<bool> keep(static_cast<size_t>(s), false);

  if (config_.policy == EvictionPolicy::kFifo) {
    const int64_t first_kept = std::max<int64_t>(0, s - target);
    for (int64_t r = 0; r < s; ++r) {
      const int64_t id = entries_[static_cast<size_t>(r)].chunk_id;
      if (r < first_kept) {
        report.dropped_oldest.push_back(id);
      } else {
        keep[static_cast<size_t>(r)] = true;
        report.kept_newest.push_back(id);
      }
    }
  } else {
    const int64_t n_new = std::min(s, ceil_count(config_.keep_newest_frac * static_cast<double>(s)));
    const int64_t n_old = std::min(s - n_new, floor_count(config_.drop_oldest_frac * static_cast<double>(s)));
    const int64_t mid_begin = n_old;
    const int64_t mid_end = s - n_new;
    const int64_t mid_keep = std::clamp<int64_t>(target - n_new, 0, mid_end - mid_begin);

    for (int64_t r = 0; r < n_old; ++r) report.dropped_oldest.push_back(entries_[static_cast<size_t>(r)].chunk_id);
    for (int64_t r = mid_end; r < s; ++r) {
      keep[static_cast<size_t>(r)] = true;
      report.kept_newest.push_back(entries_[static_cast<size_t>(r)].chunk_id);
    }

    // Eviction order: ascending counter, then ascending seq_no.
    std::vector<int64_t> middle(static_cast<size_t>(mid_end - mid_begin));
    std::iota(middle.begin(), middle.end(), mid_begin);
    std::sort(middle.begin(), middle.end(), [&](int64_t a, int64_t b) {
      const MemoryEntry& ea = entries_[static_cast<size_t>(a)];
      const MemoryEntry& eb = entries_[static_cast<size_t>(b)];
      return ea.counter != eb.counter ? ea.counter < eb.counter : ea.seq_no < eb.seq_no;
    });
    const size_t n_evict = middle.size() - static_cast<size_t>(mid_keep);
    for (size_t i = 0; i < middle.size(); ++i) {
      const int64_t r = middle[i];
      if (i < n_evict) {
        report.evicted_middle.push_back(entries_[static_cast<size_t>(r)].chunk_id);
      } else {
        keep[static_cast<size_t>(r)] = true;
      }
    }
    for (int64_t r = mid_begin; r < mid_end; ++r)
      if (keep[static_cast<size_t>(r)]) report.kept_middle.push_back(entries_[static_cast<size_t>(r)].chunk_id);
  }

  size_t out = 0;
  for (size_t r = 0; r < entries_.size(); ++r) {
    if (!keep[r]) continue;
    if (out != r) entries_[out] = std::move(entries_[r]);
    ++out;
  }
  entries_.resize(out);
  index_.retain(keep);
  report.size_after = size();
  log_.push_back(report);
  return report;
}

void MemoryBank::reset() {
  std::unique_lock lock(mutex_);
  entries_.clear();
  index_.clear();
  next_seq_ = 0;
  log_.clear();
}

int64_t MemoryBank::size() const { return static_cast<int64_t>(entries_.size()); }

uint64_t MemoryBank::counter_total() const {
  std::shared_lock lock(mutex_);
  uint64_t total = 0;
  for (const auto& e : entries_) total += std::atomic_ref<const uint64_t>(e.counter).load(std::memory_order_relaxed);
  return total;
}

}  // namespace memlong
