#include <gtest/gtest.h>

#include <nlohmann/json.hpp>
#include <cstring>
#include <map>
#include <set>
#include <thread>

#include "bank_fixtures.hpp"
#include "memlong/errors.hpp"
#include "memlong/memory_bank.hpp"

using namespace memlong;
using namespace memlong::testing;

namespace {

constexpr int64_t kTau = 4, kHeads = 2, kHeadDim = 3, kDim = 16;

MemoryBank make_bank(int64_t capacity, EvictionPolicy policy = EvictionPolicy::kCounter) {
  BankConfig c;
  c.capacity = capacity;
  c.policy = policy;
  return MemoryBank(c, kTau, kHeads, kHeadDim, kDim);
}

bool same_bits(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
}

}  // namespace

TEST(MemoryBank, FirstEntry) {
  MemoryBank bank = make_bank(10);
  std::mt19937_64 rng(1);
  bank.append_entry(make_entry(0, bank, rng, random_unit(kDim, rng)));
  ASSERT_EQ(bank.size(), 1);
  EXPECT_EQ(bank.entries()[0].counter, 0u);
  EXPECT_EQ(bank.entries()[0].seq_no, 0u);
  EXPECT_EQ(bank.index().size(), 1);
}

TEST(MemoryBank, RejectsBadEntries) {
  MemoryBank bank = make_bank(10);
  std::mt19937_64 rng(1);
  bank.append_entry(make_entry(5, bank, rng, random_unit(kDim, rng)));
  EXPECT_THROW(bank.append_entry(make_entry(5, bank, rng, random_unit(kDim, rng))), std::invalid_argument);
  EXPECT_THROW(bank.append_entry(make_entry(3, bank, rng, random_unit(kDim, rng))), std::invalid_argument);
  MemoryEntry bad = make_entry(6, bank, rng, random_unit(kDim, rng));
  bad.keys = Tensor::zeros({kTau + 1, kHeads, kHeadDim});
  EXPECT_THROW(bank.append_entry(std::move(bad)), ShapeError);
  MemoryEntry bad_emb = make_entry(6, bank, rng, random_unit(kDim - 1, rng));
  EXPECT_THROW(bank.append_entry(std::move(bad_emb)), ShapeError);
  EXPECT_EQ(bank.size(), 1);
  EXPECT_EQ(bank.index().size(), 1);
}

TEST(MemoryBank, SingleHitBookkeeping) {
  MemoryBank bank = make_bank(10);
  std::mt19937_64 rng(2);
  std::vector<MemoryEntry> stored;
  for (int64_t i = 0; i < 3; ++i) {
    MemoryEntry e = make_entry(i, bank, rng, basis(kDim, i));
    stored.push_back({e.chunk_id, 0, e.keys.clone(), e.values.clone(), e.embedding, 0});
    bank.append_entry(std::move(e));
  }
  const RetrievedContext ctx = bank.retrieve_kv(basis(kDim, 1), 1, 100);
  ASSERT_EQ(ctx.chunk_indices, std::vector<int64_t>{1});
  EXPECT_TRUE(same_bits(ctx.keys.data(), stored[1].keys.data()));
  EXPECT_TRUE(same_bits(ctx.values.data(), stored[1].values.data()));
  EXPECT_EQ(bank.entries()[0].counter, 0u);
  EXPECT_EQ(bank.entries()[1].counter, 1u);
  EXPECT_EQ(bank.entries()[2].counter, 0u);
}

TEST(MemoryBank, ScarceEligibility) {
  MemoryBank bank = make_bank(10);
  std::mt19937_64 rng(3);
  for (int64_t i = 0; i < 5; ++i) bank.append_entry(make_entry(i, bank, rng, random_unit(kDim, rng)));
  const RetrievedContext ctx = bank.retrieve_kv(random_unit(kDim, rng), 4, 2);
  EXPECT_EQ(ctx.chunk_indices.size(), 2u);
  EXPECT_EQ(ctx.rows(), 2 * kTau);
  EXPECT_EQ(ctx.keys.shape(), (Shape{2 * kTau, kHeads, kHeadDim}));
  EXPECT_TRUE(bank.retrieve_kv(random_unit(kDim, rng), 4, 0).empty());
}

TEST(MemoryBank, CountersSumToHitCount) {
  MemoryBank bank = make_bank(200);
  std::mt19937_64 rng(4);
  for (int64_t i = 0; i < 100; ++i) bank.append_entry(make_entry(i, bank, rng, random_unit(kDim, rng)));
  std::uniform_int_distribution<int64_t> k_dist(1, 6), ex_dist(0, 120);
  uint64_t expected = 0;
  for (int q = 0; q < 500; ++q) {
    const int64_t k = k_dist(rng), ex = ex_dist(rng);
    const int64_t eligible = std::min<int64_t>(ex, 100);
    bank.retrieve_kv(random_unit(kDim, rng), k, ex);
    expected += static_cast<uint64_t>(std::min(k, eligible));
  }
  EXPECT_EQ(bank.counter_total(), expected);

  MemoryBank fixed = make_bank(200);
  for (int64_t i = 0; i < 100; ++i) fixed.append_entry(make_entry(i, fixed, rng, random_unit(kDim, rng)));
  for (int q = 0; q < 500; ++q) fixed.retrieve_kv(random_unit(kDim, rng), 4, 100);
  EXPECT_EQ(fixed.counter_total(), 500u * 4u);
}

TEST(MemoryBank, OverflowShrinksToHalfCapacity) {
  MemoryBank bank = make_bank(100);
  std::mt19937_64 rng(5);
  for (int64_t i = 0; i < 100; ++i) bank.append_entry(make_entry(i, bank, rng, random_unit(kDim, rng)));
  EXPECT_EQ(bank.size(), 100);
  EXPECT_TRUE(bank.eviction_log().empty());
  for (int q = 0; q < 300; ++q) bank.retrieve_kv(random_unit(kDim, rng), 3, 100);

  std::vector<SlotState> before = snapshot(bank);
  before.push_back({100, bank.next_seq_no(), 0});
  const ExpectedEviction want = expected_eviction(before, 100);
  bank.append_entry(make_entry(100, bank, rng, random_unit(kDim, rng)));

  ASSERT_EQ(bank.size(), 50);
  EXPECT_EQ(bank.index().size(), 50);
  ASSERT_EQ(bank.eviction_log().size(), 1u);
  const EvictionReport& r = bank.eviction_log()[0];
  EXPECT_EQ(r.size_before, 101);
  EXPECT_EQ(r.size_after, 50);
  EXPECT_EQ(r.kept_newest.size(), 11u);
  EXPECT_EQ(r.dropped_oldest.size(), 10u);
  EXPECT_EQ(r.evicted_middle.size(), 41u);
  EXPECT_EQ(r.kept_newest, want.kept_newest);
  EXPECT_EQ(r.dropped_oldest, want.dropped_oldest);
  EXPECT_EQ(r.evicted_middle, want.evicted_middle);
  std::vector<int64_t> ids;
  for (const MemoryEntry& e : bank.entries()) ids.push_back(e.chunk_id);
  EXPECT_EQ(ids, want.kept);
  EXPECT_EQ(bank.index().ids(), ids);

  const auto j = nlohmann::json::parse(r.to_json_line());
  EXPECT_EQ(j["size_after"], 50);
  EXPECT_EQ(j["evicted_middle"].size(), 41u);
}

TEST(MemoryBank, MiddleBandTieBreak) {
  // capacity 5: S=6 keeps the newest 1, drops none, and keeps 2 of a
  // 5-entry middle band.
  MemoryBank bank = make_bank(5);
  std::mt19937_64 rng(6);
  for (int64_t i = 0; i < 5; ++i) bank.append_entry(make_entry(i, bank, rng, basis(kDim, i)));
  const std::vector<int> counters{9, 5, 5, 3, 9};
  for (int64_t i = 0; i < 5; ++i)
    for (int n = 0; n < counters[static_cast<size_t>(i)]; ++n) bank.retrieve_kv(basis(kDim, i), 1, 100);
  bank.append_entry(make_entry(5, bank, rng, basis(kDim, 5)));
  ASSERT_EQ(bank.eviction_log().size(), 1u);
  const EvictionReport& r = bank.eviction_log()[0];
  EXPECT_EQ(r.evicted_middle, (std::vector<int64_t>{3, 1, 2}));
  EXPECT_EQ(r.kept_newest, std::vector<int64_t>{5});
  EXPECT_TRUE(r.dropped_oldest.empty());
  std::vector<int64_t> ids;
  for (const MemoryEntry& e : bank.entries()) ids.push_back(e.chunk_id);
  EXPECT_EQ(ids, (std::vector<int64_t>{0, 4, 5}));
  // Counters survive the update.
  EXPECT_EQ(bank.entries()[0].counter, 9u);
}

TEST(MemoryBank, FullBankDoesNotEvict) {
  MemoryBank bank = make_bank(8);
  std::mt19937_64 rng(7);
  for (int64_t i = 0; i < 8; ++i) bank.append_entry(make_entry(i, bank, rng, random_unit(kDim, rng)));
  EXPECT_EQ(bank.size(), 8);
  const EvictionReport r = bank.dynamic_update();
  EXPECT_FALSE(r.triggered);
  EXPECT_EQ(bank.size(), 8);
}

TEST(MemoryBank, ZeroCapacityStoresNothing) {
  MemoryBank bank = make_bank(0);
  std::mt19937_64 rng(8);
  bank.append_entry(make_entry(0, bank, rng, random_unit(kDim, rng)));
  EXPECT_EQ(bank.size(), 0);
  EXPECT_TRUE(bank.retrieve_kv(random_unit(kDim, rng), 2, 10).empty());
}

TEST(MemoryBank, FifoKeepsNewest) {
  MemoryBank bank = make_bank(10, EvictionPolicy::kFifo);
  std::mt19937_64 rng(9);
  for (int64_t i = 0; i < 11; ++i) bank.append_entry(make_entry(i, bank, rng, random_unit(kDim, rng)));
  std::vector<int64_t> ids;
  for (const MemoryEntry& e : bank.entries()) ids.push_back(e.chunk_id);
  EXPECT_EQ(ids, (std::vector<int64_t>{6, 7, 8, 9, 10}));
}

TEST(MemoryBank, RandomizedPolicyMatchesModel) {
  MemoryBank bank = make_bank(100);
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<int> op(0, 2);
  std::uniform_int_distribution<int64_t> k_dist(1, 8), gap(1, 3);
  int64_t next_id = 0, events = 0;
  std::map<int64_t, std::pair<std::vector<float>, std::vector<float>>> stored;
  for (int step = 0; step < 4000; ++step) {
    if (op(rng) != 0 || bank.empty()) {
      std::vector<SlotState> before = snapshot(bank);
      before.push_back({next_id, bank.next_seq_no(), 0});
      MemoryEntry e = make_entry(next_id, bank, rng, random_unit(kDim, rng));
      stored[next_id] = {std::vector<float>(e.keys.data().begin(), e.keys.data().end()),
                         std::vector<float>(e.values.data().begin(), e.values.data().end())};
      const size_t log_before = bank.eviction_log().size();
      bank.append_entry(std::move(e));
      if (bank.eviction_log().size() != log_before) {
        ++events;
        const ExpectedEviction want = expected_eviction(before, 100);
        const EvictionReport& r = bank.eviction_log().back();
        ASSERT_EQ(r.evicted_middle, want.evicted_middle);
        ASSERT_EQ(r.dropped_oldest, want.dropped_oldest);
        ASSERT_EQ(r.kept_newest, want.kept_newest);
        ASSERT_EQ(bank.size(), 50);
      }
      next_id += gap(rng);
    } else {
      const RetrievedContext ctx = bank.retrieve_kv(random_unit(kDim, rng), k_dist(rng), next_id);
      const int64_t block = kTau * kHeads * kHeadDim;
      for (size_t h = 0; h < ctx.chunk_indices.size(); ++h) {
        const auto& [k, v] = stored.at(ctx.chunk_indices[h]);
        ASSERT_TRUE(same_bits(ctx.keys.data().subspan(h * block, block), k));
        ASSERT_TRUE(same_bits(ctx.values.data().subspan(h * block, block), v));
      }
    }
    ASSERT_LE(bank.size(), 100);
    ASSERT_EQ(bank.index().size(), bank.size());
  }
  EXPECT_GT(events, 10);
}

TEST(MemoryBank, ConcurrentReadersCountEveryHit) {
  MemoryBank bank = make_bank(100);
  std::mt19937_64 rng(11);
  for (int64_t i = 0; i < 40; ++i) bank.append_entry(make_entry(i, bank, rng, random_unit(kDim, rng)));
  std::vector<ChunkEmbedding> queries;
  for (int i = 0; i < 400; ++i) queries.push_back(random_unit(kDim, rng));
  std::vector<std::thread> pool;
  for (int t = 0; t < 4; ++t) {
    pool.emplace_back([&, t] {
      for (int i = t; i < 400; i += 4) bank.retrieve_kv(queries[static_cast<size_t>(i)], 3, 40);
    });
  }
  for (auto& th : pool) th.join();
  EXPECT_EQ(bank.counter_total(), 1200u);
}

TEST(MemoryBank, RestoreAndReset) {
  MemoryBank bank = make_bank(10);
  std::mt19937_64 rng(12);
  MemoryEntry e = make_entry(3, bank, rng, random_unit(kDim, rng));
  e.seq_no = 7;
  e.counter = 4;
  bank.restore_entry(std::move(e), 8);
  EXPECT_EQ(bank.entries()[0].counter, 4u);
  EXPECT_EQ(bank.next_seq_no(), 8u);
  bank.append_entry(make_entry(4, bank, rng, random_unit(kDim, rng)));
  EXPECT_EQ(bank.entries()[1].seq_no, 8u);
  bank.reset();
  EXPECT_EQ(bank.size(), 0);
  EXPECT_EQ(bank.index().size(), 0);
}
