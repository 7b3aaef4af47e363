#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "memlong/corpus.hpp"
#include "memlong/errors.hpp"

using namespace memlong;
namespace fs = std::filesystem;

namespace {

TokenSeq seq_of_length(int64_t n) {
  TokenSeq s;
  for (int64_t i = 0; i < n; ++i) s.tokens.push_back(static_cast<int32_t>(i % 256));
  return s;
}

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("memlong_corpus_" + std::to_string(std::random_device{}()))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  void write(const std::string& name, const std::string& body) const { std::ofstream(path_ / name, std::ios::binary) << body; }

 private:
  fs::path path_;
};

}  // namespace

TEST(Tokenizer, ByteValues) {
  EXPECT_TRUE(encode_text("").empty());
  EXPECT_EQ(encode_text("ab").tokens, (std::vector<int32_t>{97, 98}));
  const std::vector<int32_t> ab{97, 98};
  EXPECT_EQ(decode_tokens(ab), "ab");
  EXPECT_EQ(decode_tokens(std::vector<int32_t>{}), "");
  EXPECT_EQ(encode_text("\xff\x00", "d").tokens.size(), 1u);
  EXPECT_EQ(encode_text(std::string("\xff\x00", 2)).tokens, (std::vector<int32_t>{255, 0}));
  EXPECT_EQ(encode_text("x", "doc7").source_doc, "doc7");
}

TEST(Tokenizer, RoundTripsRandomBytes) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> byte(0, 255);
  for (int trial = 0; trial < 1000; ++trial) {
    std::string s(1024, '\0');
    for (char& c : s) c = static_cast<char>(byte(rng));
    const TokenSeq t = encode_text(s);
    ASSERT_EQ(t.size(), 1024);
    for (int32_t id : t.tokens) ASSERT_LT(id, vocab::kSize);
    ASSERT_EQ(decode_tokens(t), s);
  }
}

TEST(Tokenizer, SpecialTokensDoNotDecode) {
  for (int32_t special : {vocab::kPad, vocab::kBos, vocab::kEos, vocab::kUnk}) {
    const std::vector<int32_t> ids{97, special};
    EXPECT_THROW(decode_tokens(ids), TokenError);
  }
  EXPECT_THROW(decode_tokens(std::vector<int32_t>{-1}), TokenError);
}

TEST(Chunking, ExactDivision) {
  const ChunkedSeq c = chunk_sequence(seq_of_length(8), 4);
  EXPECT_EQ(c.chunks.size(), 2u);
  EXPECT_TRUE(c.remainder.empty());
}

TEST(Chunking, RemainderIsKeptSeparately) {
  const ChunkedSeq c = chunk_sequence(seq_of_length(10), 4);
  ASSERT_EQ(c.chunks.size(), 2u);
  EXPECT_EQ(c.chunks[0].tokens, (std::vector<int32_t>{0, 1, 2, 3}));
  EXPECT_EQ(c.chunks[1].tokens, (std::vector<int32_t>{4, 5, 6, 7}));
  EXPECT_EQ(c.chunks[1].index, 1);
  EXPECT_EQ(c.remainder.tokens, (std::vector<int32_t>{8, 9}));
  const ChunkedSeq small = chunk_sequence(seq_of_length(3), 4);
  EXPECT_TRUE(small.chunks.empty());
  EXPECT_EQ(small.remainder.size(), 3);
  EXPECT_THROW(chunk_sequence(seq_of_length(3), 0), ConfigError);
}

TEST(Chunking, ConcatenationReproducesInput) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const int64_t n = static_cast<int64_t>(rng() % 300), tau = 1 + static_cast<int64_t>(rng() % 40);
    std::string text(static_cast<size_t>(n), '\0');
    for (char& ch : text) ch = static_cast<char>(rng() % 256);
    const TokenSeq seq = encode_text(text);
    const ChunkedSeq c = chunk_sequence(seq, tau);
    ASSERT_EQ(static_cast<int64_t>(c.chunks.size()), n / tau);
    std::vector<int32_t> joined;
    std::string joined_text;
    for (size_t i = 0; i < c.chunks.size(); ++i) {
      ASSERT_EQ(static_cast<int64_t>(c.chunks[i].tokens.size()), tau);
      ASSERT_EQ(c.chunks[i].index, static_cast<int64_t>(i));
      joined.insert(joined.end(), c.chunks[i].tokens.begin(), c.chunks[i].tokens.end());
      joined_text += c.chunks[i].text;
    }
    joined.insert(joined.end(), c.remainder.tokens.begin(), c.remainder.tokens.end());
    ASSERT_EQ(joined, seq.tokens);
    ASSERT_EQ(joined_text, text.substr(0, static_cast<size_t>(n / tau * tau)));
  }
}

TEST(Corpus, LoadsFilesInSortedOrder) {
  TempDir dir;
  dir.write("b.txt", "second");
  dir.write("a.txt", "first");
  const auto docs = load_corpus(dir.path().string(), CorpusFormat::kFilePerDocument);
  ASSERT_EQ(docs.size(), 2u);
  EXPECT_EQ(decode_tokens(docs[0]), "first");
  EXPECT_NE(docs[0].source_doc.find("a.txt"), std::string::npos);
  EXPECT_EQ(decode_tokens(docs[1]), "second");
}

TEST(Corpus, LinePerDocument) {
  TempDir dir;
  dir.write("lines.txt", "one\n\ntwo two\nthree\n");
  const auto docs = load_corpus((dir.path() / "lines.txt").string(), CorpusFormat::kLinePerDocument);
  ASSERT_EQ(docs.size(), 3u);
  EXPECT_EQ(decode_tokens(docs[1]), "two two");
  EXPECT_EQ(parse_corpus_format("lines"), CorpusFormat::kLinePerDocument);
  EXPECT_EQ(parse_corpus_format("files"), CorpusFormat::kFilePerDocument);
  EXPECT_THROW(parse_corpus_format("bogus"), ConfigError);
}

TEST(Corpus, MissingOrEmptyInputIsAnError) {
  TempDir dir;
  EXPECT_THROW(load_corpus((dir.path() / "nope").string(), CorpusFormat::kFilePerDocument), ConfigError);
  EXPECT_THROW(load_corpus(dir.path().string(), CorpusFormat::kFilePerDocument), ConfigError);
}

TEST(Corpus, SplitAndCut) {
  std::vector<TokenSeq> docs{seq_of_length(100), seq_of_length(50)};
  const CorpusSplit split = split_corpus(docs, 0.1);
  ASSERT_EQ(split.train.size(), 2u);
  EXPECT_EQ(split.train[0].size() + split.heldout[0].size(), 100);
  EXPECT_EQ(split.heldout[0].size(), 10);
  EXPECT_EQ(split.heldout[0].tokens.front(), 90);
  EXPECT_EQ(total_tokens(split.train) + total_tokens(split.heldout), 150);
  EXPECT_THROW(split_corpus(docs, 1.0), ConfigError);

  const auto pieces = cut_documents(docs, 40);
  ASSERT_EQ(pieces.size(), 3u);
  EXPECT_EQ(pieces[1].tokens.front(), 40);
  EXPECT_EQ(pieces[2].size(), 40);
  EXPECT_THROW(cut_documents(docs, 0), ConfigError);
}
