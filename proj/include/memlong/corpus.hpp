#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace memlong {

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by four specials.
namespace vocab {
inline constexpr int32_t kPad = 256;
inline constexpr int32_t kBos = 257;
inline constexpr int32_t kEos = 258;
inline constexpr int32_t kUnk = 259;
inline constexpr int32_t kSize = 260;
}  // namespace vocab

struct TokenSeq {
  std::vector<int32_t> tokens;
  std::string source_doc;

  int64_t size() const { return static_cast<int64_t>(tokens.size()); }
  bool empty() const { return tokens.empty(); }
};

struct Chunk {
  int64_t index = 0;  // ordinal within the document
  std::vector<int32_t> tokens;
  std::string text;
};

struct ChunkedSeq {
  std::vector<Chunk> chunks;
  TokenSeq remainder;
};

TokenSeq encode_text(std::string_view text, std::string source_doc = {});
// Throws TokenError if any id is not a byte id.
std::string decode_tokens(std::span<const int32_t> tokens);
inline std::string decode_tokens(const TokenSeq& seq) { return decode_tokens(std::span<const int32_t>(seq.tokens)); }

// Splits into floor(n/tau) full chunks plus the trailing n mod tau tokens.
// Throws ConfigError when tau == 0.
ChunkedSeq chunk_sequence(const TokenSeq& seq, int64_t tau);

enum class CorpusFormat { kFilePerDocument, kLinePerDocument };

CorpusFormat parse_corpus_format(const std::string& s);

// Loads documents from a file or a directory. Directories are read in sorted
// path order, one document per regular file (kFilePerDocument) or per
// non-empty line (kLinePerDocument).
std::vector<TokenSeq> load_corpus(const std::string& path, CorpusFormat format);

// Splits every document into a leading training part and a trailing held-out
// part of `holdout_frac` of its length.
struct CorpusSplit {
  std::vector<TokenSeq> train;
  std::vector<TokenSeq> heldout;
};
CorpusSplit split_corpus(const std::vector<TokenSeq>& docs, double holdout_frac);

// Cuts each document into consecutive non-overlapping pieces of exactly
// `length` tokens; shorter tails are dropped.
std::vector<TokenSeq> cut_documents(const std::vector<TokenSeq>& docs, int64_t length);

int64_t total_tokens(const std::vector<TokenSeq>& docs);

}  // namespace memlong
