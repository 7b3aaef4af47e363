#include "memlong/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "memlong/errors.hpp"

namespace memlong {

TokenSeq encode_text(std::string_view text, std::string source_doc) {
  TokenSeq seq;
  seq.source_doc = std::move(source_doc);
  seq.tokens.reserve(text.size());
  for (char c : text) seq.tokens.push_back(static_cast<int32_t>(static_cast<unsigned char>(c)));
  return seq;
}

std::string decode_tokens(std::span<const int32_t> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (size_t i = 0; i < tokens.size(); ++i) {
    const int32_t t = tokens[i];
    if (t < 0 || t > 255) {
      throw TokenError("token " + std::to_string(t) + " at offset " + std::to_string(i) + " is not a byte token");
    }
    out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

ChunkedSeq chunk_sequence(const TokenSeq& seq, int64_t tau) {
  if (tau <= 0) throw ConfigError("chunk size must be >= 1");
  ChunkedSeq out;
  const int64_t n = seq.size();
  const int64_t full = n / tau;
  out.chunks.reserve(static_cast<size_t>(full));
  for (int64_t i = 0; i < full; ++i) {
    Chunk c;
    c.index = i;
    c.tokens.assign(seq.tokens.begin() + i * tau, seq.tokens.begin() + (i + 1) * tau);
    // Chunks of decoded text may contain special ids; keep text to bytes only.
    c.text.reserve(static_cast<size_t>(tau));
    for (int32_t t : c.tokens)
      if (t >= 0 && t <= 255) c.text.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    out.chunks.push_back(std::move(c));
  }
  out.remainder.source_doc = seq.source_doc;
  out.remainder.tokens.assign(seq.tokens.begin() + full * tau, seq.tokens.end());
  return out;
}

CorpusFormat parse_corpus_format(const std::string& s) {
  if (s == "files") return CorpusFormat::kFilePerDocument;
  if (s == "lines") return CorpusFormat::kLinePerDocument;
  throw ConfigError("corpus format must be 'files' or 'lines', got '" + s + "'");
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read corpus file '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void add_documents(const std::filesystem::path& path, CorpusFormat format, std::vector<TokenSeq>& out) {
  const std::string text = read_file(path);
  if (format == CorpusFormat::kFilePerDocument) {
    if (!text.empty()) out.push_back(encode_text(text, path.filename().string()));
    return;
  }
  std::istringstream in(text);
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out.push_back(encode_text(line, path.filename().string() + ":" + std::to_string(line_no)));
  }
}

}  // namespace

std::vector<TokenSeq> load_corpus(const std::string& path, CorpusFormat format) {
  namespace fs = std::filesystem;
  std::vector<TokenSeq> docs;
  const fs::path root(path);
  if (fs::is_directory(root)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(root))
      if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) add_documents(f, format, docs);
  } else if (fs::is_regular_file(root)) {
    add_documents(root, format, docs);
  } else {
    throw ConfigError("corpus path '" + path + "' does not exist");
  }
  if (docs.empty()) throw ConfigError("corpus at '" + path + "' contains no documents");
  return docs;
}

CorpusSplit split_corpus(const std::vector<TokenSeq>& docs, double holdout_frac) {
  if (holdout_frac < 0.0 || holdout_frac >= 1.0) throw ConfigError("holdout fraction must lie in [0, 1)");
  CorpusSplit split;
  for (const auto& d : docs) {
    const int64_t held = static_cast<int64_t>(std::floor(holdout_frac * static_cast<double>(d.size())));
    const int64_t keep = d.size() - held;
    TokenSeq train{{d.tokens.begin(), d.tokens.begin() + keep}, d.source_doc};
    if (!train.empty()) split.train.push_back(std::move(train));
    if (held > 0) split.heldout.push_back({{d.tokens.begin() + keep, d.tokens.end()}, d.source_doc + "#heldout"});
  }
  return split;
}

std::vector<TokenSeq> cut_documents(const std::vector<TokenSeq>& docs, int64_t length) {
  if (length <= 0) throw ConfigError("document length must be >= 1");
  std::vector<TokenSeq> out;
  for (const auto& d : docs) {
    for (int64_t start = 0; start + length <= d.size(); start += length) {
      out.push_back({{d.tokens.begin() + start, d.tokens.begin() + start + length},
                     d.source_doc + "@" + std::to_string(start)});
    }
  }
  return out;
}

int64_t total_tokens(const std::vector<TokenSeq>& docs) {
  int64_t n = 0;
  for (const auto& d : docs) n += d.size();
  return n;
}

}  // namespace memlong
