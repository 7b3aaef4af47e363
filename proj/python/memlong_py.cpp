#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "memlong/errors.hpp"
#include "memlong/experiment.hpp"
#include "memlong/retriever.hpp"

namespace py = pybind11;
using namespace memlong;

namespace {

py::array_t<float> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

ModelConfig config_from_json(const std::string& text) {
  ModelConfig c = ModelConfig{};
  nlohmann::json j = c;
  j.update(nlohmann::json::parse(text));
  c = j.get<ModelConfig>();
  c.validate();
  return c;
}

BankConfig bank_of(int64_t capacity, const std::string& policy) {
  BankConfig b;
  b.capacity = capacity;
  b.policy = parse_policy(policy);
  b.validate();
  return b;
}

py::dict stats_dict(const SessionStats& s) {
  py::dict d;
  d["tokens_fed"] = s.tokens_fed;
  d["chunks_completed"] = s.chunks_completed;
  d["retrieval_events"] = s.retrieval_events;
  d["retrieved_chunks"] = s.retrieved_chunks;
  d["max_row_width"] = s.max_row_width;
  d["max_cache_rows"] = s.max_cache_rows;
  d["peak_live_kv_floats"] = s.peak_live_kv_floats;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the memlong C++ core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<TokenError>(m, "TokenError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<LeakageError>(m, "LeakageError", PyExc_RuntimeError);

  m.attr("VOCAB_SIZE") = vocab::kSize;
  m.def("encode", [](const std::string& text) { return encode_text(text).tokens; }, py::arg("text"));
  m.def("decode", [](const std::vector<int32_t>& ids) { return py::bytes(decode_tokens(ids)); }, py::arg("ids"));
  m.def("default_config_json", [] { return nlohmann::json(ModelConfig{}).dump(); });

  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& config_json) { return Model(config_from_json(config_json)); }),
           py::arg("config_json") = "{}")
      .def_static("load", [](const std::string& path) { return std::move(load_checkpoint(path).model); },
                  py::arg("path"))
      .def("save", [](const Model& self, const std::string& path) { save_checkpoint(path, self, nullptr, {}); },
           py::arg("path"))
      .def_property_readonly("config_json", [](const Model& self) { return nlohmann::json(self.config()).dump(); })
      .def("parameter_names",
           [](const Model& self) {
             std::vector<std::string> names;
             for (const NamedTensor& p : self.parameters()) names.push_back(p.name);
             return names;
           })
      .def("parameter",
           [](const Model& self, const std::string& name) {
             for (const NamedTensor& p : self.parameters())
               if (p.name == name) return to_numpy(p.tensor);
             throw py::key_error(name);
           },
           py::arg("name"))
      .def("set_gates", &Model::set_gates, py::arg("value"))
      .def("forward_baseline",
           [](const Model& self, const std::vector<int32_t>& tokens) { return to_numpy(self.forward_baseline(tokens)); },
           py::arg("tokens"))
      .def("forward_document",
           [](const Model& self, const std::vector<int32_t>& tokens, int64_t memory, const std::string& policy) {
             const DocumentForward fwd = self.forward_document(tokens, bank_of(memory, policy));
             py::dict d;
             d["logits"] = to_numpy(fwd.logits);
             std::vector<std::vector<int64_t>> retrieved;
             for (const RetrievedContext& r : fwd.retrieved) retrieved.push_back(r.chunk_indices);
             d["retrieved"] = retrieved;
             d["retrieval_events"] = fwd.retrieval_events;
             d["retrieved_chunks"] = fwd.retrieved_chunks;
             return d;
           },
           py::arg("tokens"), py::arg("memory") = 1024, py::arg("policy") = "counter");

  py::class_<InferenceSession>(m, "Session")
      .def(py::init([](const Model& model, int64_t memory, const std::string& policy) {
             return std::make_unique<InferenceSession>(model, bank_of(memory, policy));
           }),
           py::arg("model"), py::arg("memory") = 1024, py::arg("policy") = "counter", py::keep_alive<1, 2>())
      .def("feed", [](InferenceSession& s, const std::vector<int32_t>& t) { return to_numpy(s.feed(t)); },
           py::arg("tokens"))
      .def("generate", [](InferenceSession& s, int64_t n) { return s.generate(n).tokens; }, py::arg("max_new_tokens"))
      .def_property_readonly("position", &InferenceSession::position)
      .def_property_readonly("bank_size", [](const InferenceSession& s) { return s.bank().size(); })
      .def_property_readonly("bank_chunk_ids",
                             [](const InferenceSession& s) {
                               std::vector<int64_t> ids;
                               for (const MemoryEntry& e : s.bank().entries()) ids.push_back(e.chunk_id);
                               return ids;
                             })
      .def_property_readonly("stats", [](const InferenceSession& s) { return stats_dict(s.stats()); });

  m.def(
      "eval_perplexity",
      [](const Model& model, const std::vector<std::vector<int32_t>>& docs, const std::vector<int64_t>& lengths,
         int64_t memory, int64_t window) {
        std::vector<TokenSeq> seqs;
        for (const auto& d : docs) seqs.push_back(TokenSeq{d, {}});
        const EvalReport r = eval_perplexity(model, seqs, lengths, memory, window);
        return nlohmann::json(eval_record(r)).dump();
      },
      py::arg("model"), py::arg("docs"), py::arg("lengths"), py::arg("memory"), py::arg("window"));

  m.def(
      "top_k",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> query,
         py::array_t<float, py::array::c_style | py::array::forcecast> rows, const std::vector<int64_t>& ids, int64_t k,
         int64_t exclude_from) {
        if (rows.ndim() != 2 || query.ndim() != 1 || rows.shape(1) != query.shape(0) ||
            static_cast<size_t>(rows.shape(0)) != ids.size()) {
          throw ShapeError("top_k: expected query [d], rows [n, d] and n ids");
        }
        const int64_t d = query.shape(0);
        EmbeddingIndex index(d);
        for (size_t i = 0; i < ids.size(); ++i) {
          ChunkEmbedding e;
          e.vector.assign(rows.data() + i * d, rows.data() + (i + 1) * d);
          index.add(ids[i], e);
        }
        ChunkEmbedding q;
        q.vector.assign(query.data(), query.data() + d);
        std::vector<std::pair<int64_t, float>> out;
        for (const SearchHit& h : top_k_search(q, index, k, exclude_from)) out.emplace_back(h.chunk_id, h.score);
        return out;
      },
      py::arg("query"), py::arg("rows"), py::arg("ids"), py::arg("k"), py::arg("exclude_from"));
}
