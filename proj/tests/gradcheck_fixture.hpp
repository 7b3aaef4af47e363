#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "memlong/model.hpp"
#include "memlong/ops.hpp"
#include "reference_model.hpp"

namespace memlong::testing {

inline constexpr double kGradEps = 1e-3;
inline constexpr double kGradTol = 1e-3;

inline std::vector<int32_t> random_tokens(int64_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int32_t> tok(0, 255);
  std::vector<int32_t> t(static_cast<size_t>(n));
  for (auto& x : t) x = tok(rng);
  return t;
}

// Redraws weights at unit-variance activations so gradients sit well above
// float round-off and rms_norm is far from its singular point.
inline void condition_weights(Model& m, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> unit(0.0f, 1.0f);
  for (NamedTensor& nt : m.parameters()) {
    if (nt.name.ends_with(".gate")) continue;
    const auto shape = nt.tensor.shape();
    const float fan_in = static_cast<float>(shape[0]);
    for (float& w : nt.tensor.data()) {
      if (nt.name.ends_with("norm")) w = 1.0f + 0.1f * unit(rng);
      else if (nt.name == "tok_embed") w = unit(rng);
      else w = unit(rng) / std::sqrt(fan_in);
    }
  }
}

struct CheckResult {
  int64_t tensors = 0;
  int64_t elements = 0;
  int64_t failures = 0;
  double worst = 0.0;
  std::string worst_name;
};

// Every element of every trainable tensor is perturbed. Each tensor passes
// when ||a - n|| / max(||a||, ||n||, 1e-8) < 1e-3 over its elements.
inline CheckResult compare_all(const Model& model, ReferenceModel& ref, const std::vector<int32_t>& in,
                        const std::vector<int32_t>& tg, const std::vector<std::vector<int64_t>>& retrieved) {
  CheckResult r;
  for (const NamedTensor& nt : model.trainable_parameters()) {
    auto& w = ref.params().at(nt.name);
    const auto g = nt.tensor.grad();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      w[i] = saved + kGradEps;
      const double up = ref.loss(in, tg, retrieved);
      w[i] = saved - kGradEps;
      const double down = ref.loss(in, tg, retrieved);
      w[i] = saved;
      const double fd = (up - down) / (2.0 * kGradEps);
      const double a = g[i];
      diff2 += (a - fd) * (a - fd);
      a2 += a * a;
      n2 += fd * fd;
    }
    const double rel = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
    ++r.tensors;
    r.elements += static_cast<int64_t>(w.size());
    if (rel >= kGradTol) ++r.failures;
    if (rel > r.worst) {
      r.worst = rel;
      r.worst_name = nt.name;
    }
  }
  return r;
}

struct GradcheckRun {
  CheckResult result;
  double tape_loss = 0.0;
  double reference_loss = 0.0;
  int64_t retrieved_chunks = 0;
  bool lower_grad_free = true;  // frozen tensors received no gradient
  bool gates_nonzero = true;    // every gate element received a nonzero gradient
};

// Phase-A trainable set on a baseline forward of 24 tokens.
inline GradcheckRun gradcheck_pretrain(uint64_t seed) {
  Model model(tiny_config());
  condition_weights(model, seed);
  model.set_trainable(true, true, false);
  const auto toks = random_tokens(25, seed + 6);
  const std::vector<int32_t> in(toks.begin(), toks.end() - 1), tg(toks.begin() + 1, toks.end());
  Tape tape;
  Tensor loss = ops::cross_entropy(model.forward_baseline(in, &tape), tg, &tape);
  tape.backward(loss);
  ReferenceModel ref(model);
  GradcheckRun run;
  run.tape_loss = loss.item();
  run.reference_loss = ref.loss(in, tg);
  run.result = compare_all(model, ref, in, tg, {});
  return run;
}

// Phase-B trainable set (upper layers and nonzero gates) on a 40-token
// document forward with retrieval.
inline GradcheckRun gradcheck_finetune(uint64_t seed) {
  Model model(tiny_config());
  condition_weights(model, seed);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<float> gate(0.0f, 0.7f);
  for (int64_t l : model.config().retrieval_layers)
    for (float& g : model.layer(l).gate.data()) g = gate(rng);
  model.set_trainable(false, true, true);

  const auto toks = random_tokens(41, seed + 6);
  const std::vector<int32_t> in(toks.begin(), toks.end() - 1), tg(toks.begin() + 1, toks.end());
  BankConfig bank;
  bank.capacity = 16;
  Tape tape;
  DocumentForward fwd = model.forward_document(in, bank, &tape);
  Tensor loss = ops::cross_entropy(fwd.logits, tg, &tape);
  tape.backward(loss);

  std::vector<std::vector<int64_t>> retrieved;
  for (const auto& ctx : fwd.retrieved) retrieved.push_back(ctx.chunk_indices);
  ReferenceModel ref(model);
  GradcheckRun run;
  run.tape_loss = loss.item();
  run.reference_loss = ref.loss(in, tg, retrieved);
  run.retrieved_chunks = fwd.retrieved_chunks;
  for (const NamedTensor& nt : model.parameters()) {
    const bool lower = nt.name == "tok_embed" || nt.name.starts_with("layers.1.") || nt.name.starts_with("layers.2.");
    if (lower && nt.tensor.has_grad()) run.lower_grad_free = false;
    if (nt.name.ends_with(".gate")) {
      if (!nt.tensor.has_grad()) {
        run.gates_nonzero = false;
        continue;
      }
      for (float g : nt.tensor.grad())
        if (g == 0.0f) run.gates_nonzero = false;
    }
  }
  run.result = compare_all(model, ref, in, tg, retrieved);
  return run;
}

}  // namespace memlong::testing
