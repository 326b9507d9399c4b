#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vidit::model {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 64;
  int d_mlp = 256;
  int vocab = 514;
  int context_len = 1040;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  double init_std = 0.02;
  // Label conditioning: one learned vector per class, injected at a single
  // slot right after bos.
  bool conditioning = false;
  int n_classes = 0;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;  // throws InvalidArgument

  std::string to_json() const;
  // Rejects unknown keys (ConfigError).
  static ModelConfig from_json(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

// Closed-form parameter count for a configuration.
int64_t parameter_count(const ModelConfig& cfg);

template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  size_t numel() const { return data.size(); }
  bool operator==(const Tensor&) const = default;
};

// Parameters keyed by name; std::map keeps them in sorted-name order.
template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

template <typename T>
ParamMap<T> zeros_like(const ParamMap<T>& params) {
  ParamMap<T> out;
  for (const auto& [name, t] : params) out[name] = Tensor<T>{t.shape, std::vector<T>(t.numel(), T(0))};
  return out;
}

template <typename To, typename From>
ParamMap<To> cast_params(const ParamMap<From>& params) {
  ParamMap<To> out;
  for (const auto& [name, t] : params) {
    out[name] = Tensor<To>{t.shape, std::vector<To>(t.data.begin(), t.data.end())};
  }
  return out;
}

// Conditioning for models built with `conditioning = true`. An absent
// condition injects the zero vector.
struct Condition {
  bool present = false;
  int label = 0;

  static Condition none() { return {}; }
  static Condition of(int label) { return {true, label}; }
};

class TransformerModel {
 public:
  TransformerModel() = default;
  TransformerModel(ModelConfig cfg, ParamMap<float> params);

  // Scaled-normal init: std = init_std everywhere, residual output
  // projections (wo, w_down) scaled by 1/sqrt(2 * n_layers), norm gains 1.
  static TransformerModel init(const ModelConfig& cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const ParamMap<float>& params() const { return params_; }
  ParamMap<float>& params() { return params_; }
  int64_t parameter_count() const;

  // Throws InvalidArgument when names/shapes disagree with the config or a
  // value is non-finite.
  void check() const;

 private:
  ModelConfig cfg_;
  ParamMap<float> params_;
};

// Parameter names that are exempt from weight decay.
bool is_norm_gain(const std::string& name);
bool decays(const std::string& name);

struct CaptureFlags {
  bool hidden = false;
  bool attention = false;
};

// logits/last_hidden have one row per input id: row i is the prediction for
// the id that follows ids[i]. For conditioned models the internal bos row
// (which only predicts the slot) is dropped and the slot row stands in for it.
// `attention` is over internal rows (ids plus the slot, if any):
// [layer][head][row][col], row-major, rows() x rows() per map.
struct ForwardTrace {
  int n = 0;
  int vocab = 0;
  int d_model = 0;
  int internal_rows = 0;
  int n_layers = 0;
  int n_heads = 0;
  std::vector<float> logits;
  std::vector<float> last_hidden;
  std::vector<float> attention;

  std::span<const float> logits_row(int i) const {
    return {logits.data() + static_cast<size_t>(i) * vocab, static_cast<size_t>(vocab)};
  }
  std::span<const float> hidden_row(int i) const {
    return {last_hidden.data() + static_cast<size_t>(i) * d_model, static_cast<size_t>(d_model)};
  }
  float attn(int layer, int head, int row, int col) const {
    const size_t r = static_cast<size_t>(internal_rows);
    return attention[((static_cast<size_t>(layer) * n_heads + head) * r + row) * r + col];
  }
};

ForwardTrace forward(const TransformerModel& model, std::span<const int> ids,
                     CaptureFlags capture = {}, std::optional<Condition> cond = std::nullopt);

// Mean next-token cross-entropy over positions 1..N-1 (64-bit accumulation).
double loss(const TransformerModel& model, std::span<const int> ids,
            std::optional<Condition> cond = std::nullopt);

// Same loss; adds d(loss)/d(param) into `grads` (which must be shaped like the
// parameters, e.g. from zeros_like). Scaled by `weight` before accumulation.
double loss_and_grad(const TransformerModel& model, std::span<const int> ids, ParamMap<float>& grads,
                     std::optional<Condition> cond = std::nullopt, double weight = 1.0);

// 64-bit variants over an explicit parameter map, used by the gradient check.
double loss_f64(const ModelConfig& cfg, const ParamMap<double>& params, std::span<const int> ids,
                std::optional<Condition> cond = std::nullopt);
double loss_and_grad_f64(const ModelConfig& cfg, const ParamMap<double>& params,
                         std::span<const int> ids, ParamMap<double>& grads,
                         std::optional<Condition> cond = std::nullopt);

std::vector<float> rmsnorm(std::span<const float> x, std::span<const float> gain, double eps);
// Rotates consecutive pairs (2i, 2i+1) by position * base^(-2i/len).
std::vector<float> rope(std::span<const float> v, int position, double base = 10000.0);

struct GradProbe {
  std::string name;
  size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::vector<GradProbe> probes;
};

// Central differences (h = 1e-3) against the analytic gradient, both in 64-bit,
// at n_probes parameter scalars drawn uniformly from all parameters.
GradCheckResult grad_check(const TransformerModel& model, std::span<const int> ids, int n_probes,
                           uint64_t seed, std::optional<Condition> cond = std::nullopt);
double grad_rel_error(double analytic, double numeric);

// Incremental decoding with a key/value cache. Produces the same values as
// `forward` up to floating-point reassociation.
class DecodeSession {
 public:
  struct Step {
    std::vector<float> logits;
    std::vector<float> hidden;
    // Last-layer attention of this row, averaged over heads, over all internal
    // rows so far (including the row itself).
    std::vector<float> attention;
  };

  explicit DecodeSession(const TransformerModel& model, bool capture_attention = false);
  ~DecodeSession();
  DecodeSession(DecodeSession&&) noexcept;
  DecodeSession& operator=(DecodeSession&&) noexcept;

  // Feeds the prompt; returns the step for its last row.
  Step prefill(std::span<const int> ids, std::optional<Condition> cond = std::nullopt);
  Step append(int id);
  // Internal rows consumed so far (ids plus the conditioning slot).
  int length() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Checkpoint: "VITC", u16 version, u32 + JSON blob, u32 tensor count, then
// per tensor (sorted by name): u32 name length, name, u32 rank, u32 dims,
// f32 data. `meta` is stored verbatim inside the JSON blob.
struct Checkpoint {
  TransformerModel model;
  std::string meta_json = "{}";
};

std::vector<unsigned char> serialize_checkpoint(const TransformerModel& model,
                                                const std::string& meta_json = "{}");
Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes);
void save_checkpoint(const std::filesystem::path& path, const TransformerModel& model,
                     const std::string& meta_json = "{}");
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace vidit::model
