#pragma once

#include "mutr/model.hpp"

namespace mutr::nn {

enum class LayerKind { kConv, kLinear, kAttnScores, kNorm };

struct LayerRow {
  std::string name;
  LayerKind kind;
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

// Per-layer parameter and multiply-accumulate counts for a config at a given
// input size. MACs cover convolutions, token projections and the attention
// score/value matmuls; norms, activations, pooling and interpolation are not
// counted. The text table reports MACs as "GFLOPs" (the usual reporting
// convention for such tables); strict_flops doubles them.
struct ComplexityReport {
  std::string label;
  int input_size = 0;
  std::vector<LayerRow> rows;

  std::int64_t total_params() const;
  std::int64_t total_macs() const;
  std::string to_text(bool per_layer, bool strict_flops) const;
};

inline std::int64_t conv_param_count(std::int64_t cin, std::int64_t cout, int k,
                                     int groups, bool bias) {
  return cout * (cin / groups) * k * k + (bias ? cout : 0);
}
inline std::int64_t conv_mac_count(std::int64_t cin, std::int64_t cout, int k,
                                   int groups, std::int64_t out_hw) {
  return cout * (cin / groups) * k * k * out_hw;
}

// input_size 0 uses the config's own size. The count is independent of any
// built model; tests reconcile it against actual parameter tensors.
ComplexityReport complexity_report(const ModelConfig& cfg, int input_size = 0,
                                   const std::string& label = "");

ComplexityReport count_params(const ModelConfig& cfg);
ComplexityReport count_flops(const ModelConfig& cfg, int input_size);

// The {skips 0..3} x {lgl, adaptive_lgl, dense} grid.
std::vector<ComplexityReport> ablation_suite(const ModelConfig& base);

}  // namespace mutr::nn
