#pragma once

#include <array>

#include "mutr/blocks.hpp"

namespace mutr::nn {

enum class Stage4Kind { kAdaptiveLgl, kPlainLgl, kDenseAttention };

struct ModelConfig {
  std::array<int, 5> channels{16, 32, 64, 64, 128};
  std::array<int, 5> blocks{1, 1, 3, 3, 3};
  std::array<int, 3> kernels{3, 3, 7};
  int lgl_kernel = 0;           // 0: derive from mean_diameter
  double mean_diameter = 144.0;
  int downsample_layers = 3;    // 2x reductions before the LGL stage
  int sparse_stride = 2;
  int heads = 4;
  int skips = 3;                // 0..3, attached from the full-res side
  int num_classes = 1;
  int input_size = 256;
  Stage4Kind stage4 = Stage4Kind::kAdaptiveLgl;

  // Throws ConfigError naming the offending field.
  void validate() const;
  // The LocalAgg kernel after the adaptive rule and the feature-extent clamp.
  int resolved_lgl_kernel() const;
};

ModelConfig mobileutr_config();
ModelConfig mobileutr_l_config();
ModelConfig tiny_config();  // desk-scale training config at 64x64

// Named configs and config files (flat JSON object with the fields above).
ModelConfig config_by_name_or_path(const std::string& name_or_path);
ModelConfig parse_config_json(const std::string& text);
std::string config_to_json(const ModelConfig& cfg);
void apply_override(ModelConfig& cfg, const std::string& key,
                    const std::string& value);

struct StageTrace {
  std::string name;
  std::vector<std::int64_t> shape;
};

class Model {
 public:
  static Model build(const ModelConfig& cfg, DType dt, std::uint64_t seed);

  // image: [N,3,H,W], H and W divisible by 16 -> logits [N,num_classes,H,W].
  Var forward(const Var& image, bool train);
  Tensor forward_eval(const Tensor& image);

  std::vector<NamedVar> parameters() const;
  std::vector<NamedBuffer> buffers();
  std::int64_t parameter_count() const;

  const ModelConfig& config() const { return cfg_; }
  DType dtype() const { return dtype_; }
  // Stage output shapes recorded by the last forward call.
  const std::vector<StageTrace>& last_trace() const { return trace_; }

 private:
  ModelConfig cfg_;
  DType dtype_ = DType::kF32;

  Conv2d stem_conv_;
  BatchNorm2d stem_bn_;
  std::vector<ConvUtrBlock> stage1_, stage2_, stage3_;
  PoolExpand pe1_, pe2_, pe3_, pe4_;
  std::vector<LglBlock> stage4_lgl_;
  std::vector<TransformerBlock> stage4_dense_;
  std::vector<TransformerBlock> stage5_;
  std::vector<DecoderStage> decoder_;
  Conv2d head_;

  std::vector<StageTrace> trace_;
};

// Checkpoint directory: manifest.txt + one portable tensor file per entry
// (parameters in build order, then buffers, then optional optimizer state).
void save_checkpoint(const std::string& dir, Model& model,
                     const std::vector<std::pair<std::string, Tensor>>& extra = {});
// Loads parameters and buffers by name; returns the extra entries.
std::vector<std::pair<std::string, Tensor>> load_checkpoint(
    const std::string& dir, Model& model);

}  // namespace mutr::nn
