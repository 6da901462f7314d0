#include "mutr/model.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mutr/tensor_io.hpp"

namespace mutr::nn {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mutr::ops;

// ---------------------------------------------------------------------------
// ModelConfig
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  for (int i = 0; i < 5; ++i) {
    if (channels[static_cast<size_t>(i)] <= 0) {
      throw ConfigError("config.channels[" + std::to_string(i + 1) + "] must be positive");
    }
    if (blocks[static_cast<size_t>(i)] <= 0) {
      throw ConfigError("config.blocks[" + std::to_string(i + 1) + "] must be positive");
    }
  }
  for (int i = 0; i < 3; ++i) {
    const int k = kernels[static_cast<size_t>(i)];
    if (k < 1 || k % 2 == 0) {
      throw ConfigError("config.kernels[" + std::to_string(i + 1) + "] must be odd");
    }
  }
  if (input_size <= 0 || input_size % 16 != 0) {
    throw ConfigError("config.input_size must be a positive multiple of 16");
  }
  if (skips < 0 || skips > 3) throw ConfigError("config.skips must be in [0,3]");
  if (num_classes < 1) throw ConfigError("config.num_classes must be >= 1");
  if (heads < 1 || channels[3] % heads != 0 || channels[4] % heads != 0) {
    throw ConfigError("config.heads must divide channels[4] and channels[5]");
  }
  if (sparse_stride < 1) throw ConfigError("config.sparse_stride must be >= 1");
  const int lgl_extent = input_size / 8;
  if (lgl_extent % sparse_stride != 0) {
    throw ConfigError("config.sparse_stride must divide the input_size/8 grid");
  }
  if (lgl_kernel != 0 && (lgl_kernel < 3 || lgl_kernel % 2 == 0)) {
    throw ConfigError("config.lgl_kernel must be an odd integer >= 3");
  }
  if (lgl_kernel == 0 && mean_diameter <= 0.0) {
    throw ConfigError("config.mean_diameter must be positive");
  }
  if (downsample_layers < 1) {
    throw ConfigError("config.downsample_layers must be >= 1");
  }
  if (lgl_extent < 3) {
    throw ConfigError("config.input_size too small for the LGL stage");
  }
}

int ModelConfig::resolved_lgl_kernel() const {
  int k = lgl_kernel > 0 ? lgl_kernel
                         : adaptive_kernel(mean_diameter, downsample_layers);
  const int extent = input_size / 8;
  if (k > extent) k = extent % 2 == 0 ? extent - 1 : extent;
  return k < 3 ? 3 : k;
}

ModelConfig mobileutr_config() { return ModelConfig{}; }

ModelConfig mobileutr_l_config() {
  ModelConfig cfg;
  cfg.channels = {32, 64, 128, 128, 256};
  cfg.blocks = {1, 1, 3, 3, 4};
  return cfg;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.channels = {8, 16, 32, 32, 64};
  cfg.blocks = {1, 1, 1, 1, 1};
  cfg.kernels = {3, 3, 7};
  cfg.mean_diameter = 36.0;
  cfg.input_size = 64;
  return cfg;
}

namespace {

Stage4Kind stage4_from_string(const std::string& s) {
  if (s == "adaptive_lgl") return Stage4Kind::kAdaptiveLgl;
  if (s == "lgl") return Stage4Kind::kPlainLgl;
  if (s == "dense") return Stage4Kind::kDenseAttention;
  throw ConfigError("config.stage4 must be adaptive_lgl, lgl or dense, got " + s);
}

std::string stage4_to_string(Stage4Kind k) {
  switch (k) {
    case Stage4Kind::kAdaptiveLgl: return "adaptive_lgl";
    case Stage4Kind::kPlainLgl: return "lgl";
    case Stage4Kind::kDenseAttention: return "dense";
  }
  return "adaptive_lgl";
}

}  // namespace

ModelConfig parse_config_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config is not valid JSON: ") + e.what(),
                     static_cast<std::int64_t>(e.byte));
  }
  ModelConfig cfg;
  auto read_array = [&](const char* key, auto& arr) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_array() || v.size() != arr.size()) {
      throw ConfigError(std::string("config.") + key + " must be an array of " +
                        std::to_string(arr.size()));
    }
    for (std::size_t i = 0; i < arr.size(); ++i) arr[i] = v[i].get<int>();
  };
  read_array("channels", cfg.channels);
  read_array("blocks", cfg.blocks);
  read_array("kernels", cfg.kernels);
  if (j.contains("lgl_kernel")) cfg.lgl_kernel = j.at("lgl_kernel").get<int>();
  if (j.contains("mean_diameter")) cfg.mean_diameter = j.at("mean_diameter").get<double>();
  if (j.contains("downsample_layers")) cfg.downsample_layers = j.at("downsample_layers").get<int>();
  if (j.contains("sparse_stride")) cfg.sparse_stride = j.at("sparse_stride").get<int>();
  if (j.contains("heads")) cfg.heads = j.at("heads").get<int>();
  if (j.contains("skips")) cfg.skips = j.at("skips").get<int>();
  if (j.contains("num_classes")) cfg.num_classes = j.at("num_classes").get<int>();
  if (j.contains("input_size")) cfg.input_size = j.at("input_size").get<int>();
  if (j.contains("stage4")) cfg.stage4 = stage4_from_string(j.at("stage4").get<std::string>());
  cfg.validate();
  return cfg;
}

std::string config_to_json(const ModelConfig& cfg) {
  json j;
  j["channels"] = cfg.channels;
  j["blocks"] = cfg.blocks;
  j["kernels"] = cfg.kernels;
  j["lgl_kernel"] = cfg.lgl_kernel;
  j["mean_diameter"] = cfg.mean_diameter;
  j["downsample_layers"] = cfg.downsample_layers;
  j["sparse_stride"] = cfg.sparse_stride;
  j["heads"] = cfg.heads;
  j["skips"] = cfg.skips;
  j["num_classes"] = cfg.num_classes;
  j["input_size"] = cfg.input_size;
  j["stage4"] = stage4_to_string(cfg.stage4);
  return j.dump(2);
}

ModelConfig config_by_name_or_path(const std::string& name_or_path) {
  if (name_or_path == "mobileutr") return mobileutr_config();
  if (name_or_path == "mobileutr-l" || name_or_path == "mobileutr_l") {
    return mobileutr_l_config();
  }
  if (name_or_path == "tiny") return tiny_config();
  std::ifstream f(name_or_path);
  if (!f) {
    throw InputError("config '" + name_or_path +
                     "' is neither a builtin name (mobileutr, mobileutr-l, tiny) "
                     "nor a readable file");
  }
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_json(ss.str());
}

void apply_override(ModelConfig& cfg, const std::string& key,
                    const std::string& value) {
  auto parse_list = [&](auto& arr) {
    std::stringstream ss(value);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',')) {
      if (i >= arr.size()) throw ConfigError("override " + key + ": too many values");
      arr[i++] = std::stoi(item);
    }
    if (i != arr.size()) throw ConfigError("override " + key + ": expected " +
                                           std::to_string(arr.size()) + " values");
  };
  if (key == "channels") parse_list(cfg.channels);
  else if (key == "blocks") parse_list(cfg.blocks);
  else if (key == "kernels") parse_list(cfg.kernels);
  else if (key == "lgl_kernel") cfg.lgl_kernel = std::stoi(value);
  else if (key == "mean_diameter") cfg.mean_diameter = std::stod(value);
  else if (key == "downsample_layers") cfg.downsample_layers = std::stoi(value);
  else if (key == "sparse_stride") cfg.sparse_stride = std::stoi(value);
  else if (key == "heads") cfg.heads = std::stoi(value);
  else if (key == "skips") cfg.skips = std::stoi(value);
  else if (key == "num_classes") cfg.num_classes = std::stoi(value);
  else if (key == "input_size") cfg.input_size = std::stoi(value);
  else if (key == "stage4") cfg.stage4 = stage4_from_string(value);
  else throw ConfigError("unknown config key: " + key);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model Model::build(const ModelConfig& cfg, DType dt, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg_ = cfg;
  m.dtype_ = dt;
  Rng rng(mix_seed(seed, 0x6d75747261ULL));

  const auto c = cfg.channels;
  m.stem_conv_ = Conv2d::make(3, c[0], 3, 1, 1, 1, false, dt, rng);
  m.stem_bn_ = BatchNorm2d::make(c[0], dt);
  for (int i = 0; i < cfg.blocks[0]; ++i) {
    m.stage1_.push_back(ConvUtrBlock::make(c[0], cfg.kernels[0], dt, rng));
  }
  m.pe1_ = PoolExpand::make(c[0], c[1], dt, rng);
  for (int i = 0; i < cfg.blocks[1]; ++i) {
    m.stage2_.push_back(ConvUtrBlock::make(c[1], cfg.kernels[1], dt, rng));
  }
  m.pe2_ = PoolExpand::make(c[1], c[2], dt, rng);
  for (int i = 0; i < cfg.blocks[2]; ++i) {
    m.stage3_.push_back(ConvUtrBlock::make(c[2], cfg.kernels[2], dt, rng));
  }
  m.pe3_ = PoolExpand::make(c[2], c[3], dt, rng);
  if (cfg.stage4 == Stage4Kind::kDenseAttention) {
    for (int i = 0; i < cfg.blocks[3]; ++i) {
      m.stage4_dense_.push_back(TransformerBlock::make(c[3], cfg.heads, dt, rng));
    }
  } else {
    const int k = cfg.stage4 == Stage4Kind::kPlainLgl ? 3 : cfg.resolved_lgl_kernel();
    for (int i = 0; i < cfg.blocks[3]; ++i) {
      m.stage4_lgl_.push_back(
          LglBlock::make(c[3], k, cfg.heads, cfg.sparse_stride, dt, rng));
    }
  }
  m.pe4_ = PoolExpand::make(c[3], c[4], dt, rng);
  for (int i = 0; i < cfg.blocks[4]; ++i) {
    m.stage5_.push_back(TransformerBlock::make(c[4], cfg.heads, dt, rng));
  }

  // Decoder widths mirror the encoder: (C3, C2, C1, C1). Stage i of the
  // first three fuses the encoder feature at the next-finer resolution when
  // that skip is enabled; skips are counted from the full-res side.
  const std::array<std::int64_t, 4> dec_out = {c[2], c[1], c[0], c[0]};
  const std::array<std::int64_t, 4> dec_in = {c[4], c[2], c[1], c[0]};
  const std::array<std::int64_t, 3> skip_src_ch = {c[2], c[1], c[0]};
  for (int i = 0; i < 4; ++i) {
    const bool has_stack = i < 3;
    const bool has_skip = has_stack && (3 - i) <= cfg.skips;
    m.decoder_.push_back(DecoderStage::make(
        dec_in[static_cast<size_t>(i)], dec_out[static_cast<size_t>(i)],
        has_skip ? skip_src_ch[static_cast<size_t>(i)] : 0, has_stack, dt, rng));
  }
  m.head_ = Conv2d::make(c[0], cfg.num_classes, 1, 1, 0, 1, true, dt, rng);
  return m;
}

Var Model::forward(const Var& image, bool train) {
  const Tensor& x = image.value();
  if (x.rank() != 4 || x.dim(1) != 3) {
    throw InputError("model input must be [N,3,H,W], got " + x.shape_str());
  }
  if (x.dim(2) % 16 != 0 || x.dim(3) % 16 != 0) {
    throw InputError("model input H and W must be divisible by 16, got " +
                     x.shape_str());
  }
  trace_.clear();
  auto rec = [&](const char* name, const Var& v) {
    trace_.push_back({name, v.value().shape()});
  };

  Var h = gelu(stem_bn_.forward(stem_conv_.forward(image), train));
  for (auto& b : stage1_) h = b.forward(h, train);
  Var skip1 = h;
  rec("stage1", h);
  h = pe1_.forward(h, train);
  for (auto& b : stage2_) h = b.forward(h, train);
  Var skip2 = h;
  rec("stage2", h);
  h = pe2_.forward(h, train);
  for (auto& b : stage3_) h = b.forward(h, train);
  Var skip3 = h;
  rec("stage3", h);
  h = pe3_.forward(h, train);
  if (!stage4_dense_.empty()) {
    for (auto& b : stage4_dense_) h = b.forward(h, train);
  } else {
    for (auto& b : stage4_lgl_) h = b.forward(h, train);
  }
  rec("stage4", h);
  h = pe4_.forward(h, train);
  for (auto& b : stage5_) h = b.forward(h, train);
  rec("stage5", h);

  const std::array<Var, 3> skip_feats = {skip3, skip2, skip1};
  for (int i = 0; i < 4; ++i) {
    Var skip;
    if (i < 3 && decoder_[static_cast<size_t>(i)].skip_ch > 0) {
      skip = skip_feats[static_cast<size_t>(i)];
    }
    h = decoder_[static_cast<size_t>(i)].forward(h, skip, train);
    trace_.push_back({"decoder" + std::to_string(i + 1), h.value().shape()});
  }
  h = head_.forward(h);
  rec("logits", h);
  return h;
}

Tensor Model::forward_eval(const Tensor& image) {
  Var x = Var::leaf(image, false);
  return forward(x, false).value();
}

std::vector<NamedVar> Model::parameters() const {
  std::vector<NamedVar> out;
  stem_conv_.collect("stem.conv", out);
  stem_bn_.collect("stem.bn", out);
  auto stage = [&out](const char* name, const auto& blocks) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      blocks[i].collect(std::string(name) + "." + std::to_string(i), out);
    }
  };
  stage("enc1", stage1_);
  pe1_.collect("pe1", out);
  stage("enc2", stage2_);
  pe2_.collect("pe2", out);
  stage("enc3", stage3_);
  pe3_.collect("pe3", out);
  stage("enc4", stage4_lgl_);
  stage("enc4", stage4_dense_);
  pe4_.collect("pe4", out);
  stage("enc5", stage5_);
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    decoder_[i].collect("dec" + std::to_string(i + 1), out);
  }
  head_.collect("head", out);
  return out;
}

std::vector<NamedBuffer> Model::buffers() {
  std::vector<NamedBuffer> out;
  stem_bn_.collect_buffers("stem.bn", out);
  auto stage = [&out](const char* name, auto& blocks) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      blocks[i].collect_buffers(std::string(name) + "." + std::to_string(i), out);
    }
  };
  stage("enc1", stage1_);
  pe1_.collect_buffers("pe1", out);
  stage("enc2", stage2_);
  pe2_.collect_buffers("pe2", out);
  stage("enc3", stage3_);
  pe3_.collect_buffers("pe3", out);
  stage("enc4", stage4_lgl_);
  stage("enc4", stage4_dense_);
  pe4_.collect_buffers("pe4", out);
  stage("enc5", stage5_);
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    decoder_[i].collect_buffers("dec" + std::to_string(i + 1), out);
  }
  return out;
}

std::int64_t Model::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.var.value().numel();
  return n;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

std::string entry_file(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "t%05zu.mutr", index);
  return buf;
}

}  // namespace

void save_checkpoint(const std::string& dir, Model& model,
                     const std::vector<std::pair<std::string, Tensor>>& extra) {
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw InputError("cannot write checkpoint manifest in " + dir);
  std::size_t idx = 0;
  auto dump = [&](const char* kind, const std::string& name, const Tensor& t) {
    const std::string file = entry_file(idx++);
    save_tensor((fs::path(dir) / file).string(), t);
    manifest << kind << ' ' << name << ' ' << file << '\n';
  };
  for (const auto& p : model.parameters()) dump("param", p.name, p.var.value());
  for (const auto& b : model.buffers()) dump("buffer", b.name, *b.tensor);
  for (const auto& e : extra) dump("extra", e.first, e.second);
  std::ofstream cfg(fs::path(dir) / "config.json");
  cfg << config_to_json(model.config()) << '\n';
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(
    const std::string& dir, Model& model) {
  std::ifstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw InputError("no checkpoint manifest in " + dir);
  auto params = model.parameters();
  auto bufs = model.buffers();
  std::size_t pi = 0, bi = 0;
  std::vector<std::pair<std::string, Tensor>> extra;
  std::string kind, name, file;
  while (manifest >> kind >> name >> file) {
    Tensor t = load_tensor((fs::path(dir) / file).string());
    if (kind == "param") {
      if (pi >= params.size() || params[pi].name != name) {
        throw InputError("checkpoint parameter order mismatch at " + name);
      }
      if (t.shape() != params[pi].var.value().shape() ||
          t.dtype() != params[pi].var.value().dtype()) {
        throw InputError("checkpoint parameter " + name + " has shape " +
                         t.shape_str() + ", model expects " +
                         params[pi].var.value().shape_str());
      }
      params[pi].var.mutable_value() = std::move(t);
      ++pi;
    } else if (kind == "buffer") {
      if (bi >= bufs.size() || bufs[bi].name != name) {
        throw InputError("checkpoint buffer order mismatch at " + name);
      }
      *bufs[bi].tensor = std::move(t);
      ++bi;
    } else if (kind == "extra") {
      extra.emplace_back(name, std::move(t));
    } else {
      throw InputError("unknown checkpoint entry kind: " + kind);
    }
  }
  if (pi != params.size() || bi != bufs.size()) {
    throw InputError("checkpoint is missing parameters or buffers");
  }
  return extra;
}

}  // namespace mutr::nn
