#include "mutr/complexity.hpp"

#include <cmath>
#include <sstream>

namespace mutr::nn {

std::int64_t ComplexityReport::total_params() const {
  std::int64_t n = 0;
  for (const auto& r : rows) n += r.params;
  return n;
}

std::int64_t ComplexityReport::total_macs() const {
  std::int64_t n = 0;
  for (const auto& r : rows) n += r.macs;
  return n;
}

std::string ComplexityReport::to_text(bool per_layer, bool strict_flops) const {
  std::ostringstream os;
  const double unit = strict_flops ? 2.0 : 1.0;
  const char* col = strict_flops ? "GFLOPs(2*MAC)" : "GFLOPs(MAC)";
  os << "config: " << label << "  input: " << input_size << "x" << input_size
     << "\n";
  char line[160];
  if (per_layer) {
    std::snprintf(line, sizeof(line), "%-28s %12s %14s\n", "layer", "params", col);
    os << line;
    for (const auto& r : rows) {
      std::snprintf(line, sizeof(line), "%-28s %12lld %14.4f\n", r.name.c_str(),
                    static_cast<long long>(r.params),
                    unit * static_cast<double>(r.macs) / 1e9);
      os << line;
    }
  }
  std::snprintf(line, sizeof(line), "total params: %.2f M (%lld)\n",
                static_cast<double>(total_params()) / 1e6,
                static_cast<long long>(total_params()));
  os << line;
  std::snprintf(line, sizeof(line), "total %s: %.2f\n", col,
                unit * static_cast<double>(total_macs()) / 1e9);
  os << line;
  return os.str();
}

namespace {

struct Counter {
  std::vector<LayerRow>* rows;

  void conv(const std::string& name, std::int64_t cin, std::int64_t cout,
            int k, int groups, bool bias, std::int64_t out_hw) {
    rows->push_back({name, LayerKind::kConv,
                     conv_param_count(cin, cout, k, groups, bias),
                     conv_mac_count(cin, cout, k, groups, out_hw)});
  }
  void norm(const std::string& name, std::int64_t c) {
    rows->push_back({name, LayerKind::kNorm, 2 * c, 0});
  }
  void mhsa(const std::string& name, std::int64_t c, std::int64_t tokens) {
    rows->push_back({name + ".proj", LayerKind::kLinear, 4 * (c * c + c),
                     4 * c * c * tokens});
    rows->push_back({name + ".scores", LayerKind::kAttnScores, 0,
                     2 * tokens * tokens * c});
  }
};

void convutr_rows(Counter& ct, const std::string& p, std::int64_t c, int k,
                  std::int64_t hw) {
  ct.conv(p + ".dw", c, c, k, static_cast<int>(c), false, hw);
  ct.norm(p + ".bn1", c);
  ct.conv(p + ".pw1", c, 4 * c, 1, 1, false, hw);
  ct.norm(p + ".bn2", 4 * c);
  ct.conv(p + ".pw2", 4 * c, c, 1, 1, false, hw);
  ct.norm(p + ".bn3", c);
}

void ffn_rows(Counter& ct, const std::string& p, std::int64_t c, std::int64_t hw) {
  ct.conv(p + ".ffn1", c, 4 * c, 1, 1, true, hw);
  ct.conv(p + ".ffn2", 4 * c, c, 1, 1, true, hw);
}

void lgl_rows(Counter& ct, const std::string& p, std::int64_t c, int k, int r,
              std::int64_t extent) {
  const std::int64_t hw = extent * extent;
  const std::int64_t sparse_hw = (extent / r) * (extent / r);
  ct.norm(p + ".norm_local", c);
  ct.conv(p + ".la_dw", c, c, k, static_cast<int>(c), true, hw);
  ct.conv(p + ".la_pw", c, c, 1, 1, true, hw);
  ct.norm(p + ".norm_attn", c);
  ct.mhsa(p + ".attn", c, sparse_hw);
  if (r > 1) {
    // Depthwise [C,1,r,r] + bias.
    ct.rows->push_back({p + ".lp", LayerKind::kConv, c * r * r + c,
                        c * r * r * sparse_hw});
  }
  ct.norm(p + ".norm_ffn", c);
  ffn_rows(ct, p, c, hw);
}

void transformer_rows(Counter& ct, const std::string& p, std::int64_t c,
                      std::int64_t hw) {
  ct.norm(p + ".norm1", c);
  ct.mhsa(p + ".attn", c, hw);
  ct.norm(p + ".norm2", c);
  ffn_rows(ct, p, c, hw);
}

void decoder_rows(Counter& ct, const std::string& p, std::int64_t cin,
                  std::int64_t cout, std::int64_t skip_ch, bool has_stack,
                  std::int64_t out_hw) {
  ct.conv(p + ".up", cin, cout, 3, 1, false, out_hw);
  ct.norm(p + ".bn_up", cout);
  if (has_stack) {
    ct.conv(p + ".fuse1", cout + skip_ch, cout, 3, 1, false, out_hw);
    ct.norm(p + ".bn_f1", cout);
    ct.conv(p + ".fuse2", cout, cout, 3, 1, false, out_hw);
    ct.norm(p + ".bn_f2", cout);
  }
}

}  // namespace

ComplexityReport complexity_report(const ModelConfig& cfg, int input_size,
                                   const std::string& label) {
  ModelConfig c = cfg;
  if (input_size > 0) c.input_size = input_size;
  c.validate();
  ComplexityReport rep;
  rep.label = label.empty() ? "custom" : label;
  rep.input_size = c.input_size;
  Counter ct{&rep.rows};

  const std::int64_t s = c.input_size;
  const auto ch = c.channels;
  const std::int64_t hw1 = s * s, hw2 = hw1 / 4, hw3 = hw1 / 16,
                     hw4 = hw1 / 64, hw5 = hw1 / 256;

  ct.conv("stem.conv", 3, ch[0], 3, 1, false, hw1);
  ct.norm("stem.bn", ch[0]);
  for (int i = 0; i < c.blocks[0]; ++i) {
    convutr_rows(ct, "enc1." + std::to_string(i), ch[0], c.kernels[0], hw1);
  }
  ct.conv("pe1.conv", ch[0], ch[1], 3, 1, false, hw2);
  ct.norm("pe1.bn", ch[1]);
  for (int i = 0; i < c.blocks[1]; ++i) {
    convutr_rows(ct, "enc2." + std::to_string(i), ch[1], c.kernels[1], hw2);
  }
  ct.conv("pe2.conv", ch[1], ch[2], 3, 1, false, hw3);
  ct.norm("pe2.bn", ch[2]);
  for (int i = 0; i < c.blocks[2]; ++i) {
    convutr_rows(ct, "enc3." + std::to_string(i), ch[2], c.kernels[2], hw3);
  }
  ct.conv("pe3.conv", ch[2], ch[3], 3, 1, false, hw4);
  ct.norm("pe3.bn", ch[3]);
  const std::int64_t extent4 = s / 8;
  for (int i = 0; i < c.blocks[3]; ++i) {
    const std::string p = "enc4." + std::to_string(i);
    if (c.stage4 == Stage4Kind::kDenseAttention) {
      transformer_rows(ct, p, ch[3], hw4);
    } else {
      const int k = c.stage4 == Stage4Kind::kPlainLgl ? 3 : c.resolved_lgl_kernel();
      lgl_rows(ct, p, ch[3], k, c.sparse_stride, extent4);
    }
  }
  ct.conv("pe4.conv", ch[3], ch[4], 3, 1, false, hw5);
  ct.norm("pe4.bn", ch[4]);
  for (int i = 0; i < c.blocks[4]; ++i) {
    transformer_rows(ct, "enc5." + std::to_string(i), ch[4], hw5);
  }

  const std::array<std::int64_t, 4> dec_out = {ch[2], ch[1], ch[0], ch[0]};
  const std::array<std::int64_t, 4> dec_in = {ch[4], ch[2], ch[1], ch[0]};
  const std::array<std::int64_t, 3> skip_src = {ch[2], ch[1], ch[0]};
  const std::array<std::int64_t, 4> dec_hw = {hw4, hw3, hw2, hw1};
  for (int i = 0; i < 4; ++i) {
    const bool has_stack = i < 3;
    const bool has_skip = has_stack && (3 - i) <= c.skips;
    decoder_rows(ct, "dec" + std::to_string(i + 1), dec_in[static_cast<size_t>(i)],
                 dec_out[static_cast<size_t>(i)],
                 has_skip ? skip_src[static_cast<size_t>(i)] : 0, has_stack,
                 dec_hw[static_cast<size_t>(i)]);
  }
  ct.conv("head", ch[0], c.num_classes, 1, 1, true, hw1);
  return rep;
}

ComplexityReport count_params(const ModelConfig& cfg) {
  return complexity_report(cfg, 0);
}

ComplexityReport count_flops(const ModelConfig& cfg, int input_size) {
  return complexity_report(cfg, input_size);
}

std::vector<ComplexityReport> ablation_suite(const ModelConfig& base) {
  std::vector<ComplexityReport> out;
  const std::array<Stage4Kind, 3> kinds = {
      Stage4Kind::kPlainLgl, Stage4Kind::kAdaptiveLgl, Stage4Kind::kDenseAttention};
  const std::array<const char*, 3> kind_names = {"lgl", "adaptive_lgl", "dense"};
  for (std::size_t ki = 0; ki < kinds.size(); ++ki) {
    for (int s = 0; s <= 3; ++s) {
      ModelConfig cfg = base;
      cfg.stage4 = kinds[ki];
      cfg.skips = s;
      out.push_back(complexity_report(
          cfg, 0, std::string(kind_names[ki]) + " skip" + std::to_string(s)));
    }
  }
  return out;
}

}  // namespace mutr::nn
