#include "mutr/verify.hpp"

#include "mutr/loss.hpp"

namespace mutr::nn {

namespace {

Var weighted_sum(const Var& out, const Tensor& weights) {
  return ops::sum(ops::mul(out, Var::leaf(weights, false)));
}

// At the 0.02-std init the q/k gradients are so small that the h = 1e-5
// central difference is roundoff-limited (error scales as 1/h); far larger
// scales saturate the softmax and the truncation term takes over instead.
// The probe scale sits between the two regimes.
constexpr double kAttentionProbeScale = 2.0;

void amplify_attention(Mhsa& attn, double factor) {
  for (Var* w : {&attn.wq, &attn.wk, &attn.wv, &attn.wo}) {
    Tensor& t = w->mutable_value();
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, t.get(i) * factor);
  }
}

double check_block(const std::string& which, std::uint64_t seed) {
  Rng rng(mix_seed(seed, std::hash<std::string>{}(which)));
  const DType dt = DType::kF64;
  std::vector<NamedVar> params;
  std::function<Var()> fwd;

  if (which == "convutr") {
    auto block = std::make_shared<ConvUtrBlock>(ConvUtrBlock::make(4, 3, dt, rng));
    Var x = Var::leaf(rand_uniform({2, 4, 6, 6}, dt, -1.0, 1.0, rng), true);
    Tensor w = rand_uniform({2, 4, 6, 6}, dt, -1.0, 1.0, rng);
    params.push_back({"x", x});
    block->collect("block", params);
    fwd = [block, x, w] { return weighted_sum(block->forward(x, true), w); };
  } else if (which == "lgl") {
    auto block = std::make_shared<LglBlock>(LglBlock::make(8, 3, 2, 2, dt, rng));
    amplify_attention(block->attn, kAttentionProbeScale);
    Var x = Var::leaf(rand_uniform({1, 8, 4, 4}, dt, -1.0, 1.0, rng), true);
    Tensor w = rand_uniform({1, 8, 4, 4}, dt, -1.0, 1.0, rng);
    params.push_back({"x", x});
    block->collect("block", params);
    fwd = [block, x, w] { return weighted_sum(block->forward(x, true), w); };
  } else if (which == "transformer") {
    auto block =
        std::make_shared<TransformerBlock>(TransformerBlock::make(8, 2, dt, rng));
    amplify_attention(block->attn, kAttentionProbeScale);
    Var x = Var::leaf(rand_uniform({1, 8, 3, 3}, dt, -1.0, 1.0, rng), true);
    Tensor w = rand_uniform({1, 8, 3, 3}, dt, -1.0, 1.0, rng);
    params.push_back({"x", x});
    block->collect("block", params);
    fwd = [block, x, w] { return weighted_sum(block->forward(x, true), w); };
  } else if (which == "decoder") {
    auto block = std::make_shared<DecoderStage>(
        DecoderStage::make(6, 4, 0, true, dt, rng));
    Var x = Var::leaf(rand_uniform({1, 6, 3, 3}, dt, -1.0, 1.0, rng), true);
    Tensor w = rand_uniform({1, 4, 6, 6}, dt, -1.0, 1.0, rng);
    params.push_back({"x", x});
    block->collect("block", params);
    fwd = [block, x, w] { return weighted_sum(block->forward(x, Var(), true), w); };
  } else if (which == "skip_fusion") {
    auto block = std::make_shared<DecoderStage>(
        DecoderStage::make(6, 4, 5, true, dt, rng));
    Var x = Var::leaf(rand_uniform({1, 6, 3, 3}, dt, -1.0, 1.0, rng), true);
    Var skip = Var::leaf(rand_uniform({1, 5, 12, 12}, dt, -1.0, 1.0, rng), true);
    Tensor w = rand_uniform({1, 4, 6, 6}, dt, -1.0, 1.0, rng);
    params.push_back({"x", x});
    params.push_back({"skip", skip});
    block->collect("block", params);
    fwd = [block, x, skip, w] {
      return weighted_sum(block->forward(x, skip, true), w);
    };
  } else if (which == "loss") {
    Var logits = Var::leaf(rand_uniform({2, 1, 4, 4}, dt, -2.0, 2.0, rng), true);
    Tensor target(logits.value().shape(), dt);
    for (std::int64_t i = 0; i < target.numel(); ++i) {
      target.set(i, rng() % 2 == 0 ? 0.0 : 1.0);
    }
    params.push_back({"logits", logits});
    fwd = [logits, target] { return bce_dice_loss(logits, target); };
  } else {
    throw ConfigError("unknown gradcheck block: " + which);
  }
  return gradcheck(params, fwd, 1e-5, 0, seed).max_rel_err;
}

}  // namespace

std::vector<BlockCheckResult> run_block_gradchecks(std::uint64_t base_seed,
                                                   int seeds) {
  std::vector<BlockCheckResult> out;
  for (const char* name : {"convutr", "lgl", "transformer", "decoder",
                           "skip_fusion", "loss"}) {
    BlockCheckResult r;
    r.name = name;
    for (int s = 0; s < seeds; ++s) {
      r.max_rel_err = std::max(
          r.max_rel_err, check_block(name, base_seed + static_cast<std::uint64_t>(s)));
    }
    out.push_back(r);
  }

  BlockCheckResult e2e;
  e2e.name = "end_to_end";
  e2e.tolerance = 1e-4;
  {
    Rng rng(mix_seed(base_seed, 0xe2eULL));
    ModelConfig cfg = tiny_config();
    cfg.channels = {4, 8, 8, 8, 16};
    cfg.input_size = 32;
    cfg.mean_diameter = 18.0;
    Model model = Model::build(cfg, DType::kF64, base_seed);
    Var x = Var::leaf(rand_uniform({1, 3, 32, 32}, DType::kF64, 0.0, 1.0, rng), false);
    Tensor target = Tensor::zeros({1, 1, 32, 32}, DType::kF64);
    for (std::int64_t i = 0; i < target.numel(); ++i) {
      target.set(i, rng() % 3 == 0 ? 1.0 : 0.0);
    }
    auto params = model.parameters();
    auto fwd = [&model, x, target] {
      return bce_dice_loss(model.forward(x, true), target);
    };
    e2e.max_rel_err = gradcheck(params, fwd, 1e-5, 6, base_seed).max_rel_err;
  }
  out.push_back(e2e);
  return out;
}

}  // namespace mutr::nn
