#include "mutr/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "mutr/tensor_io.hpp"

namespace mutr::data {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// synthetic generation
// ---------------------------------------------------------------------------

namespace {

SegmentationSample synth_one(const SynthSpec& spec, int index) {
  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int s = spec.size;

  double diam = spec.mean_diameter *
                (1.0 + spec.diameter_spread * (2.0 * u01(rng) - 1.0));
  // The longest semi-axis is diam/2 * 4/3; keep it inside the placement margin.
  diam = std::clamp(diam, 4.0, 0.7 * (s - 4.0));
  const double aspect = 0.75 + 0.58 * u01(rng);
  double a = 0.5 * diam * aspect;
  double b = 0.5 * diam / aspect;
  const double theta = 3.14159265358979323846 * u01(rng);
  const double margin = std::max(a, b) + 2.0;
  const double lo = margin, hi = s - margin;
  double cx, cy;
  if (hi > lo) {
    cx = lo + (hi - lo) * u01(rng);
    cy = lo + (hi - lo) * u01(rng);
  } else {
    cx = cy = 0.5 * s;
  }

  const double bg = 0.35 + 0.2 * u01(rng);
  const double contrast = spec.contrast_min +
                          (spec.contrast_max - spec.contrast_min) * u01(rng);
  const double fg = std::max(0.05, bg - contrast);
  const double edge_width = 1.0 + 2.0 * u01(rng);  // pixels
  const double ct = std::cos(theta), st = std::sin(theta);

  SegmentationSample out;
  out.image = Tensor({3, s, s}, DType::kF32);
  out.mask = Tensor({static_cast<std::int64_t>(s), static_cast<std::int64_t>(s)},
                    DType::kF32);
  char idbuf[32];
  std::snprintf(idbuf, sizeof(idbuf), "synth_%05d", index);
  out.id = idbuf;

  float* img = out.image.data<float>();
  float* msk = out.mask.data<float>();
  const double rmin = std::min(a, b);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double px = x + 0.5 - cx, py = y + 0.5 - cy;
      const double ex = px * ct + py * st;
      const double ey = -px * st + py * ct;
      const double f = (ex / a) * (ex / a) + (ey / b) * (ey / b);
      msk[y * s + x] = f <= 1.0 ? 1.0f : 0.0f;
      // Approximate signed distance to the boundary in pixels.
      const double dist = (1.0 - std::sqrt(f)) * rmin;
      const double alpha = 1.0 / (1.0 + std::exp(-dist / edge_width));
      double v = bg + alpha * (fg - bg);
      v *= 1.0 + spec.noise * gauss(rng);
      v += 0.5 * spec.noise * gauss(rng);
      const float pix = static_cast<float>(std::clamp(v, 0.0, 1.0));
      img[0 * s * s + y * s + x] = pix;
      img[1 * s * s + y * s + x] = pix;
      img[2 * s * s + y * s + x] = pix;
    }
  }
  return out;
}

}  // namespace

Dataset synth_generate(const SynthSpec& spec) {
  if (spec.count < 1) throw ConfigError("synth: count must be >= 1");
  if (spec.mean_diameter <= 0.0 || spec.mean_diameter >= spec.size) {
    throw ConfigError("synth: mean diameter must be in (0, size)");
  }
  Dataset ds;
  ds.reserve(static_cast<size_t>(spec.count));
  for (int i = 0; i < spec.count; ++i) ds.push_back(synth_one(spec, i));
  return ds;
}

// ---------------------------------------------------------------------------
// PNM files
// ---------------------------------------------------------------------------

namespace {

int pnm_read_int(std::istream& is) {
  // Skips whitespace and '#' comments.
  while (true) {
    const int c = is.peek();
    if (c == std::char_traits<char>::eof()) {
      break;
    } else if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      break;
    }
  }
  const std::int64_t at = is.tellg();
  int v;
  if (!(is >> v)) throw ParseError("expected integer in PNM header", at);
  return v;
}

struct PnmHeader {
  bool color = false;
  int w = 0, h = 0;
};

PnmHeader pnm_read_header(std::istream& is) {
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (!is || m0 != 'P' || (m1 != '5' && m1 != '6')) {
    throw ParseError(std::string("bad PNM magic '") + m0 + m1 +
                         "', expected P5 or P6",
                     0);
  }
  PnmHeader h;
  h.color = m1 == '6';
  h.w = pnm_read_int(is);
  h.h = pnm_read_int(is);
  const int maxval = pnm_read_int(is);
  if (h.w <= 0 || h.h <= 0) {
    throw ParseError("non-positive PNM dimensions",
                     static_cast<std::int64_t>(is.tellg()));
  }
  if (maxval != 255) {
    throw ParseError("unsupported PNM maxval " + std::to_string(maxval),
                     static_cast<std::int64_t>(is.tellg()));
  }
  is.get();  // single whitespace before the payload
  return h;
}

std::vector<unsigned char> pnm_read_payload(std::istream& is, std::size_t count) {
  std::vector<unsigned char> bytes(count);
  const std::int64_t at = is.tellg();
  is.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(is.gcount()) != count) {
    throw ParseError("truncated PNM payload", at + is.gcount());
  }
  return bytes;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open for reading: " + path);
  return f;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open for writing: " + path);
  return f;
}

unsigned char quantize(float v) {
  const double q = std::llround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0);
  return static_cast<unsigned char>(q);
}

}  // namespace

bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

Tensor load_image(const std::string& path) {
  if (has_suffix(path, ".mutr")) {
    Tensor t = load_tensor(path);
    if (t.rank() != 2 && !(t.rank() == 3 && t.dim(0) == 3)) {
      throw InputError("tensor image must be [H,W] or [3,H,W]: " + path);
    }
    return t;
  }
  auto f = open_in(path);
  const PnmHeader h = pnm_read_header(f);
  const std::size_t pixels = static_cast<std::size_t>(h.w) * h.h;
  const auto bytes = pnm_read_payload(f, pixels * (h.color ? 3 : 1));
  Tensor t = h.color ? Tensor({3, h.h, h.w}, DType::kF32)
                     : Tensor({h.h, h.w}, DType::kF32);
  float* p = t.data<float>();
  if (h.color) {
    // Interleaved RGB file -> planar tensor.
    for (std::size_t i = 0; i < pixels; ++i) {
      p[0 * pixels + i] = static_cast<float>(bytes[3 * i]) / 255.0f;
      p[1 * pixels + i] = static_cast<float>(bytes[3 * i + 1]) / 255.0f;
      p[2 * pixels + i] = static_cast<float>(bytes[3 * i + 2]) / 255.0f;
    }
  } else {
    for (std::size_t i = 0; i < pixels; ++i) {
      p[i] = static_cast<float>(bytes[i]) / 255.0f;
    }
  }
  return t;
}

void save_image(const std::string& path, const Tensor& t) {
  if (has_suffix(path, ".mutr")) {
    save_tensor(path, t);
    return;
  }
  const bool color = t.rank() == 3;
  if (!color && t.rank() != 2) {
    throw ConfigError("save_image: tensor must be [H,W] or [3,H,W]");
  }
  if (color && t.dim(0) != 3) throw ConfigError("save_image: color needs 3 channels");
  const std::int64_t h = t.dim(color ? 1 : 0), w = t.dim(color ? 2 : 1);
  auto f = open_out(path);
  f << (color ? "P6" : "P5") << "\n" << w << " " << h << "\n255\n";
  const float* p = t.data<float>();
  const std::size_t pixels = static_cast<std::size_t>(h * w);
  std::vector<unsigned char> bytes(pixels * (color ? 3 : 1));
  if (color) {
    for (std::size_t i = 0; i < pixels; ++i) {
      bytes[3 * i] = quantize(p[i]);
      bytes[3 * i + 1] = quantize(p[pixels + i]);
      bytes[3 * i + 2] = quantize(p[2 * pixels + i]);
    }
  } else {
    for (std::size_t i = 0; i < pixels; ++i) bytes[i] = quantize(p[i]);
  }
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
}

Tensor load_mask(const std::string& path) {
  auto f = open_in(path);
  const PnmHeader h = pnm_read_header(f);
  if (h.color) throw ParseError("mask must be a P5 grayscale file", 0);
  const std::size_t pixels = static_cast<std::size_t>(h.w) * h.h;
  const auto bytes = pnm_read_payload(f, pixels);
  Tensor t({h.h, h.w}, DType::kF32);
  float* p = t.data<float>();
  for (std::size_t i = 0; i < pixels; ++i) p[i] = static_cast<float>(bytes[i]);
  return t;
}

void save_mask(const std::string& path, const Tensor& t) {
  if (t.rank() != 2) throw ConfigError("save_mask: tensor must be [H,W]");
  auto f = open_out(path);
  f << "P5\n" << t.dim(1) << " " << t.dim(0) << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(t.numel()));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const double v = t.get(i);
    if (v < 0.0 || v > 255.0 || v != std::floor(v)) {
      throw ConfigError("save_mask: mask values must be integral bytes");
    }
    bytes[static_cast<std::size_t>(i)] = static_cast<unsigned char>(v);
  }
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------
// dataset directory
// ---------------------------------------------------------------------------

void save_dataset(const std::string& dir, const Dataset& ds) {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  std::ofstream index(fs::path(dir) / "index.txt");
  if (!index) throw InputError("cannot write dataset index in " + dir);
  for (const auto& s : ds) {
    save_image((fs::path(dir) / "images" / (s.id + ".ppm")).string(), s.image);
    save_mask((fs::path(dir) / "masks" / (s.id + ".pgm")).string(), s.mask);
    index << s.id << '\n';
  }
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream index(fs::path(dir) / "index.txt");
  if (!index) throw InputError("dataset index not found: " + dir + "/index.txt");
  Dataset ds;
  std::string id;
  while (std::getline(index, id)) {
    if (id.empty()) continue;
    SegmentationSample s;
    s.id = id;
    s.image = load_image((fs::path(dir) / "images" / (id + ".ppm")).string());
    if (s.image.rank() == 2) {
      // Grayscale input: replicate to 3 channels.
      Tensor rgb({3, s.image.dim(0), s.image.dim(1)}, DType::kF32);
      const std::int64_t n = s.image.numel();
      for (int c = 0; c < 3; ++c) {
        for (std::int64_t i = 0; i < n; ++i) rgb.set(c * n + i, s.image.get(i));
      }
      s.image = rgb;
    }
    s.mask = load_mask((fs::path(dir) / "masks" / (id + ".pgm")).string());
    if (s.image.dim(1) != s.mask.dim(0) || s.image.dim(2) != s.mask.dim(1)) {
      throw InputError("dataset sample " + id + ": image/mask size mismatch");
    }
    ds.push_back(std::move(s));
  }
  if (ds.empty()) throw InputError("dataset is empty: " + dir);
  return ds;
}

// ---------------------------------------------------------------------------
// resize / split
// ---------------------------------------------------------------------------

namespace {

// Half-pixel centers with edge clamping, arbitrary scale.
Tensor resize_bilinear(const Tensor& img, int target_h, int target_w) {
  const std::int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out({c, target_h, target_w}, DType::kF32);
  const double sy = static_cast<double>(h) / target_h;
  const double sx = static_cast<double>(w) / target_w;
  const float* src = img.data<float>();
  float* dst = out.data<float>();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const float* plane = src + ch * h * w;
    float* oplane = dst + ch * static_cast<std::int64_t>(target_h) * target_w;
    for (int oy = 0; oy < target_h; ++oy) {
      const double fy = (oy + 0.5) * sy - 0.5;
      std::int64_t y0 = static_cast<std::int64_t>(std::floor(fy));
      const double ty = fy - std::floor(fy);
      std::int64_t y1 = y0 + 1;
      y0 = std::clamp<std::int64_t>(y0, 0, h - 1);
      y1 = std::clamp<std::int64_t>(y1, 0, h - 1);
      for (int ox = 0; ox < target_w; ++ox) {
        const double fx = (ox + 0.5) * sx - 0.5;
        std::int64_t x0 = static_cast<std::int64_t>(std::floor(fx));
        const double tx = fx - std::floor(fx);
        std::int64_t x1 = x0 + 1;
        x0 = std::clamp<std::int64_t>(x0, 0, w - 1);
        x1 = std::clamp<std::int64_t>(x1, 0, w - 1);
        const double top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
        const double bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
        oplane[oy * target_w + ox] =
            static_cast<float>(top * (1.0 - ty) + bot * ty);
      }
    }
  }
  return out;
}

Tensor resize_nearest(const Tensor& mask, int target_h, int target_w) {
  const std::int64_t h = mask.dim(0), w = mask.dim(1);
  Tensor out({target_h, target_w}, DType::kF32);
  const double sy = static_cast<double>(h) / target_h;
  const double sx = static_cast<double>(w) / target_w;
  for (int oy = 0; oy < target_h; ++oy) {
    const std::int64_t y =
        std::clamp<std::int64_t>(std::llround((oy + 0.5) * sy - 0.5), 0, h - 1);
    for (int ox = 0; ox < target_w; ++ox) {
      const std::int64_t x =
          std::clamp<std::int64_t>(std::llround((ox + 0.5) * sx - 0.5), 0, w - 1);
      out.set(static_cast<std::int64_t>(oy) * target_w + ox, mask.get(y * w + x));
    }
  }
  return out;
}

}  // namespace

SegmentationSample resize_sample(const SegmentationSample& s, int target) {
  if (target <= 0 || target % 16 != 0) {
    throw InputError("resize target must be a positive multiple of 16, got " +
                     std::to_string(target));
  }
  SegmentationSample out;
  out.id = s.id;
  out.image = resize_bilinear(s.image, target, target);
  out.mask = resize_nearest(s.mask, target, target);
  return out;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double ratio,
                                  std::uint64_t seed) {
  if (ratio <= 0.0 || ratio >= 1.0) {
    throw ConfigError("split ratio must be in (0,1)");
  }
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x73706c6974ULL));
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  const auto n_train = static_cast<std::size_t>(std::clamp<std::int64_t>(
      std::llround(ratio * static_cast<double>(ds.size())), 0,
      static_cast<std::int64_t>(ds.size())));
  std::pair<Dataset, Dataset> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? out.first : out.second).push_back(ds[order[i]]);
  }
  return out;
}

}  // namespace mutr::data
