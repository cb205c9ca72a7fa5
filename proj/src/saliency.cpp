#include "salvit/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace salvit::sal {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1-D squared-distance transform (lower-envelope parabola scan). Entries of
// f may be +inf (no source in that row/column).
void dt_1d(const std::vector<double>& f, int n, std::vector<double>& d, std::vector<int>& v,
           std::vector<double>& z) {
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[static_cast<std::size_t>(q)] == kInf) continue;
    double s = 0.0;
    while (k >= 0) {
      const int p = v[static_cast<std::size_t>(k)];
      s = ((f[static_cast<std::size_t>(q)] + q * static_cast<double>(q)) -
           (f[static_cast<std::size_t>(p)] + p * static_cast<double>(p))) /
          (2.0 * (q - p));
      if (s > z[static_cast<std::size_t>(k)]) break;
      --k;
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = k == 0 ? -kInf : s;
    z[static_cast<std::size_t>(k) + 1] = kInf;
  }
  if (k < 0) {
    std::fill(d.begin(), d.begin() + n, kInf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(j) + 1] < q) ++j;
    const int p = v[static_cast<std::size_t>(j)];
    d[static_cast<std::size_t>(q)] =
        (q - p) * static_cast<double>(q - p) + f[static_cast<std::size_t>(p)];
  }
}

std::vector<double> distance_transform_two_pass(const BinaryMask& fg) {
  const int w = fg.width, h = fg.height;
  std::vector<double> sq(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      sq[static_cast<std::size_t>(y) * w + x] = fg.at(y, x) ? 0.0 : kInf;

  const int side = std::max(w, h);
  std::vector<double> f(static_cast<std::size_t>(side)), d(static_cast<std::size_t>(side));
  std::vector<int> v(static_cast<std::size_t>(side));
  std::vector<double> z(static_cast<std::size_t>(side) + 1);

  for (int x = 0; x < w; ++x) {  // columns first
    for (int y = 0; y < h; ++y)
      f[static_cast<std::size_t>(y)] = sq[static_cast<std::size_t>(y) * w + x];
    dt_1d(f, h, d, v, z);
    for (int y = 0; y < h; ++y)
      sq[static_cast<std::size_t>(y) * w + x] = d[static_cast<std::size_t>(y)];
  }
  for (int y = 0; y < h; ++y) {  // then rows
    for (int x = 0; x < w; ++x)
      f[static_cast<std::size_t>(x)] = sq[static_cast<std::size_t>(y) * w + x];
    dt_1d(f, w, d, v, z);
    for (int x = 0; x < w; ++x)
      sq[static_cast<std::size_t>(y) * w + x] = d[static_cast<std::size_t>(x)];
  }
  for (double& s : sq) s = s == kInf ? kInf : std::sqrt(s);
  return sq;
}

std::vector<double> distance_transform_brute(const BinaryMask& fg) {
  const int w = fg.width, h = fg.height;
  std::vector<std::pair<int, int>> sources;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (fg.at(y, x)) sources.emplace_back(y, x);
  std::vector<double> out(static_cast<std::size_t>(w) * h, kInf);
  if (sources.empty()) return out;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (fg.at(y, x)) {
        out[static_cast<std::size_t>(y) * w + x] = 0.0;
        continue;
      }
      double best = kInf;
      for (const auto& [sy, sx] : sources) {
        const double dy = y - sy, dx = x - sx;
        const double dd = dy * dy + dx * dx;
        if (dd < best) best = dd;
      }
      out[static_cast<std::size_t>(y) * w + x] = std::sqrt(best);
    }
  return out;
}

// Separable Gaussian blur; the kernel is renormalized against the in-bounds
// weight sum at each position, so a constant map blurs to itself exactly.
void gaussian_blur(SaliencyMap& m, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  for (int i = -radius; i <= radius; ++i)
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));

  const int w = m.width, h = m.height;
  std::vector<double> tmp(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0, wsum = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int xx = x + i;
        if (xx < 0 || xx >= w) continue;
        const double kv = kernel[static_cast<std::size_t>(i + radius)];
        acc += kv * m.at(y, xx);
        wsum += kv;
      }
      tmp[static_cast<std::size_t>(y) * w + x] = acc / wsum;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0, wsum = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int yy = y + i;
        if (yy < 0 || yy >= h) continue;
        const double kv = kernel[static_cast<std::size_t>(i + radius)];
        acc += kv * tmp[static_cast<std::size_t>(yy) * w + x];
        wsum += kv;
      }
      m.at(y, x) = acc / wsum;
    }
}

int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n - 2;
  i = ((i % period) + period) % period;
  return i < n ? i : period - i;
}

}  // namespace

void SaliencyMap::validate_range() const {
  for (double v : values)
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument("saliency value outside [0,1]");
}

BinaryMask threshold_mask(const SaliencyMap& m, double thr) {
  BinaryMask b(m.width, m.height);
  for (std::size_t i = 0; i < m.values.size(); ++i) b.values[i] = m.values[i] >= thr ? 1 : 0;
  return b;
}

std::vector<double> distance_transform(const BinaryMask& fg, bool two_pass) {
  return two_pass ? distance_transform_two_pass(fg) : distance_transform_brute(fg);
}

SaliencyMap preprocess(const SaliencyMap& raw, double diffusion_scale, double blur_sigma,
                       bool two_pass_dt) {
  if (diffusion_scale <= 0.0) throw std::invalid_argument("diffusion_scale must be positive");
  if (blur_sigma < 0.0) throw std::invalid_argument("blur_sigma must be non-negative");
  raw.validate_range();

  const BinaryMask fg = threshold_mask(raw, 0.5);
  const std::vector<double> dist = distance_transform(fg, two_pass_dt);
  SaliencyMap out(raw.width, raw.height);
  for (std::size_t i = 0; i < out.values.size(); ++i)
    out.values[i] = dist[i] == kInf ? 0.0 : std::exp(-dist[i] / diffusion_scale);
  gaussian_blur(out, blur_sigma);
  for (double& v : out.values) v = std::clamp(v, 0.0, 1.0);
  return out;
}

nc::Tensor downscale(const SaliencyMap& m, int l) {
  if (l <= 0) throw std::invalid_argument("downscale: grid side must be positive");
  if (m.width <= 0 || m.height <= 0) throw std::invalid_argument("downscale: empty map");
  const int ph = (m.height + l - 1) / l;  // patch size after reflect padding
  const int pw = (m.width + l - 1) / l;
  nc::Tensor out({l * l});
  for (int gy = 0; gy < l; ++gy)
    for (int gx = 0; gx < l; ++gx) {
      double acc = 0.0;
      for (int dy = 0; dy < ph; ++dy)
        for (int dx = 0; dx < pw; ++dx) {
          const int y = reflect(gy * ph + dy, m.height);
          const int x = reflect(gx * pw + dx, m.width);
          acc += m.at(y, x);
        }
      out[static_cast<std::size_t>(gy) * l + gx] = acc / (ph * pw);
    }
  return out;
}

SaliencyMap simulate_failure(const SaliencyMap& m, FailureMode mode, double threshold) {
  if (threshold < 0.0 || threshold > 1.0)
    throw std::invalid_argument("failure threshold must be in [0,1]");
  SaliencyMap out = m;
  if (mode == FailureMode::kReverse) {
    for (double& v : out.values) v = 1.0 - v;
  } else {
    for (double& v : out.values) v = v >= threshold ? 1.0 : 0.0;
  }
  return out;
}

double mean_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("mean_iou: dimension mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const bool av = a.values[i] != 0, bv = b.values[i] != 0;
    inter += (av && bv) ? 1 : 0;
    uni += (av || bv) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

void save_saliency(const std::string& path, const SaliencyMap& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write saliency file: " + path);
  os << "SAL " << m.width << " " << m.height << "\n";
  for (double v : m.values) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    const unsigned char b[4] = {static_cast<unsigned char>(bits & 0xff),
                                static_cast<unsigned char>((bits >> 8) & 0xff),
                                static_cast<unsigned char>((bits >> 16) & 0xff),
                                static_cast<unsigned char>((bits >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
  }
  if (!os) throw std::runtime_error("saliency write failed: " + path);
}

SaliencyMap load_saliency(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open saliency file: " + path);
  std::string header;
  std::getline(is, header);
  std::istringstream hs(header);
  std::string magic;
  int w = 0, h = 0;
  hs >> magic >> w >> h;
  if (magic != "SAL" || w <= 0 || h <= 0)
    throw std::runtime_error("bad saliency header: " + header);
  SaliencyMap m(w, h);
  for (double& v : m.values) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("truncated saliency file: " + path);
    const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) |
                               (static_cast<std::uint32_t>(b[1]) << 8) |
                               (static_cast<std::uint32_t>(b[2]) << 16) |
                               (static_cast<std::uint32_t>(b[3]) << 24);
    float f;
    std::memcpy(&f, &bits, 4);
    v = static_cast<double>(f);
  }
  return m;
}

}  // namespace salvit::sal
