#include "salvit/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace salvit::ep {

using nc::Tensor;

const std::vector<int>& KeypointSchema::base_ids() {
  static const std::vector<int> ids{kNose, kEarL, kEarR, 5, 6, 7, 8, 13, 14, 15, 16};
  return ids;
}

const std::vector<int>& KeypointSchema::novel_ids() {
  static const std::vector<int> ids{kEyeL, kEyeR, 9, 10, 11, 12};
  return ids;
}

const std::vector<std::pair<int, int>>& KeypointSchema::aux_paths() {
  static const std::vector<std::pair<int, int>> paths{
      {5, 13}, {6, 14}, {7, 15}, {8, 16}, {kEarL, kNose}, {kEarR, kNose}};
  return paths;
}

std::string KeypointSchema::name(int id) {
  static const char* names[kCount] = {"nose",   "ear_l",  "ear_r",  "eye_l",  "eye_r",
                                      "leg_fl", "leg_fr", "leg_bl", "leg_br", "knee_fl",
                                      "knee_fr", "knee_bl", "knee_br", "paw_fl", "paw_fr",
                                      "paw_bl", "paw_br"};
  if (id >= 0 && id < kCount) return names[id];
  return "aux_" + std::to_string(id - kCount);
}

namespace {

struct Color {
  double r = 0, g = 0, b = 0;
};

Color random_color(nc::Rng& rng, double lo = 0.15, double hi = 0.95) {
  return Color{rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

Color jitter(const Color& c, nc::Rng& rng, double amount) {
  auto j = [&](double v) { return std::clamp(v + rng.uniform(-amount, amount), 0.0, 1.0); };
  return Color{j(c.r), j(c.g), j(c.b)};
}

struct Shape {
  enum Kind { kEllipse, kCapsule, kDisc } kind = kDisc;
  double cx = 0, cy = 0, a = 0, b = 0, rot = 0;  // ellipse
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0, r = 0;  // capsule / disc radius
  Color color;
  double cr = 1.0, sr = 0.0;  // cached cos/sin of rot

  void finalize() {
    cr = std::cos(rot);
    sr = std::sin(rot);
  }

  bool inside(double px, double py) const {
    switch (kind) {
      case kEllipse: {
        const double dx = px - cx, dy = py - cy;
        const double lx = dx * cr + dy * sr;
        const double ly = -dx * sr + dy * cr;
        return (lx * lx) / (a * a) + (ly * ly) / (b * b) <= 1.0;
      }
      case kCapsule: {
        const double vx = x2 - x1, vy = y2 - y1;
        const double len2 = vx * vx + vy * vy;
        double t = len2 > 0 ? ((px - x1) * vx + (py - y1) * vy) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double dx = px - (x1 + t * vx), dy = py - (y1 + t * vy);
        return dx * dx + dy * dy <= r * r;
      }
      case kDisc: {
        const double dx = px - x1, dy = py - y1;
        return dx * dx + dy * dy <= r * r;
      }
    }
    return false;
  }
};

// Species morphology and palette, deterministic from the dataset seed.
struct Species {
  double body_a, body_b, head_r, leg_l1, leg_l2, leg_w;
  double head_dx, head_dy;       // head center offset from body center
  double leg_attach[4];          // attachment x along the body axis
  double thigh_base[4];
  Color body, head, leg_left, leg_right, eye, ear, nose, background;

  static Species sample(nc::Rng& rng, int image_size) {
    const double s = static_cast<double>(image_size);
    Species sp;
    sp.body_a = rng.uniform(0.19, 0.24) * s;
    sp.body_b = rng.uniform(0.10, 0.14) * s;
    sp.head_r = rng.uniform(0.085, 0.115) * s;
    sp.leg_l1 = rng.uniform(0.09, 0.13) * s;
    sp.leg_l2 = rng.uniform(0.09, 0.13) * s;
    sp.leg_w = rng.uniform(0.026, 0.038) * s;
    sp.head_dx = sp.body_a + 0.55 * sp.head_r;
    sp.head_dy = -0.45 * sp.body_b - 0.55 * sp.head_r;
    sp.leg_attach[0] = 0.62;   // front pair
    sp.leg_attach[1] = 0.45;
    sp.leg_attach[2] = -0.48;  // back pair
    sp.leg_attach[3] = -0.66;
    for (int i = 0; i < 4; ++i) sp.thigh_base[i] = rng.uniform(-0.15, 0.15);
    sp.body = random_color(rng, 0.25, 0.9);
    sp.head = jitter(sp.body, rng, 0.18);
    sp.leg_right = jitter(sp.body, rng, 0.15);
    sp.leg_left = Color{sp.leg_right.r * 0.55, sp.leg_right.g * 0.55, sp.leg_right.b * 0.55};
    sp.eye = random_color(rng, 0.0, 0.25);       // dark
    sp.ear = jitter(sp.head, rng, 0.25);
    sp.nose = random_color(rng, 0.0, 0.35);
    sp.background = random_color(rng, 0.08, 0.5);
    return sp;
  }

  // conservative radius of the whole figure around the body center
  double max_radius() const {
    const double front = head_dx + 2.4 * head_r;
    const double down = 0.85 * body_b + leg_l1 + leg_l2 + 2.0 * leg_w;
    const double up = -head_dy + 1.6 * head_r;
    return std::max({front, down, up, body_a + 2.0 * leg_w});
  }
};

struct Pose {
  double cx, cy, rot, scale;
  int facing;             // +1 or -1, mirrors the local x axis
  double thigh[4], shin[4];
};

struct Point {
  double x, y;
};

Point transform(const Pose& p, double lx, double ly) {
  const double mx = lx * p.facing;
  const double c = std::cos(p.rot), s = std::sin(p.rot);
  return Point{p.cx + p.scale * (mx * c - ly * s), p.cy + p.scale * (mx * s + ly * c)};
}

// All object shapes in painter order plus the keypoints.
struct Figure {
  std::vector<Shape> shapes;
  std::vector<fskd::Keypoint> keypoints;
};

Figure build_figure(const Species& sp, const Pose& pose) {
  Figure fig;
  fig.keypoints.assign(KeypointSchema::kCount, {});

  auto kp = [&](int id, const Point& pt) {
    fig.keypoints[static_cast<std::size_t>(id)] =
        fskd::Keypoint{pt.x, pt.y, true, id};
  };

  const Point head_c = transform(pose, sp.head_dx, sp.head_dy);
  const double hr = sp.head_r * pose.scale;

  // legs: 0,1 front (right/left of the pair drawn over/under the body)
  // painter order: left legs, ears, body, head, right legs, nose, eyes
  std::vector<Shape> left_legs, right_legs;
  for (int i = 0; i < 4; ++i) {
    const double ax = sp.leg_attach[i] * sp.body_a;
    const double ay = 0.75 * sp.body_b;
    const double alpha = sp.thigh_base[i] + pose.thigh[i];
    const double beta = alpha + pose.shin[i];
    const double hipx = ax, hipy = ay;
    const double kneex = hipx + sp.leg_l1 * std::sin(alpha);
    const double kneey = hipy + sp.leg_l1 * std::cos(alpha);
    const double pawx = kneex + sp.leg_l2 * std::sin(beta);
    const double pawy = kneey + sp.leg_l2 * std::cos(beta);

    const Point hip = transform(pose, hipx, hipy);
    const Point knee = transform(pose, kneex, kneey);
    const Point paw = transform(pose, pawx, pawy);
    kp(KeypointSchema::kLeg0 + i, hip);
    kp(KeypointSchema::kKnee0 + i, knee);
    kp(KeypointSchema::kPaw0 + i, paw);

    const bool left = (i == 1 || i == 2);
    const Color col = left ? sp.leg_left : sp.leg_right;
    Shape thigh{Shape::kCapsule, 0, 0, 0, 0, 0, hip.x, hip.y, knee.x, knee.y,
                sp.leg_w * pose.scale, col};
    // shin slightly brighter so the knee joint reads as a color edge
    Color shin_col{std::clamp(col.r * 1.35 + 0.05, 0.0, 1.0),
                   std::clamp(col.g * 1.35 + 0.05, 0.0, 1.0),
                   std::clamp(col.b * 1.35 + 0.05, 0.0, 1.0)};
    Shape shin{Shape::kCapsule, 0, 0, 0, 0, 0, knee.x, knee.y, paw.x, paw.y,
               sp.leg_w * pose.scale * 0.9, shin_col};
    if (left) {
      left_legs.push_back(thigh);
      left_legs.push_back(shin);
    } else {
      right_legs.push_back(thigh);
      right_legs.push_back(shin);
    }
  }

  for (const Shape& s : left_legs) fig.shapes.push_back(s);

  // ears (peek from behind the head)
  const Point ear_l = transform(pose, sp.head_dx - 0.55 * sp.head_r, sp.head_dy - 0.95 * sp.head_r);
  const Point ear_r = transform(pose, sp.head_dx + 0.15 * sp.head_r, sp.head_dy - 1.05 * sp.head_r);
  fig.shapes.push_back(Shape{Shape::kDisc, 0, 0, 0, 0, 0, ear_l.x, ear_l.y, 0, 0, 0.38 * hr, sp.ear});
  fig.shapes.push_back(Shape{Shape::kDisc, 0, 0, 0, 0, 0, ear_r.x, ear_r.y, 0, 0, 0.38 * hr, sp.ear});
  kp(KeypointSchema::kEarL, ear_l);
  kp(KeypointSchema::kEarR, ear_r);

  // body
  const Point body_c = transform(pose, 0, 0);
  fig.shapes.push_back(Shape{Shape::kEllipse, body_c.x, body_c.y, sp.body_a * pose.scale,
                             sp.body_b * pose.scale, pose.rot, 0, 0, 0, 0, 0, sp.body});

  // head
  fig.shapes.push_back(Shape{Shape::kDisc, 0, 0, 0, 0, 0, head_c.x, head_c.y, 0, 0, hr, sp.head});

  for (const Shape& s : right_legs) fig.shapes.push_back(s);

  // nose and eyes on top
  const Point nose = transform(pose, sp.head_dx + 0.92 * sp.head_r, sp.head_dy + 0.12 * sp.head_r);
  fig.shapes.push_back(Shape{Shape::kDisc, 0, 0, 0, 0, 0, nose.x, nose.y, 0, 0, 0.30 * hr, sp.nose});
  kp(KeypointSchema::kNose, nose);

  const Point eye_l = transform(pose, sp.head_dx - 0.10 * sp.head_r, sp.head_dy - 0.38 * sp.head_r);
  const Point eye_r = transform(pose, sp.head_dx + 0.45 * sp.head_r, sp.head_dy - 0.30 * sp.head_r);
  fig.shapes.push_back(Shape{Shape::kDisc, 0, 0, 0, 0, 0, eye_l.x, eye_l.y, 0, 0, 0.21 * hr, sp.eye});
  fig.shapes.push_back(Shape{Shape::kDisc, 0, 0, 0, 0, 0, eye_r.x, eye_r.y, 0, 0, 0.21 * hr, sp.eye});
  kp(KeypointSchema::kEyeL, eye_l);
  kp(KeypointSchema::kEyeR, eye_r);

  return fig;
}

AnnotatedImage render_image(const Species& sp, const SynthConfig& cfg, int species_id,
                            int image_id, nc::Rng& rng) {
  const int s = cfg.image_size;

  // pose that always fits inside the frame
  Pose pose;
  pose.facing = rng.uniform() < 0.5 ? 1 : -1;
  pose.rot = rng.uniform(-0.3, 0.3);
  const double jx = rng.uniform(-0.06, 0.06) * s;
  const double jy = rng.uniform(-0.06, 0.06) * s;
  pose.cx = s / 2.0 + jx;
  pose.cy = s / 2.0 + jy;
  const double margin = s / 2.0 - 3.0 - std::max(std::abs(jx), std::abs(jy));
  const double scale_cap = std::min(1.1, margin / sp.max_radius());
  pose.scale = rng.uniform(0.82, 1.0) * scale_cap;
  for (int i = 0; i < 4; ++i) {
    pose.thigh[i] = rng.uniform(-0.3, 0.3);
    pose.shin[i] = rng.uniform(-0.1, 0.5);
  }

  Figure fig = build_figure(sp, pose);

  // background clutter in the exact species palette: large part-colored
  // blobs, leg-colored capsules, and small feature-colored decoy dots that
  // defeat plain color matching unless the attention is masked to the object
  std::vector<Shape> clutter;
  const int n_clutter = rng.uniform_int(cfg.distractors_lo, cfg.distractors_hi);
  for (int i = 0; i < n_clutter; ++i) {
    Shape sh;
    const int kind = rng.uniform_int(0, 5);
    if (kind <= 1) {  // body/head blob
      sh.kind = Shape::kEllipse;
      sh.color = kind == 0 ? sp.body : sp.head;
      sh.cx = rng.uniform(0.0, 1.0) * s;
      sh.cy = rng.uniform(0.0, 1.0) * s;
      sh.a = rng.uniform(0.05, 0.15) * s;
      sh.b = rng.uniform(0.04, 0.11) * s;
      sh.rot = rng.uniform(0.0, 3.14159);
    } else if (kind == 2 || kind == 3) {  // leg-like capsule
      sh.kind = Shape::kCapsule;
      sh.color = kind == 2 ? sp.leg_right : sp.leg_left;
      sh.x1 = rng.uniform(0.0, 1.0) * s;
      sh.y1 = rng.uniform(0.0, 1.0) * s;
      sh.x2 = sh.x1 + rng.uniform(-0.22, 0.22) * s;
      sh.y2 = sh.y1 + rng.uniform(-0.22, 0.22) * s;
      sh.r = rng.uniform(0.02, 0.038) * s;
    } else {  // feature decoy: an eye-, nose-, or ear-colored dot
      sh.kind = Shape::kDisc;
      const int f = rng.uniform_int(0, 2);
      sh.color = f == 0 ? sp.eye : (f == 1 ? sp.nose : sp.ear);
      sh.x1 = rng.uniform(0.0, 1.0) * s;
      sh.y1 = rng.uniform(0.0, 1.0) * s;
      sh.r = rng.uniform(0.012, 0.035) * s;
    }
    clutter.push_back(sh);
  }

  for (Shape& sh : clutter) sh.finalize();
  for (Shape& sh : fig.shapes) sh.finalize();

  AnnotatedImage img;
  img.species = species_id;
  img.image_id = image_id;
  img.rgb = Tensor({3, s, s});
  img.saliency = sal::SaliencyMap(s, s, 0.0);
  img.keypoints = fig.keypoints;

  const std::size_t plane = static_cast<std::size_t>(s) * s;
  double minx = s, miny = s, maxx = 0, maxy = 0;
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      Color c = sp.background;
      for (const Shape& sh : clutter)
        if (sh.inside(px, py)) c = sh.color;
      bool object = false;
      for (const Shape& sh : fig.shapes)
        if (sh.inside(px, py)) {
          c = sh.color;
          object = true;
        }
      const std::size_t at = static_cast<std::size_t>(y) * s + x;
      img.rgb[at] = c.r;
      img.rgb[plane + at] = c.g;
      img.rgb[2 * plane + at] = c.b;
      if (object) {
        img.saliency.values[at] = 1.0;
        minx = std::min(minx, static_cast<double>(x));
        maxx = std::max(maxx, static_cast<double>(x) + 1.0);
        miny = std::min(miny, static_cast<double>(y));
        maxy = std::max(maxy, static_cast<double>(y) + 1.0);
      }
    }
  // the box covers the rendered mask and every keypoint coordinate
  for (const fskd::Keypoint& kp : img.keypoints) {
    minx = std::min(minx, kp.x);
    maxx = std::max(maxx, kp.x);
    miny = std::min(miny, kp.y);
    maxy = std::max(maxy, kp.y);
  }
  img.object_box = Box{minx, miny, maxx, maxy};

  if (cfg.pixel_noise > 0.0) {
    for (std::size_t i = 0; i < img.rgb.size(); ++i)
      img.rgb[i] = std::clamp(
          img.rgb[i] + rng.uniform(-cfg.pixel_noise, cfg.pixel_noise), 0.0, 1.0);
  }
  return img;
}

}  // namespace

double diffusion_scale_for(std::uint64_t dataset_seed, int image_id, double lo, double hi) {
  if (hi <= lo) return lo;
  // splitmix64 of (seed, id) -> uniform in [lo, hi]
  std::uint64_t x = dataset_seed ^ (0x9e3779b97f4a7c15ULL +
                                    static_cast<std::uint64_t>(image_id) * 0xbf58476d1ce4e5b9ULL);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  const double u = static_cast<double>(x >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

Dataset gen_dataset(const SynthConfig& cfg, double sal_diffusion, double sal_blur,
                    double sal_diffusion_hi) {
  if (cfg.species < 1 || cfg.per_species < 1)
    throw std::invalid_argument("gen_dataset: counts must be >= 1");
  Dataset ds;
  ds.cfg = cfg;
  ds.sal_diffusion = sal_diffusion;
  ds.sal_blur = sal_blur;
  ds.sal_diffusion_hi = sal_diffusion_hi;
  ds.by_species.assign(static_cast<std::size_t>(cfg.species), {});
  nc::Rng root(cfg.seed);
  int image_id = 0;
  for (int sp_id = 0; sp_id < cfg.species; ++sp_id) {
    nc::Rng sp_rng = root.fork(static_cast<std::uint64_t>(sp_id) + 1);
    Species sp = Species::sample(sp_rng, cfg.image_size);
    for (int k = 0; k < cfg.per_species; ++k) {
      nc::Rng img_rng = sp_rng.fork(static_cast<std::uint64_t>(k) * 2654435761ULL + 17);
      AnnotatedImage img = render_image(sp, cfg, sp_id, image_id, img_rng);
      img.sal_diffusion =
          diffusion_scale_for(cfg.seed, image_id, sal_diffusion, sal_diffusion_hi);
      img.sal_blur = sal_blur;
      img.saliency_pre = sal::preprocess(img.saliency, img.sal_diffusion, img.sal_blur, true);
      ds.by_species[static_cast<std::size_t>(sp_id)].push_back(image_id);
      ds.images.push_back(std::move(img));
      ++image_id;
    }
  }
  return ds;
}

std::vector<fskd::Keypoint> aux_keypoints(const std::vector<fskd::Keypoint>& kps,
                                          const std::vector<std::pair<int, int>>& paths,
                                          const std::vector<double>& nodes) {
  std::vector<fskd::Keypoint> out;
  int type = KeypointSchema::kCount;
  for (const auto& [u1, u2] : paths) {
    const fskd::Keypoint& a = kps[static_cast<std::size_t>(u1)];
    const fskd::Keypoint& b = kps[static_cast<std::size_t>(u2)];
    if (!a.visible || !b.visible) {
      type += static_cast<int>(nodes.size());  // keep numbering stable
      continue;
    }
    for (double t : nodes) {
      fskd::Keypoint kp;
      kp.x = (1.0 - t) * a.x + t * b.x;
      kp.y = (1.0 - t) * a.y + t * b.y;
      kp.visible = true;
      kp.type = type++;
      out.push_back(kp);
    }
  }
  return out;
}

void EpisodeSpec::validate(const Dataset& ds) const {
  if (shots < 1 || queries < 1) throw std::invalid_argument("episode: shots/queries must be >= 1");
  if (ds.cfg.species < 2 && unseen_species)
    throw std::invalid_argument("episode: need >= 2 species for an unseen split");
  const int unseen = unseen_species_id < 0 ? ds.cfg.species - 1 : unseen_species_id;
  if (unseen < 0 || unseen >= ds.cfg.species)
    throw std::invalid_argument("episode: bad unseen species id");
  if (ds.cfg.per_species < shots + queries)
    throw std::invalid_argument("episode: not enough images per species");
}

Episode sample_episode(const Dataset& ds, const EpisodeSpec& spec, nc::Rng& rng) {
  spec.validate(ds);
  const int unseen = spec.unseen_species_id < 0 ? ds.cfg.species - 1 : spec.unseen_species_id;

  std::vector<int> pool;
  for (int sp = 0; sp < ds.cfg.species; ++sp)
    if ((sp == unseen) == spec.unseen_species) pool.push_back(sp);
  if (pool.empty()) throw std::invalid_argument("episode: empty species pool");
  const int species = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];

  const std::vector<int>& imgs = ds.by_species[static_cast<std::size_t>(species)];
  const int need = spec.shots + spec.queries;
  // partial shuffle of image indices
  std::vector<int> order = imgs;
  for (int i = 0; i < need; ++i) {
    const int j = rng.uniform_int(i, static_cast<int>(order.size()) - 1);
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }

  Episode out;
  out.species = species;
  out.type_ids = spec.novel_types ? KeypointSchema::novel_ids() : KeypointSchema::base_ids();

  auto prepare = [&](int image_index) {
    AnnotatedImage img = ds.images[static_cast<std::size_t>(image_index)];
    if (spec.use_aux) {
      std::vector<fskd::Keypoint> aux =
          aux_keypoints(img.keypoints, KeypointSchema::aux_paths(), spec.aux_nodes);
      for (fskd::Keypoint& kp : aux) img.keypoints.push_back(kp);
    }
    return img;
  };
  for (int i = 0; i < spec.shots; ++i)
    out.support.push_back(prepare(order[static_cast<std::size_t>(i)]));
  for (int i = 0; i < spec.queries; ++i)
    out.queries.push_back(prepare(order[static_cast<std::size_t>(spec.shots + i)]));

  if (spec.use_aux && !spec.novel_types) {
    const int aux_count =
        static_cast<int>(KeypointSchema::aux_paths().size() * spec.aux_nodes.size());
    for (int a = 0; a < aux_count; ++a) out.type_ids.push_back(KeypointSchema::kCount + a);
    // drop aux types that are invisible in any episode image (skipped paths)
    std::vector<int> kept;
    for (int t : out.type_ids) {
      bool ok = true;
      for (const AnnotatedImage& img : out.support)
        if (t >= static_cast<int>(img.keypoints.size()) ||
            !img.keypoints[static_cast<std::size_t>(t)].visible)
          ok = false;
      for (const AnnotatedImage& img : out.queries)
        if (t >= static_cast<int>(img.keypoints.size()) ||
            !img.keypoints[static_cast<std::size_t>(t)].visible)
          ok = false;
      if (ok) kept.push_back(t);
    }
    out.type_ids = std::move(kept);
  }
  return out;
}

namespace {

void write_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  const unsigned char b[4] = {static_cast<unsigned char>(bits & 0xff),
                              static_cast<unsigned char>((bits >> 8) & 0xff),
                              static_cast<unsigned char>((bits >> 16) & 0xff),
                              static_cast<unsigned char>((bits >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

float read_f32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) |
                             (static_cast<std::uint32_t>(b[1]) << 8) |
                             (static_cast<std::uint32_t>(b[2]) << 16) |
                             (static_cast<std::uint32_t>(b[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

void save_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "saliency");

  std::ofstream meta((fs::path(dir) / "meta.txt").string());
  meta << "species = " << ds.cfg.species << "\n";
  meta << "per_species = " << ds.cfg.per_species << "\n";
  meta << "image_size = " << ds.cfg.image_size << "\n";
  meta << "seed = " << ds.cfg.seed << "\n";

  std::ofstream ann((fs::path(dir) / "annotations.csv").string());
  ann << std::setprecision(17) << "image_id,species,kp_type,kp_name,x,y,visible\n";
  std::ofstream boxes((fs::path(dir) / "boxes.csv").string());
  boxes << std::setprecision(17) << "image_id,species,x0,y0,x1,y1\n";

  for (const AnnotatedImage& img : ds.images) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05d", img.image_id);
    const int s = ds.cfg.image_size;
    {
      std::ofstream os((fs::path(dir) / "images" / (std::string(name) + ".rgbf")).string(),
                       std::ios::binary);
      os << "RGBF " << s << " " << s << "\n";
      for (std::size_t i = 0; i < img.rgb.size(); ++i)
        write_f32(os, static_cast<float>(img.rgb[i]));
    }
    sal::save_saliency((fs::path(dir) / "saliency" / (std::string(name) + ".sal")).string(),
                       img.saliency);
    for (std::size_t t = 0; t < img.keypoints.size(); ++t) {
      const fskd::Keypoint& kp = img.keypoints[t];
      ann << img.image_id << "," << img.species << "," << t << ","
          << KeypointSchema::name(static_cast<int>(t)) << "," << kp.x << "," << kp.y << ","
          << (kp.visible ? 1 : 0) << "\n";
    }
    boxes << img.image_id << "," << img.species << "," << img.object_box.x0 << ","
          << img.object_box.y0 << "," << img.object_box.x1 << "," << img.object_box.y1 << "\n";
  }
}

Dataset load_dataset(const std::string& dir, double sal_diffusion, double sal_blur,
                     double sal_diffusion_hi) {
  namespace fs = std::filesystem;
  Dataset ds;
  ds.sal_diffusion = sal_diffusion;
  ds.sal_blur = sal_blur;
  ds.sal_diffusion_hi = sal_diffusion_hi;
  {
    std::ifstream meta((fs::path(dir) / "meta.txt").string());
    if (!meta) throw std::runtime_error("dataset meta.txt not found in " + dir);
    std::string line;
    while (std::getline(meta, line)) {
      std::istringstream ls(line);
      std::string key, eq;
      ls >> key >> eq;
      if (key == "species") ls >> ds.cfg.species;
      else if (key == "per_species") ls >> ds.cfg.per_species;
      else if (key == "image_size") ls >> ds.cfg.image_size;
      else if (key == "seed") ls >> ds.cfg.seed;
    }
  }
  const int total = ds.cfg.species * ds.cfg.per_species;
  ds.images.resize(static_cast<std::size_t>(total));
  ds.by_species.assign(static_cast<std::size_t>(ds.cfg.species), {});

  // annotations
  {
    std::ifstream ann((fs::path(dir) / "annotations.csv").string());
    if (!ann) throw std::runtime_error("annotations.csv not found in " + dir);
    std::string line;
    std::getline(ann, line);  // header
    while (std::getline(ann, line)) {
      std::istringstream ls(line);
      std::string field;
      int image_id, species, type, visible;
      double x, y;
      std::getline(ls, field, ','); image_id = std::stoi(field);
      std::getline(ls, field, ','); species = std::stoi(field);
      std::getline(ls, field, ','); type = std::stoi(field);
      std::getline(ls, field, ',');  // name
      std::getline(ls, field, ','); x = std::stod(field);
      std::getline(ls, field, ','); y = std::stod(field);
      std::getline(ls, field, ','); visible = std::stoi(field);
      AnnotatedImage& img = ds.images[static_cast<std::size_t>(image_id)];
      img.image_id = image_id;
      img.species = species;
      if (static_cast<int>(img.keypoints.size()) <= type)
        img.keypoints.resize(static_cast<std::size_t>(type) + 1);
      img.keypoints[static_cast<std::size_t>(type)] =
          fskd::Keypoint{x, y, visible != 0, type};
    }
  }
  {
    std::ifstream boxes((fs::path(dir) / "boxes.csv").string());
    if (!boxes) throw std::runtime_error("boxes.csv not found in " + dir);
    std::string line;
    std::getline(boxes, line);
    while (std::getline(boxes, line)) {
      std::istringstream ls(line);
      std::string field;
      std::getline(ls, field, ','); const int image_id = std::stoi(field);
      std::getline(ls, field, ',');
      Box box;
      std::getline(ls, field, ','); box.x0 = std::stod(field);
      std::getline(ls, field, ','); box.y0 = std::stod(field);
      std::getline(ls, field, ','); box.x1 = std::stod(field);
      std::getline(ls, field, ','); box.y1 = std::stod(field);
      ds.images[static_cast<std::size_t>(image_id)].object_box = box;
    }
  }

  for (int id = 0; id < total; ++id) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05d", id);
    AnnotatedImage& img = ds.images[static_cast<std::size_t>(id)];
    {
      std::ifstream is((fs::path(dir) / "images" / (std::string(name) + ".rgbf")).string(),
                       std::ios::binary);
      if (!is) throw std::runtime_error("missing image file for id " + std::to_string(id));
      std::string header;
      std::getline(is, header);
      std::istringstream hs(header);
      std::string magic;
      int w, h;
      hs >> magic >> w >> h;
      if (magic != "RGBF") throw std::runtime_error("bad rgbf header: " + header);
      img.rgb = Tensor({3, h, w});
      for (std::size_t i = 0; i < img.rgb.size(); ++i)
        img.rgb[i] = static_cast<double>(read_f32(is));
    }
    img.saliency =
        sal::load_saliency((fs::path(dir) / "saliency" / (std::string(name) + ".sal")).string());
    img.sal_diffusion = diffusion_scale_for(ds.cfg.seed, id, sal_diffusion, sal_diffusion_hi);
    img.sal_blur = sal_blur;
    img.saliency_pre = sal::preprocess(img.saliency, img.sal_diffusion, img.sal_blur, true);
    ds.by_species[static_cast<std::size_t>(img.species)].push_back(id);
  }
  return ds;
}

}  // namespace salvit::ep
