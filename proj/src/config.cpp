#include "salvit/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace salvit::ep {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config: " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return from_string(buf.str());
}

KeyValueConfig KeyValueConfig::from_string(const std::string& text) {
  KeyValueConfig kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(lineno) + " has no '='");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error("config line " + std::to_string(lineno) + " has empty key");
    kv.values_[key] = value;
  }
  return kv;
}

std::string KeyValueConfig::get(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

int KeyValueConfig::get_int(const std::string& key, int fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : std::stoi(it->second);
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : std::stod(it->second);
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::runtime_error("config key " + key + " is not a boolean: " + v);
}

std::vector<int> KeyValueConfig::get_int_list(const std::string& key,
                                              std::vector<int> fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<int> out;
  std::istringstream is(it->second);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stoi(trim(tok)));
  return out;
}

std::vector<double> KeyValueConfig::get_double_list(const std::string& key,
                                                    std::vector<double> fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<double> out;
  std::istringstream is(it->second);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stod(trim(tok)));
  return out;
}

std::string KeyValueConfig::canonical() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
  return os.str();
}

std::uint64_t KeyValueConfig::hash() const {
  const std::string s = canonical();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

RunConfig RunConfig::from_config(const KeyValueConfig& kv) {
  RunConfig rc;
  rc.seed = static_cast<std::uint64_t>(kv.get_int("seed", 1));

  enc::EncoderConfig& e = rc.encoder;
  e.image_size = kv.get_int("encoder.image_size", e.image_size);
  e.patch = kv.get_int("encoder.patch", e.patch);
  e.l = kv.get_int("encoder.l", e.l);
  e.d_raw = kv.get_int("encoder.d_raw", e.d_raw);
  e.d_vit = kv.get_int("encoder.d_vit", e.d_vit);
  e.blocks = kv.get_int("encoder.blocks", e.blocks);
  e.ffn_mult = kv.get_int("encoder.ffn_mult", e.ffn_mult);
  e.ablation = enc::ablation_from_string(kv.get("encoder.ablation", "full"));
  e.norm_raw = kv.get_bool("encoder.norm_raw", e.norm_raw);
  e.sal_diffusion = kv.get_double("saliency.diffusion", e.sal_diffusion);
  e.sal_blur = kv.get_double("saliency.blur", e.sal_blur);
  rc.sal_diffusion_hi = kv.get_double("saliency.diffusion_hi", 0.0);

  const std::string kernel = kv.get("attn.kernel", "softmax");
  e.attn.kernel = kernel == "rbf" ? msa::AttnKernel::kRbf : msa::AttnKernel::kSoftmax;
  e.attn.heads = kv.get_int("attn.heads", e.attn.heads);
  e.attn.head_dim = kv.get_int("attn.head_dim", e.attn.head_dim);
  e.attn.beta = kv.get_double("attn.beta", e.attn.beta);
  e.attn.masking_j = kv.get_double("attn.masking_j", e.attn.masking_j);
  e.attn.use_pe = kv.get_bool("attn.use_pe", e.attn.use_pe);
  e.attn.rbf_normalize = kv.get_bool("attn.rbf_normalize", e.attn.rbf_normalize);
  const std::string sim = kv.get("attn.sim", "harmonic");
  e.attn.sim = sim == "dot" ? msa::SimVariant::kDot
                            : (sim == "arithmetic" ? msa::SimVariant::kArithmetic
                                                   : msa::SimVariant::kHarmonic);

  e.morph.rho1 = kv.get_double("morph.rho1", e.morph.rho1);
  e.morph.rho2 = kv.get_double("morph.rho2", e.morph.rho2);
  e.morph.rho3 = kv.get_double("morph.rho3", e.morph.rho3);
  e.morph.d_e = kv.get_int("morph.d_e", e.morph.d_e);
  e.morph.mpg_hidden = kv.get_int("morph.mpg_hidden", e.morph.mpg_hidden);
  e.morph.patch = e.patch;

  fskd::HeadConfig& h = rc.head;
  h.scales = kv.get_int_list("head.scales", h.scales);
  h.d_v = kv.get_int("head.d_v", h.d_v);
  h.d_desc = kv.get_int("head.d_desc", h.d_desc);
  h.desc_min_side = kv.get_int("head.desc_min_side", h.desc_min_side);
  h.omega_eps = kv.get_double("head.omega_eps", h.omega_eps);
  h.pool_sigma = kv.get_double("head.pool_sigma", h.pool_sigma);

  SynthConfig& s = rc.synth;
  s.species = kv.get_int("synth.species", s.species);
  s.per_species = kv.get_int("synth.per_species", s.per_species);
  s.image_size = kv.get_int("synth.image_size", rc.encoder.image_size);
  s.seed = static_cast<std::uint64_t>(kv.get_int("synth.seed", 1));
  s.distractors_lo = kv.get_int("synth.distractors_lo", s.distractors_lo);
  s.distractors_hi = kv.get_int("synth.distractors_hi", s.distractors_hi);
  s.pixel_noise = kv.get_double("synth.pixel_noise", s.pixel_noise);

  rc.shots = kv.get_int("train.shots", rc.shots);
  rc.train_queries = kv.get_int("train.queries", rc.train_queries);
  rc.train_aux = kv.get_bool("train.aux", rc.train_aux);
  rc.aux_nodes = kv.get_double_list("train.aux_nodes", rc.aux_nodes);
  rc.train_episodes = kv.get_int("train.episodes", rc.train_episodes);
  rc.eval_episodes = kv.get_int("eval.episodes", rc.eval_episodes);
  rc.eval_novel = kv.get_bool("eval.novel", rc.eval_novel);
  rc.eval_queries = kv.get_int("eval.queries", rc.eval_queries);
  rc.unseen_species_id = kv.get_int("split.unseen_species", rc.unseen_species_id);

  rc.lr = kv.get_double("optim.lr", rc.lr);
  rc.adam_beta1 = kv.get_double("optim.beta1", rc.adam_beta1);
  rc.adam_beta2 = kv.get_double("optim.beta2", rc.adam_beta2);
  rc.lambda1 = kv.get_double("loss.lambda1", rc.lambda1);
  rc.lambda2 = kv.get_double("loss.lambda2", rc.lambda2);
  rc.lambda3 = kv.get_double("loss.lambda3", rc.lambda3);

  rc.mask.rgb = kv.get_bool("maa.mask_rgb", false);
  rc.mask.sal = kv.get_bool("maa.mask_sal", false);
  rc.mask.feat = kv.get_bool("maa.mask_feat", false);
  rc.mask.min_patches = kv.get_int("maa.min_patches", rc.mask.min_patches);
  rc.mask.max_patches = kv.get_int("maa.max_patches", rc.mask.max_patches);
  rc.align = occ::align_mode_from_string(kv.get("maa.align", "none"));
  rc.detach_clean = kv.get_bool("maa.detach_clean", false);

  rc.transduce.top_w = kv.get_int("transduce.w", rc.transduce.top_w);
  rc.transduce.eta = kv.get_int("transduce.eta", rc.transduce.eta);
  rc.transduce.kappa = kv.get_double("transduce.kappa", rc.transduce.kappa);
  rc.transduce.sigma = kv.get_double("transduce.sigma", rc.transduce.sigma);
  rc.transduce.normalize = kv.get_bool("transduce.normalize", rc.transduce.normalize);

  rc.log_every = kv.get_int("train.log_every", rc.log_every);
  return rc;
}

KeyValueConfig RunConfig::to_config() const {
  KeyValueConfig kv;
  auto put_int = [&kv](const std::string& k, long long v) { kv.set(k, std::to_string(v)); };
  auto put_dbl = [&kv](const std::string& k, double v) {
    std::ostringstream os;
    os << v;
    kv.set(k, os.str());
  };
  auto put_bool = [&kv](const std::string& k, bool v) { kv.set(k, v ? "1" : "0"); };

  put_int("seed", static_cast<long long>(seed));
  put_int("encoder.image_size", encoder.image_size);
  put_int("encoder.patch", encoder.patch);
  put_int("encoder.l", encoder.l);
  put_int("encoder.d_raw", encoder.d_raw);
  put_int("encoder.d_vit", encoder.d_vit);
  put_int("encoder.blocks", encoder.blocks);
  put_int("encoder.ffn_mult", encoder.ffn_mult);
  kv.set("encoder.ablation", enc::to_string(encoder.ablation));
  put_bool("encoder.norm_raw", encoder.norm_raw);
  put_dbl("saliency.diffusion", encoder.sal_diffusion);
  put_dbl("saliency.blur", encoder.sal_blur);
  put_dbl("saliency.diffusion_hi", sal_diffusion_hi);
  kv.set("attn.kernel", encoder.attn.kernel == msa::AttnKernel::kRbf ? "rbf" : "softmax");
  put_int("attn.heads", encoder.attn.heads);
  put_int("attn.head_dim", encoder.attn.head_dim);
  put_dbl("attn.beta", encoder.attn.beta);
  put_dbl("attn.masking_j", encoder.attn.masking_j);
  put_bool("attn.use_pe", encoder.attn.use_pe);
  put_bool("attn.rbf_normalize", encoder.attn.rbf_normalize);
  kv.set("attn.sim", encoder.attn.sim == msa::SimVariant::kDot
                         ? "dot"
                         : (encoder.attn.sim == msa::SimVariant::kArithmetic ? "arithmetic"
                                                                             : "harmonic"));
  put_dbl("morph.rho1", encoder.morph.rho1);
  put_dbl("morph.rho2", encoder.morph.rho2);
  put_dbl("morph.rho3", encoder.morph.rho3);
  put_int("morph.d_e", encoder.morph.d_e);
  put_int("morph.mpg_hidden", encoder.morph.mpg_hidden);
  {
    std::string s;
    for (std::size_t i = 0; i < head.scales.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(head.scales[i]);
    }
    kv.set("head.scales", s);
  }
  put_int("head.d_v", head.d_v);
  put_int("head.d_desc", head.d_desc);
  put_int("head.desc_min_side", head.desc_min_side);
  put_dbl("head.omega_eps", head.omega_eps);
  put_dbl("head.pool_sigma", head.pool_sigma);
  put_int("synth.species", synth.species);
  put_int("synth.per_species", synth.per_species);
  put_int("synth.image_size", synth.image_size);
  put_int("synth.seed", static_cast<long long>(synth.seed));
  put_int("synth.distractors_lo", synth.distractors_lo);
  put_int("synth.distractors_hi", synth.distractors_hi);
  put_dbl("synth.pixel_noise", synth.pixel_noise);
  put_int("train.shots", shots);
  put_int("train.queries", train_queries);
  put_bool("train.aux", train_aux);
  {
    std::ostringstream os;
    for (std::size_t i = 0; i < aux_nodes.size(); ++i) {
      if (i) os << ",";
      os << aux_nodes[i];
    }
    kv.set("train.aux_nodes", os.str());
  }
  put_int("train.episodes", train_episodes);
  put_int("eval.episodes", eval_episodes);
  put_bool("eval.novel", eval_novel);
  put_int("eval.queries", eval_queries);
  put_int("split.unseen_species", unseen_species_id);
  put_dbl("optim.lr", lr);
  put_dbl("optim.beta1", adam_beta1);
  put_dbl("optim.beta2", adam_beta2);
  put_dbl("loss.lambda1", lambda1);
  put_dbl("loss.lambda2", lambda2);
  put_dbl("loss.lambda3", lambda3);
  put_bool("maa.mask_rgb", mask.rgb);
  put_bool("maa.mask_sal", mask.sal);
  put_bool("maa.mask_feat", mask.feat);
  put_int("maa.min_patches", mask.min_patches);
  put_int("maa.max_patches", mask.max_patches);
  kv.set("maa.align", occ::to_string(align));
  put_bool("maa.detach_clean", detach_clean);
  put_int("transduce.w", transduce.top_w);
  put_int("transduce.eta", transduce.eta);
  put_dbl("transduce.kappa", transduce.kappa);
  put_dbl("transduce.sigma", transduce.sigma);
  put_bool("transduce.normalize", transduce.normalize);
  put_int("train.log_every", log_every);
  return kv;
}

}  // namespace salvit::ep
