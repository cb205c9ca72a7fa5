#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "salvit/fskd.hpp"
#include "salvit/robust.hpp"
#include "salvit/synth.hpp"
#include "salvit/transduce.hpp"

namespace salvit::ep {

/// Line-based "key = value" configuration with dotted-key sections.
/// '#' starts a comment; blank lines are ignored.
class KeyValueConfig {
 public:
  static KeyValueConfig from_file(const std::string& path);
  static KeyValueConfig from_string(const std::string& text);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::string get(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback) const;
  std::vector<double> get_double_list(const std::string& key,
                                      std::vector<double> fallback) const;

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

  /// Canonical serialization (sorted keys) and its FNV-1a hash, recorded in
  /// run outputs for reproducibility.
  std::string canonical() const;
  std::uint64_t hash() const;

 private:
  std::map<std::string, std::string> values_;
};

/// Everything one run needs: model, data, optimizer, episode protocol,
/// masking-and-alignment strategy, and the transductive settings.
struct RunConfig {
  enc::EncoderConfig encoder;
  fskd::HeadConfig head;
  SynthConfig synth;
  double sal_diffusion_hi = 0.0;  // per-image jitter upper bound; 0 = fixed
  std::uint64_t seed = 1;

  // episodic protocol
  int shots = 1;
  int train_queries = 1;
  bool train_aux = true;
  std::vector<double> aux_nodes{0.25, 0.5, 0.75};
  int train_episodes = 3000;
  int eval_episodes = 200;
  bool eval_novel = true;
  int eval_queries = 1;
  int unseen_species_id = -1;

  // optimizer and loss weights
  double lr = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double lambda1 = 0.5;
  double lambda2 = 0.5;
  double lambda3 = 0.1;

  // masking and alignment
  occ::MaskStrategy mask;
  occ::AlignMode align = occ::AlignMode::kNone;
  bool detach_clean = false;

  td::TransductiveConfig transduce;

  int log_every = 100;

  static RunConfig from_config(const KeyValueConfig& kv);
  KeyValueConfig to_config() const;
};

}  // namespace salvit::ep
