#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "salvit/config.hpp"
#include "salvit/gradsuite.hpp"
#include "salvit/metrics.hpp"
#include "salvit/msa.hpp"
#include "salvit/train.hpp"

namespace fs = std::filesystem;
using namespace salvit;

namespace {

ep::RunConfig load_run_config(const std::string& config_path, int seed_override) {
  ep::KeyValueConfig kv = config_path.empty() ? ep::KeyValueConfig{}
                                              : ep::KeyValueConfig::from_file(config_path);
  ep::RunConfig rc = ep::RunConfig::from_config(kv);
  if (seed_override >= 0) rc.seed = static_cast<std::uint64_t>(seed_override);
  return rc;
}

ep::Dataset load_or_generate(const ep::RunConfig& rc, const std::string& data_dir) {
  if (!data_dir.empty())
    return ep::load_dataset(data_dir, rc.encoder.sal_diffusion, rc.encoder.sal_blur,
                            rc.sal_diffusion_hi);
  std::cerr << "generating dataset in memory (seed " << rc.synth.seed << ")\n";
  return ep::gen_dataset(rc.synth, rc.encoder.sal_diffusion, rc.encoder.sal_blur,
                         rc.sal_diffusion_hi);
}

void write_config_snapshot(const ep::RunConfig& rc, const std::string& out_dir) {
  fs::create_directories(out_dir);
  ep::KeyValueConfig kv = rc.to_config();
  std::ofstream os(out_dir + "/config.txt");
  os << "# config hash " << std::hex << kv.hash() << std::dec << "\n" << kv.canonical();
}

ep::EpisodeSpec eval_spec_of(const ep::RunConfig& rc) {
  ep::EpisodeSpec spec;
  spec.shots = rc.shots;
  spec.queries = rc.eval_queries;
  spec.novel_types = rc.eval_novel;
  spec.unseen_species = true;
  spec.unseen_species_id = rc.unseen_species_id;
  return spec;
}

void dump_first_episode_attention(const fskd::FskdModel& model, const ep::Dataset& ds,
                                  const ep::RunConfig& rc, const std::string& path) {
  ep::EpisodeSpec spec = eval_spec_of(rc);
  nc::Rng rng(rc.seed ^ 0xa77e);
  ep::Episode episode = ep::sample_episode(ds, spec, rng);
  nc::Graph g;
  nc::Binder bind(g, model.params);
  enc::EncodeOutput eo = enc::encode(g, episode.support[0].rgb,
                                     episode.support[0].saliency_pre, bind,
                                     fskd::FskdModel::kEncPrefix, model.enc_cfg);
  std::vector<nc::Tensor> heads;
  for (const auto& block : eo.attention)
    for (const nc::Var& h : block) heads.push_back(h.val());
  msa::write_attention_csv(path, heads);
  std::cerr << "attention written to " << path << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"saliency-guided transformer for few-shot keypoint detection"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", data_dir, ckpt_path;
  int seed = -1;
  app.add_option("--config", config_path, "key = value configuration file")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "seed override");
  app.add_option("--out", out_dir, "output directory");

  auto* gen = app.add_subcommand("gen-data", "render the synthetic dataset to disk");

  auto* train = app.add_subcommand("train", "episodic training run");
  train->add_option("--data", data_dir, "dataset directory from gen-data");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--data", data_dir, "dataset directory from gen-data");
  eval->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  bool dump_attention = false, pred_csv = false;
  eval->add_flag("--dump-attention", dump_attention, "write attention matrices as CSV");
  eval->add_flag("--pred-csv", pred_csv, "write per-prediction rows");
  std::string failure_mode = "none";
  double failure_threshold = 0.5;
  eval->add_option("--sal-failure", failure_mode, "none|threshold|reverse");
  eval->add_option("--sal-threshold", failure_threshold, "threshold for the failure sweep");

  auto* trans = app.add_subcommand("transduce",
                                   "transductive refinement comparison (one CSV row per variant)");
  trans->add_option("--data", data_dir, "dataset directory");
  trans->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();

  auto* occl = app.add_subcommand("occlude-eval", "occlusion-probability sweep");
  occl->add_option("--data", data_dir, "dataset directory");
  occl->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  std::string box_type = "gray_box";
  occl->add_option("--box-type", box_type, "gray_box|avg_pixel_box|background_crop");

  auto* gradc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  int grad_points = 10;
  gradc->add_option("--points", grad_points, "random points per case");

  auto* ablate = app.add_subcommand("ablate", "train and score encoder variants");
  std::string seed_list = "1";
  std::string variant_list = "full,vanilla_vit,cnn_only,no_ml";
  ablate->add_option("--data", data_dir, "dataset directory");
  ablate->add_option("--seeds", seed_list, "comma-separated seeds");
  ablate->add_option("--variants", variant_list, "comma-separated encoder variants");

  CLI11_PARSE(app, argc, argv);

  try {
    ep::RunConfig rc = load_run_config(config_path, seed);

    if (gen->parsed()) {
      write_config_snapshot(rc, out_dir);
      ep::Dataset ds = ep::gen_dataset(rc.synth, rc.encoder.sal_diffusion, rc.encoder.sal_blur,
                                       rc.sal_diffusion_hi);
      ep::save_dataset(out_dir, ds);
      std::cout << "wrote " << ds.images.size() << " images to " << out_dir << "\n";
      return 0;
    }

    if (train->parsed()) {
      write_config_snapshot(rc, out_dir);
      ep::Dataset ds = load_or_generate(rc, data_dir);
      ep::TrainResult tr = ep::train_run(rc, ds, out_dir, [](int step, double loss) {
        std::cerr << "step " << step << " loss " << loss << "\n";
      });
      const std::string ckpt = out_dir + "/checkpoint.ckpt";
      fskd::save_model(ckpt, tr.model,
                       {{"config_hash", std::to_string(rc.to_config().hash())}});
      std::cout << "checkpoint " << ckpt << " (final loss " << tr.final_loss << ")\n";
      return 0;
    }

    if (eval->parsed()) {
      fs::create_directories(out_dir);
      ep::Dataset ds = load_or_generate(rc, data_dir);
      fskd::FskdModel model = fskd::load_model(ckpt_path);
      if (dump_attention) dump_first_episode_attention(model, ds, rc, out_dir + "/attention.csv");
      ep::EvalOptions opt;
      opt.episodes = rc.eval_episodes;
      opt.spec = eval_spec_of(rc);
      opt.threads = 2;
      if (pred_csv) opt.pred_csv = out_dir + "/predictions.csv";
      if (failure_mode == "threshold") opt.failure = ep::SalFailure::kThreshold;
      else if (failure_mode == "reverse") opt.failure = ep::SalFailure::kReverse;
      else if (failure_mode != "none") throw std::runtime_error("bad --sal-failure");
      opt.failure_threshold = failure_threshold;
      nc::Rng rng(rc.seed ^ 0xe7a1);
      ep::EvalResult res = ep::evaluate(model, ds, opt, rng);
      ep::CsvLogger log(out_dir + "/eval.csv", "episodes,pck,mean_ne");
      std::ostringstream row;
      row << res.episodes << "," << res.pck << "," << res.mean_ne;
      log.append(row.str());
      std::cout << "pck " << res.pck << " mean_ne " << res.mean_ne << " over " << res.episodes
                << " episodes\n";
      return 0;
    }

    if (trans->parsed()) {
      fs::create_directories(out_dir);
      ep::Dataset ds = load_or_generate(rc, data_dir);
      fskd::FskdModel model = fskd::load_model(ckpt_path);
      ep::EpisodeSpec spec = eval_spec_of(rc);
      spec.queries = std::max(rc.eval_queries, 2);
      nc::Rng rng(rc.seed ^ 0x7d);
      ep::TransduceResult res = ep::eval_transductive(model, ds, spec, rc.transduce,
                                                      rc.eval_episodes, rng, 0.1, 2);
      ep::CsvLogger log(out_dir + "/transduce.csv", "method,pck");
      log.append("inductive," + std::to_string(res.pck_inductive));
      log.append("trans_avg," + std::to_string(res.pck_avg));
      log.append("trans_soft," + std::to_string(res.pck_soft));
      log.append("trans_gt," + std::to_string(res.pck_gt));
      std::cout << "inductive " << res.pck_inductive << " avg " << res.pck_avg << " soft "
                << res.pck_soft << " gt " << res.pck_gt << "\n";
      return 0;
    }

    if (occl->parsed()) {
      fs::create_directories(out_dir);
      ep::Dataset ds = load_or_generate(rc, data_dir);
      fskd::FskdModel model = fskd::load_model(ckpt_path);
      ep::CsvLogger log(out_dir + "/occlusion.csv", "box_type,prob,pck,mean_ne");
      for (double p : {0.0, 0.3, 0.5, 1.0}) {
        ep::EvalOptions opt;
        opt.episodes = rc.eval_episodes;
        opt.spec = eval_spec_of(rc);
        opt.threads = 2;
        occ::OcclusionSpec spec;
        spec.type = occ::box_type_from_string(box_type);
        spec.prob = p;
        if (p > 0.0) opt.occlusion = spec;
        nc::Rng rng(rc.seed ^ 0x0cc1);
        ep::EvalResult res = ep::evaluate(model, ds, opt, rng);
        std::ostringstream row;
        row << box_type << "," << p << "," << res.pck << "," << res.mean_ne;
        log.append(row.str());
        std::cout << "p=" << p << " pck " << res.pck << "\n";
      }
      return 0;
    }

    if (gradc->parsed()) {
      bool ok = true;
      for (const ep::GradSuiteEntry& e : ep::run_gradient_suite(grad_points)) {
        const bool pass = e.max_rel_error < 1e-4;
        ok = ok && pass;
        std::cout << (pass ? "PASS " : "FAIL ") << e.name << " max_rel_err "
                  << e.max_rel_error << "\n";
      }
      return ok ? 0 : 1;
    }

    if (ablate->parsed()) {
      fs::create_directories(out_dir);
      ep::Dataset ds = load_or_generate(rc, data_dir);
      std::vector<std::uint64_t> seeds;
      {
        std::istringstream is(seed_list);
        std::string tok;
        while (std::getline(is, tok, ',')) seeds.push_back(std::stoull(tok));
      }
      ep::CsvLogger log(out_dir + "/ablate.csv", "variant,seed,pck,mean_ne");
      std::istringstream vs(variant_list);
      std::string variant;
      while (std::getline(vs, variant, ',')) {
        for (std::uint64_t s : seeds) {
          ep::RunConfig vrc = rc;
          vrc.seed = s;
          vrc.encoder.ablation = enc::ablation_from_string(variant);
          ep::TrainResult tr = ep::train_run(vrc, ds, "");
          ep::EvalOptions opt;
          opt.episodes = rc.eval_episodes;
          opt.spec = eval_spec_of(rc);
          opt.threads = 2;
          nc::Rng rng(1000 + s);
          ep::EvalResult res = ep::evaluate(tr.model, ds, opt, rng);
          std::ostringstream row;
          row << variant << "," << s << "," << res.pck << "," << res.mean_ne;
          log.append(row.str());
          std::cout << variant << " seed " << s << ": pck " << res.pck << "\n";
        }
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
