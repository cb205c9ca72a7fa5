#include "salvit/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <atomic>
#include <memory>
#include <thread>

#include "salvit/metrics.hpp"

namespace salvit::ep {

using nc::Tensor;
using nc::Var;

namespace {

struct ViewForward {
  std::vector<Var> encodings;                       // per image (supports then queries)
  std::vector<Var> prob_maps;                       // per (query,type,scale), flattened
  Var ms_loss;                                      // mean localization loss
  std::vector<Var> theta_tilde;                     // per (image, block)
  std::vector<Var> masks;
  std::vector<Var> attention_heads;
  std::vector<std::pair<int, std::vector<int>>> masked_cells;  // image index -> cells
};

// Full forward over one episode view (possibly masked inputs).
ViewForward forward_view(nc::Binder& bind, const Episode& episode, const RunConfig& rc,
                         const std::vector<occ::MaskedView>* views) {
  nc::Graph& g = bind.graph();
  const enc::EncoderConfig& ecfg = rc.encoder;
  const fskd::HeadConfig& hcfg = rc.head;
  const double l0 = static_cast<double>(ecfg.image_size);
  const int n_support = static_cast<int>(episode.support.size());

  ViewForward out;
  auto encode_one = [&](const AnnotatedImage& img, int view_index) {
    const Tensor* rgb = &img.rgb;
    const sal::SaliencyMap* salp = &img.saliency_pre;
    const std::vector<int>* cells = nullptr;
    if (views) {
      const occ::MaskedView& mv = (*views)[static_cast<std::size_t>(view_index)];
      rgb = &mv.rgb;
      salp = &mv.saliency_pre;
      if (rc.mask.feat && !mv.cells.empty()) cells = &mv.cells;
    }
    enc::EncodeOutput eo = enc::encode(g, *rgb, *salp, bind, fskd::FskdModel::kEncPrefix, ecfg,
                                       cells);
    for (Var t : eo.theta_tilde) out.theta_tilde.push_back(t);
    for (Var m : eo.masks) out.masks.push_back(m);
    for (const auto& heads : eo.attention)
      if (!heads.empty()) out.attention_heads.push_back(heads[0]);
    return eo.tokens;
  };

  // supports: tokens and prototypes
  std::vector<std::vector<Var>> skrs(episode.type_ids.size());
  for (int si = 0; si < n_support; ++si) {
    const AnnotatedImage& img = episode.support[static_cast<std::size_t>(si)];
    Var tokens = encode_one(img, si);
    out.encodings.push_back(tokens);
    for (std::size_t t = 0; t < episode.type_ids.size(); ++t) {
      const int type = episode.type_ids[t];
      const fskd::Keypoint& kp = img.keypoints[static_cast<std::size_t>(type)];
      if (!kp.visible) continue;
      skrs[t].push_back(fskd::skr(tokens, ecfg.l, static_cast<double>(ecfg.patch), kp,
                                  hcfg.pool_sigma));
    }
  }
  std::vector<Var> protos(episode.type_ids.size());
  for (std::size_t t = 0; t < episode.type_ids.size(); ++t)
    if (!skrs[t].empty()) protos[t] = fskd::prototype_mean(skrs[t]);

  // queries: localization losses
  Var ms_acc;
  int ms_count = 0;
  for (std::size_t qi = 0; qi < episode.queries.size(); ++qi) {
    const AnnotatedImage& img = episode.queries[qi];
    Var tokens = encode_one(img, n_support + static_cast<int>(qi));
    out.encodings.push_back(tokens);
    for (std::size_t t = 0; t < episode.type_ids.size(); ++t) {
      if (!protos[t].valid()) continue;
      const int type = episode.type_ids[t];
      const fskd::Keypoint& gt = img.keypoints[static_cast<std::size_t>(type)];
      if (!gt.visible) continue;  // invisible query keypoints carry no loss
      Var fatt = fskd::modulate(tokens, protos[t]);
      Var psi = fskd::descriptor(fatt, ecfg.l, bind, fskd::FskdModel::kHeadPrefix, hcfg);
      std::vector<fskd::ScaleOutput> scales =
          fskd::localize(psi, bind, fskd::FskdModel::kHeadPrefix, hcfg);
      for (const fskd::ScaleOutput& so : scales) out.prob_maps.push_back(so.prob);
      Var loss = fskd::multi_scale_loss(scales, gt, l0, hcfg);
      ms_acc = ms_acc.valid() ? ms_acc + loss : loss;
      ++ms_count;
    }
  }
  if (ms_count > 0) out.ms_loss = ms_acc * (1.0 / static_cast<double>(ms_count));
  return out;
}

Var mean_of_vars(const std::vector<Var>& vars) {
  if (vars.empty()) return Var{};
  Var acc = vars[0];
  for (std::size_t i = 1; i < vars.size(); ++i) acc = acc + vars[i];
  return acc * (1.0 / static_cast<double>(vars.size()));
}

}  // namespace

EpisodeLossOut episode_loss(nc::Binder& bind, const Episode& episode, const RunConfig& rc,
                            nc::Rng& mask_rng) {
  nc::Graph& g = bind.graph();
  const bool masked = rc.mask.any();
  const bool aligned = rc.align != occ::AlignMode::kNone;

  // occluded view (the training view); identical to the inputs when the
  // strategy is off
  std::vector<occ::MaskedView> views;
  if (masked) {
    for (const AnnotatedImage& img : episode.support)
      views.push_back(occ::mask_train(img, rc.mask, rc.encoder.l, rc.encoder.patch, mask_rng));
    for (const AnnotatedImage& img : episode.queries)
      views.push_back(occ::mask_train(img, rc.mask, rc.encoder.l, rc.encoder.patch, mask_rng));
  }

  ViewForward occ_view = forward_view(bind, episode, rc, masked ? &views : nullptr);

  EpisodeLossOut out;
  out.masks = occ_view.masks;
  out.attention = occ_view.attention_heads;
  for (Var t : occ_view.theta_tilde) out.thetas.push_back(t.item());

  // morphology regularizer: mean over images and blocks
  Var reg;
  if (!occ_view.theta_tilde.empty()) {
    std::vector<Var> regs;
    regs.reserve(occ_view.theta_tilde.size());
    for (Var t : occ_view.theta_tilde) regs.push_back(morph::morph_reg(t, rc.encoder.morph));
    reg = mean_of_vars(regs);
  }

  Var aln;
  if (aligned) {
    ViewForward clean_view = forward_view(bind, episode, rc, nullptr);
    occ::AlignArtifacts art;
    art.detach_clean = rc.detach_clean;
    switch (rc.align) {
      case occ::AlignMode::kProbKl: {
        if (clean_view.prob_maps.size() != occ_view.prob_maps.size())
          throw std::runtime_error("alignment: view probability maps disagree");
        for (std::size_t i = 0; i < clean_view.prob_maps.size(); ++i)
          art.prob_pairs.emplace_back(clean_view.prob_maps[i], occ_view.prob_maps[i]);
        break;
      }
      case occ::AlignMode::kFeatL1:
      case occ::AlignMode::kFeatL2:
      case occ::AlignMode::kFeatMmd: {
        for (std::size_t i = 0; i < clean_view.encodings.size(); ++i)
          art.feat_pairs.emplace_back(clean_view.encodings[i], occ_view.encodings[i]);
        break;
      }
      case occ::AlignMode::kRecon: {
        // predict the clean pixels of every masked patch from the occluded
        // encoding at that cell
        std::vector<Var> preds, targets;
        const int patch = rc.encoder.patch;
        const int side = rc.encoder.image_size;
        int vi = 0;
        auto add_image = [&](const AnnotatedImage& img, int view_index, Var enc_tokens) {
          const occ::MaskedView& mv = views[static_cast<std::size_t>(view_index)];
          if (mv.cells.empty()) return;
          const int d = enc_tokens.dim(1);
          for (int cell : mv.cells) {
            std::vector<std::size_t> idx(static_cast<std::size_t>(d));
            for (int j = 0; j < d; ++j)
              idx[static_cast<std::size_t>(j)] = static_cast<std::size_t>(cell * d + j);
            Var row = nc::gather(enc_tokens, idx, {1, d});
            preds.push_back(nc::linear(row, bind("recon.w"), bind("recon.b")));
            Tensor target({1, 3 * patch * patch});
            const int cy = cell / rc.encoder.l, cx = cell % rc.encoder.l;
            int o = 0;
            const std::size_t plane = static_cast<std::size_t>(side) * side;
            for (int c = 0; c < 3; ++c)
              for (int y = cy * patch; y < (cy + 1) * patch; ++y)
                for (int x = cx * patch; x < (cx + 1) * patch; ++x)
                  target[static_cast<std::size_t>(o++)] =
                      img.rgb[c * plane + static_cast<std::size_t>(y) * side + x];
            targets.push_back(g.input(std::move(target)));
          }
        };
        for (std::size_t si = 0; si < episode.support.size(); ++si, ++vi)
          add_image(episode.support[si], vi, occ_view.encodings[static_cast<std::size_t>(vi)]);
        for (std::size_t qi = 0; qi < episode.queries.size(); ++qi, ++vi)
          add_image(episode.queries[qi], vi, occ_view.encodings[static_cast<std::size_t>(vi)]);
        if (!preds.empty()) {
          art.recon_pred = nc::concat_rows(preds);
          art.recon_target = nc::concat_rows(targets);
        }
        break;
      }
      case occ::AlignMode::kNonOcclLoss:
        art.clean_ms = clean_view.ms_loss;
        break;
      case occ::AlignMode::kNone:
        break;
    }
    const bool artifacts_present = !art.prob_pairs.empty() || !art.feat_pairs.empty() ||
                                   art.recon_pred.valid() || art.clean_ms.valid();
    if (artifacts_present) aln = occ::align_loss(rc.align, art);
  }

  if (!occ_view.ms_loss.valid())
    throw std::runtime_error("episode produced no supervised keypoints");
  out.total = occ::total_loss(occ_view.ms_loss, reg, aln, rc.lambda1, rc.lambda2, rc.lambda3);
  out.ms = occ_view.ms_loss.item();
  out.reg = reg.valid() ? reg.item() : 0.0;
  out.aln = aln.valid() ? aln.item() : 0.0;
  return out;
}

namespace {

std::string nan_diagnostics(const EpisodeLossOut& lo) {
  std::ostringstream os;
  os << "mask stats:";
  for (std::size_t i = 0; i < lo.masks.size() && i < 4; ++i) {
    const Tensor& m = lo.masks[i].val();
    double mn = 1e300, mx = -1e300;
    for (std::size_t k = 0; k < m.size(); ++k) {
      mn = std::min(mn, m[k]);
      mx = std::max(mx, m[k]);
    }
    os << " [" << mn << "," << mx << "]";
  }
  os << "; attention stats:";
  for (std::size_t i = 0; i < lo.attention.size() && i < 4; ++i) {
    const Tensor& a = lo.attention[i].val();
    double mn = 1e300, mx = -1e300;
    bool finite = true;
    for (std::size_t k = 0; k < a.size(); ++k) {
      if (!std::isfinite(a[k])) finite = false;
      mn = std::min(mn, a[k]);
      mx = std::max(mx, a[k]);
    }
    os << " [" << mn << "," << mx << (finite ? "" : ",nonfinite") << "]";
  }
  return os.str();
}

}  // namespace

TrainResult train_run(const RunConfig& rc, const Dataset& ds, const std::string& out_dir,
                      const ProgressFn& progress) {
  nc::Rng root(rc.seed);
  nc::Rng init_rng = root.fork(1);
  nc::Rng episode_rng = root.fork(2);
  nc::Rng mask_rng = root.fork(3);

  TrainResult result;
  result.model = fskd::make_model(rc.encoder, rc.head, init_rng);
  if (rc.align == occ::AlignMode::kRecon)
    occ::init_recon_params(result.model.params, "recon", rc.encoder.out_dim(), rc.encoder.patch,
                           init_rng);
  nc::Adam opt(rc.lr, rc.adam_beta1, rc.adam_beta2);

  EpisodeSpec spec;
  spec.shots = rc.shots;
  spec.queries = rc.train_queries;
  spec.novel_types = false;
  spec.unseen_species = false;
  spec.use_aux = rc.train_aux;
  spec.aux_nodes = rc.aux_nodes;
  spec.unseen_species_id = rc.unseen_species_id;

  std::unique_ptr<CsvLogger> log;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    result.metrics_csv = out_dir + "/metrics.csv";
    log = std::make_unique<CsvLogger>(result.metrics_csv,
                                      "step,loss,ms,reg,aln,theta_mean,theta_per_image");
  }

  for (int step = 1; step <= rc.train_episodes; ++step) {
    Episode episode = sample_episode(ds, spec, episode_rng);
    nc::Graph g;
    nc::Binder bind(g, result.model.params);
    EpisodeLossOut lo = episode_loss(bind, episode, rc, mask_rng);
    const double loss = lo.total.item();
    if (!std::isfinite(loss)) {
      const std::string diag = nan_diagnostics(lo);
      std::cerr << "training aborted at step " << step << ": non-finite loss; " << diag
                << std::endl;
      throw std::runtime_error("non-finite loss at step " + std::to_string(step) + "; " + diag);
    }
    g.backward(lo.total);
    opt.step(result.model.params, g.named_grads());
    result.final_loss = loss;
    result.steps = step;
    if (progress && (step % rc.log_every == 0 || step == rc.train_episodes))
      progress(step, loss);
    if (log && (step % rc.log_every == 0 || step == rc.train_episodes)) {
      double tmean = 0.0;
      std::string tlist;
      for (std::size_t i = 0; i < lo.thetas.size(); ++i) {
        tmean += lo.thetas[i];
        if (i) tlist += ";";
        tlist += std::to_string(lo.thetas[i]);
      }
      if (!lo.thetas.empty()) tmean /= static_cast<double>(lo.thetas.size());
      std::ostringstream row;
      row << step << "," << loss << "," << lo.ms << "," << lo.reg << "," << lo.aln << ","
          << tmean << "," << tlist;
      log->append(row.str());
    }
  }
  return result;
}

namespace {

struct EpisodeScore {
  double pck = 0.0;
  double ne_sum = 0.0;
  int predictions = 0;
  std::vector<std::string> pred_rows;
};

EpisodeScore score_episode(const Episode& episode, const fskd::FskdModel& model,
                           const EvalOptions& opt, std::uint64_t episode_id) {
  const fskd::EpisodeInference inf = fskd::detect_episode(episode, model);
  EpisodeScore score;
  std::vector<bool> flags;
  const double l0 = static_cast<double>(model.enc_cfg.image_size);
  for (std::size_t qi = 0; qi < episode.queries.size(); ++qi) {
    const AnnotatedImage& q = episode.queries[qi];
    for (std::size_t t = 0; t < inf.type_ids.size(); ++t) {
      const int type = inf.type_ids[t];
      const fskd::Keypoint& gt = q.keypoints[static_cast<std::size_t>(type)];
      if (!gt.visible) continue;
      const fskd::KeypointPrediction& p = inf.queries[qi][t].prediction;
      const bool ok = pck_correct(p.x, p.y, gt.x, gt.y, q.object_box, opt.pck_tau);
      flags.push_back(ok);
      score.ne_sum += normalized_error(p.x, p.y, gt.x, gt.y, l0, l0);
      ++score.predictions;
      if (!opt.pred_csv.empty()) {
        std::ostringstream row;
        row << episode_id << "," << qi << "," << type << "," << p.x << "," << p.y << ","
            << p.cov[0] << "," << p.cov[1] << "," << p.cov[2] << "," << p.cov[3] << ","
            << p.score << "," << (ok ? 1 : 0);
        score.pred_rows.push_back(row.str());
      }
    }
  }
  score.pck = pck_score(flags);
  return score;
}

template <typename Fn>
void run_indexed(int count, int threads, const Fn& fn) {
  if (threads <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
    });
  for (std::thread& th : pool) th.join();
}

}  // namespace

EvalResult evaluate(const fskd::FskdModel& model, const Dataset& ds, const EvalOptions& opt,
                    nc::Rng& rng) {
  // sample every episode up front so threading cannot change the stream
  std::vector<Episode> episodes;
  episodes.reserve(static_cast<std::size_t>(opt.episodes));
  for (int e = 0; e < opt.episodes; ++e) {
    Episode ep = sample_episode(ds, opt.spec, rng);
    ep.id = static_cast<std::uint64_t>(e);
    if (opt.occlusion) {
      for (AnnotatedImage& q : ep.queries)
        for (int type : ep.type_ids) {
          const fskd::Keypoint kp = q.keypoints[static_cast<std::size_t>(type)];
          if (!kp.visible) continue;
          if (rng.uniform() < opt.occlusion->prob)
            occ::occlude_test(q, kp, *opt.occlusion, rng);
        }
    }
    if (opt.failure != SalFailure::kNone) {
      auto apply_failure = [&](AnnotatedImage& img) {
        img.saliency = sal::simulate_failure(
            img.saliency,
            opt.failure == SalFailure::kReverse ? sal::FailureMode::kReverse
                                                : sal::FailureMode::kThreshold,
            opt.failure_threshold);
        img.saliency_pre =
            sal::preprocess(img.saliency, img.sal_diffusion, img.sal_blur, true);
      };
      for (AnnotatedImage& s : ep.support) apply_failure(s);
      for (AnnotatedImage& q : ep.queries) apply_failure(q);
    }
    episodes.push_back(std::move(ep));
  }

  std::vector<EpisodeScore> scores(episodes.size());
  run_indexed(static_cast<int>(episodes.size()), opt.threads, [&](int i) {
    scores[static_cast<std::size_t>(i)] =
        score_episode(episodes[static_cast<std::size_t>(i)], model, opt,
                      episodes[static_cast<std::size_t>(i)].id);
  });

  EvalResult out;
  out.episodes = static_cast<int>(episodes.size());
  double ne_sum = 0.0;
  std::unique_ptr<CsvLogger> pred_log;
  if (!opt.pred_csv.empty())
    pred_log = std::make_unique<CsvLogger>(
        opt.pred_csv,
        "episode,query,kp_type,x,y,cov_xx,cov_xy,cov_yx,cov_yy,score,correct");
  for (const EpisodeScore& s : scores) {
    out.pck += s.pck;
    ne_sum += s.ne_sum;
    out.predictions += s.predictions;
    if (pred_log)
      for (const std::string& row : s.pred_rows) pred_log->append(row);
  }
  if (!scores.empty()) out.pck /= static_cast<double>(scores.size());
  if (out.predictions > 0) out.mean_ne = ne_sum / out.predictions;
  return out;
}

TransduceResult eval_transductive(const fskd::FskdModel& model, const Dataset& ds,
                                  const EpisodeSpec& spec, const td::TransductiveConfig& tcfg,
                                  int episodes, nc::Rng& rng, double pck_tau, int threads) {
  std::vector<Episode> eps;
  eps.reserve(static_cast<std::size_t>(episodes));
  for (int e = 0; e < episodes; ++e) eps.push_back(sample_episode(ds, spec, rng));

  struct Score {
    double ind = 0, avg = 0, soft = 0, gt = 0;
  };
  std::vector<Score> scores(eps.size());

  auto pck_of = [&](const Episode& episode, const fskd::EpisodeInference& inf) {
    std::vector<bool> flags;
    for (std::size_t qi = 0; qi < episode.queries.size(); ++qi) {
      const AnnotatedImage& q = episode.queries[qi];
      for (std::size_t t = 0; t < inf.type_ids.size(); ++t) {
        const fskd::Keypoint& gt = q.keypoints[static_cast<std::size_t>(inf.type_ids[t])];
        if (!gt.visible) continue;
        const fskd::KeypointPrediction& p = inf.queries[qi][t].prediction;
        flags.push_back(pck_correct(p.x, p.y, gt.x, gt.y, q.object_box, pck_tau));
      }
    }
    return pck_score(flags);
  };

  run_indexed(static_cast<int>(eps.size()), threads, [&](int i) {
    const Episode& episode = eps[static_cast<std::size_t>(i)];
    fskd::EpisodeInference first = fskd::detect_episode(episode, model);
    Score s;
    s.ind = pck_of(episode, first);

    auto harvested = td::harvest(first, model, tcfg.top_w);
    std::vector<std::vector<td::Candidate>> selected(harvested.size());
    for (std::size_t t = 0; t < harvested.size(); ++t)
      selected[t] = td::select_top_eta(harvested[t], tcfg.eta);

    const auto protos_avg = td::refine_avg_baseline(first.skrs, selected);
    const auto protos_soft = td::refine(first.prototypes, first.skrs, selected, tcfg);
    const auto protos_gt = td::refine_gt_oracle(first.prototypes, first.skrs, selected, episode,
                                                first.type_ids, pck_tau, tcfg);

    s.avg = pck_of(episode, fskd::redetect_with_prototypes(episode, model, protos_avg));
    s.soft = pck_of(episode, fskd::redetect_with_prototypes(episode, model, protos_soft));
    s.gt = pck_of(episode, fskd::redetect_with_prototypes(episode, model, protos_gt));
    scores[static_cast<std::size_t>(i)] = s;
  });

  TransduceResult out;
  out.episodes = static_cast<int>(eps.size());
  for (const Score& s : scores) {
    out.pck_inductive += s.ind;
    out.pck_avg += s.avg;
    out.pck_soft += s.soft;
    out.pck_gt += s.gt;
  }
  if (!eps.empty()) {
    const double inv = 1.0 / static_cast<double>(eps.size());
    out.pck_inductive *= inv;
    out.pck_avg *= inv;
    out.pck_soft *= inv;
    out.pck_gt *= inv;
  }
  return out;
}

OverfitResult overfit_single_episode(const RunConfig& rc, const Episode& episode, int max_steps,
                                     double target_ms, const ProgressFn& progress) {
  nc::Rng root(rc.seed);
  nc::Rng init_rng = root.fork(1);
  nc::Rng mask_rng = root.fork(3);
  fskd::FskdModel model = fskd::make_model(rc.encoder, rc.head, init_rng);
  nc::Adam opt(rc.lr, rc.adam_beta1, rc.adam_beta2);

  EvalOptions opt_eval;  // unused fields; pck via direct comparison below
  OverfitResult out;
  for (int step = 1; step <= max_steps; ++step) {
    nc::Graph g;
    nc::Binder bind(g, model.params);
    EpisodeLossOut lo = episode_loss(bind, episode, rc, mask_rng);
    if (!std::isfinite(lo.total.item()))
      throw std::runtime_error("overfit: non-finite loss at step " + std::to_string(step));
    g.backward(lo.total);
    opt.step(model.params, g.named_grads());
    out.final_ms = lo.ms;
    out.steps = step;
    if (progress && step % 100 == 0) progress(step, lo.ms);

    if (lo.ms < target_ms || step == max_steps) {
      const fskd::EpisodeInference inf = fskd::detect_episode(episode, model);
      std::vector<bool> flags;
      for (std::size_t qi = 0; qi < episode.queries.size(); ++qi) {
        const AnnotatedImage& q = episode.queries[qi];
        for (std::size_t t = 0; t < inf.type_ids.size(); ++t) {
          const fskd::Keypoint& gt = q.keypoints[static_cast<std::size_t>(inf.type_ids[t])];
          if (!gt.visible) continue;
          const fskd::KeypointPrediction& p = inf.queries[qi][t].prediction;
          flags.push_back(pck_correct(p.x, p.y, gt.x, gt.y, q.object_box, 0.1));
        }
      }
      out.pck = pck_score(flags);
      if (out.pck == 100.0 && lo.ms < target_ms) return out;
    }
  }
  return out;
}

}  // namespace salvit::ep
