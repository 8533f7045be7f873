#include "meanvc/meanflow.hpp"

#include <bit>
#include <chrono>
#include <stdexcept>

#include "meanvc/optim.hpp"

namespace meanvc {

namespace {

Tensor pad_rows(const Tensor& x, std::size_t rows) {
  if (x.rows() == rows) return x;
  Tensor out({rows, x.cols()});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) = x.at(i, j);
  return out;
}

struct PreparedItem {
  Tensor x;    // padded mel [N*fpc, bins]
  Tensor bnf;  // padded bnf [N*fpc, bnf_dim]
  std::vector<int> ids;
  Tensor row_mask;  // [N*fpc], 1 on real frames
  std::size_t n_real = 0;
  std::size_t pad = 0;
};

PreparedItem prepare_item(const TrainItem& item, const ModelConfig& cfg) {
  if (item.mel.rows() == 0) {
    throw std::invalid_argument("loss: empty training item");
  }
  if (item.bnf.rows() != item.mel.rows()) {
    throw std::invalid_argument("loss: bnf/mel length mismatch");
  }
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const std::size_t len = item.mel.rows();
  const std::size_t n_chunks = (len + fpc - 1) / fpc;
  const std::size_t nf = n_chunks * fpc;
  PreparedItem prep;
  prep.x = pad_rows(item.mel, nf);
  prep.bnf = pad_rows(item.bnf, nf);
  prep.n_real = len;
  prep.pad = nf - len;
  prep.ids.resize(n_chunks);
  for (std::size_t c = 0; c < n_chunks; ++c) prep.ids[c] = static_cast<int>(c);
  prep.row_mask = Tensor({nf});
  for (std::size_t i = 0; i < len; ++i) prep.row_mask[i] = 1.0;
  return prep;
}

// One item of the (mean-)flow-matching objective. grad_scale 0 skips the
// backward sweep.
double item_loss(ParamStore& params, const ModelConfig& cfg,
                 const TrainItem& item, std::uint64_t item_seed,
                 const MfTrainConfig& mf_cfg, bool mean_flow,
                 const ParamStore* target_params, double grad_scale) {
  PreparedItem prep = prepare_item(item, cfg);
  const std::size_t nf = prep.x.rows();
  const std::size_t bins = prep.x.cols();

  Rng rng(item_seed);
  Tensor eps = rng.normal_tensor({nf, bins});
  MfTrainConfig pair_cfg = mf_cfg;
  if (!mean_flow) pair_cfg.p_equal = 1.0;
  const TimePair pair = sample_time_pair(rng, pair_cfg);

  const Tensor z = flow_interpolate(prep.x, eps, pair.t);
  const Tensor v = conditional_velocity(prep.x, eps);

  Graph g;
  BoundParams p(g, params);
  Var bnf_v = g.leaf(prep.bnf);
  Var ref_v = g.leaf(item.ref_mel);
  Var timbre = net::timbre_encode_g(g, p, cfg, bnf_v, ref_v);
  Var cond = net::assemble_condition_g(g, cfg, timbre, item.spk);

  Tensor target;
  if (pair.r == pair.t) {
    target = v;  // mean flows reduces to plain flow matching here
  } else {
    const ParamStore& tp = target_params ? *target_params : params;
    Tensor cond_t = g.value(cond);
    if (target_params) {
      Tensor timbre_t = net::timbre_encode(tp, cfg, prep.bnf, item.ref_mel);
      cond_t = net::assemble_condition(cfg, timbre_t, item.spk);
    }
    target = mf_target(tp, cfg, prep.x, prep.ids, z, prep.ids, cond_t, cond_t,
                       pair, v);
  }

  Var pred = net::forward_u_g(g, p, cfg, g.leaf(prep.x), prep.ids, g.leaf(z),
                              prep.ids, cond, cond, g.scalar(pair.r),
                              g.scalar(pair.t));
  Var diff = g.sub(pred, g.leaf(target));
  Var sq = g.mul(diff, diff);
  if (prep.pad > 0) sq = g.scale_rows(sq, g.leaf(prep.row_mask));
  Var loss = g.affine(g.sum_all(sq),
                      1.0 / static_cast<double>(prep.n_real * bins), 0.0);
  if (grad_scale != 0.0) {
    g.backward(loss, grad_scale);
    p.accumulate_grads(params);
  }
  return g.value(loss)[0];
}

// Item noise streams hang off a content hash rather than the batch position,
// so reordering a batch cannot change which noise an item sees.
std::uint64_t item_hash(const TrainItem& item) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const std::uint64_t bits = std::bit_cast<std::uint64_t>(t[i]);
      h = (h ^ bits) * 0x100000001b3ULL;
    }
  };
  mix(item.bnf);
  mix(item.mel);
  mix(item.spk);
  return h;
}

double batch_loss(ParamStore& params, const ModelConfig& cfg,
                  const std::vector<TrainItem>& batch, std::uint64_t seed,
                  const MfTrainConfig& mf_cfg, bool mean_flow,
                  const ParamStore* target_params) {
  if (batch.empty()) throw std::invalid_argument("loss: empty batch");
  params.zero_grads();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const TrainItem& item : batch) {
    total += item_loss(params, cfg, item, derive_seed(seed, item_hash(item)),
                       mf_cfg, mean_flow, target_params, inv_b);
  }
  return total * inv_b;
}

}  // namespace

TimePair sample_time_pair(Rng& rng, const MfTrainConfig& cfg) {
  if (cfg.p_equal < 0.0 || cfg.p_equal > 1.0) {
    throw std::invalid_argument("sample_time_pair: p_equal outside [0,1]");
  }
  TimePair pair;
  bool equal;
  if (cfg.p_equal >= 1.0) {
    equal = true;
  } else if (cfg.p_equal <= 0.0) {
    equal = false;
  } else {
    equal = rng.u01() < cfg.p_equal;
  }
  if (equal) {
    pair.t = rng.u01();
    pair.r = pair.t;
  } else {
    const double a = rng.u01();
    const double b = rng.u01();
    pair.r = a < b ? a : b;
    pair.t = a < b ? b : a;
  }
  return pair;
}

Tensor mf_target(const ParamStore& params, const ModelConfig& cfg,
                 const Tensor& clean_frames, const std::vector<int>& clean_ids,
                 const Tensor& z_t, const std::vector<int>& noisy_ids,
                 const Tensor& cond_clean, const Tensor& cond_noisy,
                 TimePair pair, const Tensor& v_t) {
  Graph g(/*forward_mode=*/true);
  BoundParams p(g, params);
  Var z = g.leaf(z_t, v_t);
  Var r = g.leaf(Tensor::scalar(pair.r), Tensor::scalar(0.0));
  Var t = g.leaf(Tensor::scalar(pair.t), Tensor::scalar(1.0));
  Var out = net::forward_u_g(g, p, cfg, g.leaf(clean_frames), clean_ids, z,
                             noisy_ids, g.leaf(cond_clean), g.leaf(cond_noisy),
                             r, t);
  Tensor u = v_t;
  axpy_inplace(u, -(pair.t - pair.r), g.tangent(out));
  return u;
}

double cfm_loss(ParamStore& params, const ModelConfig& cfg,
                const std::vector<TrainItem>& batch, std::uint64_t seed) {
  return batch_loss(params, cfg, batch, seed, MfTrainConfig{}, false, nullptr);
}

double mf_loss(ParamStore& params, const ModelConfig& cfg,
               const std::vector<TrainItem>& batch, std::uint64_t seed,
               const MfTrainConfig& cfg_mf, const ParamStore* target_params) {
  return batch_loss(params, cfg, batch, seed, cfg_mf, true, target_params);
}

Tensor one_nfe_sample(const VelocityFn& f, std::vector<std::size_t> shape,
                      std::uint64_t seed) {
  Rng rng(seed);
  Tensor z = rng.normal_tensor(std::move(shape));
  Tensor u = f(z, 0.0, 1.0);
  axpy_inplace(z, -1.0, u);
  return z;
}

Tensor multi_interval_sample(const VelocityFn& f,
                             std::vector<std::size_t> shape,
                             const std::vector<double>& schedule,
                             std::uint64_t seed) {
  if (schedule.size() < 2 || schedule.front() != 1.0 || schedule.back() != 0.0) {
    throw std::invalid_argument(
        "multi_interval_sample: schedule must run from 1 to 0");
  }
  for (std::size_t i = 1; i < schedule.size(); ++i) {
    if (!(schedule[i] < schedule[i - 1])) {
      throw std::invalid_argument(
          "multi_interval_sample: schedule must be strictly descending");
    }
  }
  Rng rng(seed);
  Tensor z = rng.normal_tensor(std::move(shape));
  for (std::size_t i = 0; i + 1 < schedule.size(); ++i) {
    const double t = schedule[i];
    const double r = schedule[i + 1];
    Tensor u = f(z, r, t);
    axpy_inplace(z, -(t - r), u);
  }
  return z;
}

void train_loop(ParamStore& params, const ModelConfig& cfg,
                const std::vector<TrainItem>& data, const TrainRunConfig& run,
                const MetricSink& sink) {
  if (data.empty()) throw std::invalid_argument("train_loop: empty dataset");
  Adam opt(run.lr);
  MfTrainConfig mf_cfg;
  mf_cfg.p_equal = run.p_equal;
  for (long step = 0; step < run.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng brng(derive_seed(run.seed, 0x8000000000000000ULL ^
                                       static_cast<std::uint64_t>(step)));
    std::vector<TrainItem> batch;
    batch.reserve(static_cast<std::size_t>(run.batch_size));
    for (int i = 0; i < run.batch_size; ++i)
      batch.push_back(data[brng.uniform_int(data.size())]);
    const std::uint64_t loss_seed =
        derive_seed(run.seed, static_cast<std::uint64_t>(step));
    double loss;
    if (run.objective == TrainRunConfig::Objective::kMeanFlow) {
      loss = mf_loss(params, cfg, batch, loss_seed, mf_cfg);
    } else {
      loss = cfm_loss(params, cfg, batch, loss_seed);
    }
    opt.step(params);
    if (sink) {
      const auto t1 = std::chrono::steady_clock::now();
      StepMetric m;
      m.step = step;
      m.loss = loss;
      m.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
      sink(m);
    }
  }
}

}  // namespace meanvc
