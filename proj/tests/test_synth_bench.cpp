#include <doctest.h>

#include <chrono>
#include <cmath>
#include <stdexcept>
#include <thread>
#include <vector>

#include "helpers.hpp"
#include "meanvc/net.hpp"
#include "meanvc/synth_bench.hpp"

using namespace meanvc;

namespace {

SynthConfig small_synth() {
  SynthConfig cfg;
  cfg.vocab = 8;
  cfg.mel_bins = 4;
  cfg.bnf_dim = 6;
  cfg.n_speakers = 3;
  cfg.spk_dim = 4;
  cfg.min_len = 6;
  cfg.max_len = 10;
  cfg.ref_frames = 4;
  cfg.n_items = 8;
  cfg.sigma_data = 0.1;
  cfg.seed = 11;
  return cfg;
}

}  // namespace

TEST_CASE("synthetic config validation") {
  SynthConfig cfg = small_synth();
  cfg.validate();
  cfg.vocab = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_synth();
  cfg.sigma_data = -0.1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_synth();
  cfg.max_len = cfg.min_len - 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("same seed reproduces the dataset exactly") {
  const SynthConfig cfg = small_synth();
  const SynthDataset a = gen_dataset(cfg);
  const SynthDataset b = gen_dataset(cfg);
  REQUIRE(a.items.size() == cfg.n_items);
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    CHECK(a.items[i].speaker == b.items[i].speaker);
    CHECK(a.items[i].codes == b.items[i].codes);
    REQUIRE(a.items[i].train.mel.size() == b.items[i].train.mel.size());
    for (std::size_t j = 0; j < a.items[i].train.mel.size(); ++j)
      CHECK(a.items[i].train.mel[j] == b.items[i].train.mel[j]);
  }
  SynthConfig other = cfg;
  other.seed = 12;
  const SynthDataset c = gen_dataset(other);
  bool differs = false;
  for (std::size_t j = 0; j < a.items[0].train.mel.size() &&
                          j < c.items[0].train.mel.size();
       ++j)
    differs = differs || a.items[0].train.mel[j] != c.items[0].train.mel[j];
  CHECK(differs);
}

TEST_CASE("noiseless data lands exactly on the oracle mean") {
  SynthConfig cfg = small_synth();
  cfg.sigma_data = 0.0;
  const SynthDataset ds = gen_dataset(cfg);
  for (const SynthItem& item : ds.items) {
    for (std::size_t f = 0; f < item.codes.size(); ++f) {
      const Tensor m = oracle_mean(item.codes[f], static_cast<int>(f),
                                   item.speaker, cfg);
      for (std::size_t j = 0; j < m.size(); ++j)
        CHECK(item.train.mel.at(f, j) == m[j]);
    }
    // reference audio is noiseless by construction regardless of sigma
    CHECK(item.train.ref_mel.rows() == cfg.ref_frames);
  }
}

TEST_CASE("noisy data scatters around the oracle with the configured sigma") {
  SynthConfig cfg = small_synth();
  cfg.n_items = 64;
  cfg.sigma_data = 0.2;
  const SynthDataset ds = gen_dataset(cfg);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const SynthItem& item : ds.items) {
    for (std::size_t f = 0; f < item.codes.size(); ++f) {
      const Tensor m = oracle_mean(item.codes[f], static_cast<int>(f),
                                   item.speaker, cfg);
      for (std::size_t j = 0; j < m.size(); ++j) {
        const double d = item.train.mel.at(f, j) - m[j];
        sum += d;
        sq += d * d;
        ++n;
      }
    }
  }
  const double mean = sum / static_cast<double>(n);
  const double var = sq / static_cast<double>(n) - mean * mean;
  CHECK(std::fabs(mean) < 5.0 * cfg.sigma_data / std::sqrt(static_cast<double>(n)));
  CHECK(var == doctest::Approx(cfg.sigma_data * cfg.sigma_data).epsilon(0.1));
}

TEST_CASE("oracle and embeddings reject out-of-range queries") {
  const SynthConfig cfg = small_synth();
  CHECK_THROWS_AS(oracle_mean(-1, 0, 0, cfg), std::invalid_argument);
  CHECK_THROWS_AS(oracle_mean(cfg.vocab, 0, 0, cfg), std::invalid_argument);
  CHECK_THROWS_AS(oracle_mean(0, 0, cfg.n_speakers, cfg),
                  std::invalid_argument);
  CHECK_THROWS_AS(speaker_embedding(-1, cfg), std::invalid_argument);
  CHECK_THROWS_AS(speaker_embedding(cfg.n_speakers, cfg),
                  std::invalid_argument);
}

TEST_CASE("speakers are distinct in both map and embedding") {
  const SynthConfig cfg = small_synth();
  const Tensor m0 = oracle_mean(2, 5, 0, cfg);
  const Tensor m1 = oracle_mean(2, 5, 1, cfg);
  bool map_differs = false;
  for (std::size_t j = 0; j < m0.size(); ++j)
    map_differs = map_differs || m0[j] != m1[j];
  CHECK(map_differs);

  const Tensor e0 = speaker_embedding(0, cfg);
  const Tensor e1 = speaker_embedding(1, cfg);
  bool emb_differs = false;
  for (std::size_t j = 0; j < e0.size(); ++j)
    emb_differs = emb_differs || e0[j] != e1[j];
  CHECK(emb_differs);

  // embeddings are deterministic functions of (speaker, seed)
  const Tensor e0b = speaker_embedding(0, cfg);
  for (std::size_t j = 0; j < e0.size(); ++j) CHECK(e0[j] == e0b[j]);
}

TEST_CASE("bnf rows are the code embedding rows") {
  const SynthConfig cfg = small_synth();
  const SynthDataset ds = gen_dataset(cfg);
  // two frames with the same code must carry identical bnf rows
  for (const SynthItem& item : ds.items) {
    for (std::size_t a = 0; a < item.codes.size(); ++a)
      for (std::size_t b = a + 1; b < item.codes.size(); ++b) {
        if (item.codes[a] != item.codes[b]) continue;
        for (std::size_t j = 0; j < item.train.bnf.cols(); ++j)
          CHECK(item.train.bnf.at(a, j) == item.train.bnf.at(b, j));
      }
  }
}

TEST_CASE("real-time-factor measurement brackets a known sleep") {
  const double rtf = measure_rtf(
      [] { std::this_thread::sleep_for(std::chrono::milliseconds(16)); },
      160.0, 3);
  CHECK(rtf > 0.08);
  CHECK(rtf < 0.13);
  const double fast = measure_rtf([] {}, 160.0, 3);
  CHECK(fast < 0.01);
  CHECK_THROWS_AS(measure_rtf([] {}, 0.0, 3), std::invalid_argument);
  CHECK_THROWS_AS(measure_rtf([] {}, -1.0, 3), std::invalid_argument);
  CHECK_THROWS_AS(measure_rtf([] {}, 160.0, 0), std::invalid_argument);
}

TEST_CASE("latency accounting is exact arithmetic") {
  const LatencyReport r = latency_report(160.0, {51.52});
  CHECK(r.chunk_ms == 160.0);
  CHECK(r.infer_mean_ms == 51.52);
  CHECK(r.infer_p95_ms == 51.52);
  CHECK(r.rtf == doctest::Approx(51.52 / 160.0).epsilon(1e-12));
  CHECK(r.total_latency_ms == doctest::Approx(211.52).epsilon(1e-12));

  // instantaneous inference leaves only the buffering latency
  const LatencyReport z = latency_report(160.0, {0.0, 0.0});
  CHECK(z.total_latency_ms == 160.0);
  CHECK(z.rtf == 0.0);

  // halving the chunk length halves the buffering term
  const LatencyReport h = latency_report(80.0, {51.52});
  CHECK(r.total_latency_ms - h.total_latency_ms == doctest::Approx(80.0));

  // p95 picks the ceil(0.95 n)-th order statistic
  std::vector<double> samples;
  for (int i = 1; i <= 100; ++i) samples.push_back(static_cast<double>(i));
  CHECK(latency_report(100.0, samples).infer_p95_ms == 95.0);

  CHECK_THROWS_AS(latency_report(100.0, {}), std::invalid_argument);
  CHECK_THROWS_AS(latency_report(0.0, {1.0}), std::invalid_argument);
}

TEST_CASE("pipeline RTFs add") {
  CHECK(pipeline_rtf({0.136, 0.120, 0.066}) ==
        doctest::Approx(0.322).epsilon(1e-12));
  CHECK(pipeline_rtf({0.25}) == 0.25);
  CHECK(pipeline_rtf({0.1, 0.2}) == pipeline_rtf({0.2, 0.1}));
  CHECK_THROWS_AS(pipeline_rtf({}), std::invalid_argument);
  CHECK_THROWS_AS(pipeline_rtf({0.1, -0.2}), std::invalid_argument);
}

TEST_CASE("quality evaluation of an untrained model reproduces the baseline") {
  SynthConfig scfg = small_synth();
  const SynthDataset ds = gen_dataset(scfg);
  ModelConfig mcfg = meanvc::testutil::tiny_config();
  mcfg.mel_bins = scfg.mel_bins;
  mcfg.bnf_dim = scfg.bnf_dim;
  mcfg.spk_dim = scfg.spk_dim;
  // zero output head: generated chunks are exactly the seeded unit noise
  const ParamStore params = net::init_params(mcfg, 5);
  const QualityReport rep = eval_quality(params, mcfg, ds, Sampler::kOneNfe);
  CHECK(rep.baseline_mse > 1.0);
  CHECK(rep.mse == doctest::Approx(rep.baseline_mse).epsilon(0.15));
  REQUIRE(rep.gen_band_var.size() == static_cast<std::size_t>(scfg.mel_bins));
  REQUIRE(rep.data_band_var.size() == static_cast<std::size_t>(scfg.mel_bins));
  for (double v : rep.gen_band_var) CHECK(v == doctest::Approx(1.0).epsilon(0.2));
  for (double v : rep.data_band_var) CHECK(v > 0.0);

  // the Euler sampler is a different estimator but obeys the same statistics
  const QualityReport eu =
      eval_quality(params, mcfg, ds, Sampler::kEuler, 4);
  CHECK(eu.mse == doctest::Approx(rep.baseline_mse).epsilon(0.15));

  SynthDataset empty;
  empty.cfg = scfg;
  CHECK_THROWS_AS(eval_quality(params, mcfg, empty, Sampler::kOneNfe),
                  std::invalid_argument);
  ModelConfig bad = mcfg;
  bad.mel_bins += 1;
  CHECK_THROWS_AS(eval_quality(net::init_params(bad, 5), bad, ds,
                               Sampler::kOneNfe),
                  std::invalid_argument);
}
