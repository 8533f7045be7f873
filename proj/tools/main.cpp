// meanvc command-line driver: train / posttrain / stream / bench / verify.
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "meanvc/checkpoint.hpp"
#include "meanvc/dapt.hpp"
#include "meanvc/meanflow.hpp"
#include "meanvc/stream.hpp"
#include "meanvc/synth_bench.hpp"

namespace fs = std::filesystem;
using namespace meanvc;

namespace {

using ConfigMap = std::map<std::string, std::string>;

ConfigMap default_config() {
  return {
      {"n_blocks", "4"},       {"hidden", "64"},
      {"n_heads", "2"},        {"mel_bins", "8"},
      {"bnf_dim", "16"},       {"spk_dim", "8"},
      {"timbre_hidden", "32"}, {"timbre_heads", "4"},
      {"mlp_ratio", "2"},      {"frames_per_chunk", "4"},
      {"history_k", "3"},      {"steps", "1000"},
      {"batch_size", "4"},     {"lr", "1e-3"},
      {"p_equal", "0.25"},     {"objective", "mf"},
      {"vocab", "16"},         {"n_speakers", "4"},
      {"sigma_data", "0.1"},   {"min_len", "8"},
      {"max_len", "16"},       {"n_items", "32"},
      {"ref_frames", "8"},     {"g_lr", "1e-5"},
      {"d_lr", "1e-5"},        {"mf_mix", "0.0"},
      {"chunk_ms", "160"},     {"trials", "20"},
      {"components", ""},
  };
}

void load_config_file(const std::string& path, ConfigMap& cfg) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  std::string line;
  while (std::getline(f, line)) {
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    if (!key.empty()) cfg[key] = trim(line.substr(eq + 1));
  }
}

long to_long(const ConfigMap& c, const std::string& k) {
  return std::stol(c.at(k));
}
double to_double(const ConfigMap& c, const std::string& k) {
  return std::stod(c.at(k));
}

ModelConfig model_config(const ConfigMap& c) {
  ModelConfig m;
  m.n_blocks = static_cast<int>(to_long(c, "n_blocks"));
  m.hidden = static_cast<int>(to_long(c, "hidden"));
  m.n_heads = static_cast<int>(to_long(c, "n_heads"));
  m.mel_bins = static_cast<int>(to_long(c, "mel_bins"));
  m.bnf_dim = static_cast<int>(to_long(c, "bnf_dim"));
  m.spk_dim = static_cast<int>(to_long(c, "spk_dim"));
  m.timbre_hidden = static_cast<int>(to_long(c, "timbre_hidden"));
  m.timbre_heads = static_cast<int>(to_long(c, "timbre_heads"));
  m.mlp_ratio = static_cast<int>(to_long(c, "mlp_ratio"));
  m.chunk.frames_per_chunk =
      static_cast<std::size_t>(to_long(c, "frames_per_chunk"));
  m.chunk.history_k = static_cast<std::size_t>(to_long(c, "history_k"));
  m.validate();
  return m;
}

SynthConfig synth_config(const ConfigMap& c, std::uint64_t seed) {
  SynthConfig s;
  s.vocab = static_cast<int>(to_long(c, "vocab"));
  s.mel_bins = static_cast<int>(to_long(c, "mel_bins"));
  s.bnf_dim = static_cast<int>(to_long(c, "bnf_dim"));
  s.n_speakers = static_cast<int>(to_long(c, "n_speakers"));
  s.spk_dim = static_cast<int>(to_long(c, "spk_dim"));
  s.min_len = static_cast<std::size_t>(to_long(c, "min_len"));
  s.max_len = static_cast<std::size_t>(to_long(c, "max_len"));
  s.n_items = static_cast<std::size_t>(to_long(c, "n_items"));
  s.ref_frames = static_cast<std::size_t>(to_long(c, "ref_frames"));
  s.sigma_data = to_double(c, "sigma_data");
  s.seed = derive_seed(seed, 0xDA7A);
  s.validate();
  return s;
}

void dump_resolved(const ConfigMap& c, const std::string& out_dir,
                   std::uint64_t seed) {
  fs::create_directories(out_dir);
  std::ofstream f(out_dir + "/resolved_config.txt");
  f << "seed = " << seed << "\n";
  for (const auto& [k, v] : c) f << k << " = " << v << "\n";
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stod(tok));
  }
  return out;
}

std::vector<TrainItem> train_items(const SynthDataset& ds) {
  std::vector<TrainItem> out;
  out.reserve(ds.items.size());
  for (const auto& it : ds.items) out.push_back(it.train);
  return out;
}

int run_train(const ConfigMap& cfg, std::uint64_t seed,
              const std::string& ckpt_in, const std::string& ckpt_out,
              const std::string& out_dir) {
  const ModelConfig mcfg = model_config(cfg);
  const SynthDataset ds = gen_dataset(synth_config(cfg, seed));
  ParamStore params = ckpt_in.empty() ? net::init_params(mcfg, seed)
                                      : load_checkpoint(ckpt_in);
  TrainRunConfig run;
  run.objective = cfg.at("objective") == "cfm"
                      ? TrainRunConfig::Objective::kCfm
                      : TrainRunConfig::Objective::kMeanFlow;
  run.steps = to_long(cfg, "steps");
  run.batch_size = static_cast<int>(to_long(cfg, "batch_size"));
  run.lr = to_double(cfg, "lr");
  run.p_equal = to_double(cfg, "p_equal");
  run.seed = seed;

  std::ofstream metrics(out_dir + "/metrics.jsonl");
  train_loop(params, mcfg, train_items(ds), run, [&](const StepMetric& m) {
    if (m.step % 100 == 0 || m.step + 1 == run.steps) {
      metrics << "{\"step\":" << m.step << ",\"loss\":" << m.loss
              << ",\"wall_ms\":" << m.wall_ms << "}\n";
    }
  });
  save_checkpoint(ckpt_out.empty() ? out_dir + "/model.mvc" : ckpt_out, params);
  return 0;
}

int run_posttrain(const ConfigMap& cfg, std::uint64_t seed,
                  const std::string& ckpt_in, const std::string& ckpt_out,
                  const std::string& out_dir) {
  if (ckpt_in.empty()) {
    std::cerr << "posttrain needs --ckpt-in (a pretrained generator)\n";
    return 2;
  }
  const ModelConfig mcfg = model_config(cfg);
  const SynthDataset ds = gen_dataset(synth_config(cfg, seed));
  ParamStore g = load_checkpoint(ckpt_in);
  ParamStore d = init_discriminator(g, mcfg, seed);
  DaptConfig run;
  run.steps = to_long(cfg, "steps");
  run.batch_size = static_cast<int>(to_long(cfg, "batch_size"));
  run.g_lr = to_double(cfg, "g_lr");
  run.d_lr = to_double(cfg, "d_lr");
  run.mf_mix = to_double(cfg, "mf_mix");
  run.p_equal = to_double(cfg, "p_equal");
  run.seed = seed;

  std::ofstream hist(out_dir + "/dapt_history.jsonl");
  posttrain(g, d, mcfg, train_items(ds), run, [&](const DaptStepMetric& m) {
    hist << "{\"step\":" << m.step << ",\"d\":" << m.d << ",\"g_adv\":" << m.g_adv
         << ",\"mf\":" << m.mf << "}\n";
  });
  const std::string out =
      ckpt_out.empty() ? out_dir + "/model.dapt.mvc" : ckpt_out;
  save_checkpoint(out, g);
  save_checkpoint(out + ".disc", d);
  return 0;
}

int run_stream(const ConfigMap& cfg, std::uint64_t seed,
               const std::string& ckpt_in, const std::string& out_dir,
               const std::string& in_path, const std::string& ref_path,
               const std::string& out_path, int speaker,
               const std::string& sampler, const std::string& cache_mode,
               const std::string& source_path) {
  if (ckpt_in.empty() || in_path.empty() || ref_path.empty() ||
      out_path.empty()) {
    std::cerr << "stream needs --ckpt-in, --in, --ref and --out\n";
    return 2;
  }
  const ModelConfig mcfg = model_config(cfg);
  const SynthConfig scfg = synth_config(cfg, seed);
  const ParamStore params = load_checkpoint(ckpt_in);
  const Tensor bnf = read_frames(in_path);
  const Tensor ref = read_frames(ref_path);
  const Tensor spk = speaker_embedding(speaker, scfg);
  const std::size_t fpc = mcfg.chunk.frames_per_chunk;
  const std::size_t len = bnf.rows();
  const std::size_t n_chunks = (len + fpc - 1) / fpc;

  Tensor out;
  if (sampler.rfind("euler:", 0) == 0) {
    const int steps = std::stoi(sampler.substr(6));
    Tensor bnf_pad({n_chunks * fpc, bnf.cols()});
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < bnf.cols(); ++j)
        bnf_pad.at(i, j) = bnf.at(i, j);
    const Tensor timbre = net::timbre_encode(params, mcfg, bnf_pad, ref);
    const Tensor cond = net::assemble_condition(mcfg, timbre, spk);
    out = generate_chunks(params, mcfg, cond, n_chunks, seed, steps);
  } else if (sampler == "mf1") {
    Tensor source;
    const CacheMode mode =
        cache_mode == "source" ? CacheMode::kSource : CacheMode::kGenerated;
    if (mode == CacheMode::kSource) {
      if (source_path.empty()) {
        std::cerr << "cache-mode source needs --source\n";
        return 2;
      }
      source = read_frames(source_path);
      if (source.rows() < len) {
        std::cerr << "--source shorter than --in\n";
        return 2;
      }
    }
    StreamState st = init_stream(params, mcfg, spk, seed, {}, mode);
    out = Tensor({n_chunks * fpc, static_cast<std::size_t>(mcfg.mel_bins)});
    for (std::size_t c = 0; c < n_chunks; ++c) {
      Tensor chunk({fpc, bnf.cols()});
      for (std::size_t f = 0; f < fpc; ++f) {
        const std::size_t row = c * fpc + f;
        if (row < len)
          for (std::size_t j = 0; j < bnf.cols(); ++j)
            chunk.at(f, j) = bnf.at(row, j);
      }
      PushOptions opts;
      Tensor src_chunk;
      if (mode == CacheMode::kSource) {
        src_chunk = Tensor({fpc, static_cast<std::size_t>(mcfg.mel_bins)});
        for (std::size_t f = 0; f < fpc; ++f) {
          const std::size_t row = c * fpc + f;
          if (row < source.rows())
            for (std::size_t j = 0; j < src_chunk.cols(); ++j)
              src_chunk.at(f, j) = source.at(row, j);
        }
        opts.source_mel = &src_chunk;
      }
      const Tensor mel = push_chunk(st, chunk, ref, opts);
      for (std::size_t f = 0; f < fpc; ++f)
        for (std::size_t j = 0; j < mel.cols(); ++j)
          out.at(c * fpc + f, j) = mel.at(f, j);
    }
  } else {
    std::cerr << "unknown sampler '" << sampler << "' (use mf1 or euler:N)\n";
    return 2;
  }

  Tensor trimmed({len, out.cols()});
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < out.cols(); ++j)
      trimmed.at(i, j) = out.at(i, j);
  write_frames(out_path, trimmed);
  (void)out_dir;
  return 0;
}

int run_bench(const ConfigMap& cfg, std::uint64_t seed,
              const std::string& out_dir, const std::string& chunks_arg,
              double stub_infer_ms) {
  const ModelConfig mcfg = model_config(cfg);
  const std::vector<double> chunk_list =
      parse_list(chunks_arg.empty() ? cfg.at("chunk_ms") : chunks_arg);
  if (chunk_list.empty()) {
    std::cerr << "bench: empty chunk list\n";
    return 2;
  }
  const int trials = static_cast<int>(to_long(cfg, "trials"));

  // One measured forward per trial unless a stub duration is given (the stub
  // makes report arithmetic exactly checkable).
  std::vector<double> samples;
  if (stub_infer_ms >= 0.0) {
    samples.assign(static_cast<std::size_t>(trials), stub_infer_ms);
  } else {
    const ParamStore params = net::init_params(mcfg, seed);
    const std::size_t fpc = mcfg.chunk.frames_per_chunk;
    Rng rng(seed);
    const Tensor clean = rng.normal_tensor(
        {mcfg.chunk.history_k * fpc, static_cast<std::size_t>(mcfg.mel_bins)});
    const Tensor cond_c = rng.normal_tensor(
        {mcfg.chunk.history_k * fpc, static_cast<std::size_t>(mcfg.cond_dim())});
    const Tensor cond_n = rng.normal_tensor(
        {fpc, static_cast<std::size_t>(mcfg.cond_dim())});
    std::vector<int> ids;
    for (std::size_t i = 0; i < mcfg.chunk.history_k; ++i)
      ids.push_back(static_cast<int>(i));
    const int noisy_id = static_cast<int>(mcfg.chunk.history_k);
    const VelocityFn f = net::make_chunk_velocity_fn(params, mcfg, clean, ids,
                                                     noisy_id, cond_c, cond_n);
    for (int i = 0; i < trials; ++i) {
      const double rtf = measure_rtf(
          [&] {
            one_nfe_sample(f, {fpc, static_cast<std::size_t>(mcfg.mel_bins)},
                           derive_seed(seed, static_cast<std::uint64_t>(i)));
          },
          1.0, 1);
      samples.push_back(rtf);  // audio_ms 1 => raw milliseconds
    }
  }

  fs::create_directories(out_dir);
  std::ofstream js(out_dir + "/bench.json");
  std::ofstream csv(out_dir + "/bench.csv");
  csv << "chunk_ms,infer_mean_ms,infer_p95_ms,rtf,total_latency_ms\n";
  js << "{\"reports\":[";
  for (std::size_t i = 0; i < chunk_list.size(); ++i) {
    const LatencyReport rep = latency_report(chunk_list[i], samples);
    if (i) js << ",";
    js << "{\"chunk_ms\":" << rep.chunk_ms
       << ",\"infer_mean_ms\":" << rep.infer_mean_ms
       << ",\"infer_p95_ms\":" << rep.infer_p95_ms << ",\"rtf\":" << rep.rtf
       << ",\"total_latency_ms\":" << rep.total_latency_ms << "}";
    csv << rep.chunk_ms << "," << rep.infer_mean_ms << "," << rep.infer_p95_ms
        << "," << rep.rtf << "," << rep.total_latency_ms << "\n";
    std::cout << "chunk_ms=" << rep.chunk_ms << " infer_mean_ms="
              << rep.infer_mean_ms << " rtf=" << rep.rtf
              << " total_latency_ms=" << rep.total_latency_ms << "\n";
  }
  js << "]";
  const std::vector<double> components = parse_list(cfg.at("components"));
  if (!components.empty()) {
    const double p = pipeline_rtf(components);
    js << ",\"pipeline_rtf\":" << p;
    std::cout << "pipeline_rtf=" << p << "\n";
  }
  js << "}\n";
  return 0;
}

bool verify_masks() {
  const std::size_t fpcs[] = {1, 2, 4};
  for (std::size_t fpc : fpcs) {
    for (std::size_t n = 1; n <= 4; ++n) {
      for (std::size_t k : {1u, 3u}) {
        ChunkSpec spec{fpc, k};
        const ChunkMask m = build_chunk_mask(n, spec);
        for (std::size_t r = 0; r < m.side; ++r) {
          for (std::size_t c = 0; c < m.side; ++c) {
            const bool r_noisy = r >= n * fpc;
            const bool c_noisy = c >= n * fpc;
            const long rc = static_cast<long>((r_noisy ? r - n * fpc : r) / fpc);
            const long cc = static_cast<long>((c_noisy ? c - n * fpc : c) / fpc);
            bool want;
            if (!r_noisy) {
              want = !c_noisy && rc == cc;
            } else if (c_noisy) {
              want = rc == cc;
            } else {
              want = cc >= rc - static_cast<long>(k) && cc <= rc - 1;
            }
            if (m.at(r, c) != want) return false;
          }
        }
      }
    }
  }
  return true;
}

bool verify_degeneration() {
  ModelConfig cfg;
  cfg.n_blocks = 1;
  cfg.hidden = 8;
  cfg.timbre_hidden = 8;
  cfg.timbre_heads = 2;
  ParamStore params = net::init_params(cfg, 5);
  SynthConfig scfg;
  scfg.n_items = 4;
  scfg.min_len = scfg.max_len = 8;
  scfg.seed = 9;
  const std::vector<TrainItem> items = train_items(gen_dataset(scfg));
  MfTrainConfig mf;
  mf.p_equal = 1.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const double a = mf_loss(params, cfg, items, s, mf);
    const double b = cfm_loss(params, cfg, items, s);
    if (std::fabs(a - b) > 1e-12) return false;
  }
  return true;
}

bool verify_stream_equivalence() {
  ModelConfig cfg;
  cfg.n_blocks = 2;
  cfg.hidden = 16;
  cfg.timbre_hidden = 8;
  cfg.timbre_heads = 2;
  for (std::size_t k : {1u, 3u}) {
    cfg.chunk.history_k = k;
    ParamStore params = net::init_params(cfg, 21);
    const std::size_t fpc = cfg.chunk.frames_per_chunk;
    const std::size_t n = 3;
    Rng rng(77);
    const Tensor bnf =
        rng.normal_tensor({n * fpc, static_cast<std::size_t>(cfg.bnf_dim)});
    const Tensor ref =
        rng.normal_tensor({6, static_cast<std::size_t>(cfg.mel_bins)});
    const Tensor spk =
        rng.normal_tensor({static_cast<std::size_t>(cfg.spk_dim)});
    std::vector<MelChunk> truth(n);
    for (std::size_t c = 0; c < n; ++c) {
      truth[c].frames =
          rng.normal_tensor({fpc, static_cast<std::size_t>(cfg.mel_bins)});
      truth[c].index = static_cast<int>(c);
    }
    const Tensor offline =
        offline_generate(params, cfg, bnf, ref, spk, 31, truth);
    StreamState st = init_stream(params, cfg, spk, 31);
    for (std::size_t c = 0; c < n; ++c) {
      Tensor chunk({fpc, bnf.cols()});
      for (std::size_t f = 0; f < fpc; ++f)
        for (std::size_t j = 0; j < bnf.cols(); ++j)
          chunk.at(f, j) = bnf.at(c * fpc + f, j);
      PushOptions opts;
      opts.teacher_mel = &truth[c].frames;
      const Tensor mel = push_chunk(st, chunk, ref, opts);
      for (std::size_t f = 0; f < fpc; ++f)
        for (std::size_t j = 0; j < mel.cols(); ++j)
          if (mel.at(f, j) != offline.at(c * fpc + f, j)) return false;
    }
  }
  return true;
}

bool verify_accounting() {
  const LatencyReport rep = latency_report(160.0, {51.52});
  if (rep.total_latency_ms != 211.52) return false;
  const double p = pipeline_rtf({0.136, 0.120, 0.066});
  return std::fabs(p - 0.322) < 1e-12;
}

int run_verify() {
  struct Suite {
    const char* name;
    bool (*fn)();
  };
  const Suite suites[] = {
      {"mask-rules", verify_masks},
      {"meanflow-degeneration", verify_degeneration},
      {"stream-offline-equivalence", verify_stream_equivalence},
      {"latency-accounting", verify_accounting},
  };
  bool ok = true;
  for (const Suite& s : suites) {
    bool pass = false;
    try {
      pass = s.fn();
    } catch (const std::exception& e) {
      std::cout << s.name << ": EXCEPTION " << e.what() << "\n";
    }
    std::cout << s.name << ": " << (pass ? "PASS" : "FAIL") << "\n";
    ok = ok && pass;
  }
  return ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: meanvc <train|posttrain|stream|bench|verify> [flags]\n";
    return 1;
  }
  const std::string sub = argv[1];
  if (sub != "train" && sub != "posttrain" && sub != "stream" &&
      sub != "bench" && sub != "verify") {
    std::cerr << "unknown subcommand '" << sub << "'\n";
    return 1;
  }

  CLI::App app{"meanvc " + sub};
  std::string config_path, ckpt_in, ckpt_out, out_dir = "out";
  std::string in_path, ref_path, out_path, source_path;
  std::string sampler = "mf1", cache_mode = "generated", chunks_arg;
  std::uint64_t seed = 0;
  long steps = -1;
  int speaker = 0, k = -1;
  double stub_infer_ms = -1.0;
  app.add_option("--config", config_path);
  app.add_option("--seed", seed);
  app.add_option("--ckpt-in", ckpt_in);
  app.add_option("--ckpt-out", ckpt_out);
  app.add_option("--out-dir", out_dir);
  app.add_option("--steps", steps);
  app.add_option("--chunk-ms", chunks_arg);
  app.add_option("--k", k);
  app.add_option("--sampler", sampler);
  app.add_option("--cache-mode", cache_mode);
  app.add_option("--in", in_path);
  app.add_option("--ref", ref_path);
  app.add_option("--out", out_path);
  app.add_option("--source", source_path);
  app.add_option("--speaker", speaker);
  app.add_option("--stub-infer-ms", stub_infer_ms);

  std::vector<std::string> rest(argv + 2, argv + argc);
  std::reverse(rest.begin(), rest.end());
  try {
    app.parse(rest);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    ConfigMap cfg = default_config();
    if (!config_path.empty()) load_config_file(config_path, cfg);
    if (steps >= 0) cfg["steps"] = std::to_string(steps);
    if (k >= 0) cfg["history_k"] = std::to_string(k);
    if (!chunks_arg.empty()) cfg["chunk_ms"] = chunks_arg;
    dump_resolved(cfg, out_dir, seed);

    if (sub == "train") return run_train(cfg, seed, ckpt_in, ckpt_out, out_dir);
    if (sub == "posttrain")
      return run_posttrain(cfg, seed, ckpt_in, ckpt_out, out_dir);
    if (sub == "stream")
      return run_stream(cfg, seed, ckpt_in, out_dir, in_path, ref_path,
                        out_path, speaker, sampler, cache_mode, source_path);
    if (sub == "bench")
      return run_bench(cfg, seed, out_dir, chunks_arg, stub_infer_ms);
    return run_verify();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
