// grn: generate synthetic EEG, train / ablate / sweep the Group Resonance
// Network, and render result reports.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 config error, 3 data-format error,
// 4 numerical abort, 5 leakage-guard violation.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "grn/grn.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Options {
  std::string config;
  std::string dataset;
  std::string protocol = "loso";
  std::string variant;
  std::string out;
  std::string results;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t jobs = 1;
  bool inject_leak = false;
};

std::string default_out() {
  if (const char* env = std::getenv("GRN_RESULTS_DIR"); env && *env) return env;
  return "results";
}

// Same digest `git hash-object` prints for the file.
std::string git_blob_sha1(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw grn::FormatError("cannot read " + p.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string body = buf.str();
  const std::string header = "blob " + std::to_string(body.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, body.data(), body.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

class Timer {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

grn::RunConfig load(const Options& o) {
  grn::RunConfig cfg = o.config.empty() ? grn::RunConfig{} : grn::load_config(o.config);
  if (!o.variant.empty()) cfg.train.variant = grn::parse_variant(o.variant);
  if (o.inject_leak) cfg.train.inject_leak = true;
  return cfg;
}

void write_text(const fs::path& p, const std::string& body, std::vector<std::string>& artifacts) {
  std::ofstream out(p, std::ios::binary);
  if (!(out << body)) throw grn::FormatError("cannot write " + p.string());
  artifacts.push_back(p.string());
}

template <typename Fn>
std::string to_string(Fn&& fn) {
  std::ostringstream os;
  fn(os);
  return os.str();
}

// Written last, after every artifact it lists.
void write_manifest(const fs::path& dir, const std::string& command, const grn::RunConfig& cfg, const Options& o,
                    const std::vector<std::string>& artifacts, const json& timings, const json& extra) {
  json m;
  m["command"] = command;
  json c = json::object();
  for (const auto& [k, v] : grn::config_items(cfg)) c[k] = v;
  m["config"] = c;
  m["flags"] = {{"config", o.config}, {"dataset", o.dataset}, {"protocol", o.protocol}, {"jobs", o.jobs}};
  if (!o.dataset.empty()) m["dataset"] = {{"path", o.dataset}, {"git_blob_sha1", git_blob_sha1(o.dataset)}};
  m["artifacts"] = artifacts;
  m["timings_s"] = timings;
  for (const auto& [k, v] : extra.items()) m[k] = v;
  std::ofstream out(dir / "manifest.json");
  if (!(out << m.dump(2) << '\n')) throw grn::FormatError("cannot write " + (dir / "manifest.json").string());
}

struct Loaded {
  grn::RunConfig cfg;
  grn::Dataset ds;
  grn::GrnConfig model;
};

Loaded load_inputs(const Options& o) {
  Loaded in;
  in.cfg = load(o);
  if (o.dataset.empty()) throw grn::ConfigError("--dataset is required");
  in.ds = grn::read_dataset(o.dataset);
  in.cfg.welch.validate(in.ds.samples);
  in.model = in.cfg.resolve_model(in.ds, grn::default_bands().size());
  return in;
}

int cmd_gen(const Options& o) {
  auto cfg = load(o);
  if (o.seed_set) cfg.synth.seed = o.seed;
  const fs::path out = o.out.empty() ? fs::path(default_out()) / "dataset.grn" : fs::path(o.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const auto ds = grn::gen_synthetic_dataset(cfg.synth);
  grn::write_dataset(out.string(), ds);
  std::cout << "wrote " << out.string() << ": " << cfg.synth.n_subjects << " subjects, " << ds.size() << " trials, "
            << ds.n_classes << " classes, C=" << ds.channels << ", T=" << ds.samples << ", fs=" << ds.fs << " Hz\n";
  return 0;
}

int cmd_train(const Options& o) {
  Timer timer;
  auto in = load_inputs(o);
  if (o.seed_set) in.cfg.train.seed = o.seed;
  const auto protocol = grn::parse_protocol(o.protocol);
  const fs::path dir = o.out.empty() ? fs::path(default_out()) : fs::path(o.out);
  fs::create_directories(dir);
  json timings;
  timings["load"] = timer.lap();

  grn::Workspace ws(in.ds, grn::default_bands(), in.cfg.welch);
  timings["features"] = timer.lap();
  const auto run = grn::run_protocol(ws, protocol, in.model, in.cfg.train, o.jobs);
  timings["train"] = timer.lap();

  std::vector<std::string> artifacts;
  write_text(dir / "folds.csv", to_string([&](std::ostream& os) { grn::write_fold_manifest(os, in.ds, run.folds); }),
             artifacts);
  for (const auto& r : run.results) {
    const auto stem = "fold_" + std::to_string(r.fold_id);
    write_text(dir / (stem + "_curves.csv"), to_string([&](std::ostream& os) { grn::write_curves_csv(os, r); }),
               artifacts);
    write_text(dir / (stem + "_confusion.csv"),
               to_string([&](std::ostream& os) { grn::write_confusion_csv(os, r.confusion); }), artifacts);
  }
  write_text(dir / "summary.csv",
             to_string([&](std::ostream& os) { grn::write_summary_csv(os, run, in.cfg.train.variant, in.cfg.train.seed); }),
             artifacts);
  timings["write"] = timer.lap();

  const auto s = grn::summarize(run.accuracies());
  json extra;
  extra["leakage"] = {{"checks", ws.monitor().checks()}, {"violations", ws.monitor().violations()}};
  extra["result"] = {{"mean_accuracy", s.mean}, {"std_accuracy", s.std}, {"n_folds", s.n}};
  write_manifest(dir, "train", in.cfg, o, artifacts, timings, extra);
  std::cout << grn::protocol_name(protocol) << " / " << grn::variant_name(in.cfg.train.variant) << ": accuracy "
            << grn::fmt_num(s.mean) << " +- " << grn::fmt_num(s.std) << " over " << s.n << " folds -> " << dir.string()
            << '\n';
  return 0;
}

int cmd_report(const Options& o) {
  const fs::path results = o.results.empty() ? fs::path(default_out()) : fs::path(o.results);
  const fs::path out = o.out.empty() ? results : fs::path(o.out);
  const auto written = grn::report::generate_report(results, out);
  std::cout << "wrote " << written.size() << " SVG files to " << out.string() << '\n';
  return 0;
}

std::vector<std::uint64_t> seeds_for(const Options& o, const grn::RunConfig& cfg) {
  if (!o.seed_set) return cfg.seeds;
  std::vector<std::uint64_t> s;
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) s.push_back(o.seed + i);
  return s;
}

int cmd_ablate(const Options& o) {
  Timer timer;
  auto in = load_inputs(o);
  const fs::path dir = o.out.empty() ? fs::path(default_out()) : fs::path(o.out);
  fs::create_directories(dir);
  json timings;
  timings["load"] = timer.lap();
  grn::Workspace ws(in.ds, grn::default_bands(), in.cfg.welch);
  const auto seeds = seeds_for(o, in.cfg);
  const auto rows = grn::run_ablation(ws, in.model, in.cfg.train, seeds, o.jobs);
  timings["ablate"] = timer.lap();
  for (const auto& r : rows)
    if (!r.all_finite) throw grn::NumericalError("variant " + grn::variant_name(r.variant) + " produced non-finite losses");
  std::vector<std::string> artifacts;
  write_text(dir / "ablation.csv", to_string([&](std::ostream& os) { grn::write_ablation_csv(os, rows); }), artifacts);
  json extra;
  extra["seeds"] = seeds;
  extra["leakage"] = {{"checks", ws.monitor().checks()}, {"violations", ws.monitor().violations()}};
  write_manifest(dir, "ablate", in.cfg, o, artifacts, timings, extra);
  for (const auto& r : rows)
    std::cout << std::left << std::setw(18) << grn::variant_name(r.variant) << grn::fmt_num(r.summary.mean) << " +- "
              << grn::fmt_num(r.summary.std) << '\n';
  return 0;
}

int cmd_sweep(const Options& o) {
  Timer timer;
  auto in = load_inputs(o);
  const fs::path dir = o.out.empty() ? fs::path(default_out()) : fs::path(o.out);
  fs::create_directories(dir);
  json timings;
  timings["load"] = timer.lap();
  grn::Workspace ws(in.ds, grn::default_bands(), in.cfg.welch);
  const auto seeds = seeds_for(o, in.cfg);
  const auto tables = grn::run_sensitivity(ws, in.model, in.cfg.train, in.cfg.k_r_values, in.cfg.m_values, seeds, o.jobs);
  timings["sweep"] = timer.lap();
  std::vector<std::string> artifacts;
  write_text(dir / "sensitivity_kr.csv",
             to_string([&](std::ostream& os) { grn::write_sensitivity_csv(os, "K_r", tables.k_r); }), artifacts);
  write_text(dir / "sensitivity_m.csv", to_string([&](std::ostream& os) { grn::write_sensitivity_csv(os, "M", tables.m); }),
             artifacts);
  json extra;
  extra["seeds"] = seeds;
  write_manifest(dir, "sweep", in.cfg, o, artifacts, timings, extra);
  for (const auto& c : tables.k_r) std::cout << "K_r=" << c.value << "  " << grn::fmt_num(c.summary.mean) << '\n';
  for (const auto& c : tables.m) std::cout << "M=" << c.value << "  " << grn::fmt_num(c.summary.mean) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Group Resonance Network for EEG emotion recognition"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "output path (default: $GRN_RESULTS_DIR or ./results)");
    sub->add_option("--seed", o.seed, "override the seed")->each([&](const std::string&) { o.seed_set = true; });
  };
  auto add_run = [&](CLI::App* sub) {
    add_common(sub);
    sub->add_option("--dataset", o.dataset, "GRN1 dataset file")->required();
    sub->add_option("--jobs", o.jobs, "folds trained in parallel")->check(CLI::PositiveNumber);
    sub->add_flag("--inject-leakage", o.inject_leak, "test hook: draw references from held-out trials")
        ->group("");  // hidden
  };

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  add_common(gen);
  auto* train = app.add_subcommand("train", "train one protocol across all folds");
  add_run(train);
  train->add_option("--protocol", o.protocol, "sd or loso")->check(CLI::IsMember({"sd", "loso"}));
  train->add_option("--variant", o.variant, "ablation variant")
      ->check(CLI::IsMember({"full", "individual_only", "proto_only", "resonance_only", "full_no_protoreg"}));
  auto* report = app.add_subcommand("report", "render SVG plots from result CSVs");
  report->add_option("--results", o.results, "directory holding fold_<k>_*.csv (default: $GRN_RESULTS_DIR)");
  report->add_option("--out", o.out, "SVG output directory (default: the results directory)");
  auto* ablate = app.add_subcommand("ablate", "LOSO ablation over all five variants");
  add_run(ablate);
  auto* sweep = app.add_subcommand("sweep", "LOSO sensitivity sweep over K_r and M");
  add_run(sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen(o);
    if (*train) return cmd_train(o);
    if (*report) return cmd_report(o);
    if (*ablate) return cmd_ablate(o);
    if (*sweep) return cmd_sweep(o);
  } catch (const grn::LeakageError& e) {
    std::cerr << "leakage guard: " << e.what() << '\n';
    return 5;
  } catch (const grn::NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return 4;
  } catch (const grn::FormatError& e) {
    std::cerr << "data format error: " << e.what() << '\n';
    return 3;
  } catch (const grn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
