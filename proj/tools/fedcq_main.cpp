// Copyright 2026 The fedcq Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command-line driver: fedcq <pretrain|federate|tokenize|train-ctr|run|sweep|report|config>.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fedcq/error.hpp"
#include "fedcq/pipeline.hpp"

namespace {

namespace fs = std::filesystem;
using fedcq::pipeline::ExperimentConfig;

enum ExitCode { kOk = 0, kRuntimeFailure = 1, kConfigFailure = 2, kDependencyFailure = 3 };

struct CommonOptions {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string out;
  std::string seed;
  std::string mode;
  // Shorthand flags: config key -> value.
  std::vector<std::pair<std::string, std::string>> shorthand;
  std::vector<std::string> markets;
};

// Registers `--flag` as shorthand for `--set key=value`.
void add_shorthand(CLI::App* cmd, CommonOptions& o, const std::string& flag, const std::string& key,
                   const std::string& help) {
  cmd->add_option_function<std::string>(
      flag, [&o, key](const std::string& v) { o.shorthand.emplace_back(key, v); }, help);
}

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config_file, "key = value config file");
  cmd->add_option("-s,--set", o.overrides, "override a config key (key=value), repeatable");
  cmd->add_option("-o,--out", o.out,
                  std::string("output root (default: $") + fedcq::pipeline::kOutputRootEnv +
                      " or ./fedcq_out)");
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--mode", o.mode, "full | no_local | no_global | random_codebook | local_only");
  cmd->add_option("--market", o.markets, "market=path interaction file, repeatable");
  add_shorthand(cmd, o, "--min-interactions", "data.min_interactions", "keep users with more interactions");
  add_shorthand(cmd, o, "--split-seed", "data.split_seed", "seed of the CTR/CF splits");
  add_shorthand(cmd, o, "--ratio", "data.split_ratios", "train:valid:test, e.g. 8:1:1");
  add_shorthand(cmd, o, "--dim", "cf.dim", "embedding width d");
  add_shorthand(cmd, o, "--layers", "cf.layers", "graph propagation layers");
  add_shorthand(cmd, o, "--rounds", "fed.rounds", "federated rounds R");
  add_shorthand(cmd, o, "--local-epochs", "fed.local_epochs", "local epochs per round");
  add_shorthand(cmd, o, "--adapt-epochs", "fed.adapt_epochs", "local-codebook adaptation epochs");
  add_shorthand(cmd, o, "--ldp-b", "fed.ldp_scale", "Laplace noise scale b");
  add_shorthand(cmd, o, "--codebook-size", "quant.codebook_size", "codebook size T");
  add_shorthand(cmd, o, "--ctr-epochs", "ctr.epochs", "CTR training epochs");
}

fs::path output_root(const CommonOptions& o) {
  if (!o.out.empty()) return o.out;
  if (const char* env = std::getenv(fedcq::pipeline::kOutputRootEnv); env && *env) return env;
  return "fedcq_out";
}

// defaults < manifest snapshot < config file < flags
ExperimentConfig resolve(const CommonOptions& o, const fs::path& root) {
  ExperimentConfig c;
  if (fs::exists(root / "manifest.json")) {
    if (auto snap = fedcq::pipeline::RunManifest::load_or_create(root).config()) c = *snap;
  }
  if (!o.config_file.empty()) fedcq::pipeline::apply_config_file(c, o.config_file);
  if (!o.markets.empty()) {
    std::string joined;
    for (const auto& m : o.markets) joined += (joined.empty() ? "" : ",") + m;
    c.set("data.source", "files");
    c.set("data.markets", joined);
  }
  for (const auto& [key, value] : o.shorthand) c.set(key, value);
  for (const auto& s : o.overrides) fedcq::pipeline::apply_override(c, s);
  if (!o.seed.empty()) c.set("seed", o.seed);
  if (!o.mode.empty()) c.set("mode", o.mode);
  c.validate();
  return c;
}

void print_result(const fedcq::pipeline::CtrRunResult& r) {
  for (std::size_t k = 0; k < r.markets.size(); ++k) {
    std::cout << r.markets[k] << " test AUC " << r.results[k].test_auc << " (best epoch "
              << r.results[k].best_epoch << ")\n";
  }
  std::cout << "overall test AUC " << r.overall_auc << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated collaborative-signal quantization for multi-market CTR prediction"};
  app.require_subcommand(1);
  CommonOptions o;

  auto* pretrain = app.add_subcommand("pretrain", "prepare markets and train CF embeddings");
  auto* federate = app.add_subcommand("federate", "train quantizers with codebook federation");
  auto* tokenize = app.add_subcommand("tokenize", "assign token pairs to every user and item");
  auto* train_ctr = app.add_subcommand("train-ctr", "train and evaluate the CTR models");
  auto* run = app.add_subcommand("run", "all four stages in order");
  auto* sweep = app.add_subcommand("sweep", "run a grid over one config axis");
  auto* report = app.add_subcommand("report", "print the reports under the output root");
  auto* config = app.add_subcommand("config", "print the resolved configuration");
  for (auto* cmd : {pretrain, federate, tokenize, train_ctr, run, sweep, report, config}) {
    add_common(cmd, o);
  }
  std::string axis;
  std::vector<std::string> values;
  int repeats = 1;
  sweep->add_option("--axis", axis, "T, b, mode or any config key")->required();
  sweep->add_option("--values", values, "grid values")->delimiter(',');
  sweep->add_option("--repeats", repeats, "seeds per grid point (seed, seed+1, ...)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigFailure;
  }

  try {
    const fs::path root = output_root(o);
    if (report->parsed()) {
      std::cout << fedcq::pipeline::cmd_report(root);
      return kOk;
    }
    const ExperimentConfig c = resolve(o, root);
    if (config->parsed()) {
      for (const auto& key : ExperimentConfig::keys()) std::cout << key << " = " << c.get(key) << "\n";
    } else if (pretrain->parsed()) {
      fedcq::pipeline::cmd_pretrain(c, root);
    } else if (federate->parsed()) {
      fedcq::pipeline::cmd_federate(c, root);
    } else if (tokenize->parsed()) {
      fedcq::pipeline::cmd_tokenize(c, root);
    } else if (train_ctr->parsed()) {
      print_result(fedcq::pipeline::cmd_train_ctr(c, root));
    } else if (run->parsed()) {
      fedcq::pipeline::cmd_pretrain(c, root);
      fedcq::pipeline::cmd_federate(c, root);
      fedcq::pipeline::cmd_tokenize(c, root);
      print_result(fedcq::pipeline::cmd_train_ctr(c, root));
    } else if (sweep->parsed()) {
      if (values.empty()) {
        if (axis == "T") values = {"64", "128", "256", "512"};
        else if (axis == "b") values = {"0.001", "0.01", "0.1", "0.5"};
        else if (axis == "mode") values = {"full", "no_local", "no_global", "random_codebook", "local_only"};
        else throw fedcq::ConfigError("--values is required for axis " + axis);
      }
      const auto r = fedcq::pipeline::cmd_sweep(c, axis, values, repeats, root);
      std::cout << axis << ",runs,failures,mean_overall,std_overall\n";
      for (const auto& s : r.summarize()) {
        std::cout << s.value << ',' << s.runs << ',' << s.failures << ',' << s.mean << ','
                  << s.stddev << "\n";
      }
      for (const auto& p : r.points) {
        if (!p.ok) std::cerr << "point " << axis << "=" << p.value << " seed " << p.seed
                             << " failed: " << p.error << "\n";
      }
    }
    return kOk;
  } catch (const fedcq::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigFailure;
  } catch (const fedcq::DependencyError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDependencyFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
}
