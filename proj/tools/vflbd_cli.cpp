// Copyright 2026 The vflbd Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command line front end: run experiments, demonstrate label inference and
// run the finite-difference gradient suite.

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vflbd/vflbd.hpp"

namespace {

using namespace vflbd;

const std::map<std::string, DatasetKind> kDatasets{
    {"mnist", DatasetKind::kMnist}, {"nuswide", DatasetKind::kNusWide}, {"synth", DatasetKind::kSynth}};
const std::map<std::string, AttackKind> kAttacks{{"none", AttackKind::kNone},
                                                 {"grad-replace", AttackKind::kGradientReplacement},
                                                 {"grad-substitute", AttackKind::kGradientSubstitution}};
const std::map<std::string, NoiseKind> kNoise{
    {"none", NoiseKind::kNone}, {"gauss", NoiseKind::kGaussian}, {"laplace", NoiseKind::kLaplacian}};

struct CliOptions {
  RunConfig cfg;
  std::string dataset = "synth";
  std::string attack = "none";
  std::string blur = "auto";
  std::string head = "sum";
  std::string noise = "none";
  std::string residual_key = "position";
  std::string out = "vflbd_out";
  bool long_csv = false;
  bool poison_scores = false;
};

void add_common(CLI::App* cmd, CliOptions& o) {
  cmd->add_option("--dataset", o.dataset, "mnist | nuswide | synth")
      ->check(CLI::IsMember({"mnist", "nuswide", "synth"}))
      ->capture_default_str();
  cmd->add_option("--data-dir", o.cfg.data_dir, "Directory holding the dataset files");
  cmd->add_option("--epochs", o.cfg.epochs, "Training epochs (0: dataset default)")->capture_default_str();
  cmd->add_option("--batch-size", o.cfg.batch_size)->capture_default_str();
  cmd->add_option("--lr", o.cfg.lr)->capture_default_str();
  cmd->add_option("--seed", o.cfg.seed)->capture_default_str();
  cmd->add_option("--passive-hidden", o.cfg.passive_hidden, "Hidden width of passive models (0: linear)")
      ->capture_default_str();
  cmd->add_option("--synth-train", o.cfg.synth.n_train)->capture_default_str();
  cmd->add_option("--synth-test", o.cfg.synth.n_test)->capture_default_str();
  cmd->add_option("--synth-dim", o.cfg.synth.d_per_party, "Features per party")->capture_default_str();
  cmd->add_option("--synth-classes", o.cfg.synth.num_classes)->capture_default_str();
  cmd->add_option("--synth-separation", o.cfg.synth.class_separation)->capture_default_str();
  cmd->add_option("--synth-separation-b", o.cfg.synth.separation_b,
                  "Class-mean spread of party 1's features (default: --synth-separation)");
  cmd->add_option("--synth-poison-fraction", o.cfg.synth.poison_fraction)->capture_default_str();
}

void finish(CliOptions& o) {
  o.cfg.dataset = kDatasets.at(o.dataset);
  o.cfg.attack = kAttacks.at(o.attack);
  o.cfg.defense.noise.kind = kNoise.at(o.noise);
  o.cfg.defense.trainable_head = o.head == "trainable";
  o.cfg.defense.residual_key =
      o.residual_key == "sample" ? ResidualKey::kSample : ResidualKey::kBatchPosition;
  if (o.blur != "auto") o.cfg.blur = o.blur == "on";
}

void print_epoch(const RunResult& run, const EpochMetrics& m) {
  std::printf("repeat %zu epoch %3zu  main %.4f  backdoor %s  loss %.5f  skipped %zu\n", run.repeat,
              m.epoch, m.main_accuracy,
              m.backdoor_accuracy ? std::to_string(*m.backdoor_accuracy).c_str() : "NA", m.mean_loss,
              m.skipped_poison_events);
}

int cmd_run(CliOptions& o) {
  finish(o);
  auto runs = run_experiment(o.cfg);
  for (const auto& run : runs) {
    for (const auto& m : run.epochs) print_epoch(run, m);
  }
  ReportOptions ro;
  ro.long_format = o.long_csv;
  ro.poison_scores = o.poison_scores;
  for (const auto& path : emit_report(runs, o.out, ro)) std::printf("wrote %s\n", path.c_str());
  return 0;
}

int cmd_infer(CliOptions& o) {
  finish(o);
  if (o.cfg.epochs == 0) o.cfg.epochs = 1;
  auto data = load_data(o.cfg);
  auto outcome = run_label_inference(o.cfg, data);
  std::printf("observed %zu gradient rows, recovered %zu labels, %zu ambiguous\n", outcome.observed,
              outcome.recovered, outcome.ambiguous);
  std::printf("recovery rate %.6f\n", outcome.rate());
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  bool ok = true;
  for (const auto& rep : run_gradcheck_suite(seed)) {
    std::printf("%-4s %-40s %6zu params  max rel err %.3e\n", rep.passed ? "PASS" : "FAIL",
                rep.name.c_str(), rep.checked, rep.max_rel_error);
    ok = ok && rep.passed;
  }
  return ok ? 0 : 3;
}

// Splices the values of `--config FILE` in right after the subcommand, so
// any flag given on the command line comes later and wins. Keys may sit at
// the top level or under a section named after the subcommand.
std::vector<std::string> with_config_file(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (path.empty() || args.size() < 2) return args;
  const std::string sub = args[1];
  std::vector<std::string> injected;
  for (const auto& item : CLI::ConfigTOML().from_file(path)) {
    if (item.name == "++" || item.name == "--") continue;
    if (!item.parents.empty() && !(item.parents.size() == 1 && item.parents[0] == sub)) continue;
    std::string name = item.name;
    std::replace(name.begin(), name.end(), '_', '-');
    if (item.inputs.size() == 1) {
      injected.push_back("--" + name + "=" + item.inputs[0]);
    } else {
      injected.push_back("--" + name);
      injected.insert(injected.end(), item.inputs.begin(), item.inputs.end());
    }
  }
  args.insert(args.begin() + 2, injected.begin(), injected.end());
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor attacks and defenses in feature-partitioned collaborative learning"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  CliOptions o;

  auto* run = app.add_subcommand("run", "Train once or repeatedly and write per-epoch CSVs");
  std::string config_help;  // --config is consumed by with_config_file before parsing
  run->add_option("--config", config_help, "TOML/INI file with option values; flags override it");
  add_common(run, o);
  run->add_option("--repeats", o.cfg.repeats)->capture_default_str();
  run->add_option("--attack", o.attack)
      ->check(CLI::IsMember({"none", "grad-replace", "grad-substitute"}))
      ->capture_default_str();
  run->add_option("--gamma", o.cfg.gamma, "Amplify ratio")->capture_default_str();
  run->add_option("--target-label", o.cfg.target_label)->capture_default_str();
  run->add_option("--target-count", o.cfg.target_count, "Known clean target samples")->capture_default_str();
  run->add_option("--blur", o.blur, "on | off | auto (on with the trainable head)")
      ->check(CLI::IsMember({"on", "off", "auto"}))
      ->capture_default_str();
  run->add_option("--blur-var", o.cfg.blur_variance)->capture_default_str();
  run->add_option("--defense-head", o.head)->check(CLI::IsMember({"sum", "trainable"}))->capture_default_str();
  run->add_option("--noise", o.noise)->check(CLI::IsMember({"none", "gauss", "laplace"}))->capture_default_str();
  run->add_option("--noise-var", o.cfg.defense.noise.variance)->capture_default_str();
  run->add_option("--clip-norm", o.cfg.defense.clip_norm);
  run->add_option("--drop-rate", o.cfg.defense.drop_rate)->capture_default_str();
  run->add_option("--residual-key", o.residual_key, "Sparsification residual rows: position | sample")
      ->check(CLI::IsMember({"position", "sample"}))
      ->capture_default_str();
  run->add_option("--out", o.out, "Output directory")->capture_default_str();
  run->add_flag("--long-csv", o.long_csv, "Also write a long-format CSV of all repeats");
  run->add_flag("--poison-scores", o.poison_scores, "Also write mean class scores of the test poison set");

  auto* infer = app.add_subcommand("infer-labels", "Recover labels from the gradients a passive party receives");
  infer->add_option("--config", config_help, "TOML/INI file with option values; flags override it");
  add_common(infer, o);

  std::uint64_t gc_seed = 7;
  auto* grad = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
  grad->add_option("--seed", gc_seed)->capture_default_str();

  try {
    auto args = with_config_file(std::vector<std::string>(argv, argv + argc));
    std::vector<char*> ptrs;
    for (auto& a : args) ptrs.push_back(a.data());
    app.parse(static_cast<int>(ptrs.size()), ptrs.data());
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (run->parsed()) return cmd_run(o);
    if (infer->parsed()) return cmd_infer(o);
    return cmd_gradcheck(gc_seed);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
}
