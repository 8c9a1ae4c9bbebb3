// femae: data generation, pre-training, fine-tuning, probing and parameter counts.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "femae/femae.hpp"

namespace fs = std::filesystem;
using namespace femae;

namespace {

struct ConfigFlags {
  std::string config;
  std::string preset;
  std::vector<std::string> sets;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config, "key=value config file");
    cmd->add_option("--preset", preset, "model preset applied before the config file (toy, base)");
    cmd->add_option("--set", sets, "key=value override, repeatable");
    cmd->add_option("--steps", steps, "training steps");
    cmd->add_option("--seed", seed, "training seed");
  }

  RunConfig resolve(RunConfig rc = {}) const {
    if (!preset.empty()) rc.apply_preset(preset);
    if (!config.empty()) rc = load_run_config(config, rc);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      rc.set(s.substr(0, eq), s.substr(eq + 1));
    }
    if (steps) rc.train.steps = *steps;
    if (seed) rc.train.seed = *seed;
    return rc;
  }
};

DatasetManifest open_data(const std::string& dir) {
  if (dir.empty()) throw UsageError("--data is required");
  if (!fs::is_directory(dir)) throw UsageError("data directory '" + dir + "' does not exist");
  return read_manifest(dir);
}

fs::path make_out(const std::string& dir) {
  if (dir.empty()) throw UsageError("--out is required");
  fs::create_directories(dir);
  return dir;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::istringstream in(text);
  for (std::string s; std::getline(in, s, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(s, &used));
      if (used != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw UsageError("bad seed '" + s + "' in --seeds");
    }
  }
  if (out.empty()) throw UsageError("--seeds lists no seed");
  return out;
}

int cmd_gen_data(const GenDataOptions& o, const std::string& out) {
  const fs::path dir = make_out(out);
  const auto m = write_synthetic_dataset(dir, o);
  std::ofstream echo(dir / kConfigEchoName);
  echo << "classes=" << o.classes << "\nper_class=" << o.per_class << "\npoints=" << o.points
       << "\nnoise=" << o.noise << "\ntest_fraction=" << o.test_fraction << "\nseed=" << o.seed << "\n";
  std::cout << "wrote " << m.entries.size() << " clouds (" << m.indices(Split::Train).size() << " train, "
            << m.indices(Split::Test).size() << " test) in " << m.num_classes() << " classes to " << dir.string()
            << "\n";
  return 0;
}

int cmd_pretrain(const ConfigFlags& flags, const std::string& data, const std::string& variant,
                 const std::string& out, const std::string& resume) {
  RunConfig rc = flags.resolve();
  if (!variant.empty()) rc.set("variant", variant);
  const auto manifest = open_data(data);
  rc.validate();
  const fs::path dir = make_out(out);
  std::vector<Tensor<float>> clouds;
  for (auto& s : load_split<float>(manifest, Split::Train)) clouds.push_back(std::move(s.points));
  if (clouds.empty()) throw UsageError("data set has no train items");
  write_config_echo(dir, rc, {{"data", data}});

  PointFemae<float> model(rc.model);
  Pretrainer<float> trainer(model, std::move(clouds), rc.train);
  std::ofstream metrics;
  if (!resume.empty()) {
    trainer.resume(load_checkpoint(resume));
    metrics.open(dir / "metrics.csv", std::ios::app);
  } else {
    metrics.open(dir / "metrics.csv");
    write_pretrain_header(metrics);
  }
  std::optional<PretrainLogRow> first, last;
  while (!trainer.done()) {
    last = trainer.step();
    if (!first) first = last;
    write_pretrain_row(metrics, *last);
    metrics.flush();
  }
  save_checkpoint(trainer.checkpoint(), dir / kCheckpointName);
  if (first) {
    std::cout << "variant " << to_char(rc.model.variant) << ": loss " << first->loss() << " at step " << first->step
              << " -> " << last->loss() << " at step " << last->step << "\n";
  }
  std::cout << "checkpoint " << (dir / kCheckpointName).string() << "\n";
  return 0;
}

int cmd_finetune(const ConfigFlags& flags, const std::string& ckpt_path, const std::string& data,
                 const std::string& mode, const std::string& out) {
  if (ckpt_path.empty()) throw UsageError("--checkpoint is required");
  const Checkpoint ck = load_checkpoint(ckpt_path);
  RunConfig rc;
  rc.model = ck.config;
  rc = flags.resolve(rc);
  if (!mode.empty()) rc.set("finetune_mode", mode);
  const auto manifest = open_data(data);
  rc.model.num_classes = manifest.num_classes();
  rc.validate();
  const fs::path dir = make_out(out);
  write_config_echo(dir, rc, {{"data", data}, {"checkpoint", ckpt_path}});

  PointFemae<float> model(rc.model);
  restore(model, ck, nullptr, RestoreScope::Encoder);
  auto train = load_split<float>(manifest, Split::Train);
  if (train.empty()) throw UsageError("data set has no train items");
  Finetuner<float> tuner(model, train, rc.train);
  std::ofstream metrics(dir / "metrics.csv");
  write_finetune_header(metrics);
  while (!tuner.done()) {
    write_finetune_row(metrics, tuner.step());
    metrics.flush();
  }
  save_checkpoint(tuner.checkpoint(), dir / kCheckpointName);
  std::cout << "train accuracy " << eval_classification(model, train) << "\n";
  const auto test = load_split<float>(manifest, Split::Test);
  if (!test.empty()) std::cout << "test accuracy " << eval_classification(model, test) << "\n";
  std::cout << "checkpoint " << (dir / kCheckpointName).string() << "\n";
  return 0;
}

int cmd_probe(const std::vector<std::string>& ckpts, const std::string& data, const std::string& strategies,
              const std::string& seeds_text, std::optional<double> ratio, const std::string& out) {
  if (ckpts.empty()) throw UsageError("--checkpoint is required");
  std::vector<ProbeStrategy> strats;
  std::istringstream ss(strategies);
  for (std::string s; std::getline(ss, s, ',');) strats.push_back(parse_strategy(s));
  if (strats.empty()) throw UsageError("--strategies lists no strategy");
  const auto seeds = parse_seed_list(seeds_text);
  const auto manifest = open_data(data);
  const auto test = load_split<float>(manifest, Split::Test);
  if (test.empty()) throw UsageError("data set has no test items to probe");
  const fs::path dir = make_out(out);

  std::vector<ReportRow> rows;
  std::string jsonl;
  for (const auto& path : ckpts) {
    const Checkpoint ck = load_checkpoint(path);
    PointFemae<float> model(ck.config);
    restore(model, ck);
    const bool classifier = ck.meta.value("kind", std::string()) == "finetune";
    const double r = ratio.value_or(ck.config.mask_ratio);
    ReportRow row{fs::path(path).parent_path().filename().string() + "/" + fs::path(path).filename().string(),
                  std::string(1, to_char(ck.config.variant)), seeds, {}, {}, {}, {}};
    for (ProbeStrategy s : strats) {
      double cd = 0, acc = 0;
      for (std::uint64_t seed : seeds) {
        auto res = probe_reconstruction(model, test, s, r, seed);
        cd += res.mean;
        jsonl += probe_jsonl(res.items);
        if (classifier) acc += eval_masked_classification(model, test, s, r, seed);
      }
      cd /= static_cast<double>(seeds.size());
      acc /= static_cast<double>(seeds.size());
      (s == ProbeStrategy::GMPC ? row.gmpc_cd : row.lmpc_cd) = cd;
      if (classifier) (s == ProbeStrategy::GMPC ? row.gmpc_acc : row.lmpc_acc) = acc;
    }
    rows.push_back(std::move(row));
  }
  std::ofstream(dir / "report.csv") << report_csv(rows);
  std::ofstream(dir / "report.txt") << report_text(rows);
  std::ofstream(dir / "probe_items.jsonl") << jsonl;
  std::ofstream echo(dir / kConfigEchoName);
  for (const auto& p : ckpts) echo << "checkpoint=" << p << "\n";
  echo << "data=" << data << "\nstrategies=" << strategies << "\nseeds=" << seeds_text << "\n";
  if (ratio) echo << "ratio=" << *ratio << "\n";
  std::cout << report_text(rows);
  return 0;
}

int cmd_params(const ConfigFlags& flags, const std::string& mode) {
  RunConfig rc = flags.resolve();
  rc.model.validate();
  using Mode = PointFemae<float>::CountMode;
  Mode m;
  if (mode == "finetune") {
    m = Mode::Finetune;
  } else if (mode == "pretrain") {
    m = Mode::Pretrain;
  } else {
    throw UsageError("--mode must be finetune or pretrain, got '" + mode + "'");
  }
  PointFemae<float> model(rc.model);
  const std::size_t n = model.count_params(m);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2fM", static_cast<double>(n) / 1e6);
  std::cout << n << " (" << buf << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-branch masked point autoencoder"};
  app.require_subcommand(1);

  GenDataOptions gen;
  std::string gen_out;
  auto* g = app.add_subcommand("gen-data", "write a synthetic shape data set");
  g->add_option("--out", gen_out, "output directory")->required();
  g->add_option("--classes", gen.classes, "number of shape families (1-6)");
  g->add_option("--per-class", gen.per_class, "clouds per family");
  g->add_option("--points", gen.points, "points per cloud");
  g->add_option("--noise", gen.noise, "Gaussian jitter sigma");
  g->add_option("--test-fraction", gen.test_fraction, "fraction of each family put in the test split");
  g->add_option("--seed", gen.seed, "generator seed");

  ConfigFlags pre_flags;
  std::string pre_data, pre_variant, pre_out, pre_resume;
  auto* p = app.add_subcommand("pretrain", "masked-reconstruction pre-training");
  pre_flags.add_to(p);
  p->add_option("--data", pre_data, "data set directory");
  p->add_option("--variant", pre_variant, "architecture variant A-H");
  p->add_option("--out", pre_out, "output directory");
  p->add_option("--resume", pre_resume, "continue from a pre-training checkpoint");

  ConfigFlags ft_flags;
  std::string ft_ckpt, ft_data, ft_mode, ft_out;
  auto* f = app.add_subcommand("finetune", "classification fine-tuning from a checkpoint");
  ft_flags.add_to(f);
  f->add_option("--checkpoint", ft_ckpt, "pre-trained checkpoint");
  f->add_option("--data", ft_data, "labeled data set directory");
  f->add_option("--mode", ft_mode, "full or lem_and_head");
  f->add_option("--out", ft_out, "output directory");

  std::vector<std::string> pr_ckpts;
  std::string pr_data, pr_strats = "gmpc,lmpc", pr_seeds = "0", pr_out;
  std::optional<double> pr_ratio;
  auto* r = app.add_subcommand("probe", "GMPC/LMPC reconstruction probe report");
  r->add_option("--checkpoint", pr_ckpts, "checkpoint(s) to probe");
  r->add_option("--data", pr_data, "data set directory (test split is probed)");
  r->add_option("--strategies", pr_strats, "comma-separated: gmpc,lmpc");
  r->add_option("--seeds", pr_seeds, "comma-separated probe seeds");
  r->add_option("--ratio", pr_ratio, "mask ratio (default: the checkpoint's)");
  r->add_option("--out", pr_out, "output directory");

  ConfigFlags pa_flags;
  std::string pa_mode = "finetune";
  auto* c = app.add_subcommand("params", "print the parameter count of a configuration");
  pa_flags.add_to(c);
  c->add_option("--mode", pa_mode, "finetune or pretrain");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen, gen_out);
    if (p->parsed()) return cmd_pretrain(pre_flags, pre_data, pre_variant, pre_out, pre_resume);
    if (f->parsed()) return cmd_finetune(ft_flags, ft_ckpt, ft_data, ft_mode, ft_out);
    if (r->parsed()) return cmd_probe(pr_ckpts, pr_data, pr_strats, pr_seeds, pr_ratio, pr_out);
    if (c->parsed()) return cmd_params(pa_flags, pa_mode);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 1;
  } catch (const LoadError& e) {
    std::cerr << "load error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
