// purer: command line front end to the runner.
//
//   purer meta-train --config desk.cfg --hp.lambda 2
//   purer evaluate --config desk.cfg --theta-source random --parallel-eval 4
//   purer ablate --config desk.cfg --seeds 1,2,3

#include "purer/archive.hpp"
#include "purer/errors.hpp"
#include "purer/runner.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "CLI11.hpp"

namespace fs = std::filesystem;
using namespace purer;

namespace {

constexpr int kConfigExit = 2;
constexpr int kNumericExit = 3;

// Options shared by every subcommand: --config, --set key=value and one
// --<key> flag per config field.
struct ConfigOptions {
  std::string config_file;
  std::vector<std::string> assignments;
  std::map<std::string, std::string> flags;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", assignments, "override, key=value (repeatable)");
    for (const auto& key : ExperimentConfig::keys()) cmd->add_option("--" + key, flags[key]);
  }

  ExperimentConfig build(CLI::App* cmd) const {
    ExperimentConfig cfg = config_file.empty() ? ExperimentConfig{} : ExperimentConfig::load(config_file);
    for (const auto& a : assignments) {
      const auto eq = a.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + a + "'");
      auto trim = [](std::string s) {
        s.erase(0, s.find_first_not_of(" \t"));
        s.erase(s.find_last_not_of(" \t") + 1);
        return s;
      };
      cfg.set(trim(a.substr(0, eq)), trim(a.substr(eq + 1)));
    }
    for (const auto& [key, value] : flags)
      if (cmd->count("--" + key) > 0) cfg.set(key, value);
    cfg.validate();
    return cfg;
  }
};

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--seeds expects comma-separated integers, got '" + text + "'");
    }
  }
  if (seeds.empty()) throw ConfigError("--seeds is empty");
  return seeds;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

int report_error(const std::exception& e) {
  std::cerr << "error: " << e.what() << "\n";
  // asking for the Average baseline on a mixed zoo is a configuration mistake too
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
      dynamic_cast<const ScenarioError*>(&e))
    return kConfigExit;
  if (dynamic_cast<const NumericError*>(&e)) return kNumericExit;
  return 1;
}

void meta_train(const ExperimentConfig& cfg, const std::optional<std::string>& resume) {
  const Workspace ws = prepare_workspace(cfg);
  const auto r = run_meta_training(cfg, ws, resume);
  std::cout << "trained " << r.state.iteration << " iterations, metrics in " << r.metrics_csv << "\n";
}

// One child process per seed, each with its own output directory.
int meta_train_seeds(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds) {
  std::vector<pid_t> children;
  for (const auto seed : seeds) {
    ExperimentConfig c = cfg;
    c.seed_zoo = c.seed_train = c.seed_eval = seed;
    c.output_dir = (fs::path(cfg.output_dir) / ("seed_" + std::to_string(seed))).string();
    std::cout.flush();
    const pid_t pid = fork();
    if (pid < 0) throw IoError("fork failed");
    if (pid == 0) {
      int code = 0;
      try {
        meta_train(c, std::nullopt);
      } catch (const std::exception& e) {
        code = report_error(e);
      }
      std::cout.flush();
      _exit(code);
    }
    children.push_back(pid);
  }
  int worst = 0;
  for (const pid_t pid : children) {
    int status = 0;
    waitpid(pid, &status, 0);
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : 1;
    if (code != 0 && (worst == 0 || code < worst)) worst = code;
  }
  return worst;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-free meta-learning with curriculum inversion and test-time calibration"};
  app.require_subcommand(1);

  ConfigOptions pre_opts, train_opts, eval_opts, dump_opts, plot_opts, ablate_opts;

  auto* pretrain = app.add_subcommand("pretrain-zoo", "build the model zoo and save it to zoo.dir");
  pre_opts.attach(pretrain);

  auto* train = app.add_subcommand("meta-train", "data-free meta-training");
  train_opts.attach(train);
  std::string resume, train_seeds;
  train->add_option("--resume", resume, "continue from a training checkpoint")->check(CLI::ExistingFile);
  train->add_option("--seeds", train_seeds, "a,b,c: one independent run (process) per seed");

  auto* evaluate = app.add_subcommand("evaluate", "few-shot evaluation on the test classes");
  eval_opts.attach(evaluate);
  std::string source = "purer", theta_path;
  int parallel_eval = 0;
  evaluate->add_option("--theta-source", source, "purer, random or average");
  evaluate->add_option("--theta", theta_path, "meta parameters (default <output.dir>/meta_theta.ckpt)");
  evaluate->add_option("--parallel-eval", parallel_eval, "evaluation workers")->check(CLI::PositiveNumber);

  auto* dump = app.add_subcommand("dump-images", "PNG grids of a checkpoint's pseudo images");
  dump_opts.attach(dump);
  std::string checkpoint, dump_dir;
  dump->add_option("--checkpoint", checkpoint, "training checkpoint (default: latest in output.dir)");
  dump->add_option("--out", dump_dir, "output directory (default <output.dir>/images)");

  auto* plot = app.add_subcommand("plot", "training curves from the metrics CSV");
  plot_opts.attach(plot);
  std::string metrics, plot_dir;
  plot->add_option("--metrics", metrics, "metrics CSV (default <output.dir>/train_metrics.csv)");
  plot->add_option("--out", plot_dir, "output directory (default <output.dir>/plots)");

  auto* ablate = app.add_subcommand("ablate", "EI / +Curriculum / +ICFIL / Ours / Random for each seed");
  ablate_opts.attach(ablate);
  std::string ablate_seeds = "1,2,3";
  int ablate_parallel = 0;
  ablate->add_option("--seeds", ablate_seeds, "a,b,c");
  ablate->add_option("--parallel-eval", ablate_parallel, "evaluation workers")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigExit;
  }

  try {
    if (*pretrain) {
      const auto cfg = pre_opts.build(pretrain);
      if (cfg.zoo_dir.empty()) throw ConfigError("pretrain-zoo needs zoo.dir");
      const Workspace ws = prepare_workspace(cfg);
      for (std::size_t i = 0; i < ws.zoo.entries.size(); ++i) {
        const auto& e = ws.zoo.entries[i];
        std::cout << "model " << i << " classes";
        for (int c : e.source_classes) std::cout << " " << c;
        std::cout << " train accuracy " << e.train_accuracy << "\n";
      }
      std::cout << "zoo in " << cfg.zoo_dir << "\n";
    } else if (*train) {
      const auto cfg = train_opts.build(train);
      if (!train_seeds.empty()) {
        if (!resume.empty()) throw ConfigError("--resume and --seeds are exclusive");
        return meta_train_seeds(cfg, parse_seeds(train_seeds));
      }
      meta_train(cfg, resume.empty() ? std::nullopt : std::optional<std::string>(resume));
    } else if (*evaluate) {
      auto cfg = eval_opts.build(evaluate);
      if (parallel_eval > 0) cfg.eval_workers = parallel_eval;
      const ThetaSource src = parse_theta_source(source);
      const Workspace ws = prepare_workspace(cfg);
      std::optional<NetworkParams<float>> theta;
      if (src == ThetaSource::kPurer)
        theta = load_network(theta_path.empty() ? (fs::path(cfg.output_dir) / "meta_theta.ckpt").string() : theta_path);
      const auto report = run_evaluation(cfg, ws, src, theta ? &*theta : nullptr);
      const bool icfil = src == ThetaSource::kPurer && cfg.ablation_icfil;
      fs::create_directories(cfg.output_dir);
      const auto path = fs::path(cfg.output_dir) / ("eval_report_" + to_string(src) + ".json");
      write_file(path, report_json(report, cfg, src, icfil) + "\n");
      std::cout << to_string(src) << (icfil ? "+icfil" : "") << ": " << report.mean << " +- " << report.ci95 << " over "
                << report.num_tasks << " tasks (" << path.string() << ")\n";
    } else if (*dump) {
      const auto cfg = dump_opts.build(dump);
      if (checkpoint.empty()) {
        long last = -1;
        const auto dir = fs::path(cfg.output_dir) / "checkpoints";
        if (fs::is_directory(dir))
          for (const auto& f : fs::directory_iterator(dir)) {
            const auto name = f.path().stem().string();
            if (name.rfind("iter_", 0) == 0) last = std::max(last, std::stol(name.substr(5)));
          }
        if (last < 0) throw IoError("no checkpoint in " + dir.string());
        checkpoint = checkpoint_path(cfg, last);
      }
      const auto out = dump_dir.empty() ? (fs::path(cfg.output_dir) / "images").string() : dump_dir;
      const auto paths = dump_checkpoint_images(checkpoint, out);
      std::cout << paths.size() << " class grids in " << out << "\n";
    } else if (*plot) {
      const auto cfg = plot_opts.build(plot);
      const auto csv = metrics.empty() ? (fs::path(cfg.output_dir) / "train_metrics.csv").string() : metrics;
      const auto out = plot_dir.empty() ? (fs::path(cfg.output_dir) / "plots").string() : plot_dir;
      for (const auto& p : emit_plots(csv, out)) std::cout << p << "\n";
    } else if (*ablate) {
      auto cfg = ablate_opts.build(ablate);
      if (ablate_parallel > 0) cfg.eval_workers = ablate_parallel;
      for (const auto& row : run_ablation(cfg, parse_seeds(ablate_seeds)))
        std::cout << "seed " << row.seed << " " << row.variant << " " << row.report.mean << " +- " << row.report.ci95
                  << "\n";
      std::cout << "table in " << (fs::path(cfg.output_dir) / "ablation.csv").string() << "\n";
    }
  } catch (const std::exception& e) {
    return report_error(e);
  }
  return 0;
}
