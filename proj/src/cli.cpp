#include "grab/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "grab/bench.hpp"
#include "grab/evalr.hpp"
#include "grab/gradcheck.hpp"
#include "grab/mask_text.hpp"
#include "grab/parallel.hpp"
#include "grab/run_config.hpp"
#include "grab/sts.hpp"

namespace grab {

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return 1;
    case ErrorKind::kIo:
    case ErrorKind::kParse: return 2;
    default: return 3;
  }
}

namespace {

std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path);
  return out;
}

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

template <typename T>
void train_typed(const RunConfig& cfg, const std::vector<Event>& log, const std::string& ckpt,
                 const std::string& metrics, std::ostream& out) {
  std::optional<std::ofstream> trace;
  if (!metrics.empty()) {
    trace = open_out(metrics);
    write_trace_header(*trace);
  }
  auto res = train<T>(log, cfg.model, cfg.train, [&](const TraceRow& r) {
    if (trace) write_trace_row(*trace, r);
  });
  save_checkpoint(ckpt, res.state);
  out << "trained steps=" << res.state.step << " epochs=" << res.state.epoch;
  if (!res.eval_auc.empty()) out << " eval_auc=" << std::setprecision(6) << res.eval_auc.back();
  out << "\n";
}

template <typename T>
void eval_typed(const std::string& ckpt, const std::vector<Event>& log, int token_budget, std::ostream& out) {
  auto st = load_checkpoint<T>(ckpt);
  const auto instances = instances_from_log(log, FeatureSchema::standard(), st.params.cfg.table_rows);
  std::vector<double> scores;
  std::vector<int> labels;
  score_instances(st.params, instances, token_budget, scores, labels);
  std::size_t pos = 0;
  for (int l : labels) pos += l == 1;
  const std::size_t neg = labels.size() - pos;
  const double a = auc(scores, labels);
  // Standard error of the AUC of an uninformative scorer.
  const double se = std::sqrt(static_cast<double>(pos + neg + 1) / (12.0 * static_cast<double>(pos * neg)));
  out << std::setprecision(6) << "auc=" << a << " n=" << labels.size() << " positives=" << pos
      << " null_se=" << se << "\n";
}

void print_attention(const AttentionReport& r, std::ostream& out) {
  out << "attention pos_share";
  for (double v : r.pos_share) out << ' ' << v;
  out << "\nattention clicked_mass_share=" << r.clicked_mass_share
      << " clicked_key_share=" << r.clicked_key_share << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"grab_lab: packed sequence CTR pipeline"};
  app.require_subcommand(1);
  int threads = default_threads();
  app.add_option("--threads", threads, "worker threads (default GRAB_LAB_THREADS or 1)")
      ->check(CLI::PositiveNumber);

  std::string config, log_path, out_path, ckpt, metrics, layout;

  auto* gen = app.add_subcommand("gen", "generate a synthetic event log");
  gen->add_option("--config", config, "run config");
  gen->add_option("--out", out_path, "output JSONL log")->required();

  auto* trn = app.add_subcommand("train", "train a model on a log");
  trn->add_option("--config", config, "run config");
  trn->add_option("--log", log_path, "input JSONL log")->required();
  trn->add_option("--out-ckpt", ckpt, "checkpoint to write")->required();
  trn->add_option("--metrics", metrics, "training trace CSV");

  int eval_budget = 4096;
  auto* ev = app.add_subcommand("eval", "score a log with a checkpoint");
  ev->add_option("--ckpt", ckpt, "checkpoint")->required();
  ev->add_option("--log", log_path, "input JSONL log")->required();
  ev->add_option("--token-budget", eval_budget, "packed tokens per scoring batch")->check(CLI::PositiveNumber);

  std::string attention_csv;
  auto* abl = app.add_subcommand("ablate", "train every ablation variant and seed");
  abl->add_option("--config", config, "run config");
  abl->add_option("--out-csv", out_path, "results CSV")->required();
  abl->add_option("--attention-csv", attention_csv, "attention shares of the full variant");

  auto* scl = app.add_subcommand("scale", "depth/width scaling sweep");
  scl->add_option("--config", config, "run config");
  scl->add_option("--out-csv", out_path, "results CSV")->required();

  auto* insp = app.add_subcommand("inspect-masks", "print mask grids of a layout");
  insp->add_option("--layout-spec", layout, "layout description file")->required();
  insp->add_option("--out", out_path, "output file (default stdout)");

  auto* bch = app.add_subcommand("bench", "packed vs padded and RAB kernel micro-benchmarks");
  bch->add_option("--config", config, "run config");
  bch->add_option("--out-csv", out_path, "results CSV");

  double tol = 1e-4;
  std::size_t max_entries = 0;
  auto* gc = app.add_subcommand("grad-check", "central-difference check of every parameter group");
  gc->add_option("--tol", tol, "maximum relative error");
  gc->add_option("--max-entries", max_entries, "entries probed per block (0 = all)");

  auto* show = app.add_subcommand("show-config", "print every config key with its value");
  show->add_option("--config", config, "run config");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    try {
      app.parse(rev);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::ParseError& e) {
      fail(ErrorKind::kConfig, e.what());
    }

    if (gen->parsed()) {
      const auto cfg = config_or_default(config);
      const auto events = generate_log(cfg.gen, threads);
      write_log(events, out_path);
      std::size_t cand = 0, clicks = 0;
      for (const auto& e : events)
        if (e.is_candidate) {
          ++cand;
          clicks += e.label.value_or(0);
        }
      out << "events=" << events.size() << " candidates=" << cand << " click_rate="
          << (cand ? static_cast<double>(clicks) / static_cast<double>(cand) : 0.0) << "\n";
    } else if (trn->parsed()) {
      const auto cfg = config_or_default(config);
      const auto events = read_log(log_path);
      if (cfg.model.precision == num::Precision::kDouble) train_typed<double>(cfg, events, ckpt, metrics, out);
      else train_typed<float>(cfg, events, ckpt, metrics, out);
    } else if (ev->parsed()) {
      const auto events = read_log(log_path);
      if (checkpoint_precision(ckpt) == num::Precision::kDouble) eval_typed<double>(ckpt, events, eval_budget, out);
      else eval_typed<float>(ckpt, events, eval_budget, out);
    } else if (abl->parsed()) {
      const auto cfg = config_or_default(config);
      const auto res = run_ablation(cfg.ablation_spec(threads));
      auto csv = open_out(out_path);
      write_ablation_csv(csv, res.rows);
      for (Variant v : cfg.variants) {
        std::vector<double> aucs;
        for (const auto& r : res.rows)
          if (r.variant == v) aucs.push_back(r.auc);
        out << "variant=" << to_string(v) << " median_auc=" << std::setprecision(6) << median(aucs) << "\n";
      }
      for (const auto& rep : res.full_attention) print_attention(rep, out);
      if (!attention_csv.empty()) {
        auto a = open_out(attention_csv);
        a << "seed,kind,bucket,share\n";
        std::size_t i = 0;
        for (const auto& r : res.rows) {
          if (r.variant != Variant::kFull) continue;
          const auto& rep = res.full_attention.at(i++);
          auto dump = [&](const char* kind, const std::vector<double>& v) {
            for (std::size_t b = 0; b < v.size(); ++b) a << r.seed << ',' << kind << ',' << b << ',' << v[b] << '\n';
          };
          dump("pos", rep.pos_share);
          dump("time", rep.time_share);
          dump("action", rep.action_share);
        }
      }
    } else if (scl->parsed()) {
      const auto cfg = config_or_default(config);
      const auto rows = run_scaling(cfg.scaling_spec(threads));
      auto csv = open_out(out_path);
      write_scaling_csv(csv, rows);
      for (const auto& g : cfg.grid) {
        std::vector<double> aucs;
        for (const auto& r : rows)
          if (r.config == g && r.bucket == "all" && r.auc) aucs.push_back(*r.auc);
        out << "config=" << g.n_layer << "x" << g.n_head << "x" << g.d_model << " median_auc="
            << std::setprecision(6) << (aucs.empty() ? std::nan("") : median(aucs)) << "\n";
      }
    } else if (insp->parsed()) {
      const auto spec = parse_layout_spec(read_text(layout));
      const std::string text = format_mask_grids(spec);
      if (out_path.empty()) {
        out << text;
      } else {
        auto f = open_out(out_path);
        f << text;
      }
    } else if (bch->parsed()) {
      const auto cfg = config_or_default(config);
      const auto res = run_bench(cfg.bench, cfg.model);
      if (!out_path.empty()) write_bench_csv(res, out_path);
      for (const auto& r : res.rows)
        out << r.kernel << '/' << r.variant << " tokens_per_sec=" << r.tokens_per_sec
            << " peak_words=" << r.peak_words << "\n";
      out << "waste_ratio=" << res.waste_ratio << " packed_speedup=" << res.packed_speedup
          << " fast_table_words=" << res.fast_table_words << " naive_tensor_words=" << res.naive_tensor_words
          << "\n";
    } else if (gc->parsed()) {
      ModelGradCheckConfig gcfg;
      gcfg.max_entries_per_param = max_entries;
      const auto groups = model_grad_check(gcfg);
      double worst = 0.0;
      std::string worst_group;
      for (const auto& g : groups) {
        out << "group=" << g.group << " checked=" << g.report.n_checked << " max_rel_err="
            << std::setprecision(3) << g.report.max_rel_err << " worst=" << g.report.worst_param << "\n";
        if (g.report.max_rel_err > worst) {
          worst = g.report.max_rel_err;
          worst_group = g.group;
        }
      }
      if (worst > tol)
        fail(ErrorKind::kContract, "grad-check group " + worst_group + " relative error " + std::to_string(worst) +
                                       " exceeds " + std::to_string(tol));
    } else if (show->parsed()) {
      out << format_run_config(config_or_default(config));
    }
    return 0;
  } catch (const Error& e) {
    const int code = exit_code(e.kind());
    err << "error kind=" << to_string(e.kind()) << " code=" << code << " reason=" << one_line(e.what()) << "\n";
    return code;
  } catch (const std::exception& e) {
    err << "error kind=internal code=3 reason=" << one_line(e.what()) << "\n";
    return 3;
  }
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace grab
