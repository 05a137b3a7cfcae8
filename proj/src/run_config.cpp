#include "grab/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "grab/error.hpp"

namespace grab {

namespace {

// Thrown by value parsers; the caller adds line and key context.
struct BadValue {
  std::string expected;
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename I>
I parse_int(std::string_view v) {
  I out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw BadValue{"integer"};
  return out;
}

double parse_double(std::string_view v) {
  double out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw BadValue{"number"};
  return out;
}

bool parse_bool(std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw BadValue{"true or false"};
}

std::vector<std::string> split_list(std::string_view v) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const auto end = v.find(',', start);
    const std::string item = trim(v.substr(start, end == std::string_view::npos ? end : end - start));
    if (item.empty()) throw BadValue{"comma-separated list without empty items"};
    out.push_back(item);
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

template <typename F>
auto parse_list(std::string_view v, F each) {
  std::vector<decltype(each(std::string_view{}))> out;
  for (const auto& s : split_list(v)) out.push_back(each(s));
  return out;
}

template <typename F>
auto wrap_enum(F f) {
  return [f](std::string_view v) {
    try {
      return f(v);
    } catch (const Error& e) {
      throw BadValue{e.what()};
    }
  };
}

// Shortest text that parses back to the same double.
std::string num(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename V>
std::string join(const std::vector<V>& v, const std::function<std::string(const V&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
  return out;
}

struct Entry {
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::map<std::string, Entry>& registry() {
  static const std::map<std::string, Entry> r = [] {
    std::map<std::string, Entry> m;
    auto integer = [&](const std::string& k, auto field) {
      using I = std::remove_reference_t<decltype(field(std::declval<RunConfig&>()))>;
      m[k] = {[field](RunConfig& c, std::string_view v) { field(c) = parse_int<I>(v); },
              [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }};
    };
    auto real = [&](const std::string& k, auto field) {
      m[k] = {[field](RunConfig& c, std::string_view v) { field(c) = parse_double(v); },
              [field](const RunConfig& c) { return num(field(const_cast<RunConfig&>(c))); }};
    };
    auto boolean = [&](const std::string& k, auto field) {
      m[k] = {[field](RunConfig& c, std::string_view v) { field(c) = parse_bool(v); },
              [field](const RunConfig& c) {
                return std::string(field(const_cast<RunConfig&>(c)) ? "true" : "false");
              }};
    };
    auto opt_int = [&](const std::string& k, auto field) {
      m[k] = {[field](RunConfig& c, std::string_view v) {
                if (v == "none") field(c).reset();
                else field(c) = parse_int<std::int64_t>(v);
              },
              [field](const RunConfig& c) {
                const auto& o = field(const_cast<RunConfig&>(c));
                return o ? std::to_string(*o) : std::string("none");
              }};
    };

    // gen.*
    integer("gen.n_users", [](RunConfig& c) -> auto& { return c.gen.n_users; });
    integer("gen.events_min", [](RunConfig& c) -> auto& { return c.gen.events_per_user_range.first; });
    integer("gen.events_max", [](RunConfig& c) -> auto& { return c.gen.events_per_user_range.second; });
    integer("gen.n_candidates_per_user", [](RunConfig& c) -> auto& { return c.gen.n_candidates_per_user; });
    real("gen.base_click_rate", [](RunConfig& c) -> auto& { return c.gen.base_click_rate; });
    real("gen.recency_boost", [](RunConfig& c) -> auto& { return c.gen.recency_boost; });
    real("gen.action_affinity_boost", [](RunConfig& c) -> auto& { return c.gen.action_affinity_boost; });
    real("gen.static_boost", [](RunConfig& c) -> auto& { return c.gen.static_boost; });
    integer("gen.n_channels", [](RunConfig& c) -> auto& { return c.gen.n_channels; });
    m["gen.channel_half_lives"] = {
        [](RunConfig& c, std::string_view v) { c.gen.channel_half_lives = parse_list(v, parse_double); },
        [](const RunConfig& c) {
          return join<double>(c.gen.channel_half_lives, [](const double& x) { return num(x); });
        }};
    for (const char* f : {field::kCategory, field::kItemId, field::kUserGroup}) {
      const std::string name = f;
      m["gen.vocab." + name] = {
          [name](RunConfig& c, std::string_view v) { c.gen.field_vocab_sizes[name] = parse_int<int>(v); },
          [name](const RunConfig& c) {
            const auto it = c.gen.field_vocab_sizes.find(name);
            return std::to_string(it == c.gen.field_vocab_sizes.end() ? 0 : it->second);
          }};
    }
    real("gen.session_gap_mean", [](RunConfig& c) -> auto& { return c.gen.session_gap_mean; });
    real("gen.intra_session_gap_mean", [](RunConfig& c) -> auto& { return c.gen.intra_session_gap_mean; });
    real("gen.session_length_mean", [](RunConfig& c) -> auto& { return c.gen.session_length_mean; });
    integer("gen.seed", [](RunConfig& c) -> auto& { return c.gen.seed; });

    // model.*
    integer("model.n_layer", [](RunConfig& c) -> auto& { return c.model.n_layer; });
    integer("model.n_head", [](RunConfig& c) -> auto& { return c.model.n_head; });
    integer("model.d_model", [](RunConfig& c) -> auto& { return c.model.d_model; });
    integer("model.n_channels", [](RunConfig& c) -> auto& { return c.model.n_channels; });
    m["model.window_length"] = {
        [](RunConfig& c, std::string_view v) {
          if (v == "none") c.model.window.length.reset();
          else c.model.window.length = parse_int<int>(v);
        },
        [](const RunConfig& c) {
          return c.model.window.length ? std::to_string(*c.model.window.length) : std::string("none");
        }};
    opt_int("model.window_time", [](RunConfig& c) -> auto& { return c.model.window.time; });
    integer("model.n_pos", [](RunConfig& c) -> auto& { return c.model.buckets.n_pos; });
    integer("model.n_act", [](RunConfig& c) -> auto& { return c.model.buckets.n_act; });
    integer("model.n_time", [](RunConfig& c) -> auto& { return c.model.buckets.n_time; });
    integer("model.d_ffn", [](RunConfig& c) -> auto& { return c.model.d_ffn; });
    m["model.precision"] = {
        [](RunConfig& c, std::string_view v) {
          if (v == "single") c.model.precision = num::Precision::kSingle;
          else if (v == "double") c.model.precision = num::Precision::kDouble;
          else throw BadValue{"single or double"};
        },
        [](const RunConfig& c) {
          return std::string(c.model.precision == num::Precision::kSingle ? "single" : "double");
        }};
    m["model.rab_path"] = {
        [](RunConfig& c, std::string_view v) { c.model.rab_path = wrap_enum(parse_rab_path)(v); },
        [](const RunConfig& c) { return std::string(to_string(c.model.rab_path)); }};
    integer("model.d_emb", [](RunConfig& c) -> auto& { return c.model.d_emb; });
    integer("model.table_rows", [](RunConfig& c) -> auto& { return c.model.table_rows; });
    m["model.sparse_optimizer"] = {
        [](RunConfig& c, std::string_view v) {
          if (v == "sgd") c.model.sparse_optimizer = SparseOptimizer::kSgd;
          else if (v == "adagrad") c.model.sparse_optimizer = SparseOptimizer::kAdagrad;
          else throw BadValue{"sgd or adagrad"};
        },
        [](const RunConfig& c) {
          return std::string(c.model.sparse_optimizer == SparseOptimizer::kSgd ? "sgd" : "adagrad");
        }};
    boolean("model.rel_pos", [](RunConfig& c) -> auto& { return c.model.rel_pos; });
    boolean("model.rel_time", [](RunConfig& c) -> auto& { return c.model.rel_time; });
    boolean("model.rel_action", [](RunConfig& c) -> auto& { return c.model.rel_action; });
    boolean("model.target_mix", [](RunConfig& c) -> auto& { return c.model.target_mix; });
    m["model.token_mode"] = {
        [](RunConfig& c, std::string_view v) { c.model.token_mode = wrap_enum(parse_token_mode)(v); },
        [](const RunConfig& c) { return std::string(to_string(c.model.token_mode)); }};
    integer("model.sparse_hidden", [](RunConfig& c) -> auto& { return c.model.sparse_hidden; });
    integer("model.seed", [](RunConfig& c) -> auto& { return c.model.seed; });

    // train.*
    real("train.lr_dense", [](RunConfig& c) -> auto& { return c.train.lr_dense; });
    real("train.lr_sparse", [](RunConfig& c) -> auto& { return c.train.lr_sparse; });
    m["train.optimizer_dense"] = {
        [](RunConfig& c, std::string_view v) {
          if (v == "adam") c.train.optimizer_dense = DenseOptimizer::kAdam;
          else if (v == "sgd") c.train.optimizer_dense = DenseOptimizer::kSgd;
          else throw BadValue{"adam or sgd"};
        },
        [](const RunConfig& c) {
          return std::string(c.train.optimizer_dense == DenseOptimizer::kAdam ? "adam" : "sgd");
        }};
    real("train.adam_beta1", [](RunConfig& c) -> auto& { return c.train.adam_beta1; });
    real("train.adam_beta2", [](RunConfig& c) -> auto& { return c.train.adam_beta2; });
    real("train.adam_eps", [](RunConfig& c) -> auto& { return c.train.adam_eps; });
    integer("train.token_budget", [](RunConfig& c) -> auto& { return c.train.token_budget; });
    integer("train.exposures_per_batch", [](RunConfig& c) -> auto& { return c.train.exposures_per_batch; });
    integer("train.stage1_per_stage2", [](RunConfig& c) -> auto& { return c.train.stage1_per_stage2; });
    integer("train.epochs", [](RunConfig& c) -> auto& { return c.train.epochs; });
    integer("train.max_steps", [](RunConfig& c) -> auto& { return c.train.max_steps; });
    integer("train.seed", [](RunConfig& c) -> auto& { return c.train.seed; });
    m["train.mode"] = {
        [](RunConfig& c, std::string_view v) { c.train.mode = wrap_enum(parse_train_mode)(v); },
        [](const RunConfig& c) { return std::string(to_string(c.train.mode)); }};
    real("train.eval_fraction", [](RunConfig& c) -> auto& { return c.train.eval_fraction; });
    integer("train.eval_token_budget", [](RunConfig& c) -> auto& { return c.train.eval_token_budget; });

    // ablation.* / scale.*
    m["ablation.variants"] = {
        [](RunConfig& c, std::string_view v) { c.variants = parse_list(v, wrap_enum(parse_variant)); },
        [](const RunConfig& c) {
          return join<Variant>(c.variants, [](const Variant& x) { return std::string(to_string(x)); });
        }};
    m["ablation.seeds"] = {
        [](RunConfig& c, std::string_view v) { c.seeds = parse_list(v, parse_int<std::uint64_t>); },
        [](const RunConfig& c) {
          return join<std::uint64_t>(c.seeds, [](const std::uint64_t& x) { return std::to_string(x); });
        }};
    m["scale.grid"] = {
        [](RunConfig& c, std::string_view v) {
          c.grid = parse_list(v, [](std::string_view s) {
            const auto a = s.find('x');
            const auto b = a == std::string_view::npos ? a : s.find('x', a + 1);
            if (b == std::string_view::npos) throw BadValue{"n_layer x n_head x d_model, e.g. 2x2x64"};
            return ScaleConfig{parse_int<int>(s.substr(0, a)), parse_int<int>(s.substr(a + 1, b - a - 1)),
                               parse_int<int>(s.substr(b + 1))};
          });
        },
        [](const RunConfig& c) {
          return join<ScaleConfig>(c.grid, [](const ScaleConfig& g) {
            return std::to_string(g.n_layer) + "x" + std::to_string(g.n_head) + "x" +
                   std::to_string(g.d_model);
          });
        }};
    m["scale.seeds"] = {
        [](RunConfig& c, std::string_view v) { c.scale_seeds = parse_list(v, parse_int<std::uint64_t>); },
        [](const RunConfig& c) {
          return join<std::uint64_t>(c.scale_seeds, [](const std::uint64_t& x) { return std::to_string(x); });
        }};
    m["scale.length_edges"] = {
        [](RunConfig& c, std::string_view v) { c.length_edges = parse_list(v, parse_int<int>); },
        [](const RunConfig& c) {
          return join<int>(c.length_edges, [](const int& x) { return std::to_string(x); });
        }};

    // bench.*
    integer("bench.l_max", [](RunConfig& c) -> auto& { return c.bench.l_max; });
    integer("bench.n_instances", [](RunConfig& c) -> auto& { return c.bench.n_instances; });
    m["bench.lengths"] = {
        [](RunConfig& c, std::string_view v) {
          if (v != "fixed" && v != "uniform" && v != "heavy") throw BadValue{"fixed, uniform or heavy"};
          c.bench.lengths = std::string(v);
        },
        [](const RunConfig& c) { return c.bench.lengths; }};
    integer("bench.min_len", [](RunConfig& c) -> auto& { return c.bench.min_len; });
    integer("bench.rab_len", [](RunConfig& c) -> auto& { return c.bench.rab_len; });
    integer("bench.rab_d_head", [](RunConfig& c) -> auto& { return c.bench.rab_d_head; });
    integer("bench.rab_n_head", [](RunConfig& c) -> auto& { return c.bench.rab_n_head; });
    integer("bench.repeats", [](RunConfig& c) -> auto& { return c.bench.repeats; });
    integer("bench.seed", [](RunConfig& c) -> auto& { return c.bench.seed; });
    return m;
  }();
  return r;
}

void validate_bench(const BenchConfig& b) {
  auto bad = [](const std::string& f, const std::string& why) {
    fail(ErrorKind::kConfig, "bench." + f + ": " + why);
  };
  if (b.l_max < 1) bad("l_max", "must be >= 1");
  if (b.n_instances < 1) bad("n_instances", "must be >= 1");
  if (b.min_len < 1 || b.min_len > b.l_max) bad("min_len", "must be in [1, l_max]");
  if (b.rab_len < 1) bad("rab_len", "must be >= 1");
  if (b.rab_d_head < 1) bad("rab_d_head", "must be >= 1");
  if (b.rab_n_head < 1) bad("rab_n_head", "must be >= 1");
  if (b.repeats < 1) bad("repeats", "must be >= 1");
}

}  // namespace

AblationSpec RunConfig::ablation_spec(int threads) const {
  return {variants, seeds, gen, model, train, threads};
}

ScalingSpec RunConfig::scaling_spec(int threads) const {
  ScalingSpec s;
  s.grid = grid;
  s.seeds = scale_seeds;
  s.gen = gen;
  s.model = model;
  s.train = train;
  s.length_edges = length_edges;
  s.threads = threads;
  return s;
}

RunConfig parse_run_config(std::string_view text) {
  RunConfig cfg;
  const auto& reg = registry();
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) fail(ErrorKind::kConfig, where + "expected key=value");
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    const auto it = reg.find(key);
    if (it == reg.end()) fail(ErrorKind::kConfig, where + "unknown key '" + key + "'");
    if (!cfg.given.insert(key).second) fail(ErrorKind::kConfig, where + "duplicate key '" + key + "'");
    try {
      it->second.set(cfg, value);
    } catch (const BadValue& b) {
      fail(ErrorKind::kConfig, where + "key '" + key + "': expected " + b.expected + ", got '" + value + "'");
    }
  }
  cfg.gen.validate();
  cfg.model.validate();
  cfg.train.validate();
  validate_bench(cfg.bench);
  if (cfg.variants.empty()) fail(ErrorKind::kConfig, "ablation.variants: must be non-empty");
  for (const auto& g : cfg.grid) {
    ModelConfig m = cfg.model;
    m.n_layer = g.n_layer;
    m.n_head = g.n_head;
    m.d_model = g.d_model;
    m.validate();
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string format_run_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, e] : registry()) out += key + " = " + e.get(cfg) + "\n";
  return out;
}

std::vector<std::string> run_config_keys() {
  std::vector<std::string> out;
  for (const auto& [key, e] : registry()) out.push_back(key);
  return out;
}

}  // namespace grab
