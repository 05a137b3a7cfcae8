#include "grab/datagen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "grab/error.hpp"
#include "grab/parallel.hpp"
#include "grab/rng.hpp"

namespace grab {

namespace {

using Latent = std::array<double, kLatentDim>;

Latent unit_vector(Rng& rng) {
  Latent v;
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

double dot(const Latent& a, const Latent& b) {
  double s = 0.0;
  for (int i = 0; i < kLatentDim; ++i) s += a[i] * b[i];
  return s;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double logit(double p) { return std::log(p / (1.0 - p)); }

int vocab(const GenConfig& cfg, const char* name) {
  auto it = cfg.field_vocab_sizes.find(name);
  return it == cfg.field_vocab_sizes.end() ? 1 : it->second;
}

// Shared world: per-category latent directions and per-group biases.
struct World {
  std::vector<Latent> categories;
  std::vector<double> group_bias;
};

World make_world(const GenConfig& cfg) {
  World w;
  const int n_cat = vocab(cfg, field::kCategory);
  w.categories.reserve(n_cat);
  for (int k = 0; k < n_cat; ++k) {
    Rng rng(derive_seed({cfg.seed, 0xCA7ULL, static_cast<std::uint64_t>(k)}));
    w.categories.push_back(unit_vector(rng));
  }
  const int n_group = vocab(cfg, field::kUserGroup);
  for (int g = 0; g < n_group; ++g) {
    Rng rng(derive_seed({cfg.seed, 0x6409ULL, static_cast<std::uint64_t>(g)}));
    w.group_bias.push_back(rng.normal());
  }
  return w;
}

struct ClickedItem {
  std::int64_t ts;
  int category;
  int channel;
};

std::vector<Event> generate_user(const GenConfig& cfg, const World& world,
                                 std::uint64_t user) {
  Rng rng(derive_seed({cfg.seed, 0x05E7ULL, user}));
  const Latent pref = unit_vector(rng);
  const int n_cat = static_cast<int>(world.categories.size());
  const int n_item_per_cat = std::max(1, vocab(cfg, field::kItemId) / n_cat);
  const int group = static_cast<int>(rng.below(world.group_bias.size()));

  const auto [lo, hi] = cfg.events_per_user_range;
  const int n_hist = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  const int n_cand = cfg.n_candidates_per_user;
  const int n_total = n_hist + n_cand;

  // Session timeline: geometric bursts separated by geometric gaps.
  std::vector<std::int64_t> ts(n_total);
  std::int64_t t = static_cast<std::int64_t>(rng.below(7 * 86400));
  const double p_end_session = 1.0 / std::max(1.0, cfg.session_length_mean);
  for (int i = 0; i < n_total; ++i) {
    if (i > 0) {
      if (rng.bernoulli(p_end_session)) {
        t += 1 + static_cast<std::int64_t>(rng.geometric(1.0 / std::max(2.0, cfg.session_gap_mean)));
      } else {
        t += 1 + static_cast<std::int64_t>(rng.geometric(1.0 / std::max(2.0, cfg.intra_session_gap_mean)));
      }
    }
    ts[i] = t;
  }

  // Candidate slots; slot 0 stays history when any history exists.
  std::vector<int> slots(n_total);
  std::iota(slots.begin(), slots.end(), 0);
  const int first = n_hist > 0 ? 1 : 0;
  for (int i = first; i < n_total; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n_total - i)));
    std::swap(slots[i], slots[j]);
  }
  std::vector<bool> is_cand(n_total, false);
  for (int i = 0; i < n_cand; ++i) is_cand[slots[first + i]] = true;

  std::vector<double> cat_weight(n_cat);
  double cat_total = 0.0;
  for (int k = 0; k < n_cat; ++k) {
    cat_weight[k] = std::exp(3.0 * dot(pref, world.categories[k]));
    cat_total += cat_weight[k];
  }
  auto draw_category = [&](bool mix_uniform) {
    if (mix_uniform && rng.bernoulli(0.5)) return static_cast<int>(rng.below(n_cat));
    double r = rng.uniform() * cat_total;
    for (int k = 0; k < n_cat; ++k) {
      r -= cat_weight[k];
      if (r < 0.0) return k;
    }
    return n_cat - 1;
  };

  const double base_logit = logit(cfg.base_click_rate);
  std::vector<ClickedItem> clicked;
  std::vector<int> clicks_per_cat(n_cat, 0);
  std::vector<Event> out;
  out.reserve(n_total);

  for (int i = 0; i < n_total; ++i) {
    Event e;
    e.user_id = user;
    e.ts = ts[i];
    e.is_candidate = is_cand[i];
    e.channel = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_channels)));
    const int cat = draw_category(e.is_candidate);
    const int item = cat + n_cat * static_cast<int>(rng.below(n_item_per_cat));
    e.fields[field::kUserId] = std::to_string(user);
    e.fields[field::kUserGroup] = std::to_string(group);
    e.fields[field::kCategory] = std::to_string(cat);
    e.fields[field::kItemId] = std::to_string(item);
    e.fields[field::kHour] = std::to_string((e.ts / 3600) % 24);

    if (e.is_candidate) {
      double recency = 0.0;
      for (const auto& c : clicked) {
        const double half_life =
            cfg.channel_half_lives[c.channel % cfg.channel_half_lives.size()];
        const double w = std::exp2(-static_cast<double>(e.ts - c.ts) / half_life);
        const double sim =
            c.category == cat ? 1.0 : dot(world.categories[c.category], world.categories[cat]);
        recency += w * sim;
      }
      const double z = base_logit + cfg.recency_boost * std::tanh(recency) +
                       cfg.action_affinity_boost * std::log1p(clicks_per_cat[cat]) +
                       cfg.static_boost * world.group_bias[group];
      const double p = std::clamp(sigmoid(z), 0.01, 0.99);
      e.label = rng.bernoulli(p) ? 1 : 0;
      e.action = Action::kExposure;
    } else {
      const double p_click = sigmoid(logit(0.25) + 2.0 * dot(pref, world.categories[cat]));
      if (rng.bernoulli(p_click)) {
        e.action = Action::kClick;
        clicked.push_back({e.ts, cat, e.channel});
        ++clicks_per_cat[cat];
      } else {
        const double r = rng.uniform();
        e.action = r < 0.15 ? Action::kLike : (r < 0.45 ? Action::kSkip : Action::kExposure);
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace

std::string_view to_string(Action a) {
  switch (a) {
    case Action::kExposure: return "exposure";
    case Action::kClick: return "click";
    case Action::kLike: return "like";
    case Action::kSkip: return "skip";
  }
  return "exposure";
}

Action parse_action(std::string_view name) {
  if (name == "exposure") return Action::kExposure;
  if (name == "click") return Action::kClick;
  if (name == "like") return Action::kLike;
  if (name == "skip") return Action::kSkip;
  fail(ErrorKind::kParse, "unknown action '" + std::string(name) + "'");
}

void GenConfig::validate() const {
  auto bad = [](const std::string& field, const std::string& why) {
    fail(ErrorKind::kConfig, "gen." + field + ": " + why);
  };
  if (n_users == 0) bad("n_users", "must be positive");
  if (events_per_user_range.first < 0 || events_per_user_range.second < events_per_user_range.first)
    bad("events_per_user_range", "need 0 <= min <= max");
  if (n_candidates_per_user < 0) bad("n_candidates_per_user", "must be non-negative");
  if (!(base_click_rate > 0.0 && base_click_rate < 1.0))
    bad("base_click_rate", "must lie in (0, 1)");
  if (!(recency_boost >= 0.0)) bad("recency_boost", "must be non-negative");
  if (!(action_affinity_boost >= 0.0)) bad("action_affinity_boost", "must be non-negative");
  if (!(static_boost >= 0.0)) bad("static_boost", "must be non-negative");
  if (n_channels < 1) bad("n_channels", "must be >= 1");
  if (channel_half_lives.empty()) bad("channel_half_lives", "must be non-empty");
  for (double h : channel_half_lives)
    if (!(h > 0.0)) bad("channel_half_lives", "entries must be positive");
  for (const auto& [name, size] : field_vocab_sizes)
    if (size < 1) bad("field_vocab_sizes." + name, "must be >= 1");
  if (!(session_gap_mean >= 1.0)) bad("session_gap_mean", "must be >= 1");
  if (!(intra_session_gap_mean >= 1.0)) bad("intra_session_gap_mean", "must be >= 1");
  if (!(session_length_mean >= 1.0)) bad("session_length_mean", "must be >= 1");
}

std::vector<Event> generate_log(const GenConfig& cfg, int threads) {
  cfg.validate();
  const World world = make_world(cfg);
  std::vector<std::vector<Event>> per_user(cfg.n_users);
  parallel_for(cfg.n_users, threads,
               [&](std::size_t u) { per_user[u] = generate_user(cfg, world, u); });
  std::vector<Event> out;
  std::size_t total = 0;
  for (const auto& v : per_user) total += v.size();
  out.reserve(total);
  for (auto& v : per_user) std::move(v.begin(), v.end(), std::back_inserter(out));
  return out;
}

std::string to_json_line(const Event& e) {
  nlohmann::json j;
  j["user_id"] = e.user_id;
  j["ts"] = e.ts;
  j["action"] = std::string(to_string(e.action));
  j["channel"] = e.channel;
  j["fields"] = e.fields;
  j["label"] = e.label ? nlohmann::json(*e.label) : nlohmann::json(nullptr);
  j["is_candidate"] = e.is_candidate;
  return j.dump();
}

Event parse_json_line(std::string_view line, std::size_t line_no) {
  const std::string where = "line " + std::to_string(line_no) + ": ";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& ex) {
    fail(ErrorKind::kParse, where + "malformed JSON (" + ex.what() + ")");
  }
  if (!j.is_object()) fail(ErrorKind::kParse, where + "expected an object");
  auto need = [&](const char* key) -> const nlohmann::json& {
    auto it = j.find(key);
    if (it == j.end()) fail(ErrorKind::kParse, where + "missing key '" + key + "'");
    return *it;
  };
  Event e;
  try {
    const auto& uid = need("user_id");
    const auto& ts = need("ts");
    if (!uid.is_number_unsigned() && !(uid.is_number_integer() && uid.get<std::int64_t>() >= 0))
      fail(ErrorKind::kParse, where + "user_id must be a non-negative integer");
    if (!ts.is_number_integer() || ts.get<std::int64_t>() < 0)
      fail(ErrorKind::kParse, where + "ts must be a non-negative integer");
    e.user_id = uid.get<std::uint64_t>();
    e.ts = ts.get<std::int64_t>();
    const auto& action = need("action");
    if (!action.is_string()) fail(ErrorKind::kParse, where + "action must be a string");
    try {
      e.action = parse_action(action.get<std::string>());
    } catch (const Error& ex) {
      fail(ErrorKind::kParse, where + ex.what());
    }
    const auto& channel = need("channel");
    if (!channel.is_number_integer() || channel.get<std::int64_t>() < 0)
      fail(ErrorKind::kParse, where + "channel must be a non-negative integer");
    e.channel = channel.get<int>();
    const auto& fields = need("fields");
    if (!fields.is_object()) fail(ErrorKind::kParse, where + "fields must be an object");
    for (const auto& [k, v] : fields.items()) {
      if (!v.is_string()) fail(ErrorKind::kParse, where + "field '" + k + "' must be a string");
      e.fields[k] = v.get<std::string>();
    }
    const auto& cand = need("is_candidate");
    if (!cand.is_boolean()) fail(ErrorKind::kParse, where + "is_candidate must be a boolean");
    e.is_candidate = cand.get<bool>();
    const auto& label = need("label");
    if (label.is_null()) {
      if (e.is_candidate) fail(ErrorKind::kParse, where + "candidate without label");
    } else {
      if (!e.is_candidate) fail(ErrorKind::kParse, where + "history event carries a label");
      if (!label.is_number_integer() || (label.get<int>() != 0 && label.get<int>() != 1))
        fail(ErrorKind::kParse, where + "label must be 0 or 1");
      e.label = label.get<int>();
    }
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorKind::kParse, where + ex.what());
  }
  return e;
}

void write_log(std::span<const Event> events, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  for (const auto& e : events) out << to_json_line(e) << '\n';
  if (!out) fail(ErrorKind::kIo, "write failed for '" + path.string() + "'");
}

std::vector<Event> read_log(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open '" + path.string() + "'");
  std::vector<Event> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    out.push_back(parse_json_line(line, line_no));
  }
  return out;
}

}  // namespace grab
