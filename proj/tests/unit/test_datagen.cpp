#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "grab/datagen.hpp"
#include "grab/error.hpp"

using namespace grab;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("grab_datagen_" + name);
}

}  // namespace

TEST_CASE("generation is deterministic and thread-count independent") {
  GenConfig cfg;
  cfg.n_users = 50;
  cfg.recency_boost = 1.0;
  const auto a = generate_log(cfg, 1);
  const auto b = generate_log(cfg, 1);
  const auto c = generate_log(cfg, 4);
  CHECK(a == b);
  CHECK(a == c);
  const auto pa = temp_file("a.jsonl"), pb = temp_file("b.jsonl");
  write_log(a, pa);
  write_log(b, pb);
  std::ifstream fa(pa, std::ios::binary), fb(pb, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {});
  const std::string sb((std::istreambuf_iterator<char>(fb)), {});
  CHECK(sa == sb);
}

TEST_CASE("config counts are honoured") {
  GenConfig cfg;
  cfg.n_users = 1;
  cfg.events_per_user_range = {3, 3};
  cfg.n_candidates_per_user = 2;
  const auto log = generate_log(cfg);
  REQUIRE(log.size() == 5);
  int hist = 0, cand = 0;
  for (const auto& e : log) {
    CHECK(e.user_id == log[0].user_id);
    if (e.is_candidate) {
      ++cand;
      CHECK(e.label.has_value());
    } else {
      ++hist;
      CHECK_FALSE(e.label.has_value());
    }
  }
  CHECK(hist == 3);
  CHECK(cand == 2);
}

TEST_CASE("timestamps are non-decreasing within a user") {
  GenConfig cfg;
  cfg.n_users = 30;
  const auto log = generate_log(cfg);
  std::map<std::uint64_t, std::int64_t> last;
  for (const auto& e : log) {
    auto it = last.find(e.user_id);
    if (it != last.end()) CHECK(e.ts >= it->second);
    last[e.user_id] = e.ts;
  }
}

TEST_CASE("unplanted click rate matches the binomial oracle") {
  GenConfig cfg;
  cfg.n_users = 5000;
  cfg.n_candidates_per_user = 10;
  cfg.base_click_rate = 0.1;
  const auto log = generate_log(cfg);
  double n = 0, k = 0;
  for (const auto& e : log)
    if (e.is_candidate) {
      n += 1;
      k += *e.label;
    }
  CHECK(n == 50000);
  const double sd = std::sqrt(n * 0.1 * 0.9);
  CHECK(std::abs(k - 0.1 * n) <= 3 * sd);
}

TEST_CASE("recent same-category clicks raise the click rate") {
  GenConfig cfg;
  cfg.n_users = 2000;
  cfg.n_candidates_per_user = 10;
  cfg.recency_boost = 3.0;
  cfg.seed = 3;
  const auto log = generate_log(cfg);
  // Age of the most recent same-category click before each candidate.
  std::vector<std::pair<std::int64_t, int>> aged;
  std::map<std::uint64_t, std::map<std::string, std::int64_t>> last_click;
  for (const auto& e : log) {
    const auto& cat = e.fields.at(field::kCategory);
    if (e.is_candidate) {
      auto& m = last_click[e.user_id];
      if (auto it = m.find(cat); it != m.end()) aged.emplace_back(e.ts - it->second, *e.label);
    } else if (e.action == Action::kClick) {
      last_click[e.user_id][cat] = e.ts;
    }
  }
  REQUIRE(aged.size() > 3000);
  std::sort(aged.begin(), aged.end());
  const std::size_t t = aged.size() / 3;
  double recent = 0, old = 0;
  for (std::size_t i = 0; i < t; ++i) recent += aged[i].second;
  for (std::size_t i = aged.size() - t; i < aged.size(); ++i) old += aged[i].second;
  CHECK(recent > old);
}

TEST_CASE("log round trip is the identity") {
  GenConfig cfg;
  cfg.n_users = 20;
  cfg.n_channels = 3;
  const auto log = generate_log(cfg);
  const auto p = temp_file("rt.jsonl");
  write_log(log, p);
  CHECK(read_log(p) == log);

  write_log({}, p);
  CHECK(read_log(p).empty());

  std::vector<Event> actions;
  for (Action a : {Action::kExposure, Action::kClick, Action::kLike, Action::kSkip}) {
    Event e;
    e.action = a;
    e.fields["category"] = "";
    actions.push_back(e);
  }
  write_log(actions, p);
  CHECK(read_log(p) == actions);
}

TEST_CASE("malformed lines are parse errors citing the line") {
  const auto p = temp_file("bad.jsonl");
  GenConfig cfg;
  cfg.n_users = 1;
  cfg.events_per_user_range = {2, 2};
  write_log(generate_log(cfg), p);
  {
    std::ofstream out(p, std::ios::app);
    out << "{\"user_id\": 0, \"ts\": 1";
  }
  try {
    read_log(p);
    FAIL("expected a parse error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kParse);
    CHECK(std::string(e.what()).find("line 13") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_json_line(R"({"user_id":0,"ts":0,"action":"poke","channel":0,"fields":{},"label":null,"is_candidate":false})", 1),
                  Error);
}

TEST_CASE("invalid configs name the field") {
  GenConfig cfg;
  cfg.base_click_rate = 1.5;
  try {
    cfg.validate();
    FAIL("expected a config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kConfig);
    CHECK(std::string(e.what()).find("gen.base_click_rate") != std::string::npos);
  }
}
