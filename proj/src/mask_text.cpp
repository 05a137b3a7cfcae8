#include "grab/mask_text.hpp"

#include <charconv>
#include <map>
#include <set>
#include <sstream>

#include "grab/error.hpp"

namespace grab {

namespace {

std::vector<std::string> tokens_of(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ' ' || c == '\t' || c == ',' || c == '\r') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

template <typename I>
bool to_int(const std::string& s, I& out) {
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

std::string join_ints(const auto& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + std::to_string(v[i]);
  return out;
}

}  // namespace

LayoutSpec parse_layout_spec(std::string_view text) {
  std::map<std::string, std::pair<int, std::vector<std::string>>> values;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
    const auto eq = line.find('=');
    const auto toks = tokens_of(line.substr(0, eq == std::string::npos ? line.size() : eq));
    if (toks.empty() && eq == std::string::npos) continue;
    const std::string where = "layout line " + std::to_string(line_no) + ": ";
    if (eq == std::string::npos || toks.size() != 1) fail(ErrorKind::kConfig, where + "expected key = values");
    static const std::set<std::string> known{"seg", "local", "kind", "ts", "window_length", "window_time"};
    if (!known.count(toks[0])) fail(ErrorKind::kConfig, where + "unknown key '" + toks[0] + "'");
    if (values.count(toks[0])) fail(ErrorKind::kConfig, where + "duplicate key '" + toks[0] + "'");
    values[toks[0]] = {line_no, tokens_of(line.substr(eq + 1))};
  }
  if (!values.count("seg") || values["seg"].second.empty())
    fail(ErrorKind::kConfig, "layout: seg is required and non-empty");

  LayoutSpec spec;
  Layout& L = spec.layout;
  const auto& seg = values["seg"].second;
  const std::size_t n = seg.size();
  std::map<std::string, int> seg_index;
  for (std::size_t p = 0; p < n; ++p) {
    const bool new_run = p == 0 || seg[p] != seg[p - 1];
    if (new_run && seg_index.count(seg[p]))
      fail(ErrorKind::kConfig, "layout line " + std::to_string(values["seg"].first) + ": segment '" +
                                   seg[p] + "' is not contiguous");
    if (new_run) seg_index[seg[p]] = static_cast<int>(seg_index.size());
    L.seg.push_back(seg_index[seg[p]]);
    L.local.push_back(new_run ? 1 : L.local.back() + 1);
  }
  auto field = [&](const std::string& key) -> const std::vector<std::string>* {
    auto it = values.find(key);
    if (it == values.end()) return nullptr;
    if (it->second.second.size() != n)
      fail(ErrorKind::kConfig, "layout line " + std::to_string(it->second.first) + ": " + key + " has " +
                                   std::to_string(it->second.second.size()) + " entries, seg has " +
                                   std::to_string(n));
    return &it->second.second;
  };
  auto bad = [&](const std::string& key, const std::string& v) {
    fail(ErrorKind::kConfig, "layout line " + std::to_string(values[key].first) + ": bad " + key +
                                 " value '" + v + "'");
  };
  if (const auto* local = field("local")) {
    for (std::size_t p = 0; p < n; ++p) {
      int v = 0;
      if (!to_int((*local)[p], v) || v != L.local[p]) bad("local", (*local)[p]);
    }
  }
  L.kind.assign(n, TokenView::kPartial);
  if (const auto* kind = field("kind")) {
    for (std::size_t p = 0; p < n; ++p) {
      const auto& k = (*kind)[p];
      if (k == "P" || k == "partial") L.kind[p] = TokenView::kPartial;
      else if (k == "F" || k == "full") L.kind[p] = TokenView::kFull;
      else bad("kind", k);
    }
  }
  L.ts.assign(n, 0);
  if (const auto* ts = field("ts")) {
    for (std::size_t p = 0; p < n; ++p)
      if (!to_int((*ts)[p], L.ts[p]) || L.ts[p] < 0) bad("ts", (*ts)[p]);
  }
  L.assign_tindex();
  auto window_value = [&](const std::string& key, auto& slot) {
    auto it = values.find(key);
    if (it == values.end()) return;
    if (it->second.second.size() != 1) bad(key, "<list>");
    const auto& v = it->second.second[0];
    if (v == "none") return;
    typename std::remove_reference_t<decltype(slot)>::value_type x{};
    if (!to_int(v, x)) bad(key, v);
    slot = x;
  };
  window_value("window_length", spec.window.length);
  window_value("window_time", spec.window.time);
  try {
    spec.window.validate();
  } catch (const Error& e) {
    fail(ErrorKind::kConfig, std::string("layout: ") + e.what());
  }
  return spec;
}

std::vector<NamedMask> layout_masks(const LayoutSpec& spec) {
  const Layout& L = spec.layout;
  std::vector<NamedMask> out;
  out.emplace_back("causal", build_causal_mask(L.seg, L.local).allow);
  out.emplace_back("het", build_het_mask(L.kind, L.tindex, L.seg).allow);
  out.emplace_back("window", build_window_mask(L.seg, L.local, L.tindex, L.ts, spec.window).allow);
  out.emplace_back("model", build_model_mask(L, spec.window).allow);
  return out;
}

std::string format_mask_grids(const LayoutSpec& spec) {
  const Layout& L = spec.layout;
  std::string out = "layout n=" + std::to_string(L.size()) + "\n";
  out += "seg " + join_ints(L.seg) + "\n";
  out += "local " + join_ints(L.local) + "\n";
  out += "kind";
  for (auto k : L.kind) out += k == TokenView::kPartial ? " P" : " F";
  out += "\ntindex " + join_ints(L.tindex) + "\n";
  out += "ts " + join_ints(L.ts) + "\n";
  out += "window length=" + (spec.window.length ? std::to_string(*spec.window.length) : "none") +
         " time=" + (spec.window.time ? std::to_string(*spec.window.time) : "none") + "\n";
  for (const auto& [name, m] : layout_masks(spec)) {
    out += "\nmask " + name + " " + std::to_string(m.rows()) + "\n";
    for (Eigen::Index p = 0; p < m.rows(); ++p) {
      for (Eigen::Index q = 0; q < m.cols(); ++q) out += m(p, q) ? '1' : '.';
      out += '\n';
    }
  }
  return out;
}

std::vector<NamedMask> parse_mask_grids(std::string_view text) {
  std::vector<NamedMask> out;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.rfind("mask ", 0) != 0) continue;
    const auto toks = tokens_of(line);
    int n = 0;
    if (toks.size() != 3 || !to_int(toks[2], n) || n < 0)
      fail(ErrorKind::kParse, "grid line " + std::to_string(line_no) + ": bad mask header");
    num::MaskMat m = num::MaskMat::Constant(n, n, false);
    for (int p = 0; p < n; ++p) {
      ++line_no;
      if (!std::getline(in, line) || static_cast<int>(line.size()) != n)
        fail(ErrorKind::kParse, "grid line " + std::to_string(line_no) + ": expected " +
                                    std::to_string(n) + " cells");
      for (int q = 0; q < n; ++q) {
        if (line[q] == '1') m(p, q) = true;
        else if (line[q] != '.')
          fail(ErrorKind::kParse, "grid line " + std::to_string(line_no) + ": bad cell '" + line[q] + "'");
      }
    }
    out.emplace_back(toks[1], std::move(m));
  }
  return out;
}

}  // namespace grab
